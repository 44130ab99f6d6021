"""Command-line entry point: ``dalupi {gen,train,eval,oracle,bound,experiment}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any

import numpy as np

from .bounds import PacBayesInputs, Prop2Inputs, pacbayes_bound, prop2_bound
from .harness import ConfigError, ExperimentSpec, evaluate_model, fit_setting, run_experiment
from .learners import Predictor
from .oracle import (
    RiskLoss,
    TabularHypothesis,
    Unidentified,
    check_assumptions,
    identified_target_risk,
    minimal_gamma,
    optimal_hypothesis,
    raw_gamma_ratio,
    relaxed_sufficiency_bound,
    true_target_risk,
)
from .taskgen import WorldGenSpec, build_task, gen_world
from .twostage import Setting, TwoStageModel
from .world import DiscreteWorld, SampleSet, dump_json, load_json

EXIT_OK, EXIT_FAILED, EXIT_CONFIG = 0, 1, 2


def _read_json(path: str) -> Any:
    with open(path) as fh:
        return json.load(fh)


def _parse_params(items: list[str]) -> dict[str, Any]:
    """``key=value`` pairs; values are parsed as JSON when possible."""
    out = {}
    for item in items:
        key, sep, raw = item.partition("=")
        if not sep:
            raise SystemExit(f"expected key=value, got {item!r}")
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    return out


def _write_json(obj: Any, path: str | None) -> None:
    text = json.dumps(obj, sort_keys=True, indent=2) + "\n"
    if path:
        Path(path).write_text(text)
    else:
        sys.stdout.write(text)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_gen(args) -> int:
    params = _parse_params(args.param)
    if args.seed is not None:
        params["seed"] = args.seed
    if args.kind == "world":
        world = gen_world(WorldGenSpec(**params))
        dump_json(world, args.out)
        return EXIT_OK
    data = build_task(args.kind, params)
    dump_json(data, args.out)
    # ground truth kept next to the samples for audits
    _write_json(data.metadata, str(Path(args.out).with_suffix(".meta.json")))
    return EXIT_OK


def _load_samples(path: str) -> SampleSet:
    data = load_json(path)
    if not isinstance(data, SampleSet):
        raise SystemExit(f"{path} does not hold a sample set")
    return data


def _load_model(path: str):
    d = _read_json(path)
    if d.get("format") == "dalupi-twostage/1":
        return TwoStageModel.from_dict(d)
    return Predictor.from_dict(d)


def cmd_train(args) -> int:
    data = _load_samples(args.samples)
    overrides = _read_json(args.config) if args.config else {}
    spec = ExperimentSpec.from_dict({"task": {"samples_path": args.samples}, "settings": [args.setting],
                                     **overrides})
    seed = args.seed if args.seed is not None else spec.seeds[0]
    model = fit_setting(spec, data, Setting(args.setting), seed)
    _write_json(model.to_dict(), args.out)
    return EXIT_OK


def cmd_eval(args) -> int:
    data = _load_samples(args.samples)
    model = _load_model(args.model)
    _write_json(evaluate_model(model, data, ["accuracy", "auc"]), args.out)
    return EXIT_OK


def _hypothesis(world: DiscreteWorld, spec: str | None) -> TabularHypothesis:
    if spec is None or spec == "optimal":
        return optimal_hypothesis(world)
    values = json.loads(Path(spec).read_text()) if Path(spec).exists() else json.loads(spec)
    return TabularHypothesis(np.asarray(values, dtype=float))


def cmd_oracle(args) -> int:
    world = load_json(args.world)
    if not isinstance(world, DiscreteWorld):
        raise SystemExit(f"{args.world} does not hold a discrete world")
    out: dict[str, Any] = {"assumptions": check_assumptions(world, args.tol).to_dict()}
    try:
        h = _hypothesis(world, args.hypothesis)
        out["hypothesis"] = h.values.tolist()
        out["true_target_risk"] = true_target_risk(world, h, args.loss)
        out["identified_target_risk"] = identified_target_risk(world, h, args.loss)
        out["optimal_hypothesis"] = optimal_hypothesis(world).values.tolist()
        out["raw_gamma_ratio"] = raw_gamma_ratio(world)
        out["minimal_gamma"] = minimal_gamma(world)
        out["relaxed_sufficiency_bound"] = relaxed_sufficiency_bound(world, h, out["minimal_gamma"], args.loss)
    except Unidentified as e:
        out["unidentified"] = {"message": str(e), "violating_w": e.violating_w}
    except ZeroDivisionError as e:
        out["gamma_undefined"] = str(e)
    _write_json(out, args.out)
    return EXIT_OK


def cmd_bound(args) -> int:
    inputs = _read_json(args.inputs)
    if args.kind == "prop2":
        res = prop2_bound(Prop2Inputs(**inputs))
    elif args.kind == "pacbayes":
        res = pacbayes_bound(PacBayesInputs(**inputs))
    else:
        w = inputs["world"]
        world = load_json(w) if isinstance(w, str) else DiscreteWorld.from_dict(w)
        loss = inputs.get("loss", RiskLoss.SQUARED.value)
        h = _hypothesis(world, json.dumps(inputs["hypothesis"]) if "hypothesis" in inputs else None)
        gamma = inputs.get("gamma") or minimal_gamma(world)
        total = relaxed_sufficiency_bound(world, h, gamma, loss)
        terms = {"gamma": gamma, "identified_target_risk": identified_target_risk(world, h, loss)}
        if args.json:
            _write_json({"terms": terms, "total": total}, args.out)
        else:
            for k, v in terms.items():
                print(f"{k:<24}  {v:.10g}")
            print(f"{'total':<24}  {total:.10g}")
        return EXIT_OK
    if args.json:
        _write_json(res.to_dict(), args.out)
    else:
        print("\n".join(res.lines()))
    return EXIT_OK


def cmd_experiment(args) -> int:
    d = _read_json(args.spec)
    if args.seed is not None:
        d["seeds"] = [args.seed]
    if args.workers is not None:
        d["workers"] = args.workers
    spec = ExperimentSpec.from_dict(d)
    result = run_experiment(spec)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "results.json").write_text(result.to_json())
    (out / "results.csv").write_text(result.to_csv())
    for c in result.cells:
        if c["status"] != "ok":
            print(f"failed: {c['setting']} sweep={c['sweep_value']} seed={c['seed']}: {c['error']}", file=sys.stderr)
    return EXIT_OK if result.all_ok else EXIT_FAILED


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dalupi", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log at INFO level")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a task sample set or a discrete world")
    p.add_argument("--kind", choices=["skew", "attribute", "world"], required=True)
    p.add_argument("--param", action="append", default=[], metavar="KEY=VALUE",
                   help="generator parameter; value parsed as JSON when possible")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train one setting on a stored sample set")
    p.add_argument("--samples", required=True)
    p.add_argument("--setting", choices=[s.value for s in Setting], required=True)
    p.add_argument("--config", help="JSON with experiment-spec training fields")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a trained model on the test roles")
    p.add_argument("--model", required=True)
    p.add_argument("--samples", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("oracle", help="assumption report and exact risks of a discrete world")
    p.add_argument("--world", required=True)
    p.add_argument("--hypothesis", help="'optimal', a JSON list, or a path to one")
    p.add_argument("--loss", choices=[r.value for r in RiskLoss], default=RiskLoss.SQUARED.value)
    p.add_argument("--tol", type=float, default=1e-9)
    p.add_argument("--out")
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("bound", help="evaluate a bound term by term")
    p.add_argument("--kind", choices=["prop2", "pacbayes", "relaxed"], required=True)
    p.add_argument("--inputs", required=True, help="JSON file with the bound's inputs")
    p.add_argument("--json", action="store_true", help="emit JSON instead of aligned text")
    p.add_argument("--out")
    p.set_defaults(func=cmd_bound)

    p = sub.add_parser("experiment", help="run a full experiment spec")
    p.add_argument("--spec", required=True)
    p.add_argument("--seed", type=int, help="run only this seed")
    p.add_argument("--workers", type=int)
    p.add_argument("--out-dir", default=".")
    p.set_defaults(func=cmd_experiment)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(str(e), file=sys.stderr)
        return EXIT_CONFIG
    except (ValueError, KeyError, TypeError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
