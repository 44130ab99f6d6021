import numpy as np
import pytest

from dalupi.world import DiscreteWorld


def make_world(spx, tpx, spwx, tpwx, spy, tpy, y_values=None):
    arr = lambda v: np.array(v, dtype=float)  # noqa: E731
    kw = {} if y_values is None else {"y_values": arr(y_values)}
    return DiscreteWorld(arr(spx), arr(tpx), arr(spwx), arr(tpwx), arr(spy), arr(tpy), **kw)


@pytest.fixture
def two_point_world():
    """w = x, P(y=1|w) = (0.1, 0.8), identical domains with T(x) uniform."""
    px = [0.5, 0.5]
    pwx = [[1, 0], [0, 1]]
    py = [[[0.9, 0.1], [0.9, 0.1]], [[0.2, 0.8], [0.2, 0.8]]]
    return make_world(px, px, pwx, pwx, py, py)


@pytest.fixture
def hand_world():
    """2x2x2 world, labeling-invariant in W, insufficient in both domains.

    Target sup-ratio over source sup-ratio peaks at (w=0, y=0) with 9/8.
    """
    pwx = [[0.5, 0.5], [0.5, 0.5]]
    s = [[[0.8, 0.2], [0.4, 0.6]], [[0.5, 0.5], [0.5, 0.5]]]
    t = [[[0.9, 0.1], [0.5, 0.5]], [[0.5, 0.5], [0.5, 0.5]]]
    return make_world([0.5, 0.5], [0.25, 0.75], pwx, pwx, s, t)
