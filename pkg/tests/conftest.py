import math

import numpy as np
import pytest
from scipy.optimize import linprog

from hetfbsde.measures import build_type_atlas


def lp_w2(pa, wa, pb, wb):
    """Transport LP with dense equality constraints, solved by interior point."""
    pa, pb = np.atleast_2d(pa), np.atleast_2d(pb)
    if pa.shape[0] != len(wa):
        pa, pb = pa.T, pb.T
    P, Q = len(wa), len(wb)
    c = ((pa[:, None, :] - pb[None, :, :]) ** 2).sum(-1).ravel()
    A = np.zeros((P + Q, P * Q))
    for i in range(P):
        A[i, i * Q : (i + 1) * Q] = 1.0
    for j in range(Q):
        A[P + j, j::Q] = 1.0
    tight = {"primal_feasibility_tolerance": 1e-10, "dual_feasibility_tolerance": 1e-10, "ipm_optimality_tolerance": 1e-12}
    res = linprog(c, A_eq=A, b_eq=np.concatenate([wa, wb]), bounds=(0, None), method="highs-ipm", options=tight)
    assert res.success
    return math.sqrt(max(res.fun, 0.0))


@pytest.fixture
def grid_atlas():
    def make(M=2, low=0.0, high=1.0):
        return build_type_atlas({"mode": "grid", "count": M, "distribution": {"kind": "uniform", "low": low, "high": high}})

    return make
