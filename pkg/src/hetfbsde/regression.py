"""Least-squares projections onto polynomial bases of (X_j, chi_0)."""
import numpy as np
from scipy import linalg

_RANK_TOL = 1e-10
_RIDGE = 1e-10

BASES = {
    "constant": {"degree": 0, "chi0": False},
    "linear": {"degree": 1, "chi0": False},
    "linear_chi0": {"degree": 1, "chi0": True},
    "quadratic": {"degree": 2, "chi0": True},
}


def basis_spec(spec):
    if isinstance(spec, str):
        if spec not in BASES:
            raise ValueError(f"unknown basis {spec!r}")
        return dict(BASES[spec])
    out = {"degree": int(spec.get("degree", 2)), "chi0": bool(spec.get("chi0", True))}
    if out["degree"] not in (0, 1, 2):
        raise ValueError("basis degree must be 0, 1 or 2")
    return out


def design(x, chi0, spec):
    """Columns 1, x, x_i x_j (i <= j) and chi0 as requested; shape (N, p)."""
    spec = basis_spec(spec)
    N, n = x.shape
    cols = [np.ones((N, 1))]
    if spec["degree"] >= 1:
        cols.append(x)
    if spec["degree"] >= 2:
        iu, ju = np.triu_indices(n)
        cols.append(x[:, iu] * x[:, ju])
    if spec["chi0"]:
        cols.append(chi0)
    return np.hstack(cols)


class Projector:
    """Orthogonal projection onto span(Phi).

    Full column rank uses a pivoted QR.  A rank-deficient design falls back to
    ridge-regularised normal equations and sets ``ridge = True``.
    """

    def __init__(self, Phi):
        self.Phi = Phi
        N, p = Phi.shape
        Q, R, _ = linalg.qr(Phi, mode="economic", pivoting=True)
        diag = np.abs(np.diag(R))
        rank = int(np.sum(diag > _RANK_TOL * max(diag[0], 1e-300))) if diag.size else 0
        self.ridge = rank < p
        if not self.ridge:
            self.Q = Q
        else:
            G = Phi.T @ Phi
            lam = _RIDGE * max(np.trace(G) / p, 1e-300)
            self.cho = linalg.cho_factor(G + lam * np.eye(p))

    def __call__(self, Y):
        """Fitted values for each column of Y (shape (N,) or (N, r))."""
        if not self.ridge:
            return self.Q @ (self.Q.T @ Y)
        return self.Phi @ linalg.cho_solve(self.cho, self.Phi.T @ Y)
