"""Particle solver for the heterogeneous mean-field FBSDE.

Forward: Euler-Maruyama.  Backward: least-squares Monte Carlo on a polynomial
basis of (X_j, chi_0).  The measure flow is found by Picard iteration with
common random numbers, so every outer step reuses the same Brownian paths.
"""
import csv
import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import rng as _rng
from .errors import DivergenceError, InvalidInput
from .measures import BLOCK_NAMES, kernel_from_points, wasserstein2_m_detail, DEFAULT_CAP
from .models import InitialLaw
from .regression import Projector, basis_spec, design


@dataclass(frozen=True)
class TimeGrid:
    T: float
    steps: int

    def __post_init__(self):
        if not (np.isfinite(self.T) and self.T > 0):
            raise InvalidInput("horizon T must be positive")
        if int(self.steps) != self.steps or self.steps < 1:
            raise InvalidInput("steps must be a positive integer")

    @property
    def dt(self):
        return self.T / self.steps

    @property
    def times(self):
        return np.linspace(0.0, self.T, self.steps + 1)


@dataclass
class NoiseEnsemble:
    """Brownian increments dB (M, N, S, d) and initial samples chi0 (M, N, n)."""

    atlas: object
    grid: TimeGrid
    dB: np.ndarray
    chi0: np.ndarray
    seed: int = 0

    @property
    def N(self):
        return self.dB.shape[1]

    @property
    def d(self):
        return self.dB.shape[3]


def simulate_noise(atlas, N, grid, seed, d=1, initial=None, n=1):
    """Per-particle blocks of a counter-based stream: growing N only appends paths."""
    if int(N) != N or N < 1:
        raise InvalidInput("particle count N must be a positive integer")
    initial = initial or InitialLaw()
    S = grid.steps
    dB = np.empty((atlas.M, N, S, d))
    for i in range(atlas.M):
        dB[i] = _rng.normal_blocks(seed, "increments", i, N, S * d).reshape(N, S, d)
    dB *= np.sqrt(grid.dt)
    chi0 = initial.sample(atlas, N, n, seed)
    return NoiseEnsemble(atlas, grid, dB, chi0, seed)


@dataclass
class TrajectoryEnsemble:
    """Particle paths; arrays have shape (M, N, steps+1, width)."""

    atlas: object
    grid: TimeGrid
    noise: NoiseEnsemble
    X: np.ndarray
    Y: np.ndarray
    Z: np.ndarray
    A: np.ndarray

    def theta(self, j):
        return np.concatenate([self.X[:, :, j], self.Y[:, :, j], self.Z[:, :, j], self.A[:, :, j]], axis=-1)

    def points(self):
        return np.concatenate([self.X, self.Y, self.Z, self.A], axis=-1)

    @property
    def N(self):
        return self.X.shape[1]


class KernelFlow:
    """Time-indexed per-type laws of theta, stored as particle clouds.

    ``contexts(model)`` turns the flow into frozen model contexts, one per
    node plus the terminal X-marginal.  ``override`` lets a damped Picard
    step substitute mixed contexts.
    """

    def __init__(self, atlas, points, dims, override=None):
        self.atlas = atlas
        self.points = np.asarray(points, float)
        self.dims = dims
        self.override = override
        self._cache = {}

    @classmethod
    def from_ensemble(cls, ens, dims):
        return cls(ens.atlas, ens.points(), dims)

    @property
    def nodes(self):
        return self.points.shape[2]

    def kernel(self, j):
        blocks = tuple(zip(BLOCK_NAMES, (self.dims.n, self.dims.l, self.dims.lz, self.dims.k)))
        return kernel_from_points(self.atlas, self.points[:, :, j], blocks)

    def terminal_kernel(self):
        return kernel_from_points(self.atlas, self.points[:, :, -1, : self.dims.n], (("x", self.dims.n),))

    def contexts(self, model):
        if self.override is not None:
            return self.override
        hit = self._cache.get(id(model))
        if hit is None:
            ctx = [model.context(self.atlas, self.points[:, :, j]) for j in range(self.nodes)]
            tctx = model.terminal_context(self.atlas, self.points[:, :, -1, : self.dims.n])
            hit = self._cache[id(model)] = (ctx, tctx)
        return hit


def initial_flow(model, control, noise):
    """X frozen at chi0, Y = Z = 0, alpha = control(chi0)."""
    d = model.dims
    M, N = noise.chi0.shape[:2]
    S = noise.grid.steps
    X = np.broadcast_to(noise.chi0[:, :, None, :], (M, N, S + 1, d.n))
    A = np.stack([control_values(control, j, noise.chi0, noise.chi0, d.k) for j in range(S + 1)], axis=2)
    pts = np.concatenate([X, np.zeros((M, N, S + 1, d.l + d.lz)), A], axis=-1)
    return KernelFlow(noise.atlas, pts, d)


def control_values(control, j, x, chi0, k):
    if control is None:
        return np.zeros(x.shape[:2] + (k,))
    a = np.asarray(control.evaluate(j, x, chi0), float)
    if a.shape != x.shape[:2] + (k,):
        raise InvalidInput(f"control returned shape {a.shape}, expected {x.shape[:2] + (k,)}")
    return a


def control_path(control, X, noise, k):
    return np.stack([control_values(control, j, X[:, :, j], noise.chi0, k) for j in range(X.shape[2])], axis=2)


def _pack(X, Y, Z, A, j):
    return np.concatenate([X[:, :, j], Y[:, :, j], Z[:, :, j], A[:, :, j]], axis=-1)


def _euler_increment(model, t, th, ctx, dB, n, d):
    b = model.drift(t, th, ctx)
    s = model.diffusion(t, th, ctx).reshape(th.shape[:2] + (n, d))
    return b, s


def _check_finite(arr, stage, step, what):
    if not np.all(np.isfinite(arr)):
        raise DivergenceError(f"{what} became non-finite at step {step}", stage=stage, step=step)


def solve_forward(model, control, yz, flow, noise, contexts=None):
    """Euler scheme for X given (Y, Z) paths (None means zero).  Returns X."""
    d = model.dims
    grid = noise.grid
    M, N = noise.chi0.shape[:2]
    S, dt = grid.steps, grid.dt
    if yz is None:
        Y = np.zeros((M, N, S + 1, d.l))
        Z = np.zeros((M, N, S + 1, d.lz))
    else:
        Y, Z = yz
    ctx = (contexts or flow.contexts(model))[0]
    X = np.empty((M, N, S + 1, d.n))
    X[:, :, 0] = noise.chi0
    times = grid.times
    for j in range(S):
        a = control_values(control, j, X[:, :, j], noise.chi0, d.k)
        th = np.concatenate([X[:, :, j], Y[:, :, j], Z[:, :, j], a], axis=-1)
        b, s = _euler_increment(model, times[j], th, ctx[j], None, d.n, noise.d)
        X[:, :, j + 1] = X[:, :, j] + b * dt + np.einsum("mnij,mnj->mni", s, noise.dB[:, :, j])
        _check_finite(X[:, :, j + 1], "forward", j + 1, "X")
    return X


def _projectors(X, chi0, basis, j):
    out = []
    for i in range(X.shape[0]):
        spec = basis_spec(basis)
        if spec["chi0"] and np.array_equal(X[i, :, j], chi0[i]):
            spec["chi0"] = False  # X_0 = chi0: the extra columns would only duplicate x
        out.append(Projector(design(X[i, :, j], chi0[i], spec)))
    return out


def _apply(projs, arr):
    """Project arr (M, N, r) type by type."""
    return np.stack([P(arr[i]) for i, P in enumerate(projs)])


def conditional_z(projs, target, pred, dB, dt, z_control="conditional"):
    """Regression estimate of E_j[target dB^T]/dt, flattened to (M, N, r*d).

    ``conditional`` subtracts the fitted conditional mean of ``target`` (a
    zero-mean control variate); ``none`` regresses the raw product.
    """
    centred = target - pred if z_control == "conditional" else target
    prod = np.einsum("mnr,mnd->mnrd", centred, dB) / dt
    M, N, r, d = prod.shape
    return _apply(projs, prod.reshape(M, N, r * d))


def solve_backward(
    model,
    control,
    X,
    flow,
    noise,
    basis="quadratic",
    contexts=None,
    A=None,
    implicit_iters=2,
    z_control="conditional",
):
    """Least-squares Monte Carlo for (Y, Z) given X.

    Returns ``(Y, Z, info)``; ``info`` carries ridge-fallback counts, the
    regression residual and a bound on the backward defect.
    """
    d = model.dims
    grid = noise.grid
    M, N = X.shape[:2]
    S, dt = grid.steps, grid.dt
    times = grid.times
    basis = basis_spec(basis)
    ctx, tctx = contexts or flow.contexts(model)
    if A is None:
        A = control_path(control, X, noise, d.k)
    Y = np.empty((M, N, S + 1, d.l))
    Z = np.zeros((M, N, S + 1, d.lz))
    Y[:, :, S] = model.terminal(X[:, :, S], tctx)
    _check_finite(Y[:, :, S], "backward", S, "terminal Y")
    ridge = 0
    res_sq = np.zeros(M)
    zdb_sq = np.zeros(M)
    for j in range(S - 1, -1, -1):
        projs = _projectors(X, noise.chi0, basis, j)
        ridge += sum(P.ridge for P in projs)
        Yn = Y[:, :, j + 1]
        pred = _apply(projs, Yn)
        Z[:, :, j] = conditional_z(projs, Yn, pred, noise.dB[:, :, j], dt, z_control)
        y = pred
        for _ in range(max(int(implicit_iters), 1)):
            th = np.concatenate([X[:, :, j], y, Z[:, :, j], A[:, :, j]], axis=-1)
            y = _apply(projs, Yn + model.driver(times[j], th, ctx[j]) * dt)
        Y[:, :, j] = y
        _check_finite(Y[:, :, j], "backward", j, "Y")
        _check_finite(Z[:, :, j], "backward", j, "Z")
        th = np.concatenate([X[:, :, j], y, Z[:, :, j], A[:, :, j]], axis=-1)
        r = Yn + model.driver(times[j], th, ctx[j]) * dt - y
        zdb = np.einsum("mnld,mnd->mnl", Z[:, :, j].reshape(M, N, d.l, noise.d), noise.dB[:, :, j])
        res_sq += np.mean(np.sum(r**2, -1), 1) / S
        zdb_sq += np.mean(np.sum(zdb**2, -1), 1) / S
    Z[:, :, S] = Z[:, :, S - 1]
    w = noise.atlas.weights
    res = float(np.sqrt(w @ res_sq))
    info = {
        "ridge_fallbacks": int(ridge),
        "regression_residual": res,
        "backward_defect_bound": res + float(np.sqrt(w @ zdb_sq)),
    }
    return Y, Z, info


@dataclass
class PicardOptions:
    max_outer: int = 20
    tol: float = 1e-4
    inner: int = 5
    inner_tol: float | None = None
    damping: float = 1.0
    basis: object = "quadratic"
    implicit_iters: int = 2
    z_control: str = "conditional"
    cap: int = DEFAULT_CAP

    def __post_init__(self):
        if self.max_outer < 1 or self.inner < 1:
            raise InvalidInput("iteration limits must be positive")
        if not 0 < self.damping <= 1:
            raise InvalidInput("damping must lie in (0, 1]")
        if not self.tol > 0:
            raise InvalidInput("tolerance must be positive")
        basis_spec(self.basis)


@dataclass
class PicardDiagnostics:
    distances: list = field(default_factory=list)
    converged: bool = False
    outer_iterations: int = 0
    inner_iterations: list = field(default_factory=list)
    ridge_fallbacks: int = 0
    regression_residual: float = 0.0
    backward_defect_bound: float = 0.0
    subsampled: bool = False
    best_iteration: int = 0

    def to_dict(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def _rms(a, w):
    return float(np.sqrt(w @ np.mean(np.sum(a.reshape(a.shape[0], a.shape[1], -1) ** 2, -1), 1)))


def inner_solve(model, control, noise, contexts, opts):
    """Forward/backward sweeps for a frozen flow, cold-started at Y = Z = 0."""
    d = model.dims
    w = noise.atlas.weights
    tol = opts.inner_tol if opts.inner_tol is not None else opts.tol / 10
    decoupled = model.forward_decoupled(noise.atlas)
    yz, info, X = None, {}, None
    it = 0
    for it in range(1, opts.inner + 1):
        X_new = solve_forward(model, control, yz, None, noise, contexts)
        A = control_path(control, X_new, noise, d.k)
        Y, Z, info = solve_backward(
            model, control, X_new, None, noise, opts.basis, contexts, A, opts.implicit_iters, opts.z_control
        )
        change = np.inf if X is None else _rms(X_new - X, w) + _rms(Y - yz[0], w) + _rms(Z - yz[1], w)
        X, yz = X_new, (Y, Z)
        if decoupled or change < tol:
            break
    ens = TrajectoryEnsemble(noise.atlas, noise.grid, noise, X, yz[0], yz[1], A)
    return ens, info, it


def flow_distance(fa, fb, cap=DEFAULT_CAP):
    """sup over nodes of W2,m between two flows; also whether any node subsampled."""
    best, flagged = 0.0, False
    for j in range(fa.nodes):
        v, _, fl = wasserstein2_m_detail(fa.kernel(j), fb.kernel(j), cap)
        best = max(best, v)
        flagged = flagged or fl
    return best, flagged


def picard_solve(model, control, atlas, N, grid, seed, opts=None, initial=None, noise=None):
    """Fixed point of the measure flow.

    Returns ``(ensemble, flow, diagnostics)``.  ``flow`` is the input flow
    whose frozen solve produced ``ensemble`` (for measure-free models, the
    ensemble's own flow).  ``distances[k]`` is W2,m(flow^k, flow^{k+1}).
    """
    opts = opts or PicardOptions()
    d = model.dims
    if abs(grid.T - model.T) > 1e-12 * max(1.0, model.T):
        raise InvalidInput(f"grid horizon {grid.T} differs from model horizon {model.T}")
    if noise is None:
        noise = simulate_noise(atlas, N, grid, seed, d.d, initial, d.n)
    diag = PicardDiagnostics()
    flow = initial_flow(model, control, noise)
    if model.measure_free:
        ens, info, it = inner_solve(model, control, noise, flow.contexts(model), opts)
        diag.distances = [0.0]
        diag.converged = True
        diag.outer_iterations = 1
        diag.inner_iterations = [it]
        _absorb(diag, info)
        return ens, KernelFlow.from_ensemble(ens, d), diag
    best = None
    for k in range(opts.max_outer):
        ctx = flow.contexts(model)
        ens, info, it = inner_solve(model, control, noise, ctx, opts)
        new = KernelFlow.from_ensemble(ens, d)
        dist, flagged = flow_distance(flow, new, opts.cap)
        diag.distances.append(dist)
        diag.inner_iterations.append(it)
        diag.subsampled = diag.subsampled or flagged
        diag.outer_iterations = k + 1
        if not np.isfinite(dist):
            raise DivergenceError("flow distance is not finite", stage="picard", step=k, history=diag.distances)
        if best is None or dist < best[0]:
            best = (dist, ens, flow, info, k)
        if dist < opts.tol:
            diag.converged = True
            break
        if opts.damping < 1.0:
            new_ctx, new_t = new.contexts(model)
            mixed = ([c.mix(n, opts.damping) for c, n in zip(ctx[0], new_ctx)], ctx[1].mix(new_t, opts.damping))
            new = KernelFlow(atlas, new.points, d, override=mixed)
        flow = new
    dist, ens, flow, info, k = best
    diag.best_iteration = k
    _absorb(diag, info)
    return ens, flow, diag


def _absorb(diag, info):
    diag.ridge_fallbacks = info.get("ridge_fallbacks", 0)
    diag.regression_residual = info.get("regression_residual", 0.0)
    diag.backward_defect_bound = info.get("backward_defect_bound", 0.0)


def residual(ensemble, flow, model, control=None):
    """Weighted L2 defects of the forward and backward Euler relations.

    Defect squared = sum_u m_u mean_i mean_j |e|^2 over the steps.
    Returns ``{"forward": ..., "backward": ...}``.
    """
    d = model.dims
    noise, grid = ensemble.noise, ensemble.grid
    X, Y, Z = ensemble.X, ensemble.Y, ensemble.Z
    A = ensemble.A if control is None else control_path(control, X, noise, d.k)
    M, N = X.shape[:2]
    S, dt = grid.steps, grid.dt
    ctx, tctx = flow.contexts(model)
    w = ensemble.atlas.weights
    fwd = np.zeros(M)
    bwd = np.zeros(M)
    for j in range(S):
        th = _pack(X, Y, Z, A, j)
        b, s = _euler_increment(model, grid.times[j], th, ctx[j], None, d.n, noise.d)
        pred = X[:, :, j] + b * dt + np.einsum("mnij,mnj->mni", s, noise.dB[:, :, j])
        fwd += np.mean(np.sum((X[:, :, j + 1] - pred) ** 2, -1), 1) / S
        f = model.driver(grid.times[j], th, ctx[j])
        zdb = np.einsum("mnld,mnd->mnl", Z[:, :, j].reshape(M, N, d.l, noise.d), noise.dB[:, :, j])
        e = Y[:, :, j + 1] - Y[:, :, j] + f * dt - zdb
        bwd += np.mean(np.sum(e**2, -1), 1) / S
    term = Y[:, :, S] - model.terminal(X[:, :, S], tctx)
    return {
        "forward": float(np.sqrt(w @ fwd)),
        "backward": float(np.sqrt(w @ bwd)),
        "terminal": _rms(term, w),
    }


# ---------------------------------------------------------------------------
# export


def _labels(atlas):
    return [u if isinstance(u, (int, float, str)) else json.dumps(u) for u in atlas.types]


def write_trajectories(ensemble, outdir, diagnostics=None, dims=None):
    """One CSV per type (particle, step, t, x_*, y_*, z_*, a_*) plus a JSON summary."""
    os.makedirs(outdir, exist_ok=True)
    names = []
    for blk, arr in zip(BLOCK_NAMES, (ensemble.X, ensemble.Y, ensemble.Z, ensemble.A)):
        names += [f"{blk}_{c}" for c in range(arr.shape[-1])]
    pts = ensemble.points()
    M, N, S1, D = pts.shape
    times = ensemble.grid.times
    files = []
    for i in range(M):
        path = os.path.join(outdir, f"trajectories_type{i}.csv")
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["particle", "step", "t"] + names)
            for p in range(N):
                for j in range(S1):
                    wr.writerow([p, j, repr(float(times[j]))] + [repr(float(v)) for v in pts[i, p, j]])
        files.append(os.path.basename(path))
    summary = {
        "types": _labels(ensemble.atlas),
        "weights": ensemble.atlas.weights.tolist(),
        "N": N,
        "steps": S1 - 1,
        "T": ensemble.grid.T,
        "columns": names,
        "files": files,
        "diagnostics": diagnostics.to_dict() if hasattr(diagnostics, "to_dict") else diagnostics,
    }
    with open(os.path.join(outdir, "trajectories.json"), "w") as fh:
        json.dump(summary, fh, indent=2, default=_json_default)
    return files


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))
