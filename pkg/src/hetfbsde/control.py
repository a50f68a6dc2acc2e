"""Controls, cost functional, variational and adjoint equations, optimisation.

The adjoint for the forward component is propagated pathwise (discrete
adjoint of the Euler step) and projected onto the regression basis, so the
Hamiltonian gradient pairs with any perturbation lying in the basis span
exactly as the finite-sample directional derivative does.
"""
from dataclasses import dataclass, field, replace

import numpy as np

from . import rng as _rng
from .errors import DivergenceError, InvalidInput
from .solver import (
    PicardOptions,
    _apply,
    _check_finite,
    _projectors,
    conditional_z,
    control_path,
    picard_solve,
    simulate_noise,
)

FEATURES = {"x": False, "x_chi0": True}


def _clamp(a, lower, upper):
    if lower is None and upper is None:
        return a
    return np.clip(a, -np.inf if lower is None else lower, np.inf if upper is None else upper)


@dataclass
class ControlField:
    """An admissible control in one of three classes.

    ``open_loop``  values (M, S+1, k), shared by all particles of a type.
    ``feedback``   coefficients (M, S+1, k, p) on features (1, x[, chi0]).
    ``process``    a full table (M, N, S+1, k), one value per particle.

    Values are clamped to the box [lower, upper] when evaluated.
    """

    kind: str
    params: np.ndarray
    features: str = "x"
    lower: object = None
    upper: object = None

    def __post_init__(self):
        if self.kind not in ("open_loop", "feedback", "process"):
            raise InvalidInput(f"unknown control class {self.kind!r}")
        if self.features not in FEATURES:
            raise InvalidInput(f"unknown feedback features {self.features!r}")
        self.params = np.asarray(self.params, float)
        want = {"open_loop": 3, "feedback": 4, "process": 4}[self.kind]
        if self.params.ndim != want:
            raise InvalidInput(f"{self.kind} control needs a {want}-d parameter array")
        if not np.all(np.isfinite(self.params)):
            raise InvalidInput("control parameters must be finite")
        if self.lower is not None and self.upper is not None and np.any(np.asarray(self.lower) > np.asarray(self.upper)):
            raise InvalidInput("empty control box")

    # constructors --------------------------------------------------------
    @classmethod
    def zeros(cls, kind, M, steps, k=1, n=1, N=None, features="x", lower=None, upper=None):
        if kind == "open_loop":
            p = np.zeros((M, steps + 1, k))
        elif kind == "feedback":
            p = np.zeros((M, steps + 1, k, 1 + n + (n if FEATURES[features] else 0)))
        else:
            if N is None:
                raise InvalidInput("process controls need N")
            p = np.zeros((M, N, steps + 1, k))
        return cls(kind, p, features, lower, upper)

    @classmethod
    def process(cls, table, lower=None, upper=None):
        return cls("process", np.array(table, float), "x", lower, upper)

    @property
    def k(self):
        return self.params.shape[-1] if self.kind != "feedback" else self.params.shape[2]

    def copy(self, params=None):
        return replace(self, params=np.array(self.params if params is None else params, float))

    # evaluation ------------------------------------------------------------
    def feature_matrix(self, x, chi0):
        cols = [np.ones(x.shape[:-1] + (1,)), x]
        if FEATURES[self.features]:
            cols.append(chi0)
        return np.concatenate(cols, axis=-1)

    def raw(self, j, x, chi0):
        if self.kind == "open_loop":
            return np.broadcast_to(self.params[:, j][:, None, :], x.shape[:2] + (self.k,)).copy()
        if self.kind == "feedback":
            return np.einsum("mkp,mnp->mnk", self.params[:, j], self.feature_matrix(x, chi0))
        return self.params[:, :, j].copy()

    def evaluate(self, j, x, chi0):
        return _clamp(self.raw(j, x, chi0), self.lower, self.upper)

    def dx(self, j, x, chi0):
        """d alpha / d x at step j, shape (M, N, k, n); None unless feedback.

        Zero where the box constraint is active."""
        if self.kind != "feedback":
            return None
        n = x.shape[-1]
        slope = np.broadcast_to(self.params[:, j, :, 1 : 1 + n][:, None], x.shape[:2] + (self.k, n))
        raw = self.raw(j, x, chi0)
        free = _clamp(raw, self.lower, self.upper) == raw
        return slope * free[..., None]

    # class geometry ----------------------------------------------------------
    def _fit(self, F, G):
        """Least-squares coefficients of G (N, k) on features F (N, p)."""
        return np.linalg.lstsq(F, G, rcond=None)[0].T  # (k, p)

    def project_field(self, ens, G, rows=None, fit=None):
        """Orthogonal projection of a field (M, N, S+1, k) onto the class tangent space.

        With ``fit`` (an ensemble carrying G), the class coefficients are
        estimated on ``fit`` and evaluated at the particles of ``ens``.
        """
        if self.kind == "process":
            return G if rows is None else G[:, rows] if rows.ndim == 1 else _take(G, rows)
        X = ens.X if rows is None else _take(ens.X, rows)
        chi0 = ens.noise.chi0 if rows is None else _take(ens.noise.chi0, rows)
        G = G if rows is None else _take(G, rows)
        Xf, cf = (X, chi0) if fit is None else (fit.X, fit.noise.chi0)
        shape = X.shape[:3] + G.shape[3:]
        if self.kind == "open_loop":
            return np.broadcast_to(G.mean(axis=1, keepdims=True), shape)
        out = np.empty(shape)
        for i in range(G.shape[0]):
            for j in range(G.shape[2]):
                coef = self._fit(self.feature_matrix(Xf[i, :, j], cf[i]), G[i, :, j])
                out[i, :, j] = self.feature_matrix(X[i, :, j], chi0[i]) @ coef.T
        return out

    def step(self, ens, G, rate):
        """Move against the class-projected gradient, then project onto the box."""
        if self.kind == "process":
            new = self.params - rate * G
            return self.copy(_clamp(new, self.lower, self.upper))
        if self.kind == "open_loop":
            new = self.params - rate * G.mean(axis=1)
            return self.copy(_clamp(new, self.lower, self.upper))
        coef = self.params.copy()
        for i in range(G.shape[0]):
            for j in range(G.shape[2]):
                F = self.feature_matrix(ens.X[i, :, j], ens.noise.chi0[i])
                coef[i, j] -= rate * self._fit(F, G[i, :, j])
        return self.copy(coef)


def _take(arr, rows):
    """Per-type row selection: rows has shape (M, N')."""
    return np.stack([arr[i][rows[i]] for i in range(arr.shape[0])])


def as_direction(pi, ens):
    """A perturbation as a process array (M, N, S+1, k)."""
    if isinstance(pi, ControlField):
        return control_path(pi, ens.X, ens.noise, pi.k)
    pi = np.asarray(pi, float)
    if pi.shape != ens.A.shape:
        pi = np.broadcast_to(pi, ens.A.shape)
    return pi


def pairing(G, pi, ens):
    """<<G, pi>> = sum_u m_u mean_i sum_{j<S} G . pi dt."""
    dt = ens.grid.dt
    per = np.sum(G[:, :, :-1] * pi[:, :, :-1], axis=(2, 3)) * dt
    return float(ens.atlas.weights @ per.mean(axis=1))


def weighted_norm(field_, ens):
    return float(np.sqrt(max(pairing(field_, field_, ens), 0.0)))


# ---------------------------------------------------------------------------
# cost


def particle_costs(model, ens, flow):
    """Per-particle cost sum_j l dt + h(X_T) + g(Y_0), shape (M, N)."""
    ctx, tctx = flow.contexts(model)
    dt = ens.grid.dt
    out = np.zeros(ens.X.shape[:2])
    for j in range(ens.grid.steps):
        out += model.running_cost(ens.grid.times[j], ens.theta(j), ctx[j]) * dt
    out += model.terminal_cost(ens.X[:, :, -1], tctx)
    out += model.initial_cost(ens.Y[:, :, 0], None, ens.atlas)
    return out


def evaluate_cost(model, ens, flow):
    """(J, standard error, per-type means)."""
    c = particle_costs(model, ens, flow)
    if not np.all(np.isfinite(c)):
        raise DivergenceError("cost evaluation produced non-finite values", stage="cost")
    w = ens.atlas.weights
    N = c.shape[1]
    per = c.mean(axis=1)
    var = c.var(axis=1, ddof=1) if N > 1 else np.zeros_like(per)
    return float(w @ per), float(np.sqrt(np.sum(w**2 * var) / N)), per


# ---------------------------------------------------------------------------
# linearisations


def _jacobians(model, ens, ctx, names=("b", "sigma", "f", "ell")):
    times = ens.grid.times
    return {nm: [model.jacobian(nm, times[j], ens.theta(j), ctx[j]) for j in range(ens.grid.steps)] for nm in names}


def _rel_change(new, old):
    num = sum(float(np.sum((a - b) ** 2)) for a, b in zip(new, old))
    den = sum(float(np.sum(a**2)) for a in new)
    return 0.0 if num == 0.0 else np.sqrt(num / max(den, 1e-300))


@dataclass
class VariationalSolution:
    X: np.ndarray
    Y: np.ndarray
    Z: np.ndarray
    iterations: int = 1


def solve_variational(model, ens, flow, pi, basis="quadratic", max_iter=20, rtol=1e-10, implicit_iters=2):
    """First-order response (X', Y', Z') of the frozen system to a control perturbation."""
    d = model.dims
    M, N = ens.X.shape[:2]
    S, dt = ens.grid.steps, ens.grid.dt
    times = ens.grid.times
    dB = ens.noise.dB
    pi = as_direction(pi, ens)
    ctx, tctx = flow.contexts(model)
    J = _jacobians(model, ens, ctx, ("b", "sigma", "f"))
    JG = model.terminal_jacobian("G", ens.X[:, :, S], tctx)
    projs = [_projectors(ens.X, ens.noise.chi0, basis, j) for j in range(S)]
    th = [ens.theta(j) for j in range(S + 1)]
    Xp = np.zeros((M, N, S + 1, d.n))
    Yp = np.zeros((M, N, S + 1, d.l))
    Zp = np.zeros((M, N, S + 1, d.lz))
    decoupled = model.forward_decoupled(ens.atlas)

    def lin(name, j, dth):
        out = np.einsum("mnrd,mnd->mnr", J[name][j], dth)
        if not model.measure_free:
            out = out + model.mf_forward(name, times[j], th[j], ctx[j], dth)
        return out

    it = 0
    for it in range(1, max_iter + 1):
        old = (Xp.copy(), Yp.copy(), Zp.copy())
        for j in range(S):
            dth = np.concatenate([Xp[:, :, j], Yp[:, :, j], Zp[:, :, j], pi[:, :, j]], axis=-1)
            ds = lin("sigma", j, dth).reshape(M, N, d.n, d.d)
            Xp[:, :, j + 1] = Xp[:, :, j] + lin("b", j, dth) * dt + np.einsum("mnij,mnj->mni", ds, dB[:, :, j])
        _check_finite(Xp, "variational", S, "X'")
        yT = np.einsum("mnrd,mnd->mnr", JG, Xp[:, :, S])
        if not model.measure_free:
            yT = yT + model.terminal_mf_forward("G", ens.X[:, :, S], tctx, Xp[:, :, S])
        Yp[:, :, S] = yT
        for j in range(S - 1, -1, -1):
            P = projs[j]
            Yn = Yp[:, :, j + 1]
            pred = _apply(P, Yn)
            Zp[:, :, j] = conditional_z(P, Yn, pred, dB[:, :, j], dt)
            y = pred
            for _ in range(implicit_iters):
                dth = np.concatenate([Xp[:, :, j], y, Zp[:, :, j], pi[:, :, j]], axis=-1)
                y = _apply(P, Yn + lin("f", j, dth) * dt)
            Yp[:, :, j] = y
        Zp[:, :, S] = Zp[:, :, S - 1]
        _check_finite(Yp, "variational", 0, "Y'")
        if decoupled or _rel_change((Xp, Yp, Zp), old) < rtol:
            break
    return VariationalSolution(Xp, Yp, Zp, it)


@dataclass
class AdjointEnsemble:
    """Adjoint paths.  ``p`` (l), ``q`` (n), ``k`` (n*d) at every node;
    ``qhat[j]`` is the projection of q_{j+1} on the time-j basis and
    ``lam`` the pathwise discrete adjoint before projection."""

    p: np.ndarray
    q: np.ndarray
    k: np.ndarray
    qhat: np.ndarray
    lam: np.ndarray
    swapped: np.ndarray  # (M, N, S, D) mean-field swapped terms per step
    iterations: int = 1


def _hgrad(model, Jd, j, q, k, p):
    """Own-argument gradient of H = q.b + k.sigma - p.f + l, shape (M, N, D)."""
    out = np.einsum("mnrd,mnr->mnd", Jd["b"][j], q)
    out += np.einsum("mnrd,mnr->mnd", Jd["sigma"][j], k)
    out -= np.einsum("mnrd,mnr->mnd", Jd["f"][j], p)
    out += Jd["ell"][j][:, :, 0]
    return out


def solve_adjoint(model, ens, flow, basis="quadratic", max_iter=20, rtol=1e-10, control=None):
    """Adjoint FBSDE: p forward from -g_y(Y_0), q backward from the terminal condition.

    With a feedback ``control`` the q equation also carries the chain-rule
    term (d alpha/dx)^T H_alpha, which makes the resulting gradient the
    derivative of J with respect to the feedback coefficients.
    """
    d = model.dims
    M, N = ens.X.shape[:2]
    S, dt = ens.grid.steps, ens.grid.dt
    times = ens.grid.times
    dB = ens.noise.dB
    ctx, tctx = flow.contexts(model)
    Jd = _jacobians(model, ens, ctx)
    th = [ens.theta(j) for j in range(S + 1)]
    projs = [_projectors(ens.X, ens.noise.chi0, basis, j) for j in range(S)]
    dx, dy, dz, da = d.sx, d.sy, d.sz, d.sa
    ones = np.ones((M, N, 1))
    XT = ens.X[:, :, S]
    JG = model.terminal_jacobian("G", XT, tctx)
    hx = model.terminal_jacobian("h", XT, tctx)[:, :, 0]

    dadx = [None if control is None else control.dx(j, ens.X[:, :, j], ens.noise.chi0) for j in range(S)]
    p = np.zeros((M, N, S + 1, d.l))
    lam = np.zeros((M, N, S + 1, d.n))
    q = np.zeros_like(lam)
    qhat = np.zeros_like(lam)
    k = np.zeros((M, N, S + 1, d.n * d.d))
    sw = np.zeros((M, N, S, d.D))

    def pathwise_k(j):
        return np.einsum("mni,mnj->mnij", lam[:, :, j + 1], dB[:, :, j]).reshape(M, N, -1) / dt

    def swapped(j):
        if model.measure_free:
            return np.zeros((M, N, d.D))
        mults = {"b": lam[:, :, j + 1], "sigma": pathwise_k(j), "f": -p[:, :, j], "ell": ones}
        return model.mf_swapped(times[j], th[j], ctx[j], mults)

    def forward_p():
        p[:, :, 0] = -model.initial_grad(ens.Y[:, :, 0], None, ens.atlas)
        for j in range(S):
            sw[:, :, j] = swapped(j)
            g = _hgrad(model, Jd, j, qhat[:, :, j], k[:, :, j], p[:, :, j]) + sw[:, :, j]
            gz = g[:, :, dz].reshape(M, N, d.l, d.d)
            p[:, :, j + 1] = p[:, :, j] - g[:, :, dy] * dt - np.einsum("mnlj,mnj->mnl", gz, dB[:, :, j])
        _check_finite(p, "adjoint", S, "p")

    def backward_q():
        pT = p[:, :, S]
        lamT = -np.einsum("mnrd,mnr->mnd", JG, pT) + hx
        if not model.measure_free:
            lamT = lamT + model.terminal_mf_swapped(XT, tctx, {"G": -pT, "h": ones})
        lam[:, :, S] = q[:, :, S] = qhat[:, :, S] = lamT
        for j in range(S - 1, -1, -1):
            P = projs[j]
            ln = lam[:, :, j + 1]
            qhat[:, :, j] = _apply(P, ln)
            k[:, :, j] = conditional_z(P, ln, qhat[:, :, j], dB[:, :, j], dt)
            sw[:, :, j] = swapped(j)
            full = _hgrad(model, Jd, j, ln, pathwise_k(j), p[:, :, j]) + sw[:, :, j]
            gx = full[:, :, dx]
            if dadx[j] is not None:
                gx = gx + np.einsum("mnki,mnk->mni", dadx[j], full[:, :, da])
            lam[:, :, j] = ln + gx * dt
            q[:, :, j] = _apply(P, lam[:, :, j])
        k[:, :, S] = k[:, :, S - 1]
        _check_finite(lam, "adjoint", 0, "q")

    forward_p()
    it = 0
    for it in range(1, max_iter + 1):
        old = (p.copy(), lam.copy())
        backward_q()
        forward_p()
        if _rel_change((p, lam), old) < rtol:
            break
    return AdjointEnsemble(p, q, k, qhat, lam, sw, it)


def hamiltonian_field(model, t, th, p, q, k, ctx):
    """H = q.b + k.sigma - p.f + l at particles th (M', N, D)."""
    b = model.drift(t, th, ctx)
    s = model.diffusion(t, th, ctx)
    f = model.driver(t, th, ctx)
    return np.sum(q * b, -1) + np.sum(k * s, -1) - np.sum(p * f, -1) + model.running_cost(t, th, ctx)


def hamiltonian(model, u, point, kernel, pqk):
    """H at a single StatePoint of type u; pqk = (p, q, k) with k of shape (n, d)."""
    from .models import _ctx, _point

    ctx = _ctx(model, kernel)
    th, ui = _point(model, point, kernel)
    ui = [kernel.atlas.index(u)]
    d = model.dims
    p, q, k = (np.asarray(v, float).reshape(1, 1, -1) for v in pqk)
    if p.shape[-1] != d.l or q.shape[-1] != d.n or k.shape[-1] != d.n * d.d:
        raise InvalidInput("adjoint values have the wrong shapes")
    b = model.drift(point.t, th, ctx, ui)
    s = model.diffusion(point.t, th, ctx, ui)
    f = model.driver(point.t, th, ctx, ui)
    ell = model.running_cost(point.t, th, ctx, ui)
    return float((np.sum(q * b, -1) + np.sum(k * s, -1) - np.sum(p * f, -1) + ell)[0, 0])


def hamiltonian_gradient(model, ens, flow, adj):
    """The control gradient H_alpha plus its mean-field swapped term, (M, N, S+1, k)."""
    ctx, _ = flow.contexts(model)
    Jd = _jacobians(model, ens, ctx)
    S = ens.grid.steps
    da = model.dims.sa
    G = np.zeros(ens.A.shape)
    for j in range(S):
        g = _hgrad(model, Jd, j, adj.qhat[:, :, j], adj.k[:, :, j], adj.p[:, :, j]) + adj.swapped[:, :, j]
        G[:, :, j] = g[:, :, da]
    return G


def ito_pairing(model, ens, flow, adj, var, pi):
    """Duality between the variational and adjoint processes.

    lhs is the directional derivative of J built from the variational
    processes (running, terminal and initial cost terms, mean-field parts
    included); rhs is <<G, pi>> from the adjoint.  Returns (lhs, rhs).
    """
    pi = as_direction(pi, ens)
    w = ens.atlas.weights
    S, dt = ens.grid.steps, ens.grid.dt
    times = ens.grid.times
    ctx, tctx = flow.contexts(model)
    per = np.zeros(ens.X.shape[:2])
    for j in range(S):
        th = ens.theta(j)
        dth = np.concatenate([var.X[:, :, j], var.Y[:, :, j], var.Z[:, :, j], pi[:, :, j]], axis=-1)
        dl = np.einsum("mnd,mnd->mn", model.jacobian("ell", times[j], th, ctx[j])[:, :, 0], dth)
        if not model.measure_free:
            dl = dl + model.mf_forward("ell", times[j], th, ctx[j], dth)[:, :, 0]
        per += dl * dt
    XT = ens.X[:, :, S]
    per += np.einsum("mnd,mnd->mn", model.terminal_jacobian("h", XT, tctx)[:, :, 0], var.X[:, :, S])
    if not model.measure_free:
        per += model.terminal_mf_forward("h", XT, tctx, var.X[:, :, S])[:, :, 0]
    per += np.sum(model.initial_grad(ens.Y[:, :, 0], None, ens.atlas) * var.Y[:, :, 0], -1)
    lhs = float(w @ per.mean(axis=1))
    rhs = pairing(hamiltonian_gradient(model, ens, flow, adj), pi, ens)
    return lhs, rhs


# ---------------------------------------------------------------------------
# Gateaux check


def gateaux_check(
    model, control, atlas, N, grid, seed, pi, eps_ladder=(1e-1, 1e-2, 1e-3), opts=None, initial=None, basis=None
):
    """Difference quotients along pi against the variational solution and the adjoint pairing.

    The base control is frozen into a process table along the base ensemble,
    so every perturbed solve shares noise and the same control class.  Rows
    hold ||(X^eps - X)/eps - X'|| (likewise Y, Z) and the cost error
    |(J(eps) - J)/eps - <<G, pi>>|.
    """
    opts = opts or PicardOptions()
    basis = basis or opts.basis
    noise = simulate_noise(atlas, N, grid, seed, model.dims.d, initial, model.dims.n)
    ens, flow, _ = picard_solve(model, control, atlas, N, grid, seed, opts, noise=noise)
    base = ControlField.process(ens.A)
    J0, _, _ = evaluate_cost(model, ens, flow)
    adj = solve_adjoint(model, ens, flow, basis)
    G = hamiltonian_gradient(model, ens, flow, adj)
    pi = as_direction(pi, ens)
    var = solve_variational(model, ens, flow, pi, basis)
    pred = pairing(G, pi, ens)
    w = atlas.weights

    def gap(a, b):
        return float(np.sqrt(w @ np.mean(np.sum((a - b) ** 2, axis=(2, 3)) / a.shape[2], axis=1)))

    rows = []
    for eps in eps_ladder:
        ctl = base.copy(base.params + eps * pi)
        e2, f2, _ = picard_solve(model, ctl, atlas, N, grid, seed, opts, noise=noise)
        J1, _, _ = evaluate_cost(model, e2, f2)
        quot = (J1 - J0) / eps
        rows.append(
            {
                "eps": eps,
                "X": gap((e2.X - ens.X) / eps, var.X),
                "Y": gap((e2.Y - ens.Y) / eps, var.Y),
                "Z": gap((e2.Z - ens.Z) / eps, var.Z),
                "quotient": quot,
                "pairing": pred,
                "error": abs(quot - pred),
            }
        )
    return {"J": J0, "pairing": pred, "rows": rows}


# ---------------------------------------------------------------------------
# optimisation


@dataclass
class OptimizeResult:
    control: ControlField
    history: list
    ensemble: object
    flow: object
    adjoint: object
    gradient: np.ndarray
    converged: bool
    iterations: int
    stationarity: list = field(default_factory=list)


def stationarity_field(control, ens, G, rows=None, fit=None):
    """Gradient mapping alpha - Pi_box(alpha - PG) of the class-projected gradient PG."""
    PG = control.project_field(ens, G, rows, fit)
    A = ens.A if rows is None else _take(ens.A, rows)
    if control.lower is None and control.upper is None:
        return PG
    return A - _clamp(A - PG, control.lower, control.upper)


def _norm_rows(r, ens, weights):
    dt = ens.grid.dt
    per = np.sum(r[:, :, :-1] ** 2, axis=(2, 3)) * dt
    return float(np.sqrt(max(weights @ per.mean(axis=1), 0.0)))


def optimize_control(
    model,
    control,
    atlas,
    N,
    grid,
    seed,
    rate=0.5,
    max_iters=50,
    tol=1e-6,
    opts=None,
    initial=None,
    basis=None,
    halvings=12,
):
    """Projected gradient descent with a halving line search.

    ``history`` starts with the initial cost, so ``max_iters = 0`` returns
    a single entry.  Stops when the stationarity norm drops below ``tol``
    or no step size decreases J.
    """
    opts = opts or PicardOptions()
    basis = basis or opts.basis
    noise = simulate_noise(atlas, N, grid, seed, model.dims.d, initial, model.dims.n)

    def solve(ctl):
        e, f, _ = picard_solve(model, ctl, atlas, N, grid, seed, opts, noise=noise)
        return e, f, evaluate_cost(model, e, f)[0]

    try:
        ens, flow, J = solve(control)
    except DivergenceError as exc:
        raise DivergenceError(str(exc), stage=exc.stage or "optimize", step=exc.step, history=[]) from exc
    history = [J]
    station = []
    converged = False
    it = 0
    while True:
        adj = solve_adjoint(model, ens, flow, basis, control=control)
        G = hamiltonian_gradient(model, ens, flow, adj)
        norm = _norm_rows(stationarity_field(control, ens, G), ens, atlas.weights)
        station.append(norm)
        if norm < tol:
            converged = True
            break
        if it >= max_iters:
            break
        r = rate
        accepted = False
        for _ in range(halvings):
            cand = control.step(ens, G, r)
            try:
                e2, f2, J2 = solve(cand)
            except DivergenceError:
                r *= 0.5
                continue
            if J2 < J:
                accepted = True
                break
            r *= 0.5
        if not accepted:
            break
        control, ens, flow, J = cand, e2, f2, J2
        history.append(J)
        it += 1
    return OptimizeResult(control, history, ens, flow, adj, G, converged, it, station)


# ---------------------------------------------------------------------------
# maximum principle and convexity


@dataclass
class MPReport:
    """Stationarity norm of the class-projected gradient with its bootstrap
    standard error, plus probe inner products <<PG, v - alpha_hat>>."""

    norm: float
    stderr: float
    verdict: bool
    tolerance: float = 0.0
    probe_pairings: list = field(default_factory=list)
    probe_min: float = float("nan")
    pointwise_min: float = float("nan")
    per_type_norm: list = field(default_factory=list)
    bootstrap: int = 0

    def to_dict(self):
        return {k: (float(v) if isinstance(v, (np.floating,)) else v) for k, v in self.__dict__.items()}


def resample_ensemble(ens, rows):
    """Paths re-drawn per type: rows has shape (M, N')."""
    noise = replace(ens.noise, dB=_take(ens.noise.dB, rows), chi0=_take(ens.noise.chi0, rows))
    return replace(ens, noise=noise, X=_take(ens.X, rows), Y=_take(ens.Y, rows), Z=_take(ens.Z, rows),
                   A=_take(ens.A, rows))


def box_probes(control, ens, count, seed):
    """Random admissible probe fields v (M, N, S+1, k) drawn inside the box."""
    gen = _rng.generator(seed, "probes")
    lo = -np.inf if control.lower is None else np.asarray(control.lower, float)
    hi = np.inf if control.upper is None else np.asarray(control.upper, float)
    out = []
    M, _, S1, k = ens.A.shape
    for _ in range(count):
        r = gen.random((M, 1, S1, k))
        if np.all(np.isfinite(lo)) and np.all(np.isfinite(hi)):
            v = lo + (hi - lo) * r
        elif np.all(np.isfinite(lo)):
            v = lo + 2.0 * r
        elif np.all(np.isfinite(hi)):
            v = hi - 2.0 * r
        else:
            v = ens.A + (2.0 * r - 1.0)
        out.append(np.broadcast_to(v, ens.A.shape))
    return out


def check_maximum_principle(model, control, ens, flow, adj=None, probes=None, B=100, seed=0, basis="quadratic"):
    """Maximum-principle diagnostics at a candidate control.

    The stationarity field is the class-projected gradient (with a box, the
    gradient mapping alpha - Pi(alpha - PG)).  Its m-weighted L2 norm is
    compared with three bootstrap standard errors.  For open-loop and
    feedback controls each replicate resamples whole paths per type, re-solves
    the adjoint regression and refits the class coefficients, which are then
    evaluated at the original particles; the standard error is the norm of
    the pointwise bootstrap standard deviation of that field.  Process
    controls resample rows of the fixed gradient field instead.
    Each probe v (array or ControlField) contributes <<PG, v - alpha_hat>>;
    the verdict also requires every probe pairing >= -tolerance.
    """
    if adj is None:
        adj = solve_adjoint(model, ens, flow, basis, control=control)
    G = hamiltonian_gradient(model, ens, flow, adj)
    w = ens.atlas.weights
    M, N = ens.X.shape[:2]
    station = stationarity_field(control, ens, G)
    norm = _norm_rows(station, ens, w)
    per_type = [_norm_rows(station[i : i + 1], ens, np.ones(1)) for i in range(M)]
    gen = _rng.generator(seed, "bootstrap")
    if control.kind == "process":
        boots = [_norm_rows(stationarity_field(control, ens, G, gen.integers(0, N, size=(M, N))), ens, w)
                 for _ in range(B)]
        stderr = float(np.std(boots, ddof=1)) if B > 1 else 0.0
    else:
        mean, m2 = np.zeros(station.shape), np.zeros(station.shape)
        for b in range(B):
            eb = resample_ensemble(ens, gen.integers(0, N, size=(M, N)))
            Gb = hamiltonian_gradient(model, eb, flow, solve_adjoint(model, eb, flow, basis, control=control))
            sb = stationarity_field(control, ens, Gb, fit=eb)
            delta = sb - mean
            mean += delta / (b + 1)
            m2 += delta * (sb - mean)
        stderr = _norm_rows(np.sqrt(m2 / (B - 1)), ens, w) if B > 1 else 0.0
    tol = 3.0 * stderr
    PG = control.project_field(ens, G)
    pairs, pmin = [], np.inf
    for v in probes or []:
        dv = as_direction(v, ens) - ens.A
        pairs.append(pairing(PG, dv, ens))
        pmin = min(pmin, float(np.min(np.sum(PG[:, :, :-1] * dv[:, :, :-1], -1))))
    constrained = control.lower is not None or control.upper is not None
    verdict = (norm <= tol) and all(v >= -tol for v in pairs)
    if constrained and pairs and norm > tol:
        verdict = all(v >= -tol for v in pairs)
    return MPReport(
        norm,
        stderr,
        bool(verdict),
        tol,
        pairs,
        float(min(pairs)) if pairs else float("nan"),
        float(pmin) if pairs else float("nan"),
        per_type,
        B,
    )


def random_rivals(count, M, steps, seed, scale=1.0, lower=None, upper=None):
    """Seeded open-loop rivals: per-type random combinations of low cosine modes in time."""
    gen = _rng.generator(seed, "rivals")
    t = np.linspace(0.0, 1.0, steps + 1)
    modes = np.stack([np.cos(np.pi * j * t) for j in range(3)])
    out = []
    for _ in range(count):
        coef = gen.normal(size=(M, 3)) * scale
        vals = (coef @ modes)[..., None]
        out.append(ControlField("open_loop", _clamp(vals, lower, upper), "x", lower, upper))
    return out


def convexity_spot_check(model, ens, flow, adj, samples=64, seed=0):
    """Sampled convexity gaps of h, g and the Hamiltonian in (x, alpha).

    Returns the smallest gap found for each; non-negative means no
    violation was observed.
    """
    gen = _rng.generator(seed, "probes", 1)
    d = model.dims
    M, N = ens.X.shape[:2]
    ctx, tctx = flow.contexts(model)
    idx = gen.integers(0, N, size=(M, samples))
    XT = _take(ens.X[:, :, -1], idx)
    dX = gen.normal(size=XT.shape)

    def gap_terminal(fun, jac, x, dx):
        return fun(x + dx) - fun(x) - np.einsum("mnd,mnd->mn", jac(x), dx)

    h = lambda x: model.terminal_cost(x, tctx)
    hx = lambda x: model.terminal_jacobian("h", x, tctx)[:, :, 0]
    gaps = {"h": float(np.min(gap_terminal(h, hx, XT, dX)))}
    Y0 = _take(ens.Y[:, :, 0], idx)
    dY = gen.normal(size=Y0.shape)
    g = lambda y: model.initial_cost(y, None, ens.atlas)
    gy = lambda y: model.initial_grad(y, None, ens.atlas)
    gaps["g"] = float(np.min(gap_terminal(g, gy, Y0, dY)))
    j = int(gen.integers(0, ens.grid.steps))
    t = ens.grid.times[j]
    th = _take(ens.theta(j), idx)
    mask = np.zeros(d.D)
    mask[d.sx] = 1.0
    mask[d.sa] = 1.0
    dth = gen.normal(size=th.shape) * mask
    p, q, k = (_take(a[:, :, j], idx) for a in (adj.p, adj.qhat, adj.k))
    H = lambda v: hamiltonian_field(model, t, v, p, q, k, ctx[j])
    Jd = {nm: [model.jacobian(nm, t, th, ctx[j])] for nm in ("b", "sigma", "f", "ell")}
    dH = _hgrad(model, Jd, 0, q, k, p)
    gaps["hamiltonian"] = float(np.min(H(th + dth) - H(th) - np.einsum("mnd,mnd->mn", dH, dth)))
    return gaps


def verify_convexity_certificate(
    model, control, atlas, N, grid, seed, rivals=20, opts=None, initial=None, basis=None, B=100, margin=2.0, mp=None
):
    """Empirical verification of a candidate through the convexity route.

    (a) maximum-principle check at the candidate, (b) J(candidate) <= J(rival)
    + margin * stderr for every rival (each solved on the same noise),
    (c) for models flagged convex, sampled convexity gaps of h, g and H.
    ``rivals`` is a list of ControlFields or a count of seeded open-loop
    rivals.  The verdict is empirical, not a proof.  A maximum-principle
    report already computed for the same control and noise may be passed as
    ``mp``.
    """
    opts = opts or PicardOptions()
    basis = basis or opts.basis
    noise = simulate_noise(atlas, N, grid, seed, model.dims.d, initial, model.dims.n)
    ens, flow, _ = picard_solve(model, control, atlas, N, grid, seed, opts, noise=noise)
    J0, se0, _ = evaluate_cost(model, ens, flow)
    adj = solve_adjoint(model, ens, flow, basis, control=control)
    if mp is None:
        mp = check_maximum_principle(model, control, ens, flow, adj, B=B, seed=seed, basis=basis)
    if isinstance(rivals, int):
        rivals = random_rivals(rivals, atlas.M, grid.steps, seed, lower=control.lower, upper=control.upper)
    table = []
    for r, rival in enumerate(rivals):
        try:
            e2, f2, _ = picard_solve(model, rival, atlas, N, grid, seed, opts, noise=noise)
            J1, se1, _ = evaluate_cost(model, e2, f2)
        except (FloatingPointError, ValueError) as exc:
            table.append({"rival": r, "error": str(exc), "ok": False})
            continue
        table.append({"rival": r, "J": J1, "stderr": se1, "diff": J1 - J0, "ok": J0 <= J1 + margin * se0})
    spot = convexity_spot_check(model, ens, flow, adj, seed=seed) if model.convex else None
    spot_ok = spot is None or all(v >= -1e-9 for v in spot.values())
    beats = all(row["ok"] for row in table)
    return {
        "J": J0,
        "stderr": se0,
        "mp": mp.to_dict(),
        "rivals": table,
        "beats_rivals": beats,
        "convexity": spot,
        "convexity_ok": spot_ok,
        "verdict": "verified (empirical)" if (beats and spot_ok and mp.verdict) else "not verified",
        "partial": any("error" in row for row in table),
    }
