"""Coefficient bundles (b, sigma, f, G, l, h, g) with partials and L_m-derivatives.

All evaluators are vectorised over a leading (type, particle) layout: a state
array ``th`` has shape (M', N, D) with D = n + l + l*d + k and rows ordered
as [x, y, z (row-major l x d), a].  ``ui`` lists the atlas index of each of
the M' leading rows.

Measure dependence is accessed through a *context* built once per kernel
(``model.context``).  The base class keeps the raw clouds and implements the
two mean-field contractions needed by the variational and adjoint systems by
brute-force double averages over user-supplied measure derivatives.  The
graphon-separable subclass collapses them to O(M N) aggregate sums.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import rng as _rng
from .errors import InvalidInput, UnsupportedDerivative
from .measures import MeasureKernel, TypeAtlas

RUNNING = ("b", "sigma", "f", "ell")
TERMINAL = ("G", "h")


@dataclass(frozen=True)
class Dims:
    n: int = 1
    l: int = 1
    d: int = 1
    k: int = 1

    def __post_init__(self):
        for name in ("n", "l", "d", "k"):
            if int(getattr(self, name)) < 1:
                raise InvalidInput(f"dimension {name} must be >= 1")

    @property
    def lz(self):
        return self.l * self.d

    @property
    def D(self):
        return self.n + self.l + self.l * self.d + self.k

    @property
    def sx(self):
        return slice(0, self.n)

    @property
    def sy(self):
        return slice(self.n, self.n + self.l)

    @property
    def sz(self):
        return slice(self.n + self.l, self.n + self.l + self.lz)

    @property
    def sa(self):
        return slice(self.n + self.l + self.lz, self.D)

    def block(self, i):
        """Column slice of marginal ``i`` (1: x, 2: y, 3: z, 4: a)."""
        return (self.sx, self.sy, self.sz, self.sa)[i - 1]

    def out_dim(self, name):
        return {"b": self.n, "sigma": self.n * self.d, "f": self.l, "ell": 1, "G": self.l, "h": 1}[name]

    def pack(self, x, y, z, a):
        lead = np.asarray(x).shape[:-1]
        z = np.asarray(z, float).reshape(lead + (self.lz,))
        return np.concatenate([np.asarray(x, float), np.asarray(y, float), z, np.asarray(a, float)], axis=-1)

    def blocks(self):
        return (("x", self.n), ("y", self.l), ("z", self.lz), ("a", self.k))


@dataclass(frozen=True)
class StatePoint:
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    a: np.ndarray
    t: float = 0.0
    u: object = 0.0

    def vector(self, dims):
        x, y, a = (np.atleast_1d(np.asarray(v, float)) for v in (self.x, self.y, self.a))
        z = np.asarray(self.z, float).reshape(-1)
        if x.shape != (dims.n,) or y.shape != (dims.l,) or z.shape != (dims.lz,) or a.shape != (dims.k,):
            raise InvalidInput(
                f"state point shapes {x.shape},{y.shape},{z.shape},{a.shape} do not match dims {dims}"
            )
        v = np.concatenate([x, y, z, a])
        if not np.all(np.isfinite(v)) or not math.isfinite(float(self.t)):
            raise InvalidInput("state point has non-finite entries")
        return v


# ---------------------------------------------------------------------------
# initial law


@dataclass(frozen=True)
class InitialLaw:
    """Per-type law of chi_0: ``gaussian`` (mean, std), ``dirac`` (mean) or
    ``uniform`` (low, high).  ``mean`` may be a number, a vector, or a
    callable of the type label; ``mean_slope`` adds ``slope * u`` for scalar
    type labels."""

    kind: str = "gaussian"
    mean: object = 0.0
    std: object = 1.0
    low: object = 0.0
    high: object = 1.0
    mean_slope: float = 0.0

    def _param(self, value, u, n):
        v = value(u) if callable(value) else value
        return np.broadcast_to(np.asarray(v, float), (n,))

    def moments(self, u, n):
        mean = self._param(self.mean, u, n)
        if self.mean_slope:
            mean = mean + self.mean_slope * float(u)
        if self.kind == "gaussian":
            return mean, self._param(self.std, u, n) ** 2
        if self.kind == "dirac":
            return mean, np.zeros(n)
        lo, hi = self._param(self.low, u, n), self._param(self.high, u, n)
        return 0.5 * (lo + hi), (hi - lo) ** 2 / 12.0

    def sample(self, atlas, N, n, seed):
        out = np.empty((atlas.M, N, n))
        for i, u in enumerate(atlas.types):
            if self.kind == "uniform":
                lo, hi = self._param(self.low, u, n), self._param(self.high, u, n)
                out[i] = lo + (hi - lo) * _rng.uniform_blocks(seed, "initial", i, N, n)
                continue
            mean, var = self.moments(u, n)
            if self.kind == "dirac":
                out[i] = mean
            elif self.kind == "gaussian":
                out[i] = mean + np.sqrt(var) * _rng.normal_blocks(seed, "initial", i, N, n)
            else:
                raise InvalidInput(f"unknown initial law {self.kind!r}")
        if not np.all(np.isfinite(out)):
            raise InvalidInput("initial law produced non-finite samples")
        return out


# ---------------------------------------------------------------------------
# contexts


@dataclass
class Context:
    """Measure information frozen at one time node."""

    atlas: TypeAtlas
    clouds: tuple = ()  # (points, weights) per type
    aggregates: tuple = ()  # per statistic, shape (M, s_q)

    def mix(self, other, beta):
        """Convex combination of aggregate vectors (used for damping)."""
        if not self.aggregates:
            return other
        aggs = tuple((1 - beta) * a + beta * b for a, b in zip(self.aggregates, other.aggregates))
        return Context(other.atlas, other.clouds, aggs)


def _clouds_of(atlas, data, width):
    if isinstance(data, MeasureKernel):
        if not data.atlas.same_as(atlas):
            raise InvalidInput("kernel atlas differs from the model atlas")
        if data.dim != width:
            raise InvalidInput(f"kernel dimension {data.dim} does not match expected {width}")
        return tuple((c.points, c.weights) for c in data.clouds)
    arr = np.asarray(data, dtype=float)
    if arr.ndim != 3 or arr.shape[0] != atlas.M or arr.shape[2] != width:
        raise InvalidInput(f"expected points of shape (M, N, {width}), got {arr.shape}")
    w = np.full(arr.shape[1], 1.0 / arr.shape[1])
    return tuple((arr[i], w) for i in range(atlas.M))


def _as_index(ui, M):
    return np.arange(M) if ui is None else np.atleast_1d(np.asarray(ui, dtype=int))


# ---------------------------------------------------------------------------
# base model


class CoefficientModel:
    """Base class and plugin hook.

    A custom model subclasses this and implements ``drift``, ``diffusion``,
    ``driver``, ``running_cost``, ``terminal``, ``terminal_cost``,
    ``initial_cost``, the ``jacobian``/``terminal_jacobian``/``initial_grad``
    partials and, unless it is measure-free, ``measure_derivative`` and
    ``terminal_measure_derivative``.  Shapes (leading axes ``(M', N)``):

    ====================  ===========================
    drift                 (n,)
    diffusion             (n*d,)   row-major n x d
    driver                (l,)
    running_cost          ()
    jacobian(name)        (r, D)   r = output size
    measure_derivative    (Q, r, D) per sample point
    ====================  ===========================
    """

    name = "custom"
    measure_free = False
    control_law_free = False
    convex = False

    def __init__(self, dims=None, T=1.0):
        self.dims = dims or Dims()
        self.T = float(T)
        if not self.T > 0:
            raise InvalidInput("horizon T must be positive")

    # contexts -------------------------------------------------------------
    def context(self, atlas, data):
        return Context(atlas, _clouds_of(atlas, data, self.dims.D))

    def terminal_context(self, atlas, data):
        return Context(atlas, _clouds_of(atlas, data, self.dims.n))

    # evaluators (to be provided) -----------------------------------------
    def drift(self, t, th, ctx, ui=None):
        raise NotImplementedError

    def diffusion(self, t, th, ctx, ui=None):
        raise NotImplementedError

    def driver(self, t, th, ctx, ui=None):
        raise NotImplementedError

    def running_cost(self, t, th, ctx, ui=None):
        raise NotImplementedError

    def terminal(self, x, ctx, ui=None):
        raise NotImplementedError

    def terminal_cost(self, x, ctx, ui=None):
        raise NotImplementedError

    def initial_cost(self, y, ui=None, atlas=None):
        raise NotImplementedError

    def jacobian(self, name, t, th, ctx, ui=None):
        raise UnsupportedDerivative(f"{self.name} provides no partials of {name}")

    def terminal_jacobian(self, name, x, ctx, ui=None):
        raise UnsupportedDerivative(f"{self.name} provides no partials of {name}")

    def initial_grad(self, y, ui=None, atlas=None):
        raise UnsupportedDerivative(f"{self.name} provides no g_y")

    def measure_derivative(self, name, t, th, ctx, ui, sample_type, samples):
        if self.measure_free:
            M_, N = th.shape[:2]
            r = self.dims.out_dim(name)
            return np.zeros((M_, N, len(samples), r, self.dims.D))
        raise UnsupportedDerivative(f"{self.name} is not L_m-differentiable in {name}")

    def terminal_measure_derivative(self, name, x, ctx, ui, sample_type, samples):
        if self.measure_free:
            M_, N = x.shape[:2]
            r = self.dims.out_dim(name)
            return np.zeros((M_, N, len(samples), r, self.dims.n))
        raise UnsupportedDerivative(f"{self.name} is not L_m-differentiable in {name}")

    # generic dispatch ------------------------------------------------------
    def evaluate(self, name, t, th, ctx, ui=None):
        out = {"b": self.drift, "sigma": self.diffusion, "f": self.driver, "ell": self.running_cost}[name](
            t, th, ctx, ui
        )
        return out[..., None] if name == "ell" else out

    def evaluate_terminal(self, name, x, ctx, ui=None):
        out = self.terminal(x, ctx, ui) if name == "G" else self.terminal_cost(x, ctx, ui)
        return out[..., None] if name == "h" else out

    # mean-field contractions (brute force) ---------------------------------
    def mf_forward(self, name, t, th_all, ctx, dth_all):
        """Sum over types of weight * mean over copies of dP gamma^u(Theta)(copy) . dcopy.

        Returns shape (M, N, r).  Double average over the ensemble.
        """
        atlas = ctx.atlas
        out = None
        for v in range(atlas.M):
            md = self.measure_derivative(name, t, th_all, ctx, None, v, th_all[v])
            term = atlas.weights[v] * np.einsum("mnjrd,jd->mnr", md, dth_all[v]) / th_all.shape[1]
            out = term if out is None else out + term
        return out

    def mf_swapped(self, t, th_all, ctx, mults):
        """Swapped-argument contraction for the adjoint.

        For each own particle theta^u_i returns
        sum_v w_v mean_j sum_gamma dP gamma^v(Theta^v_j)(theta^u_i)^T c^gamma_{v,j},
        shape (M, N, D).  ``mults`` maps coefficient names to multipliers of
        shape (M, N, r).
        """
        atlas = ctx.atlas
        M, N, D = th_all.shape
        out = np.zeros((M, N, D))
        for name, c in mults.items():
            c = np.asarray(c, float)
            if c.ndim == 2:
                c = c[..., None]
            for u in range(M):
                for v in range(M):
                    md = self.measure_derivative(name, t, th_all[v : v + 1], ctx, [v], u, th_all[u])
                    out[u] += atlas.weights[v] * np.einsum("jird,jr->id", md[0], c[v]) / N
        return out

    def terminal_mf_forward(self, name, x_all, ctx, dx_all):
        atlas = ctx.atlas
        out = None
        for v in range(atlas.M):
            md = self.terminal_measure_derivative(name, x_all, ctx, None, v, x_all[v])
            term = atlas.weights[v] * np.einsum("mnjrd,jd->mnr", md, dx_all[v]) / x_all.shape[1]
            out = term if out is None else out + term
        return out

    def terminal_mf_swapped(self, x_all, ctx, mults):
        atlas = ctx.atlas
        M, N, n = x_all.shape
        out = np.zeros((M, N, n))
        for name, c in mults.items():
            c = np.asarray(c, float)
            if c.ndim == 2:
                c = c[..., None]
            for u in range(M):
                for v in range(M):
                    md = self.terminal_measure_derivative(name, x_all[v : v + 1], ctx, [v], u, x_all[u])
                    out[u] += atlas.weights[v] * np.einsum("jird,jr->id", md[0], c[v]) / N
        return out

    def constant_sheet(self, atlas):
        """Structural constants, if the model can derive them (else None)."""
        return None

    def forward_decoupled(self, atlas):
        """True when b and sigma ignore (y, z) for a frozen measure argument."""
        return False


# ---------------------------------------------------------------------------
# graphon-separable affine family


@dataclass(frozen=True)
class Statistic:
    """phi(theta) = L theta (or its elementwise square), aggregated with kappa.

    ``L`` has shape (s, D) for running statistics and (s, n) for terminal
    ones.  ``kappa`` is a callable ``kappa(u, v)`` on type labels or a
    constant.
    """

    L: np.ndarray
    kappa: object = 1.0
    square: bool = False
    terminal: bool = False

    def __post_init__(self):
        L = np.atleast_2d(np.asarray(self.L, dtype=float))
        object.__setattr__(self, "L", L)

    @property
    def s(self):
        return self.L.shape[0]

    def phi(self, pts):
        v = pts @ self.L.T
        return v * v if self.square else v

    def grad(self, pts):
        """Shape pts.shape[:-1] + (s, width)."""
        if self.square:
            v = pts @ self.L.T
            return 2.0 * v[..., :, None] * self.L
        return np.broadcast_to(self.L, pts.shape[:-1] + self.L.shape)

    def kernel_matrix(self, atlas):
        if callable(self.kappa):
            return np.array([[float(self.kappa(u, v)) for v in atlas.types] for u in atlas.types])
        return np.full((atlas.M, atlas.M), float(self.kappa))


def _resolve(param, atlas, shape):
    """Stack a constant or per-type callable parameter into shape (M, *shape)."""
    if param is None:
        return np.zeros((atlas.M,) + shape)
    if callable(param):
        return np.stack([np.broadcast_to(np.asarray(param(u), float), shape) for u in atlas.types])
    return np.broadcast_to(np.asarray(param, float), shape)[None].repeat(atlas.M, axis=0)


class GraphonAffineModel(CoefficientModel):
    """Coefficients affine in the state and in graphon aggregates.

    With A_q(u) = sum_v m_v kappa_q(u, v) E[phi_q(theta^v)]::

        b     = Lb theta + cb + sum_q Gb_q A_q          (same for sigma, f)
        ell   = 1/2 theta'Q theta + q'theta + theta'N A + 1/2 A'R A + r'A + c
        G     = Gx x + cG + sum_q GT_q A^T_q
        h     = 1/2 x'Qh x + qh'x + x'Nh A^T + 1/2 A^T'Rh A^T + rh'A^T
        g     = 1/2 y'Qg y + qg'y

    Every matrix may be a constant array or a callable of the type label.
    ``coupling`` maps a coefficient name to a list of (statistic index,
    matrix) pairs.
    """

    name = "graphon_affine"

    def __init__(
        self,
        dims=None,
        T=1.0,
        stats=(),
        lin=None,
        const=None,
        coupling=None,
        ell=None,
        terminal_stats=(),
        G=None,
        h=None,
        g=None,
        convex=None,
        name=None,
    ):
        super().__init__(dims, T)
        self.stats = tuple(stats)
        self.terminal_stats = tuple(terminal_stats)
        for s in self.stats:
            if s.L.shape[1] != self.dims.D:
                raise InvalidInput("running statistics need L of width D")
        for s in self.terminal_stats:
            if s.L.shape[1] != self.dims.n:
                raise InvalidInput("terminal statistics need L of width n")
        self.lin = dict(lin or {})
        self.const = dict(const or {})
        self.coupling = {k: list(v) for k, v in (coupling or {}).items()}
        self.ell = dict(ell or {})
        self.G = dict(G or {})
        self.h = dict(h or {})
        self.g = dict(g or {})
        if name:
            self.name = name
        self._cache = {}
        self.measure_free = not self._reads_measure()
        self.control_law_free = self.measure_free or all(
            not np.any(s.L[:, self.dims.sa]) for s in self.stats
        )
        self.convex = bool(convex) if convex is not None else self._auto_convex()

    # structure -------------------------------------------------------------
    def _reads_measure(self):
        if any(self.coupling.get(k) for k in ("b", "sigma", "f")):
            return True
        if self.stats and any(self.ell.get(k) is not None for k in ("N", "R", "r")):
            return True
        if self.terminal_stats and (
            self.G.get("coupling") or any(self.h.get(k) is not None for k in ("N", "R", "r"))
        ):
            return True
        return False

    def _auto_convex(self):
        """Linear statistics + affine dynamics + PSD quadratic costs."""
        if any(s.square for s in self.stats + self.terminal_stats):
            return False
        if any(callable(v) for v in list(self.ell.values()) + list(self.h.values()) + list(self.g.values())):
            return False
        try:
            D, S = self.dims.D, sum(s.s for s in self.stats)
            Q = np.asarray(self.ell.get("Q", np.zeros((D, D))), float)
            N = np.asarray(self.ell.get("N", np.zeros((D, S))), float).reshape(D, S)
            R = np.asarray(self.ell.get("R", np.zeros((S, S))), float).reshape(S, S)
            big = np.block([[Q, N], [N.T, R]]) if S else Q
            n, ST = self.dims.n, sum(s.s for s in self.terminal_stats)
            Qh = np.asarray(self.h.get("Q", np.zeros((n, n))), float)
            Nh = np.asarray(self.h.get("N", np.zeros((n, ST))), float).reshape(n, ST)
            Rh = np.asarray(self.h.get("R", np.zeros((ST, ST))), float).reshape(ST, ST)
            bigh = np.block([[Qh, Nh], [Nh.T, Rh]]) if ST else Qh
            Qg = np.asarray(self.g.get("Q", np.zeros((self.dims.l, self.dims.l))), float)
        except (ValueError, TypeError):
            return False
        psd = lambda A: np.linalg.eigvalsh(0.5 * (A + A.T)).min() >= -1e-12
        # f, G enter H multiplied by the adjoint; affine dynamics keep H convex
        return psd(big) and psd(bigh) and psd(Qg)

    def _params(self, atlas):
        key = tuple(atlas.types), atlas.weights.tobytes()
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        d = self.dims
        D = d.D
        P = {}
        for name in ("b", "sigma", "f"):
            r = d.out_dim(name)
            P["L_" + name] = _resolve(self.lin.get(name), atlas, (r, D))
            P["c_" + name] = _resolve(self.const.get(name), atlas, (r,))
            P["A_" + name] = [
                (q, _resolve(mat, atlas, (r, self.stats[q].s))) for q, mat in self.coupling.get(name, [])
            ]
        S = sum(s.s for s in self.stats)
        P["ell_Q"] = _resolve(self.ell.get("Q"), atlas, (D, D))
        P["ell_q"] = _resolve(self.ell.get("q"), atlas, (D,))
        P["ell_N"] = _resolve(self.ell.get("N"), atlas, (D, S))
        P["ell_R"] = _resolve(self.ell.get("R"), atlas, (S, S))
        P["ell_r"] = _resolve(self.ell.get("r"), atlas, (S,))
        P["ell_c"] = _resolve(self.ell.get("c"), atlas, ())
        ST = sum(s.s for s in self.terminal_stats)
        n, l = d.n, d.l
        P["G_x"] = _resolve(self.G.get("x"), atlas, (l, n))
        P["G_c"] = _resolve(self.G.get("c"), atlas, (l,))
        P["G_A"] = [(q, _resolve(mat, atlas, (l, self.terminal_stats[q].s))) for q, mat in self.G.get("coupling", [])]
        P["h_Q"] = _resolve(self.h.get("Q"), atlas, (n, n))
        P["h_q"] = _resolve(self.h.get("q"), atlas, (n,))
        P["h_N"] = _resolve(self.h.get("N"), atlas, (n, ST))
        P["h_R"] = _resolve(self.h.get("R"), atlas, (ST, ST))
        P["h_r"] = _resolve(self.h.get("r"), atlas, (ST,))
        P["g_Q"] = _resolve(self.g.get("Q"), atlas, (l, l))
        P["g_q"] = _resolve(self.g.get("q"), atlas, (l,))
        P["K"] = [s.kernel_matrix(atlas) for s in self.stats]
        P["KT"] = [s.kernel_matrix(atlas) for s in self.terminal_stats]
        off = np.cumsum([0] + [s.s for s in self.stats])
        P["off"] = [slice(off[i], off[i + 1]) for i in range(len(self.stats))]
        offT = np.cumsum([0] + [s.s for s in self.terminal_stats])
        P["offT"] = [slice(offT[i], offT[i + 1]) for i in range(len(self.terminal_stats))]
        self._cache[key] = P
        return P

    # contexts ---------------------------------------------------------------
    def _aggregate(self, atlas, clouds, stats, kernels):
        aggs = []
        for s, K in zip(stats, kernels):
            means = np.stack([w @ s.phi(p) for p, w in clouds])  # (M, s)
            aggs.append(K @ (atlas.weights[:, None] * means))
        return tuple(aggs)

    def context(self, atlas, data):
        P = self._params(atlas)
        if not self.stats:
            return Context(atlas)
        clouds = _clouds_of(atlas, data, self.dims.D)
        return Context(atlas, clouds, self._aggregate(atlas, clouds, self.stats, P["K"]))

    def terminal_context(self, atlas, data):
        P = self._params(atlas)
        if not self.terminal_stats:
            return Context(atlas)
        clouds = _clouds_of(atlas, data, self.dims.n)
        return Context(atlas, clouds, self._aggregate(atlas, clouds, self.terminal_stats, P["KT"]))

    def _agg_vec(self, ctx, ui):
        if not self.stats:
            return np.zeros((len(ui), 0))
        return np.concatenate([a[ui] for a in ctx.aggregates], axis=-1)

    # evaluators -------------------------------------------------------------
    def _affine(self, name, th, ctx, ui):
        P = self._params(ctx.atlas)
        ui = _as_index(ui, ctx.atlas.M)
        out = np.einsum("mrd,mnd->mnr", P["L_" + name][ui], th) + P["c_" + name][ui][:, None, :]
        for q, mat in P["A_" + name]:
            out = out + np.einsum("mrs,ms->mr", mat[ui], ctx.aggregates[q][ui])[:, None, :]
        return out

    def drift(self, t, th, ctx, ui=None):
        return self._affine("b", th, ctx, ui)

    def diffusion(self, t, th, ctx, ui=None):
        return self._affine("sigma", th, ctx, ui)

    def driver(self, t, th, ctx, ui=None):
        return self._affine("f", th, ctx, ui)

    def running_cost(self, t, th, ctx, ui=None):
        P = self._params(ctx.atlas)
        ui = _as_index(ui, ctx.atlas.M)
        A = self._agg_vec(ctx, ui)
        val = 0.5 * np.einsum("mnd,mde,mne->mn", th, P["ell_Q"][ui], th)
        val += np.einsum("md,mnd->mn", P["ell_q"][ui], th)
        val += np.einsum("mnd,mds,ms->mn", th, P["ell_N"][ui], A)
        val += (0.5 * np.einsum("ms,mst,mt->m", A, P["ell_R"][ui], A) + np.einsum("ms,ms->m", P["ell_r"][ui], A))[
            :, None
        ]
        return val + P["ell_c"][ui][:, None]

    def _aggT(self, ctx, ui):
        if not self.terminal_stats:
            return np.zeros((len(ui), 0))
        return np.concatenate([a[ui] for a in ctx.aggregates], axis=-1)

    def terminal(self, x, ctx, ui=None):
        P = self._params(ctx.atlas)
        ui = _as_index(ui, ctx.atlas.M)
        out = np.einsum("mln,mkn->mkl", P["G_x"][ui], x) + P["G_c"][ui][:, None, :]
        for q, mat in P["G_A"]:
            out = out + np.einsum("mls,ms->ml", mat[ui], ctx.aggregates[q][ui])[:, None, :]
        return out

    def terminal_cost(self, x, ctx, ui=None):
        P = self._params(ctx.atlas)
        ui = _as_index(ui, ctx.atlas.M)
        A = self._aggT(ctx, ui)
        val = 0.5 * np.einsum("mkn,mnp,mkp->mk", x, P["h_Q"][ui], x) + np.einsum("mn,mkn->mk", P["h_q"][ui], x)
        val += np.einsum("mkn,mns,ms->mk", x, P["h_N"][ui], A)
        val += (0.5 * np.einsum("ms,mst,mt->m", A, P["h_R"][ui], A) + np.einsum("ms,ms->m", P["h_r"][ui], A))[:, None]
        return val

    def initial_cost(self, y, ui=None, atlas=None):
        if atlas is None:
            raise InvalidInput("initial_cost needs the atlas")
        P = self._params(atlas)
        ui = _as_index(ui, atlas.M)
        return 0.5 * np.einsum("mkl,mlp,mkp->mk", y, P["g_Q"][ui], y) + np.einsum("ml,mkl->mk", P["g_q"][ui], y)

    # partials ---------------------------------------------------------------
    def jacobian(self, name, t, th, ctx, ui=None):
        P = self._params(ctx.atlas)
        ui = _as_index(ui, ctx.atlas.M)
        M_, N = th.shape[:2]
        if name == "ell":
            A = self._agg_vec(ctx, ui)
            g = np.einsum("mde,mne->mnd", 0.5 * (P["ell_Q"][ui] + P["ell_Q"][ui].transpose(0, 2, 1)), th)
            g += P["ell_q"][ui][:, None, :] + np.einsum("mds,ms->md", P["ell_N"][ui], A)[:, None, :]
            return g[:, :, None, :]
        L = P["L_" + name][ui]
        return np.broadcast_to(L[:, None], (M_, N) + L.shape[1:])

    def terminal_jacobian(self, name, x, ctx, ui=None):
        P = self._params(ctx.atlas)
        ui = _as_index(ui, ctx.atlas.M)
        M_, N = x.shape[:2]
        if name == "G":
            Gx = P["G_x"][ui]
            return np.broadcast_to(Gx[:, None], (M_, N) + Gx.shape[1:])
        A = self._aggT(ctx, ui)
        Qs = 0.5 * (P["h_Q"][ui] + P["h_Q"][ui].transpose(0, 2, 1))
        g = np.einsum("mnp,mkp->mkn", Qs, x) + P["h_q"][ui][:, None, :]
        g += np.einsum("mns,ms->mn", P["h_N"][ui], A)[:, None, :]
        return g[:, :, None, :]

    def initial_grad(self, y, ui=None, atlas=None):
        P = self._params(atlas)
        ui = _as_index(ui, atlas.M)
        Qs = 0.5 * (P["g_Q"][ui] + P["g_Q"][ui].transpose(0, 2, 1))
        return np.einsum("mlp,mkp->mkl", Qs, y) + P["g_q"][ui][:, None, :]

    # d gamma / d A_q at own states: list of (q, array (M', N, r, s_q))
    def _dA(self, name, th, ctx, ui):
        P = self._params(ctx.atlas)
        ui = _as_index(ui, ctx.atlas.M)
        M_, N = th.shape[:2]
        if name == "ell":
            if not self.stats:
                return []
            A = self._agg_vec(ctx, ui)
            Rs = 0.5 * (P["ell_R"][ui] + P["ell_R"][ui].transpose(0, 2, 1))
            dA = np.einsum("mds,mnd->mns", P["ell_N"][ui], th)
            dA += (np.einsum("mst,mt->ms", Rs, A) + P["ell_r"][ui])[:, None, :]
            return [(q, dA[:, :, None, sl]) for q, sl in enumerate(P["off"])]
        out = []
        for q, mat in P["A_" + name]:
            out.append((q, np.broadcast_to(mat[ui][:, None], (M_, N) + mat.shape[1:])))
        return out

    def _dAT(self, name, x, ctx, ui):
        P = self._params(ctx.atlas)
        ui = _as_index(ui, ctx.atlas.M)
        M_, N = x.shape[:2]
        if name == "G":
            return [(q, np.broadcast_to(mat[ui][:, None], (M_, N) + mat.shape[1:])) for q, mat in P["G_A"]]
        if not self.terminal_stats:
            return []
        A = self._aggT(ctx, ui)
        Rs = 0.5 * (P["h_R"][ui] + P["h_R"][ui].transpose(0, 2, 1))
        dA = np.einsum("mns,mkn->mks", P["h_N"][ui], x) + (np.einsum("mst,mt->ms", Rs, A) + P["h_r"][ui])[:, None, :]
        return [(q, dA[:, :, None, sl]) for q, sl in enumerate(P["offT"])]

    def measure_derivative(self, name, t, th, ctx, ui, sample_type, samples):
        P = self._params(ctx.atlas)
        ui = _as_index(ui, ctx.atlas.M)
        samples = np.atleast_2d(np.asarray(samples, float))
        r = self.dims.out_dim(name)
        out = np.zeros(th.shape[:2] + (len(samples), r, self.dims.D))
        for q, dA in self._dA(name, th, ctx, ui):
            kap = P["K"][q][ui, sample_type]  # (M',)
            grad = self.stats[q].grad(samples)  # (Q, s, D)
            out += kap[:, None, None, None, None] * np.einsum("mnrs,jsd->mnjrd", dA, grad)
        return out

    def terminal_measure_derivative(self, name, x, ctx, ui, sample_type, samples):
        P = self._params(ctx.atlas)
        ui = _as_index(ui, ctx.atlas.M)
        samples = np.atleast_2d(np.asarray(samples, float))
        r = self.dims.out_dim(name)
        out = np.zeros(x.shape[:2] + (len(samples), r, self.dims.n))
        for q, dA in self._dAT(name, x, ctx, ui):
            kap = P["KT"][q][ui, sample_type]
            grad = self.terminal_stats[q].grad(samples)
            out += kap[:, None, None, None, None] * np.einsum("mnrs,jsd->mnjrd", dA, grad)
        return out

    # O(M N) contractions ---------------------------------------------------
    def _fwd(self, dA_list, stats, kernels, x_all, dx_all, weights):
        out = None
        for q, dA in dA_list:
            s = stats[q]
            gd = np.einsum("mjsd,mjd->ms", s.grad(x_all), dx_all) / x_all.shape[1]
            V = kernels[q] @ (weights[:, None] * gd)  # (M, s)
            term = np.einsum("mnrs,ms->mnr", dA, V)
            out = term if out is None else out + term
        return out

    def mf_forward(self, name, t, th_all, ctx, dth_all):
        P = self._params(ctx.atlas)
        M, N = th_all.shape[:2]
        out = self._fwd(self._dA(name, th_all, ctx, None), self.stats, P["K"], th_all, dth_all, ctx.atlas.weights)
        return np.zeros((M, N, self.dims.out_dim(name))) if out is None else out

    def terminal_mf_forward(self, name, x_all, ctx, dx_all):
        P = self._params(ctx.atlas)
        M, N = x_all.shape[:2]
        out = self._fwd(
            self._dAT(name, x_all, ctx, None), self.terminal_stats, P["KT"], x_all, dx_all, ctx.atlas.weights
        )
        return np.zeros((M, N, self.dims.out_dim(name))) if out is None else out

    def _swap(self, pieces, stats, kernels, x_all, weights, width):
        M, N = x_all.shape[:2]
        W = {}
        for q, dA, c in pieces:
            m = np.einsum("mjrs,mjr->ms", dA, c) / N
            W[q] = W.get(q, 0.0) + kernels[q].T @ (weights[:, None] * m)
        out = np.zeros((M, N, width))
        for q, Wq in W.items():
            out += np.einsum("mnsd,ms->mnd", stats[q].grad(x_all), Wq)
        return out

    def mf_swapped(self, t, th_all, ctx, mults):
        P = self._params(ctx.atlas)
        pieces = []
        for name, c in mults.items():
            c = np.asarray(c, float)
            if c.ndim == 2:
                c = c[..., None]
            pieces += [(q, dA, c) for q, dA in self._dA(name, th_all, ctx, None)]
        return self._swap(pieces, self.stats, P["K"], th_all, ctx.atlas.weights, self.dims.D)

    def terminal_mf_swapped(self, x_all, ctx, mults):
        P = self._params(ctx.atlas)
        pieces = []
        for name, c in mults.items():
            c = np.asarray(c, float)
            if c.ndim == 2:
                c = c[..., None]
            pieces += [(q, dA, c) for q, dA in self._dAT(name, x_all, ctx, None)]
        return self._swap(pieces, self.terminal_stats, P["KT"], x_all, ctx.atlas.weights, self.dims.n)

    # structural constants -------------------------------------------------
    def forward_decoupled(self, atlas):
        P = self._params(atlas)
        yz = slice(self.dims.n, self.dims.n + self.dims.l + self.dims.lz)
        return not (np.any(P["L_b"][..., yz]) or np.any(P["L_sigma"][..., yz]))

    def constant_sheet(self, atlas):
        from .conditions import ConstantSheet

        return ConstantSheet(**derive_constants(self, atlas))


def _spec(A):
    A = np.asarray(A, float)
    if A.size == 0:
        return 0.0
    return float(np.linalg.norm(A, 2)) if A.ndim == 2 else float(np.linalg.norm(A))


def derive_constants(model, atlas):
    """Lipschitz/monotonicity constants of a :class:`GraphonAffineModel`.

    Square statistics are not globally Lipschitz in W2; their constants are
    reported as ``inf``.
    """
    d = model.dims
    P = model._params(atlas)
    w = atlas.weights
    M = atlas.M
    blocks = {1: d.sx, 2: d.sy, 3: d.sz, 4: d.sa}

    def worst(f):
        return max(f(u) for u in range(M))

    def part(name, blk):
        return worst(lambda u: _spec(P["L_" + name][u][:, blocks[blk]]))

    def sym_max(A):
        return float(np.linalg.eigvalsh(0.5 * (A + A.T)).max())

    def mf_lip(name, blk=None):
        # |gamma(eta1) - gamma(eta2)| <= const * W_{2,m}, restricted to a marginal if blk given
        def one(u):
            tot = 0.0
            for q, mat in P["A_" + name]:
                s = model.stats[q]
                if s.square:
                    if blk is None or np.any(s.L[:, blocks[blk]]):
                        return math.inf
                    continue
                L = s.L if blk is None else s.L[:, blocks[blk]]
                kap = math.sqrt(float(w @ P["K"][q][u] ** 2))
                tot += _spec(mat[u]) * _spec(L) * kap
            return tot

        return worst(one)

    def adj_bound(name, blk):
        # sup_u ( sum_v w_v |dP gamma^v(.)(theta^u)|^2 )^(1/2) for the block
        def one(u):
            acc = 0.0
            for v in range(M):
                tot = 0.0
                for q, mat in P["A_" + name]:
                    s = model.stats[q]
                    L = s.L[:, blocks[blk]]
                    if s.square and np.any(L):
                        return math.inf
                    tot += abs(P["K"][q][v, u]) * _spec(mat[v]) * _spec(L)
                acc += w[v] * tot * tot
            return math.sqrt(acc)

        return worst(one)

    lam1 = worst(lambda u: sym_max(P["L_b"][u][:, d.sx]))
    lam2 = worst(lambda u: sym_max(P["L_f"][u][:, d.sy]))

    # sigma: |sum_i S_i D_i|^2 <= (#nonzero) sum |S_i|^2 |D_i|^2
    sig_parts = [part("sigma", 1), part("sigma", 2), part("sigma", 3), mf_lip("sigma"), part("sigma", 4)]
    nnz = max(1, sum(1 for v in sig_parts if v > 0))
    wv = [math.sqrt(nnz) * v for v in sig_parts]
    sig_marg = [mf_lip("sigma", i) for i in (1, 2, 3)]
    nnz_m = max(1, sum(1 for v in sig_parts[:3] + sig_marg if v > 0))
    wm = [math.sqrt(nnz_m) * v for v in sig_marg]

    gx = worst(lambda u: _spec(P["G_x"][u]))

    def g_lip(u):
        tot = 0.0
        for q, mat in P["G_A"]:
            s = model.terminal_stats[q]
            if s.square:
                return math.inf
            tot += _spec(mat[u]) * _spec(s.L) * math.sqrt(float(w @ P["KT"][q][u] ** 2))
        return tot

    g5 = worst(g_lip)
    scale = math.sqrt(2.0) if gx > 0 and g5 > 0 else 1.0

    def g_adj(u):
        acc = 0.0
        for v in range(M):
            tot = 0.0
            for q, mat in P["G_A"]:
                s = model.terminal_stats[q]
                if s.square:
                    return math.inf
                tot += abs(P["KT"][q][v, u]) * _spec(mat[v]) * _spec(s.L)
            acc += w[v] * tot * tot
        return math.sqrt(acc)

    out = dict(
        lam1=lam1,
        lam2=lam2,
        rho=max(part("b", 1), part("f", 2)),
        rho1=part("b", 2),
        rho2=part("b", 3),
        rho3=mf_lip("b"),
        rho4=scale * gx,
        rho5=scale * g5,
        rho6=part("b", 4),
        mu1=part("f", 1),
        mu2=part("f", 3),
        mu3=mf_lip("f"),
        mu4=part("f", 4),
        w1=wv[0],
        w2=wv[1],
        w3=wv[2],
        w4=wv[3],
        w5=wv[4],
        rho31=mf_lip("b", 1),
        rho32=mf_lip("b", 2),
        rho33=mf_lip("b", 3),
        mu31=mf_lip("f", 1),
        mu32=mf_lip("f", 2),
        mu33=mf_lip("f", 3),
        w41=wm[0],
        w42=wm[1],
        w43=wm[2],
        rho5bar=worst(g_adj),
        C_alpha=max(adj_bound(g, 4) for g in ("b", "sigma", "f")),
    )
    for g, tag in (("b", "b"), ("sigma", "sigma"), ("f", "f")):
        for i in (1, 2, 3):
            out[f"mu_{tag}{i}"] = adj_bound(g, i)
    return out


# ---------------------------------------------------------------------------
# factories


def zero_model(dims=None, T=1.0):
    """b = sigma = f = 0, G = 0, l = h = g = 0."""
    return GraphonAffineModel(dims or Dims(), T, name="zero")


def _unit_row(width, col):
    e = np.zeros((1, width))
    e[0, col] = 1.0
    return e


def graphon_linear(
    T=1.0,
    beta=1.0,
    c_b=0.0,
    gamma=1.0,
    q_f=0.0,
    c_f=0.0,
    g_x=0.0,
    c_G=0.0,
    sigma=1.0,
    b_y=0.0,
    b_a=0.0,
    kappa=1.0,
    ell_x=0.0,
    ell_a=0.0,
    h_x=0.0,
):
    """Scalar graphon-linear FBSDE (n = l = d = k = 1).

    b = -beta x + b_y y + b_a a + c_b A(u),   sigma = const,
    f = -gamma y + q_f x + c_f A(u),          G = g_x x + c_G A^T(u),
    A(u) = sum_v m_v kappa(u, v) E[X^v],      l = (ell_x x^2 + ell_a a^2)/2,
    h = h_x x^2 / 2.
    """
    dims = Dims(1, 1, 1, 1)
    D = dims.D
    Lb = np.zeros((1, D))
    Lb[0, 0], Lb[0, 1], Lb[0, 3] = -beta, b_y, b_a
    Lf = np.zeros((1, D))
    Lf[0, 0], Lf[0, 1] = q_f, -gamma
    stats = (Statistic(_unit_row(D, 0), kappa),)
    coupling = {}
    if c_b:
        coupling["b"] = [(0, [[c_b]])]
    if c_f:
        coupling["f"] = [(0, [[c_f]])]
    tstats = (Statistic([[1.0]], kappa, terminal=True),)
    G = {"x": [[g_x]]}
    if c_G:
        G["coupling"] = [(0, [[c_G]])]
    Q = np.zeros((D, D))
    Q[0, 0], Q[3, 3] = ell_x, ell_a
    return GraphonAffineModel(
        dims,
        T,
        stats=stats if coupling else (),
        lin={"b": Lb, "f": Lf},
        const={"sigma": [sigma]},
        coupling=coupling,
        ell={"Q": Q},
        terminal_stats=tstats if c_G else (),
        G=G,
        h={"Q": [[h_x]]},
        name="graphon_linear",
    )


def heterogeneous_lq(T=1.0, a=0.0, b=1.0, sigma=1.0, q=1.0, r=1.0, qT=1.0):
    """Measure-free controlled LQ family, scalar.

    b = a(u) x + b(u) alpha, sigma = sigma(u), l = (q(u) x^2 + r(u) alpha^2)/2,
    h = qT(u) x^2 / 2, f = G = g = 0.  Each parameter may be a callable of
    the type label.  Defaults give the benchmark b = alpha, sigma = 1,
    l = (x^2 + alpha^2)/2, h = x^2/2.
    """
    dims = Dims(1, 1, 1, 1)
    D = dims.D

    def lb(u):
        L = np.zeros((1, D))
        L[0, 0] = a(u) if callable(a) else a
        L[0, 3] = b(u) if callable(b) else b
        return L

    def lq(u):
        Q = np.zeros((D, D))
        Q[0, 0] = q(u) if callable(q) else q
        Q[3, 3] = r(u) if callable(r) else r
        return Q

    typed = any(callable(p) for p in (a, b, q, r))
    return GraphonAffineModel(
        dims,
        T,
        lin={"b": lb if typed else lb(None)},
        const={"sigma": (lambda u: [sigma(u)]) if callable(sigma) else [sigma]},
        ell={"Q": lq if typed else lq(None)},
        h={"Q": (lambda u: [[qT(u)]]) if callable(qT) else [[qT]]},
        name="heterogeneous_lq",
    )


def lq_forward(T=1.0):
    return heterogeneous_lq(T)


BUILTIN = {"zero": zero_model, "graphon_linear": graphon_linear, "heterogeneous_lq": heterogeneous_lq}


# ---------------------------------------------------------------------------
# point evaluation wrappers


def _point(model, p, kernel):
    th = p.vector(model.dims)[None, None, :]
    ui = [kernel.atlas.index(p.u)]
    return th, ui


def _ctx(model, kernel):
    if not isinstance(kernel, MeasureKernel):
        raise InvalidInput("expected a MeasureKernel")
    return model.context(kernel.atlas, kernel)


def eval_dynamics(model, p, kernel):
    ctx = _ctx(model, kernel)
    th, ui = _point(model, p, kernel)
    b = model.drift(p.t, th, ctx, ui)[0, 0]
    s = model.diffusion(p.t, th, ctx, ui)[0, 0].reshape(model.dims.n, model.dims.d)
    f = model.driver(p.t, th, ctx, ui)[0, 0]
    return b, s, f


def _x_point(model, x):
    x = np.atleast_1d(np.asarray(x, float))
    if x.shape != (model.dims.n,) or not np.all(np.isfinite(x)):
        raise InvalidInput("terminal state must be a finite vector of size n")
    return x[None, None, :]


def eval_terminal(model, u, x, kernel_x):
    ctx = model.terminal_context(kernel_x.atlas, kernel_x)
    return model.terminal(_x_point(model, x), ctx, [kernel_x.atlas.index(u)])[0, 0]


def eval_costs(model, p, kernel):
    ctx = _ctx(model, kernel)
    th, ui = _point(model, p, kernel)
    return float(model.running_cost(p.t, th, ctx, ui)[0, 0])


def eval_terminal_cost(model, u, x, kernel_x):
    ctx = model.terminal_context(kernel_x.atlas, kernel_x)
    return float(model.terminal_cost(_x_point(model, x), ctx, [kernel_x.atlas.index(u)])[0, 0])


def eval_initial_cost(model, u, y, atlas):
    y = np.atleast_1d(np.asarray(y, float))
    if y.shape != (model.dims.l,) or not np.all(np.isfinite(y)):
        raise InvalidInput("y must be a finite vector of size l")
    return float(model.initial_cost(y[None, None, :], [atlas.index(u)], atlas)[0, 0])


_PARTIAL_BLOCK = {"x": 1, "y": 2, "z": 3, "a": 4, "alpha": 4}


def eval_partials(model, p, kernel, which):
    """Jacobians such as ``b_x``, ``sigma_z``, ``ell_a``, ``f_y``.

    Returns a dict; ``sigma_*`` rows follow the flattened n x d layout and
    scalar coefficients (ell) return gradient vectors.
    """
    ctx = _ctx(model, kernel)
    th, ui = _point(model, p, kernel)
    out = {}
    for key in which:
        name, _, var = key.partition("_")
        if name not in RUNNING or var not in _PARTIAL_BLOCK:
            raise UnsupportedDerivative(f"unknown partial {key!r}")
        J = model.jacobian(name, p.t, th, ctx, ui)[0, 0][:, model.dims.block(_PARTIAL_BLOCK[var])]
        out[key] = J[0] if name == "ell" else np.array(J)
    return out


def eval_measure_derivative(model, gamma, p, kernel, i, sample, sample_type=None):
    """Block ``i`` columns of dP gamma^u(Theta)(sample), shape (r, size_i)."""
    ctx = _ctx(model, kernel)
    th, ui = _point(model, p, kernel)
    v = kernel.atlas.index(p.u if sample_type is None else sample_type)
    sample = np.asarray(sample, float).reshape(1, -1)
    md = model.measure_derivative(gamma, p.t, th, ctx, ui, v, sample)[0, 0, 0]
    return md[:, model.dims.block(i)]


# ---------------------------------------------------------------------------
# finite-difference audit


def _rel(fd, an):
    fd, an = np.asarray(fd, float), np.asarray(an, float)
    return float(np.max(np.abs(fd - an)) / max(1.0, float(np.max(np.abs(an))) if an.size else 1.0)) if an.size else 0.0


def finite_diff_check(model, p, kernel, eps_ladder=(1e-3, 1e-4, 1e-5), delta_ladder=(1e-2, 1e-3, 1e-4)):
    """Compare analytic partials and L_m-derivatives with central differences.

    Returns ``{"partials": {name: {eps: err}}, "measure": {name: {delta: ratio}}}``.
    Partial errors are max-abs differences relative to max(1, |analytic|).
    Measure entries are the ratio between the central-difference change of
    gamma when one particle moves and the first-order prediction
    m_v * w_j * dP gamma(theta_j) . e; the ratio is 1.0 when both vanish.
    """
    d = model.dims
    atlas = kernel.atlas
    ctx = _ctx(model, kernel)
    th, ui = _point(model, p, kernel)
    D = d.D
    report = {"partials": {}, "measure": {}}
    for name in RUNNING:
        J = model.jacobian(name, p.t, th, ctx, ui)[0, 0]
        errs = {}
        for eps in eps_ladder:
            fd = np.empty_like(J)
            for c in range(D):
                e = np.zeros(D)
                e[c] = eps
                hi = model.evaluate(name, p.t, th + e, ctx, ui)[0, 0]
                lo = model.evaluate(name, p.t, th - e, ctx, ui)[0, 0]
                fd[:, c] = (hi - lo) / (2 * eps)
            errs[eps] = _rel(fd, J)
        report["partials"][name] = errs
    # terminal pieces
    xk = kernel.project(["x"]) if len(kernel.blocks) > 1 else kernel
    tctx = model.terminal_context(atlas, xk)
    x = th[..., d.sx]
    for name in TERMINAL:
        J = model.terminal_jacobian(name, x, tctx, ui)[0, 0]
        errs = {}
        for eps in eps_ladder:
            fd = np.empty_like(J)
            for c in range(d.n):
                e = np.zeros(d.n)
                e[c] = eps
                hi = model.evaluate_terminal(name, x + e, tctx, ui)[0, 0]
                lo = model.evaluate_terminal(name, x - e, tctx, ui)[0, 0]
                fd[:, c] = (hi - lo) / (2 * eps)
            errs[eps] = _rel(fd, J)
        report["partials"][name] = errs
    y = th[..., d.sy]
    gy = model.initial_grad(y, ui, atlas)[0, 0]
    errs = {}
    for eps in eps_ladder:
        fd = np.empty(d.l)
        for c in range(d.l):
            e = np.zeros(d.l)
            e[c] = eps
            fd[c] = (model.initial_cost(y + e, ui, atlas) - model.initial_cost(y - e, ui, atlas))[0, 0] / (2 * eps)
        errs[eps] = _rel(fd, gy)
    report["partials"]["g"] = errs

    # measure derivatives: move particle j of every type along a fixed direction
    direction = np.linspace(1.0, -0.5, D)
    direction /= np.linalg.norm(direction)
    for name in RUNNING:
        report["measure"][name] = _measure_slopes(model, p, kernel, name, direction, delta_ladder, terminal=False)
    dx = np.linspace(1.0, -0.5, d.n) if d.n > 1 else np.ones(1)
    dx /= np.linalg.norm(dx)
    for name in TERMINAL:
        report["measure"][name] = _measure_slopes(model, p, xk, name, dx, delta_ladder, terminal=True)
    return report


def _measure_slopes(model, p, kernel, name, direction, deltas, terminal):
    from .measures import WeightedCloud

    atlas = kernel.atlas
    d = model.dims
    th, ui = _point(model, p, kernel)
    if terminal:
        x = p.vector(d)[d.sx][None, None, :]
        ctx = model.terminal_context(atlas, kernel)
        base = lambda c: model.evaluate_terminal(name, x, c, ui)[0, 0]
    else:
        ctx = model.context(atlas, kernel)
        base = lambda c: model.evaluate(name, p.t, th, c, ui)[0, 0]
    worst = {}
    for delta in deltas:
        ratios = []
        for v, cloud in enumerate(kernel.clouds):
            j = 0
            pt = cloud.points[j]
            if terminal:
                md = model.terminal_measure_derivative(name, x, ctx, ui, v, pt[None])[0, 0, 0]
            else:
                md = model.measure_derivative(name, p.t, th, ctx, ui, v, pt[None])[0, 0, 0]
            pred = atlas.weights[v] * cloud.weights[j] * (md @ direction)

            def moved(sign):
                pts = cloud.points.copy()
                pts[j] = pts[j] + sign * delta * direction
                clouds = list(kernel.clouds)
                clouds[v] = WeightedCloud(pts, cloud.weights)
                k2 = MeasureKernel(atlas, tuple(clouds), kernel.blocks)
                c2 = model.terminal_context(atlas, k2) if terminal else model.context(atlas, k2)
                return base(c2)

            fd = (moved(1.0) - moved(-1.0)) / (2 * delta)
            scale = max(float(np.max(np.abs(pred))), float(np.max(np.abs(fd))))
            if scale < 1e-13:
                ratios.append(1.0)
                continue
            k = int(np.argmax(np.abs(pred))) if np.max(np.abs(pred)) > 0 else 0
            ratios.append(float(fd.ravel()[k] / pred.ravel()[k]) if pred.ravel()[k] != 0 else math.inf)
        worst[delta] = max(ratios, key=lambda r: abs(r - 1.0))
    return worst
