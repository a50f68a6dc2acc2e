"""Type atlases, per-type empirical measures and optimal-transport distances.

A :class:`MeasureKernel` is the discrete stand-in for a Markov kernel
``u -> P^u``: one weighted point cloud per atlas type.  Distances between
kernels integrate squared per-type W2 distances against the atlas weights.
"""
from __future__ import annotations

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Sequence

import numpy as np
from scipy import sparse
from scipy.optimize import linear_sum_assignment, linprog
from scipy.special import roots_hermitenorm

from . import rng as _rng
from .errors import InvalidInput, InvalidSpec

BLOCK_NAMES = ("x", "y", "z", "a")
DEFAULT_CAP = 512
_WEIGHT_TOL = 1e-12


def _threads():
    try:
        return max(1, int(os.environ.get("HETFBSDE_THREADS", "1")))
    except ValueError:
        return 1


# ---------------------------------------------------------------------------
# type atlas


@dataclass(frozen=True)
class TypeAtlas:
    """Finite weighted discretisation of the type space (U, m)."""

    types: tuple
    weights: np.ndarray
    seed: int | None = None
    mode: str = "grid"

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "types", tuple(self.types))
        if w.ndim != 1 or len(w) != len(self.types) or len(w) == 0:
            raise InvalidInput("atlas needs one weight per type and at least one type")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise InvalidInput("atlas weights must be finite and nonnegative")
        if abs(w.sum() - 1.0) > _WEIGHT_TOL:
            raise InvalidInput(f"atlas weights sum to {w.sum()!r}, expected 1")
        keys = [_label_key(t) for t in self.types]
        if len(set(keys)) != len(keys):
            raise InvalidInput("atlas type labels must be distinct")

    @property
    def M(self):
        return len(self.types)

    def index(self, u):
        key = _label_key(u)
        for i, t in enumerate(self.types):
            if _label_key(t) == key:
                return i
        raise InvalidInput(f"type {u!r} not in atlas")

    def same_as(self, other):
        if self is other:
            return True
        return (
            self.M == other.M
            and all(_label_key(a) == _label_key(b) for a, b in zip(self.types, other.types))
            and np.array_equal(self.weights, other.weights)
        )

    def to_dict(self):
        return {
            "types": [_label_json(t) for t in self.types],
            "weights": self.weights.tolist(),
            "seed": self.seed,
            "mode": self.mode,
        }


def _label_key(t):
    if isinstance(t, np.ndarray):
        return tuple(t.ravel().tolist())
    if isinstance(t, (list, tuple)):
        return tuple(t)
    if isinstance(t, (np.floating, np.integer)):
        return t.item()
    return t


def _label_json(t):
    k = _label_key(t)
    return list(k) if isinstance(k, tuple) else k


def build_type_atlas(spec, seed=0):
    """Build a :class:`TypeAtlas` from an atlas spec.

    ``spec`` is a mapping with keys ``mode`` (``grid`` or ``iid``), ``count``
    and ``distribution``.  Supported distributions: ``uniform`` (``low``,
    ``high``; midpoint rule in grid mode), ``normal`` (``mean``, ``std``;
    Gauss-Hermite nodes in grid mode) and ``discrete`` (``labels``,
    ``probs``).  Grid mode is one-dimensional; iid mode also accepts vector
    ``low``/``high``/``mean``/``std``.
    """
    spec = dict(spec)
    mode = spec.get("mode", "grid")
    count = int(spec.get("count", 0))
    dist = dict(spec.get("distribution", {"kind": "uniform", "low": 0.0, "high": 1.0}))
    kind = dist.get("kind", "uniform")
    if count < 1:
        raise InvalidSpec("atlas count M must be >= 1")
    if mode not in ("grid", "iid"):
        raise InvalidSpec(f"unknown atlas mode {mode!r}")

    if kind == "discrete":
        labels = list(dist["labels"])
        probs = np.asarray(dist.get("probs", np.full(len(labels), 1.0 / len(labels))), float)
        if len(labels) != len(probs) or np.any(probs < 0) or abs(probs.sum() - 1) > 1e-9:
            raise InvalidSpec("discrete distribution needs matching labels/probs summing to 1")
        if mode == "grid":
            if count != len(labels):
                raise InvalidSpec("grid mode on a discrete m needs count == len(labels)")
            return TypeAtlas(tuple(labels), probs / probs.sum(), seed, mode)
        draws = _rng.uniform_blocks(seed, "atlas", 0, count, 1)[:, 0]
        idx = np.searchsorted(np.cumsum(probs) / probs.sum(), draws, side="right")
        idx = np.minimum(idx, len(labels) - 1)
        # repeated draws merge into one type carrying the summed weight
        uniq, counts = np.unique(idx, return_counts=True)
        return TypeAtlas(tuple(labels[i] for i in uniq), counts / count, seed, mode)

    if kind == "uniform":
        low = np.atleast_1d(np.asarray(dist.get("low", 0.0), float))
        high = np.atleast_1d(np.asarray(dist.get("high", 1.0), float))
        if low.shape != high.shape or np.any(high <= low):
            raise InvalidSpec("uniform distribution needs low < high")
        if mode == "grid":
            if low.size != 1:
                raise InvalidSpec("grid mode supports one-dimensional type spaces only")
            h = (high[0] - low[0]) / count
            types = low[0] + h * (np.arange(count) + 0.5)
            return TypeAtlas(tuple(types.tolist()), np.full(count, 1.0 / count), seed, mode)
        u = _rng.uniform_blocks(seed, "atlas", 0, count, low.size)
        pts = low + (high - low) * u
        types = pts[:, 0].tolist() if low.size == 1 else [tuple(p) for p in pts.tolist()]
        return TypeAtlas(tuple(types), np.full(count, 1.0 / count), seed, mode)

    if kind == "normal":
        mean = np.atleast_1d(np.asarray(dist.get("mean", 0.0), float))
        std = np.atleast_1d(np.asarray(dist.get("std", 1.0), float))
        if np.any(std <= 0):
            raise InvalidSpec("normal distribution needs std > 0")
        if mode == "grid":
            if mean.size != 1:
                raise InvalidSpec("grid mode supports one-dimensional type spaces only")
            nodes, w = roots_hermitenorm(count)
            w = w / w.sum()
            return TypeAtlas(tuple((mean[0] + std[0] * nodes).tolist()), w, seed, mode)
        z = _rng.normal_blocks(seed, "atlas", 0, count, mean.size)
        pts = mean + std * z
        types = pts[:, 0].tolist() if mean.size == 1 else [tuple(p) for p in pts.tolist()]
        return TypeAtlas(tuple(types), np.full(count, 1.0 / count), seed, mode)

    raise InvalidSpec(f"unknown type distribution {kind!r}")


# ---------------------------------------------------------------------------
# clouds and kernels


@dataclass(frozen=True)
class WeightedCloud:
    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.points, dtype=float)
        if p.ndim == 1:
            p = p[:, None]
        w = np.asarray(self.weights, dtype=float)
        if p.ndim != 2 or w.shape != (p.shape[0],) or p.shape[0] == 0:
            raise InvalidInput("cloud needs points of shape (P, D) and P weights")
        if np.any(w < 0) or abs(w.sum() - 1.0) > _WEIGHT_TOL:
            raise InvalidInput("cloud weights must be nonnegative and sum to 1")
        object.__setattr__(self, "points", p)
        object.__setattr__(self, "weights", w)

    @classmethod
    def uniform(cls, points):
        p = np.asarray(points, dtype=float)
        if p.ndim == 1:
            p = p[:, None]
        return cls(p, np.full(p.shape[0], 1.0 / p.shape[0]))

    @property
    def dim(self):
        return self.points.shape[1]

    @property
    def size(self):
        return self.points.shape[0]

    def mean(self, phi=None):
        vals = self.points if phi is None else np.asarray(phi(self.points), dtype=float)
        if vals.ndim == 1:
            vals = vals[:, None]
        return self.weights @ vals


@dataclass(frozen=True)
class MeasureKernel:
    """One cloud per atlas type; ``blocks`` names the marginal components."""

    atlas: TypeAtlas
    clouds: tuple
    blocks: tuple = field(default=())

    def __post_init__(self):
        clouds = tuple(self.clouds)
        object.__setattr__(self, "clouds", clouds)
        if len(clouds) != self.atlas.M:
            raise InvalidInput("kernel needs exactly one cloud per atlas type")
        dims = {c.dim for c in clouds}
        if len(dims) != 1:
            raise InvalidInput("all clouds of a kernel must share one dimension")
        if not self.blocks:
            object.__setattr__(self, "blocks", (("c", clouds[0].dim),))
        blocks = tuple((str(n), int(s)) for n, s in self.blocks)
        object.__setattr__(self, "blocks", blocks)
        if sum(s for _, s in blocks) != clouds[0].dim:
            raise InvalidInput("block sizes do not add up to the cloud dimension")
        for c in clouds:
            if not np.all(np.isfinite(c.points)):
                raise InvalidInput("kernel clouds must have finite coordinates")

    @property
    def dim(self):
        return self.clouds[0].dim

    def block_slices(self):
        out, start = {}, 0
        for name, size in self.blocks:
            out[name] = slice(start, start + size)
            start += size
        return out

    def project(self, names):
        sl = self.block_slices()
        missing = [n for n in names if n not in sl]
        if missing:
            raise InvalidInput(f"kernel has no blocks {missing}")
        keep = [n for n, _ in self.blocks if n in names]
        cols = np.concatenate([np.arange(sl[n].start, sl[n].stop) for n in keep])
        clouds = tuple(WeightedCloud(c.points[:, cols], c.weights) for c in self.clouds)
        sizes = dict(self.blocks)
        return MeasureKernel(self.atlas, clouds, tuple((n, sizes[n]) for n in keep))


def kernel_from_points(atlas, points, blocks=()):
    """Uniform-weight kernel from an array of shape (M, N, D)."""
    points = np.asarray(points, dtype=float)
    if points.ndim != 3 or points.shape[0] != atlas.M or points.shape[1] == 0:
        raise InvalidInput("points must have shape (M, N, D) with N >= 1")
    clouds = tuple(WeightedCloud.uniform(points[i]) for i in range(atlas.M))
    return MeasureKernel(atlas, clouds, tuple(blocks))


def empirical_kernel(ensemble, t, marginals="all"):
    """Per-type empirical law of the selected components at time index ``t``.

    ``ensemble`` exposes arrays ``X, Y, Z, A`` of shape (M, N, steps+1, .)
    and an ``atlas``.  Blocks always appear in the canonical (x, y, z, a)
    order regardless of the selector order.
    """
    arrays = {"x": ensemble.X, "y": ensemble.Y, "z": ensemble.Z, "a": ensemble.A}
    if ensemble.X.size == 0 or ensemble.X.shape[1] == 0:
        raise InvalidInput("empty ensemble")
    nt = ensemble.X.shape[2]
    if not -nt <= t < nt:
        raise InvalidInput(f"time index {t} outside ensemble grid of {nt} nodes")
    names = BLOCK_NAMES if marginals == "all" else tuple(m.lower() for m in marginals)
    unknown = set(names) - set(BLOCK_NAMES)
    if unknown:
        raise InvalidInput(f"unknown marginals {sorted(unknown)}")
    keep = [n for n in BLOCK_NAMES if n in names]
    pts = np.concatenate([arrays[n][:, :, t, :] for n in keep], axis=-1)
    blocks = tuple((n, arrays[n].shape[-1]) for n in keep)
    return kernel_from_points(ensemble.atlas, pts, blocks)


# ---------------------------------------------------------------------------
# transport


def _check_pair(a, b):
    if a.dim != b.dim:
        raise InvalidInput(f"dimension mismatch: {a.dim} vs {b.dim}")
    if not (np.all(np.isfinite(a.points)) and np.all(np.isfinite(b.points))):
        raise InvalidInput("clouds contain non-finite coordinates")


def _w2sq_1d(xa, wa, xb, wb):
    ia = np.lexsort((np.arange(len(xa)), xa))
    ib = np.lexsort((np.arange(len(xb)), xb))
    xa, wa, xb, wb = xa[ia], wa[ia], xb[ib], wb[ib]
    ca = np.cumsum(wa)
    cb = np.cumsum(wb)
    ca[-1] = cb[-1] = 1.0
    cuts = np.unique(np.concatenate([ca, cb]))
    cuts = cuts[cuts <= 1.0]
    lo = np.concatenate([[0.0], cuts[:-1]])
    lengths = cuts - lo
    mids = 0.5 * (cuts + lo)
    ja = np.minimum(np.searchsorted(ca, mids), len(xa) - 1)
    jb = np.minimum(np.searchsorted(cb, mids), len(xb) - 1)
    return float(np.sum(lengths * (xa[ja] - xb[jb]) ** 2))


def _sqdist(pa, pb):
    diff = pa[:, None, :] - pb[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def _replication(w, limit):
    """Smallest L <= limit with w * L integral (to 1e-12), else None."""
    if np.allclose(w, 1.0 / len(w), rtol=0, atol=1e-15):
        return len(w)
    L = 1
    for x in w:
        L = math.lcm(L, Fraction(float(x)).limit_denominator(limit).denominator)
        if L > limit:
            return None
    reps = np.rint(w * L)
    if np.max(np.abs(w * L - reps)) > 1e-12 * L or reps.sum() != L or reps.min() < 1:
        return None
    return L


def _w2sq_assignment(pa, pb, reps_a, reps_b):
    A = np.repeat(pa, reps_a, axis=0)
    B = np.repeat(pb, reps_b, axis=0)
    cost = _sqdist(A, B)
    r, c = linear_sum_assignment(cost)
    return float(cost[r, c].sum() / len(r))


def _tree_basis(plan):
    """Spanning tree over rows 0..P-1 and columns P..P+Q-1 holding the support of ``plan``."""
    P, Q = plan.shape
    parent = list(range(P + Q))

    def find(k):
        while parent[k] != k:
            parent[k] = parent[parent[k]]
            k = parent[k]
        return k

    basis = []
    for flat in np.argsort(-plan, axis=None, kind="stable"):
        i, j = divmod(int(flat), Q)
        ri, rj = find(i), find(P + j)
        if ri != rj:
            parent[ri] = rj
            basis.append((i, j))
            if len(basis) == P + Q - 1:
                break
    return basis


def _adjacency(basis, P, Q):
    adj = [[] for _ in range(P + Q)]
    for e, (i, j) in enumerate(basis):
        adj[i].append((P + j, e))
        adj[P + j].append((i, e))
    return adj


def _tree_flows(basis, wa, wb):
    """Flows on a spanning-tree basis are fixed by the marginals (leaf peeling)."""
    P, Q = len(wa), len(wb)
    rest = np.concatenate([wa, wb]).astype(float)
    adj = _adjacency(basis, P, Q)
    deg = [len(a) for a in adj]
    flow = np.zeros(len(basis))
    done = np.zeros(len(basis), bool)
    stack = [k for k in range(P + Q) if deg[k] == 1]
    while stack:
        k = stack.pop()
        if deg[k] != 1:
            continue
        other, e = next((n, e) for n, e in adj[k] if not done[e])
        flow[e] = max(rest[k], 0.0)
        rest[other] -= flow[e]
        done[e] = True
        deg[k] -= 1
        deg[other] -= 1
        if deg[other] == 1:
            stack.append(other)
    # peeling residues are rounding noise; on costly cells they would dominate tiny distances
    flow[flow < 16 * np.finfo(float).eps * (P + Q)] = 0.0
    return flow


def _tree_walk(adj, root):
    """BFS order and (parent, edge) pointers of a tree."""
    prev = {root: (None, None)}
    order = [root]
    for k in order:
        for n, e in adj[k]:
            if n not in prev:
                prev[n] = (k, e)
                order.append(n)
    return order, prev


def _cycle(adj, basis, i0, j0, P):
    """Tree path from column j0 back to row i0 (edge indices, column end first)."""
    _, back = _tree_walk(adj, i0)
    path, k = [], P + j0
    while k != i0:
        par, e = back[k]
        path.append(e)
        k = par
    return path


def _exact_reduced(C, basis, path, i0, j0):
    # alternating cost sum around the pivot cycle, correctly rounded
    terms = [C[i0, j0]]
    for pos, e in enumerate(path):
        terms.append(-C[basis[e]] if pos % 2 == 0 else C[basis[e]])
    return math.fsum(terms)


def _polish(C, basis, flow, max_pivots):
    """Transportation simplex from a feasible tree basis to an optimal one.

    LP solvers accept reduced costs down to an absolute tolerance, far too
    coarse once costs span many orders of magnitude (W2 then takes a square
    root of the error).  Float reduced costs screen the cells and every
    borderline cell is settled by an exact alternating sum around its cycle.
    """
    P, Q = C.shape
    screen = 1e-9 * C.max()
    in_basis = np.zeros((P, Q), bool)
    for i, j in basis:
        in_basis[i, j] = True
    for _ in range(max_pivots):
        adj = _adjacency(basis, P, Q)
        order, prev = _tree_walk(adj, 0)
        pot = np.zeros(P + Q)
        for k in order[1:]:
            par, e = prev[k]
            pot[k] = C[basis[e]] - pot[par]
        red = C - pot[:P, None] - pot[None, P:]
        red[in_basis] = np.inf
        entering = None
        for flat in np.argsort(red, axis=None, kind="stable"):
            i0, j0 = divmod(int(flat), Q)
            if red[i0, j0] >= screen:
                break
            path = _cycle(adj, basis, i0, j0, P)
            if red[i0, j0] < -screen or _exact_reduced(C, basis, path, i0, j0) < 0:
                entering = (i0, j0, path)
                break
        if entering is None:
            break
        i0, j0, path = entering
        minus = path[0::2]
        leave = min(minus, key=lambda e: flow[e])
        theta = max(flow[leave], 0.0)
        for pos, e in enumerate(path):
            flow[e] += -theta if pos % 2 == 0 else theta
        flow[flow < 16 * np.finfo(float).eps * (P + Q)] = 0.0
        in_basis[basis[leave]] = False
        basis[leave] = (i0, j0)
        in_basis[i0, j0] = True
        flow[leave] = theta
    return math.fsum(flow[e] * C[ij] for e, ij in enumerate(basis))


def _w2sq_lp(pa, wa, pb, wb):
    P, Q = len(wa), len(wb)
    C = _sqdist(pa, pb)
    scale = C.max()
    if scale == 0.0:
        return 0.0
    rows = sparse.kron(sparse.eye(P), np.ones((1, Q)))
    cols = sparse.kron(np.ones((1, P)), sparse.eye(Q)).tocsr()
    A_eq = sparse.vstack([rows, cols[:-1]]).tocsr()
    b_eq = np.concatenate([wa, wb[:-1]])
    res = linprog(C.ravel() / scale, A_eq=A_eq, b_eq=b_eq, bounds=(0, None), method="highs-ds")
    if not res.success:
        raise InvalidInput(f"transport LP failed: {res.message}")
    basis = _tree_basis(res.x.reshape(P, Q))
    flow = _tree_flows(basis, wa, wb)
    return max(_polish(C, basis, flow, 50 * (P + Q)), 0.0)


def _subsample(cloud, cap, idx=None):
    if cloud.size <= cap:
        return cloud, None
    if idx is None:
        idx = np.sort(_rng.generator(0, "subsample", cloud.size).choice(cloud.size, cap, replace=False))
    w = cloud.weights[idx]
    return WeightedCloud(cloud.points[idx], w / w.sum()), idx


def wasserstein2_detail(a, b, cap=DEFAULT_CAP):
    """Exact W2 between two discrete measures plus a subsampling flag.

    Dimension one uses the sorted-quantile coupling (ties broken by point
    index).  Higher dimensions solve the transport problem exactly: weights
    that are multiples of a common 1/L reduce to an assignment problem on
    replicated atoms, anything else goes to a dual-simplex LP.  Clouds larger than ``cap`` are replaced
    by a seeded subsample of ``cap`` atoms (the same atom indices for both
    clouds when they have equal size, which keeps particle pairing under
    common random numbers) and the result is flagged as an estimate.
    """
    _check_pair(a, b)
    if a.dim == 1:
        return math.sqrt(_w2sq_1d(a.points[:, 0], a.weights, b.points[:, 0], b.weights)), False
    flagged = False
    if a.size > cap or b.size > cap:
        flagged = True
        shared = a.size == b.size
        a, idx = _subsample(a, cap)
        b, _ = _subsample(b, cap, idx if shared else None)
    limit = max(cap, a.size, b.size) * 4
    La, Lb = _replication(a.weights, limit), _replication(b.weights, limit)
    if La and Lb and math.lcm(La, Lb) <= limit:
        L = math.lcm(La, Lb)
        ra, rb = np.rint(a.weights * L).astype(int), np.rint(b.weights * L).astype(int)
        return math.sqrt(_w2sq_assignment(a.points, b.points, ra, rb)), flagged
    return math.sqrt(_w2sq_lp(a.points, a.weights, b.points, b.weights)), flagged


def wasserstein2(a, b, cap=DEFAULT_CAP):
    return wasserstein2_detail(a, b, cap)[0]


def wasserstein2_m_detail(a, b, cap=DEFAULT_CAP):
    """Per-type distances, the aggregated W2,m value and a subsampling flag."""
    if not a.atlas.same_as(b.atlas):
        raise InvalidInput("kernels live on different atlases")
    if a.dim != b.dim:
        raise InvalidInput("kernels have different dimensions")
    pairs = list(zip(a.clouds, b.clouds))
    threads = _threads()
    if threads > 1 and len(pairs) > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(lambda p: wasserstein2_detail(p[0], p[1], cap), pairs))
    else:
        results = [wasserstein2_detail(p, q, cap) for p, q in pairs]
    per_type = np.array([r[0] for r in results])
    total = 0.0
    for w, d in zip(a.atlas.weights, per_type):  # atlas order keeps the sum bit-stable
        total += w * d * d
    return math.sqrt(total), per_type, any(r[1] for r in results)


def wasserstein2_m(a, b, cap=DEFAULT_CAP):
    return wasserstein2_m_detail(a, b, cap)[0]


def graphon_aggregate(kernel, kappa, phi, u):
    """sum over types of weight * kappa(u, type) * (cloud mean of phi)."""
    out = None
    for label, w, cloud in zip(kernel.atlas.types, kernel.atlas.weights, kernel.clouds):
        k = float(kappa(u, label))
        term = w * k * cloud.mean(phi)
        out = term if out is None else out + term
    return out


# ---------------------------------------------------------------------------
# serialisation


def write_kernel(kernel, csv_path, header_path, dims=None):
    """Columnar CSV ``type_index, weight, component_0..`` plus a JSON header."""
    rows = []
    for i, cloud in enumerate(kernel.clouds):
        block = np.column_stack([np.full(cloud.size, i), cloud.weights, cloud.points])
        rows.append(block)
    data = np.vstack(rows)
    D = kernel.dim
    head = "type_index,weight," + ",".join(f"component_{j}" for j in range(D))
    with open(csv_path, "w") as fh:
        fh.write(head + "\n")
        for r in data:
            fh.write(f"{int(r[0])}," + ",".join(repr(float(v)) for v in r[1:]) + "\n")
    header = dict(dims or {})
    header.update(
        {
            "M": kernel.atlas.M,
            "N": [c.size for c in kernel.clouds],
            "blocks": [list(b) for b in kernel.blocks],
            "atlas": kernel.atlas.to_dict(),
        }
    )
    with open(header_path, "w") as fh:
        json.dump(header, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_kernel(csv_path, header_path):
    with open(header_path) as fh:
        header = json.load(fh)
    at = header["atlas"]
    types = [tuple(t) if isinstance(t, list) else t for t in at["types"]]
    atlas = TypeAtlas(tuple(types), np.asarray(at["weights"]), at.get("seed"), at.get("mode", "grid"))
    data = np.loadtxt(csv_path, delimiter=",", skiprows=1, ndmin=2)
    clouds = []
    for i in range(atlas.M):
        rows = data[data[:, 0] == i]
        w = rows[:, 1]
        clouds.append(WeightedCloud(rows[:, 2:], w / w.sum()))
    return MeasureKernel(atlas, tuple(clouds), tuple(tuple(b) for b in header["blocks"])), header
