import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hetfbsde import rng
from hetfbsde.errors import InvalidInput, UnsupportedDerivative
from hetfbsde.measures import kernel_from_points
from hetfbsde.models import (
    CoefficientModel,
    Context,
    Dims,
    GraphonAffineModel,
    InitialLaw,
    StatePoint,
    Statistic,
    eval_costs,
    eval_dynamics,
    eval_initial_cost,
    eval_measure_derivative,
    eval_partials,
    eval_terminal,
    eval_terminal_cost,
    finite_diff_check,
    graphon_linear,
    heterogeneous_lq,
    lq_forward,
    zero_model,
)

DIMS = Dims(2, 1, 2, 1)  # D = 2 + 1 + 2 + 1 = 6


def rich_model():
    """Vector model exercising every affine piece, a square statistic and terminal coupling."""
    D, g = DIMS.D, np.random.default_rng(9)
    kap = lambda u, v: 1.0 + 0.5 * u - 0.25 * v
    stats = (Statistic(g.normal(size=(2, D)), kap), Statistic(g.normal(size=(1, D)), 0.7, square=True))
    tstats = (Statistic(g.normal(size=(1, 2)), kap, terminal=True),)
    Q = g.normal(size=(D, D))
    Lb = g.normal(size=(2, D))
    return GraphonAffineModel(
        DIMS,
        1.0,
        stats=stats,
        lin={"b": lambda u: (1 + u) * Lb, "sigma": g.normal(size=(4, D)), "f": g.normal(size=(1, D))},
        const={"b": [0.1, -0.2], "sigma": np.ones(4)},
        coupling={"b": [(0, g.normal(size=(2, 2))), (1, g.normal(size=(2, 1)))], "sigma": [(0, g.normal(size=(4, 2)))],
                  "f": [(1, [[0.3]])]},
        ell={"Q": Q @ Q.T, "q": g.normal(size=D), "N": g.normal(size=(D, 3)), "R": np.eye(3), "r": g.normal(size=3)},
        terminal_stats=tstats,
        G={"x": g.normal(size=(1, 2)), "c": [0.5], "coupling": [(0, [[0.4]])]},
        h={"Q": np.eye(2), "q": [0.1, 0.2], "N": [[0.3], [-0.1]], "R": [[2.0]], "r": [0.5]},
        g={"Q": [[1.5]], "q": [0.2]},
    )


def setup(model, M=3, N=5, seed=0):
    from hetfbsde.measures import build_type_atlas

    atlas = build_type_atlas({"mode": "grid", "count": M, "distribution": {"kind": "uniform", "low": 0, "high": 1}})
    gen = np.random.default_rng(seed)
    th = gen.normal(size=(M, N, model.dims.D))
    return atlas, th, gen


# --- containers ---------------------------------------------------------------


def test_dims_layout():
    d = Dims(2, 3, 2, 1)
    assert d.D == 2 + 3 + 6 + 1 and d.lz == 6
    v = d.pack(np.ones(2), 2 * np.ones(3), 3 * np.ones((3, 2)), [4.0])
    assert np.array_equal(v[d.sz], 3 * np.ones(6)) and v[d.sa][0] == 4.0
    assert d.blocks() == (("x", 2), ("y", 3), ("z", 6), ("a", 1))
    with pytest.raises(InvalidInput):
        Dims(0, 1, 1, 1)


def test_state_point_validation():
    p = StatePoint([1.0, 2.0], [0.0], np.zeros((1, 2)), [1.0])
    assert p.vector(DIMS).shape == (6,)
    with pytest.raises(InvalidInput):
        StatePoint([1.0], [0.0], np.zeros((1, 2)), [1.0]).vector(DIMS)
    with pytest.raises(InvalidInput):
        StatePoint([1.0, np.nan], [0.0], np.zeros((1, 2)), [1.0]).vector(DIMS)


def test_initial_law_moments_and_determinism(grid_atlas):
    at = grid_atlas(2)
    law = InitialLaw(mean=-1.0, std=2.0, mean_slope=2.0)
    m, v = law.moments(at.types[1], 1)
    assert m[0] == pytest.approx(-1 + 2 * at.types[1]) and v[0] == 4.0
    a = law.sample(at, 20000, 1, 3)
    assert np.array_equal(a, law.sample(at, 20000, 1, 3))
    assert np.array_equal(a[:, :100], law.sample(at, 100, 1, 3))
    assert abs(a[1].mean() - m[0]) < 0.05 and abs(a[1].var() - 4.0) < 0.15
    u = InitialLaw(kind="uniform", low=1.0, high=3.0).sample(at, 1000, 2, 0)
    assert u.min() > 1 and u.max() < 3
    assert np.all(InitialLaw(kind="dirac", mean=[1.0, 2.0]).sample(at, 3, 2, 0) == [1.0, 2.0])
    with pytest.raises(InvalidInput):
        InitialLaw(kind="cauchy").sample(at, 3, 1, 0)


def test_rng_blocks_are_prefix_stable():
    a = rng.normal_blocks(5, "increments", 2, 10, 3)
    b = rng.normal_blocks(5, "increments", 2, 4, 3)
    assert np.array_equal(a[:4], b)
    assert not np.array_equal(a, rng.normal_blocks(5, "increments", 3, 10, 3))
    u = rng.uniform_blocks(0, "atlas", 0, 1000, 1)
    assert 0 < u.min() and u.max() < 1


def test_context_mix(grid_atlas):
    at = grid_atlas(2)
    a = Context(at, (), (np.zeros((2, 1)),))
    b = Context(at, (), (np.ones((2, 1)),))
    assert np.allclose(a.mix(b, 0.25).aggregates[0], 0.25)
    assert Context(at).mix(b, 0.5) is b


# --- hand values --------------------------------------------------------------


def test_graphon_linear_hand_values(grid_atlas):
    at = grid_atlas(2)
    kap = lambda u, v: 1.0 - abs(u - v)
    m = graphon_linear(beta=2.0, c_b=0.5, gamma=1.0, q_f=0.3, c_f=0.1, g_x=0.5, c_G=0.2, sigma=0.7, kappa=kap,
                       ell_x=1.0, ell_a=2.0, h_x=3.0)
    pts = np.zeros((2, 2, 4))
    pts[0, :, 0], pts[1, :, 0] = [1.0, 3.0], [-1.0, 1.0]
    k = kernel_from_points(at, pts, m.dims.blocks())
    u0, u1 = at.types
    A0 = 0.5 * 1.0 * 2.0 + 0.5 * kap(u0, u1) * 0.0
    p = StatePoint([1.5], [0.4], [[0.0]], [0.3], 0.0, u0)
    b, s, f = eval_dynamics(m, p, k)
    assert b[0] == pytest.approx(-2 * 1.5 + 0.5 * A0)
    assert s[0, 0] == pytest.approx(0.7)
    assert f[0] == pytest.approx(-0.4 + 0.3 * 1.5 + 0.1 * A0)
    assert eval_costs(m, p, k) == pytest.approx(0.5 * (1.5**2 + 2 * 0.3**2))
    kx = k.project(["x"])
    assert eval_terminal(m, u0, [1.0], kx)[0] == pytest.approx(0.5 + 0.2 * A0)
    assert eval_terminal_cost(m, u0, [2.0], kx) == pytest.approx(6.0)
    assert eval_initial_cost(m, u0, [1.0], at) == 0.0
    parts = eval_partials(m, p, k, ["b_x", "f_y", "ell_a"])
    assert parts["b_x"][0, 0] == -2.0 and parts["f_y"][0, 0] == -1.0 and parts["ell_a"][0] == pytest.approx(0.6)
    md = eval_measure_derivative(m, "b", p, k, 1, [0.0, 0, 0, 0], sample_type=u1)
    assert md[0, 0] == pytest.approx(0.5 * kap(u0, u1))
    with pytest.raises(UnsupportedDerivative):
        eval_partials(m, p, k, ["q_x"])


def test_heterogeneous_lq_typed_parameters(grid_atlas):
    at = grid_atlas(2)
    m = heterogeneous_lq(a=lambda u: -u, sigma=lambda u: 1 + u)
    k = kernel_from_points(at, np.zeros((2, 1, 4)), m.dims.blocks())
    u1 = at.types[1]
    b, s, _ = eval_dynamics(m, StatePoint([2.0], [0.0], [[0.0]], [1.0], 0.0, u1), k)
    assert b[0] == pytest.approx(-u1 * 2 + 1) and s[0, 0] == pytest.approx(1 + u1)
    assert m.measure_free and not m.convex


def test_structure_flags(grid_atlas):
    at = grid_atlas(2)
    assert zero_model().measure_free and lq_forward().convex
    assert lq_forward().forward_decoupled(at)
    assert not graphon_linear(b_y=1.0).forward_decoupled(at)
    assert not graphon_linear(c_b=1.0).measure_free
    assert not rich_model().convex


def test_base_class_hooks():
    m = CoefficientModel()
    th = np.zeros((1, 1, 4))
    with pytest.raises(UnsupportedDerivative):
        m.jacobian("b", 0.0, th, None)
    with pytest.raises(UnsupportedDerivative):
        m.measure_derivative("b", 0.0, th, None, None, 0, th[0])
    with pytest.raises(InvalidInput):
        CoefficientModel(T=0.0)


def test_statistic_width_checked():
    with pytest.raises(InvalidInput):
        GraphonAffineModel(Dims(), stats=(Statistic(np.ones((1, 3))),))


# --- derived constants --------------------------------------------------------


def test_constant_sheet_graphon_linear(grid_atlas):
    at = grid_atlas(4)
    m = graphon_linear(beta=1.5, gamma=0.5, c_b=0.4, g_x=0.5, q_f=0.2, sigma=1.0)
    s = m.constant_sheet(at)
    assert s.lam1 == pytest.approx(-1.5) and s.lam2 == pytest.approx(-0.5)
    assert s.mu1 == pytest.approx(0.2) and s.rho4 == pytest.approx(0.5)
    # kappa = 1: rho3 = c_b * sqrt(sum_v m_v) = c_b
    assert s.rho3 == pytest.approx(0.4) and s.rho31 == pytest.approx(0.4)
    coupled = graphon_linear(g_x=0.5, c_G=0.1).constant_sheet(at)
    assert coupled.rho4 == pytest.approx(0.5 * math.sqrt(2)) and coupled.rho5 == pytest.approx(0.1 * math.sqrt(2))


def test_constant_sheet_square_statistic_is_unbounded(grid_atlas):
    assert math.isinf(rich_model().constant_sheet(grid_atlas(3)).rho3)


# --- fast contractions against the brute-force base implementation -------------


@pytest.mark.parametrize("name", ["b", "sigma", "f", "ell"])
def test_mf_forward_matches_brute_force(name):
    m = rich_model()
    at, th, gen = setup(m)
    ctx = m.context(at, th)
    dth = gen.normal(size=th.shape)
    fast = m.mf_forward(name, 0.0, th, ctx, dth)
    slow = CoefficientModel.mf_forward(m, name, 0.0, th, ctx, dth)
    assert np.allclose(fast, slow, atol=1e-12)


def test_mf_swapped_matches_brute_force():
    m = rich_model()
    at, th, gen = setup(m)
    ctx = m.context(at, th)
    mults = {"b": gen.normal(size=(3, 5, 2)), "sigma": gen.normal(size=(3, 5, 4)), "f": gen.normal(size=(3, 5, 1)),
             "ell": gen.normal(size=(3, 5))}
    assert np.allclose(m.mf_swapped(0.0, th, ctx, mults), CoefficientModel.mf_swapped(m, 0.0, th, ctx, mults))


def test_terminal_contractions_match_brute_force():
    m = rich_model()
    at, th, gen = setup(m)
    x = th[..., :2]
    ctx = m.terminal_context(at, x)
    dx = gen.normal(size=x.shape)
    for name in ("G", "h"):
        fast = m.terminal_mf_forward(name, x, ctx, dx)
        assert np.allclose(fast, CoefficientModel.terminal_mf_forward(m, name, x, ctx, dx))
    mults = {"G": gen.normal(size=(3, 5, 1)), "h": np.ones((3, 5))}
    assert np.allclose(m.terminal_mf_swapped(x, ctx, mults), CoefficientModel.terminal_mf_swapped(m, x, ctx, mults))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_forward_and_swapped_contractions_are_adjoint(seed):
    """sum_u m_u mean_i c . F[dth] == sum_u m_u mean_i S[c] . dth."""
    m = rich_model()
    at, th, gen = setup(m, seed=seed)
    ctx = m.context(at, th)
    dth = gen.normal(size=th.shape)
    c = gen.normal(size=(3, 5, 2))
    lhs = at.weights @ np.mean(np.sum(c * m.mf_forward("b", 0.0, th, ctx, dth), -1), 1)
    rhs = at.weights @ np.mean(np.sum(m.mf_swapped(0.0, th, ctx, {"b": c}) * dth, -1), 1)
    assert lhs == pytest.approx(rhs, rel=1e-10, abs=1e-12)


# --- finite-difference audits ---------------------------------------------------


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_finite_difference_audit_rich_model(seed):
    m = rich_model()
    at, th, gen = setup(m, seed=seed)
    k = kernel_from_points(at, th, m.dims.blocks())
    p = StatePoint(gen.normal(size=2), gen.normal(size=1), gen.normal(size=(1, 2)), gen.normal(size=1), 0.2,
                   at.types[seed % 3])
    rep = finite_diff_check(m, p, k)
    for name, errs in rep["partials"].items():
        assert min(errs.values()) <= 1e-5, name
    for name, ratios in rep["measure"].items():
        assert min(abs(r - 1) for r in ratios.values()) <= 0.02, name


def test_audit_detects_a_wrong_partial(grid_atlas):
    class Broken(GraphonAffineModel):
        def jacobian(self, name, t, th, ctx, ui=None):
            J = np.array(super().jacobian(name, t, th, ctx, ui))
            return J * 1.01 if name == "b" else J

    good = graphon_linear(beta=1.0)
    bad = Broken(good.dims, 1.0, lin=good.lin, const=good.const)
    at = grid_atlas(2)
    k = kernel_from_points(at, np.ones((2, 2, 4)), good.dims.blocks())
    rep = finite_diff_check(bad, StatePoint([1.0], [1.0], [[1.0]], [1.0], 0.0, at.types[0]), k)
    assert min(rep["partials"]["b"].values()) > 1e-3
