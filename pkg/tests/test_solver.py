import json
import math

import numpy as np
import pytest

from hetfbsde.errors import DivergenceError, InvalidInput
from hetfbsde.measures import build_type_atlas
from hetfbsde.models import GraphonAffineModel, InitialLaw, graphon_linear, lq_forward
from hetfbsde.regression import Projector, basis_spec, design
from hetfbsde.solver import (
    KernelFlow,
    PicardOptions,
    TimeGrid,
    picard_solve,
    residual,
    simulate_noise,
    write_trajectories,
)
from hetfbsde.control import ControlField


def atlas(M=1):
    return build_type_atlas({"mode": "grid", "count": M, "distribution": {"kind": "uniform", "low": 0, "high": 1}})


def solve(model, N=500, steps=20, seed=0, M=1, initial=None, opts=None, control=None):
    return picard_solve(model, control, atlas(M), N, TimeGrid(model.T, steps), seed, opts, initial)


# --- grid and noise -----------------------------------------------------------


def test_time_grid():
    g = TimeGrid(2.0, 4)
    assert g.dt == 0.5 and np.allclose(g.times, [0, 0.5, 1, 1.5, 2])
    for bad in ((0.0, 4), (1.0, 0), (1.0, 2.5), (math.inf, 3)):
        with pytest.raises(InvalidInput):
            TimeGrid(*bad)


def test_noise_moments_and_independence():
    g = TimeGrid(1.0, 10)
    nz = simulate_noise(atlas(2), 20000, g, 3)
    dB = nz.dB[..., 0]
    assert abs(dB.var() / g.dt - 1) < 0.02
    assert abs(dB.mean()) < 3 * math.sqrt(g.dt / dB.size)
    C = np.corrcoef(dB[0].T)
    assert np.max(np.abs(C - np.eye(10))) < 0.03
    assert abs(np.corrcoef(dB[0, :, 0], dB[1, :, 0])[0, 1]) < 0.03


def test_noise_is_seeded_and_prefix_stable():
    g = TimeGrid(1.0, 5)
    a = simulate_noise(atlas(2), 50, g, 1)
    b = simulate_noise(atlas(2), 80, g, 1)
    assert np.array_equal(a.dB, b.dB[:, :50]) and np.array_equal(a.chi0, b.chi0[:, :50])
    assert not np.array_equal(a.dB, simulate_noise(atlas(2), 50, g, 2).dB)
    with pytest.raises(InvalidInput):
        simulate_noise(atlas(), 0, g, 1)


# --- regression ------------------------------------------------------------------


def test_projector_full_rank_and_ridge():
    g = np.random.default_rng(0)
    x, c = g.normal(size=(200, 1)), g.normal(size=(200, 1))
    Phi = design(x, c, "quadratic")
    assert Phi.shape == (200, 4)
    P = Projector(Phi)
    y = g.normal(size=200)
    assert not P.ridge and np.allclose(P(P(y)), P(y))
    assert np.allclose(P(Phi @ [1.0, 2.0, -1.0, 0.5]), Phi @ [1.0, 2.0, -1.0, 0.5])
    Pr = Projector(np.hstack([Phi, Phi[:, :1]]))
    assert Pr.ridge and np.allclose(Pr(y), P(y), atol=1e-6)
    assert basis_spec({"degree": 1, "chi0": False}) == basis_spec("linear")
    with pytest.raises(ValueError):
        basis_spec("cubic")


# --- forward oracles ---------------------------------------------------------------


def test_brownian_forward_is_sum_of_increments():
    m = graphon_linear(beta=0.0, sigma=1.0)
    ens, _, _ = solve(m, N=100, steps=8)
    assert np.allclose(ens.X[0, :, -1, 0] - ens.X[0, :, 0, 0], ens.noise.dB[0, :, :, 0].sum(1))


@pytest.mark.parametrize("beta", [0.5, 1.0, 2.0])
def test_euler_first_order(beta):
    m = graphon_linear(beta=beta, sigma=0.0)
    errs = []
    for steps in (25, 50, 100):
        ens, _, _ = solve(m, N=2, steps=steps, initial=InitialLaw(kind="dirac", mean=1.0))
        errs.append(abs(ens.X[0, 0, -1, 0] - math.exp(-beta)))
    assert 1.7 <= errs[0] / errs[1] <= 2.3 and 1.7 <= errs[1] / errs[2] <= 2.3


def test_forward_matches_exact_euler_product():
    m = graphon_linear(beta=1.0, sigma=0.0)
    ens, _, _ = solve(m, N=2, steps=10, initial=InitialLaw(kind="dirac", mean=2.0))
    assert ens.X[0, 0, -1, 0] == pytest.approx(2.0 * 0.9**10, rel=1e-14)


# --- backward oracles --------------------------------------------------------------


def test_constant_terminal_gives_constant_y_zero_z():
    m = GraphonAffineModel(T=1.0, const={"sigma": [1.0]}, G={"c": [2.5]})
    ens, _, _ = solve(m, N=300, steps=10)
    assert np.allclose(ens.Y, 2.5, atol=1e-12) and np.allclose(ens.Z, 0.0, atol=1e-12)


def test_martingale_representation():
    m = graphon_linear(beta=0.0, gamma=0.0, g_x=1.0, sigma=1.0)
    ens, flow, diag = solve(m, N=2000, steps=20, initial=InitialLaw(std=0.5))
    err = np.sqrt(np.mean((ens.Y - ens.X) ** 2, axis=(0, 1)))
    assert err.max() < 0.05
    assert 0.95 <= ens.Z[..., :-1, 0].mean() <= 1.05
    assert diag.backward_defect_bound > 0 and diag.ridge_fallbacks == 0


def test_linear_driver_ode():
    """f = -y with G = 1: Y_t = exp(-(T - t)) deterministically."""
    m = GraphonAffineModel(T=1.0, lin={"f": [[0, -1.0, 0, 0]]}, const={"sigma": [1.0]}, G={"c": [1.0]})
    ens, _, _ = solve(m, N=200, steps=20)
    exact = np.exp(-(1.0 - ens.grid.times))
    assert np.max(np.abs(ens.Y[0, :, :, 0] - exact)) <= ens.grid.dt


def test_values_are_adapted():
    """Y_j and Z_j are functions of (X_j, chi0) in the regression basis."""
    m = graphon_linear(beta=0.3, gamma=0.5, q_f=0.2, g_x=1.0, sigma=1.0)
    ens, _, _ = solve(m, N=400, steps=10)
    for j in (0, 4, 9):
        P = Projector(design(ens.X[0, :, j], ens.noise.chi0[0], "quadratic"))
        assert np.allclose(P(ens.Y[0, :, j, 0]), ens.Y[0, :, j, 0], atol=1e-10)
        assert np.allclose(P(ens.Z[0, :, j, 0]), ens.Z[0, :, j, 0], atol=1e-10)


# --- residuals ------------------------------------------------------------------------


def test_residual_of_solution_and_perturbation():
    m = graphon_linear(beta=0.0, gamma=0.0, g_x=1.0, sigma=1.0)
    M, N, S = 2, 50, 10
    ens, flow, _ = solve(m, N=N, steps=S, M=M)
    res = residual(ens, flow, m)
    assert res["forward"] == pytest.approx(0.0, abs=1e-12)
    assert res["terminal"] == pytest.approx(0.0, abs=1e-12)
    delta = 0.3
    ens.X[1, 0, S, 0] += delta
    bumped = residual(ens, flow, m)["forward"]
    assert bumped**2 == pytest.approx(0.5 * delta**2 / (N * S), rel=1e-10)


def test_residual_backward_defect_below_bound():
    m = graphon_linear(beta=0.0, gamma=0.0, g_x=1.0, sigma=1.0)
    ens, flow, diag = solve(m, N=1000, steps=10)
    assert residual(ens, flow, m)["backward"] <= diag.backward_defect_bound


# --- Picard --------------------------------------------------------------------------


def test_measure_free_picard_is_single_pass():
    ens, flow, diag = solve(lq_forward(), N=100, steps=5, M=2)
    assert diag.distances == [0.0] and diag.converged and diag.outer_iterations == 1
    assert np.array_equal(flow.points, ens.points())


def test_picard_contracts_and_returns_input_flow():
    m = graphon_linear(beta=1.0, c_b=0.5, gamma=1.0, c_f=0.1, g_x=0.5, c_G=0.1)
    opts = PicardOptions(max_outer=8, tol=1e-5)
    ens, flow, diag = solve(m, N=300, steps=10, M=2, initial=InitialLaw(mean=1.0), opts=opts)
    d = diag.distances
    assert diag.converged and d[-1] < 1e-5
    assert all(b < a for a, b in zip(d[1:], d[2:]))
    assert isinstance(flow, KernelFlow)
    assert not diag.subsampled


def test_picard_reports_nonconvergence_with_best_iterate():
    m = graphon_linear(beta=1.0, c_b=0.5, gamma=1.0, g_x=0.5)
    opts = PicardOptions(max_outer=2, tol=1e-14)
    _, _, diag = solve(m, N=100, steps=5, M=2, initial=InitialLaw(mean=1.0), opts=opts)
    assert not diag.converged and diag.outer_iterations == 2
    assert diag.best_iteration == int(np.argmin(diag.distances))


def test_damped_picard_still_converges():
    m = graphon_linear(beta=1.0, c_b=0.5, gamma=1.0, g_x=0.5, c_G=0.1)
    opts = PicardOptions(max_outer=30, tol=1e-4, damping=0.5)
    _, _, diag = solve(m, N=200, steps=5, M=2, initial=InitialLaw(mean=1.0), opts=opts)
    assert diag.converged


def test_picard_is_deterministic():
    m = graphon_linear(beta=1.0, c_b=0.5, gamma=1.0, g_x=0.5, c_G=0.1)
    a = solve(m, N=200, steps=5, M=2, seed=4, initial=InitialLaw(mean=1.0))
    b = solve(m, N=200, steps=5, M=2, seed=4, initial=InitialLaw(mean=1.0))
    assert np.array_equal(a[0].points(), b[0].points()) and a[2].distances == b[2].distances
    c = solve(m, N=200, steps=5, M=2, seed=5, initial=InitialLaw(mean=1.0))
    assert not np.array_equal(a[0].X, c[0].X)


def test_horizon_mismatch_and_divergence():
    m = graphon_linear(T=2.0)
    with pytest.raises(InvalidInput):
        picard_solve(m, None, atlas(), 10, TimeGrid(1.0, 5), 0)
    wild = graphon_linear(beta=-1e300, sigma=1.0)
    with pytest.raises(DivergenceError) as err:
        solve(wild, N=10, steps=5)
    assert err.value.stage == "forward"


def test_control_enters_forward_drift():
    m = lq_forward()
    ctl = ControlField.zeros("open_loop", 1, 10)
    ctl.params[...] = 1.0
    ens, _, _ = solve(m, N=20, steps=10, control=ctl)
    drift = ens.X[0, :, -1, 0] - ens.X[0, :, 0, 0] - ens.noise.dB[0, :, :, 0].sum(1)
    assert np.allclose(drift, 1.0)


def test_write_trajectories(tmp_path):
    ens, _, diag = solve(lq_forward(), N=3, steps=4, M=2)
    files = write_trajectories(ens, tmp_path, diag)
    assert files == ["trajectories_type0.csv", "trajectories_type1.csv"]
    lines = (tmp_path / files[0]).read_text().splitlines()
    assert lines[0] == "particle,step,t,x_0,y_0,z_0,a_0" and len(lines) == 1 + 3 * 5
    summary = json.loads((tmp_path / "trajectories.json").read_text())
    assert summary["steps"] == 4 and summary["diagnostics"]["converged"]
