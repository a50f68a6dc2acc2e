import json
import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hetfbsde.conditions import (
    ConstantSheet,
    SearchBudget,
    Witness,
    assert_consistent,
    canonical_witness,
    certify,
    gate,
    lambda_bars,
    lhs,
    report_json,
    theta,
)
from hetfbsde.errors import InvalidInput, InvalidWitness

VARIANTS = ("base", "marginal", "variational", "adjoint", "combined")
DECOUPLED = ConstantSheet(lam1=-1.0, lam2=-1.0, rho4=1.0)


def test_decoupled_theta_is_two_thirds():
    assert theta(DECOUPLED, Witness(lam=0.0)) == pytest.approx(2 / 3, abs=1e-12)
    rep = certify(DECOUPLED)
    assert rep.feasible and rep.status == "feasible"
    assert rep.lambda_bar1 == pytest.approx(2.0) and rep.lambda_bar2 == pytest.approx(2.0)


def test_gate_rejects_zero_monotonicity():
    sheet = ConstantSheet(lam1=0.0, lam2=0.0, rho3=1.0)
    ok, margin = gate(sheet)
    assert not ok and margin == pytest.approx(-2.0)
    assert certify(sheet).status == "infeasible-gate"


def test_theta_hand_value():
    s = ConstantSheet(lam1=-1.0, lam2=-0.5, rho1=0.2, rho3=0.1, mu1=0.3, mu3=0.05, rho4=0.5, rho5=0.2)
    w = Witness()
    l1 = 2.0 - 0.2 - 4 * 0.1
    l2 = 1.0 - 0.3 - 0.05 - 3 * 0.05
    assert lambda_bars(s, w) == pytest.approx((l1, l2))
    second = 0.25 + 0.04 + (0.3 + 0.05) / l1
    assert theta(s, w) == pytest.approx(1 / ((1 / l2 + 1 / 0.95) * second), rel=1e-12)
    assert lhs(s, w) == pytest.approx((0.2 + 0.1, 0.1))


def test_theta_undefined_and_vacuous():
    assert theta(ConstantSheet(lam1=1.0, lam2=1.0), Witness()) is None
    assert math.isinf(theta(ConstantSheet(lam1=-1.0, lam2=-1.0), Witness()))
    assert certify(ConstantSheet(lam1=-1.0, lam2=-1.0)).feasible


def test_supplied_witness_is_used():
    w = Witness(lam=0.3)
    rep = certify(DECOUPLED, witness=w)
    assert rep.witness == w


def test_input_validation():
    with pytest.raises(InvalidInput):
        ConstantSheet(rho1=-1.0)
    with pytest.raises(InvalidInput):
        ConstantSheet(lam1=math.nan)
    with pytest.raises(InvalidWitness):
        certify(DECOUPLED, witness=Witness(C1=0.0))
    with pytest.raises(InvalidInput):
        certify(DECOUPLED, "strong")


def test_infinite_constant_is_infeasible():
    rep = certify(ConstantSheet(lam1=-1.0, lam2=-1.0, rho3=math.inf))
    assert not rep.feasible
    json.loads(report_json([rep]))


def test_combined_variant_reports_both_thetas():
    rep = certify(DECOUPLED, "combined")
    assert rep.theta1 is not None and rep.theta2 is not None
    assert rep.theta == pytest.approx(min(rep.theta1, rep.theta2))
    assert set(rep.extra) == {"lambda_bar21", "lambda_bar22"}
    assert gate(DECOUPLED, "combined") == (True, math.inf)


def test_search_finds_witness_the_canonical_start_misses():
    s = ConstantSheet(lam1=-1.0, lam2=-1.0, rho1=0.6, rho2=0.02, rho3=0.05, mu1=0.5, rho4=0.3)
    w0 = canonical_witness(s)
    rep = certify(s)
    assert rep.feasible
    assert max(lhs(s, rep.witness)) < rep.theta
    assert rep.witness != w0 or max(lhs(s, w0)) < theta(s, w0)


def test_coupling_scale_has_a_threshold():
    base = ConstantSheet(lam1=-1.0, lam2=-1.0, rho1=0.2, rho2=0.2, rho3=0.2, mu2=0.2, mu3=0.1, w2=0.2, w3=0.2,
                         rho4=0.5, mu1=0.2)
    scales = [0.1, 0.5, 1.0, 2.0, 4.0, 8.0]
    feas = [certify(base.scaled(s)).feasible for s in scales]
    assert feas[0] and not feas[-1]
    # once infeasible, larger couplings stay infeasible
    first_bad = feas.index(False)
    assert not any(feas[first_bad:])


def test_report_dict_is_json_safe():
    for v in VARIANTS:
        d = certify(DECOUPLED, v).to_dict()
        assert d["variant"] == v
        json.dumps(d)


sheets = st.builds(
    ConstantSheet,
    lam1=st.floats(-2, 0.5),
    lam2=st.floats(-2, 0.5),
    rho1=st.floats(0, 0.5),
    rho2=st.floats(0, 0.5),
    rho3=st.floats(0, 0.5),
    rho4=st.floats(0, 1),
    rho5=st.floats(0, 0.5),
    mu1=st.floats(0, 0.5),
    mu2=st.floats(0, 0.5),
    mu3=st.floats(0, 0.5),
    w1=st.floats(0, 0.3),
    w2=st.floats(0, 0.3),
    w3=st.floats(0, 0.3),
    w4=st.floats(0, 0.3),
)

SMALL = SearchBudget(rounds=2, polish=1)


@settings(max_examples=40, deadline=None)
@given(sheets, st.sampled_from(VARIANTS))
def test_feasible_reports_satisfy_every_inequality(sheet, variant):
    rep = certify(sheet, variant, SMALL)
    assert_consistent(rep, sheet)
    if rep.feasible:
        assert min(lambda_bars(sheet, rep.witness, variant)) > 0
        assert all(0 <= v < rep.theta for v in rep.lhs)
    if rep.status == "infeasible-gate":
        assert not gate(sheet, variant)[0]


@settings(max_examples=40, deadline=None)
@given(sheets, st.floats(0.1, 10))
def test_theta_is_nonincreasing_in_terminal_lipschitz(sheet, factor):
    w = canonical_witness(sheet)
    t1 = theta(sheet, w)
    t2 = theta(ConstantSheet(**{**sheet.to_dict(), "rho4": sheet.rho4 * (1 + factor)}), w)
    if t1 is not None and t2 is not None and math.isfinite(t1):
        assert t2 <= t1 + 1e-12


@settings(max_examples=40, deadline=None)
@given(sheets)
def test_gate_is_monotone_in_lambda(sheet):
    ok, m = gate(sheet)
    ok2, m2 = gate(ConstantSheet(**{**sheet.to_dict(), "lam1": sheet.lam1 - 0.5}))
    assert m2 == pytest.approx(m + 1.0)
