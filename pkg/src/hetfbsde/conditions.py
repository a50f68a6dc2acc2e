"""Smallness-condition calculus for well-posedness certificates.

Variants:

``base``         fully coupled system, one W2,m constant per coefficient
``marginal``     coupling split over the x, y, z marginals
``variational``  control problem constant theta_1 (hatted w and rho)
``adjoint``      adjoint constant theta_2 (barred witness)
``combined``     all four left-hand sides below min(theta_1, theta_2)

A report is a sufficient-condition certificate; a failed search does not
mean the system is ill-posed.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np
from scipy.optimize import minimize

from .errors import InvalidInput, InvalidWitness

VARIANTS = ("base", "marginal", "variational", "adjoint", "combined")
INF = math.inf
SQ6 = math.sqrt(6.0)
SQ2 = math.sqrt(2.0)


@dataclass(frozen=True)
class ConstantSheet:
    lam1: float = 0.0
    lam2: float = 0.0
    rho: float = 0.0
    rho1: float = 0.0
    rho2: float = 0.0
    rho3: float = 0.0
    rho4: float = 0.0
    rho5: float = 0.0
    rho6: float = 0.0
    mu1: float = 0.0
    mu2: float = 0.0
    mu3: float = 0.0
    mu4: float = 0.0
    w1: float = 0.0
    w2: float = 0.0
    w3: float = 0.0
    w4: float = 0.0
    w5: float = 0.0
    rho31: float = 0.0
    rho32: float = 0.0
    rho33: float = 0.0
    mu31: float = 0.0
    mu32: float = 0.0
    mu33: float = 0.0
    w41: float = 0.0
    w42: float = 0.0
    w43: float = 0.0
    rho5bar: float = 0.0
    mu_b1: float = 0.0
    mu_b2: float = 0.0
    mu_b3: float = 0.0
    mu_sigma1: float = 0.0
    mu_sigma2: float = 0.0
    mu_sigma3: float = 0.0
    mu_f1: float = 0.0
    mu_f2: float = 0.0
    mu_f3: float = 0.0
    C_alpha: float = 0.0

    def __post_init__(self):
        for f in fields(self):
            v = float(getattr(self, f.name))
            object.__setattr__(self, f.name, v)
            if math.isnan(v):
                raise InvalidInput(f"constant {f.name} is NaN")
            if f.name in ("lam1", "lam2"):
                if not math.isfinite(v):
                    raise InvalidInput(f"constant {f.name} must be finite")
            elif v < 0:
                raise InvalidInput(f"constant {f.name} must be nonnegative")

    def scaled(self, s, names=("rho1", "rho2", "rho3", "mu2", "mu3", "w2", "w3", "w4")):
        return replace(self, **{n: getattr(self, n) * s for n in names})

    def to_dict(self):
        return {k: _num(v) for k, v in asdict(self).items()}


@dataclass(frozen=True)
class Witness:
    lam: float = 0.0
    C1: float = 1.0
    C2: float = 1.0
    C3: float = 1.0
    C4: float = 1.0
    K1: float = 1.0
    K2: float = 1.0
    K3: float = 1.0
    lam_bar: float = 0.0
    Cb1: float = 1.0
    Cb2: float = 1.0
    Cb3: float = 1.0
    Cb4: float = 1.0
    Kb1: float = 1.0
    Kb2: float = 1.0
    Kb3: float = 1.0

    def check(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not math.isfinite(v):
                raise InvalidWitness(f"witness {f.name} is not finite")
            if f.name not in ("lam", "lam_bar") and v <= 0:
                raise InvalidWitness(f"witness {f.name} must be strictly positive")
        return self

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class SmallnessReport:
    variant: str
    feasible: bool
    status: str  # feasible | infeasible-gate | infeasible-search
    lambda_bar1: float | None
    lambda_bar2: float | None
    theta: float | None
    lhs: tuple
    witness: Witness
    gate_margin: float | None = None
    theta1: float | None = None
    theta2: float | None = None
    denominator_margin: float | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "variant": self.variant,
            "feasible": self.feasible,
            "status": self.status,
            "lambda_bar1": _num(self.lambda_bar1),
            "lambda_bar2": _num(self.lambda_bar2),
            "theta": _num(self.theta),
            "theta1": _num(self.theta1),
            "theta2": _num(self.theta2),
            "lhs": [_num(v) for v in self.lhs],
            "gate_margin": _num(self.gate_margin),
            "denominator_margin": _num(self.denominator_margin),
            "witness": self.witness.to_dict(),
            "extra": {k: _num(v) for k, v in self.extra.items()},
        }


def _num(v):
    """JSON-safe number: infinities become the strings 'inf' / '-inf'."""
    if v is None:
        return None
    if isinstance(v, (bool, np.bool_)):
        return bool(v)
    v = float(v)
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return v


def report_json(reports):
    return json.dumps([r.to_dict() for r in reports], indent=2, sort_keys=True)


# ---------------------------------------------------------------------------
# formulas


def _hat(s):
    """Hatted constants for the control problem."""
    return dict(
        w1=SQ6 * s.w1, w2=SQ6 * s.w2, w3=SQ6 * s.w3, w4=SQ6 * s.w4, rho4=SQ2 * s.rho4, rho5=SQ2 * s.rho5
    )


def _check_variant(variant):
    if variant not in VARIANTS:
        raise InvalidInput(f"unknown variant {variant!r}; expected one of {VARIANTS}")


def lambda_bars(sheet, w, variant="base"):
    """(lambda_bar_1, lambda_bar_2) of the chosen variant.

    ``combined`` returns the variational pair followed by the adjoint pair.
    """
    _check_variant(variant)
    w.check()
    s = sheet
    if variant in ("base", "variational"):
        w1, w4 = (s.w1, s.w4) if variant == "base" else (SQ6 * s.w1, SQ6 * s.w4)
        l1 = (
            w.lam - 2 * s.lam1 - s.rho1 / w.C1 - s.rho2 / w.C2
            - (2 + 1 / w.C3 + 1 / w.C4) * s.rho3 - w1**2 - w4**2
        )
        l2 = -w.lam - 2 * s.lam2 - s.mu1 / w.K1 - (s.mu2 + s.mu3) / w.K2 - (2 + 1 / w.K3) * s.mu3
        return l1, l2
    if variant == "marginal":
        l1 = (
            w.lam - 2 * s.lam1 - s.rho1 / w.C1 - s.rho2 / w.C2 - s.rho32 / w.C3 - s.rho33 / w.C4
            - 2 * s.rho31 - s.w1**2 - s.w41**2
        )
        l2 = -w.lam - 2 * s.lam2 - s.mu1 / w.K1 - (s.mu2 + s.mu33) / w.K2 - s.mu31 / w.K3 - 2 * s.mu32
        return l1, l2
    if variant == "adjoint":
        l1 = (
            w.lam_bar - 2 * s.lam2 - s.rho1 / w.Cb1 - s.w2 / w.Cb2 - 2 * s.mu_f2 - s.mu_b2 / w.Cb3
            - s.mu_sigma2 / w.Cb4 - 6 * s.mu2**2 - 6 * s.mu_f3**2
        )
        l2 = (
            -w.lam_bar - 2 * s.lam1 - s.mu1 / w.Kb1 - s.w1 / w.Kb2 - 2 * s.mu_b1 - s.mu_f1 / w.Kb3
            - s.mu_sigma1 / w.Kb2
        )
        return l1, l2
    return lambda_bars(sheet, w, "variational") + lambda_bars(sheet, w, "adjoint")


def _denominator_margin(s, w, variant):
    if variant in ("base", "variational"):
        return 1 - w.K2 * s.mu2 - w.K2 * s.mu3
    if variant == "marginal":
        return 1 - w.K2 * s.mu2 - w.K2 * s.mu33
    if variant == "adjoint":
        return 1 - w.Kb2 * s.w1 - w.Kb2 * s.mu_sigma1
    return min(_denominator_margin(s, w, "variational"), _denominator_margin(s, w, "adjoint"))


def theta(sheet, w, variant="base"):
    """theta for the variant, ``None`` when undefined, ``inf`` when vacuous.

    ``combined`` returns min(theta_1, theta_2).
    """
    _check_variant(variant)
    if variant == "combined":
        t1, t2 = theta(sheet, w, "variational"), theta(sheet, w, "adjoint")
        if t1 is None or t2 is None:
            return None
        return min(t1, t2)
    s = sheet
    l1, l2 = lambda_bars(sheet, w, variant)
    margin = _denominator_margin(s, w, variant)
    if not (l1 > 0 and l2 > 0 and margin > 0):
        return None
    if variant == "base":
        second = s.rho4**2 + s.rho5**2 + (w.K1 * s.mu1 + w.K3 * s.mu3) / l1
    elif variant == "marginal":
        second = s.rho4**2 + s.rho5**2 + (w.K1 * s.mu1 + w.K3 * s.mu31) / l1
    elif variant == "variational":
        h = _hat(s)
        second = h["rho4"] ** 2 + h["rho5"] ** 2 + (w.K1 * s.mu1 + w.K3 * s.mu3) / l1
    else:
        second = 2 * s.rho4**2 + 2 * s.rho5bar**2 + (w.Kb1 * s.mu1 + w.Kb3 * s.mu_f1) / l1
    first = 1 / l2 + 1 / margin
    if second == 0:
        return INF
    if math.isinf(second):
        return 0.0
    return 1.0 / (first * second)


def lhs(sheet, w, variant="base"):
    """Left-hand expressions that must lie in [0, theta)."""
    _check_variant(variant)
    s = sheet
    if variant == "base":
        return (
            w.C1 * s.rho1 + s.w2**2 + w.C3 * s.rho3 + s.w4**2,
            w.C2 * s.rho2 + s.w3**2 + w.C4 * s.rho3 + s.w4**2,
        )
    if variant == "marginal":
        return (
            w.C1 * s.rho1 + s.w2**2 + w.C3 * s.rho32 + s.w42**2,
            w.C2 * s.rho2 + s.w3**2 + w.C4 * s.rho33 + s.w43**2,
        )
    if variant == "variational":
        h = _hat(s)
        return (
            w.C1 * s.rho1 + h["w2"] ** 2 + w.C3 * s.rho3 + h["w4"] ** 2,
            w.C2 * s.rho2 + h["w3"] ** 2 + w.C4 * s.rho3 + h["w4"] ** 2,
        )
    if variant == "adjoint":
        return (
            w.Cb1 * s.rho1 + 6 * s.rho2**2 + w.Cb3 * s.mu_b2 + 6 * s.mu_b3**2,
            w.Cb2 * s.w2 + 6 * s.w3**2 + w.Cb4 * s.mu_sigma2 + 6 * s.mu_sigma3**2,
        )
    return lhs(sheet, w, "adjoint") + lhs(sheet, w, "variational")


def gate(sheet, variant="base"):
    """(passes, margin) of the variant's gate inequality; margin = rhs - lhs.

    The combined variant has no separate gate and always passes.
    """
    _check_variant(variant)
    s = sheet
    left = 2 * (s.lam1 + s.lam2)
    if variant == "base":
        right = -2 * s.rho3 - s.w1**2 - s.w4**2 - (s.mu2 + s.mu3) ** 2 - 2 * s.mu3
    elif variant == "marginal":
        right = -2 * s.rho31 - s.w1**2 - s.w41**2 - (s.mu2 + s.mu33) ** 2 - 2 * s.mu32
    elif variant == "variational":
        right = -2 * s.rho3 - 6 * s.w1**2 - 6 * s.w4**2 - 2 * s.mu3 - (s.mu2 + s.mu3) ** 2
    elif variant == "adjoint":
        right = -2 * s.mu_f2 - 6 * s.mu2**2 - 6 * s.mu_f3**2 - 2 * s.mu_b1 - (s.mu_sigma1 + s.w1) ** 2
    else:
        return True, INF
    margin = right - left
    return margin > 0, margin


def _evaluate(sheet, w, variant):
    """(feasible, objective, details).  objective = theta - max(lhs)."""
    if variant == "combined":
        t1, t2 = theta(sheet, w, "variational"), theta(sheet, w, "adjoint")
        th = None if (t1 is None or t2 is None) else min(t1, t2)
    else:
        t1 = t2 = None
        th = theta(sheet, w, variant)
    L = lhs(sheet, w, variant)
    top = max(L)
    if th is None:
        bars = lambda_bars(sheet, w, variant)
        obj = -1e6 + min(min(bars), _denominator_margin(sheet, w, variant))
        return False, obj, (th, t1, t2, L)
    if math.isinf(th):
        obj = 1e6 if math.isfinite(top) else -1e6
        return math.isfinite(top), obj, (th, t1, t2, L)
    if math.isinf(top):
        return False, -1e6, (th, t1, t2, L)
    return top < th, th - top, (th, t1, t2, L)


# ---------------------------------------------------------------------------
# witness search


def _k2_cap(sheet, variant, barred=False):
    s = sheet
    if barred:
        tot = s.w1 + s.mu_sigma1
    elif variant == "marginal":
        tot = s.mu2 + s.mu33
    else:
        tot = s.mu2 + s.mu3
    if tot == 0 or not math.isfinite(1.0 / tot) or math.isinf(tot):
        return None
    return 1.0 / tot


def _balance(l1, l2):
    shift = 0.5 * (l2 - l1)
    return shift if math.isfinite(shift) else 0.0


def canonical_witness(sheet, variant="base"):
    """Unit C/K, K2 at 1 (or mid-interval) and lambda balancing the two bars."""
    w = Witness()
    cap = _k2_cap(sheet, variant)
    capb = _k2_cap(sheet, variant, barred=True)
    w = replace(w, K2=1.0 if cap is None else 0.5 * cap, Kb2=1.0 if capb is None else 0.5 * capb)
    if variant in ("base", "marginal", "variational", "combined"):
        v = "variational" if variant == "combined" else variant
        l1, l2 = lambda_bars(sheet, replace(w, lam=0.0), v)[:2]
        w = replace(w, lam=_balance(l1, l2))
    if variant in ("adjoint", "combined"):
        l1, l2 = lambda_bars(sheet, replace(w, lam_bar=0.0), "adjoint")
        w = replace(w, lam_bar=_balance(l1, l2))
    return w


@dataclass(frozen=True)
class SearchBudget:
    rounds: int = 6
    grid: tuple = tuple(10.0 ** np.arange(-3.0, 3.01, 0.5))
    lam_span: float = 8.0
    lam_points: int = 33
    k2_fracs: tuple = (0.02, 0.1, 0.25, 0.5, 0.75, 0.9, 0.98)
    polish: int = 4


def _coords(variant):
    main = ["lam", "C1", "C2", "C3", "C4", "K1", "K2", "K3"]
    bar = ["lam_bar", "Cb1", "Cb2", "Cb3", "Cb4", "Kb1", "Kb2", "Kb3"]
    if variant == "adjoint":
        return bar
    if variant == "combined":
        return main + bar
    return main


def _candidates(name, current, sheet, variant, budget, scale):
    if name in ("lam", "lam_bar"):
        span = budget.lam_span * scale
        return list(current + np.linspace(-span, span, budget.lam_points))
    if name in ("K2", "Kb2"):
        cap = _k2_cap(sheet, variant, barred=name == "Kb2")
        if cap is not None:
            fr = np.asarray(budget.k2_fracs)
            near = current / cap
            local = np.clip(near * np.exp(np.linspace(-scale, scale, 7)), 1e-6, 1 - 1e-6)
            return list(cap * np.concatenate([fr, local]))
    return list(current * np.asarray(budget.grid) ** scale)


def certify(sheet, variant="base", budget=None, witness=None):
    """Check the gate, then look for a witness with theta > max(lhs).

    A supplied ``witness`` is evaluated first and returned if feasible;
    otherwise the canonical witness is tried, and then a deterministic
    coordinate search maximising theta - max(lhs) is run.
    """
    _check_variant(variant)
    budget = budget or SearchBudget()
    ok, gm = gate(sheet, variant)
    start = canonical_witness(sheet, variant)
    if not ok:
        return _report(sheet, variant, start, False, "infeasible-gate", gm)
    tried = [witness.check()] if witness is not None else []
    for w in tried + [start]:
        feas, _, _ = _evaluate(sheet, w, variant)
        if feas:
            return _report(sheet, variant, w, True, "feasible", gm)

    best = start
    best_obj = _evaluate(sheet, best, variant)[1]
    names = _coords(variant)
    scale = 1.0
    for _ in range(budget.rounds):
        improved = False
        for name in names:
            cur = getattr(best, name)
            for val in _candidates(name, cur, sheet, variant, budget, scale):
                if name not in ("lam", "lam_bar") and not val > 0:
                    continue
                cand = replace(best, **{name: float(val)})
                feas, obj, _ = _evaluate(sheet, cand, variant)
                if obj > best_obj + 1e-15:
                    best, best_obj, improved = cand, obj, True
        if _evaluate(sheet, best, variant)[0]:
            break
        scale = scale * 0.5 if not improved else scale
    if not _evaluate(sheet, best, variant)[0]:
        best = _refine(sheet, variant, best, names, budget)
    feas = _evaluate(sheet, best, variant)[0]
    return _report(sheet, variant, best, feas, "feasible" if feas else "infeasible-search", gm)


def _refine(sheet, variant, w, names, budget):
    """Local Nelder-Mead polish in unconstrained coordinates."""
    caps = {n: _k2_cap(sheet, variant, barred=n == "Kb2") if n in ("K2", "Kb2") else None for n in names}

    def encode(w):
        out = []
        for n in names:
            v = getattr(w, n)
            if n in ("lam", "lam_bar"):
                out.append(v)
            elif caps[n] is not None:
                f = min(max(v / caps[n], 1e-12), 1 - 1e-12)
                out.append(math.log(f / (1 - f)))
            else:
                out.append(math.log(v))
        return np.array(out)

    def decode(x):
        vals = {}
        for n, v in zip(names, x):
            if n in ("lam", "lam_bar"):
                vals[n] = float(v)
            elif caps[n] is not None:
                vals[n] = float(caps[n] / (1 + math.exp(-min(max(v, -700), 700))))
            else:
                vals[n] = float(math.exp(min(max(v, -700), 700)))
        return replace(w, **vals)

    def loss(x):
        cand = decode(x)
        try:
            return -_evaluate(sheet, cand, variant)[1]
        except (InvalidWitness, ZeroDivisionError, OverflowError):
            return 1e12

    x = encode(w)
    best_x, best_f = x, loss(x)
    for _ in range(budget.polish):
        res = minimize(loss, best_x, method="Nelder-Mead",
                       options={"maxiter": 400 * len(names), "xatol": 1e-10, "fatol": 1e-14})
        if res.fun < best_f - 1e-14:
            best_x, best_f = res.x, res.fun
        else:
            break
        if -best_f > 0 and _evaluate(sheet, decode(best_x), variant)[0]:
            break
    cand = decode(best_x)
    return cand if _evaluate(sheet, cand, variant)[1] >= _evaluate(sheet, w, variant)[1] else w


def _report(sheet, variant, w, feasible, status, gm):
    bars = lambda_bars(sheet, w, variant)
    _, _, (th, t1, t2, L) = _evaluate(sheet, w, variant)
    if variant == "combined":
        t1, t2 = theta(sheet, w, "variational"), theta(sheet, w, "adjoint")
    rep = SmallnessReport(
        variant=variant,
        feasible=bool(feasible),
        status=status,
        lambda_bar1=bars[0],
        lambda_bar2=bars[1],
        theta=th,
        lhs=tuple(L),
        witness=w,
        gate_margin=gm if math.isfinite(gm) else None,
        theta1=t1,
        theta2=t2,
        denominator_margin=_denominator_margin(sheet, w, variant),
        extra={"lambda_bar21": bars[2], "lambda_bar22": bars[3]} if variant == "combined" else {},
    )
    assert_consistent(rep, sheet)
    return rep


def assert_consistent(rep, sheet):
    """A feasible report must satisfy every defining inequality."""
    if not rep.feasible:
        return
    w = rep.witness
    bars = lambda_bars(sheet, w, rep.variant)
    if min(bars) <= 0 or _denominator_margin(sheet, w, rep.variant) <= 0:
        raise AssertionError("feasible report with nonpositive lambda bar or denominator")
    if rep.theta is None or not max(rep.lhs) < rep.theta:
        raise AssertionError("feasible report with lhs >= theta")
