"""Numerical checks of the softmax-mixing results on the identity model f(x) = x.

Loss throughout is ``L = -y^T log softmax(xbar)`` with ``xbar = sum_k p_k x_k``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import space as S


def _softmax(z):
    e = np.exp(z - z.max(-1, keepdims=True))
    return e / e.sum(-1, keepdims=True)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def ce(logits: np.ndarray, y: np.ndarray) -> float:
    z = logits - logits.max()
    return float(-(y @ (z - np.log(np.exp(z).sum()))))


@dataclass
class SimplifiedInstance:
    x: np.ndarray  # (n_ops, class_dim)
    y: np.ndarray  # one-hot (class_dim,)
    alpha: np.ndarray  # (n_ops,)
    activation: str = S.SOFTMAX
    eta: float = 0.1

    def __post_init__(self):
        self.x = np.asarray(self.x, float)
        self.y = np.asarray(self.y, float)
        self.alpha = np.asarray(self.alpha, float)
        if self.x.shape[0] != self.alpha.shape[0]:
            raise ValueError(f"{self.x.shape[0]} op outputs for {self.alpha.shape[0]} alphas")
        if self.y.shape != (self.x.shape[1],) or self.y.sum() != 1 or set(np.unique(self.y)) - {0.0, 1.0}:
            raise ValueError("y must be a one-hot vector matching the class dimension")

    @property
    def n_ops(self) -> int:
        return self.x.shape[0]

    def probs(self) -> np.ndarray:
        return _softmax(self.alpha) if self.activation == S.SOFTMAX else _sigmoid(self.alpha)

    def xbar(self, p=None) -> np.ndarray:
        return (self.probs() if p is None else p) @ self.x

    def loss(self, p=None) -> float:
        return ce(self.xbar(p), self.y)

    def grad_xbar(self, p=None) -> np.ndarray:
        return _softmax(self.xbar(p)) - self.y

    def scores(self) -> np.ndarray:
        """s_k = (dL/dxbar)^T x_k."""
        return self.x @ self.grad_xbar()

    def grad_p(self) -> np.ndarray:
        return self.scores()

    def grad_alpha(self) -> np.ndarray:
        p, s = self.probs(), self.scores()
        if self.activation == S.SOFTMAX:
            return p * (s - p @ s)
        return p * (1 - p) * s


def autodiff_grads(inst: SimplifiedInstance) -> tuple[np.ndarray, np.ndarray]:
    """(dL/dp, dL/dalpha) of the same model through the tape, for cross-checks."""
    alpha = ad.Tensor(inst.alpha.copy(), requires_grad=True)
    with ad.Tape() as tape:
        p = ad.softmax(alpha) if inst.activation == S.SOFTMAX else ad.sigmoid(alpha)
        xbar = ad.mix(p, 0, [ad.Tensor(row) for row in inst.x])
        loss = ad.cross_entropy(xbar, inst.y)
    g = tape.backward(loss)
    return g[p].copy(), g[alpha].copy()


# -- first result: lower single-op loss => smaller dL/dp ----------------------


@dataclass
class ScoreOrderingReport:
    perturb_scale: float
    trials: int
    pairs: int
    violations: int
    max_violation: float
    tolerance: float
    max_formula_error: float

    @property
    def violation_rate(self) -> float:
        return self.violations / self.pairs if self.pairs else 0.0

    @property
    def passed(self) -> bool:
        return self.max_violation <= self.tolerance

    def to_dict(self) -> dict:
        return {**self.__dict__, "violation_rate": self.violation_rate, "passed": self.passed}


def check_score_ordering(
    base=None,
    perturb_scale: float = 1e-3,
    seed: int = 0,
    trials: int = 1000,
    n_ops: int = 5,
    class_dim: int = 4,
    check_formula_every: int = 50,
) -> ScoreOrderingReport:
    """Sample x_k = base + c_k 1 + scale * noise, so every softmax(x_k) -> softmax(base).

    For each ordered pair with CE(x_i) <= CE(x_j), the violation is
    ``max(0, dL/dp_i - dL/dp_j)``. Tolerance is 10 * scale * max ||x_k||.
    """
    if perturb_scale < 0:
        raise ValueError("perturb_scale must be >= 0")
    rng = np.random.default_rng(seed)
    fixed_base = None if base is None else np.asarray(base, float)
    pairs = violations = 0
    worst = formula_err = 0.0
    tol = 0.0
    for t in range(trials):
        b = rng.standard_normal(class_dim) if fixed_base is None else fixed_base
        d = b.shape[0]
        shifts = rng.uniform(-1, 1, size=(n_ops, 1))
        x = b[None, :] + shifts + perturb_scale * rng.standard_normal((n_ops, d))
        y = np.zeros(d)
        y[rng.integers(d)] = 1.0
        inst = SimplifiedInstance(x, y, rng.standard_normal(n_ops))
        gp = inst.grad_p()
        losses = np.array([ce(xk, y) for xk in x])
        tol = max(tol, 10.0 * perturb_scale * float(np.linalg.norm(x, axis=1).max()))
        # ordered pairs (i, j) with CE(x_i) <= CE(x_j)
        ok = losses[:, None] <= losses[None, :]
        np.fill_diagonal(ok, False)
        diff = gp[:, None] - gp[None, :]
        pairs += int(ok.sum())
        v = diff[ok]
        violations += int(np.sum(v > 0))
        if v.size:
            worst = max(worst, float(v.max()))
        if check_formula_every and t % check_formula_every == 0:
            gp_ad, _ = autodiff_grads(inst)
            formula_err = max(formula_err, float(np.max(np.abs(gp_ad - gp))))
    return ScoreOrderingReport(perturb_scale, trials, pairs, violations, worst, tol, formula_err)


def fit_loglog_slope(scales, values) -> float:
    """Least-squares slope of log(values) against log(scales)."""
    xs, ys = np.log(np.asarray(scales, float)), np.log(np.asarray(values, float))
    return float(np.polyfit(xs, ys, 1)[0])


def score_ordering_scaling(scales=(1e-1, 1e-2, 1e-3, 1e-4), seed: int = 0, trials: int = 1000) -> dict:
    """Fit log(max violation) against log(scale).

    Scales with no violation at all are left out of the fit; they only count
    as consistent if every smaller scale is violation-free too.
    """
    order = np.argsort(scales)[::-1]
    scales = [float(scales[i]) for i in order]
    reports = [check_score_ordering(perturb_scale=s, seed=seed, trials=trials) for s in scales]
    worst = [r.max_violation for r in reports]
    nz = [w > 0 for w in worst]
    # once violations vanish they must stay vanished as the scale shrinks
    tail_ok = all(not nz[k] or all(nz[: k + 1]) for k in range(len(nz)))
    pos = [(s, w) for s, w in zip(scales, worst) if w > 0]
    if len(pos) >= 2:
        slope = fit_loglog_slope(*zip(*pos))
    else:
        slope = float("inf")
    ratios = [w / s for s, w in pos]
    return {
        "scales": scales,
        "max_violation": worst,
        "fitted_points": len(pos),
        "slope": slope,
        "zeros_trailing": tail_ok,
        "fitted_constant": float(max(ratios)) if ratios else 0.0,
        "passed": bool(tail_ok and slope >= 0.9),
        "reports": [r.to_dict() for r in reports],
    }


# -- second result: softmax widens existing alpha gaps ------------------------


@dataclass
class GapWideningReport:
    sampled: int
    premise_ok: int
    violations: int
    max_violation: float
    examples: list = field(default_factory=list)
    by_n: dict = field(default_factory=dict)  # n_ops -> [premise_ok, violations]

    @property
    def passed(self) -> bool:
        return self.violations == 0

    def to_dict(self) -> dict:
        d = {k: v for k, v in self.__dict__.items() if k not in ("examples", "by_n")}
        return d | {"passed": self.passed, "by_n": {str(k): v for k, v in self.by_n.items()}}


def gap_widening_pair(inst: SimplifiedInstance, i: int, j: int) -> tuple[bool, float]:
    """(premises hold, dL/dalpha_j - dL/dalpha_i) for the ordered pair (i, j)."""
    s = inst.scores()
    premise = s[j] < s[i] and inst.alpha[j] >= inst.alpha[i]
    ga = inst.grad_alpha()
    return premise, float(ga[j] - ga[i])


def check_gap_widening(target: int = 10_000, seed: int = 0, max_ops: int = 6, class_dim: int = 4,
                      max_draws: int = 1_000_000) -> GapWideningReport:
    """Sample instances until ``target`` premise-satisfying pairs are found; count violations.

    Violations are counted with a 1e-12 slack for float rounding; the inequality
    itself is exact.
    """
    rng = np.random.default_rng(seed)
    sampled = ok = bad = 0
    worst = 0.0
    by_n: dict[int, list[int]] = {}
    examples: list[dict] = []
    while ok < target and sampled < max_draws:
        n = int(rng.integers(2, max_ops + 1))
        x = rng.standard_normal((n, class_dim)) * rng.uniform(0.1, 3.0)
        y = np.zeros(class_dim)
        y[rng.integers(class_dim)] = 1.0
        inst = SimplifiedInstance(x, y, rng.standard_normal(n) * rng.uniform(0.1, 3.0))
        i, j = rng.choice(n, size=2, replace=False)
        sampled += 1
        premise, diff = gap_widening_pair(inst, int(i), int(j))
        if not premise:
            continue
        ok += 1
        tally = by_n.setdefault(n, [0, 0])
        tally[0] += 1
        if diff > 1e-12:
            bad += 1
            tally[1] += 1
            worst = max(worst, diff)
            if len(examples) < 5:
                examples.append({"x": inst.x.tolist(), "y": inst.y.tolist(), "alpha": inst.alpha.tolist(),
                                 "i": int(i), "j": int(j), "excess": diff})
    return GapWideningReport(sampled, ok, bad, worst, examples, dict(sorted(by_n.items())))


def grad_alpha_from_g(g, x, alpha) -> np.ndarray:
    """dL/dalpha for a generic outer function with gradient ``g`` at xbar (softmax mixing)."""
    p = _softmax(np.asarray(alpha, float))
    s = np.asarray(x, float) @ np.asarray(g, float)
    return p * (s - p @ s)


# -- third result: steps until one op dominates -------------------------------


def dominance_step_bound(n: int, eta: float, delta: float, eps: float) -> float:
    """Closed form n ln((1-eps) n) / (eta delta)."""
    if n < 2:
        raise ValueError(f"need n >= 2 operations, got {n}")
    if eta <= 0:
        raise ValueError(f"learning rate eta must be > 0, got {eta}")
    if delta <= 0:
        raise ValueError(f"margin delta must be > 0, got {delta}")
    if not 0 < eps < 1:
        raise ValueError(f"eps must lie in (0, 1), got {eps}")
    if (1 - eps) * n < 1:
        raise ValueError(f"(1 - eps) * n must be >= 1, got {(1 - eps) * n}")
    return n * math.log((1 - eps) * n) / (eta * delta)


def is_degenerate_bound(n: int, eps: float) -> bool:
    return math.isclose((1 - eps) * n, 1.0)


@dataclass
class Dynamics:
    steps_to_eps: int | None
    p_star: np.ndarray  # (T+1,)
    probs: np.ndarray  # (T+1, n)
    gaps: np.ndarray  # (T+1, n): alpha_star - alpha_k
    reached: bool


def simulate_dynamics(scores, eta: float, eps: float, max_steps: int = 100_000,
                      alpha0=None, activation: str = S.SOFTMAX) -> Dynamics:
    """Gradient descent on alpha for the linearised loss sum_k p_k s_k (scores frozen).

    The favoured op is i* = argmin s. Returns the first step at which
    p_{i*} > 1 - eps (``None`` if ``max_steps`` is hit).
    """
    s = np.asarray(scores, float)
    n = len(s)
    star = int(np.argmin(s))
    if np.sum(s == s[star]) > 1:
        raise ValueError("the minimal score must be unique (positive margin)")
    a = np.zeros(n) if alpha0 is None else np.array(alpha0, float)
    if a[star] < a.max():
        raise ValueError("alpha of the favoured op must start maximal")
    act = _softmax if activation == S.SOFTMAX else _sigmoid
    probs, hit = [], None
    for t in range(max_steps + 1):
        p = act(a)
        probs.append(p)
        if hit is None and p[star] > 1 - eps:
            hit = t
            break
        if t == max_steps:
            break
        if activation == S.SOFTMAX:
            g = p * (s - p @ s)
        else:
            g = p * (1 - p) * s
        a = a - eta * g
        if not np.all(np.isfinite(a)):
            raise FloatingPointError(f"alpha diverged at step {t}")
    probs = np.array(probs)
    # reconstruct gaps from log-probabilities (softmax) or logits (sigmoid)
    if activation == S.SOFTMAX:
        logp = np.log(np.clip(probs, 1e-300, None))
        gaps = logp[:, [star]] - logp
    else:
        logits = np.log(np.clip(probs, 1e-300, None)) - np.log(np.clip(1 - probs, 1e-300, None))
        gaps = logits[:, [star]] - logits
    return Dynamics(hit, probs[:, star], probs, gaps, hit is not None)


def margin(scores) -> float:
    s = np.sort(np.asarray(scores, float))
    return float(s[1] - s[0])


@dataclass
class BoundCase:
    n: int
    eta: float
    delta: float
    eps: float
    steps: int | None
    bound: float

    @property
    def within(self) -> bool:
        return self.steps is not None and self.steps <= self.bound


def sample_bound_cases(count: int = 50, seed: int = 0, spread: float = 1.0) -> list[BoundCase]:
    """Random (n, eta, delta, eps) with (1-eps) n > 1 and a score vector of margin delta.

    Scores: s_{i*} = 0, one competitor at exactly delta, the rest at
    delta * (1 + spread * U[0,1)). Alphas start uniform.
    """
    rng = np.random.default_rng(seed)
    cases = []
    while len(cases) < count:
        n = int(rng.integers(2, 11))
        eta = float(rng.uniform(0.01, 0.5))
        delta = float(rng.uniform(0.1, 2.0))
        eps = float(rng.uniform(0.05, 0.3))
        if (1 - eps) * n <= 1:
            continue
        s = delta * (1.0 + spread * rng.uniform(0, 1, size=n))
        s[0], s[1] = 0.0, delta
        s = rng.permutation(s)
        bound = dominance_step_bound(n, eta, delta, eps)
        dyn = simulate_dynamics(s, eta, eps, max_steps=int(50 * bound) + 1000)
        cases.append(BoundCase(n, eta, delta, eps, dyn.steps_to_eps, bound))
    return cases


def bound_monotonicity(ns=range(2, 11), etas=(0.01, 0.05, 0.1, 0.5), deltas=(0.1, 0.5, 1.0, 2.0),
                       eps: float = 0.1) -> dict:
    """Check the bound rises with n and falls with eta and delta over a grid."""
    ns = [n for n in ns if (1 - eps) * n > 1]
    up_n = all(
        dominance_step_bound(a, e, d, eps) < dominance_step_bound(b, e, d, eps)
        for e in etas for d in deltas for a, b in zip(ns, ns[1:])
    )
    down_eta = all(
        dominance_step_bound(n, a, d, eps) > dominance_step_bound(n, b, d, eps)
        for n in ns for d in deltas for a, b in zip(etas, etas[1:])
    )
    down_delta = all(
        dominance_step_bound(n, e, a, eps) > dominance_step_bound(n, e, b, eps)
        for n in ns for e in etas for a, b in zip(deltas, deltas[1:])
    )
    return {"increasing_in_n": up_n, "decreasing_in_eta": down_eta, "decreasing_in_delta": down_delta}


def run_suite(seed: int = 0) -> dict:
    """All theorem checks as one JSON-ready report."""
    ordering = score_ordering_scaling(seed=seed)
    gaps = check_gap_widening(seed=seed)
    cases = sample_bound_cases(seed=seed)
    mono = bound_monotonicity()
    within = sum(c.within for c in cases)
    return {
        "score_ordering": ordering,
        "gap_widening": gaps.to_dict(),
        "dominance_bound": {
            "cases": [c.__dict__ | {"within": c.within} for c in cases],
            "within_bound": within,
            "total": len(cases),
            "monotonicity": mono,
            "passed": within == len(cases) and all(mono.values()),
        },
    }
