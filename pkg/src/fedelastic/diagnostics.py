"""Numerical checks of the FedDyn-family analysis on convex problems.

Covers the server-side identities (``h`` is the mean gradient cache, ``gamma``
is ``theta + h / lambda2``), the convergence-theorem constants, smoothness
estimates, an exact global-optimum oracle, per-round traces of the quantities
in the bound, and a Monte-Carlo check of the sign-concentration model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import model
from .errors import AnalysisPreconditionError, DiagnosticError
from .local import LocalProblem, SolveBudget, solve_local
from .model import Dataset, ModelSpec
from .seeding import stream

SMOOTHNESS_MARGIN = 27.0
DENSE_EIG_LIMIT = 2048


def verify_h_identity(state, m: int) -> float:
    """``max|h - (1/m) sum_k cache_k|``; exact (up to rounding) whenever eps = 0."""
    if state.family != "feddyn":
        raise DiagnosticError(f"h identity is defined for feddyn runs, not {state.family}")
    total = np.zeros_like(state.h)
    for k in sorted(state.caches):
        total += state.caches[k]
    return float(np.max(np.abs(state.h - total / m)))


def verify_gamma_identity(state, lambda2: float) -> float:
    """``max|gamma - (theta + h/lambda2)|`` for the state after a feddyn round."""
    if state.family != "feddyn":
        raise DiagnosticError(f"gamma identity is defined for feddyn runs, not {state.family}")
    if state.gamma is None:
        return 0.0
    return float(np.max(np.abs(state.gamma - (state.theta + state.h / lambda2))))


@dataclass(frozen=True)
class TheoremConstants:
    beta: float
    lambda2: float
    m: int
    P: int
    d: int
    kappa: float
    kappa0: float
    kappa_prime: float
    C0: float | None = None
    C0_squared: float | None = None

    def floor(self, lambda1: float) -> float:
        """The non-vanishing term ``kappa' * lambda1^2 * d / kappa0``."""
        return self.kappa_prime * lambda1 ** 2 * self.d / self.kappa0

    def bound(self, T: int, init_dist_sq: float, lambda1: float, squared: bool = False) -> float:
        """Right-hand side of the running-average risk bound after ``T`` rounds."""
        c0 = self.C0_squared if squared else self.C0
        if c0 is None:
            raise DiagnosticError("C0 was not supplied")
        return (init_dist_sq + self.kappa * c0) / (T * self.kappa0) + self.floor(lambda1)


def compute_theorem_constants(beta: float, lambda2: float, m: int, P: int, d: int,
                              C0: float | None = None,
                              C0_squared: float | None = None) -> TheoremConstants:
    if not beta > 0:
        raise AnalysisPreconditionError("beta must be positive")
    if not 1 <= P <= m:
        raise AnalysisPreconditionError(f"need 1 <= P <= m, got P={P}, m={m}")
    if d < 1:
        raise AnalysisPreconditionError("dimension d must be positive")
    if not lambda2 > SMOOTHNESS_MARGIN * beta:
        raise AnalysisPreconditionError(
            f"the convergence bound assumes lambda2 > 27*beta; got lambda2={lambda2}, "
            f"27*beta={SMOOTHNESS_MARGIN * beta}")
    den = lambda2 ** 2 - 25 * beta ** 2
    kappa = (10 * m / P) * (1 / lambda2) * (lambda2 + beta) / den
    kappa0 = (2 / lambda2) * (lambda2 ** 2 - 25 * lambda2 * beta - 50 * beta ** 2) / den
    kappa_prime = (5 / lambda2) * (lambda2 + beta) / den
    if not math.isclose(kappa_prime, kappa * P / (2 * m), rel_tol=1e-12):
        raise DiagnosticError("kappa' != kappa * P / (2m); constants are inconsistent")
    return TheoremConstants(beta, lambda2, m, P, d, kappa, kappa0, kappa_prime, C0, C0_squared)


def _top_eigenvalue(G: np.ndarray) -> float:
    return float(np.linalg.eigvalsh(G)[-1])


def _power_iteration(X: np.ndarray, tol: float = 1e-13, max_iter: int = 10_000) -> float:
    n = X.shape[0]
    v = np.ones(X.shape[1]) / math.sqrt(X.shape[1])
    lam = 0.0
    for _ in range(max_iter):
        w = X.T @ (X @ v) / n
        new = float(v @ w)
        nw = np.linalg.norm(w)
        if nw == 0:
            return 0.0
        v = w / nw
        if abs(new - lam) <= tol * max(abs(new), 1e-300):
            return new
        lam = new
    return lam


def gram_top_eigenvalue(X: np.ndarray) -> float:
    """Largest eigenvalue of ``X^T X / n``.

    Dense symmetric eigensolver for modest widths, power iteration otherwise.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.shape[1] <= DENSE_EIG_LIMIT:
        return _top_eigenvalue(X.T @ X / X.shape[0])
    return _power_iteration(X)


def estimate_beta(spec: ModelSpec, data: Dataset) -> float:
    """Smoothness constant of the mean loss on ``data``.

    Linear regression: ``lambda_max(X^T X / n)``. Logistic models see the
    design with an appended bias column; the bound is ``1/4`` of its top
    eigenvalue for the binary sigmoid model and ``1/2`` for softmax.
    """
    if not spec.is_convex:
        raise DiagnosticError("smoothness estimates need a convex model (linear or logistic); "
                              "run the diagnostics in convex mode")
    X = data.features
    if spec.kind == "linear":
        return gram_top_eigenvalue(X)
    Xa = np.hstack([X, np.ones((X.shape[0], 1))])
    factor = 0.25 if spec.binary else 0.5
    return factor * gram_top_eigenvalue(Xa)


def convex_budget(spec: ModelSpec, data: Dataset, lambda2: float, epochs: int = 3000,
                  inner: str = "subgradient") -> SolveBudget:
    """Full-batch gradient steps of size ``1/(beta + lambda2)``: a near-exact local solve."""
    beta = estimate_beta(spec, data)
    return SolveBudget(epochs=epochs, batch_size=len(data), lr=1.0 / (beta + lambda2), inner=inner)


def global_risk(spec: ModelSpec, shards, theta: np.ndarray) -> float:
    """``R(theta) = (1/m) sum_k L_k(theta)``."""
    return sum(model.loss(spec, theta, s.data) for s in shards) / len(shards)


def global_grad(spec: ModelSpec, shards, theta: np.ndarray) -> np.ndarray:
    g = np.zeros_like(theta)
    for s in shards:
        g += model.grad(spec, theta, s.data)
    return g / len(shards)


def solve_global_optimum(spec: ModelSpec, shards, tolerance: float = 1e-10,
                         max_iter: int = 1_000_000, theta0: np.ndarray | None = None) -> np.ndarray:
    """Minimise ``R`` by accelerated gradient descent until ``||grad R||_inf <= tolerance``.

    Step size ``1/L`` with ``L`` the largest client smoothness, Nesterov
    momentum with gradient-based restarts. Linear regression starts from a
    least-squares solve, so a handful of iterations usually suffice.
    """
    if not spec.is_convex:
        raise DiagnosticError("the global-optimum oracle needs a convex model")
    L = max(estimate_beta(spec, s.data) for s in shards)
    if L <= 0:
        raise DiagnosticError("all clients have zero curvature")
    step = 1.0 / L
    if theta0 is not None:
        x = np.array(theta0, dtype=np.float64)
    elif spec.kind == "linear":
        H = sum(s.data.features.T @ s.data.features / len(s.data) for s in shards)
        b = sum(s.data.features.T @ s.data.labels / len(s.data) for s in shards)
        x = np.linalg.lstsq(H, b, rcond=None)[0]
    else:
        x = np.zeros(spec.num_params)
    y = x.copy()
    tk = 1.0
    for _ in range(max_iter):
        g = global_grad(spec, shards, y)
        if np.max(np.abs(global_grad(spec, shards, x))) <= tolerance:
            return x
        x_new = y - step * g
        if (y - x_new) @ (x_new - x) > 0:
            # momentum is pointing uphill: restart from the plain step
            tk = 1.0
            y = x_new.copy()
            x = x_new
            continue
        t_new = 0.5 * (1 + math.sqrt(1 + 4 * tk * tk))
        y = x_new + ((tk - 1) / t_new) * (x_new - x)
        x, tk = x_new, t_new
    raise DiagnosticError(f"global optimum not reached to {tolerance} in {max_iter} iterations")


def gradient_spread(spec: ModelSpec, shards, models, theta_star: np.ndarray) -> tuple[float, float]:
    """Mean over clients of ``||grad L_k(theta_k) - grad L_k(theta*)||`` and of its square."""
    plain = sq = 0.0
    for s, th in zip(shards, models):
        r = model.grad(spec, th, s.data) - model.grad(spec, theta_star, s.data)
        nrm = float(np.linalg.norm(r))
        plain += nrm
        sq += nrm * nrm
    m = len(shards)
    return plain / m, sq / m


@dataclass
class ConvergenceTrace:
    theta_star: np.ndarray
    risk_star: float
    gamma_sum: np.ndarray
    count: int = 0
    rounds: list = field(default_factory=list)
    gamma_gap: list = field(default_factory=list)
    risk_gap: list = field(default_factory=list)
    risk_gap_last: list = field(default_factory=list)
    C_t: list = field(default_factory=list)
    C_t_sq: list = field(default_factory=list)
    eps_t: list = field(default_factory=list)
    sign_term: list = field(default_factory=list)
    sign_avg_norm: list = field(default_factory=list)
    h_identity_dev: list = field(default_factory=list)

    COLUMNS = ("round", "gamma_gap", "risk_gap", "risk_gap_last", "C_t", "C_t_sq", "eps_t",
               "sign_term", "sign_avg_norm", "h_identity_dev")

    def rows(self):
        for i in range(len(self.rounds)):
            yield (self.rounds[i],) + tuple(getattr(self, c)[i] for c in self.COLUMNS[1:])

    def gap_at(self, T: int) -> float:
        return self.risk_gap[self.rounds.index(T)]


class Tracer:
    """Round callback that fills a :class:`ConvergenceTrace`.

    ``risk_gap`` at round ``T`` is ``R(mean(gamma^0..gamma^{T-1})) - R(theta*)``
    with ``gamma^0 = theta^0``. For non-feddyn runs ``gamma^t`` is taken to be
    the server model. Heavy mode re-solves every client's local problem from
    the previous server state (``seeds`` independent solves each) to estimate
    ``eps_t`` and the sign term.
    """

    def __init__(self, spec: ModelSpec, shards, theta_star: np.ndarray, initial_state, ctx,
                 heavy: bool = False, seeds: int = 5):
        self.spec = spec
        self.shards = shards
        self.ctx = ctx
        self.heavy = heavy
        self.seeds = seeds
        self.prev = initial_state
        self.prev_gamma = initial_state.theta.copy()
        risk_star = global_risk(spec, shards, theta_star)
        self.trace = ConvergenceTrace(theta_star, risk_star, np.zeros_like(theta_star))

    def __call__(self, state, rec) -> None:
        tr = self.trace
        spec, shards, algo = self.spec, self.shards, self.ctx.algo
        m = len(shards)
        tr.gamma_sum += self.prev_gamma
        tr.count += 1
        avg = tr.gamma_sum / tr.count
        tr.rounds.append(state.round)
        tr.risk_gap.append(global_risk(spec, shards, avg) - tr.risk_star)
        gamma = state.gamma if state.gamma is not None else state.theta
        tr.risk_gap_last.append(global_risk(spec, shards, gamma) - tr.risk_star)
        nan = float("nan")
        if state.family == "feddyn":
            tr.gamma_gap.append(verify_gamma_identity(state, algo.lambda2))
            tr.h_identity_dev.append(verify_h_identity(state, m))
            c, csq = gradient_spread(spec, shards, [state.client_model(k) for k in range(m)],
                                     tr.theta_star)
            tr.C_t.append(c)
            tr.C_t_sq.append(csq)
        else:
            for lst in (tr.gamma_gap, tr.h_identity_dev, tr.C_t, tr.C_t_sq):
                lst.append(nan)
        if self.heavy and state.family == "feddyn":
            eps, sign_term, sign_norm = self._heavy(state.round)
        else:
            eps = sign_term = sign_norm = nan
        tr.eps_t.append(eps)
        tr.sign_term.append(sign_term)
        tr.sign_avg_norm.append(sign_norm)
        self.prev = state
        self.prev_gamma = gamma.copy()

    def _heavy(self, t: int):
        prev, algo = self.prev, self.ctx.algo
        m = len(self.shards)
        budget = algo.budget()
        eps_vals, terms, norms = [], [], []
        for s in range(self.seeds):
            def work(k, s=s):
                prob = LocalProblem(self.spec, self.shards[k].data, prev.theta, algo.lambda1,
                                    algo.lambda2, cache=prev.cache(k))
                return solve_local(prob, budget, stream(self.ctx.seed, "heavy", t, k, s))
            tilde = self.ctx.map(work, range(m))
            e = 0.0
            sign_avg = np.zeros_like(prev.theta)
            for th in tilde:
                diff = th - self.prev_gamma
                e += float(diff @ diff)
                sign_avg += np.sign(th - prev.theta)
            sign_avg /= m
            eps_vals.append(e / m)
            terms.append(-(2 * algo.lambda1 / algo.lambda2)
                         * float((self.prev_gamma - self.trace.theta_star) @ sign_avg))
            norms.append(float(np.linalg.norm(sign_avg)))
        return float(np.mean(eps_vals)), float(np.mean(terms)), float(np.mean(norms))


@dataclass(frozen=True)
class RateReport:
    early: int
    late: int
    gap_early: float
    gap_late: float
    floor: float
    ratio: float
    passed: bool


def check_convergence_rate(trace: ConvergenceTrace, constants: TheoremConstants | None = None,
                           lambda1: float = 0.0, early: int = 20, late: int = 200) -> RateReport:
    """Does the running-average gap shrink at least 4x from round ``early`` to ``late``?

    The allowance is ``gap(early)/4 + kappa' lambda1^2 d / kappa0``.
    """
    if late not in trace.rounds or early not in trace.rounds:
        raise DiagnosticError(f"trace must cover rounds {early} and {late}")
    ge, gl = trace.gap_at(early), trace.gap_at(late)
    floor = constants.floor(lambda1) if constants is not None else 0.0
    ratio = gl / ge if ge > 0 else float("inf") if gl > 0 else 0.0
    return RateReport(early, late, ge, gl, floor, ratio, gl <= 0.25 * ge + floor)


def quadratic_parts(data: Dataset) -> tuple[np.ndarray, np.ndarray]:
    """``(A, a)`` with ``L(theta) = 1/2 (theta-a)^T A (theta-a) + const`` for linear regression."""
    X, y = data.features, data.labels
    A = X.T @ X / len(data)
    a = np.linalg.lstsq(X, y, rcond=None)[0]
    return A, a


def fedavg_fixed_point(shards, weights, lr: float, steps: int) -> np.ndarray:
    """Stationary point of FedAvg with ``steps`` full-batch local GD steps.

    Each client maps ``theta -> M_k theta + (I - M_k) a_k`` with
    ``M_k = (I - lr A_k)^steps``; the server average is affine, so the fixed
    point solves ``(I - sum w_k M_k) theta = sum w_k (I - M_k) a_k``.
    """
    d = shards[0].data.input_dim
    I = np.eye(d)
    Mbar = np.zeros((d, d))
    v = np.zeros(d)
    for s, w in zip(shards, weights):
        A, a = quadratic_parts(s.data)
        M = np.linalg.matrix_power(I - lr * A, steps)
        Mbar += w * M
        v += w * (I - M) @ a
    return np.linalg.solve(I - Mbar, v)


def heterogeneous_quadratic_pair(d: int = 4, n: int = 200, seed: int = 0,
                                 beta: float = 1.0) -> list[Dataset]:
    """Two linear-regression clients with different curvature and minimisers.

    Each design is rescaled so its smoothness is exactly ``beta``; client
    curvatures differ in their spectra and the targets have distinct
    least-squares solutions.
    """
    rng = np.random.default_rng(seed)
    out = []
    for k in range(2):
        scales = np.linspace(1.0, 0.2 + 0.5 * k, d)[rng.permutation(d)]
        X = rng.standard_normal((n, d)) * scales
        X *= math.sqrt(beta / gram_top_eigenvalue(X))
        target = rng.normal(3.0 * (1 if k == 0 else -1), 1.0, size=d)
        y = X @ target + 0.1 * rng.standard_normal(n)
        out.append(Dataset(X, y))
    return out


def sign_concentration(m: int, delta: float, trials: int = 10_000,
                       rng: np.random.Generator | None = None,
                       two_sided: bool = False) -> tuple[float, float]:
    """Empirical ``P[(1/m) sum X_k > delta]`` for IID fair ``+-1`` signs, and ``exp(-m delta^2 / 2)``."""
    if rng is None:
        rng = stream(0, "test", m, trials)
    X = rng.choice(np.array([-1.0, 1.0]), size=(trials, m))
    mean = X.mean(axis=1)
    hits = np.abs(mean) > delta if two_sided else mean > delta
    return float(hits.mean()), math.exp(-m * delta * delta / 2)
