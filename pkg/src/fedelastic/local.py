"""Client-side solvers for the elastic-net regularised local problems.

All variants minimise, starting from the received global model ``anchor``::

    L_k(theta) + <correction, theta - anchor>
        + lambda2/2 * ||theta - anchor||^2 + lambda1 * ||theta - anchor||_1

where ``correction`` is ``0`` (FedAvg/FedProx family), ``-cache`` with the
client's cached gradient (FedDyn family) or ``c - c_k`` (SCAFFOLD family).
The FedDyn objective as usually written subtracts ``<cache, theta>``; that
differs from the form above by the constant ``<cache, anchor>`` and has the
same minimiser.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import model
from .errors import ConfigurationError, DivergedSolveError
from .model import Dataset, ModelSpec

INNER_METHODS = ("subgradient", "prox")
DIVERGENCE_FACTOR = 10.0


@dataclass(frozen=True)
class SolveBudget:
    epochs: int = 1
    batch_size: int = 10
    lr: float = 0.1
    steps: int | None = None  # scaffold's B; None means epochs * batches-per-epoch
    inner: str = "subgradient"

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("epochs and batch_size must be positive")
        if not self.lr > 0:
            raise ConfigurationError("local learning rate must be positive")
        if self.steps is not None and self.steps < 1:
            raise ConfigurationError("steps (B) must be positive")
        if self.inner not in INNER_METHODS:
            raise ConfigurationError(f"inner method must be one of {INNER_METHODS}")

    def total_steps(self, n: int) -> int:
        if self.steps is not None:
            return self.steps
        return self.epochs * math.ceil(n / min(self.batch_size, n))


@dataclass(frozen=True)
class LocalProblem:
    spec: ModelSpec
    data: Dataset
    anchor: np.ndarray
    lambda1: float = 0.0
    lambda2: float = 0.0
    cache: np.ndarray | None = None
    c_local: np.ndarray | None = None
    c_global: np.ndarray | None = None

    def __post_init__(self):
        d = self.spec.num_params
        if self.anchor.shape != (d,):
            raise ConfigurationError(f"anchor has shape {self.anchor.shape}, model needs ({d},)")
        for name in ("cache", "c_local", "c_global"):
            v = getattr(self, name)
            if v is not None and v.shape != (d,):
                raise ConfigurationError(f"{name} has shape {v.shape}, model needs ({d},)")
        if (self.c_local is None) != (self.c_global is None):
            raise ConfigurationError("scaffold needs both c_k and c")
        if self.cache is not None and self.c_local is not None:
            raise ConfigurationError("a problem is either feddyn (cache) or scaffold (c_k, c)")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigurationError("lambda1 and lambda2 must be nonnegative")

    @property
    def variant(self) -> str:
        if self.cache is not None:
            return "feddyn"
        if self.c_local is not None:
            return "scaffold"
        return "plain"

    def correction(self) -> np.ndarray | None:
        if self.cache is not None:
            return -self.cache
        if self.c_local is not None:
            return self.c_global - self.c_local
        return None


def soft_threshold(v, tau):
    """``sign(v) * max(|v| - tau, 0)``: the prox operator of ``tau * |x|``."""
    v = np.asarray(v, dtype=np.float64)
    return np.sign(v) * np.maximum(np.abs(v) - tau, 0.0)


def local_objective(problem: LocalProblem, theta: np.ndarray, shifted: bool = False) -> float:
    """Value of the client's local objective at ``theta``.

    With ``shifted=False`` the FedDyn linear term is ``-<cache, theta>``;
    ``shifted=True`` uses ``-<cache, theta - anchor>`` (and likewise for the
    SCAFFOLD correction), which is zero at the anchor.
    """
    d = theta - problem.anchor
    val = model.loss(problem.spec, theta, problem.data)
    corr = problem.correction()
    if corr is not None:
        val += float(corr @ (d if shifted else theta))
    if problem.lambda2:
        val += 0.5 * problem.lambda2 * float(d @ d)
    if problem.lambda1:
        val += problem.lambda1 * float(np.abs(d).sum())
    return val


def epoch_batches(rng: np.random.Generator, n: int, batch_size: int) -> list[np.ndarray]:
    """One epoch of index batches: a fresh permutation cut into ``ceil(n/B)`` near-equal parts.

    Sizes differ by at most one, so an epoch never ends on a tiny remainder
    batch whose single noisy step would dominate the end-of-epoch iterate.
    """
    return np.array_split(rng.permutation(n), math.ceil(n / min(batch_size, n)))


def _run_sgd(problem: LocalProblem, budget: SolveBudget, rng: np.random.Generator,
             total: int) -> np.ndarray:
    spec = problem.spec
    X, y = problem.data.features, problem.data.labels
    n = X.shape[0]
    if n == 0:
        raise ConfigurationError("client has no data")
    lr = budget.lr
    lam1, lam2 = problem.lambda1, problem.lambda2
    prox = budget.inner == "prox"
    anchor = problem.anchor
    corr = problem.correction()
    theta = anchor.copy()
    limit = DIVERGENCE_FACTOR * max(local_objective(problem, theta, shifted=True), 1e-6)

    step = 0
    while step < total:
        for idx in epoch_batches(rng, n, budget.batch_size):
            if step >= total:
                break
            _, g = model.loss_and_grad(spec, theta, (X[idx], y[idx]))
            if corr is not None:
                g += corr
            if lam2 or (lam1 and not prox):
                d = theta - anchor
                if lam2:
                    g += lam2 * d
                if lam1 and not prox:
                    g += lam1 * np.sign(d)
            theta -= lr * g
            if lam1 and prox:
                theta = anchor + soft_threshold(theta - anchor, lr * lam1)
            step += 1
        obj = local_objective(problem, theta, shifted=True)
        if not math.isfinite(obj) or obj > limit:
            raise DivergedSolveError(
                f"local objective rose to {obj:.4g} (limit {limit:.4g}); "
                f"local step size eta_l={lr} is probably too large", lr=lr)
    return theta


def solve_local(problem: LocalProblem, budget: SolveBudget, rng: np.random.Generator) -> np.ndarray:
    """Approximate arg-min of the local objective by mini-batch SGD.

    Each epoch visits a fresh ``rng`` permutation of the client's data in
    ``ceil(n / batch_size)`` batches whose sizes differ by at most one. The
    l1 term enters as the subgradient ``lambda1 * sign(theta - anchor)`` with
    ``sign(0) = 0``, or through a soft-threshold step when
    ``budget.inner == "prox"``.
    """
    return _run_sgd(problem, budget, rng, budget.total_steps(len(problem.data)))


def scaffold_local_pass(problem: LocalProblem, budget: SolveBudget,
                        rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """``B`` corrected SGD steps, then the control-variate refresh.

    Returns ``(theta_k, c_k_new)`` with
    ``c_k_new = c_k - c + (anchor - theta_k) / (B * lr)``.
    """
    if problem.variant != "scaffold":
        raise ConfigurationError("scaffold_local_pass needs a scaffold problem (c_k and c)")
    B = budget.total_steps(len(problem.data))
    theta = _run_sgd(problem, budget, rng, B)
    c_new = problem.c_local - problem.c_global + (problem.anchor - theta) / (B * budget.lr)
    return theta, c_new


def feddyn_grad_cache_update(cache: np.ndarray, theta_k: np.ndarray, anchor: np.ndarray,
                             lambda1: float, lambda2: float) -> np.ndarray:
    """Refresh the FedDyn gradient cache from the first-order condition."""
    d = theta_k - anchor
    out = cache - lambda2 * d
    if lambda1:
        out = out - lambda1 * np.sign(d)
    return out


def first_order_residual(problem: LocalProblem, theta_k: np.ndarray) -> np.ndarray:
    """Per-coordinate violation of the local optimality condition.

    Where ``theta_k != anchor`` this is ``grad L_k + correction + lambda2*d +
    lambda1*sign(d)`` (full-data gradient). Where ``theta_k == anchor`` it
    is the distance of ``grad L_k + correction`` from ``[-lambda1, lambda1]``.
    """
    g = model.grad(problem.spec, theta_k, problem.data)
    corr = problem.correction()
    if corr is not None:
        g = g + corr
    d = theta_k - problem.anchor
    r = g + problem.lambda2 * d + problem.lambda1 * np.sign(d)
    at_kink = d == 0
    r[at_kink] = np.maximum(np.abs(g[at_kink]) - problem.lambda1, 0.0)
    return r
