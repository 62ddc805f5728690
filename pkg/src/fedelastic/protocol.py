"""Server round loops for the FedAvg/FedProx, SCAFFOLD and FedDyn families.

Each family runs with or without the elastic-net terms. Baseline variant
names (``fedavg``, ``fedprox``, ``scaffold``, ``feddyn``) are the same code
paths with ``lambda1 = epsilon = 0`` pinned (``fedavg`` also pins
``lambda2 = 0``).

Transmission model: a client sends ``threshold(theta_k - theta_prev, eps)``.
The server only ever uses what it received; clients keep their own
unthresholded models, caches and control variates.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import meter, model
from .errors import ConfigurationError, DivergedSolveError
from .local import (INNER_METHODS, LocalProblem, SolveBudget, feddyn_grad_cache_update,
                    first_order_residual, scaffold_local_pass, solve_local)
from .meter import CommLedger, TransmittedUpdate
from .model import Dataset, ModelSpec
from .seeding import stream

log = logging.getLogger(__name__)

# variant -> (family, uses elastic net)
VARIANTS = {
    "fedavg": ("avg", False),
    "fedprox": ("avg", False),
    "fedprox_en": ("avg", True),
    "scaffold": ("scaffold", False),
    "scaffold_en": ("scaffold", True),
    "feddyn": ("feddyn", False),
    "feddyn_en": ("feddyn", True),
}
ALIASES = {"fedavg_en": "fedprox_en", "alg1": "fedprox_en", "alg2": "scaffold_en",
           "alg3": "feddyn_en"}


def canonical_variant(name: str) -> str:
    name = ALIASES.get(name, name)
    if name not in VARIANTS:
        raise ConfigurationError(f"unknown variant {name!r}; choose from {sorted(VARIANTS)}")
    return name


def algorithm_problems(a) -> list[str]:
    """Validation messages for any object with the AlgorithmConfig attributes."""
    errs = []
    family, elastic = VARIANTS[a.variant]
    for key in ("lambda1", "lambda2", "epsilon"):
        v = getattr(a, key)
        if not (math.isfinite(v) and v >= 0):
            errs.append(f"algorithm.{key} must be finite and >= 0")
    if not elastic and (a.lambda1 != 0 or a.epsilon != 0):
        errs.append(f"algorithm.lambda1/epsilon: baseline {a.variant} requires lambda1 = epsilon = 0")
    if a.variant == "fedavg" and a.lambda2 != 0:
        errs.append("algorithm.lambda2: fedavg requires lambda2 = 0 (use fedprox)")
    if family == "feddyn" and not a.lambda2 > 0:
        errs.append("algorithm.lambda2: the feddyn server update divides by lambda2, "
                    "so lambda2 must be > 0")
    if not a.lr > 0:
        errs.append("algorithm.lr must be > 0")
    if not a.global_lr > 0:
        errs.append("algorithm.global_lr must be > 0")
    if a.epochs < 1:
        errs.append("algorithm.epochs must be >= 1")
    if a.batch_size < 1:
        errs.append("algorithm.batch_size must be >= 1")
    if a.steps is not None and a.steps < 1:
        errs.append("algorithm.steps must be >= 1")
    if a.inner not in INNER_METHODS:
        errs.append(f"algorithm.inner must be one of {INNER_METHODS}")
    elif a.inner == "prox" and family != "avg":
        errs.append("algorithm.inner: the prox inner step is only offered for the fedprox family")
    return errs


@dataclass(frozen=True)
class AlgorithmConfig:
    variant: str = "feddyn_en"
    lambda1: float = 0.0
    lambda2: float = 0.0
    epsilon: float = 0.0
    lr: float = 0.1
    global_lr: float = 1.0
    epochs: int = 1
    batch_size: int = 10
    steps: int | None = None
    inner: str = "subgradient"
    renormalize: bool = False

    def __post_init__(self):
        object.__setattr__(self, "variant", canonical_variant(self.variant))
        errors = algorithm_problems(self)
        if errors:
            raise ConfigurationError("; ".join(errors), errors)

    @property
    def family(self) -> str:
        return VARIANTS[self.variant][0]

    def budget(self) -> SolveBudget:
        return SolveBudget(self.epochs, self.batch_size, self.lr, self.steps, self.inner)


@dataclass(frozen=True)
class ParticipationSpec:
    rate: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.rate <= 1:
            raise ConfigurationError("participation.rate must lie in (0, 1]")

    def count(self, m: int) -> int:
        return max(1, int(math.floor(self.rate * m + 0.5)))


def sample_participants(m: int, spec: ParticipationSpec, round: int) -> np.ndarray:
    """Sorted ids of the clients selected in ``round``, uniform without replacement."""
    P = spec.count(m)
    if P >= m:
        return np.arange(m)
    rng = stream(spec.seed, "sample", round)
    return np.sort(rng.choice(m, size=P, replace=False))


@dataclass
class ServerState:
    """Global model plus the per-family state.

    Per-client dictionaries are sparse: a missing entry means the client was
    never selected and still holds its initial value (zeros for caches and
    control variates, ``theta0`` for client models).
    """

    round: int
    theta: np.ndarray
    family: str
    theta0: np.ndarray
    c: np.ndarray | None = None
    c_clients: dict = field(default_factory=dict)
    h: np.ndarray | None = None
    caches: dict = field(default_factory=dict)
    client_models: dict = field(default_factory=dict)
    gamma: np.ndarray | None = None

    @classmethod
    def initial(cls, family: str, theta0: np.ndarray) -> "ServerState":
        d = theta0.shape[0]
        st = cls(round=0, theta=theta0.copy(), family=family, theta0=theta0.copy())
        if family == "scaffold":
            st.c = np.zeros(d)
        elif family == "feddyn":
            st.h = np.zeros(d)
        return st

    def cache(self, k: int) -> np.ndarray:
        return self.caches.get(k, np.zeros_like(self.theta))

    def c_client(self, k: int) -> np.ndarray:
        return self.c_clients.get(k, np.zeros_like(self.theta))

    def client_model(self, k: int) -> np.ndarray:
        return self.client_models.get(k, self.theta0)

    def copy(self) -> "ServerState":
        return replace(self, c_clients=dict(self.c_clients), caches=dict(self.caches),
                       client_models=dict(self.client_models))


@dataclass
class RoundRecord:
    round: int
    variant: str
    participants: int
    elements_round: int = 0
    nnz_round: int = 0
    H_round: float = 0.0
    nnz_cum: int = 0
    bits_cum: float = 0.0
    nnz_cum_full: int | None = None
    bits_cum_full: float | None = None
    test_acc: float | None = None
    train_loss: float | None = None
    residual_max: float | None = None
    gamma_dev: float | None = None
    h_dev: float | None = None
    updates: list = field(default_factory=list, repr=False)


@dataclass
class RoundContext:
    """Everything a round needs besides the state: fixed for a whole run."""

    spec: ModelSpec
    algo: AlgorithmConfig
    participation: ParticipationSpec
    seed: int
    executor: ThreadPoolExecutor | None = None
    residuals: bool = False

    def map(self, fn, items):
        if self.executor is None:
            return [fn(k) for k in items]
        return list(self.executor.map(fn, items))


def _solve_tagged(fn, k: int, t: int):
    try:
        return fn()
    except DivergedSolveError as exc:
        raise exc.with_context(client=k, round=t) from None


def _residual(problem: LocalProblem, theta_k: np.ndarray) -> float:
    return float(np.max(np.abs(first_order_residual(problem, theta_k))))


def run_round_avg(state: ServerState, clients, ctx: RoundContext):
    """FedAvg/FedProx (+ elastic net): ``theta += sum_k n_k/n * sent_k``."""
    if state.family != "avg":
        raise ConfigurationError("run_round_avg needs an avg-family state")
    t = state.round + 1
    algo = ctx.algo
    sel = sample_participants(len(clients), ctx.participation, t)
    prev = state.theta
    budget = algo.budget()

    def work(k):
        prob = LocalProblem(ctx.spec, clients[k].data, prev, algo.lambda1, algo.lambda2)
        theta_k = _solve_tagged(lambda: solve_local(prob, budget, stream(ctx.seed, "local", t, k)), k, t)
        res = _residual(prob, theta_k) if ctx.residuals else None
        return theta_k, res

    results = ctx.map(work, sel)
    n_total = sum(c.n_k for c in clients)
    n_sel = sum(clients[k].n_k for k in sel)
    agg = np.zeros_like(prev)
    updates = []
    for k, (theta_k, _) in zip(sel, results):
        sent = meter.threshold(theta_k - prev, algo.epsilon)
        w = clients[k].n_k / (n_sel if algo.renormalize else n_total)
        agg += w * sent
        updates.append(TransmittedUpdate(sent, t, int(k), "model-delta"))
    new = state.copy()
    new.round = t
    new.theta = prev + agg
    rec = _record(t, state.family, sel, updates, results)
    return new, rec


def run_round_scaffold(state: ServerState, clients, ctx: RoundContext):
    """SCAFFOLD (+ elastic net); both the model and control deltas are metered."""
    if state.family != "scaffold":
        raise ConfigurationError("run_round_scaffold needs a scaffold-family state")
    t = state.round + 1
    algo = ctx.algo
    m = len(clients)
    sel = sample_participants(m, ctx.participation, t)
    prev = state.theta
    budget = algo.budget()

    def work(k):
        prob = LocalProblem(ctx.spec, clients[k].data, prev, algo.lambda1, algo.lambda2,
                            c_local=state.c_client(k), c_global=state.c)
        theta_k, c_new = _solve_tagged(
            lambda: scaffold_local_pass(prob, budget, stream(ctx.seed, "local", t, k)), k, t)
        res = _residual(prob, theta_k) if ctx.residuals else None
        return theta_k, c_new, res

    results = ctx.map(work, sel)
    sum_delta = np.zeros_like(prev)
    sum_dc = np.zeros_like(prev)
    updates = []
    new = state.copy()
    for k, (theta_k, c_new, _) in zip(sel, results):
        sent = meter.threshold(theta_k - prev, algo.epsilon)
        dc = c_new - state.c_client(k)
        sum_delta += sent
        sum_dc += dc
        new.c_clients[int(k)] = c_new
        updates.append(TransmittedUpdate(sent, t, int(k), "model-delta"))
        updates.append(TransmittedUpdate(dc, t, int(k), "control-delta"))
    new.round = t
    new.theta = prev + (algo.global_lr / len(sel)) * sum_delta
    new.c = state.c + sum_dc / m
    rec = _record(t, state.family, sel, updates, [(r[0], r[2]) for r in results])
    return new, rec


def run_round_feddyn(state: ServerState, clients, ctx: RoundContext):
    """FedDyn (+ elastic net) with server-side h accumulator.

    The server reconstructs ``theta_k = theta_prev + sent_k`` from what it
    received and uses those for both the ``h`` and model updates. Each
    client's gradient cache is refreshed from its own unthresholded model.
    """
    if state.family != "feddyn":
        raise ConfigurationError("run_round_feddyn needs a feddyn-family state")
    algo = ctx.algo
    if not algo.lambda2 > 0:
        raise ConfigurationError("feddyn needs lambda2 > 0 (the model update divides by it)")
    t = state.round + 1
    m = len(clients)
    sel = sample_participants(m, ctx.participation, t)
    prev = state.theta
    budget = algo.budget()
    lam1, lam2 = algo.lambda1, algo.lambda2

    def work(k):
        cache = state.cache(k)
        prob = LocalProblem(ctx.spec, clients[k].data, prev, lam1, lam2, cache=cache)
        theta_k = _solve_tagged(lambda: solve_local(prob, budget, stream(ctx.seed, "local", t, k)), k, t)
        new_cache = feddyn_grad_cache_update(cache, theta_k, prev, lam1, lam2)
        res = _residual(prob, theta_k) if ctx.residuals else None
        return theta_k, new_cache, res

    results = ctx.map(work, sel)
    sum_delta = np.zeros_like(prev)
    sum_sign = np.zeros_like(prev)
    sum_models = np.zeros_like(prev)
    updates = []
    new = state.copy()
    for k, (theta_k, new_cache, _) in zip(sel, results):
        sent = meter.threshold(theta_k - prev, algo.epsilon)
        received = prev + sent
        sum_delta += sent
        if lam1:
            sum_sign += np.sign(sent)
        sum_models += received
        new.caches[int(k)] = new_cache
        new.client_models[int(k)] = theta_k
        updates.append(TransmittedUpdate(sent, t, int(k), "model-delta"))
        updates.append(TransmittedUpdate(received, t, int(k), "model-full"))
    h = state.h - (lam2 / m) * sum_delta
    if lam1:
        h = h - (lam1 / m) * sum_sign
    gamma = sum_models / len(sel)
    new.round = t
    new.h = h
    new.gamma = gamma
    new.theta = gamma - h / lam2
    rec = _record(t, state.family, sel, [u for u in updates if u.channel == "model-delta"],
                  [(r[0], r[2]) for r in results])
    rec.updates = updates
    rec.gamma_dev = gamma_identity_deviation(new, lam2)
    rec.h_dev = h_identity_deviation(new, m)
    return new, rec


def gamma_identity_deviation(state: ServerState, lambda2: float) -> float:
    """``max|gamma - (theta + h / lambda2)|`` after a feddyn round."""
    return float(np.max(np.abs(state.gamma - (state.theta + state.h / lambda2))))


def h_identity_deviation(state: ServerState, m: int) -> float:
    """``max|h - mean_k cache_k|`` over all ``m`` clients (absent caches are 0)."""
    total = np.zeros_like(state.h)
    for k in sorted(state.caches):
        total += state.caches[k]
    return float(np.max(np.abs(state.h - total / m)))


def _record(t, family, sel, counted_updates, results) -> RoundRecord:
    rec = RoundRecord(round=t, variant=family, participants=len(sel), updates=list(counted_updates))
    rec.elements_round = sum(u.payload.size for u in counted_updates)
    rec.nnz_round = sum(meter.count_nonzero(u.payload) for u in counted_updates)
    res = [r[1] for r in results if r[1] is not None]
    if res:
        rec.residual_max = max(res)
    return rec


ROUND_FUNCS = {"avg": run_round_avg, "scaffold": run_round_scaffold, "feddyn": run_round_feddyn}


def run_round(state: ServerState, clients, ctx: RoundContext):
    return ROUND_FUNCS[state.family](state, clients, ctx)


@dataclass
class RunResult:
    records: list[RoundRecord]
    state: ServerState
    ledger: CommLedger
    ledger_full: CommLedger | None = None


def run_rounds(state: ServerState, clients, ctx: RoundContext, rounds: int,
               test: Dataset | None = None, train: Dataset | None = None,
               eval_every: int = 1, pooling: str = "round", bin: float = meter.DEFAULT_BIN,
               on_round=None) -> RunResult:
    """Run ``rounds`` rounds from ``state`` and meter every transmission.

    ``on_round(state, record)`` is called after each round (used by the
    diagnostics to trace per-round quantities).
    """
    ledger = CommLedger(bin=bin, pooling=pooling)
    ledger_full = CommLedger(bin=bin, pooling=pooling, channels=("model-full",)) \
        if state.family == "feddyn" else None
    records = []
    for _ in range(rounds):
        state, rec = run_round(state, clients, ctx)
        before = ledger.rounds
        ledger = meter.record_round(ledger, rec.updates)
        rec.H_round = ledger.last.entropy if ledger.rounds > before else 0.0
        rec.nnz_cum = ledger.cumulative_nonzero
        rec.bits_cum = ledger.cumulative_bits
        if ledger_full is not None:
            ledger_full = meter.record_round(ledger_full, rec.updates)
            rec.nnz_cum_full = ledger_full.cumulative_nonzero
            rec.bits_cum_full = ledger_full.cumulative_bits
        if eval_every and (rec.round % eval_every == 0 or _ == rounds - 1):
            if test is not None and ctx.spec.is_classifier:
                rec.test_acc = model.accuracy(ctx.spec, state.theta, test)
            if train is not None:
                rec.train_loss = model.loss(ctx.spec, state.theta, train)
        if on_round is not None:
            on_round(state, rec)
        rec.updates = []
        records.append(rec)
    return RunResult(records, state, ledger, ledger_full)
