"""Sparsification and communication-cost accounting.

Two cost measures are tracked per run:

* the cumulative number of nonzero transmitted elements, and
* cumulative bits, i.e. the empirical Shannon entropy (bits/element) of the
  round's transmitted values, discretised into bins of width 0.01 with
  ``index = floor(value / bin)``, times the number of elements sent.

Binning is used for accounting only; the values fed back into training are
never discretised.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import MeteringError

DEFAULT_BIN = 0.01
CHANNELS = ("model-delta", "control-delta", "model-full")
POOLING_MODES = ("round", "client")


def threshold(delta: np.ndarray, eps: float) -> np.ndarray:
    """Zero every coordinate with ``|delta_i| <= eps``; returns a new array."""
    if not math.isfinite(eps):
        raise MeteringError("threshold eps must be finite")
    out = np.array(delta, dtype=np.float64, copy=True)
    out[np.abs(out) <= eps] = 0.0
    return out


def count_nonzero(values: np.ndarray) -> int:
    return int(np.count_nonzero(values))


def discretize(values, bin: float = DEFAULT_BIN) -> np.ndarray:
    if not bin > 0:
        raise MeteringError("bin width must be positive")
    return np.floor(np.asarray(values, dtype=np.float64) / bin).astype(np.int64)


def bin_counts(values, bin: float = DEFAULT_BIN) -> tuple[np.ndarray, np.ndarray]:
    """Occupied bin indices (ascending) and their counts."""
    idx = discretize(values, bin).ravel()
    if idx.size == 0:
        return idx, idx.copy()
    lo, hi = int(idx.min()), int(idx.max())
    if hi - lo < 10_000_000:
        counts = np.bincount(idx - lo)
        occupied = np.flatnonzero(counts)
        return occupied + lo, counts[occupied]
    return np.unique(idx, return_counts=True)


def entropy_from_counts(counts) -> float:
    counts = np.asarray(counts, dtype=np.float64)
    counts = counts[counts > 0]
    k = counts.size
    if k == 0:
        raise MeteringError("entropy of an empty sample is undefined")
    if k == 1:
        return 0.0
    if np.all(counts == counts[0]):
        return math.log2(k)
    total = counts.sum()
    p = counts / total
    h = float(-np.sum(p * np.log2(p)))
    return min(max(h, 0.0), math.log2(k))


def empirical_entropy(values, bin: float = DEFAULT_BIN) -> float:
    """Plug-in Shannon entropy (bits per element) of the binned values."""
    values = np.asarray(values)
    if values.size == 0:
        raise MeteringError("entropy of an empty sample is undefined")
    return entropy_from_counts(bin_counts(values, bin)[1])


@dataclass(frozen=True)
class TransmittedUpdate:
    payload: np.ndarray
    round: int
    client: int
    channel: str = "model-delta"

    def __post_init__(self):
        if self.channel not in CHANNELS:
            raise MeteringError(f"unknown channel {self.channel!r}")
        if not np.all(np.isfinite(self.payload)):
            raise MeteringError(
                f"non-finite payload from client {self.client} in round {self.round}")


@dataclass(frozen=True)
class RoundCost:
    elements: int
    nonzero: int
    entropy: float
    bits: float


@dataclass(frozen=True)
class CommLedger:
    """Immutable running totals; :func:`record_round` returns a new ledger.

    ``channels`` restricts which update channels this ledger counts.
    ``histogram`` accumulates bin counts of the ``model-delta`` payloads.
    """

    bin: float = DEFAULT_BIN
    pooling: str = "round"
    channels: tuple[str, ...] = ("model-delta", "control-delta")
    rounds: int = 0
    cumulative_nonzero: int = 0
    cumulative_elements: int = 0
    cumulative_bits: float = 0.0
    entropy_history: tuple[float, ...] = ()
    element_history: tuple[int, ...] = ()
    nonzero_history: tuple[int, ...] = ()
    histogram: dict = field(default_factory=dict, compare=True, repr=False)

    def __post_init__(self):
        if self.pooling not in POOLING_MODES:
            raise MeteringError(f"pooling must be one of {POOLING_MODES}")
        if not self.bin > 0:
            raise MeteringError("bin width must be positive")
        bad = set(self.channels) - set(CHANNELS)
        if bad:
            raise MeteringError(f"unknown channels {sorted(bad)}")

    @property
    def last(self) -> RoundCost | None:
        if not self.entropy_history:
            return None
        h = self.entropy_history[-1]
        e = self.element_history[-1]
        return RoundCost(e, self.nonzero_history[-1], h, h * e)


def round_cost(updates, bin: float = DEFAULT_BIN, pooling: str = "round") -> tuple[RoundCost, dict]:
    """Cost of one round's payloads plus the model-delta bin histogram."""
    payloads = [u.payload.ravel() for u in updates]
    elements = sum(p.size for p in payloads)
    nonzero = sum(count_nonzero(p) for p in payloads)
    hist: dict[int, int] = {}
    deltas = [u.payload.ravel() for u in updates if u.channel == "model-delta"]
    if deltas:
        b, c = bin_counts(np.concatenate(deltas), bin)
        hist = dict(zip(b.tolist(), c.tolist()))
    if elements == 0:
        return RoundCost(0, 0, 0.0, 0.0), hist
    if pooling == "round":
        h = empirical_entropy(np.concatenate(payloads), bin)
        bits = h * elements
    else:
        bits = 0.0
        for p in payloads:
            if p.size:
                bits += empirical_entropy(p, bin) * p.size
        h = bits / elements
    return RoundCost(elements, nonzero, h, bits), hist


def record_round(ledger: CommLedger, updates) -> CommLedger:
    """Fold one round of transmitted updates into the ledger.

    Updates on channels the ledger does not count are ignored. An empty
    round leaves the ledger unchanged.
    """
    counted = [u for u in updates if u.channel in ledger.channels]
    if not counted:
        return ledger
    rounds = {u.round for u in counted}
    if len(rounds) != 1:
        raise MeteringError(f"updates span several rounds: {sorted(rounds)}")
    cost, hist = round_cost(counted, ledger.bin, ledger.pooling)
    merged = dict(ledger.histogram)
    for k, v in hist.items():
        merged[k] = merged.get(k, 0) + v
    return replace(
        ledger,
        rounds=ledger.rounds + 1,
        cumulative_nonzero=ledger.cumulative_nonzero + cost.nonzero,
        cumulative_elements=ledger.cumulative_elements + cost.elements,
        cumulative_bits=ledger.cumulative_bits + cost.bits,
        entropy_history=ledger.entropy_history + (cost.entropy,),
        element_history=ledger.element_history + (cost.elements,),
        nonzero_history=ledger.nonzero_history + (cost.nonzero,),
        histogram=merged,
    )
