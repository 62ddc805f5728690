"""Client splits: IID or Dirichlet label skew, equal or lognormal sizes."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import PartitionError
from .model import Dataset
from .seeding import stream

MODES = ("iid", "dirichlet")
SIZE_MODES = ("equal", "lognormal")


@dataclass(frozen=True)
class PartitionSpec:
    mode: str = "iid"
    m: int = 10
    alpha: float = 0.3
    size_mode: str = "equal"
    sigma: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise PartitionError(f"partition mode must be one of {MODES}")
        if self.size_mode not in SIZE_MODES:
            raise PartitionError(f"size_mode must be one of {SIZE_MODES}")
        if self.m < 1:
            raise PartitionError("need at least one client (m >= 1)")
        if not self.alpha > 0:
            raise PartitionError("dirichlet alpha must be positive")
        if not self.sigma >= 0:
            raise PartitionError("lognormal sigma must be nonnegative")


@dataclass(frozen=True)
class ClientShard:
    client_id: int
    indices: np.ndarray = field(repr=False)
    data: Dataset = field(repr=False)

    @property
    def n_k(self) -> int:
        return int(self.indices.size)


def client_sizes(n: int, m: int, size_mode: str, sigma: float,
                 rng: np.random.Generator) -> np.ndarray:
    """Per-client example counts summing to ``n``, each at least 1.

    Lognormal sizes are proportional to ``Lognormal(0, sigma^2)`` draws.
    Rounding remainders go to clients in ascending id order.
    """
    if n < m:
        raise PartitionError(f"cannot give {m} clients at least one of {n} examples")
    if size_mode == "equal":
        sizes = np.full(m, n // m, dtype=np.int64)
    else:
        w = rng.lognormal(mean=0.0, sigma=sigma, size=m)
        sizes = np.maximum(np.floor(w / w.sum() * n).astype(np.int64), 1)
    excess = int(sizes.sum()) - n
    while excess > 0:
        # clamping to 1 overshot: shave the largest clients, lowest id first
        order = np.lexsort((np.arange(m), -sizes))
        for k in order:
            if excess == 0:
                break
            if sizes[k] > 1:
                sizes[k] -= 1
                excess -= 1
    short = -excess
    k = 0
    while short > 0:
        sizes[k % m] += 1
        short -= 1
        k += 1
    if sizes.min() < 1 or sizes.sum() != n:
        raise PartitionError("infeasible client size allocation")
    return sizes


def _dirichlet_assign(labels: np.ndarray, sizes: np.ndarray, num_classes: int,
                      alpha: float, rng: np.random.Generator) -> list[np.ndarray]:
    m = sizes.size
    props = rng.dirichlet(np.full(num_classes, alpha), size=m)
    pools = [rng.permutation(np.flatnonzero(labels == c)) for c in range(num_classes)]
    avail = np.array([p.size for p in pools], dtype=np.int64)
    # one slot per example to hand out, in random client order, so that class
    # exhaustion near the end is shared by all clients rather than the last ones
    slots = rng.permutation(np.repeat(np.arange(m), sizes))
    owner_cls = np.empty(slots.size, dtype=np.int64)
    pos = 0
    while pos < slots.size:
        open_ = avail > 0
        q = np.where(open_, props, 0.0)
        dead = q.sum(axis=1) <= 0
        q[dead] = open_
        cdf = np.cumsum(q / q.sum(axis=1, keepdims=True), axis=1)
        cdf[:, -1] = 1.0
        block = slots[pos:]
        u = rng.random(block.size)
        cls = (u[:, None] > cdf[block]).sum(axis=1)
        cut = block.size
        for c in np.flatnonzero(open_):
            hits = np.flatnonzero(cls == c)
            if hits.size > avail[c]:
                cut = min(cut, int(hits[avail[c]]))
        owner_cls[pos:pos + cut] = cls[:cut]
        avail -= np.bincount(cls[:cut], minlength=num_classes)
        pos += cut
    taken = np.zeros(num_classes, dtype=np.int64)
    picked = np.empty(slots.size, dtype=np.int64)
    for c in range(num_classes):
        where = np.flatnonzero(owner_cls == c)
        picked[where] = pools[c][:where.size]
        taken[c] = where.size
    order = np.argsort(slots, kind="stable")
    bounds = np.concatenate([[0], np.cumsum(sizes)])
    return [np.sort(picked[order[bounds[k]:bounds[k + 1]]]) for k in range(m)]


def split(dataset: Dataset, spec: PartitionSpec) -> list[ClientShard]:
    """Deal ``dataset`` out to ``spec.m`` clients.

    In dirichlet mode each client's label proportions are drawn from
    ``Dir(alpha * 1)``. Examples are then dealt one slot at a time in a
    random interleaving of clients: each slot draws a class from its owner's
    proportions and takes the next example from that class's shuffled pool.
    When a class runs dry the proportions are renormalised over the classes
    that remain.
    """
    n = len(dataset)
    if n < spec.m:
        raise PartitionError(f"dataset has {n} examples, fewer than m={spec.m} clients")
    rng = stream(spec.seed, "partition")
    sizes = client_sizes(n, spec.m, spec.size_mode, spec.sigma, rng)
    if spec.mode == "iid":
        perm = rng.permutation(n)
        bounds = np.concatenate([[0], np.cumsum(sizes)])
        index_lists = [np.sort(perm[bounds[k]:bounds[k + 1]]) for k in range(spec.m)]
    else:
        C = dataset.num_classes
        if C is None:
            raise PartitionError("dirichlet partition needs class labels")
        missing = [c for c in range(C) if not np.any(dataset.labels == c)]
        if missing:
            raise PartitionError(f"classes {missing} have no examples")
        index_lists = _dirichlet_assign(dataset.labels, sizes, C, spec.alpha, rng)
    return [ClientShard(k, idx, dataset.subset(idx)) for k, idx in enumerate(index_lists)]


def label_histograms(shards, num_classes: int) -> np.ndarray:
    """Row-normalised per-client label histograms, shape ``(m, num_classes)``."""
    H = np.zeros((len(shards), num_classes))
    for i, s in enumerate(shards):
        H[i] = np.bincount(s.data.labels, minlength=num_classes) / max(s.n_k, 1)
    return H


def total_variation(p: np.ndarray, q: np.ndarray) -> float:
    return 0.5 * float(np.abs(np.asarray(p) - np.asarray(q)).sum())


def mean_pairwise_tv(hists: np.ndarray) -> float:
    m = hists.shape[0]
    if m < 2:
        return 0.0
    diffs = np.abs(hists[:, None, :] - hists[None, :, :]).sum(axis=2) * 0.5
    return float(diffs[np.triu_indices(m, 1)].mean())


def shards_to_json(shards) -> str:
    return json.dumps(
        {"clients": [{"client_id": s.client_id, "n_k": s.n_k, "indices": s.indices.tolist()}
                     for s in shards]},
        separators=(",", ":"))
