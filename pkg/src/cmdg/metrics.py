"""Match-quality metrics against ground-truth matches, plus accuracy."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .datagen import MultiDomainDataset
from .matchstore import MatchMatrix
from .netcore import DenseNet, forward

logger = logging.getLogger(__name__)


@dataclass
class MetricsReport:
    overlap_pct: float | None = None
    top10_overlap_pct: float | None = None
    mean_rank: float | None = None
    domain_accuracy: dict[str, float] = field(default_factory=dict)
    ood_accuracy: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def _check_domains(a: MatchMatrix, b: MatchMatrix) -> None:
    if a.domain_names != b.domain_names:
        raise ValueError(f"domain mismatch: {a.domain_names} vs {b.domain_names}")


def overlap(learned: MatchMatrix, perfect: MatchMatrix) -> float:
    """Percent of perfect (anchor, other-domain) pairs that ``learned`` reproduces."""
    _check_domains(learned, perfect)
    by_anchor = {}
    for r, a in enumerate(learned.anchors()):
        by_anchor[(int(learned.base_domain[r]), int(a))] = r
    hits = total = 0
    for r, a, d, k in perfect.pairs():
        total += 1
        lr = by_anchor.get((int(perfect.base_domain[r]), a))
        if lr is not None and learned.entries[lr, d] == k:
            hits += 1
    if total == 0:
        raise ValueError("perfect match matrix has no cross-domain pairs")
    return 100.0 * hits / total


def random_overlap_expectation(ds: MultiDomainDataset, perfect: MatchMatrix) -> float:
    """Expected overlap (percent) of uniform same-class random matches with ``perfect``.

    A random match hits the perfect counterpart of a pair in domain ``d`` with
    probability one over the number of same-class candidates there.
    """
    probs = [1.0 / np.sum(ds.y[d] == perfect.labels[r]) for r, _, d, _ in perfect.pairs()]
    if not probs:
        raise ValueError("perfect match matrix has no cross-domain pairs")
    return 100.0 * float(np.mean(probs))


def perfect_match_ranks(ds: MultiDomainDataset, reprs: list[np.ndarray], perfect: MatchMatrix) -> np.ndarray:
    """0-based rank of each perfect counterpart among same-class candidates.

    Candidates for pair (j, k in domain d) are the samples of d sharing j's
    class, sorted by squared distance to j's representation with ties
    broken by lower index.
    """
    if tuple(ds.domain_names) != perfect.domain_names:
        raise ValueError("dataset and match matrix domains differ")
    ranks = []
    for d in range(ds.num_domains):
        for c in np.unique(perfect.labels):
            rows = np.flatnonzero((perfect.labels == c) & (perfect.base_domain != d))
            if len(rows) == 0:
                continue
            cands = np.flatnonzero(ds.y[d] == c)
            if len(cands) == 0:
                logger.warning("class %d has no candidates in domain %s; pairs skipped", c, ds.domain_names[d])
                continue
            anchors = perfect.entries[rows, perfect.base_domain[rows]]
            bases = perfect.base_domain[rows]
            q = np.stack([reprs[b][a] for b, a in zip(bases, anchors)])
            cand_repr = reprs[d][cands]
            d2 = ((q[:, None, :] - cand_repr[None, :, :]) ** 2).sum(axis=-1)
            targets = perfect.entries[rows, d]
            pos = np.searchsorted(cands, targets)
            dk = d2[np.arange(len(rows)), pos]
            before = (d2 < dk[:, None]).sum(axis=1) + ((d2 == dk[:, None]) & (cands[None, :] < targets[:, None])).sum(axis=1)
            ranks.append(before)
    return np.concatenate(ranks) if ranks else np.zeros(0, dtype=int)


def top10_overlap(ds: MultiDomainDataset, reprs: list[np.ndarray], perfect: MatchMatrix, k: int = 10) -> float:
    """Percent of perfect pairs whose counterpart ranks among the ``k`` nearest."""
    ranks = perfect_match_ranks(ds, reprs, perfect)
    if len(ranks) == 0:
        raise ValueError("no rankable perfect pairs")
    return 100.0 * int(np.sum(ranks < k)) / len(ranks)


def mean_rank(ds: MultiDomainDataset, reprs: list[np.ndarray], perfect: MatchMatrix) -> float:
    ranks = perfect_match_ranks(ds, reprs, perfect)
    if len(ranks) == 0:
        raise ValueError("no rankable perfect pairs")
    return float(np.mean(ranks))


def representations(net: DenseNet, ds: MultiDomainDataset) -> list[np.ndarray]:
    return [forward(net, x, record=False)[0] for x in ds.x]


def predict(net: DenseNet, x: np.ndarray) -> np.ndarray:
    return np.argmax(forward(net, x, record=False)[1], axis=1)


def accuracy(net: DenseNet, ds: MultiDomainDataset) -> dict[str, float]:
    """Argmax-logit accuracy per domain."""
    if sum(ds.sizes()) == 0:
        raise ValueError("empty split")
    out = {}
    for name, x, y in zip(ds.domain_names, ds.x, ds.y):
        if len(y):
            out[name] = float(np.mean(predict(net, x) == y))
    return out


def pooled_accuracy(net: DenseNet, ds: MultiDomainDataset) -> float:
    """Accuracy over all samples of all domains together."""
    x, y, _ = ds.flat()
    if len(y) == 0:
        raise ValueError("empty split")
    return float(np.mean(predict(net, x) == y))


def match_quality(ds: MultiDomainDataset, reprs: list[np.ndarray], perfect: MatchMatrix, learned: MatchMatrix | None = None) -> MetricsReport:
    """Overlap, top-10 overlap and mean rank of a representation.

    ``learned`` defaults to the nearest-neighbour matches induced by ``reprs``.
    """
    from .matchstore import infer_matches

    if learned is None:
        learned = infer_matches(ds, reprs)
    ranks = perfect_match_ranks(ds, reprs, perfect)
    if len(ranks) == 0:
        raise ValueError("no rankable perfect pairs")
    return MetricsReport(
        overlap_pct=overlap(learned, perfect),
        top10_overlap_pct=100.0 * int(np.sum(ranks < 10)) / len(ranks),
        mean_rank=float(np.mean(ranks)),
    )


def penalty_trace(report) -> list[tuple[int, float, float]]:
    """``(epoch, penalty, train_error)`` rows from a training report."""
    return [(int(e.epoch), float(e.penalty), 1.0 - float(e.train_acc)) for e in report.history]
