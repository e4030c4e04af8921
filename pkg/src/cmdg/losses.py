"""Training objectives and their gradients.

Every loss returns ``(value, grad)`` where ``grad`` is the gradient with
respect to the loss's array input (logits or representations).  The
parameter-level composition lives in :func:`matched_erm_loss`.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .netcore import DenseNet, Gradients, backward, forward

logger = logging.getLogger(__name__)

NORM_EPS = 1e-12


@dataclass(frozen=True)
class MatchPenaltyConfig:
    lam: float = 1.0
    distance: str = "squared_euclidean"

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.distance != "squared_euclidean":
            raise ValueError(f"unsupported distance {self.distance!r}")


@dataclass(frozen=True)
class ContrastiveConfig:
    tau: float = 0.05

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be > 0")


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean negative log-softmax of the true class, with its logit gradient."""
    logits = np.asarray(logits, dtype=float)
    labels = np.asarray(labels, dtype=int)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"labels shape {labels.shape} does not match {n} logits rows")
    if n and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"labels must lie in [0, {c})")
    if n == 0:
        return 0.0, np.zeros_like(logits)
    lsm = log_softmax(logits)
    rows = np.arange(n)
    loss = -lsm[rows, labels].mean()
    grad = np.exp(lsm)
    grad[rows, labels] -= 1.0
    return float(loss), grad / n


def match_penalty(
    reprs: np.ndarray,
    rows: np.ndarray,
    anchor_cols: np.ndarray,
) -> tuple[float, np.ndarray]:
    """Mean squared distance between each row's anchor and its matched entries.

    ``rows`` is an (R, K) array of positions into ``reprs``; -1 marks an
    entry not present in the batch.  ``anchor_cols[r]`` is the column of
    row ``r`` holding the anchor.  Pairs are (anchor, other entry); the mean
    runs over the pairs actually realized, and is 0 when there are none.
    """
    reprs = np.asarray(reprs, dtype=float)
    rows = np.asarray(rows, dtype=int)
    grad = np.zeros_like(reprs)
    if rows.size == 0:
        return 0.0, grad
    anchor_cols = np.asarray(anchor_cols, dtype=int)
    anchors = rows[np.arange(len(rows)), anchor_cols]
    a_idx, o_idx = [], []
    for r in range(rows.shape[0]):
        a = anchors[r]
        if a < 0:
            continue
        for c in range(rows.shape[1]):
            if c == anchor_cols[r] or rows[r, c] < 0:
                continue
            a_idx.append(a)
            o_idx.append(rows[r, c])
    if not a_idx:
        return 0.0, grad
    a_idx = np.asarray(a_idx)
    o_idx = np.asarray(o_idx)
    diff = reprs[a_idx] - reprs[o_idx]
    n_pairs = len(a_idx)
    value = float((diff**2).sum() / n_pairs)
    g = 2.0 * diff / n_pairs
    np.add.at(grad, a_idx, g)
    np.add.at(grad, o_idx, -g)
    return value, grad


def _normalize(reprs: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    norms = np.linalg.norm(reprs, axis=1)
    ok = norms >= NORM_EPS
    z = np.zeros_like(reprs)
    z[ok] = reprs[ok] / norms[ok, None]
    return z, norms, ok


def cosine_similarity_matrix(reprs: np.ndarray) -> np.ndarray:
    """Pairwise cosine similarity; rows with norm below 1e-12 get similarity 0."""
    z, _, _ = _normalize(np.asarray(reprs, dtype=float))
    return z @ z.T


def positive_pairs(rows: np.ndarray) -> np.ndarray:
    """Ordered (j, k) pairs of distinct present entries sharing a match row."""
    rows = np.asarray(rows, dtype=int)
    pairs = []
    for row in rows:
        present = [int(v) for v in row if v >= 0]
        for j in present:
            for k in present:
                if j != k:
                    pairs.append((j, k))
    return np.asarray(pairs, dtype=int).reshape(-1, 2)


def contrastive_loss(
    reprs: np.ndarray,
    labels: np.ndarray,
    domain_ids: np.ndarray,
    rows: np.ndarray,
    cfg: ContrastiveConfig = ContrastiveConfig(),
) -> tuple[float, np.ndarray]:
    """Multi-domain contrastive loss over cosine similarities.

    Positives are ordered pairs of entries from the same match row (same
    class, different domains).  Negatives for anchor ``j`` are every batch
    sample whose label differs from ``j``'s.  For each positive pair

        l(j, k) = -log( e^{s_jk/tau} / (e^{s_jk/tau} + sum_{i: y_i != y_j} e^{s_ji/tau}) )

    and the returned value is the mean over positive pairs that have at least
    one negative.
    """
    reprs = np.asarray(reprs, dtype=float)
    labels = np.asarray(labels, dtype=int)
    domain_ids = np.asarray(domain_ids, dtype=int)
    pairs = positive_pairs(rows)
    if len(pairs):
        same_dom = domain_ids[pairs[:, 0]] == domain_ids[pairs[:, 1]]
        diff_cls = labels[pairs[:, 0]] != labels[pairs[:, 1]]
        pairs = pairs[~same_dom & ~diff_cls]
    neg_mask = labels[:, None] != labels[None, :]
    has_neg = neg_mask.any(axis=1)
    keep = has_neg[pairs[:, 0]] if len(pairs) else np.zeros(0, dtype=bool)
    skipped = int((~keep).sum())
    pairs = pairs[keep]
    if skipped:
        logger.debug("contrastive_loss: skipped %d positive pairs without negatives", skipped)
    if len(pairs) == 0:
        raise ValueError("no positive pair has an in-batch negative")

    z, norms, ok = _normalize(reprs)
    sim = z @ z.T / cfg.tau
    n = len(reprs)
    dsim = np.zeros((n, n))
    total = 0.0
    # Group by anchor so the negative log-sum-exp is shared.
    order = np.argsort(pairs[:, 0], kind="stable")
    pairs = pairs[order]
    starts = np.flatnonzero(np.r_[True, pairs[1:, 0] != pairs[:-1, 0]])
    ends = np.r_[starts[1:], len(pairs)]
    for s, e in zip(starts, ends):
        j = pairs[s, 0]
        ks = pairs[s:e, 1]
        negs = np.flatnonzero(neg_mask[j])
        neg_logits = sim[j, negs]
        pos_logits = sim[j, ks]
        m = max(pos_logits.max(), neg_logits.max())
        neg_sum = np.exp(neg_logits - m).sum()
        pos_exp = np.exp(pos_logits - m)
        denom = pos_exp + neg_sum
        total += float(np.sum(np.log(denom) - (pos_logits - m)))
        # dl/ds_jk = -1 + p_k ; dl/ds_ji = e_i / denom for each pair
        np.add.at(dsim[j], ks, pos_exp / denom - 1.0)
        np.add.at(dsim[j], negs, (np.exp(neg_logits - m)[None, :] / denom[:, None]).sum(axis=0))
    n_pairs = len(pairs)
    value = total / n_pairs
    dsim /= n_pairs * cfg.tau
    dz = dsim @ z + dsim.T @ z
    grad = np.zeros_like(reprs)
    zz = z[ok]
    dzz = dz[ok]
    grad[ok] = (dzz - zz * (zz * dzz).sum(axis=1, keepdims=True)) / norms[ok, None]
    return float(value), grad


@dataclass
class LossParts:
    total: float
    ce: float
    penalty: float


def matched_erm_loss(
    net: DenseNet,
    x: np.ndarray,
    labels: np.ndarray,
    penalty_terms: list[tuple[np.ndarray, np.ndarray, float]] = (),
) -> tuple[LossParts, Gradients]:
    """Cross-entropy over the batch plus weighted match penalties.

    ``penalty_terms`` holds ``(rows, anchor_cols, lam)`` triples; rows index
    into ``x``.  Cross-entropy is the mean over every sample in ``x``, so each
    domain column of a match-row batch contributes equally.
    """
    reprs, logits = forward(net, x)
    ce, d_logits = cross_entropy(logits, labels)
    d_repr = np.zeros_like(reprs)
    pen_total = 0.0
    for rows, anchor_cols, lam in penalty_terms:
        p, g = match_penalty(reprs, rows, anchor_cols)
        pen_total += lam * p
        d_repr += lam * g
    grads = backward(net, d_repr=d_repr, d_logits=d_logits)
    return LossParts(ce + pen_total, ce, pen_total), grads
