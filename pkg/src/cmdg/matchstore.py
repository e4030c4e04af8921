"""Match data matrix: construction, nearest-neighbour inference, persistence.

A :class:`MatchMatrix` has one row per anchor.  For every class the anchor
domain ("base domain") is the domain holding the most samples of that class;
each row holds the anchor's index in the base domain and one same-class index
in every other domain.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .datagen import MultiDomainDataset

STRATEGIES = ("random", "perfect", "inferred", "mixed")


class MissingMatchError(ValueError):
    """A class or object has no candidate in some domain."""


@dataclass(frozen=True)
class MatchMatrix:
    entries: np.ndarray  # (rows, K) sample index per domain
    labels: np.ndarray  # (rows,)
    base_domain: np.ndarray  # (rows,) column holding the anchor
    domain_names: tuple[str, ...]
    strategy: str
    seed: int | None = None

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.entries.ndim != 2 or self.entries.shape[1] != len(self.domain_names):
            raise ValueError("entries must be (rows, num_domains)")
        if not (len(self.labels) == len(self.base_domain) == len(self.entries)):
            raise ValueError("labels/base_domain length must equal row count")

    @property
    def num_rows(self) -> int:
        return len(self.entries)

    @property
    def num_domains(self) -> int:
        return self.entries.shape[1]

    def anchors(self) -> np.ndarray:
        return self.entries[np.arange(self.num_rows), self.base_domain]

    def pairs(self) -> list[tuple[int, int, int, int]]:
        """``(row, anchor_index, domain, entry_index)`` for each non-base column."""
        out = []
        for r in range(self.num_rows):
            b = self.base_domain[r]
            a = self.entries[r, b]
            for d in range(self.num_domains):
                if d != b:
                    out.append((r, int(a), d, int(self.entries[r, d])))
        return out

    def validate(self, ds: MultiDomainDataset) -> None:
        """Check class homogeneity, index bounds and anchor uniqueness per class."""
        if tuple(ds.domain_names) != self.domain_names:
            raise ValueError("match matrix and dataset domains differ")
        for d in range(self.num_domains):
            col = self.entries[:, d]
            if col.size and (col.min() < 0 or col.max() >= len(ds.y[d])):
                raise ValueError(f"domain {d}: entry index out of range")
            if not np.array_equal(ds.y[d][col], self.labels):
                raise ValueError(f"domain {d}: row entries are not class-homogeneous")
        keys = set()
        for r, a in enumerate(self.anchors()):
            key = (int(self.labels[r]), int(self.base_domain[r]), int(a))
            if key in keys:
                raise ValueError(f"anchor {key} appears twice")
            keys.add(key)


def base_domain_per_class(ds: MultiDomainDataset) -> dict[int, int]:
    """Domain with the most samples of each class; ties go to the lowest index."""
    counts = np.array([[int(np.sum(y == c)) for y in ds.y] for c in range(ds.num_classes)])
    out = {}
    for c in range(ds.num_classes):
        if counts[c].sum() == 0:
            raise MissingMatchError(f"class {c} is absent from every domain")
        out[c] = int(np.argmax(counts[c]))
    return out


def _layout(ds: MultiDomainDataset) -> tuple[dict[int, int], list[tuple[int, np.ndarray, list[np.ndarray]]]]:
    """Per class: (class, anchors, candidate index arrays per domain)."""
    bases = base_domain_per_class(ds)
    missing = []
    blocks = []
    for c in range(ds.num_classes):
        cands = [np.flatnonzero(y == c) for y in ds.y]
        for d, idx in enumerate(cands):
            if len(idx) == 0:
                missing.append((c, ds.domain_names[d]))
        blocks.append((c, cands[bases[c]], cands))
    if missing:
        raise MissingMatchError(f"classes missing from domains: {missing}")
    return bases, blocks


def _assemble(ds, bases, per_class_entries, strategy, seed) -> MatchMatrix:
    entries = np.concatenate([e for _, e in per_class_entries]) if per_class_entries else np.zeros((0, ds.num_domains), int)
    labels = np.concatenate([np.full(len(e), c) for c, e in per_class_entries]).astype(int)
    base = np.array([bases[c] for c in labels], dtype=int)
    mm = MatchMatrix(entries.astype(int), labels, base, tuple(ds.domain_names), strategy, seed)
    mm.validate(ds)
    return mm


def random_matches(ds: MultiDomainDataset, seed: int = 0) -> MatchMatrix:
    """Match each base-domain anchor to a uniformly random same-class sample per domain.

    Draws cycle through random permutations of the candidates, so when a
    domain has at least as many candidates as there are anchors every
    candidate is used at most once.
    """
    rng = np.random.default_rng(seed)
    bases, blocks = _layout(ds)
    out = []
    for c, anchors, cands in blocks:
        e = np.empty((len(anchors), ds.num_domains), dtype=int)
        for d, idx in enumerate(cands):
            if d == bases[c]:
                e[:, d] = anchors
                continue
            reps = -(-len(anchors) // len(idx))
            draw = np.concatenate([rng.permutation(idx) for _ in range(reps)])
            e[:, d] = draw[: len(anchors)]
        out.append((c, e))
    return _assemble(ds, bases, out, "random", seed)


def perfect_matches(ds: MultiDomainDataset) -> MatchMatrix:
    """Rows pair the same object id across every domain."""
    if not ds.has_objects():
        raise MissingMatchError("dataset has unknown object ids")
    bases, blocks = _layout(ds)
    lookup = []
    for oids in ds.object_ids:
        m = {}
        for i, o in enumerate(oids.tolist()):
            m.setdefault(o, i)
        lookup.append(m)
    out = []
    for c, anchors, _ in blocks:
        b = bases[c]
        e = np.empty((len(anchors), ds.num_domains), dtype=int)
        for r, a in enumerate(anchors):
            obj = int(ds.object_ids[b][a])
            for d in range(ds.num_domains):
                if obj not in lookup[d]:
                    raise MissingMatchError(f"object {obj} missing from domain {ds.domain_names[d]!r}")
                e[r, d] = lookup[d][obj]
        out.append((c, e))
    return _assemble(ds, bases, out, "perfect", None)


def nearest_indices(queries: np.ndarray, candidates: np.ndarray, chunk_elems: int = 4_000_000) -> np.ndarray:
    """Index of the nearest candidate (squared Euclidean) per query; ties -> lowest index."""
    queries = np.asarray(queries, dtype=float)
    candidates = np.asarray(candidates, dtype=float)
    step = max(1, chunk_elems // max(1, candidates.size))
    out = np.empty(len(queries), dtype=int)
    for s in range(0, len(queries), step):
        q = queries[s : s + step]
        d2 = ((q[:, None, :] - candidates[None, :, :]) ** 2).sum(axis=-1)
        out[s : s + step] = np.argmin(d2, axis=1)
    return out


def infer_matches(ds: MultiDomainDataset, reprs: list[np.ndarray]) -> MatchMatrix:
    """Nearest same-class neighbour of each anchor in every other domain.

    ``reprs[d]`` holds the representation of every sample of domain ``d``.
    Several anchors may share a neighbour.
    """
    if len(reprs) != ds.num_domains:
        raise ValueError("need one representation table per domain")
    bases, blocks = _layout(ds)
    out = []
    for c, anchors, cands in blocks:
        b = bases[c]
        e = np.empty((len(anchors), ds.num_domains), dtype=int)
        q = reprs[b][anchors]
        for d, idx in enumerate(cands):
            e[:, d] = anchors if d == b else idx[nearest_indices(q, reprs[d][idx])]
        out.append((c, e))
    return _assemble(ds, bases, out, "inferred", None)


def fraction_matches(ds: MultiDomainDataset, fraction: float, seed: int = 0) -> MatchMatrix:
    """Rows taken from the perfect matrix with probability ``fraction``, else random.

    ``fraction=0`` returns exactly ``random_matches(ds, seed)`` and
    ``fraction=1`` exactly the perfect rows.
    """
    if not 0 <= fraction <= 1:
        raise ValueError("fraction must be in [0, 1]")
    rand = random_matches(ds, seed)
    perf = perfect_matches(ds)
    if fraction == 0:
        return rand
    if fraction == 1:
        return MatchMatrix(perf.entries, perf.labels, perf.base_domain, perf.domain_names, "perfect", seed)
    pick = np.random.default_rng([seed, 7]).random(rand.num_rows) < fraction
    entries = np.where(pick[:, None], perf.entries, rand.entries)
    return MatchMatrix(entries, rand.labels, rand.base_domain, rand.domain_names, "mixed", seed)


def refresh(ds: MultiDomainDataset, repr_fn, period: int, epoch: int) -> MatchMatrix | None:
    """Re-infer matches when ``epoch`` is a multiple of ``period``.

    ``repr_fn(ds)`` returns per-domain representations from the current network.
    """
    if period < 1:
        raise ValueError("refresh period must be >= 1")
    if epoch % period != 0:
        return None
    return infer_matches(ds, repr_fn(ds))


def save_matches(mm: MatchMatrix, path: str | Path) -> None:
    """CSV with header ``class,domain_0,...`` plus a ``.json`` sidecar."""
    path = Path(path)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["class"] + [f"domain_{d}" for d in range(mm.num_domains)])
        for c, row in zip(mm.labels, mm.entries):
            w.writerow([int(c)] + [int(v) for v in row])
    bases = {}
    for c, b in zip(mm.labels.tolist(), mm.base_domain.tolist()):
        bases[str(c)] = b
    side = {"strategy": mm.strategy, "seed": mm.seed, "domain_names": list(mm.domain_names), "base_domain": bases}
    path.with_suffix(".json").write_text(json.dumps(side, indent=2, sort_keys=True))


def load_matches(path: str | Path) -> MatchMatrix:
    path = Path(path)
    side = json.loads(path.with_suffix(".json").read_text())
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    header, body = rows[0], rows[1:]
    k = len(header) - 1
    if header != ["class"] + [f"domain_{d}" for d in range(k)]:
        raise ValueError(f"{path}: unexpected header {header}")
    arr = np.asarray(body, dtype=int).reshape(-1, k + 1)
    labels = arr[:, 0]
    base = np.array([side["base_domain"][str(c)] for c in labels], dtype=int)
    return MatchMatrix(arr[:, 1:], labels, base, tuple(side["domain_names"]), side["strategy"], side.get("seed"))
