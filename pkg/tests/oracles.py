"""Exhaustive reference implementations used as test oracles."""

import numpy as np

from cmdg.datagen import MultiDomainDataset


def perfect_pairs(perfect):
    out = []
    for r in range(perfect.num_rows):
        b = int(perfect.base_domain[r])
        for d in range(perfect.num_domains):
            if d != b:
                out.append((b, int(perfect.entries[r, b]), d, int(perfect.entries[r, d]), int(perfect.labels[r])))
    return out


def overlap(learned, perfect):
    hits = 0
    pairs = perfect_pairs(perfect)
    for b, a, d, k, _ in pairs:
        for r in range(learned.num_rows):
            if learned.base_domain[r] == b and learned.entries[r, b] == a:
                hits += learned.entries[r, d] == k
    return 100.0 * hits / len(pairs)


def ranks(ds, reprs, perfect):
    out = []
    for b, a, d, k, c in perfect_pairs(perfect):
        cands = [i for i in range(len(ds.y[d])) if ds.y[d][i] == c]
        keyed = sorted(cands, key=lambda i: (float(np.sum((reprs[b][a] - reprs[d][i]) ** 2)), i))
        out.append(keyed.index(k))
    return out


def top10(ds, reprs, perfect):
    r = ranks(ds, reprs, perfect)
    return 100.0 * sum(v < 10 for v in r) / len(r)


def mean_rank(ds, reprs, perfect):
    r = ranks(ds, reprs, perfect)
    return sum(r) / len(r)


def random_fixture(seed, max_samples=50):
    """Small multi-domain dataset with shared objects and random representations.

    Integer-valued representations appear half the time to exercise tie-breaks.
    """
    r = np.random.default_rng(seed)
    k = int(r.integers(2, 5))
    c = int(r.integers(1, 4))
    per_class = int(r.integers(1, max(2, max_samples // (k * c)) + 1))
    while k * c * per_class > max_samples:
        per_class -= 1
    n_obj = c * per_class
    labels = np.repeat(np.arange(c), per_class)
    dim = int(r.integers(1, 4))
    xs, ys, oids, reprs = [], [], [], []
    for _ in range(k):
        p = r.permutation(n_obj)
        xs.append(np.zeros((n_obj, 1)))
        ys.append(labels[p])
        oids.append(p)
        rep = r.integers(-2, 3, size=(n_obj, dim)).astype(float) if r.random() < 0.5 else r.standard_normal((n_obj, dim))
        reprs.append(rep)
    ds = MultiDomainDataset(xs, ys, oids, [f"d{i}" for i in range(k)], max(c, 1))
    return ds, reprs
