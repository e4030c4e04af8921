"""Multi-domain synthetic data with known objects.

Two families:

* ``generate_scm``: linear-Gaussian instance of the object / causal-feature /
  domain-feature structural model, with optional label-dependent spurious
  shift in the training domains.
* ``generate_glyphs``: procedural stroke glyphs rotated per domain, the
  rotated-digits construction without the external dataset.

Every object appears exactly once in every domain, so ``object_ids`` give
the ground-truth cross-domain matches.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"CMDGMAT\x00"
HEADER = struct.Struct("<8sII")  # magic, rows, cols -> 16 bytes


@dataclass
class MultiDomainDataset:
    x: list[np.ndarray]
    y: list[np.ndarray]
    object_ids: list[np.ndarray]
    domain_names: list[str]
    num_classes: int
    xc: list[np.ndarray] | None = None
    xa: list[np.ndarray] | None = None
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        k = len(self.domain_names)
        if not (len(self.x) == len(self.y) == len(self.object_ids) == k):
            raise ValueError("per-domain arrays must have one entry per domain name")
        if len(set(self.domain_names)) != k:
            raise ValueError("domain names must be unique")
        for d in range(k):
            n = len(self.y[d])
            if self.x[d].shape[0] != n or len(self.object_ids[d]) != n:
                raise ValueError(f"domain {self.domain_names[d]!r}: row counts disagree")
            if n and (self.y[d].min() < 0 or self.y[d].max() >= self.num_classes):
                raise ValueError(f"domain {self.domain_names[d]!r}: labels outside [0, {self.num_classes})")

    @property
    def num_domains(self) -> int:
        return len(self.domain_names)

    @property
    def input_dim(self) -> int:
        return self.x[0].shape[1]

    def sizes(self) -> list[int]:
        return [len(v) for v in self.y]

    def offsets(self) -> np.ndarray:
        return np.r_[0, np.cumsum(self.sizes())]

    def flat(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Stack all domains: ``(x, y, domain_index)``."""
        dom = np.concatenate([np.full(n, d) for d, n in enumerate(self.sizes())]).astype(int)
        return np.concatenate(self.x), np.concatenate(self.y), dom

    def has_objects(self) -> bool:
        return all(len(o) == 0 or o.min() >= 0 for o in self.object_ids)

    def domain_index(self, name: str) -> int:
        try:
            return self.domain_names.index(name)
        except ValueError:
            raise KeyError(f"unknown domain {name!r}; have {self.domain_names}") from None

    def select(self, domains: list[str], rows: list[np.ndarray] | None = None) -> "MultiDomainDataset":
        """Sub-dataset over the named domains, optionally restricted to row indices."""
        idx = [self.domain_index(n) for n in domains]
        if rows is None:
            rows = [np.arange(len(self.y[d])) for d in idx]
        return MultiDomainDataset(
            x=[self.x[d][r] for d, r in zip(idx, rows)],
            y=[self.y[d][r] for d, r in zip(idx, rows)],
            object_ids=[self.object_ids[d][r] for d, r in zip(idx, rows)],
            domain_names=list(domains),
            num_classes=self.num_classes,
            xc=None if self.xc is None else [self.xc[d][r] for d, r in zip(idx, rows)],
            xa=None if self.xa is None else [self.xa[d][r] for d, r in zip(idx, rows)],
            config=self.config,
        )


# --------------------------------------------------------------------------- SCM


@dataclass
class ScmConfig:
    num_domains: int = 5
    num_classes: int = 2
    objects_per_class_per_domain: int = 100
    dim_o: int = 8
    dim_xc: int = 8
    dim_xa: int = 8
    dim_x: int = 24
    class_sep: float = 1.0
    sigma_o: float = 1.0
    sigma_xa: float = 0.5
    sigma_x: float = 0.1
    label_noise: float = 0.0
    domain_shift_scale: float = 20.0
    object_jitter: float = 0.0
    object_domain_shift: float = 0.2
    xa_object_scale: float = 0.1
    spurious_corr: float = 0.0
    spurious_scale: float = 6.0
    spurious_jitter: float = 0.0
    spurious_min: float = 0.5
    shift_geometry: str = "line"
    test_domains: tuple[int, ...] = (-1,)
    nonlinear: bool = False
    seed: int = 0

    def __post_init__(self):
        self.test_domains = tuple(int(t) for t in self.test_domains)
        for name in ("num_domains", "num_classes", "objects_per_class_per_domain", "dim_o", "dim_xc", "dim_xa", "dim_x"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("sigma_o", "sigma_xa", "sigma_x", "label_noise", "object_jitter", "class_sep"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not 0 <= self.spurious_jitter <= 1:
            raise ValueError("spurious_jitter must be in [0, 1]")
        if not 0 <= self.spurious_corr <= 1:
            raise ValueError("spurious_corr must be in [0, 1]")
        if not 0 <= self.label_noise <= 1:
            raise ValueError("label_noise must be in [0, 1]")
        if self.shift_geometry not in ("line", "orthogonal"):
            raise ValueError("shift_geometry must be 'line' or 'orthogonal'")

    def test_domain_set(self) -> set[int]:
        return {t % self.num_domains for t in self.test_domains}


def generate_scm(cfg: ScmConfig) -> MultiDomainDataset:
    """Sample a dataset from the linear-Gaussian object model.

    Per object (class c, home domain h):
        o    = M[:, c] + mu_h + sigma_o * eps_o
        x_c  = G_c o                      (+ object_jitter * eta per rendering)
    Per rendering of that object in domain d:
        x_a  = xa_object_scale * A_d o + domain_shift_scale * s_d + sigma_xa * eps_xa
               (+ spurious_scale * r_d * j * u_y, see below)
        x    = W [x_c; x_a] + sigma_x * eps_x      (tanh applied if nonlinear)
    and y = c, replaced (once per object) by another class w.p. label_noise.

    ``s_d`` is ``d`` times a unit axis for the "line" geometry, or one of
    ``K`` orthonormal directions.  The spurious shift applies in training
    domains only, with probability ``spurious_corr``, and never to the last
    class, which stays the unshifted reference.  ``r_d`` falls linearly from
    1 to ``spurious_min`` across training domains and ``j`` is uniform in
    ``[1 - spurious_jitter, 1 + spurious_jitter]``.
    """
    rng = np.random.default_rng(cfg.seed)
    K, C, n = cfg.num_domains, cfg.num_classes, cfg.objects_per_class_per_domain
    n_obj = C * n

    M = cfg.class_sep * rng.standard_normal((cfg.dim_o, C))
    mu = cfg.object_domain_shift * rng.standard_normal((K, cfg.dim_o))
    Gc = rng.standard_normal((cfg.dim_xc, cfg.dim_o)) / np.sqrt(cfg.dim_o)
    A = rng.standard_normal((K, cfg.dim_xa, cfg.dim_o)) / np.sqrt(cfg.dim_o)
    # Domain offsets: evenly spaced along one axis ("line"), or mutually
    # orthogonal directions where the dimension allows ("orthogonal").
    if cfg.shift_geometry == "line":
        axis = _spread_directions(rng, 1, cfg.dim_xa)[0]
        s = np.arange(K)[:, None] * axis[None, :]
    else:
        s = _spread_directions(rng, K, cfg.dim_xa)
    U = _spread_directions(rng, C, cfg.dim_xa)
    test = cfg.test_domain_set()
    train = [d for d in range(K) if d not in test]
    # Spurious strength differs across training domains, from full down to spurious_min.
    r = np.zeros(K)
    if train:
        r[train] = np.linspace(1.0, cfg.spurious_min, len(train))
    W = rng.standard_normal((cfg.dim_x, cfg.dim_xc + cfg.dim_xa)) / np.sqrt(cfg.dim_xc + cfg.dim_xa)

    y_true = np.repeat(np.arange(C), n)
    home = np.arange(n_obj) % K
    o = M[:, y_true].T + mu[home] + cfg.sigma_o * rng.standard_normal((n_obj, cfg.dim_o))
    xc_clean = o @ Gc.T

    # Label noise is drawn per object so every rendering of an object shares its label.
    y = y_true.copy()
    flip = rng.random(n_obj) < cfg.label_noise
    if C > 1 and flip.any():
        y[flip] = (y[flip] + rng.integers(1, C, size=flip.sum())) % C

    xs, ys, oids, xcs, xas = [], [], [], [], []
    for d in range(K):
        xc = xc_clean + cfg.object_jitter * rng.standard_normal(xc_clean.shape)
        xa = (
            cfg.xa_object_scale * o @ A[d].T
            + cfg.domain_shift_scale * s[d]
            + cfg.sigma_xa * rng.standard_normal((n_obj, cfg.dim_xa))
        )
        if d not in test and cfg.spurious_corr > 0:
            # The last class is the unshifted reference, so a test domain
            # without the shift looks like that class along U.
            on = (rng.random(n_obj) < cfg.spurious_corr) & (y < C - 1)
            mag = cfg.spurious_scale * r[d] * rng.uniform(1 - cfg.spurious_jitter, 1 + cfg.spurious_jitter, size=on.sum())
            xa[on] += mag[:, None] * U[y[on]]
        x = np.hstack([xc, xa]) @ W.T + cfg.sigma_x * rng.standard_normal((n_obj, cfg.dim_x))
        if cfg.nonlinear:
            x = np.tanh(x)
        xs.append(x)
        ys.append(y.copy())
        oids.append(np.arange(n_obj))
        xcs.append(xc)
        xas.append(xa)
    names = [f"d{d}" for d in range(K)]
    echo = {"kind": "scm", **asdict(cfg)}
    echo["test_domains"] = list(cfg.test_domains)
    return MultiDomainDataset(xs, ys, oids, names, C, xc=xcs, xa=xas, config=echo)


def _spread_directions(rng: np.random.Generator, k: int, dim: int) -> np.ndarray:
    """``k`` unit vectors in ``dim`` dims; orthonormal when ``k <= dim``."""
    g = rng.standard_normal((dim, max(k, dim)))
    if k <= dim:
        q, _ = np.linalg.qr(g)
        return q[:, :k].T
    v = rng.standard_normal((k, dim))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


# ------------------------------------------------------------------------ glyphs

# Stroke templates in [-1, 1]^2 (x right, y down); one family per class.
_ARC = [(np.cos(a), np.sin(a)) for a in np.linspace(np.pi, 2 * np.pi, 7)]
GLYPH_TEMPLATES: list[list[tuple[tuple[float, float], tuple[float, float]]]] = [
    [((-0.8, 0.0), (0.8, 0.0))],  # bar
    [((-0.7, 0.0), (0.7, 0.0)), ((0.0, -0.7), (0.0, 0.7))],  # cross
    [(_ARC[i], _ARC[i + 1]) for i in range(len(_ARC) - 1)],  # arc
    [((-0.5, -0.7), (-0.5, 0.6)), ((-0.5, 0.6), (0.6, 0.6))],  # L
    [((-0.7, -0.6), (0.7, -0.6)), ((0.0, -0.6), (0.0, 0.7))],  # T
    [((-0.6, -0.6), (0.6, 0.6)), ((-0.6, 0.6), (0.6, -0.6))],  # X
    [((-0.6, -0.6), (0.6, -0.6)), ((0.6, -0.6), (0.6, 0.6)), ((0.6, 0.6), (-0.6, 0.6)), ((-0.6, 0.6), (-0.6, -0.6))],  # box
    [((0.0, -0.7), (0.7, 0.6)), ((0.7, 0.6), (-0.7, 0.6)), ((-0.7, 0.6), (0.0, -0.7))],  # triangle
]


@dataclass
class GlyphConfig:
    grid: int = 16
    angles: tuple[float, ...] = (0.0, 15.0, 30.0, 45.0, 60.0, 75.0, 90.0)
    num_classes: int = 4
    samples_per_domain: int = 500
    pixel_noise: float = 0.0
    endpoint_jitter: float = 0.12
    flourish: bool = True
    seed: int = 0

    def __post_init__(self):
        self.angles = tuple(float(a) for a in self.angles)
        if self.grid < 8:
            raise ValueError("grid must be >= 8")
        if len(set(self.angles)) != len(self.angles):
            raise ValueError("angles must be distinct per domain")
        if not 1 <= self.num_classes <= len(GLYPH_TEMPLATES):
            raise ValueError(f"num_classes must be in [1, {len(GLYPH_TEMPLATES)}]")
        if self.samples_per_domain < self.num_classes:
            raise ValueError("need at least one sample per class")
        if self.pixel_noise < 0:
            raise ValueError("pixel_noise must be >= 0")


def render_strokes(segments: np.ndarray, sigma: float, grid: int) -> np.ndarray:
    """Rasterize segments (pixel coordinates) as a smooth union of Gaussian strokes.

    Each segment contributes ``g = exp(-dist^2 / (2 sigma^2))`` and the image is
    ``1 - prod(1 - g)``.  The union has no creases where strokes meet, which
    keeps bilinear resampling error bounded.
    """
    ii, jj = np.mgrid[0:grid, 0:grid]
    p = np.stack([jj.ravel(), ii.ravel()], axis=1).astype(float)
    background = np.ones(len(p))
    for a, b in segments:
        ab = b - a
        t = np.clip(((p - a) @ ab) / max(ab @ ab, 1e-12), 0.0, 1.0)
        dist = np.linalg.norm(p - (a + t[:, None] * ab), axis=1)
        background *= 1.0 - np.exp(-(dist**2) / (2 * sigma**2))
    return (1.0 - background).reshape(grid, grid)


def rotation_matrix(angle_deg: float, grid: int) -> np.ndarray:
    """Dense (grid^2, grid^2) bilinear inverse-mapping rotation about the centre.

    ``rotated_flat = R @ image_flat``; samples outside the grid read as 0.
    """
    c = (grid - 1) / 2.0
    th = np.deg2rad(angle_deg)
    cos, sin = np.cos(th), np.sin(th)
    ii, jj = np.mgrid[0:grid, 0:grid]
    u, v = jj.ravel() - c, ii.ravel() - c
    su = cos * u + sin * v + c
    sv = -sin * u + cos * v + c
    j0 = np.floor(su).astype(int)
    i0 = np.floor(sv).astype(int)
    fu, fv = su - j0, sv - i0
    R = np.zeros((grid * grid, grid * grid))
    out = np.arange(grid * grid)
    for di, dj, w in ((0, 0, (1 - fv) * (1 - fu)), (0, 1, (1 - fv) * fu), (1, 0, fv * (1 - fu)), (1, 1, fv * fu)):
        si, sj = i0 + di, j0 + dj
        ok = (si >= 0) & (si < grid) & (sj >= 0) & (sj < grid) & (w != 0)
        np.add.at(R, (out[ok], si[ok] * grid + sj[ok]), w[ok])
    return R


def rotate_image(image: np.ndarray, angle_deg: float) -> np.ndarray:
    g = image.shape[0]
    return (rotation_matrix(angle_deg, g) @ image.ravel()).reshape(g, g)


def interior_mask(grid: int) -> np.ndarray:
    """Pixels whose rotations stay inside the grid (inscribed disc, 1.5 px margin)."""
    c = (grid - 1) / 2.0
    ii, jj = np.mgrid[0:grid, 0:grid]
    return np.hypot(ii - c, jj - c) <= grid / 2 - 1.5


def glyph_objects(cfg: GlyphConfig) -> tuple[np.ndarray, np.ndarray]:
    """Unrotated object images ``(n, grid, grid)`` and their classes."""
    rng = np.random.default_rng(cfg.seed)
    n, C, g = cfg.samples_per_domain, cfg.num_classes, cfg.grid
    labels = np.arange(n) % C
    rng.shuffle(labels)
    # Keep the glyph inside the inscribed disc so no rotation clips it.
    radius = g / 2 - 2.5
    c = (g - 1) / 2.0
    images = np.empty((n, g, g))
    for k in range(n):
        segs = np.asarray(GLYPH_TEMPLATES[labels[k]], dtype=float)
        scale = rng.uniform(0.6, 1.0)
        shift = rng.uniform(-0.15, 0.15, size=2)
        segs = scale * segs + shift + cfg.endpoint_jitter * rng.standard_normal(segs.shape)
        if cfg.flourish:
            start = rng.uniform(-0.6, 0.6, size=2)
            ang = rng.uniform(0, 2 * np.pi)
            end = start + rng.uniform(0.3, 0.6) * np.array([np.cos(ang), np.sin(ang)])
            segs = np.concatenate([segs, [[start, end]]])
        norms = np.linalg.norm(segs, axis=-1, keepdims=True)
        segs = np.where(norms > 1.0, segs / norms, segs)
        sigma = rng.uniform(1.6, 2.0)
        images[k] = render_strokes(segs * radius + c, sigma, g)
    return images, labels


def generate_glyphs(cfg: GlyphConfig) -> MultiDomainDataset:
    """Rotated-glyph domains: each object rendered once per angle.

    Domain ``d`` holds every object rotated by ``cfg.angles[d]`` plus
    Gaussian pixel noise; flattened pixels are the inputs.
    """
    images, labels = glyph_objects(cfg)
    rng = np.random.default_rng([cfg.seed, 1])
    n, g = len(images), cfg.grid
    flat = images.reshape(n, g * g)
    xs, ys, oids = [], [], []
    for angle in cfg.angles:
        x = flat @ rotation_matrix(angle, g).T
        if cfg.pixel_noise > 0:
            x = x + cfg.pixel_noise * rng.standard_normal(x.shape)
        xs.append(x)
        ys.append(labels.copy())
        oids.append(np.arange(n))
    names = [_angle_name(a) for a in cfg.angles]
    echo = {"kind": "glyphs", **asdict(cfg)}
    echo["angles"] = list(cfg.angles)
    return MultiDomainDataset(xs, ys, oids, names, cfg.num_classes, config=echo)


def _angle_name(a: float) -> str:
    return f"rot{int(a)}" if float(a).is_integer() else f"rot{a:g}"


# ------------------------------------------------------------------------- split


def split(
    ds: MultiDomainDataset,
    train_domains: list[str],
    test_domains: list[str],
    val_fraction: float = 0.2,
    seed: int = 0,
) -> tuple[MultiDomainDataset, MultiDomainDataset, MultiDomainDataset]:
    """Split into ``(train, val, test)``; validation comes from training domains only.

    When object ids are known, validation is chosen per object (stratified by
    class) so that every validation object is held out in all training
    domains and perfect matches stay available within each part.
    """
    train_domains, test_domains = list(train_domains), list(test_domains)
    if set(train_domains) & set(test_domains):
        raise ValueError("train and test domains overlap")
    for name in train_domains + test_domains:
        ds.domain_index(name)
    if not 0 <= val_fraction < 1:
        raise ValueError("val_fraction must be in [0, 1)")
    rng = np.random.default_rng(seed)
    tr_idx = [ds.domain_index(n) for n in train_domains]

    if ds.has_objects():
        first = tr_idx[0]
        obj, cls = ds.object_ids[first], ds.y[first]
        val_objs = []
        for c in range(ds.num_classes):
            pool = np.sort(obj[cls == c])
            k = int(round(val_fraction * len(pool)))
            val_objs.extend(rng.permutation(pool)[:k].tolist())
        val_objs = np.asarray(sorted(val_objs), dtype=int)
        val_rows = [np.flatnonzero(np.isin(ds.object_ids[d], val_objs)) for d in tr_idx]
    else:
        val_rows = []
        for d in tr_idx:
            n = len(ds.y[d])
            k = int(round(val_fraction * n))
            val_rows.append(np.sort(rng.permutation(n)[:k]))
    train_rows = [np.setdiff1d(np.arange(len(ds.y[d])), v) for d, v in zip(tr_idx, val_rows)]
    return (
        ds.select(train_domains, train_rows),
        ds.select(train_domains, val_rows),
        ds.select(test_domains),
    )


# ---------------------------------------------------------------- serialization


def write_matrix(path: str | Path, a: np.ndarray) -> None:
    """Little-endian float32, row-major, behind a 16-byte header (magic, rows, cols)."""
    a = np.asarray(a, dtype="<f4")
    if a.ndim != 2:
        raise ValueError("matrix must be 2-D")
    with open(path, "wb") as f:
        f.write(HEADER.pack(MAGIC, a.shape[0], a.shape[1]))
        f.write(np.ascontiguousarray(a).tobytes())


def read_matrix(path: str | Path) -> np.ndarray:
    with open(path, "rb") as f:
        magic, rows, cols = HEADER.unpack(f.read(HEADER.size))
        if magic != MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        data = np.frombuffer(f.read(), dtype="<f4")
    if data.size != rows * cols:
        raise ValueError(f"{path}: expected {rows * cols} values, found {data.size}")
    return data.reshape(rows, cols).astype(float)


def save_dataset(ds: MultiDomainDataset, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    domains = []
    for d, name in enumerate(ds.domain_names):
        entry = {"name": name, "x": f"{name}.x.bin", "labels": ds.y[d].tolist(), "object_ids": ds.object_ids[d].tolist()}
        write_matrix(out / entry["x"], ds.x[d])
        for key in ("xc", "xa"):
            arrs = getattr(ds, key)
            if arrs is not None:
                entry[key] = f"{name}.{key}.bin"
                write_matrix(out / entry[key], arrs[d])
        domains.append(entry)
    manifest = {"format": "cmdg-dataset/1", "num_classes": ds.num_classes, "domains": domains, "config": ds.config}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return out


def load_dataset(path: str | Path) -> MultiDomainDataset:
    root = Path(path)
    manifest = json.loads((root / "manifest.json").read_text())
    doms = manifest["domains"]
    extra = {}
    for key in ("xc", "xa"):
        if all(key in e for e in doms):
            extra[key] = [read_matrix(root / e[key]) for e in doms]
    return MultiDomainDataset(
        x=[read_matrix(root / e["x"]) for e in doms],
        y=[np.asarray(e["labels"], dtype=int) for e in doms],
        object_ids=[np.asarray(e["object_ids"], dtype=int) for e in doms],
        domain_names=[e["name"] for e in doms],
        num_classes=int(manifest["num_classes"]),
        config=manifest.get("config", {}),
        **extra,
    )
