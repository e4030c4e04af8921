import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cmdg.datagen import (
    HEADER,
    GlyphConfig,
    MultiDomainDataset,
    ScmConfig,
    generate_glyphs,
    generate_scm,
    glyph_objects,
    interior_mask,
    load_dataset,
    read_matrix,
    rotate_image,
    save_dataset,
    split,
    write_matrix,
)


def _pairwise_sq(a, b):
    return ((a[:, None, :] - b[None, :, :]) ** 2).sum(-1)


def test_counts_and_shared_object_ids():
    ds = generate_scm(ScmConfig(num_domains=2, num_classes=2, objects_per_class_per_domain=5))
    assert ds.sizes() == [10, 10]
    assert len(np.unique(ds.object_ids[0])) == 10
    np.testing.assert_array_equal(ds.object_ids[0], ds.object_ids[1])


def test_zero_jitter_matched_xc_identical():
    ds = generate_scm(ScmConfig(objects_per_class_per_domain=10, object_jitter=0.0))
    for d in range(1, ds.num_domains):
        np.testing.assert_array_equal(ds.xc[0], ds.xc[d])


def test_jitter_moves_xc():
    ds = generate_scm(ScmConfig(objects_per_class_per_domain=10, object_jitter=0.3))
    assert not np.allclose(ds.xc[0], ds.xc[1])


def test_delta_c_below_delta_a_with_large_shift():
    ds = generate_scm(ScmConfig(objects_per_class_per_domain=20, domain_shift_scale=40.0, object_jitter=0.05))
    dc, da = 0.0, np.inf
    for i in range(ds.num_domains):
        for j in range(ds.num_domains):
            if i == j:
                continue
            for c in range(ds.num_classes):
                a, b = ds.y[i] == c, ds.y[j] == c
                dc = max(dc, np.sqrt(_pairwise_sq(ds.xc[i][a], ds.xc[j][b]).max()))
                da = min(da, np.sqrt(_pairwise_sq(ds.xa[i][a], ds.xa[j][b]).min()))
    assert dc < da


def test_label_noise_is_per_object():
    ds = generate_scm(ScmConfig(objects_per_class_per_domain=50, label_noise=0.3, seed=2))
    for d in range(1, ds.num_domains):
        np.testing.assert_array_equal(ds.y[0], ds.y[d])
    clean = generate_scm(ScmConfig(objects_per_class_per_domain=50, seed=2))
    flipped = np.mean(ds.y[0] != clean.y[0])
    assert 0.15 < flipped < 0.45


def _pure_spurious(**kw):
    # No noise, offsets or object term in x_a: it holds the spurious shift alone.
    base = dict(objects_per_class_per_domain=30, domain_shift_scale=0.0, sigma_xa=0.0, xa_object_scale=0.0, spurious_corr=1.0)
    return ScmConfig(**{**base, **kw})


def test_spurious_shift_only_in_training_domains():
    ds = generate_scm(_pure_spurious(num_classes=3))
    assert np.all(ds.xa[-1] == 0)
    for d in range(4):
        moved = np.linalg.norm(ds.xa[d], axis=1) > 0
        np.testing.assert_array_equal(moved, ds.y[d] < 2)


def test_spurious_strength_decreases_across_training_domains():
    cfg = _pure_spurious(spurious_min=0.25)
    ds = generate_scm(cfg)
    shift = [np.linalg.norm(ds.xa[d][ds.y[d] == 0], axis=1) for d in range(4)]
    want = cfg.spurious_scale * np.linspace(1.0, 0.25, 4)
    for s, w in zip(shift, want):
        np.testing.assert_allclose(s, w, rtol=1e-12)


def test_spurious_jitter_bounds():
    cfg = _pure_spurious(spurious_jitter=0.5)
    ds = generate_scm(cfg)
    s = np.linalg.norm(ds.xa[0][ds.y[0] == 0], axis=1)
    assert s.min() >= 0.5 * cfg.spurious_scale and s.max() <= 1.5 * cfg.spurious_scale and s.std() > 0


def test_partial_spurious_correlation():
    ds = generate_scm(_pure_spurious(spurious_corr=0.5, objects_per_class_per_domain=400))
    frac = np.mean(np.linalg.norm(ds.xa[0][ds.y[0] == 0], axis=1) > 0)
    assert 0.4 < frac < 0.6


@pytest.mark.parametrize(
    "bad",
    [
        {"num_domains": 0},
        {"label_noise": 1.5},
        {"spurious_corr": -0.1},
        {"spurious_jitter": 2.0},
        {"shift_geometry": "ring"},
        {"sigma_o": -1.0},
    ],
)
def test_scm_config_validation(bad):
    with pytest.raises(ValueError):
        ScmConfig(**bad)


def test_generation_is_deterministic():
    a = generate_scm(ScmConfig(objects_per_class_per_domain=10, seed=5))
    b = generate_scm(ScmConfig(objects_per_class_per_domain=10, seed=5))
    for u, v in zip(a.x, b.x):
        np.testing.assert_array_equal(u, v)


@settings(max_examples=15, deadline=None)
@given(
    k=st.integers(2, 5),
    c=st.integers(2, 4),
    n=st.integers(1, 6),
    nonlinear=st.booleans(),
    geometry=st.sampled_from(["line", "orthogonal"]),
    seed=st.integers(0, 1000),
)
def test_scm_structure_invariants(k, c, n, nonlinear, geometry, seed):
    ds = generate_scm(
        ScmConfig(num_domains=k, num_classes=c, objects_per_class_per_domain=n, nonlinear=nonlinear, shift_geometry=geometry, seed=seed)
    )
    assert ds.num_domains == k and ds.sizes() == [c * n] * k
    for d in range(k):
        np.testing.assert_array_equal(ds.object_ids[d], ds.object_ids[0])
        np.testing.assert_array_equal(ds.y[d], ds.y[0])
        assert ds.x[d].shape == (c * n, 24)
        assert np.all(np.isfinite(ds.x[d]))
        if nonlinear:
            assert np.abs(ds.x[d]).max() <= 1.0


def test_glyph_angle_zero_equals_template():
    cfg = GlyphConfig(angles=(0.0, 30.0), samples_per_domain=12)
    images, labels = glyph_objects(cfg)
    ds = generate_glyphs(cfg)
    np.testing.assert_array_equal(ds.x[0], images.reshape(12, -1))
    np.testing.assert_array_equal(ds.y[0], labels)


def test_glyph_full_turn_identity():
    images, _ = glyph_objects(GlyphConfig(samples_per_domain=8))
    for im in images:
        np.testing.assert_allclose(rotate_image(im, 360.0), rotate_image(im, 0.0), atol=1e-6)


def test_glyph_rotation_round_trip():
    # Measured worst case on 200 objects over 8 angles is about 0.13.
    images, _ = glyph_objects(GlyphConfig(samples_per_domain=40, seed=4))
    mask = interior_mask(16)
    for th in (15.0, 45.0, 75.0, 90.0):
        for im in images:
            back = rotate_image(rotate_image(im, th), -th)
            assert np.abs(back - im)[mask].max() < 0.15


def test_glyph_domains_share_objects():
    ds = generate_glyphs(GlyphConfig(samples_per_domain=20, pixel_noise=0.05))
    assert ds.domain_names == ["rot0", "rot15", "rot30", "rot45", "rot60", "rot75", "rot90"]
    for d in range(ds.num_domains):
        np.testing.assert_array_equal(ds.object_ids[d], np.arange(20))
        np.testing.assert_array_equal(ds.y[d], ds.y[0])


def test_glyph_classes_balanced():
    ds = generate_glyphs(GlyphConfig(samples_per_domain=100))
    assert np.bincount(ds.y[0]).tolist() == [25, 25, 25, 25]


def test_glyph_config_validation():
    with pytest.raises(ValueError):
        GlyphConfig(angles=(0.0, 0.0))
    with pytest.raises(ValueError):
        GlyphConfig(num_classes=99)
    with pytest.raises(ValueError):
        GlyphConfig(samples_per_domain=2, num_classes=4)


def test_split_val_zero_is_empty():
    ds = generate_scm(ScmConfig(objects_per_class_per_domain=10))
    tr, va, te = split(ds, ds.domain_names[:4], ds.domain_names[4:], 0.0)
    assert sum(va.sizes()) == 0 and tr.sizes() == [20] * 4


def test_split_shapes_and_fraction():
    ds = generate_scm(ScmConfig(objects_per_class_per_domain=50))
    tr, va, te = split(ds, ds.domain_names[:4], ds.domain_names[4:], 0.2, seed=1)
    assert tr.num_domains == va.num_domains == 4 and te.num_domains == 1
    assert va.sizes() == [20] * 4 and tr.sizes() == [80] * 4
    # Object-level split: validation objects never appear in training.
    assert not set(va.object_ids[0]) & set(tr.object_ids[0])
    for d in range(4):
        np.testing.assert_array_equal(va.object_ids[d], va.object_ids[0])
    assert np.bincount(va.y[0]).tolist() == [10, 10]


def test_split_without_objects_is_per_row():
    ds = generate_scm(ScmConfig(objects_per_class_per_domain=10))
    anon = MultiDomainDataset(ds.x, ds.y, [np.full(20, -1)] * 5, ds.domain_names, 2)
    tr, va, _ = split(anon, anon.domain_names[:2], [], 0.25, seed=0)
    assert va.sizes() == [5, 5] and tr.sizes() == [15, 15]


def test_split_errors():
    ds = generate_scm(ScmConfig(objects_per_class_per_domain=5))
    with pytest.raises(KeyError):
        split(ds, ["d0", "nope"], ["d4"])
    with pytest.raises(ValueError):
        split(ds, ["d0", "d1"], ["d1"])
    with pytest.raises(ValueError):
        split(ds, ["d0"], ["d4"], val_fraction=1.0)


def test_dataset_validation():
    with pytest.raises(ValueError):
        MultiDomainDataset([np.zeros((2, 1))], [np.array([0, 3])], [np.arange(2)], ["a"], 2)
    with pytest.raises(ValueError):
        MultiDomainDataset([np.zeros((2, 1))], [np.array([0])], [np.arange(2)], ["a"], 2)


def test_matrix_round_trip(tmp_path, rng):
    a = rng.standard_normal((7, 3)).astype(np.float32)
    write_matrix(tmp_path / "m.bin", a)
    raw = (tmp_path / "m.bin").read_bytes()
    assert len(raw) == HEADER.size + a.size * 4 and HEADER.size == 16
    np.testing.assert_array_equal(read_matrix(tmp_path / "m.bin"), a)


def test_matrix_bad_magic(tmp_path):
    (tmp_path / "m.bin").write_bytes(b"NOTAMAGC" + b"\0" * 8)
    with pytest.raises(ValueError):
        read_matrix(tmp_path / "m.bin")


def test_matrix_truncated(tmp_path):
    write_matrix(tmp_path / "m.bin", np.ones((4, 4)))
    data = (tmp_path / "m.bin").read_bytes()
    (tmp_path / "m.bin").write_bytes(data[:-4])
    with pytest.raises(ValueError):
        read_matrix(tmp_path / "m.bin")


def test_dataset_round_trip(tmp_path):
    ds = generate_scm(ScmConfig(objects_per_class_per_domain=6, seed=9))
    save_dataset(ds, tmp_path / "ds")
    back = load_dataset(tmp_path / "ds")
    assert back.domain_names == ds.domain_names and back.num_classes == ds.num_classes
    for d in range(ds.num_domains):
        np.testing.assert_allclose(back.x[d], ds.x[d].astype(np.float32))
        np.testing.assert_allclose(back.xc[d], ds.xc[d].astype(np.float32))
        np.testing.assert_array_equal(back.y[d], ds.y[d])
        np.testing.assert_array_equal(back.object_ids[d], ds.object_ids[d])
    assert back.config["kind"] == "scm"
