import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from irdistill import data as D
from irdistill.errors import CompletenessError, ConfigurationError, ContractError, FormatError, GenerationError


# --- scenes ---------------------------------------------------------------
def test_scene_deterministic():
    a = D.generate_scene(D.SceneParams(seed=5))
    b = D.generate_scene(D.SceneParams(seed=5))
    assert a.image.tobytes() == b.image.tobytes() and a.mask.tobytes() == b.mask.tobytes()


@pytest.mark.parametrize("seed", range(10))
def test_radius_two_popcount(seed):
    s = D.generate_scene(D.SceneParams(n_targets=1, target_radius=2.0, seed=seed))
    assert 9 <= int(s.mask.sum()) <= 21


def test_clean_scene_peaks_at_target():
    s = D.generate_scene(D.SceneParams(n_targets=1, noise_sigma=0.0, clutter_amplitude=0.0,
                                       clutter_edges=False, seed=3))
    cy, cx, _ = s.targets[0]
    assert np.unravel_index(np.argmax(s.image), s.image.shape) == (cy, cx)


def test_dataset_invariants():
    for s in D.generate_dataset(40, seed=1):
        assert s.image.min() >= 0 and s.image.max() <= 1
        assert set(np.unique(s.mask)) <= {0, 1}
        for i, (cy, cx, r) in enumerate(s.targets):
            assert r <= cy < 64 - r and r <= cx < 64 - r
            area = int(D.disk(64, cy, cx, r).sum())
            assert np.pi * 1 ** 2 <= area <= np.pi * 9 * 1.5
            for cy2, cx2, r2 in s.targets[i + 1:]:
                assert np.hypot(cy - cy2, cx - cx2) > r + r2
        union = np.zeros((64, 64), bool)
        for cy, cx, r in s.targets:
            union |= D.disk(64, cy, cx, r)
        assert np.array_equal(union, s.mask.astype(bool))


def test_placement_gives_up_after_attempt_budget(monkeypatch):
    # three radius-3 disks barely fit in 16 px; one attempt is not enough
    monkeypatch.setattr(D, "MAX_ATTEMPTS", 1)
    with pytest.raises(GenerationError):
        D.generate_scene(D.SceneParams(size=16, n_targets=3, target_radius=3.0, seed=0))


def test_invalid_scene_params():
    with pytest.raises(ConfigurationError):
        D.SceneParams(target_radius=(0.5, 2.0))


# --- PGM ------------------------------------------------------------------
def test_half_gray_quantizes_to_32768(tmp_path):
    D.write_image(tmp_path / "g.pgm", np.full((4, 5), 0.5))
    raw, maxval = D.read_pgm(tmp_path / "g.pgm")
    assert maxval == 65535 and np.all(raw == 32768)
    assert (tmp_path / "g.pgm").read_bytes()[:13] == b"P5\n5 4\n65535\n"


def test_sample_roundtrip(tmp_path):
    s = D.generate_dataset(1, seed=2)[0]
    back = D.sample_io_roundtrip(s, tmp_path)
    assert np.abs(back.image - s.image).max() <= 1 / 65535
    assert np.array_equal(back.mask, s.mask)


@settings(max_examples=30)
@given(arrays(np.uint16, st.tuples(st.integers(1, 6), st.integers(1, 6))))
def test_pgm_16bit_lossless(tmp_path_factory, values):
    path = tmp_path_factory.mktemp("pgm") / "v.pgm"
    D.write_pgm(path, values, 65535)
    back, _ = D.read_pgm(path)
    assert np.array_equal(back, values)


def test_mask_bytes(tmp_path):
    m = np.array([[0, 1], [1, 0]], np.uint8)
    D.write_mask(tmp_path / "m.pgm", m)
    assert (tmp_path / "m.pgm").read_bytes() == b"P5\n2 2\n255\n\x00\xff\xff\x00"
    assert np.array_equal(D.read_mask(tmp_path / "m.pgm"), m)


def test_truncated_file_reports_offset(tmp_path):
    D.write_image(tmp_path / "t.pgm", np.zeros((4, 4)))
    buf = (tmp_path / "t.pgm").read_bytes()
    (tmp_path / "t.pgm").write_bytes(buf[:-3])
    with pytest.raises(FormatError) as exc:
        D.read_image(tmp_path / "t.pgm")
    assert exc.value.offset == len(buf) - 3


@pytest.mark.parametrize("blob,offset", [(b"P2\n1 1\n255\n\x00", 0), (b"P5\n1 x\n255\n\x00", 4), (b"P5\n1 1\n", 7)])
def test_malformed_headers(tmp_path, blob, offset):
    (tmp_path / "b.pgm").write_bytes(blob)
    with pytest.raises(FormatError) as exc:
        D.read_pgm(tmp_path / "b.pgm")
    assert exc.value.offset == offset


def test_header_comments_accepted(tmp_path):
    (tmp_path / "c.pgm").write_bytes(b"P5\n# made by hand\n2 1\n255\n\x07\x09")
    back, _ = D.read_pgm(tmp_path / "c.pgm")
    assert back.tolist() == [[7, 9]]


# --- manifests ------------------------------------------------------------
def ids(n):
    return [D.sample_id(i) for i in range(n)]


def test_split_sizes():
    m = D.make_splits(ids(400), 0.10, split_seed=0)
    assert (len(m.labeled), len(m.unlabeled)) == (40, 360)
    assert not set(m.ids) - {e.id for e in m.labeled + m.unlabeled}
    assert {e.id for e in m.labeled}.isdisjoint(e.id for e in m.unlabeled)
    assert len(D.make_splits(ids(320), 0.10).labeled) == 32


def test_full_fraction_labels_everything():
    assert len(D.make_splits(ids(50), 1.0).labeled) == 50


def test_split_byte_determinism(tmp_path):
    D.make_splits(ids(100), 0.1, split_seed=9).write(tmp_path / "a.tsv")
    D.make_splits(ids(100), 0.1, split_seed=9).write(tmp_path / "b.tsv")
    assert (tmp_path / "a.tsv").read_bytes() == (tmp_path / "b.tsv").read_bytes()
    assert D.make_splits(ids(100), 0.1, split_seed=10).to_text() != (tmp_path / "a.tsv").read_text()


def test_split_errors():
    with pytest.raises(ContractError):
        D.make_splits([], 0.1)
    with pytest.raises(ConfigurationError):
        D.make_splits(ids(5), 0.0)


def test_manifest_text_roundtrip(tmp_path):
    m = D.make_splits(ids(12), 0.25, split_seed=3)
    m.write(tmp_path / "m.tsv")
    back = D.Manifest.read(tmp_path / "m.tsv")
    assert back.entries == m.entries and back.split_seed == 3 and back.label_fraction == 0.25
    assert (tmp_path / "m.tsv").read_text().splitlines()[1] == "s0000\timages/s0000.pgm\tmasks/s0000.pgm\t" + m.entries[0].provenance


def test_holdout_disjoint_and_sized():
    train, val = D.holdout_split(ids(400), 0.2, seed=0)
    assert len(val) == 80 and set(train).isdisjoint(val) and len(train) + len(val) == 400


# --- pseudo dataset and loader isolation ---------------------------------
def test_pseudo_manifest_covers_everything():
    m = D.make_splits(ids(400), 0.1)
    p = D.build_pseudo_dataset(m, {i: f"pseudo/{i}.pgm" for i in m.ids})
    assert len(p) == 400
    assert all(e.provenance == "pseudo" and e.mask.startswith("pseudo/") for e in p.entries)
    labeled = {e.id for e in m.labeled}
    assert all(not D.is_gt_path(e.mask) for e in p.entries if e.id in labeled)


def test_pseudo_manifest_missing_ids():
    m = D.make_splits(ids(5), 0.2)
    with pytest.raises(CompletenessError) as exc:
        D.build_pseudo_dataset(m, {"s0000": "pseudo/s0000.pgm"})
    assert "s0004" in str(exc.value)


def test_pseudo_manifest_refuses_gt_paths():
    m = D.make_splits(ids(2), 0.5)
    with pytest.raises(ContractError):
        D.build_pseudo_dataset(m, {i: f"masks/{i}.pgm" for i in m.ids})


def test_loader_rejects_gt_row_in_pseudo_mode():
    bad = D.ManifestEntry("s0000", "images/s0000.pgm", "masks/s0000.pgm", "pseudo")
    with pytest.raises(ContractError):
        D.check_entries([bad], "pseudo")
    with pytest.raises(ContractError):
        D.check_entries([D.ManifestEntry("s0001", "images/s0001.pgm", "pseudo/s0001.pgm", "labeled")], "pseudo")


def test_teacher_mode_reads_labeled_only():
    with pytest.raises(ContractError):
        D.check_entries([D.ManifestEntry("s0", "images/s0.pgm", "masks/s0.pgm", "unlabeled")], "teacher")


def test_load_arrays(tmp_path):
    samples = D.generate_dataset(4, seed=3)
    D.write_dataset(samples, tmp_path)
    m = D.make_splits(samples, 1.0, root=tmp_path)
    images, masks, got = D.load_arrays(m)
    assert images.shape == (4, 1, 64, 64) and masks.dtype == np.uint8 and got == m.ids
    (tmp_path / "images" / "s0002.pgm").unlink()
    with pytest.raises(FileNotFoundError, match="s0002"):
        D.load_arrays(m)
