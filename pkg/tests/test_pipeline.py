import numpy as np
import pytest

from irdistill import data as D
from irdistill import pipeline as PL
from irdistill.checkpoint import Checkpoint
from irdistill.errors import ConfigurationError, ContractError
from irdistill.models import init_student

TINY = dict(n_scenes=30, label_fraction=0.2, teacher_epochs=2, student_epochs=2, eval_every=1)


@pytest.fixture(scope="module")
def tiny(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    cfg = PL.TrainConfig(**TINY, data_root=str(root))
    PL.prepare_data(cfg)
    train = D.Manifest.read(root / "train.tsv", root=root)
    val = D.Manifest.read(root / "val.tsv", root=root)
    return cfg, root, train, val


@pytest.fixture(scope="module")
def teacher_run(tiny):
    cfg, _, train, val = tiny
    return PL.train_teacher(cfg, train, val)


# --- configuration --------------------------------------------------------
def test_config_file_and_overrides(tmp_path):
    (tmp_path / "c.cfg").write_text("# desk run\nteacher_epochs = 3\nlr = 5e-4\nexperts = PI+HP\n")
    cfg = PL.load_config(tmp_path / "c.cfg", {"lr": 2e-3, "seed": None})
    assert (cfg.teacher_epochs, cfg.lr, cfg.expert_names) == (3, 2e-3, ("pimdo", "hplsm"))
    assert PL.TrainConfig(**PL.parse_config_text(cfg.to_text())) == cfg


@pytest.mark.parametrize("text", ["nonsense = 1\n", "lr 0.1\n", "teacher_epochs = many\n"])
def test_config_errors(tmp_path, text):
    (tmp_path / "c.cfg").write_text(text)
    with pytest.raises(ConfigurationError):
        PL.load_config(tmp_path / "c.cfg")


@pytest.mark.parametrize("kw", [dict(insertion="middle"), dict(experts="PI+XX"), dict(teacher_epochs=0)])
def test_invalid_config(kw):
    with pytest.raises(ConfigurationError):
        PL.TrainConfig(**kw)


def test_parse_experts():
    assert PL.parse_experts("TG+PI") == ("pimdo", "tgds")
    assert PL.parse_experts("spd") == ("spd",)
    with pytest.raises(ContractError):
        PL.parse_experts("")


def test_config_hash_tracks_values():
    assert PL.TrainConfig().hash() == PL.TrainConfig().hash()
    assert PL.TrainConfig().hash() != PL.TrainConfig(lr=2e-3).hash()


# --- data preparation -----------------------------------------------------
def test_prepared_splits(tiny):
    _, root, train, val = tiny
    assert len(train) + len(val) == 30 and len(val) == 6
    assert len(train.labeled) == round(0.2 * len(train))
    assert set(train.ids).isdisjoint(val.ids)
    assert (root / "images").is_dir() and (root / "masks").is_dir()


# --- stage one ------------------------------------------------------------
def test_teacher_log_and_frozen_encoder(tiny, teacher_run):
    cfg, *_ = tiny
    rows = teacher_run.log.rows
    assert [r["epoch"] for r in rows] == [1, 2]
    for r in rows:
        parts = {"bce": r["L_bce"], "dice": r["L_dice"], "sparse": r["L_sparse"], "topo": r["L_topo"]}
        assert abs(r["L_total"] - PL.LS.weighted_total(parts, cfg.loss_weights())) <= 1e-6
        assert 0.0 <= r["val_mIoU"] <= 1.0
    enc = PL.load_teacher(teacher_run.checkpoint).encoder
    assert enc.checksum() == PL.build_teacher(cfg).encoder.checksum()


def test_teacher_is_deterministic(tiny, teacher_run):
    cfg, _, train, val = tiny
    again = PL.train_teacher(cfg, train, val)
    assert again.log.rows[-1]["L_total"] == teacher_run.log.rows[-1]["L_total"]
    assert again.checkpoint.to_bytes() == teacher_run.checkpoint.to_bytes()


def test_teacher_checkpoint_roundtrip(tiny, teacher_run, tmp_path):
    _, _, _, val = tiny
    teacher_run.checkpoint.save(tmp_path / "t.ckpt")
    back = Checkpoint.load(tmp_path / "t.ckpt")
    assert back.epoch == 2 and back.rng_state is not None
    images, _, _ = D.load_arrays(val)
    np.testing.assert_array_equal(PL.predict(back, images), PL.predict(teacher_run.checkpoint, images))


def test_teacher_needs_labeled_rows(tiny):
    cfg, _, train, _ = tiny
    unlabeled_only = D.Manifest(train.unlabeled, root=train.root)
    with pytest.raises(ContractError):
        PL.train_teacher(cfg, unlabeled_only)


def test_teacher_refuses_val_overlap(tiny):
    cfg, _, train, _ = tiny
    leaky = D.Manifest(train.labeled[:2], root=train.root)
    with pytest.raises(ContractError):
        PL.train_teacher(cfg, train, leaky)


def test_no_adapter_teacher(tiny):
    cfg, _, train, _ = tiny
    res = PL.train_teacher(cfg.replace(insertion="none", teacher_epochs=1), train)
    assert not any(k.startswith("layer") for k in res.checkpoint.blocks)
    assert res.log.rows[0]["L_sparse"] == 0.0


def test_single_expert_routing_weight_is_one(tiny):
    cfg, _, train, _ = tiny
    res = PL.train_teacher(cfg.replace(experts="HP", teacher_epochs=1), train)
    teacher = PL.load_teacher(res.checkpoint)
    images, _, _ = D.load_arrays(train, train.labeled, mode="teacher")
    tokens = PL.encode_prefix(teacher.encoder, images[:2].astype(np.float32), teacher.start_layer)
    _, records = PL.teacher_logits(teacher, tokens)
    for rec in records:
        np.testing.assert_allclose(rec.weights.data, 1.0)


# --- pseudo labels --------------------------------------------------------
def test_pseudo_labels(tiny, teacher_run, tmp_path):
    _, _, train, _ = tiny
    a = PL.generate_pseudo_labels(teacher_run.checkpoint, train, tmp_path / "a")
    PL.generate_pseudo_labels(teacher_run.checkpoint, train, tmp_path / "b")
    assert len(a) == len(train) and a.ids == train.ids
    assert all(e.provenance == "pseudo" and not D.is_gt_path(e.mask) for e in a.entries)
    for pid in train.ids:
        assert (tmp_path / "a" / "pseudo" / f"{pid}.pgm").read_bytes() == \
               (tmp_path / "b" / "pseudo" / f"{pid}.pgm").read_bytes()


# --- stage two ------------------------------------------------------------
@pytest.fixture(scope="module")
def pseudo_manifest(tiny, teacher_run, tmp_path_factory):
    _, _, train, _ = tiny
    out = tmp_path_factory.mktemp("pseudo")
    m = PL.generate_pseudo_labels(teacher_run.checkpoint, train, out)
    m.write(out / "pseudo.tsv")
    return D.Manifest.read(out / "pseudo.tsv", root=train.root)


def test_pseudo_student_never_reads_ground_truth(tiny, pseudo_manifest, monkeypatch):
    cfg, *_ = tiny
    seen = []
    real = D.read_mask

    def spy(path):
        seen.append(str(path))
        return real(path)
    monkeypatch.setattr(D, "read_mask", spy)
    PL.train_student(cfg, pseudo_manifest, "pseudo")
    assert len(seen) == len(pseudo_manifest)
    assert not [p for p in seen if "/masks/" in p.replace("\\", "/")]


def test_pseudo_mode_rejects_ground_truth_manifest(tiny):
    cfg, _, train, _ = tiny
    with pytest.raises(ContractError):
        PL.train_student(cfg, train, "pseudo")


def test_student_arms_and_determinism(tiny, pseudo_manifest):
    cfg, _, train, val = tiny
    a = PL.train_student(cfg, pseudo_manifest, "pseudo", val)
    b = PL.train_student(cfg, pseudo_manifest, "pseudo", val)
    assert a.checkpoint.to_bytes() == b.checkpoint.to_bytes()
    assert a.log.rows[-1]["L_sparse"] == 0.0 and a.log.rows[-1]["L_topo"] == 0.0
    direct = PL.train_student(cfg.replace(student_epochs=1), train, "labeled")
    assert direct.checkpoint.epoch == 1
    with pytest.raises(ConfigurationError):
        PL.train_student(cfg, train, "teacher")


# --- evaluation -----------------------------------------------------------
def test_zero_head_detects_nothing(tiny):
    _, _, _, val = tiny
    s = init_student(0, 16)
    s.head_w.data[:] = 0
    s.head_b.data[:] = -10
    rep = PL.evaluate_model(PL.student_checkpoint(s), val)
    assert rep.Pd == 0.0 and rep.Fa == 0.0 and rep.mIoU == 0.0


def test_ground_truth_scores_perfectly(tiny, monkeypatch):
    _, _, _, val = tiny
    _, masks, _ = D.load_arrays(val)
    monkeypatch.setattr(PL, "predict", lambda ck, images: masks.astype(float))
    rep = PL.evaluate_model(Checkpoint(), val)
    assert (rep.mIoU, rep.Pd, rep.Fa) == (1.0, 1.0, 0.0)


def test_evaluation_refuses_training_ids(tiny, teacher_run, tmp_path):
    _, _, train, val = tiny
    with pytest.raises(ContractError):
        PL.evaluate_model(teacher_run.checkpoint, val, train_ids=val.ids[:1])
    PL.evaluate_model(teacher_run.checkpoint, val, train_ids=train.ids, csv_path=tmp_path / "m.csv", run_id="t")
    PL.evaluate_model(teacher_run.checkpoint, val, csv_path=tmp_path / "m.csv", run_id="u")
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert len(lines) == 3 and lines[1].startswith("t,val,") and lines[2].startswith("u,val,")


# --- ablation -------------------------------------------------------------
def test_ablation_rows(tiny, tmp_path):
    cfg, root, _, _ = tiny
    rows = PL.run_ablation("lambda_sparse", cfg.replace(teacher_epochs=1), root,
                           values=(0.001, 0.08), csv_path=tmp_path / "a.csv")
    assert [r["setting"] for r in rows] == ["0.001", "0.08"]
    assert all(r["layers"] == f"{PL.DEPTH - 1}+{PL.DEPTH}" for r in rows)
    header = (tmp_path / "a.csv").read_text().splitlines()[0]
    assert header == ",".join(PL.ABLATION_FIELDS)
    with pytest.raises(ConfigurationError):
        PL.run_ablation("depth", cfg, root)


def test_runlog_csv():
    log = PL.RunLog()
    log.append(epoch=1, L_total=0.5)
    text = log.to_csv()
    assert text.splitlines() == [",".join(PL.LOG_FIELDS), "1,0.5" + "," * (len(PL.LOG_FIELDS) - 2)]
