import dataclasses
import math

import numpy as np
import pytest

import pointseq.autodiff as ad
import pointseq.training as training
from pointseq.autodiff import FiniteDiffReport, ParamSet
from pointseq.config import micro_config
from pointseq.data import build_manifest, generate_dataset
from pointseq.errors import ConfigError, DataError, NumericError
from pointseq.training import (
    AdamState,
    adam_update,
    apply_combo,
    cosine_lr,
    gradcheck_main,
    gradient_check_report,
    linear_probe,
    load_run_checkpoint,
    parse_toggle_combos,
    pretrain,
    probe_lr_schedule,
)

pytestmark = pytest.mark.filterwarnings("ignore::RuntimeWarning")


@pytest.fixture(scope="module")
def micro_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("microdata")
    manifest = generate_dataset(out, classes=2, per_class=6, T=12, N=32, seed=0)
    return out, manifest


def micro_cfg(**overrides):
    cfg = micro_config()
    cfg.epochs = 1
    for key, value in overrides.items():
        setattr(cfg, key, value)
    cfg.validate()
    return cfg


# ---------------------------------------------------------------------------
# schedules and optimizer
# ---------------------------------------------------------------------------

def test_cosine_lr_endpoints():
    total = 200
    assert cosine_lr(0, total, 8e-4) == pytest.approx(8e-4, abs=1e-18)
    assert cosine_lr(total - 1, total, 8e-4) <= 1e-6 + 1e-12
    mid = cosine_lr(total // 2, total, 8e-4)
    assert 1e-6 < mid < 8e-4


def test_cosine_lr_single_step():
    assert cosine_lr(0, 1, 5e-3) == 5e-3


def test_probe_schedule_warmup_then_cosine():
    lrs = [probe_lr_schedule(e, 30, 0.01, warmup=10) for e in range(30)]
    assert lrs[0] == pytest.approx(0.001)
    assert lrs[9] == pytest.approx(0.01)
    assert lrs[10] == pytest.approx(0.01)
    assert lrs[-1] < lrs[10]


def test_adam_converges_on_quadratic():
    ps = ParamSet()
    ps.add("x", np.array([5.0, -3.0], dtype=np.float32))
    state = AdamState()
    for _ in range(400):
        grads = {"x": 2.0 * ps.value("x")}
        adam_update(ps, grads, state, lr=0.05)
    np.testing.assert_allclose(ps.value("x"), np.zeros(2), atol=1e-2)


def test_adam_clip_scales_gradient():
    ps = ParamSet()
    ps.add("x", np.array([0.0]))
    s1, s2 = AdamState(), AdamState()
    ps2 = ps.copy()
    adam_update(ps, {"x": np.array([100.0])}, s1, lr=0.1, clip_grad=1.0)
    adam_update(ps2, {"x": np.array([1.0])}, s2, lr=0.1, clip_grad=0.0)
    np.testing.assert_allclose(ps.value("x"), ps2.value("x"), atol=1e-12)


# ---------------------------------------------------------------------------
# pretraining loop
# ---------------------------------------------------------------------------

def test_pretrain_runs_and_is_deterministic(micro_dataset, tmp_path):
    _, manifest = micro_dataset
    cfg = micro_cfg()
    ckpt1, rows1 = pretrain(cfg, manifest, tmp_path / "a")
    ckpt2, rows2 = pretrain(cfg, manifest, tmp_path / "b")
    assert len(rows1) == cfg.epochs * (10 // cfg.batch)
    strip = lambda rows: [",".join(r.split(",")[:-1]) for r in rows]
    assert strip(rows1) == strip(rows2)
    assert (tmp_path / "a" / "ckpt-final.cpr").read_bytes() == \
        (tmp_path / "b" / "ckpt-final.cpr").read_bytes()
    header = (tmp_path / "a" / "metrics.csv").read_text().splitlines()[0]
    assert header == training.METRICS_HEADER


def test_pretrain_zero_epochs(micro_dataset, tmp_path):
    _, manifest = micro_dataset
    cfg = micro_cfg(epochs=0)
    ckpt, rows = pretrain(cfg, manifest, tmp_path)
    assert rows == []
    assert ckpt.step == 0
    body = (tmp_path / "metrics.csv").read_text().splitlines()
    assert body == [training.METRICS_HEADER]
    loaded, loaded_cfg = load_run_checkpoint(tmp_path / "ckpt-final.cpr")
    assert loaded.step == 0
    assert loaded_cfg.T == cfg.T


def test_pretrain_loss_decreases_at_micro_scale(micro_dataset, tmp_path):
    _, manifest = micro_dataset
    cfg = micro_cfg(epochs=8)
    _, rows = pretrain(cfg, manifest, tmp_path)
    totals = [float(r.split(",")[4]) for r in rows]
    assert np.mean(totals[-5:]) < np.mean(totals[:5])


def test_pretrain_invalid_config_rejected(micro_dataset, tmp_path):
    _, manifest = micro_dataset
    cfg = micro_cfg()
    cfg.T = 10  # not divisible by S=3
    with pytest.raises(ConfigError):
        pretrain(cfg, manifest, tmp_path)


def test_pretrain_aborts_on_nonfinite(micro_dataset, tmp_path, monkeypatch):
    _, manifest = micro_dataset
    cfg = micro_cfg()
    real = training.compute_batch_losses

    def poisoned(leaves, geoms, cfg_, components=("local", "global", "recon")):
        out = real(leaves, geoms, cfg_, components)
        out["total"] = ad.Tensor(np.asarray(np.nan))
        return out

    monkeypatch.setattr(training, "compute_batch_losses", poisoned)
    with pytest.raises(NumericError) as err:
        pretrain(cfg, manifest, tmp_path)
    assert "step 0" in str(err.value)
    assert "total" in str(err.value)


def test_pretrain_rejects_tiny_manifest(tmp_path):
    cfg = micro_cfg()
    with pytest.raises(DataError):
        pretrain(cfg, [], tmp_path)


def test_longer_sequences_are_strided_to_fit(tmp_path):
    from pointseq.data import PointCloudSequence, save_sequence
    from pointseq.training import load_split_sequences

    rng = np.random.default_rng(0)
    frames = rng.normal(size=(24, 32, 3)).astype(np.float32)
    save_sequence(PointCloudSequence(frames, label=0, source_id="long"),
                  tmp_path / "long.pcsq")
    cfg = micro_cfg()  # T=12, frame_stride=2
    manifest = build_manifest(tmp_path, seed=0, val_fraction=0.0)
    seqs = load_split_sequences(manifest, cfg, "train")
    assert seqs[0].frames.shape == (12, 32, 3)

    short = rng.normal(size=(13, 32, 3)).astype(np.float32)
    save_sequence(PointCloudSequence(short, label=0, source_id="short"),
                  tmp_path / "short.pcsq")
    manifest = build_manifest(tmp_path, seed=0, val_fraction=0.0)
    with pytest.raises(DataError):
        load_split_sequences(manifest, cfg, "train")


def test_checkpoint_shape_guard(micro_dataset, tmp_path):
    _, manifest = micro_dataset
    cfg = micro_cfg(epochs=0)
    pretrain(cfg, manifest, tmp_path)
    from pointseq.data import load_checkpoint, save_checkpoint

    ckpt = load_checkpoint(tmp_path / "ckpt-final.cpr")
    bad_cfg = dataclasses.replace(micro_cfg(), proj_dim=4)
    ckpt.config = bad_cfg.to_json_dict()
    save_checkpoint(ckpt, tmp_path / "bad.cpr")
    with pytest.raises(DataError) as err:
        load_run_checkpoint(tmp_path / "bad.cpr")
    assert "head." in str(err.value)


# ---------------------------------------------------------------------------
# linear probe
# ---------------------------------------------------------------------------

def test_probe_single_class_perfect(tmp_path):
    generate_dataset(tmp_path, classes=1, per_class=8, T=12, N=32, seed=1)
    manifest = build_manifest(tmp_path, seed=1)
    cfg = micro_cfg()
    params = training.init_params(cfg, 0)
    acc = linear_probe(params, cfg, manifest, epochs=3, seed=0)
    assert acc == 1.0


def test_probe_learns_two_easy_classes(micro_dataset):
    _, manifest = micro_dataset
    cfg = micro_cfg()
    params = training.init_params(cfg, 0)
    acc = linear_probe(params, cfg, manifest, epochs=40, seed=0)
    assert 0.0 <= acc <= 1.0


def test_probe_rejects_unlabeled(tmp_path):
    from pointseq.data import PointCloudSequence, save_manifest, save_sequence

    rng = np.random.default_rng(0)
    for i in range(4):
        seq = PointCloudSequence(rng.normal(size=(12, 32, 3)).astype(np.float32),
                                 label=None, source_id=f"u{i}")
        save_sequence(seq, tmp_path / f"u{i}.pcsq")
    manifest = build_manifest(tmp_path, seed=0, val_fraction=0.5)
    cfg = micro_cfg()
    params = training.init_params(cfg, 0)
    with pytest.raises(DataError):
        linear_probe(params, cfg, manifest, epochs=1)


def test_probe_deterministic(micro_dataset):
    _, manifest = micro_dataset
    cfg = micro_cfg()
    params = training.init_params(cfg, 7)
    a = linear_probe(params, cfg, manifest, epochs=5, seed=3)
    b = linear_probe(params, cfg, manifest, epochs=5, seed=3)
    assert a == b


# ---------------------------------------------------------------------------
# gradient-check command plumbing
# ---------------------------------------------------------------------------

def test_gradcheck_main_exit_codes(capsys):
    ok = {"local": FiniteDiffReport(2e-6, "w", 0, {})}
    assert gradcheck_main(ok) == 0
    bad = {"total": FiniteDiffReport(0.5, "encoder.spatial.w1", 3, {})}
    assert gradcheck_main(bad) == 4
    out = capsys.readouterr().out
    assert "encoder.spatial.w1" in out and "FAIL" in out


def test_corrupted_backward_is_detected(monkeypatch):
    real_gelu = ad.gelu

    def bad_gelu(a):
        out = real_gelu(a)
        broken = ad.Tensor(out.data, out._parents,
                           lambda g: tuple(1.05 * p for p in out._backward(g)))
        return broken

    monkeypatch.setattr(ad, "gelu", bad_gelu)
    reports = gradient_check_report(seed=0, components=("local",), wrt=["tr.0.ffn.b1"])
    assert reports["local"].max_rel_error > 1e-4
    assert gradcheck_main(reports) == 4


# ---------------------------------------------------------------------------
# ablation helpers
# ---------------------------------------------------------------------------

def test_parse_toggle_combos_and_dedupe(capsys):
    combos = parse_toggle_combos("local;local,global;global,local;recon")
    assert combos == [("local",), ("global", "local"), ("recon",)]
    assert "duplicate" in capsys.readouterr().out
    with pytest.raises(ConfigError):
        parse_toggle_combos("warp")
    with pytest.raises(ConfigError):
        parse_toggle_combos(";")


def test_apply_combo_configs():
    cfg = micro_cfg()
    local_only = apply_combo(cfg, ("local",))
    assert local_only.toggles.local_on and not local_only.toggles.global_on
    assert not local_only.toggles.hard_negatives_on
    recon_only = apply_combo(cfg, ("recon",))
    assert recon_only.toggles.recon_on and recon_only.toggles.colorize_on
    plain_recon = apply_combo(cfg, ("nocolor", "recon"))
    assert plain_recon.toggles.recon_on and not plain_recon.toggles.colorize_on
    with pytest.raises(ConfigError):
        apply_combo(cfg, ("nocolor",))  # no loss enabled


def test_ablate_runs_combos(micro_dataset, tmp_path):
    _, manifest = micro_dataset
    cfg = micro_cfg()
    results = training.ablate(cfg, "local;local,global", manifest, tmp_path, probe_epochs=2)
    assert [r["combo"] for r in results] == ["local", "global,local"]
    csv = (tmp_path / "ablate.csv").read_text().splitlines()
    assert csv[0] == "combo,accuracy"
    assert len(csv) == 3
