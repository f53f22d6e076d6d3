"""Dataset format, synthetic generator, checkpoint format, config parsing, CLI."""

import os

import numpy as np
import pytest

from lcmae import (CheckpointError, ConfigError, TinyImageDataset, TrainConfig,
                   cli_dispatch, generate_synthetic, load_checkpoint,
                   load_dataset, save_checkpoint, save_dataset)
from lcmae.checkpoint import _state_arrays
from lcmae.config import apply_overrides, dump_config, parse_config, set_by_path
from lcmae.model import init_model
from lcmae.oracles import tiny_guidance_config, tiny_vit_config
from lcmae.trainer import OptimizerState


# ---------------------------------------------------------------------------
# dataset format


def test_dataset_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    images = np.round(rng.uniform(size=(5, 3, 8, 8)) * 255) / 255
    labels = rng.integers(0, 4, size=5)
    path = str(tmp_path / "d.bin")
    save_dataset(TinyImageDataset(images, labels), path)
    back = load_dataset(path)
    assert np.array_equal(back.images, images)
    assert np.array_equal(back.labels, labels)


def test_dataset_unlabeled_round_trip(tmp_path):
    images = np.zeros((2, 3, 4, 4))
    path = str(tmp_path / "d.bin")
    save_dataset(TinyImageDataset(images, None), path)
    back = load_dataset(path)
    assert back.labels is None
    assert back.images.shape == (2, 3, 4, 4)


def test_dataset_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(b"NOTMAG" + b"\0" * 20)
    with pytest.raises(CheckpointError, match="magic"):
        load_dataset(str(path))


def test_dataset_rejects_truncation(tmp_path):
    path = str(tmp_path / "d.bin")
    save_dataset(TinyImageDataset(np.zeros((2, 3, 4, 4)), None), path)
    blob = open(path, "rb").read()
    open(path, "wb").write(blob[:-5])
    with pytest.raises(CheckpointError):
        load_dataset(path)


# ---------------------------------------------------------------------------
# synthetic generator


def test_generate_empty_dataset():
    ds = generate_synthetic(0, size=8)
    assert len(ds) == 0


def test_generate_deterministic_bytes(tmp_path):
    a, b = str(tmp_path / "a.bin"), str(tmp_path / "b.bin")
    save_dataset(generate_synthetic(16, size=8, seed=3), a)
    save_dataset(generate_synthetic(16, size=8, seed=3), b)
    assert open(a, "rb").read() == open(b, "rb").read()


def test_generate_class_balance():
    ds = generate_synthetic(32, size=8, n_classes=8)
    counts = np.bincount(ds.labels, minlength=8)
    assert np.all(counts == 4)


def test_generate_matches_disk_round_trip(tmp_path):
    ds = generate_synthetic(4, size=8, seed=1)
    path = str(tmp_path / "d.bin")
    save_dataset(ds, path)
    back = load_dataset(path)
    assert np.array_equal(back.images, ds.images)


def test_generate_rejects_bad_class_count():
    with pytest.raises(ConfigError):
        generate_synthetic(4, n_classes=9)


# ---------------------------------------------------------------------------
# checkpoint format


def _trained_tiny_state(steps=3):
    from lcmae.oracles import tiny_augment_config, tiny_batch
    from lcmae.trainer import lcmae_step

    state = init_model(tiny_vit_config(), tiny_guidance_config(), seed=0)
    opt = OptimizerState()
    cfg = TrainConfig(epochs=1, warmup_epochs=0, batch_size=2,
                      guidance=tiny_guidance_config(),
                      augment=tiny_augment_config(), vit=tiny_vit_config())
    images = tiny_batch()
    for s in range(steps):
        lcmae_step(images, state, cfg, opt, step=s, lr=1e-3)
    return state, opt


def test_checkpoint_round_trip_bitwise(tmp_path):
    state, opt = _trained_tiny_state()
    p1, p2 = str(tmp_path / "a.ckpt"), str(tmp_path / "b.ckpt")
    save_checkpoint(state, p1, opt_state=opt, step=3)
    loaded, opt2, step = load_checkpoint(p1)
    assert step == 3 and opt2 is not None and opt2.step == opt.step
    save_checkpoint(loaded, p2, opt_state=opt2, step=step)
    assert open(p1, "rb").read() == open(p2, "rb").read()
    for name, a in _state_arrays(state).items():
        assert np.array_equal(a, _state_arrays(loaded)[name]), name


def test_checkpoint_without_optimizer(tmp_path):
    state, _ = _trained_tiny_state(steps=1)
    path = str(tmp_path / "c.ckpt")
    save_checkpoint(state, path, step=1)
    _, opt, step = load_checkpoint(path)
    assert opt is None and step == 1


def test_checkpoint_rejects_truncation(tmp_path):
    state, _ = _trained_tiny_state(steps=1)
    path = str(tmp_path / "c.ckpt")
    save_checkpoint(state, path)
    blob = open(path, "rb").read()
    open(path, "wb").write(blob[: len(blob) // 2])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_checkpoint_rejects_bad_version(tmp_path):
    state, _ = _trained_tiny_state(steps=1)
    path = str(tmp_path / "c.ckpt")
    save_checkpoint(state, path)
    blob = bytearray(open(path, "rb").read())
    blob[6] = 99  # the version byte follows the 6-byte magic
    open(path, "wb").write(bytes(blob))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(path)


def test_checkpoint_rejects_bad_magic(tmp_path):
    path = tmp_path / "c.ckpt"
    path.write_bytes(b"XXXXXX" + b"\0" * 64)
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(str(path))


def test_checkpoint_detects_payload_corruption(tmp_path):
    state, _ = _trained_tiny_state(steps=1)
    path = str(tmp_path / "c.ckpt")
    save_checkpoint(state, path)
    blob = bytearray(open(path, "rb").read())
    blob[len(blob) // 2] ^= 0xFF
    open(path, "wb").write(bytes(blob))
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


# ---------------------------------------------------------------------------
# config


def test_config_round_trip_identity():
    cfg = TrainConfig()
    text = dump_config(cfg)
    back = parse_config(text)
    assert dump_config(back) == text
    assert back == cfg


def test_config_override_nested_field():
    cfg = TrainConfig()
    apply_overrides(cfg, ["guidance.alpha=0.5", "vit.depth=2", "epochs=3"])
    assert cfg.guidance.alpha == 0.5 and cfg.vit.depth == 2 and cfg.epochs == 3


def test_config_rejects_unknown_key():
    with pytest.raises(ConfigError, match="unknown config key"):
        set_by_path(TrainConfig(), "guidance.gamma", "1.0")


def test_config_rejects_section_as_value():
    with pytest.raises(ConfigError):
        set_by_path(TrainConfig(), "guidance", "1.0")


def test_config_rejects_bad_value_type():
    with pytest.raises(ConfigError):
        set_by_path(TrainConfig(), "epochs", "many")


def test_config_tuple_field():
    cfg = TrainConfig()
    set_by_path(cfg, "betas", "0.8,0.99")
    assert cfg.betas == (0.8, 0.99)


def test_config_validation_reruns_on_override():
    with pytest.raises(ConfigError):
        apply_overrides(TrainConfig(), ["guidance.tau=1.5"])


def test_config_comments_and_blank_lines():
    cfg = parse_config("# comment\n\nepochs = 7\n")
    assert cfg.epochs == 7


def test_config_rejects_malformed_line():
    with pytest.raises(ConfigError, match="line 1"):
        parse_config("epochs 7")


# ---------------------------------------------------------------------------
# CLI


def _write_tiny_cfg(tmp_path):
    lines = [
        "epochs = 1", "warmup_epochs = 0", "batch_size = 4", "log_every = 1",
        "vit.image_size = 8", "vit.dim = 8", "vit.depth = 1", "vit.heads = 2",
        "vit.mlp_ratio = 1.0", "vit.decoder_dim = 8", "vit.decoder_depth = 1",
        "vit.decoder_heads = 2", "augment.out_size = 8",
        "guidance.head_hidden = 8", "guidance.head_out = 8",
    ]
    path = tmp_path / "tiny.cfg"
    path.write_text("\n".join(lines) + "\n")
    return str(path)


@pytest.fixture
def tiny_run(tmp_path):
    data = str(tmp_path / "data.bin")
    assert cli_dispatch(["gen-data", "--count", "8", "--size", "8",
                        "--out", data]) == 0
    cfg = _write_tiny_cfg(tmp_path)
    ckpt = str(tmp_path / "model.ckpt")
    assert cli_dispatch(["pretrain", "--config", cfg, "--data", data,
                        "--out", ckpt, "--quiet"]) == 0
    return tmp_path, data, cfg, ckpt


def test_cli_usage_error_exit_code():
    assert cli_dispatch([]) == 2
    assert cli_dispatch(["pretrain"]) == 2


def test_cli_contract_error_exit_code(tmp_path):
    missing = str(tmp_path / "nope.bin")
    assert cli_dispatch(["probe", "--checkpoint", missing, "--data", missing]) == 1


def test_cli_pretrain_probe_cycle(tiny_run, capsys):
    tmp_path, data, cfg, ckpt = tiny_run
    assert os.path.exists(ckpt)
    assert cli_dispatch(["probe", "--checkpoint", ckpt, "--data", data,
                        "--epochs", "2"]) == 0
    out = capsys.readouterr().out
    assert "top1_accuracy" in out


def test_cli_pretrain_writes_log(tmp_path):
    data = str(tmp_path / "data.bin")
    cli_dispatch(["gen-data", "--count", "8", "--size", "8", "--out", data])
    cfg = _write_tiny_cfg(tmp_path)
    log = str(tmp_path / "run.csv")
    ckpt = str(tmp_path / "m.ckpt")
    assert cli_dispatch(["pretrain", "--config", cfg, "--data", data,
                        "--out", ckpt, "--log", log, "--quiet"]) == 0
    lines = open(log).read().strip().splitlines()
    assert lines[0] == "step,lr,l_mim,l_gg,total"
    assert len(lines) >= 2


def test_cli_override_baseline(tmp_path):
    data = str(tmp_path / "data.bin")
    cli_dispatch(["gen-data", "--count", "8", "--size", "8", "--out", data])
    cfg = _write_tiny_cfg(tmp_path)
    ckpt = str(tmp_path / "mae.ckpt")
    assert cli_dispatch(["pretrain", "--config", cfg, "--data", data,
                        "--override", "guidance.alpha=0",
                        "--out", ckpt, "--quiet"]) == 0
    state, _, _ = load_checkpoint(ckpt)
    assert state.guidance.alpha == 0.0


def test_cli_analyze_attn(tiny_run):
    tmp_path, data, cfg, ckpt = tiny_run
    prefix = str(tmp_path / "attn")
    assert cli_dispatch(["analyze-attn", "--checkpoint", ckpt, "--data", data,
                        "--query", "1", "--out-prefix", prefix]) == 0
    assert os.path.exists(prefix + "_head0.pgm")
    assert os.path.exists(prefix + ".csv")
    assert cli_dispatch(["analyze-attn", "--checkpoint", ckpt, "--data", data,
                        "--query", "random:7", "--out-prefix", prefix]) == 0


def test_cli_analyze_spectrum(tiny_run):
    tmp_path, data, cfg, ckpt = tiny_run
    out = str(tmp_path / "gap.csv")
    assert cli_dispatch(["analyze-spectrum", "--checkpoint-a", ckpt,
                        "--checkpoint-b", ckpt, "--data", data,
                        "--out", out]) == 0
    lines = open(out).read().strip().splitlines()
    assert lines[0] == "rank,log_gap"


def test_cli_gen_data_deterministic(tmp_path):
    a, b = str(tmp_path / "a.bin"), str(tmp_path / "b.bin")
    cli_dispatch(["gen-data", "--count", "8", "--size", "8", "--seed", "5",
                  "--out", a])
    cli_dispatch(["gen-data", "--count", "8", "--size", "8", "--seed", "5",
                  "--out", b])
    assert open(a, "rb").read() == open(b, "rb").read()
