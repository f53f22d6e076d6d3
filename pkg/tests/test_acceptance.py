"""Acceptance suite: the ten headline checks, one test per criterion.

Criteria 6-8 run real desk-scale training and dominate the suite's runtime
(tens of minutes single-threaded); everything else is fast.
"""

import time

import numpy as np
import pytest

from lcmae import (Tensor, TrainConfig, ema_update, generate_synthetic,
                   global_guidance_loss, l2_normalize, lcmae_forward,
                   load_checkpoint, sample_mask, save_checkpoint, sv_gap_curve)
from lcmae.analysis import attention_maps, sv_spectrum, sv_spectrum_oracle
from lcmae.model import (clone_tree, flatten_params, init_model, online_tree,
                         trainable_params)
from lcmae.oracles import (run_gradcheck_suite, tiny_augment_config, tiny_batch,
                           tiny_guidance_config, tiny_vit_config)
from lcmae.trainer import ProbeConfig, linear_probe, pretrain


# ---------------------------------------------------------------------------
# shared training artifacts (criteria 6-8)


@pytest.fixture(scope="module")
def synthetic_4096():
    return generate_synthetic(4096, size=32, n_classes=8, seed=0)


@pytest.fixture(scope="module")
def three_seed_runs(synthetic_4096):
    """Short desk-scale runs: 3 seeds x {LC-MAE, MAE baseline}."""
    runs = {}
    for seed in (0, 1, 2):
        for mode in ("lcmae", "mae"):
            cfg = TrainConfig(epochs=6, warmup_epochs=1, seed=seed)
            if mode == "mae":
                cfg.guidance.distance = "none"
            log, state = pretrain(cfg, synthetic_4096.images)
            acc = linear_probe(state, synthetic_4096.images, synthetic_4096.labels,
                               ProbeConfig(seed=seed))
            runs[(seed, mode)] = (state, acc)
    return runs


# ---------------------------------------------------------------------------
# criterion 1: gradient oracle


def test_criterion_1_gradient_oracle():
    t0 = time.time()
    worst, report = run_gradcheck_suite()
    elapsed = time.time() - t0
    for name, err in report:
        assert err < 1e-4, f"{name}: {err:.3e}"
    assert elapsed < 120.0
    print(f"\nPASS criterion 1: worst rel err {worst:.3e} in {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# criterion 2: stop-gradient / EMA


def test_criterion_2_stop_gradient_and_ema():
    state = init_model(tiny_vit_config(), tiny_guidance_config(), seed=3)
    losses = lcmae_forward(state, tiny_batch(), tiny_augment_config(), seed=1, step=0)
    losses.total.backward()
    for name, leaf in flatten_params(state.target, "target").items():
        if isinstance(leaf, Tensor):
            assert leaf.grad is None, f"gradient leaked into {name}"

    # tau=1 fixpoint
    frozen = clone_tree(state.target["encoder"])
    ema_update(frozen, state.online, tau=1.0)
    ref = clone_tree(state.target["encoder"])
    for k, v in flatten_params(frozen).items():
        if isinstance(v, Tensor):
            assert np.array_equal(v.data, flatten_params(ref)[k].data)

    # tau=0 copy
    copied = clone_tree(state.target["encoder"])
    ema_update(copied, state.online, tau=0.0)
    for k, v in flatten_params(copied).items():
        if isinstance(v, Tensor):
            o = flatten_params(state.online)[k]
            assert np.array_equal(v.data, o.data)

    # tau=0.996 arithmetic
    t = {"w": Tensor(np.array([1.0]))}
    ema_update(t, {"w": Tensor(np.array([0.0]))}, tau=0.996)
    assert abs(t["w"].data[0] - 0.996) < 1e-15

    # two steps at tau == one step at tau^2 against a fixed snapshot
    tau = 0.996
    snapshot = clone_tree(state.online)
    twice = clone_tree(state.target["encoder"])
    once = clone_tree(state.target["encoder"])
    ema_update(twice, snapshot, tau)
    ema_update(twice, snapshot, tau)
    ema_update(once, snapshot, tau * tau)
    for k, v in flatten_params(twice).items():
        if isinstance(v, Tensor):
            assert np.allclose(v.data, flatten_params(once)[k].data, atol=1e-12)
    print("\nPASS criterion 2: stop-gradient and EMA algebra hold")


# ---------------------------------------------------------------------------
# criterion 3: masking suite


def test_criterion_3_masking_suite():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(4, 257))
        r = float(rng.uniform(0.051, 0.949))
        seed = int(rng.integers(0, 2 ** 31))
        plan = sample_mask(n, r, seed=seed)
        again = sample_mask(n, r, seed=seed)
        assert plan.n_masked == int(np.floor(r * n))
        union = np.sort(np.concatenate([plan.masked[0], plan.visible[0]]))
        assert np.array_equal(union, np.arange(n))
        assert np.array_equal(plan.masked, again.masked)

    draws = 10_000
    plan = sample_mask(64, 0.75, seed=7, batch=draws)
    freq = np.bincount(plan.masked.reshape(-1), minlength=64) / draws
    worst = np.abs(freq - 0.75).max()
    assert worst < 0.02
    print(f"\nPASS criterion 3: 1000 plans exact; Monte Carlo dev {worst:.4f}")


# ---------------------------------------------------------------------------
# criterion 4: guidance-loss bounds


def test_criterion_4_guidance_bounds():
    rng = np.random.default_rng(1)
    d = 8
    u = rng.normal(size=(10_000, d))
    v = rng.normal(size=(10_000, d))
    per_pair = ((l2_normalize(Tensor(u)) - l2_normalize(Tensor(v))) ** 2) \
        .sum(axis=-1).data
    assert per_pair.min() >= 0.0 and per_pair.max() <= 4.0 + 1e-12
    batch_mean = float(global_guidance_loss(Tensor(u), Tensor(v), "cosine").data)
    assert abs(batch_mean - per_pair.mean()) < 1e-9

    eq = float(global_guidance_loss(Tensor(u), Tensor(u.copy()), "cosine").data)
    assert eq < 1e-12
    anti = float(global_guidance_loss(Tensor(u), Tensor(-u), "cosine").data)
    assert abs(anti - 4.0) < 1e-9

    base = float(global_guidance_loss(Tensor(u), Tensor(v), "cosine").data)
    for c in (1e-3, 7.0, 1e4):
        assert abs(float(global_guidance_loss(Tensor(u * c), Tensor(v),
                                              "cosine").data) - base) < 1e-9
        assert abs(float(global_guidance_loss(Tensor(u), Tensor(v * c),
                                              "cosine").data) - base) < 1e-9
    print(f"\nPASS criterion 4: 10k pairs in [0,4]; scale-invariant")


# ---------------------------------------------------------------------------
# criterion 5: baseline degeneracy


def test_criterion_5_baseline_degeneracy():
    images = np.random.default_rng(2).uniform(size=(4, 3, 8, 8))

    def run(**guidance_kw):
        cfg = TrainConfig(epochs=50, warmup_epochs=5, batch_size=4, log_every=1,
                          guidance=tiny_guidance_config(**guidance_kw),
                          augment=tiny_augment_config(), vit=tiny_vit_config())
        return pretrain(cfg, images)

    log_a, state_a = run(alpha=0.0)          # alpha = 0
    log_b, state_b = run(distance="none")    # explicit baseline
    rows_a = [r.as_csv() for r in log_a]
    rows_b = [r.as_csv() for r in log_b]
    assert len(rows_a) == 50
    assert rows_a == rows_b
    pa = trainable_params(online_tree(state_a))
    pb = trainable_params(online_tree(state_b))
    for k in pa:
        assert np.array_equal(pa[k].data, pb[k].data), k
    print("\nPASS criterion 5: 50 steps bitwise identical to the MAE baseline")


# ---------------------------------------------------------------------------
# criterion 6: desk-scale training signal


def test_criterion_6_training_signal(synthetic_4096):
    t0 = time.time()
    log, _ = pretrain(TrainConfig(), synthetic_4096.images)
    elapsed = time.time() - t0
    first, last = log[0].total, log[-1].total
    reduction = 1.0 - last / first
    assert elapsed < 30 * 60
    assert reduction >= 0.5, f"loss {first:.4f} -> {last:.4f} ({reduction:.1%})"
    print(f"\nPASS criterion 6: loss {first:.4f} -> {last:.4f} "
          f"({reduction:.1%} reduction) in {elapsed / 60:.1f} min")


# ---------------------------------------------------------------------------
# criterion 7: directional probe comparison


def test_criterion_7_probe_direction(three_seed_runs):
    lcmae_accs = [three_seed_runs[(s, "lcmae")][1] for s in (0, 1, 2)]
    mae_accs = [three_seed_runs[(s, "mae")][1] for s in (0, 1, 2)]
    report = "; ".join(
        f"seed {s}: lcmae {a:.4f} vs mae {b:.4f}"
        for s, a, b in zip((0, 1, 2), lcmae_accs, mae_accs))
    print(f"\ncriterion 7 per-seed probe accuracy: {report}")
    assert np.mean(lcmae_accs) >= np.mean(mae_accs), report
    print(f"PASS criterion 7: mean {np.mean(lcmae_accs):.4f} >= {np.mean(mae_accs):.4f}")


# ---------------------------------------------------------------------------
# criterion 8: directional spectrum gap


def test_criterion_8_spectrum_gap(synthetic_4096, three_seed_runs):
    last_layer = TrainConfig().vit.depth - 1
    means = []
    for s in (0, 1, 2):
        curve = sv_gap_curve(three_seed_runs[(s, "lcmae")][0],
                             three_seed_runs[(s, "mae")][0],
                             synthetic_4096.images[:512], last_layer)
        means.append(float(curve.mean()))
    print(f"\ncriterion 8 last-layer log-SV-gap means: "
          + ", ".join(f"seed {s}: {m:+.4f}" for s, m in zip((0, 1, 2), means)))
    assert np.mean(means) >= 0.0
    print(f"PASS criterion 8: mean gap {np.mean(means):+.4f} >= 0")


# ---------------------------------------------------------------------------
# criterion 9: spectrum oracle + attention mass


def test_criterion_9_spectrum_and_attention_oracles():
    rng = np.random.default_rng(3)
    for _ in range(100):
        n = int(rng.integers(2, 17))
        d = int(rng.integers(1, 9))
        feats = rng.normal(size=(n, d)) * rng.uniform(0.1, 10)
        sv = sv_spectrum(feats).singular_values
        oracle = sv_spectrum_oracle(feats)
        padded = np.zeros_like(oracle)
        padded[:len(sv)] = sv
        denom = max(oracle.max(), 1e-12)
        assert np.abs(padded - oracle).max() / denom < 1e-8

    state = init_model(tiny_vit_config(), tiny_guidance_config(), seed=4)
    for i in range(100):
        image = rng.uniform(size=(3, 8, 8))
        result = attention_maps(state, image, query_index=int(rng.integers(0, 4)))
        sums = result.maps.reshape(result.maps.shape[0], -1).sum(axis=1)
        assert np.abs(sums - 1.0).max() < 1e-6
    print("\nPASS criterion 9: spectrum oracle < 1e-8; attention mass < 1e-6")


# ---------------------------------------------------------------------------
# criterion 10: checkpoint integrity


def test_criterion_10_checkpoint_integrity(tmp_path):
    from lcmae import CheckpointError
    from lcmae.trainer import OptimizerState, lcmae_step

    state = init_model(tiny_vit_config(), tiny_guidance_config(), seed=5)
    opt = OptimizerState()
    cfg = TrainConfig(epochs=1, warmup_epochs=0, batch_size=2,
                      guidance=tiny_guidance_config(),
                      augment=tiny_augment_config(), vit=tiny_vit_config())
    images = tiny_batch()
    for s in range(5):
        lcmae_step(images, state, cfg, opt, step=s, lr=1e-3)

    p1, p2 = str(tmp_path / "a.ckpt"), str(tmp_path / "b.ckpt")
    save_checkpoint(state, p1, opt_state=opt, step=5)
    loaded, opt2, step = load_checkpoint(p1)
    save_checkpoint(loaded, p2, opt_state=opt2, step=step)
    blob = open(p1, "rb").read()
    assert blob == open(p2, "rb").read()

    rng = np.random.default_rng(6)
    corrupt = str(tmp_path / "corrupt.ckpt")
    detected = 0
    for _ in range(20):
        bad = bytearray(blob)
        off = int(rng.integers(0, len(bad)))
        bad[off] ^= 0xFF
        open(corrupt, "wb").write(bytes(bad))
        with pytest.raises(CheckpointError):
            load_checkpoint(corrupt)
        detected += 1
    assert detected == 20
    print("\nPASS criterion 10: bitwise round-trip; 20/20 corruptions detected")
