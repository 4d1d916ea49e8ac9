import json

import numpy as np
import pytest
import torch

from twostream_inpaint.errors import CheckpointError, InputError, TrainingError
from twostream_inpaint.losses import LossWeights, RandomFeaturePyramid
from twostream_inpaint.network import NetworkConfig
from twostream_inpaint.serialization import load_tensors, save_tensors
from twostream_inpaint.training import (
    TrainConfig,
    init_state,
    load_checkpoint,
    load_generator,
    sample_batch,
    save_checkpoint,
    train_loop,
    train_step,
)


def tiny_train_config(tmp_path, **kw) -> TrainConfig:
    base = dict(
        network=NetworkConfig(levels=2, base_channels=8, input_size=(16, 16),
                              bottleneck_blocks=1,
                              discriminator_widths=(8, 8, 8, 8, 8)),
        batch_size=2,
        steps=3,
        seed=7,
        n_synthetic=2,
        augment=False,
        out_dir=str(tmp_path / "run"),
        log_every=1,
    )
    base.update(kw)
    return TrainConfig(**base)


def _weights(module):
    return {k: v.clone() for k, v in module.state_dict().items()}


def _same_weights(a, b):
    return all(torch.equal(a[k], b[k]) for k in a)


# ---------------------------------------------------------------------------
# state construction and stepping
# ---------------------------------------------------------------------------

def test_init_state_deterministic(tmp_path):
    cfg = tiny_train_config(tmp_path)
    s1, s2 = init_state(cfg), init_state(cfg)
    assert _same_weights(_weights(s1.generator), _weights(s2.generator))
    assert _same_weights(_weights(s1.discriminator), _weights(s2.discriminator))
    assert s1.rng.bit_generator.state == s2.rng.bit_generator.state


def test_zero_lr_step_changes_nothing(tmp_path):
    cfg = tiny_train_config(tmp_path, lr=0.0)
    state = init_state(cfg)
    g0, d0 = _weights(state.generator), _weights(state.discriminator)
    train_step(state, *sample_batch(state))
    # spectral-norm power-iteration buffers move on forward; parameters must not
    g1 = dict(state.generator.named_parameters())
    d1 = dict(state.discriminator.named_parameters())
    assert all(torch.equal(g0[k], v) for k, v in g1.items())
    assert all(torch.equal(d0[k], v) for k, v in d1.items())


def test_step_updates_both_networks(tmp_path):
    cfg = tiny_train_config(tmp_path)
    state = init_state(cfg)
    g0, d0 = _weights(state.generator), _weights(state.discriminator)
    scalars = train_step(state, *sample_batch(state))
    assert state.step == 1
    assert not _same_weights(g0, _weights(state.generator))
    assert not _same_weights(d0, _weights(state.discriminator))
    for key in ("d_loss", "total", "pyramid_detail", "pyramid_structure",
                "perceptual", "style", "adversarial"):
        assert np.isfinite(scalars[key])


def test_one_discriminator_step_per_generator_step(tmp_path):
    cfg = tiny_train_config(tmp_path)
    state = init_state(cfg)
    for _ in range(3):
        train_step(state, *sample_batch(state))
    g_steps = [int(s["step"]) for s in state.g_opt.state_dict()["state"].values()]
    d_steps = [int(s["step"]) for s in state.d_opt.state_dict()["state"].values()]
    assert set(g_steps) == {3} and set(d_steps) == {3}


def test_extractor_stays_frozen(tmp_path):
    cfg = tiny_train_config(tmp_path)
    state = init_state(cfg)
    before = [p.clone() for p in state.extractor.parameters()]
    for _ in range(2):
        train_step(state, *sample_batch(state))
    for p0, p1 in zip(before, state.extractor.parameters()):
        assert torch.equal(p0, p1)
        assert not p1.requires_grad
    fresh = RandomFeaturePyramid()
    for p0, p1 in zip(fresh.parameters(), state.extractor.parameters()):
        assert torch.equal(p0, p1)


def test_two_runs_identical_histories(tmp_path):
    cfg1 = tiny_train_config(tmp_path / "a")
    cfg2 = tiny_train_config(tmp_path / "b")
    _, h1 = train_loop(cfg1)
    _, h2 = train_loop(cfg2)
    assert h1 == h2


def test_divergence_guard_triggers(tmp_path):
    cfg = tiny_train_config(tmp_path, divergence_limit=1e-9)
    state = init_state(cfg)
    with pytest.raises(TrainingError, match="diverged"):
        train_step(state, *sample_batch(state))


def test_nan_weights_raise_training_error(tmp_path):
    cfg = tiny_train_config(tmp_path)
    state = init_state(cfg)
    with torch.no_grad():
        state.generator.main_heads[0].weight.fill_(float("nan"))
    with pytest.raises(TrainingError):
        train_step(state, *sample_batch(state))


# ---------------------------------------------------------------------------
# checkpointing
# ---------------------------------------------------------------------------

def test_resume_is_bit_exact(tmp_path):
    cfg = tiny_train_config(tmp_path, steps=6)
    state = init_state(cfg)
    ledger = []
    for _ in range(2):
        ledger.append(train_step(state, *sample_batch(state)))
    ck = tmp_path / "mid.tsic"
    save_checkpoint(state, ck)
    cont = [train_step(state, *sample_batch(state)) for _ in range(3)]

    resumed = load_checkpoint(ck)
    assert resumed.step == 2
    redo = [train_step(resumed, *sample_batch(resumed)) for _ in range(3)]
    assert cont == redo
    assert _same_weights(_weights(state.generator), _weights(resumed.generator))
    assert _same_weights(_weights(state.discriminator), _weights(resumed.discriminator))


def test_checkpoint_resave_byte_identical(tmp_path):
    cfg = tiny_train_config(tmp_path)
    state = init_state(cfg)
    train_step(state, *sample_batch(state))
    p1, p2 = tmp_path / "a.tsic", tmp_path / "b.tsic"
    save_checkpoint(state, p1)
    save_checkpoint(load_checkpoint(p1), p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_checkpoint_version_guard(tmp_path):
    cfg = tiny_train_config(tmp_path)
    state = init_state(cfg)
    ck = tmp_path / "v.tsic"
    save_checkpoint(state, ck)
    tensors, meta = load_tensors(ck)
    meta["checkpoint_version"] = 99
    save_tensors(ck, tensors, meta)
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(ck)
    with pytest.raises(CheckpointError, match="version"):
        load_generator(ck)


def test_load_generator_needs_no_dataset(tmp_path):
    data_dir = tmp_path / "imgs"
    data_dir.mkdir()
    from twostream_inpaint.data import save_image, synthesize_scene

    for i in range(2):
        save_image(synthesize_scene(np.random.default_rng(i), (16, 16)),
                   data_dir / f"{i}.png")
    cfg = tiny_train_config(tmp_path, data_source=str(data_dir), steps=1)
    state, _ = train_loop(cfg)
    ck = tmp_path / "run" / "checkpoint_final.tsic"
    for f in data_dir.iterdir():
        f.unlink()
    data_dir.rmdir()
    gen, loaded_cfg = load_generator(ck)  # must work without the images
    image = torch.zeros(1, 3, 16, 16)
    mask = torch.zeros(1, 1, 16, 16)
    assert gen(image, mask).final_image.shape == (1, 3, 16, 16)
    with pytest.raises(InputError):
        load_checkpoint(ck)  # full training state does need the images


def test_optimizer_moments_round_trip(tmp_path):
    cfg = tiny_train_config(tmp_path)
    state = init_state(cfg)
    for _ in range(2):
        train_step(state, *sample_batch(state))
    ck = tmp_path / "m.tsic"
    save_checkpoint(state, ck)
    resumed = load_checkpoint(ck)
    orig = state.g_opt.state_dict()["state"]
    back = resumed.g_opt.state_dict()["state"]
    assert set(orig) == set(back)
    for pid in orig:
        for key in orig[pid]:
            assert torch.equal(orig[pid][key], back[pid][key]), (pid, key)


# ---------------------------------------------------------------------------
# loop plumbing
# ---------------------------------------------------------------------------

def test_train_loop_logs_and_checkpoints(tmp_path):
    cfg = tiny_train_config(tmp_path, steps=4, checkpoint_every=2)
    state, history = train_loop(cfg)
    assert state.step == 4
    assert len(history) == 4
    out = tmp_path / "run"
    assert (out / "checkpoint_0000002.tsic").exists()
    assert (out / "checkpoint_0000004.tsic").exists()
    assert (out / "checkpoint_final.tsic").exists()
    lines = (out / "log.jsonl").read_text().strip().splitlines()
    records = [json.loads(line) for line in lines]
    assert [r["step"] for r in records] == [1, 2, 3, 4]
    assert all("total" in r and "d_loss" in r for r in records)


def test_train_loop_resume_extends_steps(tmp_path):
    cfg = tiny_train_config(tmp_path, steps=2)
    train_loop(cfg)
    ck = tmp_path / "run" / "checkpoint_final.tsic"
    state, history = train_loop(resume_path=ck, steps=4)
    assert state.step == 4
    assert len(history) == 2  # only the new steps


def test_train_loop_needs_config_or_resume():
    with pytest.raises(TrainingError):
        train_loop()


def test_train_config_round_trip(tmp_path):
    cfg = tiny_train_config(tmp_path, weights=LossWeights(style=17.0),
                            mask_bins=("20-30",), extractor="random")
    clone = TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert clone == cfg
