"""Joint training of the two-stream generator and the patch discriminator.

Both networks train together from step one: each step first updates the
discriminator on real images versus detached composited outputs, then
updates the generator with the full objective. Everything that can change
across a run — weights, Adam moments, the numpy sampling generator, the
dataset's mask draw counter, torch's RNG — is captured in the checkpoint, so
a resumed run continues bit-for-bit where the original left off.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data import InpaintingDataset, build_pyramid, collate, parse_bin
from .errors import CheckpointError, TrainingError
from .losses import (
    LossWeights,
    RandomFeaturePyramid,
    VGG16Features,
    discriminator_loss,
    total_generator_loss,
)
from .network import NetworkConfig, build_discriminator, build_generator
from .serialization import load_tensors, save_tensors

CHECKPOINT_VERSION = 1
ADAM_BETAS = (0.5, 0.999)
ADAM_EPS = 1e-8


@dataclass
class TrainConfig:
    network: NetworkConfig = field(default_factory=NetworkConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    # optimization
    lr: float = 1e-4
    beta1: float = ADAM_BETAS[0]
    beta2: float = ADAM_BETAS[1]
    adam_eps: float = ADAM_EPS
    batch_size: int = 8
    steps: int = 1000
    seed: int = 0
    # data
    data_source: str = "synthetic"
    n_synthetic: int = 64
    mask_bins: tuple[str, ...] = ("10-20", "20-30", "30-40", "40-50")
    augment: bool = True
    fixed_masks: bool = False
    # perceptual/style feature source: "random" or a path to a VGG16 container
    extractor: str = "random"
    # bookkeeping
    out_dir: str = "runs/default"
    log_every: int = 50
    checkpoint_every: int = 0  # 0 = only the final checkpoint
    divergence_limit: float = 1e6

    def to_dict(self) -> dict:
        d = self.__dict__.copy()
        d["network"] = self.network.to_dict()
        d["weights"] = self.weights.to_dict()
        d["mask_bins"] = list(self.mask_bins)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["network"] = NetworkConfig.from_dict(d["network"])
        d["weights"] = LossWeights.from_dict(d["weights"])
        d["mask_bins"] = tuple(d["mask_bins"])
        return cls(**d)


@dataclass
class TrainState:
    config: TrainConfig
    generator: torch.nn.Module
    discriminator: torch.nn.Module
    g_opt: torch.optim.Adam
    d_opt: torch.optim.Adam
    extractor: torch.nn.Module
    dataset: InpaintingDataset
    rng: np.random.Generator
    step: int = 0


def make_extractor(config: TrainConfig) -> torch.nn.Module:
    if config.extractor == "random":
        return RandomFeaturePyramid()
    return VGG16Features(config.extractor)


def _make_dataset(config: TrainConfig) -> InpaintingDataset:
    return InpaintingDataset(
        source=config.data_source,
        size=config.network.input_size,
        seed=config.seed,
        bins=tuple(parse_bin(b) for b in config.mask_bins),
        augment=config.augment,
        fixed_masks=config.fixed_masks,
        n_synthetic=config.n_synthetic,
    )


def _make_optimizer(module: torch.nn.Module, config: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(
        module.parameters(), lr=config.lr,
        betas=(config.beta1, config.beta2), eps=config.adam_eps,
    )


def init_state(config: TrainConfig) -> TrainState:
    """Fresh training state, fully determined by the config (incl. seed)."""
    torch.manual_seed(config.seed)
    generator = build_generator(config.network, seed=config.seed)
    discriminator = build_discriminator(config.network, seed=config.seed + 1)
    return TrainState(
        config=config,
        generator=generator,
        discriminator=discriminator,
        g_opt=_make_optimizer(generator, config),
        d_opt=_make_optimizer(discriminator, config),
        extractor=make_extractor(config),
        dataset=_make_dataset(config),
        rng=np.random.default_rng([config.seed, 23]),
    )


def sample_batch(state: TrainState) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    n = len(state.dataset)
    b = state.config.batch_size
    idx = state.rng.choice(n, size=b, replace=n < b)
    return collate([state.dataset[int(i)] for i in idx])


def train_step(
    state: TrainState,
    images: torch.Tensor,
    structures: torch.Tensor,
    masks: torch.Tensor,
) -> dict[str, float]:
    """One discriminator update followed by one generator update."""
    cfg = state.config
    state.generator.train()
    state.discriminator.train()

    result = state.generator(images, masks)
    fake = result.composited

    d_real = state.discriminator(images, masks)
    d_fake = state.discriminator(fake.detach(), masks)
    l_d = discriminator_loss(d_real, d_fake)
    if not torch.isfinite(l_d):
        raise TrainingError(f"discriminator loss is non-finite at step {state.step}")
    state.d_opt.zero_grad(set_to_none=True)
    l_d.backward()
    state.d_opt.step()

    levels = cfg.network.levels
    image_pyr = build_pyramid(images, levels)
    structure_pyr = build_pyramid(structures, levels)
    d_real_g = state.discriminator(images, masks)
    d_fake_g = state.discriminator(fake, masks)
    report = total_generator_loss(
        result, image_pyr, structure_pyr, state.extractor, d_real_g, d_fake_g, cfg.weights
    )
    state.g_opt.zero_grad(set_to_none=True)
    report.total.backward()
    state.g_opt.step()

    state.step += 1
    scalars = {"step": state.step, "d_loss": float(l_d.detach()), **report.as_dict()}
    worst = max(abs(v) for k, v in scalars.items() if k != "step")
    if worst > cfg.divergence_limit:
        raise TrainingError(
            f"training diverged at step {state.step}: a loss reached {worst:.3e} "
            f"(limit {cfg.divergence_limit:.1e})"
        )
    return scalars


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def _pack_optimizer(opt: torch.optim.Adam, prefix: str, tensors: dict) -> list[dict]:
    sd = opt.state_dict()
    for pid, st in sd["state"].items():
        for key, val in st.items():
            tensors[f"{prefix}.{pid}.{key}"] = val.detach().cpu().numpy()
    return sd["param_groups"]


def _unpack_optimizer(opt: torch.optim.Adam, prefix: str, tensors: dict, groups: list) -> None:
    st: dict[int, dict] = {}
    head = prefix + "."
    for name, arr in tensors.items():
        if not name.startswith(head):
            continue
        pid_s, key = name[len(head):].split(".", 1)
        st.setdefault(int(pid_s), {})[key] = torch.from_numpy(arr.copy())
    opt.load_state_dict({"state": st, "param_groups": groups})


def save_checkpoint(state: TrainState, path: str | Path) -> None:
    """Write the complete training state to a tensor container."""
    tensors: dict[str, np.ndarray] = {}
    for key, val in state.generator.state_dict().items():
        tensors[f"generator.{key}"] = val.detach().cpu().numpy()
    for key, val in state.discriminator.state_dict().items():
        tensors[f"discriminator.{key}"] = val.detach().cpu().numpy()
    g_groups = _pack_optimizer(state.g_opt, "g_opt", tensors)
    d_groups = _pack_optimizer(state.d_opt, "d_opt", tensors)
    tensors["torch_rng"] = torch.get_rng_state().numpy()
    meta = {
        "checkpoint_version": CHECKPOINT_VERSION,
        "step": state.step,
        "config": state.config.to_dict(),
        "g_opt_groups": g_groups,
        "d_opt_groups": d_groups,
        "numpy_rng": state.rng.bit_generator.state,
        "dataset": state.dataset.state_dict(),
    }
    save_tensors(path, tensors, meta)


def load_checkpoint(path: str | Path) -> TrainState:
    """Rebuild a :class:`TrainState` that continues exactly where it stopped."""
    tensors, meta = load_tensors(path)
    if meta.get("checkpoint_version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint version {meta.get('checkpoint_version')!r} in {path}"
        )
    config = TrainConfig.from_dict(meta["config"])
    state = init_state(config)
    state.generator.load_state_dict({
        k[len("generator."):]: torch.from_numpy(v.copy())
        for k, v in tensors.items() if k.startswith("generator.")
    })
    state.discriminator.load_state_dict({
        k[len("discriminator."):]: torch.from_numpy(v.copy())
        for k, v in tensors.items() if k.startswith("discriminator.")
    })
    _unpack_optimizer(state.g_opt, "g_opt", tensors, meta["g_opt_groups"])
    _unpack_optimizer(state.d_opt, "d_opt", tensors, meta["d_opt_groups"])
    torch.set_rng_state(torch.from_numpy(tensors["torch_rng"].copy()))
    state.rng.bit_generator.state = meta["numpy_rng"]
    state.dataset.load_state_dict(meta["dataset"])
    state.step = int(meta["step"])
    return state


def load_generator(path: str | Path) -> tuple[torch.nn.Module, TrainConfig]:
    """Load just the generator from a checkpoint (for inference commands).

    Unlike :func:`load_checkpoint` this touches no dataset or optimizer state,
    so it works on machines that don't have the training data.
    """
    tensors, meta = load_tensors(path)
    if meta.get("checkpoint_version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint version {meta.get('checkpoint_version')!r} in {path}"
        )
    config = TrainConfig.from_dict(meta["config"])
    generator = build_generator(config.network)
    generator.load_state_dict({
        k[len("generator."):]: torch.from_numpy(v.copy())
        for k, v in tensors.items() if k.startswith("generator.")
    })
    generator.eval()
    return generator, config


# ---------------------------------------------------------------------------
# loop
# ---------------------------------------------------------------------------

def train_loop(
    config: TrainConfig | None = None,
    resume_path: str | Path | None = None,
    steps: int | None = None,
    quiet: bool = True,
) -> tuple[TrainState, list[dict[str, float]]]:
    """Run (or continue) a training run; returns final state and step logs.

    ``steps`` overrides ``config.steps`` as the absolute target step count.
    Logs append to ``out_dir/log.jsonl``; checkpoints land in ``out_dir`` at
    the configured cadence plus a final ``checkpoint_final.tsic``.
    """
    if resume_path is not None:
        state = load_checkpoint(resume_path)
        config = state.config
    else:
        if config is None:
            raise TrainingError("train_loop needs a config or a resume path")
        state = init_state(config)
    target = steps if steps is not None else config.steps

    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    history: list[dict[str, float]] = []
    t0 = time.monotonic()
    with open(out_dir / "log.jsonl", "a") as log_f:
        while state.step < target:
            scalars = train_step(state, *sample_batch(state))
            history.append(scalars)
            if state.step % max(1, config.log_every) == 0 or state.step == target:
                record = {**scalars, "elapsed_s": round(time.monotonic() - t0, 3)}
                log_f.write(json.dumps(record) + "\n")
                log_f.flush()
                if not quiet:
                    print(
                        f"step {state.step}/{target}  total {scalars['total']:.4f}  "
                        f"d {scalars['d_loss']:.4f}",
                        flush=True,
                    )
            if config.checkpoint_every and state.step % config.checkpoint_every == 0:
                save_checkpoint(state, out_dir / f"checkpoint_{state.step:07d}.tsic")
    save_checkpoint(state, out_dir / "checkpoint_final.tsic")
    return state, history
