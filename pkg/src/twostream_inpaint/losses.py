"""Training objectives for the two-stream generator.

Four terms drive the generator: a multi-scale L1 pyramid term on both
streams, a perceptual term and a style (Gram) term computed on frozen
feature pyramids, and a relativistic average least-squares adversarial
term shared with the discriminator. All reductions are means, so the
magnitudes are resolution-independent.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError, InputError, TrainingError
from .serialization import load_tensors

# pyramid / perceptual / style / adversarial
DEFAULT_WEIGHTS = (1.0, 0.1, 250.0, 0.1)

# seed for the default frozen feature pyramid; fixed so that the extractor is
# a pure function of the code and resume-identical across runs
FEATURE_SEED = 709


@dataclass
class LossWeights:
    pyramid: float = DEFAULT_WEIGHTS[0]
    perceptual: float = DEFAULT_WEIGHTS[1]
    style: float = DEFAULT_WEIGHTS[2]
    adversarial: float = DEFAULT_WEIGHTS[3]

    def to_dict(self) -> dict:
        return {
            "pyramid": self.pyramid,
            "perceptual": self.perceptual,
            "style": self.style,
            "adversarial": self.adversarial,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LossWeights":
        return cls(**d)


def _check_finite(name: str, value: torch.Tensor) -> torch.Tensor:
    if not torch.isfinite(value):
        raise TrainingError(f"{name} loss is non-finite ({value.item()})")
    return value


def pyramid_loss(preds: list[torch.Tensor], targets: list[torch.Tensor]) -> torch.Tensor:
    """Sum over scales of mean absolute error, predictions clamped to [-1, 1].

    Heads at coarse scales are linear, so their raw outputs can leave the
    image range; clamping at loss time keeps the target always attainable.
    """
    if len(preds) != len(targets):
        raise InputError(f"pyramid length mismatch: {len(preds)} preds vs {len(targets)} targets")
    if not preds:
        raise InputError("empty pyramid")
    total = preds[0].new_zeros(())
    for i, (p, t) in enumerate(zip(preds, targets)):
        if p.shape != t.shape:
            raise InputError(
                f"pyramid level {i} shape mismatch: {tuple(p.shape)} vs {tuple(t.shape)}"
            )
        total = total + (p.clamp(-1.0, 1.0) - t).abs().mean()
    return total


def gram_matrix(feat: torch.Tensor) -> torch.Tensor:
    """Channel covariance (B, C, C) normalized by C*H*W."""
    if feat.dim() != 4:
        raise InputError(f"expected (B, C, H, W) features, got {tuple(feat.shape)}")
    b, c, h, w = feat.shape
    flat = feat.reshape(b, c, h * w)
    return torch.bmm(flat, flat.transpose(1, 2)) / (c * h * w)


def _feature_l1(feats_p, feats_t) -> torch.Tensor:
    total = feats_p[0].new_zeros(())
    for fp, ft in zip(feats_p, feats_t):
        total = total + (fp - ft).abs().mean()
    return total


def _gram_l1(feats_p, feats_t) -> torch.Tensor:
    total = feats_p[0].new_zeros(())
    for fp, ft in zip(feats_p, feats_t):
        total = total + (gram_matrix(fp) - gram_matrix(ft)).abs().mean()
    return total


def perceptual_loss(extractor, pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Sum over extractor stages of mean absolute feature difference."""
    return _feature_l1(extractor(pred), extractor(target))


def style_loss(extractor, pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Sum over extractor stages of mean absolute Gram-matrix difference."""
    return _gram_l1(extractor(pred), extractor(target))


def discriminator_loss(d_real: torch.Tensor, d_fake: torch.Tensor) -> torch.Tensor:
    """Relativistic average least-squares objective for the discriminator.

    Pushes real scores one unit above the mean fake score and fake scores
    one unit below the mean real score.
    """
    real_mean = d_real.mean()
    fake_mean = d_fake.mean()
    return ((d_real - fake_mean - 1.0) ** 2).mean() + ((d_fake - real_mean + 1.0) ** 2).mean()


def generator_adversarial_loss(d_real: torch.Tensor, d_fake: torch.Tensor) -> torch.Tensor:
    """Relativistic average least-squares objective for the generator (roles swapped)."""
    real_mean = d_real.mean()
    fake_mean = d_fake.mean()
    return ((d_fake - real_mean - 1.0) ** 2).mean() + ((d_real - fake_mean + 1.0) ** 2).mean()


@dataclass
class LossReport:
    """Weighted generator objective with its unweighted components.

    ``total`` is the tensor to backpropagate; the component fields are
    detached 0-dim tensors kept for logging.
    """

    total: torch.Tensor
    pyramid_detail: torch.Tensor
    pyramid_structure: torch.Tensor
    perceptual: torch.Tensor
    style: torch.Tensor
    adversarial: torch.Tensor

    def as_dict(self) -> dict[str, float]:
        return {
            "total": float(self.total.detach()),
            "pyramid_detail": float(self.pyramid_detail),
            "pyramid_structure": float(self.pyramid_structure),
            "perceptual": float(self.perceptual),
            "style": float(self.style),
            "adversarial": float(self.adversarial),
        }


def total_generator_loss(
    result,
    image_pyramid: list[torch.Tensor],
    structure_pyramid: list[torch.Tensor],
    extractor,
    d_real: torch.Tensor | None,
    d_fake: torch.Tensor | None,
    weights: LossWeights | None = None,
) -> LossReport:
    """Combine all generator terms for one forward pass.

    The perceptual term compares the full-resolution outputs of both streams
    against their targets; the style term is applied to the detail stream
    only. Passing ``None`` for the discriminator scores drops the
    adversarial term (weight treated as zero). Any non-finite component
    raises :class:`TrainingError` naming the term.
    """
    w = weights or LossWeights()
    zero = result.final_image.new_zeros(())

    pyr_d = _check_finite("detail pyramid", pyramid_loss(result.detailed_pyramid, image_pyramid))
    if result.structure_pyramid:
        pyr_s = _check_finite(
            "structure pyramid", pyramid_loss(result.structure_pyramid, structure_pyramid)
        )
    else:
        pyr_s = zero

    # the detail-stream features feed both the perceptual and the style term,
    # so extract them once
    feats_final = extractor(result.final_image)
    feats_target = extractor(image_pyramid[0])
    per = _feature_l1(feats_final, feats_target)
    if result.structure_pyramid:
        per = per + perceptual_loss(extractor, result.structure_pyramid[0], structure_pyramid[0])
    per = _check_finite("perceptual", per)

    sty = _check_finite("style", _gram_l1(feats_final, feats_target))

    if d_real is not None and d_fake is not None:
        adv = _check_finite("adversarial", generator_adversarial_loss(d_real, d_fake))
    else:
        adv = zero

    total = (
        w.pyramid * (pyr_d + pyr_s) + w.perceptual * per + w.style * sty + w.adversarial * adv
    )
    _check_finite("total", total)
    return LossReport(
        total=total,
        pyramid_detail=pyr_d.detach(),
        pyramid_structure=pyr_s.detach(),
        perceptual=per.detach(),
        style=sty.detach(),
        adversarial=adv.detach(),
    )


class RandomFeaturePyramid(nn.Module):
    """Frozen five-stage random-projection feature pyramid.

    A stack of fixed random 3x3 convs with ReLU, average-pooled between
    stages. Random shallow conv features preserve enough local statistics
    for perceptual/style objectives while keeping the package free of
    external pretrained weights. All parameters are frozen; the whole module
    is a pure function of ``seed``.
    """

    def __init__(self, channels: tuple[int, ...] = (8, 16, 32, 32, 32), seed: int = FEATURE_SEED):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        convs = []
        cin = 3
        for cout in channels:
            conv = nn.Conv2d(cin, cout, 3, padding=1)
            fan_in = cin * 9
            std = (2.0 / fan_in) ** 0.5
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * std)
                conv.bias.zero_()
            convs.append(conv)
            cin = cout
        self.convs = nn.ModuleList(convs)
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        if x.dim() != 4 or x.shape[1] != 3:
            raise InputError(f"extractor expects (B, 3, H, W), got {tuple(x.shape)}")
        feats = []
        for i, conv in enumerate(self.convs):
            if i > 0:
                x = F.avg_pool2d(x, 2)
            x = F.relu(conv(x))
            feats.append(x)
        return feats


class VGG16Features(nn.Module):
    """VGG16 relu1_1..relu5_1 feature stages, weights read from a tensor container.

    The container must hold ``convN_M.weight`` / ``convN_M.bias`` entries in
    the usual VGG16 layout. Inputs in [-1, 1] are shifted to [0, 1] and
    normalized with the ImageNet statistics the weights were trained with.
    """

    # (name, out_channels); stages are captured after the relu of each convN_1
    LAYOUT = (
        ("conv1_1", 64), ("conv1_2", 64),
        ("conv2_1", 128), ("conv2_2", 128),
        ("conv3_1", 256), ("conv3_2", 256), ("conv3_3", 256),
        ("conv4_1", 512), ("conv4_2", 512), ("conv4_3", 512),
        ("conv5_1", 512),
    )
    MEAN = (0.485, 0.456, 0.406)
    STD = (0.229, 0.224, 0.225)

    def __init__(self, weights_path: str):
        super().__init__()
        tensors, _ = load_tensors(weights_path)
        convs = []
        cin = 3
        for name, cout in self.LAYOUT:
            wk, bk = f"{name}.weight", f"{name}.bias"
            if wk not in tensors or bk not in tensors:
                raise ConfigurationError(f"feature weights missing {name} in {weights_path}")
            conv = nn.Conv2d(cin, cout, 3, padding=1)
            with torch.no_grad():
                conv.weight.copy_(torch.from_numpy(tensors[wk]).float())
                conv.bias.copy_(torch.from_numpy(tensors[bk]).float())
            convs.append(conv)
            cin = cout
        self.convs = nn.ModuleList(convs)
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()
        self.register_buffer("mean", torch.tensor(self.MEAN).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(self.STD).view(1, 3, 1, 1))

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        if x.dim() != 4 or x.shape[1] != 3:
            raise InputError(f"extractor expects (B, 3, H, W), got {tuple(x.shape)}")
        x = ((x + 1.0) / 2.0 - self.mean) / self.std
        feats = []
        block_start = True
        for (name, _), conv in zip(self.LAYOUT, self.convs):
            if block_start and name != "conv1_1":
                x = F.max_pool2d(x, 2)
            x = F.relu(conv(x))
            if name.endswith("_1"):
                feats.append(x)
            block_start = name in ("conv1_2", "conv2_2", "conv3_3", "conv4_3")
        return feats
