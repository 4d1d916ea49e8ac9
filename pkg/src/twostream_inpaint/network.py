"""Two-parallel-stream inpainting generator and patch discriminator.

The generator runs two UNets side by side. The main stream reconstructs the
full detailed image; the structure stream reconstructs only structure. Main
encoder features flow into the structure encoder through gated units, and
multi-scale structure decoder features flow back into the main decoder
through fusion blocks. Each decoder layer of each stream has a 1x1 RGB head
so images can be emitted at every scale.

Level indexing: level ``l`` runs 1..L, larger ``l`` = smaller resolution.
Encoder feature at level ``l`` has spatial size H/2^l; decoder output at
level ``l`` has spatial size H/2^(l-1). Lists in :class:`ForwardResult` are
ordered level 1 first (full resolution at index 0).
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.nn.utils.parametrizations import spectral_norm

from .blocks import (
    INSTANCE_NORM_EPS,
    AdaptiveFusionBlock,
    ConcatFusion,
    GatedUnit,
    ResidualDilatedBlock,
    init_conv_,
    leaky_relu,
)
from .errors import ConfigurationError, InputError

FUSION_MODES = ("adaptive", "concat")


@dataclass
class NetworkConfig:
    """Architecture hyperparameters; the parameter set is a pure function of this."""

    levels: int = 4
    base_channels: int = 64
    max_channels: int = 512
    input_size: tuple[int, int] = (64, 64)
    bottleneck_blocks: int = 4
    attention_reduction: int = 4
    # ablation switches
    structure_stream: bool = True
    gated_units: bool = True
    fusion: str = "adaptive"
    discriminator_widths: tuple[int, ...] = (64, 128, 256, 256, 256)

    def __post_init__(self):
        if isinstance(self.input_size, int):
            self.input_size = (self.input_size, self.input_size)
        self.input_size = tuple(self.input_size)
        self.discriminator_widths = tuple(self.discriminator_widths)
        if self.levels < 2:
            raise ConfigurationError(f"need at least 2 levels, got {self.levels}")
        h, w = self.input_size
        div = 1 << self.levels
        if h % div or w % div:
            raise ConfigurationError(
                f"input size {self.input_size} not divisible by 2^levels = {div}"
            )
        if self.fusion not in FUSION_MODES:
            raise ConfigurationError(f"fusion must be one of {FUSION_MODES}, got {self.fusion!r}")

    @property
    def encoder_channels(self) -> list[int]:
        """Channel count of encoder level l at index l-1 (doubling, capped)."""
        return [min(self.base_channels << (l - 1), self.max_channels)
                for l in range(1, self.levels + 1)]

    @property
    def decoder_channels(self) -> list[int]:
        """Channel count of decoder level l at index l-1."""
        enc = self.encoder_channels
        return [enc[0]] + enc[:-1]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_size"] = list(self.input_size)
        d["discriminator_widths"] = list(self.discriminator_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        d = dict(d)
        d["input_size"] = tuple(d["input_size"])
        d["discriminator_widths"] = tuple(d["discriminator_widths"])
        return cls(**d)


@dataclass
class ForwardResult:
    """Everything one generator pass produces.

    Pyramid lists are ordered level 1 first: ``detailed_pyramid[0]`` is the
    full-resolution image (tanh-activated; equal to ``final_image``), entries
    at index i are the raw head outputs at spatial size H/2^i. Structure
    lists are empty when the structure stream is disabled, ``gate_maps`` is
    empty when gated units are disabled.
    """

    detailed_pyramid: list[torch.Tensor]
    structure_pyramid: list[torch.Tensor]
    final_image: torch.Tensor
    composited: torch.Tensor
    gate_maps: list[torch.Tensor] = field(default_factory=list)
    structure_features: list[torch.Tensor] = field(default_factory=list)


class _EncoderLayer(nn.Module):
    """4x4 stride-2 conv -> instance norm -> LeakyReLU; halves H and W."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, out_channels, 4, stride=2, padding=1)
        init_conv_(self.conv)
        self.norm = nn.InstanceNorm2d(out_channels, eps=INSTANCE_NORM_EPS, affine=True)

    def forward(self, x):
        return leaky_relu(self.norm(self.conv(x)))


class _DecoderLayer(nn.Module):
    """Nearest x2 upsample, concat skip, 3x3 conv -> norm -> LeakyReLU."""

    def __init__(self, in_channels: int, skip_channels: int, out_channels: int):
        super().__init__()
        self.conv = nn.Conv2d(in_channels + skip_channels, out_channels, 3, padding=1)
        init_conv_(self.conv)
        self.norm = nn.InstanceNorm2d(out_channels, eps=INSTANCE_NORM_EPS, affine=True)

    def forward(self, prev, skip):
        up = F.interpolate(prev, scale_factor=2, mode="nearest")
        if up.shape[2:] != skip.shape[2:]:
            raise InputError(
                f"decoder skip mismatch: upsampled {tuple(up.shape)} vs skip {tuple(skip.shape)}"
            )
        return leaky_relu(self.norm(self.conv(torch.cat([up, skip], dim=1))))


class TwoStreamGenerator(nn.Module):
    """Main (detail) and structure streams with gated links and fusion blocks."""

    IN_CHANNELS = 4  # RGB + mask

    def __init__(self, config: NetworkConfig):
        super().__init__()
        self.config = config
        L = config.levels
        enc = config.encoder_channels
        dec = config.decoder_channels

        # main stream
        self.main_encoder = nn.ModuleList(
            [_EncoderLayer(self.IN_CHANNELS if l == 1 else enc[l - 2], enc[l - 1])
             for l in range(1, L + 1)]
        )
        self.bottleneck = nn.ModuleList(
            [ResidualDilatedBlock(enc[-1]) for _ in range(config.bottleneck_blocks)]
        )
        # decoder layer l consumes the previous decoder output (bottleneck at l = L)
        # and the encoder skip at its output resolution (the network input at l = 1)
        self.main_decoder = nn.ModuleList(
            [_DecoderLayer(
                in_channels=enc[-1] if l == L else dec[l],
                skip_channels=self.IN_CHANNELS if l == 1 else enc[l - 2],
                out_channels=dec[l - 1],
            ) for l in range(L, 0, -1)]
        )
        self.main_heads = nn.ModuleList([nn.Conv2d(dec[l - 1], 3, 1) for l in range(1, L + 1)])
        for head in self.main_heads:
            init_conv_(head)

        # structure stream + links
        if config.structure_stream:
            self.structure_encoder = nn.ModuleList(
                [_EncoderLayer(self.IN_CHANNELS if l == 1 else 2 * enc[l - 2], enc[l - 1])
                 for l in range(1, L + 1)]
            )
            self.gates = (
                nn.ModuleList([GatedUnit(enc[l - 1]) for l in range(1, L + 1)])
                if config.gated_units else None
            )
            self.structure_decoder = nn.ModuleList(
                [_DecoderLayer(
                    in_channels=2 * enc[-1] if l == L else dec[l],
                    skip_channels=self.IN_CHANNELS if l == 1 else enc[l - 2],
                    out_channels=dec[l - 1],
                ) for l in range(L, 0, -1)]
            )
            self.structure_heads = nn.ModuleList(
                [nn.Conv2d(dec[l - 1], 3, 1) for l in range(1, L + 1)]
            )
            for head in self.structure_heads:
                init_conv_(head)
            fusion_cls = AdaptiveFusionBlock if config.fusion == "adaptive" else ConcatFusion
            kwargs = {} if config.fusion == "concat" else {"reduction": config.attention_reduction}
            self.fusions = nn.ModuleList(
                [fusion_cls(dec[l - 1], dec[l - 1], dec[l - 1], **kwargs)
                 for l in range(1, L + 1)]
            )
        else:
            self.structure_encoder = None
            self.structure_decoder = None
            self.structure_heads = None
            self.gates = None
            self.fusions = None

    # ---- sub-passes -------------------------------------------------------

    def _validate(self, image: torch.Tensor, mask: torch.Tensor) -> None:
        if image.dim() != 4 or image.shape[1] != 3:
            raise InputError(f"image must be (B, 3, H, W), got {tuple(image.shape)}")
        if mask.dim() != 4 or mask.shape[1] != 1 or mask.shape[2:] != image.shape[2:]:
            raise InputError(f"mask must be (B, 1, H, W) matching image, got {tuple(mask.shape)}")
        div = 1 << self.config.levels
        if image.shape[2] % div or image.shape[3] % div:
            raise ConfigurationError(
                f"input size {tuple(image.shape[2:])} not divisible by 2^levels = {div}"
            )
        if not torch.isfinite(image).all():
            raise InputError("image contains non-finite entries")
        if not torch.logical_or(mask == 0, mask == 1).all():
            raise InputError("mask must be binary (0 = known, 1 = hole)")

    def encode_main(self, net_in: torch.Tensor) -> list[torch.Tensor]:
        """Run the main-stream encoder; returns features for levels 1..L."""
        feats = []
        x = net_in
        for layer in self.main_encoder:
            x = layer(x)
            feats.append(x)
        return feats

    def encode_structure(
        self, net_in: torch.Tensor, main_feats: list[torch.Tensor]
    ) -> tuple[list[torch.Tensor], torch.Tensor, list[torch.Tensor]]:
        """Run the structure-stream encoder.

        Level 1 sees only the network input; level l >= 2 concatenates the
        previous structure feature with the (gated) main-stream feature of
        level l-1. Returns ``(features, deep_link, gate_maps)`` where
        ``deep_link`` is the (gated) level-L main feature handed to the
        structure decoder.
        """
        if self.structure_encoder is None:
            raise ConfigurationError("structure stream disabled in this configuration")
        L = self.config.levels
        if len(main_feats) != L:
            raise InputError(f"expected {L} main-stream features, got {len(main_feats)}")
        gate_maps: list[torch.Tensor] = []
        feats: list[torch.Tensor] = []
        x = self.structure_encoder[0](net_in)
        feats.append(x)
        for l in range(2, L + 1):
            link = main_feats[l - 2]
            if self.gates is not None:
                link, gate = self.gates[l - 2](link)
                gate_maps.append(gate)
            x = self.structure_encoder[l - 1](torch.cat([feats[-1], link], dim=1))
            feats.append(x)
        deep = main_feats[L - 1]
        if self.gates is not None:
            deep, gate = self.gates[L - 1](deep)
            gate_maps.append(gate)
        return feats, deep, gate_maps

    def run_bottleneck(self, x: torch.Tensor) -> torch.Tensor:
        """Shape-preserving stack of residual dilated blocks."""
        for block in self.bottleneck:
            x = block(x)
        return x

    def decode_structure(
        self, feats: list[torch.Tensor], deep_link: torch.Tensor, net_in: torch.Tensor
    ) -> tuple[list[torch.Tensor], list[torch.Tensor]]:
        """Structure decoder; returns (features, RGB pyramid), level 1 first."""
        L = self.config.levels
        prev = torch.cat([feats[-1], deep_link], dim=1)
        dec_feats: list[torch.Tensor] = [None] * L
        pyramid: list[torch.Tensor] = [None] * L
        for i, l in enumerate(range(L, 0, -1)):
            skip = net_in if l == 1 else feats[l - 2]
            prev = self.structure_decoder[i](prev, skip)
            dec_feats[l - 1] = prev
            head = self.structure_heads[l - 1](prev)
            pyramid[l - 1] = torch.tanh(head) if l == 1 else head
        return dec_feats, pyramid

    def decode_main(
        self,
        bottleneck_out: torch.Tensor,
        main_feats: list[torch.Tensor],
        structure_feats: list[torch.Tensor] | None,
        net_in: torch.Tensor,
    ) -> tuple[list[torch.Tensor], list[torch.Tensor], torch.Tensor]:
        """Main decoder with per-level fusion of structure decoder features.

        Returns (decoder features, RGB pyramid, full-resolution image),
        feature/pyramid lists level 1 first.
        """
        L = self.config.levels
        prev = bottleneck_out
        dec_feats: list[torch.Tensor] = [None] * L
        pyramid: list[torch.Tensor] = [None] * L
        for i, l in enumerate(range(L, 0, -1)):
            skip = net_in if l == 1 else main_feats[l - 2]
            x_dec = self.main_decoder[i](prev, skip)
            if self.fusions is not None and structure_feats is not None:
                if structure_feats[l - 1] is None:
                    raise InputError(f"missing structure decoder feature for level {l}")
                x_dec = self.fusions[l - 1](x_dec, structure_feats[l - 1])
            dec_feats[l - 1] = x_dec
            head = self.main_heads[l - 1](x_dec)
            pyramid[l - 1] = torch.tanh(head) if l == 1 else head
            prev = x_dec
        return dec_feats, pyramid, pyramid[0]

    # ---- full pass --------------------------------------------------------

    def forward(self, image: torch.Tensor, mask: torch.Tensor) -> ForwardResult:
        """Inpaint ``image`` (range [-1, 1]) under ``mask`` (1 = hole).

        Hole pixels are zeroed before the streams see the input; the
        composited output pastes known pixels back over the prediction.
        """
        self._validate(image, mask)
        known = 1.0 - mask
        net_in = torch.cat([image * known, mask], dim=1)

        main_feats = self.encode_main(net_in)
        if self.config.structure_stream:
            ss_feats, deep_link, gate_maps = self.encode_structure(net_in, main_feats)
        bneck = self.run_bottleneck(main_feats[-1])
        if self.config.structure_stream:
            s_dec, structure_pyramid = self.decode_structure(ss_feats, deep_link, net_in)
        else:
            s_dec, structure_pyramid, gate_maps = None, [], []
        _, detailed_pyramid, final = self.decode_main(bneck, main_feats, s_dec, net_in)

        composited = image * known + mask * final
        return ForwardResult(
            detailed_pyramid=detailed_pyramid,
            structure_pyramid=structure_pyramid,
            final_image=final,
            composited=composited,
            gate_maps=gate_maps,
            structure_features=list(s_dec) if s_dec is not None else [],
        )

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


class PatchDiscriminator(nn.Module):
    """Patch discriminator: spectral-normalized 5x5 stride-2 convs.

    Input is the image concatenated with its mask; output is a map of raw
    per-patch scores (no sigmoid, the least-squares objective uses raw
    scores). Six layers halve the resolution six times.
    """

    IN_CHANNELS = 4

    def __init__(self, widths: tuple[int, ...] = (64, 128, 256, 256, 256)):
        super().__init__()
        chain = [self.IN_CHANNELS, *widths, 1]
        layers = []
        for cin, cout in zip(chain[:-1], chain[1:]):
            conv = nn.Conv2d(cin, cout, 5, stride=2, padding=2)
            init_conv_(conv)
            layers.append(spectral_norm(conv))
        self.convs = nn.ModuleList(layers)

    def forward(self, image: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        if image.shape[1] != 3 or mask.shape[1] != 1 or image.shape[2:] != mask.shape[2:]:
            raise InputError(
                f"discriminator expects (B,3,H,W) image and matching (B,1,H,W) mask, "
                f"got {tuple(image.shape)} and {tuple(mask.shape)}"
            )
        x = torch.cat([image, mask], dim=1)
        for conv in self.convs[:-1]:
            x = leaky_relu(conv(x))
        return self.convs[-1](x)


def build_generator(config: NetworkConfig, seed: int = 0) -> TwoStreamGenerator:
    """Construct a generator with all weights drawn from ``seed``."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return TwoStreamGenerator(config)


def build_discriminator(config: NetworkConfig, seed: int = 0) -> PatchDiscriminator:
    """Construct a discriminator with all weights drawn from ``seed``."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return PatchDiscriminator(config.discriminator_widths)
