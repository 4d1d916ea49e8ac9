"""Data pipeline: images, irregular masks, structure labels, pyramids.

Images live in [-1, 1] as float32 CHW tensors (value = v / 255 * 2 - 1).
Masks are binary with 1 marking the hole. Structure labels are produced on
the fly by an edge-preserving smoothing filter, so no second ground-truth
directory is needed. All sampling goes through numpy Generators seeded from
(seed, stream, counter) tuples, which keeps every sample reproducible and
the dataset state serializable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .errors import ConfigurationError, InputError, MaskGenerationError

# named hole-area bins (fractions of total pixels)
MASK_BINS: dict[str, tuple[float, float]] = {
    "10-20": (0.10, 0.20),
    "20-30": (0.20, 0.30),
    "30-40": (0.30, 0.40),
    "40-50": (0.40, 0.50),
}

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp", ".webp")

# structure-label filter parameters
SMOOTH_ITERATIONS = 3
SMOOTH_SIGMA_SPATIAL = 3.0
SMOOTH_SIGMA_RANGE = 0.1
SMOOTH_RADIUS = 6


def parse_bin(name: str) -> tuple[float, float]:
    if name not in MASK_BINS:
        raise ConfigurationError(f"unknown mask bin {name!r}; choose from {sorted(MASK_BINS)}")
    return MASK_BINS[name]


# ---------------------------------------------------------------------------
# images
# ---------------------------------------------------------------------------

def to_unit_range(u8: np.ndarray) -> np.ndarray:
    """uint8 [0, 255] -> float32 [-1, 1]."""
    return (u8.astype(np.float32) / 255.0) * 2.0 - 1.0


def to_uint8(img: np.ndarray | torch.Tensor) -> np.ndarray:
    """float [-1, 1] CHW -> uint8 HWC for display/saving."""
    if isinstance(img, torch.Tensor):
        img = img.detach().cpu().numpy()
    img = np.clip((img + 1.0) / 2.0, 0.0, 1.0)
    return np.round(img * 255.0).astype(np.uint8).transpose(1, 2, 0)


def load_image(path: str | Path, size: tuple[int, int] | None = None) -> torch.Tensor:
    """Load an RGB image as a (3, H, W) tensor in [-1, 1].

    When ``size`` is given the image is center-cropped to the target aspect
    ratio and resized bilinearly.
    """
    path = Path(path)
    if not path.is_file():
        raise InputError(f"image not found: {path}")
    with Image.open(path) as im:
        im = im.convert("RGB")
        if size is not None:
            th, tw = size
            w, h = im.size
            scale = max(tw / w, th / h)
            crop_w, crop_h = tw / scale, th / scale
            left = (w - crop_w) / 2
            top = (h - crop_h) / 2
            im = im.crop((left, top, left + crop_w, top + crop_h))
            im = im.resize((tw, th), Image.Resampling.BILINEAR)
        arr = np.asarray(im, dtype=np.uint8)
    return torch.from_numpy(to_unit_range(arr).transpose(2, 0, 1).copy())


def save_image(img: np.ndarray | torch.Tensor, path: str | Path) -> None:
    """Save a (3, H, W) [-1, 1] image as PNG/JPEG."""
    Image.fromarray(to_uint8(img)).save(str(path))


def load_mask(path: str | Path, size: tuple[int, int] | None = None) -> torch.Tensor:
    """Load a mask image as a binary (1, H, W) tensor; nonzero pixels = hole."""
    path = Path(path)
    if not path.is_file():
        raise InputError(f"mask not found: {path}")
    with Image.open(path) as im:
        im = im.convert("L")
        if size is not None and im.size != (size[1], size[0]):
            im = im.resize((size[1], size[0]), Image.Resampling.NEAREST)
        arr = np.asarray(im)
    return torch.from_numpy((arr > 127).astype(np.float32)[None])


def save_mask(mask: np.ndarray | torch.Tensor, path: str | Path) -> None:
    if isinstance(mask, torch.Tensor):
        mask = mask.detach().cpu().numpy()
    mask = np.squeeze(mask)
    Image.fromarray((mask > 0.5).astype(np.uint8) * 255).save(str(path))


# ---------------------------------------------------------------------------
# irregular masks
# ---------------------------------------------------------------------------

def _draw_stroke(canvas: np.ndarray, rng: np.random.Generator) -> None:
    """One multi-vertex brush stroke: jointed line segments with round caps."""
    h, w = canvas.shape
    scale = min(h, w)
    num_vertices = int(rng.integers(4, 13))
    max_width = max(3, scale // 8)
    brush = int(rng.integers(max(2, scale // 24), max_width + 1))
    x = float(rng.uniform(0, w))
    y = float(rng.uniform(0, h))
    angle = float(rng.uniform(0, 2 * math.pi))
    for _ in range(num_vertices):
        angle += float(rng.uniform(-1.0, 1.0))
        length = float(rng.uniform(scale / 16, scale / 4))
        nx = np.clip(x + length * math.cos(angle), 0, w - 1)
        ny = np.clip(y + length * math.sin(angle), 0, h - 1)
        cv2.line(canvas, (int(x), int(y)), (int(nx), int(ny)), 1.0, thickness=brush)
        cv2.circle(canvas, (int(nx), int(ny)), brush // 2, 1.0, -1)
        x, y = float(nx), float(ny)


def generate_irregular_mask(
    height: int,
    width: int,
    hole_range: tuple[float, float],
    rng: np.random.Generator,
    max_attempts: int = 100,
) -> np.ndarray:
    """Free-form brush-stroke mask whose hole fraction lands in ``hole_range``.

    Strokes are added until the low edge of the range is reached; an attempt
    that overshoots the high edge is thrown away and redrawn. Raises
    :class:`MaskGenerationError` when ``max_attempts`` attempts all overshoot.
    """
    lo, hi = hole_range
    if not (0.0 < lo < hi < 1.0):
        raise ConfigurationError(f"invalid hole range {hole_range}")
    total = height * width
    for _ in range(max_attempts):
        canvas = np.zeros((height, width), dtype=np.float32)
        # enough strokes to cross `lo`, with a hard cap as a safety net
        for _ in range(256):
            _draw_stroke(canvas, rng)
            if canvas.sum() / total >= lo:
                break
        ratio = canvas.sum() / total
        if lo <= ratio <= hi:
            return canvas
    raise MaskGenerationError(
        f"could not hit hole range [{lo:.2f}, {hi:.2f}] on a {height}x{width} "
        f"canvas in {max_attempts} attempts"
    )


def hole_ratio(mask: np.ndarray | torch.Tensor) -> float:
    if isinstance(mask, torch.Tensor):
        mask = mask.detach().cpu().numpy()
    return float(mask.sum() / mask.size)


# ---------------------------------------------------------------------------
# structure labels
# ---------------------------------------------------------------------------

def _joint_bilateral(img: np.ndarray, guide: np.ndarray, radius: int,
                     sigma_spatial: float, sigma_range: float) -> np.ndarray:
    """One joint bilateral pass over HWC float arrays with edge padding.

    Spatial weights come from offset distance, range weights from the guide
    image difference (L2 across channels), so edges present in the guide
    survive while texture between them is averaged away.
    """
    h, w, _ = img.shape
    pad_img = np.pad(img, ((radius, radius), (radius, radius), (0, 0)), mode="edge")
    pad_guide = np.pad(guide, ((radius, radius), (radius, radius), (0, 0)), mode="edge")
    acc = np.zeros_like(img)
    wsum = np.zeros((h, w, 1), dtype=img.dtype)
    inv_s = -1.0 / (2.0 * sigma_spatial ** 2)
    inv_r = -1.0 / (2.0 * sigma_range ** 2)
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            ws = math.exp((dy * dy + dx * dx) * inv_s)
            sh_img = pad_img[radius + dy:radius + dy + h, radius + dx:radius + dx + w]
            sh_gd = pad_guide[radius + dy:radius + dy + h, radius + dx:radius + dx + w]
            d2 = ((sh_gd - guide) ** 2).sum(axis=2, keepdims=True)
            wgt = ws * np.exp(d2 * inv_r)
            acc += wgt * sh_img
            wsum += wgt
    return acc / wsum


def structure_label(image: np.ndarray | torch.Tensor) -> torch.Tensor:
    """Edge-preserving smoothed version of ``image``: the structure target.

    Iterated joint bilateral filtering guided by the *original* image, so
    repeated passes flatten texture without eroding the dominant edges.
    Input and output are (3, H, W) in [-1, 1].
    """
    is_tensor = isinstance(image, torch.Tensor)
    arr = image.detach().cpu().numpy() if is_tensor else np.asarray(image)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise InputError(f"structure_label expects (3, H, W), got {arr.shape}")
    # work in [0, 1] HWC; sigma_range is calibrated to a unit range
    hwc = ((arr.transpose(1, 2, 0) + 1.0) / 2.0).astype(np.float64)
    guide = hwc.copy()
    out = hwc
    for _ in range(SMOOTH_ITERATIONS):
        out = _joint_bilateral(out, guide, SMOOTH_RADIUS, SMOOTH_SIGMA_SPATIAL, SMOOTH_SIGMA_RANGE)
    out = np.clip(out, 0.0, 1.0) * 2.0 - 1.0
    return torch.from_numpy(out.transpose(2, 0, 1).astype(np.float32).copy())


# ---------------------------------------------------------------------------
# pyramids and augmentation
# ---------------------------------------------------------------------------

def build_pyramid(image: torch.Tensor, levels: int) -> list[torch.Tensor]:
    """2x2 average pyramid, level 1 (index 0) = input, level l at H / 2^(l-1)."""
    if image.dim() not in (3, 4):
        raise InputError(f"expected (C,H,W) or (B,C,H,W), got {tuple(image.shape)}")
    if levels < 1:
        raise ConfigurationError(f"levels must be >= 1, got {levels}")
    batched = image.dim() == 4
    x = image if batched else image[None]
    div = 1 << (levels - 1)
    if x.shape[-1] % div or x.shape[-2] % div:
        raise InputError(
            f"spatial size {tuple(x.shape[-2:])} not divisible by 2^(levels-1) = {div}"
        )
    pyramid = [x]
    for _ in range(levels - 1):
        x = F.avg_pool2d(x, 2)
        pyramid.append(x)
    return pyramid if batched else [p[0] for p in pyramid]


def hflip(t: torch.Tensor) -> torch.Tensor:
    return torch.flip(t, dims=[-1])


@dataclass
class ImageSample:
    """One training example: image, its structure target, and a hole mask."""

    image: torch.Tensor      # (3, H, W) in [-1, 1]
    structure: torch.Tensor  # (3, H, W) in [-1, 1]
    mask: torch.Tensor       # (1, H, W) binary, 1 = hole
    index: int = -1


def collate(samples: list[ImageSample]) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    images = torch.stack([s.image for s in samples])
    structures = torch.stack([s.structure for s in samples])
    masks = torch.stack([s.mask for s in samples])
    return images, structures, masks


# ---------------------------------------------------------------------------
# synthetic scenes (hermetic data for tests and smoke training)
# ---------------------------------------------------------------------------

def synthesize_scene(rng: np.random.Generator, size: tuple[int, int] = (64, 64)) -> torch.Tensor:
    """Piecewise-smooth scene: gradient sky over flat-colored shapes.

    Scenes have strong region boundaries and smooth interiors, which is the
    regime the structure stream is meant to capture, so test networks can
    overfit them quickly.
    """
    h, w = size
    yy = np.linspace(0.0, 1.0, h, dtype=np.float32)[:, None, None]
    c0 = rng.uniform(0.1, 0.9, size=3).astype(np.float32)
    c1 = rng.uniform(0.1, 0.9, size=3).astype(np.float32)
    img = c0 * (1 - yy) + c1 * yy
    img = np.broadcast_to(img, (h, w, 3)).copy()
    for _ in range(int(rng.integers(3, 7))):
        color = rng.uniform(0.05, 0.95, size=3).astype(np.float32)
        kind = rng.integers(0, 2)
        if kind == 0:
            center = (int(rng.integers(0, w)), int(rng.integers(0, h)))
            axes = (int(rng.integers(w // 10, w // 3)), int(rng.integers(h // 10, h // 3)))
            angle = float(rng.uniform(0, 180))
            cv2.ellipse(img, center, axes, angle, 0, 360, color.tolist(), -1)
        else:
            pts = rng.integers(0, min(h, w), size=(int(rng.integers(3, 6)), 2))
            cv2.fillPoly(img, [pts.astype(np.int32)], color.tolist())
    img = cv2.GaussianBlur(img, (0, 0), 0.8)
    chw = np.clip(img, 0.0, 1.0).transpose(2, 0, 1) * 2.0 - 1.0
    return torch.from_numpy(chw.astype(np.float32).copy())


# ---------------------------------------------------------------------------
# dataset
# ---------------------------------------------------------------------------

class InpaintingDataset:
    """Map-style dataset pairing images with structure labels and fresh masks.

    ``source`` is either a directory of images or ``"synthetic"``. Images and
    structure labels are computed once per index and cached (the bilateral
    filter is the expensive part). Masks are redrawn on every access from a
    counter-based rng — or fixed per index with ``fixed_masks=True``, which
    overfit runs use. The mask draw counter is the only mutable state; it
    round-trips through :meth:`state_dict` / :meth:`load_state_dict` so a
    resumed run sees the same mask sequence it would have seen uninterrupted.
    """

    def __init__(
        self,
        source: str | Path = "synthetic",
        size: tuple[int, int] = (64, 64),
        seed: int = 0,
        bins: tuple[tuple[float, float], ...] = tuple(MASK_BINS.values()),
        augment: bool = True,
        fixed_masks: bool = False,
        n_synthetic: int = 64,
    ):
        self.size = tuple(size)
        self.seed = int(seed)
        self.bins = tuple(tuple(b) for b in bins)
        self.augment = augment
        self.fixed_masks = fixed_masks
        self._mask_draws = 0
        self._cache: dict[int, tuple[torch.Tensor, torch.Tensor]] = {}
        if not self.bins:
            raise ConfigurationError("need at least one mask bin")

        self.paths: list[Path] | None
        if str(source) == "synthetic":
            self.paths = None
            self._n = int(n_synthetic)
        else:
            root = Path(source)
            if not root.is_dir():
                raise InputError(f"image directory not found: {root}")
            self.paths = sorted(
                p for p in root.rglob("*") if p.suffix.lower() in IMAGE_EXTENSIONS
            )
            if not self.paths:
                raise InputError(f"no images under {root}")
            self._n = len(self.paths)

    def __len__(self) -> int:
        return self._n

    def image_pair(self, index: int) -> tuple[torch.Tensor, torch.Tensor]:
        """(image, structure label) for ``index``, cached, no mask drawn."""
        if index not in self._cache:
            if self.paths is None:
                rng = np.random.default_rng([self.seed, 11, index])
                image = synthesize_scene(rng, self.size)
            else:
                image = load_image(self.paths[index], self.size)
            self._cache[index] = (image, structure_label(image))
        return self._cache[index]

    def _mask_rng(self, index: int) -> np.random.Generator:
        if self.fixed_masks:
            return np.random.default_rng([self.seed, 13, index])
        draw = self._mask_draws
        self._mask_draws += 1
        return np.random.default_rng([self.seed, 17, draw])

    def __getitem__(self, index: int) -> ImageSample:
        if not 0 <= index < self._n:
            raise InputError(f"index {index} out of range for dataset of {self._n}")
        image, structure = self.image_pair(index)
        rng = self._mask_rng(index)
        lo, hi = self.bins[int(rng.integers(0, len(self.bins)))]
        h, w = self.size
        mask = torch.from_numpy(generate_irregular_mask(h, w, (lo, hi), rng)[None])
        if self.augment and rng.random() < 0.5:
            image, structure, mask = hflip(image), hflip(structure), hflip(mask)
        return ImageSample(image=image, structure=structure, mask=mask, index=index)

    def state_dict(self) -> dict:
        return {"mask_draws": self._mask_draws}

    def load_state_dict(self, state: dict) -> None:
        self._mask_draws = int(state["mask_draws"])
