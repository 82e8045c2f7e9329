"""Dataset ingestion, differentiable two-view augmentation, poison application.

On-disk dataset layout:

    <root>/labels.txt                  lines of "<class_index> <class_name>"
    <root>/<split>/<class_index>/*.png

Images live in memory as float32 tensors in [0, 1] with shape (n, C, H, W),
ordered by class index then lexicographically by file name; that order defines
the sample ids perturbation sets are keyed by.

The augmentation pipeline (random resized crop, horizontal flip, color jitter,
random grayscale) is built from grid_sample and linear color ops so gradients
flow back to the input image; attacks rely on d(aug(x + delta))/d(delta).
Parameter drawing is split from application so PGD inner loops can hold one
set of views fixed across steps.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .errors import DataError
from .perturb import PerturbationSet


@dataclass
class Dataset:
    images: torch.Tensor  # (n, C, H, W) float32 in [0, 1]
    labels: torch.Tensor  # (n,) int64
    class_names: list[str]
    split_tag: str = ""
    sample_names: list[str] | None = None  # "<class_index>/<file>" per sample, for re-export
    _fingerprint: str | None = field(default=None, repr=False, compare=False)

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def class_count(self) -> int:
        return len(self.class_names)

    @property
    def image_shape(self) -> tuple[int, ...]:
        return tuple(self.images.shape[1:])

    def batch(self, idx: torch.Tensor) -> torch.Tensor:
        return self.images[idx]

    def fingerprint(self) -> str:
        """sha256 over dimensions, labels, and raw image bytes; order-sensitive."""
        if self._fingerprint is None:
            h = hashlib.sha256()
            h.update(np.asarray([len(self), self.class_count, *self.image_shape], dtype="<i8").tobytes())
            h.update(self.labels.cpu().numpy().astype("<i8").tobytes())
            h.update(self.images.cpu().contiguous().numpy().astype("<f4", copy=False).tobytes())
            self._fingerprint = h.hexdigest()
        return self._fingerprint


def subset(dataset: Dataset, ids: torch.Tensor) -> Dataset:
    names = None
    if dataset.sample_names is not None:
        names = [dataset.sample_names[int(i)] for i in ids]
    return Dataset(
        images=dataset.images[ids].clone(),
        labels=dataset.labels[ids].clone(),
        class_names=list(dataset.class_names),
        split_tag=dataset.split_tag,
        sample_names=names,
    )


def _read_label_index(root: Path) -> list[str]:
    path = root / "labels.txt"
    if not path.is_file():
        raise DataError(f"label index file not found: {path}")
    entries: dict[int, str] = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split(None, 1)
        if len(parts) != 2 or not parts[0].lstrip("-").isdigit():
            raise DataError(f"malformed line {lineno} in {path}: {line!r}")
        idx = int(parts[0])
        if idx in entries:
            raise DataError(f"duplicate class index {idx} in {path}")
        entries[idx] = parts[1]
    if not entries:
        raise DataError(f"empty label index: {path}")
    if sorted(entries) != list(range(len(entries))):
        raise DataError(f"class indices in {path} must be contiguous from 0")
    return [entries[i] for i in range(len(entries))]


def load_dataset(root, split: str) -> Dataset:
    root = Path(root)
    class_names = _read_label_index(root)
    split_dir = root / split
    if not split_dir.is_dir():
        raise DataError(f"split directory not found: {split_dir}")

    images: list[np.ndarray] = []
    labels: list[int] = []
    names: list[str] = []
    shape = None
    for entry in sorted(split_dir.iterdir(), key=lambda p: p.name):
        if not entry.is_dir():
            continue
        try:
            cls = int(entry.name)
        except ValueError as exc:
            raise DataError(f"class directory is not an integer index: {entry}") from exc
        if not 0 <= cls < len(class_names):
            raise DataError(f"label out of range: {entry}")
        for img_path in sorted(entry.glob("*.png"), key=lambda p: p.name):
            try:
                with Image.open(img_path) as im:
                    im = im.convert("RGB") if im.mode not in ("L", "RGB") else im.copy()
                    arr = np.asarray(im, dtype=np.uint8)
            except Exception as exc:
                raise DataError(f"image decode failure: {img_path}: {exc}") from exc
            if arr.ndim == 2:
                arr = arr[:, :, None]
            if shape is None:
                shape = arr.shape
            elif arr.shape != shape:
                raise DataError(
                    f"inconsistent image shape {arr.shape} (expected {shape}): {img_path}"
                )
            images.append(arr)
            labels.append(cls)
            names.append(f"{cls}/{img_path.name}")
    if not images:
        raise DataError(f"no samples found under {split_dir}")

    stacked = np.stack(images).astype(np.float32) / 255.0  # (n, H, W, C)
    tensor = torch.from_numpy(stacked).permute(0, 3, 1, 2).contiguous()
    # order is class index, then lexicographic file name: already grouped since
    # directories were visited in sorted order, but sort defensively by (label, name)
    order = sorted(range(len(labels)), key=lambda i: (labels[i], names[i]))
    tensor = tensor[order]
    label_tensor = torch.tensor([labels[i] for i in order], dtype=torch.int64)
    names = [names[i] for i in order]
    return Dataset(tensor, label_tensor, class_names, split_tag=split, sample_names=names)


def resolve_data_root(explicit=None) -> Path:
    """CLI data root: --data flag wins, else POISONFORGE_DATA_ROOT."""
    if explicit:
        return Path(explicit)
    env = os.environ.get("POISONFORGE_DATA_ROOT")
    if env:
        return Path(env)
    raise DataError("no data root given: pass --data or set POISONFORGE_DATA_ROOT")


# ---------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentConfig:
    crop_scale: tuple[float, float] = (0.2, 1.0)
    crop_ratio: tuple[float, float] = (3.0 / 4.0, 4.0 / 3.0)
    flip_prob: float = 0.5
    jitter_prob: float = 0.8
    jitter_strength: float = 0.4
    grayscale_prob: float = 0.2

    @classmethod
    def identity(cls) -> "AugmentConfig":
        return cls(
            crop_scale=(1.0, 1.0),
            crop_ratio=(1.0, 1.0),
            flip_prob=0.0,
            jitter_prob=0.0,
            grayscale_prob=0.0,
        )

    @property
    def crop_enabled(self) -> bool:
        # a full-area crop is the identity regardless of the ratio range
        return self.crop_scale != (1.0, 1.0)

    def validate(self):
        lo, hi = self.crop_scale
        if not (0 < lo <= hi <= 1):
            raise ValueError(f"crop_scale must satisfy 0 < lo <= hi <= 1, got {self.crop_scale}")
        rlo, rhi = self.crop_ratio
        if not (0 < rlo <= rhi):
            raise ValueError(f"crop_ratio must be positive and ordered, got {self.crop_ratio}")
        for name in ("flip_prob", "jitter_prob", "grayscale_prob"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        if self.jitter_strength < 0:
            raise ValueError(f"jitter_strength must be >= 0, got {self.jitter_strength}")
        return self


@dataclass
class AugmentParams:
    """Frozen draws for one batch; apply_augment is deterministic given these."""

    crop: torch.Tensor | None  # (B, 4): x0, y0, w, h in continuous pixel units
    flip: torch.Tensor         # (B,) bool
    jitter: torch.Tensor       # (B,) bool
    brightness: torch.Tensor   # (B,) multiplicative factor
    contrast: torch.Tensor
    saturation: torch.Tensor
    hue: torch.Tensor          # (B,) radians
    gray: torch.Tensor         # (B,) bool


def draw_augment_params(
    count: int, image_hw: tuple[int, int], cfg: AugmentConfig, gen: torch.Generator
) -> AugmentParams:
    height, width = image_hw
    crop = None
    if cfg.crop_enabled:
        attempts = 10
        lo, hi = cfg.crop_scale
        area_frac = lo + (hi - lo) * torch.rand(count, attempts, generator=gen)
        log_lo, log_hi = math.log(cfg.crop_ratio[0]), math.log(cfg.crop_ratio[1])
        aspect = torch.exp(log_lo + (log_hi - log_lo) * torch.rand(count, attempts, generator=gen))
        target_area = area_frac * (height * width)
        w = torch.sqrt(target_area * aspect)
        h = torch.sqrt(target_area / aspect)
        ok = (w <= width) & (h <= height)
        first_ok = ok.int().argmax(dim=1)  # 0 when no attempt fits; masked below
        rows = torch.arange(count)
        w_sel = w[rows, first_ok]
        h_sel = h[rows, first_ok]
        any_ok = ok.any(dim=1)
        w_sel = torch.where(any_ok, w_sel, torch.full_like(w_sel, float(width)))
        h_sel = torch.where(any_ok, h_sel, torch.full_like(h_sel, float(height)))
        x0 = torch.rand(count, generator=gen) * (width - w_sel)
        y0 = torch.rand(count, generator=gen) * (height - h_sel)
        crop = torch.stack([x0, y0, w_sel, h_sel], dim=1)
    flip = torch.rand(count, generator=gen) < cfg.flip_prob
    jitter = torch.rand(count, generator=gen) < cfg.jitter_prob
    s = cfg.jitter_strength
    brightness = 1.0 + s * (2.0 * torch.rand(count, generator=gen) - 1.0)
    contrast = 1.0 + s * (2.0 * torch.rand(count, generator=gen) - 1.0)
    saturation = 1.0 + s * (2.0 * torch.rand(count, generator=gen) - 1.0)
    # hue shift capped at strength/4 turns (0.4 -> +-0.1 of the color wheel)
    hue = (s / 4.0) * (2.0 * torch.rand(count, generator=gen) - 1.0) * (2.0 * math.pi)
    gray = torch.rand(count, generator=gen) < cfg.grayscale_prob
    return AugmentParams(crop, flip, jitter, brightness, contrast, saturation, hue, gray)


_GRAY_WEIGHTS = torch.tensor([0.2989, 0.5870, 0.1140])
_RGB_TO_YUV = torch.tensor(
    [
        [0.299, 0.587, 0.114],
        [-0.14713, -0.28886, 0.436],
        [0.615, -0.51499, -0.10001],
    ],
    dtype=torch.float64,
)
_YUV_TO_RGB = torch.linalg.inv(_RGB_TO_YUV)


def _grayscale(x: torch.Tensor) -> torch.Tensor:
    w = _GRAY_WEIGHTS.to(x.dtype).view(1, 3, 1, 1)
    return (x * w).sum(dim=1, keepdim=True)


def _rotate_hue(x: torch.Tensor, angle: torch.Tensor) -> torch.Tensor:
    b, c, hgt, wid = x.shape
    fwd = _RGB_TO_YUV.to(x.dtype)
    inv = _YUV_TO_RGB.to(x.dtype)
    yuv = torch.einsum("ij,bjhw->bihw", fwd, x)
    cos = torch.cos(angle).view(b, 1, 1)
    sin = torch.sin(angle).view(b, 1, 1)
    u, v = yuv[:, 1], yuv[:, 2]
    yuv = torch.stack([yuv[:, 0], u * cos - v * sin, u * sin + v * cos], dim=1)
    return torch.einsum("ij,bjhw->bihw", inv, yuv)


def _apply_color_jitter(x: torch.Tensor, params: AugmentParams) -> torch.Tensor:
    b = x.shape[0]
    on = params.jitter.view(b, 1, 1, 1)
    y = (x * params.brightness.to(x.dtype).view(b, 1, 1, 1)).clamp(0, 1)
    mean = _grayscale(y).mean(dim=(1, 2, 3), keepdim=True)
    y = ((y - mean) * params.contrast.to(x.dtype).view(b, 1, 1, 1) + mean).clamp(0, 1)
    gray = _grayscale(y)
    y = (gray + (y - gray) * params.saturation.to(x.dtype).view(b, 1, 1, 1)).clamp(0, 1)
    y = _rotate_hue(y, params.hue.to(x.dtype)).clamp(0, 1)
    return torch.where(on, y, x)


def apply_augment(images: torch.Tensor, params: AugmentParams) -> torch.Tensor:
    """Apply frozen draws; differentiable w.r.t. `images`."""
    x = images
    b, c, height, width = x.shape
    if params.crop is not None:
        x0, y0, w, h = params.crop.to(x.dtype).unbind(dim=1)
        # normalized (align_corners=False) box center and half-extent
        cx = (2.0 * x0 + w) / width - 1.0
        cy = (2.0 * y0 + h) / height - 1.0
        sx = w / width
        sy = h / height
        sx = torch.where(params.flip, -sx, sx)
        theta = torch.zeros(b, 2, 3, dtype=x.dtype)
        theta[:, 0, 0] = sx
        theta[:, 1, 1] = sy
        theta[:, 0, 2] = cx
        theta[:, 1, 2] = cy
        grid = F.affine_grid(theta, list(x.shape), align_corners=False)
        x = F.grid_sample(x, grid, mode="bilinear", padding_mode="border", align_corners=False)
    elif bool(params.flip.any()):
        flipped = torch.flip(x, dims=(3,))
        x = torch.where(params.flip.view(b, 1, 1, 1), flipped, x)
    if c == 3:
        if bool(params.jitter.any()):
            x = _apply_color_jitter(x, params)
        if bool(params.gray.any()):
            gray3 = _grayscale(x).expand(-1, 3, -1, -1)
            x = torch.where(params.gray.view(b, 1, 1, 1), gray3, x)
    return x.clamp(0, 1)


def augment_batch(images: torch.Tensor, cfg: AugmentConfig, gen: torch.Generator) -> torch.Tensor:
    params = draw_augment_params(images.shape[0], images.shape[2:], cfg, gen)
    return apply_augment(images, params)


def two_views(
    images: torch.Tensor, cfg: AugmentConfig, gen: torch.Generator
) -> tuple[torch.Tensor, torch.Tensor]:
    pa = draw_augment_params(images.shape[0], images.shape[2:], cfg, gen)
    pb = draw_augment_params(images.shape[0], images.shape[2:], cfg, gen)
    return apply_augment(images, pa), apply_augment(images, pb)


@dataclass
class AugmentedPair:
    view_a: torch.Tensor
    view_b: torch.Tensor
    source_index: int


def augment_pair(
    image: torch.Tensor, cfg: AugmentConfig, gen: torch.Generator, source_index: int = 0
) -> AugmentedPair:
    va, vb = two_views(image.unsqueeze(0), cfg, gen)
    return AugmentedPair(va.squeeze(0), vb.squeeze(0), source_index)


# ---------------------------------------------------------------------------
# poison application


@dataclass
class PoisonedDatasetView:
    """Lazy view yielding clip(x + delta, 0, 1) on poisoned ids, x elsewhere."""

    base: Dataset
    perturbations: PerturbationSet
    mask: torch.Tensor  # (n,) bool, True = poisoned
    poison_ratio: float

    def __post_init__(self):
        if self.mask.shape[0] != len(self.base):
            raise DataError("poison mask length does not match dataset")
        self.perturbations.for_dataset(self.base)

    def __len__(self) -> int:
        return len(self.base)

    @property
    def labels(self) -> torch.Tensor:
        return self.base.labels

    @property
    def class_count(self) -> int:
        return self.base.class_count

    @property
    def image_shape(self) -> tuple[int, ...]:
        return self.base.image_shape

    def batch(self, idx: torch.Tensor) -> torch.Tensor:
        x = self.base.images[idx].clone()
        hit = self.mask[idx]
        if bool(hit.any()):
            sub = idx[hit]
            x[hit] = (self.base.images[sub] + self.perturbations.deltas[sub]).clamp(0, 1)
        return x

    def poisoned_ids(self) -> torch.Tensor:
        return torch.nonzero(self.mask, as_tuple=False).flatten()


def apply_poison(
    base: Dataset,
    perturbations: PerturbationSet,
    ratio: float = 1.0,
    gen: torch.Generator | None = None,
    stratified: bool = False,
) -> PoisonedDatasetView:
    """Poison a uniform random fraction of samples (without replacement).

    ratio=1 poisons everything and needs no generator; stratified sampling
    draws round(ratio * n_c) per class instead.
    """
    if not 0 <= ratio <= 1:
        raise ValueError(f"poison ratio must be in [0, 1], got {ratio}")
    n = len(base)
    mask = torch.zeros(n, dtype=torch.bool)
    if ratio >= 1.0:
        mask.fill_(True)
    elif ratio > 0:
        if gen is None:
            raise ValueError("ratio < 1 requires a generator for mask sampling")
        if stratified:
            for cls in range(base.class_count):
                ids = torch.nonzero(base.labels == cls, as_tuple=False).flatten()
                k = int(round(ratio * ids.numel()))
                perm = torch.randperm(ids.numel(), generator=gen)[:k]
                mask[ids[perm]] = True
        else:
            k = int(round(ratio * n))
            mask[torch.randperm(n, generator=gen)[:k]] = True
    return PoisonedDatasetView(base, perturbations, mask, float(ratio))


def export_poisoned_dataset(view: PoisonedDatasetView, out_root) -> Path:
    """Write the poisoned dataset back out in the ingestible directory format.

    Pixels are quantized to 8-bit PNG, so reloading gives clip(x + delta)
    rounded to the nearest 1/255; the sidecar manifest records the mask.
    """
    out_root = Path(out_root)
    base = view.base
    split = base.split_tag or "train"
    (out_root / split).mkdir(parents=True, exist_ok=True)
    lines = [f"{i} {name}" for i, name in enumerate(base.class_names)]
    (out_root / "labels.txt").write_text("\n".join(lines) + "\n")

    for i in range(len(base)):
        img = view.batch(torch.tensor([i]))[0]
        if base.sample_names is not None:
            rel = base.sample_names[i]
        else:
            rel = f"{int(base.labels[i])}/{i:06d}.png"
        path = out_root / split / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        _save_png(img, path)

    manifest = {
        "attack": view.perturbations.attack,
        "epsilon": view.perturbations.epsilon,
        "seed": view.perturbations.seed,
        "poison_ratio": view.poison_ratio,
        "poisoned_ids": [int(i) for i in view.poisoned_ids()],
        "dataset_fingerprint": base.fingerprint(),
        "quantization": "uint8",
    }
    manifest_path = out_root / "poison_manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out_root


def _save_png(image: torch.Tensor, path: Path):
    arr = (image.clamp(0, 1) * 255.0).round().to(torch.uint8).cpu().numpy()
    if arr.shape[0] == 1:
        Image.fromarray(arr[0], mode="L").save(path)
    else:
        Image.fromarray(np.transpose(arr, (1, 2, 0)), mode="RGB").save(path)


def save_dataset(dataset: Dataset, root) -> Path:
    """Write a dataset in the ingestible layout (used by synthesis and tests)."""
    root = Path(root)
    split = dataset.split_tag or "train"
    lines = [f"{i} {name}" for i, name in enumerate(dataset.class_names)]
    root.mkdir(parents=True, exist_ok=True)
    (root / "labels.txt").write_text("\n".join(lines) + "\n")
    for i in range(len(dataset)):
        if dataset.sample_names is not None:
            rel = dataset.sample_names[i]
        else:
            rel = f"{int(dataset.labels[i])}/{i:06d}.png"
        path = root / split / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        _save_png(dataset.images[i], path)
    return root
