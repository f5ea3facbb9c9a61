"""Episodes, masks, affine views and dataset adapters."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image
from scipy import ndimage


class DatasetError(RuntimeError):
    """Dataset directory missing or unreadable."""


class InsufficientSamplesError(DatasetError):
    pass


class FormatError(DatasetError):
    pass


class InvalidSpecError(ValueError):
    pass


IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


def as_image(data: np.ndarray, size: int | None = None) -> np.ndarray:
    """Validate a ``[3, H, W]`` float image in [0, 1] and freeze it."""
    arr = np.asarray(data, dtype=np.float32)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ValueError(f"image must be [3, H, W], got {arr.shape}")
    if size is not None and arr.shape[1:] != (size, size):
        raise ValueError(f"image must be {size}x{size}, got {arr.shape[1:]}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("image contains non-finite values")
    arr = np.clip(arr, 0.0, 1.0)
    arr.setflags(write=False)
    return arr


def as_mask(data: np.ndarray) -> np.ndarray:
    """Validate a ``[H, W]`` mask with values in {0, 1} and freeze it."""
    arr = np.asarray(data)
    if arr.ndim != 2:
        raise ValueError(f"mask must be 2-D, got {arr.shape}")
    if arr.dtype == bool:
        arr = arr.astype(np.uint8)
    if not np.isin(arr, (0, 1)).all():
        raise ValueError("mask values must be in {0, 1}")
    arr = arr.astype(np.uint8)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Episode:
    """One 1-way K-shot task."""

    support: tuple[tuple[np.ndarray, np.ndarray], ...]
    query: np.ndarray
    query_gt: np.ndarray | None
    fg_class: str
    all_classes: tuple[str, ...]
    dataset_id: str
    name: str = ""

    def __post_init__(self):
        if len(self.support) < 1:
            raise ValueError("episode needs at least one support pair")
        if self.fg_class not in self.all_classes:
            raise ValueError(f"{self.fg_class!r} not in all_classes")
        for img, mask in self.support:
            if img.shape[1:] != mask.shape:
                raise ValueError("support image/mask shape mismatch")
            if mask.sum() == 0:
                raise ValueError("support mask has no foreground")
        if self.query_gt is not None and self.query_gt.shape != self.query.shape[1:]:
            raise ValueError("query image/mask shape mismatch")

    @property
    def k(self) -> int:
        return len(self.support)

    @property
    def support_images(self) -> list[np.ndarray]:
        return [img for img, _ in self.support]

    @property
    def support_masks(self) -> list[np.ndarray]:
        return [m for _, m in self.support]


# --------------------------------------------------------------------------
# affine views


@dataclass(frozen=True)
class AffineTransform:
    """Forward map ``[x', y'] = matrix @ [x, y, 1]`` in pixel coordinates.

    Images are resampled bilinearly, masks with nearest neighbour.
    """

    matrix: np.ndarray
    seed: int = 0
    image_interp: str = "bilinear"
    mask_interp: str = "nearest"

    @property
    def linear(self) -> np.ndarray:
        return self.matrix[:, :2]

    @property
    def det(self) -> float:
        return float(np.linalg.det(self.linear))

    def inverse(self) -> "AffineTransform":
        inv = np.linalg.inv(self.linear)
        return AffineTransform(np.hstack([inv, -inv @ self.matrix[:, 2:]]), self.seed)

    def apply_points(self, xy: np.ndarray) -> np.ndarray:
        xy = np.asarray(xy, dtype=np.float64)
        return xy @ self.linear.T + self.matrix[:, 2]

    def _warp(self, arr: np.ndarray, order: int, cval: float) -> np.ndarray:
        # ndimage maps output index -> input index in (row, col) order
        inv = self.inverse().matrix
        swap = np.array([[0, 1], [1, 0]])
        lin = swap @ inv[:, :2] @ swap
        off = swap @ inv[:, 2]
        return ndimage.affine_transform(arr, lin, offset=off, order=order, mode="constant", cval=cval)

    def warp_image(self, image: np.ndarray) -> np.ndarray:
        out = np.stack([self._warp(np.asarray(c, dtype=np.float64), 1, 0.0) for c in image])
        return np.clip(out, 0.0, 1.0).astype(np.float32)

    def warp_mask(self, mask: np.ndarray) -> np.ndarray:
        return (self._warp(np.asarray(mask, dtype=np.float64), 0, 0.0) > 0.5).astype(np.uint8)


@dataclass(frozen=True)
class AugmentRanges:
    rotation_deg: float = 15.0
    scale: tuple[float, float] = (0.85, 1.15)
    translate_frac: float = 0.10
    shear_deg: float = 5.0


def sample_affine(size: tuple[int, int], seed: int, ranges: AugmentRanges = AugmentRanges(),
                  attempt: int = 0) -> AffineTransform:
    """Draw a mild random affine about the image centre."""
    h, w = size
    rng = np.random.default_rng(seed if attempt == 0 else (seed, attempt))
    while True:
        rot = math.radians(rng.uniform(-ranges.rotation_deg, ranges.rotation_deg))
        scale = rng.uniform(*ranges.scale)
        shear = math.radians(rng.uniform(-ranges.shear_deg, ranges.shear_deg))
        tx = rng.uniform(-ranges.translate_frac, ranges.translate_frac) * w
        ty = rng.uniform(-ranges.translate_frac, ranges.translate_frac) * h
        c, s = math.cos(rot), math.sin(rot)
        lin = scale * np.array([[c, -s], [s, c]]) @ np.array([[1.0, math.tan(shear)], [0.0, 1.0]])
        if abs(np.linalg.det(lin)) >= 1e-6:
            break
    centre = np.array([(w - 1) / 2.0, (h - 1) / 2.0])
    shift = centre - lin @ centre + np.array([tx, ty])
    return AffineTransform(np.hstack([lin, shift[:, None]]), seed)


def foreground_lost(mask: np.ndarray, t: AffineTransform) -> float:
    """Fraction of image pixels that are foreground and leave the frame under ``t``."""
    h, w = mask.shape
    ys, xs = np.nonzero(mask)
    if len(ys) == 0:
        return 0.0
    p = t.apply_points(np.stack([xs, ys], axis=1))
    out = (p[:, 0] < -0.5) | (p[:, 0] >= w - 0.5) | (p[:, 1] < -0.5) | (p[:, 1] >= h - 0.5)
    return float(out.sum()) / (h * w)


def augment_view(image: np.ndarray, mask: np.ndarray, seed: int, ranges: AugmentRanges = AugmentRanges(),
                 max_lost: float = 0.002, attempts: int = 20) -> tuple[np.ndarray, np.ndarray, AffineTransform]:
    """Warp an image/mask pair by a seeded affine.

    Draws that push more than ``max_lost`` of the image area of foreground out
    of frame are redrawn (deterministically); the least lossy draw wins if
    none qualifies.
    """
    if image.shape[1:] != mask.shape:
        raise ValueError(f"image {image.shape[1:]} and mask {mask.shape} differ")
    best, best_loss = None, np.inf
    for attempt in range(attempts):
        t = sample_affine(mask.shape, seed, ranges, attempt)
        loss = foreground_lost(mask, t)
        if loss < best_loss:
            best, best_loss = t, loss
        if loss <= max_lost:
            break
    return as_image(best.warp_image(image)), as_mask(best.warp_mask(mask)), best


def roundtrip_agreement(mask: np.ndarray, t: AffineTransform) -> float:
    """Fraction of pixels recovered by forward-then-inverse nearest warping."""
    back = t.inverse().warp_mask(t.warp_mask(mask))
    return float(np.mean(back == mask))


# --------------------------------------------------------------------------
# synthetic episodes


@dataclass(frozen=True)
class SyntheticSpec:
    """Geometry and texture of a generated class.

    Foreground is a rectangle or ellipse whose side lengths are drawn as a
    fraction of the image side; textures are a base colour plus an oriented
    stripe pattern plus Gaussian noise.
    """

    class_name: str = "blob"
    shape: str = "ellipse"
    size: int = 64
    k: int = 1
    extent: tuple[float, float] = (0.35, 0.6)
    fg_color: tuple[float, float, float] = (0.75, 0.35, 0.3)
    bg_color: tuple[float, float, float] = (0.35, 0.45, 0.6)
    color_jitter: float = 0.08
    fg_stripes: float = 0.0
    bg_stripes: float = 0.0
    stripe_period: float = 6.0
    noise: float = 0.08
    distractors: int = 0
    all_classes: tuple[str, ...] = ()
    dataset_id: str = "synthetic"


def _draw_shape(spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    s = spec.size
    lo, hi = spec.extent
    if hi <= 0 or s < 4:
        raise InvalidSpecError("foreground extent must be positive")
    for _ in range(100):
        hh = max(1, int(round(rng.uniform(lo, hi) * s)))
        ww = max(1, int(round(rng.uniform(lo, hi) * s)))
        hh, ww = min(hh, s - 2), min(ww, s - 2)
        y0 = int(rng.integers(1, s - hh)) if s - hh > 1 else 0
        x0 = int(rng.integers(1, s - ww)) if s - ww > 1 else 0
        yy, xx = np.mgrid[0:s, 0:s]
        if spec.shape == "rectangle":
            m = (yy >= y0) & (yy < y0 + hh) & (xx >= x0) & (xx < x0 + ww)
        elif spec.shape == "ellipse":
            cy, cx = y0 + (hh - 1) / 2.0, x0 + (ww - 1) / 2.0
            m = ((yy - cy) / (hh / 2.0)) ** 2 + ((xx - cx) / (ww / 2.0)) ** 2 <= 1.0
        else:
            raise InvalidSpecError(f"unknown shape {spec.shape!r}")
        frac = m.mean()
        if frac == 0:
            raise InvalidSpecError("spec yields an empty foreground")
        if 0.05 <= frac <= 0.5:
            return m.astype(np.uint8)
    raise InvalidSpecError("cannot draw a foreground covering 5-50% of the image with this spec")


def _texture(spec: SyntheticSpec, color, stripes: float, angle: float, rng: np.random.Generator) -> np.ndarray:
    s = spec.size
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    base = np.asarray(color, dtype=np.float64) + rng.normal(0, spec.color_jitter, 3)
    phase = rng.uniform(0, 2 * np.pi)
    wave = np.sin(2 * np.pi * (xx * np.cos(angle) + yy * np.sin(angle)) / spec.stripe_period + phase)
    img = base[:, None, None] + stripes * wave[None] + rng.normal(0, spec.noise, (3, s, s))
    return img


def _render(spec: SyntheticSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    mask = _draw_shape(spec, rng)
    fg = _texture(spec, spec.fg_color, spec.fg_stripes, np.pi / 4, rng)
    bg = _texture(spec, spec.bg_color, spec.bg_stripes, -np.pi / 4, rng)
    img = np.where(mask[None].astype(bool), fg, bg)
    for _ in range(spec.distractors):
        # fg-coloured patches without fg stripes, labelled background
        r = int(rng.integers(2, max(3, spec.size // 10)))
        cy, cx = rng.integers(r, spec.size - r, 2)
        yy, xx = np.mgrid[0:spec.size, 0:spec.size]
        blob = ((yy - cy) ** 2 + (xx - cx) ** 2 <= r * r) & (mask == 0)
        distract = _texture(spec, spec.fg_color, spec.bg_stripes, -np.pi / 4, rng)
        img = np.where(blob[None], distract, img)
    return as_image(np.clip(img, 0, 1)), as_mask(mask)


def make_synthetic_episode(spec: SyntheticSpec, seed: int) -> Episode:
    """Generate ``spec.k`` supports and one query sharing texture statistics."""
    if spec.k < 1:
        raise InvalidSpecError("k must be >= 1")
    if spec.extent[1] <= 0:
        raise InvalidSpecError("spec yields an empty foreground")
    rng = np.random.default_rng(seed)
    pairs = [_render(spec, rng) for _ in range(spec.k + 1)]
    classes = spec.all_classes or (spec.class_name,)
    return Episode(
        support=tuple(pairs[:-1]),
        query=pairs[-1][0],
        query_gt=pairs[-1][1],
        fg_class=spec.class_name,
        all_classes=tuple(classes),
        dataset_id=spec.dataset_id,
        name=f"{spec.class_name}-{seed}",
    )


# --------------------------------------------------------------------------
# on-disk datasets


def load_image_file(path: Path, size: int) -> tuple[np.ndarray, tuple[int, int]]:
    try:
        with Image.open(path) as im:
            raw_size = im.size[::-1]
            im = im.convert("RGB").resize((size, size), Image.BILINEAR)
            arr = np.asarray(im, dtype=np.float32) / 255.0
    except OSError as exc:
        raise FormatError(f"cannot read image {path}: {exc}") from exc
    return as_image(arr.transpose(2, 0, 1)), raw_size


def load_mask_file(path: Path, size: int) -> tuple[np.ndarray, tuple[int, int]]:
    """0 = background; 255 (or 1) = foreground."""
    try:
        with Image.open(path) as im:
            raw_size = im.size[::-1]
            arr = np.asarray(im.convert("L"))
    except OSError as exc:
        raise FormatError(f"cannot read mask {path}: {exc}") from exc
    binary = (arr > 127) if arr.max() > 1 else (arr > 0)
    resized = np.asarray(Image.fromarray(binary.astype(np.uint8) * 255).resize((size, size), Image.NEAREST)) > 127
    return as_mask(resized), raw_size


def _images_in(d: Path) -> list[Path]:
    return sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


class DatasetAdapter:
    """Maps a dataset root to per-class lists of (image, mask) file pairs."""

    name = "base"
    layout = ""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        if not self.root.is_dir():
            raise DatasetError(f"dataset root not found: {self.root}")

    def classes(self) -> list[str]:
        raise NotImplementedError

    def pairs(self, class_name: str) -> list[tuple[Path, Path]]:
        raise NotImplementedError

    def _require_dir(self, d: Path) -> Path:
        if not d.is_dir():
            raise DatasetError(f"expected directory {d} ({self.layout})")
        return d


class FolderAdapter(DatasetAdapter):
    """Generic fallback::

        <root>/<class>/images/<stem>.{png,jpg}
        <root>/<class>/masks/<stem>.png
    """

    name = "folder"
    layout = "<root>/<class>/images/*, <root>/<class>/masks/<stem>.png"

    def classes(self):
        return sorted(p.name for p in self.root.iterdir() if (p / "images").is_dir())

    def pairs(self, class_name):
        d = self._require_dir(self.root / class_name)
        images = _images_in(self._require_dir(d / "images"))
        masks = self._require_dir(d / "masks")
        out = []
        for img in images:
            m = masks / f"{img.stem}.png"
            if not m.exists():
                raise FormatError(f"missing mask for {img}")
            out.append((img, m))
        return out


class FSS1000Adapter(DatasetAdapter):
    """``<root>/<class>/<n>.jpg`` with ``<n>.png`` masks alongside."""

    name = "fss1000"
    layout = "<root>/<class>/<n>.jpg + <n>.png"

    def classes(self):
        return sorted(p.name for p in self.root.iterdir() if p.is_dir())

    def pairs(self, class_name):
        d = self._require_dir(self.root / class_name)
        return [(p, p.with_suffix(".png")) for p in sorted(d.glob("*.jpg")) if p.with_suffix(".png").exists()]


class DeepGlobeAdapter(DatasetAdapter):
    """``<root>/<class_id>/test/origin/*.jpg`` and ``.../test/groundtruth/<stem>.png``."""

    name = "deepglobe"
    layout = "<root>/<class>/test/origin/*.jpg, <root>/<class>/test/groundtruth/<stem>.png"

    def classes(self):
        return sorted(p.name for p in self.root.iterdir() if (p / "test" / "origin").is_dir())

    def pairs(self, class_name):
        d = self._require_dir(self.root / class_name / "test")
        gt = self._require_dir(d / "groundtruth")
        return [(p, gt / f"{p.stem}.png") for p in _images_in(self._require_dir(d / "origin"))
                if (gt / f"{p.stem}.png").exists()]


class ISICAdapter(DatasetAdapter):
    """``<root>/ISIC2018_Task1-2_Training_Input/<class>/<id>.jpg`` and
    ``<root>/ISIC2018_Task1_Training_GroundTruth/<id>_segmentation.png``."""

    name = "isic"
    layout = "ISIC2018_Task1-2_Training_Input/<class>/*.jpg + ISIC2018_Task1_Training_GroundTruth/<id>_segmentation.png"

    def classes(self):
        d = self._require_dir(self.root / "ISIC2018_Task1-2_Training_Input")
        return sorted(p.name for p in d.iterdir() if p.is_dir())

    def pairs(self, class_name):
        d = self._require_dir(self.root / "ISIC2018_Task1-2_Training_Input" / class_name)
        gt = self._require_dir(self.root / "ISIC2018_Task1_Training_GroundTruth")
        return [(p, gt / f"{p.stem}_segmentation.png") for p in _images_in(d)
                if (gt / f"{p.stem}_segmentation.png").exists()]


class ChestXrayAdapter(DatasetAdapter):
    """Single class ``lung``: ``<root>/CXR_png/<id>.png`` and ``<root>/masks/<id>_mask.png``."""

    name = "chest"
    layout = "<root>/CXR_png/*.png + <root>/masks/<id>_mask.png"

    def classes(self):
        return ["lung"]

    def pairs(self, class_name):
        if class_name != "lung":
            raise DatasetError("chest x-ray has the single class 'lung'")
        imgs = _images_in(self._require_dir(self.root / "CXR_png"))
        masks = self._require_dir(self.root / "masks")
        return [(p, masks / f"{p.stem}_mask.png") for p in imgs if (masks / f"{p.stem}_mask.png").exists()]


ADAPTERS = {a.name: a for a in (FolderAdapter, FSS1000Adapter, DeepGlobeAdapter, ISICAdapter, ChestXrayAdapter)}
_ALIASES = {"fss-1000": "fss1000", "fss": "fss1000", "isic2018": "isic", "chest_xray": "chest",
            "chestxray": "chest", "lung": "chest", "deepglobe": "deepglobe"}


def get_adapter(root: str | Path, dataset_id: str, adapter: str = "auto") -> DatasetAdapter:
    if adapter == "auto":
        key = dataset_id.lower()
        adapter = _ALIASES.get(key, key)
        if adapter not in ADAPTERS:
            adapter = "folder"
    if adapter not in ADAPTERS:
        raise DatasetError(f"unknown dataset adapter {adapter!r}; choose from {sorted(ADAPTERS)}")
    return ADAPTERS[adapter](root)


def sample_indices(n: int, k: int, rng_seed: int) -> list[int]:
    """The seeded draw behind :func:`load_episode`: k supports then the query."""
    rng = np.random.default_rng(rng_seed)
    return [int(i) for i in rng.choice(n, size=k + 1, replace=False)]


def load_episode(dataset_root: str | Path, dataset_id: str, class_name: str, k: int, rng_seed: int,
                 *, size: int = 400, adapter: str = "auto") -> Episode:
    ad = get_adapter(dataset_root, dataset_id, adapter)
    pairs = ad.pairs(class_name)
    if len(pairs) < k + 1:
        raise InsufficientSamplesError(f"class {class_name!r} has {len(pairs)} images, need {k + 1}")
    loaded = []
    for i in sample_indices(len(pairs), k, rng_seed):
        img_path, mask_path = pairs[i]
        img, raw_img = load_image_file(img_path, size)
        mask, raw_mask = load_mask_file(mask_path, size)
        if raw_img != raw_mask:
            raise FormatError(f"{img_path.name}: image {raw_img} and mask {raw_mask} sizes differ")
        loaded.append((img, mask))
    for img, mask in loaded[:-1]:
        if mask.sum() == 0:
            raise FormatError(f"support mask without foreground in class {class_name!r}")
    return Episode(
        support=tuple(loaded[:-1]),
        query=loaded[-1][0],
        query_gt=loaded[-1][1],
        fg_class=class_name,
        all_classes=tuple(ad.classes()),
        dataset_id=dataset_id,
        name=f"{dataset_id}/{class_name}/{rng_seed}",
    )


def resize_mask(mask: np.ndarray, shape: Sequence[int]) -> np.ndarray:
    """Nearest-neighbour mask resampling (pixel-centre aligned)."""
    h, w = mask.shape
    th, tw = shape
    rows = np.minimum(((np.arange(th) + 0.5) * h / th).astype(int), h - 1)
    cols = np.minimum(((np.arange(tw) + 0.5) * w / tw).astype(int), w - 1)
    return np.asarray(mask)[np.ix_(rows, cols)]


@dataclass
class EpisodeSource:
    """A reproducible list of episodes grouped by class."""

    episodes: list[Episode] = field(default_factory=list)

    def __iter__(self):
        return iter(self.episodes)

    def __len__(self):
        return len(self.episodes)


def disk_episodes(root: str | Path, dataset_id: str, classes: Sequence[str] | None, k: int, n_per_class: int,
                  seed: int, size: int = 400, adapter: str = "auto") -> EpisodeSource:
    ad = get_adapter(root, dataset_id, adapter)
    classes = list(classes) if classes else ad.classes()
    eps = []
    for ci, cls in enumerate(classes):
        for j in range(n_per_class):
            eps.append(load_episode(root, dataset_id, cls, k, seed * 100003 + ci * 1009 + j, size=size, adapter=adapter))
    return EpisodeSource(eps)
