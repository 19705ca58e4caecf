"""Dataset ingestion, preprocessing, augmentation and a synthetic face generator.

Images are assumed to be pre-aligned face crops. The pipeline converts them to
luma grayscale, resizes to 56x56 and scales to [0, 1]; training draws a random
48x48 crop with a coin-flip horizontal mirror, and evaluation averages the
center crop with its mirror.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .heads import N_CLASSES, Labels

log = logging.getLogger(__name__)

FULL = 56
CROP = 48
LUMA = np.array([0.299, 0.587, 0.114])
MANIFEST_COLUMNS = ("image_path", "valence", "arousal", "expression")
UNLABELED = -1


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class ManifestEntry:
    image_path: str
    valence: float
    arousal: float
    expression: int  # UNLABELED (-1) when absent


@dataclass
class Manifest:
    entries: list[ManifestEntry]
    errors: list[str] = field(default_factory=list)
    root: Path = Path(".")

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def raise_for_errors(self) -> None:
        if self.errors:
            head = "; ".join(self.errors[:5])
            raise ManifestError(f"{len(self.errors)} malformed manifest rows: {head}")

    def resolve(self, entry: ManifestEntry) -> Path:
        p = Path(entry.image_path)
        return p if p.is_absolute() else self.root / p


def _parse_row(row: dict) -> ManifestEntry:
    path = (row.get("image_path") or "").strip()
    if not path:
        raise ValueError("empty image_path")
    values = {}
    for key in ("valence", "arousal"):
        try:
            v = float(row[key])
        except (TypeError, ValueError):
            raise ValueError(f"{key} {row.get(key)!r} is not a number") from None
        if not np.isfinite(v) or not -1.0 <= v <= 1.0:
            raise ValueError(f"{key}={row[key]} outside [-1, 1]")
        values[key] = v
    raw = (row.get("expression") or "").strip()
    if raw in ("", "unlabeled"):
        expr = UNLABELED
    else:
        try:
            expr = int(raw)
        except ValueError:
            raise ValueError(f"expression {raw!r} is not an integer") from None
        if not 0 <= expr < N_CLASSES:
            raise ValueError(f"expression={expr} outside 0..{N_CLASSES - 1}")
    return ManifestEntry(path, values["valence"], values["arousal"], expr)


def load_manifest(path) -> Manifest:
    """Read a CSV manifest; bad rows are reported in ``errors``, never silently dropped."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in MANIFEST_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise ManifestError(f"{path}: missing columns {missing}")
        entries, errors = [], []
        for lineno, row in enumerate(reader, start=2):
            try:
                entries.append(_parse_row(row))
            except ValueError as exc:
                errors.append(f"line {lineno}: {exc}")
    for err in errors:
        log.warning("%s: %s", path, err)
    return Manifest(entries, errors, path.parent)


def write_manifest(path, entries: Sequence[ManifestEntry]) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_COLUMNS)
        for e in entries:
            expr = "unlabeled" if e.expression == UNLABELED else e.expression
            w.writerow([e.image_path, repr(float(e.valence)), repr(float(e.arousal)), expr])


# ------------------------------------------------------------ preprocessing

def decode_image(path) -> np.ndarray:
    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(path) as im:
            if im.mode not in ("L", "RGB"):
                im = im.convert("RGB")
            return np.asarray(im)
    except (OSError, UnidentifiedImageError) as exc:
        raise ValueError(f"cannot decode image {path}: {exc}") from exc


def resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Half-pixel-center linear resampling weights [n_out, n_in], edges clamped."""
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.minimum(np.floor(src).astype(int), max(n_in - 2, 0))
    frac = src - lo
    a = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    a[rows, lo] += 1 - frac
    if n_in > 1:
        a[rows, lo + 1] += frac
    return a


def preprocess(image: np.ndarray, size: int = FULL) -> np.ndarray:
    """Raw decoded image (H,W) or (H,W,3|4), uint8 or float in [0,1] -> [1,size,size] in [0,1]."""
    img = np.asarray(image)
    scale = 255.0 if img.dtype == np.uint8 else 1.0
    img = img.astype(np.float64) / scale
    if img.ndim == 3:
        if img.shape[2] not in (3, 4):
            raise ValueError(f"unsupported channel count {img.shape[2]}")
        img = img[..., :3] @ LUMA
    elif img.ndim != 2:
        raise ValueError(f"expected a 2-D or 3-D image, got shape {img.shape}")
    h, w = img.shape
    out = resize_matrix(h, size) @ img @ resize_matrix(w, size).T
    return np.clip(out, 0.0, 1.0)[None].astype(np.float32)


def load_image(path) -> np.ndarray:
    return preprocess(decode_image(path))


def crop(image: np.ndarray, top: int, left: int, size: int = CROP) -> np.ndarray:
    return image[:, top:top + size, left:left + size]


def hflip(image: np.ndarray) -> np.ndarray:
    return image[..., ::-1]


def augment(image: np.ndarray, rng: np.random.Generator, offset: tuple[int, int] | None = None,
            flip: bool | None = None) -> np.ndarray:
    """Random 48x48 crop (offsets uniform in 0..8) and mirror with probability 0.5."""
    if image.shape != (1, FULL, FULL):
        raise ValueError(f"augment expects a [1,{FULL},{FULL}] image, got {image.shape}")
    span = FULL - CROP + 1
    top, left = (rng.integers(0, span, size=2) if offset is None else offset)
    do_flip = bool(rng.random() < 0.5) if flip is None else flip
    out = crop(image, int(top), int(left))
    return np.ascontiguousarray(hflip(out) if do_flip else out)


def sample_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    """Independent stream per (seed, epoch, sample) so results ignore worker order."""
    return np.random.default_rng([seed, epoch, index])


def center_crop(images: np.ndarray) -> np.ndarray:
    off = (FULL - CROP) // 2
    return images[..., off:off + CROP, off:off + CROP]


def tta_predict(predict: Callable[[np.ndarray], dict], images: np.ndarray) -> dict[str, np.ndarray]:
    """Average ``predict`` over the center crop and its mirror.

    ``images`` is [1,56,56] or [N,1,56,56]; ``predict`` maps [N,1,48,48] to a
    dict of per-sample arrays (e.g. ``Model.predict``).
    """
    single = images.ndim == 3
    batch = images[None] if single else images
    if batch.shape[1:] != (1, FULL, FULL):
        raise ValueError(f"tta_predict expects [N,1,{FULL},{FULL}] images, got {images.shape}")
    centered = np.ascontiguousarray(center_crop(batch))
    a = predict(centered)
    b = predict(np.ascontiguousarray(hflip(centered)))
    out = {k: (a[k] + b[k]) / 2 for k in a}
    return {k: v[0] for k, v in out.items()} if single else out


# ---------------------------------------------------------------- datasets

@dataclass
class Dataset:
    """Preprocessed [N,1,56,56] images with their targets."""

    images: np.ndarray
    valence: np.ndarray
    arousal: np.ndarray
    expression: np.ndarray
    latents: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.images)

    def labels(self, idx=slice(None)) -> Labels:
        return Labels(self.valence[idx], self.arousal[idx], self.expression[idx])

    def subset(self, idx) -> "Dataset":
        lat = None if self.latents is None else self.latents[idx]
        return Dataset(self.images[idx], self.valence[idx], self.arousal[idx], self.expression[idx], lat)

    @classmethod
    def from_manifest(cls, manifest: Manifest) -> "Dataset":
        manifest.raise_for_errors()
        if len(manifest) == 0:
            raise ManifestError("manifest has no rows")
        images = np.stack([load_image(manifest.resolve(e)) for e in manifest])
        return cls(images,
                   np.array([e.valence for e in manifest]),
                   np.array([e.arousal for e in manifest]),
                   np.array([e.expression for e in manifest], dtype=np.int64))


def expression_from_va(valence: np.ndarray, arousal: np.ndarray, neutral_radius: float = 0.3) -> np.ndarray:
    """Circumplex quantization: class 0 near the origin, classes 1..6 by angular sector."""
    radius = np.hypot(valence, arousal)
    angle = np.mod(np.arctan2(arousal, valence), 2 * np.pi)
    sector = np.minimum((angle / (2 * np.pi) * 6).astype(np.int64), 5)
    return np.where(radius < neutral_radius, 0, 1 + sector).astype(np.int64)


def render_face(valence: float, arousal: float, rng: np.random.Generator, size: int = FULL) -> np.ndarray:
    """Cartoon face: mouth curvature tracks valence, eye size and brow height track arousal.

    All label-bearing features are left-right symmetric, so mirroring never
    changes the target. Position, brightness, contrast and noise are nuisances.
    """
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cx = size / 2 + rng.uniform(-3, 3)
    cy = size / 2 + rng.uniform(-3, 3)
    base = rng.uniform(0.2, 0.3)
    ink = rng.uniform(0.7, 0.85)
    img = np.full((size, size), base)
    face = ((xx - cx) / 21.0) ** 2 + ((yy - cy) / 24.0) ** 2 <= 1.0
    img[face] += 0.12
    eye_r = 2.2 + 1.6 * (arousal + 1)
    for side in (-1, 1):
        ex, ey = cx + side * 8.0, cy - 6.0
        img += ink * np.exp(-(((xx - ex) ** 2 + (yy - ey) ** 2) / (2 * (eye_r / 1.6) ** 2)))
        brow_y = ey - eye_r - 2.0 - 2.0 * arousal
        brow = (np.abs(yy - brow_y) < 1.0) & (np.abs(xx - ex) < 4.5)
        img[brow] += 0.5 * ink
    # mouth: y = my - k * (x - cx)^2, smile (k > 0 in image coords means corners up)
    k = 0.06 * valence
    my = cy + 11.0
    curve = my - k * (xx - cx) ** 2 + 2.0 * valence
    mouth = (np.abs(yy - curve) < 1.8) & (np.abs(xx - cx) < 10.0)
    img[mouth] += ink
    img += rng.normal(0.0, 0.03, img.shape)
    return np.clip(img, 0.0, 1.0)


def synth_dataset(n: int, seed: int = 0, corrupt: float = 0.0, size: int = FULL) -> Dataset:
    """Procedural faces with labels that are smooth functions of two latents.

    valence = z1 and arousal = 0.8 * z2 + 0.2 * z1 (mildly correlated, as in
    real affect data); expression is the circumplex sector of (valence,
    arousal). ``corrupt`` replaces that fraction of regression labels with
    uniform noise after rendering.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    z = rng.uniform(-1, 1, (n, 2))
    valence = np.clip(z[:, 0], -1, 1)
    arousal = np.clip(0.8 * z[:, 1] + 0.2 * z[:, 0], -1, 1)
    expression = expression_from_va(valence, arousal)
    images = np.stack([render_face(valence[i], arousal[i], rng, size)[None] for i in range(n)]).astype(np.float32)
    data = Dataset(images, valence, arousal, expression, latents=z)
    if corrupt > 0:
        data = corrupt_labels(data, corrupt, seed)
    return data


def corrupt_labels(data: Dataset, fraction: float, seed: int = 0) -> Dataset:
    """Copy of ``data`` where ``fraction`` of rows get uniform random valence/arousal."""
    if not 0 <= fraction <= 1:
        raise ValueError("corruption fraction must lie in [0, 1]")
    rng = np.random.default_rng([seed, 0xC0])
    n = len(data)
    idx = rng.choice(n, size=int(round(fraction * n)), replace=False)
    v, a = data.valence.copy(), data.arousal.copy()
    v[idx] = rng.uniform(-1, 1, idx.size)
    a[idx] = rng.uniform(-1, 1, idx.size)
    return Dataset(data.images, v, a, data.expression.copy(), data.latents)


def export_dataset(data: Dataset, out_dir, prefix: str = "img") -> Path:
    """Write PNGs plus ``manifest.csv`` in the manifest layout."""
    from PIL import Image

    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(len(data)):
        rel = f"images/{prefix}_{i:05d}.png"
        pixels = np.round(data.images[i, 0] * 255).astype(np.uint8)
        Image.fromarray(pixels).save(out / rel)
        entries.append(ManifestEntry(rel, float(data.valence[i]), float(data.arousal[i]),
                                     int(data.expression[i])))
    write_manifest(out / "manifest.csv", entries)
    return out / "manifest.csv"
