"""Synthetic lung-like phantom corpora and the preprocessing pipeline.

Normal phantoms are two filled ellipses ("lungs") holding a flat background,
band-limited noise and a few dark curvilinear vessels.  Lesioned phantoms add
soft-edged bright blobs, a stand-in for ground-glass opacities.  Every sample
draws its randomness from ``(seed, sample_index)`` so generation order does
not matter.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence, Tuple, Union

import cv2
import numpy as np
from PIL import Image
from scipy import ndimage
from scipy.special import erfc

from .errors import (
    DegenerateStatsError,
    EmptyCorpusError,
    InvalidSpecError,
    RoiTooSmallError,
)

MANIFEST_NAME = "manifest.csv"
SPEC_NAME = "phantom_spec.json"
NORM_STATS_NAME = "norm_stats.json"
MANIFEST_COLUMNS = ("path", "mask_path", "label", "split", "roi_path")

# Blob centres are kept this many pixels away from the ROI border.
CENTER_MARGIN = 2


@dataclass(frozen=True)
class PhantomSpec:
    """Knobs of the phantom generator.

    ``n_normal`` and ``n_lesioned`` are corpus totals; ``n_test_normal`` and
    ``n_test_lesioned`` of them are placed in the test split.  Ranges are
    inclusive ``(low, high)`` pairs.
    """

    image_size: int = 64
    n_normal: int = 40
    n_lesioned: int = 20
    n_test_normal: int = 0
    n_test_lesioned: int = 0
    background_level: float = 0.45
    background_jitter: float = 0.02
    noise_amplitude: float = 0.02
    noise_sigma: float = 1.0
    vessel_count: Tuple[int, int] = (3, 6)
    vessel_width: float = 1.0
    vessel_contrast: float = 0.2
    blob_count: Tuple[int, int] = (1, 3)
    blob_radius: Tuple[float, float] = (3.0, 6.0)
    blob_contrast: Tuple[float, float] = (0.08, 0.14)
    edge_sigma: float = 1.0

    def __post_init__(self):
        for name in ("vessel_count", "blob_count", "blob_radius", "blob_contrast"):
            value = getattr(self, name)
            object.__setattr__(self, name, tuple(value))
        self.validate()

    def validate(self) -> None:
        if self.image_size < 32:
            raise InvalidSpecError(f"image_size must be >= 32, got {self.image_size}")
        for name in ("n_normal", "n_lesioned", "n_test_normal", "n_test_lesioned"):
            if getattr(self, name) < 0:
                raise InvalidSpecError(f"{name} must be >= 0")
        if self.n_test_normal > self.n_normal:
            raise InvalidSpecError("n_test_normal exceeds n_normal")
        if self.n_test_lesioned > self.n_lesioned:
            raise InvalidSpecError("n_test_lesioned exceeds n_lesioned")
        for name in ("vessel_count", "blob_count", "blob_radius", "blob_contrast"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise InvalidSpecError(f"{name} range is empty: {lo} > {hi}")
            if lo < 0:
                raise InvalidSpecError(f"{name} must be non-negative")
        for name in ("background_jitter", "noise_amplitude", "noise_sigma",
                     "vessel_width", "vessel_contrast", "edge_sigma"):
            if getattr(self, name) < 0:
                raise InvalidSpecError(f"{name} must be non-negative")
        if self.blob_radius[0] <= 0:
            raise InvalidSpecError("blob radii must be positive")
        top = (self.background_level + self.background_jitter
               + 2 * self.noise_amplitude + self.blob_contrast[1])
        bottom = self.background_level - self.background_jitter - 2 * self.noise_amplitude
        if top > 1.0 or bottom < 0.0:
            raise InvalidSpecError(
                "intensity budget leaves [0, 1]: background/noise/contrast too large")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidSpecError(f"unknown phantom spec keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class ImageSample:
    image: np.ndarray
    label: int
    roi_mask: np.ndarray
    lesion_mask: Optional[np.ndarray] = None
    sample_id: str = ""

    def __post_init__(self):
        if self.image.shape != self.roi_mask.shape:
            raise ValueError("image and roi_mask shapes differ")
        if self.lesion_mask is not None:
            if self.lesion_mask.shape != self.image.shape:
                raise ValueError("lesion_mask shape differs from image")
            if np.any(self.lesion_mask & ~self.roi_mask):
                raise ValueError("lesion_mask extends outside roi_mask")
            if self.label == 0 and self.lesion_mask.any():
                raise ValueError("normal sample carries a non-empty lesion_mask")


@dataclass
class ManifestEntry:
    path: str
    mask_path: Optional[str]
    label: int
    split: str
    roi_path: str

    @property
    def sample_id(self) -> str:
        return Path(self.path).stem


@dataclass
class CorpusManifest:
    root: Path
    entries: list = field(default_factory=list)
    generator_seed: int = 0
    phantom_spec: Optional[PhantomSpec] = None

    @property
    def n_total(self) -> int:
        return len(self.entries)

    @property
    def n_normal(self) -> int:
        return sum(1 for e in self.entries if e.label == 0)

    def split(self, name: str) -> list:
        return [e for e in self.entries if e.split == name]


@dataclass(frozen=True)
class NormStats:
    mean: float
    std: float

    def __post_init__(self):
        if not self.std > 0:
            raise DegenerateStatsError(f"std must be positive, got {self.std}")

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(json.dumps({"mean": self.mean, "std": self.std}, indent=2) + "\n")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "NormStats":
        d = json.loads(Path(path).read_text())
        return cls(float(d["mean"]), float(d["std"]))


# ---------------------------------------------------------------------------
# rendering


def sample_rng(seed: int, index: int) -> np.random.Generator:
    """Independent generator for one sample; independent of generation order."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


def _ellipse(yy, xx, cy, cx, ay, ax, theta):
    c, s = math.cos(theta), math.sin(theta)
    dy, dx = yy - cy, xx - cx
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return (u / ax) ** 2 + (v / ay) ** 2 <= 1.0


def render_roi(rng: np.random.Generator, size: int) -> np.ndarray:
    """Two jittered ellipses, roughly where lungs sit on an axial slice."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    roi = np.zeros((size, size), dtype=bool)
    for side in (-1, 1):
        cx = size * (0.5 + side * 0.21) + rng.uniform(-0.02, 0.02) * size
        cy = size * 0.5 + rng.uniform(-0.03, 0.03) * size
        ax = size * 0.16 * rng.uniform(0.9, 1.1)
        ay = size * 0.34 * rng.uniform(0.9, 1.1)
        theta = side * rng.uniform(0.0, 0.15)
        roi |= _ellipse(yy, xx, cy, cx, ay, ax, theta)
    return roi


def _vessel_field(rng, roi, width):
    """Unit-depth Gaussian stroke along a random quadratic Bezier curve."""
    size = roi.shape[0]
    ys, xs = np.nonzero(roi)
    k = rng.integers(len(ys))
    p0 = np.array([ys[k], xs[k]], dtype=np.float64)
    angle = rng.uniform(0, 2 * math.pi)
    length = rng.uniform(0.2, 0.5) * size
    p2 = p0 + length * np.array([math.sin(angle), math.cos(angle)])
    bend = rng.uniform(-0.3, 0.3) * length
    mid = 0.5 * (p0 + p2) + bend * np.array([math.cos(angle), -math.sin(angle)])
    t = np.linspace(0.0, 1.0, 48)[:, None]
    pts = (1 - t) ** 2 * p0 + 2 * (1 - t) * t * mid + t ** 2 * p2
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    grid = np.stack([yy.ravel(), xx.ravel()], axis=1)
    d2 = np.full(grid.shape[0], np.inf)
    for p in pts:
        d2 = np.minimum(d2, ((grid - p) ** 2).sum(axis=1))
    return np.exp(-d2 / (2.0 * max(width, 1e-6) ** 2)).reshape(size, size)


def render_normal_phantom(rng: np.random.Generator, spec: PhantomSpec) -> Tuple[np.ndarray, np.ndarray]:
    """Draw one normal image and its ROI mask.

    Inside the ROI the image is ``background + noise - vessels``; outside it
    is exactly zero.
    """
    size = spec.image_size
    roi = render_roi(rng, size)
    level = spec.background_level + rng.uniform(-1.0, 1.0) * spec.background_jitter
    image = np.full((size, size), level, dtype=np.float64)

    if spec.noise_amplitude > 0:
        noise = rng.standard_normal((size, size))
        if spec.noise_sigma > 0:
            noise = ndimage.gaussian_filter(noise, spec.noise_sigma, mode="reflect")
        noise /= noise.std() + 1e-12
        image += spec.noise_amplitude * np.clip(noise, -2.0, 2.0)

    n_vessels = int(rng.integers(spec.vessel_count[0], spec.vessel_count[1] + 1))
    if n_vessels and spec.vessel_contrast > 0:
        depth = np.zeros_like(image)
        for _ in range(n_vessels):
            depth = np.maximum(depth, rng.uniform(0.5, 1.0) * _vessel_field(rng, roi, spec.vessel_width))
        image -= spec.vessel_contrast * depth

    image = np.clip(image, 0.0, 1.0)
    image[~roi] = 0.0
    return image, roi


def blob_profile(shape, center, radius: float, delta: float, edge_sigma: float) -> np.ndarray:
    """Soft disk of peak ``delta`` at ``center``.

    The edge is a disk convolved (radially) with a Gaussian of ``edge_sigma``
    and rescaled so the value at the centre is exactly ``delta``.
    """
    yy, xx = np.mgrid[0:shape[0], 0:shape[1]].astype(np.float64)
    r = np.hypot(yy - center[0], xx - center[1])
    if edge_sigma <= 0:
        return np.where(r <= radius, float(delta), 0.0)
    scale = math.sqrt(2.0) * edge_sigma
    profile = erfc((r - radius) / scale) / erfc(-radius / scale)
    return delta * profile


def inject_lesions(image: np.ndarray, roi_mask: np.ndarray, rng: np.random.Generator,
                   spec: PhantomSpec) -> Tuple[np.ndarray, np.ndarray]:
    """Add soft bright blobs inside the ROI.

    Returns the perturbed image (clipped to [0, 1]) and the lesion mask: the
    ROI pixels where some blob adds at least half of its own peak.

    Raises:
        RoiTooSmallError: no ROI pixel is far enough from the border to host a
            blob centre.
    """
    roi_mask = roi_mask.astype(bool)
    inner = ndimage.binary_erosion(roi_mask, iterations=CENTER_MARGIN) if CENTER_MARGIN else roi_mask
    cy, cx = np.nonzero(inner)
    if len(cy) == 0:
        raise RoiTooSmallError("no admissible blob centre inside the ROI")

    k = int(rng.integers(spec.blob_count[0], spec.blob_count[1] + 1))
    added = np.zeros(image.shape, dtype=np.float64)
    lesion = np.zeros(image.shape, dtype=bool)
    for _ in range(k):
        j = rng.integers(len(cy))
        radius = rng.uniform(*spec.blob_radius)
        delta = rng.uniform(*spec.blob_contrast)
        blob = blob_profile(image.shape, (cy[j], cx[j]), radius, delta, spec.edge_sigma)
        added += blob
        if delta > 0:
            lesion |= blob >= 0.5 * delta
    added[~roi_mask] = 0.0
    out = np.clip(image + added, 0.0, 1.0)
    return out, lesion & roi_mask


# ---------------------------------------------------------------------------
# corpus files


def _to_png(path: Path, array: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(array, mode="L").save(path, format="PNG", optimize=False)


def _quantize(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def _mask_png(mask: np.ndarray) -> np.ndarray:
    return np.where(mask, 255, 0).astype(np.uint8)


def _plan(spec: PhantomSpec):
    """Ordered (split, label, local_index) for every sample."""
    plan = []
    for split, label, count in (
        ("train", 0, spec.n_normal - spec.n_test_normal),
        ("train", 1, spec.n_lesioned - spec.n_test_lesioned),
        ("test", 0, spec.n_test_normal),
        ("test", 1, spec.n_test_lesioned),
    ):
        plan.extend((split, label, i) for i in range(count))
    return plan


def render_sample(spec: PhantomSpec, seed: int, index: int, label: int) -> ImageSample:
    rng = sample_rng(seed, index)
    image, roi = render_normal_phantom(rng, spec)
    lesion = None
    if label == 1:
        image, lesion = inject_lesions(image, roi, rng, spec)
    return ImageSample(image=image, label=label, roi_mask=roi, lesion_mask=lesion)


def generate_phantom_corpus(spec: PhantomSpec, seed: int, out_dir: Union[str, Path]) -> CorpusManifest:
    """Render a full corpus to ``out_dir``.

    Layout::

        images/{split}/{id}.png   8-bit image
        rois/{split}/{id}.png     ROI mask, {0, 255}
        masks/{split}/{id}.png    lesion mask, lesioned test samples only
        manifest.csv              path,mask_path,label,split,roi_path
        phantom_spec.json         spec fields plus seed

    The same ``(spec, seed)`` always produces byte-identical files.
    """
    spec.validate()
    root = Path(out_dir)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise InvalidSpecError(f"cannot create output directory {root}: {exc}") from exc

    entries = []
    for index, (split, label, local) in enumerate(_plan(spec)):
        sid = f"{'n' if label == 0 else 'l'}{local:05d}"
        sample = render_sample(spec, seed, index, label)
        img_rel = f"images/{split}/{sid}.png"
        roi_rel = f"rois/{split}/{sid}.png"
        _to_png(root / img_rel, _quantize(sample.image))
        _to_png(root / roi_rel, _mask_png(sample.roi_mask))
        mask_rel = None
        if label == 1 and split == "test":
            mask_rel = f"masks/{split}/{sid}.png"
            _to_png(root / mask_rel, _mask_png(sample.lesion_mask))
        entries.append(ManifestEntry(img_rel, mask_rel, label, split, roi_rel))

    manifest = CorpusManifest(root=root, entries=entries, generator_seed=int(seed), phantom_spec=spec)
    write_manifest(manifest)
    spec_dump = dict(spec.to_dict(), seed=int(seed))
    (root / SPEC_NAME).write_text(json.dumps(spec_dump, indent=2, sort_keys=True) + "\n")
    return manifest


def write_manifest(manifest: CorpusManifest) -> Path:
    path = manifest.root / MANIFEST_NAME
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_COLUMNS)
        for e in manifest.entries:
            writer.writerow([e.path, e.mask_path or "", e.label, e.split, e.roi_path])
    return path


def load_manifest(corpus_dir: Union[str, Path]) -> CorpusManifest:
    root = Path(corpus_dir)
    path = root / MANIFEST_NAME
    if not path.is_file():
        raise FileNotFoundError(f"no manifest at {path}")
    entries = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            entries.append(ManifestEntry(
                path=row["path"],
                mask_path=row["mask_path"] or None,
                label=int(row["label"]),
                split=row["split"],
                roi_path=row["roi_path"],
            ))
    seed, spec = 0, None
    spec_path = root / SPEC_NAME
    if spec_path.is_file():
        d = json.loads(spec_path.read_text())
        seed = int(d.pop("seed", 0))
        spec = PhantomSpec.from_dict(d)
    return CorpusManifest(root=root, entries=entries, generator_seed=seed, phantom_spec=spec)


def _read_png(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L"))


def load_sample(manifest: CorpusManifest, entry: ManifestEntry) -> ImageSample:
    image = _read_png(manifest.root / entry.path).astype(np.float64) / 255.0
    roi = _read_png(manifest.root / entry.roi_path) > 127
    lesion = None
    if entry.mask_path:
        lesion = (_read_png(manifest.root / entry.mask_path) > 127) & roi
    return ImageSample(image=image, label=entry.label, roi_mask=roi, lesion_mask=lesion,
                       sample_id=entry.sample_id)


def load_samples(manifest: CorpusManifest, split: Optional[str] = None) -> list:
    entries = manifest.entries if split is None else manifest.split(split)
    return [load_sample(manifest, e) for e in entries]


# ---------------------------------------------------------------------------
# preprocessing


def compute_norm_stats(train: Union[CorpusManifest, Iterable[ImageSample]]) -> NormStats:
    """Population mean/std over ROI pixels of the training images.

    Accepts either a manifest (its ``train`` split is loaded) or samples.
    """
    if isinstance(train, CorpusManifest):
        train = load_samples(train, "train")
    values = [np.asarray(s.image, dtype=np.float64)[s.roi_mask.astype(bool)] for s in train]
    if sum(v.size for v in values) == 0:
        raise EmptyCorpusError("training split has no ROI pixels")
    # two-pass for accuracy; sorting keeps the result independent of order
    allv = np.sort(np.concatenate(values))
    mean = float(allv.mean())
    std = math.sqrt(float(np.mean((allv - mean) ** 2)))
    if not std > 1e-12:
        raise DegenerateStatsError("all training ROI pixels are identical")
    return NormStats(mean=mean, std=std)


def resize_image(image: np.ndarray, target_size: int) -> np.ndarray:
    if image.shape == (target_size, target_size):
        return image.copy()
    return cv2.resize(image, (target_size, target_size), interpolation=cv2.INTER_LINEAR)


def resize_mask(mask: np.ndarray, target_size: int) -> np.ndarray:
    if mask.shape == (target_size, target_size):
        return mask.astype(bool).copy()
    out = cv2.resize(mask.astype(np.uint8), (target_size, target_size),
                     interpolation=cv2.INTER_NEAREST)
    return out.astype(bool)


def preprocess(sample: ImageSample, stats: NormStats, target_size: int) -> np.ndarray:
    """Mask to the ROI, resize bilinearly, then z-score with ``stats``."""
    image = np.where(sample.roi_mask, sample.image, 0.0).astype(np.float64)
    image = resize_image(image, target_size)
    return ((image - stats.mean) / stats.std).astype(np.float32)


@dataclass
class PreparedSet:
    """Model-ready arrays for a list of samples."""

    images: np.ndarray      # (N, 1, S, S) float32
    rois: np.ndarray        # (N, 1, S, S) bool
    labels: np.ndarray      # (N,) int64
    raw: np.ndarray         # (N, S, S) float32, [0,1] intensities after masking/resize
    lesion_masks: Optional[np.ndarray] = None  # (N, S, S) bool
    ids: Sequence[str] = ()

    def __len__(self):
        return len(self.labels)

    @property
    def fill_value(self) -> float:
        """Normalized value of an outside-ROI pixel."""
        out = self.images[~self.rois]
        return float(out[0]) if out.size else 0.0


def prepare(samples: Sequence[ImageSample], stats: NormStats, target_size: int) -> PreparedSet:
    images, rois, raw, lesions = [], [], [], []
    have_masks = all(s.lesion_mask is not None for s in samples) and len(samples) > 0
    for s in samples:
        images.append(preprocess(s, stats, target_size))
        rois.append(resize_mask(s.roi_mask, target_size))
        raw.append(resize_image(np.where(s.roi_mask, s.image, 0.0), target_size))
        if have_masks:
            lesions.append(resize_mask(s.lesion_mask, target_size) & rois[-1])
    n = len(samples)
    shape = (n, 1, target_size, target_size)
    return PreparedSet(
        images=np.asarray(images, dtype=np.float32).reshape(shape),
        rois=np.asarray(rois, dtype=bool).reshape(shape),
        labels=np.asarray([s.label for s in samples], dtype=np.int64),
        raw=np.asarray(raw, dtype=np.float32).reshape(n, target_size, target_size),
        lesion_masks=np.asarray(lesions, dtype=bool) if have_masks else None,
        ids=[s.sample_id for s in samples],
    )
