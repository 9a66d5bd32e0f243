"""Synthetic low-contrast lesion corpus: generation and loading.

Each sample is a smooth background field with one randomly placed and
deformed bright region. The image is blurred and noised so the region is
ambiguous; the ground-truth mask is the crisp pre-blur region.
"""

import hashlib
import json
from dataclasses import dataclass, asdict, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

SPLITS = ("train", "val", "test")
SHAPE_FAMILIES = ("ellipse", "blob", "crescent")

# accepted foreground area fraction for generated shapes
AREA_RANGE = (0.05, 0.30)
# peak-to-peak amplitude of the smooth background field
BACKGROUND_LEVEL = 0.4
BACKGROUND_AMPLITUDE = 0.08


@dataclass(frozen=True)
class SegSample:
    image: np.ndarray  # (H, W) float32 in [0, 1]
    mask: np.ndarray   # (H, W) uint8 in {0, 1}
    id: str
    split: str

    def __post_init__(self):
        if self.image.shape != self.mask.shape:
            raise ValueError(f"{self.id}: image {self.image.shape} vs mask {self.mask.shape}")
        if not np.isin(self.mask, (0, 1)).all():
            raise ValueError(f"{self.id}: mask is not binary")


@dataclass(frozen=True)
class CorpusSpec:
    counts: dict = field(default_factory=lambda: {"train": 200, "val": 20, "test": 50})
    image_size: int = 64
    contrast: float = 0.15
    noise_std: float = 0.1
    blur_radius: float = 2.0
    shape_family: str = "blob"
    seed: int = 0

    def __post_init__(self):
        if any(c < 1 for c in self.counts.values()):
            raise ValueError("split counts must be >= 1")
        if not 0.0 < self.contrast <= 1.0:
            raise ValueError(f"contrast must lie in (0, 1], got {self.contrast}")
        if self.shape_family not in SHAPE_FAMILIES:
            raise ValueError(f"unknown shape family {self.shape_family!r}")


def _ellipse_mask(size, rng, scale=1.0):
    h = w = size
    cy, cx = rng.uniform(0.3, 0.7, 2) * size
    a = rng.uniform(0.10, 0.28) * size * scale
    b = rng.uniform(0.10, 0.28) * size * scale
    theta = rng.uniform(0, np.pi)
    yy, xx = np.mgrid[0:h, 0:w]
    y, x = yy - cy, xx - cx
    ct, st = np.cos(theta), np.sin(theta)
    u = (ct * x + st * y) / a
    v = (-st * x + ct * y) / b
    return (u ** 2 + v ** 2 <= 1.0)


def _blob_mask(size, rng):
    cy, cx = rng.uniform(0.3, 0.7, 2) * size
    r0 = rng.uniform(0.12, 0.26) * size
    nharm = 4
    amp = rng.uniform(0.0, 0.25, nharm)
    phase = rng.uniform(0, 2 * np.pi, nharm)
    yy, xx = np.mgrid[0:size, 0:size]
    ang = np.arctan2(yy - cy, xx - cx)
    rad = np.hypot(yy - cy, xx - cx)
    r = r0 * (1.0 + sum(a * np.cos((k + 2) * ang + p)
                        for k, (a, p) in enumerate(zip(amp, phase))))
    return rad <= r


def _crescent_mask(size, rng):
    outer = _ellipse_mask(size, rng)
    rng2 = np.random.default_rng(rng.integers(2 ** 63))
    inner = _ellipse_mask(size, rng2, scale=0.8)
    mask = outer & ~inner
    return mask if mask.any() else outer


def _sample_mask(spec: CorpusSpec, rng) -> np.ndarray:
    makers = {"ellipse": _ellipse_mask, "blob": _blob_mask, "crescent": _crescent_mask}
    make = makers[spec.shape_family]
    lo, hi = AREA_RANGE
    for _ in range(200):
        mask = make(spec.image_size, rng)
        frac = mask.mean()
        if lo <= frac <= hi:
            return mask.astype(np.uint8)
    raise RuntimeError("failed to draw a shape inside the area range")


def render_sample(spec: CorpusSpec, sample_seed) -> tuple[np.ndarray, np.ndarray]:
    """Render one (image, mask) pair deterministically from a seed."""
    rng = np.random.default_rng(sample_seed)
    size = spec.image_size
    mask = _sample_mask(spec, rng)
    # smooth background: low-frequency field interpolated from a coarse grid
    coarse = rng.uniform(0, 1, (6, 6))
    field = np.asarray(Image.fromarray((coarse * 255).astype(np.uint8))
                       .resize((size, size), Image.BILINEAR), dtype=np.float64) / 255.0
    image = BACKGROUND_LEVEL + BACKGROUND_AMPLITUDE * (field - 0.5)
    image = image + spec.contrast * mask
    if spec.blur_radius > 0:
        image = gaussian_filter(image, spec.blur_radius)
    if spec.noise_std > 0:
        image = image + rng.normal(0, spec.noise_std, image.shape)
    return np.clip(image, 0.0, 1.0).astype(np.float32), mask


def _sample_id(split: str, i: int) -> str:
    return f"{split}_{i:05d}"


def generate_corpus(spec: CorpusSpec, out_root) -> Path:
    """Write the corpus directory tree and manifest; returns the root path."""
    root = Path(out_root)
    ids = {}
    hashes = {}
    for si, split in enumerate(SPLITS):
        count = spec.counts.get(split, 0)
        (root / split / "images").mkdir(parents=True, exist_ok=True)
        (root / split / "masks").mkdir(parents=True, exist_ok=True)
        ids[split] = []
        for i in range(count):
            image, mask = render_sample(spec, [spec.seed, si, i])
            sid = _sample_id(split, i)
            img_path = root / split / "images" / f"{sid}.png"
            mask_path = root / split / "masks" / f"{sid}.png"
            Image.fromarray(np.round(image * 255).astype(np.uint8)).save(img_path)
            Image.fromarray(mask * 255).save(mask_path)
            ids[split].append(sid)
            hashes[sid] = {
                "image": hashlib.sha256(img_path.read_bytes()).hexdigest(),
                "mask": hashlib.sha256(mask_path.read_bytes()).hexdigest(),
            }
    manifest = {"spec": asdict(spec), "ids": ids, "hashes": hashes}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return root


def load_manifest(root) -> dict:
    path = Path(root) / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"no manifest.json under {root}")
    return json.loads(path.read_text())


def _resize(arr: np.ndarray, size: int, nearest: bool) -> np.ndarray:
    if arr.shape == (size, size):
        return arr
    mode = Image.NEAREST if nearest else Image.BILINEAR
    img = Image.fromarray(arr)
    return np.asarray(img.resize((size, size), mode))


def load_corpus(root, split: str, image_size: int | None = None):
    """Yield SegSamples for one split in manifest order, validating each.

    image_size, when given, resizes images bilinearly and masks with
    nearest-neighbor (preserving binarity)."""
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}")
    manifest = load_manifest(root)
    root = Path(root)
    for sid in manifest["ids"].get(split, []):
        img_path = root / split / "images" / f"{sid}.png"
        mask_path = root / split / "masks" / f"{sid}.png"
        try:
            img_raw = np.asarray(Image.open(img_path).convert("L"))
            mask_raw = np.asarray(Image.open(mask_path))
        except (OSError, FileNotFoundError) as e:
            raise IOError(f"sample {sid}: cannot load ({e})") from e
        if not np.isin(mask_raw, (0, 255)).all():
            raise ValueError(f"sample {sid}: mask {mask_path} has values outside {{0, 255}}")
        if image_size is not None:
            img_raw = _resize(img_raw, image_size, nearest=False)
            mask_raw = _resize(mask_raw, image_size, nearest=True)
        yield SegSample(image=(img_raw / 255.0).astype(np.float32),
                        mask=(mask_raw > 127).astype(np.uint8),
                        id=sid, split=split)
