"""Synthetic multi-scale dataset, Lanczos pyramids, augmentation, splits.

Dataset directory layout::

    manifest.csv          id, patient_id, split, class_or_empty, mag_<m>...
    images/<id>_<m>.png   8-bit RGB, one file per record and magnification
    stats.json            per-magnification channel mean/std of the train split

Auxiliary rows carry an empty class column. ``aux_v1`` rows belong to both
auxiliary pools; ``aux_v2`` rows only to the larger one.
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from .optim import SeedLike, as_generator
from .resize import lanczos_resize

DEFAULT_MAGS = (1.0, 0.5, 0.25, 0.125)
SPLIT_NAMES = ("train", "validation", "test", "aux_v1", "aux_v2", "development")
STD_FLOOR = 1e-6

# synthetic texture parameters
BLOB_PERIOD = 32
BLOB_SIGMA = (5.0, 9.0)
STRIPE_PERIOD = 3.0
STRIPE_AMPLITUDE = 0.22
STRIPE_DC = 0.12
NOISE_SIGMA = 0.05


class ManifestError(ValueError):
    pass


# ---------------------------------------------------------------------------
# records and magnification tags
# ---------------------------------------------------------------------------


def mag_key(mag: float) -> str:
    """Canonical text form of a magnification, e.g. 0.125 -> '0.125', 1.0 -> '1'."""
    mag = float(mag)
    if not 0 < mag <= 1:
        raise ValueError(f"magnification must lie in (0, 1], got {mag}")
    return f"{mag:g}"


def scaled_size(base: int, mag: float) -> int:
    return max(1, int(round(base * float(mag))))


@dataclass
class ImageRecord:
    id: str
    patient_id: str
    class_label: Optional[int]
    pyramid: Dict[str, str] = field(default_factory=dict)

    def unlabeled(self) -> "UnlabeledRecord":
        return UnlabeledRecord(self.id, self.patient_id, dict(self.pyramid))


@dataclass(frozen=True)
class UnlabeledRecord:
    """Record view without a label field; the distillation phase only accepts these."""

    id: str
    patient_id: str
    pyramid: Dict[str, str]


@dataclass
class SplitManifest:
    train: List[str] = field(default_factory=list)
    validation: List[str] = field(default_factory=list)
    test: List[str] = field(default_factory=list)
    aux_v1: List[str] = field(default_factory=list)
    aux_v2: List[str] = field(default_factory=list)
    development: List[str] = field(default_factory=list)

    def split_of(self) -> Dict[str, str]:
        """Record id -> the single split tag written to manifest.csv."""
        out = {}
        for name in ("train", "validation", "test", "development"):
            for rid in getattr(self, name):
                out[rid] = name
        v1 = set(self.aux_v1)
        for rid in self.aux_v2:
            out[rid] = "aux_v1" if rid in v1 else "aux_v2"
        return out


# ---------------------------------------------------------------------------
# synthetic images
# ---------------------------------------------------------------------------


def derive_seed(global_seed, *parts) -> int:
    """Stable per-component seed: sha256 over the global seed and identifiers."""
    text = "/".join([str(global_seed), *map(str, parts)])
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little")


def _blob_field(rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cells = max(1, size // BLOB_PERIOD)
    field_ = np.zeros((size, size))
    for gy in range(cells):
        for gx in range(cells):
            if rng.random() < 0.35:
                continue
            cy = (gy + rng.uniform(0.15, 0.85)) * BLOB_PERIOD
            cx = (gx + rng.uniform(0.15, 0.85)) * BLOB_PERIOD
            s = rng.uniform(*BLOB_SIGMA)
            field_ += rng.uniform(0.7, 1.0) * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))
    return np.minimum(field_, 1.0)


def _patch_mask(rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    mask = np.zeros((size, size))
    for _ in range(rng.integers(3, 7)):
        cy, cx = rng.uniform(0, size, 2)
        r = rng.uniform(0.08, 0.18) * size
        d = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
        mask = np.maximum(mask, np.clip((r - d) / 4.0, 0.0, 1.0))
    return mask


def synth_image(label: int, size: int, seed: int) -> np.ndarray:
    """One ``[3, size, size]`` texture in [0, 1].

    class 0: coarse blobs; class 1: blobs and fine stripe patches;
    class 2: stripe patches only. Stripes have a period of three pixels so
    they vanish under 8x downsampling, leaving only their faint mean tint.
    """
    rng = np.random.default_rng(seed)
    background = np.array([0.86, 0.72, 0.82]) + rng.uniform(-0.03, 0.03, 3)
    img = np.broadcast_to(background[:, None, None], (3, size, size)).copy()
    if label in (0, 1):
        blobs = _blob_field(rng, size)
        img -= blobs[None] * np.array([0.35, 0.45, 0.20])[:, None, None]
    if label in (1, 2):
        yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
        theta = rng.choice([0.0, np.pi / 2, np.pi / 4, 3 * np.pi / 4])
        phase = rng.uniform(0, 2 * np.pi)
        proj = xx * np.cos(theta) + yy * np.sin(theta)
        if theta in (np.pi / 4, 3 * np.pi / 4):
            proj = proj * np.sqrt(2) / 2
        wave = np.sin(2 * np.pi * proj / STRIPE_PERIOD + phase)
        mask = _patch_mask(rng, size)
        dark = mask * (STRIPE_AMPLITUDE * wave + STRIPE_DC)
        img -= dark[None] * np.array([0.8, 1.0, 0.6])[:, None, None]
    img += rng.normal(0.0, NOISE_SIGMA, img.shape)
    return np.clip(img, 0.0, 1.0)


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def save_png(img: np.ndarray, path) -> None:
    Image.fromarray(np.ascontiguousarray(to_uint8(img).transpose(1, 2, 0)), mode="RGB").save(
        path, format="PNG", optimize=False, compress_level=6)


def load_png(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr.transpose(2, 0, 1) / 255.0


def build_pyramid(base_image: np.ndarray, levels: Sequence[float]) -> Dict[str, np.ndarray]:
    """Resample the base image to every level, each straight from the base.

    Levels are quantised to 8 bits exactly as they are stored on disk, so a
    level re-derived from the stored base compares byte-for-byte.
    """
    base = np.asarray(base_image, dtype=np.float64)
    _, h, w = base.shape
    out = {}
    for level in levels:
        key = mag_key(level)
        if float(level) == 1.0:
            out[key] = base.copy()
        else:
            img = lanczos_resize(base, scaled_size(h, level), scaled_size(w, level))
            out[key] = to_uint8(img) / 255.0
    return out


def gen_synthetic_dataset(num_patients: int, classes: int = 3, base_size: int = 256, rng_seed: int = 0,
                          out_dir=None, mags: Sequence[float] = DEFAULT_MAGS,
                          images_per_patient: Tuple[int, int] = (1, 3)) -> List[ImageRecord]:
    """Generate records (and, with ``out_dir``, their PNG pyramids).

    Patient ``p`` has class ``p % classes``. Every random draw comes from a
    seed derived from ``(rng_seed, record id)`` so generation order does not
    matter.
    """
    if classes != 3:
        raise ValueError("the synthetic generator defines exactly three texture classes")
    if num_patients < classes:
        raise ValueError(f"need at least {classes} patients, got {num_patients}")
    if base_size < 8:
        raise ValueError("base_size too small")
    mags = sorted({float(m) for m in mags} | {1.0}, reverse=True)
    keys = [mag_key(m) for m in mags]
    img_dir = None
    if out_dir is not None:
        img_dir = Path(out_dir) / "images"
        img_dir.mkdir(parents=True, exist_ok=True)
    width = len(str(num_patients - 1))
    records = []
    lo, hi = images_per_patient
    for p in range(num_patients):
        pid = f"P{p:0{width}d}"
        label = p % classes
        n_img = int(np.random.default_rng(derive_seed(rng_seed, pid)).integers(lo, hi + 1))
        for k in range(n_img):
            rid = f"{pid}_{k}"
            rec = ImageRecord(rid, pid, label, {key: f"images/{rid}_{key}.png" for key in keys})
            records.append(rec)
            if img_dir is None:
                continue
            base = to_uint8(synth_image(label, base_size, derive_seed(rng_seed, rid))) / 255.0
            for key, level in build_pyramid(base, mags).items():
                save_png(level, Path(out_dir) / rec.pyramid[key])
    return records


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AugmentConfig:
    brightness: float = 0.1
    contrast: float = 0.1
    saturation: float = 0.1
    hue: float = 0.05
    flip_prob: float = 0.5
    rotations: Tuple[int, ...] = (0, 90, 180, 270)

    def __post_init__(self):
        object.__setattr__(self, "rotations", tuple(int(r) for r in self.rotations))
        if min(self.brightness, self.contrast, self.saturation, self.hue) < 0:
            raise ValueError("jitter half-ranges must be non-negative")
        if not 0 <= self.flip_prob <= 1:
            raise ValueError("flip_prob must lie in [0, 1]")
        if not self.rotations or any(r % 90 for r in self.rotations):
            raise ValueError("rotations must be a non-empty set of right angles")

    @classmethod
    def identity(cls) -> "AugmentConfig":
        return cls(0.0, 0.0, 0.0, 0.0, 0.0, (0,))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["rotations"] = list(self.rotations)
        return d


@dataclass(frozen=True)
class AugmentParams:
    brightness: float
    contrast: float
    saturation: float
    hue: float
    hflip: bool
    vflip: bool
    quarter_turns: int


def sample_augment(cfg: AugmentConfig, rng: np.random.Generator) -> AugmentParams:
    u = rng.uniform(-1.0, 1.0, 4)
    flips = rng.random(2) < cfg.flip_prob
    rot = cfg.rotations[int(rng.integers(len(cfg.rotations)))]
    return AugmentParams(1 + cfg.brightness * u[0], 1 + cfg.contrast * u[1], 1 + cfg.saturation * u[2],
                         cfg.hue * u[3], bool(flips[0]), bool(flips[1]), (rot // 90) % 4)


_LUMA = np.array([0.299, 0.587, 0.114])
_RGB2YIQ = np.array([[0.299, 0.587, 0.114], [0.596, -0.274, -0.322], [0.211, -0.523, 0.312]])
_YIQ2RGB = np.linalg.inv(_RGB2YIQ)


def apply_augment(image: np.ndarray, p: AugmentParams) -> np.ndarray:
    """Colour jitter, then flips and right-angle rotation; clipped to [0, 1]."""
    x = np.asarray(image, dtype=np.float64)
    if p.brightness != 1.0:
        x = x * p.brightness
    if p.contrast != 1.0:
        m = float(np.tensordot(_LUMA, x, axes=1).mean())
        x = m + p.contrast * (x - m)
    if p.saturation != 1.0:
        gray = np.tensordot(_LUMA, x, axes=1)[None]
        x = gray + p.saturation * (x - gray)
    if p.hue != 0.0:
        a = 2 * np.pi * p.hue
        rot = np.array([[1, 0, 0], [0, np.cos(a), -np.sin(a)], [0, np.sin(a), np.cos(a)]])
        x = np.tensordot(_YIQ2RGB @ rot @ _RGB2YIQ, x, axes=1)
    x = np.clip(x, 0.0, 1.0)
    if p.hflip:
        x = x[:, :, ::-1]
    if p.vflip:
        x = x[:, ::-1, :]
    if p.quarter_turns:
        x = np.rot90(x, p.quarter_turns, axes=(1, 2))
    return np.ascontiguousarray(x)


def augment(image: np.ndarray, cfg: AugmentConfig, rng: SeedLike) -> np.ndarray:
    return apply_augment(image, sample_augment(cfg, as_generator(rng)))


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------


def split_dataset(records: Sequence[ImageRecord], ratios=(0.70, 0.15, 0.15), aux_fraction_v1: float = 0.0,
                  aux_fraction_v2: float = 0.0, dev_fraction: float = 0.0, rng_seed: int = 0) -> SplitManifest:
    """Assign whole patients to splits.

    Fractions are of the full patient pool. The auxiliary pool is drawn
    first (its first ``aux_fraction_v1`` share forms ``aux_v1``, so the two
    are nested by construction), then the development set; the remaining
    labelled patients are divided by ``ratios``.
    """
    if len(ratios) != 3 or min(ratios) < 0 or not math.isclose(sum(ratios), 1.0, abs_tol=1e-9):
        raise ValueError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    if not 0 <= aux_fraction_v1 <= aux_fraction_v2 <= 1 or not 0 <= dev_fraction <= 1:
        raise ValueError("need 0 <= aux_fraction_v1 <= aux_fraction_v2 <= 1 and 0 <= dev_fraction <= 1")
    patients = sorted({r.patient_id for r in records})
    n = len(patients)
    n_v2 = int(round(aux_fraction_v2 * n))
    n_v1 = int(round(aux_fraction_v1 * n))
    n_dev = int(round(dev_fraction * n))
    n_lab = n - n_v2 - n_dev
    if n_lab < 3:
        raise ValueError(f"fractions leave {n_lab} labelled patients; at least 3 are needed")
    n_train = int(round(ratios[0] * n_lab))
    n_val = int(round(ratios[1] * n_lab))
    if n_train + n_val > n_lab:
        n_val = n_lab - n_train
    order = [patients[i] for i in np.random.default_rng(rng_seed).permutation(n)]
    groups = {
        "aux_v1": order[:n_v1],
        "aux_v2": order[:n_v2],
        "development": order[n_v2 : n_v2 + n_dev],
    }
    labelled = order[n_v2 + n_dev :]
    groups["train"] = labelled[:n_train]
    groups["validation"] = labelled[n_train : n_train + n_val]
    groups["test"] = labelled[n_train + n_val :]

    by_patient: Dict[str, List[str]] = {}
    for r in records:
        by_patient.setdefault(r.patient_id, []).append(r.id)
    out = SplitManifest()
    for name in SPLIT_NAMES:
        pset = set(groups[name])
        setattr(out, name, [r.id for r in records if r.patient_id in pset])
    return out


def check_split(manifest: SplitManifest, records: Sequence[ImageRecord]) -> None:
    """Raise ``ManifestError`` if any split invariant is broken."""
    patient = {r.id: r.patient_id for r in records}
    pats = {name: {patient[i] for i in getattr(manifest, name)} for name in SPLIT_NAMES}
    for a, b in (("train", "validation"), ("train", "test"), ("validation", "test"), ("development", "test")):
        if pats[a] & pats[b]:
            raise ManifestError(f"patients shared between {a} and {b}")
    if not set(manifest.aux_v1) <= set(manifest.aux_v2):
        raise ManifestError("aux_v1 is not a subset of aux_v2")
    for s in ("train", "validation", "test"):
        if pats["aux_v2"] & pats[s]:
            raise ManifestError(f"auxiliary patients overlap {s}")


# ---------------------------------------------------------------------------
# manifest io
# ---------------------------------------------------------------------------


def save_manifest(root, records: Sequence[ImageRecord], manifest: SplitManifest) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    tags = manifest.split_of()
    keys = sorted({k for r in records for k in r.pyramid}, key=float, reverse=True)
    path = root / "manifest.csv"
    aux = set(manifest.aux_v2)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "patient_id", "split", "class_or_empty", *[f"mag_{k}" for k in keys]])
        for r in records:
            label = "" if (r.id in aux or r.class_label is None) else str(r.class_label)
            w.writerow([r.id, r.patient_id, tags.get(r.id, "unused"), label, *[r.pyramid.get(k, "") for k in keys]])
    return path


def load_manifest(root, check_files: bool = True) -> Tuple[SplitManifest, Dict[str, ImageRecord]]:
    root = Path(root)
    path = root / "manifest.csv" if root.is_dir() else root
    root = path.parent
    if not path.exists():
        raise ManifestError(f"manifest not found: {path}")
    records: Dict[str, ImageRecord] = {}
    manifest = SplitManifest()
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ManifestError(f"{path}:1:1: empty manifest") from None
        fixed = ["id", "patient_id", "split", "class_or_empty"]
        if header[:4] != fixed:
            raise ManifestError(f"{path}:1:1: expected leading columns {fixed}, got {header[:4]}")
        mag_cols = header[4:]
        for col_idx, col in enumerate(mag_cols, start=5):
            if not col.startswith("mag_"):
                raise ManifestError(f"{path}:1:{col_idx}: bad magnification column {col!r}")
        for row in reader:
            line = reader.line_num
            if len(row) != len(header):
                raise ManifestError(f"{path}:{line}:1: expected {len(header)} fields, got {len(row)}")
            rid, pid, split, label = row[:4]
            if rid in records:
                raise ManifestError(f"{path}:{line}:1: duplicate record id {rid!r}")
            if split not in SPLIT_NAMES + ("unused",):
                raise ManifestError(f"{path}:{line}:3: unknown split {split!r}")
            try:
                cls = int(label) if label != "" else None
            except ValueError:
                raise ManifestError(f"{path}:{line}:4: bad class label {label!r}") from None
            pyramid = {c[4:]: p for c, p in zip(mag_cols, row[4:]) if p}
            if check_files:
                for key, rel in pyramid.items():
                    if not (root / rel).exists():
                        raise ManifestError(f"record {rid!r}: missing image {rel} (magnification {key})")
            records[rid] = ImageRecord(rid, pid, cls, pyramid)
            if split == "aux_v1":
                manifest.aux_v1.append(rid)
                manifest.aux_v2.append(rid)
            elif split != "unused":
                getattr(manifest, split).append(rid)
    return manifest, records


# ---------------------------------------------------------------------------
# standardisation
# ---------------------------------------------------------------------------


def split_fingerprint(ids: Iterable[str]) -> str:
    return hashlib.sha256("\n".join(sorted(ids)).encode()).hexdigest()


def compute_standardization(images: Iterable[np.ndarray]) -> Tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and std over every pixel of the given training images."""
    total = None
    sq = None
    count = 0
    for img in images:
        x = np.asarray(img, dtype=np.float64).reshape(img.shape[0], -1)
        s, s2 = x.sum(axis=1), (x * x).sum(axis=1)
        total = s if total is None else total + s
        sq = s2 if sq is None else sq + s2
        count += x.shape[1]
    if not count:
        raise ValueError("cannot standardise an empty training set")
    mean = total / count
    var = np.maximum(sq / count - mean * mean, 0.0)
    return mean, np.maximum(np.sqrt(var), STD_FLOOR)


def standardize(img: np.ndarray, mean, std) -> np.ndarray:
    return (img - np.asarray(mean)[:, None, None]) / np.asarray(std)[:, None, None]


class DatasetDir:
    """A generated dataset on disk with cached image access."""

    def __init__(self, root, check_files: bool = True):
        self.root = Path(root)
        self.manifest, self.records = load_manifest(self.root, check_files=check_files)
        self._cache: Dict[Tuple[str, str], np.ndarray] = {}
        self._stats: Optional[dict] = None

    @property
    def mags(self) -> List[str]:
        keys = {k for r in self.records.values() for k in r.pyramid}
        return sorted(keys, key=float, reverse=True)

    def split(self, name: str) -> List[ImageRecord]:
        return [self.records[i] for i in getattr(self.manifest, name)]

    def image(self, rec, mag) -> np.ndarray:
        key = mag_key(mag) if not isinstance(mag, str) else mag
        ck = (rec.id, key)
        if ck not in self._cache:
            if key not in rec.pyramid:
                raise KeyError(f"record {rec.id!r} has no magnification {key}")
            self._cache[ck] = load_png(self.root / rec.pyramid[key])
        return self._cache[ck]

    def stats(self, mag) -> Tuple[np.ndarray, np.ndarray]:
        key = mag_key(mag) if not isinstance(mag, str) else mag
        path = self.root / "stats.json"
        if self._stats is None and path.exists():
            self._stats = json.loads(path.read_text())
        fp = split_fingerprint(self.manifest.train)
        entry = (self._stats or {}).get(key)
        if entry is None or entry["train_fingerprint"] != fp:
            mean, std = compute_standardization(self.image(r, key) for r in self.split("train"))
            return mean, std
        return np.array(entry["mean"]), np.array(entry["std"])

    def write_stats(self) -> Path:
        fp = split_fingerprint(self.manifest.train)
        out = {}
        for key in self.mags:
            mean, std = compute_standardization(self.image(r, key) for r in self.split("train"))
            out[key] = {"mean": mean.tolist(), "std": std.tolist(), "train_fingerprint": fp,
                        "source_split": "train", "n_images": len(self.manifest.train)}
        path = self.root / "stats.json"
        path.write_text(json.dumps(out, indent=2, sort_keys=True) + "\n")
        self._stats = out
        return path


def make_dataset(root, num_patients: int, seed: int, base_size: int = 256, mags: Sequence[float] = DEFAULT_MAGS,
                 aux_v1_patients: int = 0, aux_v2_patients: int = 0, dev_patients: int = 0,
                 ratios=(0.70, 0.15, 0.15)) -> DatasetDir:
    """Generate, split and index a full dataset directory.

    ``num_patients`` counts labelled patients only; auxiliary and development
    patients are generated on top.
    """
    if aux_v1_patients > aux_v2_patients:
        raise ValueError("aux_v1_patients cannot exceed aux_v2_patients")
    total = num_patients + aux_v2_patients + dev_patients
    records = gen_synthetic_dataset(total, base_size=base_size, rng_seed=seed, out_dir=root, mags=mags)
    manifest = split_dataset(records, ratios, aux_v1_patients / total, aux_v2_patients / total,
                             dev_patients / total, rng_seed=derive_seed(seed, "split"))
    check_split(manifest, records)
    save_manifest(root, records, manifest)
    ds = DatasetDir(root)
    ds.write_stats()
    return ds
