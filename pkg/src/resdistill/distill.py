"""Teacher training, self-supervised resolution distillation and fine-tuning.

All three phases share one loop: logical batches of ``accumulation_size``
samples are pushed through in micro-batches, each micro-batch loss scaled
by its share of the logical batch, and Adam steps once per logical batch.
Because the network normalises per sample, the accumulated gradient equals
the full-batch gradient.
"""
from __future__ import annotations

import csv
import hashlib
import json
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .data import (AugmentConfig, AugmentParams, DatasetDir, ImageRecord, UnlabeledRecord, apply_augment, derive_seed, mag_key,
                   sample_augment, standardize)
from .model import Model, ModelConfig, ModelOutput, build_model, freeze_except_fc, load_checkpoint, save_checkpoint
from .optim import AdamConfig, adam_step
from .resize import ResizeMode, resize_teacher_maps
from .tensor import Tensor, backward, cross_entropy_loss, mse_loss, no_grad, soft_loss

DTYPES = {"f32": np.float32, "f64": np.float64}
TRACE_COLUMNS = ("epoch", "soft_loss", "pixel_loss", "total_loss", "dev_accuracy")


def config_fingerprint(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


@dataclass(frozen=True)
class TrainConfig:
    """Settings for the supervised phases (teacher, baseline, fine-tune)."""

    mag: float = 1.0
    epochs: int = 60
    adam: AdamConfig = field(default_factory=AdamConfig)
    accumulation_size: int = 8
    micro_batch_size: int = 8
    augment: bool = True
    augment_config: AugmentConfig = field(default_factory=AugmentConfig)
    precision: str = "f32"
    seed: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["adam"] = self.adam.to_dict()
        d["augment_config"] = self.augment_config.to_dict()
        return d


@dataclass(frozen=True)
class DistillConfig:
    temperature: float = 4.0
    resize_mode: ResizeMode = ResizeMode.MP_AND_INT
    soft_weight: float = 1.0
    pixel_weight: float = 1.0
    teacher_mag: float = 1.0
    student_mag: float = 0.125
    adam: AdamConfig = field(default_factory=AdamConfig)
    epochs: int = 60
    accumulation_size: int = 8
    micro_batch_size: int = 8
    augment: bool = True
    augment_config: AugmentConfig = field(default_factory=AugmentConfig)
    warm_start: bool = False
    precision: str = "f32"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "resize_mode", ResizeMode.parse(self.resize_mode))
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if min(self.soft_weight, self.pixel_weight) < 0:
            raise ValueError("loss weights must be non-negative")
        if not self.teacher_mag >= self.student_mag:
            raise ValueError("teacher_mag must not be below student_mag")

    @property
    def size_ratio(self) -> float:
        return self.teacher_mag / self.student_mag

    def to_dict(self) -> dict:
        d = asdict(self)
        d["resize_mode"] = self.resize_mode.value
        d["adam"] = self.adam.to_dict()
        d["augment_config"] = self.augment_config.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DistillConfig":
        d = dict(d)
        if "adam" in d and isinstance(d["adam"], dict):
            d["adam"] = AdamConfig(**d["adam"])
        if "augment_config" in d and isinstance(d["augment_config"], dict):
            d["augment_config"] = AugmentConfig(**d["augment_config"])
        return cls(**d)


@dataclass
class PhaseResult:
    model: Model
    trace: List[dict]
    best_epoch: int
    wall_seconds: float
    config: dict
    fingerprint: str
    checkpoint: Optional[Path] = None

    @property
    def loss_trace(self) -> List[float]:
        return [row["total_loss"] for row in self.trace]

    @property
    def metric_trace(self) -> List[Optional[float]]:
        return [row["dev_accuracy"] for row in self.trace]

    def save(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        self.checkpoint = save_checkpoint(self.model, out / "checkpoint.rdck",
                                          extra={"fingerprint": self.fingerprint, "best_epoch": self.best_epoch})
        write_trace(self.trace, out / "trace.csv")
        (out / "phase_config.json").write_text(json.dumps(self.config, indent=2, sort_keys=True) + "\n")
        return self.checkpoint


def write_trace(trace: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for row in trace:
            w.writerow(["" if row.get(c) is None else (f"{row[c]:.8g}" if isinstance(row[c], float) else row[c])
                        for c in TRACE_COLUMNS])


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def distill_loss(teacher_out: ModelOutput, student_out: ModelOutput, cfg: DistillConfig
                 ) -> Tuple[Tensor, Tensor, Tensor]:
    """Return ``(total, soft, pixel)``.

    ``pixel`` averages the feature-map MSE over the active resizers, so a
    single-resizer and a two-resizer run share a scale. Only the student
    receives gradient.
    """
    t_logits = teacher_out.logits.data if isinstance(teacher_out.logits, Tensor) else teacher_out.logits
    soft = soft_loss(t_logits, student_out.logits, cfg.temperature)
    mode = ResizeMode.parse(cfg.resize_mode)
    if mode is ResizeMode.NONE:
        pixel = Tensor(np.zeros((), dtype=soft.dtype))
    else:
        t_map = teacher_out.feature_map
        t_map = t_map.data if isinstance(t_map, Tensor) else t_map
        pair = resize_teacher_maps(t_map, student_out.feature_map, mode)
        terms = [mse_loss(student_out.feature_map, m) for m in pair.resized_teacher_maps]
        pixel = terms[0]
        for extra in terms[1:]:
            pixel = pixel + extra
        pixel = pixel * (1.0 / len(terms))
    total = soft * cfg.soft_weight + pixel * cfg.pixel_weight
    return total, soft, pixel


# ---------------------------------------------------------------------------
# data feeding
# ---------------------------------------------------------------------------


class ImageSource:
    """In-memory images of one magnification, standardised with train statistics."""

    def __init__(self, images: Dict[str, np.ndarray], mean, std, dtype=np.float32):
        self.images = images
        self.mean = np.asarray(mean, dtype=np.float64)
        self.std = np.asarray(std, dtype=np.float64)
        self.dtype = dtype

    @classmethod
    def from_dataset(cls, ds: DatasetDir, records, mag, dtype=np.float32) -> "ImageSource":
        mean, std = ds.stats(mag)
        return cls({r.id: ds.image(r, mag) for r in records}, mean, std, dtype)

    def batch(self, ids: Sequence[str], aug: Optional[Sequence] = None) -> np.ndarray:
        out = []
        for i, rid in enumerate(ids):
            img = self.images[rid]
            if aug is not None and aug[i] is not None:
                img = apply_augment(img, aug[i])
            out.append(standardize(img, self.mean, self.std))
        return np.stack(out).astype(self.dtype)


def _batches(n: int, size: int):
    for start in range(0, n, size):
        yield slice(start, min(n, start + size))


def predict(model: Model, source: ImageSource, ids: Sequence[str], batch_size: int = 16) -> Tuple[np.ndarray, np.ndarray]:
    """Return (predicted classes, logits) without augmentation."""
    logits = []
    with no_grad():
        for sl in _batches(len(ids), batch_size):
            logits.append(model(source.batch(ids[sl])).logits.data)
    z = np.concatenate(logits) if logits else np.zeros((0, model.config.num_classes))
    return z.argmax(axis=1), z


def _accuracy(model: Model, source: ImageSource, records) -> float:
    ids = [r.id for r in records]
    if not ids:
        return float("nan")
    pred, _ = predict(model, source, ids)
    labels = np.array([r.class_label for r in records])
    return float((pred == labels).mean() * 100.0)


def _ce_loss(model: Model, source: ImageSource, records) -> float:
    ids = [r.id for r in records]
    _, z = predict(model, source, ids)
    return float(cross_entropy_loss(Tensor(z.astype(np.float64)), [r.class_label for r in records]).data)


def _snapshot(model: Model) -> Dict[str, np.ndarray]:
    return {n: p.data.copy() for n, p in model.params.items()}


def _restore(model: Model, snap: Dict[str, np.ndarray]) -> None:
    for n, p in model.params.items():
        p.data = snap[n].copy()
        p.grad = None


def accumulate_step(model: Model, ids: Sequence[str], micro_batch_size: int,
                    loss_fn: Callable[[Sequence[str]], Tuple[Tensor, ...]]) -> List[float]:
    """Backpropagate one logical batch in micro-batches (no optimiser step).

    ``loss_fn`` maps a list of sample ids to a tuple whose first entry is the
    micro-batch mean loss; the remaining entries are logged only. Returns
    the sample-weighted means of every tuple entry.
    """
    n = len(ids)
    sums = None
    for sl in _batches(n, micro_batch_size):
        chunk = ids[sl]
        parts = loss_fn(chunk)
        w = len(chunk) / n
        backward(parts[0] * w)
        vals = np.array([float(p.data) for p in parts]) * w
        sums = vals if sums is None else sums + vals
    return sums.tolist()


# ---------------------------------------------------------------------------
# phase I / baseline: supervised training
# ---------------------------------------------------------------------------


def _geometric(p: AugmentParams) -> AugmentParams:
    return AugmentParams(1.0, 1.0, 1.0, 0.0, p.hflip, p.vflip, p.quarter_turns)


def _check_labelled(records, what: str) -> None:
    if not records:
        raise ValueError(f"{what} split is empty")
    if any(not isinstance(r, ImageRecord) or r.class_label is None for r in records):
        raise ValueError(f"{what} split needs labelled records")


def train_supervised(ds: DatasetDir, train: Sequence[ImageRecord], val: Sequence[ImageRecord],
                     model_cfg: ModelConfig, cfg: TrainConfig, model: Optional[Model] = None,
                     log: Optional[Callable[[str], None]] = None) -> PhaseResult:
    """Cross-entropy training at ``cfg.mag``; keeps the best-validation-accuracy weights."""
    _check_labelled(train, "training")
    t0 = time.perf_counter()
    dtype = DTYPES[cfg.precision]
    if model is None:
        model = build_model(model_cfg, derive_seed(cfg.seed, "init"), dtype)
    train_src = ImageSource.from_dataset(ds, train, cfg.mag, dtype)
    val_src = ImageSource.from_dataset(ds, val, cfg.mag, dtype) if val else None
    labels = {r.id: r.class_label for r in train}
    rng = np.random.default_rng(derive_seed(cfg.seed, "train", mag_key(cfg.mag)))
    params = model.parameters()

    def loss_fn(chunk):
        aug = [sample_augment(cfg.augment_config, rng) for _ in chunk] if cfg.augment else None
        out = model(train_src.batch(chunk, aug))
        return (cross_entropy_loss(out.logits, [labels[i] for i in chunk]),)

    ids_all = [r.id for r in train]
    trace, best, best_key, best_epoch = [], _snapshot(model), None, 0
    for epoch in range(cfg.epochs):
        order = [ids_all[i] for i in rng.permutation(len(ids_all))]
        total, n = 0.0, 0
        for sl in _batches(len(order), cfg.accumulation_size):
            (loss,) = accumulate_step(model, order[sl], cfg.micro_batch_size, loss_fn)
            adam_step(params, cfg.adam)
            total += loss * (sl.stop - sl.start)
            n += sl.stop - sl.start
        acc = _accuracy(model, val_src, val) if val_src else None
        vloss = _ce_loss(model, val_src, val) if val_src else total / n
        trace.append({"epoch": epoch, "soft_loss": None, "pixel_loss": None, "total_loss": total / n,
                      "dev_accuracy": acc})
        key = (acc if acc is not None else 0.0, -vloss)
        if best_key is None or key > best_key:
            best_key, best, best_epoch = key, _snapshot(model), epoch
        if log:
            log(f"epoch {epoch:3d} loss {total / n:.4f} val_acc {acc}")
    _restore(model, best)
    conf = {"phase": "supervised", "train": cfg.to_dict(), "model": model_cfg.to_dict(),
            "train_ids": split_digest(ids_all)}
    return PhaseResult(model, trace, best_epoch, time.perf_counter() - t0, conf, config_fingerprint(conf))


def train_teacher(ds: DatasetDir, model_cfg: ModelConfig, cfg: TrainConfig, **kw) -> PhaseResult:
    return train_supervised(ds, ds.split("train"), ds.split("validation"), model_cfg, cfg, **kw)


def split_digest(ids: Sequence[str]) -> str:
    return hashlib.sha256("\n".join(ids).encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# phase II: distillation on unlabelled records
# ---------------------------------------------------------------------------


def distill_student(teacher: Model, ds: DatasetDir, unlabeled: Sequence[UnlabeledRecord], cfg: DistillConfig,
                    dev: Sequence[ImageRecord] = (), log: Optional[Callable[[str], None]] = None,
                    teacher_cache: Optional[dict] = None) -> PhaseResult:
    """Train a fresh student at ``cfg.student_mag`` to mimic the frozen teacher.

    Only :class:`UnlabeledRecord` views are accepted, so no label can reach
    the loss. The optional ``dev`` records select the best epoch.

    With augmentation on, both views share the same flips and rotation but
    only the student sees colour jitter; the teacher's outputs therefore
    depend on (record, flips, rotation) alone and are memoised. Pass the
    same ``teacher_cache`` dict to several runs with one teacher and
    teacher magnification to share that work.
    """
    if not unlabeled:
        raise ValueError("no records to distill on")
    for r in unlabeled:
        if not isinstance(r, UnlabeledRecord):
            raise TypeError("distill_student takes UnlabeledRecord views; call record.unlabeled()")
        for m in (cfg.teacher_mag, cfg.student_mag):
            if mag_key(m) not in r.pyramid:
                raise KeyError(f"record {r.id!r} lacks magnification {mag_key(m)}")
    t0 = time.perf_counter()
    dtype = DTYPES[cfg.precision]
    if cfg.warm_start:
        student = teacher.astype(dtype)
    else:
        student = build_model(teacher.config, derive_seed(cfg.seed, "student-init"), dtype)
    t_src = ImageSource.from_dataset(ds, unlabeled, cfg.teacher_mag, teacher.dtype)
    s_src = ImageSource.from_dataset(ds, unlabeled, cfg.student_mag, dtype)
    dev_src = ImageSource.from_dataset(ds, dev, cfg.student_mag, dtype) if dev else None
    rng = np.random.default_rng(derive_seed(cfg.seed, "distill", mag_key(cfg.student_mag)))
    params = student.parameters()
    cache = teacher_cache if teacher_cache is not None else {}

    def teacher_outputs(chunk, aug):
        keys = [(rid, None if aug is None else _geometric(aug[j])) for j, rid in enumerate(chunk)]
        for j, key in enumerate(keys):
            if key in cache:
                continue
            # one sample per forward: BLAS results can depend on the batch
            # shape, and cached values must not depend on who shared a batch
            with no_grad():
                out = teacher(t_src.batch([chunk[j]], None if aug is None else [key[1]]))
            cache[key] = (out.feature_map.data[0], out.logits.data[0])
        return (np.stack([cache[key][0] for key in keys]).astype(dtype),
                np.stack([cache[key][1] for key in keys]).astype(np.float64))

    def loss_fn(chunk):
        aug = [sample_augment(cfg.augment_config, rng) for _ in chunk] if cfg.augment else None
        fmap, logits = teacher_outputs(chunk, aug)
        s_out = student(s_src.batch(chunk, aug))
        return distill_loss(ModelOutput(fmap, logits), s_out, cfg)

    ids_all = [r.id for r in unlabeled]
    trace, best, best_key, best_epoch = [], _snapshot(student), None, 0
    for epoch in range(cfg.epochs):
        order = [ids_all[i] for i in rng.permutation(len(ids_all))]
        sums, n = np.zeros(3), 0
        for sl in _batches(len(order), cfg.accumulation_size):
            parts = accumulate_step(student, order[sl], cfg.micro_batch_size, loss_fn)
            adam_step(params, cfg.adam)
            sums += np.array(parts) * (sl.stop - sl.start)
            n += sl.stop - sl.start
        total, soft, pixel = (sums / n).tolist()
        acc = _accuracy(student, dev_src, dev) if dev_src else None
        trace.append({"epoch": epoch, "soft_loss": soft, "pixel_loss": pixel, "total_loss": total,
                      "dev_accuracy": acc})
        key = (acc, -total) if acc is not None else (0.0, -total)
        if best_key is None or key > best_key:
            best_key, best, best_epoch = key, _snapshot(student), epoch
        if log:
            log(f"epoch {epoch:3d} total {total:.4f} soft {soft:.4f} pixel {pixel:.4f} dev_acc {acc}")
    _restore(student, best)
    conf = {"phase": "distill", "distill": cfg.to_dict(), "teacher": teacher.fingerprint()[:16],
            "records": split_digest(ids_all)}
    return PhaseResult(student, trace, best_epoch, time.perf_counter() - t0, conf, config_fingerprint(conf))


# ---------------------------------------------------------------------------
# phase III: head-only fine-tuning
# ---------------------------------------------------------------------------


def fine_tune(student: Model, ds: DatasetDir, train: Sequence[ImageRecord], val: Sequence[ImageRecord],
              cfg: TrainConfig, patience: int = 10, max_epochs: int = 200,
              log: Optional[Callable[[str], None]] = None) -> PhaseResult:
    """Train only the linear head; stop once validation loss stalls for ``patience`` epochs."""
    _check_labelled(train, "training")
    _check_labelled(val, "validation")
    t0 = time.perf_counter()
    model = student.copy()
    freeze_except_fc(model)
    train_src = ImageSource.from_dataset(ds, train, cfg.mag, model.dtype)
    val_src = ImageSource.from_dataset(ds, val, cfg.mag, model.dtype)
    labels = {r.id: r.class_label for r in train}
    rng = np.random.default_rng(derive_seed(cfg.seed, "finetune", mag_key(cfg.mag)))
    params = model.parameters()

    def loss_fn(chunk):
        aug = [sample_augment(cfg.augment_config, rng) for _ in chunk] if cfg.augment else None
        out = model(train_src.batch(chunk, aug))
        return (cross_entropy_loss(out.logits, [labels[i] for i in chunk]),)

    ids_all = [r.id for r in train]
    trace, best, best_loss, best_epoch, stale = [], _snapshot(model), np.inf, 0, 0
    for epoch in range(max_epochs):
        order = [ids_all[i] for i in rng.permutation(len(ids_all))]
        total = 0.0
        for sl in _batches(len(order), cfg.accumulation_size):
            (loss,) = accumulate_step(model, order[sl], cfg.micro_batch_size, loss_fn)
            adam_step(params, cfg.adam)
            total += loss * (sl.stop - sl.start)
        vloss = _ce_loss(model, val_src, val)
        acc = _accuracy(model, val_src, val)
        trace.append({"epoch": epoch, "soft_loss": None, "pixel_loss": None, "total_loss": total / len(order),
                      "dev_accuracy": acc})
        if log:
            log(f"epoch {epoch:3d} loss {total / len(order):.4f} val_loss {vloss:.4f} val_acc {acc}")
        if vloss < best_loss:
            best_loss, best, best_epoch, stale = vloss, _snapshot(model), epoch, 0
        else:
            stale += 1
            if stale >= patience:
                break
    _restore(model, best)
    for p in model.parameters():
        p.requires_grad = True
    conf = {"phase": "finetune", "train": cfg.to_dict(), "patience": patience, "student": student.fingerprint()[:16]}
    return PhaseResult(model, trace, best_epoch, time.perf_counter() - t0, conf, config_fingerprint(conf))


# ---------------------------------------------------------------------------
# resize-function ablation
# ---------------------------------------------------------------------------

ABLATION_COLUMNS = ("mode", "magnification", "seed", "dev_accuracy", "best_epoch", "fingerprint", "config")


def _ablation_cell(job) -> dict:
    teacher_path, root, unlabeled_split, dev_split, cfg_dict = job
    teacher, _ = load_checkpoint(teacher_path)
    ds = DatasetDir(root)
    return _run_cell(teacher, ds, unlabeled_split, dev_split, DistillConfig.from_dict(cfg_dict))


def _run_cell(teacher: Model, ds: DatasetDir, unlabeled_split: str, dev_split: str, cfg: DistillConfig,
              cache: Optional[dict] = None) -> dict:
    unlabeled = [r.unlabeled() for r in ds.split(unlabeled_split)]
    res = distill_student(teacher, ds, unlabeled, cfg, ds.split(dev_split), teacher_cache=cache)
    return {"mode": cfg.resize_mode.value, "magnification": mag_key(cfg.student_mag), "seed": cfg.seed,
            "dev_accuracy": res.trace[res.best_epoch]["dev_accuracy"], "best_epoch": res.best_epoch,
            "fingerprint": res.fingerprint, "config": json.dumps(cfg.to_dict(), sort_keys=True)}


def run_ablation(ds: DatasetDir, teacher: Model, mags: Sequence[float], modes: Sequence = tuple(ResizeMode),
                 seeds: Sequence[int] = (0,), base: DistillConfig = DistillConfig(), unlabeled_split: str = "aux_v1",
                 dev_split: str = "development", jobs: int = 1, teacher_path=None) -> List[dict]:
    """One distillation per (magnification, mode, seed); rows ordered the same way."""
    cells = [replace(base, student_mag=float(m), resize_mode=ResizeMode.parse(mode), seed=int(s))
             for m in mags for mode in modes for s in seeds]
    if jobs > 1:
        if teacher_path is None:
            raise ValueError("parallel ablation needs the teacher checkpoint path")
        from concurrent.futures import ProcessPoolExecutor

        payload = [(str(teacher_path), str(ds.root), unlabeled_split, dev_split, c.to_dict()) for c in cells]
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_ablation_cell, payload))
    caches: Dict[float, dict] = {}
    return [_run_cell(teacher, ds, unlabeled_split, dev_split, c, caches.setdefault(c.teacher_mag, {})) for c in cells]


def write_ablation(rows: Sequence[dict], path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ABLATION_COLUMNS)
        for r in rows:
            w.writerow([r[c] if not isinstance(r[c], float) else f"{r[c]:.2f}" for c in ABLATION_COLUMNS])
    return path
