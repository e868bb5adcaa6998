"""Image and feature-map resampling.

* :func:`lanczos_resize` builds the dataset pyramids (windowed sinc, a=3,
  stretched when downsampling so it also anti-aliases).
* :func:`adaptive_max_pool` and :func:`bicubic_resize` shrink the frozen
  teacher's final feature map to the student's spatial size.

All resamplers are separable, use half-pixel centres and clamp source
indices to the border.
"""
from __future__ import annotations

import enum
import functools
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import kernels
from .tensor import Tensor

LANCZOS_A = 3
CUBIC_A = -0.5


class ResizeMode(str, enum.Enum):
    NONE = "NONE"
    MP = "MP"
    INT = "INT"
    MP_AND_INT = "MP_AND_INT"

    @property
    def functions(self) -> Tuple[str, ...]:
        return {
            ResizeMode.NONE: (),
            ResizeMode.MP: ("MP",),
            ResizeMode.INT: ("INT",),
            ResizeMode.MP_AND_INT: ("MP", "INT"),
        }[self]

    @classmethod
    def parse(cls, value) -> "ResizeMode":
        """Accept member names and the KD / KD+MP / KD+INT / KD+MP+INT spellings."""
        if isinstance(value, cls):
            return value
        key = str(value).strip().upper()
        if key in cls.__members__:
            return cls[key]
        tokens = set(key.replace("_AND_", "+").replace("-", "+").replace("_", "+").split("+")) - {"", "KD"}
        by_tokens = {frozenset(m.functions): m for m in cls}
        try:
            return by_tokens[frozenset(tokens)]
        except KeyError:
            raise ValueError(f"unknown resize mode {value!r}") from None


@dataclass
class MapPair:
    resized_teacher_maps: List[Tensor]
    student_map: Optional[Tensor] = None


def lanczos_kernel(x, a: int = LANCZOS_A):
    x = np.asarray(x, dtype=np.float64)
    return np.where(np.abs(x) < a, np.sinc(x) * np.sinc(x / a), 0.0)


def cubic_kernel(x, a: float = CUBIC_A):
    x = np.abs(np.asarray(x, dtype=np.float64))
    x2, x3 = x * x, x * x * x
    near = (a + 2) * x3 - (a + 3) * x2 + 1
    far = a * x3 - 5 * a * x2 + 8 * a * x - 4 * a
    return np.where(x <= 1, near, np.where(x < 2, far, 0.0))


@functools.lru_cache(maxsize=256)
def _weight_table(in_size: int, out_size: int, kind: str):
    """Gather indices and normalised weights, each shaped (out_size, taps)."""
    if kind == "lanczos":
        kern, support, stretch = lanczos_kernel, float(LANCZOS_A), True
    else:
        kern, support, stretch = cubic_kernel, 2.0, False
    scale = in_size / out_size
    fscale = scale if (stretch and scale > 1.0) else 1.0
    radius = support * fscale
    centres = (np.arange(out_size) + 0.5) * scale - 0.5
    first = np.ceil(centres - radius).astype(np.int64)
    taps = int(np.floor(2 * radius)) + 1
    idx = first[:, None] + np.arange(taps)[None, :]
    w = kern((idx - centres[:, None]) / fscale)
    w = w / w.sum(axis=1, keepdims=True)
    idx = np.clip(idx, 0, in_size - 1)
    idx.setflags(write=False)
    w.setflags(write=False)
    return idx, w


def _resample_last(x: np.ndarray, out_size: int, kind: str) -> np.ndarray:
    idx, w = _weight_table(x.shape[-1], out_size, kind)
    lead = x.shape[:-1]
    flat = np.ascontiguousarray(x.reshape(-1, x.shape[-1]), dtype=np.float64)
    return kernels.resample_rows(flat, idx, w).reshape(*lead, out_size)


def _separable(arr: np.ndarray, out_h: int, out_w: int, kind: str) -> np.ndarray:
    if out_h < 1 or out_w < 1:
        raise ValueError(f"output size must be at least 1x1, got {out_h}x{out_w}")
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim < 2:
        raise ValueError("need at least two spatial axes")
    y = _resample_last(arr, out_w, kind)
    y = _resample_last(np.swapaxes(y, -1, -2), out_h, kind)
    return np.ascontiguousarray(np.swapaxes(y, -1, -2))


def lanczos_resize(image, out_h: int, out_w: int, value_range: Optional[Tuple[float, float]] = (0.0, 1.0)) -> np.ndarray:
    """Resample ``[..., H, W]`` with a Lanczos-3 filter.

    Weights for every output pixel are normalised to sum to one, so constant
    images stay constant. The result is clipped to ``value_range`` (pass
    ``None`` to skip) because the negative lobes can overshoot.
    """
    out = _separable(image, out_h, out_w, "lanczos")
    if value_range is not None:
        np.clip(out, value_range[0], value_range[1], out=out)
    return out


def bicubic_resize(fmap, out_h: int, out_w: int) -> np.ndarray:
    """Catmull-Rom resample of ``[..., H, W]`` (no anti-alias stretching)."""
    data = fmap.data if isinstance(fmap, Tensor) else fmap
    return _separable(data, out_h, out_w, "cubic").astype(np.result_type(data.dtype, np.float32))


def adaptive_max_pool(fmap, out_h: int, out_w: int) -> np.ndarray:
    """Max over a floor-partition of the spatial grid into out_h x out_w cells."""
    data = fmap.data if isinstance(fmap, Tensor) else np.asarray(fmap)
    h, w = data.shape[-2:]
    if out_h < 1 or out_w < 1:
        raise ValueError(f"output size must be at least 1x1, got {out_h}x{out_w}")
    if out_h > h or out_w > w:
        raise ValueError(f"cannot max-pool {h}x{w} up to {out_h}x{out_w}")
    flat = np.ascontiguousarray(data.reshape(-1, h, w))
    return kernels.adaptive_max_pool_2d(flat, out_h, out_w).reshape(*data.shape[:-2], out_h, out_w)


def resize_teacher_maps(teacher_map, student, mode) -> MapPair:
    """Shrink the teacher feature map to the student's shape once per active resizer.

    ``student`` is either the student's feature-map tensor or its shape.
    """
    mode = ResizeMode.parse(mode)
    if mode is ResizeMode.NONE:
        raise ValueError("resize mode NONE has no resizing functions")
    student_map = student if isinstance(student, Tensor) else None
    target: Sequence[int] = tuple(student.shape) if student_map is not None else tuple(student)
    t = teacher_map.data if isinstance(teacher_map, Tensor) else np.asarray(teacher_map)
    if t.ndim != len(target) or t.shape[:-2] != tuple(target[:-2]):
        raise ValueError(f"teacher map {t.shape} and student shape {target} disagree outside the spatial axes")
    oh, ow = target[-2:]
    if t.shape[-2] < oh or t.shape[-1] < ow:
        raise ValueError(f"student map {oh}x{ow} is larger than teacher map {t.shape[-2]}x{t.shape[-1]}")
    maps = []
    for fn in mode.functions:
        if fn == "MP":
            r = adaptive_max_pool(t, oh, ow)
        else:
            r = bicubic_resize(t, oh, ow)
        maps.append(Tensor(r.astype(t.dtype, copy=False)))
    return MapPair(maps, student_map)
