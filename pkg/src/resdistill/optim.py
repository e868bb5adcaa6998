"""Trainable parameters, He initialisation and Adam with gradient accumulation."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Iterable, Union

import numpy as np

from .tensor import Tensor

SeedLike = Union[int, np.random.Generator, None]


class Parameter(Tensor):
    """A leaf tensor that owns Adam state.

    ``grad`` doubles as the accumulation buffer: every :func:`backward` adds
    into it and :func:`adam_step` consumes and clears it.
    """

    __slots__ = ("adam_m", "adam_v", "step_count")

    def __init__(self, data, name: str = "", dtype=None):
        super().__init__(np.array(data, dtype=dtype), requires_grad=True, name=name)
        self.adam_m = np.zeros_like(self.data)
        self.adam_v = np.zeros_like(self.data)
        self.step_count = 0

    @property
    def value(self) -> Tensor:
        return self

    @property
    def accumulated_grad(self) -> np.ndarray:
        return np.zeros_like(self.data) if self.grad is None else self.grad

    def reset_optimizer_state(self) -> None:
        self.adam_m = np.zeros_like(self.data)
        self.adam_v = np.zeros_like(self.data)
        self.step_count = 0


@dataclass(frozen=True)
class AdamConfig:
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        if not 0 < self.beta1 < 1 or not 0 < self.beta2 < 1:
            raise ValueError("Adam betas must lie in (0, 1)")
        if self.learning_rate <= 0 or self.epsilon <= 0:
            raise ValueError("learning_rate and epsilon must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


def zero_grad(params: Iterable[Parameter]) -> None:
    for p in params:
        p.grad = None


def adam_step(params: Iterable[Parameter], cfg: AdamConfig) -> None:
    """Apply one bias-corrected Adam update from the accumulated gradients.

    Parameters that are frozen (``requires_grad`` false) or received no
    gradient since the last step are left untouched, including their step
    counters.
    """
    for p in params:
        if not p.requires_grad or p.grad is None:
            continue
        g = p.grad
        p.step_count += 1
        t = p.step_count
        p.adam_m = cfg.beta1 * p.adam_m + (1.0 - cfg.beta1) * g
        p.adam_v = cfg.beta2 * p.adam_v + (1.0 - cfg.beta2) * (g * g)
        m_hat = p.adam_m / (1.0 - cfg.beta1 ** t)
        v_hat = p.adam_v / (1.0 - cfg.beta2 ** t)
        p.data = (p.data - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.epsilon)).astype(p.data.dtype)
        p.grad = None


def as_generator(seed: SeedLike) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def he_init(shape, fan_in: int, rng_seed: SeedLike = None, dtype=np.float64) -> Tensor:
    """Draw from N(0, 2 / fan_in)."""
    if fan_in <= 0:
        raise ValueError("fan_in must be positive")
    rng = as_generator(rng_seed)
    return Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=tuple(shape)).astype(dtype))
