"""Optimizador Adam y calendario de tasa de aprendizaje log-lineal."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np

from src.core.config import TrainingSettings, get_settings
from src.core.errors import DomainError


@dataclass
class LogLinearSchedule:
    """lr(e) lineal en escala logarítmica desde lr_start (época 0) hasta lr_end (última época)."""

    lr_start: float = 1e-4
    lr_end: float = 1e-5
    epochs: int = 30

    def __call__(self, epoch: int) -> float:
        if self.epochs <= 1:
            return self.lr_start
        frac = min(max(epoch, 0), self.epochs - 1) / (self.epochs - 1)
        return float(np.exp(np.log(self.lr_start) + frac * (np.log(self.lr_end) - np.log(self.lr_start))))


@dataclass
class AdamState:
    """Momentos por parámetro (mismas dimensiones que el parámetro) y contador de pasos."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: Mapping[str, np.ndarray], settings: Optional[TrainingSettings] = None) -> "AdamState":
        s = settings or get_settings().training
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
            beta1=s.beta1,
            beta2=s.beta2,
            eps=s.eps,
        )


def adam_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    lr: float,
    frozen: frozenset[str] | set[str] = frozenset(),
) -> AdamState:
    """
    Actualización Adam en sitio. Los parámetros congelados no se tocan
    ni acumulan momentos.

    Args:
        params: Parámetros de la red (se modifican en sitio)
        grads: Gradientes con las mismas claves y dimensiones
        state: Estado del optimizador (se modifica en sitio)
        lr: Tasa de aprendizaje del paso
        frozen: Nombres de parámetros excluidos
    """
    state.step += 1
    b1, b2, eps, t = state.beta1, state.beta2, state.eps, state.step
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        if name in frozen:
            continue
        g = grads[name]
        if g.shape != p.shape or state.m[name].shape != p.shape:
            raise DomainError(f"Gradiente de {name} con dimensiones {g.shape}, se esperaba {p.shape}")
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)
    return state
