"""
Capas de la red sobre tensores (C, T, Z, Y, X) con pasos hacia adelante y atrás explícitos.

Las convoluciones se escriben como suma de desplazamientos por tap más una
contracción de canales (np.tensordot). Relleno: ceros en z, y, x y circular en t.
Un tap k aplica el desplazamiento k - 1; el adjunto de un desplazamiento es el
desplazamiento opuesto.
"""
from __future__ import annotations

import itertools
from typing import Iterable, Optional, Sequence

import numpy as np

from src.core.errors import DomainError

AXIS_T, AXIS_Z, AXIS_Y, AXIS_X = 1, 2, 3, 4
CIRCULAR_AXES = frozenset({AXIS_T})


def check_tensor5d(x: np.ndarray, name: str = "x") -> np.ndarray:
    if x.ndim != 5 or min(x.shape) < 1:
        raise DomainError(f"{name} debe ser un tensor (C, T, Z, Y, X) no vacío, recibido {x.shape}")
    return x


def shift(x: np.ndarray, axis: int, offset: int) -> np.ndarray:
    """y[..., i, ...] = x[..., i + offset, ...]; circular en t, ceros en el resto."""
    if offset == 0:
        return x
    if axis in CIRCULAR_AXES:
        return np.roll(x, -offset, axis=axis)
    n = x.shape[axis]
    out = np.zeros_like(x)
    if abs(offset) >= n:
        return out
    src = [slice(None)] * x.ndim
    dst = [slice(None)] * x.ndim
    if offset > 0:
        src[axis], dst[axis] = slice(offset, n), slice(0, n - offset)
    else:
        src[axis], dst[axis] = slice(0, n + offset), slice(-offset, n)
    out[tuple(dst)] = x[tuple(src)]
    return out


def _shift_all(x: np.ndarray, axes: Sequence[int], offsets: Iterable[int]) -> np.ndarray:
    for axis, off in zip(axes, offsets):
        x = shift(x, axis, off)
    return x


def conv_forward(x: np.ndarray, w: np.ndarray, axes: Sequence[int], bias: Optional[np.ndarray] = None) -> np.ndarray:
    """
    Convolución de 3 taps por eje listado en `axes` con mezcla de canales.

    Args:
        x: Tensor (Ci, T, Z, Y, X)
        w: Pesos (Co, Ci, 3, ..., 3), un eje de taps por eje convolucionado
        axes: Ejes del tensor cubiertos por los taps
        bias: Sesgo (Co,) opcional
    """
    if w.shape[1] != x.shape[0]:
        raise DomainError(f"Canales incompatibles: pesos {w.shape[1]} vs entrada {x.shape[0]}")
    out = np.zeros((w.shape[0],) + x.shape[1:], dtype=np.result_type(x, w))
    for taps in itertools.product(range(3), repeat=len(axes)):
        xs = _shift_all(x, axes, (k - 1 for k in taps))
        out += np.tensordot(w[(slice(None), slice(None)) + taps], xs, axes=([1], [0]))
    if bias is not None:
        out += bias.reshape((-1,) + (1,) * (x.ndim - 1))
    return out


def conv_backward(
    grad: np.ndarray, x: np.ndarray, w: np.ndarray, axes: Sequence[int], need_input_grad: bool = True
) -> tuple[Optional[np.ndarray], np.ndarray, np.ndarray]:
    """Gradientes (entrada, pesos, sesgo) de conv_forward."""
    if grad.shape != (w.shape[0],) + x.shape[1:]:
        raise DomainError(f"Gradiente {grad.shape} incompatible con la salida esperada")
    spatial = list(range(1, x.ndim))
    grad_w = np.zeros_like(w)
    grad_x = np.zeros_like(x) if need_input_grad else None
    for taps in itertools.product(range(3), repeat=len(axes)):
        idx = (slice(None), slice(None)) + taps
        xs = _shift_all(x, axes, (k - 1 for k in taps))
        grad_w[idx] = np.tensordot(grad, xs, axes=(spatial, spatial))
        if need_input_grad:
            back = np.tensordot(w[idx].T, grad, axes=([1], [0]))
            grad_x += _shift_all(back, axes, (1 - k for k in taps))
    grad_b = grad.sum(axis=tuple(spatial))
    return grad_x, grad_w, grad_b


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(grad: np.ndarray, x: np.ndarray) -> np.ndarray:
    return grad * (x > 0)


def pointwise_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Convolución 1x1: w (Co, Ci)."""
    out = np.tensordot(w, x, axes=([1], [0]))
    return out + b.reshape((-1,) + (1,) * (x.ndim - 1))


def pointwise_backward(grad: np.ndarray, x: np.ndarray, w: np.ndarray):
    spatial = list(range(1, x.ndim))
    return (
        np.tensordot(w.T, grad, axes=([1], [0])),
        np.tensordot(grad, x, axes=(spatial, spatial)),
        grad.sum(axis=tuple(spatial)),
    )


def _pool_shape(x: np.ndarray, pool_z: bool) -> tuple[int, ...]:
    c, t, z, y, xx = x.shape
    if y % 2 or xx % 2 or (pool_z and z % 2):
        raise DomainError(f"Dimensiones no divisibles por 2 para pooling: {x.shape}")
    zs = (z // 2, 2) if pool_z else (z, 1)
    return (c, t) + zs + (y // 2, 2, xx // 2, 2)


def avg_pool_forward(x: np.ndarray, pool_z: bool) -> np.ndarray:
    """Promedio 2x2 en (y, x) y, si pool_z, también 2 en z."""
    return x.reshape(_pool_shape(x, pool_z)).mean(axis=(3, 5, 7))


def avg_pool_backward(grad: np.ndarray, pool_z: bool) -> np.ndarray:
    factor = 8.0 if pool_z else 4.0
    return upsample_forward(grad, pool_z) / factor


def upsample_forward(x: np.ndarray, pool_z: bool) -> np.ndarray:
    """Vecino más cercano x2 en (y, x) y opcionalmente en z."""
    out = np.repeat(np.repeat(x, 2, axis=AXIS_Y), 2, axis=AXIS_X)
    if pool_z:
        out = np.repeat(out, 2, axis=AXIS_Z)
    return out


def upsample_backward(grad: np.ndarray, pool_z: bool) -> np.ndarray:
    return grad.reshape(_pool_shape(grad, pool_z)).sum(axis=(3, 5, 7))
