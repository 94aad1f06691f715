"""
Red RSTAR4D: bloques de convolución 4D separable (xy -> z -> t), bloque 4D
isotrópico de referencia y U-Net sobre (t, z, y, x) con salida residual.
"""
from __future__ import annotations

import time
from typing import Optional, Sequence

import numpy as np

from src.core.config import NetworkSettings, get_settings
from src.core.errors import DomainError
from src.logger.logger_config import LoggerConfig
from src.services.phantom4d import Volume3D, Volume4D
from src.services.rstar4d import layers as L

logger = LoggerConfig.get_logger(__name__)

HU_OFFSET = 1000.0
HU_SPAN = 1500.0
IN_CHANNELS = 2


def normalize_hu(hu: np.ndarray) -> np.ndarray:
    """(HU + 1000) / 1500, sin recorte para que la ida y vuelta sea exacta."""
    return (hu + HU_OFFSET) / HU_SPAN


def denormalize_hu(x: np.ndarray) -> np.ndarray:
    return x * HU_SPAN - HU_OFFSET


def conv2d_weight_count(c_in: int, c_out: int) -> int:
    """Pesos de una convolución 3x3 en el plano x-y."""
    return c_out * c_in * 9


class SepConv4DBlock:
    """Convolución 4D factorizada: 2D en x-y (Ci -> Co), 1D en z y 1D circular en t (Co -> Co)."""

    def __init__(self, c_in: int, c_out: int, dtype=np.float32):
        self.c_in, self.c_out, self.dtype = c_in, c_out, np.dtype(dtype)
        self.params = {
            "w_xy": np.zeros((c_out, c_in, 3, 3), dtype=dtype),
            "b_xy": np.zeros(c_out, dtype=dtype),
            "w_z": np.zeros((c_out, c_out, 3), dtype=dtype),
            "b_z": np.zeros(c_out, dtype=dtype),
            "w_t": np.zeros((c_out, c_out, 3), dtype=dtype),
            "b_t": np.zeros(c_out, dtype=dtype),
        }
        self.skip_z = self.frozen_z = False
        self.skip_t = self.frozen_t = False

    @property
    def flags(self) -> dict:
        return {"skip_z": self.skip_z, "frozen_z": self.frozen_z, "skip_t": self.skip_t, "frozen_t": self.frozen_t}

    def set_flags(self, **flags) -> None:
        for k, v in flags.items():
            if k not in self.flags:
                raise DomainError(f"Bandera de bloque desconocida: {k}")
            setattr(self, k, bool(v))

    def init(self, rng: np.random.Generator) -> None:
        """He-uniforme en x-y; uniforme de varianza preservada en z y t; sesgos nulos."""
        p = self.params
        bound = np.sqrt(6.0 / (self.c_in * 9))
        p["w_xy"][...] = rng.uniform(-bound, bound, p["w_xy"].shape)
        bound = np.sqrt(3.0 / (self.c_out * 3))
        p["w_z"][...] = rng.uniform(-bound, bound, p["w_z"].shape)
        p["w_t"][...] = rng.uniform(-bound, bound, p["w_t"].shape)
        for name in ("b_xy", "b_z", "b_t"):
            p[name][...] = 0

    def frozen_names(self) -> set[str]:
        names = set()
        if self.frozen_z:
            names |= {"w_z", "b_z"}
        if self.frozen_t:
            names |= {"w_t", "b_t"}
        return names

    def forward(self, x: np.ndarray):
        L.check_tensor5d(x)
        if x.shape[0] != self.c_in:
            raise DomainError(f"SepConv4DBlock espera {self.c_in} canales, recibió {x.shape[0]}")
        p = self.params
        h1 = L.conv_forward(x, p["w_xy"], (L.AXIS_Y, L.AXIS_X), p["b_xy"])
        h2 = h1 if self.skip_z else L.conv_forward(h1, p["w_z"], (L.AXIS_Z,), p["b_z"])
        y = h2 if self.skip_t else L.conv_forward(h2, p["w_t"], (L.AXIS_T,), p["b_t"])
        return y, (x, h1, h2)

    def backward(self, grad: np.ndarray, cache, need_input_grad: bool = True):
        x, h1, h2 = cache
        p = self.params
        grads = {k: np.zeros_like(v) for k, v in p.items()}
        g = grad
        if not self.skip_t:
            g, gw, gb = L.conv_backward(g, h2, p["w_t"], (L.AXIS_T,))
            if not self.frozen_t:
                grads["w_t"], grads["b_t"] = gw, gb
        if not self.skip_z:
            g, gw, gb = L.conv_backward(g, h1, p["w_z"], (L.AXIS_Z,))
            if not self.frozen_z:
                grads["w_z"], grads["b_z"] = gw, gb
        g, grads["w_xy"], grads["b_xy"] = L.conv_backward(g, x, p["w_xy"], (L.AXIS_Y, L.AXIS_X), need_input_grad)
        return g, grads

    def weight_count(self) -> int:
        return sum(self.params[k].size for k in ("w_xy", "w_z", "w_t"))

    def bias_count(self) -> int:
        return sum(self.params[k].size for k in ("b_xy", "b_z", "b_t"))

    def macs(self, dims: Sequence[int]) -> int:
        """Multiplicaciones-suma para una entrada (T, Z, Y, X)."""
        voxels = int(np.prod(dims))
        per_voxel = self.c_out * self.c_in * 9
        if not self.skip_z:
            per_voxel += self.c_out * self.c_out * 3
        if not self.skip_t:
            per_voxel += self.c_out * self.c_out * 3
        return voxels * per_voxel

    @property
    def z_reach(self) -> int:
        return 0 if self.skip_z else 1


class Iso4DConvBlock:
    """Convolución 4D isotrópica 3x3x3x3; taps en orden (t, z, y, x)."""

    AXES = (L.AXIS_T, L.AXIS_Z, L.AXIS_Y, L.AXIS_X)

    def __init__(self, c_in: int, c_out: int, dtype=np.float32):
        self.c_in, self.c_out, self.dtype = c_in, c_out, np.dtype(dtype)
        self.params = {
            "w": np.zeros((c_out, c_in, 3, 3, 3, 3), dtype=dtype),
            "b": np.zeros(c_out, dtype=dtype),
        }

    flags: dict = {}

    def set_flags(self, **flags) -> None:
        if any(flags.values()):
            raise DomainError("Iso4DConvBlock no admite omitir ejes")

    def init(self, rng: np.random.Generator) -> None:
        bound = np.sqrt(6.0 / (self.c_in * 81))
        self.params["w"][...] = rng.uniform(-bound, bound, self.params["w"].shape)
        self.params["b"][...] = 0

    def frozen_names(self) -> set[str]:
        return set()

    def forward(self, x: np.ndarray):
        L.check_tensor5d(x)
        if x.shape[0] != self.c_in:
            raise DomainError(f"Iso4DConvBlock espera {self.c_in} canales, recibió {x.shape[0]}")
        return L.conv_forward(x, self.params["w"], self.AXES, self.params["b"]), x

    def backward(self, grad: np.ndarray, cache, need_input_grad: bool = True):
        g, gw, gb = L.conv_backward(grad, cache, self.params["w"], self.AXES, need_input_grad)
        return g, {"w": gw, "b": gb}

    def weight_count(self) -> int:
        return self.params["w"].size

    def bias_count(self) -> int:
        return self.params["b"].size

    def macs(self, dims: Sequence[int]) -> int:
        return int(np.prod(dims)) * self.c_out * self.c_in * 81

    z_reach = 1


def to_isotropic(block: SepConv4DBlock) -> Iso4DConvBlock:
    """
    Bloque isotrópico equivalente: K[o,i,t,z,y,x] = sum_ab w_t[o,a,t] w_z[a,b,z] w_xy[b,i,y,x].

    La equivalencia exacta con relleno de ceros exige sesgos x-y y z nulos;
    el sesgo resultante es el temporal.
    """
    p = block.params
    if np.any(p["b_xy"]) or (not block.skip_z and np.any(p["b_z"])):
        raise DomainError("to_isotropic requiere sesgos x-y y z nulos")
    eye = np.zeros((block.c_out, block.c_out, 3), dtype=p["w_z"].dtype)
    eye[:, :, 1] = np.eye(block.c_out)
    w_z = eye if block.skip_z else p["w_z"]
    w_t = eye if block.skip_t else p["w_t"]
    iso = Iso4DConvBlock(block.c_in, block.c_out, dtype=block.dtype)
    iso.params["w"][...] = np.einsum("oat,abz,biyx->oitzyx", w_t, w_z, p["w_xy"])
    iso.params["b"][...] = 0 if block.skip_t else p["b_t"]
    return iso


BLOCK_TYPES = {"separable": SepConv4DBlock, "iso": Iso4DConvBlock}
MODES = {
    "full": {"skip_z": False, "frozen_z": False, "skip_t": False, "frozen_t": False},
    "stage1": {"skip_z": True, "frozen_z": True, "skip_t": False, "frozen_t": False},
    "2d": {"skip_z": True, "frozen_z": True, "skip_t": True, "frozen_t": True},
}


class Network:
    """
    U-Net sobre (t, z, y, x). Cada nivel: dos bloques con ReLU entre ellos.
    x-y se reduce a la mitad por nivel; z sólo cuando es par y >= 4; t nunca.
    """

    def __init__(
        self,
        levels: int,
        channels: Sequence[int],
        residual: bool = True,
        in_channels: int = IN_CHANNELS,
        block_type: str = "separable",
        dtype=np.float32,
    ):
        if levels < 1 or len(channels) != levels or min(channels) < 1:
            raise DomainError(f"Configuración de red inválida: levels={levels}, channels={tuple(channels)}")
        if block_type not in BLOCK_TYPES:
            raise DomainError(f"Tipo de bloque desconocido: {block_type!r}")
        self.levels, self.channels = levels, tuple(int(c) for c in channels)
        self.residual, self.in_channels = residual, in_channels
        self.block_type, self.dtype = block_type, np.dtype(dtype)
        self.mode = "full"
        make = BLOCK_TYPES[block_type]
        self.blocks: dict[str, SepConv4DBlock | Iso4DConvBlock] = {}
        c_prev = in_channels
        for lv, c in enumerate(self.channels):
            self.blocks[f"enc{lv}a"] = make(c_prev, c, dtype)
            self.blocks[f"enc{lv}b"] = make(c, c, dtype)
            c_prev = c
        for lv in range(levels - 2, -1, -1):
            c = self.channels[lv]
            self.blocks[f"dec{lv}a"] = make(self.channels[lv + 1] + c, c, dtype)
            self.blocks[f"dec{lv}b"] = make(c, c, dtype)
        self.head_w = np.zeros((1, self.channels[0]), dtype=dtype)
        self.head_b = np.zeros(1, dtype=dtype)

    # --- Parámetros ---
    def config(self) -> dict:
        return {
            "levels": self.levels,
            "channels": list(self.channels),
            "residual": self.residual,
            "in_channels": self.in_channels,
            "block_type": self.block_type,
        }

    def parameters(self) -> dict[str, np.ndarray]:
        params = {f"{b}.{k}": v for b, blk in self.blocks.items() for k, v in blk.params.items()}
        params["head.w"] = self.head_w
        params["head.b"] = self.head_b
        return params

    def frozen(self) -> set[str]:
        return {f"{b}.{k}" for b, blk in self.blocks.items() for k in blk.frozen_names()}

    def init(self, seed: int) -> None:
        """Inicialización determinista; la cabeza empieza en cero (salida = entrada con residual)."""
        rng = np.random.default_rng(seed)
        for blk in self.blocks.values():
            blk.init(rng)
        self.head_w[...] = 0
        self.head_b[...] = 0

    def set_mode(self, mode: str) -> None:
        if mode not in MODES:
            raise DomainError(f"Modo de red desconocido: {mode!r}")
        if self.block_type == "separable":
            for blk in self.blocks.values():
                blk.set_flags(**MODES[mode])
        elif mode != "full":
            raise DomainError("Sólo la red separable admite los modos stage1 y 2d")
        self.mode = mode

    def weight_count(self) -> int:
        return sum(b.weight_count() for b in self.blocks.values()) + self.head_w.size

    def bias_count(self) -> int:
        return sum(b.bias_count() for b in self.blocks.values()) + self.head_b.size

    # --- Geometría ---
    @property
    def xy_multiple(self) -> int:
        return 2 ** (self.levels - 1)

    def pool_plan(self, z: int) -> list[bool]:
        """Reducción en z por nivel: sólo si la extensión en ese nivel es par y >= 4."""
        plan = []
        for _ in range(self.levels - 1):
            pool = z % 2 == 0 and z >= 4
            plan.append(pool)
            if pool:
                z //= 2
        return plan

    def z_halo(self, plan: Sequence[bool]) -> int:
        """Semiancho conservador del campo receptivo en z (vóxeles de resolución completa)."""
        scales = [1]
        for pool in plan:
            scales.append(scales[-1] * (2 if pool else 1))
        halo = 0
        for lv in range(self.levels):
            reach = self.blocks[f"enc{lv}a"].z_reach + self.blocks[f"enc{lv}b"].z_reach
            if lv < self.levels - 1:
                reach += self.blocks[f"dec{lv}a"].z_reach + self.blocks[f"dec{lv}b"].z_reach
            halo += reach * scales[lv]
        halo += sum(4 * scales[lv + 1] for lv, pool in enumerate(plan) if pool)
        return halo

    def _check_input(self, x: np.ndarray) -> None:
        L.check_tensor5d(x)
        if x.shape[0] != self.in_channels:
            raise DomainError(f"La red espera {self.in_channels} canales, recibió {x.shape[0]}")
        m = self.xy_multiple
        if x.shape[3] % m or x.shape[4] % m:
            raise DomainError(f"y, x deben ser múltiplos de {m}, recibido {x.shape[3:]}")

    # --- Pasos ---
    def forward(self, x: np.ndarray, plan: Optional[Sequence[bool]] = None, keep_cache: bool = True):
        """
        Args:
            x: Entrada (2, T, Z, Y, X) normalizada
            plan: Reducciones en z por nivel (por defecto pool_plan(Z))
            keep_cache: Guardar activaciones para backward

        Returns:
            (salida (1, T, Z, Y, X), caché)
        """
        self._check_input(x)
        plan = list(self.pool_plan(x.shape[2]) if plan is None else plan)
        cache = {"plan": plan, "x": x if keep_cache else None}
        h = x
        skips = []
        for lv in range(self.levels):
            h = self._pair_forward(f"enc{lv}", h, cache, keep_cache)
            if lv < self.levels - 1:
                skips.append(h)
                h = L.avg_pool_forward(h, plan[lv])
        for lv in range(self.levels - 2, -1, -1):
            h = np.concatenate([L.upsample_forward(h, plan[lv]), skips[lv]], axis=0)
            h = self._pair_forward(f"dec{lv}", h, cache, keep_cache)
        if keep_cache:
            cache["last"] = h
        out = L.pointwise_forward(h, self.head_w, self.head_b)
        if self.residual:
            out = out + x[0:1]
        return out, cache

    def _pair_forward(self, prefix: str, h: np.ndarray, cache: dict, keep: bool) -> np.ndarray:
        for s in ("a", "b"):
            name = prefix + s
            pre, c = self.blocks[name].forward(h)
            if keep:
                cache[name] = (c, pre)
            h = L.relu_forward(pre)
        return h

    def _pair_backward(self, prefix: str, g: np.ndarray, cache: dict, grads: dict, first: bool = False) -> np.ndarray:
        for s in ("b", "a"):
            name = prefix + s
            c, pre = cache[name]
            g = L.relu_backward(g, pre)
            need = not (first and s == "a")
            g, bg = self.blocks[name].backward(g, c, need_input_grad=need)
            for k, v in bg.items():
                grads[f"{name}.{k}"] = v
        return g

    def backward(self, grad_out: np.ndarray, cache: dict) -> dict[str, np.ndarray]:
        """Gradientes de todos los parámetros (los congelados quedan en cero)."""
        if "last" not in cache:
            raise DomainError("backward requiere un forward con keep_cache=True")
        plan = cache["plan"]
        grads: dict[str, np.ndarray] = {}
        g, grads["head.w"], grads["head.b"] = L.pointwise_backward(grad_out, cache["last"], self.head_w)
        skip_grads = {}
        for lv in range(self.levels - 1):
            g = self._pair_backward(f"dec{lv}", g, cache, grads)
            c_up = self.channels[lv + 1]
            skip_grads[lv] = g[c_up:]
            g = L.upsample_backward(g[:c_up], plan[lv])
        for lv in range(self.levels - 1, -1, -1):
            if lv < self.levels - 1:
                g = L.avg_pool_backward(g, plan[lv]) + skip_grads[lv]
            g = self._pair_backward(f"enc{lv}", g, cache, grads, first=(lv == 0))
        for name in self.frozen():
            grads[name] = np.zeros_like(grads[name])
        return grads


def build_network(
    settings: Optional[NetworkSettings] = None,
    block_type: str = "separable",
    dtype=np.float32,
    seed: Optional[int] = None,
) -> Network:
    """
    Construye e inicializa la U-Net descrita por la configuración.

    Args:
        settings: Sección network (niveles, canales, residual)
        block_type: "separable" o "iso"
        dtype: Precisión de parámetros y activaciones
        seed: Semilla de inicialización (por defecto la de la configuración)
    """
    settings = settings or get_settings().network
    seed = get_settings().seed if seed is None else seed
    net = Network(settings.levels, settings.channels, settings.residual, block_type=block_type, dtype=dtype)
    net.init(seed)
    logger.debug(f"🧠 Red {block_type}: {settings.levels} niveles, canales {settings.channels}, {net.weight_count()} pesos")
    return net


def count_params_flops(net: Network, dims: Sequence[int]) -> tuple[int, int]:
    """
    Pesos (sin sesgos) y multiplicaciones-suma por corte axial de un forward completo.

    Args:
        net: Red construida
        dims: Dimensiones (T, Z, Y, X) del volumen completo
    """
    t, z, y, x = (int(d) for d in dims)
    plan = net.pool_plan(z)
    level_dims = [(t, z, y, x)]
    for pool in plan:
        tt, zz, yy, xx = level_dims[-1]
        level_dims.append((tt, zz // 2 if pool else zz, yy // 2, xx // 2))
    macs = 0
    for name, blk in net.blocks.items():
        lv = int(name[3:-1])
        macs += blk.macs(level_dims[lv])
    macs += int(np.prod(level_dims[0])) * net.head_w.size
    return net.weight_count(), macs // z


def l1_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Error absoluto medio y subgradiente sign(pred - target) / n con sign(0) = 0."""
    if pred.shape != target.shape:
        raise DomainError(f"l1_loss requiere dimensiones iguales: {pred.shape} vs {target.shape}")
    diff = pred - target
    return float(np.abs(diff).mean()), (np.sign(diff) / diff.size).astype(pred.dtype)


def build_input(degraded: np.ndarray, average: np.ndarray, dtype=np.float32) -> np.ndarray:
    """Tensor (2, T, Z, Y, X): imagen de fase y promedio replicado en t, normalizados."""
    if degraded.shape[1:] != average.shape:
        raise DomainError(f"Promedio {average.shape} incompatible con el volumen 4D {degraded.shape}")
    x = np.empty((2,) + degraded.shape, dtype=dtype)
    x[0] = normalize_hu(degraded)
    x[1] = normalize_hu(average)[None]
    return x


def _pad_xy(x: np.ndarray, multiple: int) -> tuple[np.ndarray, tuple[int, int]]:
    y, xx = x.shape[-2:]
    py, px = (-y) % multiple, (-xx) % multiple
    if py == 0 and px == 0:
        return x, (y, xx)
    pad = [(0, 0)] * (x.ndim - 2) + [(0, py), (0, px)]
    return np.pad(x, pad, mode="edge"), (y, xx)


def _check_volumes(degraded: Volume4D, average: Volume3D) -> None:
    if degraded.grid.shape != average.shape:
        raise DomainError(f"Dimensiones incompatibles: 4D {degraded.grid.shape} vs promedio {average.shape}")


def forward_full(net: Network, degraded: Volume4D, average: Volume3D, plan: Optional[Sequence[bool]] = None) -> Volume4D:
    """Inferencia de un volumen 4D completo en una sola pasada; salida en HU."""
    _check_volumes(degraded, average)
    x = build_input(degraded.as_array(), average.data, dtype=net.dtype)
    x, (y, xx) = _pad_xy(x, net.xy_multiple)
    start = time.perf_counter()
    out, _ = net.forward(x, plan=plan, keep_cache=False)
    elapsed = time.perf_counter() - start
    logger.debug(f"⏱️ Inferencia: {elapsed:.2f} s ({elapsed / x.shape[2]:.3f} s/corte)")
    hu = denormalize_hu(out[0, :, :, :y, :xx]).astype(np.float32)
    ref = degraded.phases[0]
    return Volume4D.from_array(hu, ref.spacing, ref.origin)


def forward_tiled(
    net: Network, degraded: Volume4D, average: Volume3D, tile_z: int, halo: Optional[int] = None
) -> Volume4D:
    """
    Inferencia por bloques en z con solapamiento; cada bloque conserva sólo su interior.

    Los bloques y sus márgenes se alinean al factor de reducción en z del volumen
    completo y usan su mismo plan de pooling, de modo que el resultado coincide con
    forward_full salvo redondeo.
    """
    _check_volumes(degraded, average)
    x = build_input(degraded.as_array(), average.data, dtype=net.dtype)
    x, (y, xx) = _pad_xy(x, net.xy_multiple)
    z = x.shape[2]
    plan = net.pool_plan(z)
    factor = 2 ** sum(plan)
    if tile_z < 1 or tile_z % factor:
        raise DomainError(f"tile_z debe ser múltiplo de {factor}")
    halo = net.z_halo(plan) if halo is None else halo
    halo = -(-halo // factor) * factor
    out = np.empty((x.shape[1], z) + x.shape[3:], dtype=net.dtype)
    for start in range(0, z, tile_z):
        stop = min(start + tile_z, z)
        lo, hi = max(0, start - halo), min(z, stop + halo)
        tile, _ = net.forward(x[:, :, lo:hi], plan=plan, keep_cache=False)
        out[:, start:stop] = tile[0, :, start - lo : stop - lo]
    logger.debug(f"🧩 Inferencia por bloques: tile_z={tile_z}, halo={halo}")
    hu = denormalize_hu(out[:, :, :y, :xx]).astype(np.float32)
    ref = degraded.phases[0]
    return Volume4D.from_array(hu, ref.spacing, ref.origin)
