"""
Conjunto de datos y entrenamiento en dos etapas (Tetris).

Etapa I: cortes axiales 2D+T (z = 1) con la convolución z congelada y omitida.
Etapa II: bloques 4D recortados al azar en tres tamaños, con el modelo completo.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from src.core.config import RunConfig, get_settings
from src.core.errors import DomainError, StorageError
from src.logger.logger_config import LoggerConfig
from src.services.metrics import RoiMask, lung_mask, ssim, ssim_roi
from src.services.phantom4d import GridSpec, Volume3D, Volume4D, make_thorax_phantom, sample_ground_truth_4d
from src.services.recon import reconstruct_4d
from src.services.respiration import phase_amplitudes, synth_breathing
from src.services.rstar4d.checkpoint import load_checkpoint, save_checkpoint
from src.services.rstar4d.network import Network, build_input, build_network, forward_full, l1_loss, normalize_hu
from src.services.rstar4d.optim import AdamState, LogLinearSchedule, adam_step
from src.services.scanner import ScanGeometry, simulate_4d_scan
from src.services.storage import read_csv, read_volume, read_volume4d, write_csv, write_volume, write_volume4d

logger = LoggerConfig.get_logger(__name__)

MANIFEST_FIELDS = ["split", "name", "degraded", "average", "target"]
LOG_FIELDS = ["epoch", "stage", "loss", "val_ssim"]
STRATEGIES = ("tetris", "stage2_only", "stage1_only", "2d")


# --- Conjunto de datos ---
@dataclass
class TrainingPair:
    """Triple (degradado 4D, promedio 3D, objetivo 4D) en HU."""

    name: str
    degraded: Volume4D
    average: Volume3D
    target: Volume4D
    _lung: Optional[list[np.ndarray]] = field(default=None, repr=False)

    def __post_init__(self):
        if self.degraded.grid.shape != self.target.grid.shape or self.degraded.n_phases != self.target.n_phases:
            raise DomainError(f"Par {self.name}: degradado y objetivo con dimensiones distintas")
        if self.average.shape != self.degraded.grid.shape:
            raise DomainError(f"Par {self.name}: promedio con dimensiones distintas")
        self.degraded_hu = self.degraded.as_array()
        self.target_hu = self.target.as_array()

    @property
    def shape(self) -> tuple[int, int, int, int]:
        """(T, Z, Y, X)"""
        return self.degraded_hu.shape

    def lung_masks(self) -> list[np.ndarray]:
        if self._lung is None:
            self._lung = [lung_mask(v).mask for v in self.target.phases]
        return self._lung


@dataclass(frozen=True)
class Sample:
    """Recorte (z, y, x) de un par; el eje t siempre completo."""

    pair: int
    z: tuple[int, int]
    y: tuple[int, int]
    x: tuple[int, int]

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.z[1] - self.z[0], self.y[1] - self.y[0], self.x[1] - self.x[0]

    def arrays(self, pairs: Sequence[TrainingPair], dtype=np.float32) -> tuple[np.ndarray, np.ndarray]:
        p = pairs[self.pair]
        sl = (slice(*self.z), slice(*self.y), slice(*self.x))
        x = build_input(p.degraded_hu[(slice(None),) + sl], p.average.data[sl], dtype=dtype)
        y = normalize_hu(p.target_hu[(slice(None),) + sl])[None].astype(dtype)
        return x, y


def make_pair(
    name: str,
    variant: int,
    signal_seed: int,
    settings: Optional[RunConfig] = None,
    geometry: Optional[ScanGeometry] = None,
    grid: Optional[GridSpec] = None,
) -> TrainingPair:
    """Simula un escaneo del fantoma `variant` y arma (FDK por fase, FDK promedio, verdad terreno)."""
    settings = settings or get_settings()
    geometry = geometry or ScanGeometry.from_settings(settings.geometry)
    grid = grid or GridSpec.from_settings(settings.phantom)
    n = settings.recon.n_phases
    phantom = make_thorax_phantom(variant)
    s = settings.signal
    signal = synth_breathing(
        s.duration_s, s.mean_period_s, s.period_jitter, s.amplitude_jitter, s.sample_rate_hz, seed=signal_seed
    )
    scan = simulate_4d_scan(
        phantom, signal, geometry, n_phases=n, quantize=settings.recon.quantize, noise_sd=settings.recon.noise_sd,
        grid=grid, seed=signal_seed, sorting=settings.recon.sorting, mu_water=settings.recon.mu_water,
    )
    average, degraded = reconstruct_4d(
        scan, scan.phase_map(n), grid, kernel=settings.recon.kernel, halffan=settings.recon.halffan_weighting,
        mu_water=settings.recon.mu_water,
    )
    target = sample_ground_truth_4d(phantom, phase_amplitudes(n), grid, n_phases=n)
    return TrainingPair(name=name, degraded=degraded, average=average, target=target)


def write_manifest(rows: Sequence[dict], path: Path) -> Path:
    """Manifiesto CSV con rutas relativas a su propio directorio."""
    path = Path(path)
    base = path.resolve().parent
    rel = [
        {k: (str(Path(v).resolve().relative_to(base)) if k in ("degraded", "average", "target") else v)
         for k, v in r.items()}
        for r in rows
    ]
    return write_csv(rel, path, MANIFEST_FIELDS)


def read_manifest(path: Path, split: Optional[str] = None) -> list[TrainingPair]:
    path = Path(path)
    rows = read_csv(path)
    if rows and set(MANIFEST_FIELDS) - set(rows[0]):
        raise StorageError(f"Manifiesto sin columnas {sorted(set(MANIFEST_FIELDS) - set(rows[0]))}: {path}")
    base = path.resolve().parent
    pairs = []
    for r in rows:
        if split is not None and r["split"] != split:
            continue
        pairs.append(
            TrainingPair(
                name=r["name"],
                degraded=read_volume4d(base / r["degraded"]),
                average=read_volume(base / r["average"]),
                target=read_volume4d(base / r["target"]),
            )
        )
    logger.info(f"📂 Manifiesto {path.name}: {len(pairs)} pares{'' if split is None else f' ({split})'}")
    return pairs


def build_desk_dataset(out_dir: Path, settings: Optional[RunConfig] = None) -> Path:
    """
    Genera el conjunto de escritorio: variantes de entrenamiento x señales,
    más validación y prueba con una señal cada una. Devuelve la ruta del manifiesto.
    """
    settings = settings or get_settings()
    t = settings.training
    out_dir = Path(out_dir)
    splits = [
        ("train", range(1, 1 + t.train_variants), t.signals_per_variant),
        ("val", range(1 + t.train_variants, 1 + t.train_variants + t.validation_variants), 1),
        ("test", range(1 + t.train_variants + t.validation_variants,
                       1 + t.train_variants + t.validation_variants + t.test_variants), 1),
    ]
    rows = []
    for split, variants, n_signals in splits:
        for v in variants:
            for s in range(n_signals):
                name = f"var{v:02d}_sig{s}"
                logger.info(f"🧪 Generando par {split}/{name}")
                pair = make_pair(name, v, settings.seed * 1000 + v * 10 + s, settings)
                d = out_dir / split / name
                write_volume4d(pair.degraded, d / "degraded")
                write_volume(pair.average, d / "average.rsv")
                write_volume4d(pair.target, d / "target")
                rows.append({"split": split, "name": name, "degraded": d / "degraded",
                             "average": d / "average.rsv", "target": d / "target"})
    return write_manifest(rows, out_dir / "manifest.csv")


# --- Muestras ---
def slice_samples(pairs: Sequence[TrainingPair]) -> list[Sample]:
    """Una muestra 2D+T por corte axial de cada par (muestras por par = extensión z)."""
    samples = []
    for i, p in enumerate(pairs):
        _, z, y, x = p.shape
        samples += [Sample(i, (k, k + 1), (0, y), (0, x)) for k in range(z)]
    return samples


def check_block_shape(net: Network, shape: Sequence[int]) -> None:
    """Bloque (Y, X, Z): y, x múltiplos de 2^(L-1) con al menos 3 vóxeles en el nivel más grueso; z >= 3."""
    y, x, z = shape
    m = net.xy_multiple
    if y % m or x % m or y // m < 3 or x // m < 3 or z < 3:
        raise DomainError(f"Bloque {tuple(shape)} menor que el campo receptivo o no alineado a {m}")


def random_crop(pairs: Sequence[TrainingPair], pair: int, shape: Sequence[int], rng: np.random.Generator) -> Sample:
    """Recorte aleatorio (Y, X, Z) dentro de los límites del par."""
    by, bx, bz = shape
    _, z, y, x = pairs[pair].shape
    if by > y or bx > x or bz > z:
        raise DomainError(f"Bloque {tuple(shape)} mayor que el volumen {(y, x, z)}")
    z0 = int(rng.integers(0, z - bz + 1))
    y0 = int(rng.integers(0, y - by + 1))
    x0 = int(rng.integers(0, x - bx + 1))
    return Sample(pair, (z0, z0 + bz), (y0, y0 + by), (x0, x0 + bx))


# --- Evaluación ---
def validation_ssim(net: Optional[Network], pairs: Sequence[TrainingPair]) -> float:
    """SSIM pulmonar medio (por fase) de la salida de la red, o de la entrada si net es None."""
    scores = []
    for p in pairs:
        out = p.degraded if net is None else forward_full(net, p.degraded, p.average)
        for vol, ref, mask in zip(out.phases, p.target.phases, p.lung_masks()):
            if mask.any():
                scores.append(ssim_roi(vol, ref, RoiMask(mask, "lung")))
            else:
                scores.append(ssim(vol, ref)[0])
    return float(np.mean(scores)) if scores else float("nan")


# --- Entrenamiento ---
class TetrisTrainer:
    """
    Bucle de entrenamiento con tamaño de lote 1, calendario log-lineal global,
    checkpoint y fila de log por época. Reanuda desde `latest.rsc` si existe.
    """

    def __init__(
        self,
        net: Network,
        train: Sequence[TrainingPair],
        val: Sequence[TrainingPair] = (),
        settings: Optional[RunConfig] = None,
        total_epochs: Optional[int] = None,
        checkpoint_dir: Optional[Path] = None,
        log_path: Optional[Path] = None,
    ):
        self.settings = settings or get_settings()
        t = self.settings.training
        self.net = net
        self.train, self.val = list(train), list(val)
        self.state = AdamState.for_params(net.parameters(), t)
        total = t.stage1_epochs + t.stage2_epochs if total_epochs is None else total_epochs
        self.schedule = LogLinearSchedule(t.lr_start, t.lr_end, max(total, 1))
        self.checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir else None
        self.log_path = Path(log_path) if log_path else None
        self.epoch = 0
        self.history: list[dict] = []

    # --- Estado persistente ---
    def resume(self) -> bool:
        if self.checkpoint_dir is None or not (self.checkpoint_dir / "latest.rsc").is_file():
            return False
        net, state, meta = load_checkpoint(self.checkpoint_dir / "latest.rsc")
        if net.config() != self.net.config():
            raise DomainError("El checkpoint no corresponde a la arquitectura configurada")
        for name, p in self.net.parameters().items():
            p[...] = net.parameters()[name]
        self.net.set_mode(net.mode)
        if state is not None:
            self.state = state
        self.epoch = int(meta.get("epoch", 0))
        if self.log_path is not None and self.log_path.is_file():
            self.history = [
                {"epoch": int(r["epoch"]), "stage": r["stage"], "loss": float(r["loss"]), "val_ssim": float(r["val_ssim"])}
                for r in read_csv(self.log_path)
                if int(r["epoch"]) < self.epoch
            ]
        logger.info(f"🔁 Reanudando desde la época {self.epoch}")
        return True

    def _end_epoch(self, stage: str, loss: float) -> None:
        val = validation_ssim(self.net, self.val) if self.val else float("nan")
        self.history.append({"epoch": self.epoch, "stage": stage, "loss": loss, "val_ssim": val})
        self.epoch += 1
        if self.checkpoint_dir is not None:
            meta = {"epoch": self.epoch, "stage": stage}
            save_checkpoint(self.net, self.state, self.checkpoint_dir / f"epoch_{self.epoch:03d}.rsc", meta)
            save_checkpoint(self.net, self.state, self.checkpoint_dir / "latest.rsc", meta)
        if self.log_path is not None:
            write_csv(self.history, self.log_path, LOG_FIELDS)
        logger.info(f"📈 Época {self.epoch - 1} [{stage}] loss={loss:.5f} val_ssim={val:.4f}")

    def _step(self, sample: Sample) -> float:
        x, y = sample.arrays(self.train, dtype=self.net.dtype)
        out, cache = self.net.forward(x)
        loss, grad = l1_loss(out, y)
        grads = self.net.backward(grad, cache)
        adam_step(self.net.parameters(), grads, self.state, self.schedule(self.epoch), self.net.frozen())
        return loss

    def _rng(self) -> np.random.Generator:
        return np.random.default_rng([self.settings.seed, self.epoch])

    # --- Etapas ---
    def run_slices(self, samples: Sequence[Sample], epochs: int, stage: str = "I", mode: str = "stage1") -> list[float]:
        """
        Etapa I (o variante 2D): muestras z = 1, convolución z omitida y congelada.

        Cada época recorre todas las muestras una vez en orden aleatorio con semilla.
        """
        bad = [s for s in samples if s.dims[0] != 1]
        if bad:
            raise DomainError(f"La etapa I requiere muestras con z = 1, recibido z = {bad[0].dims[0]}")
        if not samples:
            raise DomainError("La etapa I requiere al menos una muestra")
        self.net.set_mode(mode)
        losses = []
        for _ in range(epochs):
            start = time.perf_counter()
            order = self._rng().permutation(len(samples))
            loss = float(np.mean([self._step(samples[i]) for i in order]))
            logger.debug(f"⏱️ Época {self.epoch}: {time.perf_counter() - start:.1f} s")
            self._end_epoch(stage, loss)
            losses.append(loss)
        return losses

    def run_blocks(self, shapes: Sequence[Sequence[int]], epochs: int) -> list[float]:
        """Etapa II: bloques 4D aleatorios, mezcla uniforme de tamaños, modelo completo."""
        if not self.train:
            raise DomainError("La etapa II requiere al menos un par de entrenamiento")
        for s in shapes:
            check_block_shape(self.net, s)
        self.net.set_mode("full")
        per_epoch = self.settings.training.blocks_per_epoch
        losses = []
        for _ in range(epochs):
            rng = self._rng()
            epoch_losses = []
            for _ in range(per_epoch):
                shape = shapes[int(rng.integers(len(shapes)))]
                sample = random_crop(self.train, int(rng.integers(len(self.train))), shape, rng)
                epoch_losses.append(self._step(sample))
            loss = float(np.mean(epoch_losses))
            self._end_epoch("II", loss)
            losses.append(loss)
        return losses


def tetris_stage1(trainer: TetrisTrainer, samples: Sequence[Sample], epochs: int) -> Network:
    trainer.run_slices(samples, epochs, stage="I", mode="stage1")
    return trainer.net


def tetris_stage2(trainer: TetrisTrainer, shapes: Sequence[Sequence[int]], epochs: int) -> Network:
    trainer.run_blocks(shapes, epochs)
    return trainer.net


def train(
    train_pairs: Sequence[TrainingPair],
    val_pairs: Sequence[TrainingPair] = (),
    strategy: Optional[str] = None,
    settings: Optional[RunConfig] = None,
    checkpoint_dir: Optional[Path] = None,
    log_path: Optional[Path] = None,
    resume: bool = True,
    net: Optional[Network] = None,
) -> TetrisTrainer:
    """
    Entrena según la estrategia:

    - tetris: etapa I y luego etapa II
    - stage2_only: sólo etapa II con el total de épocas
    - stage1_only: sólo etapa I (modelo 2D+T) con el total de épocas
    - 2d: convoluciones z y t omitidas, cortes axiales, total de épocas

    Las épocas ya completadas en un checkpoint se saltan al reanudar.
    """
    settings = settings or get_settings()
    t = settings.training
    strategy = strategy or t.strategy
    if strategy not in STRATEGIES:
        raise DomainError(f"Estrategia desconocida: {strategy!r}")
    net = net or build_network(settings.network, seed=settings.seed)
    trainer = TetrisTrainer(net, train_pairs, val_pairs, settings, checkpoint_dir=checkpoint_dir, log_path=log_path)
    if resume:
        trainer.resume()

    total = t.stage1_epochs + t.stage2_epochs
    if strategy == "tetris":
        plan = [("I", t.stage1_epochs), ("II", t.stage2_epochs)]
    elif strategy == "stage2_only":
        plan = [("II", total)]
    elif strategy == "stage1_only":
        plan = [("I", total)]
    else:
        plan = [("2d", total)]
    logger.info(f"🚀 Entrenamiento {strategy}: {len(train_pairs)} pares, {total} épocas")

    done = trainer.epoch
    samples = None
    for stage, epochs in plan:
        remaining = min(epochs, max(0, epochs - done))
        done = max(0, done - epochs)
        if remaining == 0:
            continue
        if stage == "II":
            tetris_stage2(trainer, t.block_shapes, remaining)
        else:
            samples = samples or slice_samples(train_pairs)
            if stage == "I":
                tetris_stage1(trainer, samples, remaining)
            else:
                trainer.run_slices(samples, remaining, stage="2d", mode="2d")
    logger.info(f"✅ Entrenamiento terminado en la época {trainer.epoch}")
    return trainer
