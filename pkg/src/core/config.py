from __future__ import annotations

import os
from contextvars import ContextVar
from pathlib import Path
from typing import Annotated, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator
from pydantic import StringConstraints as SC
from pydantic_settings import (
    BaseSettings,
    PydanticBaseSettingsSource,
    SettingsConfigDict,
    TomlConfigSettingsSource,
)

from src.core.errors import ConfigError

# Archivo TOML activo durante la construcción de RunConfig
_config_file: ContextVar[Optional[Path]] = ContextVar("_config_file", default=None)


def _config_path_from_env(var: str = "RSTAR4D_CONFIG") -> Optional[Path]:
    """
    Devuelve la ruta del TOML indicada por VAR o por el contenido de VAR_FILE.
    Levanta ConfigError si la ruta no existe.
    """
    raw = os.getenv(var)
    if not raw:
        file_path = os.getenv(f"{var}_FILE")
        if file_path:
            p = Path(file_path)
            if not p.is_file():
                raise ConfigError(f"{var}_FILE apunta a un archivo inexistente: {file_path}")
            raw = p.read_text(encoding="utf-8").strip()
    if not raw:
        return None
    path = Path(raw)
    if not path.is_file():
        raise ConfigError(f"{var} apunta a un archivo inexistente: {raw}")
    return path


# Validaciones declarativas (Pydantic v2)
LogLevelStr = Annotated[str, SC(pattern=r"^(DEBUG|INFO|WARNING|ERROR|CRITICAL)$")]
KernelStr = Annotated[str, SC(pattern=r"^(ram-lak|shepp-logan)$")]
SortingStr = Annotated[str, SC(pattern=r"^(phase|amplitude)$")]
FlowModeStr = Annotated[str, SC(pattern=r"^(2d|3d)$")]
StrategyStr = Annotated[str, SC(pattern=r"^(tetris|stage2_only|stage1_only|2d)$")]

Vec3 = tuple[float, float, float]


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class EllipsoidSettings(_Section):
    # Vectores físicos en orden (x, y, z) mm
    name: str
    center_mm: Vec3
    semi_axes_mm: Vec3
    value_hu: float = Field(..., ge=-1000.0, le=1500.0)
    rotation_rad: Vec3 = (0.0, 0.0, 0.0)
    motion_amplitude_mm: Vec3 = (0.0, 0.0, 0.0)
    axis_scaling: Vec3 = (0.0, 0.0, 0.0)


class PhantomSettings(_Section):
    name: str = "thorax-v1"
    variant: int = Field(0, ge=0)
    grid_shape: tuple[int, int, int] = (64, 128, 128)  # (z, y, x)
    spacing_mm: Vec3 = (2.5, 2.5, 2.5)  # (z, y, x)
    ellipsoids: Optional[list[EllipsoidSettings]] = None


class SignalSettings(_Section):
    duration_s: float = Field(60.0, gt=0)
    mean_period_s: float = Field(4.0, gt=0)
    period_jitter: float = Field(0.0, ge=0)
    amplitude_jitter: float = Field(0.0, ge=0)
    sample_rate_hz: float = Field(25.0, gt=0)
    csv_path: Optional[Path] = None


class GeometrySettings(_Section):
    sad_mm: float = Field(1000.0, gt=0)
    sdd_mm: float = Field(1500.0, gt=0)
    detector_size_mm: tuple[float, float] = (397.0, 298.0)  # (u, v)
    detector_channels: tuple[int, int] = (256, 192)  # (u, v)
    # None -> 0.25 * ancho del detector (half-fan)
    detector_offset_u_mm: Optional[float] = None
    views_per_turn: int = Field(240, ge=2)
    rotation_time_s: float = Field(60.0, gt=0)
    start_angle_rad: float = 0.0
    direction: Literal[1, -1] = 1


class ReconSettings(_Section):
    kernel: KernelStr = "ram-lak"
    mu_water: float = Field(0.02, gt=0)
    n_phases: int = Field(10, ge=1)
    sorting: SortingStr = "phase"
    halffan_weighting: bool = True
    quantize: bool = True
    noise_sd: float = Field(0.0, ge=0)


class RsaSettings(_Section):
    wedge_bins: int = Field(36, ge=2)
    flow_levels: int = Field(3, ge=1)
    flow_window: int = Field(7, ge=3)
    flow_iterations: int = Field(3, ge=1)
    flow_mode: FlowModeStr = "2d"
    cond_limit: float = Field(1e6, gt=1)
    flow_regularization: float = Field(1e-3, ge=0)
    seed_stride: int = Field(8, ge=1)
    shroud_max_shift: int = Field(16, ge=1)
    analysis_slice: Optional[int] = None

    @model_validator(mode="after")
    def _odd_window(self) -> "RsaSettings":
        if self.flow_window % 2 == 0:
            raise ValueError("rsa.flow_window debe ser impar")
        return self


class NetworkSettings(_Section):
    levels: int = Field(3, ge=1)
    channels: tuple[int, ...] = (16, 32, 64)
    residual: bool = True

    @model_validator(mode="after")
    def _channels_per_level(self) -> "NetworkSettings":
        if len(self.channels) != self.levels:
            raise ValueError("network.channels debe tener un valor por nivel")
        return self


class TrainingSettings(_Section):
    strategy: StrategyStr = "tetris"
    stage1_epochs: int = Field(15, ge=0)
    stage2_epochs: int = Field(15, ge=0)
    lr_start: float = Field(1e-4, gt=0)
    lr_end: float = Field(1e-5, gt=0)
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    eps: float = Field(1e-8, gt=0)
    # (alto, ancho, cortes); el eje temporal se toma completo
    block_shapes: tuple[tuple[int, int, int], ...] = ((64, 64, 8), (48, 48, 16), (32, 32, 32))
    blocks_per_epoch: int = Field(48, ge=1)
    train_variants: int = Field(8, ge=1)
    signals_per_variant: int = Field(2, ge=1)
    validation_variants: int = Field(2, ge=1)
    test_variants: int = Field(2, ge=0)
    checkpoint_dir: Path = Path("checkpoints")
    manifest: Optional[Path] = None


class EvaluationSettings(_Section):
    ssim_window: int = Field(7, ge=3)
    ssim_dynamic_range: float = Field(1500.0, gt=0)
    lung_threshold_hu: float = -400.0
    body_threshold_hu: float = -300.0
    closing_radius: int = Field(2, ge=0)


class RunConfig(BaseSettings):
    # --- Esquema ---
    schema_version: Literal[1]
    output_dir: Path

    # --- Ejecución ---
    seed: int = 0
    threads: Optional[int] = Field(None, ge=1)
    log_level: LogLevelStr = "INFO"

    # --- Secciones ---
    phantom: PhantomSettings = PhantomSettings()
    signal: SignalSettings = SignalSettings()
    geometry: GeometrySettings = GeometrySettings()
    recon: ReconSettings = ReconSettings()
    rsa: RsaSettings = RsaSettings()
    network: NetworkSettings = NetworkSettings()
    training: TrainingSettings = TrainingSettings()
    evaluation: EvaluationSettings = EvaluationSettings()

    # --- Config de pydantic-settings ---
    model_config = SettingsConfigDict(
        env_prefix="RSTAR4D_",
        env_nested_delimiter="__",
        extra="forbid",
        validate_default=True,
    )

    @classmethod
    def settings_customise_sources(
        cls,
        settings_cls: type[BaseSettings],
        init_settings: PydanticBaseSettingsSource,
        env_settings: PydanticBaseSettingsSource,
        dotenv_settings: PydanticBaseSettingsSource,
        file_secret_settings: PydanticBaseSettingsSource,
    ) -> tuple[PydanticBaseSettingsSource, ...]:
        # kwargs > variables de entorno > archivo TOML
        return (init_settings, env_settings, TomlConfigSettingsSource(settings_cls, toml_file=_config_file.get()))

    @classmethod
    def load(cls, path: Optional[Path] = None, **overrides) -> "RunConfig":
        """
        Construye RunConfig desde un TOML (o sólo defaults si path es None).

        Args:
            path: Ruta del archivo TOML
            **overrides: Valores explícitos con prioridad sobre archivo y entorno

        Returns:
            RunConfig validado con rutas resueltas respecto del archivo
        """
        if path is None:
            overrides.setdefault("schema_version", 1)
            overrides.setdefault("output_dir", Path("runs"))
        else:
            path = Path(path)
            if not path.is_file():
                raise ConfigError(f"Archivo de configuración inexistente: {path}")

        token = _config_file.set(path)
        try:
            cfg = cls(**overrides)
        except ValidationError as e:
            raise ConfigError(f"Configuración inválida: {e}") from e
        finally:
            _config_file.reset(token)

        base = path.resolve().parent if path is not None else Path.cwd()
        return cfg._resolve_paths(base)

    def _resolve_paths(self, base: Path) -> "RunConfig":
        def _abs(p: Optional[Path]) -> Optional[Path]:
            if p is None or p.is_absolute():
                return p
            return (base / p).resolve()

        signal = self.signal.model_copy(update={"csv_path": _abs(self.signal.csv_path)})
        training = self.training.model_copy(
            update={
                "checkpoint_dir": _abs(self.training.checkpoint_dir),
                "manifest": _abs(self.training.manifest),
            }
        )
        return self.model_copy(update={"output_dir": _abs(self.output_dir), "signal": signal, "training": training})


# --- Singleton sencillo para evitar releer en cada import ---
_settings: Optional[RunConfig] = None


def get_settings() -> RunConfig:
    global _settings
    if _settings is None:
        _settings = RunConfig.load(_config_path_from_env())
    return _settings


def load_settings(path: Optional[Path] = None, **overrides) -> RunConfig:
    """Carga una configuración y la instala como singleton del proceso."""
    global _settings
    _settings = RunConfig.load(path, **overrides)
    return _settings
