import numpy as np
import pytest

from src.core.config import load_settings
from src.services.phantom4d import GridSpec
from src.services.rstar4d.network import Network
from src.services.scanner import ScanGeometry


@pytest.fixture(autouse=True)
def settings(tmp_path, monkeypatch):
    """Configuración por defecto instalada como singleton, con salida en tmp."""
    for var in ("RSTAR4D_CONFIG", "RSTAR4D_CONFIG_FILE", "RSTAR4D_SEED"):
        monkeypatch.delenv(var, raising=False)
    return load_settings(None, output_dir=tmp_path / "out")


@pytest.fixture
def small_grid():
    # Cubre el torso del fantoma (150 x 105 mm de semiejes) con vóxeles gruesos
    return GridSpec(shape=(16, 32, 32), spacing=(8.0, 12.0, 12.0))


@pytest.fixture
def small_geometry():
    return ScanGeometry(
        sad=1000.0,
        sdd=1500.0,
        detector_size=(600.0, 300.0),
        detector_channels=(64, 32),
        detector_offset_u=0.0,
        views_per_turn=40,
        rotation_time=60.0,
    )


@pytest.fixture
def tiny_net():
    net = Network(levels=2, channels=(2, 3), residual=True, dtype=np.float64)
    net.init(0)
    rng = np.random.default_rng(1)
    net.head_w[...] = rng.uniform(-0.5, 0.5, net.head_w.shape)
    net.head_b[...] = 0.1
    return net
