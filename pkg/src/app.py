# IMPORTANTE: Configurar logging ANTES de cualquier otra importación
# Así los errores de configuración también quedan registrados
import logging
import sys

logging.basicConfig(
    level=logging.INFO,
    format="%(asctime)s | %(levelname)-8s | %(name)s | %(message)s",
    datefmt="%Y-%m-%d %H:%M:%S",
    stream=sys.stderr,
    force=True,
)

from typing import Optional, Sequence

import numba

from src.cli import build_parser
from src.core.config import load_settings
from src.core.errors import Rstar4DError
from src.logger.logger_config import LoggerConfig

VERSION = "1.0.0"
logger = LoggerConfig.get_logger(__name__)


def main(argv: Optional[Sequence[str]] = None) -> int:
    """
    Punto de entrada: carga la configuración, configura logging e hilos y
    despacha el subcomando. Devuelve el código de salida.
    """
    args = build_parser().parse_args(argv)
    try:
        overrides = {}
        if args.threads is not None:
            overrides["threads"] = args.threads
        if args.log_level is not None:
            overrides["log_level"] = args.log_level
        settings = load_settings(args.config, **overrides)

        log_file = LoggerConfig.configure_for_run(settings)
        if settings.threads:
            numba.set_num_threads(min(settings.threads, numba.config.NUMBA_NUM_THREADS))

        logger.info(f"🚀 rstar4d {VERSION} | comando: {args.command} | semilla: {settings.seed}")
        logger.debug(f"   📂 Salida: {settings.output_dir} (log en {log_file.name})")
        logger.debug(f"   🔧 Hilos: {settings.threads or numba.get_num_threads()}")
        return args.func(args, settings)
    except Rstar4DError as e:
        logger.error(f"❌ {type(e).__name__}: {e}")
        return e.exit_code
    except Exception as e:
        logger.error(f"❌ Error inesperado: {e}", exc_info=True)
        return 1
