import logging
import sys
from pathlib import Path

from src.core.config import RunConfig, get_settings

LOG_FORMAT = "%(asctime)s | %(levelname)-8s | %(name)s | %(message)s"
LOG_DATEFMT = "%Y-%m-%d %H:%M:%S"
RUN_LOG_FILE = "run.log"

# Librerías que sólo deben aparecer en WARNING o superior
QUIET_LOGGERS = ("numba", "numba.core", "PIL", "py.warnings")
APP_LOGGERS = ("src", "src.services", "src.services.rstar4d", "src.cli", "src.core")


class LoggerConfig:
    _configured = False   # evita configuraciones duplicadas

    @staticmethod
    def _handler(handler: logging.Handler, level: int) -> logging.Handler:
        handler.setFormatter(logging.Formatter(fmt=LOG_FORMAT, datefmt=LOG_DATEFMT))
        handler.setLevel(level)
        return handler

    @classmethod
    def configure(cls, level: str | None = None, log_file: str | Path | None = None, force: bool = False):
        """
        Configura el logging global: consola (stderr) y, opcionalmente, el log de la corrida.

        Args:
            level: Nivel ("DEBUG", "INFO", ...); None toma el de la configuración
            log_file: Archivo de log o None
            force: Reconfigurar aunque ya esté configurado (nuevo directorio de salida)
        """
        if cls._configured and not force:
            return

        level_name = (level or get_settings().log_level).upper()
        log_level = getattr(logging, level_name, logging.INFO)

        root_logger = logging.getLogger()
        for handler in list(root_logger.handlers):
            root_logger.removeHandler(handler)
            handler.close()
        root_logger.setLevel(log_level)

        # stderr deja stdout libre para la ayuda y los resultados de la CLI
        root_logger.addHandler(cls._handler(logging.StreamHandler(sys.stderr), log_level))
        if log_file:
            Path(log_file).parent.mkdir(parents=True, exist_ok=True)
            root_logger.addHandler(cls._handler(logging.FileHandler(log_file, encoding="utf-8"), log_level))

        # Avisos de numpy/numba (p. ej. NumbaPerformanceWarning) pasan por logging
        logging.captureWarnings(True)
        for name in QUIET_LOGGERS:
            logging.getLogger(name).setLevel(logging.WARNING)
        for name in APP_LOGGERS:
            app_logger = logging.getLogger(name)
            app_logger.setLevel(log_level)
            app_logger.propagate = True

        cls._configured = True
        root_logger.debug(f"✅ Logger configurado - Nivel: {level_name}")

    @classmethod
    def configure_for_run(cls, settings: RunConfig) -> Path:
        """Logging de una corrida: nivel de la configuración y `<output_dir>/run.log`."""
        log_file = Path(settings.output_dir) / RUN_LOG_FILE
        cls.configure(settings.log_level, log_file, force=True)
        return log_file

    @staticmethod
    def get_logger(name: str):
        """Devuelve un logger por nombre (modular)."""
        return logging.getLogger(name)
