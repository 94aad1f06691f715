import logging

from src.core.config import load_settings
from src.logger.logger_config import LoggerConfig


def test_run_log_file_receives_app_records(tmp_path):
    settings = load_settings(None, output_dir=tmp_path / "run", log_level="DEBUG")
    log_file = LoggerConfig.configure_for_run(settings)
    assert log_file == tmp_path / "run" / "run.log"
    LoggerConfig.get_logger("src.services.recon").info("📡 prueba de corrida")
    logging.getLogger("numba").info("ruido")
    text = log_file.read_text(encoding="utf-8")
    assert "prueba de corrida" in text
    assert "| INFO     | src.services.recon |" in text
    assert "ruido" not in text


def test_configure_is_idempotent_without_force(tmp_path):
    LoggerConfig.configure("INFO", tmp_path / "a.log", force=True)
    LoggerConfig.configure("DEBUG", tmp_path / "b.log")
    assert not (tmp_path / "b.log").exists()
    assert logging.getLogger().level == logging.INFO
