import argparse

from src.cli.commands import analyze, evaluate, infer, reconstruct, simulate, train, verify

COMMANDS = (simulate, reconstruct, analyze, train, infer, evaluate, verify)


def build_parser() -> argparse.ArgumentParser:
    """Parser con las opciones globales y un subcomando por etapa del laboratorio."""
    parser = argparse.ArgumentParser(
        prog="rstar4d",
        description="Laboratorio 4D-CBCT: simulación, reconstrucción gated FDK, análisis de rayas y red RSTAR4D.",
    )
    parser.add_argument("-c", "--config", required=True, help="Archivo TOML de configuración (schema_version = 1)")
    parser.add_argument("--threads", type=int, default=None, help="Número máximo de hilos de numba")
    parser.add_argument(
        "--log-level", default=None, choices=["DEBUG", "INFO", "WARNING", "ERROR"], help="Nivel de log (sobrescribe el TOML)"
    )
    subparsers = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for module in COMMANDS:
        module.register(subparsers)
    return parser
