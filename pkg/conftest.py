import pytest


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="ejecuta las pruebas a escala de escritorio")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: prueba a escala de escritorio (requiere --runslow)")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="usa --runslow para ejecutarla")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)
