"""Jerarquía de errores del laboratorio; cada clase lleva su código de salida."""


class Rstar4DError(Exception):
    """Error base de la aplicación."""

    exit_code = 1


class ConfigError(Rstar4DError):
    """Configuración inválida o incompleta."""

    exit_code = 2


class StorageError(Rstar4DError):
    """Fallo de lectura/escritura de archivos."""

    exit_code = 3


class DomainError(Rstar4DError, ValueError):
    """Entrada fuera del dominio de una operación."""

    exit_code = 4


class DegenerateSignalError(DomainError):
    """Señal o imagen sin contenido útil (sin movimiento, diferencia nula...)."""


class IntegrityError(Rstar4DError):
    """Archivo truncado, con magic o tamaño inesperado, CRC32 inválido (RSC1) o suma SHA-256 distinta."""

    exit_code = 5
