# services/errors.py
from fastapi import HTTPException


class DmpError(HTTPException):
    """
    Error base del simulador. Hereda de HTTPException para que la API
    lo devuelva tal cual; la CLI lo traduce a un código de salida.
    """

    status = 400
    prefijo = "DMP"

    def __init__(self, mensaje: str, status_code: int | None = None):
        super().__init__(
            status_code=status_code or self.status,
            detail=f"{self.prefijo}: {mensaje}",
        )
        self.mensaje = mensaje

    def __str__(self) -> str:
        return self.detail


class ConfigError(DmpError):
    status = 422
    prefijo = "CONFIG"


class TopologyError(DmpError):
    prefijo = "TOPOLOGIA"


class LookupDatacenterError(DmpError):
    status = 404
    prefijo = "TOPOLOGIA"


class OffPathError(DmpError):
    prefijo = "RUTA"


class InfiniteDelayError(DmpError):
    prefijo = "RETARDO"


class AllocationError(DmpError):
    prefijo = "ASIGNACION"


class SearchSpaceError(DmpError):
    status = 413
    prefijo = "ORACULO"


class TraceError(DmpError):
    prefijo = "TRAZA"


class CancelledRunError(DmpError):
    """
    La corrida se cortó porque quien la pidió dejó de esperarla.
    """

    status = 504
    prefijo = "CANCELADA"


class InfeasibleError(DmpError):
    """
    Ninguna colocación factible con el aumento de recursos permitido.
    Lleva el testigo de infactibilidad cuando BU lo pudo construir.
    """

    status = 409
    prefijo = "INFACTIBLE"

    def __init__(self, mensaje: str, witness=None):
        super().__init__(mensaje)
        self.witness = witness


def expect_datacenter(tree, dc_id: str):
    """
    Devuelve el datacenter o lanza 404 si el id no existe en el árbol.
    """
    dc = tree.datacenters.get(dc_id)
    if dc is None:
        raise LookupDatacenterError(f"datacenter desconocido: {dc_id}")
    return dc
