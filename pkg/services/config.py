# services/config.py
import logging
import os
from pathlib import Path
from typing import Literal

from dotenv import load_dotenv
from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator

from services.errors import ConfigError

# ========= CONFIG .env =========
load_dotenv()


def _env_int(name: str, default: int) -> int:
    raw = (os.getenv(name) or "").strip()
    if not raw:
        return default
    try:
        return int(raw)
    except Exception:
        return default


def _env_float(name: str, default: float) -> float:
    raw = (os.getenv(name) or "").strip()
    if not raw:
        return default
    try:
        return float(raw)
    except Exception:
        return default


def _env_str(name: str, default: str) -> str:
    return (os.getenv(name) or "").strip() or default


DMP_LOG_LEVEL = _env_str("DMP_LOG_LEVEL", "INFO").upper()
DMP_SEED = _env_int("DMP_SEED", 1)
DMP_PERIOD_S = _env_float("DMP_PERIOD_S", 1.0)
DMP_OUT_DIR = _env_str("DMP_OUT_DIR", "out")
DMP_ORACLE_BUDGET = _env_int("DMP_ORACLE_BUDGET", 1_000_000)
DMP_SWEEP_MAX_CPU = _env_int("DMP_SWEEP_MAX_CPU", 65_536)
SIM_TIMEOUT_MS = _env_int("SIM_TIMEOUT_MS", 120_000)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def setup_logging(level: str | None = None):
    """
    Configura el logging raíz una sola vez por proceso.
    """
    logging.basicConfig(level=(level or DMP_LOG_LEVEL).upper(), format=LOG_FORMAT)


# ========= ESCENARIO =========


class AreaSpec(BaseModel):
    x0: float = 0.0
    y0: float = 0.0
    x1: float = 2000.0
    y1: float = 2000.0

    @model_validator(mode="after")
    def _no_degenerada(self):
        if self.x1 <= self.x0 or self.y1 <= self.y0:
            raise ValueError("el área debe tener ancho y alto positivos")
        return self

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x0, self.y0, self.x1, self.y1)


class GridSpec(BaseModel):
    """
    Malla sintética de antenas: una antena en el centro de cada celda.
    """

    rows: int = Field(8, ge=1)
    cols: int = Field(8, ge=1)


class MobilitySpec(BaseModel):
    vehicles: int = Field(300, ge=0)
    duration_s: float = Field(60.0, gt=0)
    mean_speed_kmh: float = Field(15.4, ge=0)
    speed_spread: float = Field(0.2, ge=0, lt=1)
    sample_period_s: float = Field(1.0, gt=0)
    # vehículos/s; 0 -> todos presentes desde t=0
    arrival_rate: float = Field(0.0, ge=0)
    mean_dwell_s: float | None = Field(None, gt=0)
    # segundos de random waypoint antes de t=0; con 0 arrancan uniformes
    warmup_s: float = Field(1800.0, ge=0)


class CatalogEntry(BaseModel):
    name: str
    rt: bool = False
    loads: list[float] = Field(..., min_length=1)
    works: list[float] = Field(..., min_length=1)
    uplink_bps: float = Field(1e6, gt=0)
    downlink_bps: float = Field(1e6, gt=0)
    burst_bits: float = Field(0.0, ge=0)
    target_delay_s: float = Field(..., gt=0)
    cpu_cap: int = Field(..., ge=1)

    model_config = {"populate_by_name": True, "extra": "ignore"}

    @model_validator(mode="after")
    def _mismo_largo(self):
        if len(self.loads) != len(self.works):
            raise ValueError(f"{self.name}: loads y works deben tener el mismo largo")
        if any(v <= 0 for v in self.loads) or any(v <= 0 for v in self.works):
            raise ValueError(f"{self.name}: loads y works deben ser positivos")
        return self


class ScenarioConfig(BaseModel):
    area: AreaSpec = Field(default_factory=AreaSpec)
    antennas_file: str | None = None
    grid: GridSpec | None = Field(default_factory=GridSpec)
    height: int = Field(4, ge=2)
    c_cpu: int = Field(40, ge=1)
    capacity_rule: Literal["level_plus_one", "level", "exponential"] = "level_plus_one"
    multipliers: list[int] | None = None
    cpu_cost_base: float = Field(2.0, gt=0)
    link_delay_s: float = Field(0.002, ge=0)
    link_bandwidth_bps: float = Field(1e9, gt=0)
    sched_const_bits: float = Field(0.0, ge=0)
    bw_cost: float = Field(3.0, ge=0)
    # nivel del padre -> (filas, columnas) del corte
    splits: dict[int, tuple[int, int]] = Field(default_factory=dict)
    catalog_file: str | None = None
    catalog: list[CatalogEntry] | None = None
    rt_ratio: float = Field(0.3, ge=0, le=1)
    mig_cost: float = Field(600.0, ge=0)
    bw_unit_bps: float = Field(1e6, gt=0)
    period_s: float = Field(default_factory=lambda: DMP_PERIOD_S, gt=0)
    augmentation: Literal["auto"] | float = 1.0
    pu_order: Literal["non_increasing", "non_decreasing"] = "non_increasing"
    seed: int = Field(default_factory=lambda: DMP_SEED)
    trace_file: str | None = None
    mobility: MobilitySpec = Field(default_factory=MobilitySpec)
    duration_s: float | None = Field(None, gt=0)
    abort_on_infeasible: bool = False
    shuffle_order: bool = False

    model_config = {"populate_by_name": True, "extra": "ignore"}

    @field_validator("augmentation")
    @classmethod
    def _aumento_valido(cls, v):
        if v != "auto" and float(v) < 1:
            raise ValueError("el aumento de recursos debe ser 'auto' o >= 1")
        return v

    @model_validator(mode="after")
    def _fuente_de_antenas(self):
        if not self.antennas_file and self.grid is None:
            raise ValueError("falta antennas_file o grid")
        if self.multipliers is not None and len(self.multipliers) != self.height + 1:
            raise ValueError("multipliers necesita un valor por nivel (height + 1)")
        return self


def load_scenario(path: str | Path | None, **overrides) -> ScenarioConfig:
    """
    Lee el escenario JSON (o usa los valores por defecto) y aplica
    los overrides no nulos de la línea de comandos.
    """
    data: dict = {}
    if path:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"no existe el archivo de escenario {p}")
        try:
            data = ScenarioConfig.model_validate_json(p.read_text(encoding="utf-8")).model_dump()
        except ValidationError as e:
            raise ConfigError(_resumen_validacion(e))
    data.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return ScenarioConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(_resumen_validacion(e))


def _resumen_validacion(e: ValidationError) -> str:
    partes = []
    for err in e.errors():
        loc = ".".join(str(x) for x in err.get("loc", ()))
        partes.append(f"{loc or 'escenario'}: {err.get('msg')}")
    return "; ".join(partes)
