# services/mobility.py
import logging
import math
from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from services.config import MobilitySpec
from services.errors import TraceError

logger = logging.getLogger(__name__)

TRACE_COLUMNS = ["time_sec", "vehicle_id", "x_m", "y_m"]
DEPARTED = "departed"


@dataclass(frozen=True)
class TraceEvent:
    time: float
    vehicle_id: str
    x: float | None
    y: float | None

    @property
    def departed(self) -> bool:
        return self.x is None


class RandomWaypoint:
    """
    Un vehículo que va de waypoint en waypoint a velocidad constante
    dentro del área, sin pausas.
    """

    def __init__(self, rng: np.random.Generator, area: tuple[float, float, float, float], speed_ms: float):
        self.rng = rng
        self.area = area
        self.speed = speed_ms
        self.pos = self._random_point()
        self.target = self._random_point()

    def _random_point(self) -> np.ndarray:
        x0, y0, x1, y1 = self.area
        return np.array([self.rng.uniform(x0, x1), self.rng.uniform(y0, y1)])

    def advance(self, dt: float) -> np.ndarray:
        remaining = self.speed * dt
        while remaining > 0:
            gap = self.target - self.pos
            dist = float(np.hypot(*gap))
            if dist <= remaining:
                self.pos = self.target
                remaining -= dist
                self.target = self._random_point()
            else:
                self.pos = self.pos + gap / dist * remaining
                remaining = 0.0
        return self.pos


def generate_trace(movilidad: MobilitySpec, area: tuple[float, float, float, float], seed: int) -> list[TraceEvent]:
    """
    Traza sintética reproducible: posiciones de cada vehículo activo en cada
    instante de muestreo y una fila `departed` al irse.
    """
    rng = np.random.default_rng(seed)
    n = movilidad.vehicles
    v_mean = movilidad.mean_speed_kmh / 3.6
    speeds = v_mean * rng.uniform(1 - movilidad.speed_spread, 1 + movilidad.speed_spread, n) if n else np.zeros(0)
    if movilidad.arrival_rate > 0:
        arrivals = np.cumsum(rng.exponential(1 / movilidad.arrival_rate, n))
    else:
        arrivals = np.zeros(n)
    if movilidad.mean_dwell_s is not None:
        departures = arrivals + rng.exponential(movilidad.mean_dwell_s, n)
    else:
        departures = np.full(n, math.inf)

    steps = int(math.floor(movilidad.duration_s / movilidad.sample_period_s + 1e-9))
    times = [round(k * movilidad.sample_period_s, 6) for k in range(steps + 1)]
    walkers = [RandomWaypoint(rng, area, float(v)) for v in speeds]
    # la densidad estacionaria del waypoint se concentra en el centro
    for w in walkers:
        w.advance(movilidad.warmup_s)
    gone = [False] * n
    events: list[TraceEvent] = []
    for k, t in enumerate(times):
        for i, w in enumerate(walkers):
            if gone[i] or t < arrivals[i]:
                continue
            vid = f"v{i}"
            if t >= departures[i]:
                gone[i] = True
                events.append(TraceEvent(t, vid, None, None))
                continue
            pos = w.pos if k == 0 or t - movilidad.sample_period_s < arrivals[i] else w.advance(movilidad.sample_period_s)
            events.append(TraceEvent(t, vid, float(pos[0]), float(pos[1])))
    logger.info("Traza sintética: %d vehículos, %d eventos", n, len(events))
    return events


def write_trace(events: Iterable[TraceEvent], path: str | Path) -> Path:
    rows = [
        (
            f"{e.time:.3f}",
            e.vehicle_id,
            DEPARTED if e.departed else f"{e.x:.3f}",
            DEPARTED if e.departed else f"{e.y:.3f}",
        )
        for e in events
    ]
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(rows, columns=TRACE_COLUMNS).to_csv(p, index=False)
    return p


def read_trace(path: str | Path) -> list[TraceEvent]:
    """
    Lee la traza `time_sec,vehicle_id,x_m,y_m` y la ordena por tiempo.
    """
    try:
        df = pd.read_csv(path, dtype=str, encoding="utf-8")
    except FileNotFoundError:
        raise TraceError(f"no existe la traza {path}")
    faltan = set(TRACE_COLUMNS) - set(df.columns)
    if faltan:
        raise TraceError(f"faltan columnas en {path}: {', '.join(sorted(faltan))}")
    events = []
    for r in df.itertuples(index=False):
        try:
            t = float(r.time_sec)
            if r.x_m == DEPARTED:
                events.append(TraceEvent(t, str(r.vehicle_id), None, None))
            else:
                events.append(TraceEvent(t, str(r.vehicle_id), float(r.x_m), float(r.y_m)))
        except (TypeError, ValueError):
            raise TraceError(f"fila inválida en {path}: {tuple(r)}")
    events.sort(key=lambda e: e.time)
    return events


def mean_speed_kmh(events: Sequence[TraceEvent]) -> float:
    """
    Velocidad media empírica entre muestras consecutivas de cada vehículo.
    """
    last: dict[str, TraceEvent] = {}
    dist = 0.0
    elapsed = 0.0
    for e in events:
        prev = last.get(e.vehicle_id)
        if e.departed:
            last.pop(e.vehicle_id, None)
            continue
        if prev is not None and e.time > prev.time:
            dist += math.hypot(e.x - prev.x, e.y - prev.y)
            elapsed += e.time - prev.time
        last[e.vehicle_id] = e
    return 0.0 if elapsed == 0 else dist / elapsed * 3.6
