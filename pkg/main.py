# main.py
import asyncio
import logging
import tempfile
import threading
from contextlib import asynccontextmanager
from dataclasses import asdict
from datetime import datetime, timezone
from pathlib import Path
from time import perf_counter
from typing import Literal
from uuid import uuid4

from fastapi import FastAPI, HTTPException
from fastapi.middleware.cors import CORSMiddleware
from fastapi.middleware.gzip import GZipMiddleware
from pydantic import BaseModel, Field

from services.allocation import gfa
from services.baselines import lp_export
from services.config import SIM_TIMEOUT_MS, ScenarioConfig, _env_int, setup_logging
from services.errors import CancelledRunError, ConfigError, DmpError
from services.service_model import chain_from_entry
from services.sim_harness import (
    ALGORITHMS,
    catalog_from_config,
    run,
    snapshot_instance,
    sweep_capacity,
    tree_from_config,
)
from services.topology import tree_to_dict

logger = logging.getLogger(__name__)

SIM_JOB_TTL_SEC = _env_int("SIM_JOB_TTL_SEC", 600)

Algoritmo = Literal["bupu", "ffit", "cpvnf", "oracle"]


class AntenaIn(BaseModel):
    poa_id: str = Field(..., alias="id")
    x_m: float = Field(..., alias="x")
    y_m: float = Field(..., alias="y")

    model_config = {
        # acepta tanto poa_id/x_m/y_m como id/x/y
        "populate_by_name": True,
        "extra": "ignore",
    }


class TopologiaRequest(BaseModel):
    escenario: ScenarioConfig = Field(default_factory=ScenarioConfig)
    antenas: list[AntenaIn] | None = None


class CadenaIn(BaseModel):
    id: str
    clase: str = Field("STD", alias="class")
    poa: str

    model_config = {
        "populate_by_name": True,
        "extra": "ignore",
    }


class AsignacionRequest(BaseModel):
    escenario: ScenarioConfig = Field(default_factory=ScenarioConfig)
    antenas: list[AntenaIn] | None = None
    cadenas: list[CadenaIn] = Field(..., min_length=1)


class SimularRequest(BaseModel):
    escenario: ScenarioConfig = Field(default_factory=ScenarioConfig)
    algo: Algoritmo = "bupu"


class ExportarLpRequest(BaseModel):
    escenario: ScenarioConfig = Field(default_factory=ScenarioConfig)
    t: float = Field(0.0, ge=0)


@asynccontextmanager
async def lifespan(app: FastAPI):
    """
    Configura el logging y el registro de simulaciones en segundo plano.
    """
    setup_logging()
    app.state.sim_jobs = {}
    app.state.sim_jobs_lock = asyncio.Lock()
    yield


app = FastAPI(lifespan=lifespan)

app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)
app.add_middleware(GZipMiddleware, minimum_size=1000)


def _utc_iso_now() -> str:
    return datetime.now(timezone.utc).isoformat()


def _antenas(req_antenas: list[AntenaIn] | None):
    if req_antenas is None:
        return None
    return [(a.poa_id, a.x_m, a.y_m) for a in req_antenas]


# ========= EJECUTORES (corren en un hilo) =========


def _simular(escenario: ScenarioConfig, algo: str, cancel: threading.Event | None = None) -> dict:
    res = run(escenario, algo, cancel=cancel)
    return {
        "summary": res.summary(),
        "decisions": [asdict(r) for r in res.records],
        "final_assign": res.assign,
    }


def _barrido(escenario: ScenarioConfig, algo: str, cancel: threading.Event | None = None) -> dict:
    res = sweep_capacity(escenario, algo, cancel=cancel)
    return {
        "algo": res.algo,
        "c_cpu": res.c_cpu,
        "attempts": [{"c_cpu": c, "feasible": ok} for c, ok in res.attempts],
    }


def _exportar_lp(escenario: ScenarioConfig, t: float, cancel: threading.Event | None = None) -> dict:
    snap = snapshot_instance(escenario, t)
    if cancel is not None and cancel.is_set():
        raise CancelledRunError("exportación LP cancelada")
    with tempfile.TemporaryDirectory() as tmp:
        p = lp_export(snap.tree, snap.chains, snap.feasible_sets, snap.params, Path(tmp) / "dmp.lp")
        texto = p.read_text(encoding="utf-8")
    return {"t": t, "n_chains": len(snap.chains), "lp": texto}


async def _wrap_simulacion(nombre: str, fn, *args):
    """
    Ejecuta una simulación en un hilo y captura errores sin lanzar
    excepciones al cliente. Al vencer el timeout activa `cancel` para que
    el hilo corte en su próxima decisión.
    """
    started = perf_counter()
    cancel = threading.Event()
    try:
        data = await asyncio.wait_for(asyncio.to_thread(fn, *args, cancel), timeout=SIM_TIMEOUT_MS / 1000)
        return {
            "ok": True,
            "data": data,
            "error": None,
            "status": 200,
            "duracion_ms": int((perf_counter() - started) * 1000),
        }
    except asyncio.TimeoutError:
        cancel.set()
        logger.warning("Timeout en %s: se pidió cancelar la corrida", nombre)
        return {
            "ok": False,
            "data": None,
            "error": f"Timeout después de {SIM_TIMEOUT_MS} ms",
            "status": 504,
            "duracion_ms": int((perf_counter() - started) * 1000),
            "cancelled": True,
        }
    except HTTPException as e:
        return {
            "ok": False,
            "data": None,
            "error": e.detail,
            "status": e.status_code,
            "duracion_ms": int((perf_counter() - started) * 1000),
        }
    except Exception as e:
        logger.exception("Fallo inesperado en %s", nombre)
        return {
            "ok": False,
            "data": None,
            "error": str(e),
            "status": 500,
            "duracion_ms": int((perf_counter() - started) * 1000),
        }


async def _cleanup_sim_jobs(app: FastAPI):
    jobs = app.state.sim_jobs
    now_ts = datetime.now(timezone.utc).timestamp()
    async with app.state.sim_jobs_lock:
        vencidos = [job_id for job_id, job in jobs.items() if job.get("expires_at_ts") and job["expires_at_ts"] <= now_ts]
        for job_id in vencidos:
            jobs.pop(job_id, None)


async def _run_sim_job(app: FastAPI, job_id: str, escenario: ScenarioConfig, algo: str):
    jobs = app.state.sim_jobs
    lock = app.state.sim_jobs_lock
    async with lock:
        if job_id not in jobs:
            return
        jobs[job_id]["status"] = "running"
        jobs[job_id]["updated_at"] = _utc_iso_now()

    res = await _wrap_simulacion("simular", _simular, escenario, algo)

    finished_at = datetime.now(timezone.utc)
    expires_at = finished_at.timestamp() + SIM_JOB_TTL_SEC
    async with lock:
        job = jobs.get(job_id)
        if not job:
            return
        job.update(res)
        # el hilo puede seguir hasta su próxima decisión; el job queda cancelado
        job["status"] = "cancelled" if res.get("cancelled") else "done"
        job["updated_at"] = finished_at.isoformat()
        job["expires_at"] = datetime.fromtimestamp(expires_at, tz=timezone.utc).isoformat()
        job["expires_at_ts"] = expires_at


# ========= ENDPOINTS =========


@app.get("/")
async def root():
    return {
        "ok": True,
        "message": "API del simulador de despliegue y migración de cadenas de servicio",
        "algoritmos": list(ALGORITHMS),
    }


@app.get("/health")
async def health():
    """
    Healthcheck simple.
    """
    return {"ok": True}


# -------- Topología --------
@app.post("/topologia")
async def topologia(req: TopologiaRequest):
    """
    Construye el árbol de datacenters desde antenas y parámetros por nivel.
    """
    tree = tree_from_config(req.escenario, _antenas(req.antenas))
    return {"ok": True, "topologia": tree_to_dict(tree)}


# -------- GFA --------
@app.post("/asignacion")
async def asignacion(req: AsignacionRequest):
    """
    Conjuntos factibles S_u y asignaciones mínimas de CPU por datacenter.
    """
    tree = tree_from_config(req.escenario, _antenas(req.antenas))
    catalogo = catalog_from_config(req.escenario)
    cadenas = []
    for c in req.cadenas:
        entry = catalogo.get(c.clase)
        if entry is None:
            raise ConfigError(f"clase de servicio desconocida: {c.clase}")
        if c.poa not in tree or not tree.datacenters[c.poa].is_leaf:
            raise DmpError(f"la PoA {c.poa} no es una hoja de la topología", status_code=404)
        cadenas.append(chain_from_entry(entry, c.id, c.poa))
    conjuntos = gfa(tree, cadenas)
    return {
        "ok": True,
        "feasible_sets": {
            u: {
                "datacenters": list(fs.datacenters),
                "allocations": {s: list(a.mu) for s, a in fs.allocations.items()},
                "sizes": {s: a.total for s, a in fs.allocations.items()},
            }
            for u, fs in conjuntos.items()
        },
    }


# -------- Simulación --------
@app.post("/simular")
async def simular(req: SimularRequest):
    """
    Corre el escenario completo con el algoritmo pedido.
    """
    return await _wrap_simulacion("simular", _simular, req.escenario, req.algo)


@app.post("/simular-async")
async def simular_async(req: SimularRequest):
    """
    Encola la simulación y responde de inmediato con job_id para polling.
    """
    await _cleanup_sim_jobs(app)
    job_id = uuid4().hex
    now = _utc_iso_now()
    async with app.state.sim_jobs_lock:
        app.state.sim_jobs[job_id] = {
            "job_id": job_id,
            "status": "queued",
            "algo": req.algo,
            "created_at": now,
            "updated_at": now,
        }
    asyncio.create_task(_run_sim_job(app, job_id, req.escenario, req.algo))
    return {"ok": True, "job_id": job_id, "status": "queued"}


@app.get("/simular-async/{job_id}")
async def simular_async_estado(job_id: str):
    await _cleanup_sim_jobs(app)
    async with app.state.sim_jobs_lock:
        job = app.state.sim_jobs.get(job_id)
        if not job:
            raise HTTPException(status_code=404, detail="job_id no encontrado o expirado")
        return {k: v for k, v in job.items() if k != "expires_at_ts"}


# -------- Barrido de capacidad --------
@app.post("/barrido-capacidad")
async def barrido_capacidad(req: SimularRequest):
    """
    Menor C_cpu con el que el algoritmo es factible en todo el tramo.
    """
    return await _wrap_simulacion("barrido-capacidad", _barrido, req.escenario, req.algo)


# -------- LP --------
@app.post("/exportar-lp")
async def exportar_lp(req: ExportarLpRequest):
    """
    Relajación lineal de la instancia en el instante t, en formato LP.
    """
    return await _wrap_simulacion("exportar-lp", _exportar_lp, req.escenario, req.t)
