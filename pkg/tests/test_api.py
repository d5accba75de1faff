import asyncio
import threading
import time

import pytest
from fastapi.testclient import TestClient

import main
from conftest import small_config
from main import app
from services.mobility import TraceEvent, write_trace


@pytest.fixture
def client():
    with TestClient(app) as c:
        yield c


def _escenario(**overrides) -> dict:
    return small_config(**overrides).model_dump(mode="json")


def test_root_and_health(client) -> None:
    assert client.get("/health").json() == {"ok": True}
    body = client.get("/").json()
    assert body["ok"] and body["algoritmos"] == ["bupu", "ffit", "cpvnf", "oracle"]


def test_topologia_from_grid_and_antennas(client) -> None:
    body = client.post("/topologia", json={"escenario": _escenario()}).json()
    assert body["topologia"]["root"] == "dc-3"
    assert len(body["topologia"]["datacenters"]) == 1 + 4 + 16 + 16

    antenas = [{"id": "a", "x": 10, "y": 10}, {"poa_id": "b", "x_m": 390, "y_m": 390}]
    body = client.post("/topologia", json={"escenario": _escenario(), "antenas": antenas}).json()
    ids = {d["id"] for d in body["topologia"]["datacenters"]}
    assert {"a", "b"} <= ids


def test_asignacion(client) -> None:
    body = client.post(
        "/asignacion",
        json={"escenario": _escenario(), "cadenas": [{"id": "u", "class": "RT", "poa": "0"}, {"id": "w", "poa": "5"}]},
    ).json()
    rt = body["feasible_sets"]["u"]
    assert rt["datacenters"] == ["0", "dc-1-0.0", "dc-2-0"]
    assert rt["sizes"] == {"0": 17, "dc-1-0.0": 17, "dc-2-0": 19}
    assert rt["allocations"]["dc-2-0"] == [4, 12, 3]
    assert body["feasible_sets"]["w"]["datacenters"][-1] == "dc-3"


def test_asignacion_errors(client) -> None:
    r = client.post("/asignacion", json={"escenario": _escenario(), "cadenas": [{"id": "u", "class": "VIP", "poa": "0"}]})
    assert r.status_code == 422
    assert r.json()["detail"].startswith("CONFIG:")
    r = client.post("/asignacion", json={"escenario": _escenario(), "cadenas": [{"id": "u", "poa": "dc-2-0"}]})
    assert r.status_code == 404
    r = client.post("/asignacion", json={"escenario": _escenario(), "cadenas": []})
    assert r.status_code == 422


def test_simular_envelope(client) -> None:
    body = client.post("/simular", json={"escenario": _escenario(), "algo": "cpvnf"}).json()
    assert body["ok"] and body["status"] == 200 and body["error"] is None
    assert body["data"]["summary"]["algo"] == "cpvnf"
    assert len(body["data"]["decisions"]) == 6
    assert client.post("/simular", json={"escenario": _escenario(), "algo": "magia"}).status_code == 422


def test_simular_reports_errors_in_envelope(client, tmp_path) -> None:
    body = client.post("/simular", json={"escenario": _escenario(trace_file=str(tmp_path / "nada.csv"))}).json()
    assert body["ok"] is False
    assert body["status"] == 400
    assert body["error"].startswith("TRAZA:")


def test_simular_async_polling(client) -> None:
    job = client.post("/simular-async", json={"escenario": _escenario()}).json()
    assert job["ok"] and job["status"] == "queued"
    estado = {}
    for _ in range(200):
        estado = client.get(f"/simular-async/{job['job_id']}").json()
        if estado["status"] == "done":
            break
        time.sleep(0.05)
    assert estado["status"] == "done"
    assert estado["ok"] and estado["data"]["summary"]["decisions"] == 6
    assert "expires_at_ts" not in estado
    assert client.get("/simular-async/no-existe").status_code == 404


def test_barrido_capacidad(client, tmp_path) -> None:
    trace = write_trace([TraceEvent(0.0, f"v{i}", 50.0, 50.0) for i in range(20)], tmp_path / "crowd.csv")
    catalogo = [{"name": "mini", "loads": [1.0], "works": [0.01], "target_delay_s": 1.0, "cpu_cap": 2}]
    body = client.post(
        "/barrido-capacidad",
        json={"escenario": _escenario(trace_file=str(trace)) | {"catalog": catalogo}, "algo": "bupu"},
    ).json()
    assert body["ok"]
    assert body["data"]["c_cpu"] == 4
    assert {"c_cpu": 3, "feasible": False} in body["data"]["attempts"]


def test_exportar_lp(client) -> None:
    body = client.post("/exportar-lp", json={"escenario": _escenario(), "t": 0}).json()
    assert body["ok"]
    assert body["data"]["n_chains"] == 6
    assert "Minimize" in body["data"]["lp"]


def test_timeout_asks_the_worker_to_stop(monkeypatch) -> None:
    monkeypatch.setattr(main, "SIM_TIMEOUT_MS", 50)
    vio_cancelacion = []

    def _lenta(cancel: threading.Event) -> dict:
        vio_cancelacion.append(cancel.wait(5))
        return {}

    res = asyncio.run(main._wrap_simulacion("lenta", _lenta))
    assert res["status"] == 504 and res["ok"] is False
    assert res["cancelled"] is True
    # asyncio.run espera a que el hilo termine
    assert vio_cancelacion == [True]
