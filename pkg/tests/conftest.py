# tests/conftest.py
import numpy as np
import pytest

from services.allocation import FeasibleSet
from services.config import AreaSpec, GridSpec, MobilitySpec, ScenarioConfig
from services.service_model import Allocation, ChainSpec
from services.topology import make_tree, root_path

SIX_DC_PARENTS = {"s0": None, "s1": "s0", "s2": "s0", "s3": "s1", "s4": "s1", "s5": "s2"}


def unit_chain(chain_id: str, poa: str, *, cpu_cap: int = 1, current: str | None = None, rate: float = 1e6) -> ChainSpec:
    """
    Cadena de una VM; en los tests de colocación S_u se arma a mano.
    """
    return ChainSpec(
        id=chain_id,
        loads=(0.5,),
        works=(0.01,),
        rates=(rate, rate),
        burst=0.0,
        target_delay=1.0,
        cpu_cap=cpu_cap,
        poa=poa,
        current=current,
    )


def fixed_fs(chain_id: str, datacenters, sizes=1) -> FeasibleSet:
    datacenters = tuple(datacenters)
    if isinstance(sizes, int):
        sizes = [sizes] * len(datacenters)
    return FeasibleSet(
        chain_id,
        datacenters,
        {s: Allocation(chain_id, s, (n,)) for s, n in zip(datacenters, sizes)},
    )


@pytest.fixture
def six_dc():
    """
    Árbol de seis datacenters con capacidad 1; u1..u3 entran por s5 y
    u4..u6 por s3.
    """
    tree = make_tree(SIX_DC_PARENTS, 1)
    chains = [unit_chain(f"u{i}", "s5") for i in (1, 2, 3)] + [unit_chain(f"u{i}", "s3") for i in (4, 5, 6)]
    fs = {
        "u1": fixed_fs("u1", ["s5"]),
        "u2": fixed_fs("u2", ["s5", "s2"]),
        "u3": fixed_fs("u3", ["s5", "s2", "s0"]),
        "u4": fixed_fs("u4", ["s3", "s1", "s0"]),
        "u5": fixed_fs("u5", ["s3", "s1", "s0"]),
        "u6": fixed_fs("u6", ["s3", "s1", "s0"]),
    }
    return tree, chains, fs


def random_instance(rng: np.random.Generator, max_chains: int = 10, cpu_cap: int = 4, unit: int = 2):
    """
    Árbol de dos niveles (<= 8 datacenters) con capacidades múltiplo de
    `unit` y cadenas con S_u prefijo de su ruta y tamaños en [unit, cpu_cap].
    """
    n_mid = int(rng.integers(1, 4))
    per_mid = 2 if n_mid < 3 else 1
    parents = {"r": None}
    leaves = []
    for m in range(n_mid):
        parents[f"m{m}"] = "r"
        for k in range(per_mid):
            parents[f"l{m}{k}"] = f"m{m}"
            leaves.append(f"l{m}{k}")
    caps = {s: unit * int(rng.integers(2, 6)) for s in parents}
    tree = make_tree(parents, caps, cpu_cost_base=float(rng.choice([1.5, 2.0, 3.0])))

    chains, fs = [], {}
    for i in range(int(rng.integers(1, max_chains + 1))):
        cid = f"c{i:02d}"
        poa = str(rng.choice(leaves))
        members = root_path(tree, poa)[: int(rng.integers(1, 4))]
        sizes = [int(rng.integers(unit, cpu_cap + 1)) for _ in members]
        if i == 0:
            sizes[0] = unit
        current = str(rng.choice(members)) if rng.random() < 0.5 else None
        chains.append(unit_chain(cid, poa, cpu_cap=cpu_cap, current=current))
        fs[cid] = fixed_fs(cid, members, sizes)
    return tree, chains, fs


def small_config(**overrides) -> ScenarioConfig:
    """
    Escenario chico: 16 PoAs en 400x400 m, árbol de altura 3.
    """
    data = dict(
        area=AreaSpec(x0=0, y0=0, x1=400, y1=400),
        grid=GridSpec(rows=4, cols=4),
        height=3,
        c_cpu=40,
        period_s=1.0,
        seed=3,
        mobility=MobilitySpec(vehicles=6, duration_s=5, mean_speed_kmh=60, sample_period_s=1),
    )
    data.update(overrides)
    return ScenarioConfig(**data)
