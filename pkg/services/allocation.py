# services/allocation.py
import logging
import math
from collections.abc import Iterable, Iterator, Mapping
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from services.errors import AllocationError, InfiniteDelayError, OffPathError
from services.service_model import Allocation, ChainSpec, chain_comp_delay, net_delay, vm_delay
from services.topology import NetworkTree, root_path

logger = logging.getLogger(__name__)

DELAY_TOL = 1e-12


@dataclass(frozen=True)
class FeasibleSet:
    """
    S_u: prefijo de la ruta PoA -> raíz donde la cadena cumple Δ,
    con la asignación mínima de cada miembro.
    """

    chain_id: str
    datacenters: tuple[str, ...]
    allocations: Mapping[str, Allocation] = field(default_factory=dict)

    def __contains__(self, s: str) -> bool:
        return s in self.allocations

    def __len__(self) -> int:
        return len(self.datacenters)

    @property
    def top(self) -> str | None:
        return self.datacenters[-1] if self.datacenters else None

    def allocation(self, s: str) -> Allocation:
        try:
            return self.allocations[s]
        except KeyError:
            raise OffPathError(f"{s} no es factible para la cadena {self.chain_id}")

    def size(self, s: str) -> int:
        return self.allocation(s).total

    def above(self, s: str) -> tuple[str, ...]:
        """
        Miembros de S_u estrictamente por encima de s, de abajo hacia arriba.
        """
        return self.datacenters[self.datacenters.index(s) + 1 :]


def delay_reduction(chain: ChainSpec, k: int, mu: int) -> float:
    """
    δ_k(μ) = D_k(μ) − D_k(μ+1).
    """
    load, work = chain.loads[k], chain.works[k]
    if mu <= math.floor(load):
        raise InfiniteDelayError(f"cadena {chain.id}: μ={mu} bajo el umbral de la VM {k}")
    return vm_delay(load, work, mu) - vm_delay(load, work, mu + 1)


def iter_gfa_allocations(chain: ChainSpec, slack: float, cpu_cap: int | None = None) -> Iterator[tuple[tuple[int, ...], float]]:
    """
    Iterados del algoritmo voraz: parte de ⌊θλ⌋+1 y suma una unidad a la VM
    con mayor reducción de retardo (empate: menor índice) mientras el retardo
    de cómputo supere la holgura y el total no exceda Ĉ.
    """
    cap = chain.cpu_cap if cpu_cap is None else cpu_cap
    mu = list(chain.min_units)
    d = chain_comp_delay(chain, mu)
    yield tuple(mu), d
    while d > slack + DELAY_TOL and sum(mu) <= cap:
        best_k, best = 0, -1.0
        for k in range(chain.length):
            red = delay_reduction(chain, k, mu[k])
            if red > best:
                best_k, best = k, red
        mu[best_k] += 1
        d = chain_comp_delay(chain, mu)
        yield tuple(mu), d


def minimal_allocation(chain: ChainSpec, slack: float, cpu_cap: int | None = None) -> tuple[int, ...] | None:
    """
    Asignación de menor ||μ||₁ con retardo de cómputo <= holgura, o None.
    """
    if slack <= 0:
        return None
    cap = chain.cpu_cap if cpu_cap is None else cpu_cap
    mu, d = None, math.inf
    for mu, d in iter_gfa_allocations(chain, slack, cap):
        pass
    if d > slack + DELAY_TOL or sum(mu) > cap:
        return None
    return mu


def gfa_single(chain: ChainSpec, s: str, tree: NetworkTree) -> Allocation | None:
    """
    Asignación mínima de la cadena en s; None si s no es factible.
    """
    slack = chain.target_delay - net_delay(chain, s, tree)
    mu = minimal_allocation(chain, slack)
    return None if mu is None else Allocation(chain.id, s, mu)


def gfa(tree: NetworkTree, chains: Iterable[ChainSpec]) -> dict[str, FeasibleSet]:
    """
    S_u de cada cadena, recorriendo de la PoA hacia la raíz y cortando en el
    primer datacenter infactible junto con todos sus ancestros.
    """
    out: dict[str, FeasibleSet] = {}
    for chain in sorted(chains, key=lambda c: c.id):
        members: list[str] = []
        allocs: dict[str, Allocation] = {}
        for s in root_path(tree, chain.poa):
            alloc = gfa_single(chain, s, tree)
            if alloc is None:
                break
            members.append(s)
            allocs[s] = alloc
        if not members:
            logger.debug("Cadena %s sin datacenters factibles desde %s", chain.id, chain.poa)
        out[chain.id] = FeasibleSet(chain.id, tuple(members), allocs)
    return out


# ========= ORÁCULOS POR FUERZA BRUTA =========


def _delays(chain: ChainSpec, grid: list[np.ndarray]) -> np.ndarray:
    d = chain.works[0] / (grid[0] - chain.loads[0])
    for k in range(1, chain.length):
        d = d + chain.works[k] / (grid[k] - chain.loads[k])
    return d


def b_minimal_oracle(chain: ChainSpec, s: str, budget: int) -> Allocation:
    """
    Enumera todas las composiciones de `budget` con μ_k >= ⌊θλ_k⌋+1 y
    devuelve la de menor retardo de cómputo (la primera en orden
    lexicográfico si hay empate).
    """
    mins = chain.min_units
    spare = budget - sum(mins)
    if spare < 0:
        raise AllocationError(f"cadena {chain.id}: presupuesto {budget} bajo el mínimo {sum(mins)}")
    if chain.length == 1:
        return Allocation(chain.id, s, (budget,))
    axes = [np.arange(m, m + spare + 1) for m in mins[:-1]]
    head = [g.ravel() for g in np.meshgrid(*axes, indexing="ij")]
    last = budget - sum(head)
    ok = last >= mins[-1]
    grid = [g[ok] for g in head] + [last[ok]]
    best = int(np.argmin(_delays(chain, grid)))
    return Allocation(chain.id, s, tuple(int(g[best]) for g in grid))


def min_feasible_budget(chain: ChainSpec, slack: float, cpu_cap: int | None = None) -> int | None:
    """
    Menor Σμ entre todas las asignaciones con Σμ <= Ĉ que cumplen la holgura.
    """
    cap = chain.cpu_cap if cpu_cap is None else cpu_cap
    mins = chain.min_units
    spare = cap - sum(mins)
    if spare < 0 or slack <= 0:
        return None
    axes = [np.arange(m, m + spare + 1) for m in mins]
    grid = [g.ravel() for g in np.meshgrid(*axes, indexing="ij")]
    totals = sum(grid)
    ok = (totals <= cap) & (_delays(chain, grid) <= slack + DELAY_TOL)
    return int(totals[ok].min()) if ok.any() else None


def dump_allocations_csv(feasible_sets: Mapping[str, FeasibleSet], path_: str | Path) -> Path:
    rows = [
        {"chain_id": u, "dc_id": s, "vm_index": k, "mu_units": m}
        for u, fs in sorted(feasible_sets.items())
        for s in fs.datacenters
        for k, m in enumerate(fs.allocations[s].mu)
    ]
    p = Path(path_)
    p.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(rows, columns=["chain_id", "dc_id", "vm_index", "mu_units"]).to_csv(p, index=False)
    return p
