# services/cost_model.py
from collections import defaultdict
from collections.abc import Callable, Mapping
from dataclasses import dataclass

from services.errors import OffPathError
from services.service_model import Allocation, ChainSpec
from services.topology import Link, NetworkTree, path, root_path

MigrationPrice = Callable[[str, str, str], float]


@dataclass(frozen=True)
class CostParams:
    """
    Precios del objetivo. `cpu_cost` y `bw_cost` sobrescriben los valores
    guardados en la topología; el ancho de banda se cobra por `bw_unit_bps`.
    """

    mig_cost: float | MigrationPrice = 600.0
    cpu_cost: Mapping[str, float] | None = None
    bw_cost: Mapping[tuple[str, str], float] | None = None
    bw_unit_bps: float = 1e6

    def migration(self, chain_id: str, src: str, dst: str) -> float:
        if src == dst:
            return 0.0
        if callable(self.mig_cost):
            return float(self.mig_cost(chain_id, src, dst))
        return float(self.mig_cost)

    def cpu(self, tree: NetworkTree, s: str) -> float:
        if self.cpu_cost is not None and s in self.cpu_cost:
            return self.cpu_cost[s]
        return tree.datacenters[s].cpu_cost

    def bw(self, link: Link) -> float:
        if self.bw_cost is not None and link.endpoints in self.bw_cost:
            return self.bw_cost[link.endpoints]
        return link.bw_cost


@dataclass(frozen=True)
class CostBreakdown:
    migration: float = 0.0
    computation: float = 0.0
    bandwidth: float = 0.0

    @property
    def total(self) -> float:
        return self.migration + self.computation + self.bandwidth

    def __add__(self, other: "CostBreakdown") -> "CostBreakdown":
        return CostBreakdown(
            self.migration + other.migration,
            self.computation + other.computation,
            self.bandwidth + other.bandwidth,
        )

    def as_dict(self) -> dict:
        return {
            "migration": self.migration,
            "computation": self.computation,
            "bandwidth": self.bandwidth,
            "total": self.total,
        }


def _check_on_path(tree: NetworkTree, chain: ChainSpec, s: str):
    if s not in root_path(tree, chain.poa):
        raise OffPathError(f"cadena {chain.id} colocada fuera de su ruta en {s}")


def chain_cost_breakdown(
    tree: NetworkTree,
    chain: ChainSpec,
    s: str,
    allocation: Allocation | int,
    params: CostParams,
    x: str | None = None,
    *,
    strict: bool = True,
) -> CostBreakdown:
    """
    Con `strict=False` acepta s fuera de la ruta de la PoA (cadena que quedó
    en su lugar tras un traspaso); el tráfico sube hasta el ancestro común.
    """
    if strict:
        _check_on_path(tree, chain, s)
    units = allocation.total if isinstance(allocation, Allocation) else int(allocation)
    up = sum(params.bw(l) for l in path(tree, chain.poa, s)) * chain.uplink_rate
    down = sum(params.bw(l) for l in path(tree, s, chain.poa)) * chain.downlink_rate
    return CostBreakdown(
        migration=params.migration(chain.id, x, s) if x is not None else 0.0,
        computation=units * params.cpu(tree, s),
        bandwidth=(up + down) / params.bw_unit_bps,
    )


def per_chain_cost(
    tree: NetworkTree,
    chain: ChainSpec,
    s: str,
    allocation: Allocation | int,
    params: CostParams,
    x: str | None = None,
) -> float:
    """
    Costo separable de la cadena en s; x es su colocación previa.
    """
    return chain_cost_breakdown(tree, chain, s, allocation, params, x).total


def all_link_traffic(
    tree: NetworkTree,
    assign: Mapping[str, str],
    chains: Mapping[str, ChainSpec],
) -> dict[tuple[str, str], float]:
    """
    Tráfico en bit/s de cada enlace: λ_1 en subida, λ_{h+1} en bajada.
    """
    traffic: dict[tuple[str, str], float] = defaultdict(float)
    for u, s in assign.items():
        chain = chains[u]
        _check_on_path(tree, chain, s)
        for l in path(tree, chain.poa, s):
            traffic[l.endpoints] += chain.uplink_rate
        for l in path(tree, s, chain.poa):
            traffic[l.endpoints] += chain.downlink_rate
    return dict(traffic)


def link_traffic(
    tree: NetworkTree,
    assign: Mapping[str, str],
    chains: Mapping[str, ChainSpec],
    link: Link | tuple[str, str],
) -> float:
    key = link.endpoints if isinstance(link, Link) else tuple(link)
    return all_link_traffic(tree, assign, chains).get(key, 0.0)


def total_cost(
    tree: NetworkTree,
    assign: Mapping[str, str],
    allocations: Mapping[str, Allocation],
    chains: Mapping[str, ChainSpec],
    params: CostParams,
    previous: Mapping[str, str | None] | None = None,
) -> CostBreakdown:
    """
    Objetivo completo: migración + cómputo + ancho de banda. Sin `previous`
    se toma la colocación actual guardada en cada cadena.
    """
    migration = 0.0
    computation = 0.0
    for u, s in assign.items():
        x = previous.get(u) if previous is not None else chains[u].current
        if x is not None:
            migration += params.migration(u, x, s)
        computation += allocations[u].total * params.cpu(tree, s)
    bandwidth = sum(params.bw(tree.links[k]) * b for k, b in all_link_traffic(tree, assign, chains).items())
    return CostBreakdown(migration, computation, bandwidth / params.bw_unit_bps)
