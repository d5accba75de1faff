# services/service_model.py
import math
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path

from pydantic import TypeAdapter, ValidationError

from services.config import CatalogEntry
from services.errors import AllocationError, ConfigError, InfiniteDelayError, OffPathError
from services.topology import NetworkTree, path, root_path

# 1 unidad de CPU = 100 MHz; γθ = 1 ms·unidad por VM en el perfil base
DEFAULT_CATALOG: tuple[CatalogEntry, ...] = (
    CatalogEntry(
        name="RT",
        rt=True,
        loads=[2.0, 10.0, 2.0],
        works=[0.001, 0.001, 0.001],
        target_delay_s=0.010,
        cpu_cap=20,
    ),
    CatalogEntry(
        name="STD",
        rt=False,
        loads=[2.0, 10.0, 2.0],
        works=[0.001, 0.001, 0.001],
        target_delay_s=0.100,
        cpu_cap=20,
    ),
)


@dataclass(frozen=True)
class ChainSpec:
    """
    Cadena de VMs de un pedido. `loads[k]` es θ_k·λ_k en unidades de CPU y
    `works[k]` es γ_k·θ_k; `rates` trae λ_1..λ_h más la tasa de bajada.
    """

    id: str
    loads: tuple[float, ...]
    works: tuple[float, ...]
    rates: tuple[float, ...]
    burst: float
    target_delay: float
    cpu_cap: int
    poa: str
    current: str | None = None
    rt_class: str = "STD"

    def __post_init__(self):
        h = len(self.loads)
        if h < 1 or len(self.works) != h or len(self.rates) != h + 1:
            raise ConfigError(f"cadena {self.id}: largos inconsistentes de loads/works/rates")
        if min(self.loads) <= 0 or min(self.works) <= 0 or min(self.rates) <= 0:
            raise ConfigError(f"cadena {self.id}: tasas, densidades y tamaños deben ser positivos")
        if self.target_delay <= 0 or self.burst < 0 or self.cpu_cap < 1:
            raise ConfigError(f"cadena {self.id}: parámetros de retardo o CPU inválidos")

    @property
    def length(self) -> int:
        return len(self.loads)

    @property
    def uplink_rate(self) -> float:
        return self.rates[0]

    @property
    def downlink_rate(self) -> float:
        return self.rates[-1]

    @property
    def densities(self) -> tuple[float, ...]:
        return tuple(l / r for l, r in zip(self.loads, self.rates))

    @property
    def unit_sizes(self) -> tuple[float, ...]:
        return tuple(w / d for w, d in zip(self.works, self.densities))

    @property
    def min_units(self) -> tuple[int, ...]:
        # menor μ con retardo finito en cada VM
        return tuple(math.floor(l) + 1 for l in self.loads)

    @classmethod
    def from_densities(
        cls,
        id: str,
        rates: Sequence[float],
        densities: Sequence[float],
        unit_sizes: Sequence[float],
        **kwargs,
    ) -> "ChainSpec":
        loads = tuple(d * r for d, r in zip(densities, rates))
        works = tuple(g * d for g, d in zip(unit_sizes, densities))
        return cls(id=id, loads=loads, works=works, rates=tuple(rates), **kwargs)


@dataclass(frozen=True)
class Allocation:
    chain_id: str
    dc_id: str
    mu: tuple[int, ...]

    @property
    def total(self) -> int:
        return sum(self.mu)


def check_allocation(chain: ChainSpec, alloc: Allocation):
    if len(alloc.mu) != chain.length:
        raise AllocationError(f"cadena {chain.id}: la asignación no cubre las {chain.length} VMs")
    for k, (m, l) in enumerate(zip(alloc.mu, chain.loads)):
        if m <= l:
            raise InfiniteDelayError(f"cadena {chain.id}: VM {k} con μ={m} <= θλ={l}")
    if alloc.total > chain.cpu_cap:
        raise AllocationError(f"cadena {chain.id}: {alloc.total} unidades superan Ĉ={chain.cpu_cap}")


# ========= RETARDOS =========


def vm_delay(load: float, work: float, mu: int) -> float:
    """
    Retardo medio M/M/1 de una VM: γθ / (μ − θλ).
    """
    if mu <= load:
        raise InfiniteDelayError(f"μ={mu} no supera la carga θλ={load}")
    return work / (mu - load)


def chain_comp_delay(chain: ChainSpec, alloc: Allocation | Sequence[int]) -> float:
    mu = alloc.mu if isinstance(alloc, Allocation) else tuple(alloc)
    if len(mu) != chain.length:
        raise AllocationError(f"cadena {chain.id}: la asignación no cubre las {chain.length} VMs")
    # suma en orden de VM; los oráculos vectorizados suman en el mismo orden
    return sum(vm_delay(l, w, m) for l, w, m in zip(chain.loads, chain.works, mu))


def net_delay(chain: ChainSpec, s: str, tree: NetworkTree) -> float:
    if s not in root_path(tree, chain.poa):
        raise OffPathError(f"{s} no está en la ruta de {chain.poa} a la raíz (cadena {chain.id})")
    burst = chain.burst / chain.uplink_rate + chain.burst / chain.downlink_rate
    links = path(tree, chain.poa, s) + path(tree, s, chain.poa)
    return math.fsum([burst] + [l.tau for l in links])


def total_delay(chain: ChainSpec, alloc: Allocation | Sequence[int], s: str, tree: NetworkTree) -> float:
    return chain_comp_delay(chain, alloc) + net_delay(chain, s, tree)


# ========= CATÁLOGO =========

_catalog_adapter = TypeAdapter(list[CatalogEntry])


def load_catalog(path_: str | Path | None = None) -> dict[str, CatalogEntry]:
    """
    Devuelve el catálogo de clases de servicio indexado por nombre.
    Sin archivo, usa el perfil base (RT de 10 ms y STD de 100 ms).
    """
    if path_ is None:
        entries = list(DEFAULT_CATALOG)
    else:
        p = Path(path_)
        if not p.exists():
            raise ConfigError(f"no existe el catálogo {p}")
        try:
            entries = _catalog_adapter.validate_json(p.read_text(encoding="utf-8"))
        except ValidationError as e:
            raise ConfigError(f"catálogo inválido: {e.errors()[0].get('msg')}")
    return {e.name: e for e in entries}


def chain_from_entry(entry: CatalogEntry, chain_id: str, poa: str, current: str | None = None) -> ChainSpec:
    h = len(entry.loads)
    return ChainSpec(
        id=chain_id,
        loads=tuple(entry.loads),
        works=tuple(entry.works),
        rates=(entry.uplink_bps,) * h + (entry.downlink_bps,),
        burst=entry.burst_bits,
        target_delay=entry.target_delay_s,
        cpu_cap=entry.cpu_cap,
        poa=poa,
        current=current,
        rt_class=entry.name,
    )


def check_chain_fits(chain: ChainSpec, tree: NetworkTree):
    """
    Ĉ_u no puede superar la capacidad de ningún datacenter.
    """
    min_cap = min(d.capacity for d in tree.datacenters.values())
    if chain.cpu_cap > min_cap:
        raise ConfigError(f"cadena {chain.id}: Ĉ={chain.cpu_cap} supera la capacidad mínima {min_cap}")
