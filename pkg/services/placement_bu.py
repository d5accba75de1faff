# services/placement_bu.py
import json
import logging
import math
from collections import defaultdict
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

from services.allocation import FeasibleSet
from services.errors import AllocationError
from services.service_model import ChainSpec
from services.topology import NetworkTree, postorder

logger = logging.getLogger(__name__)


@dataclass
class Placement:
    """
    Asignación cadena -> datacenter y CPU residual a_s respecto de ⌊R·C_s⌋.
    `order` registra el orden de colocación (lo usa el testigo).
    """

    assign: dict[str, str]
    avail: dict[str, int]
    augmentation: Fraction = Fraction(1)
    order: list[str] = field(default_factory=list)

    def copy(self) -> "Placement":
        return Placement(dict(self.assign), dict(self.avail), self.augmentation, list(self.order))

    def place(self, chain_id: str, s: str, units: int):
        self.assign[chain_id] = s
        self.avail[s] -= units
        self.order.append(chain_id)


@dataclass(frozen=True)
class InfeasibilityWitness:
    """
    Certificado de BU: las cadenas H' sólo caben en T_{H'} y
    |H'| > (R / max Ĉ) · Σ_{T_{H'}} C_s.
    """

    failed_chain: str
    chains: tuple[str, ...]
    datacenters: tuple[str, ...]
    lhs: int
    rhs: Fraction
    augmentation: Fraction
    # a_s de T_{H'} en el momento de la falla
    residual: Mapping[str, int] = field(default_factory=dict)

    @property
    def holds(self) -> bool:
        return self.lhs > self.rhs

    def to_dict(self) -> dict:
        return {
            "failed_chain": self.failed_chain,
            "chains": list(self.chains),
            "datacenters": list(self.datacenters),
            "lhs": self.lhs,
            "rhs": str(self.rhs),
            "augmentation": str(self.augmentation),
            "residual": dict(self.residual),
            "holds": self.holds,
        }


def augmented_avail(tree: NetworkTree, avail: Mapping[str, int] | None, R: Fraction | int = 1) -> dict[str, int]:
    """
    `avail` es residual respecto de C_s; el resultado lo es respecto de ⌊R·C_s⌋.
    """
    R = Fraction(R)
    out = {}
    for s, dc in tree.datacenters.items():
        base = dc.capacity if avail is None else avail.get(s, dc.capacity)
        out[s] = base + math.floor(R * dc.capacity) - dc.capacity
    return out


def empty_avail(tree: NetworkTree) -> dict[str, int]:
    return {s: dc.capacity for s, dc in tree.datacenters.items()}


def bu(
    tree: NetworkTree,
    chains_to_place: Sequence[ChainSpec],
    feasible_sets: Mapping[str, FeasibleSet],
    avail: Mapping[str, int] | None,
    R: Fraction | int = 1,
    assign: Mapping[str, str] | None = None,
    universe: Iterable[ChainSpec] | None = None,
) -> Placement | InfeasibilityWitness:
    """
    Colocación de abajo hacia arriba con capacidades ⌊R·C_s⌋. En cada
    datacenter (post-orden) se prueban las cadenas pendientes con menos
    opciones por encima; falla cuando una cadena llega a su s̄(u) sin lugar.
    `universe` es H completo (incluye las de `assign`); el testigo toma de
    ahí max Ĉ. Por defecto, `chains_to_place`.
    """
    R = Fraction(R)
    placement = Placement(dict(assign or {}), augmented_avail(tree, avail, R), R, list((assign or {}).keys()))
    if not chains_to_place:
        return placement

    everyone = list(chains_to_place) + list(universe or ())
    rank = {c.id: i for i, c in enumerate(chains_to_place)}
    pending = set(rank)
    by_dc: dict[str, list[str]] = defaultdict(list)
    for c in chains_to_place:
        fs = feasible_sets[c.id]
        if not fs.datacenters:
            return build_witness(tree, c.id, placement, feasible_sets, everyone, R)
        for s in fs.datacenters:
            by_dc[s].append(c.id)

    for s in postorder(tree):
        cands = [u for u in by_dc.get(s, ()) if u in pending]
        cands.sort(key=lambda u: (len(feasible_sets[u].above(s)), feasible_sets[u].size(s), rank[u]))
        for u in cands:
            need = feasible_sets[u].size(s)
            if placement.avail[s] >= need:
                placement.place(u, s, need)
                pending.discard(u)
            elif feasible_sets[u].top == s:
                return build_witness(tree, u, placement, feasible_sets, everyone, R)
    return placement


def build_witness(
    tree: NetworkTree,
    failed: str,
    placement: Placement,
    feasible_sets: Mapping[str, FeasibleSet],
    chains: Iterable[ChainSpec],
    R: Fraction | int = 1,
) -> InfeasibilityWitness:
    """
    Arma H' desde la cadena que falló: recorre su S_u de arriba hacia abajo
    y suma las cadenas colocadas en cada datacenter no visitado, en orden
    inverso de colocación; repite con cada cadena agregada.
    """
    on_dc: dict[str, list[str]] = defaultdict(list)
    for u in placement.order:
        s = placement.assign.get(u)
        if s is not None:
            on_dc[s].append(u)

    members = [failed]
    seen = {failed}
    visited: set[str] = set()
    i = 0
    while i < len(members):
        u = members[i]
        i += 1
        for s in reversed(feasible_sets[u].datacenters):
            if s in visited:
                continue
            visited.add(s)
            for v in reversed(on_dc.get(s, [])):
                if v not in seen and v in feasible_sets:
                    seen.add(v)
                    members.append(v)

    region = set()
    for u in members:
        region.update(feasible_sets[u].datacenters)
    max_cap = max(c.cpu_cap for c in chains)
    rhs = Fraction(R) / max_cap * sum(tree.datacenters[s].capacity for s in region)
    witness = InfeasibilityWitness(
        failed_chain=failed,
        chains=tuple(members),
        datacenters=tuple(sorted(region)),
        lhs=len(members),
        rhs=rhs,
        augmentation=Fraction(R),
        residual={s: placement.avail[s] for s in sorted(region)},
    )
    logger.warning(
        "BU no pudo colocar %s con R=%s: |H'|=%d, cota=%s", failed, R, witness.lhs, witness.rhs
    )
    return witness


def dump_witness(witness: InfeasibilityWitness, path_: str | Path) -> Path:
    p = Path(path_)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(json.dumps(witness.to_dict(), indent=2), encoding="utf-8")
    return p


def mu_tilde(feasible_sets: Mapping[str, FeasibleSet]) -> int:
    """
    Menor ||μ||₁ entre todas las asignaciones factibles.
    """
    sizes = [a.total for fs in feasible_sets.values() for a in fs.allocations.values()]
    if not sizes:
        raise AllocationError("ningún par (cadena, datacenter) es factible")
    return min(sizes)


def r_max(chains: Iterable[ChainSpec], feasible_sets: Mapping[str, FeasibleSet]) -> Fraction:
    return Fraction(max(c.cpu_cap for c in chains), mu_tilde(feasible_sets))


def almost_full(s: str, avail: Mapping[str, int], chains: Iterable[ChainSpec]) -> bool:
    return avail[s] < max(c.cpu_cap for c in chains)
