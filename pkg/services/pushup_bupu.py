# services/pushup_bupu.py
import logging
import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from fractions import Fraction
from time import perf_counter

from services.allocation import FeasibleSet, gfa
from services.cost_model import CostBreakdown, CostParams, per_chain_cost, total_cost
from services.errors import DmpError, InfeasibleError, TopologyError
from services.placement_bu import InfeasibilityWitness, Placement, bu, empty_avail, r_max
from services.service_model import Allocation, ChainSpec
from services.topology import NetworkTree

logger = logging.getLogger(__name__)

PU_ORDERS = ("non_increasing", "non_decreasing")


@dataclass(frozen=True)
class AugmentationPolicy:
    """
    `base` es el R de trabajo; la búsqueda binaria sube hasta `search_max`
    o, con `auto`, hasta max(base, R_max) de la instancia.
    """

    base: Fraction = Fraction(1)
    search_max: Fraction | None = None
    auto: bool = False

    @classmethod
    def parse(cls, value: str | float | int | Fraction) -> "AugmentationPolicy":
        if isinstance(value, str) and value.strip().lower() == "auto":
            return cls(auto=True)
        return cls(base=Fraction(str(value)) if isinstance(value, (str, float)) else Fraction(value))

    def upper(self, chains: Sequence[ChainSpec], feasible_sets: Mapping[str, FeasibleSet]) -> Fraction:
        if self.auto:
            return max(self.base, r_max(chains, feasible_sets))
        if self.search_max is not None:
            return max(self.base, self.search_max)
        return self.base


@dataclass
class DecisionInput:
    tree: NetworkTree
    chains: Mapping[str, ChainSpec]
    changed: frozenset[str]
    # colocación de H \ H̃ y residual respecto de C_s coherente con ella
    assign: Mapping[str, str]
    avail: Mapping[str, int]
    params: CostParams = field(default_factory=CostParams)
    policy: AugmentationPolicy = field(default_factory=AugmentationPolicy)
    feasible_sets: Mapping[str, FeasibleSet] = field(default_factory=dict)
    order: Sequence[str] | None = None
    pu_order: str = "non_increasing"

    def __post_init__(self):
        self.changed = frozenset(self.changed)
        if not self.changed <= set(self.chains):
            raise DmpError("hay cadenas cambiadas que no existen en H")
        if self.changed & set(self.assign):
            raise DmpError("las cadenas cambiadas no deben estar en la colocación de entrada")
        if self.pu_order not in PU_ORDERS:
            raise DmpError(f"orden de PU desconocido: {self.pu_order}")

    def in_order(self, ids) -> list[ChainSpec]:
        """
        Cadenas en el orden de atención (por id salvo que se haya barajado).
        """
        ids = set(ids)
        seq = self.order if self.order is not None else sorted(self.chains)
        ranked = [u for u in seq if u in ids]
        ranked += sorted(ids - set(ranked))
        return [self.chains[u] for u in ranked]


@dataclass
class DecisionOutput:
    placement: Placement
    allocations: dict[str, Allocation]
    cost: CostBreakdown
    reshuffled: bool
    achieved_R: Fraction
    feasible_sets: dict[str, FeasibleSet]
    runtime_ms: float = 0.0

    @property
    def assign(self) -> dict[str, str]:
        return self.placement.assign

    @property
    def avail(self) -> dict[str, int]:
        return self.placement.avail


# ========= PU =========


def pu(
    tree: NetworkTree,
    chains: Sequence[ChainSpec],
    feasible_sets: Mapping[str, FeasibleSet],
    placement: Placement,
    params: CostParams,
    order: str = "non_increasing",
) -> Placement:
    """
    Empuja cada cadena al datacenter más alto de su S_u con lugar y costo
    estrictamente menor, hasta que una pasada completa no mueve nada.
    La migración se compara siempre contra la colocación previa a la decisión.
    """
    out = placement.copy()
    sign = -1 if order == "non_increasing" else 1
    costs: dict[tuple[str, str], float] = {}

    def _cost(c: ChainSpec, s: str) -> float:
        key = (c.id, s)
        if key not in costs:
            costs[key] = per_chain_cost(tree, c, s, feasible_sets[c.id].allocation(s), params, c.current)
        return costs[key]

    while True:
        moved = False
        ranked = sorted(chains, key=lambda c: (sign * feasible_sets[c.id].size(out.assign[c.id]), c.id))
        for c in ranked:
            fs = feasible_sets[c.id]
            s = out.assign[c.id]
            here = _cost(c, s)
            for up in reversed(fs.above(s)):
                need = fs.size(up)
                if out.avail[up] >= need and _cost(c, up) < here:
                    out.avail[s] += fs.size(s)
                    out.avail[up] -= need
                    out.assign[c.id] = up
                    moved = True
                    break
        if not moved:
            return out


# ========= BÚSQUEDA DE R =========


def _grid_step(tree: NetworkTree) -> int:
    caps = [d.capacity for d in tree.datacenters.values() if d.capacity > 0]
    if not caps:
        raise TopologyError("ningún datacenter tiene capacidad")
    return min(caps)


def _search(
    tree: NetworkTree,
    chains: Sequence[ChainSpec],
    feasible_sets: Mapping[str, FeasibleSet],
    r_lo: Fraction,
    r_hi: Fraction,
    avail: Mapping[str, int] | None = None,
) -> tuple[Fraction, Placement]:
    step = _grid_step(tree)
    k_lo = math.ceil(Fraction(r_lo) * step)
    k_hi = math.floor(Fraction(r_hi) * step)
    if k_lo > k_hi:
        grid = [Fraction(r_hi)]
    else:
        grid = [Fraction(k, step) for k in range(k_lo, k_hi + 1)]

    top = bu(tree, chains, feasible_sets, avail, grid[-1])
    if isinstance(top, InfeasibilityWitness):
        raise InfeasibleError(f"BU falla incluso con R={grid[-1]}", witness=top)

    lo, hi, best = 0, len(grid) - 1, top
    while lo < hi:
        mid = (lo + hi) // 2
        res = bu(tree, chains, feasible_sets, avail, grid[mid])
        if isinstance(res, Placement):
            hi, best = mid, res
        else:
            lo = mid + 1
    return grid[hi], best


def binary_search_r(
    tree: NetworkTree,
    chains: Sequence[ChainSpec],
    feasible_sets: Mapping[str, FeasibleSet],
    r_lo: Fraction | int = 1,
    r_hi: Fraction | int | None = None,
    avail: Mapping[str, int] | None = None,
) -> Fraction:
    """
    Menor R de la grilla k / min C_s en [r_lo, r_hi] con el que BU coloca
    todas las cadenas, suponiendo éxito monótono en R.
    """
    if r_hi is None:
        r_hi = r_max(chains, feasible_sets)
    return _search(tree, chains, feasible_sets, Fraction(r_lo), Fraction(r_hi), avail)[0]


# ========= BUPU =========


def _finish(inp: DecisionInput, placement: Placement, fs: dict[str, FeasibleSet], reshuffled: bool, R: Fraction, started: float) -> DecisionOutput:
    allocations = {u: fs[u].allocation(s) for u, s in placement.assign.items()}
    cost = total_cost(inp.tree, placement.assign, allocations, inp.chains, inp.params)
    return DecisionOutput(
        placement=placement,
        allocations=allocations,
        cost=cost,
        reshuffled=reshuffled,
        achieved_R=R,
        feasible_sets=fs,
        runtime_ms=(perf_counter() - started) * 1000,
    )


def complete_feasible_sets(inp: DecisionInput) -> dict[str, FeasibleSet]:
    fs = dict(inp.feasible_sets)
    missing = [c for u, c in inp.chains.items() if u not in fs]
    fs.update(gfa(inp.tree, missing))
    return fs


def bupu(inp: DecisionInput) -> DecisionOutput | InfeasibilityWitness:
    """
    GFA + BU sobre las cadenas cambiadas; si alcanza, PU sobre ellas.
    Si no, recoloca todas con búsqueda binaria sobre R y PU sobre todas.
    """
    started = perf_counter()
    fs = complete_feasible_sets(inp)
    changed = inp.in_order(inp.changed)
    R0 = inp.policy.base

    first = bu(inp.tree, changed, fs, inp.avail, R0, assign=inp.assign, universe=inp.chains.values())
    if isinstance(first, Placement):
        out = pu(inp.tree, changed, fs, first, inp.params, inp.pu_order)
        return _finish(inp, out, fs, False, R0, started)

    everyone = inp.in_order(inp.chains)
    if any(not fs[c.id].datacenters for c in everyone):
        # alguna cadena no tiene S_u: no hay R que alcance
        return bu(inp.tree, everyone, fs, empty_avail(inp.tree), R0)
    r_hi = inp.policy.upper(everyone, fs)
    try:
        R, placement = _search(inp.tree, everyone, fs, R0, r_hi, empty_avail(inp.tree))
    except InfeasibleError as e:
        logger.warning("Decisión infactible aun con R=%s", r_hi)
        return e.witness
    logger.info("Recolocación completa de %d cadenas con R=%s", len(everyone), R)
    out = pu(inp.tree, everyone, fs, placement, inp.params, inp.pu_order)
    return _finish(inp, out, fs, True, R, started)
