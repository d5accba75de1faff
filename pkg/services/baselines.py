# services/baselines.py
import logging
import math
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from time import perf_counter

import pulp

from services.allocation import FeasibleSet
from services.config import DMP_ORACLE_BUDGET
from services.cost_model import CostParams, per_chain_cost, total_cost
from services.errors import SearchSpaceError
from services.placement_bu import Placement, augmented_avail, empty_avail
from services.pushup_bupu import DecisionInput, DecisionOutput, complete_feasible_sets
from services.service_model import ChainSpec
from services.topology import NetworkTree

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PlacementFailure:
    chain_id: str
    reason: str = "sin capacidad en ningún datacenter factible"


@dataclass(frozen=True)
class OracleResult:
    feasible: bool
    min_cost: float | None
    placement: dict[str, str] | None
    explored: int


# ========= F-FIT Y CPVNF =========


def f_fit(
    tree: NetworkTree,
    chains_to_place: Sequence[ChainSpec],
    feasible_sets: Mapping[str, FeasibleSet],
    avail: Mapping[str, int] | None,
    R: Fraction | int = 1,
    assign: Mapping[str, str] | None = None,
) -> Placement | PlacementFailure:
    """
    Primer datacenter factible con capacidad, recorriendo de s̄(u) hacia la PoA.
    """
    placement = Placement(dict(assign or {}), augmented_avail(tree, avail, R), Fraction(R))
    for c in chains_to_place:
        fs = feasible_sets[c.id]
        for s in reversed(fs.datacenters):
            if placement.avail[s] >= fs.size(s):
                placement.place(c.id, s, fs.size(s))
                break
        else:
            return PlacementFailure(c.id)
    return placement


def _edge_units(fs: FeasibleSet) -> int:
    return fs.size(fs.datacenters[0]) if fs.datacenters else 0


def cpvnf(
    tree: NetworkTree,
    chains_to_place: Sequence[ChainSpec],
    feasible_sets: Mapping[str, FeasibleSet],
    avail: Mapping[str, int] | None,
    params: CostParams,
    R: Fraction | int = 1,
    assign: Mapping[str, str] | None = None,
) -> Placement | PlacementFailure:
    """
    Atiende primero las cadenas que más CPU piden en el borde y coloca cada
    una en el datacenter de menor costo con lugar. La migración se mide
    contra `chain.current`.
    """
    placement = Placement(dict(assign or {}), augmented_avail(tree, avail, R), Fraction(R))
    ranked = sorted(chains_to_place, key=lambda c: -_edge_units(feasible_sets[c.id]))
    for c in ranked:
        fs = feasible_sets[c.id]
        best, best_cost = None, math.inf
        for s in fs.datacenters:
            if placement.avail[s] < fs.size(s):
                continue
            cost = per_chain_cost(tree, c, s, fs.allocation(s), params, c.current)
            if cost < best_cost:
                best, best_cost = s, cost
        if best is None:
            return PlacementFailure(c.id)
        placement.place(c.id, best, fs.size(best))
    return placement


# ========= ORÁCULO EXACTO =========


def exhaustive_oracle(
    tree: NetworkTree,
    chains: Sequence[ChainSpec],
    feasible_sets: Mapping[str, FeasibleSet],
    avail: Mapping[str, int] | None,
    params: CostParams,
    budget_limit: int = DMP_ORACLE_BUDGET,
    R: Fraction | int = 1,
) -> OracleResult:
    """
    Búsqueda exhaustiva con poda de costo sobre todas las combinaciones de
    S_u. Entre óptimos empatados gana la primera asignación en orden
    lexicográfico (cadenas por id, S_u de abajo hacia arriba).
    """
    ordered = sorted(chains, key=lambda c: c.id)
    space = math.prod(len(feasible_sets[c.id]) for c in ordered)
    if space > budget_limit:
        raise SearchSpaceError(f"{space} combinaciones superan el límite {budget_limit}")
    if any(not feasible_sets[c.id].datacenters for c in ordered):
        return OracleResult(False, None, None, 0)

    a = augmented_avail(tree, avail, R)
    options = []
    for c in ordered:
        fs = feasible_sets[c.id]
        options.append(
            [(s, fs.size(s), per_chain_cost(tree, c, s, fs.allocation(s), params, c.current)) for s in fs.datacenters]
        )
    # cota inferior: suma de los mínimos de las cadenas restantes
    suffix = [0.0] * (len(ordered) + 1)
    for i in range(len(ordered) - 1, -1, -1):
        suffix[i] = suffix[i + 1] + min(o[2] for o in options[i])

    best_cost = math.inf
    best: list[str] | None = None
    current: list[str] = []
    explored = 0

    def _dfs(i: int, acc: float):
        nonlocal best_cost, best, explored
        explored += 1
        if i == len(ordered):
            if acc < best_cost:
                best_cost, best = acc, list(current)
            return
        if acc + suffix[i] >= best_cost:
            return
        for s, units, cost in options[i]:
            if a[s] < units:
                continue
            a[s] -= units
            current.append(s)
            _dfs(i + 1, acc + cost)
            current.pop()
            a[s] += units

    _dfs(0, 0.0)
    if best is None:
        return OracleResult(False, None, None, explored)
    return OracleResult(True, best_cost, {c.id: s for c, s in zip(ordered, best)}, explored)


# ========= RELAJACIÓN LINEAL =========


def _lp_problem(
    tree: NetworkTree,
    chains: Sequence[ChainSpec],
    feasible_sets: Mapping[str, FeasibleSet],
    params: CostParams,
    avail: Mapping[str, int] | None = None,
) -> pulp.LpProblem:
    prob = pulp.LpProblem("dmp", pulp.LpMinimize)
    caps = empty_avail(tree) | dict(avail or {})
    objective = []
    usage: dict[str, list] = {}
    for c in sorted(chains, key=lambda c: c.id):
        fs = feasible_sets[c.id]
        row = []
        for s in fs.datacenters:
            y = pulp.LpVariable(f"y_{c.id}_{s}", lowBound=0, upBound=1)
            row.append(y)
            objective.append(per_chain_cost(tree, c, s, fs.allocation(s), params, c.current) * y)
            usage.setdefault(s, []).append(fs.size(s) * y)
        if not row:
            # sin datacenter factible: la fila de asignación queda imposible
            row.append(pulp.LpVariable(f"y_{c.id}_none", lowBound=0, upBound=0))
        prob += pulp.lpSum(row) == 1, f"asignacion_{c.id}"
    prob += pulp.lpSum(objective)
    for s in sorted(usage):
        prob += pulp.lpSum(usage[s]) <= caps[s], f"capacidad_{s}"
    return prob


def lp_export(
    tree: NetworkTree,
    chains: Sequence[ChainSpec],
    feasible_sets: Mapping[str, FeasibleSet],
    params: CostParams,
    path_: str | Path,
    avail: Mapping[str, int] | None = None,
) -> Path:
    """
    Escribe la relajación lineal (y(u,s) en [0,1]) en formato LP.
    """
    p = Path(path_)
    p.parent.mkdir(parents=True, exist_ok=True)
    _lp_problem(tree, chains, feasible_sets, params, avail).writeLP(str(p))
    return p


def lp_relaxation_bound(
    tree: NetworkTree,
    chains: Sequence[ChainSpec],
    feasible_sets: Mapping[str, FeasibleSet],
    params: CostParams,
    avail: Mapping[str, int] | None = None,
) -> tuple[str, float | None]:
    """
    Resuelve la relajación con el CBC que trae pulp; devuelve (estado, cota).
    """
    prob = _lp_problem(tree, chains, feasible_sets, params, avail)
    prob.solve(pulp.PULP_CBC_CMD(msg=False))
    status = pulp.LpStatus[prob.status]
    return status, (pulp.value(prob.objective) if status == "Optimal" else None)


# ========= DECISIONES CON BENCHMARKS =========


def _benchmark_decision(inp: DecisionInput, placer: Callable) -> DecisionOutput | PlacementFailure:
    """
    Primero sólo las cadenas cambiadas; si fallan, todas desde cero.
    Los benchmarks trabajan con el R base, sin búsqueda.
    """
    started = perf_counter()
    fs = complete_feasible_sets(inp)
    R = inp.policy.base
    res = placer(inp.tree, inp.in_order(inp.changed), fs, inp.avail, R, inp.assign)
    reshuffled = False
    if isinstance(res, PlacementFailure):
        reshuffled = True
        res = placer(inp.tree, inp.in_order(inp.chains), fs, empty_avail(inp.tree), R, None)
        if isinstance(res, PlacementFailure):
            logger.warning("Benchmark sin solución: %s", res.chain_id)
            return res
    allocations = {u: fs[u].allocation(s) for u, s in res.assign.items()}
    return DecisionOutput(
        placement=res,
        allocations=allocations,
        cost=total_cost(inp.tree, res.assign, allocations, inp.chains, inp.params),
        reshuffled=reshuffled,
        achieved_R=R,
        feasible_sets=fs,
        runtime_ms=(perf_counter() - started) * 1000,
    )


def ffit_decision(inp: DecisionInput) -> DecisionOutput | PlacementFailure:
    return _benchmark_decision(inp, f_fit)


def cpvnf_decision(inp: DecisionInput) -> DecisionOutput | PlacementFailure:
    def _placer(tree, chains, fs, avail, R, assign):
        return cpvnf(tree, chains, fs, avail, inp.params, R, assign)

    return _benchmark_decision(inp, _placer)


def oracle_decision(inp: DecisionInput) -> DecisionOutput | OracleResult:
    """
    Óptimo exacto sobre todas las cadenas en cada decisión.
    """
    started = perf_counter()
    fs = complete_feasible_sets(inp)
    R = inp.policy.base
    res = exhaustive_oracle(inp.tree, list(inp.chains.values()), fs, None, inp.params, R=R)
    if not res.feasible:
        return res
    placement = Placement(dict(res.placement), augmented_avail(inp.tree, None, R), R)
    for u, s in res.placement.items():
        placement.avail[s] -= fs[u].size(s)
    allocations = {u: fs[u].allocation(s) for u, s in placement.assign.items()}
    return DecisionOutput(
        placement=placement,
        allocations=allocations,
        cost=total_cost(inp.tree, placement.assign, allocations, inp.chains, inp.params),
        reshuffled=True,
        achieved_R=R,
        feasible_sets=fs,
        runtime_ms=(perf_counter() - started) * 1000,
    )
