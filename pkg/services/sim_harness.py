# services/sim_harness.py
import functools
import logging
import math
import threading
import zlib
from collections.abc import Callable, Mapping, Sequence
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from time import perf_counter

import numpy as np
import pandas as pd

from services.allocation import FeasibleSet, gfa
from services.baselines import cpvnf_decision, ffit_decision, oracle_decision
from services.config import DMP_SWEEP_MAX_CPU, CatalogEntry, ScenarioConfig
from services.cost_model import CostBreakdown, CostParams, chain_cost_breakdown, total_cost
from services.errors import CancelledRunError, ConfigError, InfeasibleError, TopologyError, TraceError
from services.mobility import TraceEvent, generate_trace, read_trace
from services.pushup_bupu import AugmentationPolicy, DecisionInput, DecisionOutput, bupu
from services.service_model import Allocation, ChainSpec, chain_from_entry, check_chain_fits, load_catalog
from services.topology import LevelParams, NetworkTree, build_tree, grid_antennas, iter_leaf_positions, load_antennas

logger = logging.getLogger(__name__)

__all__ = [
    "ALGORITHMS",
    "MetricsRecord",
    "RunResult",
    "TraceEvent",
    "assign_poa",
    "detect_critical",
    "run",
    "sweep_capacity",
    "synth_mobility",
]

ALGORITHMS: dict[str, Callable] = {
    "bupu": bupu,
    "ffit": ffit_decision,
    "cpvnf": cpvnf_decision,
    "oracle": oracle_decision,
}

DECISION_COLUMNS = [
    "t",
    "n_chains",
    "n_changed",
    "reshuffled",
    "achieved_R",
    "mig_cost",
    "comp_cost",
    "bw_cost",
    "total_cost",
    "runtime_ms",
]

TIME_EPS = 1e-9


# ========= ESCENARIO =========


def tree_from_config(config: ScenarioConfig, antennas: Sequence[tuple[str, float, float]] | None = None) -> NetworkTree:
    if antennas is None:
        if config.antennas_file:
            antennas = load_antennas(config.antennas_file)
        else:
            antennas = grid_antennas(config.area.as_tuple(), config.grid.rows, config.grid.cols)
    params = LevelParams(
        c_cpu=config.c_cpu,
        capacity_rule=config.capacity_rule,
        multipliers=tuple(config.multipliers) if config.multipliers is not None else None,
        cpu_cost_base=config.cpu_cost_base,
        link_delay=config.link_delay_s,
        bandwidth=config.link_bandwidth_bps,
        sched_const=config.sched_const_bits,
        bw_cost=config.bw_cost,
        splits=dict(config.splits),
    )
    return build_tree(antennas, config.area.as_tuple(), config.height, params)


def cost_params(config: ScenarioConfig) -> CostParams:
    return CostParams(mig_cost=config.mig_cost, bw_unit_bps=config.bw_unit_bps)


def catalog_from_config(config: ScenarioConfig) -> dict[str, CatalogEntry]:
    if config.catalog:
        return {e.name: e for e in config.catalog}
    return load_catalog(config.catalog_file)


def synth_mobility(config: ScenarioConfig) -> list[TraceEvent]:
    """
    Traza random-waypoint sembrada con `config.seed`.
    """
    return generate_trace(config.mobility, config.area.as_tuple(), config.seed)


def load_events(config: ScenarioConfig) -> list[TraceEvent]:
    return read_trace(config.trace_file) if config.trace_file else synth_mobility(config)


def class_draw(seed: int, vehicle_id: str) -> float:
    # un sorteo fijo por vehículo: la clase RT queda anidada al subir la proporción
    return float(np.random.default_rng([seed, zlib.crc32(vehicle_id.encode())]).random())


def pick_class(catalog: Mapping[str, CatalogEntry], rt_ratio: float, draw: float) -> CatalogEntry:
    rt = [e for e in catalog.values() if e.rt]
    std = [e for e in catalog.values() if not e.rt]
    if not rt or not std:
        return (rt or std)[0]
    return rt[0] if draw < rt_ratio else std[0]


# ========= PoA Y CADENAS CRÍTICAS =========


@functools.lru_cache(maxsize=16)
def _leaf_table(tree: NetworkTree) -> tuple[list[str], np.ndarray]:
    rows = list(iter_leaf_positions(tree))
    return [r[0] for r in rows], np.array([[r[1], r[2]] for r in rows], dtype=float).reshape(-1, 2)


def assign_poa(tree: NetworkTree, x_m: float, y_m: float) -> str:
    """
    Antena más cercana (distancia euclídea); empates por poa_id.
    """
    if tree.area is not None:
        x0, y0, x1, y1 = tree.area
        if not (x0 <= x_m <= x1 and y0 <= y_m <= y1):
            raise TraceError(f"posición fuera del área: ({x_m}, {y_m})")
    ids, pos = _leaf_table(tree)
    if not ids:
        raise TopologyError("la topología no tiene antenas con posición")
    d2 = (pos[:, 0] - x_m) ** 2 + (pos[:, 1] - y_m) ** 2
    return ids[int(np.argmin(d2))]


def detect_critical(
    tree: NetworkTree,
    chains: Mapping[str, ChainSpec],
    placement: Mapping[str, str],
    new_poas: Mapping[str, str],
    feasible_sets: Mapping[str, FeasibleSet] | None = None,
    allocations: Mapping[str, Allocation] | None = None,
    avail: Mapping[str, int] | None = None,
) -> set[str]:
    """
    Una cadena es crítica si con su nueva PoA el datacenter actual ya no
    está en su S_u recalculado. Con `allocations` y `avail` también lo es si
    la nueva asignación mínima allí no entra en el residual.
    """
    residual = dict(avail) if avail is not None else None
    critical: set[str] = set()
    for u in sorted(new_poas):
        s = placement.get(u)
        if s is None or chains[u].poa == new_poas[u]:
            continue
        moved = replace(chains[u], poa=new_poas[u])
        fs = feasible_sets[u] if feasible_sets and u in feasible_sets else gfa(tree, [moved])[u]
        if s not in fs:
            critical.add(u)
            continue
        if allocations is not None and residual is not None:
            grow = fs.size(s) - allocations[u].total
            if grow > residual[s]:
                critical.add(u)
                continue
            residual[s] -= grow
    return critical


# ========= REGISTROS =========


@dataclass
class MetricsRecord:
    t: float
    n_chains: int
    n_changed: int
    reshuffled: bool
    achieved_R: float
    mig_cost: float
    comp_cost: float
    bw_cost: float
    total_cost: float
    runtime_ms: float
    algo: str = "bupu"
    feasible: bool = True
    n_critical: int = 0
    n_new: int = 0
    n_departed: int = 0
    n_migrations: int = 0
    compulsory_mig_cost: float = 0.0
    non_compulsory_mig_cost: float = 0.0
    n_violations: int = 0
    violation_s: float = 0.0

    @classmethod
    def from_cost(cls, t: float, cost: CostBreakdown, compulsory: float, non_compulsory: float, **kw) -> "MetricsRecord":
        return cls(
            t=t,
            mig_cost=compulsory + non_compulsory,
            comp_cost=cost.computation,
            bw_cost=cost.bandwidth,
            total_cost=compulsory + non_compulsory + cost.computation + cost.bandwidth,
            compulsory_mig_cost=compulsory,
            non_compulsory_mig_cost=non_compulsory,
            **kw,
        )


def criticality_rate(records: Sequence[MetricsRecord]) -> float:
    """
    Cadenas críticas por segundo a lo largo de la corrida.
    """
    if len(records) < 2:
        return 0.0
    span = records[-1].t - records[0].t
    return sum(r.n_critical for r in records) / span if span > 0 else 0.0


def estimate_critical(rate_x: float, period_s: float) -> float:
    """
    Estimador pesimista de cadenas críticas por decisión: X·T.
    """
    return rate_x * period_s


@dataclass
class RunResult:
    algo: str
    seed: int
    records: list[MetricsRecord]
    tree: NetworkTree
    chains: dict[str, ChainSpec]
    assign: dict[str, str]
    allocations: dict[str, Allocation]
    repetition: int = 0

    @property
    def feasible(self) -> bool:
        return all(r.feasible for r in self.records)

    @property
    def exit_code(self) -> int:
        return 0 if self.feasible else 2

    def frame(self) -> pd.DataFrame:
        rows = [asdict(r) | {"repetition": self.repetition} for r in self.records]
        extra = [k for k in (rows[0] if rows else {}) if k not in DECISION_COLUMNS]
        return pd.DataFrame(rows, columns=DECISION_COLUMNS + (extra or ["algo", "repetition"]))

    def summary(self) -> dict:
        rs = self.records
        n_viol = sum(r.n_violations for r in rs)
        return {
            "algo": self.algo,
            "seed": self.seed,
            "repetition": self.repetition,
            "decisions": len(rs),
            "infeasible_decisions": sum(not r.feasible for r in rs),
            "reshuffles": sum(r.reshuffled for r in rs),
            "critical": sum(r.n_critical for r in rs),
            "migrations": sum(r.n_migrations for r in rs),
            "mig_cost": sum(r.mig_cost for r in rs),
            "compulsory_mig_cost": sum(r.compulsory_mig_cost for r in rs),
            "non_compulsory_mig_cost": sum(r.non_compulsory_mig_cost for r in rs),
            "comp_cost": sum(r.comp_cost for r in rs),
            "bw_cost": sum(r.bw_cost for r in rs),
            "total_cost": sum(r.total_cost for r in rs),
            "max_achieved_R": max((r.achieved_R for r in rs if r.feasible), default=1.0),
            "mean_violation_s": sum(r.violation_s for r in rs) / n_viol if n_viol else 0.0,
            "criticality_rate": criticality_rate(rs),
            "runtime_ms": sum(r.runtime_ms for r in rs),
        }


def write_results(results: Sequence[RunResult], out_dir: str | Path) -> dict[str, Path]:
    """
    decisions.csv (una fila por decisión), costs.csv y summary.csv
    (una fila por repetición).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    decisions = pd.concat([r.frame() for r in results], ignore_index=True) if results else pd.DataFrame(columns=DECISION_COLUMNS + ["algo", "repetition"])
    costs = decisions.rename(
        columns={"mig_cost": "migration", "comp_cost": "computation", "bw_cost": "bandwidth", "total_cost": "total"}
    )[["t", "algo", "migration", "computation", "bandwidth", "total"]]
    paths = {
        "decisions": out / "decisions.csv",
        "costs": out / "costs.csv",
        "summary": out / "summary.csv",
    }
    decisions.to_csv(paths["decisions"], index=False)
    costs.to_csv(paths["costs"], index=False)
    pd.DataFrame([r.summary() for r in results]).to_csv(paths["summary"], index=False)
    return paths


# ========= BUCLE DE DECISIÓN =========


class _DecisionLoop:
    """
    Estado de una corrida: cadenas vivas, colocación comprometida y
    asignaciones vigentes. Las decisiones se toman en t = kT.
    """

    def __init__(self, config: ScenarioConfig, algo: str, tree: NetworkTree, repetition: int):
        self.config = config
        self.algo = algo
        self.decide_fn = ALGORITHMS[algo]
        self.tree = tree
        self.catalog = catalog_from_config(config)
        self.params = cost_params(config)
        self.policy = AugmentationPolicy.parse(config.augmentation)
        self.order_rng = np.random.default_rng(config.seed + repetition)

        self.templates: dict[tuple[str, str], FeasibleSet] = {}
        self.chains: dict[str, ChainSpec] = {}
        self.poa_now: dict[str, str] = {}
        self.assign: dict[str, str] = {}
        self.allocs: dict[str, Allocation] = {}
        self.pending: set[str] = set()
        # críticas que quedaron sin recolocar tras una decisión infactible
        self.stuck: set[str] = set()
        self.departed: set[str] = set()
        self.arrived = 0
        self.last_seen: dict[str, float] = {}
        self.onset: dict[str, float] = {}
        self.ended: list[float] = []
        self.records: list[MetricsRecord] = []

    # -------- conjuntos factibles por (clase, PoA) --------

    def template(self, cls: str, poa: str) -> FeasibleSet:
        key = (cls, poa)
        if key not in self.templates:
            proto = chain_from_entry(self.catalog[cls], "_", poa)
            self.templates[key] = gfa(self.tree, [proto])["_"]
        return self.templates[key]

    def feasible_set(self, u: str, poa: str | None = None) -> FeasibleSet:
        c = self.chains[u]
        t = self.template(c.rt_class, poa or c.poa)
        return FeasibleSet(u, t.datacenters, {s: Allocation(u, s, a.mu) for s, a in t.allocations.items()})

    def residual(self, assign: Mapping[str, str]) -> dict[str, int]:
        avail = {s: dc.capacity for s, dc in self.tree.datacenters.items()}
        for u, s in assign.items():
            avail[s] -= self.allocs[u].total
        return avail

    # -------- ingesta de la traza --------

    def ingest(self, ev: TraceEvent):
        vid = ev.vehicle_id
        if vid in self.departed:
            return
        if ev.departed:
            if vid in self.chains:
                self.departed.add(vid)
            return
        poa = assign_poa(self.tree, ev.x, ev.y)
        if vid not in self.chains:
            entry = pick_class(self.catalog, self.config.rt_ratio, class_draw(self.config.seed, vid))
            self.chains[vid] = chain_from_entry(entry, vid, poa)
            self.poa_now[vid] = poa
            self.pending.add(vid)
            self.arrived += 1
        elif poa != self.poa_now[vid]:
            self.poa_now[vid] = poa
            s = self.assign.get(vid)
            if s is not None:
                inside = s in self.template(self.chains[vid].rt_class, poa)
                if not inside and vid not in self.onset:
                    self.onset[vid] = (self.last_seen.get(vid, ev.time) + ev.time) / 2
                elif inside and vid in self.onset:
                    self.ended.append(ev.time - self.onset.pop(vid))
        self.last_seen[vid] = ev.time

    def release_departed(self) -> int:
        n = len(self.departed)
        for vid in self.departed:
            for d in (self.chains, self.poa_now, self.assign, self.allocs, self.last_seen, self.onset):
                d.pop(vid, None)
            self.pending.discard(vid)
            self.stuck.discard(vid)
        self.departed = set()
        return n

    # -------- decisión --------

    def decide(self, t: float) -> MetricsRecord:
        started = perf_counter()
        n_departed = self.release_departed()
        n_new, self.arrived = self.arrived, 0

        moved = {u: self.poa_now[u] for u in self.assign if self.poa_now[u] != self.chains[u].poa}
        moved_fs = {u: self.feasible_set(u, p) for u, p in moved.items()}
        critical = detect_critical(
            self.tree, self.chains, self.assign, moved, moved_fs, self.allocs, self.residual(self.assign)
        )
        for u, p in self.poa_now.items():
            if self.chains[u].poa != p:
                self.chains[u] = replace(self.chains[u], poa=p)
        for u, fs in moved_fs.items():
            if u not in critical:
                self.allocs[u] = fs.allocation(self.assign[u])

        changed = critical | self.pending | self.stuck
        common = dict(algo=self.algo, n_critical=len(critical), n_new=n_new, n_departed=n_departed)
        if not changed:
            cost = total_cost(self.tree, self.assign, self.allocs, self.chains, self.params, previous=self.assign)
            return self._record(t, cost, 0.0, 0.0, started, n_changed=0, reshuffled=False, achieved_R=float(self.policy.base), **common)

        keep = {u: s for u, s in self.assign.items() if u not in changed}
        order = None
        if self.config.shuffle_order:
            order = [str(u) for u in self.order_rng.permutation(sorted(self.chains))]
        inp = DecisionInput(
            tree=self.tree,
            chains=dict(self.chains),
            changed=frozenset(changed),
            assign=keep,
            avail=self.residual(keep),
            params=self.params,
            policy=self.policy,
            feasible_sets={u: self.feasible_set(u) for u in self.chains},
            order=order,
            pu_order=self.config.pu_order,
        )
        out = self.decide_fn(inp)

        if not isinstance(out, DecisionOutput):
            logger.warning("Decisión infactible en t=%.3f (%s): %d cadenas pendientes", t, self.algo, len(changed))
            self.stuck |= critical
            cost = total_cost(self.tree, keep, self.allocs, self.chains, self.params, previous=keep)
            # las trabadas siguen ocupando su datacenter anterior
            for u in sorted(self.stuck & set(self.assign)):
                cost += chain_cost_breakdown(self.tree, self.chains[u], self.assign[u], self.allocs[u], self.params, strict=False)
            return self._record(
                t, cost, 0.0, 0.0, started, n_changed=len(changed), reshuffled=False, achieved_R=0.0, feasible=False, **common
            )

        compulsory = non_compulsory = 0.0
        n_mig = 0
        for u, y in out.assign.items():
            x = self.chains[u].current
            if x is not None and x != y:
                price = self.params.migration(u, x, y)
                n_mig += 1
                if u in critical or u in self.stuck:
                    compulsory += price
                else:
                    non_compulsory += price
        self.assign = dict(out.assign)
        self.allocs = dict(out.allocations)
        for u, y in self.assign.items():
            self.chains[u] = replace(self.chains[u], current=y)
        for u in changed:
            if u in self.onset:
                self.ended.append(t - self.onset.pop(u))
        self.pending.clear()
        self.stuck.clear()
        return self._record(
            t,
            out.cost,
            compulsory,
            non_compulsory,
            started,
            n_changed=len(changed),
            reshuffled=out.reshuffled,
            achieved_R=float(out.achieved_R),
            n_migrations=n_mig,
            **common,
        )

    def _record(self, t: float, cost: CostBreakdown, compulsory: float, non_compulsory: float, started: float, **kw) -> MetricsRecord:
        ended, self.ended = self.ended, []
        rec = MetricsRecord.from_cost(
            t,
            cost,
            compulsory,
            non_compulsory,
            n_chains=len(self.chains),
            runtime_ms=(perf_counter() - started) * 1000,
            n_violations=len(ended),
            violation_s=sum(ended),
            **kw,
        )
        logger.debug(
            "t=%.3f cadenas=%d cambiadas=%d críticas=%d costo=%.2f", t, rec.n_chains, rec.n_changed, rec.n_critical, rec.total_cost
        )
        self.records.append(rec)
        return rec


def _check_catalog(tree: NetworkTree, catalog: Mapping[str, CatalogEntry]):
    for e in catalog.values():
        check_chain_fits(chain_from_entry(e, e.name, tree.leaves[0]), tree)


def _horizon(config: ScenarioConfig, events: Sequence[TraceEvent]) -> float:
    if config.duration_s is not None:
        return config.duration_s
    if not config.trace_file:
        return config.mobility.duration_s
    return events[-1].time if events else 0.0


def decision_instants(period_s: float, horizon_s: float) -> list[float]:
    k_max = int(math.floor(horizon_s / period_s + TIME_EPS))
    return [round(k * period_s, 9) for k in range(k_max + 1)]


def run(
    config: ScenarioConfig,
    algo: str = "bupu",
    *,
    events: Sequence[TraceEvent] | None = None,
    repetition: int = 0,
    out_dir: str | Path | None = None,
    cancel: threading.Event | None = None,
) -> RunResult:
    """
    Corre el escenario decidiendo cada T segundos. En cada instante se
    ingieren los movimientos hasta t, se liberan las partidas, se detectan
    las cadenas críticas y se invoca el algoritmo elegido. Si `cancel` se
    activa, corta antes de la siguiente decisión con CancelledRunError.
    """
    if algo not in ALGORITHMS:
        raise ConfigError(f"algoritmo desconocido: {algo} (opciones: {', '.join(ALGORITHMS)})")
    tree = tree_from_config(config)
    events = list(events) if events is not None else load_events(config)
    loop = _DecisionLoop(config, algo, tree, repetition)
    _check_catalog(tree, loop.catalog)

    i = 0
    for t in decision_instants(config.period_s, _horizon(config, events)):
        if cancel is not None and cancel.is_set():
            logger.warning("Corrida %s cancelada en t=%.3f", algo, t)
            raise CancelledRunError(f"corrida {algo} cancelada en t={t:.3f}")
        while i < len(events) and events[i].time <= t + TIME_EPS:
            loop.ingest(events[i])
            i += 1
        rec = loop.decide(t)
        if not rec.feasible and config.abort_on_infeasible:
            logger.warning("Corrida abortada en t=%.3f por decisión infactible", t)
            break

    result = RunResult(
        algo=algo,
        seed=config.seed,
        records=loop.records,
        tree=tree,
        chains=loop.chains,
        assign=loop.assign,
        allocations=loop.allocs,
        repetition=repetition,
    )
    logger.info(
        "Corrida %s seed=%d rep=%d: %d decisiones, factible=%s", algo, config.seed, repetition, len(loop.records), result.feasible
    )
    if out_dir is not None:
        write_results([result], out_dir)
    return result


def run_repetitions(config: ScenarioConfig, algo: str = "bupu", repetitions: int = 1) -> list[RunResult]:
    """
    Repite la corrida sobre la misma traza barajando el orden de atención
    con la semilla seed + i.
    """
    events = load_events(config)
    cfg = config.model_copy(update={"shuffle_order": config.shuffle_order or repetitions > 1})
    return [run(cfg, algo, events=events, repetition=i) for i in range(repetitions)]


# ========= BARRIDO DE CAPACIDAD =========


@dataclass
class SweepResult:
    algo: str
    c_cpu: int
    attempts: list[tuple[int, bool]] = field(default_factory=list)

    def frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [{"algo": self.algo, "c_cpu": c, "feasible": ok} for c, ok in self.attempts],
            columns=["algo", "c_cpu", "feasible"],
        )


def _min_valid_cpu(config: ScenarioConfig, catalog: Mapping[str, CatalogEntry]) -> int:
    params = LevelParams(
        c_cpu=1,
        capacity_rule=config.capacity_rule,
        multipliers=tuple(config.multipliers) if config.multipliers is not None else None,
    )
    min_mult = min(params.multiplier(level) for level in range(config.height + 1))
    if min_mult <= 0:
        raise ConfigError("hay niveles sin capacidad: ningún C_cpu cumple Ĉ <= C_s")
    return math.ceil(max(e.cpu_cap for e in catalog.values()) / min_mult)


def sweep_capacity(
    config: ScenarioConfig,
    algo: str = "bupu",
    *,
    events: Sequence[TraceEvent] | None = None,
    max_cpu: int = DMP_SWEEP_MAX_CPU,
    cancel: threading.Event | None = None,
) -> SweepResult:
    """
    Menor C_cpu con el que todas las decisiones del tramo son factibles
    sin aumento de recursos. Búsqueda binaria suponiendo éxito monótono.
    """
    events = list(events) if events is not None else load_events(config)
    result = SweepResult(algo, 0)

    def _attempt(c: int) -> bool:
        cfg = config.model_copy(update={"c_cpu": c, "augmentation": 1.0, "abort_on_infeasible": True})
        ok = run(cfg, algo, events=events, cancel=cancel).feasible
        result.attempts.append((c, ok))
        logger.info("Barrido %s: C_cpu=%d -> %s", algo, c, "factible" if ok else "infactible")
        return ok

    lo = _min_valid_cpu(config, catalog_from_config(config)) - 1
    hi = lo + 1
    while not _attempt(hi):
        lo = hi
        hi *= 2
        if hi > max_cpu:
            raise InfeasibleError(f"{algo} no es factible ni con C_cpu={lo} (límite {max_cpu})")
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if _attempt(mid):
            hi = mid
        else:
            lo = mid
    result.c_cpu = hi
    return result


# ========= INSTANTÁNEA =========


@dataclass
class Snapshot:
    tree: NetworkTree
    chains: list[ChainSpec]
    feasible_sets: dict[str, FeasibleSet]
    params: CostParams
    t: float


def snapshot_instance(config: ScenarioConfig, t: float = 0.0, events: Sequence[TraceEvent] | None = None) -> Snapshot:
    """
    Instancia estática en el instante t: una cadena por vehículo activo,
    en su PoA de ese momento y sin colocación previa.
    """
    tree = tree_from_config(config)
    catalog = catalog_from_config(config)
    _check_catalog(tree, catalog)
    events = list(events) if events is not None else load_events(config)
    last: dict[str, TraceEvent] = {}
    for ev in events:
        if ev.time > t + TIME_EPS:
            break
        if ev.departed:
            last.pop(ev.vehicle_id, None)
        else:
            last[ev.vehicle_id] = ev
    chains = [
        chain_from_entry(
            pick_class(catalog, config.rt_ratio, class_draw(config.seed, vid)), vid, assign_poa(tree, ev.x, ev.y)
        )
        for vid, ev in sorted(last.items())
    ]
    return Snapshot(tree, chains, gfa(tree, chains), cost_params(config), t)
