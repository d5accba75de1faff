import math
import threading

import pandas as pd
import pytest

from conftest import small_config
from services.config import CatalogEntry, ScenarioConfig
from services.errors import CancelledRunError, ConfigError, TraceError
from services.mobility import TraceEvent, write_trace
from services.service_model import Allocation, chain_from_entry, load_catalog
from services.sim_harness import (
    DECISION_COLUMNS,
    MetricsRecord,
    _min_valid_cpu,
    assign_poa,
    class_draw,
    criticality_rate,
    decision_instants,
    detect_critical,
    estimate_critical,
    load_events,
    run,
    run_repetitions,
    snapshot_instance,
    sweep_capacity,
    tree_from_config,
    write_results,
)
from services.topology import root_path


def _trace(tmp_path, events, name="trace.csv") -> str:
    return str(write_trace(events, tmp_path / name))


def test_assign_poa_nearest_antenna() -> None:
    tree = tree_from_config(small_config())
    assert assign_poa(tree, 50, 50) == "0"
    assert assign_poa(tree, 399, 1) == "3"
    assert assign_poa(tree, 350, 350) == "15"
    # equidistante entre "0" y "1"
    assert assign_poa(tree, 100, 50) == "0"
    with pytest.raises(TraceError):
        assign_poa(tree, 401, 10)


def test_detect_critical_path_and_capacity() -> None:
    tree = tree_from_config(small_config())
    chain = chain_from_entry(load_catalog()["RT"], "u", "0", current="dc-2-0")
    chains = {"u": chain}
    placement = {"u": "dc-2-0"}
    assert detect_critical(tree, chains, placement, {"u": "3"}) == {"u"}
    assert detect_critical(tree, chains, placement, {"u": "1"}) == set()
    assert detect_critical(tree, chains, placement, {"u": "0"}) == set()

    # en dc-2-0 la nueva asignación pide 19 unidades contra 17 vigentes
    small = {"u": Allocation("u", "dc-2-0", (3, 11, 3))}
    assert detect_critical(tree, chains, placement, {"u": "1"}, allocations=small, avail={"dc-2-0": 1}) == {"u"}
    assert detect_critical(tree, chains, placement, {"u": "1"}, allocations=small, avail={"dc-2-0": 2}) == set()


def test_hand_trace_costs_and_sla(tmp_path) -> None:
    trace = _trace(
        tmp_path,
        [
            TraceEvent(0.0, "v", 50.0, 50.0),
            TraceEvent(1.0, "v", 350.0, 50.0),
            TraceEvent(2.0, "v", 350.0, 350.0),
        ],
    )
    res = run(small_config(rt_ratio=1.0, trace_file=trace))
    assert [r.t for r in res.records] == [0.0, 1.0, 2.0]
    first, second, third = res.records
    assert (first.n_new, first.n_changed) == (1, 1)
    assert (first.mig_cost, first.comp_cost, first.bw_cost, first.total_cost) == pytest.approx((0.0, 38.0, 12.0, 50.0))
    assert (second.n_critical, second.n_migrations) == (1, 1)
    assert (second.compulsory_mig_cost, second.total_cost) == pytest.approx((600.0, 650.0))
    assert second.non_compulsory_mig_cost == 0.0
    assert (second.n_violations, second.violation_s) == (1, pytest.approx(0.5))
    assert (third.mig_cost, third.violation_s) == (600.0, pytest.approx(0.5))
    assert res.assign == {"v": "dc-2-3"}
    assert res.allocations["v"].mu == (4, 12, 3)
    assert res.feasible and res.exit_code == 0

    s = res.summary()
    assert s["decisions"] == 3 and s["critical"] == 2 and s["migrations"] == 2
    assert s["mig_cost"] == 1200.0
    assert s["mean_violation_s"] == pytest.approx(0.5)


def test_move_inside_subtree_is_not_critical(tmp_path) -> None:
    trace = _trace(tmp_path, [TraceEvent(0.0, "v", 50.0, 50.0), TraceEvent(1.0, "v", 150.0, 50.0)])
    res = run(small_config(rt_ratio=1.0, trace_file=trace))
    last = res.records[-1]
    assert (last.n_critical, last.n_changed, last.mig_cost) == (0, 0, 0.0)
    assert last.total_cost == pytest.approx(50.0)
    assert res.chains["v"].poa == "1"
    assert res.assign == {"v": "dc-2-0"}


def test_empty_trace_yields_zero_cost_decisions(tmp_path) -> None:
    trace = _trace(tmp_path, [])
    res = run(small_config(trace_file=trace, duration_s=3))
    assert [r.t for r in res.records] == [0.0, 1.0, 2.0, 3.0]
    assert all(r.total_cost == 0 and r.n_chains == 0 for r in res.records)


def test_departed_vehicle_is_released(tmp_path) -> None:
    trace = _trace(tmp_path, [TraceEvent(0.0, "v", 50.0, 50.0), TraceEvent(1.0, "v", None, None)])
    res = run(small_config(trace_file=trace))
    assert res.records[0].n_chains == 1
    assert (res.records[1].n_departed, res.records[1].n_chains, res.records[1].total_cost) == (1, 0, 0.0)
    assert res.assign == {}


def test_synthetic_run_conserves_capacity_and_costs() -> None:
    res = run(small_config())
    assert len(res.records) == 6
    for r in res.records:
        assert r.total_cost == pytest.approx(r.mig_cost + r.comp_cost + r.bw_cost)
        assert r.mig_cost == pytest.approx(r.compulsory_mig_cost + r.non_compulsory_mig_cost)
    used = {s: 0 for s in res.tree.datacenters}
    for u, s in res.assign.items():
        used[s] += res.allocations[u].total
        assert s in root_path(res.tree, res.chains[u].poa)
    assert all(used[s] <= res.tree.capacity(s) for s in used)
    assert res.records[0].n_new == res.records[0].n_chains


def test_same_seed_is_reproducible() -> None:
    a = run(small_config()).frame().drop(columns=["runtime_ms"])
    b = run(small_config()).frame().drop(columns=["runtime_ms"])
    pd.testing.assert_frame_equal(a, b)


def test_unknown_algorithm() -> None:
    with pytest.raises(ConfigError):
        run(small_config(), "magia")


def test_decision_instants() -> None:
    assert decision_instants(0.3, 0.9) == [0.0, 0.3, 0.6, 0.9]
    assert set(decision_instants(2.0, 10.0)) <= set(decision_instants(1.0, 10.0))
    assert decision_instants(5.0, 3.0) == [0.0]


def test_rt_assignment_is_nested_across_ratios() -> None:
    draws = {f"v{i}": class_draw(3, f"v{i}") for i in range(50)}
    assert draws == {f"v{i}": class_draw(3, f"v{i}") for i in range(50)}
    low = {v for v, d in draws.items() if d < 0.2}
    high = {v for v, d in draws.items() if d < 0.6}
    assert low <= high


def test_criticality_estimator() -> None:
    recs = [MetricsRecord(float(t), 1, 0, False, 1.0, 0, 0, 0, 0, 0, n_critical=n) for t, n in enumerate([0, 2, 1, 0, 1])]
    assert criticality_rate(recs) == 1.0
    assert estimate_critical(criticality_rate(recs), 2.0) == 2.0
    assert criticality_rate(recs[:1]) == 0.0


def _crowd_config(tmp_path, n=20):
    entry = CatalogEntry(name="mini", loads=[1.0], works=[0.01], target_delay_s=1.0, cpu_cap=2)
    trace = _trace(tmp_path, [TraceEvent(0.0, f"v{i}", 50.0, 50.0) for i in range(n)], "crowd.csv")
    return small_config(catalog=[entry], trace_file=trace)


def test_sweep_finds_smallest_feasible_capacity(tmp_path) -> None:
    config = _crowd_config(tmp_path)
    # por camino: c/2 + c + 3c/2 + 2c cadenas de 2 unidades
    sweep = sweep_capacity(config)
    assert sweep.c_cpu == 4
    assert (4, True) in sweep.attempts and (3, False) in sweep.attempts
    assert _min_valid_cpu(config, {"mini": config.catalog[0]}) == 2
    assert list(sweep.frame().columns) == ["algo", "c_cpu", "feasible"]

    below = run(config.model_copy(update={"c_cpu": 3}))
    assert not below.feasible and below.exit_code == 2


def test_sweep_benchmarks(tmp_path) -> None:
    config = _crowd_config(tmp_path)
    assert sweep_capacity(config, "ffit").c_cpu == 4
    assert sweep_capacity(config, "cpvnf").c_cpu == 4


def test_snapshot_instance(tmp_path) -> None:
    trace = _trace(
        tmp_path,
        [
            TraceEvent(0.0, "a", 50.0, 50.0),
            TraceEvent(0.0, "b", 350.0, 350.0),
            TraceEvent(1.0, "a", None, None),
            TraceEvent(1.0, "b", 150.0, 50.0),
        ],
    )
    config = small_config(trace_file=trace)
    snap = snapshot_instance(config, 0.0)
    assert [(c.id, c.poa) for c in snap.chains] == [("a", "0"), ("b", "15")]
    assert set(snap.feasible_sets) == {"a", "b"}
    later = snapshot_instance(config, 1.0)
    assert [(c.id, c.poa) for c in later.chains] == [("b", "1")]


def test_repetitions_and_result_files(tmp_path) -> None:
    results = run_repetitions(small_config(), "bupu", 2)
    assert [r.repetition for r in results] == [0, 1]
    paths = write_results(results, tmp_path / "out")

    decisions = pd.read_csv(paths["decisions"])
    assert list(decisions.columns[: len(DECISION_COLUMNS)]) == DECISION_COLUMNS
    assert len(decisions) == 12
    assert set(decisions.repetition) == {0, 1}

    costs = pd.read_csv(paths["costs"])
    assert list(costs.columns) == ["t", "algo", "migration", "computation", "bandwidth", "total"]
    summary = pd.read_csv(paths["summary"])
    assert len(summary) == 2
    assert summary.total_cost.tolist() == pytest.approx([r.summary()["total_cost"] for r in results])


@pytest.mark.slow
def test_first_decision_never_beats_oracle() -> None:
    config = small_config(mobility=small_config().mobility.model_copy(update={"vehicles": 4}))
    ours = run(config, "bupu")
    best = run(config, "oracle")
    assert ours.feasible and best.feasible
    assert len(ours.records) == len(best.records)
    assert ours.records[0].total_cost >= best.records[0].total_cost - 1e-6


@pytest.mark.slow
@pytest.mark.parametrize("algo", ["bupu", "ffit", "cpvnf"])
def test_sweep_brackets_the_minimum(algo) -> None:
    config = small_config(mobility=small_config().mobility.model_copy(update={"vehicles": 30, "duration_s": 10}))
    sweep = sweep_capacity(config, algo)
    floor = _min_valid_cpu(config, {e.name: e for e in load_catalog().values()})
    assert (sweep.c_cpu, True) in sweep.attempts
    assert sweep.c_cpu == floor or (sweep.c_cpu - 1, False) in sweep.attempts


def test_infeasible_decision_still_charges_stuck_chains(tmp_path) -> None:
    # 20 cadenas llenan la ruta de la PoA "15"; "v" llega desde "0"
    events = [TraceEvent(0.0, f"c{i:02d}", 350.0, 350.0) for i in range(20)]
    events += [TraceEvent(0.0, "v", 50.0, 50.0), TraceEvent(1.0, "v", 350.0, 350.0)]
    config = _crowd_config(tmp_path).model_copy(update={"c_cpu": 4, "trace_file": _trace(tmp_path, events, "full.csv")})
    res = run(config)
    first, second = res.records
    assert first.feasible and first.n_chains == 21
    assert not second.feasible and second.n_critical == 1
    assert res.chains["v"].poa == "15"
    assert res.assign["v"] in root_path(res.tree, "0")
    assert second.comp_cost == pytest.approx(first.comp_cost)
    assert second.bw_cost > first.bw_cost


def test_cancelled_run_stops_before_deciding() -> None:
    cancel = threading.Event()
    cancel.set()
    with pytest.raises(CancelledRunError) as exc:
        run(small_config(), cancel=cancel)
    assert exc.value.status_code == 504


SEEDS = [1, 2, 3, 4, 5]


def _min_cpu(config, algo="bupu", events=None) -> int:
    return sweep_capacity(config, algo, events=events).c_cpu


@pytest.mark.slow
def test_bupu_needs_less_capacity_than_benchmarks() -> None:
    wide_gaps = 0
    for seed in SEEDS:
        config = ScenarioConfig(seed=seed)
        events = load_events(config)
        ours = _min_cpu(config, "bupu", events)
        ffit, cpvnf = _min_cpu(config, "ffit", events), _min_cpu(config, "cpvnf", events)
        assert ours <= ffit and ours <= cpvnf
        wide_gaps += ours <= 0.75 * max(ffit, cpvnf)
    assert wide_gaps >= 4


@pytest.mark.slow
@pytest.mark.parametrize("seed", SEEDS)
def test_capacity_grows_with_rt_share(seed) -> None:
    config = ScenarioConfig(seed=seed)
    events = load_events(config)
    needed = [_min_cpu(config.model_copy(update={"rt_ratio": r}), events=events) for r in (0.0, 0.3, 0.6, 1.0)]
    assert needed == sorted(needed)


@pytest.mark.slow
@pytest.mark.parametrize("seed", SEEDS)
def test_migration_cost_drops_with_spare_capacity(seed) -> None:
    config = ScenarioConfig(seed=seed)
    events = load_events(config)
    base = _min_cpu(config, events=events)
    costs = []
    for factor in (1.1, 1.5, 2.0):
        res = run(config.model_copy(update={"c_cpu": math.ceil(factor * base)}), events=events)
        assert res.feasible
        costs.append(res.summary()["mig_cost"])
    assert costs == sorted(costs, reverse=True)


@pytest.mark.slow
@pytest.mark.parametrize("seed", SEEDS)
def test_longer_periods_trade_migrations_for_violations(seed) -> None:
    config = ScenarioConfig(seed=seed)
    events = load_events(config)
    c_cpu = math.ceil(1.1 * _min_cpu(config, events=events))
    optional = []
    for period in (1.0, 2.0, 5.0, 10.0):
        summary = run(config.model_copy(update={"c_cpu": c_cpu, "period_s": period}), events=events).summary()
        optional.append(summary["non_compulsory_mig_cost"])
        assert summary["mean_violation_s"] == pytest.approx(period / 2, rel=0.2)
    assert optional == sorted(optional, reverse=True)
