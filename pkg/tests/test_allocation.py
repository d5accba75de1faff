import math
from dataclasses import replace

import numpy as np
import pandas as pd
import pytest

from services.allocation import (
    b_minimal_oracle,
    delay_reduction,
    dump_allocations_csv,
    gfa,
    gfa_single,
    iter_gfa_allocations,
    min_feasible_budget,
    minimal_allocation,
)
from services.errors import AllocationError, InfiniteDelayError
from services.service_model import ChainSpec, chain_comp_delay, chain_from_entry, load_catalog
from services.topology import make_tree, root_path

PATH_TREE = {"r": None, "c": "r", "b": "c", "a": "b", "p": "a"}


def _random_chain(rng: np.random.Generator, cap_max: int = 30) -> ChainSpec:
    h = int(rng.integers(1, 5))
    loads = tuple(float(x) for x in rng.uniform(0.01, 5.0, h))
    works = tuple(float(x) for x in rng.uniform(0.01, 2.0, h))
    min_total = sum(int(l) + 1 for l in loads)
    return ChainSpec(
        id="u",
        loads=loads,
        works=works,
        rates=(1.0,) * (h + 1),
        burst=0.0,
        target_delay=1.0,
        cpu_cap=int(rng.integers(max(1, min_total - 2), cap_max + 1)),
        poa="p",
    )


def test_gfa_total_equals_exhaustive_minimum() -> None:
    rng = np.random.default_rng(2024)
    agree_feasible = 0
    for _ in range(1000):
        chain = _random_chain(rng)
        slack = float(rng.uniform(0.02, 4.0))
        mu = minimal_allocation(chain, slack)
        best = min_feasible_budget(chain, slack)
        if best is None:
            assert mu is None
        else:
            assert mu is not None and sum(mu) == best
            agree_feasible += 1
    assert agree_feasible > 100


def test_every_gfa_iterate_is_b_minimal() -> None:
    rng = np.random.default_rng(7)
    for _ in range(200):
        chain = _random_chain(rng, cap_max=24)
        for mu, d in iter_gfa_allocations(chain, 0.0):
            oracle = b_minimal_oracle(chain, "p", sum(mu))
            assert abs(chain_comp_delay(chain, oracle) - d) <= 1e-12


def test_delay_reduction_positive_and_guarded() -> None:
    chain = chain_from_entry(load_catalog()["RT"], "u", "p")
    assert delay_reduction(chain, 1, 11) == pytest.approx(0.0005)
    assert delay_reduction(chain, 0, 3) > delay_reduction(chain, 0, 4)
    with pytest.raises(InfiniteDelayError):
        delay_reduction(chain, 1, 10)


def test_gfa_default_profile_on_path() -> None:
    tree = make_tree(PATH_TREE, 40)
    rt = chain_from_entry(load_catalog()["RT"], "rt", "p")
    std = chain_from_entry(load_catalog()["STD"], "std", "p")
    fs = gfa(tree, [std, rt])
    assert list(fs) == ["rt", "std"]
    assert fs["rt"].datacenters == ("p", "a", "b")
    assert [fs["rt"].size(s) for s in fs["rt"].datacenters] == [17, 17, 19]
    assert fs["rt"].allocation("b").mu == (4, 12, 3)
    assert fs["rt"].top == "b"
    assert fs["rt"].above("p") == ("a", "b")
    assert fs["std"].datacenters == ("p", "a", "b", "c", "r")
    assert gfa_single(rt, "c", tree) is None


def test_gfa_empty_when_leaf_infeasible() -> None:
    tree = make_tree(PATH_TREE, 40)
    chain = chain_from_entry(load_catalog()["RT"], "u", "p")
    tight = ChainSpec(**{**chain.__dict__, "cpu_cap": 16})
    fs = gfa(tree, [tight])["u"]
    assert len(fs) == 0 and fs.top is None


def test_b_minimal_oracle_rejects_small_budget() -> None:
    chain = chain_from_entry(load_catalog()["RT"], "u", "p")
    with pytest.raises(AllocationError):
        b_minimal_oracle(chain, "p", 16)
    assert b_minimal_oracle(chain, "p", 17).mu == (3, 11, 3)


def test_dump_allocations_csv(tmp_path) -> None:
    tree = make_tree(PATH_TREE, 40)
    fs = gfa(tree, [chain_from_entry(load_catalog()["RT"], "u", "p")])
    p = dump_allocations_csv(fs, tmp_path / "alloc.csv")
    df = pd.read_csv(p, dtype={"chain_id": str, "dc_id": str})
    assert list(df.columns) == ["chain_id", "dc_id", "vm_index", "mu_units"]
    assert len(df) == 9
    assert df[df.dc_id == "b"].mu_units.tolist() == [4, 12, 3]


def test_optimal_allocations_satisfy_exchange_property() -> None:
    rng = np.random.default_rng(41)
    for _ in range(200):
        chain = _random_chain(rng, cap_max=24)
        budget = sum(chain.min_units) + int(rng.integers(0, 8))
        mu = b_minimal_oracle(chain, "p", budget).mu
        for j in range(chain.length):
            if mu[j] - 1 <= math.floor(chain.loads[j]):
                continue
            give = delay_reduction(chain, j, mu[j] - 1)
            for i in range(chain.length):
                assert give >= delay_reduction(chain, i, mu[i]) - 1e-9


def test_gfa_iterates_stay_within_one_unit_of_optimum() -> None:
    rng = np.random.default_rng(43)
    for _ in range(200):
        chain = _random_chain(rng, cap_max=24)
        for mu, _ in iter_gfa_allocations(chain, 0.0):
            best = b_minimal_oracle(chain, "p", sum(mu)).mu
            assert max(abs(a - b) for a, b in zip(mu, best)) <= 1


def test_pruned_ancestors_are_infeasible() -> None:
    rng = np.random.default_rng(47)
    tree = make_tree(PATH_TREE, 40, link_delay=0.1)
    cut = 0
    for _ in range(200):
        chain = replace(_random_chain(rng), target_delay=float(rng.uniform(0.2, 3.0)))
        fs = gfa(tree, [chain])["u"]
        rp = root_path(tree, "p")
        assert fs.datacenters == rp[: len(fs)]
        assert all(gfa_single(chain, s, tree) is None for s in rp[len(fs) :])
        cut += len(fs) < len(rp)
    assert cut > 0
