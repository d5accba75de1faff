import json

import pytest

from services.errors import AllocationError, ConfigError, InfiniteDelayError, OffPathError
from services.service_model import (
    Allocation,
    ChainSpec,
    chain_comp_delay,
    chain_from_entry,
    check_allocation,
    check_chain_fits,
    load_catalog,
    net_delay,
    total_delay,
    vm_delay,
)
from services.topology import make_tree

PATH_TREE = {"r": None, "a": "r", "p": "a"}


def _rt_chain(poa="p", **kw):
    return chain_from_entry(load_catalog()["RT"], "u", poa, **kw)


def test_vm_delay_mm1() -> None:
    assert vm_delay(2.0, 0.001, 3) == pytest.approx(0.001)
    assert vm_delay(2.0, 0.001, 4) == pytest.approx(0.0005)
    with pytest.raises(InfiniteDelayError):
        vm_delay(2.0, 0.001, 2)


def test_chain_comp_delay_default_profile() -> None:
    chain = _rt_chain()
    assert chain.min_units == (3, 11, 3)
    assert chain_comp_delay(chain, (3, 11, 3)) == pytest.approx(0.003)
    assert chain_comp_delay(chain, Allocation("u", "p", (4, 12, 4))) == pytest.approx(0.0015)
    with pytest.raises(AllocationError):
        chain_comp_delay(chain, (3, 11))


def test_net_delay_counts_burst_and_links() -> None:
    tree = make_tree(PATH_TREE, 40)
    chain = ChainSpec(
        id="u",
        loads=(1.0,),
        works=(0.001,),
        rates=(1e6, 2e6),
        burst=1000.0,
        target_delay=0.1,
        cpu_cap=5,
        poa="p",
    )
    assert net_delay(chain, "p", tree) == pytest.approx(0.001 + 0.0005)
    assert net_delay(chain, "r", tree) == pytest.approx(0.0015 + 4 * 0.002)
    assert total_delay(chain, (2,), "a", tree) == pytest.approx(0.001 + 0.0015 + 2 * 0.002)


def test_net_delay_off_path() -> None:
    tree = make_tree({"r": None, "a": "r", "b": "r", "p": "a", "q": "b"}, 40)
    with pytest.raises(OffPathError):
        net_delay(_rt_chain("p"), "b", tree)


def test_chain_spec_validation() -> None:
    with pytest.raises(ConfigError):
        ChainSpec(id="x", loads=(1.0, 2.0), works=(0.1,), rates=(1.0, 1.0), burst=0, target_delay=1, cpu_cap=3, poa="p")
    with pytest.raises(ConfigError):
        ChainSpec(id="x", loads=(1.0,), works=(0.1,), rates=(1.0, 1.0), burst=0, target_delay=0, cpu_cap=3, poa="p")
    with pytest.raises(ConfigError):
        ChainSpec(id="x", loads=(-1.0,), works=(0.1,), rates=(1.0, 1.0), burst=0, target_delay=1, cpu_cap=3, poa="p")


def test_from_densities_matches_loads_and_works() -> None:
    chain = ChainSpec.from_densities(
        "u",
        rates=(1e6, 1e6, 1e6),
        densities=(2e-6, 1e-5),
        unit_sizes=(500.0, 100.0),
        burst=0.0,
        target_delay=0.05,
        cpu_cap=20,
        poa="p",
    )
    assert chain.loads == pytest.approx((2.0, 10.0))
    assert chain.works == pytest.approx((0.001, 0.001))
    assert chain.unit_sizes == pytest.approx((500.0, 100.0))


def test_check_allocation() -> None:
    chain = _rt_chain()
    check_allocation(chain, Allocation("u", "p", (3, 11, 3)))
    with pytest.raises(InfiniteDelayError):
        check_allocation(chain, Allocation("u", "p", (2, 11, 3)))
    with pytest.raises(AllocationError):
        check_allocation(chain, Allocation("u", "p", (3, 15, 3)))


def test_catalog_file(tmp_path) -> None:
    p = tmp_path / "catalog.json"
    p.write_text(
        json.dumps(
            [
                {"name": "video", "rt": True, "loads": [1.5], "works": [0.002], "target_delay_s": 0.02, "cpu_cap": 6},
                {"name": "web", "loads": [1.0, 1.0], "works": [0.01, 0.01], "target_delay_s": 0.2, "cpu_cap": 8},
            ]
        ),
        encoding="utf-8",
    )
    catalog = load_catalog(p)
    assert set(catalog) == {"video", "web"}
    chain = chain_from_entry(catalog["web"], "c1", "p", current="a")
    assert chain.rates == (1e6, 1e6, 1e6)
    assert chain.current == "a" and chain.rt_class == "web"

    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps([{"name": "x", "loads": [1.0], "works": [], "target_delay_s": 1, "cpu_cap": 2}]), encoding="utf-8")
    with pytest.raises(ConfigError):
        load_catalog(bad)
    with pytest.raises(ConfigError):
        load_catalog(tmp_path / "missing.json")


def test_check_chain_fits() -> None:
    check_chain_fits(_rt_chain(), make_tree(PATH_TREE, 20))
    with pytest.raises(ConfigError):
        check_chain_fits(_rt_chain(), make_tree(PATH_TREE, 19))
