# services/topology.py
import json
import logging
import math
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import networkx as nx
import pandas as pd

from services.errors import LookupDatacenterError, TopologyError, expect_datacenter

logger = logging.getLogger(__name__)

Rect = tuple[float, float, float, float]  # (x0, y0, x1, y1)
Antenna = tuple[str, float, float]


@dataclass(frozen=True)
class Datacenter:
    id: str
    level: int
    parent: str | None
    children: tuple[str, ...]
    capacity: int
    cpu_cost: float
    coverage: Rect | None = None
    # solo las hojas (PoA) tienen posición de antena
    position: tuple[float, float] | None = None

    @property
    def is_leaf(self) -> bool:
        return not self.children


@dataclass(frozen=True)
class Link:
    src: str
    dst: str
    prop_delay: float
    bandwidth: float
    sched_const: float = 0.0
    bw_cost: float = 3.0

    @property
    def endpoints(self) -> tuple[str, str]:
        return (self.src, self.dst)

    @property
    def tau(self) -> float:
        return self.sched_const / self.bandwidth + self.prop_delay


@dataclass(frozen=True, eq=False)
class NetworkTree:
    """
    Árbol de datacenters inmutable. `ancestors[s]` guarda la ruta de s
    hasta la raíz (ambos incluidos), que es el único camino admisible
    para las cadenas que entran por s.
    """

    datacenters: Mapping[str, Datacenter]
    links: Mapping[tuple[str, str], Link]
    root: str
    height: int
    diameter: int
    graph: nx.DiGraph = field(repr=False)
    ancestors: Mapping[str, tuple[str, ...]] = field(repr=False)
    area: Rect | None = None

    def __contains__(self, dc_id: str) -> bool:
        return dc_id in self.datacenters

    def capacity(self, dc_id: str) -> int:
        return expect_datacenter(self, dc_id).capacity

    def level(self, dc_id: str) -> int:
        return expect_datacenter(self, dc_id).level

    @property
    def leaves(self) -> list[str]:
        return sorted((d.id for d in self.datacenters.values() if d.is_leaf), key=poa_sort_key)


@dataclass(frozen=True)
class LevelParams:
    """
    Parámetros por nivel del constructor de topología.
    """

    c_cpu: int
    capacity_rule: str = "level_plus_one"
    multipliers: tuple[int, ...] | None = None
    cpu_cost_base: float = 2.0
    link_delay: float = 0.002
    bandwidth: float = 1e9
    sched_const: float = 0.0
    bw_cost: float = 3.0
    # nivel del padre -> (filas, columnas)
    splits: Mapping[int, tuple[int, int]] = field(default_factory=dict)

    def multiplier(self, level: int) -> int:
        if self.multipliers is not None:
            return self.multipliers[level]
        if self.capacity_rule == "level":
            return level
        if self.capacity_rule == "exponential":
            return 2**level
        if self.capacity_rule == "level_plus_one":
            return level + 1
        raise TopologyError(f"regla de capacidad desconocida: {self.capacity_rule}")

    def capacity(self, level: int) -> int:
        return self.multiplier(level) * self.c_cpu

    def cpu_cost(self, level: int, height: int) -> float:
        return self.cpu_cost_base ** (height - level)

    def split(self, level: int) -> tuple[int, int]:
        rows, cols = self.splits.get(level, (2, 2))
        if rows < 1 or cols < 1:
            raise TopologyError(f"corte inválido en el nivel {level}: {rows}x{cols}")
        return rows, cols


def poa_sort_key(poa_id: str):
    """
    Orden natural de ids: los numéricos primero y por valor.
    """
    s = str(poa_id)
    return (0, int(s), s) if s.isdigit() else (1, 0, s)


# ========= RUTAS =========


def root_path(tree: NetworkTree, s: str) -> tuple[str, ...]:
    expect_datacenter(tree, s)
    return tree.ancestors[s]


def path(tree: NetworkTree, i: str, j: str) -> list[Link]:
    """
    Camino dirigido único de i a j pasando por el ancestro común más bajo.
    """
    up_i = root_path(tree, i)
    up_j = root_path(tree, j)
    on_j = set(up_j)
    lca_idx = next(k for k, s in enumerate(up_i) if s in on_j)
    lca = up_i[lca_idx]
    links = [tree.links[(up_i[k], up_i[k + 1])] for k in range(lca_idx)]
    down = up_j[: up_j.index(lca) + 1]
    for k in range(len(down) - 1, 0, -1):
        links.append(tree.links[(down[k], down[k - 1])])
    return links


def subtree(tree: NetworkTree, s: str) -> set[str]:
    expect_datacenter(tree, s)
    return {s} | nx.descendants(tree.graph, s)


def postorder(tree: NetworkTree) -> list[str]:
    """
    Recorrido DFS en post-orden desde la raíz: hijos antes que padres,
    hijos en el orden de la topología.
    """
    return list(nx.dfs_postorder_nodes(tree.graph, tree.root))


# ========= CONSTRUCCIÓN =========


def _assemble(datacenters: dict[str, Datacenter], links: dict[tuple[str, str], Link], area: Rect | None) -> NetworkTree:
    roots = [d.id for d in datacenters.values() if d.parent is None]
    if len(roots) != 1:
        raise TopologyError(f"se esperaba una sola raíz, hay {len(roots)}")
    root = roots[0]

    g = nx.DiGraph()
    for d in datacenters.values():
        g.add_node(d.id)
    for d in datacenters.values():
        for c in d.children:
            child = datacenters.get(c)
            if child is None or child.parent != d.id:
                raise TopologyError(f"referencia padre/hijo inconsistente: {d.id} -> {c}")
            g.add_edge(d.id, c)
    if not nx.is_arborescence(g):
        raise TopologyError("la topología no es un árbol con raíz")

    for (i, j), link in links.items():
        if not (math.isfinite(link.tau) and link.tau >= 0):
            raise TopologyError(f"latencia inválida en el enlace {i}->{j}")

    ancestors: dict[str, tuple[str, ...]] = {}
    for s in nx.topological_sort(g):
        parent = datacenters[s].parent
        ancestors[s] = (s,) if parent is None else (s,) + ancestors[parent]

    und = g.to_undirected(as_view=True)
    dist = nx.single_source_shortest_path_length(und, root)
    far = max(dist, key=dist.get)
    diameter = max(nx.single_source_shortest_path_length(und, far).values())

    return NetworkTree(
        datacenters=datacenters,
        links=links,
        root=root,
        height=datacenters[root].level,
        diameter=diameter,
        graph=g,
        ancestors=ancestors,
        area=area,
    )


def _edge_links(parent: str, child: str, params: LevelParams) -> dict[tuple[str, str], Link]:
    kw = dict(
        prop_delay=params.link_delay,
        bandwidth=params.bandwidth,
        sched_const=params.sched_const,
        bw_cost=params.bw_cost,
    )
    return {
        (child, parent): Link(child, parent, **kw),
        (parent, child): Link(parent, child, **kw),
    }


def _cell_index(rect: Rect, rows: int, cols: int, x: float, y: float) -> int:
    x0, y0, x1, y1 = rect
    col = min(int((x - x0) / (x1 - x0) * cols), cols - 1)
    row = min(int((y - y0) / (y1 - y0) * rows), rows - 1)
    return row * cols + col


def _cell_rect(rect: Rect, rows: int, cols: int, idx: int) -> Rect:
    x0, y0, x1, y1 = rect
    row, col = divmod(idx, cols)
    w = (x1 - x0) / cols
    h = (y1 - y0) / rows
    return (x0 + col * w, y0 + row * h, x0 + (col + 1) * w, y0 + (row + 1) * h)


def build_tree(
    antennas: Sequence[Antenna],
    area: Rect,
    height: int,
    level_params: LevelParams,
) -> NetworkTree:
    """
    Parte el área recursivamente en rectángulos (2x2 por defecto) desde la
    raíz hasta el nivel 1; cada antena es una hoja bajo el rectángulo de
    nivel 1 que la contiene. Los subárboles sin antenas se podan.
    """
    x0, y0, x1, y1 = area
    if not (x1 > x0 and y1 > y0):
        raise TopologyError("el área es degenerada")
    if height < 2:
        raise TopologyError("la altura debe ser al menos 2")
    if not antennas:
        raise TopologyError("no hay antenas para construir la topología")

    seen: set[str] = set()
    for poa_id, x, y in antennas:
        pid = str(poa_id)
        if pid in seen:
            raise TopologyError(f"antena duplicada: {pid}")
        if pid.startswith("dc-"):
            raise TopologyError(f"id de antena reservado: {pid}")
        if not (x0 <= x <= x1 and y0 <= y <= y1):
            raise TopologyError(f"antena fuera del área: {pid}")
        seen.add(pid)

    datacenters: dict[str, Datacenter] = {}
    links: dict[tuple[str, str], Link] = {}

    def _build(rect: Rect, level: int, dc_id: str, parent: str | None, members: list[Antenna]) -> str | None:
        if not members:
            return None
        children: list[str] = []
        if level == 1:
            for poa_id, x, y in sorted(members, key=lambda a: poa_sort_key(a[0])):
                leaf = str(poa_id)
                datacenters[leaf] = Datacenter(
                    id=leaf,
                    level=0,
                    parent=dc_id,
                    children=(),
                    capacity=level_params.capacity(0),
                    cpu_cost=level_params.cpu_cost(0, height),
                    coverage=rect,
                    position=(float(x), float(y)),
                )
                links.update(_edge_links(dc_id, leaf, level_params))
                children.append(leaf)
        else:
            rows, cols = level_params.split(level)
            buckets: dict[int, list[Antenna]] = {}
            for a in members:
                buckets.setdefault(_cell_index(rect, rows, cols, a[1], a[2]), []).append(a)
            suffix = dc_id.split("-", 2)[2] + "." if dc_id.count("-") == 2 else ""
            for idx in range(rows * cols):
                child_id = f"dc-{level - 1}-{suffix}{idx}"
                got = _build(_cell_rect(rect, rows, cols, idx), level - 1, child_id, dc_id, buckets.get(idx, []))
                if got is not None:
                    links.update(_edge_links(dc_id, got, level_params))
                    children.append(got)
        datacenters[dc_id] = Datacenter(
            id=dc_id,
            level=level,
            parent=parent,
            children=tuple(children),
            capacity=level_params.capacity(level),
            cpu_cost=level_params.cpu_cost(level, height),
            coverage=rect,
        )
        return dc_id

    members = [(str(p), float(x), float(y)) for p, x, y in antennas]
    _build(area, height, f"dc-{height}", None, members)
    tree = _assemble(datacenters, links, area)
    logger.info(
        "Topología construida: %d datacenters, %d hojas, altura %d",
        len(tree.datacenters),
        len(tree.leaves),
        tree.height,
    )
    return tree


def make_tree(
    parents: Mapping[str, str | None],
    capacities: Mapping[str, int] | int,
    *,
    link_delay: float = 0.002,
    bandwidth: float = 1e9,
    sched_const: float = 0.0,
    bw_cost: float = 3.0,
    cpu_cost_base: float = 2.0,
    positions: Mapping[str, tuple[float, float]] | None = None,
) -> NetworkTree:
    """
    Construye un árbol a mano desde un mapa hijo -> padre. El nivel de cada
    datacenter es la altura menos su profundidad; todas las hojas deben
    quedar en el nivel 0. Los hijos se ordenan según aparecen en `parents`.
    """
    children: dict[str, list[str]] = {s: [] for s in parents}
    for s, p in parents.items():
        if p is not None:
            if p not in children:
                raise LookupDatacenterError(f"padre desconocido: {p}")
            children[p].append(s)

    depth: dict[str, int] = {}

    def _depth(s: str, guard: int = 0) -> int:
        if s in depth:
            return depth[s]
        if guard > len(parents):
            raise TopologyError("ciclo en el mapa de padres")
        p = parents[s]
        depth[s] = 0 if p is None else _depth(p, guard + 1) + 1
        return depth[s]

    for s in parents:
        _depth(s)
    height = max(depth.values())
    leaf_depths = {depth[s] for s, ch in children.items() if not ch}
    if leaf_depths != {height}:
        raise TopologyError("todas las hojas deben estar a la misma profundidad")

    cap = (lambda s: capacities) if isinstance(capacities, int) else (lambda s: capacities[s])
    datacenters = {
        s: Datacenter(
            id=s,
            level=height - depth[s],
            parent=parents[s],
            children=tuple(children[s]),
            capacity=int(cap(s)),
            cpu_cost=cpu_cost_base ** depth[s],
            position=(positions or {}).get(s),
        )
        for s in parents
    }
    params = LevelParams(c_cpu=1, link_delay=link_delay, bandwidth=bandwidth, sched_const=sched_const, bw_cost=bw_cost)
    links: dict[tuple[str, str], Link] = {}
    for s, p in parents.items():
        if p is not None:
            links.update(_edge_links(p, s, params))
    return _assemble(datacenters, links, None)


# ========= ANTENAS Y VOLCADO =========


def load_antennas(path: str | Path) -> list[Antenna]:
    """
    Lee el CSV de antenas `poa_id,x_m,y_m`.
    """
    try:
        df = pd.read_csv(path, dtype={"poa_id": str}, encoding="utf-8")
    except FileNotFoundError:
        raise TopologyError(f"no existe el archivo de antenas {path}")
    faltan = {"poa_id", "x_m", "y_m"} - set(df.columns)
    if faltan:
        raise TopologyError(f"faltan columnas en {path}: {', '.join(sorted(faltan))}")
    return [(str(r.poa_id), float(r.x_m), float(r.y_m)) for r in df.itertuples(index=False)]


def grid_antennas(area: Rect, rows: int, cols: int) -> list[Antenna]:
    """
    Una antena en el centro de cada celda de una malla rows x cols.
    """
    out = []
    for idx in range(rows * cols):
        cx0, cy0, cx1, cy1 = _cell_rect(area, rows, cols, idx)
        out.append((str(idx), (cx0 + cx1) / 2, (cy0 + cy1) / 2))
    return out


def tree_to_dict(tree: NetworkTree) -> dict:
    """
    Volcado de la topología (esquema de `build-topology`).
    """
    return {
        "root": tree.root,
        "height": tree.height,
        "diameter": tree.diameter,
        "datacenters": [
            {
                "id": d.id,
                "level": d.level,
                "parent": d.parent,
                "children": list(d.children),
                "capacity": d.capacity,
                "cpu_cost": d.cpu_cost,
                "coverage": list(d.coverage) if d.coverage else None,
                "position": list(d.position) if d.position else None,
            }
            for d in sorted(tree.datacenters.values(), key=lambda d: (-d.level, poa_sort_key(d.id)))
        ],
        "links": [
            {"src": l.src, "dst": l.dst, "tau": l.tau, "bandwidth": l.bandwidth, "bw_cost": l.bw_cost}
            for l in tree.links.values()
        ],
    }


def dump_topology(tree: NetworkTree, path: str | Path) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(json.dumps(tree_to_dict(tree), indent=2, ensure_ascii=False), encoding="utf-8")
    return p


def iter_leaf_positions(tree: NetworkTree) -> Iterable[tuple[str, float, float]]:
    for leaf in tree.leaves:
        pos = tree.datacenters[leaf].position
        if pos is not None:
            yield leaf, pos[0], pos[1]
