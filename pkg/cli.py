# cli.py
import argparse
import json
import logging
import sys
from pathlib import Path

from pydantic import ValidationError

from services.baselines import lp_export, lp_relaxation_bound
from services.config import DMP_OUT_DIR, load_scenario, setup_logging
from services.errors import DmpError, InfeasibleError
from services.mobility import write_trace
from services.placement_bu import dump_witness
from services.sim_harness import (
    ALGORITHMS,
    run_repetitions,
    snapshot_instance,
    sweep_capacity,
    synth_mobility,
    tree_from_config,
    write_results,
)
from services.topology import dump_topology

logger = logging.getLogger("cli")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_INFEASIBLE = 2


def _aug(value: str):
    if value.strip().lower() == "auto":
        return "auto"
    try:
        return float(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"aumento inválido: {value} (número >= 1 o 'auto')")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="escenario JSON")
    common.add_argument("--seed", type=int)
    common.add_argument("--period", type=float, help="periodo de decisión T en segundos")
    common.add_argument("--rt-ratio", type=float, dest="rt_ratio")
    common.add_argument("--aug", type=_aug, help="aumento de recursos R o 'auto'")
    common.add_argument("--out", default=DMP_OUT_DIR, help="directorio de salida")
    common.add_argument("--log-level", dest="log_level")

    parser = argparse.ArgumentParser(prog="dmp", description="Simulador de despliegue y migración de cadenas de servicio")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("build-topology", parents=[common], help="construye y vuelca la topología")
    sub.add_parser("gen-traces", parents=[common], help="genera una traza sintética")

    p_run = sub.add_parser("run", parents=[common], help="corre el bucle de decisión")
    p_run.add_argument("--algo", choices=sorted(ALGORITHMS), default="bupu")
    p_run.add_argument("--repetitions", type=int, default=1)

    p_sweep = sub.add_parser("sweep-capacity", parents=[common], help="menor C_cpu factible")
    p_sweep.add_argument("--algo", choices=sorted(ALGORITHMS), action="append")

    p_lp = sub.add_parser("export-lp", parents=[common], help="exporta la relajación lineal")
    p_lp.add_argument("--time", type=float, default=0.0, help="instante de la instancia")
    p_lp.add_argument("--solve", action="store_true", help="resuelve la relajación con CBC")
    return parser


def _config(args: argparse.Namespace):
    return load_scenario(
        args.config,
        seed=args.seed,
        period_s=args.period,
        rt_ratio=args.rt_ratio,
        augmentation=args.aug,
    )


# -------- subcomandos --------


def cmd_build_topology(args) -> int:
    tree = tree_from_config(_config(args))
    p = dump_topology(tree, Path(args.out) / "topology.json")
    print(f"{len(tree.datacenters)} datacenters, {len(tree.leaves)} PoAs -> {p}")
    return EXIT_OK


def cmd_gen_traces(args) -> int:
    p = write_trace(synth_mobility(_config(args)), Path(args.out) / "trace.csv")
    print(p)
    return EXIT_OK


def cmd_run(args) -> int:
    results = run_repetitions(_config(args), args.algo, max(1, args.repetitions))
    paths = write_results(results, args.out)
    for r in results:
        s = r.summary()
        print(f"{r.algo} rep={r.repetition}: costo total={s['total_cost']:.2f} infactibles={s['infeasible_decisions']}")
    print(paths["decisions"])
    return EXIT_OK if all(r.feasible for r in results) else EXIT_INFEASIBLE


def cmd_sweep_capacity(args) -> int:
    config = _config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for algo in args.algo or ["bupu"]:
        res = sweep_capacity(config, algo)
        res.frame().to_csv(out / f"sweep_{algo}.csv", index=False)
        rows.append({"algo": algo, "c_cpu": res.c_cpu})
        print(f"{algo}: C_cpu mínimo = {res.c_cpu}")
    (out / "sweep.json").write_text(json.dumps(rows, indent=2), encoding="utf-8")
    return EXIT_OK


def cmd_export_lp(args) -> int:
    snap = snapshot_instance(_config(args), args.time)
    p = lp_export(snap.tree, snap.chains, snap.feasible_sets, snap.params, Path(args.out) / "dmp.lp")
    print(p)
    if args.solve:
        status, bound = lp_relaxation_bound(snap.tree, snap.chains, snap.feasible_sets, snap.params)
        print(f"relajación: {status} cota={bound}")
        if status != "Optimal":
            return EXIT_INFEASIBLE
    return EXIT_OK


COMMANDS = {
    "build-topology": cmd_build_topology,
    "gen-traces": cmd_gen_traces,
    "run": cmd_run,
    "sweep-capacity": cmd_sweep_capacity,
    "export-lp": cmd_export_lp,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level)
    try:
        return COMMANDS[args.command](args)
    except InfeasibleError as e:
        logger.error(e.detail)
        if e.witness is not None:
            dump_witness(e.witness, Path(args.out) / "witness.json")
        return EXIT_INFEASIBLE
    except DmpError as e:
        logger.error(e.detail)
        return EXIT_ERROR
    except ValidationError as e:
        logger.error("escenario inválido: %s", e)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
