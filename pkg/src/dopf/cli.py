"""Command line entry point ``dopf``.

::

    dopf case build --template A --horizon T1 --seed 7 --out case.json
    dopf aggregator --case case.json --bind 0.0.0.0:7401 --eps-abs 1e-4
    dopf agent --server HOST:7401 --prosumer-id 3 --case case.json
    dopf sweep tolerance|mix|size --case A --out results/
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .admm import CONVERGED, AdmmConfig
from .cases import build_case, problem_size
from .model import CaseError, load_case, save_case

log = logging.getLogger("dopf")


def _horizon(text):
    return int(text) if text.isdigit() else text


def _floats(text):
    return tuple(float(v) for v in text.split(",") if v)


def _pairs(text):
    out = []
    for item in text.split(";"):
        if item:
            d, v = item.split(",")
            out.append((float(d), float(v)))
    return tuple(out)


def cmd_case_build(args) -> int:
    case = build_case(args.template, _horizon(args.horizon), args.seed, identical=args.identical)
    save_case(case, args.out)
    print(json.dumps({"case": case.name, "out": args.out, **problem_size(case)}))
    return 0


def cmd_aggregator(args) -> int:
    from .runtime.aggregator import aggregator_serve

    case = load_case(args.case)
    cfg = AdmmConfig(eps_abs=args.eps_abs, k_max=args.k_max)

    def progress(rec):
        log.info("k=%d r=%.3e s=%.3e rho=%.3g", rec.k, rec.r_norm, rec.s_norm, rec.rho)

    handle = aggregator_serve(args.bind, case, cfg, callback=progress)
    print(f"aggregator listening on {handle.address[0]}:{handle.address[1]}", flush=True)
    res = handle.wait()
    print(json.dumps({"status": res.status, "iterations": res.iterations,
                      "objective": res.objective, "message": res.message}))
    if args.history and res.history:
        from .admm import write_history_csv

        write_history_csv(res.history, args.history)
    return 0 if res.status == CONVERGED else 1


def cmd_agent(args) -> int:
    from .runtime.agent import agent_run
    from .runtime.transport import parse_addr

    case = load_case(args.case)
    h = args.prosumer_id
    if not 0 <= h < case.n_prosumers:
        print(f"prosumer id {h} out of range 0..{case.n_prosumers - 1}", file=sys.stderr)
        return 2
    return agent_run(parse_addr(args.server), case.prosumers[h], case.horizon, case.tariff,
                     agent_id=h, s_base=case.s_base)


def cmd_sweep(args) -> int:
    from .harness import SweepError, SweepSpec, emit_report, run_sweep

    grid = None
    if args.grid:
        grid = _pairs(args.grid) if args.kind == "mix" else _floats(args.grid)
        if args.kind == "size":
            grid = tuple(int(g) for g in grid)
    spec = SweepSpec(kind=args.kind, case=args.case, horizon=_horizon(args.horizon),
                     grid=grid, seed=args.seed, eps_abs=args.eps_abs, backend=args.backend,
                     identical=args.identical, k_max=args.k_max,
                     central=not args.no_central, latency_ms=args.latency_ms, loss=args.loss)
    try:
        result = run_sweep(spec)
        failed = result.failed
    except SweepError as e:
        log.error("%s", e)
        result, failed = e.partial, True
    for path in emit_report(result, args.out):
        print(path)
    for row in result.rows:
        print(f"{row.point}: {row.status} k={row.iterations} gap={row.gap_pct:.3g}% "
              f"r_max={row.r_max_w:.3g} W")
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dopf", description="Distributed AC OPF with prosumers.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    case = sub.add_parser("case", help="case files").add_subparsers(dest="action", required=True)
    b = case.add_parser("build", help="build a case from a template")
    b.add_argument("--template", required=True, help="A, B or minimal-k")
    b.add_argument("--horizon", default="T1", help="T1, T2 or a step count")
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--identical", action="store_true", help="identical prosumer profiles")
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_case_build)

    a = sub.add_parser("aggregator", help="run the aggregator (UDP server)")
    a.add_argument("--case", required=True)
    a.add_argument("--bind", default="0.0.0.0:7401")
    a.add_argument("--eps-abs", type=float, default=1e-4)
    a.add_argument("--k-max", type=int, default=500)
    a.add_argument("--history", help="write the iteration history CSV here")
    a.set_defaults(func=cmd_aggregator)

    g = sub.add_parser("agent", help="run one prosumer agent (UDP client)")
    g.add_argument("--server", required=True, help="HOST:PORT of the aggregator")
    g.add_argument("--prosumer-id", type=int, required=True)
    g.add_argument("--case", required=True)
    g.set_defaults(func=cmd_agent)

    s = sub.add_parser("sweep", help="run an experiment sweep")
    s.add_argument("kind", choices=("tolerance", "mix", "size"))
    s.add_argument("--case", default="A", help="template name or case JSON path")
    s.add_argument("--horizon", default="T1")
    s.add_argument("--seed", type=int, default=7)
    s.add_argument("--grid", help="tolerances or sizes as 'a,b,c'; mix as 'd,pv;d,pv'")
    s.add_argument("--eps-abs", type=float, default=1e-4)
    s.add_argument("--k-max", type=int, default=500)
    s.add_argument("--backend", choices=("in-process", "remote"), default="in-process")
    s.add_argument("--identical", action="store_true")
    s.add_argument("--no-central", action="store_true", help="skip the centralized oracle")
    s.add_argument("--latency-ms", type=float, default=0.0, help="one-way latency (remote)")
    s.add_argument("--loss", type=float, default=0.0, help="frame loss probability (remote)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sweep)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CaseError, ValueError, OSError) as e:
        print(f"dopf: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
