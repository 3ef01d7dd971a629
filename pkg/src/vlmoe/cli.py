"""Command line entry point: ``vlmoe {train,ablate,simulate,report,selftest}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import harness
from .objectives import NonFiniteLoss

log = logging.getLogger("vlmoe")


def _spec_from_args(args) -> harness.ExperimentSpec:
    spec = harness.ExperimentSpec.load(args.config) if args.config else harness.ExperimentSpec()
    if args.seed is not None:
        spec.seeds = [args.seed]
    if args.steps is not None:
        spec.steps = args.steps
    if args.out is not None:
        spec.out = args.out
    if args.axis is not None:
        spec.axis = args.axis
    spec.validate()
    return spec


def selftest(verbose: bool = True) -> bool:
    """Fast sanity pass over gradients, routing invariants and dense equivalence."""
    from . import tensor as T
    from .gradcheck import check_gradients
    from .routing import assign_bpr, assign_vanilla, dispatch_combine, drop_stats
    from .tensor import Tensor

    rng = np.random.default_rng(0)
    results = []

    a = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    b = Tensor(rng.standard_normal((4, 2)), requires_grad=True)
    errs = check_gradients(lambda: T.tsum(T.gelu(T.matmul(a, b))), {"a": a, "b": b})
    results.append(("gradient: gelu(matmul)", max(errs.values()) < 1e-6))

    ok = True
    for _ in range(200):
        n, e = int(rng.integers(1, 30)), int(rng.integers(1, 6))
        g = Tensor(rng.dirichlet(np.ones(e), size=n))
        cap = int(rng.integers(1, n + 1))
        for plan in (assign_vanilla(g, 1, cap), assign_bpr(g, 1, cap)):
            st = drop_stats(plan)
            ok &= bool((plan.kept_counts() <= cap).all()) and st.kept_per_expert.sum() + st.dropped == n
    results.append(("routing: capacity and conservation", ok))

    x = Tensor(rng.standard_normal((5, 3)))
    experts = [(Tensor(rng.standard_normal((3, 6))), Tensor(rng.standard_normal((6, 3)))) for _ in range(3)]
    gates = T.softmax(Tensor(rng.standard_normal((5, 3))))
    plan = assign_vanilla(gates, 3, 5)
    dense = sum(gates.data[:, [i]] * (T.gelu(x @ w1) @ w2).data for i, (w1, w2) in enumerate(experts))
    results.append(("dense equivalence k=E", float(np.abs(dispatch_combine(x, plan, experts).data - dense).max()) < 1e-10))

    for name, passed in results:
        if verbose:
            print(f"{'PASS' if passed else 'FAIL'}  {name}")
    return all(passed for _, passed in results)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vlmoe", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=Path, help="experiment spec or model config (JSON)")
        p.add_argument("--seed", type=int)
        p.add_argument("--steps", type=int)
        p.add_argument("--out", type=str)
        p.add_argument("--axis", choices=sorted(harness.AXES))

    common(sub.add_parser("train", help="pretrain one or more cells"))
    common(sub.add_parser("ablate", help="sweep one axis and tabulate"))
    sim = sub.add_parser("simulate", help="replay routing logs through the expert-parallel model")
    sim.add_argument("run_dir", type=Path)
    sim.add_argument("--workers", type=int, default=4)
    sim.add_argument("--alpha", type=float, default=harness.DEFAULT_ALPHA)
    rep = sub.add_parser("report", help="routing breakdowns and drop profiles for a run")
    rep.add_argument("run_dir", type=Path)
    sub.add_parser("selftest", help="quick correctness checks")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        if args.command == "train":
            for result in harness.cmd_train(_spec_from_args(args)):
                print(json.dumps(harness.summarize_run(result)))
        elif args.command == "ablate":
            table = harness.cmd_ablate(_spec_from_args(args))
            print(harness.markdown_table(table), end="")
        elif args.command == "simulate":
            result = harness.cmd_simulate(args.run_dir, args.workers, args.alpha)
            for row in result["layers"]:
                m = row["metrics"]
                print(f"step {row['step']} {row['task']} {row['modality']} layer {row['layer']}: "
                      f"load ratio {m['load_ratio']:.3f}, step time {m['step_time']:.1f}")
        elif args.command == "report":
            report = harness.cmd_report(args.run_dir)
            print(f"report for step {report['last_step']} written to {args.run_dir / 'report'}")
        elif args.command == "selftest":
            return 0 if selftest() else 1
    except harness.SpecError as exc:
        log.error("invalid spec: %s", exc)
        return 2
    except FileNotFoundError as exc:
        log.error("%s", exc)
        return 2
    except NonFiniteLoss as exc:
        log.error("%s; diagnostics: %s", exc, json.dumps(exc.diagnostics))
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
