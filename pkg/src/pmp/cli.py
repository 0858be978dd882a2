"""Command-line entry point: ``pmp {gen-data,train,eval,grad-check,noise-sweep,ablate}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time

from . import harness
from .config import RunConfig
from .data import save_dataset
from .tasks.generate import DEFAULTS, make_dataset


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x]


def _ints(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x]


def _task_params(args) -> dict:
    keys = DEFAULTS[args.task]
    return {k: getattr(args, k) for k in keys if getattr(args, k, None) is not None}


def cmd_gen_data(args) -> int:
    examples, params = make_dataset(args.task, args.seed, **_task_params(args))
    save_dataset(args.out, examples, args.task, params)
    print(f"wrote {len(examples)} record(s) to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = RunConfig.load(args.config)
    res = harness.train(cfg, args.data, args.out, resume=args.resume)
    print(json.dumps({"best_epoch": res.best_epoch, "best_val_accuracy": res.best_val_accuracy,
                      "metrics": str(res.metrics_path), "checkpoint": str(res.best_checkpoint)}))
    return 0


def cmd_eval(args) -> int:
    print(json.dumps(harness.evaluate(args.ckpt, args.data, args.samples, args.split), sort_keys=True))
    return 0


def cmd_grad_check(args) -> int:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    t0 = time.perf_counter()
    reports = harness.run_grad_check(cfg, kinds=args.kinds.split(","))
    ok = True
    for kind, rep in reports.items():
        status = "PASS" if rep.passed(args.threshold) else "FAIL"
        ok &= rep.passed(args.threshold)
        print(f"[{status}] {kind}: worst relative error {rep.worst:.3e}")
        for line in rep.lines():
            print("    " + line)
    print(f"elapsed {time.perf_counter() - t0:.1f}s")
    return 0 if ok else 1


def cmd_noise_sweep(args) -> int:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    community = {k: v for k, v in {"n_nodes": args.n_nodes, "n_communities": args.n_communities}.items()
                 if v is not None}
    rows = harness.noise_sweep(cfg, _floats(args.ratios), _ints(args.seeds), args.out, **community)
    for row in rows:
        print(f"seed={row['seed']} ratio={row['ratio']:g} model={row['model']} acc={row['test_accuracy']:.4f}")
    return 0


def cmd_ablate(args) -> int:
    cfg = RunConfig.load(args.config)
    rows = harness.ablation(cfg, args.data, args.out, _ints(args.Ks), _ints(args.Ts))
    for row in rows:
        print(f"{row['axis']}={row['value']} acc={row['test_accuracy']:.4f} tau={row['kendall_tau']}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pmp", description="Policy message passing on graphs")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--task", choices=sorted(DEFAULTS), required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    for task_defaults in DEFAULTS.values():
        for key, val in task_defaults.items():
            flag = "--" + key.replace("_", "-")
            if flag not in g._option_string_actions:
                g.add_argument(flag, dest=key, type=type(val), default=None)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--resume", action="store_true", help="continue from OUT/last.ckpt")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--samples", type=int, default=None)
    e.add_argument("--split", default="test", choices=["train", "val", "test"])
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("grad-check", help="finite-difference gradient verification")
    c.add_argument("--config", default=None)
    c.add_argument("--kinds", default="pmp,gnn-mean,gnn-attention")
    c.add_argument("--threshold", type=float, default=1e-4)
    c.set_defaults(func=cmd_grad_check)

    n = sub.add_parser("noise-sweep", help="noisy-edge robustness on the community graph")
    n.add_argument("--ratios", default="0.5,1.0,2.0")
    n.add_argument("--seeds", default="0,1,2")
    n.add_argument("--config", default=None)
    n.add_argument("--out", required=True)
    n.add_argument("--n-nodes", dest="n_nodes", type=int, default=None)
    n.add_argument("--n-communities", dest="n_communities", type=int, default=None)
    n.set_defaults(func=cmd_noise_sweep)

    a = sub.add_parser("ablate", help="accuracy versus K and T")
    a.add_argument("--config", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--Ks", default="1,2,3,4")
    a.add_argument("--Ts", default="")
    a.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError, harness.TrainingAborted) as exc:
        print(f"pmp: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
