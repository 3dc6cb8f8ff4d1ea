"""``convbert`` command-line entry point.

Exit codes: 0 success, 1 verification failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from .bench import pin_allocator, scaling_rows
from .cost import count_flops, count_params
from .encoder import PRESETS, VARIANTS, ConvBertModel, param_shapes, preset
from .errors import ConvBertError, InputError
from .verify import grad_suite, grad_tolerance, oracle_suite

ORACLE_TOL = 1e-12
EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


def _cmd_count_params(args) -> int:
    report = count_params(preset(args.preset, args.variant))
    report.name = f"{args.preset}/{args.variant or PRESETS[args.preset].variant}"
    print(report.to_csv() if args.csv else report.to_text(), end="\n" if not args.csv else "")
    return EXIT_OK


def _cmd_count_flops(args) -> int:
    report = count_flops(preset(args.preset, args.variant), args.seq_len, args.batch)
    report.name = f"{args.preset}/n={args.seq_len}"
    print(report.to_csv() if args.csv else report.to_text(), end="\n" if not args.csv else "")
    return EXIT_OK


def _cmd_grad_check(args) -> int:
    tol = grad_tolerance(args.scope)
    results = grad_suite(args.scope, args.seed)
    ok = True
    for name, err in results.items():
        status = "ok" if err < tol else "FAIL"
        ok &= err < tol
        print(f"{name:<32} rel_err={err:.3e}  tol={tol:.0e}  {status}")
    return EXIT_OK if ok else EXIT_FAIL


def _cmd_oracle_check(args) -> int:
    results = oracle_suite(args.seed, args.instances)
    ok = True
    for name, err in results.items():
        status = "ok" if err < ORACLE_TOL else "FAIL"
        ok &= err < ORACLE_TOL
        print(f"{name:<20} max_abs_diff={err:.3e}  {status}")
    return EXIT_OK if ok else EXIT_FAIL


def _cmd_train(args) -> int:
    from .pretrain import read_corpus, train_loop
    from .serialization import load_config

    cfg = load_config(args.config)
    corpus = read_corpus(args.corpus)
    kw = dict(batch_size=args.batch_size, seq_len=args.seq_len, lr=args.lr, rtd_weight=args.rtd_weight,
              generator_size=args.generator_size, weight_decay=args.weight_decay)
    if args.warmup is not None:
        kw["warmup"] = args.warmup
    result = train_loop(cfg, corpus, args.objective, args.steps, args.seed, args.out, **kw)
    last = result.log[-1] if result.log else None
    if last:
        print(f"step {last['step']}  mlm_loss {last['mlm_loss']:.4f}  rtd_loss {last['rtd_loss']:.4f}  joint {last['joint_loss']:.4f}")
    print(f"wrote {Path(args.out) / 'metrics.csv'} and {Path(args.out) / 'model.ckpt'}")
    return EXIT_OK


def _cmd_dump_attention(args) -> int:
    """Header row of ``position:token`` labels, then the n x n query-by-key matrix."""
    from .attention import average_attention_map
    from .pretrain import Vocab
    from .serialization import load_checkpoint

    cfg, params, extras = load_checkpoint(args.checkpoint)
    if "vocab" not in extras:
        raise InputError(f"{args.checkpoint} carries no vocabulary")
    vocab = Vocab.from_string(extras["vocab"])
    tokens = ["[CLS]"] + args.text.lower().split() + ["[SEP]"]
    ids = [vocab.stoi.get(t, vocab.unk_id) for t in tokens]
    model = ConvBertModel(cfg, {name: params[name] for name, _ in param_shapes(cfg)})
    avg = average_attention_map(model, np.array(ids))
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"{j}:{t}" for j, t in enumerate(tokens)])
        for row in avg:
            w.writerow([repr(float(x)) for x in row])
    print(f"wrote {len(ids)}x{len(ids)} average attention map to {args.out}")
    return EXIT_OK


def _cmd_bench_scaling(args) -> int:
    try:
        lens = [int(s) for s in args.lens.split(",") if s.strip()]
    except ValueError:
        raise InputError(f"--lens expects comma-separated integers, got {args.lens!r}") from None
    if not lens or min(lens) < 1:
        raise InputError("--lens needs at least one positive length")
    pin_allocator()
    rows = scaling_rows(preset(args.preset), lens, batch=args.batch, repeats=args.repeats, seed=args.seed)
    print("n,component,seconds,madds")
    for r in rows:
        print(f"{r['n']},{r['component']},{r['seconds']:.6e},{r['madds']}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="convbert", description="ConvBERT accounting, verification and toy pretraining.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("count-params", help="parameter count per component")
    p.add_argument("--preset", required=True, choices=sorted(PRESETS))
    p.add_argument("--variant", choices=VARIANTS)
    p.add_argument("--csv", action="store_true", help="emit CSV instead of the indented report")
    p.set_defaults(func=_cmd_count_params)

    p = sub.add_parser("count-flops", help="multiply-adds of one forward pass per component")
    p.add_argument("--preset", required=True, choices=sorted(PRESETS))
    p.add_argument("--seq-len", required=True, type=int)
    p.add_argument("--variant", choices=VARIANTS)
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--csv", action="store_true")
    p.set_defaults(func=_cmd_count_flops)

    p = sub.add_parser("grad-check", help="finite-difference gradient suite")
    p.add_argument("--scope", required=True, choices=("op", "block", "model"))
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_grad_check)

    p = sub.add_parser("oracle-check", help="compare operators with naive-loop references")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--instances", type=int, default=50)
    p.set_defaults(func=_cmd_oracle_check)

    p = sub.add_parser("train", help="MLM or RTD pretraining on a text corpus")
    p.add_argument("--objective", required=True, choices=("mlm", "rtd"))
    p.add_argument("--corpus", required=True, help="UTF-8 text, one sequence per line")
    p.add_argument("--steps", required=True, type=int)
    p.add_argument("--config", required=True, help="config file or preset name")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--seq-len", type=int, default=16)
    p.add_argument("--lr", type=float, default=3e-4)
    p.add_argument("--warmup", type=int)
    p.add_argument("--rtd-weight", type=float, default=50.0)
    p.add_argument("--generator-size", type=float, default=0.25)
    p.add_argument("--weight-decay", type=float, default=0.0)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("dump-attention", help="average attention map of a checkpoint as CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--text", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_dump_attention)

    p = sub.add_parser("bench-scaling", help="per-component time and counted MAdds versus length")
    p.add_argument("--preset", required=True, choices=sorted(PRESETS))
    p.add_argument("--lens", default="32,64,128,256")
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_bench_scaling)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors, 0 on --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConvBertError, ValueError, OSError) as exc:
        print(f"convbert {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
