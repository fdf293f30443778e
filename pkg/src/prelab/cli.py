"""Command-line entry point.

Exit codes: 0 success, 1 validation error, 2 runtime failure, 3 gradcheck failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .backbone import backbone_from_description
from .checkpoint import load_checkpoint
from .errors import ValidationError
from .gradcheck import run_gradcheck
from .interpret import nearest_words
from .prompt_encoder import reparameterize

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME, EXIT_GRADCHECK = 0, 1, 2, 3


def cmd_gen_data(args):
    from .config import load_task_spec
    from .synthetic import generate_synthetic_task, write_task

    out = write_task(generate_synthetic_task(load_task_spec(args.spec)), args.outdir)
    print(f"wrote synthetic task to {out}")
    return EXIT_OK


def cmd_train(args):
    from .config import load_experiment
    from .experiment import execute

    exp = load_experiment(args.config)
    result = execute(exp)
    r = result.row
    print(f"{r['run_id']}: base {float(r['base_acc']):.2f}  new {float(r['new_acc']):.2f}  "
          f"H {float(r['h_mean']):.2f}  final loss {float(r['final_loss']):.4f}")
    print(f"metrics: {exp.out_path / 'metrics.csv'}")
    print(f"checkpoint: {result.checkpoint}")
    return EXIT_OK


def cmd_eval(args):
    from .config import load_experiment
    from .experiment import evaluate_checkpoint

    m = evaluate_checkpoint(load_experiment(args.config), args.checkpoint)
    print(f"base {m.base_acc:.2f}  new {m.new_acc:.2f}  H {m.h_mean:.2f}")
    return EXIT_OK


def cmd_ablate(args):
    from .config import load_grid
    from .experiment import run_ablation_grid

    grid, base_exp, out = load_grid(args.grid)
    rows = run_ablation_grid(grid, base_exp, out)
    failed = sum(r["status"] != "ok" for r in rows)
    print(f"{len(rows)} cells ({failed} failed) -> {out}")
    return EXIT_OK


def cmd_interpret(args):
    prompt, encoder, meta = load_checkpoint(args.checkpoint)
    if not meta.get("backbone"):
        raise ValidationError(f"{args.checkpoint}: no backbone description, cannot recover the vocabulary")
    vocab = backbone_from_description(meta["backbone"]).vocab
    V = prompt.vectors
    for label, vectors in (("V", V), ("V~", reparameterize(encoder, V, training=False))):
        for line in nearest_words(vectors, vocab, n=args.top, metric=args.metric, label=label).lines():
            print(line)
    return EXIT_OK


def cmd_gradcheck(args):
    from .config import load_gradcheck

    report = run_gradcheck(load_gradcheck(args.config))
    for line in report.lines():
        print(line)
    return EXIT_OK if report.passed else EXIT_GRADCHECK


def build_parser():
    parser = argparse.ArgumentParser(prog="prelab", description="Reparameterized soft-prompt learning laboratory.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic few-shot task")
    p.add_argument("spec", type=Path)
    p.add_argument("outdir", type=Path)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train prompts and write metrics.csv + checkpoint")
    p.add_argument("config", type=Path)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on the task named by a config")
    p.add_argument("config", type=Path)
    p.add_argument("checkpoint", type=Path)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run an ablation grid")
    p.add_argument("grid", type=Path)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("interpret", help="nearest vocabulary words for a checkpoint's prompts")
    p.add_argument("checkpoint", type=Path)
    p.add_argument("--top", type=int, default=1)
    p.add_argument("--metric", choices=("euclidean", "cosine"), default="euclidean")
    p.set_defaults(func=cmd_interpret)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full loss")
    p.add_argument("config", type=Path)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
