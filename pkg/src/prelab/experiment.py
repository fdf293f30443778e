"""Single runs and ablation grids, with CSV output."""

from __future__ import annotations

import csv
import dataclasses
import io
import os
import traceback
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ValidationError
from .synthetic import load_task
from .train import evaluate_base_to_new, sample_k_shot, train_prompts

METRIC_FIELDS = ["run_id", "arch", "residual", "sharing", "M", "K", "seed",
                 "base_acc", "new_acc", "h_mean", "final_loss"]
GRID_FIELDS = METRIC_FIELDS + ["status"]


@dataclass
class RunResult:
    row: dict
    metrics: object
    checkpoint: Path | None
    prompt: object = None
    encoder: object = None


def _fmt(x):
    # repr gives the shortest string that round-trips, so rows are bit-faithful
    return repr(float(x))


def metrics_row(run_id, cfg, metrics):
    enc = cfg.encoder
    return {
        "run_id": run_id, "arch": enc.architecture, "residual": str(enc.residual).lower(),
        "sharing": enc.sharing, "M": cfg.M, "K": cfg.K, "seed": cfg.seed,
        "base_acc": _fmt(metrics.base_acc), "new_acc": _fmt(metrics.new_acc),
        "h_mean": _fmt(metrics.h_mean), "final_loss": _fmt(metrics.final_loss),
    }


def rows_to_csv(rows, fields=METRIC_FIELDS):
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow(row)
    return buf.getvalue()


def write_csv(path, rows, fields=METRIC_FIELDS):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(rows_to_csv(rows, fields), encoding="utf-8")
    return path


def execute(exp, task=None, backbone=None, write=True):
    """Ingest, sample K shots, train, evaluate, and (optionally) write CSV + checkpoint."""
    cfg = exp.train
    if task is None:
        task, backbone = load_task(exp.data_path)
    if cfg.M != 4 and cfg.init == "template":
        raise ValidationError(f"template init needs M=4, got M={cfg.M}; use 'padded' or 'gaussian'")
    shots = sample_k_shot(task.store, task.train_items, task.base, cfg.K, cfg.seed)
    few = task.with_train_items(shots)
    prompt, encoder, history = train_prompts(few, cfg, backbone)
    metrics = evaluate_base_to_new(prompt, encoder, few, backbone, cfg.tau, history)
    row = metrics_row(exp.run_id, cfg, metrics)
    ckpt = None
    if write:
        out = exp.out_path
        write_csv(out / "metrics.csv", [row])
        ckpt = save_checkpoint(out / "checkpoint.json", prompt, encoder, cfg.tau, backbone=backbone,
                               seed=cfg.seed, run_config=exp.to_dict())
    return RunResult(row, metrics, ckpt, prompt, encoder)


def run_experiment(config_path):
    from .config import load_experiment

    return execute(load_experiment(config_path))


def evaluate_checkpoint(exp, checkpoint_path):
    task, backbone = load_task(exp.data_path)
    prompt, encoder, meta = load_checkpoint(checkpoint_path, expect_d=backbone.d)
    return evaluate_base_to_new(prompt, encoder, task, backbone, meta["tau"])


def cell_config(base_exp, cell, index):
    arch, residual, sharing, M, K, seed = cell
    train = base_exp.train
    init = train.init
    if init == "template" and M != 4:
        init = "padded"
    enc = dataclasses.replace(train.encoder, architecture=arch, residual=residual, sharing=sharing, seed=seed)
    new_train = dataclasses.replace(train, M=M, K=K, seed=seed, init=init, encoder=enc)
    run_id = f"cell{index:03d}"
    return dataclasses.replace(base_exp, train=new_train, run_id=run_id,
                               out_dir=str(Path(base_exp.out_dir) / run_id))


def _run_cell(base_exp, cell, index, task, backbone):
    arch, residual, sharing, M, K, seed = cell
    try:
        exp = cell_config(base_exp, cell, index)
        result = execute(exp, task, backbone, write=False)
        return dict(result.row, status="ok")
    except Exception as exc:  # fail-soft: one cell must not sink the sweep
        detail = "".join(traceback.format_exception_only(type(exc), exc)).strip().replace("\n", " ")
        row = {k: "" for k in GRID_FIELDS}
        row.update(run_id=f"cell{index:03d}", arch=arch, residual=str(residual).lower(), sharing=sharing,
                   M=M, K=K, seed=seed, status=f"error: {detail}")
        return row


def thread_count(env=None):
    env = os.environ if env is None else env
    raw = env.get("PRE_LAB_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValidationError(f"PRE_LAB_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ValidationError(f"PRE_LAB_THREADS must be >= 1, got {n}")
    return n


def run_ablation_grid(grid, base_exp, out_path=None, threads=None):
    """One row per cell, in cell order, whatever order the cells finish in."""
    task, backbone = load_task(base_exp.data_path)
    cells = grid.cells()
    threads = thread_count() if threads is None else threads
    if threads == 1:
        rows = [_run_cell(base_exp, c, i, task, backbone) for i, c in enumerate(cells)]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            futures = [pool.submit(_run_cell, base_exp, c, i, task, backbone) for i, c in enumerate(cells)]
            rows = [f.result() for f in futures]
    if out_path is not None:
        write_csv(out_path, rows, GRID_FIELDS)
    return rows

