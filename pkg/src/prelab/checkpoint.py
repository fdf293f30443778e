"""JSON checkpoints of the trained prompt and encoder.

Floats are written with Python's shortest round-trip repr, so a save/load
cycle restores every float64 bit for bit.
"""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .errors import CheckpointError, ValidationError
from .prompt_encoder import EncoderConfig, PromptContext, PromptEncoder

FORMAT = "prelab-checkpoint"
VERSION = 1


def save_checkpoint(path, prompt, encoder, tau, backbone=None, seed=None, run_config=None):
    state = {
        "format": FORMAT,
        "version": VERSION,
        "config": {"encoder": encoder.config.to_dict(), "M": prompt.M, "d": prompt.d, "tau": tau},
        "promptVectors": prompt.vectors.data.tolist(),
        "encoderParams": {name: t.data.tolist() for name, t in encoder.named_parameters()},
    }
    if run_config is not None:
        state["config"]["run"] = run_config
    if seed is not None:
        state["seed"] = seed
    if backbone is not None:
        state["backbone"] = backbone.describe()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # write-then-rename so a crash never leaves a half-written checkpoint behind
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    with os.fdopen(fd, "w", encoding="utf-8") as fh:
        json.dump(state, fh)
    os.replace(tmp, path)
    return path


def load_checkpoint(path, expect_d=None):
    """Return ``(prompt, encoder, meta)``; raises :class:`CheckpointError` on any defect."""
    try:
        state = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}") from None
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"corrupt or truncated checkpoint {path}: {exc}") from None
    if not isinstance(state, dict) or state.get("format") != FORMAT:
        raise CheckpointError(f"{path}: not a {FORMAT} file")
    if state.get("version") != VERSION:
        raise CheckpointError(f"{path}: checkpoint version {state.get('version')} != supported {VERSION}")
    try:
        cfg = state["config"]
        M, d = int(cfg["M"]), int(cfg["d"])
        if expect_d is not None and d != expect_d:
            raise CheckpointError(f"{path}: checkpoint width d={d} does not match backbone width {expect_d}")
        vectors = np.array(state["promptVectors"], dtype=np.float64)
        if vectors.shape != (M, d):
            raise CheckpointError(f"{path}: prompt shape {vectors.shape} != ({M}, {d})")
        encoder = PromptEncoder(EncoderConfig(**cfg["encoder"]), d, M)
        encoder.load_parameters({k: np.array(v, dtype=np.float64) for k, v in state["encoderParams"].items()})
    except CheckpointError:
        raise
    except (KeyError, TypeError, ValueError, ValidationError) as exc:
        raise CheckpointError(f"{path}: invalid checkpoint contents ({exc})") from None
    prompt = PromptContext(Tensor(vectors, requires_grad=True, name="prompt"))
    meta = {"tau": float(cfg.get("tau", 0.01)), "seed": state.get("seed"), "backbone": state.get("backbone"),
            "run": cfg.get("run")}
    return prompt, encoder, meta
