"""Synthetic few-shot tasks with a hidden oracle prompt.

Class prototypes are the frozen text encoder's outputs for ``[p*, class]``
where ``p*`` is a secret prompt; image features are noisy prototypes. A model
that recovers a prompt as good as ``p*`` classifies perfectly at zero noise,
so base-to-new generalization is measurable without real data.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .backbone import DEFAULT_CLASS_NAMES, ImageFeatureStore, backbone_from_description, init_backbone
from .errors import ValidationError
from .train import FewShotTask, build_class_weights, split_base_new
from .rng import stream

TASK_FILE = "task.json"
FEATURES_FILE = "features.csv"
ORACLE_FILE = "oracle.json"


@dataclass(frozen=True)
class SyntheticTaskSpec:
    C: int = 10
    d: int = 32
    K: int = 16
    test_per_class: int = 50
    noise_sigma: float = 0.1
    oracle_prompt_seed: int = 0
    backbone_seed: int = 0
    dataset_seed: int = 0
    M: int = 4
    layers: int = 2
    heads: int = 2
    vocab_size: int | None = None
    train_per_class: int | None = None
    oracle_std: float = 0.02
    max_context: int = 16

    def __post_init__(self):
        bad = []
        if self.C < 2:
            bad.append("C")
        if self.noise_sigma < 0:
            bad.append("noise_sigma")
        for name in ("d", "K", "test_per_class", "M", "layers", "heads", "max_context"):
            if getattr(self, name) < 1:
                bad.append(name)
        if self.train_per_class is not None and self.train_per_class < 1:
            bad.append("train_per_class")
        if not self.oracle_std > 0:
            bad.append("oracle_std")
        if bad:
            raise ValidationError(f"invalid synthetic task fields: {', '.join(bad)}")


def class_names_for(C):
    if C <= len(DEFAULT_CLASS_NAMES):
        return list(DEFAULT_CLASS_NAMES[:C])
    return [f"class{i:03d}" for i in range(C)]


@dataclass
class SyntheticTask:
    task: FewShotTask
    backbone: object
    oracle_prompt: np.ndarray
    spec: SyntheticTaskSpec


def generate_synthetic_task(spec):
    """Build the backbone, the oracle prompt, and a noisy feature store."""
    names = class_names_for(spec.C)
    backbone = init_backbone(spec.backbone_seed, d=spec.d, layers=spec.layers, heads=spec.heads,
                             vocab_size=spec.vocab_size, class_names=names, max_context=spec.max_context)
    oracle = stream(spec.oracle_prompt_seed, "oracle").normal(0.0, spec.oracle_std, size=(spec.M, spec.d))
    prototypes = build_class_weights(backbone, None, oracle, names).data

    rng = stream(spec.dataset_seed, "dataset")
    base, new = split_base_new(spec.C)
    store = ImageFeatureStore(d=spec.d, n_classes=spec.C)
    n_train = spec.train_per_class or spec.K
    train, test = [], []
    for c in base:
        for j in range(n_train):
            item = f"tr{c:03d}_{j:03d}"
            store.add(item, prototypes[c] + rng.normal(0.0, spec.noise_sigma, spec.d), c, "train")
            train.append(item)
    for c in range(spec.C):
        for j in range(spec.test_per_class):
            item = f"te{c:03d}_{j:03d}"
            store.add(item, prototypes[c] + rng.normal(0.0, spec.noise_sigma, spec.d), c, "test")
            test.append(item)
    task = FewShotTask(names, base, new, train, test, store)
    return SyntheticTask(task=task, backbone=backbone, oracle_prompt=oracle, spec=spec)


def write_task(synth, outdir):
    """Write task.json, features.csv and the diagnostics-only oracle.json."""
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    t = synth.task
    meta = {
        "class_names": t.class_names,
        "base": t.base,
        "new": t.new,
        "backbone": synth.backbone.describe(),
        "spec": asdict(synth.spec),
    }
    (out / TASK_FILE).write_text(json.dumps(meta, indent=1), encoding="utf-8")
    t.store.to_csv(out / FEATURES_FILE)
    (out / ORACLE_FILE).write_text(json.dumps({"oracle_prompt": synth.oracle_prompt.tolist()}), encoding="utf-8")
    return out


def load_task(datadir):
    """Read a task directory back. The oracle file is never opened here."""
    d = Path(datadir)
    try:
        meta = json.loads((d / TASK_FILE).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ValidationError(f"missing dataset file {d / TASK_FILE}") from None
    if not (d / FEATURES_FILE).exists():
        raise ValidationError(f"missing dataset file {d / FEATURES_FILE}")
    names = meta["class_names"]
    store = ImageFeatureStore.from_csv(d / FEATURES_FILE, n_classes=len(names))
    backbone = backbone_from_description(meta["backbone"])
    task = FewShotTask(names, meta["base"], meta["new"], store.items("train"), store.items("test"), store)
    return task, backbone


def load_oracle(datadir):
    return np.array(json.loads((Path(datadir) / ORACLE_FILE).read_text(encoding="utf-8"))["oracle_prompt"])
