"""End-to-end gradient verification of the prompt-learning loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tape, Tensor
from .coop_reference import coop_loss_and_grad
from .errors import ValidationError
from .numerics import finite_diff_check
from .prompt_encoder import EncoderConfig, PromptEncoder, init_prompts
from .synthetic import SyntheticTaskSpec, generate_synthetic_task
from .train import batch_loss
from .rng import stream


@dataclass(frozen=True)
class GradCheckConfig:
    d: int = 8
    M: int = 4
    C: int = 4
    layers: int = 2
    heads: int = 2
    seed: int = 0
    eps: float = 1e-4
    tau: float = 0.01
    batch: int = 8
    architectures: tuple = ("bilstm", "mlp", "transformer")
    sharing: str = "shared"
    residual: bool = True
    dropout_in_check: bool = False
    param_std: float = 0.3
    tolerance: float = 1e-4
    coop_tolerance: float = 1e-12

    def __post_init__(self):
        object.__setattr__(self, "architectures", tuple(self.architectures))


@dataclass
class GradCheckReport:
    errors: dict
    coop_mismatch: float
    tolerance: float
    coop_tolerance: float

    @property
    def passed(self):
        return all(e < self.tolerance for e in self.errors.values()) and self.coop_mismatch < self.coop_tolerance

    def lines(self):
        out = [f"{name:40s} {err:.3e} {'ok' if err < self.tolerance else 'FAIL'}" for name, err in self.errors.items()]
        ok = "ok" if self.coop_mismatch < self.coop_tolerance else "FAIL"
        out.append(f"{'none/prompt vs hand-derived CoOp':40s} {self.coop_mismatch:.3e} {ok}")
        return out


def _problem(cfg):
    synth = generate_synthetic_task(SyntheticTaskSpec(
        C=cfg.C, d=cfg.d, K=2, test_per_class=max(1, -(-cfg.batch // cfg.C)), noise_sigma=0.3,
        M=cfg.M, layers=cfg.layers, heads=cfg.heads, backbone_seed=cfg.seed,
        oracle_prompt_seed=cfg.seed, dataset_seed=cfg.seed))
    task = synth.task
    items = task.test_items[:cfg.batch]
    feats = task.store.matrix(items)
    labels = np.array([task.store.labels[i] for i in items])
    return synth.backbone, task.class_names, feats, labels


def _randomize(encoder, rng, std):
    """Move encoder parameters to a generic point so no gradient is trivially tiny."""
    for name, t in encoder.named_parameters():
        noise = rng.normal(0.0, std, size=t.shape)
        t.data = 1.0 + noise if name.endswith(".g") else noise


def check_architecture(cfg, arch, backbone, names, feats, labels):
    enc_cfg = EncoderConfig(architecture=arch, residual=cfg.residual, sharing=cfg.sharing,
                            dropout=0.0, heads=cfg.heads, seed=cfg.seed)
    encoder = PromptEncoder(enc_cfg, cfg.d, cfg.M)
    _randomize(encoder, stream(cfg.seed, "gradcheck"), cfg.param_std)
    prompt = init_prompts("gaussian", cfg.M, backbone.vocab, seed=cfg.seed)
    prompt.vectors.data = prompt.vectors.data * (cfg.param_std / 0.02)

    def loss_of_prompt(v):
        return batch_loss(backbone, encoder, v, names, feats, labels, cfg.tau, training=False)

    errors = {f"{arch}/prompt": finite_diff_check(loss_of_prompt, prompt.vectors, cfg.eps)}
    for pset_index, pset in enumerate(encoder.param_sets):
        for key in list(pset):
            original = pset[key]

            def loss_of_param(p, pset=pset, key=key):
                saved = pset[key]
                pset[key] = p
                try:
                    return batch_loss(backbone, encoder, prompt.vectors, names, feats, labels, cfg.tau, training=False)
                finally:
                    pset[key] = saved

            label = key if len(encoder.param_sets) == 1 else f"{pset_index}.{key}"
            errors[f"{arch}/{label}"] = finite_diff_check(loss_of_param, original, cfg.eps)
    return errors


def coop_mismatch(cfg, backbone, names, feats, labels):
    """Relative max difference between tape and hand-derived gradients for the plain-prompt model."""
    encoder = PromptEncoder(EncoderConfig(architecture="none"), cfg.d, cfg.M)
    prompt = init_prompts("template" if cfg.M == 4 else "gaussian", cfg.M, backbone.vocab, seed=cfg.seed)
    with Tape() as tape:
        loss = batch_loss(backbone, encoder, prompt, names, feats, labels, cfg.tau, training=False)
    (tape_grad,) = tape.gradient(loss, [prompt.vectors])
    _, hand_grad = coop_loss_and_grad(backbone, prompt.vectors.data, names, feats, labels, cfg.tau)
    return float(np.max(np.abs(tape_grad - hand_grad)) / max(np.max(np.abs(hand_grad)), 1e-300))


def run_gradcheck(cfg):
    if cfg.dropout_in_check:
        raise ValidationError("refusing to gradient-check with dropout on: the graph is not deterministic")
    backbone, names, feats, labels = _problem(cfg)
    errors = {}
    for arch in cfg.architectures:
        if arch == "none":
            continue
        errors.update(check_architecture(cfg, arch, backbone, names, feats, labels))
    return GradCheckReport(errors, coop_mismatch(cfg, backbone, names, feats, labels),
                           cfg.tolerance, cfg.coop_tolerance)
