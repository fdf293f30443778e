"""Class-weight assembly, SGD training of prompts, and base-to-new evaluation."""

from __future__ import annotations

import hashlib
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .backbone import TEMPLATE_WORDS, embed_tokens, encode_text, tokenize
from .errors import ValidationError
from .numerics import LrSchedule, class_probs, cosine_anneal_rate, cross_entropy_loss
from .prompt_encoder import EncoderConfig, PromptContext, PromptEncoder, init_prompts, reparameterize
from .rng import stream


class ShortfallWarning(UserWarning):
    """A base class had fewer than K items available."""


@dataclass
class FewShotTask:
    class_names: list
    base: list
    new: list
    train_items: list
    test_items: list
    store: object

    def __post_init__(self):
        C = len(self.class_names)
        if set(self.base) & set(self.new):
            raise ValidationError("base and new classes overlap")
        if set(self.base) | set(self.new) != set(range(C)):
            raise ValidationError("base and new classes must cover every class")
        bad = [i for i in self.train_items if self.store.labels[i] not in set(self.base)]
        if bad:
            raise ValidationError(f"training items from non-base classes: {bad[:5]}")

    def with_train_items(self, items):
        return FewShotTask(self.class_names, self.base, self.new, list(items), self.test_items, self.store)


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    lr0: float = 0.002
    lr_min: float = 0.0
    momentum: float = 0.0
    weight_decay: float = 0.0
    seed: int = 1
    M: int = 4
    K: int = 16
    tau: float = 0.01
    init: str = "template"
    encoder: EncoderConfig = field(default_factory=EncoderConfig)

    def __post_init__(self):
        if isinstance(self.encoder, dict):
            self.encoder = EncoderConfig(**self.encoder)
        bad = [n for n in ("epochs", "batch_size", "M", "K") if getattr(self, n) < 1]
        bad += [n for n in ("lr0", "tau") if not getattr(self, n) > 0]
        bad += [n for n in ("lr_min", "momentum", "weight_decay") if getattr(self, n) < 0]
        if bad:
            raise ValidationError(f"invalid training config fields: {', '.join(bad)}")

    def schedule(self, n_train):
        steps = self.epochs * math.ceil(n_train / self.batch_size)
        return LrSchedule(eta0=self.lr0, total_steps=steps, eta_min=self.lr_min)


@dataclass
class RunMetrics:
    loss_history: list
    step_losses: list
    checksum: str
    base_acc: float | None = None
    new_acc: float | None = None
    h_mean: float | None = None

    @property
    def final_loss(self):
        return self.loss_history[-1] if self.loss_history else float("nan")


def params_checksum(prompt, encoder):
    h = hashlib.sha256()
    h.update(prompt.vectors.data.tobytes())
    for name, t in encoder.named_parameters():
        h.update(name.encode())
        h.update(t.data.tobytes())
    return h.hexdigest()


def _class_sequences(backbone, class_names):
    groups = {}
    for i, name in enumerate(class_names):
        groups.setdefault(len(tokenize(name)), []).append(i)
    return groups


def build_class_weights(backbone, encoder, prompt, class_names, training=False):
    """Text-encoder outputs of ``[F(V), class tokens]`` for each class, a (C, d) tensor."""
    V = prompt.vectors if isinstance(prompt, PromptContext) else ad.as_tensor(prompt)
    Vt = reparameterize(encoder, V, training) if encoder is not None else V
    M, d = Vt.shape
    order, blocks = [], []
    for k, idx in _class_sequences(backbone, class_names).items():
        names = [class_names[i] for i in idx]
        cls = np.stack([embed_tokens(backbone.vocab, tokenize(n)).data for n in names])
        ctx = ad.broadcast_to(ad.reshape(Vt, (1, M, d)), (len(idx), M, d))
        blocks.append(encode_text(backbone.text, ad.concat([ctx, Tensor(cls)], axis=1)))
        order.extend(idx)
    W = blocks[0] if len(blocks) == 1 else ad.concat(blocks, axis=0)
    if order != sorted(order):
        W = W[np.argsort(order)]
    return W


def zero_shot_weights(backbone, class_names, template=TEMPLATE_WORDS):
    """Hand-crafted prompt weights: encode "a photo of a <class>" per class.

    Classes with equal token counts are encoded as one batch, exactly as the
    learned-prompt path does, so the two agree bit for bit on the template.
    """
    rows = {}
    for idx in _class_sequences(backbone, class_names).values():
        seqs = np.stack([embed_tokens(backbone.vocab, list(template) + tokenize(class_names[i])).data for i in idx])
        for i, w in zip(idx, encode_text(backbone.text, seqs).data):
            rows[i] = w
    return np.stack([rows[i] for i in range(len(class_names))])


def predict(weights, f, tau):
    """Class probabilities and argmax for one unit-norm image feature."""
    W = weights.data if isinstance(weights, Tensor) else np.asarray(weights)
    sims = W @ np.asarray(f, dtype=np.float64)
    probs = class_probs(sims, tau).data
    return probs, int(np.argmax(probs))


def split_base_new(C):
    """First ceil(C/2) classes are base, the rest new."""
    if C < 2:
        raise ValidationError(f"need at least two classes to split, got {C}")
    n_base = (C + 1) // 2
    return list(range(n_base)), list(range(n_base, C))


def sample_k_shot(store, item_ids, base_classes, K, seed):
    """K items per base class without replacement (all of them when fewer exist)."""
    if K < 1:
        raise ValidationError(f"K must be >= 1, got {K}")
    rng = stream(seed, "kshot")
    chosen = []
    for c in base_classes:
        pool = [i for i in item_ids if store.labels[i] == c]
        if not pool:
            raise ValidationError(f"base class {c} has no training items")
        if len(pool) < K:
            warnings.warn(f"class {c}: only {len(pool)} of {K} shots available", ShortfallWarning, stacklevel=2)
        picks = rng.choice(len(pool), size=min(K, len(pool)), replace=False)
        chosen.extend(pool[j] for j in sorted(picks))
    return chosen


def accuracy(predictions, labels):
    predictions, labels = list(predictions), list(labels)
    if not predictions or len(predictions) != len(labels):
        raise ValidationError("accuracy needs equal, non-empty prediction and label lists")
    return 100.0 * sum(p == y for p, y in zip(predictions, labels)) / len(labels)


def harmonic_mean(base, new):
    if base < 0 or new < 0:
        raise ValidationError("harmonic mean of negative accuracies")
    if base == 0 and new == 0:
        return 0.0
    return 2.0 * base * new / (base + new)


def mean_of_h(metrics):
    """Average of per-run harmonic means (not the harmonic mean of averages)."""
    hs = [m.h_mean for m in metrics]
    return sum(hs) / len(hs)


def _sgd_step(params, grads, lr, cfg, velocity):
    for p, g in zip(params, grads):
        if cfg.weight_decay:
            g = g + cfg.weight_decay * p.data
        if cfg.momentum:
            buf = velocity.get(id(p))
            buf = g if buf is None else cfg.momentum * buf + g
            velocity[id(p)] = buf
            g = buf
        p.data = p.data - lr * g


def batch_loss(backbone, encoder, prompt, class_names, features, labels, tau, training=True):
    W = build_class_weights(backbone, encoder, prompt, class_names, training)
    probs = class_probs(Tensor(features) @ W.T, tau)
    return cross_entropy_loss(probs, labels)


def train_prompts(task, cfg, backbone, prompt=None, encoder=None):
    """SGD over the context vectors and the prompt encoder; the backbone is never written.

    Returns ``(prompt, encoder, RunMetrics)`` with per-epoch mean losses.
    """
    if not task.train_items:
        raise ValidationError("empty training set")
    d = backbone.d
    if prompt is None:
        prompt = init_prompts(cfg.init, cfg.M, backbone.vocab, seed=cfg.seed)
    if encoder is None:
        encoder = PromptEncoder(cfg.encoder, d, prompt.M)
    params = [prompt.vectors] + encoder.parameters()
    base_names = [task.class_names[c] for c in task.base]
    local = {c: j for j, c in enumerate(task.base)}
    items = list(task.train_items)
    feats = task.store.matrix(items)
    labels = np.array([local[task.store.labels[i]] for i in items])

    schedule = cfg.schedule(len(items))
    rng = stream(cfg.seed, "shuffle")
    velocity = {}
    step = 0
    history, step_losses = [], []
    for _ in range(cfg.epochs):
        order = rng.permutation(len(items))
        epoch_losses = []
        for start in range(0, len(items), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            with Tape() as tape:
                loss = batch_loss(backbone, encoder, prompt, base_names, feats[idx], labels[idx], cfg.tau)
            grads = tape.gradient(loss, params)
            _sgd_step(params, grads, cosine_anneal_rate(schedule, step), cfg, velocity)
            step += 1
            epoch_losses.append(float(loss.data))
        step_losses.extend(epoch_losses)
        history.append(float(np.mean(epoch_losses)))
    return prompt, encoder, RunMetrics(history, step_losses, params_checksum(prompt, encoder))


def _split_accuracy(backbone, encoder, prompt, task, classes, tau):
    names = [task.class_names[c] for c in classes]
    local = {c: j for j, c in enumerate(classes)}
    items = [i for i in task.test_items if task.store.labels[i] in local]
    if not items:
        raise ValidationError("empty test split")
    W = build_class_weights(backbone, encoder, prompt, names, training=False).data
    preds = np.argmax(task.store.matrix(items) @ W.T, axis=1)
    return accuracy(preds.tolist(), [local[task.store.labels[i]] for i in items])


def evaluate_base_to_new(prompt, encoder, task, backbone, tau=0.01, history=None):
    """Base and new accuracy, each scored against its own split's classes only."""
    base_acc = _split_accuracy(backbone, encoder, prompt, task, task.base, tau)
    new_acc = _split_accuracy(backbone, encoder, prompt, task, task.new, tau)
    return RunMetrics(
        loss_history=list(history.loss_history) if history else [],
        step_losses=list(history.step_losses) if history else [],
        checksum=params_checksum(prompt, encoder) if encoder is not None else "",
        base_acc=base_acc,
        new_acc=new_acc,
        h_mean=harmonic_mean(base_acc, new_acc),
    )
