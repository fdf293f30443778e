"""Hand-derived forward/backward for plain context optimization (no prompt encoder).

This path does not touch the tape: every gradient is written out explicitly
in numpy. It serves as an independent oracle for the tape gradient of the
``architecture="none"`` configuration, and as a reference trainer.
"""

from __future__ import annotations

import math

import numpy as np

from .backbone import tokenize
from .rng import stream

_GELU_C = math.sqrt(2.0 / math.pi)


def _ln_forward(x, g, b, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * rstd
    return xhat * g + b, (xhat, rstd)


def _ln_backward(dy, cache, g):
    xhat, rstd = cache
    n = xhat.shape[-1]
    dxhat = dy * g
    # d/dx of (x - mean) / std, written out per row
    return (rstd / n) * (n * dxhat - dxhat.sum(-1, keepdims=True) - xhat * (dxhat * xhat).sum(-1, keepdims=True))


def _gelu(u):
    t = np.tanh(_GELU_C * (u + 0.044715 * u**3))
    return 0.5 * u * (1.0 + t), t


def _gelu_grad(u, t):
    return 0.5 * (1.0 + t) + 0.5 * u * (1.0 - t**2) * _GELU_C * (1.0 + 0.134145 * u**2)


def _class_token_block(backbone, class_names):
    toks = [tokenize(n) for n in class_names]
    if len({len(t) for t in toks}) != 1:
        raise ValueError("reference path needs class names of equal token length")
    return np.stack([backbone.vocab.table[backbone.vocab.ids(t)] for t in toks])


def coop_loss_and_grad(backbone, V, class_names, features, labels, tau):
    """Mean cross-entropy of the CoOp classifier and its gradient w.r.t. V."""
    P = {k: t.data for k, t in backbone.text.params.items()}
    cfg = backbone.text.config
    V = np.asarray(V, dtype=np.float64)
    E = _class_token_block(backbone, class_names)
    C, k, d = E.shape
    M = V.shape[0]
    T = M + k
    h = cfg.heads
    dh = d // h
    x = np.concatenate([np.broadcast_to(V, (C, M, d)), E], axis=1) + P["pos"][:T]
    allowed = np.tril(np.ones((T, T), dtype=bool)) if cfg.causal else np.ones((T, T), dtype=bool)

    caches = []
    for i in range(cfg.layers):
        pre = f"layer{i}."
        y1, ln1 = _ln_forward(x, P[pre + "ln1.g"], P[pre + "ln1.b"])
        qkv = y1 @ P[pre + "qkv.w"] + P[pre + "qkv.b"]
        q, kk, v = (qkv[..., j * d:(j + 1) * d].reshape(C, T, h, dh).transpose(0, 2, 1, 3) for j in range(3))
        s = np.einsum("chtd,chsd->chts", q, kk) / math.sqrt(dh)
        s = np.where(allowed, s, -np.inf)
        a = np.exp(s - s.max(-1, keepdims=True))
        a /= a.sum(-1, keepdims=True)
        o = np.einsum("chts,chsd->chtd", a, v).transpose(0, 2, 1, 3).reshape(C, T, d)
        x = x + o @ P[pre + "out.w"] + P[pre + "out.b"]
        y2, ln2 = _ln_forward(x, P[pre + "ln2.g"], P[pre + "ln2.b"])
        u = y2 @ P[pre + "fc1.w"] + P[pre + "fc1.b"]
        act, t = _gelu(u)
        x = x + act @ P[pre + "fc2.w"] + P[pre + "fc2.b"]
        caches.append((y1, ln1, q, kk, v, a, o, y2, ln2, u, t, act))
    z, lnf = _ln_forward(x, P["ln_final.g"], P["ln_final.b"])
    e = z[:, -1, :] @ P["proj"]
    enorm = np.sqrt((e * e).sum(-1, keepdims=True))
    w = e / enorm

    F = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    B = F.shape[0]
    logits = F @ w.T / tau
    logits -= logits.max(-1, keepdims=True)
    p = np.exp(logits)
    p /= p.sum(-1, keepdims=True)
    loss = -np.log(p[np.arange(B), labels]).mean()

    dlogits = p.copy()
    dlogits[np.arange(B), labels] -= 1.0
    dlogits /= B
    dw = dlogits.T @ F / tau
    de = (dw - w * (dw * w).sum(-1, keepdims=True)) / enorm
    dz = np.zeros_like(z)
    dz[:, -1, :] = de @ P["proj"].T
    dx = _ln_backward(dz, lnf, P["ln_final.g"])

    for i in reversed(range(cfg.layers)):
        pre = f"layer{i}."
        y1, ln1, q, kk, v, a, o, y2, ln2, u, t, act = caches[i]
        dact = dx @ P[pre + "fc2.w"].T
        du = dact * _gelu_grad(u, t)
        dx = dx + _ln_backward(du @ P[pre + "fc1.w"].T, ln2, P[pre + "ln2.g"])
        do = (dx @ P[pre + "out.w"].T).reshape(C, T, h, dh).transpose(0, 2, 1, 3)
        da = np.einsum("chtd,chsd->chts", do, v)
        dv = np.einsum("chts,chtd->chsd", a, do)
        ds = a * (da - (da * a).sum(-1, keepdims=True)) / math.sqrt(dh)
        dq = np.einsum("chts,chsd->chtd", ds, kk)
        dk = np.einsum("chts,chtd->chsd", ds, q)
        dqkv = np.concatenate([g.transpose(0, 2, 1, 3).reshape(C, T, d) for g in (dq, dk, dv)], axis=-1)
        dx = dx + _ln_backward(dqkv @ P[pre + "qkv.w"].T, ln1, P[pre + "ln1.g"])
    return float(loss), dx[:, :M, :].sum(axis=0)


def coop_weights(backbone, V, class_names):
    """Forward-only class weights along the reference path."""
    P = {k: t.data for k, t in backbone.text.params.items()}
    cfg = backbone.text.config
    E = _class_token_block(backbone, class_names)
    C, k, d = E.shape
    M = V.shape[0]
    T = M + k
    h, dh = cfg.heads, d // cfg.heads
    x = np.concatenate([np.broadcast_to(V, (C, M, d)), E], axis=1) + P["pos"][:T]
    allowed = np.tril(np.ones((T, T), dtype=bool)) if cfg.causal else np.ones((T, T), dtype=bool)
    for i in range(cfg.layers):
        pre = f"layer{i}."
        y1, _ = _ln_forward(x, P[pre + "ln1.g"], P[pre + "ln1.b"])
        qkv = y1 @ P[pre + "qkv.w"] + P[pre + "qkv.b"]
        q, kk, v = (qkv[..., j * d:(j + 1) * d].reshape(C, T, h, dh).transpose(0, 2, 1, 3) for j in range(3))
        s = np.where(allowed, np.einsum("chtd,chsd->chts", q, kk) / math.sqrt(dh), -np.inf)
        a = np.exp(s - s.max(-1, keepdims=True))
        a /= a.sum(-1, keepdims=True)
        o = np.einsum("chts,chsd->chtd", a, v).transpose(0, 2, 1, 3).reshape(C, T, d)
        x = x + o @ P[pre + "out.w"] + P[pre + "out.b"]
        y2, _ = _ln_forward(x, P[pre + "ln2.g"], P[pre + "ln2.b"])
        x = x + _gelu(y2 @ P[pre + "fc1.w"] + P[pre + "fc1.b"])[0] @ P[pre + "fc2.w"] + P[pre + "fc2.b"]
    z, _ = _ln_forward(x, P["ln_final.g"], P["ln_final.b"])
    e = z[:, -1, :] @ P["proj"]
    return e / np.sqrt((e * e).sum(-1, keepdims=True))


def train_coop_reference(task, cfg, backbone, V0):
    """Plain SGD on V with the hand-derived gradient, same shuffling and schedule as the tape trainer."""
    from .numerics import cosine_anneal_rate

    V = np.array(V0, dtype=np.float64)
    names = [task.class_names[c] for c in task.base]
    local = {c: j for j, c in enumerate(task.base)}
    items = list(task.train_items)
    feats = task.store.matrix(items)
    labels = np.array([local[task.store.labels[i]] for i in items])
    schedule = cfg.schedule(len(items))
    rng = stream(cfg.seed, "shuffle")
    step, history, velocity = 0, [], None
    for _ in range(cfg.epochs):
        order = rng.permutation(len(items))
        losses = []
        for start in range(0, len(items), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss, g = coop_loss_and_grad(backbone, V, names, feats[idx], labels[idx], cfg.tau)
            if cfg.weight_decay:
                g = g + cfg.weight_decay * V
            if cfg.momentum:
                velocity = g if velocity is None else cfg.momentum * velocity + g
                g = velocity
            V = V - cosine_anneal_rate(schedule, step) * g
            step += 1
            losses.append(loss)
        history.append(float(np.mean(losses)))
    return V, history


def evaluate_coop_reference(task, backbone, V):
    """(base_acc, new_acc) scored within each split along the reference forward path."""
    accs = []
    for classes in (task.base, task.new):
        names = [task.class_names[c] for c in classes]
        local = {c: j for j, c in enumerate(classes)}
        items = [i for i in task.test_items if task.store.labels[i] in local]
        W = coop_weights(backbone, np.asarray(V, dtype=np.float64), names)
        preds = np.argmax(task.store.matrix(items) @ W.T, axis=1)
        truth = np.array([local[task.store.labels[i]] for i in items])
        accs.append(100.0 * float(np.sum(preds == truth)) / len(items))
    return tuple(accs)
