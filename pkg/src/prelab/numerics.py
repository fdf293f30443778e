"""Classification-head math, loss, learning-rate schedule and gradient checking."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor, as_tensor
from .errors import ValidationError

LOG_CLAMP = 1e-12


class ClampWarning(RuntimeWarning):
    """A zero probability was clamped before taking its log."""


def cosine_similarity(a, b):
    """Cosine of the angle between two vectors of the same length."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape or a.ndim != 1 or a.shape[0] < 1:
        raise ValidationError(f"cosine_similarity needs equal 1-d shapes, got {a.shape} and {b.shape}")
    if not np.any(a.data) or not np.any(b.data):
        raise ValidationError("cosine_similarity of a zero vector (degenerate embedding)")
    return ad.sum_(ad.l2_normalize(a) * ad.l2_normalize(b))


def class_probs(sims, tau):
    """Softmax of ``sims / tau`` over the last axis."""
    if not tau > 0:
        raise ValidationError(f"temperature must be positive, got {tau}")
    sims = as_tensor(sims)
    if sims.ndim == 0 or sims.shape[-1] < 1:
        raise ValidationError("class_probs needs at least one class")
    return ad.softmax(sims * (1.0 / tau), axis=-1)


def cross_entropy_loss(probs, label):
    """Negative log-probability of ``label``.

    ``probs`` may be a single distribution with an integer label, or a batch
    (N x C) with an array of N labels, in which case the mean is returned.
    A label probability of exactly zero is clamped to ``LOG_CLAMP`` and reported with a
    :class:`ClampWarning`.
    """
    probs = as_tensor(probs)
    labels = np.asarray(label)
    n_classes = probs.shape[-1]
    if np.any(labels < 0) or np.any(labels >= n_classes):
        raise ValidationError(f"label out of range for {n_classes} classes: {label}")
    if probs.ndim == 1:
        picked = probs[int(labels)]
    else:
        picked = probs[np.arange(probs.shape[0]), labels]
    if np.any(picked.data <= 0.0):
        warnings.warn(f"zero probability clamped to {LOG_CLAMP} in cross-entropy", ClampWarning, stacklevel=2)
        picked = ad.add(picked, np.where(picked.data <= 0.0, LOG_CLAMP, 0.0))
    nll = -ad.log(picked)
    return nll if probs.ndim == 1 else nll.mean()


@dataclass(frozen=True)
class LrSchedule:
    eta0: float
    total_steps: int
    eta_min: float = 0.0

    def __post_init__(self):
        if self.total_steps < 1:
            raise ValidationError("total_steps must be positive")


def cosine_anneal_rate(schedule, step):
    """Cosine-annealed learning rate at ``step`` (0 .. total_steps)."""
    if not 0 <= step <= schedule.total_steps:
        raise ValidationError(f"step {step} outside [0, {schedule.total_steps}]")
    frac = step / schedule.total_steps
    return schedule.eta_min + 0.5 * (schedule.eta0 - schedule.eta_min) * (1.0 + math.cos(math.pi * frac))


def finite_diff_check(fn, params, eps=1e-6):
    """Compare the tape gradient of ``fn`` at ``params`` with central differences.

    ``fn`` maps a :class:`Tensor` to a scalar :class:`Tensor`. Returns the max
    over coordinates of ``|analytic - numeric| / max(1e-8, |analytic| + |numeric|)``.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValidationError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    base = np.array(params.data if isinstance(params, Tensor) else params, dtype=np.float64)
    p = Tensor(base, requires_grad=True)
    with Tape() as tape:
        value = _call(fn, p)
    _check_scalar(value)
    (analytic,) = tape.gradient(value, [p])

    numeric = np.zeros_like(base)
    flat = numeric.reshape(-1)
    for i in range(base.size):
        shifted = base.copy().reshape(-1)
        shifted[i] += eps
        up = _check_scalar(_call(fn, Tensor(shifted.reshape(base.shape))))
        shifted[i] -= 2 * eps
        down = _check_scalar(_call(fn, Tensor(shifted.reshape(base.shape))))
        flat[i] = (up - down) / (2 * eps)

    denom = np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom))


def _call(fn, p):
    try:
        return fn(p)
    except FloatingPointError as exc:
        raise ValidationError(f"function value is not finite ({exc})") from None


def _check_scalar(value):
    v = float(np.asarray(value.data if isinstance(value, Tensor) else value).reshape(()))
    if not math.isfinite(v):
        raise ValidationError("function value is not finite")
    return v
