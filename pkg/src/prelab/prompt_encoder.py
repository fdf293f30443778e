"""Learnable context vectors and the residual reparameterization encoder.

Each context vector ``v_i`` is mapped to ``net(v_i) + v_i`` before it reaches
the frozen text encoder. ``net`` is a one-layer BiLSTM (hidden size d/2 per
direction), a bottleneck MLP, or a two-layer transformer encoder; it can be
shared across the M tokens or instantiated once per token.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .backbone import TEMPLATE_WORDS, embed_tokens, self_attention
from .errors import ValidationError
from .rng import stream

ARCHITECTURES = ("none", "bilstm", "mlp", "transformer")
SHARING = ("shared", "separate")
INIT_MODES = ("template", "gaussian", "padded")
PROMPT_INIT_STD = 0.02
NET_INIT_STD = 0.02


@dataclass
class PromptContext:
    """The M trainable context vectors, an (M, d) tensor."""

    vectors: Tensor

    @property
    def M(self):
        return self.vectors.shape[0]

    @property
    def d(self):
        return self.vectors.shape[1]


def init_prompts(mode, M, vocab, seed=0):
    """Initial context vectors.

    ``template`` copies the embeddings of "a photo of a" (M must be 4);
    ``gaussian`` draws N(0, 0.02^2); ``padded`` prepends M-4 copies of the
    placeholder word "X" to the template.
    """
    if M < 1:
        raise ValidationError("need at least one context vector")
    if mode == "template":
        if M != len(TEMPLATE_WORDS):
            raise ValidationError(f"template init needs M={len(TEMPLATE_WORDS)}, got M={M}")
        data = embed_tokens(vocab, TEMPLATE_WORDS).data
    elif mode == "padded":
        if M < len(TEMPLATE_WORDS):
            raise ValidationError(f"padded init needs M >= {len(TEMPLATE_WORDS)}, got M={M}")
        data = embed_tokens(vocab, ["X"] * (M - len(TEMPLATE_WORDS)) + list(TEMPLATE_WORDS)).data
    elif mode == "gaussian":
        data = stream(seed, "prompt_init").normal(0.0, PROMPT_INIT_STD, size=(M, vocab.dim))
    else:
        raise ValidationError(f"unknown prompt init mode {mode!r}; expected one of {INIT_MODES}")
    return PromptContext(Tensor(data, requires_grad=True, name="prompt"))


@dataclass(frozen=True)
class EncoderConfig:
    architecture: str = "bilstm"
    residual: bool = True
    sharing: str = "shared"
    dropout: float = 0.1
    bottleneck_dim: int | None = None
    heads: int = 2
    ff_dim: int | None = None
    seed: int = 0
    identity_start: bool = False

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ValidationError(f"architecture must be one of {ARCHITECTURES}, got {self.architecture!r}")
        if self.sharing not in SHARING:
            raise ValidationError(f"sharing must be one of {SHARING}, got {self.sharing!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValidationError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.bottleneck_dim is not None and self.bottleneck_dim < 1:
            raise ValidationError(f"bottleneck_dim must be >= 1, got {self.bottleneck_dim}")

    def to_dict(self):
        return asdict(self)


def _bilstm_params(rng, d):
    H = d // 2
    p = {}
    for direction in ("fwd", "bwd"):
        p[f"{direction}.weight_ih"] = rng.normal(0.0, NET_INIT_STD, size=(4 * H, d))
        p[f"{direction}.weight_hh"] = rng.normal(0.0, NET_INIT_STD, size=(4 * H, H))
        p[f"{direction}.bias_ih"] = np.zeros(4 * H)
        p[f"{direction}.bias_hh"] = np.zeros(4 * H)
    return p


def _mlp_params(rng, d, bottleneck):
    return {
        "down.w": rng.normal(0.0, NET_INIT_STD, size=(d, bottleneck)),
        "down.b": np.zeros(bottleneck),
        "up.w": rng.normal(0.0, NET_INIT_STD, size=(bottleneck, d)),
        "up.b": np.zeros(d),
    }


def _transformer_params(rng, d, ff, layers=2):
    p = {}
    for i in range(layers):
        pre = f"layer{i}."
        p[pre + "qkv.w"] = rng.normal(0.0, NET_INIT_STD, size=(d, 3 * d))
        # no key bias: softmax is invariant to it, so its gradient is identically zero
        p[pre + "q.b"] = np.zeros(d)
        p[pre + "v.b"] = np.zeros(d)
        p[pre + "out.w"] = rng.normal(0.0, NET_INIT_STD, size=(d, d))
        p[pre + "out.b"] = np.zeros(d)
        p[pre + "ln1.g"] = np.ones(d)
        p[pre + "ln1.b"] = np.zeros(d)
        p[pre + "fc1.w"] = rng.normal(0.0, NET_INIT_STD, size=(d, ff))
        p[pre + "fc1.b"] = np.zeros(ff)
        p[pre + "fc2.w"] = rng.normal(0.0, NET_INIT_STD, size=(ff, d))
        p[pre + "fc2.b"] = np.zeros(d)
        p[pre + "ln2.g"] = np.ones(d)
        p[pre + "ln2.b"] = np.zeros(d)
    return p


def _zero_output_path(arch, p, d):
    """Zero the parameters that feed the network output so that net(v) == 0."""
    if arch == "bilstm":
        # the cell candidate is the only source of cell state, so h stays 0
        H = d // 2
        for direction in ("fwd", "bwd"):
            for name in ("weight_ih", "weight_hh", "bias_ih", "bias_hh"):
                p[f"{direction}.{name}"][2 * H:3 * H] = 0.0
    elif arch == "mlp":
        p["up.w"][:] = 0.0
        p["up.b"][:] = 0.0
    elif arch == "transformer":
        p["layer1.ln2.g"][:] = 0.0
        p["layer1.ln2.b"][:] = 0.0


class PromptEncoder:
    """Residual reparameterization network F(v) = net(v) + v."""

    def __init__(self, config, d, M):
        if config.architecture == "bilstm" and d % 2:
            raise ValidationError(f"BiLSTM needs even width, got d={d}")
        if config.architecture == "transformer" and d % config.heads:
            raise ValidationError(f"width d={d} not divisible by {config.heads} heads")
        self.config = config
        self.d = d
        self.M = M
        self.bottleneck = config.bottleneck_dim or max(1, d // 2)
        self.ff = config.ff_dim or 4 * d
        rng = stream(config.seed, "encoder_init")
        self._dropout_rng = stream(config.seed, "dropout")
        n_sets = 0 if config.architecture == "none" else (M if config.sharing == "separate" else 1)
        self.param_sets = []
        for _ in range(n_sets):
            if config.architecture == "bilstm":
                raw = _bilstm_params(rng, d)
            elif config.architecture == "mlp":
                raw = _mlp_params(rng, d, self.bottleneck)
            else:
                raw = _transformer_params(rng, d, self.ff)
            if config.identity_start:
                _zero_output_path(config.architecture, raw, d)
            self.param_sets.append({k: Tensor(v, requires_grad=True, name=k) for k, v in raw.items()})

    def named_parameters(self):
        if len(self.param_sets) == 1:
            return list(self.param_sets[0].items())
        return [(f"{i}.{k}", t) for i, ps in enumerate(self.param_sets) for k, t in ps.items()]

    def parameters(self):
        return [t for _, t in self.named_parameters()]

    def load_parameters(self, values):
        """Replace parameter values from a ``name -> array`` mapping."""
        named = dict(self.named_parameters())
        if set(values) != set(named):
            raise ValidationError("encoder parameter names do not match the configuration")
        for name, t in named.items():
            arr = np.asarray(values[name], dtype=np.float64)
            if arr.shape != t.shape:
                raise ValidationError(f"parameter {name}: shape {arr.shape} != {t.shape}")
            t.data = arr.copy()

    def dropout(self, x, training):
        rate = self.config.dropout
        if not training or rate == 0.0:
            return x
        keep = self._dropout_rng.random(x.shape) >= rate
        return x * (keep / (1.0 - rate))

    def __call__(self, V, training=False):
        return reparameterize(self, V, training)


def _lstm_direction(p, prefix, xs):
    H = p[prefix + ".weight_hh"].shape[1]
    w_ih = ad.transpose(p[prefix + ".weight_ih"], (1, 0))
    w_hh = ad.transpose(p[prefix + ".weight_hh"], (1, 0))
    bias = p[prefix + ".bias_ih"] + p[prefix + ".bias_hh"]
    h = Tensor(np.zeros((1, H)))
    c = Tensor(np.zeros((1, H)))
    outs = []
    for x in xs:
        gates = x @ w_ih + h @ w_hh + bias
        i = ad.sigmoid(gates[:, 0:H])
        f = ad.sigmoid(gates[:, H:2 * H])
        g = ad.tanh(gates[:, 2 * H:3 * H])
        o = ad.sigmoid(gates[:, 3 * H:4 * H])
        c = f * c + i * g
        h = o * ad.tanh(c)
        outs.append(h)
    return outs


def bilstm_apply(params, V):
    """One-layer bidirectional LSTM over the rows of ``V`` (M, d) -> (M, d).

    Gate order i, f, g, o; zero initial states; row t of the output is
    ``concat(h_fwd_t, h_bwd_t)``.
    """
    V = ad.as_tensor(V)
    M, d = V.shape
    if d % 2:
        raise ValidationError(f"BiLSTM needs even width, got d={d}")
    rows = [V[t:t + 1] for t in range(M)]
    fwd = _lstm_direction(params, "fwd", rows)
    bwd = _lstm_direction(params, "bwd", rows[::-1])[::-1]
    return ad.concat([ad.concat([hf, hb], axis=1) for hf, hb in zip(fwd, bwd)], axis=0)


def mlp_apply(params, v):
    """Bottleneck MLP ``up(relu(down(v)))`` on a vector or on each row of a matrix."""
    v = ad.as_tensor(v)
    x = ad.reshape(v, (1, -1)) if v.ndim == 1 else v
    out = ad.relu(x @ params["down.w"] + params["down.b"]) @ params["up.w"] + params["up.b"]
    return ad.reshape(out, v.shape) if v.ndim == 1 else out


def transformer_apply(params, V, heads=2):
    """Two post-norm transformer encoder layers over the rows of ``V``; no positional encoding."""
    V = ad.as_tensor(V)
    M, d = V.shape
    if d % heads:
        raise ValidationError(f"width d={d} not divisible by {heads} heads")
    x = ad.reshape(V, (1, M, d))
    for i in (0, 1):
        pre = f"layer{i}."
        qkv_b = ad.concat([params[pre + "q.b"], np.zeros(d), params[pre + "v.b"]])
        att = self_attention(x, params[pre + "qkv.w"], qkv_b, params[pre + "out.w"], params[pre + "out.b"], heads)
        x = ad.layer_norm(x + att, params[pre + "ln1.g"], params[pre + "ln1.b"])
        ff = ad.relu(x @ params[pre + "fc1.w"] + params[pre + "fc1.b"]) @ params[pre + "fc2.w"] + params[pre + "fc2.b"]
        x = ad.layer_norm(x + ff, params[pre + "ln2.g"], params[pre + "ln2.b"])
    return ad.reshape(x, (M, d))


def _net(enc, params, V):
    arch = enc.config.architecture
    if arch == "bilstm":
        return bilstm_apply(params, V)
    if arch == "mlp":
        return mlp_apply(params, V)
    return transformer_apply(params, V, enc.config.heads)


def reparameterize(enc, V, training=False):
    """Map context vectors V (PromptContext or (M, d) tensor) to their reparameterized form."""
    V = V.vectors if isinstance(V, PromptContext) else ad.as_tensor(V)
    if V.ndim != 2 or V.shape[1] != enc.d:
        raise ValidationError(f"context width {V.shape[-1]} does not match encoder width {enc.d}")
    cfg = enc.config
    if cfg.architecture == "none":
        return V
    if cfg.sharing == "separate":
        if V.shape[0] != len(enc.param_sets):
            raise ValidationError(f"separate encoder has {len(enc.param_sets)} networks for {V.shape[0]} tokens")
        out = ad.concat([_net(enc, p, V[i:i + 1]) for i, p in enumerate(enc.param_sets)], axis=0)
    else:
        out = _net(enc, enc.param_sets[0], V)
    if cfg.architecture in ("mlp", "transformer"):
        out = enc.dropout(out, training)
    return out + V if cfg.residual else out


def count_trainable_params(enc, V):
    """Prompt scalars plus every encoder weight and bias."""
    M = V.M if isinstance(V, PromptContext) else V.shape[0]
    d = V.d if isinstance(V, PromptContext) else V.shape[1]
    return M * d + sum(t.data.size for t in enc.parameters())


def bilstm_weight_count(d):
    """Exact BiLSTM weight-matrix count (no biases): 2 directions x (4*d*d/2 + 4*(d/2)^2) = 6*d^2.

    The often-quoted figure of 3*d*d counts a single direction only.
    """
    H = d // 2
    return 2 * (4 * H * d + 4 * H * H)
