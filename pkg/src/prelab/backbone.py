"""Frozen stand-in for a CLIP-like dual encoder.

The text side is a tiny pre-norm transformer with causal attention that pools
the final position, projects, and L2-normalizes. The image side is a store of
precomputed, unit-normalized feature vectors. All backbone weights are held in
read-only arrays; gradients flow through the text encoder to its *input* only.
"""

from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ValidationError
from .rng import stream

TEMPLATE_WORDS = ("a", "photo", "of", "a")
RESERVED_WORDS = ("a", "photo", "of", "X")
DEFAULT_CLASS_NAMES = (
    "cat", "dog", "car", "truck", "rose", "tulip", "pizza", "sushi", "plane", "ship",
    "lion", "tiger", "bicycle", "train", "daisy", "bread", "horse", "sheep", "boat", "owl",
    "apple", "mango", "chair", "table", "eagle", "shark", "guitar", "piano", "lamp", "clock",
)


def tokenize(name):
    return name.split()


class Vocabulary:
    """Word list with a seeded embedding table."""

    def __init__(self, words, table):
        words = list(words)
        if len(set(words)) != len(words):
            raise ValidationError("vocabulary words must be unique")
        table = np.array(table, dtype=np.float64)
        if table.ndim != 2 or table.shape[0] != len(words):
            raise ValidationError("embedding table must have one row per word")
        if not np.all(np.isfinite(table)):
            raise ValidationError("embedding table has non-finite rows")
        table.flags.writeable = False
        self.words = words
        self.index = {w: i for i, w in enumerate(words)}
        self.table = table

    @property
    def dim(self):
        return self.table.shape[1]

    def __len__(self):
        return len(self.words)

    def __contains__(self, word):
        return word in self.index

    def ids(self, words):
        missing = [w for w in words if w not in self.index]
        if missing:
            raise ValidationError(f"unknown word(s) not in vocabulary: {', '.join(map(repr, missing))}")
        return [self.index[w] for w in words]


def embed_tokens(vocab, words):
    """Rows of the embedding table for ``words`` as an (n, d) tensor."""
    ids = vocab.ids(list(words))
    return Tensor(vocab.table[ids].reshape(len(ids), vocab.dim))


@dataclass(frozen=True)
class TextEncoderConfig:
    d: int = 32
    layers: int = 2
    heads: int = 2
    max_context: int = 16
    causal: bool = True


class FrozenTextEncoder:
    """Pre-norm transformer text encoder with frozen parameters."""

    frozen = True

    def __init__(self, config, params):
        self.config = config
        self.params = {}
        for name, value in params.items():
            t = Tensor(value, name=name)
            t.data.flags.writeable = False
            self.params[name] = t

    def __call__(self, sequence):
        return encode_text(self, sequence)


def _init_text_params(rng, cfg):
    d, L = cfg.d, cfg.layers
    # fan-in scale on input projections so attention and the MLP act nonlinearly;
    # residual-branch outputs stay small
    in_std = d**-0.5
    resid_std = 0.02 / math.sqrt(L)
    p = {"pos": rng.normal(0.0, 0.01, size=(cfg.max_context, d))}
    for i in range(L):
        p[f"layer{i}.ln1.g"] = np.ones(d)
        p[f"layer{i}.ln1.b"] = np.zeros(d)
        p[f"layer{i}.qkv.w"] = rng.normal(0.0, in_std, size=(d, 3 * d))
        p[f"layer{i}.qkv.b"] = np.zeros(3 * d)
        p[f"layer{i}.out.w"] = rng.normal(0.0, resid_std, size=(d, d))
        p[f"layer{i}.out.b"] = np.zeros(d)
        p[f"layer{i}.ln2.g"] = np.ones(d)
        p[f"layer{i}.ln2.b"] = np.zeros(d)
        p[f"layer{i}.fc1.w"] = rng.normal(0.0, in_std, size=(d, 4 * d))
        p[f"layer{i}.fc1.b"] = np.zeros(4 * d)
        p[f"layer{i}.fc2.w"] = rng.normal(0.0, resid_std, size=(4 * d, d))
        p[f"layer{i}.fc2.b"] = np.zeros(d)
    p["ln_final.g"] = np.ones(d)
    p["ln_final.b"] = np.zeros(d)
    p["proj"] = rng.normal(0.0, d**-0.5, size=(d, d))
    return p


def causal_mask(n):
    return np.tril(np.ones((n, n), dtype=bool))


def self_attention(x, w_qkv, b_qkv, w_out, b_out, heads, mask=None):
    """Multi-head self-attention over a (B, T, d) tensor."""
    B, T, d = x.shape
    dh = d // heads
    qkv = x @ w_qkv + b_qkv
    q, k, v = (ad.transpose(ad.reshape(qkv[..., j * d:(j + 1) * d], (B, T, heads, dh)), (0, 2, 1, 3))
               for j in range(3))
    att = ad.softmax((q @ k.T) * (1.0 / math.sqrt(dh)), axis=-1, mask=mask)
    o = ad.reshape(ad.transpose(att @ v, (0, 2, 1, 3)), (B, T, d))
    return o @ w_out + b_out


def encode_text(encoder, sequence):
    """Encode a (T, d) or (B, T, d) token sequence to unit-norm (d,) / (B, d) features.

    The output is read at the final position. Differentiable w.r.t. ``sequence``.
    """
    cfg = encoder.config
    x = ad.as_tensor(sequence)
    single = x.ndim == 2
    if single:
        x = ad.reshape(x, (1,) + x.shape)
    if x.ndim != 3 or x.shape[-1] != cfg.d:
        raise ValidationError(f"sequence width {x.shape[-1]} does not match encoder width {cfg.d}")
    B, T, d = x.shape
    if T < 1 or T > cfg.max_context:
        raise ValidationError(f"sequence length {T} outside [1, {cfg.max_context}] (prompt tokens + class tokens "
                              f"must fit the text encoder's max_context)")
    P = encoder.params
    h = cfg.heads
    mask = causal_mask(T) if cfg.causal else None

    x = x + P["pos"].data[:T]
    for i in range(cfg.layers):
        pre = f"layer{i}."
        y = ad.layer_norm(x, P[pre + "ln1.g"], P[pre + "ln1.b"])
        x = x + self_attention(y, P[pre + "qkv.w"], P[pre + "qkv.b"], P[pre + "out.w"], P[pre + "out.b"], h, mask)
        y = ad.layer_norm(x, P[pre + "ln2.g"], P[pre + "ln2.b"])
        x = x + (ad.gelu(y @ P[pre + "fc1.w"] + P[pre + "fc1.b"]) @ P[pre + "fc2.w"] + P[pre + "fc2.b"])
    x = ad.layer_norm(x, P["ln_final.g"], P["ln_final.b"])
    out = ad.l2_normalize(x[:, T - 1, :] @ P["proj"], axis=-1)
    return out[0] if single else out


@dataclass
class FrozenBackbone:
    vocab: Vocabulary
    text: FrozenTextEncoder
    seed: int

    @property
    def d(self):
        return self.text.config.d

    def checksum(self):
        """SHA-256 over every frozen array (vocabulary table included)."""
        h = hashlib.sha256()
        h.update(self.vocab.table.tobytes())
        for name in sorted(self.text.params):
            h.update(name.encode())
            h.update(self.text.params[name].data.tobytes())
        return h.hexdigest()

    def describe(self):
        cfg = self.text.config
        return {"seed": self.seed, "d": cfg.d, "layers": cfg.layers, "heads": cfg.heads,
                "max_context": cfg.max_context, "causal": cfg.causal, "words": list(self.vocab.words)}


def build_vocab_words(class_names, vocab_size=None):
    words = list(dict.fromkeys(RESERVED_WORDS))
    for name in class_names:
        for tok in tokenize(name):
            if tok not in words:
                words.append(tok)
    if vocab_size is None:
        return words
    if vocab_size < len(words):
        raise ValidationError(f"vocab_size {vocab_size} smaller than the {len(words)} required words")
    i = 0
    while len(words) < vocab_size:
        filler = f"w{i:03d}"
        if filler not in words:
            words.append(filler)
        i += 1
    return words


def init_backbone(seed, d=32, layers=2, heads=2, vocab_size=None, class_names=(), max_context=16,
                  causal=True, words=None):
    """Deterministically build a frozen backbone from ``seed``."""
    if d % 2:
        raise ValidationError(f"width d={d} must be even (BiLSTM hidden size is d/2)")
    if heads < 1 or d % heads:
        raise ValidationError(f"width d={d} not divisible by {heads} heads")
    if layers < 1:
        raise ValidationError("need at least one text-encoder layer")
    if words is None:
        words = build_vocab_words(class_names, vocab_size)
    rng = stream(seed, "backbone")
    table = rng.normal(0.0, 0.02, size=(len(words), d))
    cfg = TextEncoderConfig(d=d, layers=layers, heads=heads, max_context=max_context, causal=causal)
    text = FrozenTextEncoder(cfg, _init_text_params(rng, cfg))
    return FrozenBackbone(vocab=Vocabulary(words, table), text=text, seed=seed)


def backbone_from_description(desc):
    return init_backbone(desc["seed"], d=desc["d"], layers=desc["layers"], heads=desc["heads"],
                         max_context=desc["max_context"], causal=desc.get("causal", True), words=desc["words"])


@dataclass
class ImageFeatureStore:
    """Unit-normalized image features with labels and a train/test split tag."""

    d: int
    n_classes: int
    features: dict = field(default_factory=dict)
    labels: dict = field(default_factory=dict)
    splits: dict = field(default_factory=dict)

    def add(self, item_id, vector, label, split="test"):
        vec = np.asarray(vector, dtype=np.float64).reshape(-1)
        if vec.shape[0] != self.d:
            raise ValidationError(f"item {item_id}: feature width {vec.shape[0]} != {self.d}")
        norm = np.linalg.norm(vec)
        if norm == 0 or not np.isfinite(norm):
            raise ValidationError(f"item {item_id}: feature cannot be normalized")
        if not 0 <= int(label) < self.n_classes:
            raise ValidationError(f"item {item_id}: label {label} outside class vocabulary")
        if split not in ("train", "test"):
            raise ValidationError(f"item {item_id}: split must be train or test, got {split!r}")
        vec = vec / norm
        vec.flags.writeable = False
        self.features[item_id] = vec
        self.labels[item_id] = int(label)
        self.splits[item_id] = split

    def __len__(self):
        return len(self.features)

    def items(self, split=None):
        return [i for i in self.features if split is None or self.splits[i] == split]

    def matrix(self, item_ids):
        return np.stack([self.features[i] for i in item_ids]) if item_ids else np.zeros((0, self.d))

    def to_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["item_id", "class_id", "split"] + [f"f{j}" for j in range(self.d)])
            for item_id, vec in self.features.items():
                w.writerow([item_id, self.labels[item_id], self.splits[item_id]] + [repr(float(v)) for v in vec])

    @classmethod
    def from_csv(cls, path, n_classes):
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if not header or header[:3] != ["item_id", "class_id", "split"]:
                raise ValidationError(f"{path}: bad header, expected item_id,class_id,split,f0..")
            d = len(header) - 3
            if d < 1 or header[3:] != [f"f{j}" for j in range(d)]:
                raise ValidationError(f"{path}: feature columns must be f0..f{{d-1}}")
            store = cls(d=d, n_classes=n_classes)
            for lineno, row in enumerate(reader, start=2):
                if len(row) != len(header):
                    raise ValidationError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
                store.add(row[0], [float(v) for v in row[3:]], int(row[1]), row[2])
        return store


def image_feature(store, item_id):
    """Unit-norm feature and label of ``item_id``."""
    if item_id not in store.features:
        raise ValidationError(f"unknown image item {item_id!r}")
    return store.features[item_id], store.labels[item_id]
