"""Post-norm Transformer encoder exposing every intermediate a distillation loss needs.

Layers are numbered from 1.  Layer ``l`` reads ``hidden_states[l - 1]``,
computes per-head queries/keys/values from it, and writes
``hidden_states[l]``; ``hidden_states[0]`` is the (normalised) embedding
output.  Within a layer::

    h = LN(x + Attn(x) W_ao + b_ao)
    x' = LN(h + gelu(h W_1 + b_1) W_2 + b_2)

and the logits are ``hidden_states[L] @ W_O`` (a bare linear head, no bias,
not tied to the token embeddings).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import tensor as T
from .tensor import Tensor

MASK_VALUE = -1e9
INIT_STD = 0.02


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int
    num_heads: int
    hidden_size: int
    ff_size: int
    vocab_size: int
    max_seq_len: int
    dropout: float = 0.0
    layer_norm_eps: float = 1e-12

    def __post_init__(self):
        for name in ("num_layers", "num_heads", "hidden_size", "ff_size",
                     "vocab_size", "max_seq_len"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if self.hidden_size % self.num_heads:
            raise ValueError(
                f"hidden_size {self.hidden_size} not divisible by num_heads {self.num_heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")

    @property
    def head_size(self) -> int:
        return self.hidden_size // self.num_heads

    @property
    def architecture(self) -> tuple[int, int, int, int]:
        """The ``(L, A_h, d_h, d_f)`` tuple."""
        return (self.num_layers, self.num_heads, self.hidden_size, self.ff_size)

    def to_dict(self) -> dict:
        return asdict(self)


BERT_VOCAB = 30522

# Full-size architectures (L, A_h, d_h, d_f) of the monolingual setting.
PRESETS: dict[str, ModelConfig] = {
    "teacher": ModelConfig(12, 12, 768, 3072, BERT_VOCAB, 512),
    "6l-distilbert": ModelConfig(6, 12, 768, 3072, BERT_VOCAB, 512),
    "6l": ModelConfig(6, 12, 384, 1536, BERT_VOCAB, 512),
    "4l": ModelConfig(4, 12, 576, 768, BERT_VOCAB, 512),
    "3l": ModelConfig(3, 12, 384, 1024, BERT_VOCAB, 512),
}

# Desk-scale counterparts: teacher (4, 4, 64, 128); students shrink layers,
# width and FF size by the same ratios as their full-size versions.
DESK_PRESETS: dict[str, ModelConfig] = {
    "desk-teacher": ModelConfig(4, 4, 64, 128, 256, 64),
    "desk-6l-distilbert": ModelConfig(2, 4, 64, 128, 256, 64),
    "desk-6l": ModelConfig(2, 4, 32, 64, 256, 64),
    "desk-4l": ModelConfig(1, 4, 48, 32, 256, 64),
    "desk-3l": ModelConfig(1, 4, 32, 43, 256, 64),
}


def get_preset(name: str, **overrides) -> ModelConfig:
    table = {**PRESETS, **DESK_PRESETS}
    try:
        cfg = table[name.lower()]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(table)}") from None
    return replace(cfg, **overrides) if overrides else cfg


def layer_param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, f = cfg.hidden_size, cfg.ff_size
    return {
        "attention.query.weight": (d, d), "attention.query.bias": (d,),
        "attention.key.weight": (d, d), "attention.key.bias": (d,),
        "attention.value.weight": (d, d), "attention.value.bias": (d,),
        "attention.output.weight": (d, d), "attention.output.bias": (d,),
        "attention.norm.gain": (d,), "attention.norm.bias": (d,),
        "ffn.intermediate.weight": (d, f), "ffn.intermediate.bias": (f,),
        "ffn.output.weight": (f, d), "ffn.output.bias": (d,),
        "ffn.norm.gain": (d,), "ffn.norm.bias": (d,),
    }


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Ordered name -> shape map for every parameter of a model."""
    d = cfg.hidden_size
    shapes = {
        "embeddings.token": (cfg.vocab_size, d),
        "embeddings.position": (cfg.max_seq_len, d),
        "embeddings.norm.gain": (d,),
        "embeddings.norm.bias": (d,),
    }
    for layer in range(1, cfg.num_layers + 1):
        for name, shape in layer_param_shapes(cfg).items():
            shapes[f"layers.{layer}.{name}"] = shape
    shapes["head.weight"] = (d, cfg.vocab_size)
    return shapes


def parameter_count(cfg: ModelConfig, include_head: bool = True) -> int:
    return sum(int(np.prod(shape)) for name, shape in param_shapes(cfg).items()
               if include_head or not name.startswith("head."))


def truncated_normal(rng: np.random.Generator, shape, std: float = INIT_STD) -> np.ndarray:
    """Normal samples redrawn until they fall within two standard deviations."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


class TransformerModel:
    """Parameter bank for one encoder; see :func:`forward` for the computation."""

    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray | Tensor],
                 copy: bool = True):
        expected = param_shapes(config)
        missing = set(expected) - set(params)
        extra = set(params) - set(expected)
        if missing or extra:
            raise ValueError(f"parameter names mismatch: missing={sorted(missing)[:5]} "
                             f"unexpected={sorted(extra)[:5]}")
        self.config = config
        self.params: dict[str, Tensor] = {}
        for name, shape in expected.items():
            value = params[name]
            value = value.data if isinstance(value, Tensor) else np.asarray(value, dtype=T.DTYPE)
            if value.shape != shape:
                raise T.ShapeError(f"{name}: expected shape {shape}, got {value.shape}")
            self.params[name] = Tensor(value.copy() if copy else value, requires_grad=True)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def layer_params(self, layer: int) -> dict[str, Tensor]:
        prefix = f"layers.{layer}."
        return {k[len(prefix):]: v for k, v in self.params.items() if k.startswith(prefix)}

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def named_parameters(self, include_head: bool = True) -> dict[str, Tensor]:
        if include_head:
            return dict(self.params)
        return {k: v for k, v in self.params.items() if not k.startswith("head.")}

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def copy(self) -> "TransformerModel":
        return TransformerModel(self.config, self.state_dict(), copy=False)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def freeze(self) -> "TransformerModel":
        for p in self.params.values():
            p.requires_grad = False
        return self

    def parameter_count(self, include_head: bool = True) -> int:
        return parameter_count(self.config, include_head)

    def __call__(self, tokens, attention_mask=None, **kwargs) -> "ForwardTrace":
        return forward(self, tokens, attention_mask, **kwargs)


def init_parameters(config: ModelConfig, seed: int) -> TransformerModel:
    """Truncated-normal(0.02) weights, zero biases, unit layernorm gains."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".gain"):
            params[name] = np.ones(shape)
        elif name.endswith(".bias"):
            params[name] = np.zeros(shape)
        else:
            params[name] = truncated_normal(rng, shape)
    return TransformerModel(config, params, copy=False)


def init_from_teacher_layers(student_cfg: ModelConfig, teacher: TransformerModel,
                             picked_layers) -> TransformerModel:
    """Copy whole teacher layers (plus embeddings and head) into a student.

    Only valid when every student layer has exactly the teacher's layer shape
    (same hidden size, FF size and head count), i.e. architecture-constrained
    students such as the 6-layer DistilBERT layout.
    """
    tcfg = teacher.config
    picked = [int(j) for j in picked_layers]
    mismatched = [name for name, a, b in (
        ("hidden_size", student_cfg.hidden_size, tcfg.hidden_size),
        ("ff_size", student_cfg.ff_size, tcfg.ff_size),
        ("num_heads", student_cfg.num_heads, tcfg.num_heads),
        ("vocab_size", student_cfg.vocab_size, tcfg.vocab_size),
        ("max_seq_len", student_cfg.max_seq_len, tcfg.max_seq_len)) if a != b]
    if mismatched:
        raise T.ShapeError(
            "teacher-layer initialisation needs student layers identical in shape to the "
            f"teacher's (architecture-constrained student); mismatch in {mismatched}")
    if len(picked) != student_cfg.num_layers:
        raise ValueError(f"need {student_cfg.num_layers} picked layers, got {len(picked)}")
    if any(not 1 <= j <= tcfg.num_layers for j in picked):
        raise ValueError(f"picked layers must lie in [1, {tcfg.num_layers}]: {picked}")

    src = teacher.state_dict()
    params = {k: v for k, v in src.items() if not k.startswith("layers.")}
    for i, j in enumerate(picked, start=1):
        for name in layer_param_shapes(tcfg):
            params[f"layers.{i}.{name}"] = src[f"layers.{j}.{name}"]
    return TransformerModel(student_cfg, params)


@dataclass
class ForwardTrace:
    """Intermediates of one forward pass.

    ``queries[l - 1]`` etc. hold layer ``l``'s per-head projections shaped
    ``(..., A_h, |x|, d_k)``; ``hidden_states`` has ``L + 1`` entries shaped
    ``(..., |x|, d_h)``.  ``mask`` marks real (non-padding) positions.
    """

    hidden_states: list[Tensor]
    queries: list[Tensor]
    keys: list[Tensor]
    values: list[Tensor]
    attention_probs: list[Tensor]
    logits: Tensor | None
    mask: np.ndarray
    config: ModelConfig = field(repr=False, default=None)

    @property
    def num_layers(self) -> int:
        return len(self.queries)

    def hidden(self, layer: int) -> Tensor:
        return self.hidden_states[layer]

    def qkv(self, kind: str, layer: int) -> Tensor:
        """Per-head ``Q``/``K``/``V`` of 1-based ``layer``."""
        if not 1 <= layer <= self.num_layers:
            raise IndexError(f"layer {layer} outside [1, {self.num_layers}]")
        table = {"Q": self.queries, "K": self.keys, "V": self.values}
        return table[kind.upper()][layer - 1]


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, n, d = x.shape
    return T.permute(T.reshape(x, (b, n, heads, d // heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, n, dk = x.shape
    return T.reshape(T.permute(x, (0, 2, 1, 3)), (b, n, h * dk))


def _linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    return T.add(T.matmul(x, weight), bias)


def forward(model: TransformerModel, tokens, attention_mask=None, *, train: bool = False,
            rng: np.random.Generator | None = None, compute_logits: bool = True,
            position_embeddings: bool = True) -> ForwardTrace:
    """Run the encoder on ``tokens`` (``(|x|,)`` or ``(batch, |x|)`` ids).

    ``attention_mask`` (same shape, 1 = real token) adds ``-1e9`` to scores of
    padded keys.  A 1-D input yields an unbatched trace.
    """
    cfg = model.config
    ids = np.asarray(tokens)
    if ids.dtype.kind not in "iu":
        raise TypeError("token ids must be integers")
    unbatched = ids.ndim == 1
    if unbatched:
        ids = ids[None, :]
    if ids.ndim != 2:
        raise T.ShapeError(f"tokens must be 1-D or 2-D, got shape {ids.shape}")
    batch, length = ids.shape
    if length > cfg.max_seq_len:
        raise ValueError(f"sequence length {length} exceeds max_seq_len {cfg.max_seq_len}")
    if length < 1:
        raise ValueError("empty sequence")
    if ids.min() < 0 or ids.max() >= cfg.vocab_size:
        raise ValueError(f"token id out of range [0, {cfg.vocab_size})")
    if attention_mask is None:
        mask = np.ones((batch, length), dtype=bool)
    else:
        mask = np.asarray(attention_mask, dtype=bool).reshape(batch, length)
    if train and cfg.dropout > 0 and rng is None:
        raise ValueError("dropout in training mode needs an rng")
    p_drop = cfg.dropout if train else 0.0

    def drop(x):
        return T.dropout(x, p_drop, rng) if p_drop > 0 else x

    eps = cfg.layer_norm_eps
    P = model.params
    x = T.embedding(P["embeddings.token"], ids)
    if position_embeddings:
        x = T.add(x, T.take(P["embeddings.position"], slice(0, length)))
    x = drop(T.layernorm(x, P["embeddings.norm.gain"], P["embeddings.norm.bias"], eps))

    key_bias = np.where(mask, 0.0, MASK_VALUE)[:, None, None, :]
    scale = 1.0 / math.sqrt(cfg.head_size)
    hidden, qs, ks, vs, probs = [x], [], [], [], []
    for layer in range(1, cfg.num_layers + 1):
        lp = model.layer_params(layer)
        q = _split_heads(_linear(x, lp["attention.query.weight"], lp["attention.query.bias"]),
                         cfg.num_heads)
        k = _split_heads(_linear(x, lp["attention.key.weight"], lp["attention.key.bias"]),
                         cfg.num_heads)
        v = _split_heads(_linear(x, lp["attention.value.weight"], lp["attention.value.bias"]),
                         cfg.num_heads)
        scores = T.add(T.scale(T.matmul(q, T.transpose(k)), scale), key_bias)
        attn = T.softmax_rows(scores)
        context = _merge_heads(T.matmul(drop(attn), v))
        out = drop(_linear(context, lp["attention.output.weight"], lp["attention.output.bias"]))
        h = T.layernorm(T.add(x, out), lp["attention.norm.gain"], lp["attention.norm.bias"], eps)
        ff = T.gelu(_linear(h, lp["ffn.intermediate.weight"], lp["ffn.intermediate.bias"]))
        ff = drop(_linear(ff, lp["ffn.output.weight"], lp["ffn.output.bias"]))
        x = T.layernorm(T.add(h, ff), lp["ffn.norm.gain"], lp["ffn.norm.bias"], eps)
        hidden.append(x)
        qs.append(q)
        ks.append(k)
        vs.append(v)
        probs.append(attn)

    logits = T.matmul(x, P["head.weight"]) if compute_logits else None

    if unbatched:
        def squeeze(t):
            return None if t is None else T.reshape(t, t.shape[1:])
        hidden = [squeeze(t) for t in hidden]
        qs, ks, vs, probs = ([squeeze(t) for t in group] for group in (qs, ks, vs, probs))
        logits = squeeze(logits)
        mask = mask[0]
    return ForwardTrace(hidden, qs, ks, vs, probs, logits, mask, cfg)
