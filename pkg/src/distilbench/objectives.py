"""Distillation objectives over :class:`~distilbench.transformer.ForwardTrace` pairs.

Teacher tensors are always read as constants; gradients only reach the
student trace and the projection weights.  Reductions: every MSE is an
element mean and every cross-entropy a mean over (unpadded) softmax rows,
while the outer sums over mapped layer pairs, ``Q/K/V`` and relation heads
stay explicit sums.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from . import tensor as T
from .mapping import LayerMapping, build_mapping
from .tensor import Tensor
from .transformer import MASK_VALUE, ForwardTrace, ModelConfig, truncated_normal

QKV = ("Q", "K", "V")
METHODS = ("od", "hs", "cosine-hs", "minilmv2", "directminilm")
EXPLORED_MHA_OFFSETS = (0, 1, 2)  # teacher layers L, L-1, L-2
MINILMV2_RELATION_HEADS = 48


class SpecError(ValueError):
    """An invalid distillation setup."""


# -- helpers ----------------------------------------------------------------

def _const(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _expand_rows(mask: np.ndarray, ndim: int) -> np.ndarray:
    """Reshape a ``(..., |x|)`` mask to broadcast over ``(..., heads, |x|, d)``."""
    mask = np.asarray(mask, dtype=bool)
    return mask.reshape(mask.shape[:-1] + (1,) * (ndim - 1 - mask.ndim) + mask.shape[-1:] + (1,))


def _expand_keys(mask: np.ndarray, ndim: int) -> np.ndarray:
    """Reshape a ``(..., |x|)`` mask to index the key axis of ``(..., |x|, |x|)`` scores."""
    mask = np.asarray(mask, dtype=bool)
    return mask.reshape(mask.shape[:-1] + (1,) * (ndim - mask.ndim) + mask.shape[-1:])


# -- relation heads -----------------------------------------------------------

def concat_resplit(per_head: Sequence[Tensor], num_relation_heads: int) -> list[Tensor]:
    """Concatenate ``A_h`` head matrices along features and cut into ``A_r`` slices."""
    merged = T.concat(list(per_head), axis=-1)
    if merged.shape[-1] % num_relation_heads:
        raise SpecError(f"{num_relation_heads} relation heads do not divide "
                        f"feature size {merged.shape[-1]}")
    return T.split(merged, num_relation_heads, axis=-1)


def resplit_heads(x: Tensor, num_relation_heads: int) -> Tensor:
    """Batched :func:`concat_resplit`: ``(..., A_h, |x|, d_k) -> (..., A_r, |x|, d_r)``."""
    heads, length, dk = x.shape[-3:]
    width = heads * dk
    if width % num_relation_heads:
        raise SpecError(f"{num_relation_heads} relation heads do not divide hidden size {width}")
    nd = x.ndim
    swap = list(range(nd - 3)) + [nd - 2, nd - 3, nd - 1]
    y = T.permute(x, swap)
    y = T.reshape(y, x.shape[:-3] + (length, num_relation_heads, width // num_relation_heads))
    return T.permute(y, swap)


def relation_logits(a: Tensor, mask=None) -> Tensor:
    """Scaled Gram matrix ``A A^T / sqrt(d_r)`` with padded keys pushed to -1e9."""
    scores = T.scale(T.matmul(a, T.transpose(a)), 1.0 / math.sqrt(a.shape[-1]))
    if mask is not None:
        scores = T.add(scores, np.where(_expand_keys(mask, scores.ndim), 0.0, MASK_VALUE))
    return scores


def relation_matrix(a: Tensor, mask=None) -> Tensor:
    """Row-softmax of the scaled Gram matrix of one relation head."""
    return T.softmax_rows(relation_logits(a, mask))


def _relation_heads(trace: ForwardTrace, kind: str, layer: int, heads: int) -> Tensor:
    return resplit_heads(trace.qkv(kind, layer), heads)


# -- projections --------------------------------------------------------------

class ProjectionBank:
    """Trainable linear maps from student to teacher feature spaces.

    ``hs[(i, j)]`` maps student hidden states of layer ``i`` to teacher layer
    ``j``; ``mha[alpha]`` stacks one ``d_r^S x d_r^T`` matrix per relation head.
    """

    def __init__(self, hs: dict | None = None, mha: dict | None = None):
        self.hs: dict[tuple[int, int], Tensor] = dict(hs or {})
        self.mha: dict[str, Tensor] = dict(mha or {})

    @staticmethod
    def _matrix(shape, rng, identity: bool) -> Tensor:
        if identity:
            eye = np.eye(shape[-2], shape[-1])
            value = np.broadcast_to(eye, shape).copy()
        else:
            value = truncated_normal(rng, shape)
        return Tensor(value, requires_grad=True)

    @classmethod
    def for_hidden_states(cls, mapping: LayerMapping, student_size: int, teacher_size: int,
                          rng: np.random.Generator, identity: bool = False) -> "ProjectionBank":
        return cls(hs={pair: cls._matrix((student_size, teacher_size), rng, identity)
                       for pair in mapping.pairs()})

    @classmethod
    def for_relation_heads(cls, num_relation_heads: int, student_size: int, teacher_size: int,
                           rng: np.random.Generator, identity: bool = False) -> "ProjectionBank":
        shape = (num_relation_heads, student_size // num_relation_heads,
                 teacher_size // num_relation_heads)
        return cls(mha={kind: cls._matrix(shape, rng, identity) for kind in QKV})

    def named_parameters(self) -> dict[str, Tensor]:
        out = {f"proj.hs.{i}.{j}": w for (i, j), w in self.hs.items()}
        out.update((f"proj.mha.{kind}", w) for kind, w in self.mha.items())
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    @classmethod
    def from_state(cls, tensors: dict[str, np.ndarray]) -> "ProjectionBank":
        bank = cls()
        for name, value in tensors.items():
            parts = name.split(".")
            if parts[:2] == ["proj", "hs"]:
                bank.hs[(int(parts[2]), int(parts[3]))] = Tensor(value.copy(), requires_grad=True)
            elif parts[:2] == ["proj", "mha"]:
                bank.mha[parts[2]] = Tensor(value.copy(), requires_grad=True)
        return bank

    def __len__(self) -> int:
        return len(self.hs) + len(self.mha)


def orthogonalize(weight: np.ndarray) -> np.ndarray:
    """Nearest matrix with orthonormal rows (``W W^T = I``), per stacked matrix."""
    u, _, vt = np.linalg.svd(weight, full_matrices=False)
    return u @ vt


# -- losses -------------------------------------------------------------------

def projected_mse(student: Tensor, teacher, weight: Tensor, row_mask=None,
                  copies: int = 1) -> Tensor:
    """``copies * MSE(student @ weight, teacher)`` over unpadded rows.

    Shared by hidden-state and direct Q/K/V transfer, so the two differ only
    in which trace fields they feed in.  ``copies`` turns the element mean
    over a stack of equally sized matrices into a sum of per-matrix means.
    """
    target = _const(teacher)
    pred = T.matmul(student, weight)
    mask = None if row_mask is None else _expand_rows(row_mask, pred.ndim)
    loss = T.mse(pred, target, mask)
    return T.scale(loss, copies) if copies != 1 else loss


def od_loss(teacher_logits, student_logits: Tensor, temperature: float = 1.0,
            mask=None) -> Tensor:
    """Temperature-scaled soft cross-entropy, ``T^2 * CE(p_T, p_S)``.

    ``mask`` selects the supervised positions; averaging is over those rows.
    """
    if temperature <= 0:
        raise SpecError("temperature must be positive")
    t = _const(teacher_logits)
    if t.shape != student_logits.shape:
        raise T.ShapeError(f"logit shapes differ: {t.shape} vs {student_logits.shape}")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not mask.any():
            raise ValueError("od_loss: mask selects no positions")
        t = t[mask]
        student_logits = T.take(student_logits, mask)
    target = T._softmax(t / temperature)
    ce = T.soft_cross_entropy(target, T.scale(student_logits, 1.0 / temperature))
    return T.scale(ce, temperature ** 2)


def hs_loss(trace_s: ForwardTrace, trace_t: ForwardTrace, mapping: LayerMapping,
            projections: ProjectionBank) -> Tensor:
    """Sum over mapped pairs of MSE(H_i^S W_i^j, H_j^T)."""
    total = None
    for i, j in mapping.pairs():
        if (i, j) not in projections.hs:
            raise KeyError(f"no projection for mapped pair (student {i}, teacher {j})")
        term = projected_mse(trace_s.hidden(i), trace_t.hidden(j), projections.hs[(i, j)],
                             trace_s.mask)
        total = term if total is None else T.add(total, term)
    if total is None:
        raise SpecError("layer mapping has no pairs")
    return total


def cosine_hs_loss(trace_s: ForwardTrace, trace_t: ForwardTrace,
                   mapping: LayerMapping) -> Tensor:
    """Mean over mapped pairs and positions of ``1 - cos(H_i^S row, H_j^T row)``."""
    pairs = list(mapping.pairs())
    if not pairs:
        raise SpecError("layer mapping has no pairs")
    weight = np.asarray(trace_s.mask, dtype=np.float64)
    count = weight.sum()
    total = None
    for i, j in pairs:
        hs, ht = trace_s.hidden(i), _const(trace_t.hidden(j))
        if hs.shape != ht.shape:
            raise T.ShapeError("cosine hidden-state loss needs equal hidden sizes "
                               f"({hs.shape[-1]} vs {ht.shape[-1]})")
        dot = T.tsum(T.mul(hs, ht), axis=-1)
        norm_s = T.sqrt(T.add(T.tsum(T.mul(hs, hs), axis=-1), 1e-24))
        norm_t = np.sqrt((ht ** 2).sum(axis=-1) + 1e-24)
        cos = T.div(dot, T.mul(norm_s, norm_t))
        term = T.scale(T.tsum(T.mul(T.sub(1.0, cos), weight)), 1.0 / count)
        total = term if total is None else T.add(total, term)
    return T.scale(total, 1.0 / len(pairs))


def _last_layer(trace: ForwardTrace, layer: int | None) -> int:
    return trace.num_layers if layer is None else layer


def minilmv2_loss(trace_s: ForwardTrace, trace_t: ForwardTrace, student_layer: int | None,
                  teacher_layer: int, num_relation_heads: int) -> Tensor:
    """Sum over Q/K/V and relation heads of CE(R^T, R^S) on relation matrices.

    The student side enters the cross-entropy as pre-softmax scaled Gram
    logits, so the softmax is applied exactly once.
    """
    i = _last_layer(trace_s, student_layer)
    total = None
    for kind in QKV:
        a_s = _relation_heads(trace_s, kind, i, num_relation_heads)
        with T.no_grad():
            target = relation_matrix(
                Tensor(_const(_relation_heads(trace_t, kind, teacher_layer, num_relation_heads))),
                trace_t.mask).data
        logits = relation_logits(a_s, trace_s.mask)
        rows = np.broadcast_to(_expand_keys(trace_s.mask, logits.ndim - 1), logits.shape[:-1])
        term = T.scale(T.soft_cross_entropy(target, logits, rows), num_relation_heads)
        total = term if total is None else T.add(total, term)
    return total


def direct_minilm_loss(trace_s: ForwardTrace, trace_t: ForwardTrace, student_layer: int | None,
                       teacher_layer: int, num_relation_heads: int,
                       projections: ProjectionBank) -> Tensor:
    """Sum over Q/K/V and relation heads of MSE(A^S W_{alpha,a}, A^T)."""
    i = _last_layer(trace_s, student_layer)
    total = None
    for kind in QKV:
        if kind not in projections.mha:
            raise KeyError(f"no projection for relation heads of {kind}")
        weight = projections.mha[kind]
        if weight.shape[0] != num_relation_heads:
            raise T.ShapeError(f"projection stack for {kind} has {weight.shape[0]} heads, "
                               f"expected {num_relation_heads}")
        a_s = _relation_heads(trace_s, kind, i, num_relation_heads)
        a_t = _const(_relation_heads(trace_t, kind, teacher_layer, num_relation_heads))
        term = projected_mse(a_s, a_t, weight, trace_s.mask, copies=num_relation_heads)
        total = term if total is None else T.add(total, term)
    return total


def gram_mse_loss(trace_s: ForwardTrace, trace_t: ForwardTrace, student_layer: int | None,
                  teacher_layer: int, num_relation_heads: int) -> Tensor:
    """Sum over Q/K/V and relation heads of MSE(A^S A^S^T, A^T A^T^T).

    The limit of the direct loss when each projection is orthogonal.
    """
    i = _last_layer(trace_s, student_layer)
    total = None
    for kind in QKV:
        a_s = _relation_heads(trace_s, kind, i, num_relation_heads)
        a_t = _const(_relation_heads(trace_t, kind, teacher_layer, num_relation_heads))
        gram_s = T.matmul(a_s, T.transpose(a_s))
        gram_t = a_t @ np.swapaxes(a_t, -1, -2)
        mask = np.asarray(trace_s.mask, dtype=bool)
        pair = _expand_keys(mask, gram_s.ndim) & np.swapaxes(_expand_keys(mask, gram_s.ndim),
                                                             -1, -2)
        term = T.scale(T.mse(gram_s, gram_t, pair), num_relation_heads)
        total = term if total is None else T.add(total, term)
    return total


# -- run specification --------------------------------------------------------

def _normalise_method(method: str) -> str:
    key = method.strip().lower().replace("_", "-").replace(" ", "")
    aliases = {"directminilm": "directminilm", "direct-minilm": "directminilm",
               "minilm-v2": "minilmv2", "minilmv2": "minilmv2", "cosinehs": "cosine-hs",
               "cosine-hs": "cosine-hs", "hs": "hs", "od": "od"}
    if key not in aliases:
        raise SpecError(f"unknown distillation method {method!r}; choose from {list(METHODS)}")
    return aliases[key]


def parse_teacher_layer(value, teacher_layers: int) -> int:
    """Accept ``12``, ``"L"``, ``"L-1"`` style teacher-layer references."""
    if isinstance(value, (int, np.integer)):
        return int(value)
    text = str(value).replace(" ", "").upper()
    if text.startswith("L"):
        rest = text[1:]
        if not rest:
            return teacher_layers
        if rest.startswith("-") and rest[1:].isdigit():
            return teacher_layers - int(rest[1:])
    if text.isdigit():
        return int(text)
    raise SpecError(f"cannot parse teacher layer {value!r}")


def default_relation_heads(method: str, student: ModelConfig, teacher: ModelConfig) -> int:
    if method == "directminilm":
        return student.num_heads
    for heads in (MINILMV2_RELATION_HEADS, 4 * student.num_heads, student.num_heads):
        if student.hidden_size % heads == 0 and teacher.hidden_size % heads == 0:
            return heads
    return math.gcd(student.hidden_size, teacher.hidden_size)


@dataclass(frozen=True)
class DistillSpec:
    """Which objective to run and with which mapping / hyperparameters."""

    method: str
    strategy: str | None = None
    teacher_layer: int | str | None = None
    temperature: float = 1.0
    relation_heads: int | None = None
    orthogonality_constraint: bool = False
    od_positions: str = "masked"

    def __post_init__(self):
        object.__setattr__(self, "method", _normalise_method(self.method))

    @property
    def uses_mapping(self) -> bool:
        return self.method in ("hs", "cosine-hs")

    @property
    def uses_relation_heads(self) -> bool:
        return self.method in ("minilmv2", "directminilm")

    def resolve(self, student: ModelConfig, teacher: ModelConfig,
                strict: bool = False) -> "DistillSpec":
        """Validate against both architectures and fill in defaults.

        With ``strict``, MHA teacher layers outside ``{L, L-1, L-2}`` are
        errors instead of warnings.
        """
        if self.temperature <= 0:
            raise SpecError("temperature must be positive")
        if self.od_positions not in ("masked", "all"):
            raise SpecError("od_positions must be 'masked' or 'all'")
        spec = self
        if self.uses_mapping:
            if self.strategy is None:
                raise SpecError(f"{self.method} needs a layer mapping strategy")
            build_mapping(self.strategy, student.num_layers, teacher.num_layers)
            if self.method == "cosine-hs" and student.hidden_size != teacher.hidden_size:
                raise SpecError("cosine hidden-state loss needs equal hidden sizes "
                                "(architecture-constrained student)")
        if self.uses_relation_heads:
            lt = teacher.num_layers
            layer = lt if self.teacher_layer is None else parse_teacher_layer(
                self.teacher_layer, lt)
            if not 1 <= layer <= lt:
                raise SpecError(f"teacher layer {layer} outside [1, {lt}]")
            explored = [lt - k for k in EXPLORED_MHA_OFFSETS if lt - k >= 1]
            if layer not in explored:
                msg = (f"teacher layer {layer} is outside the explored set "
                       f"{{L, L-1, L-2}} = {explored} for attention transfer")
                if strict:
                    raise SpecError(msg)
                warnings.warn(msg, stacklevel=2)
            heads = self.relation_heads or default_relation_heads(self.method, student, teacher)
            for who, cfg in (("student", student), ("teacher", teacher)):
                if cfg.hidden_size % heads:
                    raise SpecError(f"{heads} relation heads do not divide the {who} "
                                    f"hidden size {cfg.hidden_size}")
            spec = replace(spec, teacher_layer=layer, relation_heads=heads)
        return spec

    def mapping(self, student: ModelConfig, teacher: ModelConfig) -> LayerMapping:
        return build_mapping(self.strategy, student.num_layers, teacher.num_layers)

    def make_projections(self, student: ModelConfig, teacher: ModelConfig,
                         rng: np.random.Generator, identity: bool = False) -> ProjectionBank:
        if self.method == "hs":
            return ProjectionBank.for_hidden_states(self.mapping(student, teacher),
                                                    student.hidden_size, teacher.hidden_size,
                                                    rng, identity)
        if self.method == "directminilm":
            return ProjectionBank.for_relation_heads(self.relation_heads, student.hidden_size,
                                                     teacher.hidden_size, rng, identity)
        return ProjectionBank()

    def to_dict(self) -> dict:
        return {"method": self.method, "strategy": self.strategy,
                "teacher_layer": self.teacher_layer, "temperature": self.temperature,
                "relation_heads": self.relation_heads,
                "orthogonality_constraint": self.orthogonality_constraint,
                "od_positions": self.od_positions}


def distillation_loss(spec: DistillSpec, trace_s: ForwardTrace, trace_t: ForwardTrace,
                      projections: ProjectionBank, mlm_labels=None,
                      mapping: LayerMapping | None = None) -> Tensor:
    """Evaluate the single objective named by a resolved ``spec``."""
    if spec.method == "od":
        if spec.od_positions == "masked":
            if mlm_labels is None:
                raise SpecError("masked-position output transfer needs MLM labels")
            mask = np.asarray(mlm_labels) != -1
        else:
            mask = trace_s.mask
        return od_loss(trace_t.logits, trace_s.logits, spec.temperature, mask)
    if spec.method in ("hs", "cosine-hs"):
        if mapping is None:
            mapping = spec.mapping(trace_s.config, trace_t.config)
        if spec.method == "hs":
            return hs_loss(trace_s, trace_t, mapping, projections)
        return cosine_hs_loss(trace_s, trace_t, mapping)
    if spec.method == "minilmv2":
        return minilmv2_loss(trace_s, trace_t, None, spec.teacher_layer, spec.relation_heads)
    return direct_minilm_loss(trace_s, trace_t, None, spec.teacher_layer, spec.relation_heads,
                              projections)
