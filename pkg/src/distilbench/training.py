"""Teacher pretraining, single- and multi-stage distillation, probe finetuning."""

from __future__ import annotations

import csv
import hashlib
import json
import queue
import threading
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Iterable, Iterator

import numpy as np

from . import checkpoint
from . import tensor as T
from .data import Batch, EncodedCorpus, make_rng, ordered_batches, sample_batch
from .objectives import DistillSpec, ProjectionBank, distillation_loss, orthogonalize
from .optim import AdamW, linear_warmup_decay
from .tensor import Tensor, no_grad
from .transformer import ModelConfig, TransformerModel, forward, init_parameters, truncated_normal

STAGES = ("teacher-pretrain", "distill", "od-after-distill")


@dataclass(frozen=True)
class TrainConfig:
    """Optimisation settings for one training stage.

    The defaults are the full-scale distillation settings; :meth:`desk`
    returns CPU-sized budgets with the same schedule shape.
    """

    peak_lr: float = 5e-4
    warmup_fraction: float = 0.05
    total_steps: int = 10_000
    batch_size: int = 32
    seq_len: int = 256
    seed: int = 0
    stage: str = "distill"
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-6
    grad_clip: float | None = None
    mask_prob: float = 0.15

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}")
        if not 0.0 < self.warmup_fraction < 1.0:
            raise ValueError("warmup_fraction must lie in (0, 1)")
        for name in ("total_steps", "batch_size", "seq_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.peak_lr <= 0:
            raise ValueError("peak_lr must be positive")

    @classmethod
    def paper(cls, stage: str = "distill", **overrides) -> "TrainConfig":
        lr = 3e-4 if stage == "od-after-distill" else 5e-4
        return replace(cls(peak_lr=lr, stage=stage), **overrides)

    @classmethod
    def desk(cls, stage: str = "distill", **overrides) -> "TrainConfig":
        base = {
            "teacher-pretrain": dict(peak_lr=3e-3, total_steps=1500, batch_size=32),
            "distill": dict(peak_lr=3e-3, total_steps=400, batch_size=32),
            # same 3:5 ratio to the distill stage as the full-scale settings
            "od-after-distill": dict(peak_lr=1.8e-3, total_steps=400, batch_size=32),
        }[stage]
        return replace(cls(stage=stage, seq_len=64, warmup_fraction=0.05, **base), **overrides)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ValueError(f"unknown training keys: {sorted(unknown)}")
        return cls(**values)


def lr_at(step: int, config: TrainConfig) -> float:
    return linear_warmup_decay(step, config.peak_lr, config.total_steps, config.warmup_fraction)


@dataclass
class LossRecord:
    step: int
    stage: str
    loss: float
    lr: float


@dataclass
class RunManifest:
    """Everything needed to rerun (and audit) one training run."""

    kind: str
    train: dict
    student_config: dict
    spec: dict | None = None
    teacher_id: str | None = None
    initial_checkpoint_id: str | None = None
    final_checkpoint_id: str | None = None
    losses: list[LossRecord] = field(default_factory=list)
    stages: list["RunManifest"] = field(default_factory=list)

    def loss_values(self, stage: str | None = None) -> np.ndarray:
        return np.array([r.loss for r in self.all_losses() if stage is None or r.stage == stage])

    def all_losses(self) -> list[LossRecord]:
        if self.stages:
            return [r for s in self.stages for r in s.all_losses()]
        return list(self.losses)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind, "spec": self.spec, "train": self.train,
            "student_config": self.student_config, "teacher_id": self.teacher_id,
            "initial_checkpoint_id": self.initial_checkpoint_id,
            "final_checkpoint_id": self.final_checkpoint_id,
            "losses": [asdict(r) for r in self.losses],
            "stages": [s.to_dict() for s in self.stages],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunManifest":
        return cls(kind=d["kind"], train=d["train"], student_config=d["student_config"],
                   spec=d.get("spec"), teacher_id=d.get("teacher_id"),
                   initial_checkpoint_id=d.get("initial_checkpoint_id"),
                   final_checkpoint_id=d.get("final_checkpoint_id"),
                   losses=[LossRecord(**r) for r in d.get("losses", [])],
                   stages=[cls.from_dict(s) for s in d.get("stages", [])])

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json() + "\n")

    @classmethod
    def read(cls, path) -> "RunManifest":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def write_loss_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["step", "stage", "loss", "lr"])
            for r in self.all_losses():
                writer.writerow([r.step, r.stage, repr(r.loss), repr(r.lr)])


def smoothed(values, window: int = 100) -> np.ndarray:
    """Trailing moving average (valid part only)."""
    values = np.asarray(values, dtype=float)
    window = min(window, len(values))
    if window < 1:
        raise ValueError("no values to smooth")
    return np.convolve(values, np.ones(window) / window, mode="valid")


def model_digest(model: TransformerModel, extra=None) -> str:
    blob = checkpoint.encode(checkpoint.model_tensors(model, extra))
    return hashlib.sha256(blob).hexdigest()


def prefetch(items: Iterable, size: int = 2) -> Iterator:
    """Produce ``items`` on a worker thread through a bounded queue."""
    done = object()
    q: queue.Queue = queue.Queue(maxsize=size)
    errors: list[BaseException] = []

    def worker():
        try:
            for item in items:
                q.put(item)
        except BaseException as exc:  # re-raised in the consumer
            errors.append(exc)
        finally:
            q.put(done)

    thread = threading.Thread(target=worker, daemon=True)
    thread.start()
    while True:
        item = q.get()
        if item is done:
            break
        yield item
    thread.join()
    if errors:
        raise errors[0]


def _batches(corpus: EncodedCorpus, config: TrainConfig, prefetch_batches: bool):
    items = (sample_batch(corpus, config.batch_size, (config.seed, step), config.seq_len,
                          config.mask_prob) for step in range(config.total_steps))
    return prefetch(items) if prefetch_batches else items


def _check_finite(loss: Tensor, step: int) -> None:
    if not np.isfinite(loss.item()):
        raise FloatingPointError(f"non-finite loss at step {step}")


# -- teacher pretraining ----------------------------------------------------------

@dataclass
class TeacherRun:
    model: TransformerModel
    manifest: RunManifest


def pretrain_teacher(corpus: EncodedCorpus, model_cfg: ModelConfig, config: TrainConfig,
                     prefetch_batches: bool = True) -> TeacherRun:
    """Masked-language-model training of a toy teacher from random init."""
    if len(corpus) < config.batch_size:
        raise ValueError(f"corpus of {len(corpus)} sequences is smaller than one batch")
    if corpus.vocab_size > model_cfg.vocab_size:
        raise ValueError("corpus vocabulary does not fit the model's vocab_size")
    model = init_parameters(model_cfg, config.seed)
    opt = AdamW(model.params, (config.beta1, config.beta2), config.eps, config.weight_decay,
                config.grad_clip)
    rng = make_rng(config.seed, 7)
    log = []
    for step, batch in enumerate(_batches(corpus, config, prefetch_batches)):
        if not (batch.mlm_labels != -1).any():
            continue
        trace = forward(model, batch.tokens, batch.attention_mask, train=True, rng=rng)
        loss = T.cross_entropy(trace.logits, batch.mlm_labels)
        _check_finite(loss, step)
        opt.zero_grad()
        loss.backward()
        lr = lr_at(step + 1, config)
        opt.step(lr)
        log.append(LossRecord(step, config.stage, loss.item(), lr))
    manifest = RunManifest("teacher-pretrain", config.to_dict(), model_cfg.to_dict(),
                           losses=log, final_checkpoint_id=model_digest(model))
    return TeacherRun(model, manifest)


def evaluate_mlm(model: TransformerModel, corpus: EncodedCorpus, seed: int = 0,
                 batch_size: int = 64, mask_prob: float = 0.15) -> dict[str, float]:
    """Masked-token accuracy and the best constant-prediction baseline."""
    from .data import mask_batch

    correct = total = 0
    counts: dict[int, int] = {}
    with no_grad():
        for k, batch in enumerate(ordered_batches(corpus, batch_size)):
            batch = mask_batch(batch, mask_prob, (seed, k), corpus.vocab_size, split=None)
            sel = batch.mlm_labels != -1
            if not sel.any():
                continue
            logits = forward(model, batch.tokens, batch.attention_mask).logits.data
            pred = logits.argmax(axis=-1)
            correct += int((pred[sel] == batch.mlm_labels[sel]).sum())
            total += int(sel.sum())
            for tok in batch.mlm_labels[sel]:
                counts[int(tok)] = counts.get(int(tok), 0) + 1
    return {"accuracy": correct / total, "majority_baseline": max(counts.values()) / total,
            "positions": total}


# -- distillation -----------------------------------------------------------------

@dataclass
class DistillResult:
    student: TransformerModel
    projections: ProjectionBank
    manifest: RunManifest


def distill(teacher: TransformerModel, student_cfg: ModelConfig, spec: DistillSpec,
            config: TrainConfig, corpus: EncodedCorpus, *,
            student: TransformerModel | None = None, identity_projections: bool = False,
            teacher_id: str | None = None, strict: bool = False,
            prefetch_batches: bool = True) -> DistillResult:
    """Train a student with the single objective named by ``spec``.

    ``student`` continues from existing weights (copied); otherwise the
    student is randomly initialised from ``config.seed``.  Teacher weights
    are never touched.
    """
    spec = spec.resolve(student_cfg, teacher.config, strict=strict)
    if len(corpus) < config.batch_size:
        raise ValueError(f"corpus of {len(corpus)} sequences is smaller than one batch")
    if student is None:
        student = init_parameters(student_cfg, config.seed)
    else:
        if student.config != student_cfg:
            raise ValueError("provided student does not match student_cfg")
        student = student.copy()
    initial_id = model_digest(student)
    projections = spec.make_projections(student_cfg, teacher.config,
                                        make_rng(config.seed, 11), identity=identity_projections)
    mapping = spec.mapping(student_cfg, teacher.config) if spec.uses_mapping else None
    trainable = {**student.params, **projections.named_parameters()}
    opt = AdamW(trainable, (config.beta1, config.beta2), config.eps, config.weight_decay,
                config.grad_clip)
    need_logits = spec.method == "od"
    rng = make_rng(config.seed, 13)
    log = []
    for step, batch in enumerate(_batches(corpus, config, prefetch_batches)):
        loss = _distill_loss(spec, teacher, student, projections, mapping, batch, need_logits,
                             rng)
        _check_finite(loss, step)
        opt.zero_grad()
        loss.backward()
        lr = lr_at(step + 1, config)
        opt.step(lr)
        if spec.orthogonality_constraint:
            for w in projections.mha.values():
                w.data[...] = orthogonalize(w.data)
        log.append(LossRecord(step, config.stage, loss.item(), lr))
    manifest = RunManifest("distill", config.to_dict(), student_cfg.to_dict(), spec.to_dict(),
                           teacher_id or model_digest(teacher), initial_id,
                           model_digest(student), log)
    return DistillResult(student, projections, manifest)


def _distill_loss(spec, teacher, student, projections, mapping, batch: Batch, need_logits,
                  rng) -> Tensor:
    with no_grad():
        trace_t = forward(teacher, batch.tokens, batch.attention_mask,
                          compute_logits=need_logits)
    trace_s = forward(student, batch.tokens, batch.attention_mask, train=True, rng=rng,
                      compute_logits=need_logits)
    return distillation_loss(spec, trace_s, trace_t, projections, batch.mlm_labels, mapping)


def distill_multistage(teacher: TransformerModel, student_cfg: ModelConfig,
                       hs_spec: DistillSpec, od_spec: DistillSpec, hs_config: TrainConfig,
                       od_config: TrainConfig, corpus: EncodedCorpus, **kwargs) -> DistillResult:
    """Hidden-state transfer, then output transfer started from its checkpoint.

    Stage-1 projections are discarded; the output objective has none.
    """
    if hs_spec.method not in ("hs", "cosine-hs"):
        raise ValueError("stage 1 must be a hidden-state objective")
    if od_spec.method != "od":
        raise ValueError("stage 2 must be output-distribution transfer")
    first = distill(teacher, student_cfg, hs_spec, hs_config, corpus, **kwargs)
    kwargs.pop("identity_projections", None)
    second = distill(teacher, student_cfg, od_spec, replace(od_config, stage="od-after-distill"),
                     corpus, student=first.student, **kwargs)
    manifest = RunManifest("distill-multistage", second.manifest.train, student_cfg.to_dict(),
                           {"stage1": first.manifest.spec, "stage2": second.manifest.spec},
                           first.manifest.teacher_id, first.manifest.initial_checkpoint_id,
                           second.manifest.final_checkpoint_id,
                           stages=[first.manifest, second.manifest])
    return DistillResult(second.student, second.projections, manifest)


# -- probe finetuning -------------------------------------------------------------

@dataclass(frozen=True)
class ProbeConfig:
    steps: int = 100
    batch_size: int = 32
    peak_lr: float = 3e-4
    warmup_fraction: float = 0.1
    weight_decay: float = 0.01
    num_classes: int = 2
    freeze_encoder: bool = False
    seed: int = 0
    max_len: int | None = None


@dataclass
class ProbeResult:
    accuracy: float
    losses: list[float]


def _probe_logits(model, head_w, head_b, batch: Batch, train: bool, rng) -> Tensor:
    trace = forward(model, batch.tokens, batch.attention_mask, train=train, rng=rng,
                    compute_logits=False)
    first = T.take(trace.hidden_states[-1], (slice(None), 0))
    return T.add(T.matmul(first, head_w), head_b)


def probe_finetune(model: TransformerModel, train: EncodedCorpus, test: EncodedCorpus,
                   config: ProbeConfig = ProbeConfig()) -> ProbeResult:
    """Linear classifier on the first-position hidden state, finetuned jointly.

    The input model is not modified.
    """
    if train.labels is None or test.labels is None:
        raise ValueError("probe corpora need labels")
    model = model.copy()
    if config.freeze_encoder:
        model.freeze()
    rng = make_rng(config.seed, 17)
    head_w = Tensor(truncated_normal(rng, (model.config.hidden_size, config.num_classes)),
                    requires_grad=True)
    head_b = Tensor(np.zeros(config.num_classes), requires_grad=True)
    params = {"probe.weight": head_w, "probe.bias": head_b}
    if not config.freeze_encoder:
        params.update(model.named_parameters(include_head=False))
    opt = AdamW(params, weight_decay=config.weight_decay)
    losses = []
    for step in range(config.steps):
        batch = sample_batch(train, min(config.batch_size, len(train)), (config.seed, 19, step),
                             config.max_len, mask_prob=0.0)
        logits = _probe_logits(model, head_w, head_b, batch, True, rng)
        loss = T.cross_entropy(logits, batch.probe_labels)
        opt.zero_grad()
        loss.backward()
        opt.step(linear_warmup_decay(step + 1, config.peak_lr, config.steps,
                                     config.warmup_fraction))
        losses.append(loss.item())
    correct = 0
    with no_grad():
        for batch in ordered_batches(test, 128, config.max_len):
            pred = _probe_logits(model, head_w, head_b, batch, False, None).data.argmax(-1)
            correct += int((pred == batch.probe_labels).sum())
    return ProbeResult(correct / len(test), losses)
