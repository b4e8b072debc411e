"""Desk-scale knowledge distillation for transformer encoders, on numpy."""

from .bench import (ComparisonTable, LatencyReport, SuiteCell, cmd_bench, cmd_compare,
                    nas_reward)
from .checkpoint import load_model, save_model
from .data import Batch, Vocab, build_vocab, desk_corpus, mask_batch, synth_corpus
from .mapping import LayerMapping, build_mapping
from .objectives import (DistillSpec, ProjectionBank, SpecError, cosine_hs_loss,
                         direct_minilm_loss, gram_mse_loss, hs_loss, minilmv2_loss, od_loss,
                         relation_matrix)
from .optim import AdamW, adamw_step
from .tensor import GraphError, ShapeError, Tensor, no_grad
from .training import (ProbeConfig, RunManifest, TrainConfig, distill, distill_multistage,
                       lr_at, pretrain_teacher, probe_finetune)
from .transformer import ModelConfig, TransformerModel, forward, get_preset, init_parameters

__all__ = [
    "AdamW", "Batch", "ComparisonTable", "DistillSpec", "GraphError", "LatencyReport",
    "LayerMapping", "ModelConfig", "ProbeConfig", "ProjectionBank", "RunManifest", "ShapeError",
    "SpecError", "SuiteCell", "Tensor", "TrainConfig", "TransformerModel", "Vocab",
    "adamw_step", "build_mapping", "build_vocab", "cmd_bench", "cmd_compare", "cosine_hs_loss",
    "desk_corpus", "direct_minilm_loss", "distill", "distill_multistage", "forward",
    "get_preset", "gram_mse_loss", "hs_loss", "init_parameters", "load_model", "lr_at",
    "mask_batch", "minilmv2_loss", "nas_reward", "no_grad", "od_loss", "pretrain_teacher",
    "probe_finetune", "relation_matrix", "save_model", "synth_corpus",
]
