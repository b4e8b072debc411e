"""Command-line entry point.

Every verb reads one JSON config (``--config``), validates all of it before
any compute, and writes its outputs under ``--out``.  Exit codes: 0 on
success, 2 for configuration errors, 3 for runtime or numeric failures.
"""

from __future__ import annotations

import argparse
import json
import sys
import warnings
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Any

from threadpoolctl import threadpool_limits

from . import bench, checkpoint
from .data import (EncodedCorpus, desk_corpus, read_pretokenized, read_probe_labels)
from .objectives import DistillSpec, SpecError
from .training import (ProbeConfig, TrainConfig, distill, distill_multistage, evaluate_mlm,
                       pretrain_teacher, probe_finetune)
from .transformer import ModelConfig, get_preset

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


class ConfigError(ValueError):
    pass


# -- config parsing ---------------------------------------------------------------

def _strict(cls, values: Any, where: str, **fixed):
    """Build dataclass ``cls`` from a JSON object, refusing unknown keys."""
    if values is None:
        values = {}
    if not isinstance(values, dict):
        raise ConfigError(f"{where}: expected an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}; allowed {sorted(known)}")
    try:
        return cls(**{**values, **fixed})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _check_keys(cfg: dict, allowed: set[str], required: set[str] = frozenset(),
                where: str = "config") -> None:
    unknown = sorted(set(cfg) - allowed)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}; allowed {sorted(allowed)}")
    missing = sorted(required - set(cfg))
    if missing:
        raise ConfigError(f"{where}: missing keys {missing}")


def load_config(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return cfg


@dataclass(frozen=True)
class CorpusConfig:
    """Synthetic corpus (default) or pre-tokenized files, split into three parts.

    Sequences are taken in order: ``train`` for pretraining or distillation,
    then ``probe_train`` and ``probe_test`` for the classification probe.
    """

    seed: int = 0
    train: int = 5000
    probe_train: int = 200
    probe_test: int = 1000
    max_len: int = 64
    pretokenized: str | None = None
    labels: str | None = None
    vocab_size: int | None = None

    def total(self) -> int:
        return self.train + self.probe_train + self.probe_test


@dataclass
class Corpora:
    train: EncodedCorpus
    probe_train: EncodedCorpus
    probe_test: EncodedCorpus


def build_corpora(cfg: CorpusConfig, model_vocab: int) -> Corpora:
    if cfg.pretokenized is None:
        _, _, enc = desk_corpus(cfg.total(), cfg.seed, model_vocab, cfg.max_len)
    else:
        seqs = read_pretokenized(cfg.pretokenized)
        labels = read_probe_labels(cfg.labels) if cfg.labels else None
        if labels is not None and len(labels) != len(seqs):
            raise ConfigError("probe label count does not match the sequence count")
        vocab = cfg.vocab_size or model_vocab
        if any(t >= vocab or t < 0 for s in seqs for t in s):
            raise ConfigError(f"pre-tokenized ids fall outside [0, {vocab})")
        enc = EncodedCorpus([s[:cfg.max_len] for s in seqs], labels, vocab)
    if len(enc) < cfg.total():
        raise ConfigError(f"corpus has {len(enc)} sequences, split needs {cfg.total()}")
    a, b = cfg.train, cfg.train + cfg.probe_train
    return Corpora(enc.subset(range(a)), enc.subset(range(a, b)),
                   enc.subset(range(b, cfg.total())))


def _model_config(value, where: str) -> ModelConfig:
    try:
        if isinstance(value, str):
            return get_preset(value)
        if isinstance(value, dict):
            return _strict(ModelConfig, value, where)
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from exc
    raise ConfigError(f"{where}: expected a preset name or an object")


def _train_config(values, stage: str, seed: int | None, where: str) -> TrainConfig:
    if values is not None and not isinstance(values, dict):
        raise ConfigError(f"{where}: expected an object")
    values = dict(values or {})
    unknown = sorted(set(values) - {f.name for f in fields(TrainConfig)})
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    if "stage" in values:
        raise ConfigError(f"{where}: 'stage' is fixed by the command")
    if seed is not None:
        values["seed"] = seed
    try:
        return TrainConfig.desk(stage, **values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _spec(values, where: str) -> DistillSpec:
    return _strict(DistillSpec, values, where)


def _resolve(spec: DistillSpec, student: ModelConfig, teacher: ModelConfig, where: str):
    try:
        return spec.resolve(student, teacher, strict=True)
    except (SpecError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _load_teacher(path):
    if path is None:
        raise ConfigError("config needs a 'teacher' checkpoint path")
    if not Path(path).is_file():
        raise ConfigError(f"teacher checkpoint not found: {path}")
    return path


def _out_dir(out) -> Path:
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write(path: Path, text: str) -> None:
    path.write_text(text if text.endswith("\n") else text + "\n", encoding="utf-8")


def _write_json(path: Path, obj) -> None:
    _write(path, json.dumps(obj, indent=2, sort_keys=True))


# -- verbs ------------------------------------------------------------------------

def cmd_pretrain_teacher(cfg: dict, out: Path, seed: int | None) -> None:
    _check_keys(cfg, {"model", "train", "corpus"})
    model_cfg = _model_config(cfg.get("model", "desk-teacher"), "model")
    train = _train_config(cfg.get("train"), "teacher-pretrain", seed, "train")
    corpus_cfg = _strict(CorpusConfig, cfg.get("corpus"), "corpus")
    data = build_corpora(corpus_cfg, model_cfg.vocab_size)

    run = pretrain_teacher(data.train, model_cfg, train)
    checkpoint.save_model(out / "teacher.kdt", run.model)
    run.manifest.write(out / "manifest.json")
    run.manifest.write_loss_csv(out / "losses.csv")
    _write_json(out / "mlm_eval.json", evaluate_mlm(run.model, data.probe_test, seed=train.seed))


def _distill_inputs(cfg: dict, seed: int | None, keys: set[str]):
    _check_keys(cfg, {"teacher", "student", "train", "corpus", "identity_projections"} | keys,
                {"teacher", "student"})
    teacher_path = _load_teacher(cfg.get("teacher"))
    student_cfg = _model_config(cfg["student"], "student")
    corpus_cfg = _strict(CorpusConfig, cfg.get("corpus"), "corpus")
    return teacher_path, student_cfg, corpus_cfg


def _save_student(out: Path, result) -> None:
    extra = {k: v for k, v in result.projections.state_dict().items()}
    checkpoint.save_model(out / "student.kdt", result.student, extra)
    result.manifest.write(out / "manifest.json")
    result.manifest.write_loss_csv(out / "losses.csv")


def cmd_distill(cfg: dict, out: Path, seed: int | None) -> None:
    teacher_path, student_cfg, corpus_cfg = _distill_inputs(cfg, seed, {"spec"})
    spec = _spec(cfg.get("spec"), "spec")
    train = _train_config(cfg.get("train"), "distill", seed, "train")
    teacher, _ = checkpoint.load_model(teacher_path)
    spec = _resolve(spec, student_cfg, teacher.config, "spec")
    data = build_corpora(corpus_cfg, teacher.config.vocab_size)

    result = distill(teacher, student_cfg, spec, train, data.train,
                     identity_projections=bool(cfg.get("identity_projections", False)),
                     teacher_id=checkpoint.file_digest(teacher_path), strict=True)
    _save_student(out, result)


def cmd_distill_multistage(cfg: dict, out: Path, seed: int | None) -> None:
    teacher_path, student_cfg, corpus_cfg = _distill_inputs(
        cfg, seed, {"hs_spec", "od_spec", "od_train"})
    hs_spec = _spec(cfg.get("hs_spec", {"method": "hs", "strategy": "uniform+last"}), "hs_spec")
    od_spec = _spec(cfg.get("od_spec", {"method": "od"}), "od_spec")
    if hs_spec.method not in ("hs", "cosine-hs") or od_spec.method != "od":
        raise ConfigError("hs_spec must be a hidden-state method and od_spec must be 'od'")
    train = _train_config(cfg.get("train"), "distill", seed, "train")
    od_train = _train_config(cfg.get("od_train"), "od-after-distill", seed, "od_train")
    teacher, _ = checkpoint.load_model(teacher_path)
    hs_spec = _resolve(hs_spec, student_cfg, teacher.config, "hs_spec")
    od_spec = _resolve(od_spec, student_cfg, teacher.config, "od_spec")
    data = build_corpora(corpus_cfg, teacher.config.vocab_size)

    result = distill_multistage(teacher, student_cfg, hs_spec, od_spec, train, od_train,
                                data.train, teacher_id=checkpoint.file_digest(teacher_path),
                                identity_projections=bool(cfg.get("identity_projections", False)))
    _save_student(out, result)


def _suite_cell(values, where: str) -> bench.SuiteCell:
    cell = _strict(bench.SuiteCell, values, where)
    known = {bench.BASELINE, bench.TEACHER, bench.MULTISTAGE}
    if cell.method not in known:
        try:
            cell = replace(cell, method=cell.spec().method)
        except ValueError as exc:
            raise ConfigError(f"{where}: {exc}") from exc
    return cell


def cmd_compare(cfg: dict, out: Path, seed: int | None) -> None:
    _check_keys(cfg, {"teacher", "students", "cells", "seeds", "train", "od_train", "probe",
                      "corpus", "workers"}, {"teacher", "cells"})
    teacher_path = _load_teacher(cfg["teacher"])
    students = cfg.get("students", ["desk-6l"])
    student_cfgs = {s: _model_config(s, "students") for s in students}
    cells = [_suite_cell(c, f"cells[{k}]") for k, c in enumerate(cfg["cells"])]
    seeds = cfg.get("seeds", [0, 1, 2])
    if not seeds or not all(isinstance(s, int) for s in seeds):
        raise ConfigError("seeds must be a non-empty list of integers")
    train = _train_config(cfg.get("train"), "distill", seed, "train")
    od_train = _train_config(cfg.get("od_train"), "od-after-distill", seed, "od_train")
    probe = _strict(ProbeConfig, cfg.get("probe"), "probe")
    corpus_cfg = _strict(CorpusConfig, cfg.get("corpus"), "corpus")
    teacher, _ = checkpoint.load_model(teacher_path)
    for cell in cells:
        if cell.method in (bench.BASELINE, bench.TEACHER):
            continue
        spec = (DistillSpec("hs", cell.strategy or "uniform+last")
                if cell.method == bench.MULTISTAGE else cell.spec())
        for name, scfg in student_cfgs.items():
            _resolve(spec, scfg, teacher.config, f"cell {cell.label} / {name}")
    data = build_corpora(corpus_cfg, teacher.config.vocab_size)

    table = bench.cmd_compare(teacher, students, cells,
                              bench.SuiteData(data.train, data.probe_train, data.probe_test),
                              train, od_train, probe, seeds, int(cfg.get("workers", 1)))
    _write(out / "comparison.csv", table.to_csv())
    _write(out / "comparison.txt", table.render())
    print(table.render())


def cmd_probe(cfg: dict, out: Path, seed: int | None) -> None:
    _check_keys(cfg, {"model", "probe", "corpus", "seeds"}, {"model"})
    if not Path(cfg["model"]).is_file():
        raise ConfigError(f"model checkpoint not found: {cfg['model']}")
    probe = _strict(ProbeConfig, cfg.get("probe"), "probe")
    seeds = cfg.get("seeds", [probe.seed if seed is None else seed])
    corpus_cfg = _strict(CorpusConfig, cfg.get("corpus"), "corpus")
    model, _ = checkpoint.load_model(cfg["model"])
    data = build_corpora(corpus_cfg, model.config.vocab_size)

    accs = [probe_finetune(model, data.probe_train, data.probe_test,
                           replace(probe, seed=s)).accuracy for s in seeds]
    _write_json(out / "probe.json", {"seeds": seeds, "accuracies": accs,
                                     "mean": sum(accs) / len(accs)})
    print(" ".join(f"{a:.4f}" for a in accs))


def cmd_bench(cfg: dict, out: Path, seed: int | None, threads: int) -> None:
    _check_keys(cfg, {"presets", "batch", "seq_len", "runs", "warmup"})
    presets = cfg.get("presets", ["3l", "4l", "6l", "6l-distilbert", "teacher"])
    for p in presets:
        _model_config(p, "presets")
    report = bench.cmd_bench(presets, int(cfg.get("batch", 1)), int(cfg.get("seq_len", 128)),
                             int(cfg.get("runs", 5)), int(cfg.get("warmup", 1)), threads,
                             seed or 0)
    _write(out / "latency.csv", report.to_csv())
    _write(out / "latency.txt", report.render())
    print(report.render())


def cmd_nas_reward(cfg: dict, out: Path | None) -> None:
    _check_keys(cfg, {"hs_loss", "lat_s", "lat_t"}, {"hs_loss", "lat_s", "lat_t"})
    try:
        reward = bench.nas_reward(float(cfg["hs_loss"]), float(cfg["lat_s"]),
                                  float(cfg["lat_t"]))
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    if out is not None:
        _write_json(out / "reward.json", {**cfg, "reward": reward})
    print(f"{reward:.10f}")


# -- entry point ------------------------------------------------------------------

VERBS = ("pretrain-teacher", "distill", "distill-multistage", "compare", "probe", "bench",
         "nas-reward")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="distilbench",
                                     description="Desk-scale distillation workbench.")
    sub = parser.add_subparsers(dest="verb", required=True)
    for verb in VERBS:
        p = sub.add_parser(verb)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int, default=None, help="overrides the configured seed")
        p.add_argument("--threads", type=int, default=1, help="BLAS threads (default 1)")
        if verb == "nas-reward":
            p.add_argument("--hs-loss", type=float)
            p.add_argument("--lat-s", type=float)
            p.add_argument("--lat-t", type=float)
    return parser


def _dispatch(args) -> None:
    cfg = load_config(args.config) if args.config else {}
    if args.verb == "nas-reward":
        for key in ("hs_loss", "lat_s", "lat_t"):
            if getattr(args, key) is not None:
                cfg[key] = getattr(args, key)
        cmd_nas_reward(cfg, _out_dir(args.out) if args.out else None)
        return
    if args.threads < 1:
        raise ConfigError("--threads must be positive")
    if args.verb == "bench":
        cmd_bench(cfg, _out_dir(args.out or "."), args.seed, args.threads)
        return
    if not args.config:
        raise ConfigError(f"{args.verb} needs --config")
    handler = {"pretrain-teacher": cmd_pretrain_teacher, "distill": cmd_distill,
               "distill-multistage": cmd_distill_multistage, "compare": cmd_compare,
               "probe": cmd_probe}[args.verb]
    with threadpool_limits(limits=args.threads):
        handler(cfg, _out_dir(args.out or "."), args.seed)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            _dispatch(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
