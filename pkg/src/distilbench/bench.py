"""Latency benchmarking, the architecture-search reward, and method comparison suites."""

from __future__ import annotations

import csv
import io
import math
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .data import EncodedCorpus
from .objectives import DistillSpec
from .tensor import no_grad
from .training import (ProbeConfig, TrainConfig, distill, distill_multistage, probe_finetune)
from .transformer import TransformerModel, forward, get_preset, init_parameters

# -- latency --------------------------------------------------------------------

LATENCY_FIELDS = ("preset", "mean_ms", "std_ms", "runs", "warmup", "batch", "seq_len", "threads")


@dataclass
class LatencyRow:
    preset: str
    mean_ms: float
    std_ms: float
    runs: int
    warmup: int
    batch: int
    seq_len: int
    threads: int
    samples_ms: list[float] = field(default_factory=list, repr=False)


@dataclass
class LatencyReport:
    rows: list[LatencyRow]
    threads: int
    timestamp: str

    def __getitem__(self, preset: str) -> LatencyRow:
        for row in self.rows:
            if row.preset == preset:
                return row
        raise KeyError(preset)

    def means(self) -> dict[str, float]:
        return {r.preset: r.mean_ms for r in self.rows}

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(LATENCY_FIELDS)
        for r in self.rows:
            writer.writerow([r.preset, f"{r.mean_ms:.4f}", f"{r.std_ms:.4f}", r.runs, r.warmup,
                             r.batch, r.seq_len, r.threads])
        return buf.getvalue()

    def render(self) -> str:
        lines = [f"latency (ms), {self.threads} thread(s), {self.timestamp}"]
        width = max(len(r.preset) for r in self.rows)
        for r in self.rows:
            lines.append(f"{r.preset:<{width}}  {r.mean_ms:10.2f} ({r.std_ms:.2f})")
        return "\n".join(lines)


def time_forward(model: TransformerModel, tokens: np.ndarray, runs: int = 5,
                 warmup: int = 1) -> list[float]:
    """Wall-clock milliseconds of ``runs`` encoder passes after ``warmup`` discarded ones."""
    if runs < 1 or warmup < 0:
        raise ValueError("runs must be positive and warmup non-negative")
    samples = []
    with no_grad():
        for k in range(warmup + runs):
            start = time.perf_counter()
            forward(model, tokens, compute_logits=False)
            elapsed = (time.perf_counter() - start) * 1e3
            if k >= warmup:
                samples.append(elapsed)
    return samples


def cmd_bench(presets: Sequence[str], batch: int = 1, seq_len: int = 128, runs: int = 5,
              warmup: int = 1, threads: int = 1, seed: int = 0) -> LatencyReport:
    """Time inference forward passes of randomly initialised presets.

    The vocabulary head is excluded: latency is measured on the encoder,
    which is what the size comparison of the presets is about.
    """
    if runs < 5:
        raise ValueError("at least 5 timed runs are required")
    rows = []
    rng = np.random.default_rng(seed)
    with threadpool_limits(limits=threads):
        for name in presets:
            cfg = get_preset(name)
            if seq_len > cfg.max_seq_len:
                raise ValueError(f"seq_len {seq_len} exceeds {name}'s limit {cfg.max_seq_len}")
            model = init_parameters(cfg, seed)
            tokens = rng.integers(5, cfg.vocab_size, size=(batch, seq_len))
            samples = time_forward(model, tokens, runs, warmup)
            del model
            rows.append(LatencyRow(name, statistics.fmean(samples), statistics.stdev(samples),
                                   runs, warmup, batch, seq_len, threads, samples))
    stamp = datetime.now(timezone.utc).isoformat(timespec="seconds")
    return LatencyReport(rows, threads, stamp)


# -- architecture-search reward ---------------------------------------------------

LATENCY_TARGET = 0.6
LATENCY_EXPONENT = -0.06


def nas_reward(hs_loss: float, lat_s: float, lat_t: float) -> float:
    """``(1 - hs_loss) * (lat_s / (0.6 lat_t)) ** -0.06``."""
    if not (lat_s > 0 and lat_t > 0):
        raise ValueError("latencies must be positive")
    if not 0.0 <= hs_loss <= 1.0:
        raise ValueError("hs_loss must lie in [0, 1]")
    return (1.0 - hs_loss) * (lat_s / (LATENCY_TARGET * lat_t)) ** LATENCY_EXPONENT


# -- comparison suites ------------------------------------------------------------

MULTISTAGE = "od-after-hs"
BASELINE = "random-init"
TEACHER = "teacher"


@dataclass(frozen=True)
class SuiteCell:
    """One row of a comparison table: a method plus its mapping or layer choice."""

    method: str
    strategy: str | None = None
    teacher_layer: int | str | None = None
    relation_heads: int | None = None
    temperature: float = 1.0

    @property
    def choice(self) -> str:
        if self.method in (BASELINE, TEACHER):
            return "-"
        if self.strategy is not None:
            return self.strategy
        if self.teacher_layer is not None:
            return str(self.teacher_layer)
        return "-"

    @property
    def label(self) -> str:
        return f"{self.method}:{self.choice}"

    def spec(self) -> DistillSpec:
        return DistillSpec(self.method, self.strategy, self.teacher_layer, self.temperature,
                           self.relation_heads)


@dataclass
class CellResult:
    method: str
    choice: str
    student: str
    accuracies: list[float]
    status: str = "ok"
    error: str = ""
    best_per_method: bool = False

    @property
    def mean(self) -> float:
        return statistics.fmean(self.accuracies) if self.accuracies else math.nan

    @property
    def std(self) -> float:
        return statistics.stdev(self.accuracies) if len(self.accuracies) > 1 else 0.0


TABLE_FIELDS = ("method", "choice", "student", "mean", "std", "seeds", "accuracies", "status",
                "best_per_method")


@dataclass
class ComparisonTable:
    cells: list[CellResult]
    seeds: list[int]

    def get(self, method: str, student: str, choice: str | None = None) -> CellResult:
        for c in self.cells:
            if c.method == method and c.student == student and choice in (None, c.choice):
                return c
        raise KeyError((method, choice, student))

    def mark_best(self) -> None:
        groups: dict[tuple[str, str], list[CellResult]] = {}
        for c in self.cells:
            c.best_per_method = False
            if c.status == "ok":
                groups.setdefault((c.method, c.student), []).append(c)
        for group in groups.values():
            max(group, key=lambda c: c.mean).best_per_method = True

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(TABLE_FIELDS)
        for c in self.cells:
            writer.writerow([c.method, c.choice, c.student,
                             "" if c.status != "ok" else f"{100 * c.mean:.2f}",
                             "" if c.status != "ok" else f"{100 * c.std:.2f}",
                             len(self.seeds),
                             " ".join(f"{100 * a:.2f}" for a in c.accuracies),
                             c.status if c.status == "ok" else f"failed: {c.error}",
                             int(c.best_per_method)])
        return buf.getvalue()

    def render(self) -> str:
        """Rows are (method, choice), columns are student presets; ``*`` marks the best choice."""
        students = list(dict.fromkeys(c.student for c in self.cells))
        rows = list(dict.fromkeys((c.method, c.choice) for c in self.cells))
        header = ["method", "choice"] + students
        body = []
        for method, choice in rows:
            line = [method, choice]
            for s in students:
                try:
                    c = self.get(method, s, choice)
                except KeyError:
                    line.append("")
                    continue
                if c.status != "ok":
                    line.append("failed")
                else:
                    mark = "*" if c.best_per_method else " "
                    line.append(f"{100 * c.mean:5.1f} ± {100 * c.std:4.1f}{mark}")
            body.append(line)
        widths = [max(len(r[k]) for r in [header] + body) for k in range(len(header))]
        fmt = lambda r: "  ".join(v.ljust(w) for v, w in zip(r, widths)).rstrip()
        return "\n".join([fmt(header), fmt(["-" * w for w in widths])] + [fmt(r) for r in body])


@dataclass
class SuiteData:
    distill: EncodedCorpus
    probe_train: EncodedCorpus
    probe_test: EncodedCorpus


def _run_cell(cell: SuiteCell, student_name: str, teacher: TransformerModel, data: SuiteData,
              train: TrainConfig, od_train: TrainConfig, probe: ProbeConfig, seeds: Sequence[int],
              strict: bool) -> CellResult:
    student_cfg = get_preset(student_name)
    try:
        if cell.method == TEACHER:
            model = teacher
        elif cell.method == BASELINE:
            model = None
        elif cell.method == MULTISTAGE:
            hs = DistillSpec("hs", cell.strategy or "uniform+last")
            od = DistillSpec("od", temperature=cell.temperature)
            model = distill_multistage(teacher, student_cfg, hs, od, train, od_train,
                                       data.distill, strict=strict,
                                       prefetch_batches=False).student
        else:
            model = distill(teacher, student_cfg, cell.spec(), train, data.distill,
                            strict=strict, prefetch_batches=False).student
        accs = []
        for seed in seeds:
            m = model if model is not None else init_parameters(student_cfg, 1000 + seed)
            pc = ProbeConfig(**{**probe.__dict__, "seed": seed})
            accs.append(probe_finetune(m, data.probe_train, data.probe_test, pc).accuracy)
        return CellResult(cell.method, cell.choice, student_name, accs)
    except Exception as exc:  # a failed cell is reported, not fatal
        return CellResult(cell.method, cell.choice, student_name, [], "failed",
                          f"{type(exc).__name__}: {exc}")


def cmd_compare(teacher: TransformerModel, students: Sequence[str], cells: Sequence[SuiteCell],
                data: SuiteData, train: TrainConfig, od_train: TrainConfig,
                probe: ProbeConfig = ProbeConfig(), seeds: Sequence[int] = (0, 1, 2),
                workers: int = 1, strict: bool = True) -> ComparisonTable:
    """Distill every (cell, student) pair once, then probe each over ``seeds``.

    Cells are independent given their seeds, so running them on several
    worker threads does not change any value.
    """
    jobs = [(cell, s) for s in students for cell in cells]
    args = (teacher, data, train, od_train, probe, list(seeds), strict)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda job: _run_cell(job[0], job[1], *args), jobs))
    else:
        results = [_run_cell(cell, s, *args) for cell, s in jobs]
    table = ComparisonTable(results, list(seeds))
    table.mark_best()
    return table
