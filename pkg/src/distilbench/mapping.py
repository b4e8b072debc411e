"""Student-to-teacher layer mappings for hidden-state transfer.

A mapping assigns every student layer ``i`` in ``[1, L_s]`` a (possibly
empty) tuple of teacher layers in ``[1, L_t]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterator


@dataclass(frozen=True)
class LayerMapping:
    student_layers: int
    teacher_layers: int
    targets: dict[int, tuple[int, ...]]

    def __post_init__(self):
        if set(self.targets) != set(range(1, self.student_layers + 1)):
            raise ValueError("mapping must list every student layer 1..L_s")
        for i, js in self.targets.items():
            for j in js:
                if not 1 <= j <= self.teacher_layers:
                    raise ValueError(f"student layer {i} mapped to teacher layer {j} "
                                     f"outside [1, {self.teacher_layers}]")

    def __getitem__(self, student_layer: int) -> tuple[int, ...]:
        return self.targets[student_layer]

    def pairs(self) -> Iterator[tuple[int, int]]:
        for i in range(1, self.student_layers + 1):
            for j in self.targets[i]:
                yield i, j

    def as_sets(self) -> dict[int, set[int]]:
        return {i: set(js) for i, js in self.targets.items()}

    def nonempty(self) -> dict[int, tuple[int, ...]]:
        return {i: js for i, js in self.targets.items() if js}


def _check(ls: int, lt: int) -> None:
    if ls < 1 or lt < 1:
        raise ValueError("layer counts must be positive")
    if ls > lt:
        raise ValueError(f"student has more layers ({ls}) than teacher ({lt})")


def _stride(ls: int, lt: int) -> int:
    return math.ceil(lt / ls)


def mapping_single(ls: int, lt: int) -> LayerMapping:
    """Only the last student layer, mapped to the last teacher layer."""
    _check(ls, lt)
    targets = {i: () for i in range(1, ls + 1)}
    targets[ls] = (lt,)
    return LayerMapping(ls, lt, targets)


def mapping_last(ls: int, lt: int) -> LayerMapping:
    """Student layer ``i`` predicts teacher layer ``L_t - L_s + i``."""
    _check(ls, lt)
    return LayerMapping(ls, lt, {i: (lt - ls + i,) for i in range(1, ls + 1)})


def mapping_uniform(ls: int, lt: int) -> LayerMapping:
    """Every k-th teacher layer, k = ceil(L_t / L_s), clamped to L_t."""
    _check(ls, lt)
    k = _stride(ls, lt)
    return LayerMapping(ls, lt, {i: (min(k * i, lt),) for i in range(1, ls + 1)})


def mapping_uniform_cons(ls: int, lt: int) -> LayerMapping:
    """Blocks of k consecutive teacher layers: ``{k(i-1)+1, ..., min(ki, L_t)}``.

    The blocks partition ``[1, L_t]``; trailing student layers may get an
    empty block when k * (L_s - 1) >= L_t.
    """
    _check(ls, lt)
    k = _stride(ls, lt)
    return LayerMapping(ls, lt, {i: tuple(range(k * (i - 1) + 1, min(k * i, lt) + 1))
                                 for i in range(1, ls + 1)})


def mapping_uniform_plus_last(ls: int, lt: int) -> LayerMapping:
    """Union of the uniform and last choices for each student layer."""
    uni, last = mapping_uniform(ls, lt), mapping_last(ls, lt)
    return LayerMapping(ls, lt, {i: tuple(sorted(set(uni[i]) | set(last[i])))
                                 for i in range(1, ls + 1)})


STRATEGIES: dict[str, Callable[[int, int], LayerMapping]] = {
    "single": mapping_single,
    "last": mapping_last,
    "uniform": mapping_uniform,
    "uniform-cons": mapping_uniform_cons,
    "uniform+last": mapping_uniform_plus_last,
}


def build_mapping(strategy: str, ls: int, lt: int) -> LayerMapping:
    key = strategy.strip().lower().replace("_", "-").replace(".", "")
    if key not in STRATEGIES:
        raise ValueError(f"unknown layer mapping strategy {strategy!r}; "
                         f"choose from {sorted(STRATEGIES)}")
    return STRATEGIES[key](ls, lt)
