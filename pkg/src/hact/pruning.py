"""Magnitude-based filter pruning with an iterative prune-retrain loop.

Filters (whole convolution output channels) are ranked by the L2 norm of
their weights and the lowest fraction is zeroed, either across all stack
convolutions at once ("global") or within each layer independently
("per_layer").  Masking zeroes the filter's weights and bias together with
the matching normalization scale and shift, so a dead channel outputs an
exact zero and the masked network computes the same function as one with
the channel physically removed.

The loop alternates selection, masking, and retraining with inherited
weights, tracks the best validation accuracy, and stops once two
consecutive passes score strictly below that best.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError, UsageError
from .model import Model

VARIANTS = ("global", "per_layer")

METRICS_HEADER = "pass,variant,pruned_total,val_accuracy"


def filter_norms(model: Model) -> dict[str, np.ndarray]:
    """L2 norm of each stack-convolution filter's weights, bias excluded.

    Keys follow ``model.prunable_convs()`` order; the stem convolution and
    the head linears never appear.
    """
    table: dict[str, np.ndarray] = {}
    for name, conv, _bn in model.prunable_convs():
        w = conv.weight.data
        table[name] = np.sqrt((w.reshape(w.shape[0], -1) ** 2).sum(axis=1))
    return table


def _validate_p(p: float) -> None:
    if not 0.0 < p < 1.0:
        raise ConfigError(f"pruning fraction must lie strictly in (0, 1), got {p!r}")


def _prune_count(p: float, remaining: int) -> int:
    # floor(p * remaining); the nudge keeps decimal fractions that have no
    # exact binary form (0.3 * 10 = 2.999...) from flooring one too low.
    return int(math.floor(p * remaining + 1e-9))


def _alive_entries(table, already, name, layer_index):
    dead = already.get(name)
    norms = table[name]
    for fi in range(len(norms)):
        if dead is not None and dead[fi]:
            continue
        yield (float(norms[fi]), layer_index, fi)


def select_global(
    table: dict[str, np.ndarray],
    p: float,
    already_pruned: dict[str, np.ndarray] | None = None,
) -> dict[str, np.ndarray]:
    """Mark the floor(p * remaining) lowest-norm filters across all layers.

    Ties are broken by (layer index, filter index), layer index being the
    position in ``table``; already-pruned filters are excluded from both the
    ranking and the remaining count.
    """
    _validate_p(p)
    already = already_pruned or {}
    names = list(table)
    entries = []
    for li, name in enumerate(names):
        entries.extend(_alive_entries(table, already, name, li))
    entries.sort()
    delta = {name: np.zeros(len(table[name]), dtype=bool) for name in names}
    for _norm, li, fi in entries[: _prune_count(p, len(entries))]:
        delta[names[li]][fi] = True
    return delta


def select_per_layer(
    table: dict[str, np.ndarray],
    p: float,
    already_pruned: dict[str, np.ndarray] | None = None,
) -> dict[str, np.ndarray]:
    """Mark the floor(p * layer_remaining) lowest-norm filters per layer."""
    _validate_p(p)
    already = already_pruned or {}
    delta = {}
    for li, name in enumerate(table):
        entries = sorted(_alive_entries(table, already, name, li))
        d = np.zeros(len(table[name]), dtype=bool)
        for _norm, _li, fi in entries[: _prune_count(p, len(entries))]:
            d[fi] = True
        delta[name] = d
    return delta


def apply_mask(model: Model, delta: dict[str, np.ndarray]) -> Model:
    """Merge the selection into the model's masks and zero the dead filters.

    Zeroing covers the convolution weights and bias plus the paired
    normalization scale and shift, so the channel's output is exactly zero
    for any input and stays zero through retraining (gradients of masked
    entries are dropped by the training loop).
    """
    by_name = {name: conv for name, conv, _bn in model.prunable_convs()}
    for name, sel in delta.items():
        conv = by_name.get(name)
        if conv is None:
            raise ShapeError(f"unknown prunable layer {name!r}")
        sel = np.asarray(sel, dtype=bool)
        if sel.shape != (conv.out_channels,):
            raise ShapeError(
                f"mask for {name} has shape {sel.shape}; "
                f"layer has {conv.out_channels} filters"
            )
        if not sel.any():
            continue
        prev = model.masks.get(name)
        model.masks[name] = sel.copy() if prev is None else (prev | sel)
    model.enforce_masks()
    return model


def total_pruned(masks: dict[str, np.ndarray]) -> int:
    """Total number of masked filters across all layers."""
    return int(sum(int(np.count_nonzero(m)) for m in masks.values()))


def replay_stop_rule(accuracies, initial: float = float("-inf")) -> tuple[int, int]:
    """Replay the stop rule over per-pass accuracies; -> (best_pass, passes_run).

    ``accuracies[i]`` is the score after pass ``i + 1`` and ``initial`` the
    unpruned score (pass 0).  A pass strictly below the best so far extends
    the losing streak, matching or beating it resets the streak, and the
    replay stops once the streak reaches two.  ``best_pass`` is 0 when no
    pass beats the initial score.
    """
    best, best_pass, streak = float(initial), 0, 0
    passes_run = 0
    for i, acc in enumerate(accuracies, start=1):
        passes_run = i
        acc = float(acc)
        if acc > best:
            best, best_pass, streak = acc, i, 0
        elif acc < best:
            streak += 1
            if streak == 2:
                break
        else:
            streak = 0
    return best_pass, passes_run


@dataclass
class PrunePass:
    """One row of the per-pass metrics table; pass 0 is the unpruned baseline."""

    index: int
    variant: str
    pruned_total: int
    val_accuracy: float


@dataclass
class PruneResult:
    records: list[PrunePass]
    best_pass: int
    passes_run: int
    best_masks: dict[str, np.ndarray]

    def csv_lines(self):
        yield METRICS_HEADER
        for r in self.records:
            yield f"{r.index},{r.variant},{r.pruned_total},{r.val_accuracy:.6f}"


def _snapshot(model: Model):
    return (
        {k: v.data.copy() for k, v in model.named_params().items()},
        {k: v.copy() for k, v in model.named_buffers().items()},
        {k: v.copy() for k, v in model.masks.items()},
    )


def _restore(model: Model, snap) -> None:
    params, bufs, masks = snap
    for k, v in model.named_params().items():
        v.data[...] = params[k]
    for k, v in model.named_buffers().items():
        v[...] = bufs[k]
    model.masks = {k: m.copy() for k, m in masks.items()}


def pruning_loop(
    model: Model,
    trainer,
    p: float = 0.10,
    variant: str = "global",
    max_passes: int = 10,
) -> PruneResult:
    """Iteratively prune, retrain, and evaluate until accuracy stops recovering.

    ``trainer`` must provide ``retrain(model) -> None`` (training with the
    inherited surviving weights) and ``validation_accuracy(model) -> float``.
    Each pass selects the bottom fraction ``p`` of the remaining filters
    (per ``variant``), masks them, retrains, and scores the model.  The loop
    stops after two consecutive passes strictly below the best score so far,
    or at ``max_passes``.  On return the model holds the best-scoring state
    (parameters, normalization buffers, and masks); pass 0 in the records is
    the pre-prune baseline.
    """
    if not isinstance(model, Model):
        raise UsageError("pruning_loop needs a Model instance")
    if not model.is_trained:
        raise UsageError("pruning_loop needs a trained model; run training first")
    if variant not in VARIANTS:
        raise ConfigError(f"variant must be one of {VARIANTS}, got {variant!r}")
    if max_passes < 1:
        raise ConfigError(f"max_passes must be >= 1, got {max_passes}")
    _validate_p(p)

    select = select_global if variant == "global" else select_per_layer
    best_acc = float(trainer.validation_accuracy(model))
    records = [PrunePass(0, variant, total_pruned(model.masks), best_acc)]
    best_snap = _snapshot(model)
    best_pass, streak, passes_run = 0, 0, 0

    for i in range(1, max_passes + 1):
        apply_mask(model, select(filter_norms(model), p, model.masks))
        trainer.retrain(model)
        acc = float(trainer.validation_accuracy(model))
        records.append(PrunePass(i, variant, total_pruned(model.masks), acc))
        passes_run = i
        if acc > best_acc:
            best_acc, best_pass, streak = acc, i, 0
            best_snap = _snapshot(model)
        elif acc < best_acc:
            streak += 1
            if streak == 2:
                break
        else:
            streak = 0

    _restore(model, best_snap)
    return PruneResult(
        records=records,
        best_pass=best_pass,
        passes_run=passes_run,
        best_masks={k: v.copy() for k, v in model.masks.items()},
    )
