"""Two-pass training protocol, adaptive learning rate, and clip evaluation.

The first pass optimizes only the final head's cross-entropy and returns the
validation confusion matrix from which a class hierarchy can be derived; the
second pass optimizes the weighted sum of all per-head losses against that
hierarchy.  Both passes share one loop: the first is the special case with
zero weight on every head but the last, so its trajectory is bit-identical
to a weighted run configured that way.

The learning rate starts at its configured value and is divided by the decay
factor whenever validation loss fails to improve on its best for `patience`
consecutive epochs (a decay resets the streak).  Evaluation samples five
independent sets of frames per clip, center-cropped and unflipped, and
averages the final head's softmax probabilities before the argmax.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .dataset import ClipSet, DataBundle
from .errors import ConfigError, DataError, ShapeError, TrainingError, UsageError
from .hierarchy import (
    Hierarchy,
    block_hierarchy,
    confusion_from_predictions,
    hierarchical_loss,
    map_labels,
)
from .model import Model
from .preprocess import augment, sample_frames
from .tensor import Tape, Tensor, backward, softmax

# Sub-stream tag separating evaluation rngs from the training stream.
_EVAL_STREAM = 0x65761

METRICS_HEADER = (
    "epoch,train_loss,val_loss,val_accuracy,lr,"
    "loss_head1,loss_head2,loss_head3,loss_head4"
)


@dataclass
class TrainConfig:
    """Optimization knobs shared by both training passes."""

    epochs: int = 20
    lr: float = 2e-3
    lr_decay: float = 10.0
    patience: int = 2
    batch_size: int = 8
    seed: int = 0
    loss_weights: tuple = (0.125, 0.25, 0.5, 1.0)
    crop_size: int = 32
    frames_per_clip: int = 8
    warm_start: bool = False

    def validate(self) -> None:
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if not self.lr > 0.0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")
        if not self.lr_decay > 1.0:
            raise ConfigError(f"lr decay factor must exceed 1, got {self.lr_decay}")
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")
        if self.batch_size < 1:
            raise ConfigError(f"batch size must be >= 1, got {self.batch_size}")
        if self.crop_size < 1:
            raise ConfigError(f"crop size must be >= 1, got {self.crop_size}")
        if self.frames_per_clip < 1:
            raise ConfigError(f"frames per clip must be >= 1, got {self.frames_per_clip}")
        w = tuple(float(x) for x in self.loss_weights)
        if len(w) != 4:
            raise ConfigError(f"need 4 loss weights, got {self.loss_weights!r}")
        if any(x < 0.0 for x in w):
            raise ConfigError(f"loss weights must be nonnegative: {w}")
        if not w[-1] > 0.0:
            raise ConfigError(f"final-head loss weight must be positive: {w}")


@dataclass
class EpochRow:
    epoch: int
    train_loss: float
    val_loss: float
    val_accuracy: float
    lr: float
    head_losses: tuple


@dataclass
class RunMetrics:
    """Per-epoch log plus the end-of-run test summary."""

    rows: list
    final_accuracy: float | None = None
    confusion: np.ndarray | None = None

    def csv_lines(self):
        def fmt(v):
            return format(float(v), ".10g")

        yield METRICS_HEADER
        for r in self.rows:
            head = ",".join(fmt(h) for h in r.head_losses)
            yield (
                f"{r.epoch},{fmt(r.train_loss)},{fmt(r.val_loss)},"
                f"{fmt(r.val_accuracy)},{fmt(r.lr)},{head}"
            )


@dataclass
class TrainResult:
    model: Model
    metrics: RunMetrics
    confusion: np.ndarray | None


@dataclass
class EvalResult:
    accuracy: float
    confusion: np.ndarray
    probabilities: np.ndarray


# ---------------------------------------------------------------------------
# Splitting and scheduling
# ---------------------------------------------------------------------------


def split_validation(
    test_set: ClipSet, fraction: float = 0.10, seed: int = 0
) -> tuple[ClipSet, ClipSet]:
    """Carve a seeded validation subset out of the test set.

    Returns (validation set, reduced test set); the two are disjoint and
    their union is the input.  The validation size is floor(fraction * n),
    raised to one clip when the floor is zero.
    """
    if len(test_set) == 0:
        raise DataError("cannot split an empty clip set")
    if not 0.0 < fraction < 1.0:
        raise ConfigError(f"validation fraction must lie in (0, 1), got {fraction}")
    n = len(test_set)
    count = int(math.floor(fraction * n + 1e-9)) or 1
    perm = np.random.default_rng(seed).permutation(n)
    return test_set.subset(np.sort(perm[:count])), test_set.subset(np.sort(perm[count:]))


def lr_schedule(
    history, current_lr: float, patience: int = 2, factor: float = 10.0
) -> float:
    """Next learning rate after the epoch that produced ``history[-1]``.

    Replays the whole validation-loss history: a strictly lower loss than
    the best so far resets the non-improvement streak (ties do not), a
    streak of ``patience`` epochs triggers a decay, and a decay itself
    resets the streak.  Returns ``current_lr / factor`` when a decay fires
    at the final epoch and ``current_lr`` unchanged otherwise.
    """
    if len(history) == 0:
        raise UsageError("lr_schedule needs at least one epoch of history")
    best = float("inf")
    streak = 0
    decayed_now = False
    for loss in history:
        decayed_now = False
        if loss < best:
            best = float(loss)
            streak = 0
        else:
            streak += 1
            if streak == patience:
                streak = 0
                decayed_now = True
    return current_lr / factor if decayed_now else current_lr


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0


def adam_step(
    params,
    grads,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
):
    """One in-place adaptive-moment update; entries with gradient None are skipped.

    The step counter is global, so a parameter that starts receiving
    gradients late is bias-corrected by the shared count.
    """
    state.t += 1
    c1 = 1.0 - beta1**state.t
    c2 = 1.0 - beta2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v, strict=True):
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise TrainingError("non-finite gradient in optimizer step")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params, state


class Adam:
    """Adaptive-moment optimizer bound to a fixed list of tensors."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = float(lr)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.state = AdamState(
            m=[np.zeros_like(p.data) for p in self.params],
            v=[np.zeros_like(p.data) for p in self.params],
        )

    def step(self) -> None:
        adam_step(
            [p.data for p in self.params],
            [p.grad for p in self.params],
            self.state,
            self.lr,
            self.beta1,
            self.beta2,
            self.eps,
        )


# ---------------------------------------------------------------------------
# Batch assembly
# ---------------------------------------------------------------------------


def cross_entropy_value(logits: np.ndarray, targets) -> float:
    """Plain-array mean cross-entropy, matching the differentiable op's math."""
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    y = np.asarray(targets)
    return float(-logp[np.arange(len(y)), y].mean())


def _clip_tensor(frames, fidx, mode, crop_size, rng):
    sub = np.asarray(frames, dtype=np.float64)[fidx][:, None]  # [F,1,H,W]
    out = augment(sub, mode, crop_size, rng)
    return out.transpose(1, 0, 2, 3)  # [C=1,F,crop,crop]


def _train_batch(clip_set: ClipSet, indices, cfg: TrainConfig, rng):
    xs, ys = [], []
    for i in indices:
        frames = clip_set.clips[i]
        fidx = sample_frames(len(frames), cfg.frames_per_clip, "train", rng)
        xs.append(_clip_tensor(frames, fidx, "train", cfg.crop_size, rng))
        ys.append(clip_set.labels[i])
    return np.stack(xs), np.asarray(ys, dtype=np.int64)


def _eval_logits(model: Model, clip_set: ClipSet, cfg: TrainConfig):
    """Deterministic single-sampling eval-mode logits for every clip."""
    chunks = [[] for _ in range(4)]
    for start in range(0, len(clip_set), cfg.batch_size):
        xs = []
        for i in range(start, min(start + cfg.batch_size, len(clip_set))):
            frames = clip_set.clips[i]
            fidx = sample_frames(len(frames), cfg.frames_per_clip, "test")
            xs.append(_clip_tensor(frames, fidx, "test", cfg.crop_size, None))
        logits = model.forward(Tensor(np.stack(xs)), training=False)
        for l in range(4):
            chunks[l].append(logits[l].data)
    return [np.concatenate(c) for c in chunks]


# ---------------------------------------------------------------------------
# The shared loop and the two passes
# ---------------------------------------------------------------------------


def _check_labels(clip_set: ClipSet, n_classes: int, name: str) -> None:
    if len(clip_set) == 0:
        raise DataError(f"{name} set is empty")
    if clip_set.labels.max() >= n_classes:
        raise DataError(
            f"{name} set has label {clip_set.labels.max()} but the final head "
            f"has {n_classes} classes"
        )


def _train_loop(
    model: Model, data: DataBundle, hierarchy: Hierarchy, cfg: TrainConfig
) -> RunMetrics:
    cfg.validate()
    widths = tuple(model.cfg.num_classes_per_head)
    if tuple(hierarchy.k_per_level) != widths:
        raise ShapeError(
            f"hierarchy level sizes {tuple(hierarchy.k_per_level)} do not match "
            f"head widths {widths}"
        )
    _check_labels(data.train, widths[-1], "train")
    _check_labels(data.val, widths[-1], "validation")

    rng = np.random.default_rng(cfg.seed)
    opt = Adam(model.params(), cfg.lr)
    weights = tuple(float(w) for w in cfg.loss_weights)
    lr = cfg.lr
    n = len(data.train)
    val_level_labels = [map_labels(hierarchy, l, data.val.labels) for l in range(4)]
    rows: list[EpochRow] = []
    val_history: list[float] = []

    for epoch in range(1, cfg.epochs + 1):
        opt.lr = lr
        order = rng.permutation(n)
        loss_sum = 0.0
        head_sums = np.zeros(4)
        for start in range(0, n, cfg.batch_size):
            batch_idx = order[start : start + cfg.batch_size]
            x, y = _train_batch(data.train, batch_idx, cfg, rng)
            with Tape():
                logits = model.forward(Tensor(x), training=True)
                loss = hierarchical_loss(logits, y, hierarchy, weights)
            if not np.isfinite(loss.item()):
                raise TrainingError(f"non-finite training loss at epoch {epoch}")
            backward(loss)
            model.mask_gradients()
            try:
                opt.step()
            except TrainingError as exc:
                raise TrainingError(f"epoch {epoch}: {exc}") from None
            model.enforce_masks()
            model.zero_grad()
            b = len(batch_idx)
            loss_sum += loss.item() * b
            for l in range(4):
                head_sums[l] += b * cross_entropy_value(
                    logits[l].data, map_labels(hierarchy, l, y)
                )

        vlogits = _eval_logits(model, data.val, cfg)
        val_loss = sum(
            w * cross_entropy_value(vlogits[l], val_level_labels[l])
            for l, w in enumerate(weights)
            if w > 0.0
        )
        if not np.isfinite(val_loss):
            raise TrainingError(f"non-finite validation loss at epoch {epoch}")
        val_acc = float((vlogits[3].argmax(axis=1) == data.val.labels).mean())
        rows.append(
            EpochRow(
                epoch=epoch,
                train_loss=loss_sum / n,
                val_loss=float(val_loss),
                val_accuracy=val_acc,
                lr=lr,
                head_losses=tuple(head_sums / n),
            )
        )
        val_history.append(float(val_loss))
        lr = lr_schedule(val_history, lr, cfg.patience, cfg.lr_decay)

    return RunMetrics(rows=rows)


def train_first_pass(
    model: Model, data: DataBundle, cfg: TrainConfig
) -> TrainResult:
    """Final-head-only training; returns the validation confusion matrix.

    Equivalent to a weighted run with weights (0, 0, 0, w4) against the
    trivial contiguous-blocks hierarchy, which the zero weights never touch.
    """
    widths = tuple(model.cfg.num_classes_per_head)
    interim = block_hierarchy(widths[-1], widths[:-1])
    first_cfg = replace(
        cfg, loss_weights=(0.0, 0.0, 0.0, float(cfg.loss_weights[-1]))
    )
    metrics = _train_loop(model, data, interim, first_cfg)
    model.is_trained = True
    scored = evaluate(model, data.val, cfg)
    return TrainResult(model=model, metrics=metrics, confusion=scored.confusion)


def train_hierarchical(
    model: Model, data: DataBundle, hierarchy: Hierarchy, cfg: TrainConfig
) -> TrainResult:
    """Weighted multi-head training against a class hierarchy."""
    metrics = _train_loop(model, data, hierarchy, cfg)
    model.is_trained = True
    return TrainResult(model=model, metrics=metrics, confusion=None)


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


def evaluate(
    model: Model,
    clip_set: ClipSet,
    cfg: TrainConfig,
    samplings: int = 5,
    eval_seed: int | None = None,
) -> EvalResult:
    """Averaged-softmax evaluation: five frame samplings per clip, center crop.

    Every sampling redraws the frame offsets from a per-clip stream of a
    fixed evaluation seed (default: the config seed), so the result does not
    depend on clip order or batch composition, and the model is untouched.
    """
    cfg.validate()
    if samplings < 1:
        raise ConfigError(f"samplings must be >= 1, got {samplings}")
    k = model.cfg.num_classes_per_head[-1]
    _check_labels(clip_set, k, "evaluation")
    seed = cfg.seed if eval_seed is None else eval_seed
    n = len(clip_set)
    probs = np.zeros((n, k))
    for s in range(samplings):
        for start in range(0, n, cfg.batch_size):
            idx = range(start, min(start + cfg.batch_size, n))
            xs = []
            for i in idx:
                frames = clip_set.clips[i]
                r = np.random.default_rng((_EVAL_STREAM, seed, i, s))
                fidx = sample_frames(len(frames), cfg.frames_per_clip, "train", r)
                xs.append(_clip_tensor(frames, fidx, "test", cfg.crop_size, None))
            logits = model.forward(Tensor(np.stack(xs)), training=False)
            probs[list(idx)] += softmax(logits[3].data)
    probs /= samplings
    pred = probs.argmax(axis=1)
    accuracy = float((pred == clip_set.labels).mean())
    confusion = confusion_from_predictions(clip_set.labels, pred, k)
    return EvalResult(accuracy=accuracy, confusion=confusion, probabilities=probs)


class PruneTrainer:
    """Retrain/score adapter handed to the pruning loop.

    Each retrain runs the full weighted loop with a fresh optimizer on the
    inherited (masked) weights; scoring is the averaged-softmax validation
    accuracy.
    """

    def __init__(
        self,
        data: DataBundle,
        hierarchy: Hierarchy,
        cfg: TrainConfig,
        epochs: int | None = None,
    ):
        self.data = data
        self.hierarchy = hierarchy
        self.cfg = cfg if epochs is None else replace(cfg, epochs=epochs)

    def retrain(self, model: Model) -> RunMetrics:
        return _train_loop(model, self.data, self.hierarchy, self.cfg)

    def validation_accuracy(self, model: Model) -> float:
        return evaluate(model, self.data.val, self.cfg).accuracy
