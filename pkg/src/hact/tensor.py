"""Minimal dense-tensor engine with reverse-mode differentiation.

Everything is float64 and eager: each primitive computes its value with numpy
and, when a recording tape is active and some input requires gradients,
appends a record holding a backward closure.  ``backward`` replays the tape
in exact reverse execution order, so repeated runs on identical inputs give
bit-identical gradients.

Conventions:
  * convolution is cross-correlation (no kernel flipping),
  * no implicit broadcasting beyond bias addition in ``conv3d``/``linear``,
  * a tensor is immutable once created except for its ``grad`` buffer
    (optimizers update leaf ``data`` only between recorded computations),
  * a recorded computation and its backward pass belong to one thread.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import GradCheckError, ShapeError, UsageError


class Tensor:
    """Dense float64 array plus gradient metadata."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_tape")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"


@dataclass
class _Record:
    """One executed primitive: inputs, output, and its backward closure."""

    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: object  # callable(grad_out) -> tuple of grads aligned with inputs


@dataclass
class Tape:
    """Ordered record of executed primitives, replayable in reverse.

    Use as a context manager; ops record onto the innermost active tape.
    """

    records: list[_Record] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPE_STACK.pop()

    def __len__(self) -> int:
        return len(self.records)


_TAPE_STACK: list[Tape] = []


def _active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _emit(op: str, inputs: tuple[Tensor, ...], out_data: np.ndarray, backward) -> Tensor:
    """Wrap a primitive result, recording it if a tape is active."""
    tape = _active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        out._tape = tape
        tape.records.append(_Record(op, inputs, out, backward))
    return out


def _as_tensor(x, what: str) -> Tensor:
    if not isinstance(x, Tensor):
        raise UsageError(f"{what} must be a Tensor, got {type(x).__name__}")
    return x


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every tensor reachable from a recorded scalar loss.

    Adjoints are accumulated in exact reverse execution order; records whose
    output received no adjoint (dead branches) are skipped.

    The sweep consumes the recording: the tape's records (and the closures
    holding intermediate buffers) are released once replayed, so the memory
    of a training step is reclaimed as soon as the step ends rather than
    when the cycle collector next runs.  A second ``backward`` on the same
    result is an error.
    """
    _as_tensor(loss, "loss")
    if loss.size != 1:
        raise UsageError(f"backward requires a scalar loss, got shape {loss.shape}")
    if loss._tape is None:
        raise UsageError("backward on a tensor that was not produced under recording")
    loss.grad = np.ones_like(loss.data)
    tape = loss._tape
    for rec in reversed(tape.records):
        g = rec.output.grad
        if g is None:
            continue
        grads = rec.backward(g)
        for t, gt in zip(rec.inputs, grads):
            if gt is None or not t.requires_grad:
                continue
            if t.grad is None:
                t.grad = gt
            else:
                t.grad = t.grad + gt
    for rec in tape.records:
        rec.output._tape = None
    tape.records.clear()
    loss._tape = None


# ---------------------------------------------------------------------------
# Elementwise and reduction primitives
# ---------------------------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    _as_tensor(x, "input")
    mask = x.data > 0.0
    out = np.where(mask, x.data, 0.0)

    def bw(g):
        return (g * mask,)

    return _emit("relu", (x,), out, bw)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum of two equal-shape tensors (no broadcasting)."""
    _as_tensor(a, "lhs"), _as_tensor(b, "rhs")
    if a.shape != b.shape:
        raise ShapeError(f"add requires equal shapes, got {a.shape} and {b.shape}")

    def bw(g):
        return (g, g)

    return _emit("add", (a, b), a.data + b.data, bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of two equal-shape tensors (no broadcasting)."""
    _as_tensor(a, "lhs"), _as_tensor(b, "rhs")
    if a.shape != b.shape:
        raise ShapeError(f"mul requires equal shapes, got {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        return (g * bd, g * ad)

    return _emit("mul", (a, b), ad * bd, bw)


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar constant."""
    _as_tensor(x, "input")
    c = float(c)

    def bw(g):
        return (g * c,)

    return _emit("scale", (x,), x.data * c, bw)


def tensor_sum(x: Tensor) -> Tensor:
    """Sum of all elements, as a scalar tensor."""
    _as_tensor(x, "input")
    shape = x.shape

    def bw(g):
        return (np.full(shape, float(g)),)

    return _emit("sum", (x,), np.asarray(x.data.sum()), bw)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the temporal and spatial axes: [N,C,T,H,W] -> [N,C]."""
    _as_tensor(x, "input")
    if x.ndim != 5:
        raise ShapeError(f"global_avg_pool expects [N,C,T,H,W], got {x.shape}")
    n, c, t, h, w = x.shape
    count = t * h * w

    def bw(g):
        gx = np.broadcast_to(g[:, :, None, None, None] / count, (n, c, t, h, w))
        return (np.ascontiguousarray(gx),)

    return _emit("global_avg_pool", (x,), x.data.mean(axis=(2, 3, 4)), bw)


# ---------------------------------------------------------------------------
# Linear and convolution
# ---------------------------------------------------------------------------


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map: out = x @ weight.T + bias, x [N,F], weight [K,F], bias [K]."""
    _as_tensor(x, "input"), _as_tensor(weight, "weight"), _as_tensor(bias, "bias")
    if x.ndim != 2 or weight.ndim != 2:
        raise ShapeError(f"linear expects 2-d input/weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(
            f"linear feature mismatch: input {x.shape} vs weight {weight.shape}"
        )
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear bias shape {bias.shape} != ({weight.shape[0]},)")
    xd, wd = x.data, weight.data

    def bw(g):
        return (g @ wd, g.T @ xd, g.sum(axis=0))

    return _emit("linear", (x, weight, bias), xd @ wd.T + bias.data, bw)


def _triple(v, what: str) -> tuple[int, int, int]:
    t = tuple(int(u) for u in v)
    if len(t) != 3:
        raise UsageError(f"{what} must have three components, got {v!r}")
    return t


def conv3d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor,
    stride=(1, 1, 1),
    padding=(0, 0, 0),
) -> Tensor:
    """3-d cross-correlation over [N,C,T,H,W] with zero padding.

    weight is [C_out, C_in, kT, kH, kW]; each output extent follows
    floor((L + 2*pad - k) / stride) + 1.  Implemented as an explicit
    patch-matrix (im2col) GEMM; the backward pass reuses the patch matrix
    for the weight gradient and scatters the input gradient per kernel tap.
    """
    _as_tensor(x, "input"), _as_tensor(weight, "weight"), _as_tensor(bias, "bias")
    stride = _triple(stride, "stride")
    padding = _triple(padding, "padding")
    if x.ndim != 5:
        raise ShapeError(f"conv3d expects input [N,C,T,H,W], got {x.shape}")
    if weight.ndim != 5:
        raise ShapeError(f"conv3d expects weight [D,C,kT,kH,kW], got {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(
            f"conv3d channel mismatch: input shape {x.shape} has C_in={x.shape[1]} "
            f"but weight shape {weight.shape} has C_in={weight.shape[1]}"
        )
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"conv3d bias shape {bias.shape} != ({weight.shape[0]},)")
    if any(s < 1 for s in stride) or any(p < 0 for p in padding):
        raise UsageError(f"invalid stride {stride} or padding {padding}")

    n, c, t, h, w = x.shape
    d = weight.shape[0]
    kt, kh, kw = weight.shape[2:]
    st, sh, sw = stride
    pt, ph, pw = padding
    to = (t + 2 * pt - kt) // st + 1
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (w + 2 * pw - kw) // sw + 1
    if to < 1 or ho < 1 or wo < 1:
        raise ShapeError(
            f"conv3d output extent not positive: input {x.shape}, kernel {weight.shape}, "
            f"stride {stride}, padding {padding}"
        )

    xp = x.data
    if pt or ph or pw:
        xp = np.pad(xp, ((0, 0), (0, 0), (pt, pt), (ph, ph), (pw, pw)))
    # Patch matrix: rows are output positions, columns are C_in*kT*kH*kW taps.
    win = sliding_window_view(xp, (kt, kh, kw), axis=(2, 3, 4))[:, :, ::st, ::sh, ::sw]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 4, 1, 5, 6, 7))
    cols_mat = cols.reshape(n * to * ho * wo, c * kt * kh * kw)
    w_mat = weight.data.reshape(d, c * kt * kh * kw)
    out_mat = cols_mat @ w_mat.T + bias.data
    out = out_mat.reshape(n, to, ho, wo, d).transpose(0, 4, 1, 2, 3)
    pad_shape = xp.shape

    def bw(g):
        g_mat = np.ascontiguousarray(g.transpose(0, 2, 3, 4, 1)).reshape(-1, d)
        grad_w = (g_mat.T @ cols_mat).reshape(weight.shape)
        grad_b = g_mat.sum(axis=0)
        grad_cols = (g_mat @ w_mat).reshape(n, to, ho, wo, c, kt, kh, kw)
        gxp = np.zeros(pad_shape)
        for i in range(kt):
            ti = slice(i, i + st * (to - 1) + 1, st)
            for j in range(kh):
                hj = slice(j, j + sh * (ho - 1) + 1, sh)
                for k in range(kw):
                    wk = slice(k, k + sw * (wo - 1) + 1, sw)
                    gxp[:, :, ti, hj, wk] += grad_cols[:, :, :, :, :, i, j, k].transpose(
                        0, 4, 1, 2, 3
                    )
        gx = gxp[:, :, pt : pt + t, ph : ph + h, pw : pw + w]
        return (np.ascontiguousarray(gx), grad_w, grad_b)

    return _emit("conv3d", (x, weight, bias), np.ascontiguousarray(out), bw)


# ---------------------------------------------------------------------------
# Batch normalization
# ---------------------------------------------------------------------------


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalization over all axes except channel axis 1.

    Train mode normalizes with biased batch statistics and folds them into
    the running buffers in place (new = (1-momentum)*old + momentum*batch);
    eval mode reads the buffers and never mutates them.
    """
    _as_tensor(x, "input"), _as_tensor(gamma, "gamma"), _as_tensor(beta, "beta")
    if x.ndim < 2:
        raise ShapeError(f"batch_norm expects [N,C,...], got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(
            f"batch_norm parameter shapes {gamma.shape}/{beta.shape} != ({c},)"
        )
    axes = (0,) + tuple(range(2, x.ndim))
    count = x.size // c
    bshape = (1, c) + (1,) * (x.ndim - 2)
    gd = gamma.data.reshape(bshape)

    if training:
        if count < 2:
            raise UsageError(
                f"batch_norm in train mode needs at least 2 values per channel, got {count}"
            )
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)  # biased
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var
        inv = 1.0 / np.sqrt(var + eps).reshape(bshape)
        xhat = (x.data - mean.reshape(bshape)) * inv
        out = gd * xhat + beta.data.reshape(bshape)

        def bw(g):
            grad_beta = g.sum(axis=axes)
            grad_gamma = (g * xhat).sum(axis=axes)
            gh = g * gd
            m1 = gh.mean(axis=axes).reshape(bshape)
            m2 = (gh * xhat).mean(axis=axes).reshape(bshape)
            gx = inv * (gh - m1 - xhat * m2)
            return (gx, grad_gamma, grad_beta)

    else:
        inv = 1.0 / np.sqrt(running_var + eps).reshape(bshape)
        xhat = (x.data - running_mean.reshape(bshape)) * inv
        out = gd * xhat + beta.data.reshape(bshape)

        def bw(g):
            grad_beta = g.sum(axis=axes)
            grad_gamma = (g * xhat).sum(axis=axes)
            return (g * gd * inv, grad_gamma, grad_beta)

    return _emit("batch_norm", (x, gamma, beta), out, bw)


# ---------------------------------------------------------------------------
# Softmax cross-entropy
# ---------------------------------------------------------------------------


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise stable softmax of a plain array (no recording)."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log softmax probability of the target classes.

    logits [N,K]; targets: N integer class indices.  Row maxima are
    subtracted before exponentiation, so the result is finite for any
    finite logits and never negative.
    """
    _as_tensor(logits, "logits")
    if logits.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy expects [N,K] logits, got {logits.shape}")
    y = np.asarray(targets)
    if y.ndim != 1 or y.shape[0] != logits.shape[0]:
        raise ShapeError(
            f"targets shape {y.shape} does not match logits rows {logits.shape[0]}"
        )
    if not np.issubdtype(y.dtype, np.integer):
        raise UsageError(f"targets must be integers, got dtype {y.dtype}")
    n, k = logits.shape
    if y.min(initial=0) < 0 or y.max(initial=0) >= k:
        raise IndexError(f"target outside [0, {k}): {y[(y < 0) | (y >= k)][:5]}")

    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsumexp
    loss = -logp[np.arange(n), y].mean()
    probs = np.exp(logp)

    def bw(g):
        gl = probs.copy()
        gl[np.arange(n), y] -= 1.0
        return (gl * (float(g) / n),)

    return _emit("softmax_cross_entropy", (logits,), np.asarray(loss), bw)


# ---------------------------------------------------------------------------
# Finite-difference gradient verification
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    """Per-input maximum relative error between tape and numeric gradients."""

    entries: dict[str, float]
    tolerance: float

    @property
    def passed(self) -> bool:
        return all(v <= self.tolerance for v in self.entries.values())

    @property
    def failures(self) -> list[str]:
        return [k for k, v in self.entries.items() if v > self.tolerance]

    def __str__(self) -> str:
        lines = [
            f"  {k}: max_rel_err={v:.3e} {'ok' if v <= self.tolerance else 'FAIL'}"
            for k, v in self.entries.items()
        ]
        status = "passed" if self.passed else "FAILED"
        return f"gradient check {status} (tol={self.tolerance:g})\n" + "\n".join(lines)


def check_gradients(fn, inputs, step: float = 1e-5, tolerance: float = 1e-4) -> GradCheckReport:
    """Compare tape gradients of ``fn(*inputs)`` against central differences.

    ``fn`` must be a pure function of the given leaf tensors returning a
    scalar.  It is evaluated twice up front; any bit-level disagreement is
    reported as an explicit error rather than a silent mismatch.  Relative
    error uses max(|analytic|, |numeric|, 1) as denominator so near-zero
    gradients are judged on absolute terms.
    """
    inputs = list(inputs)
    names = []
    for i, t in enumerate(inputs):
        _as_tensor(t, f"inputs[{i}]")
        names.append(t.name or f"input[{i}]")

    with Tape():
        probe = fn(*inputs)
    with Tape():
        loss = fn(*inputs)
    _as_tensor(loss, "fn result")
    if loss.size != 1:
        raise UsageError(f"check_gradients needs a scalar function, got shape {loss.shape}")
    if probe.data.tobytes() != loss.data.tobytes():
        raise GradCheckError(
            "function is not deterministic: two evaluations differ "
            f"({float(probe.data)!r} vs {float(loss.data)!r})"
        )

    for t in inputs:
        t.grad = None
    backward(loss)
    analytic = [
        t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in inputs
    ]

    entries: dict[str, float] = {}
    for t, a, name in zip(inputs, analytic, names):
        flat = t.data.reshape(-1)
        worst = 0.0
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + step
            f_plus = float(fn(*inputs).data)
            flat[idx] = orig - step
            f_minus = float(fn(*inputs).data)
            flat[idx] = orig
            numeric = (f_plus - f_minus) / (2.0 * step)
            av = a.reshape(-1)[idx]
            denom = max(abs(av), abs(numeric), 1.0)
            worst = max(worst, abs(av - numeric) / denom)
        entries[name] = worst
    return GradCheckReport(entries, tolerance)
