"""Four-stack residual 3-d convnet with one classification head per stack.

The architecture is a desk-scale inflated residual network: a stem whose
kernel has temporal extent exactly 1, four stacks of residual blocks whose
spatial kernels are replicated along time (divided by the temporal extent,
so a temporally constant input reproduces the 2-d computation), and after
every stack a classification head of global average pooling plus a linear
layer.  Head l sees only stacks 1..l, which is what lets coarse heads
supervise early features.

Spatial downsampling happens at the first block of stacks 2-4; temporal
downsampling only at stacks 3-4, so short 8-frame clips keep a usable
temporal extent into the last stack.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, UsageError
from .tensor import (
    Tape,
    Tensor,
    add,
    backward,
    batch_norm,
    conv3d,
    global_avg_pool,
    linear,
    relu,
    softmax_cross_entropy,
)

# Per-stack strides: (temporal, spatial); stack 1 keeps full resolution.
_STACK_STRIDES = ((1, 1), (1, 2), (2, 2), (2, 2))


@dataclass
class StackConfig:
    """Architecture knobs for the four stacks and their heads."""

    blocks_per_stack: tuple[int, int, int, int] = (1, 1, 1, 1)
    base_channels: int = 8
    bottleneck: bool = True
    temporal_kernel: int = 3
    num_classes_per_head: tuple[int, int, int, int] = (2, 4, 8, 8)
    in_channels: int = 1

    def validate(self) -> None:
        if len(self.blocks_per_stack) != 4:
            raise ConfigError(f"need 4 stacks, got blocks {self.blocks_per_stack!r}")
        if any(b < 1 for b in self.blocks_per_stack):
            raise ConfigError(f"every stack needs at least one block: {self.blocks_per_stack}")
        if len(self.num_classes_per_head) != 4:
            raise ConfigError(f"need 4 head widths, got {self.num_classes_per_head!r}")
        if any(k < 1 for k in self.num_classes_per_head):
            raise ConfigError(f"head widths must be positive: {self.num_classes_per_head}")
        ks = self.num_classes_per_head
        if any(ks[i] > ks[i + 1] for i in range(3)):
            raise ConfigError(f"head class counts must be nondecreasing: {ks}")
        if self.base_channels < 1 or self.in_channels < 1:
            raise ConfigError("channel counts must be positive")
        if self.temporal_kernel < 1:
            raise ConfigError(f"temporal kernel must be >= 1, got {self.temporal_kernel}")


def inflate_kernel(weight_2d: np.ndarray, kt: int) -> np.ndarray:
    """Replicate a 2-d kernel [D,C,kH,kW] kt times along time, divided by kt.

    Division keeps the response to a temporally constant input equal to the
    2-d kernel's response.
    """
    w = np.asarray(weight_2d, dtype=np.float64)
    if w.ndim != 4:
        raise ConfigError(f"inflate_kernel expects [D,C,kH,kW], got shape {w.shape}")
    kt = int(kt)
    if kt < 1:
        raise ConfigError(f"temporal extent must be >= 1, got {kt}")
    return np.repeat(w[:, :, None, :, :], kt, axis=2) / float(kt)


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------


class Conv3dLayer:
    def __init__(self, c_in, c_out, kernel, stride, padding, rng, inflated=False):
        self.stride = stride
        self.padding = padding
        kt, kh, kw = kernel
        if inflated and kt > 1:
            # Initialize as a 2-d kernel and inflate, matching how inflated
            # networks inherit planar filters.
            fan_in = c_in * kh * kw
            w2 = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(c_out, c_in, kh, kw))
            wdata = inflate_kernel(w2, kt)
        else:
            fan_in = c_in * kt * kh * kw
            wdata = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(c_out, c_in, kt, kh, kw))
        self.weight = Tensor(wdata, requires_grad=True)
        self.bias = Tensor(np.zeros(c_out), requires_grad=True)

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x: Tensor) -> Tensor:
        return conv3d(x, self.weight, self.bias, self.stride, self.padding)


class BatchNorm3dLayer:
    def __init__(self, c):
        self.gamma = Tensor(np.ones(c), requires_grad=True)
        self.beta = Tensor(np.zeros(c), requires_grad=True)
        self.running_mean = np.zeros(c)
        self.running_var = np.ones(c)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return batch_norm(
            x, self.gamma, self.beta, self.running_mean, self.running_var, training
        )


class LinearLayer:
    def __init__(self, f_in, f_out, rng):
        w = rng.normal(0.0, np.sqrt(1.0 / f_in), size=(f_out, f_in))
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(f_out), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


class Bottleneck:
    """1x1x1 reduce -> (kT,3,3) -> 1x1x1 expand, with projection shortcut."""

    def __init__(self, c_in, c_out, kt, stride, rng):
        # Quarter-width reduction, floored at 4: below that the temporal conv
        # has too few channels to carry distinct motion frequencies.
        mid = max(4, c_out // 4)
        st, ss = stride
        self.conv1 = Conv3dLayer(c_in, mid, (1, 1, 1), (1, 1, 1), (0, 0, 0), rng)
        self.bn1 = BatchNorm3dLayer(mid)
        self.conv2 = Conv3dLayer(
            mid, mid, (kt, 3, 3), (st, ss, ss), (kt // 2, 1, 1), rng, inflated=True
        )
        self.bn2 = BatchNorm3dLayer(mid)
        self.conv3 = Conv3dLayer(mid, c_out, (1, 1, 1), (1, 1, 1), (0, 0, 0), rng)
        self.bn3 = BatchNorm3dLayer(c_out)
        if c_in != c_out or st != 1 or ss != 1:
            self.down_conv = Conv3dLayer(c_in, c_out, (1, 1, 1), (st, ss, ss), (0, 0, 0), rng)
            self.down_bn = BatchNorm3dLayer(c_out)
        else:
            self.down_conv = None
            self.down_bn = None
        self.last_conv_out: Tensor | None = None

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        h = relu(self.bn1(self.conv1(x), training))
        h = relu(self.bn2(self.conv2(h), training))
        h = self.conv3(h)
        self.last_conv_out = h
        h = self.bn3(h, training)
        sc = x if self.down_conv is None else self.down_bn(self.down_conv(x), training)
        return relu(add(h, sc))

    def conv_bn_pairs(self):
        pairs = [("conv1", self.conv1, self.bn1), ("conv2", self.conv2, self.bn2),
                 ("conv3", self.conv3, self.bn3)]
        if self.down_conv is not None:
            pairs.append(("down_conv", self.down_conv, self.down_bn))
        return pairs


class BasicBlock:
    """Two (kT,3,3) convolutions with projection shortcut."""

    def __init__(self, c_in, c_out, kt, stride, rng):
        st, ss = stride
        self.conv1 = Conv3dLayer(
            c_in, c_out, (kt, 3, 3), (st, ss, ss), (kt // 2, 1, 1), rng, inflated=True
        )
        self.bn1 = BatchNorm3dLayer(c_out)
        self.conv2 = Conv3dLayer(
            c_out, c_out, (kt, 3, 3), (1, 1, 1), (kt // 2, 1, 1), rng, inflated=True
        )
        self.bn2 = BatchNorm3dLayer(c_out)
        if c_in != c_out or st != 1 or ss != 1:
            self.down_conv = Conv3dLayer(c_in, c_out, (1, 1, 1), (st, ss, ss), (0, 0, 0), rng)
            self.down_bn = BatchNorm3dLayer(c_out)
        else:
            self.down_conv = None
            self.down_bn = None
        self.last_conv_out: Tensor | None = None

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        h = relu(self.bn1(self.conv1(x), training))
        h = self.conv2(h)
        self.last_conv_out = h
        h = self.bn2(h, training)
        sc = x if self.down_conv is None else self.down_bn(self.down_conv(x), training)
        return relu(add(h, sc))

    def conv_bn_pairs(self):
        pairs = [("conv1", self.conv1, self.bn1), ("conv2", self.conv2, self.bn2)]
        if self.down_conv is not None:
            pairs.append(("down_conv", self.down_conv, self.down_bn))
        return pairs


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------


class Model:
    """Stem + four stacks + four heads.  Build through ``build_model``."""

    def __init__(self, cfg: StackConfig, seed: int):
        cfg.validate()
        self.cfg = cfg
        self.seed = int(seed)
        rng = np.random.default_rng(self.seed)
        base = cfg.base_channels

        self.stem_conv = Conv3dLayer(
            cfg.in_channels, base, (1, 3, 3), (1, 1, 1), (0, 1, 1), rng
        )
        self.stem_bn = BatchNorm3dLayer(base)

        block_cls = Bottleneck if cfg.bottleneck else BasicBlock
        widths = [base * (2**i) for i in range(4)]
        self.stacks: list[list] = []
        c_in = base
        for s in range(4):
            stack = []
            for b in range(cfg.blocks_per_stack[s]):
                stride = _STACK_STRIDES[s] if b == 0 else (1, 1)
                stack.append(block_cls(c_in, widths[s], cfg.temporal_kernel, stride, rng))
                c_in = widths[s]
            self.stacks.append(stack)

        self.heads = [
            LinearLayer(widths[s], cfg.num_classes_per_head[s], rng) for s in range(4)
        ]
        self.masks: dict[str, np.ndarray] = {}
        self.is_trained = False

    # -- forward ------------------------------------------------------------

    def forward(self, x: Tensor, training: bool) -> list[Tensor]:
        """Run all four heads; returns their logits in stack order."""
        if not isinstance(x, Tensor):
            x = Tensor(x)
        if x.ndim != 5 or x.shape[1] != self.cfg.in_channels:
            raise UsageError(
                f"model expects [N,{self.cfg.in_channels},T,H,W] input, got {x.shape}"
            )
        h = relu(self.stem_bn(self.stem_conv(x), training))
        logits = []
        for s in range(4):
            for block in self.stacks[s]:
                h = block(h, training)
            logits.append(self.heads[s](global_avg_pool(h)))
        return logits

    def last_conv_output(self, stack_index: int) -> Tensor:
        """Output tensor of the named stack's final convolution (last forward)."""
        out = self.stacks[stack_index][-1].last_conv_out
        if out is None:
            raise UsageError("no forward pass has been run yet")
        return out

    # -- parameter access ---------------------------------------------------

    def _blocks_named(self):
        for s, stack in enumerate(self.stacks):
            for b, block in enumerate(stack):
                yield f"stacks.{s}.{b}", block

    def named_params(self) -> dict[str, Tensor]:
        out = {"stem.conv.weight": self.stem_conv.weight, "stem.conv.bias": self.stem_conv.bias,
               "stem.bn.gamma": self.stem_bn.gamma, "stem.bn.beta": self.stem_bn.beta}
        for prefix, block in self._blocks_named():
            for cname, conv, bn in block.conv_bn_pairs():
                bn_name = cname.replace("conv", "bn") if "down" not in cname else "down_bn"
                out[f"{prefix}.{cname}.weight"] = conv.weight
                out[f"{prefix}.{cname}.bias"] = conv.bias
                out[f"{prefix}.{bn_name}.gamma"] = bn.gamma
                out[f"{prefix}.{bn_name}.beta"] = bn.beta
        for i, head in enumerate(self.heads):
            out[f"heads.{i}.weight"] = head.weight
            out[f"heads.{i}.bias"] = head.bias
        return out

    def named_buffers(self) -> dict[str, np.ndarray]:
        out = {"stem.bn.running_mean": self.stem_bn.running_mean,
               "stem.bn.running_var": self.stem_bn.running_var}
        for prefix, block in self._blocks_named():
            for cname, _conv, bn in block.conv_bn_pairs():
                bn_name = cname.replace("conv", "bn") if "down" not in cname else "down_bn"
                out[f"{prefix}.{bn_name}.running_mean"] = bn.running_mean
                out[f"{prefix}.{bn_name}.running_var"] = bn.running_var
        return out

    def params(self) -> list[Tensor]:
        return list(self.named_params().values())

    def zero_grad(self) -> None:
        for p in self.params():
            p.grad = None

    def prunable_convs(self) -> list[tuple[str, Conv3dLayer, BatchNorm3dLayer]]:
        """Stack convolutions only; the stem and heads are exempt from pruning."""
        out = []
        for prefix, block in self._blocks_named():
            for cname, conv, bn in block.conv_bn_pairs():
                out.append((f"{prefix}.{cname}", conv, bn))
        return out

    # -- mask enforcement ---------------------------------------------------

    def mask_gradients(self) -> None:
        """Zero the gradients of masked filters so they stay dead in training."""
        if not self.masks:
            return
        by_name = {name: (conv, bn) for name, conv, bn in self.prunable_convs()}
        for name, dead in self.masks.items():
            conv, bn = by_name[name]
            for p in (conv.weight, conv.bias, bn.gamma, bn.beta):
                if p.grad is not None:
                    p.grad[dead] = 0.0

    def enforce_masks(self) -> None:
        """Re-zero masked parameters; keeps dead filters exactly zero."""
        if not self.masks:
            return
        by_name = {name: (conv, bn) for name, conv, bn in self.prunable_convs()}
        for name, dead in self.masks.items():
            conv, bn = by_name[name]
            conv.weight.data[dead] = 0.0
            conv.bias.data[dead] = 0.0
            bn.gamma.data[dead] = 0.0
            bn.beta.data[dead] = 0.0


def build_model(cfg: StackConfig, seed: int = 0) -> Model:
    """Construct a model with seed-deterministic initialization."""
    return Model(cfg, seed)


def forward_heads(model: Model, batch, mode: str) -> list[Tensor]:
    """Forward pass returning all four logit tensors.

    mode "train" uses batch statistics and records onto the active tape (one
    is opened here if none is active); mode "eval" reads running statistics
    and records nothing new.
    """
    if mode not in ("train", "eval"):
        raise UsageError(f"mode must be 'train' or 'eval', got {mode!r}")
    x = batch if isinstance(batch, Tensor) else Tensor(batch)
    if mode == "train":
        from .tensor import _active_tape

        if _active_tape() is None:
            with Tape():
                return model.forward(x, training=True)
        return model.forward(x, training=True)
    return model.forward(x, training=False)


def gradient_attribution(
    model: Model,
    batch,
    head_index: int,
    targets=None,
    stack_index: int = 1,
) -> np.ndarray:
    """Mean absolute adjoint at a stack's final convolution, scaled to [0,1].

    Backpropagates the chosen head's cross-entropy (against provided targets,
    or the head's own argmax predictions when none are given) to the output
    of the last convolution of ``stack_index`` (1-based, default stack 1).
    Returns a [C,T,H,W] map normalized by its maximum; an all-zero map is
    returned unchanged.  Uses eval-mode statistics, so running buffers are
    untouched.
    """
    if not isinstance(head_index, int) or not 1 <= head_index <= 4:
        raise UsageError(f"head_index must be in 1..4, got {head_index!r}")
    if not 1 <= stack_index <= 4:
        raise UsageError(f"stack_index must be in 1..4, got {stack_index!r}")
    x = batch if isinstance(batch, Tensor) else Tensor(batch)
    with Tape():
        logits = model.forward(x, training=False)
        z = logits[head_index - 1]
        if targets is None:
            y = np.argmax(z.data, axis=1)
        else:
            y = np.asarray(targets)
        loss = softmax_cross_entropy(z, y)
        conv_out = model.last_conv_output(stack_index - 1)
    backward(loss)
    if conv_out.grad is None:
        maps = np.zeros(conv_out.shape[1:])
    else:
        maps = np.abs(conv_out.grad).mean(axis=0)
    peak = maps.max()
    if peak > 0.0:
        maps = maps / peak
    return maps
