"""Dual local-global patch segmentation network.

Two convolutional pathways look at the same map location through windows of
different size: a deep, narrow one over a 64x64 patch for fine shape, and a
shallow, wide one over a 256x256 patch for scene-level context.  Their
embeddings are concatenated and pushed through three fully-connected layers
ending in 256 sigmoid units, reshaped to the 16x16 per-pixel probability
patch centred at the same location.  Either pathway may be omitted to get the
local-only or global-only variant.

The per-patch loss is the summed binary cross entropy over the 256 output
pixels; training is plain SGD with momentum and L2 weight decay, mini-batch
gradients summed (or averaged, by configuration) over the batch.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import engine
from .rng import SplitMix64

TARGET_WIDTH = 16
LOCAL_WIDTH = 64
GLOBAL_WIDTH = 256
OUTPUT_PIXELS = TARGET_WIDTH * TARGET_WIDTH


# ---------------------------------------------------------------------------
# architecture specs


@dataclass(frozen=True)
class ConvSpec:
    out_channels: int
    kernel: int
    stride: int = 1
    pad: int | None = None  # None -> kernel // 2 ("same" for stride 1)

    def padding(self) -> int:
        return self.kernel // 2 if self.pad is None else self.pad


@dataclass(frozen=True)
class PoolSpec:
    k: int
    stride: int | None = None  # None -> k


@dataclass(frozen=True)
class ReluSpec:
    pass


@dataclass(frozen=True)
class PathwaySpec:
    """Conv/pool/relu stack followed by a flatten and a Dense->ReLU embedding."""

    layers: tuple
    embed_width: int = 256
    input_width: int = LOCAL_WIDTH
    in_channels: int = 3

    def shape_trace(self) -> list:
        """(C, H, W) after each layer; raises if any stage degenerates."""
        c, h, w = self.in_channels, self.input_width, self.input_width
        trace = [(c, h, w)]
        for spec in self.layers:
            if isinstance(spec, ConvSpec):
                pad = spec.padding()
                h = (h + 2 * pad - spec.kernel) // spec.stride + 1
                w = (w + 2 * pad - spec.kernel) // spec.stride + 1
                c = spec.out_channels
            elif isinstance(spec, PoolSpec):
                stride = spec.k if spec.stride is None else spec.stride
                if h < spec.k or w < spec.k:
                    raise ValueError(f"pool window {spec.k} does not fit {h}x{w}")
                h = (h - spec.k) // stride + 1
                w = (w - spec.k) // stride + 1
            elif isinstance(spec, ReluSpec):
                pass
            else:
                raise ValueError(f"unknown layer spec {spec!r}")
            if h <= 0 or w <= 0:
                raise ValueError(f"layer {spec!r} produces empty output")
            trace.append((c, h, w))
        return trace

    def flat_size(self) -> int:
        c, h, w = self.shape_trace()[-1]
        n = c * h * w
        if n <= 0 or self.embed_width <= 0:
            raise ValueError("pathway flattened size and embed width must be positive")
        return n


# Default desk-scale pathways.  The local stack is deeper and narrower with
# small filters; the global one is shallower and wider with large filters and
# an early stride, mirroring the intended contrast between the two views.
LOCAL_PATHWAY = PathwaySpec(
    layers=(
        ConvSpec(16, 3), ReluSpec(), ConvSpec(16, 3), ReluSpec(), PoolSpec(2),
        ConvSpec(32, 3), ReluSpec(), ConvSpec(32, 3), ReluSpec(), PoolSpec(2),
        ConvSpec(64, 3), ReluSpec(), PoolSpec(2),
    ),
    embed_width=256,
    input_width=LOCAL_WIDTH,
)

GLOBAL_PATHWAY = PathwaySpec(
    layers=(
        ConvSpec(16, 7, stride=2), ReluSpec(), PoolSpec(2),
        ConvSpec(32, 5), ReluSpec(), PoolSpec(2),
        ConvSpec(32, 3), ReluSpec(), PoolSpec(4),
    ),
    embed_width=256,
    input_width=GLOBAL_WIDTH,
)

FUSION_HIDDEN = (512, 512)


class Blank(Enum):
    """Which pathway receives a constant mean-valued image in an ablated pass."""

    NONE = "none"
    LOCAL = "local"
    GLOBAL = "global"
    BOTH = "both"


# ---------------------------------------------------------------------------
# model


class LgSegModel:
    """Parameters plus topology; built via build_model()."""

    def __init__(self, local_spec: PathwaySpec | None, global_spec: PathwaySpec | None,
                 fusion_hidden: tuple, params: dict):
        if local_spec is None and global_spec is None:
            raise ValueError("at least one pathway is required")
        if local_spec is not None and local_spec.input_width != LOCAL_WIDTH:
            raise ValueError(f"local pathway input width must be {LOCAL_WIDTH}")
        if global_spec is not None and global_spec.input_width != GLOBAL_WIDTH:
            raise ValueError(f"global pathway input width must be {GLOBAL_WIDTH}")
        self.local_spec = local_spec
        self.global_spec = global_spec
        self.fusion_hidden = tuple(fusion_hidden)
        self.params = params

    # -- structure ---------------------------------------------------------

    @property
    def fusion_input_width(self) -> int:
        width = 0
        if self.local_spec is not None:
            width += self.local_spec.embed_width
        if self.global_spec is not None:
            width += self.global_spec.embed_width
        return width

    def is_dual(self) -> bool:
        return self.local_spec is not None and self.global_spec is not None

    def load_params(self, tensors: dict) -> None:
        """Replace parameters from a checkpoint; names and shapes must match."""
        if list(tensors) != list(self.params):
            raise ValueError("checkpoint parameter names do not match model architecture")
        for name, arr in tensors.items():
            if arr.shape != self.params[name].shape:
                raise ValueError(f"checkpoint shape mismatch for {name}")
            self.params[name] = np.ascontiguousarray(arr, dtype=np.float64)

    # -- forward / backward --------------------------------------------------

    def _check_input(self, x, width, label):
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (3, width, width):
            raise ValueError(f"{label} input must have shape (3, {width}, {width}), got {x.shape}")
        return x

    def _pathway_forward(self, prefix: str, spec: PathwaySpec, x, caches: list | None):
        conv_idx = 0
        for layer in spec.layers:
            if isinstance(layer, ConvSpec):
                w = self.params[f"{prefix}.{conv_idx}.weight"]
                b = self.params[f"{prefix}.{conv_idx}.bias"]
                if caches is not None:
                    caches.append(("conv", conv_idx, x))
                x = engine.conv2d_forward(x, w, b, layer.stride, layer.padding())
                conv_idx += 1
            elif isinstance(layer, PoolSpec):
                x, idx = engine.maxpool2d(x, layer.k, layer.stride)
                if caches is not None:
                    caches.append(("pool", idx))
            else:  # relu
                if caches is not None:
                    caches.append(("relu", x))
                x = engine.relu(x)
        shape = x.shape
        flat = x.reshape(-1)
        if caches is not None:
            caches.append(("flatten", shape, flat))
        z = engine.dense_forward(flat, self.params[f"{prefix}.fc.weight"],
                                 self.params[f"{prefix}.fc.bias"])
        if caches is not None:
            caches.append(("fc_pre", z))
        return engine.relu(z)

    def _pathway_backward(self, prefix: str, spec: PathwaySpec, caches: list, grad, grads: dict):
        steps = list(caches)
        z = steps.pop()
        assert z[0] == "fc_pre"
        grad = engine.relu_backward(z[1], grad)
        fl = steps.pop()
        assert fl[0] == "flatten"
        grad, gw, gb = engine.dense_backward(fl[2], self.params[f"{prefix}.fc.weight"], grad)
        grads[f"{prefix}.fc.weight"] += gw
        grads[f"{prefix}.fc.bias"] += gb
        grad = grad.reshape(fl[1])
        for layer in reversed(spec.layers):
            step = steps.pop()
            if isinstance(layer, ConvSpec):
                kind, conv_idx, x = step
                assert kind == "conv"
                name = f"{prefix}.{conv_idx}"
                grad, gw, gb = engine.conv2d_backward(
                    x, self.params[f"{name}.weight"], grad, layer.stride, layer.padding())
                grads[f"{name}.weight"] += gw
                grads[f"{name}.bias"] += gb
            elif isinstance(layer, PoolSpec):
                assert step[0] == "pool"
                grad = engine.maxpool2d_backward(step[1], grad)
            else:
                assert step[0] == "relu"
                grad = engine.relu_backward(step[1], grad)
        return grad

    def _forward(self, local_patch, global_patch, caches: dict | None):
        embeds = []
        if self.local_spec is not None:
            if local_patch is None:
                raise ValueError("model has a local pathway: local_patch is required")
            x = self._check_input(local_patch, LOCAL_WIDTH, "local")
            sub = [] if caches is not None else None
            embeds.append(self._pathway_forward("local", self.local_spec, x, sub))
            if caches is not None:
                caches["local"] = sub
        elif local_patch is not None:
            raise ValueError("model has no local pathway but local_patch was given")
        if self.global_spec is not None:
            if global_patch is None:
                raise ValueError("model has a global pathway: global_patch is required")
            x = self._check_input(global_patch, GLOBAL_WIDTH, "global")
            sub = [] if caches is not None else None
            embeds.append(self._pathway_forward("global", self.global_spec, x, sub))
            if caches is not None:
                caches["global"] = sub
        elif global_patch is not None:
            raise ValueError("model has no global pathway but global_patch was given")

        z = np.concatenate(embeds)
        n_fusion = len(self.fusion_hidden) + 1
        if caches is not None:
            caches["fusion"] = []
        for i in range(n_fusion):
            w = self.params[f"fusion.{i}.weight"]
            b = self.params[f"fusion.{i}.bias"]
            if caches is not None:
                caches["fusion"].append(z)
            z = engine.dense_forward(z, w, b)
            if i < n_fusion - 1:
                if caches is not None:
                    caches["fusion"].append(("pre_relu", z))
                z = engine.relu(z)
        probs = engine.sigmoid(z)
        if caches is not None:
            caches["sigmoid_out"] = probs
        return probs.reshape(TARGET_WIDTH, TARGET_WIDTH)

    def forward(self, local_patch=None, global_patch=None) -> np.ndarray:
        """16x16 patch of probabilities in (0, 1) for inputs scaled to [0, 1]."""
        return self._forward(local_patch, global_patch, None)

    def forward_with_caches(self, local_patch=None, global_patch=None):
        caches: dict = {}
        probs = self._forward(local_patch, global_patch, caches)
        return probs, caches

    def backward(self, caches: dict, grad_probs, out: dict | None = None):
        """Gradients of a scalar loss given d(loss)/d(probs).

        Returns (param_grads, local_input_grad, global_input_grad).  With
        `out` given, parameter gradients are accumulated into it in place
        (used for mini-batch summation); input grads are None for absent
        pathways.
        """
        grads = self.zero_grads() if out is None else out
        grad = engine.sigmoid_backward(caches["sigmoid_out"], np.asarray(grad_probs).reshape(-1))
        fusion_steps = list(caches["fusion"])
        n_fusion = len(self.fusion_hidden) + 1
        for i in range(n_fusion - 1, -1, -1):
            if i < n_fusion - 1:
                tagged = fusion_steps.pop()
                assert tagged[0] == "pre_relu"
                grad = engine.relu_backward(tagged[1], grad)
            z_in = fusion_steps.pop()
            grad, gw, gb = engine.dense_backward(z_in, self.params[f"fusion.{i}.weight"], grad)
            grads[f"fusion.{i}.weight"] += gw
            grads[f"fusion.{i}.bias"] += gb

        grad_local = grad_global = None
        offset = 0
        if self.local_spec is not None:
            width = self.local_spec.embed_width
            grad_local = self._pathway_backward("local", self.local_spec,
                                                caches["local"], grad[offset:offset + width], grads)
            offset += width
        if self.global_spec is not None:
            width = self.global_spec.embed_width
            grad_global = self._pathway_backward("global", self.global_spec,
                                                 caches["global"], grad[offset:offset + width], grads)
        return grads, grad_local, grad_global

    def zero_grads(self) -> dict:
        return {name: np.zeros_like(arr) for name, arr in self.params.items()}

    # -- ablation ------------------------------------------------------------

    def ablate(self, local_patch, global_patch, blank: Blank) -> np.ndarray:
        """Forward pass with one or both pathways fed a constant image equal to
        the per-channel mean of its own input window."""
        if blank is Blank.NONE:
            return self.forward(local_patch, global_patch)
        if not self.is_dual():
            raise ValueError("pathway blanking requires a dual-pathway model")
        local = self._check_input(local_patch, LOCAL_WIDTH, "local")
        global_ = self._check_input(global_patch, GLOBAL_WIDTH, "global")
        if blank in (Blank.LOCAL, Blank.BOTH):
            local = np.broadcast_to(local.mean(axis=(1, 2))[:, None, None], local.shape).copy()
        if blank in (Blank.GLOBAL, Blank.BOTH):
            global_ = np.broadcast_to(global_.mean(axis=(1, 2))[:, None, None], global_.shape).copy()
        return self.forward(local, global_)


def build_model(local_spec: PathwaySpec | None = LOCAL_PATHWAY,
                global_spec: PathwaySpec | None = GLOBAL_PATHWAY,
                fusion_hidden: tuple = FUSION_HIDDEN,
                seed: int = 0) -> LgSegModel:
    """Xavier-initialise all parameters from the seed (one RNG split per tensor,
    in a fixed order, so the same seed always gives the same checkpoint)."""
    rng = SplitMix64(seed)
    params: dict = {}

    def add(name, shape, fan_in, fan_out):
        params[name] = engine.xavier_init(shape, fan_in, fan_out, rng.split())

    def add_pathway(prefix, spec):
        trace = spec.shape_trace()
        conv_idx = 0
        pos = 0
        for layer in spec.layers:
            pos += 1
            if isinstance(layer, ConvSpec):
                in_ch = trace[pos - 1][0]
                fan_in = in_ch * layer.kernel * layer.kernel
                fan_out = layer.out_channels * layer.kernel * layer.kernel
                add(f"{prefix}.{conv_idx}.weight",
                    (layer.out_channels, in_ch, layer.kernel, layer.kernel), fan_in, fan_out)
                add(f"{prefix}.{conv_idx}.bias", (layer.out_channels,), fan_in, fan_out)
                conv_idx += 1
        flat = spec.flat_size()
        add(f"{prefix}.fc.weight", (spec.embed_width, flat), flat, spec.embed_width)
        add(f"{prefix}.fc.bias", (spec.embed_width,), flat, spec.embed_width)

    if local_spec is not None:
        add_pathway("local", local_spec)
    if global_spec is not None:
        add_pathway("global", global_spec)

    width = 0
    if local_spec is not None:
        width += local_spec.embed_width
    if global_spec is not None:
        width += global_spec.embed_width
    if width == 0:
        raise ValueError("at least one pathway is required")
    dims = [width, *fusion_hidden, OUTPUT_PIXELS]
    for i in range(len(dims) - 1):
        add(f"fusion.{i}.weight", (dims[i + 1], dims[i]), dims[i], dims[i + 1])
        add(f"fusion.{i}.bias", (dims[i + 1],), dims[i], dims[i + 1])

    return LgSegModel(local_spec, global_spec, fusion_hidden, params)


# ---------------------------------------------------------------------------
# loss


def patch_loss(pred, gt, eps: float = 1e-7):
    """Summed binary cross entropy over the 16x16 patch and its gradient.

    gt must be exactly 0/1; pred is clamped to [eps, 1-eps] before the logs,
    and the gradient is zero where the clamp was active.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError("prediction and ground truth shapes differ")
    if not np.all((gt == 0.0) | (gt == 1.0)):
        raise ValueError("ground truth must be binary")
    if not (0.0 < eps < 1e-3):
        raise ValueError("clamp eps must lie in (0, 1e-3)")
    clamped = np.clip(pred, eps, 1.0 - eps)
    loss = -float(np.sum(gt * np.log(clamped) + (1.0 - gt) * np.log1p(-clamped)))
    grad = (clamped - gt) / (clamped * (1.0 - clamped))
    grad[(pred < eps) | (pred > 1.0 - eps)] = 0.0
    return loss, grad


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    batch_size: int = 10
    learning_rate: float = 1e-4
    momentum: float = 0.9
    weight_decay: float = 5e-4
    epochs: int = 1
    seed: int = 0
    clamp_eps: float = 1e-7
    reduction: str = "sum"  # mini-batch loss: "sum" (default) or "mean"
    stop_loss: float | None = None  # stop once epoch mean per-pixel loss dips below

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not (0.0 < self.clamp_eps < 1e-3):
            raise ValueError("clamp_eps must lie in (0, 1e-3)")
        if self.reduction not in ("sum", "mean"):
            raise ValueError("reduction must be 'sum' or 'mean'")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")


@dataclass
class TrainReport:
    """Per-epoch mean per-pixel loss plus the checkpoint the run produced.

    Wall-clock timings are informational and excluded from equality so that
    two identically-seeded runs compare equal.
    """

    epoch_losses: list
    checkpoint_path: str | None = None
    wall_clock: list = field(default_factory=list, compare=False)


def train(model: LgSegModel, triplets, config: TrainConfig) -> TrainReport:
    """SGD over shuffled mini-batches of patch triplets.

    Every triplet needs .local_patch / .global_patch / .target attributes
    (absent-pathway inputs are ignored).  Gradients within a batch are summed
    (or averaged per config.reduction) and applied in one optimiser step.
    """
    items = list(triplets)
    if not items:
        raise ValueError("training requires a nonempty dataset")
    state = engine.SgdState(config.learning_rate, config.momentum, config.weight_decay)
    rng = SplitMix64(config.seed)
    losses: list = []
    walls: list = []

    use_local = model.local_spec is not None
    use_global = model.global_spec is not None

    for _ in range(config.epochs):
        t0 = time.perf_counter()
        order = list(range(len(items)))
        rng.shuffle(order)
        total = 0.0
        for start in range(0, len(order), config.batch_size):
            batch = order[start:start + config.batch_size]
            grads = model.zero_grads()
            batch_loss = 0.0
            for i in batch:
                t = items[i]
                probs, caches = model.forward_with_caches(
                    t.local_patch if use_local else None,
                    t.global_patch if use_global else None)
                loss, dprobs = patch_loss(probs, t.target, config.clamp_eps)
                batch_loss += loss
                model.backward(caches, dprobs, out=grads)
            if config.reduction == "mean":
                scale = 1.0 / len(batch)
                for name in grads:
                    grads[name] *= scale
            engine.sgd_momentum_step(model.params, grads, state)
            total += batch_loss
        epoch_loss = total / (len(items) * OUTPUT_PIXELS)
        losses.append(epoch_loss)
        walls.append(time.perf_counter() - t0)
        if config.stop_loss is not None and epoch_loss < config.stop_loss:
            break
    return TrainReport(epoch_losses=losses, wall_clock=walls)
