"""Small dense-tensor network with hand-written reverse-mode gradients.

The layer menu is fixed: 3x3 same-padding convolution, ReLU, 2x2 average
pooling, flatten, and linear. That is enough to express the compact ConvNet
used throughout the simulator and to differentiate every distillation loss
with respect to both parameters and input pixels. There is no general
computation graph; each layer knows its own backward rule.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "ModelSpec",
    "Model",
    "ForwardPass",
    "GradBundle",
    "convnet_mini",
    "init_params",
    "cross_entropy",
    "cross_entropy_with_grad",
    "sgd_step",
    "finite_diff_check",
    "save_params",
    "load_params",
]

LAYER_KINDS = ("conv3x3", "relu", "avgpool2", "flatten", "linear")


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description: an ordered chain of layer descriptors.

    Descriptors are tuples: ("conv3x3", in_ch, out_ch), ("relu",),
    ("avgpool2",), ("flatten",), ("linear", in_dim, out_dim). The final layer
    must be linear with out_dim equal to class_count; everything before it is
    the feature extractor.
    """

    layers: tuple
    class_count: int
    input_channels: int
    input_side: int
    feature_dim: int = field(init=False)
    feature_map_shape: tuple | None = field(init=False)

    def __post_init__(self):
        if not self.layers:
            raise ValueError("model needs at least one layer")
        shape: tuple = (self.input_channels, self.input_side, self.input_side)
        last_3d: tuple | None = None
        for idx, layer in enumerate(self.layers):
            kind = layer[0]
            if kind == "conv3x3":
                _, in_ch, out_ch = layer
                if len(shape) != 3 or shape[0] != in_ch:
                    raise ValueError(f"layer {idx}: conv3x3 expects {in_ch} channels, input is {shape}")
                shape = (out_ch, shape[1], shape[2])
            elif kind == "relu":
                pass
            elif kind == "avgpool2":
                if len(shape) != 3 or shape[1] % 2 or shape[2] % 2:
                    raise ValueError(f"layer {idx}: avgpool2 needs an even spatial size, input is {shape}")
                shape = (shape[0], shape[1] // 2, shape[2] // 2)
            elif kind == "flatten":
                if len(shape) != 3:
                    raise ValueError(f"layer {idx}: flatten expects a 3D input, got {shape}")
                last_3d = shape
                shape = (shape[0] * shape[1] * shape[2],)
            elif kind == "linear":
                _, in_dim, out_dim = layer
                if len(shape) != 1 or shape[0] != in_dim:
                    raise ValueError(f"layer {idx}: linear expects {in_dim} inputs, input is {shape}")
                shape = (out_dim,)
            else:
                raise ValueError(f"layer {idx}: unknown kind {kind!r}")
        last = self.layers[-1]
        if last[0] != "linear" or last[2] != self.class_count:
            raise ValueError("last layer must be linear with out_dim == class_count")
        object.__setattr__(self, "feature_dim", last[1])
        # Shape of the feature maps right before the flatten that feeds the
        # final linear layer, when the chain has that form; None otherwise.
        fmap = None
        if len(self.layers) >= 2 and self.layers[-2][0] == "flatten":
            fmap = last_3d
        object.__setattr__(self, "feature_map_shape", fmap)

    def param_shapes(self) -> list[tuple]:
        shapes = []
        for layer in self.layers:
            if layer[0] == "conv3x3":
                _, in_ch, out_ch = layer
                shapes.append((out_ch, in_ch, 3, 3))
                shapes.append((out_ch,))
            elif layer[0] == "linear":
                _, in_dim, out_dim = layer
                shapes.append((out_dim, in_dim))
                shapes.append((out_dim,))
        return shapes

    def param_count(self) -> int:
        return sum(int(np.prod(s)) for s in self.param_shapes())


def convnet_mini(input_channels: int, input_side: int, class_count: int) -> ModelSpec:
    """Compact two-block ConvNet; input side must be divisible by 4."""
    if input_side % 4:
        raise ValueError("convnet_mini needs the input side divisible by 4")
    feat = 16 * (input_side // 4) ** 2
    return ModelSpec(
        layers=(
            ("conv3x3", input_channels, 16),
            ("relu",),
            ("avgpool2",),
            ("conv3x3", 16, 16),
            ("relu",),
            ("avgpool2",),
            ("flatten",),
            ("linear", feat, class_count),
        ),
        class_count=class_count,
        input_channels=input_channels,
        input_side=input_side,
    )


def init_params(spec: ModelSpec, seed: int) -> list[np.ndarray]:
    """Fan-in scaled uniform weights, zero biases, fully seeded."""
    rng = np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFF]))
    params: list[np.ndarray] = []
    for shape in spec.param_shapes():
        if len(shape) == 1:
            params.append(np.zeros(shape, dtype=np.float64))
        else:
            fan_in = int(np.prod(shape[1:]))
            bound = math.sqrt(6.0 / fan_in)
            params.append(rng.uniform(-bound, bound, size=shape))
    return params


@dataclass
class ForwardPass:
    """Activations of one forward evaluation, kept for the backward pass."""

    features: np.ndarray  # (B, F) input of the final linear layer
    logits: np.ndarray  # (B, C)
    caches: list  # one cache entry per layer


@dataclass
class GradBundle:
    """Gradients of a scalar loss; shapes mirror params and the batch."""

    param_grads: list[np.ndarray]
    input_grad: np.ndarray | None


def _im2col3(x: np.ndarray) -> np.ndarray:
    # (B, C, d, d) -> (B, C*9, d*d) patches of the 1-padded input.
    b, c, d, _ = x.shape
    xp = np.zeros((b, c, d + 2, d + 2), dtype=np.float64)
    xp[:, :, 1:-1, 1:-1] = x
    cols = np.empty((b, c, 9, d, d), dtype=np.float64)
    for ki in range(3):
        for kj in range(3):
            cols[:, :, ki * 3 + kj] = xp[:, :, ki : ki + d, kj : kj + d]
    return cols.reshape(b, c * 9, d * d)


def _col2im3(dcols: np.ndarray, c: int, d: int) -> np.ndarray:
    # Adjoint of _im2col3: scatter-add patch gradients back to pixels.
    b = dcols.shape[0]
    six = dcols.reshape(b, c, 3, 3, d, d)
    grad = np.zeros((b, c, d + 2, d + 2), dtype=np.float64)
    for ki in range(3):
        for kj in range(3):
            grad[:, :, ki : ki + d, kj : kj + d] += six[:, :, ki, kj]
    return grad[:, :, 1 : 1 + d, 1 : 1 + d]


class Model:
    """A ModelSpec plus its parameter tensors."""

    def __init__(self, spec: ModelSpec, params: list[np.ndarray] | None = None, seed: int = 0):
        self.spec = spec
        self.params = params if params is not None else init_params(spec, seed)
        expected = spec.param_shapes()
        got = [p.shape for p in self.params]
        if got != expected:
            raise ValueError(f"parameter shapes {got} do not match the spec {expected}")

    def copy(self) -> "Model":
        return Model(self.spec, [p.copy() for p in self.params])

    def param_count(self) -> int:
        return self.spec.param_count()

    def forward(self, batch: np.ndarray) -> ForwardPass:
        x = np.asarray(batch, dtype=np.float64)
        expected = (self.spec.input_channels, self.spec.input_side, self.spec.input_side)
        if x.ndim != 4 or x.shape[1:] != expected:
            raise ValueError(f"batch shape {x.shape} does not match model input (B, {expected})")
        caches: list = []
        features = None
        p = 0
        for i, layer in enumerate(self.spec.layers):
            kind = layer[0]
            if i == len(self.spec.layers) - 1:
                features = x
            if kind == "conv3x3":
                w, b = self.params[p], self.params[p + 1]
                p += 2
                bsz, c, d, _ = x.shape
                cols = _im2col3(x)
                out = np.matmul(w.reshape(w.shape[0], -1), cols)
                out += b[:, None]
                caches.append(("conv3x3", cols, (c, d)))
                x = out.reshape(bsz, w.shape[0], d, d)
            elif kind == "relu":
                mask = x > 0
                caches.append(("relu", mask))
                x = x * mask
            elif kind == "avgpool2":
                bsz, c, d, _ = x.shape
                caches.append(("avgpool2", (d,)))
                x = (
                    x[:, :, 0::2, 0::2]
                    + x[:, :, 0::2, 1::2]
                    + x[:, :, 1::2, 0::2]
                    + x[:, :, 1::2, 1::2]
                ) * 0.25
            elif kind == "flatten":
                caches.append(("flatten", x.shape))
                x = x.reshape(x.shape[0], -1)
            else:  # linear
                w, b = self.params[p], self.params[p + 1]
                p += 2
                caches.append(("linear", x))
                x = x @ w.T + b
        return ForwardPass(features=features, logits=x, caches=caches)

    def backward(
        self,
        fwd: ForwardPass,
        d_logits: np.ndarray | None = None,
        d_features: np.ndarray | None = None,
        need_param_grads: bool = True,
        need_input_grad: bool = True,
    ) -> GradBundle:
        """Reverse-mode gradients from upstream gradients at the two taps.

        `d_logits` is the gradient of the loss at the network output and
        `d_features` at the input of the final linear layer; either may be
        None (treated as zero). Requires the ForwardPass of the same inputs.
        """
        if fwd is None or not fwd.caches:
            raise ValueError("backward requires a completed forward pass")
        if d_logits is None and d_features is None:
            raise ValueError("backward needs at least one upstream gradient")
        if d_logits is None:
            grad = np.zeros_like(fwd.logits)
        else:
            grad = np.asarray(d_logits, dtype=np.float64)
            if grad.shape != fwd.logits.shape:
                raise ValueError(f"d_logits shape {grad.shape} != logits shape {fwd.logits.shape}")

        param_grads: list[np.ndarray | None] = [None] * len(self.params)
        p = len(self.params)
        for i in range(len(self.spec.layers) - 1, -1, -1):
            cache = fwd.caches[i]
            kind = cache[0]
            if kind == "conv3x3":
                p -= 2
                w = self.params[p]
                _, cols, (c, d) = cache
                bsz = grad.shape[0]
                gout = grad.reshape(bsz, w.shape[0], d * d)
                if need_param_grads:
                    param_grads[p] = np.tensordot(gout, cols, axes=([0, 2], [0, 2])).reshape(w.shape)
                    param_grads[p + 1] = gout.sum(axis=(0, 2))
                if need_input_grad or i > 0:
                    dcols = np.matmul(w.reshape(w.shape[0], -1).T, gout)
                    grad = _col2im3(dcols, c, d)
                else:
                    grad = None
            elif kind == "relu":
                grad = grad * cache[1]
            elif kind == "avgpool2":
                (d,) = cache[1]
                spread = grad * 0.25
                up = np.empty(grad.shape[:2] + (d, d), dtype=np.float64)
                up[:, :, 0::2, 0::2] = spread
                up[:, :, 0::2, 1::2] = spread
                up[:, :, 1::2, 0::2] = spread
                up[:, :, 1::2, 1::2] = spread
                grad = up
            elif kind == "flatten":
                grad = grad.reshape(cache[1])
            else:  # linear
                p -= 2
                w = self.params[p]
                x_in = cache[1]
                if need_param_grads:
                    param_grads[p] = grad.T @ x_in
                    param_grads[p + 1] = grad.sum(axis=0)
                grad = grad @ w
            if i == len(self.spec.layers) - 1 and d_features is not None:
                df = np.asarray(d_features, dtype=np.float64)
                if df.shape != grad.shape:
                    raise ValueError(f"d_features shape {df.shape} != feature shape {grad.shape}")
                grad = grad + df
        if need_param_grads:
            filled = [
                g if g is not None else np.zeros_like(self.params[k])
                for k, g in enumerate(param_grads)
            ]
        else:
            filled = []
        return GradBundle(param_grads=filled, input_grad=grad if need_input_grad else None)

    def predict(self, batch: np.ndarray) -> np.ndarray:
        return np.argmax(self.forward(batch).logits, axis=1)

    def accuracy(self, images: np.ndarray, labels: np.ndarray, batch_size: int = 512) -> float:
        hits = 0
        for start in range(0, len(images), batch_size):
            pred = self.predict(images[start : start + batch_size])
            hits += int(np.sum(pred == labels[start : start + batch_size]))
        return hits / len(images)


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> float:
    """Mean negative log-softmax of the true class, max-stabilized."""
    return cross_entropy_with_grad(logits, labels)[0]


def cross_entropy_with_grad(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ValueError(f"incompatible shapes: logits {logits.shape}, labels {labels.shape}")
    n, c = logits.shape
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"labels must lie in [0, {c}), got range [{labels.min()}, {labels.max()}]")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    loss = float(np.mean(log_z - shifted[np.arange(n), labels]))
    grad = np.exp(shifted - log_z[:, None])
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


def sgd_step(params: list[np.ndarray], grads, lr: float) -> list[np.ndarray]:
    """One plain gradient step: p - lr * g, elementwise."""
    if hasattr(grads, "param_grads"):
        grads = grads.param_grads
    if lr < 0:
        raise ValueError("learning rate must be nonnegative")
    if len(params) != len(grads):
        raise ValueError(f"{len(params)} params but {len(grads)} gradients")
    out = []
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ValueError(f"shape mismatch {p.shape} vs {g.shape}")
        if not np.all(np.isfinite(g)):
            raise ValueError("non-finite gradient; the upstream optimization diverged")
        out.append(p - lr * g)
    return out


def finite_diff_check(fn, point: np.ndarray, analytic_grad: np.ndarray, step: float = 1e-5) -> float:
    """Max relative disagreement between a gradient and central differences."""
    point = np.asarray(point, dtype=np.float64)
    analytic = np.asarray(analytic_grad, dtype=np.float64)
    worst = 0.0
    flat = point.ravel()
    for idx in range(flat.size):
        orig = flat[idx]
        flat[idx] = orig + step
        up = fn(point)
        flat[idx] = orig - step
        down = fn(point)
        flat[idx] = orig
        numeric = (up - down) / (2.0 * step)
        a = analytic.ravel()[idx]
        err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
        worst = max(worst, err)
    return worst


def save_params(path, spec: ModelSpec, params: list[np.ndarray]) -> None:
    """Checkpoint: line-oriented text header, then flat float32 parameters."""
    lines = [
        "fedfd-model 1",
        f"input {spec.input_channels} {spec.input_side}",
        f"classes {spec.class_count}",
    ]
    for layer in spec.layers:
        lines.append("layer " + " ".join(str(x) for x in layer))
    lines.append("params")
    header = ("\n".join(lines) + "\n").encode("ascii")
    flat = np.concatenate([p.ravel() for p in params]).astype("<f4")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(flat.tobytes())


def load_params(path) -> tuple[ModelSpec, list[np.ndarray]]:
    with open(path, "rb") as fh:
        blob = fh.read()
    marker = b"params\n"
    cut = blob.find(marker)
    if cut < 0 or not blob.startswith(b"fedfd-model 1\n"):
        raise ValueError("not a model checkpoint")
    lines = blob[:cut].decode("ascii").splitlines()
    input_channels = input_side = class_count = None
    layers = []
    for line in lines[1:]:
        parts = line.split()
        if parts[0] == "input":
            input_channels, input_side = int(parts[1]), int(parts[2])
        elif parts[0] == "classes":
            class_count = int(parts[1])
        elif parts[0] == "layer":
            layers.append(tuple([parts[1]] + [int(x) for x in parts[2:]]))
    spec = ModelSpec(
        layers=tuple(layers),
        class_count=class_count,
        input_channels=input_channels,
        input_side=input_side,
    )
    flat = np.frombuffer(blob[cut + len(marker) :], dtype="<f4").astype(np.float64)
    params = []
    offset = 0
    for shape in spec.param_shapes():
        size = int(np.prod(shape))
        params.append(flat[offset : offset + size].reshape(shape).copy())
        offset += size
    if offset != flat.size:
        raise ValueError("checkpoint parameter record has the wrong length")
    return spec, params
