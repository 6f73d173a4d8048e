"""Client-side synthetic-data optimization.

A client never sends model weights. It distills its shard into a small
per-class synthetic set by gradient descent on the synthetic pixels, under a
choice of objective: plain feature-mean alignment, the same alignment in a
cosine-transformed feature space (optionally restricted to the low-frequency
coordinates), or the combined objective that additionally scales the
synthetic set's classification loss by the real shard's accuracy. Spatial
reduction baselines (crop / resize / random / gap) are provided for the
comparison harness only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .frequency import SpectralBlock, apply_mask, dct2, dct2_array, dct_matrix, idct2_array
from .nn import Model, cross_entropy_with_grad

__all__ = [
    "SyntheticSet",
    "LossWeights",
    "DistillConfig",
    "PayloadReduction",
    "IterationTrace",
    "DistillationDivergence",
    "FULL_SCALE",
    "feature_mean",
    "real_accuracy",
    "loss_dm",
    "loss_fda",
    "loss_rsc",
    "rsc_with_factor",
    "loss_fdd",
    "objective_grads",
    "client_update",
    "spatial_select_baseline",
    "reduce_batch",
    "reduce_adjoint",
]

OBJECTIVES = ("dm", "fda", "fdd")
FDA_MODES = ("masked-lowfreq", "full-spectrum")
FEATURE_DCT_MODES = ("1d-flat", "2d-maps")
FDA_TARGETS = ("features", "batches")
SPATIAL_METHODS = ("crop", "resize", "random", "gap")


class DistillationDivergence(RuntimeError):
    """Raised when a synthetic-data update produces a non-finite loss."""


@dataclass
class SyntheticSet:
    """Per-class synthetic images; labels are implicit in the class buckets."""

    images: dict[int, np.ndarray]  # class -> (ipc, channels, d, d)
    ipc: int

    def __post_init__(self):
        if self.ipc < 1:
            raise ValueError("ipc must be at least 1")
        for cls, arr in self.images.items():
            arr = np.asarray(arr, dtype=np.float64)
            if arr.ndim != 4 or arr.shape[0] != self.ipc:
                raise ValueError(f"class {cls}: expected ({self.ipc}, c, d, d), got {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"class {cls}: synthetic images contain non-finite pixels")
            self.images[cls] = arr

    @property
    def classes(self) -> list[int]:
        return sorted(self.images)

    def total_images(self) -> int:
        return self.ipc * len(self.images)


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 0.01
    lambda2: float = 0.01

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass(frozen=True)
class DistillConfig:
    """Knobs of one client-side distillation pass.

    `fda_mode` chooses whether the transformed alignment uses the whole
    coefficient vector (provably identical to plain alignment, since the
    transform is orthonormal) or only the first quarter of low-frequency
    coordinates. `fda_target` chooses whether the cosine transform is applied
    to extracted features (default) or to the raw mini-batches before the
    extractor. `full_shard_accuracy_limit` caps the shard size up to which
    the real-accuracy factor is computed on the whole shard instead of the
    sampled mini-batch.
    """

    local_steps: int = 200
    local_lr: float = 1.0
    batch_size: int = 64
    objective: str = "fdd"
    fda_mode: str = "masked-lowfreq"
    feature_dct: str = "1d-flat"
    fda_target: str = "features"
    full_shard_accuracy_limit: int = 4096

    def __post_init__(self):
        if self.local_steps < 1:
            raise ValueError("local_steps must be positive")
        if self.local_lr < 0:
            raise ValueError("local_lr must be nonnegative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        for value, allowed, name in [
            (self.objective, OBJECTIVES, "objective"),
            (self.fda_mode, FDA_MODES, "fda_mode"),
            (self.feature_dct, FEATURE_DCT_MODES, "feature_dct"),
            (self.fda_target, FDA_TARGETS, "fda_target"),
        ]:
            if value not in allowed:
                raise ValueError(f"{name} must be one of {allowed}, got {value!r}")


# Full-scale settings used for real datasets; the desk-scale defaults above
# shrink only the step count.
FULL_SCALE = DistillConfig(local_steps=1000, local_lr=1.0, batch_size=64)


@dataclass(frozen=True)
class PayloadReduction:
    """How synthetic pixels reach the server-side model.

    The default frequency route transmits masked transform windows and the
    server reconstructs full-size images. The spatial methods instead reduce
    images to side-by-side pixels; the classification guidance then runs on
    the reduced view, since that is all the server will ever see.
    """

    method: str = "frequency"
    side: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.method != "frequency" and self.method not in SPATIAL_METHODS:
            raise ValueError(f"unknown reduction method {self.method!r}")
        if self.method != "frequency" and (self.side is None or self.side < 1):
            raise ValueError("spatial reductions need a positive target side")


class IterationTrace(NamedTuple):
    iteration: int
    loss: float
    fda: float
    rsc: float
    accuracy: float | None


@dataclass
class ObjectiveReport:
    """Loss values plus whichever gradients were requested."""

    value: float
    fda: float
    rsc: float
    accuracy: float | None
    pixel_grads: dict[int, np.ndarray] | None = None
    model_param_grads: list[np.ndarray] | None = None
    extractor_param_grads: list[np.ndarray] | None = None


def feature_mean(batch: np.ndarray, extractor: Model) -> np.ndarray:
    """Arithmetic mean of extractor features over one batch."""
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 4 or batch.shape[0] == 0:
        raise ValueError(f"feature_mean needs a nonempty (n, c, d, d) batch, got {batch.shape}")
    return extractor.forward(batch).features.mean(axis=0)


def real_accuracy(model: Model, images: np.ndarray, labels: np.ndarray) -> float:
    if len(images) == 0:
        raise ValueError("accuracy is undefined on an empty shard")
    return model.accuracy(images, labels)


def _check_class_match(syn_by_class, real_by_class) -> list[int]:
    syn_classes = sorted(syn_by_class)
    if syn_classes != sorted(real_by_class):
        raise ValueError(
            f"class inventories differ: synthetic {syn_classes}, real {sorted(real_by_class)}"
        )
    for cls in syn_classes:
        if len(syn_by_class[cls]) == 0 or len(real_by_class[cls]) == 0:
            raise ValueError(f"class {cls} has an empty batch")
    return syn_classes


def _concat_by_class(by_class, classes):
    arrays = [np.asarray(by_class[c], dtype=np.float64) for c in classes]
    slices = {}
    offset = 0
    for cls, arr in zip(classes, arrays):
        slices[cls] = slice(offset, offset + len(arr))
        offset += len(arr)
    return np.concatenate(arrays, axis=0), slices


def _input_lowpass_mask(side: int) -> np.ndarray:
    keep = math.ceil(side / 2)
    mask = np.zeros((side, side), dtype=np.float64)
    mask[:keep, :keep] = 1.0
    return mask


def _masked_quarter(delta: np.ndarray, cfg: DistillConfig, fmap_shape) -> np.ndarray:
    """Zero all but the low-frequency quarter of a transformed feature vector."""
    out = delta.copy()
    if cfg.feature_dct == "1d-flat":
        keep = math.ceil(delta.size / 4)
        out[keep:] = 0.0
    else:
        ch, h, w = fmap_shape
        maps = out.reshape(ch, h, w)
        kh, kw = math.ceil(h / 2), math.ceil(w / 2)
        keep_mask = np.zeros((h, w), dtype=bool)
        keep_mask[:kh, :kw] = True
        maps[:, ~keep_mask] = 0.0
        out = maps.reshape(-1)
    return out


def _transform_feats(feats: np.ndarray, cfg: DistillConfig, fmap_shape) -> np.ndarray:
    if cfg.feature_dct == "1d-flat":
        return feats @ dct_matrix(feats.shape[1]).T
    if fmap_shape is None:
        raise ValueError("2d-maps feature transform needs a flatten-fed classifier head")
    ch, h, w = fmap_shape
    maps = feats.reshape(len(feats), ch, h, w)
    return dct2_array(maps).reshape(len(feats), -1)


def _adjoint_feats(grads: np.ndarray, cfg: DistillConfig, fmap_shape) -> np.ndarray:
    if cfg.feature_dct == "1d-flat":
        return grads @ dct_matrix(grads.shape[1])
    ch, h, w = fmap_shape
    maps = grads.reshape(len(grads), ch, h, w)
    return idct2_array(maps).reshape(len(grads), -1)


def _aligned_inputs(images: np.ndarray, cfg: DistillConfig, transformed: bool):
    """Extractor inputs for the alignment term, plus the input mask if any."""
    if transformed and cfg.fda_target == "batches":
        spectra = dct2_array(images)
        if cfg.fda_mode == "masked-lowfreq":
            mask = _input_lowpass_mask(images.shape[-1])
            return spectra * mask, mask
        return spectra, None
    return images, None


def class_real_mean(
    images: np.ndarray, extractor: Model, cfg: DistillConfig, transformed: bool
) -> np.ndarray:
    """Transformed feature mean of one real class batch.

    The real side of the alignment never receives gradients, so when a class
    fits inside a single mini-batch this mean is constant for a whole round
    and can be computed once.
    """
    inputs, _ = _aligned_inputs(np.asarray(images, dtype=np.float64), cfg, transformed)
    feats = extractor.forward(inputs).features
    if transformed and cfg.fda_target == "features":
        feats = _transform_feats(feats, cfg, extractor.spec.feature_map_shape)
    return feats.mean(axis=0)


def _alignment(
    syn_by_class,
    real_by_class,
    extractor: Model,
    cfg: DistillConfig,
    transformed: bool,
    want_pixel_grads: bool = False,
    want_param_grads: bool = False,
    real_means: dict[int, np.ndarray] | None = None,
):
    """Sum over classes of squared distance between (transformed) feature means.

    Returns (loss, per-class pixel gradients or None, extractor parameter
    gradients or None). Only the synthetic side receives pixel gradients; the
    real side is data. Parameter gradients include both sides, so they cannot
    be combined with precomputed `real_means`, which bypass the real forward.
    """
    real_means = real_means or {}
    classes = sorted(syn_by_class)
    live_classes = [c for c in classes if c not in real_means]
    if sorted(real_by_class) != classes and sorted(real_by_class) != live_classes:
        raise ValueError(
            f"class inventories differ: synthetic {classes}, real "
            f"{sorted(set(real_by_class) | set(real_means))}"
        )
    for cls in classes:
        if len(syn_by_class[cls]) == 0 or (cls in live_classes and len(real_by_class[cls]) == 0):
            raise ValueError(f"class {cls} has an empty batch")
    if want_param_grads and real_means:
        raise ValueError("parameter gradients need the real batches, not cached means")

    syn_all, syn_slices = _concat_by_class(syn_by_class, classes)
    syn_in, input_mask = _aligned_inputs(syn_all, cfg, transformed)
    fwd_s = extractor.forward(syn_in)

    fwd_r = None
    real_slices = {}
    t_r = None
    if live_classes:
        real_all, real_slices = _concat_by_class(real_by_class, live_classes)
        real_in, _ = _aligned_inputs(real_all, cfg, transformed)
        fwd_r = extractor.forward(real_in)

    feature_transform = transformed and cfg.fda_target == "features"
    fmap = extractor.spec.feature_map_shape
    t_s = _transform_feats(fwd_s.features, cfg, fmap) if feature_transform else fwd_s.features
    if fwd_r is not None:
        t_r = _transform_feats(fwd_r.features, cfg, fmap) if feature_transform else fwd_r.features

    loss = 0.0
    need_grads = want_pixel_grads or want_param_grads
    d_ts = np.zeros_like(t_s) if need_grads else None
    d_tr = np.zeros_like(t_r) if need_grads and t_r is not None else None
    for cls in classes:
        ssl = syn_slices[cls]
        if cls in real_means:
            ref = real_means[cls]
        else:
            ref = t_r[real_slices[cls]].mean(axis=0)
        delta = t_s[ssl].mean(axis=0) - ref
        if feature_transform and cfg.fda_mode == "masked-lowfreq":
            delta = _masked_quarter(delta, cfg, fmap)
        loss += float(delta @ delta)
        if need_grads:
            d_ts[ssl] = 2.0 * delta / (ssl.stop - ssl.start)
            if cls not in real_means:
                rsl = real_slices[cls]
                d_tr[rsl] = -2.0 * delta / (rsl.stop - rsl.start)

    pixel_grads = None
    param_grads = None
    if need_grads:
        d_feats_s = _adjoint_feats(d_ts, cfg, fmap) if feature_transform else d_ts
        bundle_s = extractor.backward(
            fwd_s,
            d_features=d_feats_s,
            need_param_grads=want_param_grads,
            need_input_grad=want_pixel_grads,
        )
        if want_pixel_grads:
            g_in = bundle_s.input_grad
            if transformed and cfg.fda_target == "batches":
                if input_mask is not None:
                    g_in = g_in * input_mask
                g_in = idct2_array(g_in)
            pixel_grads = {cls: g_in[syn_slices[cls]] for cls in classes}
        if want_param_grads:
            d_feats_r = _adjoint_feats(d_tr, cfg, fmap) if feature_transform else d_tr
            bundle_r = extractor.backward(
                fwd_r, d_features=d_feats_r, need_param_grads=True, need_input_grad=False
            )
            param_grads = [gs + gr for gs, gr in zip(bundle_s.param_grads, bundle_r.param_grads)]
    return loss, pixel_grads, param_grads


def loss_dm(syn_by_class, real_by_class, extractor: Model) -> float:
    """Sum over classes of squared distance between feature means."""
    return _alignment(syn_by_class, real_by_class, extractor, DistillConfig(), transformed=False)[0]


def loss_fda(
    syn_by_class, real_by_class, extractor: Model, cfg: DistillConfig = DistillConfig()
) -> float:
    """Feature-mean alignment computed in the transformed (frequency) space."""
    return _alignment(syn_by_class, real_by_class, extractor, cfg, transformed=True)[0]


def _syn_batch_with_labels(syn_by_class, classes):
    syn_all, slices = _concat_by_class(syn_by_class, classes)
    labels = np.empty(len(syn_all), dtype=np.int64)
    for cls in classes:
        labels[slices[cls]] = cls
    return syn_all, labels, slices


def rsc_with_factor(
    syn_by_class,
    model: Model,
    factor: float,
    reduction: PayloadReduction | None = None,
    want_pixel_grads: bool = False,
    want_param_grads: bool = False,
):
    """Synthetic cross-entropy scaled by a constant accuracy factor.

    The factor is piecewise constant in both pixels and parameters, so no
    gradient flows through it; scaling it scales every gradient exactly.
    Returns (loss, per-class pixel grads or None, model param grads or None).
    """
    classes = sorted(syn_by_class)
    syn_all, labels, slices = _syn_batch_with_labels(syn_by_class, classes)
    model_in = syn_all
    if reduction is not None and reduction.method != "frequency":
        model_in = reduce_batch(syn_all, reduction.side, reduction.method, reduction.seed)
    fwd = model.forward(model_in)
    ce, d_logits = cross_entropy_with_grad(fwd.logits, labels)
    loss = factor * ce
    pixel_grads = None
    param_grads = None
    if want_pixel_grads or want_param_grads:
        bundle = model.backward(
            fwd,
            d_logits=factor * d_logits,
            need_param_grads=want_param_grads,
            need_input_grad=want_pixel_grads,
        )
        if want_pixel_grads:
            g_in = bundle.input_grad
            if reduction is not None and reduction.method != "frequency":
                g_in = reduce_adjoint(g_in, syn_all.shape[-1], reduction.method, reduction.seed)
            pixel_grads = {cls: g_in[slices[cls]] for cls in classes}
        if want_param_grads:
            param_grads = bundle.param_grads
    return loss, pixel_grads, param_grads


def loss_rsc(syn_by_class, real_images: np.ndarray, real_labels: np.ndarray, model: Model) -> float:
    """Synthetic cross-entropy times the real shard's accuracy."""
    factor = real_accuracy(model, real_images, real_labels)
    return rsc_with_factor(syn_by_class, model, factor)[0]


def objective_grads(
    syn_by_class,
    real_by_class,
    model: Model,
    weights: LossWeights,
    cfg: DistillConfig,
    extractor: Model | None = None,
    accuracy_factor: float | None = None,
    reduction: PayloadReduction | None = None,
    real_means: dict[int, np.ndarray] | None = None,
    want_pixel_grads: bool = False,
    want_param_grads: bool = False,
) -> ObjectiveReport:
    """Evaluate the configured objective and, optionally, its gradients.

    `extractor` is the feature embedding for the alignment term (defaults to
    the model itself); `model` provides the classification guidance. When the
    two are the same network, parameter gradients are merged into
    model_param_grads. `real_means` may carry precomputed transformed class
    means for the alignment's real side.
    """
    if extractor is None:
        extractor = model
    objective = cfg.objective
    align_loss, align_pix, align_params = _alignment(
        syn_by_class,
        real_by_class,
        extractor,
        cfg,
        transformed=objective != "dm",
        want_pixel_grads=want_pixel_grads,
        want_param_grads=want_param_grads,
        real_means=real_means,
    )
    if objective in ("dm", "fda"):
        if extractor is model:
            return ObjectiveReport(
                value=align_loss, fda=align_loss, rsc=0.0, accuracy=None,
                pixel_grads=align_pix, model_param_grads=align_params,
            )
        return ObjectiveReport(
            value=align_loss, fda=align_loss, rsc=0.0, accuracy=None,
            pixel_grads=align_pix, extractor_param_grads=align_params,
        )

    if accuracy_factor is None:
        classes = _check_class_match(syn_by_class, real_by_class)
        real_all, _ = _concat_by_class(real_by_class, classes)
        real_labels = np.concatenate(
            [np.full(len(real_by_class[c]), c, dtype=np.int64) for c in classes]
        )
        model_in = real_all
        if reduction is not None and reduction.method != "frequency":
            model_in = reduce_batch(real_all, reduction.side, reduction.method, reduction.seed)
        accuracy_factor = real_accuracy(model, model_in, real_labels)
    rsc_loss, rsc_pix, rsc_params = rsc_with_factor(
        syn_by_class,
        model,
        accuracy_factor,
        reduction=reduction,
        want_pixel_grads=want_pixel_grads,
        want_param_grads=want_param_grads,
    )

    value = weights.lambda1 * align_loss + weights.lambda2 * rsc_loss
    pixel_grads = None
    if want_pixel_grads:
        pixel_grads = {
            cls: weights.lambda1 * align_pix[cls] + weights.lambda2 * rsc_pix[cls]
            for cls in align_pix
        }
    model_params = None
    extractor_params = None
    if want_param_grads:
        rsc_scaled = [weights.lambda2 * g for g in rsc_params]
        align_scaled = [weights.lambda1 * g for g in align_params]
        if extractor is model:
            model_params = [a + r for a, r in zip(align_scaled, rsc_scaled)]
        else:
            model_params = rsc_scaled
            extractor_params = align_scaled
    return ObjectiveReport(
        value=value,
        fda=align_loss,
        rsc=rsc_loss,
        accuracy=accuracy_factor,
        pixel_grads=pixel_grads,
        model_param_grads=model_params,
        extractor_param_grads=extractor_params,
    )


def loss_fdd(
    syn_by_class,
    real_by_class,
    model: Model,
    weights: LossWeights = LossWeights(),
    cfg: DistillConfig = DistillConfig(),
    extractor: Model | None = None,
) -> float:
    """Weighted sum of transformed alignment and accuracy-scaled classification."""
    report = objective_grads(syn_by_class, real_by_class, model, weights, cfg, extractor=extractor)
    return report.value


def client_update(
    synthetic: SyntheticSet,
    shard_by_class: dict[int, np.ndarray],
    model: Model,
    extractor: Model,
    cfg: DistillConfig,
    weights: LossWeights,
    window_side: int,
    seed: int,
    reduction: PayloadReduction | None = None,
) -> tuple[list[SpectralBlock], list[IterationTrace]]:
    """Run the local distillation loop and package the results for transmission.

    Each iteration samples a per-class real mini-batch (without replacement),
    evaluates the configured objective against the full synthetic set of each
    class, and takes one gradient step on the synthetic pixels only; the
    models stay frozen. Afterwards every synthetic image is transformed and
    masked to the top-left window. The synthetic set is updated in place so
    the next round continues from it.
    """
    classes = synthetic.classes
    if sorted(shard_by_class) != classes:
        raise ValueError(
            f"synthetic classes {classes} do not match shard classes {sorted(shard_by_class)}"
        )
    rng = np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFF]))

    constant_factor = None
    if cfg.objective == "fdd":
        shard_total = sum(len(v) for v in shard_by_class.values())
        if shard_total <= cfg.full_shard_accuracy_limit:
            real_all, labels, _ = _syn_batch_with_labels(shard_by_class, classes)
            model_in = real_all
            if reduction is not None and reduction.method != "frequency":
                model_in = reduce_batch(real_all, reduction.side, reduction.method, reduction.seed)
            constant_factor = real_accuracy(model, model_in, labels)

    # Classes that fit inside one mini-batch contribute the same real-side
    # mean every iteration (the extractor is frozen for the round), so those
    # means are computed once. Disabled when the accuracy factor itself needs
    # fresh per-iteration real batches.
    mean_cache: dict[int, np.ndarray] = {}
    if cfg.objective != "fdd" or constant_factor is not None:
        transformed = cfg.objective != "dm"
        for cls in classes:
            pool = shard_by_class[cls]
            if len(pool) <= cfg.batch_size:
                mean_cache[cls] = class_real_mean(pool, extractor, cfg, transformed)

    trace: list[IterationTrace] = []
    for t in range(cfg.local_steps):
        real_batch = {}
        for cls in classes:
            pool = shard_by_class[cls]
            take = min(cfg.batch_size, len(pool))
            idx = rng.choice(len(pool), size=take, replace=False)
            if cls not in mean_cache:
                real_batch[cls] = pool[idx]
        report = objective_grads(
            synthetic.images,
            real_batch,
            model,
            weights,
            cfg,
            extractor=extractor,
            accuracy_factor=constant_factor,
            reduction=reduction,
            real_means=mean_cache,
            want_pixel_grads=True,
        )
        if not math.isfinite(report.value):
            raise DistillationDivergence(
                f"objective became non-finite at iteration {t} (value {report.value})"
            )
        trace.append(IterationTrace(t, report.value, report.fda, report.rsc, report.accuracy))
        if cfg.local_lr != 0.0:
            for cls in classes:
                synthetic.images[cls] = synthetic.images[cls] - cfg.local_lr * report.pixel_grads[cls]

    blocks: list[SpectralBlock] = []
    for cls in classes:
        for img in synthetic.images[cls]:
            blocks.append(apply_mask(dct2(img), window_side, class_label=cls))
    return blocks, trace


# ---------------------------------------------------------------------------
# Spatial reduction baselines (comparison harness only)
# ---------------------------------------------------------------------------


def _bilinear_matrix(d: int, s: int) -> np.ndarray:
    # Row-interpolation matrix A with out = A @ x @ A.T; rows sum to 1.
    a = np.zeros((s, d), dtype=np.float64)
    src = (np.arange(s) + 0.5) * (d / s) - 0.5
    src = np.clip(src, 0.0, d - 1.0)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, d - 1)
    frac = src - lo
    for row in range(s):
        a[row, lo[row]] += 1.0 - frac[row]
        a[row, hi[row]] += frac[row]
    return a


def _random_pixel_subset(d: int, s: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFF, 0x5E1EC7]))
    idx = rng.choice(d * d, size=s * s, replace=False)
    idx.sort()
    return idx


def _check_reduction_args(d: int, s: int, method: str) -> None:
    if method not in SPATIAL_METHODS:
        raise ValueError(f"unknown spatial method {method!r}; choose from {SPATIAL_METHODS}")
    if not 1 <= s <= d:
        raise ValueError(f"target side {s} must lie in [1, {d}]")


def reduce_batch(images: np.ndarray, s: int, method: str, seed: int = 0) -> np.ndarray:
    """Reduce (n, c, d, d) images to (n, c, s, s) with a spatial selector."""
    images = np.asarray(images, dtype=np.float64)
    d = images.shape[-1]
    _check_reduction_args(d, s, method)
    if method == "crop":
        start = (d - s) // 2
        return images[..., start : start + s, start : start + s].copy()
    if method == "gap":
        stride = d // s
        picks = np.arange(s) * stride
        return images[..., picks[:, None], picks[None, :]].copy()
    if method == "random":
        idx = _random_pixel_subset(d, s, seed)
        flat = images.reshape(*images.shape[:-2], d * d)
        return flat[..., idx].reshape(*images.shape[:-2], s, s)
    a = _bilinear_matrix(d, s)
    return a @ images @ a.T


def reduce_adjoint(grads: np.ndarray, d: int, method: str, seed: int = 0) -> np.ndarray:
    """Adjoint of reduce_batch: scatter (n, c, s, s) gradients back to d-by-d."""
    grads = np.asarray(grads, dtype=np.float64)
    s = grads.shape[-1]
    _check_reduction_args(d, s, method)
    lead = grads.shape[:-2]
    if method == "crop":
        out = np.zeros(lead + (d, d), dtype=np.float64)
        start = (d - s) // 2
        out[..., start : start + s, start : start + s] = grads
        return out
    if method == "gap":
        out = np.zeros(lead + (d, d), dtype=np.float64)
        stride = d // s
        picks = np.arange(s) * stride
        out[..., picks[:, None], picks[None, :]] = grads
        return out
    if method == "random":
        idx = _random_pixel_subset(d, s, seed)
        out = np.zeros(lead + (d * d,), dtype=np.float64)
        out[..., idx] = grads.reshape(lead + (s * s,))
        return out.reshape(lead + (d, d))
    a = _bilinear_matrix(d, s)
    return a.T @ grads @ a


def spatial_select_baseline(image: np.ndarray, s: int, method: str, seed: int = 0) -> np.ndarray:
    """Reduce one (c, d, d) image to (c, s, s); see reduce_batch for methods."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3:
        raise ValueError(f"expected a (c, d, d) image, got shape {image.shape}")
    return reduce_batch(image[None], s, method, seed)[0]
