"""Protocol orchestration: rounds, curriculum, baselines, and accounting.

One communication round is a barrier. Clients distill locally and transmit
payloads (masked transform windows by default, full or reduced spatial images
for the baselines); the server reconstructs every payload from its actual
wire bytes, extends its training pool, and updates the global model. The
ledger records the measured length of each transmitted message, so byte
counts are exact rather than estimated. A failed round leaves the global
model exactly as it started.
"""

from __future__ import annotations

import math
import struct
import threading
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .datasets import LabeledDataset, init_synthetic, sample_class_images
from .distill import (
    DistillConfig,
    DistillationDivergence,
    IterationTrace,
    LossWeights,
    PayloadReduction,
    SyntheticSet,
    client_update,
    reduce_batch,
)
from .frequency import SpectralBlock, Spectrum, block_byte_size, decode_block, encode_block, idct2, zero_pad
from .nn import Model, ModelSpec, convnet_mini, cross_entropy_with_grad, sgd_step

__all__ = [
    "ClientState",
    "GlobalModel",
    "CurriculumSchedule",
    "CommLedger",
    "LedgerEntry",
    "ContractionReport",
    "RoundRow",
    "RunOutcome",
    "curriculum_ipc",
    "dirichlet_partition",
    "contraction_experiment",
    "server_train",
    "run_round",
    "fedavg_round",
    "feddm_round",
    "comm_ratio",
    "ledger_accounting",
    "run_experiment",
    "encode_image",
    "decode_image",
    "image_byte_size",
    "encode_params",
    "derive_int",
    "derive_rng",
]

# Spatial image wire format, little endian: magic, version, channels, side,
# class label, then channels*side*side float32 pixels. 8-byte header.
_IMAGE_HEADER = struct.Struct("<2sBBHH")
IMAGE_MAGIC = b"IM"
IMAGE_VERSION = 1

# Salt values keep the derived seed streams of unrelated stages disjoint.
_S_DATA = 0xD0
_S_PARTITION = 0xD1
_S_INIT = 0xD2
_S_MODEL = 0xD3
_S_EXTRACTOR = 0xD4
_S_UPDATE = 0xD5
_S_SERVER = 0xD6
_S_GROW = 0xD7
_S_FEDAVG = 0xD8
_S_REDUCE = 0xD9
_S_CONTRACTION = 0xDA


def derive_int(*parts: int) -> int:
    """Deterministic 32-bit seed derived from a tuple of integers."""
    masked = [int(p) & 0xFFFFFFFF for p in parts]
    return int(np.random.SeedSequence(masked).generate_state(1)[0])


def derive_rng(*parts: int) -> np.random.Generator:
    masked = [int(p) & 0xFFFFFFFF for p in parts]
    return np.random.default_rng(np.random.SeedSequence(masked))


@dataclass
class ClientState:
    """One simulated client: its real shard and its synthetic set."""

    id: int
    images: np.ndarray  # (n, c, d, d)
    labels: np.ndarray  # (n,)
    synthetic: SyntheticSet | None = None
    _by_class: dict[int, np.ndarray] | None = field(default=None, repr=False)

    def __post_init__(self):
        if len(self.images) == 0:
            raise ValueError(f"client {self.id} has an empty shard")
        if self.labels.shape != (len(self.images),):
            raise ValueError("shard images and labels disagree in length")

    @property
    def class_inventory(self) -> list[int]:
        return sorted(int(c) for c in np.unique(self.labels))

    def by_class(self) -> dict[int, np.ndarray]:
        if self._by_class is None:
            self._by_class = {
                int(cls): self.images[self.labels == cls] for cls in np.unique(self.labels)
            }
        return self._by_class


@dataclass
class GlobalModel:
    """The server's model plus the round counter."""

    model: Model
    round: int = 0

    @property
    def spec(self) -> ModelSpec:
        return self.model.spec

    @property
    def params(self) -> list[np.ndarray]:
        return self.model.params

    def require_finite(self) -> None:
        for p in self.model.params:
            if not np.all(np.isfinite(p)):
                raise RuntimeError("global model parameters became non-finite")


@dataclass(frozen=True)
class CurriculumSchedule:
    """Linearly growing per-class synthetic budget over equal stages."""

    m: int
    b: int
    stages: int = 4
    total_rounds: int = 8

    def __post_init__(self):
        if self.stages < 1 or self.total_rounds < 1:
            raise ValueError("stages and total_rounds must be positive")
        if self.total_rounds % self.stages:
            raise ValueError(
                f"stages ({self.stages}) must divide total_rounds ({self.total_rounds}) evenly"
            )
        for g in range(1, self.stages + 1):
            if self.m * (g - 1) + self.b <= 0:
                raise ValueError(f"per-class budget at stage {g} would be nonpositive")

    @property
    def rounds_per_stage(self) -> int:
        return self.total_rounds // self.stages

    def stage_of(self, round_index: int) -> int:
        if not 1 <= round_index <= self.total_rounds:
            raise ValueError(f"round {round_index} outside [1, {self.total_rounds}]")
        return (round_index - 1) // self.rounds_per_stage + 1

    def ipc(self, stage: int) -> int:
        return curriculum_ipc(self, stage)

    def ipc_at_round(self, round_index: int) -> int:
        return self.ipc(self.stage_of(round_index))


def curriculum_ipc(schedule: CurriculumSchedule, stage: int) -> int:
    """Per-class synthetic count at a stage: m * (stage - 1) + b."""
    if not 1 <= stage <= schedule.stages:
        raise ValueError(f"stage {stage} outside [1, {schedule.stages}]")
    return schedule.m * (stage - 1) + schedule.b


@dataclass(frozen=True)
class LedgerEntry:
    round: int
    client: int
    method: str
    bytes: int


class CommLedger:
    """Per-round, per-client transmitted byte counts for every method."""

    def __init__(self):
        self._entries: list[LedgerEntry] = []
        self._lock = threading.Lock()

    def add(self, round_index: int, client: int, method: str, nbytes: int) -> None:
        with self._lock:
            self._entries.append(LedgerEntry(round_index, client, method, int(nbytes)))

    def extend(self, entries) -> None:
        with self._lock:
            self._entries.extend(entries)

    def entries(self) -> list[LedgerEntry]:
        with self._lock:
            return sorted(self._entries, key=lambda e: (e.method, e.round, e.client))

    def totals(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for e in self.entries():
            out[e.method] = out.get(e.method, 0) + e.bytes
        return out

    def total(self, method: str) -> int:
        totals = self.totals()
        if method not in totals:
            raise ValueError(f"method {method!r} has no ledger entries")
        return totals[method]

    def cumulative_by_round(self, method: str) -> dict[int, int]:
        """Running total of bytes after each round, for one method."""
        running = 0
        out: dict[int, int] = {}
        for e in self.entries():
            if e.method != method:
                continue
            running += e.bytes
            out[e.round] = running
        return out


def comm_ratio(ledger: CommLedger, method_a: str, method_b: str) -> Fraction:
    """Exact ratio of total transmitted bytes, method_a over method_b."""
    return Fraction(ledger.total(method_a), ledger.total(method_b))


# ---------------------------------------------------------------------------
# Wire formats for the spatial baselines and FedAvg
# ---------------------------------------------------------------------------


def image_byte_size(channels: int, side: int) -> int:
    return _IMAGE_HEADER.size + 4 * channels * side * side


def encode_image(image: np.ndarray, label: int) -> bytes:
    image = np.asarray(image, dtype=np.float64)
    c, side, _ = image.shape
    header = _IMAGE_HEADER.pack(IMAGE_MAGIC, IMAGE_VERSION, c, side, label)
    return header + image.astype("<f4").tobytes()


def decode_image(buf: bytes) -> tuple[np.ndarray, int]:
    magic, version, c, side, label = _IMAGE_HEADER.unpack_from(buf)
    if magic != IMAGE_MAGIC or version != IMAGE_VERSION:
        raise ValueError("not a spatial image payload")
    if len(buf) != image_byte_size(c, side):
        raise ValueError(f"payload has {len(buf)} bytes, expected {image_byte_size(c, side)}")
    image = (
        np.frombuffer(buf, dtype="<f4", offset=_IMAGE_HEADER.size)
        .astype(np.float64)
        .reshape(c, side, side)
    )
    return image, label


def encode_params(params: list[np.ndarray]) -> bytes:
    """FedAvg model payload: the flat float32 parameter record."""
    return np.concatenate([p.ravel() for p in params]).astype("<f4").tobytes()


# ---------------------------------------------------------------------------
# Partitioning
# ---------------------------------------------------------------------------


def _largest_remainder(props: np.ndarray, total: int) -> np.ndarray:
    scaled = props * total
    counts = np.floor(scaled).astype(int)
    short = total - counts.sum()
    order = np.argsort(-(scaled - counts), kind="stable")
    counts[order[:short]] += 1
    return counts


def dirichlet_partition(
    dataset: LabeledDataset, clients: int, alpha: float, seed: int
) -> list[np.ndarray]:
    """Split a dataset into client shards with class-wise Dirichlet proportions.

    Smaller alpha concentrates each class on fewer clients. Draws are
    resampled up to 100 times to avoid empty shards; if that fails, single
    samples move from the currently largest shard until every client has one.
    """
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    if clients < 1:
        raise ValueError("need at least one client")
    labels = dataset.labels
    class_ids = np.unique(labels)
    shards: list[list[int]] = []
    for attempt in range(100):
        rng = derive_rng(seed, _S_PARTITION, attempt)
        shards = [[] for _ in range(clients)]
        for cls in class_ids:
            idx = rng.permutation(np.where(labels == cls)[0])
            props = rng.dirichlet(np.full(clients, float(alpha)))
            counts = _largest_remainder(props, len(idx))
            start = 0
            for k in range(clients):
                shards[k].extend(idx[start : start + counts[k]].tolist())
                start += counts[k]
        if all(shards):
            break
    while not all(shards):
        sizes = [len(s) for s in shards]
        donor = int(np.argmax(sizes))
        if sizes[donor] <= 1:
            raise ValueError(
                f"cannot make every client nonempty (seed {seed}): dataset too small"
            )
        receiver = sizes.index(0)
        shards[receiver].append(shards[donor].pop())
    return [np.array(sorted(s), dtype=np.int64) for s in shards]


# ---------------------------------------------------------------------------
# Server-side training
# ---------------------------------------------------------------------------


def server_train(
    model: Model,
    images: np.ndarray,
    labels: np.ndarray,
    epochs: int,
    lr: float,
    batch_size: int,
    rng: np.random.Generator,
) -> float:
    """Mini-batch SGD on mean cross-entropy; returns the last epoch's mean loss."""
    if len(images) == 0:
        raise ValueError("server training pool is empty")
    if epochs == 0:
        return math.nan
    final_loss = math.nan
    n = len(images)
    for _ in range(epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, batch_size):
            take = order[start : start + batch_size]
            fwd = model.forward(images[take])
            loss, d_logits = cross_entropy_with_grad(fwd.logits, labels[take])
            if not math.isfinite(loss):
                raise RuntimeError(f"server training loss became non-finite ({loss})")
            bundle = model.backward(fwd, d_logits=d_logits, need_input_grad=False)
            model.params = sgd_step(model.params, bundle, lr)
            losses.append(loss)
        final_loss = float(np.mean(losses))
    return final_loss


def _local_sgd(
    model: Model,
    images: np.ndarray,
    labels: np.ndarray,
    epochs: int,
    lr: float,
    batch_size: int,
    rng: np.random.Generator,
) -> float:
    return server_train(model, images, labels, epochs, lr, batch_size, rng)


# ---------------------------------------------------------------------------
# Round engine
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RunPlan:
    """Resolved knobs for one experiment, derived from a manifest."""

    method_label: str
    route: str  # frequency | spatial-full | crop | resize | random | gap
    objective: str
    schedule: CurriculumSchedule
    window: int
    distill: DistillConfig
    weights: LossWeights
    server_epochs: int
    server_lr: float
    server_batch: int
    server_pool: str  # cumulative | fresh
    server_init: str  # continue | scratch
    extractor_seed: str  # shared | independent
    fedavg_epochs: int
    fedavg_lr: float
    fedavg_batch: int


@dataclass
class ServerState:
    model: GlobalModel
    plan: RunPlan
    ledger: CommLedger = field(default_factory=CommLedger)
    pool_images: list[np.ndarray] = field(default_factory=list)
    pool_labels: list[int] = field(default_factory=list)


def _grow_synthetic(client: ClientState, target_ipc: int, run_seed: int, round_index: int) -> None:
    current = client.synthetic.ipc
    if target_ipc <= current:
        return
    grown = {}
    shard = client.by_class()
    for cls, existing in client.synthetic.images.items():
        rng = derive_rng(run_seed, _S_GROW, round_index, client.id, cls)
        extra = sample_class_images(shard[cls], target_ipc - current, rng)
        grown[cls] = np.concatenate([existing, extra], axis=0)
    client.synthetic = SyntheticSet(images=grown, ipc=target_ipc)


def _transmit_frequency(blocks: list[SpectralBlock]) -> tuple[int, list[np.ndarray], list[int]]:
    nbytes = 0
    images, labels = [], []
    for block in blocks:
        wire = encode_block(block)
        nbytes += len(wire)
        received = decode_block(wire)
        images.append(idct2(zero_pad(received)))
        labels.append(received.class_label)
    return nbytes, images, labels


def _transmit_spatial(
    synthetic: SyntheticSet, route: str, window: int, reduce_seed: int
) -> tuple[int, list[np.ndarray], list[int]]:
    nbytes = 0
    images, labels = [], []
    for cls in synthetic.classes:
        batch = synthetic.images[cls]
        if route != "spatial-full":
            batch = reduce_batch(batch, window, route, reduce_seed)
        for img in batch:
            wire = encode_image(img, cls)
            nbytes += len(wire)
            received, label = decode_image(wire)
            images.append(received)
            labels.append(label)
    return nbytes, images, labels


def run_round(
    server: ServerState,
    clients: list[ClientState],
    round_index: int,
    run_seed: int,
) -> tuple[float, list[tuple[int, int, IterationTrace]]]:
    """One distillation round: client updates, reconstruction, server training.

    Returns the server training loss and the per-iteration client traces.
    Any client failure reverts the global model to its start-of-round
    parameters and discards the round's pool and ledger additions.
    """
    plan = server.plan
    snapshot = [p.copy() for p in server.model.params]
    staged_images: list[np.ndarray] = []
    staged_labels: list[int] = []
    staged_entries: list[LedgerEntry] = []
    traces: list[tuple[int, int, IterationTrace]] = []
    reduce_seed = derive_int(run_seed, _S_REDUCE)
    try:
        target_ipc = plan.schedule.ipc_at_round(round_index)
        reduction = None
        if plan.route not in ("frequency", "spatial-full"):
            reduction = PayloadReduction(method=plan.route, side=plan.window, seed=reduce_seed)
        for client in sorted(clients, key=lambda c: c.id):
            _grow_synthetic(client, target_ipc, run_seed, round_index)
            if plan.extractor_seed == "shared":
                ext_seed = derive_int(run_seed, _S_EXTRACTOR, round_index)
            else:
                ext_seed = derive_int(run_seed, _S_EXTRACTOR, round_index, client.id)
            sample = next(iter(client.synthetic.images.values()))
            extractor = Model(
                convnet_mini(sample.shape[1], sample.shape[2], server.model.spec.class_count),
                seed=ext_seed,
            )
            blocks, trace = client_update(
                client.synthetic,
                client.by_class(),
                server.model.model,
                extractor,
                plan.distill,
                plan.weights,
                plan.window,
                seed=derive_int(run_seed, _S_UPDATE, round_index, client.id),
                reduction=reduction,
            )
            traces.extend((round_index, client.id, entry) for entry in trace)
            if plan.route == "frequency":
                nbytes, images, labels = _transmit_frequency(blocks)
            else:
                nbytes, images, labels = _transmit_spatial(
                    client.synthetic, plan.route, plan.window, reduce_seed
                )
            staged_images.extend(images)
            staged_labels.extend(labels)
            staged_entries.append(
                LedgerEntry(round_index, client.id, plan.method_label, nbytes)
            )

        if plan.server_pool == "fresh":
            server.pool_images = staged_images
            server.pool_labels = staged_labels
        else:
            server.pool_images.extend(staged_images)
            server.pool_labels.extend(staged_labels)
        server.ledger.extend(staged_entries)
        if plan.server_init == "scratch":
            server.model.model = Model(
                server.model.spec, seed=derive_int(run_seed, _S_MODEL, round_index)
            )
        train_loss = server_train(
            server.model.model,
            np.stack(server.pool_images),
            np.array(server.pool_labels, dtype=np.int64),
            plan.server_epochs,
            plan.server_lr,
            plan.server_batch,
            derive_rng(run_seed, _S_SERVER, round_index),
        )
        server.model.round = round_index
        server.model.require_finite()
        return train_loss, traces
    except Exception:
        server.model.model.params = snapshot
        raise


def feddm_round(
    server: ServerState,
    clients: list[ClientState],
    round_index: int,
    run_seed: int,
) -> tuple[float, list[tuple[int, int, IterationTrace]]]:
    """Baseline round: plain distribution matching, full spatial payloads."""
    if server.plan.route != "spatial-full" or server.plan.objective != "dm":
        raise ValueError("feddm_round needs a plan with route=spatial-full and objective=dm")
    return run_round(server, clients, round_index, run_seed)


def fedavg_round(
    server: ServerState,
    clients: list[ClientState],
    round_index: int,
    run_seed: int,
) -> float:
    """Weight-averaging baseline: local training, then shard-weighted averaging.

    The ledger charges each client two full model payloads (broadcast down,
    update up), measured from the actual serialized parameter records.
    """
    plan = server.plan
    snapshot = [p.copy() for p in server.model.params]
    staged_entries = []
    try:
        total = sum(len(c.images) for c in clients)
        down_bytes = len(encode_params(server.model.params))
        averaged = [np.zeros_like(p) for p in server.model.params]
        weight_sum = 0.0
        train_loss = 0.0
        for client in sorted(clients, key=lambda c: c.id):
            local = Model(server.model.spec, [p.copy() for p in server.model.params])
            # Shared per-round data-order seed; shards differ, the shuffle
            # stream does not, which keeps identical shards on identical
            # trajectories.
            loss = _local_sgd(
                local,
                client.images,
                client.labels,
                plan.fedavg_epochs,
                plan.fedavg_lr,
                plan.fedavg_batch,
                derive_rng(run_seed, _S_FEDAVG, round_index),
            )
            p_k = len(client.images) / total
            weight_sum += p_k
            train_loss += p_k * loss
            for acc, p in zip(averaged, local.params):
                acc += p_k * p
            up_bytes = len(encode_params(local.params))
            staged_entries.append(
                LedgerEntry(round_index, client.id, plan.method_label, down_bytes + up_bytes)
            )
        if abs(weight_sum - 1.0) > 1e-9:
            raise RuntimeError(f"shard weights sum to {weight_sum}, expected 1")
        server.model.model.params = averaged
        server.model.round = round_index
        server.model.require_finite()
        server.ledger.extend(staged_entries)
        return train_loss
    except Exception:
        server.model.model.params = snapshot
        raise


# ---------------------------------------------------------------------------
# Accounting-only ledgers (no optimization; buffers are measured, not run)
# ---------------------------------------------------------------------------


def ledger_accounting(
    method: str,
    rounds: int,
    clients: int,
    classes_per_client: int,
    channels: int,
    side: int,
    window: int | None = None,
    schedule: CurriculumSchedule | None = None,
    ipc: int | None = None,
    param_count: int | None = None,
    method_label: str | None = None,
    ledger: CommLedger | None = None,
) -> CommLedger:
    """Build the exact ledger a run would produce, without running it.

    Every per-item byte size is measured by serializing a representative
    zero payload, so the accounting path and the simulation path cannot
    drift apart.
    """
    ledger = ledger if ledger is not None else CommLedger()
    label = method_label or method
    if method == "fedfd":
        if schedule is None or window is None:
            raise ValueError("fedfd accounting needs a schedule and a window size")
        probe = len(
            encode_block(
                SpectralBlock(
                    window=np.zeros((channels, window, window)),
                    original_side=side,
                )
            )
        )
        assert probe == block_byte_size(channels, window)
        for r in range(1, rounds + 1):
            per_client = classes_per_client * schedule.ipc_at_round(r)
            for k in range(clients):
                ledger.add(r, k, label, per_client * probe)
    elif method == "feddm":
        if ipc is None:
            raise ValueError("feddm accounting needs a fixed ipc")
        probe = len(encode_image(np.zeros((channels, side, side)), 0))
        assert probe == image_byte_size(channels, side)
        for r in range(1, rounds + 1):
            for k in range(clients):
                ledger.add(r, k, label, classes_per_client * ipc * probe)
    elif method == "fedavg":
        if param_count is None:
            raise ValueError("fedavg accounting needs the model parameter count")
        probe = len(encode_params([np.zeros(param_count)]))
        for r in range(1, rounds + 1):
            for k in range(clients):
                ledger.add(r, k, label, 2 * probe)
    else:
        raise ValueError(f"unknown method {method!r}")
    return ledger


# ---------------------------------------------------------------------------
# Contraction experiment
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ContractionReport:
    """Per-step squared-distance ratios of gradient descent on a quadratic."""

    dim: int
    seed: int
    steps: int
    alpha: float
    beta: float
    eta: float
    kappa: float
    ratios: np.ndarray
    initial_sq: float
    final_sq: float

    @property
    def max_ratio(self) -> float:
        return float(self.ratios.max()) if len(self.ratios) else 0.0

    @property
    def bound_satisfied(self) -> bool:
        per_step = bool(np.all(self.ratios <= self.kappa + 1e-12))
        horizon = self.final_sq <= self.kappa**self.steps * self.initial_sq * (1 + 1e-9) + 1e-300
        return per_step and horizon


def contraction_experiment(
    dim: int, seed: int, steps: int, theta0: np.ndarray | None = None
) -> ContractionReport:
    """Gradient descent on a seeded strongly convex quadratic.

    The curvature extremes set the strong-convexity and smoothness constants
    (alpha, beta); the step size eta = alpha / (2 beta^2) then guarantees the
    per-step contraction factor kappa = 1 - eta*alpha + eta^2*beta^2 < 1.
    Steps started exactly at the optimum record a ratio of 0 by convention.
    """
    if dim < 1:
        raise ValueError("dimension must be at least 1")
    rng = derive_rng(seed, _S_CONTRACTION)
    for _ in range(16):
        basis, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
        curvature = rng.uniform(0.5, 5.0, size=dim)
        quad = basis @ np.diag(curvature) @ basis.T
        quad = (quad + quad.T) / 2.0
        eigs = np.linalg.eigvalsh(quad)
        if eigs[0] > 0:
            break
    else:
        raise RuntimeError(f"could not draw a positive-definite quadratic for seed {seed}")
    alpha, beta = float(eigs[0]), float(eigs[-1])
    linear = rng.standard_normal(dim)
    optimum = np.linalg.solve(quad, linear)
    theta = rng.standard_normal(dim) if theta0 is None else np.asarray(theta0, dtype=np.float64)

    eta = alpha / (2.0 * beta**2)
    kappa = 1.0 - eta * alpha + eta**2 * beta**2
    initial_sq = float(np.sum((theta - optimum) ** 2))
    ratios = np.empty(steps, dtype=np.float64)
    for t in range(steps):
        prev_sq = float(np.sum((theta - optimum) ** 2))
        theta = theta - eta * (quad @ theta - linear)
        cur_sq = float(np.sum((theta - optimum) ** 2))
        ratios[t] = cur_sq / prev_sq if prev_sq > 0 else 0.0
    final_sq = float(np.sum((theta - optimum) ** 2))
    return ContractionReport(
        dim=dim,
        seed=seed,
        steps=steps,
        alpha=alpha,
        beta=beta,
        eta=eta,
        kappa=kappa,
        ratios=ratios,
        initial_sq=initial_sq,
        final_sq=final_sq,
    )


# ---------------------------------------------------------------------------
# Whole-experiment driver
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RoundRow:
    round: int
    method: str
    test_accuracy: float
    train_loss: float


@dataclass
class RunOutcome:
    method: str
    seed: int
    rows: list[RoundRow]
    ledger: CommLedger
    traces: list[tuple[int, int, IterationTrace]]
    initial_accuracy: float

    @property
    def final_accuracy(self) -> float:
        return self.rows[-1].test_accuracy

    def accuracy_trace(self) -> list[float]:
        return [self.initial_accuracy] + [r.test_accuracy for r in self.rows]


def plan_from_manifest(man) -> RunPlan:
    """Resolve a manifest into the effective per-run knobs.

    The feddm baseline pins plain distribution matching, full spatial
    payloads, and a flat schedule regardless of the manifest's distillation
    settings.
    """
    if man.method == "feddm":
        route = "spatial-full"
        objective = "dm"
        schedule = CurriculumSchedule(m=0, b=man.schedule.b, stages=1, total_rounds=man.rounds)
    else:
        route = man.selection
        objective = man.distill.objective
        schedule = CurriculumSchedule(
            m=man.schedule.m, b=man.schedule.b, stages=man.schedule.stages, total_rounds=man.rounds
        )
    distill = DistillConfig(
        local_steps=man.distill.steps,
        local_lr=man.distill.lr,
        batch_size=man.distill.batch,
        objective=objective,
        fda_mode=man.distill.fda_mode,
        feature_dct=man.distill.feature_dct,
        fda_target=man.distill.fda_target,
    )
    label = man.method if route in ("frequency", "spatial-full") else f"select-{route}"
    return RunPlan(
        method_label=label,
        route=route,
        objective=objective,
        schedule=schedule,
        window=man.window,
        distill=distill,
        weights=LossWeights(man.distill.lambda1, man.distill.lambda2),
        server_epochs=man.server.epochs,
        server_lr=man.server.lr,
        server_batch=man.server.batch,
        server_pool=man.server.pool,
        server_init=man.server.init,
        extractor_seed=man.extractor_seed,
        fedavg_epochs=man.fedavg.local_epochs,
        fedavg_lr=man.fedavg.lr,
        fedavg_batch=man.fedavg.batch,
    )


def run_experiment(man, seed: int, progress=None) -> RunOutcome:
    """Run one method for the manifest's round count under one seed."""
    from .manifest import build_datasets  # local import to keep layering one-way

    train, test = build_datasets(man.dataset, derive_int(seed, _S_DATA))
    shards = dirichlet_partition(train, man.clients, man.alpha, derive_int(seed, _S_PARTITION))
    clients = [
        ClientState(id=k, images=train.images[idx], labels=train.labels[idx])
        for k, idx in enumerate(shards)
    ]
    plan = plan_from_manifest(man)

    model_side = man.window if plan.route not in ("frequency", "spatial-full") else train.side
    spec = convnet_mini(train.channels, model_side, train.class_count)
    server = ServerState(
        model=GlobalModel(Model(spec, seed=derive_int(seed, _S_MODEL, 0))),
        plan=plan,
    )

    if man.method != "fedavg":
        initial_ipc = plan.schedule.ipc_at_round(1)
        for client in clients:
            client.synthetic = init_synthetic(
                client.by_class(), initial_ipc, derive_int(seed, _S_INIT, client.id)
            )

    test_images = test.images
    if plan.route not in ("frequency", "spatial-full"):
        test_images = reduce_batch(
            test.images, man.window, plan.route, derive_int(seed, _S_REDUCE)
        )
    initial_accuracy = server.model.model.accuracy(test_images, test.labels)

    rows: list[RoundRow] = []
    traces: list[tuple[int, int, IterationTrace]] = []
    for r in range(1, man.rounds + 1):
        if man.method == "fedavg":
            train_loss = fedavg_round(server, clients, r, seed)
        else:
            train_loss, round_traces = run_round(server, clients, r, seed)
            traces.extend(round_traces)
        accuracy = server.model.model.accuracy(test_images, test.labels)
        rows.append(RoundRow(r, plan.method_label, accuracy, train_loss))
        if progress is not None:
            progress(
                f"seed {seed} round {r}/{man.rounds} [{plan.method_label}] "
                f"test_accuracy={accuracy:.4f} train_loss={train_loss:.6g}"
            )
    return RunOutcome(
        method=plan.method_label,
        seed=seed,
        rows=rows,
        ledger=server.ledger,
        traces=traces,
        initial_accuracy=initial_accuracy,
    )
