"""Run manifests: the JSON configuration schema for every experiment.

A manifest fully determines a run: dataset, partition heterogeneity, method,
transform window, curriculum schedule, optimization constants, and seeds.
Unknown keys are rejected so a typo cannot silently fall back to a default.
See README.md for the documented key-by-key schema.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .datasets import LabeledDataset, gen_blobs, load_cifar_binary, load_idx
from .distill import FDA_MODES, FDA_TARGETS, FEATURE_DCT_MODES, OBJECTIVES, SPATIAL_METHODS

__all__ = [
    "ManifestError",
    "DatasetSpec",
    "ScheduleSpec",
    "DistillSpec",
    "ServerSpec",
    "FedAvgSpec",
    "RunManifest",
    "parse_manifest",
    "load_manifest",
    "build_datasets",
    "desk_preset",
    "desk32_preset",
    "full_scale_preset",
]

METHODS = ("fedfd", "feddm", "fedavg")
SELECTIONS = ("frequency",) + SPATIAL_METHODS


class ManifestError(ValueError):
    """Raised with one line per offending field."""


@dataclass(frozen=True)
class DatasetSpec:
    kind: str  # blobs | cifar10 | idx
    classes: int = 4
    per_class: int = 50
    side: int = 16
    channels: int = 1
    test_per_class: int = 25
    noise_sigma: float = 0.05
    train_path: str | None = None
    test_path: str | None = None
    train_images: str | None = None
    train_labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None
    class_count: int = 10  # idx loader only


@dataclass(frozen=True)
class ScheduleSpec:
    m: int = 2
    b: int = 2
    stages: int = 4


@dataclass(frozen=True)
class DistillSpec:
    steps: int = 200
    lr: float = 1.0
    batch: int = 64
    objective: str = "fdd"
    fda_mode: str = "masked-lowfreq"
    feature_dct: str = "1d-flat"
    fda_target: str = "features"
    lambda1: float = 0.01
    lambda2: float = 0.01


@dataclass(frozen=True)
class ServerSpec:
    epochs: int = 100
    lr: float = 0.05
    batch: int = 64
    pool: str = "cumulative"  # cumulative | fresh
    init: str = "continue"  # continue | scratch


@dataclass(frozen=True)
class FedAvgSpec:
    local_epochs: int = 2
    lr: float = 0.05
    batch: int = 32


@dataclass(frozen=True)
class RunManifest:
    dataset: DatasetSpec
    clients: int = 4
    alpha: float = 0.01
    method: str = "fedfd"
    selection: str = "frequency"
    window: int = 8
    schedule: ScheduleSpec = field(default_factory=ScheduleSpec)
    rounds: int = 8
    seeds: tuple[int, ...] = (0, 1, 2)
    distill: DistillSpec = field(default_factory=DistillSpec)
    server: ServerSpec = field(default_factory=ServerSpec)
    fedavg: FedAvgSpec = field(default_factory=FedAvgSpec)
    extractor_seed: str = "shared"  # shared | independent
    out: str | None = None


class _Section:
    """Strict reader for one nested mapping of the manifest."""

    def __init__(self, payload: dict, path: str, errors: list[str]):
        self.raw = dict(payload)
        self.path = path
        self.errors = errors

    def _label(self, key: str) -> str:
        return f"{self.path}.{key}" if self.path else key

    def take(self, key: str, kind, default, check=None, describe: str = ""):
        if key not in self.raw:
            return default
        value = self.raw.pop(key)
        if kind is float and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        if not isinstance(value, kind) or isinstance(value, bool) and kind is not bool:
            self.errors.append(f"{self._label(key)}: expected {kind.__name__}, got {value!r}")
            return default
        if check is not None and not check(value):
            self.errors.append(f"{self._label(key)}: {describe} (got {value!r})")
            return default
        return value

    def take_section(self, key: str) -> "_Section":
        value = self.raw.pop(key, {})
        if not isinstance(value, dict):
            self.errors.append(f"{self._label(key)}: expected a mapping, got {value!r}")
            value = {}
        return _Section(value, self._label(key), self.errors)

    def finish(self) -> None:
        for key in self.raw:
            self.errors.append(f"{self._label(key)}: unknown key")


def _parse_dataset(section: _Section) -> DatasetSpec:
    kind = section.take("kind", str, "blobs", lambda v: v in ("blobs", "cifar10", "idx"),
                        "must be one of blobs, cifar10, idx")
    spec = DatasetSpec(
        kind=kind,
        classes=section.take("classes", int, 4, lambda v: v >= 2, "needs at least 2 classes"),
        per_class=section.take("per_class", int, 50, lambda v: v >= 1, "must be positive"),
        side=section.take("side", int, 16, lambda v: v >= 4 and v % 4 == 0,
                          "must be a positive multiple of 4"),
        channels=section.take("channels", int, 1, lambda v: v >= 1, "must be positive"),
        test_per_class=section.take("test_per_class", int, 25, lambda v: v >= 1, "must be positive"),
        noise_sigma=section.take("noise_sigma", float, 0.05, lambda v: v >= 0, "must be nonnegative"),
        train_path=section.take("train_path", str, None),
        test_path=section.take("test_path", str, None),
        train_images=section.take("train_images", str, None),
        train_labels=section.take("train_labels", str, None),
        test_images=section.take("test_images", str, None),
        test_labels=section.take("test_labels", str, None),
        class_count=section.take("class_count", int, 10, lambda v: v >= 2, "needs at least 2 classes"),
    )
    if kind == "cifar10" and (spec.train_path is None or spec.test_path is None):
        section.errors.append("dataset: cifar10 needs train_path and test_path")
    if kind == "idx" and None in (spec.train_images, spec.train_labels, spec.test_images, spec.test_labels):
        section.errors.append("dataset: idx needs train_images/train_labels/test_images/test_labels")
    section.finish()
    return spec


def parse_manifest(payload: dict) -> RunManifest:
    """Validate a manifest mapping; raises ManifestError listing every problem."""
    if not isinstance(payload, dict):
        raise ManifestError("manifest must be a JSON object")
    errors: list[str] = []
    root = _Section(payload, "", errors)

    dataset = _parse_dataset(root.take_section("dataset"))

    sched = root.take_section("schedule")
    schedule = ScheduleSpec(
        m=sched.take("m", int, 2, lambda v: v >= 0, "must be nonnegative"),
        b=sched.take("b", int, 2, lambda v: v >= 1, "must be positive"),
        stages=sched.take("stages", int, 4, lambda v: v >= 1, "must be positive"),
    )
    sched.finish()

    dis = root.take_section("distill")
    distill = DistillSpec(
        steps=dis.take("steps", int, 200, lambda v: v >= 1, "must be positive"),
        lr=dis.take("lr", float, 1.0, lambda v: v >= 0, "must be nonnegative"),
        batch=dis.take("batch", int, 64, lambda v: v >= 1, "must be positive"),
        objective=dis.take("objective", str, "fdd", lambda v: v in OBJECTIVES,
                           f"must be one of {OBJECTIVES}"),
        fda_mode=dis.take("fda_mode", str, "masked-lowfreq", lambda v: v in FDA_MODES,
                          f"must be one of {FDA_MODES}"),
        feature_dct=dis.take("feature_dct", str, "1d-flat", lambda v: v in FEATURE_DCT_MODES,
                             f"must be one of {FEATURE_DCT_MODES}"),
        fda_target=dis.take("fda_target", str, "features", lambda v: v in FDA_TARGETS,
                            f"must be one of {FDA_TARGETS}"),
        lambda1=dis.take("lambda1", float, 0.01, lambda v: v >= 0, "must be nonnegative"),
        lambda2=dis.take("lambda2", float, 0.01, lambda v: v >= 0, "must be nonnegative"),
    )
    dis.finish()

    srv = root.take_section("server")
    server = ServerSpec(
        epochs=srv.take("epochs", int, 100, lambda v: v >= 0, "must be nonnegative"),
        lr=srv.take("lr", float, 0.05, lambda v: v > 0, "must be positive"),
        batch=srv.take("batch", int, 64, lambda v: v >= 1, "must be positive"),
        pool=srv.take("pool", str, "cumulative", lambda v: v in ("cumulative", "fresh"),
                      "must be cumulative or fresh"),
        init=srv.take("init", str, "continue", lambda v: v in ("continue", "scratch"),
                      "must be continue or scratch"),
    )
    srv.finish()

    fav = root.take_section("fedavg")
    fedavg = FedAvgSpec(
        local_epochs=fav.take("local_epochs", int, 2, lambda v: v >= 1, "must be positive"),
        lr=fav.take("lr", float, 0.05, lambda v: v > 0, "must be positive"),
        batch=fav.take("batch", int, 32, lambda v: v >= 1, "must be positive"),
    )
    fav.finish()

    seeds_raw = root.raw.pop("seeds", [0, 1, 2])
    seeds: tuple[int, ...] = ()
    if (
        not isinstance(seeds_raw, list)
        or not seeds_raw
        or not all(isinstance(s, int) and not isinstance(s, bool) for s in seeds_raw)
    ):
        errors.append(f"seeds: expected a nonempty list of integers, got {seeds_raw!r}")
    else:
        seeds = tuple(seeds_raw)

    man = RunManifest(
        dataset=dataset,
        clients=root.take("clients", int, 4, lambda v: v >= 1, "must be positive"),
        alpha=root.take("alpha", float, 0.01, lambda v: v > 0, "must be positive"),
        method=root.take("method", str, "fedfd", lambda v: v in METHODS,
                         f"must be one of {METHODS}"),
        selection=root.take("selection", str, "frequency", lambda v: v in SELECTIONS,
                            f"must be one of {SELECTIONS}"),
        window=root.take("window", int, 8, lambda v: v >= 1, "must be positive"),
        schedule=schedule,
        rounds=root.take("rounds", int, 8, lambda v: v >= 1, "must be positive"),
        seeds=seeds,
        distill=distill,
        server=server,
        fedavg=fedavg,
        extractor_seed=root.take("extractor_seed", str, "shared",
                                 lambda v: v in ("shared", "independent"),
                                 "must be shared or independent"),
        out=root.take("out", str, None),
    )
    root.finish()

    if man.window > man.dataset.side:
        errors.append(f"window: {man.window} exceeds the image side {man.dataset.side}")
    if man.rounds % man.schedule.stages:
        errors.append(
            f"schedule.stages: {man.schedule.stages} must divide rounds ({man.rounds}) evenly"
        )
    if man.selection != "frequency" and man.window % 4:
        errors.append("window: spatial selections need a window divisible by 4 (model input)")
    if errors:
        raise ManifestError("\n".join(errors))
    return man


def load_manifest(path) -> RunManifest:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            payload = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"{path}: not valid JSON ({exc})") from exc
    return parse_manifest(payload)


def build_datasets(spec: DatasetSpec, seed: int) -> tuple[LabeledDataset, LabeledDataset]:
    """Materialize the train and test splits a manifest describes."""
    if spec.kind == "blobs":
        train = gen_blobs(spec.classes, spec.per_class, spec.side, spec.channels, seed,
                          noise_sigma=spec.noise_sigma, split="train")
        test = gen_blobs(spec.classes, spec.test_per_class, spec.side, spec.channels, seed,
                         noise_sigma=spec.noise_sigma, split="test")
        return train, test
    if spec.kind == "cifar10":
        return (
            load_cifar_binary(spec.train_path, split="train"),
            load_cifar_binary(spec.test_path, split="test"),
        )
    return (
        load_idx(spec.train_images, spec.train_labels, spec.class_count, split="train"),
        load_idx(spec.test_images, spec.test_labels, spec.class_count, split="test"),
    )


def desk_preset() -> dict:
    """Minutes-scale default: generated blobs, 4 clients, 8 rounds."""
    return {
        "dataset": {"kind": "blobs", "classes": 4, "per_class": 50, "side": 16,
                    "channels": 1, "test_per_class": 25, "noise_sigma": 0.05},
        "clients": 4,
        "alpha": 0.01,
        "method": "fedfd",
        "selection": "frequency",
        "window": 8,
        "schedule": {"m": 2, "b": 2, "stages": 4},
        "rounds": 8,
        "seeds": [0, 1, 2],
        "distill": {"steps": 200, "lr": 1.0, "batch": 64},
        "server": {"epochs": 100, "lr": 0.05, "batch": 64},
        "fedavg": {"local_epochs": 2, "lr": 0.05, "batch": 32},
    }


def desk32_preset() -> dict:
    """Desk-scale variant at side 32 with a 16-wide window, used by the
    spatial-selection comparison (a 16-wide window at side 16 would be the
    degenerate full window)."""
    preset = desk_preset()
    preset["dataset"].update({"side": 32, "per_class": 40})
    preset["window"] = 16
    preset["distill"]["steps"] = 100
    preset["server"]["epochs"] = 60
    return preset


def full_scale_preset() -> dict:
    """The documented full-scale configuration (hours on real hardware).

    Needs the CIFAR-10 binary batches on disk; paths below are placeholders.
    """
    return {
        "dataset": {"kind": "cifar10", "train_path": "cifar-10-batches-bin/data_batch_1.bin",
                    "test_path": "cifar-10-batches-bin/test_batch.bin"},
        "clients": 10,
        "alpha": 0.01,
        "method": "fedfd",
        "selection": "frequency",
        "window": 16,
        "schedule": {"m": 10, "b": 10, "stages": 4},
        "rounds": 20,
        "seeds": [0, 1, 2],
        "distill": {"steps": 1000, "lr": 1.0, "batch": 64},
        "server": {"epochs": 500, "lr": 0.01, "batch": 256},
        "fedavg": {"local_epochs": 2, "lr": 0.01, "batch": 64},
    }
