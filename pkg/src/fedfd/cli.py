"""Command-line entry point.

Subcommands: run (simulate a method for R rounds), energy (cumulative
energy-ratio curves), contraction (quadratic descent bound checks),
gradcheck (finite-difference audit of every loss and layer), security
(attacker combination counts), partition (shard-size matrix). Every command
is reproducible: the same manifest and seeds produce byte-identical CSVs.
Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import math
import sys
from pathlib import Path

import numpy as np

from . import plots
from .distill import DistillConfig, LossWeights, objective_grads
from .federation import contraction_experiment, derive_int, dirichlet_partition, run_experiment
from .frequency import (
    attack_combination_logcount,
    block_byte_size,
    cumulative_energy,
    dct2_array,
)
from .manifest import (
    ManifestError,
    RunManifest,
    build_datasets,
    desk32_preset,
    desk_preset,
    full_scale_preset,
    load_manifest,
    parse_manifest,
)
from .nn import Model, ModelSpec, cross_entropy_with_grad, finite_diff_check

PRESETS = {"desk": desk_preset, "desk32": desk32_preset, "full": full_scale_preset}

_S_DATA = 0xD0  # matches the experiment driver's dataset derivation


class _CliError(Exception):
    """Usage or configuration problem; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _CliError(message)


def _fmt(value):
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return value


def _write_csv(path: Path, fieldnames: list[str], rows: list[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(row.get(k)) for k in fieldnames})


def _resolve_manifest(args) -> RunManifest:
    if args.manifest and args.preset:
        raise _CliError("--manifest and --preset are mutually exclusive")
    if args.manifest:
        man = load_manifest(args.manifest)
    elif args.preset:
        man = parse_manifest(PRESETS[args.preset]())
    else:
        raise _CliError("one of --manifest or --preset is required")
    if args.seed:
        try:
            seeds = tuple(int(s) for s in args.seed.split(",") if s.strip())
        except ValueError:
            raise _CliError(f"--seed must be a comma-separated integer list, got {args.seed!r}")
        if not seeds:
            raise _CliError("--seed must name at least one seed")
        man = RunManifest(**{**man.__dict__, "seeds": seeds})
    return man


def _out_dir(args, man: RunManifest | None = None) -> Path:
    out = args.out or (man.out if man is not None else None) or "out"
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def cmd_run(args) -> int:
    man = _resolve_manifest(args)
    out = _out_dir(args, man)
    results_rows: list[dict] = []
    ledger_rows: list[dict] = []
    trace_rows: list[dict] = []
    failure: Exception | None = None
    try:
        for seed in man.seeds:
            outcome = run_experiment(man, seed, progress=print)
            for row in outcome.rows:
                results_rows.append(
                    {
                        "seed": seed,
                        "round": row.round,
                        "method": row.method,
                        "test_accuracy": row.test_accuracy,
                        "train_loss": row.train_loss,
                    }
                )
            for entry in outcome.ledger.entries():
                ledger_rows.append(
                    {
                        "seed": seed,
                        "round": entry.round,
                        "client": entry.client,
                        "method": entry.method,
                        "bytes": entry.bytes,
                    }
                )
            for round_index, client, it in outcome.traces:
                trace_rows.append(
                    {
                        "seed": seed,
                        "round": round_index,
                        "client": client,
                        "iteration": it.iteration,
                        "loss_fdd": it.loss,
                        "loss_fda": it.fda,
                        "loss_rsc": it.rsc,
                        "real_acc": it.accuracy,
                    }
                )
    except Exception as exc:  # partial results are still worth flushing
        failure = exc

    if results_rows:
        _write_csv(out / "results.csv", ["seed", "round", "method", "test_accuracy", "train_loss"], results_rows)
    if ledger_rows:
        _write_csv(out / "ledger.csv", ["seed", "round", "client", "method", "bytes"], ledger_rows)
    if trace_rows:
        _write_csv(
            out / "traces.csv",
            ["seed", "round", "client", "iteration", "loss_fdd", "loss_fda", "loss_rsc", "real_acc"],
            trace_rows,
        )
    if not args.no_plot and results_rows:
        plots.render_results(out, results_rows)
    if not args.no_plot and ledger_rows:
        plots.render_ledger(out, ledger_rows)

    if failure is not None:
        print(f"run failed: {failure}", file=sys.stderr)
        return 2
    totals: dict[str, int] = {}
    for row in ledger_rows:
        totals[row["method"]] = totals.get(row["method"], 0) + row["bytes"]
    for method, total in sorted(totals.items()):
        print(f"total bytes [{method}]: {total}")
    print(f"wrote {out / 'results.csv'}")
    return 0


def _channel_energy_map(image: np.ndarray) -> np.ndarray:
    # Combine channels so squaring the map gives the per-pixel energy sum.
    return np.sqrt((image.astype(np.float64) ** 2).sum(axis=0))


def cmd_energy(args) -> int:
    orderings = [o.strip() for o in args.orderings.split(",") if o.strip()]
    if args.npy:
        data = np.load(args.npy)
        if data.ndim == 2:
            data = data[None]
        if data.ndim == 3:
            data = data[None]
        images = data
    else:
        man = _resolve_manifest(args)
        seed = man.seeds[0]
        train, _ = build_datasets(man.dataset, derive_int(seed, _S_DATA))
        images = train.images
    out = _out_dir(args)

    sums: dict[tuple[str, str], np.ndarray] = {}
    counts: dict[tuple[str, str], int] = {}
    skipped = 0
    for idx, image in enumerate(images):
        if not np.any(image):
            print(f"warning: image {idx} is all zero, skipped", file=sys.stderr)
            skipped += 1
            continue
        spatial = _channel_energy_map(image)
        spectral = _channel_energy_map(dct2_array(image))
        for domain, values in (("spatial", spatial), ("frequency", spectral)):
            for ordering in orderings:
                curve = cumulative_energy(values, ordering)
                key = (domain, ordering)
                if key not in sums:
                    sums[key] = np.zeros_like(curve.cumulative_ratio)
                    counts[key] = 0
                sums[key] += curve.cumulative_ratio
                counts[key] += 1
    if not sums:
        print("no usable images", file=sys.stderr)
        return 2
    rows = []
    for (domain, ordering), total in sorted(sums.items()):
        mean = total / counts[(domain, ordering)]
        for k, ratio in enumerate(mean, start=1):
            rows.append({"domain": domain, "ordering": ordering, "k": k, "ratio": float(ratio)})
    _write_csv(out / "energy.csv", ["domain", "ordering", "k", "ratio"], rows)
    if not args.no_plot:
        plots.render_energy(out, rows)
    print(f"processed {len(images) - skipped} images ({skipped} skipped); wrote {out / 'energy.csv'}")
    return 0


def cmd_contraction(args) -> int:
    dims = [int(x) for x in args.dims.split(",") if x.strip()]
    seeds = [int(x) for x in (args.seed or "0,1,2,3,4").split(",") if x.strip()]
    out = _out_dir(args)
    rows = []
    for seed in seeds:
        for dim in dims:
            report = contraction_experiment(dim, seed, args.steps)
            rows.append(
                {
                    "seed": seed,
                    "dim": dim,
                    "alpha": report.alpha,
                    "beta": report.beta,
                    "kappa": report.kappa,
                    "max_ratio": report.max_ratio,
                    "bound_satisfied": str(report.bound_satisfied).lower(),
                }
            )
    _write_csv(out / "contraction.csv",
               ["seed", "dim", "alpha", "beta", "kappa", "max_ratio", "bound_satisfied"], rows)
    if not args.no_plot:
        plots.render_contraction(out, rows)
    satisfied = sum(1 for r in rows if r["bound_satisfied"] == "true")
    print(f"{satisfied}/{len(rows)} runs satisfied the bound; wrote {out / 'contraction.csv'}")
    return 0


# ---------------------------------------------------------------------------
# Gradient audit
# ---------------------------------------------------------------------------


def _tiny_instance(seed: int):
    rng = np.random.default_rng(seed)
    syn = {c: rng.uniform(0.0, 1.0, size=(2, 1, 8, 8)) for c in range(2)}
    real = {c: rng.uniform(0.0, 1.0, size=(2, 1, 8, 8)) for c in range(2)}
    spec = ModelSpec(
        layers=(
            ("conv3x3", 1, 4),
            ("relu",),
            ("avgpool2",),
            ("conv3x3", 4, 4),
            ("relu",),
            ("avgpool2",),
            ("flatten",),
            ("linear", 16, 2),
        ),
        class_count=2,
        input_channels=1,
        input_side=8,
    )
    return syn, real, Model(spec, seed=seed + 1)


def _flatten(arrays) -> np.ndarray:
    return np.concatenate([np.asarray(a, dtype=np.float64).ravel() for a in arrays])


def _unflatten_like(vec: np.ndarray, arrays) -> list[np.ndarray]:
    out = []
    offset = 0
    for a in arrays:
        size = a.size
        out.append(vec[offset : offset + size].reshape(a.shape).copy())
        offset += size
    return out


LOSS_CHECKS: dict[str, tuple[DistillConfig, LossWeights]] = {
    "loss:dm": (DistillConfig(objective="dm"), LossWeights(0.0, 0.0)),
    "loss:fda-full": (DistillConfig(objective="fda", fda_mode="full-spectrum"), LossWeights(0.0, 0.0)),
    "loss:fda-masked": (DistillConfig(objective="fda", fda_mode="masked-lowfreq"), LossWeights(0.0, 0.0)),
    "loss:rsc": (DistillConfig(objective="fdd"), LossWeights(0.0, 1.0)),
    "loss:fdd": (DistillConfig(objective="fdd"), LossWeights(0.01, 0.01)),
}

LAYER_CHECKS: dict[str, tuple] = {
    "layer:linear": (("flatten",), ("linear", 64, 2)),
    "layer:flatten": (("flatten",), ("linear", 64, 2)),
    "layer:conv3x3": (("conv3x3", 1, 2), ("flatten",), ("linear", 128, 2)),
    "layer:relu": (("conv3x3", 1, 2), ("relu",), ("flatten",), ("linear", 128, 2)),
    "layer:avgpool2": (("conv3x3", 1, 2), ("avgpool2",), ("flatten",), ("linear", 32, 2)),
}


def gradient_check_table(seed: int = 0, corrupt: str | None = None,
                         step: float = 1e-5, tolerance: float = 1e-4) -> list[dict]:
    """Audit every distillation loss and every layer against central differences.

    Each loss is checked with respect to both synthetic pixels and model
    parameters; each layer with respect to input pixels and its parameters
    under a cross-entropy head. `corrupt` names a row whose analytic gradient
    is deliberately perturbed, exercising the failure-reporting path.
    """
    rows = []
    syn, real, model = _tiny_instance(seed)
    classes = sorted(syn)

    for name, (cfg, weights) in LOSS_CHECKS.items():
        report = objective_grads(syn, real, model, weights, cfg,
                                 want_pixel_grads=True, want_param_grads=True)
        pixel_point = _flatten([syn[c] for c in classes])
        pixel_analytic = _flatten([report.pixel_grads[c] for c in classes])
        param_point = _flatten(model.params)
        param_analytic = _flatten(report.model_param_grads)
        if corrupt == name:
            pixel_analytic = pixel_analytic.copy()
            pixel_analytic[0] += 0.05

        def loss_of_pixels(vec, cfg=cfg, weights=weights):
            shaped = _unflatten_like(vec.ravel(), [syn[c] for c in classes])
            return objective_grads(dict(zip(classes, shaped)), real, model, weights, cfg).value

        def loss_of_params(vec, cfg=cfg, weights=weights):
            candidate = Model(model.spec, _unflatten_like(vec.ravel(), model.params))
            return objective_grads(syn, real, candidate, weights, cfg).value

        err = max(
            finite_diff_check(loss_of_pixels, pixel_point, pixel_analytic, step),
            finite_diff_check(loss_of_params, param_point, param_analytic, step),
        )
        rows.append({"check": name, "max_rel_error": err, "passed": err <= tolerance})

    rng = np.random.default_rng(seed + 7)
    batch = rng.uniform(0.0, 1.0, size=(3, 1, 8, 8))
    labels = np.array([0, 1, 0])
    for name, layers in LAYER_CHECKS.items():
        spec = ModelSpec(layers=layers, class_count=2, input_channels=1, input_side=8)
        net = Model(spec, seed=seed + 11)
        fwd = net.forward(batch)
        loss, d_logits = cross_entropy_with_grad(fwd.logits, labels)
        bundle = net.backward(fwd, d_logits=d_logits)
        param_analytic = _flatten(bundle.param_grads)
        input_analytic = bundle.input_grad.ravel().copy()
        if corrupt == name:
            input_analytic[0] += 0.05

        def ce_of_params(vec, spec=spec):
            candidate = Model(spec, _unflatten_like(vec.ravel(), net.params))
            out = candidate.forward(batch)
            return cross_entropy_with_grad(out.logits, labels)[0]

        def ce_of_input(vec, net=net):
            out = net.forward(vec.reshape(batch.shape))
            return cross_entropy_with_grad(out.logits, labels)[0]

        err = max(
            finite_diff_check(ce_of_params, _flatten(net.params), param_analytic, step),
            finite_diff_check(ce_of_input, batch.ravel().copy(), input_analytic, step),
        )
        rows.append({"check": name, "max_rel_error": err, "passed": err <= tolerance})
    return rows


def cmd_gradcheck(args) -> int:
    seed = int(args.seed) if args.seed else 0
    rows = gradient_check_table(seed=seed, corrupt=args.corrupt)
    width = max(len(r["check"]) for r in rows)
    print(f"{'check'.ljust(width)}  max_rel_error  status")
    for row in rows:
        status = "ok" if row["passed"] else "FAIL"
        print(f"{row['check'].ljust(width)}  {row['max_rel_error']:<13.3e}  {status}")
    if all(r["passed"] for r in rows):
        return 0
    worst = max(rows, key=lambda r: r["max_rel_error"])
    print(f"gradient check failed: {worst['check']} at {worst['max_rel_error']:.3e}", file=sys.stderr)
    return 2


def cmd_security(args) -> int:
    d, s, c = args.side, args.window, args.channels
    kept = args.kept if args.kept is not None else s * s
    logcount = attack_combination_logcount(d, kept)
    spatial = 8 + 4 * c * d * d
    spectral = block_byte_size(c, s)
    print(f"grid {d}x{d}, kept coefficients l={kept}")
    print(f"log10 position combinations: {logcount:.4f}")
    print(f"payload bytes per image: spatial {spatial}, spectral window {spectral}")
    return 0


def cmd_partition(args) -> int:
    man = _resolve_manifest(args)
    out = _out_dir(args, man)
    seed = man.seeds[0]
    alpha = args.alpha if args.alpha is not None else man.alpha
    clients = args.clients if args.clients is not None else man.clients
    train, _ = build_datasets(man.dataset, derive_int(seed, _S_DATA))
    shards = dirichlet_partition(train, clients, alpha, derive_int(seed, 0xD1))
    rows = []
    for k, idx in enumerate(shards):
        row = {"client": k, "total": len(idx)}
        for cls in range(train.class_count):
            row[f"class_{cls}"] = int(np.sum(train.labels[idx] == cls))
        rows.append(row)
    fields = ["client", "total"] + [f"class_{c}" for c in range(train.class_count)]
    _write_csv(out / "shards.csv", fields, rows)
    for row in rows:
        print(" ".join(f"{k}={v}" for k, v in row.items()))
    print(f"wrote {out / 'shards.csv'}")
    return 0


def build_parser() -> _Parser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--manifest", help="path to a JSON run manifest")
    common.add_argument("--preset", choices=sorted(PRESETS), help="built-in manifest preset")
    common.add_argument("--out", help="output directory (default: manifest 'out' or ./out)")
    common.add_argument("--seed", help="comma-separated seed list overriding the manifest")
    common.add_argument("--no-plot", action="store_true", help="skip figure rendering")

    parser = _Parser(prog="fedfd", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("run", parents=[common], help="simulate a federated method").set_defaults(fn=cmd_run)

    p_energy = sub.add_parser("energy", parents=[common], help="cumulative energy-ratio curves")
    p_energy.add_argument("--npy", help="analyze a single .npy image instead of a dataset")
    p_energy.add_argument("--orderings", default="sequential-topleft,descending-energy")
    p_energy.set_defaults(fn=cmd_energy)

    p_contr = sub.add_parser("contraction", parents=[common], help="descent contraction checks")
    p_contr.add_argument("--dims", default="1,2,4,8,16,32")
    p_contr.add_argument("--steps", type=int, default=200)
    p_contr.set_defaults(fn=cmd_contraction)

    p_grad = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient audit")
    p_grad.add_argument("--corrupt", help="test hook: perturb the named check's analytic gradient")
    p_grad.set_defaults(fn=cmd_gradcheck)

    p_sec = sub.add_parser("security", parents=[common], help="attacker combination count")
    p_sec.add_argument("--side", type=int, default=32)
    p_sec.add_argument("--window", type=int, default=16)
    p_sec.add_argument("--channels", type=int, default=3)
    p_sec.add_argument("--kept", type=int, default=None, help="override l (default window^2)")
    p_sec.set_defaults(fn=cmd_security)

    p_part = sub.add_parser("partition", parents=[common], help="emit the shard-size matrix")
    p_part.add_argument("--alpha", type=float, default=None)
    p_part.add_argument("--clients", type=int, default=None)
    p_part.set_defaults(fn=cmd_partition)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except _CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ManifestError, FileNotFoundError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
