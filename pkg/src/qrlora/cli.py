"""Command-line interface: factorize, init, analyze, train-toy, merge.

Exit codes: 0 success, 2 usage or config-schema error, 3 data or
verification failure. All randomness flows through --seed (or the config
seed); outputs are deterministic for identical inputs and flags, with
wall-clock confined to the sidecar ``run_meta.json``.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import formats
from .adapter import (
    DualAdapterLinear,
    InitStrategy,
    LoraAdapter,
    build_dual_layer,
    forward,
    merge,
    trainable_parameter_count,
)
from .diagnostics import build_report, cosine_structure, layer_diagnostics
from .errors import (
    ConfigError,
    ConvergenceError,
    DivergenceError,
    DomainError,
    ManifestError,
    MatrixFileError,
)
from .linalg import rrqr
from .rng import child_seed, stream
from .train import TrainConfig, gen_toy_task, run_experiment_detailed

VERIFY_INIT_TOL = 1e-12
VERIFY_MERGE_TOL = 1e-10
VERIFY_FACTOR_TOL = 1e-10
_PROBES = 100

_ADAPTER_ROLES = {
    "main": ("adapter_b_main", "adapter_a_main"),
    "sub": ("adapter_b_sub", "adapter_a_sub"),
}


def _map_layers(fn, items, threads: int):
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, items))
    return [fn(item) for item in items]


def _fail(message: str, code: int) -> int:
    print(f"error: {message}", file=sys.stderr)
    return code


def _layer_files(name: str, layer: DualAdapterLinear, ext: str,
                 include_original: bool) -> list[tuple[formats.ManifestEntry, np.ndarray]]:
    out = []

    def add(role: str, arr: np.ndarray, selected=None):
        entry = formats.ManifestEntry(
            name=name, role=role, rows=arr.shape[0], cols=arr.shape[1],
            file=f"{name}.{role}.{ext}",
            selected_cols=list(selected) if selected else None,
        )
        out.append((entry, arr))

    if include_original:
        add("original", layer.w_original)
    add("residual", layer.w_residual)
    for slot, adapter_obj in layer.adapters():
        b_role, a_role = _ADAPTER_ROLES[slot]
        add(b_role, adapter_obj.b)
        add(a_role, adapter_obj.a, selected=adapter_obj.selected_cols)
    return out


def _write_checkpoint(directory, layers: dict[str, DualAdapterLinear], csv: bool,
                      include_original: bool,
                      keep: list[formats.ManifestEntry] | None = None) -> None:
    _, writer, ext = formats.matrix_io(csv)
    os.makedirs(directory, exist_ok=True)
    entries = list(keep or [])
    replaced = {(e.name, e.role) for e in entries}
    for name in sorted(layers):
        for entry, arr in _layer_files(name, layers[name], ext, include_original):
            if (entry.name, entry.role) in replaced:
                entries = [e for e in entries
                           if (e.name, e.role) != (entry.name, entry.role)]
            writer(os.path.join(directory, entry.file), arr)
            entries.append(entry)
    entries.sort(key=lambda e: (e.name, formats.ROLES.index(e.role)))
    formats.save_manifest(directory, entries)


def _adapter_from_files(layer: dict, slot: str) -> LoraAdapter | None:
    b_role, a_role = _ADAPTER_ROLES[slot]
    if b_role not in layer and a_role not in layer:
        return None
    if b_role not in layer or a_role not in layer:
        raise ManifestError(f"checkpoint has only half of the {slot} adapter")
    b = layer[b_role]
    a = layer[a_role]
    lr_mult = 1.0 if slot == "main" else 0.5
    return LoraAdapter(
        b=b, a=a, rank=b.shape[1], lr_multiplier=lr_mult,
        selected_cols=tuple(layer["selected_cols"].get(a_role, [])),
    )


def cmd_factorize(args) -> int:
    reader, writer, ext = formats.matrix_io(args.csv)
    w = reader(args.input)
    fac = rrqr(w)
    os.makedirs(args.outdir, exist_ok=True)
    writer(os.path.join(args.outdir, f"q.{ext}"), fac.q)
    writer(os.path.join(args.outdir, f"r.{ext}"), fac.r)
    formats.write_json(os.path.join(args.outdir, "perm.json"),
                       [int(p) for p in fac.perm])

    diag = np.abs(np.diag(fac.r[:, : fac.m]))
    shown = ", ".join(f"{v:.6g}" for v in diag[:8])
    if diag.size > 8:
        shown += ", ..."
    print(f"factorized {w.shape[0]}x{w.shape[1]}: diag(R) = [{shown}] "
          f"(max {diag.max():.6g}, min {diag.min():.6g})")

    if args.verify:
        recon = np.linalg.norm(w[:, fac.perm] - fac.q @ fac.r)
        recon /= max(np.linalg.norm(w), np.finfo(float).tiny)
        orth = np.linalg.norm(fac.q.T @ fac.q - np.eye(fac.m))
        print(f"verify: reconstruction residual {recon:.3e}, orthogonality {orth:.3e}")
        if recon > VERIFY_FACTOR_TOL or orth > VERIFY_FACTOR_TOL:
            return _fail("factorization verification failed", 3)
    return 0


def cmd_init(args) -> int:
    strategy = InitStrategy(args.strategy)
    checkpoint = formats.load_checkpoint(args.checkpoint, csv=args.csv)
    originals = {name: layer["original"] for name, layer in checkpoint.items()
                 if "original" in layer}
    if not originals:
        return _fail(f"no 'original' matrices in {args.checkpoint}", 3)

    if strategy is InitStrategy.RRQR_DUAL:
        bad = [name for name, w in originals.items()
               if args.r_main + args.r_sub > min(w.shape)]
        if bad:
            return _fail(
                f"r_main + r_sub = {args.r_main} + {args.r_sub} exceeds min(d, k) "
                f"for layers: {', '.join(sorted(bad))}", 3)

    def build(name: str) -> tuple[str, DualAdapterLinear]:
        return name, build_dual_layer(
            originals[name], args.r_main, args.r_sub, strategy,
            seed=child_seed(args.seed, "init", name),
        )

    built = dict(_map_layers(build, sorted(originals), args.threads))
    keep = formats.load_manifest(args.checkpoint)
    _write_checkpoint(args.checkpoint, built, args.csv, include_original=False,
                      keep=keep)
    params = sum(trainable_parameter_count(lay) for lay in built.values())
    print(f"initialized {len(built)} layer(s) with {strategy.value}, "
          f"{params} trainable parameters")

    if args.verify:
        worst = 0.0
        for name, lay in sorted(built.items()):
            x = stream(args.seed, "verify", name).normal(size=(lay.d_in, _PROBES))
            worst = max(worst, float(np.abs(forward(lay, x) - lay.w_original @ x).max()))
        print(f"verify: max |forward - original| = {worst:.3e} over {_PROBES} probes")
        if worst > VERIFY_INIT_TOL:
            return _fail("output preservation verification failed", 3)
    return 0


def cmd_analyze(args) -> int:
    checkpoint = formats.load_checkpoint(args.checkpoint, csv=args.csv)

    def diagnose(item):
        name, layer = item
        main = _adapter_from_files(layer, "main")
        if main is None:
            raise ManifestError(f"layer {name!r} has no main adapter files")
        return layer_diagnostics(name, main, _adapter_from_files(layer, "sub"))

    records = _map_layers(diagnose, sorted(checkpoint.items()), args.threads)
    report = build_report(records)
    report_path = args.report or os.path.join(args.checkpoint, "diagnostics_report.json")
    formats.write_json(report_path, formats.diagnostics_report_dict(report))
    print(f"wrote {report_path}: mean effective rank "
          f"{_fmt(report.mean_effective_rank)}, mean phi {_fmt(report.mean_phi)}, "
          f"mean |cos| A rows {_fmt(report.mean_offdiag_cos_a)}")

    if args.heatmaps:
        os.makedirs(args.heatmaps, exist_ok=True)
        for name, layer in sorted(checkpoint.items()):
            main = _adapter_from_files(layer, "main")
            if main.rank < 2:
                continue
            formats.write_matrix_csv(
                os.path.join(args.heatmaps, f"{name}.cos_a_rows.csv"),
                cosine_structure(main.a, "rows").heatmap)
            formats.write_matrix_csv(
                os.path.join(args.heatmaps, f"{name}.cos_b_cols.csv"),
                cosine_structure(main.b, "cols").heatmap)
    return 0


def _fmt(value) -> str:
    return "n/a" if value is None else f"{value:.4f}"


def cmd_train_toy(args) -> int:
    try:
        with open(args.config, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {args.config} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    config = TrainConfig.from_dict(raw)

    task = gen_toy_task(config.seed, config.shift_strength)
    result = run_experiment_detailed(config, task)
    report = result.report

    os.makedirs(args.out, exist_ok=True)
    formats.write_json(os.path.join(args.out, "report.json"),
                       formats.train_report_dict(report))
    formats.write_json(os.path.join(args.out, "run_meta.json"),
                       {"wall_clock_s": report.wall_clock_s})
    layers = {f"layer{i}": lay for i, lay in enumerate(result.layers)}
    checkpoint_dir = os.path.join(args.out, "checkpoint")
    _write_checkpoint(checkpoint_dir, layers, args.csv, include_original=True)

    final = report.snapshots[-1][1]
    print(f"trained {config.iterations} step(s) [{config.strategy.value}]: "
          f"target loss {report.initial_target_loss:.6f} -> {report.final_target_loss:.6f}, "
          f"source loss {report.final_source_loss:.6f}")
    stats = final.norm_stats
    print(f"diagnostics: mean effective rank {_fmt(final.mean_effective_rank)}, "
          f"mean phi {_fmt(final.mean_phi)}, "
          f"avg selected/non-selected norm ratio "
          f"{_fmt(stats.avg_ratio if stats else None)}")
    return 0


def cmd_merge(args) -> int:
    checkpoint = formats.load_checkpoint(args.checkpoint, csv=args.csv)
    _, writer, ext = formats.matrix_io(args.csv)
    os.makedirs(args.out, exist_ok=True)

    def merge_one(item):
        name, layer = item
        if "residual" not in layer:
            raise ManifestError(f"layer {name!r} has no residual matrix")
        main = _adapter_from_files(layer, "main")
        if main is None:
            raise ManifestError(f"layer {name!r} has no main adapter files")
        sub = _adapter_from_files(layer, "sub")
        merged = layer["residual"] + main.delta()
        if sub is not None:
            merged = merged + sub.delta()
        return name, merged, main, sub

    results = _map_layers(merge_one, sorted(checkpoint.items()), args.threads)
    entries = []
    for name, merged, _, _ in results:
        fname = f"{name}.original.{ext}"
        writer(os.path.join(args.out, fname), merged)
        entries.append(formats.ManifestEntry(
            name=name, role="original", rows=merged.shape[0],
            cols=merged.shape[1], file=fname))
    formats.save_manifest(args.out, entries)
    print(f"merged {len(results)} layer(s) into {args.out}")

    if args.verify:
        worst = 0.0
        for name, merged, main, sub in results:
            residual = checkpoint[name]["residual"]
            x = stream(args.seed, "verify", name).normal(size=(merged.shape[1], _PROBES))
            adapted = residual @ x + main.b @ (main.a @ x)
            if sub is not None:
                adapted = adapted + sub.b @ (sub.a @ x)
            worst = max(worst, float(np.abs(merged @ x - adapted).max()))
        print(f"verify: max |merged - adapter forward| = {worst:.3e} over {_PROBES} probes")
        if worst > VERIFY_MERGE_TOL:
            return _fail("merge verification failed", 3)
    return 0


def build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--seed", type=int, default=0,
                        help="seed for all randomness (default 0)")
    shared.add_argument("--threads", type=int, default=1,
                        help="worker threads for per-layer work")
    shared.add_argument("--verify", action="store_true",
                        help="run verification probes after the command")
    shared.add_argument("--csv", action="store_true",
                        help="read/write matrices as CSV instead of RLMX")

    parser = argparse.ArgumentParser(
        prog="qrlora",
        description="Pivoted-QR dual low-rank adapters: factorize, "
                    "initialize, analyze, train, merge.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("factorize", parents=[shared],
                       help="column-pivoted QR of a matrix file")
    p.add_argument("input", help="input matrix file")
    p.add_argument("outdir", help="output directory for q, r, perm.json")
    p.set_defaults(func=cmd_factorize)

    p = sub.add_parser("init", parents=[shared],
                       help="initialize adapters over a checkpoint's originals")
    p.add_argument("checkpoint", help="checkpoint directory with a manifest")
    p.add_argument("--r-main", type=int, default=32)
    p.add_argument("--r-sub", type=int, default=4)
    p.add_argument("--strategy", default="rrqr-dual",
                   choices=[s.value for s in InitStrategy])
    p.set_defaults(func=cmd_init)

    p = sub.add_parser("analyze", parents=[shared],
                       help="emit a diagnostics report for a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--report", help="report path (default: <checkpoint>/diagnostics_report.json)")
    p.add_argument("--heatmaps", help="directory for per-layer cosine heatmap CSVs")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("train-toy", parents=[shared],
                       help="run the synthetic domain-shift experiment")
    p.add_argument("--config", required=True, help="JSON config file")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("merge", parents=[shared],
                       help="collapse residual + adapters into dense weights")
    p.add_argument("checkpoint")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_merge)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        return _fail(str(exc), 2)
    except (MatrixFileError, ManifestError, DomainError, ConvergenceError,
            DivergenceError) as exc:
        return _fail(str(exc), 3)
    except OSError as exc:
        return _fail(str(exc), 3)


if __name__ == "__main__":
    sys.exit(main())
