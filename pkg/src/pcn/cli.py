"""Command-line interface.

Subcommands: phantom-gen, train, eval, ablate, plot, report.

Exit codes: 0 success, 1 configuration error, 2 runtime or data error.
Every writing command takes a directory lock and finishes by writing a
manifest listing its artifacts with checksums. PCN_DETERMINISTIC=1 forces
deterministic mode for all commands.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import FileConfig, parse_config
from .core import Phase, split_folds
from .errors import ConfigError, MissingArtifactError, PcnError
from .inference import (
    METHOD_FUSED,
    METHOD_SINGLE,
    evaluate,
    histogram_compare,
    predict_fused,
    predict_single,
    real_histogram_pairs,
    translated_histogram_pairs,
)
from .phantom import PRESET_NAMES, generate_dataset, make_preset, weak_phase_of
from .rng import deterministic_mode_requested
from .storage import (
    ManifestWriter,
    acquire_lock,
    load_dataset,
    read_json,
    release_lock,
    save_dataset,
    write_json,
)
from .trainer import (
    MODE_ONE_PHASE,
    TrainConfig,
    load_bundle_checkpoint,
    run_training,
    save_bundle_checkpoint,
    train_one_phase,
)


def _load_file_config(path) -> FileConfig:
    if path is None:
        return FileConfig(phantom=make_preset("default"), train=TrainConfig())
    return parse_config(path)


def _apply_determinism(cfg: TrainConfig) -> TrainConfig:
    if deterministic_mode_requested() and not cfg.deterministic:
        return replace(cfg, deterministic=True)
    return cfg


# ---------------------------------------------------------------------------
# phantom-gen


def cmd_phantom_gen(args) -> int:
    fc = _load_file_config(args.config)
    phantom_cfg = fc.phantom
    if args.preset:
        phantom_cfg = make_preset(args.preset, seed=phantom_cfg.seed)
    n_cases = args.cases if args.cases is not None else fc.n_cases
    seed = args.seed if args.seed is not None else phantom_cfg.seed
    out = Path(args.out)
    lock = acquire_lock(out)
    try:
        manifest = ManifestWriter(out, "phantom-gen",
                                  config_snapshot={"phantom": phantom_cfg.to_dict(),
                                                   "n_cases": n_cases},
                                  seeds=[seed])
        data = generate_dataset(phantom_cfg, n_cases, seed)
        save_dataset(out, data, config_snapshot=phantom_cfg.to_dict(), seed=seed)
        manifest.add_artifact(out / "dataset_manifest.json")
        manifest.finish({"n_cases": n_cases})
        print(f"wrote {n_cases} cases to {out}")
        return 0
    finally:
        release_lock(lock)


# ---------------------------------------------------------------------------
# train


def _train_one_phase_run(data, cfg: TrainConfig, out: Path):
    if not cfg.donor_checkpoint:
        raise ConfigError(["one_phase mode requires train.donor_checkpoint"])
    donor, _, warnings = load_bundle_checkpoint(cfg.donor_checkpoint)
    counts = data.counts
    present = [p for p, n in counts.items() if n > 0]
    if len(present) != 1:
        raise ConfigError(["one_phase mode expects a single-phase dataset"])
    phase = present[0]
    num_classes = next(iter(data.cases[0].masks().values())).num_classes
    from .segmenter import seg_init

    f_native = seg_init(cfg.seg_arch(num_classes), cfg.seed, phase=phase)
    f_other = seg_init(cfg.seg_arch(num_classes), cfg.seed + 1, phase=phase.other)
    frozen_gen = donor.generator_from(phase)
    from .trainer import LossLogger

    log = LossLogger(out / "loss_log.csv")
    train_one_phase(f_native, f_other, frozen_gen, data, cfg, log=log)
    donor.f_a = f_native if phase is Phase.ARTERIAL else f_other
    donor.f_v = f_other if phase is Phase.ARTERIAL else f_native
    donor.stage = "one_phase"
    save_bundle_checkpoint(out / "final.pcnckpt", donor, cfg)
    return warnings


def cmd_train(args) -> int:
    fc = _load_file_config(args.config)
    cfg = _apply_determinism(fc.train)
    data = load_dataset(args.data)
    out = Path(args.out)
    lock = acquire_lock(out)
    try:
        manifest = ManifestWriter(out, "train", config_snapshot=fc.snapshot(),
                                  seeds=[cfg.seed])
        manifest.add_input(Path(args.data) / "dataset_manifest.json")
        warnings = []
        if cfg.mode == MODE_ONE_PHASE:
            warnings = _train_one_phase_run(data, cfg, out)
        else:
            run_training(data, cfg, out)
        for w in warnings:
            manifest.warn(w)
        for artifact in sorted(out.rglob("*.pcnckpt")) + [out / "loss_log.csv"]:
            if Path(artifact).exists():
                manifest.add_artifact(artifact)
        manifest.finish({"software_version": __version__})
        print(f"training complete: {out / 'final.pcnckpt'}")
        return 0
    finally:
        release_lock(lock)


# ---------------------------------------------------------------------------
# eval


def _eval_phase_artifacts(bundle, data, phase: Phase, lambda_fuse: float):
    """Panel grids plus per-case fused DSC ordering for one phase."""
    images, single_masks, fused_masks, gts, case_ids, fused_scores = [], [], [], [], [], []
    target_cls = 1
    for case in data.cases:
        if not case.has_phase(phase):
            continue
        vol, gt = case.phase_pair(phase)
        _, single = predict_single(bundle.seg_model(phase), vol)
        _, fused = predict_fused(bundle.seg_model(phase), bundle.seg_model(phase.other),
                                 bundle.generator_from(phase), vol, lambda_fuse)
        images.append(vol.data)
        single_masks.append(single.data)
        fused_masks.append(fused.data)
        gts.append(gt.data)
        case_ids.append(case.case_id)
        from .core import dsc

        fused_scores.append(dsc(fused.class_mask(target_cls), gt.class_mask(target_cls)))
    order = list(np.argsort(fused_scores)[::-1])
    return {
        "images": np.stack(images),
        "single": np.stack(single_masks),
        "fused": np.stack(fused_masks),
        "gt": np.stack(gts),
        "case_ids": np.array(case_ids),
        "order": np.array(order),
        "num_classes": bundle.num_classes,
    }


def cmd_eval(args) -> int:
    run_dir = Path(args.run)
    ckpt = run_dir / "final.pcnckpt"
    if not ckpt.exists():
        raise MissingArtifactError(f"{run_dir} has no final.pcnckpt; run `pcn train` first")
    bundle, header, _ = load_bundle_checkpoint(ckpt)
    data = load_dataset(args.data)
    if args.fold is not None:
        folds = split_folds(data, args.k_folds, seed=args.fold_seed)
        data = data.subset(folds.fold_cases(args.fold))
    lock = acquire_lock(run_dir)
    try:
        manifest = ManifestWriter(run_dir, "eval", seeds=[header.get("seed")],
                                  filename="eval_manifest.json")
        manifest.add_input(ckpt)
        phases = [Phase(args.phase)] if args.phase else [Phase.ARTERIAL, Phase.VENOUS]
        report_out = {}
        panels = None
        for phase in phases:
            if data.counts[phase] == 0:
                continue
            report = evaluate(bundle.seg_model(phase), data, phase,
                              f_other=bundle.seg_model(phase.other),
                              generator=bundle.generator_from(phase),
                              lambda_fuse=args.lambda_fuse,
                              provenance={"run": str(run_dir), "checkpoint": "final.pcnckpt"})
            report_out[phase.value] = report.to_json_dict()
            if panels is None:
                panels = _eval_phase_artifacts(bundle, data, phase, args.lambda_fuse)
        out_path = Path(args.out) if args.out else run_dir / "eval_report.json"
        write_json(out_path, report_out)
        manifest.add_artifact(out_path)

        # per-case CSV
        import csv

        csv_path = run_dir / "eval_percase.csv"
        with open(csv_path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["phase", "case_id", "method", "class", "dsc"])
            for phase_name, rep in report_out.items():
                for case_id, methods in sorted(rep["per_case"].items()):
                    for method, classes in methods.items():
                        for cls, val in classes.items():
                            w.writerow([phase_name, case_id, method, cls, val])
        manifest.add_artifact(csv_path)

        if panels is not None:
            npz_path = run_dir / "eval_panels.npz"
            np.savez(npz_path, **panels)
            manifest.add_artifact(npz_path)

        # translation fidelity histograms per class and direction
        comparisons = []
        num_classes = bundle.num_classes
        for phase in phases:
            g = bundle.generator_from(phase.other)  # translates INTO this phase
            for cls in range(1, num_classes):
                try:
                    real = real_histogram_pairs(data, phase, cls)
                    gen = translated_histogram_pairs(data, g, cls)
                    cmp = histogram_compare(real, gen)
                except PcnError:
                    continue
                comparisons.append({
                    "name": f"{phase.value}_class{cls}",
                    "title": f"class {cls}, real {phase.value} vs translated",
                    "real": {"bin_edges": cmp.real.bin_edges.tolist(),
                             "freqs": cmp.real.freqs.tolist()},
                    "generated": {"bin_edges": cmp.generated.bin_edges.tolist(),
                                  "freqs": cmp.generated.freqs.tolist()},
                    "peak_distance": cmp.peak_distance,
                    "l1_distance": cmp.l1_distance,
                })
        hist_path = run_dir / "eval_histograms.json"
        write_json(hist_path, {"comparisons": comparisons})
        manifest.add_artifact(hist_path)
        manifest.finish()
        print(f"eval report: {out_path}")
        return 0
    finally:
        release_lock(lock)


# ---------------------------------------------------------------------------
# ablate


def cmd_ablate(args) -> int:
    from .experiments import ExperimentGrid, make_donors, run_ablation_suite

    grid = ExperimentGrid.from_json_dict(read_json(args.grid))
    data = load_dataset(args.data)
    out = Path(args.out)
    lock = acquire_lock(out)
    try:
        manifest = ManifestWriter(out, "ablate", seeds=list(grid.seeds))
        needed = sorted({v.donor for v in grid.variants if v.donor})
        donors = {}
        if needed:
            donor_cfg = replace(grid.train, seed=grid.data_seed + 7919)
            donor_data = generate_dataset(make_preset(grid.preset),
                                          max(len(data) // 2, 4),
                                          seed=grid.data_seed + 104729)
            donors = make_donors(donor_data, donor_cfg, out / "donors", kinds=needed)
        table = run_ablation_suite(grid, data, out, donors=donors)
        manifest.add_artifact(out / "ablation_table.json")
        manifest.add_artifact(out / "ablation_table.csv")
        manifest.finish()
        for variant in [v.name for v in grid.variants]:
            vals = [r["value"] for r in table.rows
                    if r["variant"] == variant and r["method"] == METHOD_FUSED]
            print(f"{variant}: fused DSC mean {np.mean(vals):.3f} "
                  f"(spread {np.std(vals):.3f})")
        return 0
    finally:
        release_lock(lock)


# ---------------------------------------------------------------------------
# plot / report


def cmd_plot(args) -> int:
    from .plots import emit_plots

    run_dir = Path(args.run)
    lock = acquire_lock(run_dir)
    try:
        manifest = ManifestWriter(run_dir, "plot", filename="plot_manifest.json")
        written = emit_plots(run_dir, out_dir=args.out)
        for path in written:
            manifest.add_artifact(path)
        manifest.finish({"plots": [str(p) for p in written]})
        for path in written:
            print(path)
        return 0
    finally:
        release_lock(lock)


def cmd_report(args) -> int:
    run_dir = Path(args.run)
    report = read_json(run_dir / "eval_report.json")
    for phase_name, rep in report.items():
        print(f"phase: {phase_name}")
        summary = rep["summary"]
        for method, classes in summary.items():
            for cls, stats in classes.items():
                print(f"  {method:8s} class {cls}: avg {stats['average']:.3f} "
                      f"max {stats['max']:.3f} min {stats['min']:.3f}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pcn", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom-gen", help="generate a synthetic two-phase dataset")
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--preset", choices=PRESET_NAMES, default=None)
    p.add_argument("--cases", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_phantom_gen)

    p = sub.add_parser("train", help="run the two-stage training schedule")
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a trained run on a dataset")
    p.add_argument("--run", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--phase", choices=[ph.value for ph in Phase], default=None)
    p.add_argument("--fold", type=int, default=None)
    p.add_argument("--k-folds", type=int, default=4)
    p.add_argument("--fold-seed", type=int, default=0)
    p.add_argument("--lambda-fuse", type=float, default=0.5)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run a training-strategy comparison grid")
    p.add_argument("--grid", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("plot", help="render diagnostic PNGs from eval outputs")
    p.add_argument("--run", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("report", help="print the evaluation summary table")
    p.add_argument("--run", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        for msg in exc.errors:
            print(f"config error: {msg}", file=sys.stderr)
        return 1
    except PcnError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
