"""Scripted comparative studies: training-strategy ablation, mixed-data
augmentation control, and single-phase transfer.

Every variant in a study consumes identical fold splits and seed lists;
the fold assignment hash is recorded in each run manifest so this can be
audited after the fact.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .bundle import ModelBundle, bundle_init
from .core import Dataset, FoldSplit, Phase, split_folds
from .errors import ConfigError, InsufficientDataError, MissingArtifactError
from .inference import METHOD_FUSED, METHOD_SINGLE, evaluate
from .phantom import ORGAN_CLASS
from .segmenter import SegModel, probs_loss, seg_init
from .storage import write_json
from .trainer import (
    BatchSource,
    LossLogger,
    TrainConfig,
    _cyclegan_step,
    _ensure_optimizers,
    _phase_arrays,
    _set_lr,
    lr_at,
    load_bundle_checkpoint,
    run_training,
    save_bundle_checkpoint,
    train_one_phase,
)

TRANSLATOR_MODES = ("coupled", "frozen", "uda", "frozen-uda")


@dataclass(frozen=True)
class VariantSpec:
    """One training strategy: how the translator is handled, plus config
    overrides. Frozen modes borrow a donor translator and never update it."""

    name: str
    translator: str = "coupled"
    donor: Optional[str] = None  # donor checkpoint key: "pcn" or "cyclegan"
    overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.translator not in TRANSLATOR_MODES:
            raise ConfigError(
                [f"variant {self.name}: translator must be one of {TRANSLATOR_MODES}"]
            )
        if self.translator.startswith("frozen") and self.donor is None:
            raise ConfigError(
                [f"variant {self.name}: frozen translator modes need a donor key"]
            )

    def apply(self, cfg: TrainConfig, donors: dict) -> TrainConfig:
        kwargs = dict(self.overrides)
        kwargs["translator_frozen"] = self.translator.startswith("frozen")
        kwargs["uda"] = self.translator.endswith("uda")
        if self.donor is not None:
            if self.donor not in donors:
                raise MissingArtifactError(
                    f"variant {self.name} needs donor checkpoint '{self.donor}'"
                )
            kwargs["donor_checkpoint"] = str(donors[self.donor])
        return replace(cfg, **kwargs)


STANDARD_ABLATION = (
    VariantSpec(name="pcn2", translator="coupled"),
    VariantSpec(name="pcn1", translator="frozen", donor="pcn"),
    VariantSpec(name="uda2", translator="uda"),
    VariantSpec(name="uda1", translator="frozen-uda", donor="cyclegan"),
)


@dataclass(frozen=True)
class ExperimentGrid:
    variants: tuple = STANDARD_ABLATION
    seeds: tuple = (0, 1, 2)
    preset: str = "weak-arterial"
    n_cases: int = 16
    data_seed: int = 100
    k_folds: int = 4
    eval_fold: int = 0
    # when set, this fold is held out of training and used to tune the
    # fusion weight per variant and seed; fixed 0.5 is reported alongside
    val_fold: Optional[int] = None
    fold_seed: int = 0
    target_class: int = ORGAN_CLASS
    target_phase: Optional[str] = None  # phase the tuned fusion optimizes
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        names = [v.name for v in self.variants]
        if len(set(names)) != len(names):
            raise ConfigError(["variant names must be unique"])
        if len(self.seeds) < 1:
            raise ConfigError(["at least one seed is required"])
        if self.val_fold is not None and self.val_fold == self.eval_fold:
            raise ConfigError(["val_fold must differ from eval_fold"])

    def train_case_ids(self, folds: FoldSplit) -> list[str]:
        excluded = {self.eval_fold}
        if self.val_fold is not None:
            excluded.add(self.val_fold)
        return sorted(cid for cid, f in folds.assignments.items() if f not in excluded)

    @classmethod
    def from_json_dict(cls, d: dict) -> "ExperimentGrid":
        d = dict(d)
        if "variants" in d:
            d["variants"] = tuple(VariantSpec(**v) for v in d["variants"])
        if "train" in d:
            d["train"] = TrainConfig.from_dict({**TrainConfig().to_dict(), **d["train"]})
        if "seeds" in d:
            d["seeds"] = tuple(d["seeds"])
        return cls(**d)


def fold_hash(folds: FoldSplit) -> str:
    blob = json.dumps(folds.to_json_dict(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class StudyTable:
    """Flat result rows (variant, seed, phase, method, class, value) plus
    study-level metadata; every cell traces back to a run directory."""

    rows: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def add(self, **row) -> None:
        self.rows.append(row)

    def values(self, **filters) -> list[float]:
        out = []
        for row in self.rows:
            if all(row.get(k) == v for k, v in filters.items()):
                out.append(row["value"])
        return out

    def mean(self, **filters) -> float:
        vals = self.values(**filters)
        if not vals:
            raise KeyError(f"no rows match {filters}")
        return float(np.mean(vals))

    def save(self, out_dir, name: str) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_json(out_dir / f"{name}.json", {"meta": self.meta, "rows": self.rows})
        import csv

        cols = sorted({k for row in self.rows for k in row})
        with open(out_dir / f"{name}.csv", "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=cols)
            w.writeheader()
            w.writerows(self.rows)


# ---------------------------------------------------------------------------
# Donor translators


def train_translator_only(data: Dataset, cfg: TrainConfig, iters: int) -> ModelBundle:
    """Adversarial + cycle training of the translation pair alone; the
    segmenters stay untouched. This is the unsupervised-adaptation donor."""
    num_classes = next(iter(data.cases[0].masks().values())).num_classes
    bundle = bundle_init(cfg.seed, num_classes=num_classes,
                         seg_arch=cfg.seg_arch(num_classes), gen_arch=cfg.gen_arch(),
                         disc_arch=cfg.disc_arch())
    _ensure_optimizers(bundle, cfg)
    dtype = bundle.f_a.dtype
    gan_a = BatchSource.from_dataset(data, Phase.ARTERIAL, cfg.seed, "gan-arterial", dtype)
    gan_v = BatchSource.from_dataset(data, Phase.VENOUS, cfg.seed, "gan-venous", dtype)
    for _ in range(iters):
        _cyclegan_step(bundle, cfg, gan_a, gan_v)
    return bundle


def make_donors(donor_data: Dataset, cfg: TrainConfig, out_dir,
                kinds=("cyclegan", "pcn")) -> dict:
    """Train donor translator checkpoints on a disjoint dataset.

    "cyclegan": translator trained adversarially only (never sees labels).
    "pcn": translator from a full coupled two-stage run.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    donors = {}
    for kind in kinds:
        path = out_dir / f"donor_{kind}.pcnckpt"
        if kind == "cyclegan":
            bundle = train_translator_only(
                donor_data, cfg, cfg.separate_iters + cfg.joint_iters)
            save_bundle_checkpoint(path, bundle, cfg)
        elif kind == "pcn":
            bundle = run_training(donor_data, cfg, out_dir / "donor_pcn_run")
            save_bundle_checkpoint(path, bundle, cfg)
        else:
            raise ConfigError([f"unknown donor kind '{kind}'"])
        donors[kind] = path
    return donors


# ---------------------------------------------------------------------------
# Ablation suite


def _evaluate_bundle(bundle: ModelBundle, test: Dataset, classes: list[int]):
    """Single and fused reports for both phases of a test set."""
    reports = {}
    for phase in (Phase.ARTERIAL, Phase.VENOUS):
        f_native = bundle.seg_model(phase)
        f_other = bundle.seg_model(phase.other)
        g = bundle.generator_from(phase)
        reports[phase] = evaluate(f_native, test, phase, f_other=f_other, generator=g,
                                  classes=classes)
    return reports


def run_ablation_suite(grid: ExperimentGrid, data: Dataset, out_dir,
                       donors: Optional[dict] = None) -> StudyTable:
    """Train and evaluate every (variant, seed) pair on shared folds.

    With grid.val_fold set, the fusion weight is additionally tuned per
    variant and seed on that held-out fold ("fused_tuned" rows); training
    never sees the validation or evaluation folds.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    donors = donors or {}
    needed = {v.donor for v in grid.variants if v.donor is not None}
    missing = needed - set(donors)
    if missing:
        raise MissingArtifactError(
            f"ablation grid needs donor checkpoints {sorted(missing)}; "
            "train them first (make_donors)"
        )
    folds = split_folds(data, grid.k_folds, seed=grid.fold_seed)
    train_set = data.subset(grid.train_case_ids(folds))
    test_set = data.subset(folds.fold_cases(grid.eval_fold))
    val_set = (data.subset(folds.fold_cases(grid.val_fold))
               if grid.val_fold is not None else None)
    tune_phase = Phase(grid.target_phase) if grid.target_phase else Phase.ARTERIAL
    table = StudyTable(meta={
        "study": "ablation",
        "preset": grid.preset,
        "fold_hash": fold_hash(folds),
        "seeds": list(grid.seeds),
        "eval_fold": grid.eval_fold,
        "val_fold": grid.val_fold,
        "train_config": grid.train.to_dict(),
        "variants": [v.name for v in grid.variants],
    })
    classes = [grid.target_class]
    import time

    for spec in grid.variants:
        for seed in grid.seeds:
            cfg = replace(spec.apply(grid.train, donors), seed=seed)
            run_dir = out_dir / f"{spec.name}_seed{seed}"
            t_start = time.perf_counter()
            bundle = run_training(train_set, cfg, run_dir)
            reports = _evaluate_bundle(bundle, test_set, classes)
            for phase, report in reports.items():
                write_json(run_dir / f"report_{phase.value}.json", report.to_json_dict())
                for method in (METHOD_SINGLE, METHOD_FUSED):
                    for cls in classes:
                        table.add(variant=spec.name, seed=seed, phase=phase.value,
                                  method=method, cls=cls,
                                  value=report.mean_dsc(method, cls))
            tuned_lam = None
            if val_set is not None:
                from .inference import fuse_weight_search

                tuned_lam, _ = fuse_weight_search(
                    bundle.seg_model(tune_phase), bundle.seg_model(tune_phase.other),
                    bundle.generator_from(tune_phase), val_set, tune_phase,
                    cls=grid.target_class)
                tuned_report = evaluate(
                    bundle.seg_model(tune_phase), test_set, tune_phase,
                    f_other=bundle.seg_model(tune_phase.other),
                    generator=bundle.generator_from(tune_phase),
                    methods=(METHOD_FUSED,), lambda_fuse=tuned_lam, classes=classes)
                table.add(variant=spec.name, seed=seed, phase=tune_phase.value,
                          method="fused_tuned", cls=grid.target_class,
                          value=tuned_report.mean_dsc(METHOD_FUSED, grid.target_class),
                          lambda_fuse=tuned_lam)
            elapsed = time.perf_counter() - t_start
            table.add(variant=spec.name, seed=seed, phase="-", method="train_seconds",
                      cls=-1, value=elapsed)
            write_json(run_dir / "variant_manifest.json", {
                "variant": spec.name, "seed": seed, "fold_hash": fold_hash(folds),
                "translator": spec.translator,
                "effective_lambda": _effective_lambda(cfg),
                "tuned_lambda_fuse": tuned_lam,
                "train_seconds": elapsed,
            })
    table.save(out_dir, "ablation_table")
    return table


def _effective_lambda(cfg: TrainConfig) -> float:
    return 1.0 if cfg.uda else cfg.lambda_joint


# ---------------------------------------------------------------------------
# Mixed-data augmentation control


def _train_pool_model(vols: np.ndarray, masks: np.ndarray, cfg: TrainConfig,
                      num_classes: int, tag: str,
                      phase: Optional[Phase] = None) -> SegModel:
    """Train one segmenter on an explicit image pool for the full budget."""
    model = seg_init(cfg.seg_arch(num_classes), cfg.seed, phase=phase)
    opt = torch.optim.SGD(model.net.parameters(), lr=cfg.lr0, momentum=cfg.momentum)
    src = BatchSource(vols, masks, cfg.seed, tag, model.dtype)
    total = cfg.separate_iters + cfg.joint_iters
    for step in range(total):
        _set_lr(opt, lr_at(step, cfg))
        x, y = src.draw(step, cfg.batch_size)
        opt.zero_grad()
        loss = probs_loss(model.probs(x), y, num_classes, cfg.loss_kind)
        loss.backward()
        opt.step()
    return model


def default_mixed_sizes(n_train: int) -> dict:
    """Per-variant (arterial cases, venous cases) drawn from the train split."""
    return {
        "arterial_only": (n_train, 0),
        "venous_only": (0, n_train),
        "mixed_half": (n_train - n_train // 2, n_train // 2),
        "mixed_all": (n_train, n_train),
    }


def run_mixed_data_baseline(data: Dataset, cfg: TrainConfig, out_dir,
                            seeds=(0, 1, 2), sizes: Optional[dict] = None,
                            k_folds: int = 4, eval_fold: int = 0, fold_seed: int = 0,
                            target_class: int = ORGAN_CLASS,
                            val_fold: Optional[int] = None) -> StudyTable:
    """Single segmenters trained on phase-A only, phase-V only, and two
    mixed pools, each evaluated on both phases. No translators involved.

    val_fold, when given, is excluded from training exactly as in the
    ablation suite, so both studies consume identical training folds."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    folds = split_folds(data, k_folds, seed=fold_seed)
    excluded = {eval_fold} | ({val_fold} if val_fold is not None else set())
    train_ids = sorted(cid for cid, f in folds.assignments.items() if f not in excluded)
    train_set = data.subset(train_ids)
    test_set = data.subset(folds.fold_cases(eval_fold))
    n_train = len(train_set)
    sizes = sizes or default_mixed_sizes(n_train)
    for name, (n_a, n_v) in sizes.items():
        if n_a > n_train or n_v > n_train:
            raise InsufficientDataError(
                f"variant {name} asks for ({n_a}, {n_v}) cases but the train "
                f"split has only {n_train}"
            )
    vols_a, masks_a = _phase_arrays(train_set, Phase.ARTERIAL)
    vols_v, masks_v = _phase_arrays(train_set, Phase.VENOUS)
    num_classes = next(iter(data.cases[0].masks().values())).num_classes
    table = StudyTable(meta={
        "study": "mixed_baseline",
        "fold_hash": fold_hash(folds),
        "seeds": list(seeds),
        "sizes": {k: list(v) for k, v in sizes.items()},
        "train_config": cfg.to_dict(),
        "train_set_images": {k: int(v[0] + v[1]) for k, v in sizes.items()},
    })
    for name, (n_a, n_v) in sizes.items():
        # mixed_half uses disjoint patients per phase so the image total
        # stays comparable to the single-phase pools
        if name == "mixed_half":
            vols = np.concatenate([vols_a[:n_a], vols_v[n_a:n_a + n_v]])
            masks = np.concatenate([masks_a[:n_a], masks_v[n_a:n_a + n_v]])
        else:
            parts_v, parts_m = [], []
            if n_a:
                parts_v.append(vols_a[:n_a])
                parts_m.append(masks_a[:n_a])
            if n_v:
                parts_v.append(vols_v[:n_v])
                parts_m.append(masks_v[:n_v])
            vols = np.concatenate(parts_v)
            masks = np.concatenate(parts_m)
        for seed in seeds:
            import time

            run_cfg = replace(cfg, seed=seed)
            t_start = time.perf_counter()
            model = _train_pool_model(vols, masks, run_cfg, num_classes,
                                      tag=f"mixed-{name}")
            table.add(variant=name, seed=seed, phase="-", method="train_seconds",
                      cls=target_class, value=time.perf_counter() - t_start)
            for phase in (Phase.ARTERIAL, Phase.VENOUS):
                report = evaluate(model, test_set, phase, methods=(METHOD_SINGLE,),
                                  classes=[target_class])
                table.add(variant=name, seed=seed, phase=phase.value,
                          method=METHOD_SINGLE, cls=target_class,
                          value=report.mean_dsc(METHOD_SINGLE, target_class))
    table.save(out_dir, "mixed_baseline_table")
    return table


# ---------------------------------------------------------------------------
# One-phase transfer


def run_onephase_transfer(donor_checkpoint, data: Dataset, cfg: TrainConfig, out_dir,
                          seeds=(0, 1, 2), k_folds: int = 4, eval_fold: int = 0,
                          fold_seed: int = 0, target_class: int = ORGAN_CLASS,
                          val_fold: Optional[int] = None) -> StudyTable:
    """Baseline single-phase segmenter vs the one-phase mode with a frozen
    borrowed translator, on identical folds. data must be single-phase.

    With val_fold set, the fusion weight is tuned on that fold and the
    tuned rows are reported next to the fixed-0.5 ones."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    donor_path = Path(donor_checkpoint)
    if not donor_path.exists():
        raise MissingArtifactError(f"donor checkpoint not found: {donor_path}")
    counts = data.counts
    phases_present = [p for p, n in counts.items() if n > 0]
    if len(phases_present) != 1:
        raise ConfigError(["one-phase transfer expects a single-phase dataset"])
    phase = phases_present[0]
    donor_bundle, _, _ = load_bundle_checkpoint(donor_path)
    frozen_gen = donor_bundle.generator_from(phase)

    folds = split_folds(data, k_folds, seed=fold_seed)
    excluded = {eval_fold} | ({val_fold} if val_fold is not None else set())
    train_ids = sorted(cid for cid, f in folds.assignments.items() if f not in excluded)
    train_set = data.subset(train_ids)
    test_set = data.subset(folds.fold_cases(eval_fold))
    val_set = data.subset(folds.fold_cases(val_fold)) if val_fold is not None else None
    num_classes = next(iter(data.cases[0].masks().values())).num_classes
    vols, masks = _phase_arrays(train_set, phase)
    table = StudyTable(meta={
        "study": "onephase_transfer",
        "phase": phase.value,
        "fold_hash": fold_hash(folds),
        "seeds": list(seeds),
        "val_fold": val_fold,
        "donor": str(donor_path),
        "train_config": cfg.to_dict(),
    })

    def add_stats(variant, seed, method_label, vals, **extra):
        table.add(variant=variant, seed=seed, phase=phase.value,
                  method=method_label, cls=target_class,
                  value=float(np.mean(vals)), **extra)
        table.add(variant=variant, seed=seed, phase=phase.value,
                  method=f"{method_label}_min", cls=target_class,
                  value=float(np.min(vals)), **extra)
        table.add(variant=variant, seed=seed, phase=phase.value,
                  method=f"{method_label}_max", cls=target_class,
                  value=float(np.max(vals)), **extra)

    for seed in seeds:
        run_cfg = replace(cfg, seed=seed)
        baseline = _train_pool_model(vols, masks, run_cfg, num_classes,
                                     tag=f"onephase-baseline-{phase.value}", phase=phase)
        f_native = seg_init(run_cfg.seg_arch(num_classes), seed, phase=phase)
        f_other = seg_init(run_cfg.seg_arch(num_classes),
                           seed + 1, phase=phase.other)
        train_one_phase(f_native, f_other, frozen_gen, train_set, run_cfg)
        base_rep = evaluate(baseline, test_set, phase, methods=(METHOD_SINGLE,),
                            classes=[target_class])
        add_stats("baseline", seed, METHOD_SINGLE,
                  base_rep.values(METHOD_SINGLE, target_class))
        pcn_rep = evaluate(f_native, test_set, phase, f_other=f_other,
                           generator=frozen_gen, methods=(METHOD_FUSED,),
                           classes=[target_class])
        add_stats("pcn_onephase", seed, METHOD_FUSED,
                  pcn_rep.values(METHOD_FUSED, target_class))
        if val_set is not None:
            from .inference import fuse_weight_search

            tuned_lam, _ = fuse_weight_search(f_native, f_other, frozen_gen,
                                              val_set, phase, cls=target_class)
            tuned_rep = evaluate(f_native, test_set, phase, f_other=f_other,
                                 generator=frozen_gen, methods=(METHOD_FUSED,),
                                 lambda_fuse=tuned_lam, classes=[target_class])
            add_stats("pcn_onephase", seed, "fused_tuned",
                      tuned_rep.values(METHOD_FUSED, target_class),
                      lambda_fuse=tuned_lam)
    table.save(out_dir, "onephase_table")
    return table


def run_weak_phase_study(out_dir, seeds=(0, 1, 2), n_cases: int = 16,
                         data_seed: int = 100, preset: str = "weak-arterial",
                         train_cfg: Optional[TrainConfig] = None,
                         include_full_ablation: bool = False) -> dict:
    """The consolidated weak-phase comparison used by the acceptance suite.

    Generates the weak-contrast phantom, trains a label-free donor
    translator on a disjoint seed range, runs the ablation grid and the
    mixed-data baselines on shared folds, and runs the one-phase transfer
    on a fresh single-phase dataset with a donor borrowed from the first
    coupled run. Returns the tables plus timing metadata.
    """
    import time

    from .phantom import generate_dataset, make_preset, weak_phase_of

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = train_cfg or TrainConfig(separate_iters=1000, joint_iters=600,
                                   lambda_joint=0.6)
    phantom_cfg = make_preset(preset)
    weak_phase = weak_phase_of(phantom_cfg)
    data = generate_dataset(phantom_cfg, n_cases, seed=data_seed)

    t0 = time.perf_counter()
    donor_data = generate_dataset(phantom_cfg, max(n_cases // 2, 8),
                                  seed=data_seed + 99000)
    donors = make_donors(donor_data, replace(cfg, seed=max(seeds) + 101),
                         out_dir / "donors", kinds=("cyclegan",))
    donor_time = time.perf_counter() - t0

    variants = [VariantSpec(name="pcn2", translator="coupled"),
                VariantSpec(name="uda1", translator="frozen-uda", donor="cyclegan")]
    if include_full_ablation:
        variants.insert(1, VariantSpec(name="uda2", translator="uda"))
    grid = ExperimentGrid(variants=tuple(variants), seeds=tuple(seeds), preset=preset,
                          n_cases=n_cases, data_seed=data_seed, val_fold=1,
                          target_phase=weak_phase.value, train=cfg)

    t0 = time.perf_counter()
    ablation = run_ablation_suite(grid, data, out_dir / "ablation", donors=donors)
    ablation_time = time.perf_counter() - t0

    t0 = time.perf_counter()
    mixed = run_mixed_data_baseline(data, cfg, out_dir / "mixed", seeds=seeds,
                                    val_fold=1)
    mixed_time = time.perf_counter() - t0

    # one-phase transfer on fresh weak-phase-only data; the donor is the
    # first coupled run's translator, i.e. borrowed from a two-phase corpus
    t0 = time.perf_counter()
    single_data = generate_dataset(phantom_cfg, max(n_cases // 2, 8),
                                   seed=data_seed + 55000).single_phase(weak_phase)
    donor_ckpt = out_dir / "ablation" / f"pcn2_seed{seeds[0]}" / "final.pcnckpt"
    onephase = run_onephase_transfer(donor_ckpt, single_data, cfg,
                                     out_dir / "onephase", seeds=seeds, val_fold=1)
    onephase_time = time.perf_counter() - t0

    return {
        "weak_phase": weak_phase,
        "ablation": ablation,
        "mixed": mixed,
        "onephase": onephase,
        "timing": {"donor": donor_time, "ablation": ablation_time,
                   "mixed": mixed_time, "onephase": onephase_time},
        "config": cfg,
    }
