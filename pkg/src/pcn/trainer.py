"""Two-stage optimization schedule, checkpointing, and the one-phase mode.

Stage one trains the segmenters on real data only and the translation
pair as a CycleGAN on unpaired draws. Stage two couples everything under
the joint objective. Batch selection is driven by stateless streams keyed
on (seed, stream name, global step), so a joint stage consumes exactly
the batches a longer separate stage would have seen, and reruns with the
same seed are bit-identical.

Segmenters use SGD with momentum 0.9; generators and discriminators use
Adam(0.5, 0.999), matching how such translation pairs are normally
trained. Both learning rates follow the same staircase decay.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .bundle import STAGE_INIT, STAGE_JOINT, STAGE_SEPARATE, ModelBundle, bundle_init
from .core import Dataset, Phase
from .errors import (
    ConfigError,
    InsufficientDataError,
    PhaseMismatchError,
    StageOrderError,
)
from .networks import hu_to_unit
from .objective import LossBreakdown, compute_pcn_loss
from .rng import (
    deterministic_mode_requested,
    enter_deterministic_mode,
    np_rng,
)
from .segmenter import SegArch, SegModel, probs_loss
from .storage import load_checkpoint, save_checkpoint
from .translator import DiscArch, GenArch, Generator, adversarial_distance

MODE_TWO_PHASE = "two_phase"
MODE_ONE_PHASE = "one_phase"


@dataclass(frozen=True)
class TrainConfig:
    separate_iters: int = 2000
    joint_iters: int = 1000
    lr0: float = 1e-3
    gan_lr0: float = 2e-4
    lr_decay_factor: float = 0.8
    lr_decay_every: int = 500
    lambda_joint: float = 0.8
    lambda_cycle: float = 10.0
    batch_size: int = 4
    gan_batch_size: int = 1
    seed: int = 0
    deterministic: bool = False
    mode: str = MODE_TWO_PHASE
    loss_kind: str = "l1"
    momentum: float = 0.9
    seg_depth: int = 3
    seg_base_width: int = 16
    gen_res_blocks: int = 3
    gen_base_width: int = 8
    disc_base_width: int = 16
    checkpoint_every: int = 500
    translator_frozen: bool = False
    uda: bool = False
    allow_stage_skip: bool = False
    donor_checkpoint: Optional[str] = None

    def __post_init__(self):
        errors = []
        if self.separate_iters < 0:
            errors.append(f"separate_iters must be >= 0, got {self.separate_iters}")
        if self.joint_iters < 0:
            errors.append(f"joint_iters must be >= 0, got {self.joint_iters}")
        if self.lr0 <= 0:
            errors.append(f"lr0 must be > 0, got {self.lr0}")
        if self.gan_lr0 <= 0:
            errors.append(f"gan_lr0 must be > 0, got {self.gan_lr0}")
        if not 0.0 < self.lambda_joint <= 1.0:
            errors.append(f"lambda_joint must lie in (0, 1], got {self.lambda_joint}")
        if self.lambda_cycle < 0:
            errors.append(f"lambda_cycle must be >= 0, got {self.lambda_cycle}")
        if self.batch_size < 1:
            errors.append(f"batch_size must be >= 1, got {self.batch_size}")
        if self.gan_batch_size < 1:
            errors.append(f"gan_batch_size must be >= 1, got {self.gan_batch_size}")
        if self.lr_decay_every < 1:
            errors.append(f"lr_decay_every must be >= 1, got {self.lr_decay_every}")
        if not 0.0 < self.lr_decay_factor <= 1.0:
            errors.append(f"lr_decay_factor must lie in (0, 1], got {self.lr_decay_factor}")
        if self.mode not in (MODE_TWO_PHASE, MODE_ONE_PHASE):
            errors.append(f"mode must be two_phase or one_phase, got '{self.mode}'")
        if self.loss_kind not in ("l1", "softdice"):
            errors.append(f"loss_kind must be l1 or softdice, got '{self.loss_kind}'")
        if errors:
            raise ConfigError(errors)

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)

    def seg_arch(self, num_classes: int) -> SegArch:
        return SegArch(depth=self.seg_depth, base_width=self.seg_base_width,
                       num_classes=num_classes)

    def gen_arch(self) -> GenArch:
        return GenArch(num_res_blocks=self.gen_res_blocks, base_width=self.gen_base_width)

    def disc_arch(self) -> DiscArch:
        return DiscArch(base_width=self.disc_base_width)


def config_hash(cfg: TrainConfig) -> str:
    blob = json.dumps(cfg.to_dict(), sort_keys=True).encode()
    import hashlib

    return hashlib.sha256(blob).hexdigest()[:16]


def lr_at(iteration: int, cfg: TrainConfig, base: Optional[float] = None) -> float:
    """Staircase decay: base * factor ** floor(iteration / every)."""
    if iteration < 0:
        raise ValueError(f"iteration must be >= 0, got {iteration}")
    if base is None:
        base = cfg.lr0
    return base * cfg.lr_decay_factor ** (iteration // cfg.lr_decay_every)


def _maybe_deterministic(cfg: TrainConfig) -> None:
    if cfg.deterministic or deterministic_mode_requested():
        enter_deterministic_mode()


# ---------------------------------------------------------------------------
# Batch drawing


def _phase_arrays(data: Dataset, phase: Phase):
    """Stacked (volumes, labels) for every case carrying this phase."""
    vols, masks = [], []
    for c in data.cases:
        if c.has_phase(phase):
            vol, mask = c.phase_pair(phase)
            vols.append(vol.data)
            masks.append(mask.data)
    if not vols:
        raise InsufficientDataError(f"dataset has no {phase.value} cases")
    return np.stack(vols), np.stack(masks)


class BatchSource:
    """Deterministic with-replacement batch drawing from an image pool.

    Draw i of stream `tag` depends only on (seed, tag, i), never on data
    content, so e.g. arterial batches are unchanged when venous volumes
    are edited.
    """

    def __init__(self, vols: np.ndarray, masks: np.ndarray, seed: int, tag: str,
                 dtype: torch.dtype):
        self.x = hu_to_unit(torch.from_numpy(np.ascontiguousarray(vols)).to(dtype)).unsqueeze(1)
        self.y = torch.from_numpy(np.ascontiguousarray(masks)).long()
        self.n = self.x.shape[0]
        self.seed = seed
        self.tag = tag

    @classmethod
    def from_dataset(cls, data: Dataset, phase: Phase, seed: int, tag: str,
                     dtype: torch.dtype) -> "BatchSource":
        vols, masks = _phase_arrays(data, phase)
        return cls(vols, masks, seed, tag, dtype)

    def draw(self, index: int, size: int) -> tuple[torch.Tensor, torch.Tensor]:
        idx = np_rng(self.seed, self.tag, index).integers(0, self.n, size=size)
        idx = torch.from_numpy(idx)
        return self.x[idx], self.y[idx]


# ---------------------------------------------------------------------------
# Loss logging


LOG_COLUMNS = ["iteration", "stage", "lam", "lr", "seg_real_a", "seg_real_v",
               "adv_a2v", "adv_v2a", "seg_gen_a", "seg_gen_v", "cycle",
               "disc_a", "disc_v", "total"]


class LossLogger:
    def __init__(self, path=None):
        self.path = Path(path) if path else None
        self.rows: list[dict] = []
        if self.path is not None and not self.path.exists():
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "w", newline="") as f:
                csv.writer(f).writerow(LOG_COLUMNS)

    def log(self, iteration: int, stage: str, lr: float, breakdown: LossBreakdown) -> None:
        row = {"iteration": iteration, "stage": stage, "lam": breakdown.lam, "lr": lr}
        row.update(breakdown.as_dict())
        del row["lam_cyc"]
        self.rows.append(row)
        if self.path is not None:
            with open(self.path, "a", newline="") as f:
                csv.writer(f).writerow([row[c] for c in LOG_COLUMNS])

    def column(self, name: str, stage: Optional[str] = None) -> list[float]:
        return [r[name] for r in self.rows if stage is None or r["stage"] == stage]


# ---------------------------------------------------------------------------
# Optimizers


def _ensure_optimizers(bundle: ModelBundle, cfg: TrainConfig) -> None:
    if bundle.optimizers:
        return
    bundle.optimizers = {
        "f_a": torch.optim.SGD(bundle.f_a.net.parameters(), lr=cfg.lr0,
                               momentum=cfg.momentum),
        "f_v": torch.optim.SGD(bundle.f_v.net.parameters(), lr=cfg.lr0,
                               momentum=cfg.momentum),
        "gen": torch.optim.Adam(
            list(bundle.g_av.net.parameters()) + list(bundle.g_va.net.parameters()),
            lr=cfg.gan_lr0, betas=(0.5, 0.999)),
        "disc": torch.optim.Adam(
            list(bundle.d_a.net.parameters()) + list(bundle.d_v.net.parameters()),
            lr=cfg.gan_lr0, betas=(0.5, 0.999)),
    }


def _set_lr(opt: torch.optim.Optimizer, lr: float) -> None:
    for group in opt.param_groups:
        group["lr"] = lr


# ---------------------------------------------------------------------------
# Training stages


def train_separate(bundle: ModelBundle, data: Dataset, cfg: TrainConfig,
                   log: Optional[LossLogger] = None,
                   checkpoint_dir=None) -> ModelBundle:
    """Stage one: segmenters on real pairs, translators as a CycleGAN."""
    _maybe_deterministic(cfg)
    if len(data) == 0:
        raise InsufficientDataError("training dataset is empty")
    if bundle.stage not in (STAGE_INIT, STAGE_SEPARATE) and not cfg.allow_stage_skip:
        raise StageOrderError(f"separate stage cannot follow stage '{bundle.stage}'")
    _ensure_optimizers(bundle, cfg)
    dtype = bundle.f_a.dtype
    src_a = BatchSource.from_dataset(data, Phase.ARTERIAL, cfg.seed, "seg-arterial", dtype)
    src_v = BatchSource.from_dataset(data, Phase.VENOUS, cfg.seed, "seg-venous", dtype)
    gan_a = BatchSource.from_dataset(data, Phase.ARTERIAL, cfg.seed, "gan-arterial", dtype)
    gan_v = BatchSource.from_dataset(data, Phase.VENOUS, cfg.seed, "gan-venous", dtype)
    opts = bundle.optimizers

    for _ in range(cfg.separate_iters):
        step = bundle.seg_steps
        lr = lr_at(step, cfg)
        x_a, y_a = src_a.draw(step, cfg.batch_size)
        x_v, y_v = src_v.draw(step, cfg.batch_size)

        _set_lr(opts["f_a"], lr)
        opts["f_a"].zero_grad()
        loss_a = probs_loss(bundle.f_a.probs(x_a), y_a, bundle.num_classes, cfg.loss_kind)
        loss_a.backward()
        opts["f_a"].step()

        _set_lr(opts["f_v"], lr)
        opts["f_v"].zero_grad()
        loss_v = probs_loss(bundle.f_v.probs(x_v), y_v, bundle.num_classes, cfg.loss_kind)
        loss_v.backward()
        opts["f_v"].step()

        if cfg.translator_frozen:
            adv = {"adv_a2v": 0.0, "adv_v2a": 0.0, "cycle": 0.0,
                   "disc_a": 0.0, "disc_v": 0.0}
        else:
            adv = _cyclegan_step(bundle, cfg, gan_a, gan_v)

        if log is not None:
            breakdown = LossBreakdown(
                seg_real_a=loss_a.item(), seg_real_v=loss_v.item(),
                seg_gen_a=0.0, seg_gen_v=0.0, lam=1.0, lam_cyc=cfg.lambda_cycle,
                **adv)
            log.log(step, STAGE_SEPARATE, lr, breakdown)

        bundle.seg_steps += 1
        if checkpoint_dir is not None and bundle.seg_steps % cfg.checkpoint_every == 0:
            save_bundle_checkpoint(
                Path(checkpoint_dir) / f"ckpt_{bundle.seg_steps:06d}.pcnckpt",
                bundle, cfg)
    bundle.stage = STAGE_SEPARATE
    return bundle


def _cyclegan_step(bundle: ModelBundle, cfg: TrainConfig, gan_a: BatchSource,
                   gan_v: BatchSource) -> dict:
    """One unpaired adversarial + cycle update of both directions."""
    opts = bundle.optimizers
    step = bundle.gan_steps
    glr = lr_at(step, cfg, base=cfg.gan_lr0)
    x_a, _ = gan_a.draw(step, cfg.gan_batch_size)
    x_v, _ = gan_v.draw(step, cfg.gan_batch_size)

    fake_v = bundle.g_av.fake(x_a)
    fake_a = bundle.g_va.fake(x_v)
    gen_a2v, disc_v = adversarial_distance(bundle.d_v, fake_v, x_v)
    gen_v2a, disc_a = adversarial_distance(bundle.d_a, fake_a, x_a)
    cyc = ((bundle.g_va.fake(fake_v) - x_a).abs().mean()
           + (bundle.g_av.fake(fake_a) - x_v).abs().mean())
    gen_loss = gen_a2v + gen_v2a + cfg.lambda_cycle * cyc

    _set_lr(opts["gen"], glr)
    opts["gen"].zero_grad()
    gen_loss.backward()
    opts["gen"].step()

    _set_lr(opts["disc"], glr)
    opts["disc"].zero_grad()
    (disc_a + disc_v).backward()
    opts["disc"].step()

    bundle.gan_steps += 1
    return {"adv_a2v": gen_a2v.item(), "adv_v2a": gen_v2a.item(), "cycle": cyc.item(),
            "disc_a": disc_a.item(), "disc_v": disc_v.item()}


def train_joint(bundle: ModelBundle, data: Dataset, cfg: TrainConfig,
                log: Optional[LossLogger] = None,
                checkpoint_dir=None) -> ModelBundle:
    """Stage two: alternating seg+generator step, then discriminator step."""
    _maybe_deterministic(cfg)
    if len(data) == 0:
        raise InsufficientDataError("training dataset is empty")
    if bundle.stage not in (STAGE_SEPARATE, STAGE_JOINT) and not cfg.allow_stage_skip:
        raise StageOrderError(
            "joint stage requires a separately trained bundle "
            f"(stage is '{bundle.stage}'); without the warm start the coupled "
            "objective is unstable"
        )
    _ensure_optimizers(bundle, cfg)
    dtype = bundle.f_a.dtype
    src_a = BatchSource.from_dataset(data, Phase.ARTERIAL, cfg.seed, "seg-arterial", dtype)
    src_v = BatchSource.from_dataset(data, Phase.VENOUS, cfg.seed, "seg-venous", dtype)
    opts = bundle.optimizers
    lam = 1.0 if cfg.uda else cfg.lambda_joint

    for _ in range(cfg.joint_iters):
        step = bundle.seg_steps
        lr = lr_at(step, cfg)
        x_a, y_a = src_a.draw(step, cfg.batch_size)
        x_v, y_v = src_v.draw(step, cfg.batch_size)
        out = compute_pcn_loss(bundle, (x_a, y_a), (x_v, y_v), lam,
                               lam_cyc=cfg.lambda_cycle, loss_kind=cfg.loss_kind,
                               translator_frozen=cfg.translator_frozen)

        _set_lr(opts["f_a"], lr)
        _set_lr(opts["f_v"], lr)
        opts["f_a"].zero_grad()
        opts["f_v"].zero_grad()
        if not cfg.translator_frozen:
            _set_lr(opts["gen"], lr_at(bundle.gan_steps, cfg, base=cfg.gan_lr0))
            opts["gen"].zero_grad()
        out.gen_total.backward()
        opts["f_a"].step()
        opts["f_v"].step()
        if not cfg.translator_frozen:
            opts["gen"].step()
            _set_lr(opts["disc"], lr_at(bundle.gan_steps, cfg, base=cfg.gan_lr0))
            opts["disc"].zero_grad()
            out.disc_total.backward()
            opts["disc"].step()
            bundle.gan_steps += 1

        if log is not None:
            log.log(step, STAGE_JOINT, lr, out.breakdown)
        bundle.seg_steps += 1
        if checkpoint_dir is not None and bundle.seg_steps % cfg.checkpoint_every == 0:
            save_bundle_checkpoint(
                Path(checkpoint_dir) / f"ckpt_{bundle.seg_steps:06d}.pcnckpt",
                bundle, cfg)
    bundle.stage = STAGE_JOINT
    return bundle


def train_one_phase(f_native: SegModel, f_other: SegModel, frozen_gen: Generator,
                    data: Dataset, cfg: TrainConfig,
                    log: Optional[LossLogger] = None) -> tuple[SegModel, SegModel]:
    """Single-phase mode with a borrowed, frozen translator.

    The native segmenter trains on real pairs; the other-phase segmenter
    trains on translations of the same images, which carry their source
    labels. Runs separate_iters + joint_iters steps so the budget matches
    a two-phase run. The generator is never mutated (verified).
    """
    _maybe_deterministic(cfg)
    if len(data) == 0:
        raise InsufficientDataError("training dataset is empty")
    phase = frozen_gen.source
    for case in data.cases:
        if not case.has_phase(phase):
            raise PhaseMismatchError(
                f"case {case.case_id} lacks the {phase.value} phase the donor "
                "translator consumes"
            )
    if f_native.phase is not None and f_native.phase is not phase:
        raise PhaseMismatchError("native segmenter phase does not match the data")
    if f_other.phase is not None and f_other.phase is not frozen_gen.target:
        raise PhaseMismatchError("other segmenter phase does not match the donor target")

    gen_before = frozen_gen.params().clone()
    dtype = f_native.dtype
    src = BatchSource.from_dataset(data, phase, cfg.seed, f"onephase-{phase.value}", dtype)
    opt_native = torch.optim.SGD(f_native.net.parameters(), lr=cfg.lr0,
                                 momentum=cfg.momentum)
    opt_other = torch.optim.SGD(f_other.net.parameters(), lr=cfg.lr0,
                                momentum=cfg.momentum)
    total_iters = cfg.separate_iters + cfg.joint_iters
    C = f_native.arch.num_classes
    for step in range(total_iters):
        lr = lr_at(step, cfg)
        x, y = src.draw(step, cfg.batch_size)
        _set_lr(opt_native, lr)
        opt_native.zero_grad()
        loss_native = probs_loss(f_native.probs(x), y, C, cfg.loss_kind)
        loss_native.backward()
        opt_native.step()

        with torch.no_grad():
            fake = frozen_gen.fake(x)
        _set_lr(opt_other, lr)
        opt_other.zero_grad()
        loss_other = probs_loss(f_other.probs(fake), y, C, cfg.loss_kind)
        loss_other.backward()
        opt_other.step()

        if log is not None:
            breakdown = LossBreakdown(
                seg_real_a=loss_native.item(), seg_real_v=0.0,
                adv_a2v=0.0, adv_v2a=0.0,
                seg_gen_a=0.0, seg_gen_v=loss_other.item(), cycle=0.0,
                disc_a=0.0, disc_v=0.0, lam=cfg.lambda_joint, lam_cyc=0.0)
            log.log(step, "one_phase", lr, breakdown)

    if not torch.equal(gen_before, frozen_gen.params()):
        raise RuntimeError("frozen generator parameters changed during one-phase training")
    return f_native, f_other


# ---------------------------------------------------------------------------
# Bundle checkpoints


_MODEL_ORDER = ("f_a", "f_v", "g_av", "g_va", "d_a", "d_v")


def save_bundle_checkpoint(path, bundle: ModelBundle, cfg: TrainConfig) -> None:
    models = []
    blocks = []
    for name in _MODEL_ORDER:
        m = bundle.named_models()[name]
        entry = {"name": name, "param_count": m.param_count}
        if name.startswith("f"):
            entry.update(kind="seg", arch=m.arch.to_dict(),
                         phase=m.phase.value if m.phase else None)
        elif name.startswith("g"):
            entry.update(kind="gen", arch=m.arch.to_dict(),
                         direction=[m.source.value, m.target.value])
        else:
            entry.update(kind="disc", arch=m.arch.to_dict(), phase=m.phase.value)
        models.append(entry)
        blocks.append(m.params().to(torch.float64).numpy())
    header = {
        "format": "pcn-bundle-v1",
        "models": models,
        "iteration": bundle.seg_steps,
        "gan_steps": bundle.gan_steps,
        "stage": bundle.stage,
        "seed": bundle.seed,
        "config_hash": config_hash(cfg),
        "dtype": str(bundle.f_a.dtype).replace("torch.", ""),
    }
    save_checkpoint(path, header, blocks)


def load_bundle_checkpoint(path, expected_config_hash: Optional[str] = None):
    """Rebuild a bundle from disk. Returns (bundle, header, warnings)."""
    from .segmenter import seg_init
    from .translator import disc_init, gen_init

    header, blocks = load_checkpoint(path)
    warnings = []
    if expected_config_hash is not None and header.get("config_hash") != expected_config_hash:
        warnings.append(
            f"checkpoint config hash {header.get('config_hash')} does not match "
            f"current config {expected_config_hash}; resuming anyway"
        )
    dtype = getattr(torch, header.get("dtype", "float32"))
    built = {}
    for entry, block in zip(header["models"], blocks):
        if entry["kind"] == "seg":
            m = seg_init(SegArch.from_dict(entry["arch"]), 0, dtype=dtype,
                         phase=Phase(entry["phase"]) if entry.get("phase") else None)
        elif entry["kind"] == "gen":
            direction = tuple(Phase(p) for p in entry["direction"])
            m = gen_init(GenArch.from_dict(entry["arch"]), direction, 0, dtype=dtype)
        else:
            m = disc_init(DiscArch.from_dict(entry["arch"]), Phase(entry["phase"]), 0,
                          dtype=dtype)
        m.set_params(torch.from_numpy(block))
        built[entry["name"]] = m
    bundle = ModelBundle(f_a=built["f_a"], f_v=built["f_v"], g_av=built["g_av"],
                         g_va=built["g_va"], d_a=built["d_a"], d_v=built["d_v"],
                         seed=header.get("seed", 0))
    bundle.stage = header.get("stage", STAGE_INIT)
    bundle.seg_steps = header.get("iteration", 0)
    bundle.gan_steps = header.get("gan_steps", 0)
    return bundle, header, warnings


def run_training(data: Dataset, cfg: TrainConfig, out_dir) -> ModelBundle:
    """Full two-stage run writing logs and checkpoints into out_dir."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    num_classes = next(iter(data.cases[0].masks().values())).num_classes
    bundle = bundle_init(cfg.seed, num_classes=num_classes, seg_arch=cfg.seg_arch(num_classes),
                         gen_arch=cfg.gen_arch(), disc_arch=cfg.disc_arch())
    if cfg.donor_checkpoint:
        donor, _, _ = load_bundle_checkpoint(cfg.donor_checkpoint)
        bundle.g_av.set_params(donor.g_av.params())
        bundle.g_va.set_params(donor.g_va.params())
        bundle.d_a.set_params(donor.d_a.params())
        bundle.d_v.set_params(donor.d_v.params())
    log = LossLogger(out_dir / "loss_log.csv")
    ckpt_dir = out_dir / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)
    train_separate(bundle, data, cfg, log=log, checkpoint_dir=ckpt_dir)
    train_joint(bundle, data, cfg, log=log, checkpoint_dir=ckpt_dir)
    save_bundle_checkpoint(out_dir / "final.pcnckpt", bundle, cfg)
    return bundle
