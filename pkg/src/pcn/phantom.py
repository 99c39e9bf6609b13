"""Synthetic two-phase phantom generator.

Each case starts from one latent anatomy (smooth random blobs, one label
grid). The two phase masks are independent nearest-neighbor warps of that
anatomy under smooth random displacement fields, modelling organ motion
between acquisitions, so the per-phase labels agree only approximately.
Intensities are rendered per class and phase from a configurable table,
with a smooth multiplicative bias field and additive noise, then clamped
to the HU window.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy.ndimage import gaussian_filter

from .core import HU_MAX, HU_MIN, Case, Dataset, LabelMask, Phase, Volume, clamp_hu
from .errors import ConfigError, EmptyRegionError, GenerationError, ShapeMismatchError
from .rng import derive_seed, np_rng

# (mean HU, std HU) per class and phase. The organ class mirrors the
# 50/100 arterial/venous peaks of abdominal soft tissue; the artery-like
# class is brighter in the arterial phase and the vein-like class in the
# venous phase.
DEFAULT_INTENSITY_TABLE = {
    0: {Phase.ARTERIAL: (-60.0, 12.0), Phase.VENOUS: (-60.0, 12.0)},
    1: {Phase.ARTERIAL: (50.0, 12.0), Phase.VENOUS: (100.0, 12.0)},
    2: {Phase.ARTERIAL: (220.0, 12.0), Phase.VENOUS: (90.0, 12.0)},
    3: {Phase.ARTERIAL: (70.0, 12.0), Phase.VENOUS: (180.0, 12.0)},
}

ORGAN_CLASS = 1
ARTERY_CLASS = 2
VEIN_CLASS = 3

# Areas each class may occupy, as fractions of the grid.
AREA_MIN = 0.01
AREA_MAX = 0.30
_MAX_ANATOMY_ATTEMPTS = 25


def _copy_table(table):
    return {c: {p: tuple(ms) for p, ms in by_phase.items()} for c, by_phase in table.items()}


@dataclass(frozen=True)
class PhantomConfig:
    grid_size: int = 64
    num_classes: int = 4
    deformation_magnitude: float = 1.5  # RMS displacement, in cells
    deformation_smoothness: float = 8.0  # gaussian scale of the field, cells
    intensity_table: dict = field(default_factory=lambda: _copy_table(DEFAULT_INTENSITY_TABLE))
    noise_std: float = 10.0
    bias_field_amplitude: float = 20.0  # max HU shift at the top of the window
    seed: int = 0

    def __post_init__(self):
        errors = []
        if self.grid_size < 8:
            errors.append(f"grid_size must be >= 8, got {self.grid_size}")
        if self.num_classes < 2:
            errors.append(f"num_classes must be >= 2, got {self.num_classes}")
        if self.deformation_magnitude < 0:
            errors.append("deformation_magnitude must be >= 0")
        if self.noise_std < 0:
            errors.append("noise_std must be >= 0")
        for c, by_phase in self.intensity_table.items():
            for phase, (mean, std) in by_phase.items():
                if not HU_MIN <= mean <= HU_MAX:
                    errors.append(
                        f"intensity mean for class {c}/{phase.value} is {mean}, "
                        f"outside [{HU_MIN}, {HU_MAX}]"
                    )
                if std < 0:
                    errors.append(f"intensity std for class {c}/{phase.value} is negative")
        if errors:
            raise ConfigError(errors)

    def table_entry(self, cls: int, phase: Phase) -> tuple[float, float]:
        try:
            return self.intensity_table[cls][phase]
        except KeyError:
            raise ConfigError(
                [f"intensity_table has no entry for class {cls}, phase {phase.value}"]
            )

    def to_dict(self) -> dict:
        table = {
            str(c): {p.value: list(ms) for p, ms in by_phase.items()}
            for c, by_phase in self.intensity_table.items()
        }
        return {
            "grid_size": self.grid_size,
            "num_classes": self.num_classes,
            "deformation_magnitude": self.deformation_magnitude,
            "deformation_smoothness": self.deformation_smoothness,
            "intensity_table": table,
            "noise_std": self.noise_std,
            "bias_field_amplitude": self.bias_field_amplitude,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomConfig":
        d = dict(d)
        if "intensity_table" in d:
            table = {}
            for c, by_phase in d["intensity_table"].items():
                table[int(c)] = {Phase(p): tuple(ms) for p, ms in by_phase.items()}
            d["intensity_table"] = table
        return cls(**d)


@dataclass(frozen=True)
class PhantomCase(Case):
    """A generated case that also records its per-phase deformation fields."""

    field_arterial: Optional[np.ndarray] = None
    field_venous: Optional[np.ndarray] = None

    def __post_init__(self):
        super().__post_init__()
        for name in ("field_arterial", "field_venous"):
            f = getattr(self, name)
            if f is None:
                continue
            f = np.ascontiguousarray(f, dtype=np.float32)
            f.flags.writeable = False
            object.__setattr__(self, name, f)


def warp_labels(label_data: np.ndarray, disp: np.ndarray) -> np.ndarray:
    """Nearest-neighbor label warp: out[p] = labels[round(p + disp[p])]."""
    h, w = label_data.shape
    rr, cc = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    src_r = np.clip(np.rint(rr + disp[0]).astype(np.int64), 0, h - 1)
    src_c = np.clip(np.rint(cc + disp[1]).astype(np.int64), 0, w - 1)
    return label_data[src_r, src_c]


def sample_anatomy(cfg: PhantomConfig, seed: int) -> LabelMask:
    """Draw a latent anatomy of smooth blobs, one per non-background class.

    Classes are painted in ascending order, later classes overwriting
    earlier ones, and each class must end up covering 1..30% of the grid.
    """
    n = cfg.grid_size
    blob_scale = n / 8.0
    for attempt in range(_MAX_ANATOMY_ATTEMPTS):
        rng = np_rng(seed, "anatomy", attempt)
        grid = np.zeros((n, n), dtype=np.uint8)
        for cls in range(1, cfg.num_classes):
            # The first foreground class is the large organ, the rest are
            # smaller vessel-like structures.
            if cls == 1:
                frac = rng.uniform(0.10, 0.20)
            else:
                frac = rng.uniform(0.03, 0.08)
            noise = gaussian_filter(rng.standard_normal((n, n)), blob_scale)
            thresh = np.quantile(noise, 1.0 - frac)
            grid[noise >= thresh] = cls
        areas = np.bincount(grid.ravel(), minlength=cfg.num_classes) / grid.size
        if all(AREA_MIN <= areas[c] <= AREA_MAX for c in range(1, cfg.num_classes)):
            return LabelMask(data=grid, num_classes=cfg.num_classes, phase=None)
    raise GenerationError(
        f"could not satisfy class-area constraints in {_MAX_ANATOMY_ATTEMPTS} attempts"
    )


def deform_labels(y_star: LabelMask, sigma: float, seed: int,
                  smoothness: float = 8.0) -> tuple[LabelMask, np.ndarray]:
    """Warp a label grid under a smooth random displacement field.

    The field's RMS displacement magnitude is normalized to exactly sigma
    cells. sigma=0 returns the input unchanged with a zero field.
    """
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    h, w = y_star.shape
    if sigma == 0:
        zero = np.zeros((2, h, w), dtype=np.float32)
        return LabelMask(data=y_star.data, num_classes=y_star.num_classes,
                         phase=y_star.phase), zero
    rng = np_rng(seed, "deform")
    disp = np.stack([
        gaussian_filter(rng.standard_normal((h, w)), smoothness),
        gaussian_filter(rng.standard_normal((h, w)), smoothness),
    ])
    rms = math.sqrt(float(np.mean(disp[0] ** 2 + disp[1] ** 2)))
    disp = (disp * (sigma / rms)).astype(np.float32)
    warped = warp_labels(y_star.data, disp)
    return LabelMask(data=warped, num_classes=y_star.num_classes, phase=y_star.phase), disp


def render_phase(y: LabelMask, phase: Phase, cfg: PhantomConfig, seed: int,
                 case_id: str = "") -> Volume:
    """Render a label grid into a clamped HU image for one phase.

    Per-pixel intensity is drawn from the class's (mean, std) for that
    phase, shifted by a smooth multiplicative bias field (zero-mean, up to
    +-bias_field_amplitude HU at the top of the window) plus iid noise.
    """
    h, w = y.shape
    means = np.empty(cfg.num_classes)
    stds = np.empty(cfg.num_classes)
    for cls in range(cfg.num_classes):
        means[cls], stds[cls] = cfg.table_entry(cls, phase)
    rng = np_rng(seed, "render", phase.value)
    img = means[y.data] + stds[y.data] * rng.standard_normal((h, w))
    if cfg.bias_field_amplitude > 0:
        u = gaussian_filter(rng.standard_normal((h, w)), h / 4.0)
        u /= max(float(np.abs(u).max()), 1e-12)
        img = img + u * cfg.bias_field_amplitude * (img - HU_MIN) / (HU_MAX - HU_MIN)
    if cfg.noise_std > 0:
        img = img + cfg.noise_std * rng.standard_normal((h, w))
    vol = Volume(data=img.astype(np.float32), phase=phase, case_id=case_id)
    return clamp_hu(vol)


def generate_dataset(cfg: PhantomConfig, n_cases: int, seed: int) -> Dataset:
    """Generate n paired two-phase cases, deterministically per seed."""
    if n_cases < 1:
        raise ValueError(f"n_cases must be >= 1, got {n_cases}")
    cases = []
    for i in range(n_cases):
        case_seed = derive_seed(seed, "case", i)
        case_id = f"case_{i:04d}"
        y_star = sample_anatomy(cfg, derive_seed(case_seed, "anatomy"))
        masks = {}
        fields = {}
        vols = {}
        for phase in (Phase.ARTERIAL, Phase.VENOUS):
            warped, disp = deform_labels(
                y_star, cfg.deformation_magnitude,
                derive_seed(case_seed, "motion", phase.value),
                smoothness=cfg.deformation_smoothness,
            )
            masks[phase] = LabelMask(data=warped.data, num_classes=cfg.num_classes, phase=phase)
            fields[phase] = disp
            vols[phase] = render_phase(masks[phase], phase, cfg,
                                       derive_seed(case_seed, "texture"), case_id=case_id)
        cases.append(PhantomCase(
            case_id=case_id,
            arterial=(vols[Phase.ARTERIAL], masks[Phase.ARTERIAL]),
            venous=(vols[Phase.VENOUS], masks[Phase.VENOUS]),
            latent_label=y_star,
            field_arterial=fields[Phase.ARTERIAL],
            field_venous=fields[Phase.VENOUS],
        ))
    return Dataset(cases=tuple(cases), provenance="phantom")


# ---------------------------------------------------------------------------
# Presets


def _weak_table(weak_phase: Phase) -> dict:
    """Suppress organ contrast in one phase: the organ's mean drops to the
    background mean and only a texture (variance) cue remains."""
    table = _copy_table(DEFAULT_INTENSITY_TABLE)
    bg_mean, _ = table[0][weak_phase]
    table[ORGAN_CLASS][weak_phase] = (bg_mean, 45.0)
    return table


def make_preset(name: str, seed: int = 0) -> PhantomConfig:
    presets = {
        "default": lambda: PhantomConfig(seed=seed),
        "normal": lambda: PhantomConfig(deformation_magnitude=1.0, seed=seed),
        "abnormal": lambda: PhantomConfig(deformation_magnitude=2.5, seed=seed),
        "weak-arterial": lambda: PhantomConfig(
            intensity_table=_weak_table(Phase.ARTERIAL), noise_std=6.0, seed=seed),
        "weak-venous": lambda: PhantomConfig(
            intensity_table=_weak_table(Phase.VENOUS), noise_std=6.0, seed=seed),
    }
    if name not in presets:
        raise ConfigError([f"unknown phantom preset '{name}'; choose from {sorted(presets)}"])
    return presets[name]()


PRESET_NAMES = ("default", "normal", "abnormal", "weak-arterial", "weak-venous")


# ---------------------------------------------------------------------------
# Intensity statistics


@dataclass(frozen=True)
class Histogram:
    bin_edges: np.ndarray
    freqs: np.ndarray

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.bin_edges[:-1] + self.bin_edges[1:])

    def mode_center(self) -> float:
        return float(self.centers[int(np.argmax(self.freqs))])


def intensity_histogram(v: Volume, mask, bins: int = 40,
                        hu_range: tuple[float, float] = (HU_MIN, HU_MAX)) -> Histogram:
    """Normalized histogram of a volume's intensities under a binary mask."""
    if bins < 2:
        raise ValueError(f"bins must be >= 2, got {bins}")
    if isinstance(mask, LabelMask):
        raise ValueError("pass a binary mask, e.g. LabelMask.class_mask(c)")
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != v.shape:
        raise ShapeMismatchError(f"mask shape {mask.shape} != volume shape {v.shape}")
    values = v.data[mask]
    if values.size == 0:
        raise EmptyRegionError("mask selects no cells")
    lo, hi = hu_range
    values = np.clip(values, lo, hi)
    counts, edges = np.histogram(values, bins=bins, range=(lo, hi))
    return Histogram(bin_edges=edges, freqs=counts / values.size)


def _entropy_bits(counts: np.ndarray) -> float:
    p = counts[counts > 0].astype(np.float64)
    p /= p.sum()
    return float(-(p * np.log2(p)).sum())


def entropy_report(x_a: Volume, x_v: Volume, bins: int = 8) -> tuple[float, float, float]:
    """Plug-in Shannon entropies (bits) of the discretized intensity
    distributions: joint over per-cell pairs, plus both marginals."""
    if bins < 2:
        raise ValueError(f"bins must be >= 2, got {bins}")
    if x_a.shape != x_v.shape:
        raise ShapeMismatchError(f"volume shapes differ: {x_a.shape} vs {x_v.shape}")
    span = HU_MAX - HU_MIN

    def digitize(v):
        idx = np.floor((v.data.astype(np.float64) - HU_MIN) / span * bins).astype(np.int64)
        return np.clip(idx, 0, bins - 1).ravel()

    ia, iv = digitize(x_a), digitize(x_v)
    joint = np.bincount(ia * bins + iv, minlength=bins * bins)
    h_joint = _entropy_bits(joint)
    h_a = _entropy_bits(np.bincount(ia, minlength=bins))
    h_v = _entropy_bits(np.bincount(iv, minlength=bins))
    return h_joint, h_a, h_v


def weak_phase_of(cfg: PhantomConfig) -> Optional[Phase]:
    """Which phase, if any, has the organ's mean pinned to background."""
    for phase in (Phase.ARTERIAL, Phase.VENOUS):
        organ_mean, _ = cfg.table_entry(ORGAN_CLASS, phase)
        bg_mean, _ = cfg.table_entry(0, phase)
        if organ_mean == bg_mean:
            return phase
    return None
