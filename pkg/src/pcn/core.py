"""Core data model: phases, volumes, label masks, cases, datasets, folds.

All types are frozen after construction and their arrays are marked
read-only, so they can be shared freely across workers. Intensities are in
Hounsfield units and live inside the clamp window [-125, 275] HU.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np

from .errors import (
    InsufficientDataError,
    InvalidRangeError,
    ShapeMismatchError,
)

HU_MIN = -125.0
HU_MAX = 275.0
MIN_GRID = 8


class Phase(str, Enum):
    ARTERIAL = "arterial"
    VENOUS = "venous"

    @property
    def other(self) -> "Phase":
        return Phase.VENOUS if self is Phase.ARTERIAL else Phase.ARTERIAL


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.flags.writeable = False
    return arr


def _check_grid(data: np.ndarray, what: str) -> None:
    if data.ndim != 2:
        raise ShapeMismatchError(f"{what} must be a 2D grid, got shape {data.shape}")
    h, w = data.shape
    if h < MIN_GRID or w < MIN_GRID:
        raise ShapeMismatchError(f"{what} must be at least {MIN_GRID}x{MIN_GRID}, got {h}x{w}")


@dataclass(frozen=True)
class Volume:
    """A 2D intensity grid in HU with a phase tag."""

    data: np.ndarray
    phase: Phase
    case_id: str
    spacing: Optional[tuple[float, float]] = None

    def __post_init__(self):
        data = _freeze(np.asarray(self.data, dtype=np.float32))
        _check_grid(data, "Volume")
        object.__setattr__(self, "data", data)

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape


@dataclass(frozen=True)
class LabelMask:
    """Integer class mask with values in {0..num_classes-1}, 0 = background.

    phase=None marks the latent anatomy a phantom case is built from.
    """

    data: np.ndarray
    num_classes: int
    phase: Optional[Phase] = None

    def __post_init__(self):
        data = np.asarray(self.data)
        if not np.issubdtype(data.dtype, np.integer):
            if not np.all(data == np.round(data)):
                raise ValueError("LabelMask data must be integer-valued")
        data = _freeze(data.astype(np.uint8))
        _check_grid(data, "LabelMask")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if data.max(initial=0) >= self.num_classes:
            raise ValueError(
                f"mask values must lie in [0, {self.num_classes - 1}], got max {data.max()}"
            )
        object.__setattr__(self, "data", data)

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def class_mask(self, c: int) -> np.ndarray:
        """Binary view of one class."""
        if not 0 <= c < self.num_classes:
            raise ValueError(f"class {c} out of range [0, {self.num_classes - 1}]")
        return self.data == c


@dataclass(frozen=True)
class Case:
    """One patient: per-phase (volume, mask) pairs sharing a case_id.

    Phantom cases also carry the latent label they were deformed from.
    External single-phase data leaves the missing side as None.
    """

    case_id: str
    arterial: Optional[tuple[Volume, LabelMask]] = None
    venous: Optional[tuple[Volume, LabelMask]] = None
    latent_label: Optional[LabelMask] = None

    def __post_init__(self):
        if self.arterial is None and self.venous is None:
            raise ValueError("Case must carry at least one phase")
        for attr, phase in ((self.arterial, Phase.ARTERIAL), (self.venous, Phase.VENOUS)):
            if attr is None:
                continue
            vol, mask = attr
            if vol.phase is not phase:
                raise ValueError(f"{phase.value} slot holds a {vol.phase.value} volume")
            if vol.case_id != self.case_id:
                raise ValueError("volume case_id does not match case")
            if vol.shape != mask.shape:
                raise ShapeMismatchError("volume and mask shapes differ within a case")
        num_cs = {m.num_classes for m in self.masks().values()}
        if self.latent_label is not None:
            num_cs.add(self.latent_label.num_classes)
        if len(num_cs) > 1:
            raise ValueError("all masks of a case must share num_classes")

    def phase_pair(self, phase: Phase) -> tuple[Volume, LabelMask]:
        pair = self.arterial if phase is Phase.ARTERIAL else self.venous
        if pair is None:
            raise ValueError(f"case {self.case_id} has no {phase.value} data")
        return pair

    def has_phase(self, phase: Phase) -> bool:
        return (self.arterial if phase is Phase.ARTERIAL else self.venous) is not None

    def masks(self) -> dict[Phase, LabelMask]:
        out = {}
        if self.arterial is not None:
            out[Phase.ARTERIAL] = self.arterial[1]
        if self.venous is not None:
            out[Phase.VENOUS] = self.venous[1]
        return out


@dataclass(frozen=True)
class Dataset:
    """An ordered collection of cases with per-phase counts."""

    cases: tuple[Case, ...]
    provenance: str = "phantom"

    def __post_init__(self):
        object.__setattr__(self, "cases", tuple(self.cases))
        ids = [c.case_id for c in self.cases]
        if len(set(ids)) != len(ids):
            raise ValueError("case_ids must be unique")

    def __len__(self) -> int:
        return len(self.cases)

    @property
    def counts(self) -> dict[Phase, int]:
        return {
            Phase.ARTERIAL: sum(1 for c in self.cases if c.has_phase(Phase.ARTERIAL)),
            Phase.VENOUS: sum(1 for c in self.cases if c.has_phase(Phase.VENOUS)),
        }

    def case_ids(self) -> list[str]:
        return [c.case_id for c in self.cases]

    def by_id(self, case_id: str) -> Case:
        for c in self.cases:
            if c.case_id == case_id:
                return c
        raise KeyError(case_id)

    def subset(self, case_ids) -> "Dataset":
        wanted = set(case_ids)
        return Dataset(
            cases=tuple(c for c in self.cases if c.case_id in wanted),
            provenance=self.provenance,
        )

    def single_phase(self, phase: Phase) -> "Dataset":
        """Strip the other phase, modelling an external one-phase corpus."""
        kept = []
        for c in self.cases:
            pair = c.phase_pair(phase)
            kwargs = {"case_id": c.case_id, phase.value: pair}
            kept.append(Case(**kwargs))
        return Dataset(cases=tuple(kept), provenance=self.provenance)


@dataclass(frozen=True)
class FoldSplit:
    """Assignment of case_ids to k cross-validation folds."""

    k: int
    assignments: dict[str, int] = field(default_factory=dict)
    seed: int = 0

    def fold_cases(self, fold: int) -> list[str]:
        return sorted(cid for cid, f in self.assignments.items() if f == fold)

    def train_cases(self, fold: int) -> list[str]:
        return sorted(cid for cid, f in self.assignments.items() if f != fold)

    def to_json_dict(self) -> dict:
        return {"k": self.k, "seed": self.seed, "assignments": dict(self.assignments)}

    @classmethod
    def from_json_dict(cls, d: dict) -> "FoldSplit":
        return cls(k=int(d["k"]), assignments={k: int(v) for k, v in d["assignments"].items()},
                   seed=int(d["seed"]))


def clamp_hu(v: Volume, lo: float = HU_MIN, hi: float = HU_MAX) -> Volume:
    """Clamp a volume's intensities into [lo, hi] HU."""
    if lo >= hi:
        raise InvalidRangeError(f"clamp range is empty: lo={lo} >= hi={hi}")
    return Volume(
        data=np.clip(v.data, lo, hi),
        phase=v.phase,
        case_id=v.case_id,
        spacing=v.spacing,
    )


def split_folds(d: Dataset, k: int, seed: int) -> FoldSplit:
    """Randomly partition cases into k folds whose sizes differ by <= 1."""
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    if len(d) < k:
        raise InsufficientDataError(f"need at least {k} cases for {k} folds, have {len(d)}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(d))
    assignments = {}
    for rank, case_idx in enumerate(order):
        assignments[d.cases[case_idx].case_id] = rank % k
    return FoldSplit(k=k, assignments=assignments, seed=seed)


def _as_binary(a) -> np.ndarray:
    if isinstance(a, LabelMask):
        arr = a.data
    else:
        arr = np.asarray(a)
    if arr.dtype == bool:
        return arr
    vals = np.unique(arr)
    if not np.all(np.isin(vals, (0, 1))):
        raise ValueError("dsc expects binary masks; use LabelMask.class_mask(c) first")
    return arr.astype(bool)


def dsc(a, b) -> float:
    """Dice-Sorensen coefficient 2|A∩B| / (|A| + |B|) of two binary masks.

    Both masks empty counts as perfect agreement (1.0).
    """
    a = _as_binary(a)
    b = _as_binary(b)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"mask shapes differ: {a.shape} vs {b.shape}")
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / denom
