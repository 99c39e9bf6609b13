"""Fused two-branch prediction and the measurement suite.

Fusion averages probability maps: the native segmenter's output on the
input image and the other phase's segmenter applied to the translated
image. Reports carry per-case DSC per method and class plus recomputable
summaries.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .core import Dataset, LabelMask, Phase, Volume, dsc
from .errors import EmptyRegionError, PhaseMismatchError, ShapeMismatchError
from .phantom import Histogram, intensity_histogram
from .segmenter import ProbMap, SegModel, seg_forward
from .translator import Generator, translate

METHOD_SINGLE = "single"
METHOD_FUSED = "fused"


def predict_single(f: SegModel, x: Volume) -> tuple[ProbMap, LabelMask]:
    probs = seg_forward(f, x)
    return probs, probs.argmax_mask(phase=x.phase)


def predict_fused(f_native: SegModel, f_other: SegModel, g: Generator, x: Volume,
                  lambda_fuse: float = 0.5) -> tuple[ProbMap, LabelMask]:
    """Blend the native prediction with the translated-branch prediction.

    output = lambda_fuse * f_native(x) + (1 - lambda_fuse) * f_other(g(x)).
    Ties in the argmax decode go to the lowest class index.
    """
    if not 0.0 <= lambda_fuse <= 1.0:
        raise ValueError(f"lambda_fuse must lie in [0, 1], got {lambda_fuse}")
    if g.source is not x.phase:
        raise PhaseMismatchError(
            f"generator consumes {g.source.value} but volume is {x.phase.value}"
        )
    if f_native.phase is not None and f_native.phase is not x.phase:
        raise PhaseMismatchError("native segmenter phase does not match the input")
    if f_other.phase is not None and f_other.phase is not g.target:
        raise PhaseMismatchError("other segmenter phase does not match the generator target")
    native = seg_forward(f_native, x).data
    other = seg_forward(f_other, translate(g, x)).data
    fused = lambda_fuse * native + (1.0 - lambda_fuse) * other
    probs = ProbMap(data=fused)
    return probs, probs.argmax_mask(phase=x.phase)


@dataclass
class MetricsReport:
    """Per-case DSC per method and class, with consistent summaries."""

    phase: str
    classes: list[int]
    methods: list[str]
    per_case: dict = field(default_factory=dict)  # case_id -> method -> class -> dsc
    provenance: dict = field(default_factory=dict)

    def add(self, case_id: str, method: str, cls: int, value: float) -> None:
        self.per_case.setdefault(case_id, {}).setdefault(method, {})[str(cls)] = value

    def values(self, method: str, cls: int) -> list[float]:
        key = str(cls)
        return [per_method[method][key] for per_method in self.per_case.values()
                if method in per_method]

    def summary(self) -> dict:
        out = {}
        for method in self.methods:
            out[method] = {}
            for cls in self.classes:
                vals = self.values(method, cls)
                if not vals:
                    continue
                out[method][str(cls)] = {
                    "average": float(np.mean(vals)),
                    "max": float(np.max(vals)),
                    "min": float(np.min(vals)),
                }
        return out

    def mean_dsc(self, method: str, cls: int) -> float:
        return float(np.mean(self.values(method, cls)))

    def to_json_dict(self) -> dict:
        return {
            "phase": self.phase,
            "classes": self.classes,
            "methods": self.methods,
            "per_case": self.per_case,
            "summary": self.summary(),
            "provenance": self.provenance,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "MetricsReport":
        report = cls(phase=d["phase"], classes=list(d["classes"]),
                     methods=list(d["methods"]), per_case=d["per_case"],
                     provenance=d.get("provenance", {}))
        return report


def evaluate(f_native: SegModel, data: Dataset, phase: Phase,
             f_other: Optional[SegModel] = None, generator: Optional[Generator] = None,
             methods=(METHOD_SINGLE, METHOD_FUSED), lambda_fuse: float = 0.5,
             classes: Optional[list[int]] = None,
             provenance: Optional[dict] = None) -> MetricsReport:
    """Per-case DSC of each method over one phase of a dataset."""
    if len(data) == 0:
        raise EmptyRegionError("evaluation dataset is empty")
    methods = list(methods)
    if METHOD_FUSED in methods and (f_other is None or generator is None):
        raise ValueError("fused evaluation needs f_other and generator")
    first_mask = next(iter(data.cases[0].masks().values()))
    if classes is None:
        classes = list(range(1, first_mask.num_classes))
    report = MetricsReport(phase=phase.value, classes=classes, methods=methods,
                           provenance=provenance or {})
    for case in data.cases:
        if not case.has_phase(phase):
            continue
        vol, gt = case.phase_pair(phase)
        preds = {}
        if METHOD_SINGLE in methods:
            _, preds[METHOD_SINGLE] = predict_single(f_native, vol)
        if METHOD_FUSED in methods:
            _, preds[METHOD_FUSED] = predict_fused(f_native, f_other, generator, vol,
                                                   lambda_fuse)
        for method, pred in preds.items():
            for cls in classes:
                report.add(case.case_id, method, cls,
                           dsc(pred.class_mask(cls), gt.class_mask(cls)))
    return report


@dataclass(frozen=True)
class PixelGain:
    gained: int
    lost: int
    fp_removed: int


def pixel_gain(pred_fused: LabelMask, pred_single: LabelMask, gt: LabelMask,
               cls: int) -> PixelGain:
    """Cell-level accounting of what fusion changed for one class.

    Correctness is judged on the binary view of the class: a cell is
    correct when (prediction == cls) agrees with (gt == cls).
    """
    if not (pred_fused.shape == pred_single.shape == gt.shape):
        raise ShapeMismatchError("pixel_gain inputs must share one shape")
    f = pred_fused.class_mask(cls)
    s = pred_single.class_mask(cls)
    g = gt.class_mask(cls)
    f_ok = f == g
    s_ok = s == g
    gained = int(np.sum(f_ok & ~s_ok))
    lost = int(np.sum(~f_ok & s_ok))
    fp_removed = int(np.sum(s & ~g & ~f))
    return PixelGain(gained=gained, lost=lost, fp_removed=fp_removed)


@dataclass(frozen=True)
class HistogramComparison:
    real: Histogram
    generated: Histogram
    peak_distance: float  # HU between mode bin centers
    l1_distance: float  # in [0, 2] for normalized histograms


def histogram_compare(real_pairs, generated_pairs, bins: int = 40,
                      hu_range=(-125.0, 275.0)) -> HistogramComparison:
    """Pooled masked histograms of real vs generated sets.

    Each element is (Volume, binary mask). Pooling concatenates masked
    values over all cases before binning.
    """

    def pooled(pairs) -> Histogram:
        values = []
        for vol, mask in pairs:
            mask = np.asarray(mask, dtype=bool)
            if mask.shape != vol.shape:
                raise ShapeMismatchError("mask shape does not match volume")
            values.append(vol.data[mask])
        values = np.concatenate(values) if values else np.empty(0)
        if values.size == 0:
            raise EmptyRegionError("pooled mask selects no cells")
        values = np.clip(values, hu_range[0], hu_range[1])
        counts, edges = np.histogram(values, bins=bins, range=hu_range)
        return Histogram(bin_edges=edges, freqs=counts / values.size)

    real = pooled(real_pairs)
    generated = pooled(generated_pairs)
    peak = abs(real.mode_center() - generated.mode_center())
    l1 = float(np.abs(real.freqs - generated.freqs).sum())
    return HistogramComparison(real=real, generated=generated,
                               peak_distance=peak, l1_distance=l1)


def translated_histogram_pairs(data: Dataset, g: Generator, cls: int):
    """(translated volume, source-label class mask) pairs for one direction.

    The source phase's labels stay valid for judging the translated image,
    because translation preserves geometry.
    """
    pairs = []
    for case in data.cases:
        if not case.has_phase(g.source):
            continue
        vol, mask = case.phase_pair(g.source)
        pairs.append((translate(g, vol), mask.class_mask(cls)))
    return pairs


def real_histogram_pairs(data: Dataset, phase: Phase, cls: int):
    pairs = []
    for case in data.cases:
        if not case.has_phase(phase):
            continue
        vol, mask = case.phase_pair(phase)
        pairs.append((vol, mask.class_mask(cls)))
    return pairs


def fuse_weight_search(f_native: SegModel, f_other: SegModel, g: Generator,
                       data: Dataset, phase: Phase, cls: int,
                       grid=None) -> tuple[float, dict]:
    """Grid-search the fusion weight on a validation set by mean DSC."""
    if grid is None:
        grid = [round(0.1 * k, 1) for k in range(1, 10)]
    scores = {}
    for lam in grid:
        report = evaluate(f_native, data, phase, f_other=f_other, generator=g,
                          methods=(METHOD_FUSED,), lambda_fuse=lam, classes=[cls])
        scores[lam] = report.mean_dsc(METHOD_FUSED, cls)
    best = max(scores, key=lambda k: (scores[k], -k))
    return best, scores
