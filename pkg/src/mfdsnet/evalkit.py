"""Confusion counts, the five change-detection metrics and overlay rendering."""
from dataclasses import asdict, dataclass

import numpy as np

# overlay palette: TP white, TN black, FN green (missed), FP red (false alarm)
COLORS = {
    "tp": (255, 255, 255),
    "tn": (0, 0, 0),
    "fn": (0, 255, 0),
    "fp": (255, 0, 0),
}


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __post_init__(self):
        for name in ("tp", "fp", "fn", "tn"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    def __add__(self, other):
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.fn + other.fn, self.tn + other.tn)

    @property
    def total(self):
        return self.tp + self.fp + self.fn + self.tn


@dataclass(frozen=True)
class MetricsReport:
    f1: float
    iou: float
    precision: float
    recall: float
    oa: float

    def as_dict(self):
        return asdict(self)

    def as_percent(self):
        return {k: round(100.0 * v, 3) for k, v in asdict(self).items()}


def _sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


def binarize(logits, threshold=0.5):
    """1 where sigmoid(logit) >= threshold (inclusive boundary), else 0."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    if hasattr(logits, "detach"):
        logits = logits.detach().cpu().numpy()
    return (_sigmoid(logits) >= threshold).astype(np.uint8)


def _as_binary(mask, name):
    mask = np.asarray(mask)
    if mask.dtype == bool:
        return mask
    if not np.isin(mask, (0, 1)).all():
        raise ValueError(f"{name} must be binary (values in {{0, 1}})")
    return mask.astype(bool)


def accumulate(pred, gt, counts: ConfusionCounts = None) -> ConfusionCounts:
    pred = _as_binary(pred, "pred")
    gt = _as_binary(gt, "gt")
    if pred.shape != gt.shape:
        raise ValueError(f"pred {pred.shape} and gt {gt.shape} differ in shape")
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    tn = int(pred.size - tp - fp - fn)
    new = ConfusionCounts(tp, fp, fn, tn)
    return new if counts is None else counts + new


def _ratio(num, den, empty):
    return num / den if den else empty


def compute_metrics(counts: ConfusionCounts, empty_score: float = 0.0) -> MetricsReport:
    """Pooled metrics; ``empty_score`` is used for ratios whose denominator is zero."""
    if counts.total <= 0:
        raise ValueError("cannot compute metrics from empty counts")
    tp, fp, fn, tn = counts.tp, counts.fp, counts.fn, counts.tn
    return MetricsReport(
        f1=_ratio(2 * tp, 2 * tp + fp + fn, empty_score),
        iou=_ratio(tp, tp + fp + fn, empty_score),
        precision=_ratio(tp, tp + fp, empty_score),
        recall=_ratio(tp, tp + fn, empty_score),
        oa=(tp + tn) / counts.total,
    )


def render_overlay(pred, gt):
    """H x W x 3 uint8 image coloring each pixel by its confusion class."""
    pred = _as_binary(pred, "pred")
    gt = _as_binary(gt, "gt")
    if pred.shape != gt.shape:
        raise ValueError(f"pred {pred.shape} and gt {gt.shape} differ in shape")
    out = np.zeros(pred.shape + (3,), dtype=np.uint8)
    out[pred & gt] = COLORS["tp"]
    out[~pred & gt] = COLORS["fn"]
    out[pred & ~gt] = COLORS["fp"]
    return out


def overlay_histogram(overlay) -> ConfusionCounts:
    """Count overlay pixels per class color."""
    overlay = np.asarray(overlay)
    counts = {}
    for name, color in COLORS.items():
        counts[name] = int(np.count_nonzero(np.all(overlay == np.array(color, dtype=np.uint8), axis=-1)))
    return ConfusionCounts(**counts)


def format_table(report: MetricsReport) -> str:
    pct = report.as_percent()
    header = f"{'F1':>9} {'IoU':>9} {'Precision':>9} {'Recall':>9} {'OA':>9}"
    row = " ".join(f"{pct[k]:9.3f}" for k in ("f1", "iou", "precision", "recall", "oa"))
    return header + "\n" + row
