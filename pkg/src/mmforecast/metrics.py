"""Accuracy and diversity evaluation: mIoU / mIoU-MO via a shared confusion
matrix, pairwise MSE over softmax probabilities, a deep-feature diversity
proxy, per-pixel variance maps, averaged and top-fraction scoring, the
correct-at-least-once curve, and the copy-last baseline."""

import math
from dataclasses import dataclass, field

import numpy as np

from .core import LogitVolume, SampleSet, SegMap, argmax_decode
from .losses import softmax


@dataclass
class ConfusionMatrix:
    """counts[gt, pred] over non-void gt pixels. Predictions may be void
    (copy-last can predict void), hence the extra column."""
    n_classes: int
    counts: np.ndarray = None

    def __post_init__(self):
        if self.counts is None:
            self.counts = np.zeros((self.n_classes, self.n_classes + 1), dtype=np.int64)

    def merge(self, other):
        self.counts += other.counts
        return self


def accumulate_confusion(pred: SegMap, gt: SegMap, table, cm: ConfusionMatrix = None):
    if pred.data.shape != gt.data.shape:
        raise ValueError("pred/gt shape mismatch")
    cm = cm or ConfusionMatrix(table.n_classes)
    valid = gt.data != table.void_id
    g = gt.data[valid]
    p = pred.data[valid]
    # predicted void lands in the last column
    p = np.where(p == table.void_id, table.n_classes, p)
    np.add.at(cm.counts, (g, p), 1)
    return cm


def per_class_iou(cm: ConfusionMatrix):
    c = cm.n_classes
    tp = np.diag(cm.counts[:, :c]).astype(np.float64)
    fn = cm.counts.sum(axis=1) - tp
    fp = cm.counts[:, :c].sum(axis=0) - tp
    union = tp + fp + fn
    iou = np.full(c, np.nan)
    nz = union > 0
    iou[nz] = tp[nz] / union[nz]
    return iou


def miou(cm: ConfusionMatrix) -> float:
    """Mean IoU over classes with non-zero union."""
    iou = per_class_iou(cm)
    if np.all(np.isnan(iou)):
        raise ValueError("every class has zero union; mIoU undefined")
    return float(np.nanmean(iou))


def miou_mo(cm: ConfusionMatrix, movable_ids) -> float:
    iou = per_class_iou(cm)[sorted(movable_ids)]
    if np.all(np.isnan(iou)):
        raise ValueError("every movable class has zero union; mIoU-MO undefined")
    return float(np.nanmean(iou))


def seg_miou(pred: SegMap, gt: SegMap, table) -> float:
    return miou(accumulate_confusion(pred, gt, table))


def _prob_stack(s: SampleSet):
    return softmax(s.stack(), axis=1)  # (K, C, H, W)


def pairwise_mse(s: SampleSet, space: str = "prob") -> float:
    """Mean over unordered sample pairs of the per-element squared
    difference. Probability space by default; K=1 is 0 by convention."""
    if s.k < 2:
        return 0.0
    stack = _prob_stack(s) if space == "prob" else s.stack()
    total = 0.0
    n = 0
    for i in range(s.k):
        for j in range(i + 1, s.k):
            total += float(np.mean(np.square(stack[i] - stack[j])))
            n += 1
    return total / n


def lpips_proxy(s: SampleSet, encoder) -> float:
    """Deep-feature diversity proxy: mean over sample pairs of the sum over
    encoder stages of spatially averaged unit-normalized feature distance.
    Uses the frozen stage-1 encoder as the feature net; this is NOT the
    externally trained perceptual metric, hence the name."""
    if encoder is None:
        raise ValueError("lpips_proxy needs a frozen encoder")
    if s.k < 2:
        return 0.0
    probs = _prob_stack(s)
    feats = []  # per sample: list of per-stage activations
    for i in range(s.k):
        encoder.forward(probs[i][None], record=True)
        feats.append([a.copy() for a in encoder.activations])
    norm = []
    for i in range(s.k):
        norm.append([a / np.sqrt(np.sum(a * a, axis=1, keepdims=True) + 1e-10)
                     for a in feats[i]])
    total = 0.0
    n = 0
    for i in range(s.k):
        for j in range(i + 1, s.k):
            d = 0.0
            for a, b in zip(norm[i], norm[j]):
                d += float(np.mean(np.sum(np.square(a - b), axis=1)))
            total += d
            n += 1
    return total / n


def mean_logit_variance(s: SampleSet) -> np.ndarray:
    """Per-pixel variance across samples per channel, then channel mean."""
    if s.k < 2:
        raise ValueError("variance maps need K >= 2")
    return s.stack().var(axis=0, ddof=1).mean(axis=0)


def discrete_prediction_variance(s: SampleSet) -> np.ndarray:
    """Per-pixel variance across samples of the argmax class index."""
    if s.k < 2:
        raise ValueError("variance maps need K >= 2")
    cls = np.argmax(s.stack(), axis=1).astype(np.float64)
    return cls.var(axis=0, ddof=1)


def averaged_prediction(s: SampleSet) -> LogitVolume:
    return LogitVolume(s.stack().mean(axis=0), s.samples[0].table)


def top_fraction_miou(sample_sets, gts, fraction: float, table) -> float:
    """Per clip keep the best ceil(fraction*K) samples by mIoU; dataset
    mean of the kept scores."""
    kept = []
    for s, gt in zip(sample_sets, gts):
        if s.k * fraction < 1:
            raise ValueError(f"fraction {fraction} too small for K={s.k}")
        n_keep = math.ceil(fraction * s.k)
        scores = sorted(
            (seg_miou(argmax_decode(lv), gt, table) for lv in s.samples),
            reverse=True)
        kept.extend(scores[:n_keep])
    return float(np.mean(kept))


SUBSET_NAMES = ("all_nonvoid", "movable_only", "oracle_correct")


@dataclass
class DiversityCurve:
    checkpoints: list
    values: dict = field(default_factory=dict)  # subset -> list (None if absent)


def default_checkpoints(k_max: int):
    cps = []
    n = 1
    while n <= k_max:
        cps.append(n)
        n *= 2
    return cps


def at_least_once_curve(sample_sets, gts, oracle_preds, table,
                        checkpoints=None) -> DiversityCurve:
    """Fraction of subset pixels correctly classified by at least one of
    the first n samples, for n in checkpoints. Subsets: all non-void gt,
    movable-class gt, oracle-correct pixels."""
    k = min(s.k for s in sample_sets)
    checkpoints = list(checkpoints or default_checkpoints(k))
    if checkpoints[-1] > k:
        raise ValueError(f"need >= {checkpoints[-1]} samples per clip, have {k}")

    hits = {name: np.zeros(len(checkpoints)) for name in SUBSET_NAMES}
    sizes = {name: 0 for name in SUBSET_NAMES}
    for s, gt, op in zip(sample_sets, gts, oracle_preds):
        g = gt.data
        masks = {
            "all_nonvoid": g != table.void_id,
            "movable_only": np.isin(g, sorted(table.movable_ids)),
            "oracle_correct": (op.data == g) & (g != table.void_id),
        }
        correct_any = np.zeros(g.shape, dtype=bool)
        ci = 0
        for n in range(1, checkpoints[-1] + 1):
            pred = argmax_decode(s.samples[n - 1]).data
            correct_any |= pred == g
            if n == checkpoints[ci]:
                for name, m in masks.items():
                    hits[name][ci] += int(np.count_nonzero(correct_any & m))
                ci += 1
        for name, m in masks.items():
            sizes[name] += int(np.count_nonzero(m))

    values = {}
    for name in SUBSET_NAMES:
        if sizes[name] == 0:
            values[name] = None
        else:
            values[name] = list(hits[name] / sizes[name])
    return DiversityCurve(checkpoints=checkpoints, values=values)


def copy_last_baseline(clip, model=None) -> SegMap:
    """Future prediction = segmentation of the last observed frame. With a
    model, the frame is passed through the oracle encoder/decoder (matching
    how forecasts are scored); without, the ground-truth labels are copied."""
    if model is None:
        return clip.last_input_seg
    feat = model.encode(clip.last_input_seg)
    return argmax_decode(model.decode(feat, clip.last_input_seg.table))


def dump_predictions(path, clip_id, sample_set: SampleSet, gt: SegMap,
                     oracle_pred: SegMap):
    """Offline re-scoring dump: K logit volumes + gt + oracle prediction."""
    np.savez_compressed(
        path,
        clip_id=np.array(clip_id),
        logits=sample_set.stack(),
        noise_seeds=np.array(sample_set.noise_seeds, dtype=np.int64),
        gt=gt.data,
        oracle_pred=oracle_pred.data,
    )


def load_predictions(path, table):
    z = np.load(path, allow_pickle=False)
    samples = tuple(LogitVolume(l, table) for l in z["logits"])
    return (str(z["clip_id"]),
            SampleSet(samples=samples, noise_seeds=tuple(int(x) for x in z["noise_seeds"])),
            SegMap(z["gt"], table),
            SegMap(z["oracle_pred"], table))
