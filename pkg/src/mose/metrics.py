"""Distribution-level and pixel-level evaluation metrics.

All distances use d = 1 - IoU, where IoU is the mean over an evaluated class
set and a class missing from both maps scores IoU 1. ``ged`` returns the
squared energy distance.
"""
from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field

import numpy as np

from . import ot
from .model import EmpiricalDistribution

NUM_BINS = 10


def _flat(maps: np.ndarray) -> np.ndarray:
    maps = np.asarray(maps)
    return maps.reshape(len(maps), -1)


def iou_matrix(a: np.ndarray, b: np.ndarray, classes) -> np.ndarray:
    """Mean-over-classes IoU between every map in ``a`` [N, ...] and ``b`` [M, ...]."""
    a, b = _flat(a), _flat(b)
    out = np.zeros((len(a), len(b)))
    for c in classes:
        ma = (a == c).astype(np.float64)
        mb = (b == c).astype(np.float64)
        inter = ma @ mb.T
        union = ma.sum(1)[:, None] + mb.sum(1)[None, :] - inter
        out += np.where(union > 0, inter / np.maximum(union, 1.0), 1.0)
    return out / len(classes)


def distance_matrix(a, b, classes) -> np.ndarray:
    return 1.0 - iou_matrix(a, b, classes)


def ged(pred: EmpiricalDistribution, gt: EmpiricalDistribution, classes) -> float:
    """Squared generalized energy distance 2E[d(p,y)] - E[d(y,y')] - E[d(p,p')]."""
    wp, wg = pred.weights, gt.weights
    cross = wp @ distance_matrix(pred.maps, gt.maps, classes) @ wg
    self_p = wp @ distance_matrix(pred.maps, pred.maps, classes) @ wp
    self_g = wg @ distance_matrix(gt.maps, gt.maps, classes) @ wg
    return float(2 * cross - self_p - self_g)


def m_iou(pred: EmpiricalDistribution, gt: EmpiricalDistribution, classes) -> float:
    """Transport-matched IoU: Hungarian for equal uniform sets, network simplex otherwise."""
    dist = distance_matrix(pred.maps, gt.maps, classes)
    n, m = dist.shape
    uniform = (np.allclose(pred.weights, 1.0 / n, rtol=0, atol=1e-12)
               and np.allclose(gt.weights, 1.0 / m, rtol=0, atol=1e-12))
    # 1 - matched distance (rather than matched IoU) so identical sets give exactly 1
    if uniform and n == m:
        assign, _ = ot.hungarian(dist)
        return float(np.clip(1.0 - dist[np.arange(n), assign].mean(), 0.0, 1.0))
    plan = ot.solve_exact_lp(dist, gt.weights, u=pred.weights).plan
    return float(np.clip(1.0 - np.sum(plan * dist), 0.0, 1.0))


def pixel_marginal(dist: EmpiricalDistribution, num_classes: int) -> np.ndarray:
    """Weighted class histogram per pixel, ``[P, C]``."""
    maps = _flat(dist.maps)
    out = np.zeros((maps.shape[1], num_classes))
    cols = np.arange(maps.shape[1])
    for w, row in zip(dist.weights, maps):
        out[cols, row] += w
    return out


@dataclass
class ReliabilityCurve:
    bin_lo: np.ndarray
    bin_hi: np.ndarray
    count: np.ndarray
    confidence: np.ndarray  # mean confidence per bin (0 for empty bins)
    accuracy: np.ndarray

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["bin_lo", "bin_hi", "count", "confidence", "accuracy"])
        for row in zip(self.bin_lo, self.bin_hi, self.count, self.confidence, self.accuracy):
            w.writerow([f"{row[0]:.1f}", f"{row[1]:.1f}", int(row[2]), f"{row[3]:.6f}", f"{row[4]:.6f}"])
        return buf.getvalue()


def confidence_accuracy(pred_probs: np.ndarray, gt_probs: np.ndarray):
    """Per-pixel (confidence, accuracy) pairs.

    Two classes: foreground probability against foreground frequency.
    More classes: top-class probability against the label frequency of that class.
    """
    pred_probs = np.asarray(pred_probs, dtype=np.float64)
    gt_probs = np.asarray(gt_probs, dtype=np.float64)
    if pred_probs.shape != gt_probs.shape:
        raise ValueError(f"shape mismatch {pred_probs.shape} vs {gt_probs.shape}")
    if pred_probs.shape[-1] == 2:
        return pred_probs[:, 1], gt_probs[:, 1]
    top = pred_probs.argmax(axis=-1)
    rows = np.arange(len(top))
    return pred_probs[rows, top], gt_probs[rows, top]


def ece_from_pairs(conf: np.ndarray, acc: np.ndarray, bins: int = NUM_BINS):
    conf = np.asarray(conf, dtype=np.float64)
    acc = np.asarray(acc, dtype=np.float64)
    idx = np.minimum((conf * bins).astype(int), bins - 1)
    count = np.bincount(idx, minlength=bins).astype(np.float64)
    csum = np.bincount(idx, weights=conf, minlength=bins)
    asum = np.bincount(idx, weights=acc, minlength=bins)
    safe = np.maximum(count, 1.0)
    edges = np.linspace(0.0, 1.0, bins + 1)
    curve = ReliabilityCurve(edges[:-1], edges[1:], count.astype(int), csum / safe, asum / safe)
    total = max(count.sum(), 1.0)
    return float(np.abs(asum - csum).sum() / total), curve


def ece(pred_probs: np.ndarray, gt_probs: np.ndarray, bins: int = NUM_BINS):
    """10-bin expected calibration error over pixels ``[P, C]`` and its reliability curve."""
    return ece_from_pairs(*confidence_accuracy(pred_probs, gt_probs), bins=bins)


def nearest_mode(pred_maps: np.ndarray, mode_maps: np.ndarray, classes) -> np.ndarray:
    """Index of the closest mode (lowest index on ties) for every prediction."""
    return distance_matrix(pred_maps, mode_maps, classes).argmin(axis=1)


def mode_ratio(pred: EmpiricalDistribution, mode_maps: np.ndarray, classes) -> np.ndarray:
    """Weighted share of predictions whose nearest mode is each ground-truth mode."""
    nearest = nearest_mode(pred.maps, mode_maps, classes)
    table = np.bincount(nearest, weights=pred.weights, minlength=len(mode_maps))
    return table / table.sum()


def flip_ratio(pred: EmpiricalDistribution, pairs) -> dict:
    """mass(c') / (mass(c) + mass(c')) per flip pair; None when neither class appears."""
    maps = _flat(pred.maps)
    out = {}
    for c, c2 in pairs:
        m1 = float(pred.weights @ (maps == c).sum(axis=1))
        m2 = float(pred.weights @ (maps == c2).sum(axis=1))
        out[(int(c), int(c2))] = None if m1 + m2 == 0 else m2 / (m1 + m2)
    return out


def diversity_and_entropy(pred: EmpiricalDistribution, classes, num_classes: int):
    """Weighted mean pairwise distance (self-pairs included) and mean pixel entropy (nats)."""
    w = pred.weights
    div = float(w @ distance_matrix(pred.maps, pred.maps, classes) @ w)
    marg = pixel_marginal(pred, num_classes)
    nz = marg > 0
    ent = -np.sum(np.where(nz, marg * np.log(np.where(nz, marg, 1.0)), 0.0), axis=1)
    return div, float(ent.mean())


@dataclass
class MetricReport:
    ged: float
    m_iou: float
    ece: float
    sample_diversity: float
    mean_pixel_entropy: float
    mode_ratio: list[float] = field(default_factory=list)
    mode_probs: list[float] = field(default_factory=list)
    flip_ratio: dict = field(default_factory=dict)
    representation: str = ""
    num_samples: int = 0
    num_images: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["flip_ratio"] = {f"{a}->{b}": r for (a, b), r in self.flip_ratio.items()}
        return d

    @property
    def mode_tv(self) -> float:
        return 0.5 * float(np.abs(np.subtract(self.mode_ratio, self.mode_probs)).sum())


def evaluate(model, dataset, split: str = "val", representation: str = "compact",
             samples: int | None = None, seed: int = 0, batch_size: int = 16, collect: list | None = None):
    """Average distribution metrics over a split; ECE and ratios pool all pixels.

    ``samples`` is the total budget N; the compact representation uses
    S = N / K samples per expert. Returns ``(MetricReport, ReliabilityCurve)``.
    Predicted distributions are appended to ``collect`` when it is given.
    """
    spec = dataset.spec
    cfg = model.config
    if (cfg.in_channels, cfg.height, cfg.width, cfg.num_classes) != (
            spec.channels, spec.height, spec.width, spec.num_classes):
        raise ValueError("model and dataset shapes are incompatible")
    k = cfg.num_experts
    n = samples if samples is not None else 2 * k
    if representation == "compact":
        if n % k:
            raise ValueError(f"compact budget {n} is not a multiple of K={k}")
    elif representation != "standard":
        raise ValueError(f"unknown representation {representation!r}")
    data = dataset.splits[split]
    classes = spec.eval_classes()
    pairs = spec.flip_pairs() if spec.archetype == "flip" else []
    rng = np.random.default_rng(seed)
    geds, mious, divs, ents, confs, accs = [], [], [], [], [], []
    modes_tab = np.zeros(len(dataset.mode_table)) if dataset.mode_table is not None else None
    m1 = {p: 0.0 for p in pairs}
    m2 = {p: 0.0 for p in pairs}
    nimg = len(data.images)
    for start in range(0, nimg, batch_size):
        x = data.images[start:start + batch_size].astype(np.float64)
        if representation == "compact":
            dists = model.predict_compact_batch(x, n // k, rng)
        else:
            dists = model.predict_standard_batch(x, n, rng)
        for off, pred in enumerate(dists):
            i = start + off
            if collect is not None:
                collect.append(pred)
            keep = data.freqs[i] > 0
            gt = EmpiricalDistribution(data.labels[i][keep], data.freqs[i][keep] / data.freqs[i][keep].sum())
            geds.append(ged(pred, gt, classes))
            mious.append(m_iou(pred, gt, classes))
            d, e = diversity_and_entropy(pred, classes, spec.num_classes)
            divs.append(d)
            ents.append(e)
            pm = pixel_marginal(pred, spec.num_classes)
            gm = pixel_marginal(gt, spec.num_classes)
            # calibration is scored on pixels whose labels involve an evaluated class
            mask = gm[:, classes].sum(axis=1) > 0
            c, a = confidence_accuracy(pm[mask], gm[mask])
            confs.append(c)
            accs.append(a)
            if modes_tab is not None:
                modes_tab += mode_ratio(pred, data.labels[i], classes) @ _mode_onehot(data.modes[i], len(modes_tab))
            maps = _flat(pred.maps)
            for c0, c1 in pairs:
                m1[(c0, c1)] += float(pred.weights @ (maps == c0).sum(axis=1))
                m2[(c0, c1)] += float(pred.weights @ (maps == c1).sum(axis=1))
    e, curve = ece_from_pairs(np.concatenate(confs), np.concatenate(accs))
    flips = {p: (None if m1[p] + m2[p] == 0 else m2[p] / (m1[p] + m2[p])) for p in pairs}
    report = MetricReport(
        ged=float(np.mean(geds)), m_iou=float(np.mean(mious)), ece=e,
        sample_diversity=float(np.mean(divs)), mean_pixel_entropy=float(np.mean(ents)),
        mode_ratio=[] if modes_tab is None else (modes_tab / nimg).tolist(),
        mode_probs=[] if modes_tab is None else dataset.mode_probs().tolist(),
        flip_ratio=flips, representation=representation, num_samples=n, num_images=nimg)
    return report, curve


def _mode_onehot(mode_ids: np.ndarray, num_modes: int) -> np.ndarray:
    """[M, num_modes] indicator mapping label slots to global mode ids."""
    out = np.zeros((len(mode_ids), num_modes))
    out[np.arange(len(mode_ids)), mode_ids] = 1.0
    return out
