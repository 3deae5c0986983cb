"""Pairwise segmentation costs, the relaxed transport objective and soft gradients."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import ot
from .autodiff import NumericError, Tensor

IGNORE_INDEX = 255
IOU_EPS = 1e-6
PROB_FLOOR = 1e-12


def _onehot(labels: np.ndarray, num_classes: int, ignore_index: int = IGNORE_INDEX) -> np.ndarray:
    labels = np.asarray(labels)
    valid = labels != ignore_index
    out = np.zeros(labels.shape + (num_classes,))
    idx = np.where(valid, labels, 0).astype(np.intp)
    np.put_along_axis(out, idx[..., None], 1.0, axis=-1)
    out *= valid[..., None]
    return out


def default_cost_classes(num_classes: int) -> list[int]:
    """Foreground only for binary tasks, every class otherwise."""
    return [1] if num_classes == 2 else list(range(num_classes))


# ---------------------------------------------------------------- single pair


def cost_iou(s, y, classes=None, eps: float = IOU_EPS):
    """Soft IoU cost between per-pixel probabilities ``s`` [C, H, W] and labels ``y`` [H, W].

    1 - (sum s*y + eps) / (sum s + sum y - sum s*y + eps), summed over
    ``classes`` (foreground only for binary problems). Ignored pixels drop out.
    """
    s = ad.as_tensor(s)
    num_classes = s.shape[0]
    classes = default_cost_classes(num_classes) if classes is None else list(classes)
    y = np.asarray(y)
    oh = np.moveaxis(_onehot(y, num_classes), -1, 0)[classes]
    valid = (y != IGNORE_INDEX).astype(np.float64)
    sc = ad.mul(ad.getitem(s, np.asarray(classes)), valid)
    inter = ad.sum_(ad.mul(sc, oh))
    union = ad.sub(ad.add(ad.sum_(sc), float(oh.sum())), inter)
    return ad.sub(1.0, ad.div(ad.add(inter, eps), ad.add(union, eps)))


def cost_ce(s, y, ignore_index: int = IGNORE_INDEX):
    """Mean over labelled pixels of -log s[y(p), p]; probabilities clamped at 1e-12."""
    s = ad.as_tensor(s)
    y = np.asarray(y)
    oh = np.moveaxis(_onehot(y, s.shape[0], ignore_index), -1, 0)
    n = max(float(oh.sum()), 1.0)
    logp = ad.log(ad.clamp_min(s, PROB_FLOOR))
    return ad.mul(ad.sum_(ad.mul(logp, oh)), -1.0 / n)


# ------------------------------------------------------------------- batched


def pairwise_cost(logits: Tensor, labels: np.ndarray, kind: str = "ce", classes=None) -> Tensor:
    """Cost tensor [B, N, M] between predictions [B, N, P, C] and labels [B, M, P]."""
    b, n, p, c = logits.shape
    m = labels.shape[1]
    oh = _onehot(labels, c)  # [B, M, P, C]
    if kind == "ce":
        logp = ad.clamp_min(ad.log_softmax(logits, axis=-1), float(np.log(PROB_FLOOR)))
        counts = np.maximum(oh.sum(axis=(2, 3)), 1.0)  # [B, M]
        ohf = np.transpose(oh.reshape(b, m, p * c), (0, 2, 1)) / counts[:, None, :]
        return ad.mul(ad.matmul(ad.reshape(logp, (b, n, p * c)), ohf), -1.0)
    if kind == "iou":
        classes = default_cost_classes(c) if classes is None else list(classes)
        valid = (labels != IGNORE_INDEX).any(axis=1).astype(np.float64)  # [B, P]
        probs = ad.softmax(logits, axis=-1)
        sc = ad.mul(ad.getitem(probs, (slice(None), slice(None), slice(None), np.asarray(classes))),
                    valid[:, None, :, None])
        ohc = oh[..., classes]
        ce = len(classes)
        inter = ad.matmul(ad.reshape(sc, (b, n, p * ce)),
                          np.transpose(ohc.reshape(b, m, p * ce), (0, 2, 1)))
        ssum = ad.reshape(ad.sum_(sc, axis=(2, 3)), (b, n, 1))
        ysum = ohc.sum(axis=(2, 3))[:, None, :]
        union = ad.sub(ad.add(ssum, ysum), inter)
        return ad.sub(1.0, ad.div(ad.add(inter, IOU_EPS), ad.add(union, IOU_EPS)))
    raise ValueError(f"unknown cost {kind!r}; expected 'iou' or 'ce'")


# ------------------------------------------------------------ soft gradient


def soft_gradient(u, o, groups) -> np.ndarray:
    """Group-averaged gradient of KL(o || u) with respect to u.

    For every group the KL gradient is evaluated at the group means of u and
    o and assigned to each member index.
    """
    u = np.asarray(u, dtype=np.float64)
    o = np.asarray(o, dtype=np.float64)
    grad = np.zeros_like(u)
    for g in groups:
        g = np.asarray(g, dtype=np.intp)
        ub = max(u[g].mean(), PROB_FLOOR)
        ob = o[g].mean()
        grad[g] = -ob / ub
    return grad


def mask_iou(a: np.ndarray, b: np.ndarray, classes) -> float:
    """Mean over ``classes`` of hard-mask IoU; a class absent from both counts as 1."""
    vals = []
    for c in classes:
        ma, mb = a == c, b == c
        union = np.logical_or(ma, mb).sum()
        vals.append(1.0 if union == 0 else np.logical_and(ma, mb).sum() / union)
    return float(np.mean(vals))


def group_experts(expert_maps: np.ndarray, threshold: float, samples_per_expert: int,
                  classes) -> list[list[int]]:
    """Single-linkage merge of experts whose hard mean outputs have IoU >= threshold.

    ``expert_maps`` is [K, H, W] (argmax of each expert's mean prediction).
    Returns groups of sample indices (expert-major layout).
    """
    k = len(expert_maps)
    parent = list(range(k))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for a in range(k):
        for b in range(a + 1, k):
            if find(a) != find(b) and mask_iou(expert_maps[a], expert_maps[b], classes) >= threshold:
                parent[max(find(a), find(b))] = min(find(a), find(b))
    clusters: dict[int, list[int]] = {}
    for a in range(k):
        clusters.setdefault(find(a), []).append(a)
    s = samples_per_expert
    return [[e * s + t for e in members for t in range(s)] for members in clusters.values()]


# -------------------------------------------------------------- assembly


@dataclass
class LossParts:
    loss: Tensor  # differentiable objective (or surrogate with the same gradient)
    value: float  # true objective value
    transport: float
    kl: float  # per-sample KL(P* 1 || u), as in the objective
    kl_expert: float  # same KL after summing samples of each expert
    plans: list[np.ndarray]


def solve_coupling(cost: np.ndarray, v: np.ndarray, gamma: float, solver: str = "greedy") -> np.ndarray:
    if solver == "greedy":
        return ot.solve_relaxed_greedy(cost, v, gamma).plan
    if solver == "exact":
        return ot.solve_exact_lp(cost, v, gamma=gamma).plan
    raise ValueError(f"unknown solver {solver!r}")


def expert_kl(o: np.ndarray, u: np.ndarray, samples_per_expert: int) -> float:
    s = samples_per_expert
    ok = o.reshape(-1, s).sum(axis=1)
    uk = u.reshape(-1, s).sum(axis=1)
    return ot.kl_marginal(ok, uk)


def assemble_loss(cost: Tensor, u: Tensor, v: np.ndarray, beta: float, gamma: float, *,
                  plans=None, solver: str = "greedy", groups=None,
                  samples_per_expert: int = 1, map_fn=map) -> LossParts:
    """Relaxed transport objective averaged over the batch.

    ``cost`` [B, N, M] and ``u`` [B, N] carry gradients; ``v`` [B, M] is
    constant. The coupling P* is solved on the cost values and treated as a
    constant. With ``groups`` (one list of index groups per image) the KL
    gradient into u is replaced by the group-averaged soft gradient.
    """
    cv = cost.value
    uv = u.value
    b = cv.shape[0]
    if plans is None:
        plans = list(map_fn(lambda n: solve_coupling(cv[n], v[n], gamma, solver), range(b)))
    P = np.stack(plans)
    o = P.sum(axis=2)
    transport = ad.mul(ad.sum_(ad.mul(cost, P)), 1.0 / b)
    logu = ad.log(ad.clamp_min(u, PROB_FLOOR))
    nz = o > 0
    ent = float(np.sum(o[nz] * np.log(o[nz])))
    kl = ad.mul(ad.sub(ent, ad.sum_(ad.mul(logu, o))), 1.0 / b)
    value = float(transport.value) + beta * float(kl.value)
    if not np.isfinite(value):
        raise NumericError(
            f"non-finite loss: C in [{np.nanmin(cv):.3g}, {np.nanmax(cv):.3g}], "
            f"P in [{P.min():.3g}, {P.max():.3g}], u in [{uv.min():.3g}, {uv.max():.3g}]")
    if groups is None:
        loss = ad.add(transport, ad.mul(kl, beta))
    else:
        g = np.stack([soft_gradient(uv[n], o[n], groups[n]) for n in range(b)])
        loss = ad.add(transport, ad.mul(ad.sum_(ad.mul(u, g)), beta / b))
    kl_e = float(np.mean([expert_kl(o[n], uv[n], samples_per_expert) for n in range(b)]))
    return LossParts(loss, value, float(transport.value), float(kl.value), kl_e, plans)


def all_pairs_loss(cost: Tensor, v: np.ndarray) -> Tensor:
    """Ablation: every prediction matched to every label, weighted by v / N."""
    b, n, _ = cost.shape
    w = np.broadcast_to(v[:, None, :] / n, cost.shape)
    return ad.mul(ad.sum_(ad.mul(cost, w)), 1.0 / b)


# ---------------------------------------------------------------- schedules


@dataclass
class Schedule:
    """Linear ramp from ``start`` to ``end`` over ``horizon`` epochs, then flat."""

    start: float
    end: float
    horizon: float

    def __call__(self, epoch: float) -> float:
        return anneal(self.start, self.end, self.horizon, epoch)


def anneal(start: float, end: float, horizon: float, epoch: float) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    if horizon <= 0 or epoch >= horizon:
        return float(end)
    if epoch == 0:
        return float(start)
    return float(start + (end - start) * (epoch / horizon))
