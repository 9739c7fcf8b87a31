"""Bipartite matching between predictions and ground truth, and the
weighted multi-task training loss.

Matching cost is classification plus mask similarity only — box and pose
terms never influence the assignment. The assignment found for the final
decoder layer is reused for every auxiliary layer's loss.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import DomainError, Tensor
from .keypoints import image_to_pose

LOSS_WEIGHTS = {"class": 2.0, "mask": 5.0, "box": 0.2, "pose": 0.2}
BOX_NLL_SCALE = 0.5  # fixed Laplace scale for corner regression


class MatchingError(ValueError):
    """Infeasible or invalid matching problem."""


@dataclass
class CostMatrix:
    """Pairwise matching costs [Q, G] with the per-term breakdown."""

    values: np.ndarray
    class_cost: np.ndarray = field(repr=False, default=None)
    mask_cost: np.ndarray = field(repr=False, default=None)


def _solve_lsap(cost: np.ndarray):
    """Shortest-augmenting-path assignment for cost [R, C], R <= C.

    Returns (column per row, total cost, row potentials, column potentials).
    Within each Dijkstra step ties resolve to the lowest column index.
    """
    r, c = cost.shape
    u = np.zeros(r + 1)
    v = np.zeros(c + 1)
    assigned = np.zeros(c + 1, dtype=np.int64)  # 1-based row per column, 0 = free
    way = np.zeros(c + 1, dtype=np.int64)
    for i in range(1, r + 1):
        assigned[0] = i
        j0 = 0
        minv = np.full(c + 1, np.inf)
        used = np.zeros(c + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = assigned[j0]
            free = ~used[1:]
            cur = cost[i0 - 1, :] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            if better.any():
                idx = np.where(better)[0] + 1
                minv[idx] = cur[better]
                way[idx] = j0
            masked = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(masked)) + 1  # argmin takes the lowest index on ties
            delta = masked[j1 - 1]
            u[assigned[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if assigned[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            assigned[j0] = assigned[j1]
            j0 = j1
    col_of_row = np.zeros(r, dtype=np.int64)
    for j in range(1, c + 1):
        if assigned[j]:
            col_of_row[assigned[j] - 1] = j - 1
    total = float(cost[np.arange(r), col_of_row].sum())
    return col_of_row, total, u[1:], v[1:]


def hungarian_match(cost: CostMatrix | np.ndarray) -> np.ndarray:
    """Minimum-cost one-to-one assignment: query index per ground truth.

    Among all minimum-cost assignments, returns the lexicographically
    smallest query-index vector (ground truths in order, each taking the
    lowest query index consistent with global optimality).
    """
    values = cost.values if isinstance(cost, CostMatrix) else np.asarray(cost, dtype=np.float64)
    if values.ndim != 2:
        raise MatchingError(f"cost matrix must be 2-D, got shape {values.shape}")
    nq, ng = values.shape
    if ng == 0:
        return np.zeros(0, dtype=np.int64)
    if ng > nq:
        raise MatchingError(f"{ng} ground truths exceed {nq} queries")
    if not np.all(np.isfinite(values)):
        raise MatchingError("cost matrix contains non-finite entries")

    by_gt = np.ascontiguousarray(values.T)  # [G, Q]
    base, best, row_u, col_v = _solve_lsap(by_gt)
    eps = 1e-12 * max(1.0, abs(best))
    # complementary slackness: only zero-reduced-cost pairs can appear in an
    # optimal assignment, so candidates below filter to (usually) just base[g]
    reduced = by_gt - row_u[:, None] - col_v[None, :]
    slack_eps = 1e-9 * max(1.0, float(np.abs(by_gt).max()))

    chosen: list[int] = []
    available = list(range(nq))
    prefix = 0.0
    for g in range(ng):
        candidates = [q for q in available if reduced[g, q] <= slack_eps]
        accepted = None
        if len(candidates) == 1:
            accepted = candidates[0]
        else:
            for q in candidates:
                rest = ng - g - 1
                if rest:
                    others = [o for o in available if o != q]
                    _, rest_total, _, _ = _solve_lsap(by_gt[g + 1 :, others])
                else:
                    rest_total = 0.0
                if prefix + by_gt[g, q] + rest_total <= best + eps:
                    accepted = q
                    break
        if accepted is None:  # numerically impossible unless eps was too tight
            accepted = int(base[g]) if int(base[g]) in available else available[0]
        chosen.append(accepted)
        available.remove(accepted)
        prefix += by_gt[g, accepted]
    return np.array(chosen, dtype=np.int64)


# ---------------------------------------------------------------------------
# loss primitives


def _check_binary(targets: np.ndarray, what: str) -> np.ndarray:
    targets = np.asarray(targets, dtype=np.float64)
    if not np.all((targets == 0.0) | (targets == 1.0)):
        raise DomainError(f"{what}: targets must be 0 or 1")
    return targets


def bce_loss(logits: Tensor, targets: np.ndarray, reduction: str = "mean") -> Tensor:
    """Binary cross entropy on logits, in the overflow-free log-sum-exp form."""
    targets = _check_binary(targets, "bce_loss")
    t = ag.constant(targets)
    elem = ag.add(ag.sub(ag.relu(logits), ag.mul(logits, t)),
                  ag.softplus(ag.neg(ag.absolute(logits))))
    if reduction == "mean":
        return ag.tmean(elem)
    if reduction == "sum":
        return ag.tsum(elem)
    if reduction == "none":
        return elem
    raise ValueError(f"unknown reduction {reduction!r}")


def dice_loss(probs: Tensor, target: np.ndarray, eps: float = 1.0) -> Tensor:
    """1 - (2*sum(p*t)+eps) / (sum(p)+sum(t)+eps) for one soft/binary pair."""
    t = ag.constant(np.asarray(target, dtype=np.float64))
    num = ag.add(ag.mul(ag.tsum(ag.mul(probs, t)), ag.constant(2.0)), ag.constant(eps))
    den = ag.add(ag.add(ag.tsum(probs), ag.constant(float(np.sum(target)))), ag.constant(eps))
    return ag.sub(ag.constant(1.0), ag.div(num, den))


def dice_loss_batched(probs: Tensor, targets: np.ndarray, eps: float = 1.0) -> Tensor:
    """Mean of per-instance dice losses over the leading axis."""
    n = probs.shape[0]
    t = ag.constant(np.asarray(targets, dtype=np.float64))
    axes = tuple(range(1, probs.ndim))
    num = ag.add(ag.mul(ag.tsum(ag.mul(probs, t), axis=axes), ag.constant(2.0)),
                 ag.constant(eps))
    den = ag.add(ag.tsum(probs, axis=axes),
                 ag.constant(targets.reshape(n, -1).sum(axis=1) + eps))
    return ag.tmean(ag.sub(ag.constant(1.0), ag.div(num, den)))


def regression_nll(pred: Tensor, scale, target: np.ndarray) -> Tensor:
    """Laplace negative log-likelihood |pred-target|/scale + ln(2*scale), mean."""
    if isinstance(scale, Tensor):
        if np.any(scale.data <= 0.0):
            raise DomainError("regression_nll: nonpositive scale")
        s = scale
    else:
        if scale <= 0.0:
            raise DomainError("regression_nll: nonpositive scale")
        s = ag.constant(float(scale))
    err = ag.absolute(ag.sub(pred, ag.constant(np.asarray(target, dtype=np.float64))))
    elem = ag.add(ag.div(err, s), ag.log(ag.mul(s, ag.constant(2.0))))
    return ag.tmean(elem)


def l1_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    return ag.tmean(ag.absolute(ag.sub(pred, ag.constant(np.asarray(target, dtype=np.float64)))))


# ---------------------------------------------------------------------------
# ground truth encoding and the full training loss


@dataclass
class GroundTruth:
    """Targets for one scene, already in loss-ready form."""

    boxes: np.ndarray         # [G, 4] corners (x0, y0, x1, y1), normalized
    joints: np.ndarray        # [G, n_pose, 2] image-normalized
    masks: np.ndarray         # [G, H8, W8] binary {0, 1} float
    pose_targets: np.ndarray  # [G, n_pose, 2]: canonical or image frame

    @property
    def count(self) -> int:
        return self.boxes.shape[0]


def downsample_mask(mask: np.ndarray, stride: int) -> np.ndarray:
    """Any covered pixel marks the coarse cell (keeps thin strokes alive)."""
    h, w = mask.shape
    if h % stride or w % stride:
        raise ValueError(f"mask {mask.shape} not divisible by stride {stride}")
    blocks = mask.reshape(h // stride, stride, w // stride, stride)
    return blocks.any(axis=(1, 3)).astype(np.float64)


def encode_targets(instances, canonical: bool, mask_stride: int = 8) -> GroundTruth:
    """Build loss targets from scene instances (see scenes.Instance)."""
    if not instances:
        z = np.zeros
        return GroundTruth(z((0, 4)), z((0, 0, 2)), z((0, 0, 0)), z((0, 0, 2)))
    boxes = np.stack([inst.box for inst in instances]).astype(np.float64)
    joints = np.stack([inst.joints for inst in instances]).astype(np.float64)
    masks = np.stack([downsample_mask(inst.mask, mask_stride) for inst in instances])
    pose_targets = image_to_pose(joints, boxes) if canonical else joints
    return GroundTruth(boxes=boxes, joints=joints, masks=masks, pose_targets=pose_targets)


def _bce_np(logits: np.ndarray, targets: np.ndarray) -> np.ndarray:
    return np.maximum(logits, 0.0) - logits * targets + np.logaddexp(0.0, -np.abs(logits))


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def matching_cost(class_logits: np.ndarray, mask_logits: np.ndarray,
                  gt: GroundTruth, weights: dict = LOSS_WEIGHTS) -> CostMatrix:
    """Pairwise cost = w_class * (-log p) + w_mask * (bce + dice), [Q, G].

    Evaluated on the final-layer predictions at full mask resolution; box
    and pose predictions deliberately play no part.
    """
    nq = class_logits.shape[0]
    ng = gt.count
    logits = class_logits.reshape(nq)
    class_col = np.logaddexp(0.0, -logits)  # -log sigmoid(z)
    class_cost = np.repeat(class_col[:, None], max(ng, 1), axis=1)[:, :ng]
    if ng == 0:
        values = weights["class"] * class_cost
        return CostMatrix(values=values, class_cost=class_cost,
                          mask_cost=np.zeros((nq, 0)))
    pred = mask_logits.reshape(nq, 1, -1)
    tgt = gt.masks.reshape(1, ng, -1)
    bce = _bce_np(pred, tgt).mean(axis=2)
    probs = _sigmoid_np(mask_logits.reshape(nq, 1, -1))
    inter = (probs * tgt).sum(axis=2)
    dice = 1.0 - (2.0 * inter + 1.0) / (probs.sum(axis=2) + tgt.sum(axis=2) + 1.0)
    mask_cost = bce + dice
    values = weights["class"] * class_cost + weights["mask"] * mask_cost
    return CostMatrix(values=values, class_cost=class_cost, mask_cost=mask_cost)


@dataclass
class LossReport:
    """Weighted multi-task loss with the per-layer component breakdown."""

    total: Tensor
    layer_terms: list[dict]   # per layer: {"class","mask","box","pose"} floats
    weights: dict

    def component_totals(self) -> dict:
        keys = ("class", "mask", "box", "pose")
        return {k: sum(layer[k] for layer in self.layer_terms) for k in keys}

    def total_value(self) -> float:
        return self.total.item()


def total_loss(layers, mask_logits: Tensor | None, gt: GroundTruth,
               assignment: np.ndarray, weights: dict = LOSS_WEIGHTS,
               regression: str = "laplace", box_scale=None) -> LossReport:
    """Sum of weighted class/mask/box/pose losses over all decoder layers.

    Matched queries incur every loss; unmatched ones only classification
    toward no-object. Masks exist for the final layer only, so earlier
    layers contribute a zero mask term. The final-layer assignment is
    reused everywhere. ``box_scale`` is the Laplace scale for corner
    regression: a learned tensor when the model provides one, otherwise
    the fixed default.
    """
    ng = gt.count
    nq = layers[0].class_logits.shape[0]
    class_targets = np.zeros(nq)
    if ng:
        class_targets[assignment] = 1.0
    matched = np.asarray(assignment, dtype=np.int64)
    if box_scale is None:
        box_scale = BOX_NLL_SCALE

    zero = ag.constant(0.0)
    total = None
    layer_terms = []
    for li, layer in enumerate(layers):
        l_class = bce_loss(ag.reshape(layer.class_logits, (nq,)), class_targets)
        if ng:
            corners = ag.reshape(layer.keypoints.bbox(), (nq, 4))[matched]
            pose = layer.pose_coords[matched]
            if regression == "laplace":
                l_box = regression_nll(corners, box_scale, gt.boxes)
                l_pose = regression_nll(pose, layer.pose_scales[matched], gt.pose_targets)
            elif regression == "l1":
                l_box = l1_loss(corners, gt.boxes)
                l_pose = l1_loss(pose, gt.pose_targets)
            else:
                raise ValueError(f"unknown regression form {regression!r}")
        else:
            l_box = zero
            l_pose = zero
        if li == len(layers) - 1 and mask_logits is not None and ng:
            picked = mask_logits[matched]
            l_mask = ag.add(bce_loss(picked, gt.masks), dice_loss_batched(ag.sigmoid(picked), gt.masks))
        else:
            l_mask = zero

        weighted = ag.add(
            ag.add(ag.mul(ag.constant(weights["class"]), l_class),
                   ag.mul(ag.constant(weights["mask"]), l_mask)),
            ag.add(ag.mul(ag.constant(weights["box"]), l_box),
                   ag.mul(ag.constant(weights["pose"]), l_pose)))
        total = weighted if total is None else ag.add(total, weighted)
        layer_terms.append({
            "class": l_class.item(),
            "mask": l_mask.item(),
            "box": l_box.item(),
            "pose": l_pose.item(),
        })
    return LossReport(total=total, layer_terms=layer_terms, weights=dict(weights))
