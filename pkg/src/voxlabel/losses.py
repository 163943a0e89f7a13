"""Loss kernels with analytic gradients, and a toy trainable head.

Three kernels feed the combined detection loss: an instance-matching triplet
loss over feature vectors, a soft-distillation cross-entropy against
consistent per-instance probabilities, and a generic head loss (hard-label
cross-entropy + smooth-L1 box regression, optional per-pixel mask BCE).
Everything is double-precision numpy; every gradient is checked against
finite differences in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .detector import softmax
from .scene import NUM_CLASSES


@dataclass
class LossValue:
    value: float
    grads: dict = field(default_factory=dict)


def _check_finite(x, what: str):
    if not np.all(np.isfinite(x)):
        raise ValueError(what)


def triplet_loss(features: np.ndarray, uids, margin: float = 0.3,
                 mining: str = "batch_all") -> LossValue:
    """Batch-all triplet loss over instance-tagged feature vectors.

    features: (k, d); uids: (k,) instance identifiers. Loss is the mean of
    max(0, ||a-p|| - ||a-n|| + margin) over active triplets (anchor/positive
    share a uid, negative differs). Returns 0 with zero gradients when no
    valid triplet exists. Gradient w.r.t. features under key "features";
    subgradient 0 is used at zero distances and inactive triplets.
    """
    f = np.asarray(features, dtype=float)
    _check_finite(f, "invalid features")
    uids = np.asarray(uids)
    k = f.shape[0]
    grads = np.zeros_like(f)
    if k < 2:
        return LossValue(0.0, {"features": grads})

    diff = f[:, None, :] - f[None, :, :]
    dist = np.sqrt(np.sum(diff * diff, axis=-1))
    same = uids[:, None] == uids[None, :]
    not_self = ~np.eye(k, dtype=bool)

    if mining == "batch_all":
        pos_pairs = np.argwhere(same & not_self)          # (a, p)
        if pos_pairs.size == 0:
            return LossValue(0.0, {"features": grads})
        A, P, N = [], [], []
        for a, p in pos_pairs:
            negs = np.nonzero(~same[a])[0]
            A.extend([a] * len(negs))
            P.extend([p] * len(negs))
            N.extend(negs.tolist())
        if not A:
            return LossValue(0.0, {"features": grads})
        A = np.array(A)
        P = np.array(P)
        N = np.array(N)
        terms = dist[A, P] - dist[A, N] + margin
        active = terms > 0
        if not active.any():
            return LossValue(0.0, {"features": grads})
        A, P, N = A[active], P[active], N[active]
        value = float(terms[active].mean())
        n_active = A.size

        with np.errstate(invalid="ignore", divide="ignore"):
            u_ap = np.where(dist[A, P][:, None] > 0,
                            diff[A, P] / np.maximum(dist[A, P][:, None], 1e-300), 0.0)
            u_an = np.where(dist[A, N][:, None] > 0,
                            diff[A, N] / np.maximum(dist[A, N][:, None], 1e-300), 0.0)
        np.add.at(grads, A, (u_ap - u_an) / n_active)
        np.add.at(grads, P, -u_ap / n_active)
        np.add.at(grads, N, u_an / n_active)
        return LossValue(value, {"features": grads})

    if mining == "batch_hard":
        anchors = [a for a in range(k)
                   if (same[a] & not_self[a]).any() and (~same[a]).any()]
        if not anchors:
            return LossValue(0.0, {"features": grads})
        total = 0.0
        contributions = []
        for a in anchors:
            pos = np.nonzero(same[a] & not_self[a])[0]
            neg = np.nonzero(~same[a])[0]
            p = pos[np.argmax(dist[a, pos])]
            n = neg[np.argmin(dist[a, neg])]
            term = dist[a, p] - dist[a, n] + margin
            if term > 0:
                total += term
                contributions.append((a, p, n))
        value = total / len(anchors)
        for a, p, n in contributions:
            u_ap = diff[a, p] / dist[a, p] if dist[a, p] > 0 else np.zeros(f.shape[1])
            u_an = diff[a, n] / dist[a, n] if dist[a, n] > 0 else np.zeros(f.shape[1])
            grads[a] += (u_ap - u_an) / len(anchors)
            grads[p] += -u_ap / len(anchors)
            grads[n] += u_an / len(anchors)
        return LossValue(float(value), {"features": grads})

    raise ValueError(f"unknown mining scheme: {mining}")


def _log_softmax(x: np.ndarray) -> np.ndarray:
    shifted = x - np.max(x, axis=-1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def distill_loss(logits: np.ndarray, soft_targets: np.ndarray) -> LossValue:
    """Mean soft-target cross-entropy; gradient (softmax - target) / batch.

    logits, soft_targets: (B, C). Targets must be probability vectors.
    """
    lam = np.atleast_2d(np.asarray(logits, dtype=float))
    tgt = np.atleast_2d(np.asarray(soft_targets, dtype=float))
    _check_finite(lam, "invalid logits")
    if lam.shape[0] == 0:
        raise ValueError("empty batch")
    if (np.any(tgt < -1e-12)
            or np.any(np.abs(tgt.sum(axis=-1) - 1.0) > 1e-9)):
        raise ValueError("invalid soft target")
    logp = _log_softmax(lam)
    value = float(np.mean(-np.sum(tgt * logp, axis=-1)))
    grad = (softmax(lam) - tgt) / lam.shape[0]
    return LossValue(value, {"logits": grad.reshape(np.shape(logits))})


def _smooth_l1(x: np.ndarray):
    a = np.abs(x)
    val = np.where(a < 1.0, 0.5 * x * x, a - 0.5)
    grad = np.where(a < 1.0, x, np.sign(x))
    return val, grad


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def head_loss(pred_logits: np.ndarray, pred_box: np.ndarray, target_class: int,
              target_box: np.ndarray,
              pred_mask_logits: np.ndarray | None = None,
              target_mask: np.ndarray | None = None) -> LossValue:
    """Hard-label CE + smooth-L1 box regression (+ optional mask BCE).

    Boxes are (u_min, v_min, u_max, v_max) normalized to [0, 1]. The mask
    term is the mean per-pixel binary cross-entropy over mask logits and is
    included only when both mask arguments are supplied.
    """
    lam = np.asarray(pred_logits, dtype=float)
    box = np.asarray(pred_box, dtype=float)
    tbox = np.asarray(target_box, dtype=float)
    _check_finite(lam, "invalid logits")
    if box[2] < box[0] or box[3] < box[1] or tbox[2] < tbox[0] or tbox[3] < tbox[1]:
        raise ValueError("invalid box")
    if not 0 <= target_class < lam.shape[-1]:
        raise ValueError("invalid target class")

    logp = _log_softmax(lam)
    ce = float(-logp[target_class])
    onehot = np.eye(lam.shape[-1])[target_class]
    g_logits = softmax(lam) - onehot

    sl1, g_box = _smooth_l1(box - tbox)
    value = ce + float(sl1.sum())
    grads = {"logits": g_logits, "box": g_box}

    if pred_mask_logits is not None and target_mask is not None:
        m = np.asarray(pred_mask_logits, dtype=float)
        t = np.asarray(target_mask, dtype=float)
        p = _sigmoid(m)
        eps = 1e-12
        bce = -(t * np.log(p + eps) + (1.0 - t) * np.log(1.0 - p + eps))
        value += float(bce.mean())
        grads["mask_logits"] = (p - t) / m.size
    return LossValue(value, grads)


def detection_loss(im: LossValue, distill: LossValue, head: LossValue,
                   alpha: float) -> LossValue:
    """Combined loss: im + alpha * distill + head, gradients namespaced."""
    if alpha < 0:
        raise ValueError("alpha must be nonnegative")
    value = im.value + alpha * distill.value + head.value
    grads = {}
    for k, g in im.grads.items():
        grads[f"im.{k}"] = g
    for k, g in distill.grads.items():
        grads[f"distill.{k}"] = alpha * g
    for k, g in head.grads.items():
        grads[f"head.{k}"] = g
    return LossValue(float(value), grads)


@dataclass(frozen=True)
class TrainConfig:
    """Toy-head training settings; defaults follow the reference recipe."""

    lr: float = 1e-4
    epochs: int = 10
    weight_decay: float = 1e-5
    momentum: float = 0.9
    batch_size: int = 16
    alpha: float = 0.7
    margin: float = 0.3
    feature_dim: int = 1024
    embed_dim: int = 32
    feature_scale: float = 1.0
    instance_offset_scale: float = 0.3
    feature_noise: float = 0.2
    label_flip_prob: float = 0.0
    holdout_fraction: float = 0.2
    seed: int = 0
    mining: str = "batch_all"

    def to_json(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_json(cls, d: dict) -> "TrainConfig":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


def _make_examples(dataset, K, config: TrainConfig, rng: np.random.Generator):
    """Synthesize per-pseudo-label features: class cluster + instance offset."""
    d = config.feature_dim
    class_centers = rng.normal(0.0, config.feature_scale, (NUM_CLASSES, d))
    offsets: dict = {}
    feats, uids, classes, lambdas, boxes = [], [], [], [], []
    for _, lab in dataset.all_labels():
        if lab.uid not in offsets:
            offsets[lab.uid] = rng.normal(0.0, config.instance_offset_scale, d)
        noise = rng.normal(0.0, config.feature_noise, d)
        feats.append(class_centers[lab.class_id] + offsets[lab.uid] + noise)
        uids.append(lab.uid)
        classes.append(lab.class_id)
        lambdas.append(np.asarray(lab.lambda_bar, dtype=float))
        u0, v0, u1, v1 = lab.bbox
        boxes.append(np.array([u0 / K.width, v0 / K.height,
                               (u1 + 1) / K.width, (v1 + 1) / K.height]))
    return (np.array(feats), np.array(uids), np.array(classes),
            np.array(lambdas), np.array(boxes))


def toy_finetune(dataset, K, config: TrainConfig) -> dict:
    """Train a linear head on synthetic features with the combined loss.

    The head is a linear classifier (features -> 6 logits), a linear box
    regressor, and a linear embedding used by the instance-matching term.
    Mini-batch SGD with momentum and weight decay, deterministic given the
    config seed. Hard labels are optionally flipped (label_flip_prob) while
    soft targets keep the consensus probabilities; held-out accuracy is
    measured against the unflipped classes.
    """
    n_total = sum(len(f) for f in dataset.frames)
    if n_total == 0:
        raise ValueError("no training data")
    rng = np.random.default_rng(config.seed)
    feats, uids, classes, lambdas, boxes = _make_examples(dataset, K, config, rng)
    n = feats.shape[0]

    hard = classes.copy()
    if config.label_flip_prob > 0:
        flip = rng.random(n) < config.label_flip_prob
        hard[flip] = (hard[flip] + 1 + rng.integers(0, NUM_CLASSES - 1,
                                                    int(flip.sum()))) % NUM_CLASSES

    perm = rng.permutation(n)
    n_hold = max(1, int(round(n * config.holdout_fraction))) if n > 1 else 0
    hold_idx = perm[:n_hold]
    train_idx = perm[n_hold:]
    if train_idx.size == 0:
        train_idx = perm
        hold_idx = perm

    d, e = config.feature_dim, config.embed_dim
    scale = 1.0 / np.sqrt(d)
    params = {
        "W_cls": rng.normal(0, scale, (NUM_CLASSES, d)),
        "b_cls": np.zeros(NUM_CLASSES),
        "W_box": rng.normal(0, scale, (4, d)),
        "b_box": np.zeros(4),
        "W_emb": rng.normal(0, scale, (e, d)),
    }
    velocity = {k: np.zeros_like(v) for k, v in params.items()}

    def batch_losses(idx):
        F = feats[idx]
        logits = F @ params["W_cls"].T + params["b_cls"]
        pbox = F @ params["W_box"].T + params["b_box"]
        emb = F @ params["W_emb"].T
        im = triplet_loss(emb, uids[idx], margin=config.margin,
                          mining=config.mining)
        dist = distill_loss(logits, lambdas[idx])
        # batched head loss: mean CE + mean smooth-L1 over the batch
        logp = _log_softmax(logits)
        B = len(idx)
        ce = float(-logp[np.arange(B), hard[idx]].mean())
        onehot = np.eye(NUM_CLASSES)[hard[idx]]
        g_logits_head = (softmax(logits) - onehot) / B
        sl1, g_box = _smooth_l1(pbox - boxes[idx])
        head = LossValue(ce + float(sl1.sum(axis=1).mean()),
                         {"logits": g_logits_head, "box": g_box / B})
        total = detection_loss(im, dist, head, config.alpha)
        return total, im, dist, head, F, emb

    def apply_grads(total: LossValue, F, idx):
        g_logits = (total.grads.get("distill.logits", 0)
                    + total.grads.get("head.logits", 0))
        g_box = total.grads["head.box"]
        g_emb = total.grads["im.features"]
        grads = {
            "W_cls": g_logits.T @ F,
            "b_cls": g_logits.sum(axis=0),
            "W_box": g_box.T @ F,
            "b_box": g_box.sum(axis=0),
            "W_emb": g_emb.T @ F,
        }
        for k in params:
            g = grads[k] + config.weight_decay * params[k]
            velocity[k] = config.momentum * velocity[k] - config.lr * g
            params[k] += velocity[k]

    per_epoch = []
    total0, im0, dist0, head0, _, _ = batch_losses(train_idx)
    per_epoch.append({"epoch": 0, "loss_total": total0.value,
                      "loss_im": im0.value, "loss_distill": dist0.value,
                      "loss_head": head0.value})

    for epoch in range(config.epochs):
        order = rng.permutation(train_idx)
        sums = np.zeros(4)
        n_batches = 0
        for start in range(0, order.size, config.batch_size):
            idx = order[start:start + config.batch_size]
            total, im, dist, head, F, _ = batch_losses(idx)
            apply_grads(total, F, idx)
            sums += (total.value, im.value, dist.value, head.value)
            n_batches += 1
        means = sums / max(n_batches, 1)
        per_epoch.append({"epoch": epoch + 1, "loss_total": means[0],
                          "loss_im": means[1], "loss_distill": means[2],
                          "loss_head": means[3]})

    logits_hold = feats[hold_idx] @ params["W_cls"].T + params["b_cls"]
    accuracy = (float(np.mean(np.argmax(logits_hold, axis=1) == classes[hold_idx]))
                if hold_idx.size else 0.0)
    return {
        "config": config.to_json(),
        "alpha": config.alpha,
        "n_examples": int(n),
        "n_train": int(train_idx.size),
        "n_holdout": int(hold_idx.size),
        "per_epoch": per_epoch,
        "final_accuracy": accuracy,
    }
