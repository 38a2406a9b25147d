"""Triplet hinge and summed binary cross-entropy, with gradients."""

from __future__ import annotations

import numpy as np

BCE_CLIP = 1e-7


def triplet_loss(fa, fp, fn, margin: float = 0.5):
    """``max(|fa-fp|^2 - |fa-fn|^2 + margin, 0)`` and its gradients.

    Accepts single vectors or batches of row vectors; batched input returns
    per-row losses. At the hinge boundary the zero subgradient is used.
    """
    fa, fp, fn = (np.asarray(v, dtype=float) for v in (fa, fp, fn))
    if not fa.shape == fp.shape == fn.shape:
        raise ValueError(f"embedding shapes differ: {fa.shape}, {fp.shape}, {fn.shape}")
    if not margin > 0:
        raise ValueError("margin must be positive")
    d_ap = np.sum((fa - fp) ** 2, axis=-1)
    d_an = np.sum((fa - fn) ** 2, axis=-1)
    raw = d_ap - d_an + margin
    active = (raw > 0).astype(float)[..., None]
    loss = np.maximum(raw, 0.0)
    ga = 2.0 * (fn - fp) * active
    gp = -2.0 * (fa - fp) * active
    gn = 2.0 * (fa - fn) * active
    if np.ndim(loss) == 0:
        loss = float(loss)
    return loss, (ga, gp, gn)


def bce_loss(pred, target):
    """Summed binary cross-entropy over the last axis, predictions clipped.

    Returns ``(loss, grad)`` with the gradient taken w.r.t. the clipped
    predictions (zero where clipping is active).
    """
    p = np.asarray(pred, dtype=float)
    y = np.asarray(target, dtype=float)
    if p.shape != y.shape:
        raise ValueError(f"prediction shape {p.shape} does not match target shape {y.shape}")
    pc = np.clip(p, BCE_CLIP, 1.0 - BCE_CLIP)
    loss = -np.sum(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc), axis=-1)
    grad = (pc - y) / (pc * (1.0 - pc))
    grad = np.where((p < BCE_CLIP) | (p > 1.0 - BCE_CLIP), 0.0, grad)
    if np.ndim(loss) == 0:
        loss = float(loss)
    return loss, grad

