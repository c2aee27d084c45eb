"""Independent reference implementations used as test oracles.

These deliberately avoid the library's vectorized code paths: loops, explicit
formulas, and re-derivations from raw data.
"""

from __future__ import annotations

import math

import numpy as np

from gazebench.model import forward_batch


# ------------------------------------------------------------ geometry

def random_rotation(rng) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q @ np.diag(np.sign(np.diag(r)))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


# ------------------------------------------------------------ labeling

def brute_force_labels(xs, ys, conf, in_bounds, disp=0.05, conf_thr=0.5):
    """Re-derive event labels from raw normalized sequences.

    A displacement is only measured against a previous frame that was itself
    a confident in-bounds sample.
    """
    labels = []
    for i in range(len(xs)):
        if not conf[i] >= conf_thr:
            labels.append("untracked")
            continue
        if not in_bounds[i]:
            labels.append("truncated")
            continue
        if i > 0 and labels[i - 1] in ("fixation", "saccade"):
            d = math.sqrt((xs[i] - xs[i - 1]) ** 2 + (ys[i] - ys[i - 1]) ** 2)
            if d > disp:
                labels.append("saccade")
                continue
        labels.append("fixation")
    return labels


# ------------------------------------------------------------ evaluation

def brute_force_adaptive_f1(preds, masks, thresholds):
    """Per-threshold nested-loop pixel counting with per-frame relative
    binarization, micro-averaged. Returns (best_f1, best_tau, p, r, counts)."""
    counts = []
    for tau in thresholds:
        tp = fp = fn = 0
        for f in range(len(preds)):
            peak = max(preds[f][i][j] for i in range(len(preds[f])) for j in range(len(preds[f][0])))
            for i in range(len(preds[f])):
                for j in range(len(preds[f][0])):
                    p = preds[f][i][j] >= tau * peak
                    g = bool(masks[f][i][j])
                    tp += p and g
                    fp += p and not g
                    fn += (not p) and g
        counts.append((tp, fp, fn))
    best = None
    for tau, (tp, fp, fn) in zip(thresholds, counts):
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
        if best is None or f1 > best[0]:
            best = (f1, tau, prec, rec)
    return best + (counts,)


# ------------------------------------------------------------ optimizer

def scalar_adamw(theta, grads, lr, wd, b1=0.9, b2=0.999, eps=1e-8):
    """Hand-written scalar AdamW over a gradient sequence."""
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        theta = theta - lr * (mhat / (math.sqrt(vhat) + eps) + wd * theta)
    return theta


# ------------------------------------------------------------ gradients

_KINKS = ("a1", "a2", "a3", "a4")


def relu_pattern(frames, params):
    _, cache = forward_batch(frames, params)
    return [cache[k] > 0 for k in _KINKS]


def crosses_kink(frames, params, name, idx, h):
    """True when perturbing params[name][idx] by +-h flips any ReLU, i.e. the
    central difference straddles a non-differentiable point."""
    base = relu_pattern(frames, params)
    old = params[name][idx]
    try:
        for delta in (h, -h):
            params[name][idx] = old + delta
            for a, b in zip(base, relu_pattern(frames, params)):
                if not np.array_equal(a, b):
                    return True
    finally:
        params[name][idx] = old
    return False


def finite_difference_check(loss_fn, models, rng, per_group: int, h: float = 1e-4,
                            floor: float = 1e-7, max_tries: int = 50):
    """Compare analytic gradients to central differences.

    ``models`` lists (label, params, grads, frames): ``per_group`` random
    entries of every tensor in ``params`` are checked, skipping entries whose
    +-h perturbation flips a ReLU of the forward pass on ``frames`` (the
    central difference would straddle a kink). ``loss_fn()`` must read the
    params dicts live. Returns a list of (label, name, idx, fd, an, rel).
    """
    results = []
    for label, params, grads, frames in models:
        for name in sorted(params):
            p = params[name]
            want = min(per_group, p.size)
            taken = set()
            tries = 0
            while len(taken) < want and tries < want * max_tries:
                tries += 1
                idx = tuple(int(rng.integers(0, s)) for s in p.shape)
                if idx in taken or crosses_kink(frames, params, name, idx, h):
                    continue
                taken.add(idx)
                old = p[idx]
                p[idx] = old + h
                lp = loss_fn()
                p[idx] = old - h
                lm = loss_fn()
                p[idx] = old
                fd = (lp - lm) / (2 * h)
                an = float(grads[name][idx])
                rel = abs(fd - an) / max(abs(fd), abs(an), floor)
                results.append((label, name, idx, fd, an, rel))
    return results
