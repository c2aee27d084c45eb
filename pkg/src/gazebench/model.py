"""Toy encoder-bottleneck-decoder gaze network with analytic gradients.

Layout is NCHW in float64. Per-frame spatial processing shares weights across
time; the in-view head reads the per-frame bottleneck and the latent 3D
projection reads the temporally mean-pooled bottleneck.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NotARotation, ShapeMismatch

EPS_LOG = 1e-12
ROTATION_TOL = 1e-6
# unit-variance input scaling for the synthetic frames (pixel std ~0.084)
INPUT_SCALE = 12.0

ModelParams = dict  # name -> np.ndarray, insertion ordered


@dataclass(frozen=True)
class ModelConfig:
    height: int = 64
    width: int = 64
    latent_k: int = 8
    enc_channels: tuple = (8, 16)

    def to_dict(self) -> dict:
        return {"height": self.height, "width": self.width, "latent_k": self.latent_k,
                "enc_channels": list(self.enc_channels)}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(int(d["height"]), int(d["width"]), int(d["latent_k"]),
                   tuple(int(c) for c in d["enc_channels"]))


# ---------------------------------------------------------------- conv kernels

def _pad(x, pad):
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def im2col(x: np.ndarray, k: int, stride: int, pad: int) -> np.ndarray:
    """(N, C, H, W) -> (N, C*k*k, Ho*Wo)."""
    n, c = x.shape[:2]
    xp = _pad(x, pad)
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    ho, wo = win.shape[2:4]
    return win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * k * k, ho * wo)


def col2im(cols: np.ndarray, shape, k: int, stride: int, pad: int) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add columns back into (N, C, H, W)."""
    n, c, h, w = shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    cols = cols.reshape(n, c, k, k, ho, wo)
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, :, i, j]
    if pad:
        out = out[:, :, pad:-pad, pad:-pad]
    return out


def conv2d(x, w, b, stride, pad):
    """w: (Cout, Cin, k, k). Returns output and the column cache."""
    n = x.shape[0]
    cout, _, k, _ = w.shape
    cols = im2col(x, k, stride, pad)
    out = np.matmul(w.reshape(cout, -1), cols) + b[None, :, None]
    ho = (x.shape[2] + 2 * pad - k) // stride + 1
    wo = (x.shape[3] + 2 * pad - k) // stride + 1
    return out.reshape(n, cout, ho, wo), cols


def conv2d_backward(dy, cols, x_shape, w, stride, pad):
    cout, _, k, _ = w.shape
    n = dy.shape[0]
    dy2 = dy.reshape(n, cout, -1)
    dw = np.tensordot(dy2, cols, axes=([0, 2], [0, 2])).reshape(w.shape)
    db = dy2.sum(axis=(0, 2))
    dcols = np.matmul(w.reshape(cout, -1).T, dy2)
    dx = col2im(dcols, x_shape, k, stride, pad)
    return dx, dw, db


def conv_transpose2d(x, w, b, stride, pad):
    """w: (Cin, Cout, k, k); the adjoint of a strided convolution."""
    n, cin, h, wd = x.shape
    _, cout, k, _ = w.shape
    ho = (h - 1) * stride - 2 * pad + k
    wo = (wd - 1) * stride - 2 * pad + k
    cols = np.matmul(w.reshape(cin, -1).T, x.reshape(n, cin, h * wd))
    out = col2im(cols, (n, cout, ho, wo), k, stride, pad)
    return out + b[None, :, None, None]


def conv_transpose2d_backward(dy, x, w, stride, pad):
    n, cin, h, wd = x.shape
    k = w.shape[2]
    dcols = im2col(dy, k, stride, pad)
    x2 = x.reshape(n, cin, h * wd)
    dw = np.tensordot(x2, dcols, axes=([0, 2], [0, 2])).reshape(w.shape)
    db = dy.sum(axis=(0, 2, 3))
    dx = np.matmul(w.reshape(cin, -1), dcols).reshape(x.shape)
    return dx, dw, db


# ---------------------------------------------------------------- parameters

def param_shapes(cfg: ModelConfig) -> dict:
    c1, c2 = cfg.enc_channels
    k = cfg.latent_k
    return {
        "enc1.w": (c1, 1, 3, 3), "enc1.b": (c1,),
        "enc2.w": (c2, c1, 3, 3), "enc2.b": (c2,),
        "bott.w": (c2, c2, 3, 3), "bott.b": (c2,),
        "dec1.w": (c2, c1, 4, 4), "dec1.b": (c1,),
        "dec2.w": (c1, 1, 4, 4), "dec2.b": (1,),
        "inview.w": (c2,), "inview.b": (1,),
        "proj.w": (3 * k, c2), "proj.b": (3 * k,),
    }


def _fan_in(name: str, shape) -> int:
    if name.startswith("dec"):
        # transposed 4x4 stride-2 kernels: each output sees cin * (k/stride)^2 inputs
        return shape[0] * (shape[2] // 2) ** 2
    if name == "inview.w":
        return shape[0]
    return int(np.prod(shape[1:]))


def init_params(cfg: ModelConfig, seed: int) -> ModelParams:
    """Weights uniform in +-1/sqrt(fan_in), biases zero."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape)
        else:
            bound = 1.0 / np.sqrt(_fan_in(name, shape))
            params[name] = rng.uniform(-bound, bound, size=shape)
    return params


def param_count(params: ModelParams) -> int:
    return int(sum(p.size for p in params.values()))


def zeros_like(params: ModelParams) -> ModelParams:
    return {k: np.zeros_like(v) for k, v in params.items()}


# ---------------------------------------------------------------- forward

@dataclass
class ForwardOutput:
    logits: np.ndarray  # (T, H, W)
    probs: np.ndarray  # (T, H, W)
    inview_logits: np.ndarray  # (T,)
    features: np.ndarray  # (T, C, H/4, W/4) per-frame bottleneck
    bottleneck: np.ndarray  # (C, H/4, W/4) temporal mean
    latent: np.ndarray  # (K, 3, H/4, W/4)

    @property
    def inview_scores(self) -> np.ndarray:
        return sigmoid(self.inview_logits)


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    return np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))


def spatial_softmax(logits: np.ndarray) -> np.ndarray:
    """Softmax over the last two axes."""
    flat = logits.reshape(logits.shape[:-2] + (-1,))
    flat = flat - flat.max(axis=-1, keepdims=True)
    e = np.exp(flat)
    return (e / e.sum(axis=-1, keepdims=True)).reshape(logits.shape)


def _as_input(frames: np.ndarray) -> np.ndarray:
    x = np.asarray(frames)
    if x.ndim == 5 and x.shape[-1] == 1:
        x = x[..., 0]
    if x.ndim != 4:
        raise ShapeMismatch(f"expected (B, T, H, W[, 1]) frames, got {np.shape(frames)}")
    if x.dtype == np.uint8:
        x = x.astype(np.float64) / 255.0
    return x.astype(np.float64) * INPUT_SCALE


def forward_batch(frames: np.ndarray, params: ModelParams):
    """Batched forward over clips (B, T, H, W[, 1]). Returns (outputs, cache);
    outputs carry a leading batch axis."""
    x = _as_input(frames)
    b, t, h, w = x.shape
    if h % 4 or w % 4:
        raise ShapeMismatch("frame height and width must be divisible by 4")
    if params["enc1.w"].shape[1] != 1:
        raise ShapeMismatch("model expects single-channel frames")
    x0 = x.reshape(b * t, 1, h, w)
    a1, cols1 = conv2d(x0, params["enc1.w"], params["enc1.b"], 2, 1)
    h1 = np.maximum(a1, 0.0)
    a2, cols2 = conv2d(h1, params["enc2.w"], params["enc2.b"], 2, 1)
    h2 = np.maximum(a2, 0.0)
    a3, cols3 = conv2d(h2, params["bott.w"], params["bott.b"], 1, 1)
    z = np.maximum(a3, 0.0)
    a4 = conv_transpose2d(z, params["dec1.w"], params["dec1.b"], 2, 1)
    d1 = np.maximum(a4, 0.0)
    logits = conv_transpose2d(d1, params["dec2.w"], params["dec2.b"], 2, 1)
    logits = logits.reshape(b, t, h, w)
    probs = spatial_softmax(logits)

    pooled = z.mean(axis=(2, 3))  # (B*T, C)
    inview = (pooled @ params["inview.w"] + params["inview.b"][0]).reshape(b, t)

    c, hq, wq = z.shape[1:]
    feats = z.reshape(b, t, c, hq, wq)
    zbar = feats.mean(axis=1)
    latent = project_latent_3d(zbar, params)

    out = dict(logits=logits, probs=probs, inview_logits=inview, features=feats,
               bottleneck=zbar, latent=latent)
    cache = dict(x0=x0, cols1=cols1, a1=a1, h1=h1, cols2=cols2, a2=a2, h2=h2,
                 cols3=cols3, a3=a3, z=z, a4=a4, d1=d1, pooled=pooled, zbar=zbar,
                 b=b, t=t)
    return out, cache


def forward(frames: np.ndarray, params: ModelParams) -> ForwardOutput:
    """Single clip (T, H, W[, 1]) forward pass."""
    x = np.asarray(frames)
    if x.ndim not in (3, 4):
        raise ShapeMismatch(f"expected (T, H, W[, 1]) frames, got {x.shape}")
    out, _ = forward_batch(x[None], params)
    return ForwardOutput(**{k: v[0] for k, v in out.items()})


def project_latent_3d(bottleneck: np.ndarray, params: ModelParams) -> np.ndarray:
    """1x1 convolution to 3K channels regrouped as K 3-vectors per cell.

    Accepts (C, h, w) or (B, C, h, w); returns (K, 3, h, w) or (B, K, 3, h, w).
    """
    wp, bp = params["proj.w"], params["proj.b"]
    z = np.asarray(bottleneck, dtype=np.float64)
    if z.shape[-3] != wp.shape[1]:
        raise ShapeMismatch("bottleneck channels do not match projection weights")
    k = wp.shape[0] // 3
    out = np.einsum("oc,...chw->...ohw", wp, z) + bp[:, None, None]
    return out.reshape(z.shape[:-3] + (k, 3) + z.shape[-2:])


# ---------------------------------------------------------------- losses

def heatmap_loss(pred: np.ndarray, target: np.ndarray) -> float:
    """Mean over frames of KL(target || pred); maps are the last two axes."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeMismatch("prediction and target shapes differ")
    safe_t = np.where(target > 0, target, 1.0)
    terms = np.where(target > 0, target * (np.log(safe_t) - np.log(pred + EPS_LOG)), 0.0)
    per_map = terms.sum(axis=(-2, -1))
    return float(per_map.mean())


def inbound_loss(logits: np.ndarray, labels: np.ndarray) -> float:
    """Mean binary cross-entropy of sigmoid(logits) against 0/1 labels."""
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if z.shape != y.shape:
        raise ShapeMismatch("logit and label shapes differ")
    p = sigmoid(z)
    bce = -(y * np.log(p + EPS_LOG) + (1 - y) * np.log(1 - p + EPS_LOG))
    return float(bce.mean())


def check_rotation(r: np.ndarray) -> np.ndarray:
    r = np.asarray(r, dtype=np.float64)
    if r.shape != (3, 3) or np.max(np.abs(r.T @ r - np.eye(3))) > ROTATION_TOL:
        raise NotARotation("alignment requires an orthonormal 3x3 matrix")
    return r


def _rotate_field(field: np.ndarray, r: np.ndarray) -> np.ndarray:
    # vectors live on the axis of length 3 right after K
    return np.einsum("ij,...kjhw->...kihw", r, field)


def align_loss(head_field: np.ndarray, neck_field: np.ndarray, r: np.ndarray) -> float:
    """MSE between the head field rotated into the neck frame and the neck field."""
    r = check_rotation(r)
    head_field = np.asarray(head_field, dtype=np.float64)
    neck_field = np.asarray(neck_field, dtype=np.float64)
    if head_field.shape != neck_field.shape:
        raise ShapeMismatch("latent fields differ in shape")
    diff = _rotate_field(head_field, r) - neck_field
    return float(np.mean(diff**2))


# ---------------------------------------------------------------- gradients

def _heatmap_grad(probs, targets):
    """Per-clip mean-over-frames KL and its gradient w.r.t. logits (B, T, H, W)."""
    b, t = probs.shape[:2]
    safe_t = np.where(targets > 0, targets, 1.0)
    terms = np.where(targets > 0, targets * (np.log(safe_t) - np.log(probs + EPS_LOG)), 0.0)
    loss = terms.sum(axis=(2, 3)).mean(axis=1)  # (B,)
    # d/dlogit of -sum t log(p + eps) through the softmax
    g = targets * probs / (probs + EPS_LOG)
    dlogits = probs * g.sum(axis=(2, 3), keepdims=True) - g
    return loss, dlogits / t


def _inbound_grad(logits, labels):
    t = logits.shape[1]
    p = sigmoid(logits)
    y = labels.astype(np.float64)
    bce = -(y * np.log(p + EPS_LOG) + (1 - y) * np.log(1 - p + EPS_LOG))
    dp = -y / (p + EPS_LOG) + (1 - y) / (1 - p + EPS_LOG)
    return bce.mean(axis=1), dp * p * (1 - p) / t


def backward_batch(cache: dict, params: ModelParams, dlogits=None, dinview=None, dlatent=None) -> ModelParams:
    """Backpropagate upstream gradients (any may be None) to every parameter."""
    b, t = cache["b"], cache["t"]
    grads = zeros_like(params)
    z = cache["z"]
    n, c, hq, wq = z.shape
    dz = np.zeros_like(z)

    if dlogits is not None:
        dl = dlogits.reshape(n, 1, dlogits.shape[-2], dlogits.shape[-1])
        dd1, grads["dec2.w"], grads["dec2.b"] = conv_transpose2d_backward(dl, cache["d1"], params["dec2.w"], 2, 1)
        da4 = dd1 * (cache["a4"] > 0)
        dz_dec, grads["dec1.w"], grads["dec1.b"] = conv_transpose2d_backward(da4, z, params["dec1.w"], 2, 1)
        dz += dz_dec

    if dinview is not None:
        dv = dinview.reshape(n)
        grads["inview.w"] = dv @ cache["pooled"]
        grads["inview.b"] = np.array([dv.sum()])
        dpooled = np.outer(dv, params["inview.w"])
        dz += dpooled[:, :, None, None] / (hq * wq)

    if dlatent is not None:
        k = params["proj.w"].shape[0] // 3
        dl = dlatent.reshape(b, 3 * k, hq, wq)
        zbar = cache["zbar"]
        grads["proj.w"] = np.einsum("bohw,bchw->oc", dl, zbar)
        grads["proj.b"] = dl.sum(axis=(0, 2, 3))
        dzbar = np.einsum("oc,bohw->bchw", params["proj.w"], dl)
        dz += np.repeat(dzbar[:, None] / t, t, axis=1).reshape(n, c, hq, wq)

    if not (dlogits is None and dinview is None and dlatent is None):
        da3 = dz * (cache["a3"] > 0)
        dh2, grads["bott.w"], grads["bott.b"] = conv2d_backward(da3, cache["cols3"], cache["h2"].shape, params["bott.w"], 1, 1)
        da2 = dh2 * (cache["a2"] > 0)
        dh1, grads["enc2.w"], grads["enc2.b"] = conv2d_backward(da2, cache["cols2"], cache["h1"].shape, params["enc2.w"], 2, 1)
        da1 = dh1 * (cache["a1"] > 0)
        _, grads["enc1.w"], grads["enc1.b"] = conv2d_backward(da1, cache["cols1"], cache["x0"].shape, params["enc1.w"], 2, 1)
    return grads


@dataclass
class LossWeights:
    heatmap: float = 1.0
    inbound: float = 1.0
    align: float = 1.0


def loss_and_grads(frames, targets, labels, params: ModelParams, weights: LossWeights):
    """Weighted heatmap + in-view loss for one model, averaged over the batch.

    Terms with zero weight are skipped entirely. Returns (total, terms, grads).
    """
    out, cache = forward_batch(frames, params)
    b = out["logits"].shape[0]
    terms = {}
    dlogits = dinview = None
    total = 0.0
    if weights.heatmap:
        l, g = _heatmap_grad(out["probs"], np.asarray(targets, dtype=np.float64))
        terms["heatmap"] = float(l.mean())
        total += weights.heatmap * terms["heatmap"]
        dlogits = g * (weights.heatmap / b)
    if weights.inbound:
        l, g = _inbound_grad(out["inview_logits"], np.asarray(labels))
        terms["inbound"] = float(l.mean())
        total += weights.inbound * terms["inbound"]
        dinview = g * (weights.inbound / b)
    grads = backward_batch(cache, params, dlogits, dinview, None)
    return total, terms, grads, out


def _align_grad(head_field, neck_field, rotations):
    """Per-clip alignment MSE with per-clip rotations (B, 3, 3)."""
    rotated = np.einsum("bij,bkjhw->bkihw", rotations, head_field)
    diff = rotated - neck_field
    per = diff[0].size
    loss = (diff**2).reshape(len(diff), -1).mean(axis=1)
    dneck = -2.0 * diff / per
    dhead = np.einsum("bij,bkihw->bkjhw", rotations, 2.0 * diff / per)
    return loss, dhead, dneck


def colearn_loss_and_grads(head_frames, neck_frames, head_targets, neck_targets, rotations,
                           head_params: ModelParams, neck_params: ModelParams,
                           weights: LossWeights):
    """Heatmap loss on both views plus rotation-conditioned latent alignment.

    The alignment gradient flows into both models. Returns
    (total, terms, head_grads, neck_grads).
    """
    rotations = np.asarray(rotations, dtype=np.float64)
    for r in rotations:
        check_rotation(r)
    out_h, cache_h = forward_batch(head_frames, head_params)
    out_n, cache_n = forward_batch(neck_frames, neck_params)
    b = out_h["logits"].shape[0]
    terms = {}
    total = 0.0
    dl_h = dl_n = dlat_h = dlat_n = None
    if weights.heatmap:
        lh, gh = _heatmap_grad(out_h["probs"], np.asarray(head_targets, dtype=np.float64))
        ln, gn = _heatmap_grad(out_n["probs"], np.asarray(neck_targets, dtype=np.float64))
        terms["heatmap_head"] = float(lh.mean())
        terms["heatmap_neck"] = float(ln.mean())
        total += weights.heatmap * (terms["heatmap_head"] + terms["heatmap_neck"])
        dl_h = gh * (weights.heatmap / b)
        dl_n = gn * (weights.heatmap / b)
    if weights.align:
        la, dh, dn = _align_grad(out_h["latent"], out_n["latent"], rotations)
        terms["align"] = float(la.mean())
        total += weights.align * terms["align"]
        dlat_h = dh * (weights.align / b)
        dlat_n = dn * (weights.align / b)
    gh = backward_batch(cache_h, head_params, dl_h, None, dlat_h)
    gn = backward_batch(cache_n, neck_params, dl_n, None, dlat_n)
    return total, terms, gh, gn, (out_h, out_n)


def backward(frames, targets, labels, params: ModelParams, weights: LossWeights) -> ModelParams:
    """Gradients of the weighted single-model loss for one clip (T, H, W[, 1])."""
    _, _, grads, _ = loss_and_grads(
        np.asarray(frames)[None], np.asarray(targets)[None], np.asarray(labels)[None], params, weights
    )
    return grads
