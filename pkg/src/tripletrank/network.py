"""Small convolutional network with hand-derived gradients.

Inputs are batches of patches shaped (B, F, T); activations are kept
channels-last internally. The trunk is a stack of
conv(same padding) -> ReLU -> max-pool blocks. The head then either

* ``max``: takes the global max over (F, T) per channel and applies a dense
  layer, or
* ``autopool``: takes the max over F only, applies the dense layer to every
  remaining frame and aggregates frames with auto-pooling.

``embed`` mode L2-normalizes the head output; ``tag`` mode applies a sigmoid.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, asdict
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .losses import bce_loss, triplet_loss

MODES = ("embed", "tag")
POOLS = ("max", "autopool")


@dataclass(frozen=True)
class LayerSpec:
    channels: int
    kernel: tuple[int, int] = (3, 3)
    pool: tuple[int, int] = (2, 2)

    def __post_init__(self):
        object.__setattr__(self, "kernel", tuple(int(k) for k in self.kernel))
        object.__setattr__(self, "pool", tuple(int(p) for p in self.pool))
        if self.channels < 1 or min(self.kernel) < 1 or min(self.pool) < 1:
            raise ValueError(f"invalid layer spec {self}")
        if self.kernel[0] % 2 == 0 or self.kernel[1] % 2 == 0:
            raise ValueError("same-padded convolutions need odd kernel sizes")


@dataclass(frozen=True)
class ModelConfig:
    mode: str = "embed"
    input_shape: tuple[int, int] = (24, 64)
    layers: tuple[LayerSpec, ...] = (LayerSpec(16), LayerSpec(32))
    embedding_dim: int = 32
    n_tags: int = 24
    temporal_pool: str = "max"
    autopool_shared: bool = False

    def __post_init__(self):
        layers = tuple(l if isinstance(l, LayerSpec) else LayerSpec(**l) for l in self.layers)
        object.__setattr__(self, "layers", layers)
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.temporal_pool not in POOLS:
            raise ValueError(f"temporal_pool must be one of {POOLS}")
        if self.embedding_dim < 1 or self.n_tags < 1:
            raise ValueError("embedding_dim and n_tags must be at least 1")
        f, t = self.feature_shape()
        if f < 1 or t < 1:
            raise ValueError(f"layers reduce input {self.input_shape} to an empty feature map")

    @property
    def out_dim(self) -> int:
        return self.embedding_dim if self.mode == "embed" else self.n_tags

    def feature_shape(self) -> tuple[int, int]:
        f, t = self.input_shape
        for spec in self.layers:
            f, t = f // spec.pool[0], t // spec.pool[1]
        return f, t

    def to_dict(self):
        d = asdict(self)
        d["layers"] = [{"channels": l.channels, "kernel": list(l.kernel), "pool": list(l.pool)}
                       for l in self.layers]
        d["input_shape"] = list(self.input_shape)
        return d


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, np.ndarray]:
    """He-normal weights, zero biases, auto-pool sharpness at 0 (mean pooling)."""
    rng = np.random.default_rng(seed)
    params = {}
    c_in = 1
    for k, spec in enumerate(cfg.layers):
        kh, kw = spec.kernel
        fan_in = c_in * kh * kw
        params[f"conv{k}.w"] = rng.normal(0, np.sqrt(2.0 / fan_in), size=(spec.channels, c_in, kh, kw))
        params[f"conv{k}.b"] = np.zeros(spec.channels)
        c_in = spec.channels
    params["dense.w"] = rng.normal(0, np.sqrt(1.0 / c_in), size=(c_in, cfg.out_dim))
    params["dense.b"] = np.zeros(cfg.out_dim)
    if cfg.temporal_pool == "autopool":
        params["autopool.alpha"] = np.zeros(1 if cfg.autopool_shared else cfg.out_dim)
    return params


# ---------------------------------------------------------------- primitives

def conv2d_forward(x, w, b):
    """Same-padded convolution of channels-last ``x`` (B, F, T, C)."""
    kh, kw = w.shape[2:]
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    bsz, f, t, c = x.shape
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))  # (B, F, T, C, kh, kw)
    cols = win.reshape(bsz * f * t, c * kh * kw)
    out = cols @ w.reshape(w.shape[0], -1).T + b
    return out.reshape(bsz, f, t, -1), cols


def conv2d_backward(dout, cols, x_shape, w, need_dx=True):
    bsz, f, t, c = x_shape
    cout, _, kh, kw = w.shape
    d2 = dout.reshape(-1, cout)
    dw = (d2.T @ cols).reshape(w.shape)
    db = d2.sum(axis=0)
    if not need_dx:
        return None, dw, db
    dcols = (d2 @ w.reshape(cout, -1)).reshape(bsz, f, t, c, kh, kw)
    ph, pw = kh // 2, kw // 2
    dxp = np.zeros((bsz, f + 2 * ph, t + 2 * pw, c))
    for a in range(kh):
        for e in range(kw):
            dxp[:, a:a + f, e:e + t, :] += dcols[..., a, e]
    return dxp[:, ph:ph + f, pw:pw + t, :], dw, db


def maxpool_forward(x, pool):
    """Non-overlapping max-pool of channels-last ``x``; ragged edges are cropped."""
    ph, pw = pool
    bsz, f, t, c = x.shape
    fo, to = f // ph, t // pw
    xr = x[:, :fo * ph, :to * pw, :].reshape(bsz, fo, ph, to, pw, c)
    out = xr.max(axis=(2, 4))
    return out, (xr, out, x.shape)


def maxpool_backward(dout, cache, pool):
    # Ties route gradient to every maximal entry. Away from rectified zeros
    # (whose gradient is masked by the ReLU anyway) ties have measure zero.
    xr, out, x_shape = cache
    ph, pw = pool
    bsz, fo, to, c = out.shape
    mask = xr == out[:, :, None, :, None, :]
    dxr = mask * dout[:, :, None, :, None, :]
    dx = np.zeros(x_shape)
    dx[:, :fo * ph, :to * pw, :] = dxr.reshape(bsz, fo * ph, to * pw, c)
    return dx


def _top_gap(windows):
    """Smallest gap between the two largest entries of any pooling window."""
    if windows.shape[-1] < 2:
        return np.inf
    top2 = -np.partition(-windows, 1, axis=-1)[..., :2]
    gap = top2[..., 0] - top2[..., 1]
    # windows of rectified zeros are harmless while pre-activations avoid 0
    gap = np.where((top2[..., 0] == 0) & (top2[..., 1] == 0), np.inf, gap)
    return float(np.min(gap))


def autopool_forward(x, alpha):
    """Softmax-weighted mean over axis 1 of (B, T, D) with sharpness ``alpha``."""
    s = alpha * x
    s = s - s.max(axis=1, keepdims=True)
    e = np.exp(s)
    z = e.sum(axis=1)
    out = (e * x).sum(axis=1) / z
    return out, e / z[:, None, :]


def autopool_backward(dout, x, weights, out, alpha, shared):
    centred = x - out[:, None, :]
    dx = dout[:, None, :] * weights * (1.0 + alpha * centred)
    dalpha = np.sum(dout * np.sum(weights * x * centred, axis=1), axis=0)
    if shared:
        dalpha = np.array([dalpha.sum()])
    return dx, dalpha


def autopool(x: Sequence[float], alpha: float) -> float:
    """Auto-pool a single sequence: ``sum(x * softmax(alpha * x))``.

    ``alpha = 0`` is the arithmetic mean, large positive ``alpha`` tends to
    the max and large negative ``alpha`` to the min.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim != 1 or x.size == 0:
        raise ValueError("autopool needs a non-empty 1-d sequence")
    if not np.all(np.isfinite(x)) or not np.isfinite(alpha):
        raise ValueError("autopool inputs must be finite")
    out, _ = autopool_forward(x[None, :, None], np.array([float(alpha)]))
    return float(out[0, 0])


def l2_normalize(z):
    norms = np.sqrt(np.sum(z * z, axis=1))
    dead = norms == 0
    if np.any(dead):
        warnings.warn("normalizing a zero embedding; returning the first basis vector",
                      RuntimeWarning, stacklevel=3)
    safe = np.where(dead, 1.0, norms)
    y = z / safe[:, None]
    y[dead] = 0.0
    y[dead, 0] = 1.0
    return y, norms


def sigmoid(z):
    return np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))


# ---------------------------------------------------------------- network

@dataclass
class Cache:
    x: np.ndarray
    steps: list = field(default_factory=list)
    head: dict = field(default_factory=dict)


class Network:
    """A configured network and its parameters (a dict of float arrays)."""

    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray] | None = None, seed: int = 0):
        self.config = config
        self.params = init_params(config, seed) if params is None else params
        expected = init_params(config, 0)
        if set(self.params) != set(expected):
            raise ValueError(f"parameter names {sorted(self.params)} do not match the config")
        for name, value in expected.items():
            if self.params[name].shape != value.shape:
                raise ValueError(f"{name} has shape {self.params[name].shape}, expected {value.shape}")
            if not np.all(np.isfinite(self.params[name])):
                raise ValueError(f"{name} contains non-finite values")

    def copy(self) -> "Network":
        return Network(self.config, {k: v.copy() for k, v in self.params.items()})

    def _check(self, name, value):
        if not np.all(np.isfinite(value)):
            raise FloatingPointError(f"non-finite activation in layer {name}")

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, Cache]:
        """Run a batch of patches (B, F, T); returns outputs (B, out_dim)."""
        cfg, p = self.config, self.params
        x = np.asarray(x, dtype=float)
        if x.ndim != 3 or tuple(x.shape[1:]) != cfg.input_shape:
            raise ValueError(f"expected a batch of {cfg.input_shape} patches, got shape {x.shape}")
        cache = Cache(x)
        h = x[..., None]  # channels last
        for k, spec in enumerate(cfg.layers):
            z, cols = conv2d_forward(h, p[f"conv{k}.w"], p[f"conv{k}.b"])
            self._check(f"conv{k}", z)
            pooled, pcache = maxpool_forward(np.maximum(z, 0.0), spec.pool)
            cache.steps.append((h.shape, cols, z, pcache))
            h = pooled
        bsz, f, t, c = h.shape
        hc = cache.head
        hc["feat_shape"] = h.shape
        if cfg.temporal_pool == "max":
            flat = h.reshape(bsz, f * t, c)
            idx = np.argmax(flat, axis=1)
            feats = np.take_along_axis(flat, idx[:, None, :], axis=1)[:, 0, :]  # (B, C)
            hc.update(idx=idx, feats=feats, windows=flat)
            pre = feats @ p["dense.w"] + p["dense.b"]
        else:
            idx = np.argmax(h, axis=1)  # (B, T, C)
            frames = np.take_along_axis(h, idx[:, None], axis=1)[:, 0]  # max over frequency
            framed = frames @ p["dense.w"] + p["dense.b"]  # (B, T, D)
            self._check("dense", framed)
            pre, weights = autopool_forward(framed, p["autopool.alpha"])
            hc.update(idx=idx, frames=frames, framed=framed, weights=weights, pooled=pre, windows=h)
        self._check("head", pre)
        hc["pre"] = pre
        if cfg.mode == "embed":
            out, norms = l2_normalize(pre)
            hc["norms"] = norms
        else:
            out = sigmoid(pre)
        hc["out"] = out
        return out, cache

    def backward(self, cache: Cache | None, dout: np.ndarray) -> dict[str, np.ndarray]:
        """Parameter gradients given d(loss)/d(output) for the cached batch."""
        if cache is None or "out" not in cache.head:
            raise RuntimeError("backward needs the cache of a completed forward pass")
        cfg, p, hc = self.config, self.params, cache.head
        grads = {}
        out = hc["out"]
        dout = np.asarray(dout, dtype=float)
        if dout.shape != out.shape:
            raise ValueError(f"output gradient has shape {dout.shape}, expected {out.shape}")
        if cfg.mode == "embed":
            norms = hc["norms"]
            safe = np.where(norms == 0, np.inf, norms)
            dpre = (dout - out * np.sum(out * dout, axis=1, keepdims=True)) / safe[:, None]
        else:
            dpre = dout * out * (1.0 - out)
        bsz, f, t, c = hc["feat_shape"]
        if cfg.temporal_pool == "max":
            grads["dense.w"] = hc["feats"].T @ dpre
            grads["dense.b"] = dpre.sum(axis=0)
            dfeats = dpre @ p["dense.w"].T
            dflat = np.zeros((bsz, f * t, c))
            np.put_along_axis(dflat, hc["idx"][:, None, :], dfeats[:, None, :], axis=1)
            dh = dflat.reshape(bsz, f, t, c)
        else:
            dframed, dalpha = autopool_backward(dpre, hc["framed"], hc["weights"], hc["pooled"],
                                                p["autopool.alpha"], cfg.autopool_shared)
            grads["autopool.alpha"] = dalpha
            frames = hc["frames"]
            grads["dense.w"] = frames.reshape(-1, c).T @ dframed.reshape(-1, dframed.shape[-1])
            grads["dense.b"] = dframed.sum(axis=(0, 1))
            dframes = dframed @ p["dense.w"].T  # (B, T, C)
            dh = np.zeros((bsz, f, t, c))
            np.put_along_axis(dh, hc["idx"][:, None], dframes[:, None], axis=1)
        for k in reversed(range(len(cfg.layers))):
            spec = cfg.layers[k]
            x_shape, cols, z, pcache = cache.steps[k]
            da = maxpool_backward(dh, pcache, spec.pool)
            dz = da * (z > 0)
            dh, dw, db = conv2d_backward(dz, cols, x_shape, p[f"conv{k}.w"], need_dx=k > 0)
            grads[f"conv{k}.w"], grads[f"conv{k}.b"] = dw, db
        return {name: grads[name] for name in p}

    def kink_margin(self, cache: Cache) -> float:
        """Distance of the cached point from the nearest ReLU or max-pool kink."""
        windows = np.moveaxis(cache.head["windows"], 1, -1)
        margins = [_top_gap(windows)]
        for _, _, z, (xr, _, _) in cache.steps:
            margins.append(float(np.min(np.abs(z))))
            b, fo, ph, to, pw, c = xr.shape
            margins.append(_top_gap(xr.transpose(0, 1, 3, 5, 2, 4).reshape(b, fo, to, c, ph * pw)))
        return float(min(margins))


# ---------------------------------------------------------------- track level

def forward_embed(net: Network, patch: np.ndarray) -> np.ndarray:
    if net.config.mode != "embed":
        raise ValueError("forward_embed needs an embed-mode network")
    out, _ = net.forward(np.asarray(patch)[None])
    return out[0]


def forward_tags(net: Network, patch: np.ndarray) -> np.ndarray:
    if net.config.mode != "tag":
        raise ValueError("forward_tags needs a tag-mode network")
    out, _ = net.forward(np.asarray(patch)[None])
    return out[0]


def _track_mean(net, corpus, track_id, n_patches, seed):
    if n_patches < 1:
        raise ValueError("n_patches must be at least 1")
    patches = corpus.patches(track_id, n_patches, seed)
    out, _ = net.forward(patches)
    return out.mean(axis=0)


def track_embedding(net: Network, corpus, track_id: int, n_patches: int = 8, seed: int = 0) -> np.ndarray:
    """Mean of the embeddings of ``n_patches`` sampled patches (not re-normalized)."""
    if net.config.mode != "embed":
        raise ValueError("track_embedding needs an embed-mode network")
    return _track_mean(net, corpus, track_id, n_patches, seed)


def track_tag_estimate(net: Network, corpus, track_id: int, n_patches: int = 8, seed: int = 0) -> np.ndarray:
    """Mean of the tag likelihoods of ``n_patches`` sampled patches."""
    if net.config.mode != "tag":
        raise ValueError("track_tag_estimate needs a tag-mode network")
    return _track_mean(net, corpus, track_id, n_patches, seed)


# ---------------------------------------------------------------- checking

def _loss_and_grad(net, x, target, margin):
    out, cache = net.forward(x)
    if net.config.mode == "embed":
        loss, (ga, gp, gn) = triplet_loss(out[0], out[1], out[2], margin)
        dout = np.stack([ga, gp, gn])
    else:
        loss, dout = bce_loss(out, target)
        loss = float(np.sum(loss))
    return loss, cache, dout


def gradient_check(config: ModelConfig, seed: int = 0, step: float = 1e-5,
                   min_margin: float = 1e-3, max_tries: int = 100) -> float:
    """Worst relative error between backward and central differences.

    Embed-mode networks are checked through the triplet loss on an
    (anchor, positive, negative) batch; tag-mode networks through summed BCE
    on random binary targets. Points closer than ``min_margin`` to a ReLU or
    max-pool kink are redrawn, as is any triplet whose hinge is nearly closed.
    """
    ss = np.random.SeedSequence(seed)
    for _ in range(max_tries):
        (child,) = ss.spawn(1)
        rng = np.random.default_rng(child)
        net = Network(config, seed=int(rng.integers(2**31)))
        for name in net.params:
            if name.endswith(".b") or name == "autopool.alpha":
                net.params[name] = rng.normal(0, 0.3, size=net.params[name].shape)
        x = rng.normal(size=(3 if config.mode == "embed" else 2, *config.input_shape))
        target = rng.integers(0, 2, size=(x.shape[0], config.out_dim)).astype(float)
        out, cache = net.forward(x)
        if net.kink_margin(cache) < min_margin:
            continue
        margin = 0.5
        if config.mode == "embed":
            d_ap = np.sum((out[0] - out[1]) ** 2)
            d_an = np.sum((out[0] - out[2]) ** 2)
            margin = max(0.5, d_an - d_ap + 0.5)
        break
    else:
        raise RuntimeError("could not find a non-degenerate point for the gradient check")

    _, cache, dout = _loss_and_grad(net, x, target, margin)
    analytic = net.backward(cache, dout)
    worst = 0.0
    for name, value in net.params.items():
        flat = value.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + step
            up = _loss_and_grad(net, x, target, margin)[0]
            flat[k] = orig - step
            down = _loss_and_grad(net, x, target, margin)[0]
            flat[k] = orig
            numeric = (up - down) / (2 * step)
            a = analytic[name].reshape(-1)[k]
            # the floor keeps round-off on exactly-zero components from counting
            denom = max(abs(a), abs(numeric), 1e-6)
            worst = max(worst, abs(a - numeric) / denom)
    return worst
