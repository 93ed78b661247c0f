"""Lightweight encoder-decoder pixel classifier in plain numpy (float64).

Architecture (all 3x3 convs zero-padded to keep spatial size; ReLU after
every conv except the last)::

    E1 3x3/2  3->16   E2 3x3/2 16->32   E3 3x3/1 32->32        (encoder)
    D1 3x3/1 32->16 -> up x2 -> D2 3x3/1 16->16 -> up x2 -> D3 1x1 16->2

Weights are stored as (kh, kw, c_in, c_out); images as (B, H, W, C).
Upsampling is fixed bilinear with half-pixel centres and edge clamping.
"""
from __future__ import annotations

import hashlib
import json
import zipfile
from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError, ParamsLoadError
from .labels import FREE, OBSTACLE

# name, kernel, c_in, c_out, stride, part
ARCHITECTURE = (
    ("E1", 3, 3, 16, 2, "encoder"),
    ("E2", 3, 16, 32, 2, "encoder"),
    ("E3", 3, 32, 32, 1, "encoder"),
    ("D1", 3, 32, 16, 1, "decoder"),
    ("D2", 3, 16, 16, 1, "decoder"),
    ("D3", 1, 16, 2, 1, "decoder"),
)
NUM_CLASSES = 2
FORMAT_VERSION = 1


def architecture_fingerprint(arch=ARCHITECTURE) -> str:
    return hashlib.sha256(repr(arch).encode()).hexdigest()[:16]


def param_shapes(arch=ARCHITECTURE) -> dict[str, tuple]:
    shapes = {}
    for name, k, cin, cout, _, _ in arch:
        shapes[f"{name}.w"] = (k, k, cin, cout)
        shapes[f"{name}.b"] = (cout,)
    return shapes


ENCODER_KEYS = tuple(k for name, *_, part in ARCHITECTURE if part == "encoder" for k in (f"{name}.w", f"{name}.b"))
DECODER_KEYS = tuple(k for name, *_, part in ARCHITECTURE if part == "decoder" for k in (f"{name}.w", f"{name}.b"))


class NetworkParams(dict):
    """Mapping ``"<layer>.w" / "<layer>.b"`` -> float64 array."""

    def copy(self) -> "NetworkParams":
        return NetworkParams({k: v.copy() for k, v in self.items()})

    def zeros_like(self) -> "NetworkParams":
        return NetworkParams({k: np.zeros_like(v) for k, v in self.items()})

    def subset_bytes(self, keys) -> bytes:
        return b"".join(np.ascontiguousarray(self[k]).tobytes() for k in keys)

    def digest(self, keys=None) -> str:
        keys = sorted(self) if keys is None else keys
        return hashlib.sha256(self.subset_bytes(keys)).hexdigest()

    def validate(self) -> None:
        shapes = param_shapes()
        if set(self) != set(shapes):
            raise InvalidInputError(f"parameter names {sorted(self)} != {sorted(shapes)}")
        for k, shape in shapes.items():
            if self[k].shape != shape:
                raise InvalidInputError(f"{k}: shape {self[k].shape} != {shape}")


# ---------------------------------------------------------------- init / io

def xavier_init(shape, rng_seed=0) -> np.ndarray:
    """Uniform Glorot init on [-a, a], a = sqrt(6 / (fan_in + fan_out)).

    For conv kernels (kh, kw, c_in, c_out) the receptive field multiplies
    both fans. ``rng_seed`` may be an int or a numpy Generator.
    """
    shape = tuple(shape)
    if len(shape) == 2:
        fan_in, fan_out = shape
    elif len(shape) == 4:
        rf = shape[0] * shape[1]
        fan_in, fan_out = rf * shape[2], rf * shape[3]
    else:
        raise InvalidInputError(f"cannot derive fans from shape {shape}")
    a = np.sqrt(6.0 / (fan_in + fan_out))
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    return rng.uniform(-a, a, size=shape)


def init_params(seed=0) -> NetworkParams:
    rng = np.random.default_rng(seed)
    params = NetworkParams()
    for key, shape in param_shapes().items():
        params[key] = xavier_init(shape, rng) if key.endswith(".w") else np.zeros(shape)
    return params


def reinit_decoder(params: NetworkParams, seed=0) -> NetworkParams:
    """Copy of ``params`` with a fresh Xavier decoder and zero decoder biases."""
    rng = np.random.default_rng(seed)
    out = params.copy()
    for key in DECODER_KEYS:
        out[key] = xavier_init(out[key].shape, rng) if key.endswith(".w") else np.zeros_like(out[key])
    return out


def save_params(params: NetworkParams, path, metadata: dict | None = None) -> None:
    """Write an ``.npz`` container; see README for the layout."""
    params.validate()
    meta = {
        "format_version": FORMAT_VERSION,
        "fingerprint": architecture_fingerprint(),
        "layers": list(param_shapes()),
        "metadata": metadata or {},
    }
    arrays = {k: np.ascontiguousarray(v, dtype=np.float64) for k, v in params.items()}
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta, sort_keys=True)), **arrays)


def load_params(path, with_metadata=False):
    try:
        with np.load(path, allow_pickle=False) as data:
            files = set(data.files)
            if "__meta__" not in files:
                raise ParamsLoadError(f"{path}: missing __meta__ record")
            meta = json.loads(str(data["__meta__"]))
            arrays = {k: data[k] for k in files if k != "__meta__"}
    except ParamsLoadError:
        raise
    except (OSError, ValueError, EOFError, KeyError, zipfile.BadZipFile, json.JSONDecodeError) as exc:
        raise ParamsLoadError(f"{path}: unreadable parameter file ({exc})") from exc
    if meta.get("format_version") != FORMAT_VERSION:
        raise ParamsLoadError(f"{path}: unsupported format version {meta.get('format_version')}")
    if meta.get("fingerprint") != architecture_fingerprint():
        raise ParamsLoadError(
            f"{path}: architecture fingerprint {meta.get('fingerprint')} != {architecture_fingerprint()}")
    order = [k for k in param_shapes() if k in arrays] + sorted(k for k in arrays if k not in param_shapes())
    params = NetworkParams({k: np.asarray(arrays[k], dtype=np.float64) for k in order})
    try:
        params.validate()
    except InvalidInputError as exc:
        raise ParamsLoadError(f"{path}: {exc}") from exc
    return (params, meta.get("metadata", {})) if with_metadata else params


# ---------------------------------------------------------------- layers

def _pad(x, p):
    return np.pad(x, ((0, 0), (p, p), (p, p), (0, 0))) if p else x


def _im2col(x, k, stride):
    b, h, w, c = x.shape
    ho, wo = h // stride, w // stride
    if k == 1:
        return x[:, ::stride, ::stride, :]
    xp = _pad(x, k // 2)
    cols = [xp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] for i in range(k) for j in range(k)]
    return np.concatenate(cols, axis=-1)


def conv_forward(x, w, b, stride=1):
    """Returns (output, cols); ``cols`` is the im2col buffer needed by backward."""
    k = w.shape[0]
    cols = _im2col(x, k, stride)
    out = cols @ w.reshape(-1, w.shape[-1]) + b
    return out, cols


def conv_backward(grad_out, cols, x_shape, w, stride=1, need_input_grad=True):
    k, _, cin, cout = w.shape
    g2 = grad_out.reshape(-1, cout)
    dw = (cols.reshape(-1, k * k * cin).T @ g2).reshape(w.shape)
    db = g2.sum(axis=0)
    if not need_input_grad:
        return None, dw, db
    dcols = grad_out @ w.reshape(-1, cout).T
    if k == 1 and stride == 1:
        return dcols, dw, db
    b, h, wd, _ = x_shape
    ho, wo = h // stride, wd // stride
    p = k // 2
    dxp = np.zeros((b, h + 2 * p, wd + 2 * p, cin))
    for n, (i, j) in enumerate((i, j) for i in range(k) for j in range(k)):
        dxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += dcols[..., n * cin:(n + 1) * cin]
    return dxp[:, p:p + h, p:p + wd, :], dw, db


_UPSAMPLE_CACHE: dict[int, np.ndarray] = {}


def upsample_matrix(n: int) -> np.ndarray:
    """(2n, n) bilinear interpolation matrix, half-pixel centres, clamped edges."""
    if n not in _UPSAMPLE_CACHE:
        m = np.zeros((2 * n, n))
        for i in range(2 * n):
            s = min(max((i + 0.5) / 2.0 - 0.5, 0.0), n - 1.0)
            i0 = int(np.floor(s))
            i1 = min(i0 + 1, n - 1)
            frac = s - i0
            m[i, i0] += 1.0 - frac
            m[i, i1] += frac
        m.setflags(write=False)
        _UPSAMPLE_CACHE[n] = m
    return _UPSAMPLE_CACHE[n]


def upsample2x(x):
    b, h, w, c = x.shape
    y = np.matmul(upsample_matrix(h), x.reshape(b, h, w * c)).reshape(b * 2 * h, w, c)
    return np.matmul(upsample_matrix(w), y).reshape(b, 2 * h, 2 * w, c)


def upsample2x_backward(g):
    b, h2, w2, c = g.shape
    h, w = h2 // 2, w2 // 2
    y = np.matmul(upsample_matrix(w).T, g.reshape(b * h2, w2, c)).reshape(b, h2, w * c)
    return np.matmul(upsample_matrix(h).T, y).reshape(b, h, w, c)


# ---------------------------------------------------------------- network

def _as_batch(image):
    x = np.asarray(image, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or x.shape[-1] != 3:
        raise InvalidInputError(f"expected (H, W, 3) or (B, H, W, 3) image, got {x.shape}")
    if x.shape[1] % 4 or x.shape[2] % 4:
        raise InvalidInputError(f"image size {x.shape[1]}x{x.shape[2]} not divisible by 4")
    return x


def normalize_rgb(rgb) -> np.ndarray:
    """uint8 or [0, 1] float RGB -> float64 in [-0.5, 0.5]."""
    rgb = np.asarray(rgb)
    if rgb.dtype == np.uint8:
        return rgb.astype(np.float64) / 255.0 - 0.5
    return rgb.astype(np.float64) - 0.5


def encode(params, image, cache=None):
    """Encoder feature map (B, H/4, W/4, 32)."""
    x = _as_batch(image)
    for name in ("E1", "E2", "E3"):
        stride = 2 if name != "E3" else 1
        z, cols = conv_forward(x, params[f"{name}.w"], params[f"{name}.b"], stride)
        if cache is not None:
            cache[name] = (x.shape, cols, z)
        x = np.maximum(z, 0.0)
    return x


def decode(params, features, cache=None):
    """Decoder logits at 4x the feature resolution."""
    z1, c1 = conv_forward(features, params["D1.w"], params["D1.b"])
    a1 = np.maximum(z1, 0.0)
    u1 = upsample2x(a1)
    z2, c2 = conv_forward(u1, params["D2.w"], params["D2.b"])
    a2 = np.maximum(z2, 0.0)
    u2 = upsample2x(a2)
    logits, c3 = conv_forward(u2, params["D3.w"], params["D3.b"])
    if cache is not None:
        cache["D1"] = (features.shape, c1, z1)
        cache["D2"] = (u1.shape, c2, z2)
        cache["D3"] = (u2.shape, c3, None)
    return logits


def forward(params, image, cache=None):
    """Logits (B, H, W, 2) for a normalized image or batch of images."""
    x = _as_batch(image)
    logits = decode(params, encode(params, x, cache), cache)
    return logits if np.ndim(image) == 4 else logits[0]


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class LossConfig:
    """``class_weights`` = (w_free, w_obstacle); None means inverse frequency
    of the labels passed to the loss (i.e. recomputed per mini-batch)."""

    class_weights: tuple | None = None

    def __post_init__(self):
        if self.class_weights is not None:
            w = tuple(float(v) for v in self.class_weights)
            if len(w) != NUM_CLASSES or min(w) <= 0:
                raise InvalidInputError("class_weights must be two positive numbers")
            self.class_weights = w


def inverse_frequency_weights(labels) -> np.ndarray:
    """w_c = N / (K * n_c) over the K classes present; 1.0 for absent classes."""
    labels = np.asarray(labels)
    counts = np.array([np.count_nonzero(labels == FREE), np.count_nonzero(labels == OBSTACLE)], dtype=np.float64)
    present = counts > 0
    w = np.ones(NUM_CLASSES)
    if present.any():
        w[present] = counts.sum() / (present.sum() * counts[present])
    return w


def loss_and_logit_grad(logits, labels, cfg: LossConfig | None = None):
    """Weighted softmax cross-entropy averaged over labelled (non-Unknown) pixels."""
    cfg = cfg or LossConfig()
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    if labels.shape != logits.shape[:-1]:
        raise InvalidInputError(f"labels {labels.shape} do not match logits {logits.shape}")
    mask = (labels == FREE) | (labels == OBSTACLE)
    n = int(np.count_nonzero(mask))
    grad = np.zeros_like(logits)
    if n == 0:
        return 0.0, grad
    weights = np.asarray(cfg.class_weights) if cfg.class_weights is not None else inverse_frequency_weights(labels)
    y = labels[mask].astype(np.int64)
    z = logits[mask]
    z = z - z.max(axis=-1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=-1))
    nll = logsum - z[np.arange(n), y]
    w = weights[y]
    loss = float(np.sum(w * nll) / n)
    p = np.exp(z - logsum[:, None])
    p[np.arange(n), y] -= 1.0
    grad[mask] = p * (w / n)[:, None]
    return loss, grad


def loss(logits, labels, cfg: LossConfig | None = None) -> float:
    return loss_and_logit_grad(logits, labels, cfg)[0]


def backward_from_logits(params, cache, grad_logits, train_encoder=True) -> NetworkParams:
    """Backpropagate ``grad_logits`` through a cached forward pass."""
    grads = params.zeros_like()
    shape, cols, _ = cache["D3"]
    g, grads["D3.w"], grads["D3.b"] = conv_backward(grad_logits, cols, shape, params["D3.w"])
    g = upsample2x_backward(g)
    shape, cols, z = cache["D2"]
    g = g * (z > 0)
    g, grads["D2.w"], grads["D2.b"] = conv_backward(g, cols, shape, params["D2.w"])
    g = upsample2x_backward(g)
    shape, cols, z = cache["D1"]
    g = g * (z > 0)
    g, grads["D1.w"], grads["D1.b"] = conv_backward(g, cols, shape, params["D1.w"], need_input_grad=train_encoder)
    if not train_encoder:
        return grads
    for name, stride in (("E3", 1), ("E2", 2), ("E1", 2)):
        shape, cols, z = cache[name]
        g = g * (z > 0)
        g, grads[f"{name}.w"], grads[f"{name}.b"] = conv_backward(
            g, cols, shape, params[f"{name}.w"], stride, need_input_grad=name != "E1")
    return grads


def loss_and_grads(params, image, labels, cfg: LossConfig | None = None, train_encoder=True):
    """(loss, gradients) for an image or batch. Encoder grads are zero when
    ``train_encoder`` is False."""
    batched = np.ndim(image) == 4
    labels = np.asarray(labels)
    if not batched:
        labels = labels[None]
    cache = {}
    logits = forward(params, image if batched else np.asarray(image)[None], cache)
    value, g = loss_and_logit_grad(logits, labels, cfg)
    return value, backward_from_logits(params, cache, g, train_encoder)


def backward(params, image, labels, cfg: LossConfig | None = None) -> NetworkParams:
    return loss_and_grads(params, image, labels, cfg)[1]


def sgd_step(params, grads, lr, momentum=0.0, velocity=None, trainable=None):
    """Heavy-ball SGD: v <- momentum * v + g; p <- p - lr * v.

    Returns new (params, velocity); inputs are not modified. Only keys in
    ``trainable`` (default: all) are updated.
    """
    if not lr > 0:
        raise InvalidInputError("lr must be positive")
    if not 0 <= momentum < 1:
        raise InvalidInputError("momentum must be in [0, 1)")
    keys = list(params) if trainable is None else list(trainable)
    new_params = NetworkParams(params)
    new_velocity = NetworkParams(velocity) if velocity is not None else NetworkParams()
    for k in keys:
        v = new_velocity.get(k)
        v = grads[k].copy() if v is None else momentum * v + grads[k]
        new_velocity[k] = v
        new_params[k] = params[k] - lr * v
    return new_params, new_velocity
