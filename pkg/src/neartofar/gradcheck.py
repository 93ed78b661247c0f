"""Finite-difference verification of the analytic backward pass."""
from __future__ import annotations

import numpy as np

from .labels import UNKNOWN
from .network import LossConfig, NetworkParams, forward, init_params, loss, loss_and_grads, xavier_init

STEP = 1e-4
TOLERANCE = 1e-3
# denominators below this are treated as exact zeros
ABS_FLOOR = 1e-8
# a central difference straddling a ReLU kink measures neither one-sided
# slope, so instances keep every pre-activation at least this far from zero
KINK_MARGIN = 3e-4
MAX_DRAWS = 1000


def min_preactivation(params, image) -> float:
    """Smallest |pre-activation| over every ReLU in the network."""
    cache = {}
    forward(params, np.asarray(image)[None], cache)
    return min(float(np.abs(cache[name][2]).min()) for name in ("E1", "E2", "E3", "D1", "D2"))


def make_instance(seed: int = 0, size: int = 8):
    """Seeded (params, image, labels, loss cfg) with live ReLUs and some Unknown pixels.

    Draws are repeated from the same generator until no pre-activation lies
    within KINK_MARGIN of zero.
    """
    rng = np.random.default_rng(seed)
    params = init_params(seed)
    for _ in range(MAX_DRAWS):
        for k in params:
            if k.endswith(".b"):
                params[k] = rng.uniform(-0.1, 0.1, params[k].shape)
        image = rng.uniform(-0.5, 0.5, (size, size, 3))
        if min_preactivation(params, image) >= KINK_MARGIN:
            break
        params = NetworkParams({k: xavier_init(v.shape, rng) if k.endswith(".w") else v
                                for k, v in params.items()})
    else:
        raise RuntimeError(f"no kink-free instance for seed {seed} in {MAX_DRAWS} draws")
    labels = rng.integers(0, 2, (size, size)).astype(np.uint8)
    labels[rng.random((size, size)) < 0.2] = UNKNOWN
    return params, image, labels, LossConfig((1.0, 1.7))


def numeric_gradient(params, image, labels, cfg, key, step=STEP):
    p = params[key]
    flat = p.reshape(-1)
    out = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = loss(forward(params, image), labels, cfg)
        flat[i] = orig - step
        down = loss(forward(params, image), labels, cfg)
        flat[i] = orig
        out[i] = (up - down) / (2 * step)
    return out.reshape(p.shape)


def relative_error(analytic, numeric) -> float:
    """Largest element-wise |a - n| / max(|a|, |n|, ABS_FLOOR)."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), ABS_FLOOR)
    return float(np.max(np.abs(analytic - numeric) / denom))


def run_gradcheck(seed: int = 0, corrupt: str | None = None) -> dict[str, float]:
    """Max relative error per parameter tensor.

    ``corrupt`` names a tensor whose analytic gradient is deliberately
    perturbed (negative control).
    """
    params, image, labels, cfg = make_instance(seed)
    _, grads = loss_and_grads(params, image, labels, cfg)
    if corrupt is not None:
        grads[corrupt] = grads[corrupt] * 1.01 + 1e-3
    return {key: relative_error(grads[key], numeric_gradient(params, image, labels, cfg, key)) for key in params}
