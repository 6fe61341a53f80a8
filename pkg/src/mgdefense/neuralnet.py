"""Small fully connected network in plain numpy.

ReLU hidden layers, linear output, mean-squared-error loss, hand-written
backpropagation and an Adam optimizer. Parameters serialize to JSON with
exact float round-trip.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

CHECKPOINT_FORMAT = "mgdefense-mlp"
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


@dataclass
class MlpWeights:
    """Layer parameters ``[(W, b), ...]`` with ``W`` shaped ``(fan_in, fan_out)``."""

    layers: list
    sizes: tuple
    activations: tuple

    def __post_init__(self):
        if len(self.layers) != len(self.sizes) - 1 or len(self.activations) != len(self.layers):
            raise ShapeError("layer list does not match the architecture")
        for i, (W, b) in enumerate(self.layers):
            if W.shape != (self.sizes[i], self.sizes[i + 1]) or b.shape != (self.sizes[i + 1],):
                raise ShapeError(f"layer {i} has shapes {W.shape}, {b.shape}")
        for a in self.activations:
            if a not in ("relu", "linear"):
                raise ShapeError(f"unknown activation {a!r}")

    @property
    def n_in(self) -> int:
        return self.sizes[0]

    @property
    def n_out(self) -> int:
        return self.sizes[-1]

    def params(self):
        for W, b in self.layers:
            yield W
            yield b

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(p)) for p in self.params())


def init_mlp(sizes, rng) -> MlpWeights:
    """Uniform fan-in initialization, ReLU hidden layers and a linear output."""
    sizes = tuple(int(s) for s in sizes)
    if len(sizes) < 2 or min(sizes) < 1:
        raise ShapeError(f"invalid architecture {sizes}")
    layers = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        lim = 1.0 / np.sqrt(fan_in)
        W = rng.uniform(-lim, lim, size=(fan_in, fan_out))
        b = rng.uniform(-lim, lim, size=fan_out)
        layers.append((W, b))
    acts = ("relu",) * (len(sizes) - 2) + ("linear",)
    return MlpWeights(layers, sizes, acts)


def _forward_cache(weights: MlpWeights, x):
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != weights.n_in:
        raise ShapeError(f"input has {x.shape[-1]} features, network expects {weights.n_in}")
    acts = [x]
    pre = []
    h = x
    for (W, b), a in zip(weights.layers, weights.activations):
        z = h @ W + b
        pre.append(z)
        h = np.maximum(z, 0.0) if a == "relu" else z
        acts.append(h)
    return acts, pre


def forward(weights: MlpWeights, x) -> np.ndarray:
    """Network output for one input vector or a ``(batch, n_in)`` array."""
    return _forward_cache(weights, x)[0][-1]


def mse_loss(predicted, target) -> float:
    p = np.asarray(predicted, dtype=float)
    t = np.asarray(target, dtype=float)
    if p.shape != t.shape:
        raise ShapeError(f"prediction shape {p.shape} != target shape {t.shape}")
    if p.size == 0:
        raise ShapeError("empty loss input")
    d = p - t
    return float(np.mean(d * d))


def mse_grad(predicted, target) -> np.ndarray:
    p = np.asarray(predicted, dtype=float)
    t = np.asarray(target, dtype=float)
    if p.shape != t.shape:
        raise ShapeError(f"prediction shape {p.shape} != target shape {t.shape}")
    return 2.0 * (p - t) / p.size


def backward(weights: MlpWeights, x, grad_out):
    """Gradients ``[(dW, db), ...]`` of ``sum(grad_out * forward(x))``.

    ``x`` may be a single vector or a batch; ``grad_out`` must match the
    output shape.
    """
    acts, pre = _forward_cache(weights, x)
    g = np.asarray(grad_out, dtype=float)
    if g.shape != acts[-1].shape:
        raise ShapeError(f"upstream gradient shape {g.shape} != output shape {acts[-1].shape}")
    grads = [None] * len(weights.layers)
    for i in range(len(weights.layers) - 1, -1, -1):
        if weights.activations[i] == "relu":
            g = g * (pre[i] > 0)
        h = acts[i]
        if h.ndim == 1:
            dW = np.outer(h, g)
            db = g.copy()
        else:
            dW = h.T @ g
            db = g.sum(axis=0)
        grads[i] = (dW, db)
        if i:
            g = g @ weights.layers[i][0].T
    return grads


@dataclass
class OptimizerState:
    m: list
    v: list
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_weights(cls, weights: MlpWeights, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        m = [np.zeros_like(p) for p in weights.params()]
        v = [np.zeros_like(p) for p in weights.params()]
        return cls(m, v, 0, lr, beta1, beta2, eps)


def adam_step(weights: MlpWeights, grads, opt: OptimizerState) -> MlpWeights:
    """One bias-corrected Adam update; returns new weights and advances ``opt``."""
    flat = [g for pair in grads for g in pair]
    if len(flat) != len(opt.m):
        raise ShapeError("gradient list does not match optimizer state")
    opt.step += 1
    b1, b2 = opt.beta1, opt.beta2
    c1 = 1.0 - b1 ** opt.step
    c2 = 1.0 - b2 ** opt.step
    new = []
    for i, (p, g) in enumerate(zip(weights.params(), flat)):
        if g.shape != p.shape:
            raise ShapeError(f"gradient {i} shape {g.shape} != parameter shape {p.shape}")
        opt.m[i] = b1 * opt.m[i] + (1.0 - b1) * g
        opt.v[i] = b2 * opt.v[i] + (1.0 - b2) * g * g
        m_hat = opt.m[i] / c1
        v_hat = opt.v[i] / c2
        new.append(p - opt.lr * m_hat / (np.sqrt(v_hat) + opt.eps))
    layers = [(new[2 * i], new[2 * i + 1]) for i in range(len(weights.layers))]
    out = MlpWeights(layers, weights.sizes, weights.activations)
    if not out.is_finite():
        raise NonFiniteError(f"non-finite parameter after Adam step {opt.step}")
    return out


def clone(weights: MlpWeights) -> MlpWeights:
    return MlpWeights([(W.copy(), b.copy()) for W, b in weights.layers],
                      tuple(weights.sizes), tuple(weights.activations))


def weights_to_dict(weights: MlpWeights) -> dict:
    return {
        "sizes": list(weights.sizes),
        "activations": list(weights.activations),
        "layers": [{"W": W.ravel().tolist(), "b": b.tolist()} for W, b in weights.layers],
    }


def weights_from_dict(d) -> MlpWeights:
    sizes = tuple(int(s) for s in d["sizes"])
    layers = []
    for i, layer in enumerate(d["layers"]):
        W = np.array(layer["W"], dtype=float).reshape(sizes[i], sizes[i + 1])
        b = np.array(layer["b"], dtype=float)
        layers.append((W, b))
    return MlpWeights(layers, sizes, tuple(d["activations"]))


def save_checkpoint(path, weights: MlpWeights, meta=None):
    """Write weights (row-major) and optional metadata as JSON."""
    blob = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION,
            "weights": weights_to_dict(weights), "meta": meta or {}}
    with open(path, "w") as fh:
        json.dump(blob, fh)
        fh.write("\n")


def load_checkpoint(path):
    """Returns ``(weights, meta)``."""
    with open(path) as fh:
        blob = json.load(fh)
    if blob.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} checkpoint")
    if blob.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {blob.get('version')}")
    return weights_from_dict(blob["weights"]), blob.get("meta", {})
