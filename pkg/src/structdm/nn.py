"""Minimal numpy neural core: dense layers, ReLU, dropout, masked softmax
cross-entropy, Adam, checkpoints and finite-difference checking.

Everything is float64 and batched along the leading axes; backward passes are
written out by hand.
"""
from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

CHECKPOINT_FORMAT = "structdm-ckpt-1"


class DimensionError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


def make_rng(seed) -> np.random.Generator:
    """Counter-based (Philox) generator; the same seed replays the same stream."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))


def glorot_uniform(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in))


@dataclass
class DenseLayer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)

    @classmethod
    def init(cls, rng: np.random.Generator, n_in: int, n_out: int) -> "DenseLayer":
        return cls(glorot_uniform(rng, n_out, n_in), np.zeros(n_out))

    @property
    def shape(self) -> tuple[int, int]:
        return self.weight.shape

    def forward(self, x: np.ndarray) -> np.ndarray:
        return dense_forward(self, x)

    def backward(self, x: np.ndarray, upstream: np.ndarray):
        return dense_backward(self, x, upstream)


def dense_forward(layer: DenseLayer, x: np.ndarray) -> np.ndarray:
    if x.shape[-1] != layer.weight.shape[1]:
        raise DimensionError(f"input width {x.shape[-1]} != layer fan-in {layer.weight.shape[1]}")
    return x @ layer.weight.T + layer.bias


def dense_backward(layer: DenseLayer, x: np.ndarray, upstream: np.ndarray):
    """Returns ``(grad_input, grad_weight, grad_bias)``; leading axes are summed."""
    n_out, n_in = layer.weight.shape
    if upstream.shape[-1] != n_out or x.shape[-1] != n_in:
        raise DimensionError("gradient/input shapes do not match the layer")
    g2 = upstream.reshape(-1, n_out)
    grad_w = g2.T @ x.reshape(-1, n_in)
    grad_b = g2.sum(axis=0)
    return upstream @ layer.weight, grad_w, grad_b


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(x: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    return upstream * (x > 0)


def dropout(x: np.ndarray, rate: float, training: bool, rng: np.random.Generator | None):
    """Inverted dropout. Returns ``(output, scale_mask)``; the mask is ``None`` at inference."""
    if not 0.0 <= rate < 1.0:
        raise ValueError("dropout rate must lie in [0, 1)")
    if not training or rate == 0.0:
        return x, None
    keep = rng.random(x.shape, dtype=np.float32) >= rate
    scale = keep / (1.0 - rate)
    return x * scale, scale


def dropout_backward(upstream: np.ndarray, scale: np.ndarray | None) -> np.ndarray:
    return upstream if scale is None else upstream * scale


def masked_softmax(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    z = np.where(mask, logits, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def masked_softmax_xent(logits: np.ndarray, mask: np.ndarray, target):
    """Cross-entropy of ``target`` under a softmax restricted to ``mask``.

    Works on a single vector or a batch ``(B, K)``. Returns ``(loss, grad)``
    where ``loss`` is per example and ``grad = p - onehot(target)`` is zero on
    masked entries.
    """
    logits = np.asarray(logits, dtype=float)
    mask = np.asarray(mask, dtype=bool)
    single = logits.ndim == 1
    if single:
        logits, mask, target = logits[None], mask[None], np.array([target])
    target = np.asarray(target, dtype=int)
    rows = np.arange(logits.shape[0])
    if not mask[rows, target].all():
        raise ValueError("target action is masked out")
    if not mask.any(axis=-1).all():
        raise ValueError("mask has no valid entry")
    z = np.where(mask, logits, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e.sum(axis=-1, keepdims=True)
    p = e / s
    loss = np.log(s[:, 0]) - z[rows, target]
    grad = p.copy()
    grad[rows, target] -= 1.0
    if single:
        return float(loss[0]), grad[0]
    return loss, grad


@dataclass
class AdamState:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray], state: AdamState) -> None:
    """Bias-corrected Adam update, in place on ``params`` and ``state``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for {name!r} at step {state.step + 1}")
        if g.shape != params[name].shape:
            raise DimensionError(f"gradient shape {g.shape} != parameter {name!r} {params[name].shape}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, g in grads.items():
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        params[name] -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# checkpoints: a zip of .npy tensors plus a JSON header, with fixed timestamps
# so that save -> load -> save is byte-identical

_EPOCH = (1980, 1, 1, 0, 0, 0)


def _entry(name: str) -> zipfile.ZipInfo:
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    return info


def save_checkpoint(path, tensors: Mapping[str, np.ndarray], meta: Mapping, adam: Mapping[str, AdamState] | None = None) -> None:
    header = {"format": CHECKPOINT_FORMAT, "meta": dict(meta), "tensors": sorted(tensors), "adam": {}}
    blobs: dict[str, np.ndarray] = {f"param/{k}": v for k, v in tensors.items()}
    for key, st in (adam or {}).items():
        header["adam"][key] = {
            "lr": st.lr, "beta1": st.beta1, "beta2": st.beta2, "eps": st.eps, "step": st.step,
            "names": sorted(st.m),
        }
        for name in st.m:
            blobs[f"adam/{key}/m/{name}"] = st.m[name]
            blobs[f"adam/{key}/v/{name}"] = st.v[name]
    with zipfile.ZipFile(path, "w") as zf:
        zf.writestr(_entry("header.json"), json.dumps(header, sort_keys=True, indent=1))
        for name in sorted(blobs):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(blobs[name], dtype=np.float64), allow_pickle=False)
            zf.writestr(_entry(name + ".npy"), buf.getvalue())


def load_checkpoint(path):
    """Returns ``(tensors, meta, adam_states)``."""
    try:
        zf = zipfile.ZipFile(path)
    except (zipfile.BadZipFile, FileNotFoundError) as exc:
        raise CheckpointError(f"cannot open checkpoint {path}: {exc}") from None
    with zf:
        header = json.loads(zf.read("header.json"))
        if header.get("format") != CHECKPOINT_FORMAT:
            raise CheckpointError(f"unsupported checkpoint format {header.get('format')!r}")

        def read(name):
            return np.lib.format.read_array(io.BytesIO(zf.read(name + ".npy")), allow_pickle=False)

        tensors = {k: read(f"param/{k}") for k in header["tensors"]}
        adam = {}
        for key, raw in header["adam"].items():
            st = AdamState(lr=raw["lr"], beta1=raw["beta1"], beta2=raw["beta2"], eps=raw["eps"], step=raw["step"])
            for name in raw["names"]:
                st.m[name] = read(f"adam/{key}/m/{name}")
                st.v[name] = read(f"adam/{key}/v/{name}")
            adam[key] = st
    return tensors, header["meta"], adam


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    """Largest elementwise ``|a-b| / max(|a|, |b|, floor)``."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def numeric_gradient(f: Callable[[], float], param: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of the scalar ``f()`` w.r.t. ``param`` (perturbed in place)."""
    grad = np.zeros_like(param)
    it = np.nditer(param, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = param[idx]
        param[idx] = orig + h
        up = f()
        param[idx] = orig - h
        down = f()
        param[idx] = orig
        grad[idx] = (up - down) / (2 * h)
    return grad


def gradient_check(
    f: Callable[[], float],
    params: Mapping[str, np.ndarray],
    analytic: Mapping[str, np.ndarray],
    h: float = 1e-5,
) -> float:
    """Max relative error between ``analytic`` and central differences over all params."""
    worst = 0.0
    for name, p in params.items():
        worst = max(worst, relative_error(analytic[name], numeric_gradient(f, p, h)))
    return worst
