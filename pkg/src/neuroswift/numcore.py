"""Dense float64 kernels with hand-written backward passes.

Tensors are plain ``numpy.ndarray`` objects of dtype float64. Every layer comes
as a ``forward`` returning ``(out, cache)`` and a matching ``*_backward`` that
takes the upstream gradient and the cache. Gradient buffers belong to the
caller; nothing in here mutates parameters.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np
from scipy.special import expit

from .errors import ConfigurationError, DimensionError, NumericalError

MASK64 = (1 << 64) - 1
LAYER_KINDS = ("linear", "layernorm", "groupnorm", "attention")
GROUP_TAGS = ("fc_input", "core", "head", "norm")


def ensure_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericalError(f"non-finite values in {what}")
    return x


def as_tensor(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


# --------------------------------------------------------------------------- rng


def stable_id(name: str | int) -> int:
    """64-bit stream id for a name, stable across processes and platforms."""
    if isinstance(name, (int, np.integer)):
        return int(name) & MASK64
    digest = hashlib.blake2b(str(name).encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


class RngStream:
    """Counter-based random stream keyed by ``(seed, stream_id)``.

    Backed by Philox, so the pair is literally the cipher key and streams with
    different ids are independent. ``counter`` counts values handed out.
    """

    def __init__(self, seed: int, stream_id: int | str = 0):
        self.seed = int(seed) & MASK64
        self.stream_id = stable_id(stream_id)
        key = np.array([self.seed, self.stream_id], dtype=np.uint64)
        self._gen = np.random.Generator(np.random.Philox(key=key))
        self.counter = 0

    def __repr__(self):
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id}, counter={self.counter})"

    def child(self, name: str | int) -> "RngStream":
        """Derived stream; depends only on (seed, stream_id, name), not on draws made so far."""
        mixed = hashlib.blake2b(
            f"{self.stream_id}/{name}".encode(), digest_size=8
        ).digest()
        return RngStream(self.seed, int.from_bytes(mixed, "little"))

    def _count(self, shape) -> None:
        self.counter += int(np.prod(shape, dtype=np.int64)) if shape != () else 1

    def normal(self, shape=()) -> np.ndarray:
        shape = tuple(np.atleast_1d(shape)) if shape != () else ()
        self._count(shape)
        return self._gen.standard_normal(shape)

    def uniform(self, shape=(), low=0.0, high=1.0) -> np.ndarray:
        shape = tuple(np.atleast_1d(shape)) if shape != () else ()
        self._count(shape)
        return self._gen.uniform(low, high, shape)

    def integers(self, low, high=None, shape=()):
        self._count(shape)
        return self._gen.integers(low, high, shape)

    def permutation(self, n: int) -> np.ndarray:
        self._count((n,))
        return self._gen.permutation(n)


def normal_draw(rng: RngStream, dims) -> np.ndarray:
    return rng.normal(tuple(dims))


# ------------------------------------------------------------------------ params


@dataclass
class LayerParams:
    kind: str
    tensors: dict[str, np.ndarray]
    group_tag: str
    _frozen_tag: str = field(default="", repr=False)

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ConfigurationError(f"unknown layer kind {self.kind!r}")
        if self.group_tag not in GROUP_TAGS:
            raise ConfigurationError(f"unknown group tag {self.group_tag!r}")
        self._frozen_tag = self.group_tag
        self.tensors = {k: as_tensor(v) for k, v in self.tensors.items()}
        self._check_shapes()

    def __setattr__(self, name, value):
        if name == "group_tag" and getattr(self, "_frozen_tag", ""):
            raise AttributeError("group_tag is fixed at construction")
        super().__setattr__(name, value)

    def _check_shapes(self):
        t = self.tensors
        if self.kind == "linear":
            W, b = t["W"], t["b"]
            if W.ndim != 2 or b.shape != (W.shape[1],):
                raise DimensionError(f"linear W{W.shape} incompatible with b{b.shape}")
        elif self.kind in ("layernorm", "groupnorm"):
            if t["gamma"].shape != t["beta"].shape or t["gamma"].ndim != 1:
                raise DimensionError("norm gamma/beta must be equal-length vectors")
        elif self.kind == "attention":
            Wq, Wk, Wv, Wo = t["Wq"], t["Wk"], t["Wv"], t["Wo"]
            D, d = Wq.shape
            if Wk.shape != (D, d) or Wv.shape != (D, d) or Wo.shape != (d, D):
                raise DimensionError("attention projections disagree on widths")

    @property
    def size(self) -> int:
        return int(sum(v.size for v in self.tensors.values()))

    def copy(self) -> "LayerParams":
        return LayerParams(self.kind, {k: v.copy() for k, v in self.tensors.items()}, self.group_tag)


def init_linear(rng: RngStream, din: int, dout: int, group: str) -> LayerParams:
    # Kaiming fan-in normal
    W = rng.normal((din, dout)) * np.sqrt(2.0 / din)
    return LayerParams("linear", {"W": W, "b": np.zeros(dout)}, group)


def init_norm(kind: str, width: int, group: str = "norm") -> LayerParams:
    return LayerParams(kind, {"gamma": np.ones(width), "beta": np.zeros(width)}, group)


def init_attention(rng: RngStream, width: int, inner: int | None = None, group: str = "core") -> LayerParams:
    inner = inner or width
    tensors = {
        "Wq": rng.normal((width, inner)) / np.sqrt(width),
        "Wk": rng.normal((width, inner)) / np.sqrt(width),
        "Wv": rng.normal((width, inner)) / np.sqrt(width),
        "Wo": rng.normal((inner, width)) / np.sqrt(inner),
    }
    return LayerParams("attention", tensors, group)


# ------------------------------------------------------------------------ layers


def linear(x, W, b):
    x, W, b = as_tensor(x), as_tensor(W), as_tensor(b)
    if x.shape[-1] != W.shape[0] or b.shape != (W.shape[1],):
        raise DimensionError(f"linear: x{x.shape} W{W.shape} b{b.shape}")
    return ensure_finite(x @ W + b, "linear output"), (x, W)


def linear_backward(dout, cache):
    x, W = cache
    x2 = x.reshape(-1, x.shape[-1])
    d2 = dout.reshape(-1, dout.shape[-1])
    return dout @ W.T, {"W": x2.T @ d2, "b": d2.sum(axis=0)}


def _standardize_backward(dxhat, xhat, inv_std, axes):
    m = np.mean(dxhat, axis=axes, keepdims=True)
    mx = np.mean(dxhat * xhat, axis=axes, keepdims=True)
    return inv_std * (dxhat - m - xhat * mx)


def layer_norm(x, gamma, beta, eps=1e-5):
    x = as_tensor(x)
    D = x.shape[-1]
    if D == 0:
        raise DimensionError("layer_norm over an empty feature axis")
    if eps < 0:
        raise ConfigurationError("eps must be non-negative")
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv_std
    # a mean of identical values can be off by an ulp; constant rows must map to beta exactly
    xhat = np.where(np.ptp(x, axis=-1, keepdims=True) == 0, 0.0, xhat)
    return ensure_finite(xhat * gamma + beta, "layer_norm output"), (xhat, inv_std, gamma)


def layer_norm_backward(dout, cache):
    xhat, inv_std, gamma = cache
    lead = tuple(range(dout.ndim - 1))
    grads = {"gamma": np.sum(dout * xhat, axis=lead), "beta": np.sum(dout, axis=lead)}
    dx = _standardize_backward(dout * gamma, xhat, inv_std, axes=-1)
    return dx, grads


def group_norm(x, groups, gamma, beta, eps=1e-5):
    """Normalize ``(..., C, H, W)`` over channel groups, then per-channel affine."""
    x = as_tensor(x)
    if x.ndim < 3:
        raise DimensionError("group_norm expects (..., C, H, W)")
    C, H, W = x.shape[-3:]
    if groups < 1 or C % groups:
        raise ConfigurationError(f"{C} channels not divisible into {groups} groups")
    lead = x.shape[:-3]
    xg = x.reshape(lead + (groups, C // groups, H, W))
    axes = (-3, -2, -1)
    mu = xg.mean(axis=axes, keepdims=True)
    var = xg.var(axis=axes, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (xg - mu) * inv_std
    flat = np.ptp(xg.reshape(xg.shape[:-3] + (-1,)), axis=-1)[..., None, None, None] == 0
    xhat = np.where(flat, 0.0, xhat).reshape(x.shape)
    g = np.asarray(gamma)[:, None, None]
    bt = np.asarray(beta)[:, None, None]
    return ensure_finite(xhat * g + bt, "group_norm output"), (xhat, inv_std, gamma, groups)


def group_norm_backward(dout, cache):
    xhat, inv_std, gamma, groups = cache
    C, H, W = dout.shape[-3:]
    lead = dout.shape[:-3]
    red = tuple(range(len(lead))) + (-2, -1)
    grads = {"gamma": np.sum(dout * xhat, axis=red), "beta": np.sum(dout, axis=red)}
    dxhat = (dout * np.asarray(gamma)[:, None, None]).reshape(lead + (groups, C // groups, H, W))
    xh = xhat.reshape(dxhat.shape)
    dx = _standardize_backward(dxhat, xh, inv_std, axes=(-3, -2, -1))
    return dx.reshape(dout.shape), grads


def sigmoid(x):
    return expit(as_tensor(x))


def silu(x):
    x = as_tensor(x)
    s = sigmoid(x)
    return x * s, (x, s)


def silu_backward(dout, cache):
    x, s = cache
    return dout * (s * (1.0 + x * (1.0 - s)))


def dropout(x, p: float, mode: str, rng: RngStream | None = None):
    x = as_tensor(x)
    if not 0.0 <= p < 1.0:
        raise ConfigurationError(f"dropout probability must lie in [0, 1), got {p}")
    if mode not in ("train", "eval"):
        raise ConfigurationError(f"unknown mode {mode!r}")
    if mode == "eval" or p == 0.0:
        return x, None
    if rng is None:
        raise ConfigurationError("train-mode dropout needs an rng stream")
    mask = (rng.uniform(x.shape) >= p) / (1.0 - p)
    return x * mask, mask


def dropout_backward(dout, mask):
    return dout if mask is None else dout * mask


def softmax(s, axis=-1):
    s = s - np.max(s, axis=axis, keepdims=True)
    e = np.exp(s)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(s, axis=-1):
    s = s - np.max(s, axis=axis, keepdims=True)
    return s - np.log(np.sum(np.exp(s), axis=axis, keepdims=True))


def cross_attention(q, kv, params: LayerParams | Mapping[str, np.ndarray]):
    """softmax((q Wq)(kv Wk)^T / sqrt(d)) (kv Wv) Wo, no residual."""
    t = params.tensors if isinstance(params, LayerParams) else params
    q, kv = as_tensor(q), as_tensor(kv)
    Wq, Wk, Wv, Wo = t["Wq"], t["Wk"], t["Wv"], t["Wo"]
    if q.ndim != 2 or kv.ndim != 2 or q.shape[1] != Wq.shape[0] or kv.shape[1] != Wk.shape[0]:
        raise DimensionError(f"cross_attention: q{q.shape} kv{kv.shape} width {Wq.shape[0]}")
    d = Wq.shape[1]
    Q, K, V = q @ Wq, kv @ Wk, kv @ Wv
    A = softmax(Q @ K.T / np.sqrt(d), axis=1)
    O = A @ V
    out = O @ Wo
    return ensure_finite(out, "attention output"), (q, kv, Q, K, V, A, O, t)


def cross_attention_backward(dout, cache):
    q, kv, Q, K, V, A, O, t = cache
    d = Q.shape[1]
    dO = dout @ t["Wo"].T
    dA = dO @ V.T
    dV = A.T @ dO
    dS = A * (dA - np.sum(dA * A, axis=1, keepdims=True)) / np.sqrt(d)
    dQ = dS @ K
    dK = dS.T @ Q
    grads = {"Wq": q.T @ dQ, "Wk": kv.T @ dK, "Wv": kv.T @ dV, "Wo": O.T @ dout}
    dq = dQ @ t["Wq"].T
    dkv = dK @ t["Wk"].T + dV @ t["Wv"].T
    return dq, dkv, grads


def upsample_nearest(x, factor: int):
    """Replicate each cell of the last two axes into a factor x factor block."""
    if factor < 1:
        raise ConfigurationError(f"upsample factor must be >= 1, got {factor}")
    x = as_tensor(x)
    return np.repeat(np.repeat(x, factor, axis=-2), factor, axis=-1)


def upsample_nearest_backward(dout, factor: int):
    H, W = dout.shape[-2] // factor, dout.shape[-1] // factor
    blocks = dout.reshape(dout.shape[:-2] + (H, factor, W, factor))
    return blocks.sum(axis=(-3, -1))


# ------------------------------------------------------------- gradient checking


def _rel_err(a, n):
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)


def finite_diff_check(fn: Callable, point, h: float = 1e-5, indices=None) -> float:
    """Max relative error between ``fn``'s analytic gradient and central differences.

    ``fn(x)`` returns ``(scalar, grad)``. ``indices`` restricts the check to a
    subset of flat coordinates.
    """
    if h <= 0:
        raise ConfigurationError("step h must be positive")
    x = as_tensor(point).copy()
    value, grad = fn(x.copy())
    grad = as_tensor(grad)
    if not np.isfinite(value) or not np.all(np.isfinite(grad)):
        raise NumericalError("non-finite value or gradient at check point")
    flat = x.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    worst = 0.0
    for i in idx:
        orig = flat[i]
        flat[i] = orig + h
        fp = fn(x.copy())[0]
        flat[i] = orig - h
        fm = fn(x.copy())[0]
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericalError(f"non-finite value near coordinate {i}")
        num = (fp - fm) / (2 * h)
        worst = max(worst, float(_rel_err(grad.reshape(-1)[i], num)))
    return worst


def finite_diff_check_tensors(
    loss: Callable[[], float],
    tensors: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    h: float = 1e-5,
    max_coords: int | None = None,
    rng: RngStream | None = None,
) -> dict[str, float]:
    """Check several in-place parameter arrays against their analytic grads.

    ``loss()`` must read the arrays in ``tensors`` (they are perturbed in place
    and restored). Returns the max relative error per tensor name.
    """
    out = {}
    for name, arr in tensors.items():
        flat = arr.reshape(-1)
        g = np.asarray(grads[name]).reshape(-1)
        if max_coords is not None and flat.size > max_coords:
            rng = rng or RngStream(0, "fdcheck")
            idx = rng.permutation(flat.size)[:max_coords]
        else:
            idx = range(flat.size)
        worst = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = loss()
            flat[i] = orig - h
            fm = loss()
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericalError(f"non-finite loss perturbing {name}[{i}]")
            worst = max(worst, float(_rel_err(g[i], (fp - fm) / (2 * h))))
        out[name] = worst
    return out
