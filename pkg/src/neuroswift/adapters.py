"""Voxel -> latent (AutoKL) and voxel -> token embedding (CLIP) adapters.

Both share the same front end: linear projection, LayerNorm, SiLU, dropout,
then ``blocks`` residual MLP blocks (linear, LayerNorm, SiLU, linear, skip).
Parameters are kept as an ordered ``{layer_name: LayerParams}`` map whose
group tags drive the freeze/fine-tune protocol.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import numcore as nc
from .errors import DimensionError
from .numcore import GROUP_TAGS, LayerParams, RngStream


@dataclass
class AutoKLDims:
    voxels: int
    hidden: int = 128
    blocks: int = 2
    channels: int = 4
    low_height: int = 4
    low_width: int = 4
    factor: int = 2
    groups: int = 2
    dropout: float = 0.1


@dataclass
class ClipDims:
    voxels: int
    hidden: int = 128
    blocks: int = 2
    img_tokens: int = 16
    txt_tokens: int = 8
    token_dim: int = 32
    dropout: float = 0.1


def _init_trunk(params, rng: RngStream, dims):
    params["fc_in"] = nc.init_linear(rng.child("fc_in"), dims.voxels, dims.hidden, "fc_input")
    params["ln_in"] = nc.init_norm("layernorm", dims.hidden)
    for i in range(dims.blocks):
        params[f"block{i}.fc1"] = nc.init_linear(rng.child(f"block{i}.fc1"), dims.hidden, dims.hidden, "core")
        params[f"block{i}.ln"] = nc.init_norm("layernorm", dims.hidden)
        params[f"block{i}.fc2"] = nc.init_linear(rng.child(f"block{i}.fc2"), dims.hidden, dims.hidden, "core")


def _lin(params, name, x):
    t = params[name].tensors
    return nc.linear(x, t["W"], t["b"])


def _trunk_forward(params, dims, v, mode, rng):
    v = nc.as_tensor(v)
    if v.ndim != 2 or v.shape[1] != dims.voxels:
        raise DimensionError(f"adapter expects (B, {dims.voxels}) voxels, got {v.shape}")
    caches = {}
    h, caches["fc_in"] = _lin(params, "fc_in", v)
    ln = params["ln_in"].tensors
    h, caches["ln_in"] = nc.layer_norm(h, ln["gamma"], ln["beta"])
    h, caches["act_in"] = nc.silu(h)
    h, caches["drop_in"] = nc.dropout(h, dims.dropout, mode, rng)
    for i in range(dims.blocks):
        u, caches[f"block{i}.fc1"] = _lin(params, f"block{i}.fc1", h)
        ln = params[f"block{i}.ln"].tensors
        u, caches[f"block{i}.ln"] = nc.layer_norm(u, ln["gamma"], ln["beta"])
        u, caches[f"block{i}.act"] = nc.silu(u)
        u, caches[f"block{i}.fc2"] = _lin(params, f"block{i}.fc2", u)
        h = h + u
    return h, caches


def _trunk_backward(dh, caches, dims, grads):
    for i in reversed(range(dims.blocks)):
        du, grads[f"block{i}.fc2"] = nc.linear_backward(dh, caches[f"block{i}.fc2"])
        du = nc.silu_backward(du, caches[f"block{i}.act"])
        du, grads[f"block{i}.ln"] = nc.layer_norm_backward(du, caches[f"block{i}.ln"])
        du, grads[f"block{i}.fc1"] = nc.linear_backward(du, caches[f"block{i}.fc1"])
        dh = dh + du
    dh = nc.dropout_backward(dh, caches["drop_in"])
    dh = nc.silu_backward(dh, caches["act_in"])
    dh, grads["ln_in"] = nc.layer_norm_backward(dh, caches["ln_in"])
    dv, grads["fc_in"] = nc.linear_backward(dh, caches["fc_in"])
    return dv


class Adapter:
    kind = ""
    dims_cls = None

    def __init__(self, dims, params: dict[str, LayerParams]):
        self.dims = dims
        self.params = params

    @classmethod
    def init(cls, dims, rng: RngStream):
        params: dict[str, LayerParams] = {}
        _init_trunk(params, rng, dims)
        cls._init_output(params, rng, dims)
        return cls(dims, params)

    def tensors(self) -> dict[str, np.ndarray]:
        """Flat ``layer.name -> array`` view (arrays are shared, not copied)."""
        return {f"{layer}.{k}": v for layer, lp in self.params.items() for k, v in lp.tensors.items()}

    def groups(self) -> dict[str, str]:
        return {f"{layer}.{k}": lp.group_tag for layer, lp in self.params.items() for k in lp.tensors}

    def scale_free(self) -> set[str]:
        """Weight matrices feeding straight into a norm layer (output invariant to their scale)."""
        names = {"fc_in.W"} | {f"block{i}.fc1.W" for i in range(self.dims.blocks)}
        return names | ({"fc_out.W"} if "fc_out" in self.params else set())

    def copy(self):
        return type(self)(type(self.dims)(**asdict(self.dims)),
                          {k: v.copy() for k, v in self.params.items()})

    def __eq__(self, other):
        if type(other) is not type(self) or self.dims != other.dims:
            return False
        a, b = self.tensors(), other.tensors()
        return a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)


class AutoKLAdapter(Adapter):
    """Voxels -> low-resolution latent -> GroupNorm -> nearest upsampling."""

    kind = "autokl"
    dims_cls = AutoKLDims

    @staticmethod
    def _init_output(params, rng, dims):
        out = dims.channels * dims.low_height * dims.low_width
        params["fc_out"] = nc.init_linear(rng.child("fc_out"), dims.hidden, out, "fc_input")
        params["gn_out"] = nc.init_norm("groupnorm", dims.channels)

    @property
    def out_dims(self):
        d = self.dims
        return (d.channels, d.low_height * d.factor, d.low_width * d.factor)

    def forward(self, v, mode="eval", rng=None, return_cache=False):
        d = self.dims
        h, caches = _trunk_forward(self.params, d, v, mode, rng)
        y, caches["fc_out"] = _lin(self.params, "fc_out", h)
        y = y.reshape(-1, d.channels, d.low_height, d.low_width)
        gn = self.params["gn_out"].tensors
        y, caches["gn_out"] = nc.group_norm(y, d.groups, gn["gamma"], gn["beta"])
        z = nc.upsample_nearest(y, d.factor)
        return (z, caches) if return_cache else z

    def backward(self, dz, caches):
        d = self.dims
        grads = {}
        dy = nc.upsample_nearest_backward(dz, d.factor)
        dy, grads["gn_out"] = nc.group_norm_backward(dy, caches["gn_out"])
        dh, grads["fc_out"] = nc.linear_backward(dy.reshape(dy.shape[0], -1), caches["fc_out"])
        dv = _trunk_backward(dh, caches, d, grads)
        return dv, grads


class ClipAdapter(Adapter):
    """Voxels -> shared trunk -> separate image and text token heads."""

    kind = "clip"
    dims_cls = ClipDims

    @staticmethod
    def _init_output(params, rng, dims):
        params["head_img"] = nc.init_linear(rng.child("head_img"), dims.hidden,
                                            dims.img_tokens * dims.token_dim, "head")
        params["head_txt"] = nc.init_linear(rng.child("head_txt"), dims.hidden,
                                            dims.txt_tokens * dims.token_dim, "head")

    def forward(self, v, mode="eval", rng=None, return_cache=False):
        d = self.dims
        h, caches = _trunk_forward(self.params, d, v, mode, rng)
        e_img, caches["head_img"] = _lin(self.params, "head_img", h)
        e_txt, caches["head_txt"] = _lin(self.params, "head_txt", h)
        e_img = e_img.reshape(-1, d.img_tokens, d.token_dim)
        e_txt = e_txt.reshape(-1, d.txt_tokens, d.token_dim)
        return ((e_img, e_txt), caches) if return_cache else (e_img, e_txt)

    def backward(self, d_img, d_txt, caches):
        grads = {}
        B = d_img.shape[0]
        dh_i, grads["head_img"] = nc.linear_backward(d_img.reshape(B, -1), caches["head_img"])
        dh_t, grads["head_txt"] = nc.linear_backward(d_txt.reshape(B, -1), caches["head_txt"])
        dv = _trunk_backward(dh_i + dh_t, caches, self.dims, grads)
        return dv, grads


ADAPTERS = {"autokl": AutoKLAdapter, "clip": ClipAdapter}


def flat_grads(grads: dict) -> dict[str, np.ndarray]:
    return {f"{layer}.{k}": v for layer, g in grads.items() for k, v in g.items()}


def param_census(adapter_or_params) -> dict:
    """Exact parameter counts per group tag, plus total and fractions."""
    adapters = adapter_or_params if isinstance(adapter_or_params, (list, tuple)) else [adapter_or_params]
    counts = {g: 0 for g in GROUP_TAGS}
    for a in adapters:
        params = a.params if isinstance(a, Adapter) else a
        for lp in params.values():
            counts[lp.group_tag] += lp.size
    total = sum(counts.values())
    fractions = {g: (c / total if total else 0.0) for g, c in counts.items()}
    return {**counts, "total": total, "fractions": fractions}


def trainable_fraction(adapters, groups=("fc_input", "head")) -> float:
    census = param_census(list(adapters))
    return sum(census[g] for g in groups) / census["total"]


def reinit_input_layers(adapter: Adapter, new_voxels: int, rng: RngStream) -> Adapter:
    """Fresh voxel-facing projection for a new voxel width; every other tensor copied bit-exactly."""
    if new_voxels < 1:
        raise DimensionError("new voxel width must be >= 1")
    out = adapter.copy()
    out.dims.voxels = int(new_voxels)
    out.params["fc_in"] = nc.init_linear(rng.child("fc_in"), new_voxels, adapter.dims.hidden, "fc_input")
    return out
