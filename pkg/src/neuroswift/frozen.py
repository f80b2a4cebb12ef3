"""Seeded frozen stand-ins for the pretrained stack.

The latent autoencoder is an exact linear pair: the decoder has orthonormal
columns and the encoder is its transpose, so ``encode(decode(z)) == z``. The
text and image "clippers" are fixed linear maps into token matrices, and the
semantic-image generator renders a caption code through the decoder without
the structural residual.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .errors import ConfigurationError, DimensionError
from .numcore import LayerParams, RngStream

TIME_EMBED_DIM = 16


@dataclass(frozen=True)
class LatentShape:
    channels: int
    height: int  # full resolution, after adapter upsampling
    width: int
    factor: int  # adapter upsampling factor

    @property
    def size(self) -> int:
        return self.channels * self.height * self.width

    @property
    def dims(self) -> tuple[int, int, int]:
        return (self.channels, self.height, self.width)

    @property
    def low_dims(self) -> tuple[int, int, int]:
        return (self.channels, self.height // self.factor, self.width // self.factor)


@dataclass
class FrozenWorldComponents:
    latent: LatentShape
    image_dims: tuple[int, int, int]
    D_dec: np.ndarray  # (image_size, latent_size), orthonormal columns
    G: np.ndarray  # (latent_size, code_dim)
    G_pinv: np.ndarray
    T_txt_map: np.ndarray  # (T_txt*D, code_dim)
    T_img_map: np.ndarray  # (T_img*D, code_dim)
    pos_txt: np.ndarray  # (T_txt, D)
    pos_img: np.ndarray  # (T_img, D)
    structure_var: float
    denoiser: dict[str, LayerParams]

    @property
    def E_enc(self) -> np.ndarray:
        return self.D_dec.T

    @property
    def code_dim(self) -> int:
        return self.G.shape[1]

    @property
    def txt_shape(self) -> tuple[int, int]:
        return self.pos_txt.shape

    @property
    def img_shape(self) -> tuple[int, int]:
        return self.pos_img.shape

    def arrays(self) -> dict[str, np.ndarray]:
        out = {
            "D_dec": self.D_dec,
            "G": self.G,
            "T_txt_map": self.T_txt_map,
            "T_img_map": self.T_img_map,
            "pos_txt": self.pos_txt,
            "pos_img": self.pos_img,
        }
        for layer, lp in self.denoiser.items():
            for k, v in lp.tensors.items():
                out[f"denoiser.{layer}.{k}"] = v
        return out


# ----------------------------------------------------------------- construction


def block_mean_projector(latent: LatentShape):
    """Orthogonal projector onto block-constant latents (the range of upsampling)."""
    f = latent.factor

    def project(z):
        low = nc.upsample_nearest_backward(z, f) / (f * f)
        return nc.upsample_nearest(low, f)

    return project


def _decoder_basis(latent: LatentShape, image_dims, rng: RngStream) -> np.ndarray:
    C, h, w = latent.dims
    ci, H, W = image_dims
    sy, sx = H / h, W / w
    colors = rng.normal((C, ci))
    offsets = rng.uniform((C, 2), -0.35, 0.35)
    yy, xx = np.mgrid[0:H, 0:W]
    cols = np.empty((ci * H * W, C * h * w))
    k = 0
    for c in range(C):
        for i in range(h):
            for j in range(w):
                cy = (i + 0.5 + offsets[c, 0]) * sy - 0.5
                cx = (j + 0.5 + offsets[c, 1]) * sx - 0.5
                bump = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * (0.6 * sy) ** 2))
                cols[:, k] = (colors[c][:, None, None] * bump[None]).reshape(-1)
                k += 1
    Q, R = np.linalg.qr(cols)
    if np.min(np.abs(np.diag(R))) < 1e-8 * np.max(np.abs(np.diag(R))):
        raise ConfigurationError("decoder basis is rank deficient for these dims")
    return Q * np.sign(np.diag(R))


def build_frozen(cfg, rng: RngStream) -> FrozenWorldComponents:
    latent = LatentShape(cfg.latent_channels, cfg.latent_height * cfg.upsample,
                         cfg.latent_width * cfg.upsample, cfg.upsample)
    image_dims = (cfg.image_channels, cfg.image_height, cfg.image_width)
    n_img = int(np.prod(image_dims))
    if n_img < latent.size:
        raise ConfigurationError(
            f"image size {n_img} cannot hold an orthonormal basis for {latent.size} latents")
    if cfg.code_dim > latent.size - int(np.prod(latent.low_dims)):
        raise ConfigurationError("code_dim exceeds the non-block-constant latent subspace")
    D_dec = _decoder_basis(latent, image_dims, rng.child("decoder"))

    # semantic directions live orthogonal to block-constant latents
    project = block_mean_projector(latent)
    raw = rng.child("G").normal((latent.size, cfg.code_dim))
    cols = raw.T.reshape((cfg.code_dim,) + latent.dims)
    G = (cols - project(cols)).reshape(cfg.code_dim, -1).T
    # E|G c|^2 = |G|_F^2 for unit-normal codes
    G *= math.sqrt(cfg.semantic_var * latent.size / np.sum(G ** 2))

    D = cfg.token_dim
    r = rng.child("clipper")
    T_txt = r.normal((cfg.txt_tokens * D, cfg.code_dim)) / math.sqrt(cfg.code_dim)
    T_img = r.normal((cfg.img_tokens * D, cfg.code_dim)) / math.sqrt(cfg.code_dim)
    pos_txt = cfg.pos_scale * r.normal((cfg.txt_tokens, D))
    pos_img = cfg.pos_scale * r.normal((cfg.img_tokens, D))

    return FrozenWorldComponents(
        latent=latent,
        image_dims=image_dims,
        D_dec=D_dec,
        G=G,
        G_pinv=np.linalg.pinv(G),
        T_txt_map=T_txt,
        T_img_map=T_img,
        pos_txt=pos_txt,
        pos_img=pos_img,
        structure_var=cfg.structure_var,
        denoiser=init_attn_denoiser(rng.child("denoiser"), latent.channels, D, cfg.denoiser_ff),
    )


# ------------------------------------------------------------------ autoencoder


def autokl_encode(fz: FrozenWorldComponents, image) -> np.ndarray:
    image = nc.as_tensor(image)
    if image.shape[-3:] != fz.image_dims:
        raise DimensionError(f"image dims {image.shape[-3:]} != world {fz.image_dims}")
    lead = image.shape[:-3]
    flat = image.reshape(lead + (-1,))
    return (flat @ fz.D_dec).reshape(lead + fz.latent.dims)


def autokl_decode(fz: FrozenWorldComponents, z) -> np.ndarray:
    z = nc.as_tensor(z)
    if z.shape[-3:] != fz.latent.dims:
        raise DimensionError(f"latent dims {z.shape[-3:]} != world {fz.latent.dims}")
    lead = z.shape[:-3]
    return (z.reshape(lead + (-1,)) @ fz.D_dec.T).reshape(lead + fz.image_dims)


# ---------------------------------------------------------------------- clippers


def clip_text_encode(fz: FrozenWorldComponents, code) -> np.ndarray:
    code = nc.as_tensor(code)
    if code.shape[-1] != fz.code_dim:
        raise DimensionError(f"code width {code.shape[-1]} != {fz.code_dim}")
    lead = code.shape[:-1]
    return (code @ fz.T_txt_map.T).reshape(lead + fz.txt_shape) + fz.pos_txt


def image_to_code(fz: FrozenWorldComponents, image) -> np.ndarray:
    z = autokl_encode(fz, image)
    return z.reshape(z.shape[:-3] + (-1,)) @ fz.G_pinv.T


def clip_image_encode(fz: FrozenWorldComponents, image) -> np.ndarray:
    """Pixels -> latent -> semantic coordinates -> image tokens; blind to block-constant structure."""
    code = image_to_code(fz, image)
    lead = code.shape[:-1]
    return (code @ fz.T_img_map.T).reshape(lead + fz.img_shape) + fz.pos_img


def semantic_image_gen(fz: FrozenWorldComponents, code, rng: RngStream | None = None,
                       sigma: float = 0.0) -> np.ndarray:
    code = nc.as_tensor(code)
    z = (code @ fz.G.T).reshape(code.shape[:-1] + fz.latent.dims)
    image = autokl_decode(fz, z)
    if sigma > 0:
        if rng is None:
            raise ConfigurationError("semantic image perturbation needs an rng stream")
        image = image + sigma * rng.normal(image.shape)
    return image


def infer_code(fz: FrozenWorldComponents, e_txt=None, e_img=None) -> np.ndarray:
    """Least-squares semantic code behind token embeddings (stacked over the given modalities)."""
    blocks, rhs = [], []
    if e_txt is not None:
        e_txt = nc.as_tensor(e_txt)
        blocks.append(fz.T_txt_map)
        rhs.append((e_txt - fz.pos_txt).reshape(e_txt.shape[:-2] + (-1,)))
    if e_img is not None:
        e_img = nc.as_tensor(e_img)
        blocks.append(fz.T_img_map)
        rhs.append((e_img - fz.pos_img).reshape(e_img.shape[:-2] + (-1,)))
    if not blocks:
        raise ConfigurationError("infer_code needs at least one embedding")
    M = np.vstack(blocks)
    y = np.concatenate(rhs, axis=-1)
    return y @ np.linalg.pinv(M).T


# -------------------------------------------------------------------- denoisers


def _check_t(t, schedule):
    if not 1 <= t <= schedule.N:
        raise ConfigurationError(f"timestep {t} outside [1, {schedule.N}]")
    if schedule.alpha_bar[t] >= 1.0:
        raise ConfigurationError(f"alpha_bar[{t}] == 1; noise predictor undefined")


def oracle_denoiser(z_t, t: int, z_star, schedule) -> np.ndarray:
    """Exact noise predictor when all data mass sits at ``z_star``."""
    _check_t(t, schedule)
    ab = schedule.alpha_bar[t]
    return (nc.as_tensor(z_t) - math.sqrt(ab) * z_star) / math.sqrt(1.0 - ab)


def gaussian_denoiser(z_t, t: int, mean, schedule, fz: FrozenWorldComponents,
                      spread: float) -> np.ndarray:
    """Exact noise predictor for latents ~ N(mean, Sigma).

    Sigma is the world's structural covariance (block-constant directions) plus
    ``spread`` * I. It reduces to ``oracle_denoiser`` when both vanish.
    """
    _check_t(t, schedule)
    ab = schedule.alpha_bar[t]
    f2 = fz.latent.factor ** 2
    lam_up = f2 * fz.structure_var + spread
    lam_0 = spread
    project = block_mean_projector(fz.latent)
    d = nc.as_tensor(z_t) - math.sqrt(ab) * mean
    d_up = project(d)
    k_up = math.sqrt(ab) * lam_up / (ab * lam_up + 1 - ab)
    k_0 = math.sqrt(ab) * lam_0 / (ab * lam_0 + 1 - ab)
    x0 = mean + k_up * d_up + k_0 * (d - d_up)
    return (z_t - math.sqrt(ab) * x0) / math.sqrt(1.0 - ab)


def timestep_embedding(t: float, dim: int = TIME_EMBED_DIM) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    return np.concatenate([np.sin(t * freqs), np.cos(t * freqs)])


def init_attn_denoiser(rng: RngStream, channels: int, width: int, ff: int) -> dict[str, LayerParams]:
    return {
        "in_proj": nc.init_linear(rng.child("in"), channels, width, "core"),
        "time_proj": nc.init_linear(rng.child("time"), TIME_EMBED_DIM, width, "core"),
        "attn": nc.init_attention(rng.child("attn"), width),
        "ff1": nc.init_linear(rng.child("ff1"), width, ff, "core"),
        "ff2": nc.init_linear(rng.child("ff2"), ff, width, "core"),
        "out_proj": nc.init_linear(rng.child("out"), width, channels, "core"),
    }


def conditioning_tokens(e_txt=None, e_img=None) -> np.ndarray:
    parts = [nc.as_tensor(e) for e in (e_txt, e_img) if e is not None]
    if not parts:
        raise ConfigurationError("cross-attention needs at least one token set")
    return np.vstack(parts)


def attn_denoiser(z_t, t: int, e_txt, e_img, params: dict[str, LayerParams], return_cache=False):
    """Cross-attention noise predictor; text and image tokens share one key/value set."""
    z_t = nc.as_tensor(z_t)
    C = z_t.shape[0]
    p = {k: v.tensors for k, v in params.items()}
    if p["in_proj"]["W"].shape[0] != C:
        raise DimensionError(f"denoiser expects {p['in_proj']['W'].shape[0]} channels, got {C}")
    kv = conditioning_tokens(e_txt, e_img)
    width = p["in_proj"]["W"].shape[1]
    if kv.shape[1] != width:
        raise DimensionError(f"token width {kv.shape[1]} != model width {width}")
    x0 = z_t.reshape(C, -1).T
    h0, c_in = nc.linear(x0, p["in_proj"]["W"], p["in_proj"]["b"])
    temb = timestep_embedding(t)
    te, c_t = nc.linear(temb[None], p["time_proj"]["W"], p["time_proj"]["b"])
    h1 = h0 + te
    a, c_att = nc.cross_attention(h1, kv, p["attn"])
    h2 = h1 + a
    u, c_f1 = nc.linear(h2, p["ff1"]["W"], p["ff1"]["b"])
    s, c_s = nc.silu(u)
    f, c_f2 = nc.linear(s, p["ff2"]["W"], p["ff2"]["b"])
    h3 = h2 + f
    o, c_out = nc.linear(h3, p["out_proj"]["W"], p["out_proj"]["b"])
    eps = o.T.reshape(z_t.shape)
    if not return_cache:
        return eps
    return eps, (z_t.shape, c_in, c_t, c_att, c_f1, c_s, c_f2, c_out, kv.shape)


def attn_denoiser_backward(deps, cache):
    """Gradients w.r.t. ``z_t``, the stacked condition tokens and every parameter."""
    shape, c_in, c_t, c_att, c_f1, c_s, c_f2, c_out, _ = cache
    C = shape[0]
    do = deps.reshape(C, -1).T
    grads = {}
    dh3, grads["out_proj"] = nc.linear_backward(do, c_out)
    df = dh3
    ds, grads["ff2"] = nc.linear_backward(df, c_f2)
    du = nc.silu_backward(ds, c_s)
    dh2_ff, grads["ff1"] = nc.linear_backward(du, c_f1)
    dh2 = dh3 + dh2_ff
    dh1_att, dkv, grads["attn"] = nc.cross_attention_backward(dh2, c_att)
    dh1 = dh2 + dh1_att
    dte = dh1.sum(axis=0, keepdims=True)
    _, grads["time_proj"] = nc.linear_backward(dte, c_t)
    dx0, grads["in_proj"] = nc.linear_backward(dh1, c_in)
    dz = dx0.T.reshape(shape)
    return dz, dkv, grads
