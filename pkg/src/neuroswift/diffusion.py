"""Partial-noise ancestral sampler that fuses a structural latent with semantic tokens.

Index convention: arrays run over t = 0..N with ``alpha_bar[0] == 1``; the
sampler walks t = tau, ..., 1 and returns z_0. tau = 0 is therefore the exact
identity path.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import frozen as fr
from . import numcore as nc
from .errors import ConfigurationError, DimensionError
from .numcore import RngStream

MODES = ("full", "only_z", "no_text", "no_image", "no_z")
DENOISERS = ("oracle", "gaussian", "attn")


@dataclass(frozen=True)
class NoiseSchedule:
    N: int
    beta: np.ndarray  # beta[0] is a placeholder 0
    alpha: np.ndarray
    alpha_bar: np.ndarray


def make_schedule(N: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if N < 1:
        raise ConfigurationError("N must be >= 1")
    if not 0 < beta_start <= beta_end < 1:
        raise ConfigurationError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    beta = np.concatenate([[0.0], np.linspace(beta_start, beta_end, N)])
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    alpha_bar[0] = 1.0
    for arr in (beta, alpha, alpha_bar):
        arr.setflags(write=False)
    return NoiseSchedule(N, beta, alpha, alpha_bar)


def initial_step(N: int, s: float) -> int:
    if not 0 < s <= 1:
        raise ConfigurationError(f"structural strength must lie in (0, 1], got {s}")
    return N - math.floor(N * s)


def add_noise(z_pred, tau: int, schedule: NoiseSchedule, rng: RngStream | None = None, eps=None):
    if not 0 <= tau <= schedule.N:
        raise ConfigurationError(f"tau={tau} outside [0, {schedule.N}]")
    z_pred = nc.as_tensor(z_pred)
    if eps is None:
        eps = rng.normal(z_pred.shape)
    ab = schedule.alpha_bar[tau]
    return math.sqrt(ab) * z_pred + math.sqrt(1.0 - ab) * eps


def denoise_step(z_t, t: int, eps_hat, schedule: NoiseSchedule, rng: RngStream | None = None,
                 add_noise_flag: bool = True):
    if not 1 <= t <= schedule.N:
        raise ConfigurationError(f"t={t} outside [1, {schedule.N}]")
    a, b, ab = schedule.alpha[t], schedule.beta[t], schedule.alpha_bar[t]
    z = (z_t - (b / math.sqrt(1.0 - ab)) * eps_hat) / math.sqrt(a)
    if add_noise_flag and t > 1 and b > 0:
        z = z + math.sqrt(b) * rng.normal(z.shape)
    return z


@dataclass
class ReconstructionConfig:
    s: float = 0.75
    N: int = 50
    beta_start: float = 0.002
    beta_end: float = 0.4
    seed: int = 0
    mode: str = "full"
    denoiser: str = "gaussian"
    # ancestral noise is injected only while t >= noise_floor (never at t = 1)
    noise_floor: int = 2
    spread: float = 0.01

    def validate(self):
        if not 0 < self.s <= 1:
            raise ConfigurationError(f"s must lie in (0, 1], got {self.s}")
        if self.mode not in MODES:
            raise ConfigurationError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.denoiser not in DENOISERS:
            raise ConfigurationError(f"unknown denoiser {self.denoiser!r}")
        if self.spread < 0:
            raise ConfigurationError("spread must be non-negative")
        return self

    def schedule(self) -> NoiseSchedule:
        return make_schedule(self.N, self.beta_start, self.beta_end)


def active_tokens(mode: str, e_txt, e_img):
    """Conditioning tokens that survive a given ablation mode."""
    if mode == "no_text":
        return None, e_img
    if mode == "no_image":
        return e_txt, None
    return e_txt, e_img


def reconstruct(z_pred, e_txt, e_img, config: ReconstructionConfig, schedule: NoiseSchedule,
                world, rng: RngStream | None = None, code=None):
    """One trial: noise z_pred to tau, denoise back to 0, decode.

    ``code`` feeds the oracle denoiser directly; without it the semantic code
    is read back from whichever token sets the mode keeps.
    """
    config.validate()
    fz = world.frozen
    z_pred = nc.as_tensor(z_pred)
    if z_pred.shape != fz.latent.dims:
        raise DimensionError(f"z_pred {z_pred.shape} != latent {fz.latent.dims}")
    if config.N != schedule.N:
        raise ConfigurationError("config.N disagrees with the schedule")
    rng = RngStream(config.seed, "reconstruct") if rng is None else rng

    if config.mode == "only_z":
        return z_pred.copy(), fr.autokl_decode(fz, z_pred)

    txt, img = active_tokens(config.mode, e_txt, e_img)
    if config.denoiser in ("oracle", "gaussian"):
        if code is None:
            if txt is None and img is None:
                raise ConfigurationError("oracle denoisers need a semantic code or tokens")
            code = fr.infer_code(fz, txt, img)
        mean = (nc.as_tensor(code) @ fz.G.T).reshape(fz.latent.dims)
        if config.denoiser == "oracle":
            def predict(z, t):
                return fr.oracle_denoiser(z, t, mean, schedule)
        else:
            def predict(z, t):
                return fr.gaussian_denoiser(z, t, mean, schedule, fz, config.spread)
    else:
        def predict(z, t):
            return fr.attn_denoiser(z, t, txt, img, fz.denoiser)

    tau = initial_step(schedule.N, config.s)
    start = rng.normal(z_pred.shape) if config.mode == "no_z" else z_pred
    z = add_noise(start, tau, schedule, rng) if config.mode != "no_z" else start
    for t in range(tau, 0, -1):
        eps_hat = predict(z, t)
        z = denoise_step(z, t, eps_hat, schedule, rng, add_noise_flag=t >= config.noise_floor)
    return z, fr.autokl_decode(fz, z)
