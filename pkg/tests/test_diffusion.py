import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from neuroswift import diffusion as df
from neuroswift import frozen as fr
from neuroswift import numcore as nc
from neuroswift.errors import ConfigurationError, DimensionError


# --------------------------------------------------------------- schedule


def test_schedule_single_step():
    s = df.make_schedule(1, 0.01, 0.01)
    assert s.alpha_bar.tolist() == [1.0, 0.99]


def test_schedule_default_endpoint():
    s = df.make_schedule(1000, 1e-4, 0.02)
    direct = math.prod(1 - b for b in np.linspace(1e-4, 0.02, 1000))
    assert s.alpha_bar[1000] == pytest.approx(direct, rel=1e-12)
    assert s.alpha_bar[1000] == pytest.approx(4.0e-5, rel=0.02)
    assert s.alpha_bar[1000] < s.alpha_bar[1]


@pytest.mark.parametrize("args", [(0, 1e-4, 0.02), (10, 0.0, 0.02), (10, 0.03, 0.02), (10, 0.1, 1.0)])
def test_schedule_errors(args):
    with pytest.raises(ConfigurationError):
        df.make_schedule(*args)


@given(st.integers(2, 400), st.floats(1e-5, 0.05), st.floats(0.0, 0.5))
def test_schedule_invariants(N, start, extra):
    end = min(start + extra, 0.9)
    s = df.make_schedule(N, start, end)
    assert s.alpha_bar[0] == 1.0
    assert np.all(np.diff(s.alpha_bar) < 0)
    if end > start:
        assert np.all(np.diff(s.beta[1:]) > 0)
    for tau in (1, N // 2, N):
        assert abs(s.alpha_bar[tau] * np.prod(1 / s.alpha[1:tau + 1]) - 1) < 1e-12


# ----------------------------------------------------------- initial step


@pytest.mark.parametrize("N,s,tau", [(50, 1.0, 0), (40, 0.75, 10), (50, 0.02, 49)])
def test_initial_step(N, s, tau):
    assert df.initial_step(N, s) == tau


@pytest.mark.parametrize("s", [0.0, -0.1, 1.01])
def test_initial_step_range(s):
    with pytest.raises(ConfigurationError):
        df.initial_step(50, s)


@given(st.integers(1, 2000), st.floats(1e-6, 1.0))
def test_initial_step_bounds(N, s):
    tau = df.initial_step(N, s)
    assert tau == N - math.floor(N * s)
    # tau reaches N only when N * s < 1 leaves no structural steps
    assert 0 <= tau <= (N if N * s < 1 else N - 1)


# -------------------------------------------------------------- add noise


def test_add_noise_identity_at_zero(rng):
    z = rng.normal(size=(4, 8, 8))
    assert np.array_equal(df.add_noise(z, 0, df.make_schedule(10), nc.RngStream(0)), z)


def test_add_noise_closed_form(rng):
    s = df.make_schedule(100)
    z, eps = rng.normal(size=(3, 3)), rng.normal(size=(3, 3))
    ab = s.alpha_bar[37]
    expect = math.sqrt(ab) * z + math.sqrt(1 - ab) * eps
    assert np.max(np.abs(df.add_noise(z, 37, s, eps=eps) - expect)) < 1e-12
    with pytest.raises(ConfigurationError):
        df.add_noise(z, 101, s, eps=eps)


def test_add_noise_moments():
    s = df.make_schedule(1000)
    z = np.linspace(-2, 2, 5)
    draws = np.stack([df.add_noise(z, 500, s, nc.RngStream(k, "mc")) for k in range(10 ** 4)])
    ab = s.alpha_bar[500]
    assert np.all(np.abs(draws.mean(0) - math.sqrt(ab) * z) < 3 * math.sqrt(1 - ab) / 100)
    assert np.all(np.abs(draws.var(0) / (1 - ab) - 1) < 0.05)


# ------------------------------------------------------------ denoise step


def _scalar_schedule(alpha, beta, alpha_bar):
    return df.NoiseSchedule(1, np.array([0.0, beta]), np.array([1.0, alpha]), np.array([1.0, alpha_bar]))


def test_denoise_step_hand_value():
    s = _scalar_schedule(0.99, 0.01, 0.9)
    out = df.denoise_step(np.array(1.0), 1, 0.5, s, add_noise_flag=False)
    assert abs(float(out) - 0.989147) < 5e-7


def test_denoise_step_zero_beta():
    s = _scalar_schedule(1.0, 0.0, 0.5)
    z = np.array([0.3, -1.2])
    assert np.array_equal(df.denoise_step(z, 1, np.array([9.0, 9.0]), s, add_noise_flag=False), z)


def test_denoise_step_pure_rescale(rng):
    s = df.make_schedule(20)
    z = rng.normal(size=5)
    out = df.denoise_step(z, 7, np.zeros(5), s, add_noise_flag=False)
    assert np.allclose(out, z / math.sqrt(s.alpha[7]), atol=1e-15)
    with pytest.raises(ConfigurationError):
        df.denoise_step(z, 0, np.zeros(5), s)


def test_denoise_step_noise_never_at_t1(rng):
    s = df.make_schedule(20)
    z = rng.normal(size=5)
    a = df.denoise_step(z, 1, np.zeros(5), s, nc.RngStream(0), add_noise_flag=True)
    assert np.array_equal(a, df.denoise_step(z, 1, np.zeros(5), s, add_noise_flag=False))


# ------------------------------------------------------------- reconstruct


@pytest.fixture
def trial(world, rng):
    fz = world.frozen
    code = rng.normal(size=fz.code_dim)
    z_pred = rng.normal(size=fz.latent.dims)
    return z_pred, fr.clip_text_encode(fz, code), fr.clip_image_encode(fz, fr.semantic_image_gen(fz, code)), code


@pytest.mark.parametrize("denoiser", df.DENOISERS)
def test_full_strength_is_identity(world, trial, denoiser):
    z_pred, e_txt, e_img, _ = trial
    rc = df.ReconstructionConfig(s=1.0, denoiser=denoiser)
    z, img = df.reconstruct(z_pred, e_txt, e_img, rc, rc.schedule(), world)
    assert np.array_equal(z, z_pred)
    assert np.array_equal(img, fr.autokl_decode(world.frozen, z_pred))
    oz = df.ReconstructionConfig(s=1.0, mode="only_z", denoiser=denoiser)
    assert np.array_equal(df.reconstruct(z_pred, e_txt, e_img, oz, oz.schedule(), world)[1], img)


def test_reconstruct_deterministic(world, trial):
    z_pred, e_txt, e_img, _ = trial
    for den in df.DENOISERS:
        rc = df.ReconstructionConfig(s=0.5, denoiser=den, seed=3)
        a = df.reconstruct(z_pred, e_txt, e_img, rc, rc.schedule(), world)[1]
        b = df.reconstruct(z_pred, e_txt, e_img, rc, rc.schedule(), world)[1]
        assert np.array_equal(a, b)


def test_modes_change_conditioning(world, trial):
    z_pred, e_txt, e_img, _ = trial
    out = {}
    for mode in df.MODES:
        rc = df.ReconstructionConfig(s=0.3, mode=mode, denoiser="attn")
        out[mode] = df.reconstruct(z_pred, e_txt, e_img, rc, rc.schedule(), world)[0]
    assert not np.array_equal(out["full"], out["no_text"])
    assert not np.array_equal(out["full"], out["no_image"])
    assert np.array_equal(out["only_z"], z_pred)


def test_text_and_image_tokens_give_same_code(world, trial):
    _, e_txt, e_img, code = trial
    fz = world.frozen
    assert np.allclose(fr.infer_code(fz, e_txt, None), code, atol=1e-9)
    assert np.allclose(fr.infer_code(fz, None, e_img), code, atol=1e-9)


def test_reconstruct_errors(world, trial):
    z_pred, e_txt, e_img, _ = trial
    rc = df.ReconstructionConfig(s=0.5, denoiser="oracle")
    with pytest.raises(ConfigurationError):
        df.reconstruct(z_pred, None, None, rc, rc.schedule(), world)
    with pytest.raises(DimensionError):
        df.reconstruct(z_pred[:2], e_txt, e_img, rc, rc.schedule(), world)
    with pytest.raises(ConfigurationError):
        df.reconstruct(z_pred, e_txt, e_img, rc, df.make_schedule(10), world)
    with pytest.raises(ConfigurationError):
        df.ReconstructionConfig(mode="w/o z").validate()
    with pytest.raises(ConfigurationError):
        df.ReconstructionConfig(s=0.0).validate()


def test_oracle_converges_at_low_strength(world):
    fz = world.frozen
    rc = df.ReconstructionConfig(s=0.02, N=1000, beta_start=1e-4, beta_end=0.02, denoiser="oracle",
                                 noise_floor=10)
    sched = rc.schedule()
    errs = []
    for seed in range(20):
        r = nc.RngStream(seed, "oracle-test")
        code = r.normal(fz.code_dim)
        z_star = (fz.G @ code).reshape(fz.latent.dims)
        z_pred = r.normal(fz.latent.dims)
        z, _ = df.reconstruct(z_pred, None, None, rc, sched, world, r.child("sampler"), code=code)
        errs.append(np.linalg.norm(z - z_star) / np.linalg.norm(z_star))
    assert np.median(errs) < 0.1


def test_no_z_ignores_structural_latent(world, trial):
    z_pred, e_txt, e_img, _ = trial
    rc = df.ReconstructionConfig(s=0.75, mode="no_z", seed=1)
    a = df.reconstruct(z_pred, e_txt, e_img, rc, rc.schedule(), world)[0]
    b = df.reconstruct(np.zeros_like(z_pred), e_txt, e_img, rc, rc.schedule(), world)[0]
    assert np.array_equal(a, b)
