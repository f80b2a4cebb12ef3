import dataclasses

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from neuroswift import dataio as dio
from neuroswift import diffusion as df
from neuroswift import frozen as fr
from neuroswift import numcore as nc
from neuroswift.errors import ConfigurationError, DimensionError


@pytest.fixture(scope="module")
def fz(world):
    return world.frozen


def _cos(a, b):
    a, b = a.reshape(-1), b.reshape(-1)
    return float(a @ b / np.linalg.norm(a) / np.linalg.norm(b))


# ------------------------------------------------------------- autoencoder


def test_decoder_columns_orthonormal(fz):
    assert np.allclose(fz.E_enc @ fz.D_dec, np.eye(fz.latent.size), atol=1e-10)


def _world_fz():
    # hypothesis tests cannot take function-scoped fixtures; the world is cheap to rebuild
    return dio.generate_world(0).frozen


@given(st.integers(0, 2 ** 31))
def test_encode_inverts_decode(seed):
    fz = _world_fz()
    z = np.random.default_rng(seed).normal(size=fz.latent.dims) * 3
    assert np.max(np.abs(fr.autokl_encode(fz, fr.autokl_decode(fz, z)) - z)) < 1e-10


def test_zero_maps_to_zero(fz):
    assert not fr.autokl_encode(fz, np.zeros(fz.image_dims)).any()
    assert not fr.autokl_decode(fz, np.zeros(fz.latent.dims)).any()


def test_encode_deterministic(fz, rng):
    img = rng.normal(size=fz.image_dims)
    assert np.array_equal(fr.autokl_encode(fz, img), fr.autokl_encode(fz, img))


def test_decode_preserves_norm(fz, rng):
    z = rng.normal(size=fz.latent.dims)
    assert abs(np.linalg.norm(fr.autokl_decode(fz, z)) - np.linalg.norm(z)) < 1e-10


def test_decode_encode_is_orthogonal_projection(fz, rng):
    img = rng.normal(size=fz.image_dims)
    resid = (img - fr.autokl_decode(fz, fr.autokl_encode(fz, img))).reshape(-1)
    assert np.max(np.abs(fz.E_enc @ resid)) < 1e-8


def test_encode_decode_adjoint(fz, rng):
    img, z = rng.normal(size=fz.image_dims), rng.normal(size=fz.latent.dims)
    lhs = np.sum(fr.autokl_encode(fz, img) * z)
    rhs = np.sum(img * fr.autokl_decode(fz, z))
    assert abs(lhs - rhs) < 1e-8


def test_dimension_errors(fz):
    with pytest.raises(DimensionError):
        fr.autokl_encode(fz, np.zeros((3, 5, 5)))
    with pytest.raises(DimensionError):
        fr.autokl_decode(fz, np.zeros((1, 2, 2)))
    with pytest.raises(DimensionError):
        fr.clip_text_encode(fz, np.zeros(fz.code_dim + 1))


# ---------------------------------------------------------------- clippers


def test_text_encoder_offsets_and_linearity(fz, rng):
    assert np.array_equal(fr.clip_text_encode(fz, np.zeros(fz.code_dim)), fz.pos_txt)
    a, b = rng.normal(size=fz.code_dim), rng.normal(size=fz.code_dim)
    lin = lambda c: fr.clip_text_encode(fz, c) - fz.pos_txt  # noqa: E731
    assert np.allclose(lin(2 * a - b), 2 * lin(a) - lin(b), atol=1e-12)


def test_image_encoder_offsets_and_linearity(fz, rng):
    assert np.array_equal(fr.clip_image_encode(fz, np.zeros(fz.image_dims)), fz.pos_img)
    a, b = rng.normal(size=fz.image_dims), rng.normal(size=fz.image_dims)
    lin = lambda x: fr.clip_image_encode(fz, x) - fz.pos_img  # noqa: E731
    assert np.allclose(lin(2 * a - b), 2 * lin(a) - lin(b), atol=1e-12)


def test_distinct_codes_give_distinct_embeddings(fz):
    r = nc.RngStream(11, "pairs")
    worst_txt = worst_img = -1.0
    for _ in range(100):
        c1, c2 = r.normal(fz.code_dim), r.normal(fz.code_dim)
        worst_txt = max(worst_txt, _cos(fr.clip_text_encode(fz, c1), fr.clip_text_encode(fz, c2)))
        i1, i2 = fr.semantic_image_gen(fz, c1), fr.semantic_image_gen(fz, c2)
        worst_img = max(worst_img, _cos(fr.clip_image_encode(fz, i1), fr.clip_image_encode(fz, i2)))
    assert worst_txt < 0.99 and worst_img < 0.99


def test_image_encoder_recovers_code_of_semantic_image(fz, rng):
    c = rng.normal(size=fz.code_dim)
    assert np.allclose(fr.image_to_code(fz, fr.semantic_image_gen(fz, c)), c, atol=1e-9)


# ---------------------------------------------------------- semantic image


def test_semantic_image_noise_free(fz, rng):
    c = rng.normal(size=fz.code_dim)
    expect = fr.autokl_decode(fz, (fz.G @ c).reshape(fz.latent.dims))
    assert np.array_equal(fr.semantic_image_gen(fz, c, sigma=0.0), expect)


def test_semantic_image_deterministic(fz, rng):
    c = rng.normal(size=fz.code_dim)
    a = fr.clip_image_encode(fz, fr.semantic_image_gen(fz, c, nc.RngStream(4, "s"), 0.05))
    b = fr.clip_image_encode(fz, fr.semantic_image_gen(fz, c, nc.RngStream(4, "s"), 0.05))
    assert np.array_equal(a, b)
    with pytest.raises(ConfigurationError):
        fr.semantic_image_gen(fz, c, None, 0.1)


def test_semantic_image_partially_matches_stimulus(world):
    fz = world.frozen
    ids = np.arange(1000, 1100)
    codes, _, images = world.stimuli(ids)
    r = nc.RngStream(0, "sem")
    corr = [np.corrcoef(fr.semantic_image_gen(fz, c, r.child(int(i)), world.config.sigma_sem).reshape(-1),
                        img.reshape(-1))[0, 1] for c, i, img in zip(codes, ids, images)]
    assert 0 < np.mean(corr) < 1
    assert all(0 < c < 1 for c in corr)


# ---------------------------------------------------------------- denoisers


@pytest.fixture(scope="module")
def sched():
    return df.make_schedule(100, 1e-4, 0.05)


def test_oracle_zero_noise(fz, sched, rng):
    z_star = rng.normal(size=fz.latent.dims)
    ab = sched.alpha_bar[30]
    assert np.max(np.abs(fr.oracle_denoiser(np.sqrt(ab) * z_star, 30, z_star, sched))) < 1e-14


@given(st.integers(1, 100), st.integers(0, 2 ** 31))
def test_oracle_inverts_noising(t, seed):
    sched = df.make_schedule(100, 1e-4, 0.05)
    r = np.random.default_rng(seed)
    z_star, eps = r.normal(size=(4, 8, 8)), r.normal(size=(4, 8, 8))
    z_t = df.add_noise(z_star, t, sched, eps=eps)
    assert np.max(np.abs(fr.oracle_denoiser(z_t, t, z_star, sched) - eps)) < 1e-10


def test_oracle_step_contracts(fz, sched):
    r = nc.RngStream(2, "traj")
    for k in range(20):
        z_star = r.normal(fz.latent.dims)
        t0 = 10 + 4 * k
        z = df.add_noise(z_star, t0, sched, r)
        for t in range(t0, 0, -1):
            target = np.sqrt(sched.alpha_bar[t - 1]) * z_star
            before = np.linalg.norm(z - np.sqrt(sched.alpha_bar[t]) * z_star)
            z = df.denoise_step(z, t, fr.oracle_denoiser(z, t, z_star, sched), sched,
                                add_noise_flag=False)
            after = np.linalg.norm(z - target)
            assert after < before or before == 0


def test_oracle_rejects_unit_alpha_bar(fz):
    flat = df.NoiseSchedule(3, np.zeros(4), np.ones(4), np.ones(4))
    with pytest.raises(ConfigurationError):
        fr.oracle_denoiser(np.zeros(fz.latent.dims), 1, np.zeros(fz.latent.dims), flat)
    with pytest.raises(ConfigurationError):
        fr.oracle_denoiser(np.zeros(fz.latent.dims), 0, np.zeros(fz.latent.dims),
                           df.make_schedule(3))


def test_gaussian_denoiser_reduces_to_oracle(fz, sched, rng):
    point = dataclasses.replace(fz, structure_var=0.0)
    mean, z = rng.normal(size=fz.latent.dims), rng.normal(size=fz.latent.dims)
    a = fr.gaussian_denoiser(z, 40, mean, sched, point, spread=0.0)
    b = fr.oracle_denoiser(z, 40, mean, sched)
    assert np.allclose(a, b, atol=1e-12)


def test_gaussian_denoiser_matches_dense_posterior(fz, sched, rng):
    """Exact eps prediction for N(mean, Sigma) against a dense linear-algebra oracle."""
    spread, t = 0.02, 25
    n = fz.latent.size
    P = np.stack([fr.block_mean_projector(fz.latent)(e.reshape(fz.latent.dims)).reshape(-1)
                  for e in np.eye(n)])
    Sigma = fz.structure_var * fz.latent.factor ** 2 * P + spread * np.eye(n)
    mean, z = rng.normal(size=n), rng.normal(size=n)
    ab = sched.alpha_bar[t]
    cov_zt = ab * Sigma + (1 - ab) * np.eye(n)
    x0 = mean + np.sqrt(ab) * Sigma @ np.linalg.solve(cov_zt, z - np.sqrt(ab) * mean)
    expect = (z - np.sqrt(ab) * x0) / np.sqrt(1 - ab)
    got = fr.gaussian_denoiser(z.reshape(fz.latent.dims), t, mean.reshape(fz.latent.dims), sched,
                               fz, spread)
    assert np.allclose(got.reshape(-1), expect, atol=1e-10)


def _tokens(fz, rng):
    return rng.normal(size=fz.txt_shape), rng.normal(size=fz.img_shape)


def test_attn_denoiser_shape_and_text_ablation(fz, rng):
    z = rng.normal(size=fz.latent.dims)
    e_txt, e_img = _tokens(fz, rng)
    for t in (1, 10, 50):
        assert fr.attn_denoiser(z, t, e_txt, e_img, fz.denoiser).shape == z.shape
    full = fr.attn_denoiser(z, 5, e_txt, e_img, fz.denoiser)
    ablated = fr.attn_denoiser(z, 5, None, e_img, fz.denoiser)
    assert np.linalg.norm(full - ablated) > 0


def test_attn_denoiser_width_mismatch(fz, rng):
    z = rng.normal(size=fz.latent.dims)
    with pytest.raises(DimensionError):
        fr.attn_denoiser(z, 3, rng.normal(size=(2, 5)), None, fz.denoiser)
    with pytest.raises(ConfigurationError):
        fr.attn_denoiser(z, 3, None, None, fz.denoiser)


def test_attn_denoiser_gradients(fz, rng):
    params = {k: v.copy() for k, v in fz.denoiser.items()}
    z = rng.normal(size=fz.latent.dims)
    e_txt, e_img = _tokens(fz, rng)
    proj = rng.normal(size=z.shape)

    def loss_at(zz):
        return float(np.sum(fr.attn_denoiser(zz, 7, e_txt, e_img, params) * proj))

    out, cache = fr.attn_denoiser(z, 7, e_txt, e_img, params, return_cache=True)
    dz, dkv, grads = fr.attn_denoiser_backward(proj, cache)
    err_z = nc.finite_diff_check(lambda zz: (loss_at(zz), dz), z)
    assert err_z < 1e-4
    worst = 0.0
    for layer, lp in params.items():
        errs = nc.finite_diff_check_tensors(lambda: loss_at(z), lp.tensors, grads[layer],
                                            max_coords=40, rng=nc.RngStream(0, layer))
        worst = max(worst, *errs.values())
    assert worst < 1e-4
    kv = np.vstack([e_txt, e_img])
    err_kv = nc.finite_diff_check(
        lambda k: (float(np.sum(fr.attn_denoiser(z, 7, k[:len(e_txt)], k[len(e_txt):], params) * proj)),
                   dkv), kv)
    assert err_kv < 1e-4


def test_frozen_components_unchanged_by_use(world, rng):
    before = world.hash
    fz = world.frozen
    fr.attn_denoiser(rng.normal(size=fz.latent.dims), 3, *_tokens(fz, rng), fz.denoiser)
    assert dio.world_hash(world.config, fz.arrays()) == before
