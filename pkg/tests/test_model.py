import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from reedvae.errors import ConfigError, ShapeError
from reedvae.model import (
    LOGVAR_MAX,
    LOGVAR_MIN,
    ArchConfig,
    LatentDistribution,
    as_batch,
    count_parameters,
    decode,
    encode,
    encode_decode_iterate,
    init_model,
    kl_standard_normal,
    latent_mean,
    parameter_checksum,
    sample_latent,
)


def scalar_dist(mu, log_var, dtype=torch.float64):
    return LatentDistribution(torch.tensor(float(mu), dtype=dtype), torch.tensor(float(log_var), dtype=dtype))


def conv_params(cin, cout, k):
    return cin * cout * k * k + cout


def expected_param_count(arch: ArchConfig) -> int:
    widths = list(arch.conv_widths)
    enc, prev = 0, arch.channels
    for w in widths:
        enc += conv_params(prev, w, 3)
        prev = w
    enc += conv_params(prev, 2 * arch.latent_channels, 1)
    rev = widths[::-1]
    dec = conv_params(arch.latent_channels, rev[0], 3)
    for w, nxt in zip(rev, rev[1:] + [rev[-1]]):
        dec += conv_params(w, nxt, 3)
    dec += conv_params(rev[-1], arch.channels, 3)
    return enc + dec


def test_init_is_deterministic_and_seeded():
    a, b = init_model(ArchConfig()), init_model(ArchConfig())
    assert parameter_checksum(a) == parameter_checksum(b)
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert torch.equal(pa, pb)
    assert parameter_checksum(init_model(ArchConfig(seed=1))) != parameter_checksum(a)
    assert a.encoder_trainable
    assert all(torch.isfinite(p).all() for p in a.parameters())


def test_init_does_not_touch_global_rng():
    torch.manual_seed(5)
    expected = torch.rand(3)
    torch.manual_seed(5)
    init_model(ArchConfig())
    assert torch.equal(torch.rand(3), expected)


def test_default_parameter_count_matches_formula():
    arch = ArchConfig()
    n = count_parameters(init_model(arch))
    assert n == expected_param_count(arch)
    assert n < 2_000_000


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(image_size=32, latent_spatial=8, conv_widths=(32, 64), latent_channels=48),
        dict(latent_spatial=8),
        dict(nonlinearity="swish2"),
        dict(conv_widths=()),
        dict(channels=2),
    ],
)
def test_invalid_arch_raises(kwargs):
    with pytest.raises(ConfigError):
        ArchConfig(**kwargs)


def test_latent_not_smaller_than_pixels_raises():
    with pytest.raises(ConfigError):
        ArchConfig(latent_channels=192)  # 192*16 = 3072 = 3*32*32
    with pytest.raises(ConfigError):
        init_model("not a config")


def test_arch_dict_roundtrip():
    arch = ArchConfig(conv_widths=[16, 32, 64], seed=3)
    assert ArchConfig.from_dict(arch.to_dict()) == arch


def test_encode_shapes_clamp_and_determinism():
    model = init_model(ArchConfig())
    x = torch.rand(2, 3, 32, 32)
    d1, d2 = model.encode(x), model.encode(x.clone())
    assert d1.mean.shape == (2, 4, 4, 4)
    assert torch.equal(d1.mean, d2.mean) and torch.equal(d1.log_variance, d2.log_variance)
    assert d1.log_variance.min() >= LOGVAR_MIN and d1.log_variance.max() <= LOGVAR_MAX
    # force extreme log-variances through the last conv bias
    with torch.no_grad():
        model.encoder.net[-1].bias[4:] = 1e4
    assert float(model.encode(x).log_variance.detach().max()) == LOGVAR_MAX
    with torch.no_grad():
        model.encoder.net[-1].bias[4:] = -1e4
    assert float(model.encode(x).log_variance.detach().min()) == LOGVAR_MIN


def test_encode_decode_shape_errors():
    model = init_model(ArchConfig())
    with pytest.raises(ShapeError):
        model.encode(torch.rand(1, 3, 16, 16))
    with pytest.raises(ShapeError):
        model.decode(torch.rand(1, 4, 8, 8))
    with pytest.raises(ShapeError):
        LatentDistribution(torch.zeros(2), torch.zeros(3))
    with pytest.raises(ShapeError):
        as_batch(np.zeros((4, 4)))


def test_numpy_hwc_input_is_accepted():
    model = init_model(ArchConfig())
    img = np.random.default_rng(0).random((32, 32, 3)).astype(np.float32)
    d = encode(model, img)
    assert torch.equal(d.mean, model.encode(torch.from_numpy(img.transpose(2, 0, 1))[None]).mean)


def test_sample_latent_small_variance_limit_and_reproducibility():
    mu = torch.randn(3, 4, 4, 4, dtype=torch.float64, generator=torch.Generator().manual_seed(1))
    d = LatentDistribution(mu, torch.full_like(mu, LOGVAR_MIN))
    z = sample_latent(d, torch.Generator().manual_seed(0))
    eps = torch.randn(mu.shape, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
    assert torch.allclose(z - mu, math.exp(LOGVAR_MIN / 2) * eps, atol=1e-15, rtol=1e-9)
    scalar = scalar_dist(2.0, LOGVAR_MIN)
    assert abs(float(sample_latent(scalar, torch.Generator().manual_seed(0))) - 2.0) < 1e-6
    mu = mu.float()
    d = LatentDistribution(mu, torch.zeros_like(mu))
    z1 = sample_latent(d, torch.Generator().manual_seed(7))
    z2 = sample_latent(d, torch.Generator().manual_seed(7))
    assert torch.equal(z1, z2)
    assert torch.equal(latent_mean(d), mu) and torch.equal(latent_mean(d), latent_mean(d))


def test_sample_latent_monte_carlo_moments():
    mu = torch.full((100_000,), 2.0, dtype=torch.float64)
    lv = torch.full_like(mu, math.log(4.0))
    z = sample_latent(LatentDistribution(mu, lv), torch.Generator().manual_seed(1)).numpy()
    assert abs(z.mean() - 2.0) < 0.05
    assert abs(z.var() - 4.0) < 0.15


def test_reparameterization_gradient_of_mean_by_finite_difference():
    # E[z] over a fixed eps set; d/dmu should be exactly 1
    eps_seed = 3

    def mean_z(mu):
        d = LatentDistribution(torch.full((1000,), mu, dtype=torch.float64), torch.full((1000,), 0.5, dtype=torch.float64))
        return sample_latent(d, torch.Generator().manual_seed(eps_seed)).mean()

    h = 1e-4
    fd = (float(mean_z(0.3 + h)) - float(mean_z(0.3 - h))) / (2 * h)
    assert fd == pytest.approx(1.0, rel=1e-4)
    mu = torch.tensor([0.3] * 1000, dtype=torch.float64, requires_grad=True)
    lv = torch.full((1000,), 0.5, dtype=torch.float64, requires_grad=True)
    z = sample_latent(LatentDistribution(mu, lv), torch.Generator().manual_seed(eps_seed))
    z.mean().backward()
    assert torch.allclose(mu.grad.sum(), torch.tensor(1.0, dtype=torch.float64))
    assert lv.grad is not None and torch.isfinite(lv.grad).all()


@pytest.mark.parametrize(
    "mu,log_var,expected",
    [(0.0, 0.0, 0.0), (1.0, 0.0, 0.5), (0.0, math.log(4.0), 0.5 * (4 - 1 - math.log(4)))],
)
def test_kl_analytic_cases(mu, log_var, expected):
    assert float(kl_standard_normal(scalar_dist(mu, log_var))) == pytest.approx(expected, abs=1e-9)
    if log_var:
        assert expected == pytest.approx(0.8069, abs=1e-4)


def test_kl_sums_over_latents_and_averages_over_batch():
    mu = torch.zeros(2, 3, dtype=torch.float64)
    mu[0] = 1.0  # sample 0: 3 * 0.5, sample 1: 0
    d = LatentDistribution(mu, torch.zeros_like(mu))
    assert float(kl_standard_normal(d)) == pytest.approx(0.75, abs=1e-12)


def mc_kl(mu, log_var, n=100_000, seed=0):
    r = np.random.default_rng(seed)
    sigma = math.exp(0.5 * log_var)
    z = mu + sigma * r.standard_normal(n)
    log_q = -0.5 * ((z - mu) / sigma) ** 2 - math.log(sigma) - 0.5 * math.log(2 * math.pi)
    log_p = -0.5 * z ** 2 - 0.5 * math.log(2 * math.pi)
    return float(np.mean(log_q - log_p))


@pytest.mark.parametrize("seed", range(5))
def test_kl_matches_monte_carlo(seed):
    r = np.random.default_rng(100 + seed)
    mu, lv = r.uniform(-2, 2), r.uniform(-1.5, 1.5)
    exact = float(kl_standard_normal(scalar_dist(mu, lv)))
    assert mc_kl(mu, lv, seed=seed) == pytest.approx(exact, rel=0.01)


@settings(max_examples=100, deadline=None)
@given(st.floats(-5, 5), st.floats(-10, 10))
def test_kl_nonnegative(mu, lv):
    val = float(kl_standard_normal(scalar_dist(mu, lv)))
    assert val >= -1e-12
    if abs(mu) < 1e-6 and abs(lv) < 1e-6:
        assert val < 1e-9


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.1, 1e3))
def test_decode_outputs_in_unit_interval(seed, scale):
    model = _shared_model()
    z = scale * torch.randn(2, 4, 4, 4, generator=torch.Generator().manual_seed(seed))
    with torch.no_grad():
        x = decode(model, z)
    assert x.shape == (2, 3, 32, 32)
    assert x.min() >= 0 and x.max() <= 1
    assert torch.equal(x, model.decode(z))


_MODEL = {}


def _shared_model():
    if "m" not in _MODEL:
        _MODEL["m"] = init_model(ArchConfig())
    return _MODEL["m"]


def test_iterate_n1_is_manual_composition():
    model = init_model(ArchConfig())
    x = torch.rand(2, 3, 32, 32)
    (x1,) = encode_decode_iterate(model, x, 1)
    with torch.no_grad():
        manual = model.decode(model.encode(x).mean)
    assert torch.equal(x1, manual)
    seq = encode_decode_iterate(model, x, 4)
    assert len(seq) == 4 and torch.equal(seq[0], x1)
    with pytest.raises(ValueError):
        encode_decode_iterate(model, x, 0)
    with pytest.raises(ValueError):
        encode_decode_iterate(model, x, 1, latent_mode="median")


def test_iterate_sample_mode_is_seeded():
    model = init_model(ArchConfig())
    x = torch.rand(2, 3, 32, 32)
    a = encode_decode_iterate(model, x, 3, latent_mode="sample", seed=4)
    b = encode_decode_iterate(model, x, 3, latent_mode="sample", seed=4)
    c = encode_decode_iterate(model, x, 3, latent_mode="sample", seed=5)
    assert all(torch.equal(p, q) for p, q in zip(a, b))
    assert not torch.equal(a[-1], c[-1])


@pytest.mark.parametrize("n", [1, 3, 25])
def test_identity_codec_is_exact_fixed_point(identity_codec, n):
    x = torch.rand(2, 3, 16, 16)
    seq = encode_decode_iterate(identity_codec, x, n)
    assert all(torch.equal(xi, x) for xi in seq)


def test_post_hook_applied_before_reencode(identity_codec):
    x = torch.zeros(1, 1, 8, 8)
    seq = encode_decode_iterate(identity_codec, x, 3, post=lambda t, i: t + 1.0)
    assert [float(s.mean()) for s in seq] == [1.0, 2.0, 3.0]


def test_encoder_freeze_flag():
    model = init_model(ArchConfig())
    model.encoder_trainable = False
    assert not model.encoder_trainable
    assert all(p.requires_grad for p in model.decoder.parameters())
    assert len(model.trainable_parameters()) == len(list(model.decoder.parameters()))
