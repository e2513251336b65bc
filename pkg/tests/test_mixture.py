import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from bayesrecon.errors import ShapeError, ValidationError
from bayesrecon.mixture import (Discretization, MixtureParams, discretized_channel_prob,
                                draw_pixel, image_loglik, logistic_cdf, loglik_grad_params,
                                pixel_joint_logprob, pixel_terms, sample_pixel)
from bayesrecon.numerics import make_rng

DISC = Discretization()


def random_params(rng, k, lead=(), scale_range=(-3.0, 0.0)):
    return MixtureParams(
        rng.normal(size=lead + (k,)),
        rng.uniform(-0.9, 0.9, lead + (k, 2)),
        rng.uniform(*scale_range, lead + (k, 2)),
        rng.uniform(-0.8, 0.8, lead + (k,)),
    )


def sigmoid(z):
    return 1.0 / (1.0 + math.exp(-z))


def test_discretization_defaults():
    assert DISC.n_bins == 256
    assert DISC.centers[0] == -1 and DISC.centers[-1] == pytest.approx(1.0)
    with pytest.raises(ValidationError):
        Discretization(d=0.3)


def test_logistic_cdf_values():
    assert logistic_cdf(0.2, 0.2, 0.5) == 0.5
    assert logistic_cdf(1e6, 0.0, 1.0) == 1.0
    assert logistic_cdf(0.1 + 0.3 * math.log(3), 0.1, 0.3) == pytest.approx(0.75, abs=1e-15)
    assert logistic_cdf(-800.0, 0.0, 1.0) == 0.0
    with pytest.raises(ValidationError):
        logistic_cdf(0.0, 0.0, 0.0)


def test_channel_prob_scalar_value():
    d = 2 / 255
    expected = 2 * sigmoid(d / 2) - 1
    got = discretized_channel_prob(0.0, [1.0], [0.0], [1.0])
    assert got == pytest.approx(expected, rel=1e-12)
    assert got == pytest.approx(1.9608e-3, rel=1e-4)


@pytest.mark.parametrize("k", [1, 5, 10])
def test_channel_prob_normalized(rng, k):
    for _ in range(20):
        w = rng.dirichlet(np.ones(k))
        mu = rng.uniform(-1.5, 1.5, k)
        s = np.exp(rng.uniform(-7, 1, k))
        total = discretized_channel_prob(DISC.centers, w, mu, s).sum()
        assert abs(total - 1.0) < 1e-12


def test_channel_prob_degenerate_mixture():
    one = discretized_channel_prob(0.2, [1.0], [0.1], [0.2])
    two = discretized_channel_prob(0.2, [0.5, 0.5], [0.1, 0.1], [0.2, 0.2])
    assert two == pytest.approx(one, rel=1e-14)


def test_channel_prob_rejects_out_of_range():
    with pytest.raises(ValidationError):
        discretized_channel_prob(1.5, [1.0], [0.0], [1.0])


def test_channel_prob_monotone_as_scale_shrinks():
    v = DISC.snap(0.3)
    probs = [discretized_channel_prob(v, [1.0], [v + 1e-4], [s])
             for s in np.geomspace(1.0, 1e-3, 20)]
    assert np.all(np.diff(probs) > 0)


def test_joint_decoupled_when_alpha_zero(rng):
    p = random_params(rng, 3)
    p.alpha[:] = 0
    re, im = DISC.snap(0.25), DISC.snap(-0.4)
    w = p.weights
    ref = (math.log(discretized_channel_prob(re, w, p.mu[:, 0], p.scales[:, 0]))
           + math.log(discretized_channel_prob(im, w, p.mu[:, 1], p.scales[:, 1])))
    assert pixel_joint_logprob(re, im, p) == pytest.approx(ref, rel=1e-13)


def test_joint_alpha_substitution():
    re, im = DISC.snap(0.3), DISC.snap(0.1)
    p = MixtureParams([0.0], [[0.1, 0.0]], [[-2.0, -1.5]], [1.0])
    ref = (math.log(discretized_channel_prob(re, [1.0], [0.1], [math.exp(-2)]))
           + math.log(discretized_channel_prob(im, [1.0], [re], [math.exp(-1.5)])))
    assert pixel_joint_logprob(re, im, p) == pytest.approx(ref, rel=1e-13)


def test_joint_normalized_bruteforce(rng):
    c = DISC.centers
    re, im = np.meshgrid(c, c, indexing="ij")
    for k in (1, 3):
        p = random_params(rng, k)
        grid = MixtureParams(*(np.broadcast_to(a, re.shape + a.shape).copy()
                               for a in (p.pi_logits, p.mu, p.log_s, p.alpha)))
        total = np.exp(pixel_terms(re, im, grid, DISC).logp).sum()
        assert abs(total - 1.0) < 1e-9


def test_image_loglik_additivity(rng):
    p = random_params(rng, 4)
    single = pixel_joint_logprob(DISC.snap(0.1), DISC.snap(0.2), p)
    tiled = MixtureParams(*(np.broadcast_to(a, (2, 2) + a.shape).copy()
                            for a in (p.pi_logits, p.mu, p.log_s, p.alpha)))
    x = np.full((2, 2), 0.1 + 0.2j)
    assert image_loglik(x, tiled) == pytest.approx(4 * single, rel=1e-13)
    assert image_loglik(x[:1, :1], tiled[:1, :1]) == pytest.approx(single, rel=1e-13)


def test_image_loglik_naive_loop(rng):
    p = random_params(rng, 3, (3, 3))
    x = DISC.snap_complex(rng.uniform(-1, 1, (3, 3)) + 1j * rng.uniform(-1, 1, (3, 3)))
    naive = 0.0
    for i in range(3):
        for j in range(3):
            q = p[i, j]
            w = q.weights
            pr = discretized_channel_prob(x[i, j].real, w, q.mu[:, 0], q.scales[:, 0])
            mu_im = q.mu[:, 1] + q.alpha * x[i, j].real
            pi_ = discretized_channel_prob(x[i, j].imag, w, mu_im, q.scales[:, 1])
            naive += math.log(pr) + math.log(pi_)
    assert image_loglik(x, p) == pytest.approx(naive, rel=1e-12)


def test_image_loglik_shape_error(rng):
    with pytest.raises(ShapeError):
        image_loglik(np.zeros((2, 3)), random_params(rng, 2, (3, 3)))


def test_grad_single_component_logit_is_zero(rng):
    p = random_params(rng, 1, (2, 2))
    x = rng.uniform(-1, 1, (2, 2)) + 1j * rng.uniform(-1, 1, (2, 2))
    g = loglik_grad_params(x, p)
    assert np.all(np.abs(g.pi_logits) < 1e-14)


def test_grad_mu_zero_at_symmetric_point():
    v = DISC.snap(0.2)
    p = MixtureParams([[[0.0]]], [[[[v, 0.0]]]], [[[[-2.0, -2.0]]]], [[[0.0]]])
    g = loglik_grad_params(np.array([[v + 0j]]), p)
    assert abs(g.mu[0, 0, 0, 0]) < 1e-12


def _fd_check(f, arr, idx, h=1e-5):
    old = arr[idx]
    arr[idx] = old + h
    fp = f()
    arr[idx] = old - h
    fm = f()
    arr[idx] = old
    return (fp - fm) / (2 * h)


def test_grad_params_finite_difference(rng):
    shape = (4, 4)
    p = random_params(rng, 3, shape)
    x = DISC.snap_complex(rng.uniform(-1, 1, shape) + 1j * rng.uniform(-1, 1, shape))
    g = loglik_grad_params(x, p)
    names = ["pi_logits", "mu", "log_s", "alpha"]
    worst = 0.0
    for _ in range(200):
        name = names[rng.integers(4)]
        arr = getattr(p, name)
        idx = tuple(int(rng.integers(n)) for n in arr.shape)
        pix = idx[:2]
        # difference one pixel's term so roundoff stays small against the signal
        sub = p[pix]
        sub_arr = getattr(sub, name)
        sub_idx = idx[2:]
        re, im = x[pix].real, x[pix].imag
        fd = _fd_check(lambda: pixel_joint_logprob(re, im, sub), sub_arr, sub_idx)
        an = getattr(g, name)[idx]
        worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-3))
    assert worst <= 1e-5


def test_grad_values_finite_difference(rng):
    p = random_params(rng, 4, (3, 3))
    re = rng.uniform(-0.95, 0.95, (3, 3))
    im = rng.uniform(-0.95, 0.95, (3, 3))
    t = pixel_terms(re, im, p, DISC, need_grad=True)
    for arr, grad in ((re, t.grad_re), (im, t.grad_im)):
        for idx in np.ndindex(3, 3):
            fd = _fd_check(lambda: pixel_terms(re, im, p, DISC).total, arr, idx)
            assert abs(fd - grad[idx]) <= 1e-5 * max(abs(fd), abs(grad[idx]), 1e-3)


def test_log_scale_clamp_gradient(rng):
    p = random_params(rng, 2, (1, 1))
    p.log_s[...] = -9.0
    g = loglik_grad_params(np.array([[0.1 + 0.1j]]), p)
    assert np.all(g.log_s == 0)
    assert np.all(p.scales == pytest.approx(math.exp(-7)))


def test_probability_floor_bounds_loglik():
    p = MixtureParams([0.0], [[-1.0, -1.0]], [[-7.0, -7.0]], [0.0])
    lp = pixel_joint_logprob(1.0, 1.0, p)
    assert lp == pytest.approx(2 * math.log(1e-12))


def test_draw_pixel_degenerate():
    p = MixtureParams([0.0], [[0.3, -0.2]], [[-30.0, -30.0]], [1.0])
    re, im = draw_pixel(p, DISC, 0, 0.5, 0.5)
    assert re == DISC.snap(0.3)
    assert im == DISC.snap(-0.2 + re)


def test_sample_pixel_tight_scale_hits_mean_bin():
    mr, mi = float(DISC.snap(0.3)), float(DISC.snap(-0.2))
    p = MixtureParams([0.0], [[mr, mi]], [[-30.0, -30.0]], [0.0])
    rng = make_rng(0)
    hits = [sample_pixel(p, DISC, rng) == (mr, mi) for _ in range(2000)]
    # the scale is clamped at exp(-7), which leaves ~5% of the mass outside the bin
    expected = (2 * sigmoid(DISC.d / 2 / math.exp(-7)) - 1) ** 2
    assert abs(np.mean(hits) - expected) < 4 * math.sqrt(expected * (1 - expected) / 2000)


def test_sample_pixel_reproducible(rng):
    p = random_params(rng, 5)
    a = [sample_pixel(p, DISC, make_rng(3)) for _ in range(3)]
    assert a[0] == a[1] == a[2]


def test_sample_histogram_matches_probabilities():
    rng = make_rng(11)
    p = MixtureParams([0.3, -0.2], [[0.1, 0.0], [-0.5, 0.2]], [[-3.0, -2.5], [-2.0, -3.0]],
                      [0.2, -0.4])
    n = 1_000_000
    k = rng.choice(2, size=n, p=p.weights)
    u = np.clip(rng.random((n, 2)), 1e-12, 1 - 1e-12)
    s = p.scales
    re = DISC.snap(p.mu[k, 0] + s[k, 0] * np.log(u[:, 0] / (1 - u[:, 0])))
    bins = np.round((re - DISC.lo) / DISC.d).astype(int)
    counts = np.bincount(bins, minlength=DISC.n_bins)
    probs = discretized_channel_prob(DISC.centers, p.weights, p.mu[:, 0], s[:, 0])
    expected = n * probs
    sd = np.sqrt(n * probs * (1 - probs))
    live = expected > 5
    # 3-sigma family-wise over all bins (Bonferroni over 256 bins gives z = 4.2)
    z = stats.norm.isf(stats.norm.sf(3.0) / DISC.n_bins)
    assert np.all(np.abs(counts - expected) <= z * sd + 1)
    chi2 = np.sum((counts[live] - expected[live]) ** 2 / expected[live])
    assert stats.chi2.sf(chi2, live.sum() - 1) > 1e-3
    # the vectorised draw above is the same map as draw_pixel
    assert draw_pixel(p, DISC, int(k[0]), *u[0])[0] == re[0]


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 10), st.integers(0, 2**31))
def test_roundtrip_param_array(k, seed):
    p = random_params(make_rng(seed), k, (2, 3))
    q = MixtureParams.from_array(p.to_array(), k)
    for name in ("pi_logits", "mu", "log_s", "alpha"):
        assert np.array_equal(getattr(p, name), getattr(q, name))


def test_params_shape_validation():
    with pytest.raises(ShapeError):
        MixtureParams(np.zeros(3), np.zeros((3, 2)), np.zeros((3, 2)), np.zeros(2))
