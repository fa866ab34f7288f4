import numpy as np
import pytest
from scipy import special  # independent Bessel oracle for the tests only

from patchsim import autodiff as ad
from patchsim.autodiff import Tape, Tensor
from patchsim.gradcheck import check_tensor_grads, finite_difference, grad_mismatch
from patchsim.head import (
    LOG_2PI,
    MixtureParams,
    NextPatchHead,
    dlog_i0,
    laplace_logpdf,
    log_i0,
    mixture_nll,
    mode_log_likelihoods,
    patch_log_likelihood,
    von_mises_logpdf,
)

# frozen from the independent oracle: 1 - log(2*pi*i0(1)), i0(1) = 1.2660658777520084
VM_AT_MODE_KAPPA1 = -1.0737914249165241
# frozen analytic value: 2 * (-5*ln 2 - ln 2pi)
PATCH_LL_L2_AT_MODE = -10.607225938418143


def test_log_i0_matches_bessel_oracle():
    grid = np.concatenate(
        [np.linspace(1e-6, 19.9, 400), np.linspace(20.1, 500.0, 400)]
    )
    mine = log_i0(grid)
    oracle = np.log(special.i0e(grid)) + grid
    assert np.max(np.abs(mine - oracle)) < 1e-7


def test_dlog_i0_matches_ratio_oracle_and_fd():
    grid = np.concatenate([np.linspace(0.01, 19.5, 200), np.linspace(21.0, 300.0, 100)])
    oracle = special.i1e(grid) / special.i0e(grid)
    assert np.max(np.abs(dlog_i0(grid) - oracle)) < 1e-7
    x = np.array([0.3, 2.0, 15.0, 25.0, 80.0])
    fd = (log_i0(x + 1e-6) - log_i0(x - 1e-6)) / 2e-6
    assert np.max(np.abs(dlog_i0(x) - fd)) < 1e-6


def test_laplace_at_mode():
    assert abs(laplace_logpdf(0.0, 0.0, 1.0).item() + np.log(2.0)) < 1e-12


def test_laplace_one_unit_off():
    assert abs(laplace_logpdf(1.0, 0.0, 1.0).item() + np.log(2.0) + 1.0) < 1e-12


def test_laplace_sums_over_trailing_axis():
    x = np.zeros(5)
    out = laplace_logpdf(x, x, np.ones(5))
    assert abs(out.item() + 5 * np.log(2.0)) < 1e-12


def test_laplace_rejects_nonpositive_scale():
    with pytest.raises(ValueError, match="positive"):
        laplace_logpdf(0.0, 0.0, 0.0)


def test_laplace_integrates_to_one():
    # quadrature oracle over a wide grid with a node exactly at the kink
    for mu, b in [(0.0, 1.0), (2.0, 0.5), (-1.0, 3.0)]:
        x = mu + np.linspace(-60.0, 60.0, 60001)
        dens = np.exp(laplace_logpdf(x[:, None], mu, b).data)
        assert abs(np.trapezoid(dens, x) - 1.0) < 1e-4


def test_von_mises_uniform_limit():
    for theta in (-3.0, 0.0, 2.0):
        val = von_mises_logpdf(theta, 0.1, 1e-12).item()
        assert abs(val + LOG_2PI) < 1e-6


def test_von_mises_at_mode_kappa_one():
    val = von_mises_logpdf(0.7, 0.7, 1.0).item()
    assert abs(val - VM_AT_MODE_KAPPA1) < 1e-7


def test_von_mises_integrates_to_one():
    theta = np.linspace(-np.pi, np.pi, 20001)
    for kappa in (0.1, 1.0, 10.0):
        dens = np.exp(von_mises_logpdf(theta, 0.3, np.full_like(theta, kappa)).data)
        assert abs(np.trapezoid(dens, theta) - 1.0) < 1e-6


def test_von_mises_rejects_nonpositive_kappa():
    with pytest.raises(ValueError, match="positive"):
        von_mises_logpdf(0.0, 0.0, -1.0)


def _head(rng, d=8, k=2, ell=3):
    return NextPatchHead(rng, d=d, n_modes=k, patch_len=ell)


def test_predict_shapes_and_simplex(rng):
    head = _head(rng, d=8, k=4, ell=5)
    f = Tensor(rng.standard_normal((3, 8)))
    mp = head.predict_batch(f)
    assert mp.pi.shape == (3, 4)
    assert mp.mu.shape == (3, 4, 5, 6)
    assert mp.b.shape == (3, 4, 5, 5)
    assert mp.kappa.shape == (3, 4, 5)
    assert np.max(np.abs(mp.pi.data.sum(-1) - 1.0)) < 1e-9
    assert np.all(mp.b.data > 0) and np.all(mp.kappa.data > 0)


def test_predict_deterministic(rng):
    head = _head(rng)
    f = Tensor(rng.standard_normal((2, 8)))
    a = head.predict_batch(f)
    b = head.predict_batch(f)
    assert np.array_equal(a.mu.data, b.mu.data)
    assert np.array_equal(a.pi.data, b.pi.data)


def test_patch_len_one_single_triple(rng):
    head = _head(rng, ell=1)
    mp = head.predict_patch_params(Tensor(rng.standard_normal(8)))
    assert mp.mu.shape == (1, 2, 1, 6)


def test_predictions_independent_of_targets(rng):
    """The recurrent update path consumes predicted locations only, so the
    mixture parameters cannot depend on what the targets are."""
    head = _head(rng)
    f = Tensor(rng.standard_normal((2, 8)))
    mp1 = head.predict_batch(f)
    t1 = rng.standard_normal((2, 3, 6))
    t2 = rng.standard_normal((2, 3, 6))
    mixture_nll(t1, mp1)
    mp2 = head.predict_batch(f)
    mixture_nll(t2, mp2)
    assert np.array_equal(mp1.mu.data, mp2.mu.data)


def _manual_params(pi, mu, b, kappa):
    log_pi = np.log(pi)
    return MixtureParams(
        pi=Tensor(pi), mu=Tensor(mu), b=Tensor(b), kappa=Tensor(kappa), log_pi=Tensor(log_pi)
    )


def test_patch_ll_at_mode_analytic():
    ell = 2
    mu = np.zeros((1, 1, ell, 6))
    mp = _manual_params(
        np.ones((1, 1)), mu, np.ones((1, 1, ell, 5)), np.full((1, 1, ell), 1e-12)
    )
    target = np.zeros((ell, 6))
    val = patch_log_likelihood(target, mp, mode=0).item()
    assert abs(val - PATCH_LL_L2_AT_MODE) < 1e-6


def test_patch_ll_reduces_to_single_state():
    mu = np.zeros((1, 1, 1, 6))
    mp = _manual_params(
        np.ones((1, 1)), mu, np.ones((1, 1, 1, 5)), np.ones((1, 1, 1))
    )
    val = patch_log_likelihood(np.zeros((1, 6)), mp, mode=0).item()
    expected = -5 * np.log(2.0) + VM_AT_MODE_KAPPA1 - 1.0 + 1.0  # vm at mode, kappa 1
    assert abs(val - expected) < 1e-7


def test_patch_ll_matches_per_step_oracle(rng):
    n, k, ell = 2, 3, 4
    mu = rng.standard_normal((n, k, ell, 6))
    b = rng.uniform(0.2, 2.0, (n, k, ell, 5))
    kappa = rng.uniform(0.1, 5.0, (n, k, ell))
    pi = rng.dirichlet(np.ones(k), size=n)
    mp = _manual_params(pi, mu, b, kappa)
    targets = rng.standard_normal((n, ell, 6))
    ll = mode_log_likelihoods(targets, mp).data
    for q in range(n):
        for m in range(k):
            acc = 0.0
            for t in range(ell):
                for dim in range(5):
                    acc += laplace_logpdf(
                        targets[q, t, dim], mu[q, m, t, dim], b[q, m, t, dim]
                    ).item()
                acc += von_mises_logpdf(
                    targets[q, t, 5], mu[q, m, t, 5], kappa[q, m, t]
                ).item()
            assert abs(acc - ll[q, m]) < 1e-12


def test_patch_ll_rejects_invalid_steps(rng):
    mp = _manual_params(
        np.ones((1, 1)), np.zeros((1, 1, 2, 6)), np.ones((1, 1, 2, 5)), np.ones((1, 1, 2))
    )
    bad = np.zeros((2, 6))
    bad[1, 0] = np.nan
    with pytest.raises(ValueError, match="mask"):
        patch_log_likelihood(bad, mp, 0)


def test_mixture_nll_single_mode_reduces_to_sum(rng):
    n, ell = 3, 2
    mu = rng.standard_normal((n, 1, ell, 6))
    mp = _manual_params(
        np.ones((n, 1)), mu, np.ones((n, 1, ell, 5)), np.ones((n, 1, ell))
    )
    targets = rng.standard_normal((n, ell, 6))
    nll = mixture_nll(targets, mp).item()
    direct = -mode_log_likelihoods(targets, mp).data.sum()
    assert abs(nll - direct) < 1e-12


def test_mixture_nll_identical_modes_collapse(rng):
    n, ell = 2, 2
    mu1 = rng.standard_normal((n, 1, ell, 6))
    one = _manual_params(
        np.ones((n, 1)), mu1, np.ones((n, 1, ell, 5)), np.ones((n, 1, ell))
    )
    two = _manual_params(
        np.full((n, 2), 0.5),
        np.repeat(mu1, 2, axis=1),
        np.ones((n, 2, ell, 5)),
        np.ones((n, 2, ell)),
    )
    targets = rng.standard_normal((n, ell, 6))
    assert abs(mixture_nll(targets, one).item() - mixture_nll(targets, two).item()) < 1e-12


def test_mixture_nll_brute_force_oracle(rng):
    """Direct enumeration sum_k pi_k exp(ll_k), then -log."""
    for trial in range(100):
        n = int(rng.integers(1, 4))
        k = int(rng.integers(1, 5))
        ell = int(rng.integers(1, 4))
        mu = rng.standard_normal((n, k, ell, 6))
        b = rng.uniform(0.1, 2.0, (n, k, ell, 5))
        kappa = rng.uniform(0.05, 8.0, (n, k, ell))
        pi = rng.dirichlet(np.ones(k), size=n)
        mp = _manual_params(pi, mu, b, kappa)
        targets = rng.standard_normal((n, ell, 6)) * 2
        nll = mixture_nll(targets, mp).item()
        ll = mode_log_likelihoods(targets, mp).data
        direct = -np.log((pi * np.exp(ll)).sum(axis=1)).sum()
        assert abs(nll - direct) < 1e-9


def test_mixture_nll_mode_relabeling_invariant(rng):
    n, k, ell = 2, 4, 3
    mu = rng.standard_normal((n, k, ell, 6))
    b = rng.uniform(0.1, 2.0, (n, k, ell, 5))
    kappa = rng.uniform(0.05, 8.0, (n, k, ell))
    pi = rng.dirichlet(np.ones(k), size=n)
    targets = rng.standard_normal((n, ell, 6))
    base = mixture_nll(targets, _manual_params(pi, mu, b, kappa)).item()
    perm = rng.permutation(k)
    permuted = mixture_nll(
        targets, _manual_params(pi[:, perm], mu[:, perm], b[:, perm], kappa[:, perm])
    ).item()
    assert abs(base - permuted) < 1e-12


def test_mixture_nll_finite_for_wild_targets(rng):
    head = _head(rng)
    f = Tensor(rng.standard_normal((2, 8)) * 10)
    mp = head.predict_batch(f)
    targets = rng.standard_normal((2, 3, 6)) * 1e4
    assert np.isfinite(mixture_nll(targets, mp).item())


def test_head_gradient_through_nll(rng):
    head = _head(rng, d=6, k=2, ell=2)
    f0 = rng.standard_normal((2, 6))
    targets = rng.standard_normal((2, 2, 6))
    f = Tensor(f0, requires_grad=True)

    def loss_fn():
        return mixture_nll(targets, head.predict_batch(f))

    params = dict(head.parameters())
    params["__input__"] = f
    ratios = check_tensor_grads(loss_fn, params, rel_tol=1e-3)
    assert max(ratios.values()) <= 1.0
