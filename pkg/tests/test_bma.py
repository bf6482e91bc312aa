import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from deepstress.bma import (
    BmaOptions,
    ModelSpec,
    PosteriorSummary,
    bma_predict,
    enumerate_posterior,
    fit_satellites,
    g_value,
    log_marginal_likelihood,
    mcmc_birth_death,
    model_prior_logp,
    ols_fit,
    zellner_posterior,
)
from deepstress.errors import DataError, SingularMatrixError
from deepstress.panel import SATELLITE_TARGETS, SupervisedPanel, TARGET_NAMES, Quarter


def pmp_l1(a: PosteriorSummary, b: PosteriorSummary) -> float:
    pa = {m.tobytes(): p for m, p in zip(a.masks, a.pmp)}
    pb = {m.tobytes(): p for m, p in zip(b.masks, b.pmp)}
    return sum(abs(pa.get(k, 0.0) - pb.get(k, 0.0)) for k in set(pa) | set(pb))


def dense_oracle(X, y, idx, g):
    """Textbook g-prior quantities via explicit inverses (independent of the QR/Cholesky path)."""
    N = len(y)
    Xc = X[:, idx] - X[:, idx].mean(axis=0)
    yc = y - y.mean()
    inv = np.linalg.inv(Xc.T @ Xc)
    beta = inv @ Xc.T @ yc
    tss = yc @ yc
    r2 = 1 - np.sum((yc - Xc @ beta) ** 2) / tss
    sh = g / (1 + g)
    cov = tss / (N - 3) * sh * (1 - sh * r2) * inv
    # Bayes factor against the null in the (1+g)^((N-1-k)/2) (1+g(1-R2))^(-(N-1)/2) form
    k = len(idx)
    log_bf = (N - 1 - k) / 2 * math.log(1 + g) - (N - 1) / 2 * math.log(1 + g * (1 - r2))
    return sh * beta, cov, log_bf


def instance(seed, N=50, K=3, beta=None):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((N, K))
    beta = rng.normal(0, 1, K) if beta is None else np.asarray(beta)
    return X, X @ beta + 0.5 * rng.standard_normal(N) + 3.0


class TestOls:
    def test_noiseless(self):
        x = np.arange(10.0)[:, None]
        beta, rss, r2 = ols_fit(x, 2 * x[:, 0])
        assert beta[0] == pytest.approx(2.0) and rss == pytest.approx(0.0, abs=1e-20) and r2 == pytest.approx(1.0)

    def test_null(self):
        y = np.array([1.0, 2.0, 4.0])
        beta, rss, r2 = ols_fit(np.zeros((3, 0)), y)
        assert beta.size == 0 and r2 == 0.0
        assert rss == pytest.approx(np.sum((y - y.mean()) ** 2))

    def test_duplicate_column(self):
        X, y = instance(0)
        with pytest.raises(SingularMatrixError) as err:
            ols_fit(np.column_stack([X[:, 0], X[:, 0]]), y, names=["a", "b"])
        assert err.value.columns


class TestZellner:
    def test_shrinkage_half(self):
        x = np.arange(10.0)[:, None]
        mean, _ = zellner_posterior(x, 2 * x[:, 0] + 0.01 * np.sin(np.arange(10)), [0], 1.0)
        beta, _, _ = ols_fit(x, 2 * x[:, 0] + 0.01 * np.sin(np.arange(10)))
        assert mean[0] == pytest.approx(beta[0] / 2, rel=1e-12)

    def test_large_g_limit(self):
        X, y = instance(1)
        mean, _ = zellner_posterior(X, y, [0, 1, 2], 1e12)
        beta, _, _ = ols_fit(X, y)
        np.testing.assert_allclose(mean, beta, rtol=1e-9)

    def test_dense_oracle(self):
        X, y = instance(2)
        for idx in ([0], [0, 2], [0, 1, 2]):
            mean, cov = zellner_posterior(X, y, idx, 50.0)
            m2, c2, _ = dense_oracle(X, y, idx, 50.0)
            np.testing.assert_allclose(mean, m2, rtol=1e-10)
            np.testing.assert_allclose(cov, c2, rtol=1e-10)

    def test_dof_guard(self):
        X, y = instance(3, N=5, K=3)
        with pytest.raises(DataError, match="degrees-of-freedom"):
            zellner_posterior(X, y, [0, 1], 5.0)


class TestLogMl:
    def test_null_is_zero(self):
        X, y = instance(4)
        assert log_marginal_likelihood(X, y, ModelSpec.null(3), 50.0) == 0.0

    def test_matches_bayes_factor_form(self):
        X, y = instance(5, N=80, K=4)
        for idx in ([1], [0, 3], [0, 1, 2, 3]):
            lml = log_marginal_likelihood(X, y, ModelSpec.from_indices(4, idx), 80.0)
            assert lml == pytest.approx(dense_oracle(X, y, idx, 80.0)[2], rel=1e-10)

    @pytest.mark.filterwarnings("ignore:R2 >= 1")
    def test_true_regressor_dominates(self):
        rng = np.random.default_rng(6)
        X = rng.standard_normal((60, 4))
        y = X[:, 0]
        scores = {}
        for m in range(16):
            idx = [j for j in range(4) if m >> j & 1]
            try:
                scores[m] = log_marginal_likelihood(X, y, idx, 60.0)
            except DataError:
                continue
        best = scores[1]
        assert all(best > v for m, v in scores.items() if not m & 1)
        with pytest.warns(RuntimeWarning):
            log_marginal_likelihood(X, y, [0], 60.0)

    def test_irrelevant_regressor_penalised(self):
        hits = 0
        for s in range(100):
            rng = np.random.default_rng(s)
            X = rng.standard_normal((500, 2))
            y = 0.5 * X[:, 0] + rng.standard_normal(500)
            hits += log_marginal_likelihood(X, y, [0, 1], 500.0) < log_marginal_likelihood(X, y, [0], 500.0)
        # P(chi2_1 > log 501) is about 1.3%
        assert hits >= 95


class TestModelPrior:
    def test_uniform_constant(self):
        assert model_prior_logp([1, 0, 0], "uniform") == model_prior_logp([1, 1, 1], "uniform")

    def test_symmetric_at_half(self):
        for k in range(11):
            assert model_prior_logp(k, K=10) == pytest.approx(model_prior_logp(10 - k, K=10), abs=1e-12)

    def test_beta_function_oracle(self):
        # m=2, K=10: a=1, b=4
        def lbeta(a, b):
            return math.lgamma(a) + math.lgamma(b) - math.lgamma(a + b)
        want = lbeta(1 + 2, 4 + 8) - lbeta(1 + 8, 4 + 2)
        got = model_prior_logp(2, expected_size=2, K=10) - model_prior_logp(8, expected_size=2, K=10)
        assert got == pytest.approx(want, abs=1e-12)

    def test_sums_to_one(self):
        tot = sum(math.comb(6, k) * math.exp(model_prior_logp(k, expected_size=1.5, K=6)) for k in range(7))
        assert tot == pytest.approx(1.0, abs=1e-12)

    @pytest.mark.parametrize("m", [0, 10, -1, 12])
    def test_bad_expected_size(self, m):
        with pytest.raises(ValueError):
            model_prior_logp(2, expected_size=m, K=10)


class TestEnumeration:
    def test_k2_noiseless(self):
        rng = np.random.default_rng(7)
        X = rng.standard_normal((40, 2))
        y = X[:, 0] + 1e-3 * rng.standard_normal(40)
        s = enumerate_posterior(X, y)
        assert s.pmp.sum() == pytest.approx(1.0, abs=1e-10)
        assert tuple(s.masks[np.argmax(s.pmp)]) == (True, False)

    def test_k1_two_models(self):
        X, y = instance(8, K=1)
        assert len(enumerate_posterior(X, y).pmp) == 2

    def test_cap(self):
        with pytest.raises(DataError):
            enumerate_posterior(np.zeros((30, 3)), np.zeros(30), max_k=2)

    def test_pure_noise_inclusion(self):
        ok = 0
        for s in range(100):
            rng = np.random.default_rng(1000 + s)
            X = rng.standard_normal((200, 4))
            y = rng.standard_normal(200)
            ok += bool(np.all(enumerate_posterior(X, y, prior_kind="uniform").inclusion < 0.5))
        assert ok >= 90

    def test_shift_invariance(self):
        X, y = instance(9, N=60, K=4)
        a = enumerate_posterior(X, y)
        b = enumerate_posterior(X, y + 123.0)
        np.testing.assert_allclose(a.pmp, b.pmp, atol=1e-10)

    def test_mixture_mean(self):
        X, y = instance(10, N=60, K=3)
        s = enumerate_posterior(X, y, 60.0)
        want = np.zeros(3)
        for mask, p in zip(s.masks, s.pmp):
            idx = list(np.flatnonzero(mask))
            if idx:
                want[idx] += p * dense_oracle(X, y, idx, 60.0)[0]
        np.testing.assert_allclose(s.coef_mean, want, rtol=1e-9, atol=1e-14)

    def test_singular_model_gets_zero_mass(self):
        X, y = instance(11, N=60, K=2)
        X = np.column_stack([X, X[:, 0]])
        s = enumerate_posterior(X, y)
        both = [i for i, m in enumerate(s.masks) if m[0] and m[2]]
        assert np.all(s.pmp[both] == 0)
        assert s.pmp.sum() == pytest.approx(1.0)

    @given(st.integers(0, 10_000), st.floats(0.5, 1e4))
    def test_normalisation_and_shrinkage(self, seed, g):
        X, y = instance(seed, N=40, K=4)
        s = enumerate_posterior(X, y, g)
        assert s.pmp.sum() == pytest.approx(1.0, abs=1e-10)
        assert np.all((s.inclusion >= 0) & (s.inclusion <= 1))
        idx = list(np.flatnonzero(np.random.default_rng(seed).random(4) < 0.5)) or [0]
        mean, _ = zellner_posterior(X, y, idx, g)
        beta, _, _ = ols_fit(X[:, idx], y)
        np.testing.assert_allclose(mean, g / (1 + g) * beta, rtol=1e-12, atol=1e-15)


class TestMcmc:
    def test_determinism(self):
        X, y = instance(12, N=100, K=6)
        a = mcmc_birth_death(X, y, draws=3000, burnin=1000, seed=4)
        b = mcmc_birth_death(X, y, draws=3000, burnin=1000, seed=4)
        np.testing.assert_array_equal(a.pmp, b.pmp)
        np.testing.assert_array_equal(a.masks, b.masks)

    def test_single_retained_draw(self):
        X, y = instance(13, N=100, K=5)
        s = mcmc_birth_death(X, y, draws=11, burnin=10, seed=0)
        assert len(s.pmp) == 1 and s.pmp[0] == 1.0

    def test_preconditions(self):
        X, y = instance(14)
        with pytest.raises(ValueError):
            mcmc_birth_death(X, y, draws=10, burnin=10)

    def test_converges_to_enumeration(self):
        # visit frequencies approach the exact PMPs as the chain grows
        X, y = instance(15, N=200, K=8, beta=[0.4, -0.3, 0.2, 0, 0, 0, 0, 0])
        exact = enumerate_posterior(X, y)
        short = pmp_l1(exact, mcmc_birth_death(X, y, draws=20000, burnin=10000, seed=1))
        long = pmp_l1(exact, mcmc_birth_death(X, y, draws=800_000, burnin=10_000, seed=1))
        assert long < 0.05
        assert long < short

    def test_inclusion_close_to_exact(self):
        X, y = instance(16, N=200, K=8, beta=[1, -0.8, 0.5, 0, 0, 0, 0, 0])
        exact = enumerate_posterior(X, y)
        chain = mcmc_birth_death(X, y, draws=20000, burnin=10000, seed=2)
        np.testing.assert_allclose(chain.inclusion, exact.inclusion, atol=0.05)


class TestPredict:
    def _summary(self, pmp, means, K=1, intercept=0.5):
        masks = np.ones((len(pmp), K), bool)
        pmp = np.asarray(pmp, float)
        cm = pmp @ np.asarray(means, float).reshape(len(pmp), K)
        return PosteriorSummary(("x",) * K, masks, np.zeros(len(pmp)), np.zeros(len(pmp)), pmp,
                                np.zeros(len(pmp)), np.ones(K), cm, np.zeros(K), intercept, 10.0,
                                "uniform", 10)

    def test_single_model(self):
        point, var = bma_predict(self._summary([1.0], [1.0]), [3.0])
        assert point == pytest.approx(3.5) and np.isnan(var)

    def test_mixture(self):
        point, _ = bma_predict(self._summary([0.5, 0.5], [1.0, 3.0], intercept=0.0), [1.0])
        assert point == pytest.approx(2.0)

    def test_zero_vector_gives_intercept(self):
        X, y = instance(17, N=60, K=3)
        X = X - X.mean(axis=0)
        s = enumerate_posterior(X, y)
        point, var = bma_predict(s, np.zeros(3))
        assert point == pytest.approx(y.mean(), rel=1e-12)
        assert var > 0

    def test_dimension_mismatch(self):
        with pytest.raises(DataError):
            bma_predict(self._summary([1.0], [1.0]), [1.0, 2.0])

    def test_roundtrip(self, tmp_path):
        X, y = instance(18, N=60, K=3)
        s = enumerate_posterior(X, y, names=["a", "b", "c"])
        s.save(tmp_path / "s.json")
        back = PosteriorSummary.load(tmp_path / "s.json")
        np.testing.assert_array_equal(back.pmp, s.pmp)
        np.testing.assert_array_equal(back.masks, s.masks)
        assert bma_predict(back, X[:5])[0].tolist() == bma_predict(s, X[:5])[0].tolist()


def _panel_from(X, Y, names):
    n = len(X)
    banks = tuple(f"B{i % 20:02d}" for i in range(n))
    quarters = tuple(Quarter(2010, 1).shift(i // 20) for i in range(n))
    full = np.zeros((n, len(TARGET_NAMES)))
    full[:, :Y.shape[1]] = Y
    return SupervisedPanel(banks, quarters, X, full, np.ones((n, 6)), np.zeros(n), tuple(names))


class TestSatellites:
    def test_nine_canonical_and_uip(self):
        rng = np.random.default_rng(19)
        X = rng.standard_normal((200, 4))
        Y = X @ rng.normal(0, 1, (4, 10)) + rng.standard_normal((200, 10))
        s = fit_satellites(_panel_from(X, Y, ["unr_lag0", "gdp_lag0", "yea_lag0", "cfd_lag0"]))
        assert s.names() == SATELLITE_TARGETS and s.complete
        assert all(s[n].g == 200.0 for n in s)

    def test_unemployment_driver_found(self):
        rng = np.random.default_rng(20)
        X = rng.standard_normal((1000, 5))
        Y = rng.standard_normal((1000, 10))
        Y[:, 0] = 0.3 * X[:, 1] + 0.5 * rng.standard_normal(1000)
        names = ["gdp_lag0", "unr_lag0", "stocks_lag0", "yea_lag0", "cfd_lag0"]
        s = fit_satellites(_panel_from(X, Y, names))
        assert s["g_dep"].inclusion[1] > 0.9

    def test_empty_panel(self):
        p = _panel_from(np.zeros((0, 2)), np.zeros((0, 10)), ["a", "b"])
        with pytest.raises(DataError):
            fit_satellites(p)

    def test_g_rules(self):
        assert g_value("uip", 100, 20) == 100.0
        assert g_value("fernandez", 100, 20) == 400.0
        with pytest.raises(ValueError):
            g_value("bogus", 1, 1)

    def test_options_mcmc_path(self):
        rng = np.random.default_rng(21)
        X = rng.standard_normal((120, 3))
        Y = rng.standard_normal((120, 10))
        opts = BmaOptions(method="mcmc", draws=500, burnin=100, mad_threshold=None)
        s = fit_satellites(_panel_from(X, Y, ["a", "b", "c"]), opts, ("yea",))
        assert s["yea"].method == "mcmc" and s["yea"].draws == 500
