import numpy as np
import pytest
from hypothesis import given, strategies as st

from deepstress import nn
from deepstress.activations import dropout_apply, relu
from deepstress.balance import BankState, RwaMethod, TargetVector, project_car
from deepstress.errors import DataError, NumericalError
from deepstress.panel import NEURAL_TARGETS, TARGET_NAMES, SupervisedPanel

from gradcheck import KinkCrossed, fd_point, random_config


def straight_line_forward(weights, biases, x):
    """Plain-loop ReLU network used as an independent oracle."""
    a = list(x)
    for l, (W, b) in enumerate(zip(weights, biases)):
        out = []
        for k in range(W.shape[1]):
            s = b[k]
            for d in range(W.shape[0]):
                s += W[d, k] * a[d]
            out.append(s)
        if l < len(weights) - 1:
            out = [v if v > 0 else 0.0 for v in out]
        a = out
    return np.array(a)


def nonlinear_panel(seed, n_banks=60, per_bank=8):
    """Panel whose targets are a nonlinear function of three features.

    ``car_next`` is the exact NeuralGrowth projection of the true targets.
    """
    rng = np.random.default_rng(seed)
    n = n_banks * per_bank
    X = rng.uniform(-2, 2, (n, 3))
    s = np.sin(1.5 * X[:, 0]) * X[:, 1] + 0.5 * np.abs(X[:, 2])
    T = np.zeros((n, 9))
    T[:, 0:4] = 0.05 + 0.1 * s[:, None] * np.array([1.0, 0.8, 0.6, 0.7])
    T[:, 4] = 0.02 + 0.01 * np.tanh(s)
    T[:, 5] = 0.05 + 0.01 * s
    T[:, 6] = 0.01
    T[:, 7] = 0.005 + 0.002 * s
    T[:, 8] = 0.05 + 0.15 * s
    assets = rng.uniform(500, 1500, n)
    states = np.column_stack([0.08 * assets, 0.5 * assets, 0.6 * assets, 0.9 * assets, assets,
                              0.8 * assets])
    _, _, car = project_car(BankState.from_array(states), RwaMethod.NEURAL_GROWTH,
                            TargetVector.from_array(T, "growth"))
    Y = np.zeros((n, len(TARGET_NAMES)))
    for j, name in enumerate(NEURAL_TARGETS):
        Y[:, TARGET_NAMES.index(name)] = T[:, j]
    ids = tuple(f"B{i // per_bank:03d}" for i in range(n))
    return SupervisedPanel(ids, tuple(range(n)), X, Y, states, car, ("a", "b", "c"))


class TestConfig:
    def test_hidden_layer_bound(self):
        with pytest.raises(ValueError):
            nn.NetworkConfig((3,) + (4,) * 6 + (9,))

    def test_lwta_widths_must_fill_blocks(self):
        with pytest.raises(ValueError):
            nn.NetworkConfig((3, 5, 9), activation="lwta")

    def test_bad_dropout(self):
        with pytest.raises(ValueError):
            nn.NetworkConfig((3, 4, 9), dropout_rate=1.0)

    def test_parameter_count(self):
        assert nn.NetworkConfig((3, 4, 9)).n_parameters == 3 * 4 + 4 + 4 * 9 + 9

    def test_tau_schedule_endpoints(self):
        c = nn.NetworkConfig((3, 4, 9), epochs=11)
        assert c.tau(1) == pytest.approx(0.67)
        assert c.tau(11) == pytest.approx(0.1)

    def test_dict_roundtrip(self):
        c = nn.NetworkConfig((3, 8, 8, 9), activation="lwta", dropout_rate=0.2, seed=4)
        assert nn.NetworkConfig.from_dict(c.to_dict()) == c


class TestDense:
    def test_identity(self):
        x = np.array([0.3, -1.2, 5.0])
        np.testing.assert_array_equal(nn.dense_forward(np.eye(3), np.zeros(3), x), x)

    def test_zero_input_gives_bias(self):
        b = np.array([1.0, -2.0])
        np.testing.assert_array_equal(nn.dense_forward(np.ones((3, 2)), b, np.zeros(3)), b)

    def test_forced_arithmetic(self):
        out = nn.dense_forward([[1, 2], [3, 4]], np.zeros(2), [1, 1])
        np.testing.assert_array_equal(out, [4.0, 6.0])

    def test_shape_mismatch(self):
        with pytest.raises(DataError):
            nn.dense_forward(np.ones((3, 2)), np.zeros(2), np.ones(4))
        with pytest.raises(DataError):
            nn.dense_forward(np.ones((3, 2)), np.zeros(3), np.ones(3))


class TestRelu:
    @pytest.mark.parametrize("v, expected", [(-2.0, 0.0), (3.0, 3.0), (0.0, 0.0)])
    def test_values(self, v, expected):
        assert relu(v) == expected


class TestDropout:
    def test_rate_zero_is_identity(self, rng):
        v = rng.standard_normal(7)
        np.testing.assert_array_equal(dropout_apply(v, 0.0, rng, "train"), v)
        np.testing.assert_array_equal(dropout_apply(v, 0.0, rng, "infer"), v)

    @pytest.mark.parametrize("rate", [0.1, 0.5, 0.9])
    def test_infer_is_identity(self, rng, rate):
        v = rng.standard_normal(7)
        np.testing.assert_array_equal(dropout_apply(v, rate, rng, "infer"), v)

    def test_monte_carlo_mean(self):
        rng = np.random.default_rng(0)
        draws = dropout_apply(np.ones((100_000, 5)), 0.5, rng, "train")
        mean = draws.mean(axis=0)
        assert np.all((mean >= 0.98) & (mean <= 1.02))

    def test_survivors_scaled(self, rng):
        out = dropout_apply(np.ones(1000), 0.25, rng, "train")
        assert set(np.unique(out)) <= {0.0, 1.0 / 0.75}

    def test_rate_out_of_range(self):
        with pytest.raises(ValueError):
            dropout_apply(np.ones(3), 1.0)

    def test_network_expectation_matches_infer(self):
        # one dropout layer feeding the linear head: expectation is exact
        c = nn.NetworkConfig((3, 6, 2), dropout_rate=0.5, seed=2)
        p = nn.init_params(c)
        x = np.array([[0.4, -0.3, 1.1]])
        infer = nn.forward(c, p, x, "infer")
        rng = np.random.default_rng(9)
        out = nn.forward(c, p, np.repeat(x, 100_000, axis=0), "train", rng=rng)
        np.testing.assert_allclose(out.mean(axis=0), infer[0], rtol=0.02)


class TestForward:
    def test_zero_network(self):
        c = nn.NetworkConfig((4, 8, 9))
        p = nn.init_params(c)
        p = nn.NetworkParams([np.zeros_like(w) for w in p.weights], [np.zeros_like(b) for b in p.biases])
        np.testing.assert_array_equal(nn.forward(c, p, np.ones(4)), np.zeros(9))

    def test_train_equals_infer_without_dropout(self):
        c = nn.NetworkConfig((4, 8, 8, 9), seed=1)
        p = nn.init_params(c)
        x = np.random.default_rng(1).standard_normal((5, 4))
        a = nn.forward(c, p, x, "train", rng=np.random.default_rng(0))
        b = nn.forward(c, p, x, "infer")
        np.testing.assert_array_equal(a, b)

    def test_matches_straight_line_reimplementation(self):
        rng = np.random.default_rng(21)
        c = nn.NetworkConfig((5, 7, 6, 9), seed=21)
        p = nn.init_params(c)
        for b in p.biases:
            b[:] = rng.normal(0, 0.3, b.shape)
        for _ in range(10):
            x = rng.standard_normal(5)
            ref = straight_line_forward(p.weights, p.biases, x)
            np.testing.assert_allclose(nn.forward(c, p, x), ref, rtol=0, atol=1e-12)

    def test_single_vector_returns_vector(self):
        c = nn.NetworkConfig((4, 8, 9))
        assert nn.forward(c, nn.init_params(c), np.ones(4)).shape == (9,)

    def test_wrong_input_width(self):
        c = nn.NetworkConfig((4, 8, 9))
        with pytest.raises(DataError):
            nn.forward(c, nn.init_params(c), np.ones(3))

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(3)
        c = nn.NetworkConfig((4, 8, 6, 9), seed=3)
        # dyadic rationals keep every product and sum exact, so the result
        # does not depend on summation order
        dyadic = lambda shape: rng.integers(-8, 9, shape) / 8.0  # noqa: E731
        weights = [dyadic(w.shape) for w in nn.init_params(c).weights]
        biases = [dyadic(w.shape[1]) for w in weights]
        x = dyadic((10, 4))
        base = nn.forward(c, nn.NetworkParams(weights, biases), x)
        perm = rng.permutation(8)
        w2 = [weights[0][:, perm], weights[1][perm, :], weights[2]]
        b2 = [biases[0][perm], biases[1], biases[2]]
        out = nn.forward(c, nn.NetworkParams(w2, b2), x)
        assert np.array_equal(base, out)


class TestLoss:
    def test_zero(self):
        y = np.arange(9.0)
        assert nn.loss_mse(y, y) == 0.0

    def test_constant_error(self):
        y = np.zeros((4, 9))
        assert nn.loss_mse(y + 0.5, y) == pytest.approx(0.25)

    def test_forced_arithmetic(self):
        assert nn.loss_mse([[0.0], [0.0]], [[1.0], [3.0]]) == 5.0

    def test_shape_mismatch(self):
        with pytest.raises(DataError):
            nn.loss_mse(np.zeros(3), np.zeros(4))


class TestBackward:
    def test_zero_error_gives_zero_gradients(self):
        c = nn.NetworkConfig((3, 5, 9), seed=0)
        p = nn.init_params(c)
        X = np.random.default_rng(0).standard_normal((6, 3))
        Y = nn.forward(c, p, X)
        loss, (dW, db) = nn.backward(c, p, X, Y)
        assert loss == 0.0
        assert all(np.all(g == 0) for g in dW + db)

    def test_single_linear_layer_closed_form(self):
        rng = np.random.default_rng(4)
        c = nn.NetworkConfig((3, 1))
        p = nn.NetworkParams([rng.standard_normal((3, 1))], [np.array([0.2])])
        x = rng.standard_normal(3)
        t = np.array([0.7])
        pred = x @ p.weights[0] + p.biases[0]
        _, (dW, db) = nn.backward(c, p, x, t)
        np.testing.assert_allclose(dW[0], 2.0 * (pred - t) * x[:, None], rtol=1e-14)
        np.testing.assert_allclose(db[0], 2.0 * (pred - t), rtol=1e-14)

    def test_two_hidden_layers_fd_h_1e5(self):
        rng = np.random.default_rng(8)
        c = nn.NetworkConfig((4, 8, 6, 9), dropout_rate=0.3, seed=8)
        p = nn.init_params(c)
        for b in p.biases:
            b[:] = rng.normal(0, 0.5, b.shape)
        X = rng.standard_normal((5, 4))
        Y = rng.standard_normal((5, 9))
        noise = nn.sample_noise(c, 5, rng)
        assert fd_point(c, p, X, Y, noise, "train", None, h=1e-5, points=3) < 1e-5

    def test_random_configs_fd(self):
        rng = np.random.default_rng(2024)
        worst = []
        while len(worst) < 50:
            c = random_config(rng)
            p = nn.init_params(c, rng)
            for b in p.biases:
                b[:] = rng.normal(0, 0.5, b.shape)
            mode = "train" if rng.random() < 0.7 else "infer"
            X = rng.standard_normal((4, c.layer_widths[0]))
            Y = rng.standard_normal((4, c.layer_widths[-1]))
            noise = nn.sample_noise(c, 4, rng)
            try:
                worst.append(fd_point(c, p, X, Y, noise, mode, 0.5))
            except KinkCrossed:
                continue  # a sample sits on a ReLU / argmax boundary; draw another
        assert max(worst) < 1e-5

    def test_non_finite_gradient_names_layer(self):
        c = nn.NetworkConfig((2, 2, 1))
        p = nn.NetworkParams([np.ones((2, 2)), np.full((2, 1), np.inf)], [np.zeros(2), np.zeros(1)])
        with pytest.raises(NumericalError, match="layer 1"):
            nn.backward(c, p, np.ones((1, 2)), np.zeros((1, 1)))

    def test_empty_batch(self):
        c = nn.NetworkConfig((2, 2, 1))
        with pytest.raises(DataError):
            nn.backward(c, nn.init_params(c), np.zeros((0, 2)), np.zeros((0, 1)))


class TestTrain:
    @staticmethod
    def linear_data(seed, n=400, d=4, k=9):
        rng = np.random.default_rng(seed)
        X = rng.standard_normal((n, d))
        Y = X @ rng.standard_normal((d, k)) + 0.5
        return X, Y

    def test_learns_linear_target(self):
        X, Y = self.linear_data(0)
        c = nn.NetworkConfig((4, 32, 9), epochs=200, learning_rate=0.01, batch_size=32, seed=0)
        p, rep = nn.train(c, X, Y)
        mse = np.mean((nn.predict(c, p, X) - Y) ** 2, axis=0)
        assert np.all(mse < 0.1 * Y.var(axis=0))
        assert len(rep.train_loss) == 200

    def test_deterministic(self):
        X, Y = self.linear_data(1, n=100)
        c = nn.NetworkConfig((4, 8, 9), epochs=5, dropout_rate=0.2, seed=7)
        a, ra = nn.train(c, X, Y)
        b, rb = nn.train(c, X, Y)
        assert np.array_equal(a.flat(), b.flat())
        assert ra.train_loss == rb.train_loss

    def test_zero_learning_rate_keeps_init(self):
        X, Y = self.linear_data(2, n=50)
        c = nn.NetworkConfig((4, 8, 9), epochs=3, learning_rate=0.0, seed=5)
        p, _ = nn.train(c, X, Y)
        init = nn.init_params(c, np.random.default_rng(5))
        assert np.array_equal(p.flat(), init.flat())

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_raises_with_epoch(self):
        X, Y = self.linear_data(3, n=50)
        c = nn.NetworkConfig((4, 8, 9), epochs=50, learning_rate=50.0, seed=0)
        with pytest.raises(NumericalError, match="epoch"):
            nn.train(c, X, Y)

    def test_selected_epoch_minimises_validation(self):
        X, Y = self.linear_data(4, n=200)
        c = nn.NetworkConfig((4, 8, 9), epochs=20, seed=0)
        _, rep = nn.train(c, X[:150], Y[:150], X[150:], Y[150:])
        assert rep.selected_epoch == int(np.argmin(rep.valid_loss)) + 1
        assert np.all(np.isfinite(rep.train_loss + rep.valid_loss))

    def test_target_width_checked(self):
        X, Y = self.linear_data(5, n=20)
        with pytest.raises(DataError):
            nn.train(nn.NetworkConfig((4, 8, 3)), X, Y)

    def test_convex_loss_is_monotone(self):
        X, Y = self.linear_data(6, n=120)
        c = nn.NetworkConfig((4, 9), epochs=60, learning_rate=0.05, momentum=0.0, batch_size=120,
                             seed=0)
        _, rep = nn.train(c, X, Y)
        assert np.all(np.diff(rep.train_loss) <= 0)


class TestCrossValidate:
    def test_single_config_returned(self):
        c = nn.NetworkConfig((3, 4, 9))
        assert nn.cross_validate([c], panel=None) is c

    def test_empty_pool(self):
        with pytest.raises(ValueError):
            nn.cross_validate([], panel=None)

    def test_tie_break(self):
        panel = nonlinear_panel(0, n_banks=10, per_bank=2)
        small = nn.NetworkConfig((3, 4, 9), seed=1)
        big = nn.NetworkConfig((3, 16, 9), seed=1)
        twin = nn.NetworkConfig((3, 4, 9), seed=2)
        fit = lambda cfg, p: None  # noqa: E731
        score = lambda cfg, m, p: 1.0  # noqa: E731
        assert nn.cross_validate([big, small, twin], panel, fit_fn=fit, score_fn=score) is small
        assert nn.cross_validate([twin, small], panel, fit_fn=fit, score_fn=score) is twin

    def test_folds_partition_entities(self):
        panel = nonlinear_panel(0, n_banks=10, per_bank=3)
        seen = []

        def fit(cfg, train):
            seen.append(set(train.bank_ids))

        def score(cfg, m, held):
            assert not (set(held.bank_ids) & seen[-1])
            return 0.0

        nn.cross_validate([nn.NetworkConfig((3, 4, 9))] * 2, panel, folds=5, fit_fn=fit,
                          score_fn=score)
        assert len(seen) == 10

    def test_matched_beats_underparameterized(self):
        wins = 0
        for seed in range(5):
            panel = nonlinear_panel(seed)
            under = nn.NetworkConfig((3, 2, 9), epochs=60, batch_size=32, seed=seed)
            matched = nn.NetworkConfig((3, 32, 32, 9), epochs=60, batch_size=32, seed=seed)
            wins += nn.cross_validate([under, matched], panel, folds=5, seed=seed) is matched
        assert wins >= 4


class TestEntityFolds:
    def test_too_few_entities(self):
        with pytest.raises(DataError):
            nn.entity_folds(["a", "b"], 5)

    def test_folds_below_two(self):
        with pytest.raises(ValueError):
            nn.entity_folds(["a", "b"], 1)

    @given(st.integers(5, 40), st.integers(2, 5), st.integers(0, 1000))
    def test_partition(self, n, k, seed):
        ids = [f"B{i}" for i in range(n) for _ in range(2)]
        folds = nn.entity_folds(ids, k, seed)
        assert len(folds) == k and all(folds)
        assert set().union(*folds) == set(ids)
        assert sum(len(f) for f in folds) == n


class TestContainer:
    def test_roundtrip(self, tmp_path):
        c = nn.NetworkConfig((3, 4, 4, 9), dropout_rate=0.2, seed=3)
        p = nn.init_params(c)
        p.y_mean, p.y_scale = np.arange(9.0), np.ones(9)
        nn.save_params(tmp_path / "p.bin", c, p)
        c2, p2 = nn.load_params(tmp_path / "p.bin")
        assert c2 == c
        assert np.array_equal(p2.flat(), p.flat())
        assert np.array_equal(p2.y_mean, p.y_mean)

    def test_bytes_stable(self, tmp_path):
        c = nn.NetworkConfig((3, 4, 9), seed=3)
        p = nn.init_params(c)
        nn.save_params(tmp_path / "a.bin", c, p)
        nn.save_params(tmp_path / "b.bin", c, p)
        assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x.bin").write_bytes(b"garbage!" + bytes(16))
        with pytest.raises(DataError):
            nn.load_params(tmp_path / "x.bin")


class TestGrid:
    def test_default_grid_size(self):
        grid = nn.architecture_grid(12)
        assert len(grid) == 3 * 5 * 3
        assert all(c.layer_widths[0] == 12 and c.layer_widths[-1] == 9 for c in grid)
