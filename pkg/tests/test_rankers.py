import numpy as np
import pytest

from ctxrank.dataset import Dataset
from ctxrank.datagen import GeneratorSpec, gen_medoid
from ctxrank.nncore import DenseNet, DivergenceError, TrainConfig, net_init
from ctxrank.ranklosses import is_permutation, rank_from_scores
from ctxrank.rankers import (
    FATE,
    FETA,
    HINGE,
    LISTNET,
    PL,
    RANKNET,
    FateNetModel,
    FetaNetModel,
    LinearModel,
    batch_gradient,
    build_model,
    check_compatible,
    dumps_model,
    err_fit,
    fate_score,
    feta_score,
    loads_model,
    predict_scores,
    sample_subrankings,
    train_ranker,
    training_accuracy,
)

from conftest import assert_grad_close, central_diff

U1 = np.array(
    [
        [0.0, 0.7, 0.5, 0.1],
        [0.2, 0.0, 0.8, 0.9],
        [0.5, 0.2, 0.0, 0.4],
        [0.7, 0.1, 0.5, 0.0],
    ]
)
# objects a, b, c, d are identified by their first coordinate
OBJ = np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0], [3.0, 0.0]])


class TablePairNet:
    """Stand-in pair net returning frozen utilities for objects keyed by their first coordinate."""

    input_width = 4

    def forward(self, pairs):
        i = pairs[..., 0].astype(int)
        j = pairs[..., 2].astype(int)
        return np.stack([U1[i, j], U1[j, i]], axis=-1), None

    def __call__(self, pairs):
        return self.forward(pairs)[0]


class ZeroNet:
    input_width = 2

    def forward(self, X):
        return np.zeros(X.shape[:-1] + (1,)), None


class CountingNet(DenseNet):
    rows = 0
    calls = 0

    def forward(self, x):
        x = np.asarray(x)
        CountingNet.rows += int(np.prod(x.shape[:-1]))
        CountingNet.calls += 1
        return super().forward(x)


def tiny(kind, dim=2, seed=0, **arch):
    base = {
        FETA: {"pair_hidden": [5], "zeroth_hidden": [4]},
        FATE: {"embed_hidden": [5], "embedding": 3, "joint_hidden": [6]},
        RANKNET: {"hidden": [4]},
        LISTNET: {"hidden": [4], "k": 2},
    }[kind]
    return build_model(kind, dim, {**base, **arch}, seed)


def medoid_data(n_instances=200, n_objects=5, seed=0):
    return gen_medoid(GeneratorSpec("medoid", n_instances, n_objects, seed=seed))


class TestFetaScore:
    def frozen(self):
        return FetaNetModel(TablePairNet(), ZeroNet(), {"bounded": False})

    def test_example_q1(self):
        s = feta_score(self.frozen(), OBJ[[0, 1, 2]])
        np.testing.assert_allclose(s, [0.6, 0.5, 0.35], atol=1e-15)
        np.testing.assert_array_equal(rank_from_scores(s), [0, 1, 2])

    def test_example_q2(self):
        s = feta_score(self.frozen(), OBJ[[0, 1, 3]])
        np.testing.assert_allclose(s, [0.4, 0.55, 0.4], atol=1e-15)
        assert s[0] == s[2]
        np.testing.assert_array_equal(rank_from_scores(s), [1, 0, 2])

    def test_presentation_order_irrelevant(self):
        s = feta_score(self.frozen(), OBJ[[3, 1, 0]])
        np.testing.assert_allclose(s, [0.4, 0.55, 0.4], atol=1e-15)

    def test_matches_tabular(self):
        from ctxrank.decomposition import feta_query_scores, tables_from_matrices

        t = tables_from_matrices(np.zeros(4), U1)
        for Q in [(0, 1, 2), (0, 1, 3), (1, 2, 3), (0, 1, 2, 3), (0, 2)]:
            np.testing.assert_array_equal(feta_score(self.frozen(), OBJ[list(Q)]), feta_query_scores(t, Q, K=1))

    def test_all_zero(self):
        model = tiny(FETA, bounded=False)
        model.set_params([np.zeros_like(p) for p in model.params()])
        X = np.random.default_rng(0).random((6, 2))
        np.testing.assert_array_equal(feta_score(model, X), 0.0)
        np.testing.assert_array_equal(model.predict(X), np.arange(6))

    def test_singleton(self):
        model = tiny(FETA)
        model.pair_net = None  # would fail if touched
        x = np.array([[0.3, 0.7]])
        assert feta_score(model, x)[0] == model._squash(model.zeroth_net(x))[0, 0]

    def test_zero_pair_net_is_latent_utility(self, rng):
        for bounded in (False, True):
            model = tiny(FETA, bounded=bounded, seed=3)
            model.pair_net.set_params([np.zeros_like(p) for p in model.pair_net.params()])
            for _ in range(50):
                X = rng.random((int(rng.integers(2, 9)), 2))
                u0 = model.zeroth_net(X)[:, 0]
                np.testing.assert_array_equal(model.predict(X), rank_from_scores(u0))

    def test_bounded_range(self, rng):
        model = tiny(FETA, bounded=True, seed=1)
        for _ in range(20):
            X = rng.normal(scale=5, size=(int(rng.integers(2, 7)), 2))
            rel = model.relation(X)
            assert np.all((rel >= 0) & (rel <= 1))
            assert np.all((feta_score(model, X) >= 0) & (feta_score(model, X) <= 2))

    def test_duplicate_objects(self):
        model = tiny(FETA, seed=2)
        X = np.array([[0.2, 0.4], [0.2, 0.4], [0.9, 0.1]])
        s = feta_score(model, X)
        assert s[0] == s[1]

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            feta_score(tiny(FETA), np.zeros((3, 3)))


class TestFateScore:
    def test_singleton(self):
        model = tiny(FATE)
        x = np.array([[0.1, 0.2]])
        np.testing.assert_array_equal(model.representative(x), model.embed_net(x)[0])
        assert np.isfinite(fate_score(model, x)[0])

    def test_duplicates(self):
        model = tiny(FATE, seed=4)
        s = fate_score(model, np.array([[0.5, 0.5], [0.5, 0.5]]))
        assert s[0] == s[1]

    def test_matches_definition(self, rng):
        model = tiny(FATE, seed=5)
        X = rng.random((5, 2))
        mu = model.embed_net(X).mean(axis=0)
        expected = model.joint_net(np.hstack([X, np.tile(mu, (5, 1))]))[:, 0]
        np.testing.assert_allclose(fate_score(model, X), expected, atol=1e-14)

    def test_linear_cost(self, rng):
        model = tiny(FATE)
        embed = CountingNet(model.embed_net.layer_sizes, model.embed_net.weights, model.embed_net.biases, model.embed_net.activations)
        joint = CountingNet(model.joint_net.layer_sizes, model.joint_net.weights, model.joint_net.biases, model.joint_net.activations)
        spy = FateNetModel(embed, joint, model.arch)
        for n in (1, 4, 17):
            CountingNet.rows = CountingNet.calls = 0
            spy.scores(rng.random((n, 2)))
            # one embedding row and one joint row per object, each net called once
            assert CountingNet.rows == 2 * n
            assert CountingNet.calls == 2


@pytest.mark.parametrize("kind,arch", [(FETA, {"bounded": False}), (FETA, {"bounded": True}), (FATE, {}), (RANKNET, {})])
def test_permutation_equivariance(kind, arch, rng):
    model = tiny(kind, seed=7, **arch)
    for _ in range(200):
        n = int(rng.integers(1, 10))
        X = rng.normal(size=(n, 2))
        if rng.random() < 0.2 and n > 1:
            X[1] = X[0]
        perm = rng.permutation(n)
        s = model.scores(X)
        np.testing.assert_allclose(model.scores(X[perm]), s[perm], rtol=0, atol=1e-9)
        if n == 1 or np.min(np.diff(np.sort(s))) > 1e-9:
            np.testing.assert_array_equal(model.predict(X[perm]), model.predict(X)[perm])


def _param_fd_check(model, X, R, loss, rng_check=None):
    _, grads = batch_gradient(model, [(X, R)], loss, k=2)
    for p, g in zip(model.params(), grads):
        num = central_diff(lambda: batch_gradient(model, [(X, R)], loss, k=2)[0], p, h=1e-6)
        assert_grad_close(g, num, rtol=1e-4, atol=1e-7)


def _hinge_kink_free(model, X, R, tol=1e-4):
    S = model.batch_scores(X)
    margins = 1 - (S[:, :, None] - S[:, None, :])
    return np.min(np.abs(margins)) > tol


class TestEndToEndGradients:
    @pytest.mark.parametrize(
        "kind,arch,loss",
        [
            (FETA, {"bounded": False}, PL),
            (FETA, {"bounded": True}, PL),
            (FETA, {"bounded": False}, HINGE),
            (FATE, {}, PL),
            (FATE, {}, HINGE),
            (RANKNET, {}, "ranknet"),
            (LISTNET, {}, "listnet"),
        ],
    )
    def test_finite_differences(self, kind, arch, loss, rng):
        checked = 0
        while checked < 100:
            model = tiny(kind, seed=int(rng.integers(1 << 30)), **arch)
            B, n = int(rng.integers(1, 3)), int(rng.integers(2, 5))
            X = rng.normal(size=(B, n, 2))
            R = np.array([rng.permutation(n) for _ in range(B)])
            if loss == HINGE and not _hinge_kink_free(model, X, R):
                continue
            _param_fd_check(model, X, R, loss)
            checked += 1

    def test_fate_input_gradient_flows_through_mean(self, rng):
        # perturbing one object changes every score through the representative
        model = tiny(FATE, seed=1)
        X = rng.normal(size=(4, 2))
        s = model.scores(X)
        X2 = X.copy()
        X2[0] += 1e-3
        assert np.all(model.scores(X2)[1:] != s[1:])


class TestTraining:
    def test_zero_epochs(self):
        data = medoid_data(20)
        cfg = TrainConfig(epochs=0, seed=4)
        for kind in (FETA, FATE, RANKNET):
            result = train_ranker(kind, data, cfg=cfg)
            init = build_model(kind, 2, None, 4)
            for a, b in zip(result.model.params(), init.params()):
                np.testing.assert_array_equal(a, b)
            assert result.loss_trace == []

    def test_determinism(self):
        data = medoid_data(60)
        cfg = TrainConfig(epochs=3, batch_size=8, seed=9)
        for kind in (FETA, FATE, LISTNET):
            a = train_ranker(kind, data, cfg=cfg)
            b = train_ranker(kind, data, cfg=cfg)
            assert a.loss_trace == b.loss_trace
            assert dumps_model(a.model) == dumps_model(b.model)

    def test_overfit_single_instance(self):
        data = medoid_data(1, n_objects=6, seed=3)
        cfg = TrainConfig(learning_rate=0.01, epochs=300, batch_size=1, seed=0)
        result = train_ranker(FATE, data, loss=PL, cfg=cfg)
        assert training_accuracy(result.model, data) == 1.0
        assert result.loss_trace[-1] < result.loss_trace[0]

    def test_learns_medoid_above_chance(self):
        data = medoid_data(400)
        result = train_ranker(FATE, data, cfg=TrainConfig(epochs=15, seed=1))
        assert training_accuracy(result.model, data) > 0.6

    def test_mixed_sizes(self):
        rng = np.random.default_rng(0)
        objects = [rng.random((n, 2)) for n in (1, 2, 3, 5, 5, 7)]
        rankings = [rng.permutation(len(x)) for x in objects]
        data = Dataset(objects, rankings, dim=2)
        for kind in (FETA, FATE, RANKNET):
            result = train_ranker(kind, data, cfg=TrainConfig(epochs=2, batch_size=4))
            assert len(result.loss_trace) == 2
            assert all(np.isfinite(result.loss_trace))

    def test_incompatible(self):
        with pytest.raises(ValueError):
            check_compatible(RANKNET, PL)
        with pytest.raises(ValueError):
            train_ranker(FETA, medoid_data(5), loss="ranknet")
        with pytest.raises(ValueError):
            check_compatible("svm", HINGE)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_reports_epoch(self):
        data = medoid_data(50)
        cfg = TrainConfig(learning_rate=1e200, epochs=5, seed=0)
        with pytest.raises(DivergenceError) as info:
            train_ranker(RANKNET, data, loss="ranknet", cfg=cfg)
        assert info.value.epoch == 0

    def test_empty(self):
        with pytest.raises(ValueError):
            train_ranker(FATE, Dataset([], [], dim=2))


class TestSizeGeneralization:
    @pytest.mark.parametrize("kind", [FETA, FATE, RANKNET, LISTNET])
    def test_any_size(self, kind, rng):
        model = train_ranker(kind, medoid_data(50), cfg=TrainConfig(epochs=1)).model
        for n in range(2, 25):
            pi = model.predict(rng.random((n, 2)))
            assert is_permutation(pi) and len(pi) == n


class TestErr:
    def test_linear_recovery(self, rng):
        w_true, b_true = np.array([0.3, -0.2]), 0.1
        objects, rankings = [], []
        for _ in range(300):
            # objects whose normalized-rank targets are exactly linear in the features
            n = 4
            t = 1 - rng.permutation(n) / (n - 1)
            x0 = rng.normal(size=n)
            x1 = (t - b_true - w_true[0] * x0) / w_true[1]
            objects.append(np.column_stack([x0, x1]))
            rankings.append(((1 - t) * (n - 1)).round().astype(int))
        data = Dataset(objects, rankings, dim=2)
        model = err_fit(data, ridge=0.0)
        np.testing.assert_allclose(model.w, w_true, atol=1e-8)
        assert model.b == pytest.approx(b_true, abs=1e-8)
        assert training_accuracy(model, data) == 1.0

    def test_constant_targets(self):
        data = Dataset([np.array([[0.1, 0.2]]), np.array([[0.5, -1.0]])], [np.array([0]), np.array([0])], dim=2)
        model = err_fit(data, ridge=1e-3)
        np.testing.assert_allclose(model.w, 0.0, atol=1e-15)
        assert model.b == 1.0

    def test_singular(self):
        data = Dataset([np.array([[1.0, 2.0], [1.0, 2.0]])], [np.array([0, 1])], dim=2)
        with pytest.raises(np.linalg.LinAlgError):
            err_fit(data, ridge=0.0)

    def test_medoid_chance(self):
        train, test = medoid_data(2000, seed=1), medoid_data(2000, seed=2)
        model = train_ranker("err", train).model
        assert isinstance(model, LinearModel)
        assert training_accuracy(model, test) == pytest.approx(0.5, abs=0.03)


class TestSubrankings:
    def test_full_size(self):
        Q, pi = np.arange(8.0).reshape(4, 2), np.array([2, 0, 1, 3])
        data = sample_subrankings(Q, pi, 4, 1, seed=0)
        np.testing.assert_array_equal(data.objects[0], Q)
        np.testing.assert_array_equal(data.rankings[0], pi)

    def test_induced(self):
        Q, pi = np.arange(8.0).reshape(4, 2), np.array([2, 0, 1, 3])
        for seed in range(50):
            data = sample_subrankings(Q, pi, 2, 1, seed=seed)
            if np.array_equal(data.objects[0], Q[[0, 3]]):
                np.testing.assert_array_equal(data.rankings[0], [0, 1])
                break
        else:
            pytest.fail("subset {0, 3} never drawn")

    def test_relative_order_preserved(self, rng):
        Q = rng.random((10, 3))
        pi = rng.permutation(10)
        data = sample_subrankings(Q, pi, 4, 30, seed=3)
        for X, r in data:
            items = [int(np.flatnonzero((Q == x).all(axis=1))[0]) for x in X]
            np.testing.assert_array_equal(np.argsort(r), np.argsort(pi[items]))

    def test_deterministic(self, rng):
        Q, pi = rng.random((7, 2)), rng.permutation(7)
        a = sample_subrankings(Q, pi, 3, 5, seed=11)
        b = sample_subrankings(Q, pi, 3, 5, seed=11)
        for x, y in zip(a.objects, b.objects):
            np.testing.assert_array_equal(x, y)

    @pytest.mark.parametrize("size", [1, 8])
    def test_bad_size(self, size):
        with pytest.raises(ValueError):
            sample_subrankings(np.zeros((7, 2)), np.arange(7), size, 1, seed=0)


class TestSerialization:
    @pytest.mark.parametrize("kind", [FETA, FATE, RANKNET, LISTNET])
    def test_round_trip_bit_exact(self, kind, rng):
        model = tiny(kind, seed=3)
        model.set_params([p + rng.normal(size=p.shape) * 1e-3 for p in model.params()])
        text = dumps_model(model)
        loaded = loads_model(text)
        X = rng.random((9, 2))
        np.testing.assert_array_equal(loaded.scores(X), model.scores(X))
        assert dumps_model(loaded) == text

    def test_err_round_trip(self):
        model = err_fit(medoid_data(100))
        loaded = loads_model(dumps_model(model))
        X = np.random.default_rng(0).random((5, 2))
        np.testing.assert_array_equal(loaded.scores(X), model.scores(X))

    def test_rejects_foreign(self):
        with pytest.raises(ValueError):
            loads_model('{"format": "other"}')

    def test_rejects_wrong_param_count(self):
        import json

        doc = json.loads(dumps_model(tiny(FATE)))
        doc["params"] = doc["params"][:-1]
        with pytest.raises(ValueError):
            loads_model(json.dumps(doc))


def test_predict_scores_batches_by_size(rng):
    objects = [rng.random((n, 2)) for n in (3, 5, 3, 4)]
    data = Dataset(objects, [rng.permutation(len(x)) for x in objects], dim=2)
    model = tiny(FATE)
    for X, s in zip(objects, predict_scores(model, data)):
        np.testing.assert_allclose(s, model.scores(X), atol=1e-14)
