import math
import warnings

import numpy as np
import pytest

from rrcal.calibrators import (
    FitConfig,
    GbdtConfig,
    Method,
    Scope,
    TemperatureParams,
    fit_forecaster,
    fit_gradient_calibrator,
    identity_model,
)
from rrcal.core import Dataset, RngState, Split, softmax
from rrcal.gumbel import gumbel_noise, plackett_luce_prob, relaxed_topk
from rrcal.objectives import (
    fit_individual,
    joint_mc_nll,
    nll,
    predict_dataset,
    predict_example,
    reader_confidence,
    relaxed_system_confidence,
    retriever_posterior,
    system_confidence,
)
from rrcal.scalargrad import finite_diff
from rrcal.simulator import SimulatorConfig, generate

from conftest import make_example, random_example


class TestRetrieverPosterior:
    def test_singleton(self):
        ex = make_example("q", [3.7], [[0.1]], [[True]])
        np.testing.assert_allclose(retriever_posterior(ex, 2.0), [1.0])

    def test_equal_scores(self):
        ex = make_example("q", [1.0, 1.0], [[0.1], [0.2]], [[True], [False]], k=1)
        for t1 in (0.5, 1.0, 4.0):
            np.testing.assert_allclose(retriever_posterior(ex, t1), [0.5, 0.5])

    def test_hand_softmax(self):
        ex = make_example("q", [3.0, 1.0, 0.0], [[0.1]] * 3, [[False]] * 3, k=1)
        np.testing.assert_allclose(
            retriever_posterior(ex, 1.0), [0.84379473, 0.11419519, 0.04201007], atol=1e-7
        )

    def test_positive_temperature_required(self):
        ex = make_example("q", [1.0], [[0.1]], [[True]])
        with pytest.raises(ValueError):
            retriever_posterior(ex, 0.0)


class TestReaderConfidence:
    def test_singleton(self):
        ex = make_example("q", [0.0], [[2.2]], [[True]])
        np.testing.assert_allclose(reader_confidence(ex, ex.pool[0], 1.0), [1.0])

    def test_symmetric(self):
        ex = make_example("q", [0.0], [[0.0, 0.0]], [[True, False]])
        np.testing.assert_allclose(reader_confidence(ex, ex.pool[0], 3.0), [0.5, 0.5])

    def test_hand_value(self):
        ex = make_example("q", [0.0], [[1.0, -1.0]], [[True, False]])
        np.testing.assert_allclose(
            reader_confidence(ex, ex.pool[0], 2.0), [0.73105858, 0.26894142], atol=1e-7
        )


class TestSystemConfidence:
    def test_posterior_times_reader_product(self):
        # retriever posterior 0.99 for the top document, reader confidence
        # 0.79 for its best answer: system confidence 0.99 * 0.79 = 0.78
        ex = make_example(
            "q",
            [math.log(0.99), math.log(0.01)],
            [[math.log(0.79), math.log(0.21)], [0.0, 0.0]],
            [[False, False], [False, False]],
            k=1,
            keys=[["half-blood prince", "other"], ["x", "y"]],
        )
        conf = system_confidence(ex, identity_model(Scope.JOINT))
        assert conf["half-blood prince"] == pytest.approx(0.99 * 0.79, abs=1e-12)
        assert round(conf["half-blood prince"], 2) == 0.78

    def test_singleton_pool_equals_reader(self):
        ex = make_example("q", [1.3], [[0.5, -0.2, 0.1]], [[True, False, False]])
        conf = system_confidence(ex, identity_model(Scope.JOINT))
        np.testing.assert_allclose(
            [conf[a.key] for a in ex.pool[0].answers],
            reader_confidence(ex, ex.pool[0], 1.0),
        )

    def test_equal_scores_mixture_average(self):
        ex = make_example(
            "q",
            [0.7, 0.7],
            [[2.0, 0.0], [1.0, 0.5]],
            [[False] * 2] * 2,
            k=1,
            keys=[["shared", "o1"], ["shared", "o2"]],
        )
        p = softmax(np.array([2.0, 0.0]))[0]
        q = softmax(np.array([1.0, 0.5]))[0]
        conf = system_confidence(ex, identity_model(Scope.JOINT))
        assert conf["shared"] == pytest.approx((p + q) / 2)

    def test_reader_only_takes_best_document(self):
        ex = make_example(
            "q",
            [5.0, -5.0],
            [[0.0, 0.0], [3.0, 0.0]],
            [[False] * 2] * 2,
            k=1,
            keys=[["a", "b"], ["a", "c"]],
        )
        conf = system_confidence(ex, identity_model(Scope.READER_ONLY))
        assert conf["a"] == pytest.approx(softmax(np.array([3.0, 0.0]))[0])

    @staticmethod
    def rebuild_with_shift(ex, shift):
        return make_example(
            ex.query_id,
            [d.retriever_score + shift for d in ex.pool],
            [[a.reader_logit for a in d.answers] for d in ex.pool],
            [[a.correct for a in d.answers] for d in ex.pool],
            k=ex.k,
            keys=[[a.key for a in d.answers] for d in ex.pool],
        )

    def test_reader_only_ignores_retriever_scores(self):
        rng = np.random.default_rng(0)
        ex1 = random_example(rng, "q")
        ex2 = self.rebuild_with_shift(ex1, 17.0)
        m = identity_model(Scope.READER_ONLY)
        c1, c2 = system_confidence(ex1, m), system_confidence(ex2, m)
        for key in c1:
            assert c1[key] == pytest.approx(c2[key], abs=1e-12)

    def test_marginal_shift_invariance(self):
        rng = np.random.default_rng(1)
        ex = random_example(rng, "q")
        shifted = self.rebuild_with_shift(ex, 9.5)
        m = identity_model(Scope.JOINT)
        c1, c2 = system_confidence(ex, m), system_confidence(shifted, m)
        for key in c1:
            assert c1[key] == pytest.approx(c2[key], abs=1e-12)

    def test_mass_bounded_by_one(self):
        rng = np.random.default_rng(2)
        m = identity_model(Scope.INDIVIDUAL)
        for i in range(20):
            ex = random_example(rng, f"q{i}", n_docs=5, n_answers=4)
            total = sum(system_confidence(ex, m).values())
            assert total <= 1.0 + 1e-9

    def test_forecaster_scores_interest_set(self, small_dataset):
        model = fit_forecaster(small_dataset, interest_size=2, config=GbdtConfig(rounds=5))
        conf = system_confidence(small_dataset.examples[0], model)
        assert len(conf) == 2
        assert all(0.0 <= v <= 1.0 for v in conf.values())

    def test_temp_predictor_path(self, small_dataset):
        model = fit_gradient_calibrator(
            small_dataset, Scope.JOINT, Method.TEMP_PREDICTOR,
            FitConfig(epochs=10, hidden=4), rng=RngState(2),
        )
        conf = system_confidence(small_dataset.examples[0], model)
        assert all(0.0 <= v <= 1.0 for v in conf.values())


class TestNll:
    def model(self, t1=1.0, t2=1.0, scope=Scope.JOINT):
        return identity_model(scope) if t1 == t2 == 1.0 else None

    def test_perfect_confidence_gives_zero(self):
        ex = make_example("q", [0.0], [[80.0, 0.0]], [[True, False]])
        assert nll(Dataset([ex], Split.CALIB), identity_model()) == pytest.approx(0.0, abs=1e-9)

    def test_half_confidence_sums_log_two(self):
        exs = [
            make_example(f"q{i}", [0.0], [[0.0, 0.0]], [[True, False]])
            for i in range(5)
        ]
        val = nll(Dataset(exs, Split.CALIB), identity_model())
        assert val == pytest.approx(5 * math.log(2))

    def test_clamp_floor(self):
        ex = make_example("q", [0.0], [[-90.0, 0.0]], [[True, False]])
        val = nll(Dataset([ex], Split.CALIB), identity_model())
        assert val == pytest.approx(-math.log(1e-12), rel=1e-6)

    def test_skips_examples_without_correct_candidate(self):
        good = make_example("g", [0.0], [[0.0, 0.0]], [[True, False]])
        bad = make_example("b", [0.0], [[0.0, 0.0]], [[False, False]])
        with pytest.warns(UserWarning, match="skipped 1"):
            val = nll(Dataset([good, bad], Split.CALIB), identity_model())
        assert val == pytest.approx(math.log(2))


class TestRelaxedSystemConfidence:
    def test_hard_gates_give_uniform_mixture(self):
        ex = make_example(
            "q", [1.0, 0.5], [[2.0, 0.0], [0.3, 0.1]], [[True, False], [False, False]], k=2
        )
        gv = relaxed_topk(np.array([d.retriever_score for d in ex.pool]), 2, 0.01,
                          noise=np.array([0.0, 0.0]))
        conf = relaxed_system_confidence(ex, gv, 1.0)
        expect = 0.5 * (
            reader_confidence(ex, ex.pool[0], 1.0)[0] + 0.0
        )
        assert conf["a0_0"] == pytest.approx(expect, abs=1e-3)

    def test_full_pool_selection_is_mean(self):
        ex = make_example(
            "q", [0.4, -0.4], [[1.0, 0.0], [0.6, 0.2]], [[False] * 2] * 2, k=2,
            keys=[["x", "y"], ["x", "y"]],
        )
        gv = relaxed_topk(np.array([0.4, -0.4]), 2, 0.5, RngState(1))
        conf = relaxed_system_confidence(ex, gv, 1.0)
        manual = 0.0
        for w, doc in zip(gv.gates, ex.pool):
            manual += w * reader_confidence(ex, doc, 1.0)[0] / 2
        assert conf["x"] == pytest.approx(manual)

    def test_length_mismatch(self):
        ex = make_example("q", [0.0, 1.0], [[0.1], [0.2]], [[True], [False]], k=1)
        gv = relaxed_topk(np.zeros(3), 1, 1.0, RngState(0))
        with pytest.raises(ValueError, match="match pool size"):
            relaxed_system_confidence(ex, gv, 1.0)


def enumeration_nll(dataset, t1=1.0, t2=1.0):
    """Exact subset marginal: enumerate all ordered k-tuples with their
    selection probabilities and the uniform reader mixture per tuple."""
    import itertools

    total = 0.0
    for ex in dataset.examples:
        correct_keys = {a.key for d in ex.pool for a in d.answers if a.correct}
        if not correct_keys:
            continue
        scores = np.array([d.retriever_score for d in ex.pool]) / t1
        masses = []
        for d in ex.pool:
            probs = reader_confidence(ex, d, t2)
            masses.append(sum(p for a, p in zip(d.answers, probs) if a.key in correct_keys))
        mean_mass = 0.0
        for tup in itertools.permutations(range(len(ex.pool)), ex.k):
            p_tup = plackett_luce_prob(scores, list(tup))
            mean_mass += p_tup * sum(masses[i] for i in tup) / ex.k
        total -= math.log(min(max(mean_mass, 1e-12), 1.0))
    return total


class TestJointMcNll:
    def small_dataset(self, n=4, n_docs=5, k=2, seed=3):
        rng = np.random.default_rng(seed)
        return Dataset(
            [random_example(rng, f"q{i}", n_docs=n_docs, n_answers=3, k=k) for i in range(n)],
            Split.CALIB,
        )

    def test_empty_dataset_is_zero(self):
        loss = joint_mc_nll(Dataset([], Split.CALIB), identity_model(), 1.0, 1, RngState(0))
        assert loss.value == 0.0

    def test_pool_equals_k_matches_uniform_mixture(self):
        rng = np.random.default_rng(4)
        exs = [random_example(rng, f"q{i}", n_docs=3, n_answers=2, k=3) for i in range(5)]
        ds = Dataset(exs, Split.CALIB)
        loss = joint_mc_nll(ds, identity_model(), 0.01, 1, RngState(5))
        expected = 0.0
        for ex in exs:
            correct_keys = {a.key for d in ex.pool for a in d.answers if a.correct}
            mass = np.mean(
                [
                    sum(
                        p
                        for a, p in zip(d.answers, reader_confidence(ex, d, 1.0))
                        if a.key in correct_keys
                    )
                    for d in ex.pool
                ]
            )
            expected -= math.log(mass)
        assert loss.value == pytest.approx(expected, abs=1e-3)

    def test_monte_carlo_means_agree_across_sample_counts(self):
        ds = self.small_dataset()
        model = identity_model()
        v1 = np.array([
            joint_mc_nll(ds, model, 1.0, 1, RngState(seed)).value for seed in range(200)
        ])
        v4 = np.array([
            joint_mc_nll(ds, model, 1.0, 4, RngState(10_000 + seed)).value
            for seed in range(200)
        ])
        assert v1.std() > 0  # variance exists
        se = math.sqrt(v1.var() / 200 + v4.var() / 200)
        assert abs(v1.mean() - v4.mean()) <= 3 * se

    def test_low_temperature_matches_enumeration(self):
        ds = self.small_dataset(n=4, n_docs=5, k=2, seed=8)
        approx = joint_mc_nll(ds, identity_model(), 0.01, 2000, RngState(11)).value
        exact = enumeration_nll(ds)
        assert abs(approx - exact) < 0.02

    @pytest.mark.parametrize("method", [Method.TEMP_SCALING, Method.PLATT])
    def test_gradients_match_finite_diff(self, method):
        ds = self.small_dataset()
        from rrcal.calibrators import PlattParams

        if method == Method.TEMP_SCALING:
            model = identity_model()
            v0 = np.zeros(2)
        else:
            model = __import__("rrcal.calibrators", fromlist=["CalibratorModel"]).CalibratorModel(
                Scope.JOINT, Method.PLATT, PlattParams()
            )
            v0 = np.array([1.0, 0.0, 1.0, 0.0])

        def f(vec):
            return joint_mc_nll(ds, model, 0.8, 2, RngState(13), param_vector=vec).value

        loss = joint_mc_nll(ds, model, 0.8, 2, RngState(13), param_vector=v0)
        ad = loss.gradient()
        fd = finite_diff(f, v0, 1e-5)
        rel = np.abs(ad - fd) / np.maximum.reduce([np.abs(ad), np.abs(fd), np.full_like(fd, 1e-6)])
        assert rel.max() < 1e-4


class TestFitIndividual:
    def test_scale_recovery(self):
        cfg = SimulatorConfig(
            n_examples=2500, pool_size=6, answers_per_doc=3,
            retriever_sharpness=2.0, reader_sharpness=2.0,
            retriever_distortion=2.0, reader_distortion=0.6, seed=31,
        )
        ds, _ = generate(cfg)
        params = fit_individual(Dataset(ds.examples[:1500], Split.CALIB), epochs=150)
        assert abs(params.retriever_temp - 2.0) / 2.0 <= 0.10
        assert abs(params.reader_temp - 0.6) / 0.6 <= 0.10

    def test_already_calibrated(self):
        cfg = SimulatorConfig(
            n_examples=2000, pool_size=5, answers_per_doc=3,
            retriever_sharpness=2.0, reader_sharpness=2.0, seed=32,
        )
        ds, _ = generate(cfg)
        params = fit_individual(Dataset(ds.examples[:1200], Split.CALIB), epochs=120)
        assert 0.9 <= params.retriever_temp <= 1.1
        assert 0.9 <= params.reader_temp <= 1.1

    def test_singleton_pools_leave_t1(self):
        exs = [
            make_example(f"q{i}", [0.5], [[1.0, 0.0]], [[True, False]], relevant=[True])
            for i in range(4)
        ]
        params = fit_individual(Dataset(exs, Split.CALIB), epochs=60)
        assert params.retriever_temp == pytest.approx(1.0, abs=1e-9)

    def test_no_relevant_documents_anywhere(self):
        ex = make_example("q", [1.0, 0.0], [[0.5], [0.1]], [[True], [False]],
                          relevant=[False, False])
        with pytest.raises(ValueError, match="no relevant documents"):
            fit_individual(Dataset([ex], Split.CALIB))


class TestPredict:
    def test_prediction_is_top_candidate(self):
        ex = make_example(
            "q", [2.0, 0.0], [[3.0, 0.0], [0.5, 0.2]], [[True, False], [False, False]], k=1
        )
        pred = predict_example(ex, identity_model())
        assert pred.answer_key == "a0_0"
        assert pred.correct
        assert 0.0 <= pred.confidence <= 1.0

    def test_identity_confidence_matches_system_confidence(self):
        rng = np.random.default_rng(6)
        ex = random_example(rng, "q")
        pred = predict_example(ex, identity_model())
        assert pred.confidence == pytest.approx(
            system_confidence(ex, identity_model())[pred.answer_key]
        )

    def test_forecaster_prediction(self, small_dataset):
        model = fit_forecaster(small_dataset, interest_size=2, config=GbdtConfig(rounds=5))
        preds = predict_dataset(small_dataset, model)
        assert len(preds) == len(small_dataset.examples)
        assert all(0.0 <= p.confidence <= 1.0 for p in preds)
