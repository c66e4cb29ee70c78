"""Calibration scopes and their objectives.

Three ways to score a pipeline's confidence: reader-only (retrieval assumed
perfect), individual (retriever and reader calibrated separately against
their own targets), and joint (the document subset treated as latent and
marginalized, with a softened top-k sampler making the subset draw
differentiable during fitting). Inference-time confidence always uses the
pool-restricted per-document posterior mixture.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .calibrators import (
    BoundParams,
    CalibratorModel,
    FeatureConfig,
    Method,
    Scope,
    TemperatureParams,
    bind_vector,
    featurize,
    gbdt_predict,
    mlp_temperatures,
    params_to_vector,
)
from .core import (
    CalibrationExample,
    Dataset,
    Prediction,
    RngState,
    build_interest_set,
    softmax,
)
from .gumbel import AnnealSchedule, GateVector, anneal, gumbel_noise, relaxed_steps_raw
from .scalargrad import Graph

__all__ = [
    "LossGraph",
    "ScopeConfig",
    "fit_individual",
    "joint_mc_nll",
    "nll",
    "predict_dataset",
    "predict_example",
    "reader_confidence",
    "relaxed_system_confidence",
    "retriever_posterior",
    "system_confidence",
]

_CONF_FLOOR = 1e-12


@dataclass(frozen=True, slots=True)
class ScopeConfig:
    """How a scope is fitted: subset samples per example and the pool cap."""

    scope: Scope
    mc_samples: int = 1
    pool_limit: int = 100

    def __post_init__(self):
        object.__setattr__(self, "scope", Scope(self.scope))
        if self.mc_samples < 1:
            raise ValueError("mc_samples must be >= 1")
        if self.pool_limit < 1:
            raise ValueError("pool_limit must be >= 1")


# ---------------------------------------------------------------------------
# Per-example numeric views


class ExampleView:
    """Plain-float mirror of one example for the objective builders."""

    __slots__ = (
        "example",
        "k",
        "scores",
        "doc_logits",
        "correct_cols",
        "has_correct",
        "relevant_docs",
        "features",
    )

    def __init__(self, example: CalibrationExample, pool_limit: int = 100):
        pool = example.pool[:pool_limit]
        self.example = example
        self.k = min(example.k, len(pool))
        self.scores = [float(d.retriever_score) for d in pool]
        self.doc_logits = [[float(a.reader_logit) for a in d.answers] for d in pool]
        self.correct_cols = [
            [j for j, a in enumerate(d.answers) if a.correct] for d in pool
        ]
        self.has_correct = any(self.correct_cols)
        self.relevant_docs = [i for i, d in enumerate(pool) if d.relevant]
        self.features = None

    def attach_features(self, config: FeatureConfig) -> None:
        top = build_interest_set(self.example, size=1)[0]
        raw = featurize(self.example, top.answer_key, k=config.k, rank=top.rank)
        self.features = config.standardize(raw)


def make_views(examples, pool_limit: int = 100) -> list[ExampleView]:
    return [ExampleView(ex, pool_limit) for ex in examples]


def standardized_feature_config(dataset: Dataset, interest_size: int = 3) -> FeatureConfig:
    """Feature layout with per-feature mean/std frozen from this dataset."""
    ks = {ex.k for ex in dataset.examples}
    if len(ks) != 1:
        raise ValueError(f"feature standardization needs a uniform k, got {sorted(ks)}")
    k = ks.pop()
    rows = []
    for ex in dataset.examples:
        top = build_interest_set(ex, size=1)[0]
        rows.append(featurize(ex, top.answer_key, k=k, rank=top.rank))
    arr = np.array(rows)
    std = arr.std(axis=0)
    return FeatureConfig(
        k=k,
        interest_size=interest_size,
        mean=arr.mean(axis=0),
        std=np.maximum(std, 1e-9),
    )


# ---------------------------------------------------------------------------
# Numeric confidences


def retriever_posterior(example: CalibrationExample, t1: float) -> np.ndarray:
    """Posterior over the pool: softmax of retriever scores / t1."""
    if t1 <= 0:
        raise ValueError("t1 must be positive")
    scores = np.array([d.retriever_score for d in example.pool])
    return softmax(scores / t1)


def reader_confidence(example: CalibrationExample, doc, t2: float) -> np.ndarray:
    """Within-document answer distribution: softmax of reader logits / t2."""
    if t2 <= 0:
        raise ValueError("t2 must be positive")
    logits = np.array([a.reader_logit for a in doc.answers])
    return softmax(logits / t2)


def _stage_transforms(model: CalibratorModel, example: CalibrationExample) -> tuple[float, float, float, float]:
    """Numeric (retr_mult, retr_shift, reader_mult, reader_shift) for one example."""
    if model.method == Method.TEMP_SCALING:
        p = model.params
        return 1.0 / p.retriever_temp, 0.0, 1.0 / p.reader_temp, 0.0
    if model.method == Method.PLATT:
        p = model.params
        return p.retriever_scale, p.retriever_shift, p.reader_scale, p.reader_shift
    if model.method == Method.TEMP_PREDICTOR:
        fc = model.feature_config
        top = build_interest_set(example, size=1)[0]
        raw = featurize(example, top.answer_key, k=fc.k, rank=top.rank)
        t1, t2 = mlp_temperatures(fc.standardize(raw), model.params)
        return 1.0 / t1, 0.0, 1.0 / t2, 0.0
    raise ValueError(f"no stage transforms for method {model.method}")


def system_confidence(example: CalibrationExample, model: CalibratorModel) -> dict[str, float]:
    """Calibrated confidence per answer key.

    reader_only: the best within-document reader confidence per key, the
    retriever being trusted outright. individual / joint: the posterior
    mixture sum_i P(doc_i) * P(key | doc_i), aggregated per key. forecaster:
    the tree score per interest-set candidate (not normalized across keys).
    """
    if model.method == Method.FORECASTER:
        fc = model.feature_config
        out = {}
        for entry in build_interest_set(example, size=fc.interest_size):
            feats = featurize(example, entry.answer_key, k=fc.k, rank=entry.rank)
            out[entry.answer_key] = gbdt_predict(model.params, feats)
        return out

    m1, b1, m2, b2 = _stage_transforms(model, example)
    conf: dict[str, float] = {}
    if model.scope == Scope.READER_ONLY:
        for doc in example.pool:
            logits = np.array([a.reader_logit for a in doc.answers])
            probs = softmax(logits * m2 + b2)
            for a, p in zip(doc.answers, probs):
                if p > conf.get(a.key, 0.0):
                    conf[a.key] = float(p)
        return conf

    scores = np.array([d.retriever_score for d in example.pool])
    posterior = softmax(scores * m1 + b1)
    for w, doc in zip(posterior, example.pool):
        logits = np.array([a.reader_logit for a in doc.answers])
        probs = softmax(logits * m2 + b2)
        for a, p in zip(doc.answers, probs):
            conf[a.key] = conf.get(a.key, 0.0) + float(w * p)
    return conf


def relaxed_system_confidence(
    example: CalibrationExample, gates: GateVector, t2: float
) -> dict[str, float]:
    """Gate-weighted reader mixture: (1/k) * sum_i gates_i * P(key | doc_i)."""
    if gates.gates.size != len(example.pool):
        raise ValueError(
            f"gates length {gates.gates.size} does not match pool size {len(example.pool)}"
        )
    k = gates.k
    conf: dict[str, float] = {}
    for w, doc in zip(gates.gates, example.pool):
        probs = reader_confidence(example, doc, t2)
        for a, p in zip(doc.answers, probs):
            conf[a.key] = conf.get(a.key, 0.0) + float(w * p) / k
    return conf


def nll(dataset: Dataset, model: CalibratorModel) -> float:
    """Negative log-likelihood of the correct answers under the model.

    Per example: -log of the system-confidence mass on correct answer keys,
    clamped to [1e-12, 1]. Examples whose pool contains no correct candidate
    are skipped with a counted warning.
    """
    total = 0.0
    skipped = 0
    for ex in dataset.examples:
        correct_keys = {a.key for d in ex.pool for a in d.answers if a.correct}
        if not correct_keys:
            skipped += 1
            continue
        conf = system_confidence(ex, model)
        mass = sum(conf.get(key, 0.0) for key in correct_keys)
        total -= math.log(min(max(mass, _CONF_FLOOR), 1.0))
    if skipped:
        warnings.warn(f"nll skipped {skipped} example(s) with no correct candidate")
    return total


# ---------------------------------------------------------------------------
# Raw graph builders (hot paths, shared by joint_mc_nll and the fitters)


def _doc_correct_mass_raw(g: Graph, logits: list[float], cols: list[int], mult: int) -> int:
    """Node id of sum_{c in cols} softmax(logits * mult)[c], max-stabilized."""
    mv = g._vals[mult]
    shift = g.iconst(-max(z * mv for z in logits))
    exps = [g.iexp_mul_add(g.iconst(z), mult, shift) for z in logits]
    num = g.isum([exps[c] for c in cols])
    return g.idiv(num, g.isum(exps))


def _clamped_neg_log_raw(g: Graph, mass: int) -> int:
    clamped = g.ineg(g.imaxc(g.ineg(g.imaxc(mass, _CONF_FLOOR)), -1.0))
    return g.ineg(g.ilog(clamped))


def joint_example_nll_raw(
    g: Graph,
    bound: BoundParams,
    view: ExampleView,
    temperature: float,
    mc_samples: int,
    rng: RngState,
) -> int:
    """-log of the mean relaxed correct-answer mass over mc_samples subsets."""
    m1, m2 = bound.multipliers(view.features)
    score_ids = [g.iconst_mul(m1, s) for s in view.scores]
    k = view.k
    needed = sorted(i for i, cols in enumerate(view.correct_cols) if cols)
    needed_set = set(needed)
    doc_mass = {
        i: _doc_correct_mass_raw(g, view.doc_logits[i], view.correct_cols[i], m2)
        for i in needed
    }
    sample_masses = []
    for _ in range(mc_samples):
        noise = gumbel_noise(rng, len(view.scores))
        steps = relaxed_steps_raw(g, score_ids, k, temperature, noise, needed_set)
        terms = []
        for i in needed:
            gate = g.isum([steps[s][i] for s in range(k)])
            terms.append(g.imul(gate, doc_mass[i]))
        mass = g.imul(g.isum(terms), g.iconst(1.0 / k))
        sample_masses.append(mass)
    mean_mass = g.isum(sample_masses)
    if mc_samples > 1:
        mean_mass = g.imul(mean_mass, g.iconst(1.0 / mc_samples))
    return _clamped_neg_log_raw(g, mean_mass)


def joint_nll_raw(
    g: Graph,
    bound: BoundParams,
    views: list[ExampleView],
    temperature: float,
    mc_samples: int,
    rng: RngState,
) -> int:
    terms = [
        joint_example_nll_raw(g, bound, v, temperature, mc_samples, rng)
        for v in views
        if v.has_correct
    ]
    if not terms:
        return g.iconst(0.0)
    return g.isum(terms)


def reader_only_nll_raw(g: Graph, bound: BoundParams, views: list[ExampleView]) -> int:
    """Reader-only NLL: correct-key mass under the best-document reader confidence.

    The best document per correct key is chosen at the current parameter
    values (the active branch of the max), so the gradient is the max's
    subgradient.
    """
    terms = []
    for view in views:
        if not view.has_correct:
            continue
        _, m2 = bound.multipliers(view.features)
        mv = g._vals[m2]
        key_best: dict[str, tuple[float, int, int]] = {}
        for i, cols in enumerate(view.correct_cols):
            if not cols:
                continue
            logits = view.doc_logits[i]
            m = max(z * mv for z in logits)
            den = sum(math.exp(z * mv - m) for z in logits)
            for c in cols:
                key = view.example.pool[i].answers[c].key
                p = math.exp(logits[c] * mv - m) / den
                cur = key_best.get(key)
                if cur is None or p > cur[0]:
                    key_best[key] = (p, i, c)
        mass_terms = [
            _doc_correct_mass_raw(g, view.doc_logits[i], [c], m2)
            for (_, i, c) in key_best.values()
        ]
        terms.append(_clamped_neg_log_raw(g, g.isum(mass_terms)))
    if not terms:
        return g.iconst(0.0)
    return g.isum(terms)


def _retriever_relevant_mass_raw(g: Graph, bound: BoundParams, view: ExampleView) -> int:
    m1, _ = bound.multipliers(view.features)
    mv = g._vals[m1]
    shift = g.iconst(-max(s * mv for s in view.scores))
    exps = [g.iexp_mul_add(g.iconst(s), m1, shift) for s in view.scores]
    num = g.isum([exps[i] for i in view.relevant_docs])
    return g.idiv(num, g.isum(exps))


def individual_nll_raw(g: Graph, bound: BoundParams, views: list[ExampleView]) -> int:
    """Individually-calibrated objective: retriever NLL + reader NLL.

    The retriever term is the posterior mass on distant-supervision positives;
    the reader term is the correct-answer mass within each relevant document.
    The two terms touch disjoint parameters for the temperature and Platt
    methods, so this matches the two-step procedure exactly.
    """
    terms = []
    for view in views:
        if not view.relevant_docs:
            continue
        m1, m2 = bound.multipliers(view.features)
        terms.append(_clamped_neg_log_raw(g, _retriever_relevant_mass_raw(g, bound, view)))
        for i in view.relevant_docs:
            cols = view.correct_cols[i]
            if cols:
                terms.append(
                    _clamped_neg_log_raw(g, _doc_correct_mass_raw(g, view.doc_logits[i], cols, m2))
                )
    if not terms:
        return g.iconst(0.0)
    return g.isum(terms)


def anneal_at(schedule: AnnealSchedule, epoch: int) -> float:
    return anneal(schedule, min(epoch, schedule.total_steps))


# ---------------------------------------------------------------------------
# Public joint objective


@dataclass(slots=True)
class LossGraph:
    """A differentiable objective value with its expression graph."""

    graph: Graph
    root_id: int
    param_ids: list[int]

    @property
    def value(self) -> float:
        return self.graph.value(self.root_id)

    def gradient(self) -> np.ndarray:
        grads = self.graph.backward(self.root_id)
        return np.array([grads[i] for i in self.param_ids])


def joint_mc_nll(
    dataset: Dataset,
    model: CalibratorModel,
    temperature: float,
    mc_samples: int,
    rng: RngState,
    param_vector: np.ndarray | None = None,
    pool_limit: int = 100,
) -> LossGraph:
    """Monte-Carlo joint NLL as a differentiable scalar.

    Per example, averages the relaxed correct-answer mass over ``mc_samples``
    softened subsets drawn at ``temperature`` (retriever scores scaled by the
    model's retriever transform), takes -log of the clamped mass, and sums
    over examples. Examples with no correct candidate contribute nothing.
    """
    if mc_samples < 1:
        raise ValueError("mc_samples must be >= 1")
    if model.method == Method.FORECASTER:
        raise ValueError("joint objective applies to gradient-fitted methods only")
    vec = params_to_vector(model.params) if param_vector is None else np.asarray(param_vector)
    fc = model.feature_config
    feature_dim = fc.dim if fc is not None else 0
    hidden = model.params.hidden if model.method == Method.TEMP_PREDICTOR else 16
    scale = model.params.inv_temp_scale if model.method == Method.TEMP_PREDICTOR else 1.0
    graph = Graph()
    bound = bind_vector(graph, model.method, vec, feature_dim, hidden, scale)
    views = make_views(dataset.examples, pool_limit)
    if model.method == Method.TEMP_PREDICTOR:
        for v in views:
            v.attach_features(fc)
    root = joint_nll_raw(graph, bound, views, temperature, mc_samples, rng)
    return LossGraph(graph=graph, root_id=root, param_ids=bound.node_ids)


# ---------------------------------------------------------------------------
# Individual two-step temperature fit


def fit_individual(
    dataset: Dataset,
    step_size: float = 0.05,
    epochs: int = 200,
    pool_limit: int = 100,
) -> TemperatureParams:
    """Two-step temperature fit: retriever first, then the reader with t1 fixed.

    Step 1 minimizes the NLL of the posterior mass on distant-supervision
    positives; step 2 minimizes the reader NLL of the correct answers inside
    relevant documents.
    """
    from .calibrators import FitDivergedError

    views = [v for v in make_views(dataset.examples, pool_limit) if v.relevant_docs]
    if not views:
        raise ValueError("no relevant documents anywhere in the dataset")

    def descend(objective, n_terms: int, log_t: float) -> float:
        for epoch in range(epochs):
            g = Graph()
            p = g.iparam(log_t)
            mult = g.iexp(g.ineg(p))
            root = objective(g, mult)
            grad = g.backward(root)[p]
            if not math.isfinite(grad):
                raise FitDivergedError(epoch, f"gradient {grad!r}")
            log_t -= step_size * grad / n_terms
        return log_t

    def retriever_obj(g: Graph, mult: int) -> int:
        terms = []
        mv = g._vals[mult]
        for view in views:
            shift = g.iconst(-max(s * mv for s in view.scores))
            exps = [g.iexp_mul_add(g.iconst(s), mult, shift) for s in view.scores]
            num = g.isum([exps[i] for i in view.relevant_docs])
            terms.append(_clamped_neg_log_raw(g, g.idiv(num, g.isum(exps))))
        return g.isum(terms)

    reader_targets = [
        (view, i)
        for view in views
        for i in view.relevant_docs
        if view.correct_cols[i]
    ]

    def reader_obj(g: Graph, mult: int) -> int:
        terms = [
            _clamped_neg_log_raw(
                g, _doc_correct_mass_raw(g, view.doc_logits[i], view.correct_cols[i], mult)
            )
            for view, i in reader_targets
        ]
        return g.isum(terms)

    log_t1 = descend(retriever_obj, len(views), 0.0)
    log_t2 = descend(reader_obj, len(reader_targets), 0.0) if reader_targets else 0.0
    return TemperatureParams(retriever_temp=math.exp(log_t1), reader_temp=math.exp(log_t2))


# ---------------------------------------------------------------------------
# Prediction


def predict_example(example: CalibrationExample, model: CalibratorModel) -> Prediction:
    """The pipeline's top answer with the model's confidence in it.

    The predicted key is the identity-calibrated top candidate (calibrators
    adjust confidence, not the prediction); the confidence is the model's
    system confidence for that key.
    """
    top = build_interest_set(example, size=1)[0]
    if model.method == Method.FORECASTER:
        fc = model.feature_config
        feats = featurize(example, top.answer_key, k=fc.k, rank=top.rank)
        conf = gbdt_predict(model.params, feats)
    else:
        conf = system_confidence(example, model).get(top.answer_key, 0.0)
    conf = min(max(conf, 0.0), 1.0)
    return Prediction(
        query_id=example.query_id,
        answer_key=top.answer_key,
        confidence=conf,
        correct=top.correct,
    )


def predict_dataset(dataset: Dataset, model: CalibratorModel) -> list[Prediction]:
    return [predict_example(ex, model) for ex in dataset.examples]
