"""Calibration methods: temperature scaling, Platt scaling, a temperature
predictor MLP, and a gradient-boosted-trees forecaster.

The first three are logit transforms fitted by gradient descent on a scope's
negative log-likelihood (see ``objectives``); the forecaster maps per-candidate
features to a correctness probability and is trained on interest-set rows.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .core import CalibrationExample, Dataset, RngState, build_interest_set
from .gumbel import AnnealSchedule
from .scalargrad import Graph

__all__ = [
    "CalibratorModel",
    "FeatureConfig",
    "FitConfig",
    "FitDivergedError",
    "GbdtConfig",
    "Method",
    "MlpParams",
    "PlattParams",
    "Scope",
    "TemperatureParams",
    "TreeEnsemble",
    "TreeNode",
    "featurize",
    "fit_forecaster",
    "fit_gradient_calibrator",
    "forecaster_rows",
    "gbdt_predict",
    "gbdt_predict_batch",
    "gbdt_train",
    "identity_model",
    "load_model",
    "mlp_temperatures",
    "platt_scale",
    "save_model",
    "temp_scale",
]


class Scope(str, Enum):
    READER_ONLY = "reader_only"
    INDIVIDUAL = "individual"
    JOINT = "joint"


class Method(str, Enum):
    TEMP_SCALING = "temp_scaling"
    PLATT = "platt"
    TEMP_PREDICTOR = "temp_predictor"
    FORECASTER = "forecaster"


class FitDivergedError(RuntimeError):
    """Objective became non-finite during fitting; carries the epoch index."""

    def __init__(self, iteration: int, message: str = ""):
        super().__init__(f"fit diverged at iteration {iteration}: {message}")
        self.iteration = iteration


# ---------------------------------------------------------------------------
# Parameter containers


@dataclass(slots=True)
class TemperatureParams:
    """One temperature per stage; logits are divided by it before softmax."""

    retriever_temp: float = 1.0
    reader_temp: float = 1.0

    def __post_init__(self):
        if not (self.retriever_temp > 0 and math.isfinite(self.retriever_temp)):
            raise ValueError("retriever_temp must be positive and finite")
        if not (self.reader_temp > 0 and math.isfinite(self.reader_temp)):
            raise ValueError("reader_temp must be positive and finite")


@dataclass(slots=True)
class PlattParams:
    """Affine logit transform per stage: scale * logits + shift before softmax."""

    retriever_scale: float = 1.0
    retriever_shift: float = 0.0
    reader_scale: float = 1.0
    reader_shift: float = 0.0

    def __post_init__(self):
        for v in (self.retriever_scale, self.retriever_shift, self.reader_scale, self.reader_shift):
            if not math.isfinite(v):
                raise ValueError("Platt parameters must be finite")


@dataclass(slots=True)
class MlpParams:
    """Two-layer network predicting per-example inverse temperatures.

    Output head u has two units; inverse temperatures are
    sigmoid(u) * inv_temp_scale, so with the default scale of 1 the
    temperatures lie in (1, inf) (the transform can only soften).
    """

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    activation: str = "tanh"
    inv_temp_scale: float = 1.0

    def __post_init__(self):
        self.w1 = np.asarray(self.w1, dtype=np.float64)
        self.b1 = np.asarray(self.b1, dtype=np.float64)
        self.w2 = np.asarray(self.w2, dtype=np.float64)
        self.b2 = np.asarray(self.b2, dtype=np.float64)
        if self.activation != "tanh":
            raise ValueError(f"unsupported activation {self.activation!r}")
        if self.w2.shape[0] != 2 or self.b2.shape != (2,):
            raise ValueError("output head must have exactly 2 units")
        if self.w1.shape[0] != self.b1.shape[0] or self.w2.shape[1] != self.w1.shape[0]:
            raise ValueError("inconsistent layer shapes")
        for arr in (self.w1, self.b1, self.w2, self.b2):
            if not np.all(np.isfinite(arr)):
                raise ValueError("MLP parameters must be finite")

    @property
    def hidden(self) -> int:
        return self.w1.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.w1.shape[1]


@dataclass(slots=True)
class TreeNode:
    """Axis-aligned regression tree node; leaves have feature == -1."""

    feature: int = -1
    threshold: float = 0.0
    left: "TreeNode | None" = None
    right: "TreeNode | None" = None
    value: float = 0.0

    @property
    def is_leaf(self) -> bool:
        return self.feature < 0

    def depth(self) -> int:
        if self.is_leaf:
            return 0
        return 1 + max(self.left.depth(), self.right.depth())


@dataclass(slots=True)
class TreeEnsemble:
    """Boosted regression trees over a prior log-odds."""

    prior_logit: float
    trees: list[TreeNode]
    learning_rate: float

    def __post_init__(self):
        if not 0.0 < self.learning_rate <= 1.0:
            raise ValueError("learning_rate must be in (0, 1]")
        if not math.isfinite(self.prior_logit):
            raise ValueError("prior_logit must be finite")


@dataclass(slots=True)
class FeatureConfig:
    """Feature layout plus the standardization stats frozen at fit time."""

    k: int
    interest_size: int = 3
    mean: np.ndarray | None = None
    std: np.ndarray | None = None

    def __post_init__(self):
        if self.mean is not None:
            self.mean = np.asarray(self.mean, dtype=np.float64)
        if self.std is not None:
            self.std = np.asarray(self.std, dtype=np.float64)

    @property
    def dim(self) -> int:
        return 2 * self.k + 2

    def standardize(self, features: np.ndarray) -> np.ndarray:
        if self.mean is None or self.std is None:
            return np.asarray(features, dtype=np.float64)
        return (np.asarray(features, dtype=np.float64) - self.mean) / self.std


_PARAM_TYPES = {
    Method.TEMP_SCALING: TemperatureParams,
    Method.PLATT: PlattParams,
    Method.TEMP_PREDICTOR: MlpParams,
    Method.FORECASTER: TreeEnsemble,
}


@dataclass(slots=True)
class CalibratorModel:
    """A fitted calibrator: scope x method plus its parameters."""

    scope: Scope
    method: Method
    params: TemperatureParams | PlattParams | MlpParams | TreeEnsemble
    feature_config: FeatureConfig | None = None

    def __post_init__(self):
        self.scope = Scope(self.scope)
        self.method = Method(self.method)
        expected = _PARAM_TYPES[self.method]
        if not isinstance(self.params, expected):
            raise ValueError(
                f"method {self.method.value} requires {expected.__name__} parameters, "
                f"got {type(self.params).__name__}"
            )
        if self.method in (Method.TEMP_PREDICTOR, Method.FORECASTER) and self.feature_config is None:
            raise ValueError(f"method {self.method.value} requires a feature_config")


def identity_model(scope: Scope | str = Scope.JOINT) -> CalibratorModel:
    """Uncalibrated baseline: temperature scaling with both temperatures 1."""
    return CalibratorModel(scope=Scope(scope), method=Method.TEMP_SCALING, params=TemperatureParams(1.0, 1.0))


# ---------------------------------------------------------------------------
# Logit transforms


def temp_scale(logits: np.ndarray, tau: float) -> np.ndarray:
    """softmax(logits / tau); tau must be positive."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    logits = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise ValueError("logits must be finite")
    z = logits / tau
    z = np.exp(z - np.max(z))
    return z / z.sum()


def platt_scale(logits: np.ndarray, a: float, b: float) -> np.ndarray:
    """softmax(a * logits + b)."""
    logits = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise ValueError("logits must be finite")
    z = a * logits + b
    z = np.exp(z - np.max(z))
    return z / z.sum()


# ---------------------------------------------------------------------------
# Features


def featurize(
    example: CalibrationExample,
    answer_key: str,
    k: int | None = None,
    rank: int | None = None,
) -> np.ndarray:
    """Raw-logit feature vector of length 2k + 2 for one answer candidate.

    Layout: top-k retriever scores (descending, zero-padded), the candidate's
    best reader logit, the candidate's reader logits across pool documents
    (descending, zero-padded to k), and the candidate's 1-based rank by
    identity-calibrated system confidence.
    """
    if k is None:
        k = example.k
    answer_key = answer_key.lower()
    cand_logits = [
        a.reader_logit for d in example.pool for a in d.answers if a.key == answer_key
    ]
    if not cand_logits:
        raise ValueError(f"candidate {answer_key!r} not in example {example.query_id!r}")
    if rank is None:
        entries = build_interest_set(example, size=len(example.pool) * max(len(d.answers) for d in example.pool))
        rank_of = {e.answer_key: e.rank for e in entries}
        rank = rank_of[answer_key]

    retr = sorted((d.retriever_score for d in example.pool), reverse=True)[:k]
    retr += [0.0] * (k - len(retr))
    cand = sorted(cand_logits, reverse=True)[:k]
    cand += [0.0] * (k - len(cand))
    return np.array(retr + [max(cand_logits)] + cand + [float(rank)], dtype=np.float64)


# ---------------------------------------------------------------------------
# Temperature predictor MLP


def _mlp_heads(features: np.ndarray, params: MlpParams) -> np.ndarray:
    h = np.tanh(params.w1 @ features + params.b1)
    return params.w2 @ h + params.b2


def mlp_temperatures(features: np.ndarray, params: MlpParams) -> tuple[float, float]:
    """Per-example temperatures: 1 / (sigmoid(head) * inv_temp_scale).

    With the default scale both outputs exceed 1, i.e. the predictor can only
    soften distributions.
    """
    features = np.asarray(features, dtype=np.float64)
    if features.shape != (params.feature_dim,):
        raise ValueError(
            f"feature dimension mismatch: got {features.shape}, expected ({params.feature_dim},)"
        )
    u = _mlp_heads(features, params)
    inv = 1.0 / (1.0 + np.exp(-u)) * params.inv_temp_scale
    t1, t2 = float(1.0 / inv[0]), float(1.0 / inv[1])
    if params.inv_temp_scale <= 1.0:
        # mathematically > 1 (logistic range); == 1 only at float saturation
        assert t1 >= 1.0 and t2 >= 1.0
    return t1, t2


# ---------------------------------------------------------------------------
# Gradient-boosted trees


@dataclass(frozen=True, slots=True)
class GbdtConfig:
    rounds: int = 100
    max_depth: int = 3
    learning_rate: float = 0.1
    min_leaf: int = 5


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _fit_tree(
    X: np.ndarray,
    residual: np.ndarray,
    hess: np.ndarray,
    max_depth: int,
    min_leaf: int,
) -> TreeNode:
    """Regression tree on the residuals: squared-error splits, Newton leaves."""

    def leaf(idx: np.ndarray) -> TreeNode:
        denom = max(float(hess[idx].sum()), 1e-12)
        return TreeNode(value=float(residual[idx].sum()) / denom)

    def build(idx: np.ndarray, depth: int) -> TreeNode:
        n = idx.size
        if depth >= max_depth or n < 2 * min_leaf:
            return leaf(idx)
        r = residual[idx]
        total = float(r.sum())
        base = total * total / n
        best_gain = 1e-12
        best = None
        for f in range(X.shape[1]):
            xs = X[idx, f]
            order = np.argsort(xs, kind="stable")
            xs_sorted = xs[order]
            left_sum = np.cumsum(r[order])[:-1]
            sizes = np.arange(1, n)
            valid = (xs_sorted[:-1] != xs_sorted[1:]) & (sizes >= min_leaf) & (n - sizes >= min_leaf)
            if not valid.any():
                continue
            right_sum = total - left_sum
            gain = left_sum**2 / sizes + right_sum**2 / (n - sizes) - base
            gain[~valid] = -np.inf
            pos = int(np.argmax(gain))
            if gain[pos] > best_gain:
                best_gain = float(gain[pos])
                threshold = 0.5 * (xs_sorted[pos] + xs_sorted[pos + 1])
                best = (f, float(threshold))
        if best is None:
            return leaf(idx)
        f, threshold = best
        go_left = X[idx, f] <= threshold
        node = TreeNode(feature=f, threshold=threshold)
        node.left = build(idx[go_left], depth + 1)
        node.right = build(idx[~go_left], depth + 1)
        return node

    return build(np.arange(X.shape[0]), 0)


def _tree_apply(node: TreeNode, X: np.ndarray) -> np.ndarray:
    out = np.empty(X.shape[0], dtype=np.float64)
    stack = [(node, np.arange(X.shape[0]))]
    while stack:
        nd, idx = stack.pop()
        if idx.size == 0:
            continue
        if nd.is_leaf:
            out[idx] = nd.value
        else:
            go_left = X[idx, nd.feature] <= nd.threshold
            stack.append((nd.left, idx[go_left]))
            stack.append((nd.right, idx[~go_left]))
    return out


def _tree_apply_row(node: TreeNode, x: np.ndarray) -> float:
    while not node.is_leaf:
        node = node.left if x[node.feature] <= node.threshold else node.right
    return node.value


def gbdt_train(features: np.ndarray, labels: np.ndarray, config: GbdtConfig = GbdtConfig()) -> TreeEnsemble:
    """Boosted trees for binary labels under logistic loss.

    Starts from the prior log-odds; each round fits a squared-error regression
    tree to the residuals y - p with Newton leaf values sum(r) / sum(p(1-p)),
    applied at the configured learning rate.
    """
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64).ravel()
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("features must be a nonempty 2-D array")
    if X.shape[0] != y.size:
        raise ValueError("features and labels disagree on the number of rows")
    if not np.all(np.isfinite(X)):
        raise ValueError("features must be finite")
    p_bar = float(np.clip(y.mean(), 1e-6, 1.0 - 1e-6))
    prior = math.log(p_bar / (1.0 - p_bar))
    if np.all(y == y[0]):
        return TreeEnsemble(prior_logit=prior, trees=[], learning_rate=config.learning_rate)
    logits = np.full(y.size, prior)
    trees: list[TreeNode] = []
    for _ in range(config.rounds):
        p = _sigmoid(logits)
        residual = y - p
        hess = np.maximum(p * (1.0 - p), 0.0)
        tree = _fit_tree(X, residual, hess, config.max_depth, config.min_leaf)
        trees.append(tree)
        logits = logits + config.learning_rate * _tree_apply(tree, X)
    return TreeEnsemble(prior_logit=prior, trees=trees, learning_rate=config.learning_rate)


def gbdt_predict(ensemble: TreeEnsemble, features: np.ndarray) -> float:
    """Correctness probability for one feature row, clamped to [1e-6, 1 - 1e-6]."""
    x = np.asarray(features, dtype=np.float64)
    score = ensemble.prior_logit
    for tree in ensemble.trees:
        score += ensemble.learning_rate * _tree_apply_row(tree, x)
    p = 1.0 / (1.0 + math.exp(-score)) if score >= 0 else math.exp(score) / (1.0 + math.exp(score))
    return float(np.clip(p, 1e-6, 1.0 - 1e-6))


def gbdt_predict_batch(ensemble: TreeEnsemble, features: np.ndarray) -> np.ndarray:
    X = np.asarray(features, dtype=np.float64)
    score = np.full(X.shape[0], ensemble.prior_logit)
    for tree in ensemble.trees:
        score += ensemble.learning_rate * _tree_apply(tree, X)
    return np.clip(_sigmoid(score), 1e-6, 1.0 - 1e-6)


# ---------------------------------------------------------------------------
# Parameter vector layout and graph binding (used by gradient fitting)


@dataclass(slots=True)
class BoundParams:
    """Method parameters bound into a graph as parameter nodes.

    ``multipliers`` returns node ids of the retriever / reader logit
    multipliers for one example (shared nodes for temperature and Platt
    methods, a per-example subnetwork for the MLP).
    """

    method: Method
    graph: Graph
    node_ids: list[int]
    hidden: int = 0
    feature_dim: int = 0
    inv_temp_scale: float = 1.0
    _shared: tuple[int, int] | None = None

    def multipliers(self, features: np.ndarray | None = None) -> tuple[int, int]:
        g = self.graph
        if self.method in (Method.TEMP_SCALING, Method.PLATT):
            return self._shared
        if features is None:
            raise ValueError("temp_predictor binding needs example features")
        # two-layer forward pass, tanh composed as 2*sigmoid(2x) - 1
        H, F = self.hidden, self.feature_dim
        ids = self.node_ids
        feats = [float(v) for v in features]
        two = g.iconst(2.0)
        minus_one = g.iconst(-1.0)
        hidden_ids = []
        for h in range(H):
            acc = ids[H * F + h]  # bias b1[h]
            row = h * F
            for f in range(F):
                if feats[f] != 0.0:
                    acc = g.iadd(acc, g.imul(ids[row + f], g.iconst(feats[f])))
            sig = g.ilogistic(g.imul(acc, two))
            hidden_ids.append(g.iadd(g.imul(sig, two), minus_one))
        off = H * F + H
        heads = []
        for o in range(2):
            acc = ids[off + 2 * H + o]  # bias b2[o]
            for h in range(H):
                acc = g.iadd(acc, g.imul(ids[off + o * H + h], hidden_ids[h]))
            u = g.ilogistic(acc)
            if self.inv_temp_scale != 1.0:
                u = g.imul(u, g.iconst(self.inv_temp_scale))
            heads.append(u)
        return heads[0], heads[1]


def init_vector(
    method: Method,
    rng: RngState | None = None,
    feature_dim: int = 0,
    hidden: int = 16,
) -> np.ndarray:
    """Initial flat parameter vector for a gradient-fitted method."""
    if method == Method.TEMP_SCALING:
        return np.zeros(2)  # log-temperatures
    if method == Method.PLATT:
        return np.array([1.0, 0.0, 1.0, 0.0])
    if method == Method.TEMP_PREDICTOR:
        if rng is None:
            raise ValueError("temp_predictor initialization needs an rng")
        n_w = hidden * feature_dim + hidden + 2 * hidden + 2
        vec = rng.normal(0.0, 0.3 / math.sqrt(max(feature_dim, 1)), n_w)
        # zero the biases so the initial temperatures sit at 1/sigmoid(0) = 2
        vec[hidden * feature_dim : hidden * feature_dim + hidden] = 0.0
        vec[-2:] = 0.0
        return np.asarray(vec, dtype=np.float64)
    raise ValueError(f"method {method} is not gradient-fitted")


def bind_vector(
    graph: Graph,
    method: Method,
    vector: np.ndarray,
    feature_dim: int = 0,
    hidden: int = 16,
    inv_temp_scale: float = 1.0,
) -> BoundParams:
    """Create parameter nodes for ``vector`` and precompute shared multipliers."""
    ids = [graph.iparam(float(v)) for v in vector]
    bound = BoundParams(
        method=method,
        graph=graph,
        node_ids=ids,
        hidden=hidden,
        feature_dim=feature_dim,
        inv_temp_scale=inv_temp_scale,
    )
    if method == Method.TEMP_SCALING:
        bound._shared = (
            graph.iexp(graph.ineg(ids[0])),
            graph.iexp(graph.ineg(ids[1])),
        )
    elif method == Method.PLATT:
        # shifts are softmax-invariant; they stay as (unreached) parameter
        # nodes and correctly receive zero gradient
        bound._shared = (ids[0], ids[2])
    return bound


def vector_to_params(
    method: Method,
    vector: np.ndarray,
    feature_dim: int = 0,
    hidden: int = 16,
    inv_temp_scale: float = 1.0,
):
    vector = np.asarray(vector, dtype=np.float64)
    if method == Method.TEMP_SCALING:
        return TemperatureParams(
            retriever_temp=float(np.exp(vector[0])), reader_temp=float(np.exp(vector[1]))
        )
    if method == Method.PLATT:
        return PlattParams(*[float(v) for v in vector])
    if method == Method.TEMP_PREDICTOR:
        H, F = hidden, feature_dim
        w1 = vector[: H * F].reshape(H, F)
        b1 = vector[H * F : H * F + H]
        w2 = vector[H * F + H : H * F + H + 2 * H].reshape(2, H)
        b2 = vector[-2:]
        return MlpParams(w1=w1, b1=b1, w2=w2, b2=b2, inv_temp_scale=inv_temp_scale)
    raise ValueError(f"method {method} is not gradient-fitted")


def params_to_vector(params) -> np.ndarray:
    if isinstance(params, TemperatureParams):
        return np.log([params.retriever_temp, params.reader_temp])
    if isinstance(params, PlattParams):
        return np.array(
            [params.retriever_scale, params.retriever_shift, params.reader_scale, params.reader_shift]
        )
    if isinstance(params, MlpParams):
        return np.concatenate(
            [params.w1.ravel(), params.b1, params.w2.ravel(), params.b2]
        )
    raise ValueError(f"{type(params).__name__} has no vector form")


# ---------------------------------------------------------------------------
# Fitting


@dataclass(frozen=True, slots=True)
class FitConfig:
    """Gradient-descent settings: plain full-batch GD on the mean NLL.

    ``max_examples`` caps the number of calibration examples used to build
    the per-epoch objective graph (a deterministic subsample); None uses all.
    """

    step_size: float = 0.05
    epochs: int = 200
    mc_samples: int = 1
    pool_limit: int = 100
    max_examples: int | None = None
    hidden: int = 16
    inv_temp_scale: float = 1.0


def fit_gradient_calibrator(
    dataset: Dataset,
    scope: Scope | str,
    method: Method | str,
    config: FitConfig = FitConfig(),
    schedule: AnnealSchedule | None = None,
    rng: RngState | None = None,
) -> CalibratorModel:
    """Fit temperature / Platt / MLP parameters by gradient descent on the scope NLL.

    The joint scope draws softened top-k subsets at the annealed temperature
    (noise resampled every step); reader-only and individual scopes are
    deterministic. Raises FitDivergedError if the objective goes non-finite,
    and falls back to the initial parameters if they score better on the
    calibration NLL than the final ones.
    """
    from . import objectives  # late import: objectives builds on this module

    scope = Scope(scope)
    method = Method(method)
    if method == Method.FORECASTER:
        raise ValueError("use fit_forecaster for the forecaster method")
    if not dataset.examples:
        raise ValueError("dataset is empty")
    if rng is None:
        rng = RngState(0)
    if schedule is None:
        schedule = AnnealSchedule(t_start=2.0, t_end=0.2, total_steps=config.epochs)

    views = objectives.make_views(dataset.examples, pool_limit=config.pool_limit)
    usable = [v for v in views if v.has_correct]
    if scope == Scope.INDIVIDUAL:
        usable = [v for v in views if v.relevant_docs]
        if not usable:
            raise ValueError("individual scope requires relevance labels")
    if not usable:
        raise ValueError("no example has a correct answer candidate to fit on")
    if config.max_examples is not None and len(usable) > config.max_examples:
        order = rng.stream("subsample").permutation(len(usable))
        usable = [usable[i] for i in order[: config.max_examples]]

    feature_config = None
    feature_dim = 0
    if method == Method.TEMP_PREDICTOR:
        feature_config = objectives.standardized_feature_config(
            dataset, interest_size=3
        )
        feature_dim = feature_config.dim
        for v in usable:
            v.attach_features(feature_config)

    vec = init_vector(method, rng.stream("init"), feature_dim, config.hidden)
    mc_rng = rng.stream("mc")

    def loss_and_grad(vector: np.ndarray, epoch: int) -> tuple[float, np.ndarray]:
        graph = Graph()
        bound = bind_vector(
            graph, method, vector, feature_dim, config.hidden, config.inv_temp_scale
        )
        if scope == Scope.JOINT:
            temp = objectives.anneal_at(schedule, epoch)
            root = objectives.joint_nll_raw(
                graph, bound, usable, temp, config.mc_samples, mc_rng.spawn(epoch)
            )
        elif scope == Scope.READER_ONLY:
            root = objectives.reader_only_nll_raw(graph, bound, usable)
        else:
            root = objectives.individual_nll_raw(graph, bound, usable)
        value = graph.value(root)
        grads = graph.backward(root)
        grad = np.array([grads[i] for i in bound.node_ids])
        return value, grad

    n = len(usable)
    for epoch in range(config.epochs):
        value, grad = loss_and_grad(vec, epoch)
        if not math.isfinite(value) or not np.all(np.isfinite(grad)):
            raise FitDivergedError(epoch, f"objective value {value!r}")
        vec = vec - config.step_size * (grad / n)

    params = vector_to_params(method, vec, feature_dim, config.hidden, config.inv_temp_scale)
    model = CalibratorModel(scope=scope, method=method, params=params, feature_config=feature_config)

    init_params = vector_to_params(
        method,
        init_vector(method, rng.stream("init"), feature_dim, config.hidden),
        feature_dim,
        config.hidden,
        config.inv_temp_scale,
    )
    init_model = CalibratorModel(
        scope=scope, method=method, params=init_params, feature_config=feature_config
    )
    if objectives.nll(dataset, model) > objectives.nll(dataset, init_model):
        warnings.warn("fitted parameters scored worse than initialization; reverting")
        return init_model
    return model


def forecaster_rows(dataset: Dataset, interest_size: int = 3) -> tuple[np.ndarray, np.ndarray, int]:
    """Training rows for the forecaster: one per interest-set member.

    Returns (features, labels, k); the label says whether the member's answer
    key is a correct answer for its query.
    """
    if not dataset.examples:
        raise ValueError("dataset is empty")
    ks = {ex.k for ex in dataset.examples}
    if len(ks) != 1:
        raise ValueError(f"forecaster needs a uniform k across examples, got {sorted(ks)}")
    k = ks.pop()
    rows = []
    labels = []
    for ex in dataset.examples:
        for entry in build_interest_set(ex, size=interest_size):
            rows.append(featurize(ex, entry.answer_key, k=k, rank=entry.rank))
            labels.append(entry.correct)
    return np.array(rows), np.array(labels, dtype=np.float64), k


def fit_forecaster(
    dataset: Dataset,
    interest_size: int = 3,
    config: GbdtConfig = GbdtConfig(),
    scope: Scope | str = Scope.JOINT,
) -> CalibratorModel:
    """Train the gradient-boosted forecaster on interest-set rows."""
    X, y, k = forecaster_rows(dataset, interest_size)
    ensemble = gbdt_train(X, y, config)
    return CalibratorModel(
        scope=Scope(scope),
        method=Method.FORECASTER,
        params=ensemble,
        feature_config=FeatureConfig(k=k, interest_size=interest_size),
    )


# ---------------------------------------------------------------------------
# Persistence


def _tree_to_obj(node: TreeNode) -> dict:
    if node.is_leaf:
        return {"value": node.value}
    return {
        "feature": node.feature,
        "threshold": node.threshold,
        "left": _tree_to_obj(node.left),
        "right": _tree_to_obj(node.right),
    }


def _tree_from_obj(obj: dict) -> TreeNode:
    if "value" in obj:
        return TreeNode(value=float(obj["value"]))
    return TreeNode(
        feature=int(obj["feature"]),
        threshold=float(obj["threshold"]),
        left=_tree_from_obj(obj["left"]),
        right=_tree_from_obj(obj["right"]),
    )


def _params_to_obj(params) -> dict:
    if isinstance(params, TemperatureParams):
        return {"retriever_temp": params.retriever_temp, "reader_temp": params.reader_temp}
    if isinstance(params, PlattParams):
        return {
            "retriever_scale": params.retriever_scale,
            "retriever_shift": params.retriever_shift,
            "reader_scale": params.reader_scale,
            "reader_shift": params.reader_shift,
        }
    if isinstance(params, MlpParams):
        return {
            "w1": params.w1.tolist(),
            "b1": params.b1.tolist(),
            "w2": params.w2.tolist(),
            "b2": params.b2.tolist(),
            "activation": params.activation,
            "inv_temp_scale": params.inv_temp_scale,
        }
    if isinstance(params, TreeEnsemble):
        return {
            "prior_logit": params.prior_logit,
            "learning_rate": params.learning_rate,
            "trees": [_tree_to_obj(t) for t in params.trees],
        }
    raise ValueError(f"cannot serialize {type(params).__name__}")


def _params_from_obj(method: Method, obj: dict):
    if method == Method.TEMP_SCALING:
        return TemperatureParams(**obj)
    if method == Method.PLATT:
        return PlattParams(**obj)
    if method == Method.TEMP_PREDICTOR:
        return MlpParams(
            w1=np.array(obj["w1"], dtype=np.float64),
            b1=np.array(obj["b1"], dtype=np.float64),
            w2=np.array(obj["w2"], dtype=np.float64),
            b2=np.array(obj["b2"], dtype=np.float64),
            activation=obj.get("activation", "tanh"),
            inv_temp_scale=obj.get("inv_temp_scale", 1.0),
        )
    return TreeEnsemble(
        prior_logit=float(obj["prior_logit"]),
        learning_rate=float(obj["learning_rate"]),
        trees=[_tree_from_obj(t) for t in obj["trees"]],
    )


def save_model(model: CalibratorModel, path) -> None:
    """Persist a model as a single self-describing JSON document."""
    doc = {
        "scope": model.scope.value,
        "method": model.method.value,
        "params": _params_to_obj(model.params),
    }
    if model.feature_config is not None:
        fc = model.feature_config
        doc["feature_config"] = {
            "k": fc.k,
            "interest_size": fc.interest_size,
            "mean": None if fc.mean is None else fc.mean.tolist(),
            "std": None if fc.std is None else fc.std.tolist(),
        }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)
        fh.write("\n")


def load_model(path) -> CalibratorModel:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    method = Method(doc["method"])
    feature_config = None
    if "feature_config" in doc:
        fc = doc["feature_config"]
        feature_config = FeatureConfig(
            k=int(fc["k"]),
            interest_size=int(fc["interest_size"]),
            mean=None if fc["mean"] is None else np.array(fc["mean"], dtype=np.float64),
            std=None if fc["std"] is None else np.array(fc["std"], dtype=np.float64),
        )
    return CalibratorModel(
        scope=Scope(doc["scope"]),
        method=method,
        params=_params_from_obj(method, doc["params"]),
        feature_config=feature_config,
    )
