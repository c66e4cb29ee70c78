"""Synthetic retriever-reader score generator with exact ground truth.

Generative story per answerable query: a source document is drawn uniformly
from the pool and its relevance evidence is Gaussian with unit noise and a
mean separation of ``retriever_sharpness``; dumping the sufficient statistic
as the retriever logit makes the true source posterior exactly the softmax
of those logits. Every document analogously hides a latent gold answer among
its candidates with ``reader_sharpness`` separation, so the true probability
that a candidate key is correct is the posterior-weighted mixture of
within-document softmaxes, computable in closed form. Reported logits are
the true logits times the distortion factors, which changes calibration but
never any argmax; with distortions of 1 the dumped confidences are perfectly
calibrated by construction.

Unanswerable queries keep a full pool whose candidates are all wrong (the
gold answer lies outside the pool); their retrieval scores can optionally be
flattened to mimic retrieval failure.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .core import (
    AnswerCandidate,
    CalibrationExample,
    Dataset,
    DocumentCandidate,
    Prediction,
    RngState,
    Split,
)

__all__ = [
    "GroundTruth",
    "SimulatorConfig",
    "generate",
    "load_ground_truth",
    "mix_ood",
    "save_ground_truth",
    "true_confidence",
]


@dataclass(frozen=True, slots=True)
class SimulatorConfig:
    """Knobs of the synthetic pipeline.

    Distortions multiply the reported logits (values > 1 make the stage
    overconfident, < 1 underconfident); ``offtopic_boost`` additionally
    scales reported reader logits on irrelevant documents, and
    ``unanswerable_flatness`` scales retrieval scores on unanswerable
    queries. ``vocab_size=None`` gives every document its own answer keys;
    a small vocabulary makes keys recur across documents.
    """

    n_examples: int = 1000
    pool_size: int = 10
    k: int = 5
    answers_per_doc: int = 4
    retriever_sharpness: float = 2.0
    reader_sharpness: float = 2.0
    retriever_distortion: float = 1.0
    reader_distortion: float = 1.0
    p_unanswerable: float = 0.0
    seed: int = 0
    vocab_size: int | None = None
    offtopic_boost: float = 1.0
    unanswerable_flatness: float = 1.0
    query_prefix: str = "q"

    def __post_init__(self):
        if self.n_examples < 1 or self.pool_size < 1 or self.answers_per_doc < 1:
            raise ValueError("counts must be positive")
        if not 1 <= self.k <= self.pool_size:
            raise ValueError("need 1 <= k <= pool_size")
        for name in (
            "retriever_sharpness",
            "reader_sharpness",
            "retriever_distortion",
            "reader_distortion",
            "offtopic_boost",
            "unanswerable_flatness",
        ):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 <= self.p_unanswerable <= 1.0:
            raise ValueError("p_unanswerable must be in [0, 1]")
        if self.vocab_size is not None and self.vocab_size < self.answers_per_doc:
            raise ValueError("vocab_size must be >= answers_per_doc")


@dataclass(slots=True)
class GroundTruth:
    """Exact per-candidate correctness probabilities, keyed by query and answer key."""

    probs: dict[str, dict[str, float]]
    answerable: dict[str, bool]


def true_confidence(truth: GroundTruth, prediction: Prediction) -> float:
    """The exact generative probability that this prediction is correct."""
    try:
        per_key = truth.probs[prediction.query_id]
    except KeyError:
        raise ValueError(f"unknown query {prediction.query_id!r}") from None
    if prediction.answer_key not in per_key:
        raise ValueError(
            f"unknown candidate {prediction.answer_key!r} for query {prediction.query_id!r}"
        )
    return per_key[prediction.answer_key]


def _row_softmax(x: np.ndarray) -> np.ndarray:
    z = np.exp(x - x.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def generate(
    config: SimulatorConfig,
    rng: RngState | None = None,
    split: Split | str = Split.CALIB,
) -> tuple[Dataset, GroundTruth]:
    """Draw a dataset and its exact ground-truth table."""
    if rng is None:
        rng = RngState(config.seed).stream("simulate")
    n, M, A = config.n_examples, config.pool_size, config.answers_per_doc
    s_r, s_z = config.retriever_sharpness, config.reader_sharpness

    unanswerable = rng.random(n) < config.p_unanswerable
    source = rng.integers(0, M, n)
    rho = s_r * rng.normal(size=(n, M))
    rows = np.flatnonzero(~unanswerable)
    rho[rows, source[rows]] += s_r * s_r
    rho[unanswerable] *= config.unanswerable_flatness

    gold_col = rng.integers(0, A, (n, M))
    zeta = s_z * rng.normal(size=(n, M, A))
    ii, dd = np.meshgrid(np.arange(n), np.arange(M), indexing="ij")
    zeta[ii, dd, gold_col] += s_z * s_z

    posterior = _row_softmax(rho)
    reader_p = _row_softmax(zeta)

    if config.vocab_size is None:
        key_idx = np.broadcast_to(np.arange(M * A).reshape(M, A), (n, M, A))
        n_keys = M * A
    else:
        V = config.vocab_size
        draws = rng.random((n, M, V))
        key_idx = np.argsort(draws, axis=2, kind="stable")[:, :, :A]
        n_keys = V
    key_names = [f"ans{i:03d}" for i in range(n_keys)]

    gold_key = key_idx[np.arange(n), source, gold_col[np.arange(n), source]]
    correct = key_idx == gold_key[:, None, None]
    correct[unanswerable] = False
    relevant = correct.any(axis=2)

    rep_rho = config.retriever_distortion * rho
    rep_zeta = config.reader_distortion * zeta
    if config.offtopic_boost != 1.0:
        rep_zeta[~relevant] *= config.offtopic_boost

    weights = posterior[:, :, None] * reader_p

    examples = []
    probs: dict[str, dict[str, float]] = {}
    answerable_map: dict[str, bool] = {}
    width = len(str(max(n - 1, 1)))
    for i in range(n):
        qid = f"{config.query_prefix}{i:0{width}d}"
        docs = []
        for d in range(M):
            answers = tuple(
                AnswerCandidate(
                    key=key_names[key_idx[i, d, j]],
                    reader_logit=float(rep_zeta[i, d, j]),
                    correct=bool(correct[i, d, j]),
                )
                for j in range(A)
            )
            docs.append(
                DocumentCandidate(
                    doc_id=f"d{d}",
                    retriever_score=float(rep_rho[i, d]),
                    relevant=bool(relevant[i, d]),
                    answers=answers,
                )
            )
        examples.append(CalibrationExample(query_id=qid, k=config.k, pool=tuple(docs)))

        if unanswerable[i]:
            per_key = {key_names[idx]: 0.0 for idx in np.unique(key_idx[i])}
        else:
            mass = np.bincount(
                key_idx[i].ravel(), weights=weights[i].ravel(), minlength=n_keys
            )
            per_key = {
                key_names[idx]: float(mass[idx]) for idx in np.unique(key_idx[i])
            }
        probs[qid] = per_key
        answerable_map[qid] = not bool(unanswerable[i])

    dataset = Dataset(examples=examples, split=Split(split))
    return dataset, GroundTruth(probs=probs, answerable=answerable_map)


def mix_ood(dataset_a: Dataset, dataset_b: Dataset, fraction: float, rng: RngState) -> Dataset:
    """Replace a random fraction of A's examples with examples from B.

    Query-id spaces must be disjoint; the result keeps A's size, order, and
    split label.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("fraction must be in [0, 1]")
    ids_a = {ex.query_id for ex in dataset_a.examples}
    ids_b = {ex.query_id for ex in dataset_b.examples}
    if ids_a & ids_b:
        raise ValueError("query_id spaces of the two datasets overlap")
    n_swap = int(fraction * len(dataset_a.examples))
    if n_swap > len(dataset_b.examples):
        raise ValueError(
            f"need {n_swap} replacement examples but B has {len(dataset_b.examples)}"
        )
    out = list(dataset_a.examples)
    positions = rng.permutation(len(out))[:n_swap]
    donors = rng.permutation(len(dataset_b.examples))[:n_swap]
    for pos, donor in zip(positions, donors):
        out[pos] = dataset_b.examples[donor]
    return Dataset(examples=out, split=dataset_a.split)


def save_ground_truth(truth: GroundTruth, path) -> None:
    """Sidecar table: one JSON record per query with its per-key probabilities."""
    with open(path, "w", encoding="utf-8") as fh:
        for qid in truth.probs:
            fh.write(
                json.dumps(
                    {
                        "query_id": qid,
                        "answerable": truth.answerable[qid],
                        "probs": truth.probs[qid],
                    }
                )
                + "\n"
            )


def load_ground_truth(path) -> GroundTruth:
    probs: dict[str, dict[str, float]] = {}
    answerable: dict[str, bool] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            probs[rec["query_id"]] = {k: float(v) for k, v in rec["probs"].items()}
            answerable[rec["query_id"]] = bool(rec["answerable"])
    return GroundTruth(probs=probs, answerable=answerable)
