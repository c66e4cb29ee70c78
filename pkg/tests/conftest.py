import numpy as np
import pytest

from rrcal.core import (
    AnswerCandidate,
    CalibrationExample,
    Dataset,
    DocumentCandidate,
    Split,
)


def make_example(query_id, scores, logits, correct, k=None, relevant=None, keys=None):
    """Assemble one example from nested lists.

    scores: per-doc retriever scores; logits/correct: per-doc per-answer;
    keys: optional per-doc per-answer key names (defaults to unique keys).
    """
    pool = []
    for i, (s, zs, cs) in enumerate(zip(scores, logits, correct)):
        answers = tuple(
            AnswerCandidate(
                key=keys[i][j] if keys else f"a{i}_{j}",
                reader_logit=float(z),
                correct=bool(c),
            )
            for j, (z, c) in enumerate(zip(zs, cs))
        )
        pool.append(
            DocumentCandidate(
                doc_id=f"d{i}",
                retriever_score=float(s),
                relevant=None if relevant is None else relevant[i],
                answers=answers,
            )
        )
    return CalibrationExample(
        query_id=query_id, k=k if k is not None else len(pool), pool=tuple(pool)
    )


def random_example(rng: np.random.Generator, query_id="q0", n_docs=4, n_answers=3, k=2):
    """Random example with one correct answer in a random document."""
    ci, cj = int(rng.integers(0, n_docs)), int(rng.integers(0, n_answers))
    scores = rng.normal(size=n_docs).tolist()
    logits = rng.normal(size=(n_docs, n_answers)).tolist()
    correct = [[(i == ci and j == cj) for j in range(n_answers)] for i in range(n_docs)]
    relevant = [i == ci for i in range(n_docs)]
    return make_example(query_id, scores, logits, correct, k=k, relevant=relevant)


@pytest.fixture
def small_dataset():
    rng = np.random.default_rng(123)
    examples = [random_example(rng, query_id=f"q{i}") for i in range(8)]
    return Dataset(examples=examples, split=Split.CALIB)
