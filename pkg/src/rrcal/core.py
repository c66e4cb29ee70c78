"""Shared data model: score dumps, datasets, splits, and seeded randomness.

A calibration example bundles one query's retrieved document pool with
per-document answer candidates, raw logits, and correctness labels as
dumped by an upstream retriever-reader system. Examples are immutable
after construction and safe for concurrent reads; random state is
single-owner and must be forked per worker via ``stream``/``spawn``.
"""

from __future__ import annotations

import json
import math
import zlib
from dataclasses import dataclass
from enum import Enum

import numpy as np

__all__ = [
    "AnswerCandidate",
    "CalibrationExample",
    "Dataset",
    "DocumentCandidate",
    "InterestCandidate",
    "ParseError",
    "Prediction",
    "RngState",
    "Split",
    "build_interest_set",
    "load_dataset",
    "occurrence_confidences",
    "save_dataset",
    "softmax",
    "uncalibrated_confidence",
]


class Split(str, Enum):
    CALIB = "calib"
    VALID = "valid"
    TEST = "test"


class ParseError(ValueError):
    """Malformed input record; carries the 1-based line number."""

    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


@dataclass(frozen=True, slots=True)
class AnswerCandidate:
    """One answer span (or veracity label) scored by the reader for one document."""

    key: str
    reader_logit: float
    correct: bool

    def __post_init__(self):
        if not self.key:
            raise ValueError("answer key must be nonempty")
        if not math.isfinite(self.reader_logit):
            raise ValueError(f"reader_logit must be finite for key {self.key!r}")


@dataclass(frozen=True, slots=True)
class DocumentCandidate:
    """One retrieved document with its retriever score and answer candidates.

    ``relevant`` is the distant-supervision label (document contains the gold
    answer string / evidence); ``None`` when the dump carries no such labels.
    """

    doc_id: str
    retriever_score: float
    relevant: bool | None
    answers: tuple[AnswerCandidate, ...]

    def __post_init__(self):
        if not math.isfinite(self.retriever_score):
            raise ValueError(f"retriever_score must be finite for doc {self.doc_id!r}")
        if not self.answers:
            raise ValueError(f"document {self.doc_id!r} has no answer candidates")
        if not isinstance(self.answers, tuple):
            object.__setattr__(self, "answers", tuple(self.answers))


@dataclass(frozen=True, slots=True)
class CalibrationExample:
    """One query: its candidate document pool and the reader budget ``k``.

    The pool is kept sorted by retriever score, descending (stable for ties),
    and document ids must be unique. The pool is also the marginalization
    universe: confidences never reach outside it.
    """

    query_id: str
    k: int
    pool: tuple[DocumentCandidate, ...]

    def __post_init__(self):
        if not isinstance(self.pool, tuple):
            object.__setattr__(self, "pool", tuple(self.pool))
        if not self.pool:
            raise ValueError(f"example {self.query_id!r} has an empty pool")
        if not 1 <= self.k <= len(self.pool):
            raise ValueError(
                f"example {self.query_id!r}: k exceeds pool size "
                f"(k={self.k}, pool={len(self.pool)})"
            )
        ids = {d.doc_id for d in self.pool}
        if len(ids) != len(self.pool):
            raise ValueError(f"example {self.query_id!r} has duplicate doc_ids")
        ordered = tuple(
            sorted(self.pool, key=lambda d: -d.retriever_score)
        )
        object.__setattr__(self, "pool", ordered)


@dataclass(slots=True)
class Dataset:
    """A list of examples tagged with its split role (calib / valid / test)."""

    examples: list[CalibrationExample]
    split: Split

    def __post_init__(self):
        self.split = Split(self.split)
        seen: set[str] = set()
        for ex in self.examples:
            if ex.query_id in seen:
                raise ValueError(f"duplicate query_id {ex.query_id!r} in split")
            seen.add(ex.query_id)

    def __len__(self) -> int:
        return len(self.examples)


@dataclass(frozen=True, slots=True)
class Prediction:
    """An answered query: predicted key, model confidence, and whether it was right."""

    query_id: str
    answer_key: str
    confidence: float
    correct: bool

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(
                f"confidence must be in [0, 1], got {self.confidence} "
                f"for {self.query_id!r}"
            )


class RngState:
    """Deterministic random source: identical seed + call sequence, identical draws.

    Substreams derived with :meth:`stream` or :meth:`spawn` are statistically
    independent of the parent and of each other, and do not depend on how many
    draws the parent has served, so workers can safely own their own streams.
    """

    __slots__ = ("seed", "path", "draw_count", "_gen")

    def __init__(self, seed: int, path: tuple[int, ...] = ()):
        if not 0 <= int(seed) < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        self.seed = int(seed)
        self.path = tuple(int(p) for p in path)
        self.draw_count = 0
        self._gen = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence(self.seed, spawn_key=self.path))
        )

    def stream(self, name: str) -> "RngState":
        """Derive an independent named substream (e.g. "simulate", "fit", "mc")."""
        return RngState(self.seed, self.path + (zlib.crc32(name.encode("utf-8")),))

    def spawn(self, index: int) -> "RngState":
        """Derive the ``index``-th independent child stream."""
        if index < 0:
            raise ValueError("spawn index must be non-negative")
        return RngState(self.seed, self.path + (index,))

    def random(self, size=None):
        """Uniform draws on [0, 1)."""
        self.draw_count += 1
        return self._gen.random(size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        self.draw_count += 1
        return self._gen.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        self.draw_count += 1
        return self._gen.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        self.draw_count += 1
        return self._gen.permutation(n)

    def __repr__(self) -> str:
        return f"RngState(seed={self.seed}, path={self.path}, draws={self.draw_count})"


def softmax(x: np.ndarray) -> np.ndarray:
    """Max-stabilized softmax of a 1-D array."""
    x = np.asarray(x, dtype=np.float64)
    z = np.exp(x - np.max(x))
    return z / z.sum()


# ---------------------------------------------------------------------------
# Ingestion

_EXAMPLE_FIELDS = {"query_id", "k", "pool"}
_DOC_FIELDS = {"doc_id", "retriever_score", "relevant", "answers"}
_ANSWER_FIELDS = {"key", "reader_logit", "correct"}


def _check_fields(record: dict, allowed: set[str], required: set[str], where: str, line_no: int):
    unknown = set(record) - allowed
    if unknown:
        raise ParseError(line_no, f"unknown field(s) {sorted(unknown)} in {where}")
    missing = required - set(record)
    if missing:
        raise ParseError(line_no, f"missing field(s) {sorted(missing)} in {where}")


def _parse_example(record: dict, line_no: int) -> CalibrationExample:
    _check_fields(record, _EXAMPLE_FIELDS, _EXAMPLE_FIELDS, "example", line_no)
    docs = []
    for doc in record["pool"]:
        _check_fields(doc, _DOC_FIELDS, _DOC_FIELDS - {"relevant"}, "document", line_no)
        relevant = doc.get("relevant")
        if relevant is not None and not isinstance(relevant, bool):
            raise ParseError(line_no, f"relevant must be a boolean in doc {doc['doc_id']!r}")
        answers = []
        for ans in doc["answers"]:
            _check_fields(ans, _ANSWER_FIELDS, _ANSWER_FIELDS, "answer", line_no)
            if not isinstance(ans["correct"], bool):
                raise ParseError(line_no, f"correct must be a boolean for key {ans['key']!r}")
            answers.append(
                AnswerCandidate(
                    key=str(ans["key"]).lower(),
                    reader_logit=float(ans["reader_logit"]),
                    correct=ans["correct"],
                )
            )
        docs.append(
            DocumentCandidate(
                doc_id=str(doc["doc_id"]),
                retriever_score=float(doc["retriever_score"]),
                relevant=relevant,
                answers=tuple(answers),
            )
        )
    k = record["k"]
    if not isinstance(k, int) or isinstance(k, bool):
        raise ParseError(line_no, "k must be an integer")
    if k > len(docs):
        raise ParseError(line_no, f"k exceeds pool size (k={k}, pool={len(docs)})")
    try:
        return CalibrationExample(query_id=str(record["query_id"]), k=k, pool=tuple(docs))
    except ValueError as exc:
        raise ParseError(line_no, str(exc)) from exc


def load_dataset(path, split: Split | str) -> Dataset:
    """Load a line-delimited dump (one JSON example per line) into a Dataset.

    Pools come out sorted by retriever score descending; answer keys are
    lowercased (answer identity is case-insensitive exact match). Rejects
    unknown fields, duplicate query ids, and k larger than the pool.
    """
    examples: list[CalibrationExample] = []
    seen: set[str] = set()
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(line_no, f"invalid JSON: {exc.msg}") from exc
            if not isinstance(record, dict):
                raise ParseError(line_no, "example record must be an object")
            example = _parse_example(record, line_no)
            if example.query_id in seen:
                raise ParseError(line_no, f"duplicate query_id {example.query_id!r}")
            seen.add(example.query_id)
            examples.append(example)
    return Dataset(examples=examples, split=Split(split))


def save_dataset(dataset: Dataset, path) -> None:
    """Write a Dataset in the same line-delimited format ``load_dataset`` reads."""
    with open(path, "w", encoding="utf-8") as fh:
        for ex in dataset.examples:
            record = {
                "query_id": ex.query_id,
                "k": ex.k,
                "pool": [
                    {
                        "doc_id": d.doc_id,
                        "retriever_score": d.retriever_score,
                        **({} if d.relevant is None else {"relevant": d.relevant}),
                        "answers": [
                            {"key": a.key, "reader_logit": a.reader_logit, "correct": a.correct}
                            for a in d.answers
                        ],
                    }
                    for d in ex.pool
                ],
            }
            fh.write(json.dumps(record) + "\n")


# ---------------------------------------------------------------------------
# Interest sets

@dataclass(frozen=True, slots=True)
class InterestCandidate:
    """One interest-set entry: the candidate plus the features of its best occurrence."""

    answer_key: str
    confidence: float
    rank: int
    doc_id: str
    reader_logit: float
    correct: bool


def occurrence_confidences(example: CalibrationExample) -> list[tuple[float, str, int, int]]:
    """Identity-calibrated confidence of every (document, answer) occurrence.

    Returns (confidence, key, doc_index, answer_index) tuples where confidence
    is retriever posterior times within-document reader confidence, both at
    temperature 1 over the full pool.
    """
    posterior = softmax(np.array([d.retriever_score for d in example.pool]))
    out = []
    for i, doc in enumerate(example.pool):
        conf = posterior[i] * softmax(np.array([a.reader_logit for a in doc.answers]))
        for j, ans in enumerate(doc.answers):
            out.append((float(conf[j]), ans.key, i, j))
    return out


def uncalibrated_confidence(example: CalibrationExample) -> dict[str, float]:
    """Identity-calibrated marginal confidence per answer key (summed over docs)."""
    conf: dict[str, float] = {}
    for c, key, _, _ in occurrence_confidences(example):
        conf[key] = conf.get(key, 0.0) + c
    return conf


def build_interest_set(
    example: CalibrationExample,
    model=None,
    size: int = 3,
    mode: str = "marginal",
) -> list[InterestCandidate]:
    """Top-``size`` answer candidates by identity-calibrated system confidence.

    Candidates are deduplicated by answer key; the highest-confidence
    occurrence wins and supplies the entry's features. Ranking always uses
    identity calibration so that interest sets agree between fitting and
    prediction time regardless of ``model`` (accepted for interface parity).

    ``mode="per_doc_argmax"`` restricts candidates to each document's
    top-scoring answer before ranking (an alternative interest-set rule).
    """
    del model
    if size < 1:
        raise ValueError("size must be >= 1")
    occs = occurrence_confidences(example)
    if mode == "per_doc_argmax":
        best_in_doc: dict[int, tuple[float, str, int, int]] = {}
        for occ in occs:
            cur = best_in_doc.get(occ[2])
            if cur is None or occ[0] > cur[0]:
                best_in_doc[occ[2]] = occ
        occs = list(best_in_doc.values())
    elif mode != "marginal":
        raise ValueError(f"unknown interest-set mode {mode!r}")

    best: dict[str, tuple[float, str, int, int]] = {}
    for occ in occs:
        cur = best.get(occ[1])
        if cur is None or occ[0] > cur[0]:
            best[occ[1]] = occ
    correct_keys = {
        a.key for d in example.pool for a in d.answers if a.correct
    }
    ranked = sorted(best.values(), key=lambda o: (-o[0], o[1]))
    out = []
    for rank, (conf, key, di, ai) in enumerate(ranked[:size], start=1):
        doc = example.pool[di]
        ans = doc.answers[ai]
        out.append(
            InterestCandidate(
                answer_key=key,
                confidence=conf,
                rank=rank,
                doc_id=doc.doc_id,
                reader_logit=ans.reader_logit,
                correct=key in correct_keys,
            )
        )
    return out
