"""Gumbel-noise top-k selection and its differentiable softened form.

Hard selection perturbs scores with Gumbel(0, 1) noise and takes the k
largest, which draws an ordered subset from the Plackett-Luce distribution
over exp(scores). The softened form replaces each successive argmax with a
temperature-scaled softmax and suppresses already-taken mass by adding
log(1 - d) to the running scores; summing the per-step softmaxes yields a
k-hot gate vector whose entries total exactly k. ``plackett_luce_prob``
gives the exact ordered-subset probability for verification.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import RngState
from .scalargrad import Graph, Scalar

__all__ = [
    "AnnealSchedule",
    "GateVector",
    "anneal",
    "gumbel_noise",
    "hard_topk",
    "plackett_luce_prob",
    "relaxed_topk",
    "relaxed_topk_expr",
    "sample_gumbel",
]

_GATE_FLOOR = 1e-20  # keeps log(1 - d) finite when a gate saturates


@dataclass(frozen=True, slots=True)
class GateVector:
    """Soft k-hot selection weights over a document pool.

    ``gates[i]`` sums the i-th entry of the k per-step softmax vectors, so
    the gates total exactly k; ``per_step`` keeps the individual softmaxes.
    """

    gates: np.ndarray
    per_step: np.ndarray
    relaxation_temperature: float

    def __post_init__(self):
        if self.relaxation_temperature <= 0:
            raise ValueError("relaxation temperature must be positive")

    @property
    def k(self) -> int:
        return self.per_step.shape[0]


@dataclass(frozen=True, slots=True)
class AnnealSchedule:
    """Linear temperature decay from t_start down to t_end over total_steps."""

    t_start: float
    t_end: float
    total_steps: int

    def __post_init__(self):
        if not (self.t_start >= self.t_end > 0):
            raise ValueError("need t_start >= t_end > 0")
        if self.total_steps < 1:
            raise ValueError("total_steps must be positive")


def anneal(schedule: AnnealSchedule, step: int) -> float:
    """Temperature at ``step``: linear interpolation between the endpoints."""
    if not 0 <= step <= schedule.total_steps:
        raise ValueError(f"step {step} outside [0, {schedule.total_steps}]")
    frac = step / schedule.total_steps
    return schedule.t_start + (schedule.t_end - schedule.t_start) * frac


def sample_gumbel(rng: RngState) -> float:
    """One Gumbel(0, 1) draw: -log(-log(U)) with U clamped inside (0, 1)."""
    u = float(np.clip(rng.random(), 1e-300, 1.0 - 1e-16))
    return -np.log(-np.log(u))


def gumbel_noise(rng: RngState, n: int) -> np.ndarray:
    """Vector of n independent Gumbel(0, 1) draws."""
    u = np.clip(rng.random(n), 1e-300, 1.0 - 1e-16)
    return -np.log(-np.log(u))


def hard_topk(scores: np.ndarray, k: int, rng: RngState, noise: np.ndarray | None = None) -> list[int]:
    """Ordered indices of the k largest Gumbel-perturbed scores.

    Ties break toward the lower index. ``noise`` substitutes the internal
    draw when a fixed realization is needed.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    if not 1 <= k <= scores.size:
        raise ValueError(f"k={k} out of range for {scores.size} scores")
    if noise is None:
        noise = gumbel_noise(rng, scores.size)
    perturbed = scores + noise
    order = np.argsort(-perturbed, kind="stable")
    return [int(i) for i in order[:k]]


def plackett_luce_prob(scores: np.ndarray, ordering) -> float:
    """Exact probability of drawing ``ordering`` without replacement from exp(scores).

    Successive factors are w_o / remaining mass, with weights max-subtracted
    before exponentiation to avoid overflow.
    """
    scores = np.asarray(scores, dtype=np.float64)
    ordering = list(ordering)
    if len(set(ordering)) != len(ordering):
        raise ValueError("ordering must have distinct indices")
    if any(not 0 <= i < scores.size for i in ordering):
        raise ValueError("ordering index out of range")
    w = np.exp(scores - np.max(scores))
    remaining = float(w.sum())
    prob = 1.0
    for idx in ordering:
        prob *= float(w[idx]) / remaining
        remaining -= float(w[idx])
    return prob


def relaxed_topk(
    scores: np.ndarray,
    k: int,
    temperature: float,
    rng: RngState | None = None,
    noise: np.ndarray | None = None,
) -> GateVector:
    """Softened top-k selection: successive temperature-scaled softmaxes.

    Perturbs the scores once with Gumbel noise, then repeats k times:
    softmax(running / T), followed by running += log(1 - d) so the next
    step avoids mass already taken. Gates are the per-step sums.
    """
    scores = np.asarray(scores, dtype=np.float64)
    n = scores.size
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    if not 1 <= k <= n:
        raise ValueError(f"k={k} out of range for {n} scores")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    if noise is None:
        if rng is None:
            raise ValueError("either rng or noise is required")
        noise = gumbel_noise(rng, n)
    running = scores + np.asarray(noise, dtype=np.float64)
    per_step = np.empty((k, n))
    for step in range(k):
        z = running / temperature
        z = np.exp(z - np.max(z))
        d = z / z.sum()
        per_step[step] = d
        if step + 1 < k:
            running = running + np.log(np.maximum(1.0 - d, _GATE_FLOOR))
    return GateVector(
        gates=per_step.sum(axis=0),
        per_step=per_step,
        relaxation_temperature=float(temperature),
    )


def relaxed_steps_raw(
    graph: Graph,
    score_ids: list[int],
    k: int,
    temperature: float,
    noise: np.ndarray,
    needed: set[int] | None = None,
) -> list[list[int | None]]:
    """Raw node-id version of :func:`relaxed_topk_expr` for hot builder paths.

    When ``needed`` is given, per-step softmax entries are only materialized
    for those column indices (the rest are None); the recursion itself always
    covers every column. Two value-preserving rewrites keep the graph small:
    the 1 - d factor is expressed as (S - e_i) with the common -log S dropped
    (a shared shift that every per-step softmax cancels), and the saturation
    clamp is only materialized when 1 - d actually approaches zero.
    """
    n = len(score_ids)
    if not 1 <= k <= n:
        raise ValueError(f"k={k} out of range for {n} scores")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    vals = graph._vals
    inv_t = graph.iconst(1.0 / temperature)
    inv_t_val = 1.0 / temperature
    running = [graph.iconst_add(score_ids[i], float(noise[i])) for i in range(n)]
    steps: list[list[int | None]] = []
    for step in range(k):
        # stabilize against the current max; a common shift leaves every
        # softmax value and gradient unchanged
        shift = graph.iconst(-max(vals[r] for r in running) * inv_t_val)
        exps = [graph.iexp_mul_add(r, inv_t, shift) for r in running]
        total = graph.isum(exps)
        if needed is None:
            steps.append([graph.idiv(e, total) for e in exps])
        else:
            steps.append(
                [graph.idiv(exps[i], total) if i in needed else None for i in range(n)]
            )
        if step + 1 < k:
            floor = vals[total] * _GATE_FLOOR
            running = [
                graph.ilog_diff_add(running[i], total, exps[i], floor) for i in range(n)
            ]
    return steps


def relaxed_topk_expr(
    graph: Graph,
    score_exprs: list[Scalar],
    k: int,
    temperature: float,
    noise: np.ndarray,
) -> list[list[Scalar]]:
    """Graph-expressed softened top-k over score expressions with fixed noise.

    Returns the k per-step softmax vectors as Scalars (sum them for gates).
    """
    steps = relaxed_steps_raw(
        graph, [s.node_id for s in score_exprs], k, temperature, noise
    )
    return [[Scalar(graph, i) for i in step] for step in steps]
