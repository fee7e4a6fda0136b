"""Per-identity hardness tracking and the promote-and-decay weight schedule.

Identities start excluded (weight 0). The easiest ones are promoted to weight
1 in fixed-size groups, and every already-promoted identity decays by
``alpha`` on each update. Whatever is still at zero when enough identities
are kept is treated as unlearnable and dropped for the final training run.

Ties are broken everywhere by the smaller identity id.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .synth import exact_floor


class DegenerateBatchError(ValueError):
    """Every identity in a batch has zero weight."""


@dataclass(frozen=True)
class IdentityWeightState:
    H: np.ndarray
    s: np.ndarray
    H_seen: np.ndarray
    # updates since promotion; -1 while never promoted
    age: np.ndarray
    iteration: int = 0
    updates_applied: int = 0
    initialized: bool = False

    @classmethod
    def fresh(cls, M: int) -> "IdentityWeightState":
        return cls(np.zeros(M), np.zeros(M), np.zeros(M, dtype=bool), np.full(M, -1, dtype=np.int64))

    @classmethod
    def all_ones(cls, M: int) -> "IdentityWeightState":
        return cls(np.zeros(M), np.ones(M), np.zeros(M, dtype=bool), np.zeros(M, dtype=np.int64),
                   initialized=True)

    @property
    def M(self) -> int:
        return len(self.s)

    @property
    def nonzero(self) -> int:
        return int(np.count_nonzero(self.s > 0))

    @property
    def excluded(self) -> np.ndarray:
        return np.flatnonzero(self.s == 0)


def _ascending(values: np.ndarray, ids: np.ndarray) -> np.ndarray:
    """``ids`` ordered by value, then by id."""
    return ids[np.lexsort((ids, values[ids]))]


def update_hardness(state: IdentityWeightState, batch_labels, losses, beta: float) -> IdentityWeightState:
    """Moving average of each batch identity's own implicit loss.

    The first observation of an identity initializes its hardness directly.
    """
    if not 0.0 < beta < 1.0:
        raise ValueError(f"beta must lie in (0, 1), got {beta}")
    labels = np.asarray(batch_labels, dtype=np.int64)
    losses = np.asarray(losses, dtype=np.float64)
    if ((labels < 0) | (labels >= state.M)).any():
        raise ValueError("batch contains an unknown identity id")
    H = state.H.copy()
    seen = state.H_seen.copy()
    for i, loss in zip(labels, losses):
        H[i] = beta * H[i] + (1.0 - beta) * loss if seen[i] else loss
        seen[i] = True
    return replace(state, H=H, H_seen=seen)


def init_weights(H0, init_fraction: float = 0.3) -> np.ndarray:
    """Weight 1 for the floor(init_fraction * M) smallest hardness values, else 0."""
    H0 = np.asarray(H0, dtype=np.float64)
    M = len(H0)
    order = _ascending(H0, np.arange(M))
    s = np.zeros(M)
    s[order[:exact_floor(init_fraction * M)]] = 1.0
    return s


def initialize(state: IdentityWeightState, init_fraction: float = 0.3) -> IdentityWeightState:
    if not state.H_seen.all():
        raise ValueError("every identity needs an observed hardness before weights are initialized")
    s = init_weights(state.H, init_fraction)
    age = np.where(s > 0, 0, -1).astype(np.int64)
    return replace(state, s=s, age=age, initialized=True)


def update_weights(state: IdentityWeightState, k: int, alpha: float) -> tuple[IdentityWeightState, np.ndarray]:
    """Promote the k easiest zero-weight identities; decay every other weight by alpha.

    Returns the new state and the promoted ids.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    zero = np.flatnonzero(state.s == 0)
    promoted = _ascending(state.H, zero)[:k]
    age = np.where(state.age >= 0, state.age + 1, -1)
    age[promoted] = 0
    # recompute from the age so a promoted identity's weight is exactly pow(alpha, u);
    # math.pow rather than numpy's vectorized power, which can differ by an ulp
    s = np.array([math.pow(alpha, a) if a >= 0 else 0.0 for a in age])
    return replace(state, s=s, age=age, updates_applied=state.updates_applied + 1), promoted


def stop_condition(state: IdentityWeightState, R_keep: float, M: int | None = None) -> bool:
    if not 0.0 < R_keep <= 1.0:
        raise ValueError(f"R_keep must lie in (0, 1], got {R_keep}")
    M = state.M if M is None else M
    return state.nonzero >= R_keep * M - 1e-9


def batch_weights(state: IdentityWeightState, batch_labels, scope: str = "batch") -> np.ndarray:
    """Normalized per-sample weights s_y / sum(s) over the batch (or all identities)."""
    labels = np.asarray(batch_labels, dtype=np.int64)
    s = state.s[labels]
    denom = s.sum() if scope == "batch" else state.s.sum()
    if scope not in ("batch", "global"):
        raise ValueError(f"unknown normalization scope {scope!r}")
    if s.sum() <= 0:
        raise DegenerateBatchError("all identities in the batch have zero weight")
    return s / denom


def expected_updates(M: int, R_keep: float, k: int, init_fraction: float = 0.3) -> int:
    """Number of triggered updates before the keep threshold is reached."""
    need = int(np.ceil(R_keep * M - 1e-9)) - exact_floor(init_fraction * M)
    return max(0, -(-need // k))
