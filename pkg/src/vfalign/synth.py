"""Synthetic voice/face observations with planted easy, hard and personalized identities."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .data import Identity, Split, SyntheticDataset
from .rng import Rng

# identity counts of the train/validation/test splits in the reference corpus
SPLIT_PROPORTIONS = {Split.TRAIN: 924, Split.VALIDATION: 112, Split.TEST: 189}


def exact_floor(x: float) -> int:
    """floor() that ignores representation error such as 0.7 * 10 = 7.000000000000001."""
    return int(math.floor(x + 1e-9))


@dataclass(frozen=True)
class SynthConfig:
    M: int = 200
    L: int = 16
    d_in: int = 64
    samples_per_identity_per_modality: int = 20
    noise_easy: float = 1.0
    noise_hard: float = 1.25
    frac_hard: float = 0.2
    frac_personalized: float = 0.1
    seed: int = 0

    def errors(self) -> list[str]:
        out = []
        for name in ("M", "L", "d_in", "samples_per_identity_per_modality"):
            if getattr(self, name) < 1:
                out.append(f"{name} must be >= 1")
        for name in ("frac_hard", "frac_personalized"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                out.append(f"{name} must lie in [0, 1]")
        if self.frac_hard + self.frac_personalized > 1.0:
            out.append("frac_hard + frac_personalized must be <= 1")
        if not self.noise_easy > 0:
            out.append("noise_easy must be > 0")
        if not self.noise_hard > self.noise_easy:
            out.append("noise_hard must be > noise_easy")
        return out

    def validate(self) -> None:
        errs = self.errors()
        if errs:
            raise ValueError("; ".join(errs))


def split_counts(M: int) -> dict[Split, int]:
    total = sum(SPLIT_PROPORTIONS.values())
    val = exact_floor(M * SPLIT_PROPORTIONS[Split.VALIDATION] / total + 0.5)
    test = exact_floor(M * SPLIT_PROPORTIONS[Split.TEST] / total + 0.5)
    counts = {Split.TRAIN: M - val - test, Split.VALIDATION: val, Split.TEST: test}
    empty = [s.name.lower() for s, c in counts.items() if c < 1]
    if empty:
        raise ValueError(f"M={M} leaves no identities in split(s): {', '.join(empty)}")
    return counts


def generate(config: SynthConfig) -> SyntheticDataset:
    """Draw a dataset.

    Observations are ``P_face @ z + noise`` and ``P_voice @ z' + noise``;
    ``z' = z`` except for personalized identities, whose voice latent is an
    independent draw.
    """
    config.validate()
    counts = split_counts(config.M)
    M, L, d_in, S = config.M, config.L, config.d_in, config.samples_per_identity_per_modality
    root = Rng(config.seed).child("data")

    proj = root.child("projection")
    P_face = proj.normal((d_in, L)) / math.sqrt(L)
    P_voice = proj.normal((d_in, L)) / math.sqrt(L)

    lat = root.child("latent")
    Z = lat.normal((M, L))
    Z_voice_indep = lat.normal((M, L))

    n_pers = exact_floor(config.frac_personalized * M)
    n_hard = exact_floor(config.frac_hard * M)
    order = root.child("roles").permutation(M)
    personalized = np.zeros(M, dtype=bool)
    personalized[order[:n_pers]] = True
    hard = np.zeros(M, dtype=bool)
    hard[order[n_pers:n_pers + n_hard]] = True

    Z_voice = np.where(personalized[:, None], Z_voice_indep, Z)
    sigma = np.where(hard, config.noise_hard, config.noise_easy)

    noise = root.child("noise")
    eps_face = noise.normal((M, S, d_in))
    eps_voice = noise.normal((M, S, d_in))
    face_x = (Z @ P_face.T)[:, None, :] + sigma[:, None, None] * eps_face
    voice_x = (Z_voice @ P_voice.T)[:, None, :] + sigma[:, None, None] * eps_voice
    owner = np.repeat(np.arange(M, dtype=np.int64), S)

    perm = root.child("split").permutation(M)
    n_tr, n_va = counts[Split.TRAIN], counts[Split.VALIDATION]
    splits = {
        Split.TRAIN: np.sort(perm[:n_tr]),
        Split.VALIDATION: np.sort(perm[n_tr:n_tr + n_va]),
        Split.TEST: np.sort(perm[n_tr + n_va:]),
    }

    identities = [
        Identity(i, Z[i].copy(), Z_voice[i].copy(), bool(personalized[i]), bool(hard[i]),
                 int(Z[i, 0] > 0))
        for i in range(M)
    ]
    return SyntheticDataset(
        identities=identities,
        face_x=face_x.reshape(M * S, d_in), face_ids=owner.copy(),
        voice_x=voice_x.reshape(M * S, d_in), voice_ids=owner.copy(),
        splits={s: v.astype(np.int64) for s, v in splits.items()},
        seed=config.seed, config=asdict(config),
    )
