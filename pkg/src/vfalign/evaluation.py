"""Cross-modal matching, verification and retrieval protocols.

Directions: ``V-F`` probes with a voice and ranks faces, ``F-V`` the reverse.
Restrictions: ``U`` draws gallery identities freely, ``G`` only from
identities sharing the probe's binary attribute.

The metric functions take plain score arrays; the protocol code builds those
arrays from embeddings and query index tables.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .data import Modality, Split, SyntheticDataset
from .encoders import EncoderParams, embed
from .rng import Rng

DIRECTIONS = ("V-F", "F-V")
RESTRICTIONS = ("U", "G")


class InsufficientIdentities(ValueError):
    pass


@dataclass(frozen=True)
class EvalConfig:
    queries_per_probe: int = 20
    max_queries: int = 50_000
    n_max: int = 10
    similarity: str = "cosine"


# ---------------------------------------------------------------------------
# metrics


def score(a, b) -> float:
    """Cosine similarity of two vectors."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine similarity of a zero-norm embedding is undefined")
    return float(a @ b / (na * nb))


def similarity_matrix(a: np.ndarray, b: np.ndarray, kind: str = "cosine") -> np.ndarray:
    if kind == "dot":
        return a @ b.T
    if kind != "cosine":
        raise ValueError(f"unknown similarity {kind!r}")
    na = np.linalg.norm(a, axis=1, keepdims=True)
    nb = np.linalg.norm(b, axis=1, keepdims=True)
    if (na == 0).any() or (nb == 0).any():
        raise ValueError("cosine similarity of a zero-norm embedding is undefined")
    return (a / na) @ (b / nb).T


def match_accuracy(scores: np.ndarray, positive: np.ndarray) -> float:
    """Fraction of rows whose positive column strictly beats every other column.

    Ties count as misses.
    """
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=np.int64)
    if scores.ndim != 2 or scores.shape[1] < 2 or len(positive) != len(scores):
        raise ValueError(f"malformed gallery scores of shape {scores.shape}")
    if ((positive < 0) | (positive >= scores.shape[1])).any():
        raise ValueError("positive index outside the gallery")
    rows = np.arange(len(scores))
    pos = scores[rows, positive]
    others = scores.copy()
    others[rows, positive] = -np.inf
    return float(np.mean(pos > others.max(axis=1)))


def verification_auc(pos_scores, neg_scores) -> float:
    """ROC AUC as (concordant pairs + ties/2) / (P * N), via average ranks."""
    pos = np.asarray(pos_scores, dtype=np.float64)
    neg = np.asarray(neg_scores, dtype=np.float64)
    if len(pos) == 0 or len(neg) == 0:
        raise ValueError("AUC needs at least one positive and one negative pair")
    ranks = rankdata(np.concatenate([pos, neg]), method="average")
    P, Nn = len(pos), len(neg)
    return float((ranks[:P].sum() - P * (P + 1) / 2) / (P * Nn))


def average_precisions(scores: np.ndarray, relevant: np.ndarray) -> np.ndarray:
    """AP of every row; descending score, ties keep gallery order."""
    scores = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    relevant = np.atleast_2d(np.asarray(relevant, dtype=bool))
    n_rel = relevant.sum(axis=1)
    if (n_rel == 0).any():
        raise ValueError("every retrieval query needs at least one positive")
    order = np.argsort(-scores, axis=1, kind="stable")
    rel = np.take_along_axis(relevant, order, axis=1)
    ranks = np.arange(1, scores.shape[1] + 1)
    precision = np.cumsum(rel, axis=1) / ranks
    return (precision * rel).sum(axis=1) / n_rel


def retrieval_map(scores, relevant) -> float:
    return float(average_precisions(scores, relevant).mean())


# ---------------------------------------------------------------------------
# queries


@dataclass
class SplitView:
    """Embeddings (or raw features) of one split, grouped by modality."""

    face: np.ndarray
    face_ids: np.ndarray
    voice: np.ndarray
    voice_ids: np.ndarray
    attribute: np.ndarray  # indexed by global identity id

    def side(self, modality: Modality):
        return (self.face, self.face_ids) if modality == Modality.FACE else (self.voice, self.voice_ids)


def split_view(dataset: SyntheticDataset, split, face=None, voice=None) -> SplitView:
    """Restrict a dataset to one split; optional arrays replace the split's features row for row."""
    members = dataset.split_ids(split)
    fmask = np.isin(dataset.face_ids, members)
    vmask = np.isin(dataset.voice_ids, members)
    return SplitView(
        face=dataset.face_x[fmask] if face is None else face,
        face_ids=dataset.face_ids[fmask],
        voice=dataset.voice_x[vmask] if voice is None else voice,
        voice_ids=dataset.voice_ids[vmask],
        attribute=dataset.attributes,
    )


def _modalities(direction: str) -> tuple[Modality, Modality]:
    if direction == "V-F":
        return Modality.VOICE, Modality.FACE
    if direction == "F-V":
        return Modality.FACE, Modality.VOICE
    raise ValueError(f"unknown direction {direction!r}")


class _Pools:
    """Sample rows of one modality grouped by identity."""

    def __init__(self, ids: np.ndarray):
        self.order = np.argsort(ids, kind="stable")
        self.identities, self.starts, self.counts = np.unique(
            ids[self.order], return_index=True, return_counts=True)
        self.slot = {int(i): k for k, i in enumerate(self.identities)}

    def draw(self, identities: np.ndarray, rng: Rng) -> np.ndarray:
        k = np.array([self.slot[int(i)] for i in identities.ravel()], dtype=np.int64)
        off = rng.gen.integers(0, self.counts[k])
        return self.order[self.starts[k] + off].reshape(identities.shape)


def _probe_rows(n_rows: int, config: EvalConfig, rng: Rng) -> np.ndarray:
    rows = np.repeat(np.arange(n_rows), config.queries_per_probe)
    if len(rows) > config.max_queries:
        rows = np.sort(rng.choice(len(rows), config.max_queries))
        rows = np.repeat(np.arange(n_rows), config.queries_per_probe)[rows]
    return rows


def _candidate_mask(view: SplitView, probe_ids: np.ndarray, gallery_idents: np.ndarray,
                    restricted: bool) -> np.ndarray:
    mask = probe_ids[:, None] != gallery_idents[None, :]
    if restricted:
        mask &= view.attribute[probe_ids][:, None] == view.attribute[gallery_idents][None, :]
    return mask


@dataclass
class MatchingQueries:
    probe: np.ndarray     # (Q,) rows of the probe modality
    gallery: np.ndarray   # (Q, n) rows of the gallery modality
    positive: np.ndarray  # (Q,) column of the matching candidate
    direction: str
    restriction: str

    def __len__(self):
        return len(self.probe)


def generate_matching_queries(view: SplitView, direction: str, restriction: str, n: int,
                              rng: Rng, config: EvalConfig = EvalConfig()) -> MatchingQueries:
    """1:n galleries: one sample of the probe's identity plus n-1 distinct distractor identities."""
    probe_mod, gal_mod = _modalities(direction)
    _, probe_ids_all = view.side(probe_mod)
    _, gal_ids_all = view.side(gal_mod)
    pools = _Pools(gal_ids_all)
    idents = pools.identities

    probe = _probe_rows(len(probe_ids_all), config, rng)
    pid = probe_ids_all[probe]
    cand = _candidate_mask(view, pid, idents, restriction == "G")
    if len(probe) == 0 or cand.sum(axis=1).min() < n - 1:
        raise InsufficientIdentities(
            f"{direction}/{restriction}: a probe has fewer than {n - 1} distractor identities")

    # uniform sampling without replacement: smallest random keys among the candidates
    keys = np.where(cand, rng.uniform(size=cand.shape), np.inf)
    distract = idents[np.argsort(keys, axis=1, kind="stable")[:, :n - 1]]
    negatives = pools.draw(distract, rng)
    positives = pools.draw(pid, rng)
    where = rng.integers(n, size=len(probe))

    gallery = np.empty((len(probe), n), dtype=np.int64)
    is_pos = np.arange(n)[None, :] == where[:, None]
    # boolean assignment fills row-major, so each row receives its own negatives in order
    gallery[~is_pos] = negatives.ravel()
    gallery[is_pos] = positives
    return MatchingQueries(probe, gallery, where, direction, restriction)


@dataclass
class VerificationPairs:
    probe: np.ndarray
    candidate: np.ndarray
    label: np.ndarray  # True for same-identity pairs
    direction: str
    restriction: str

    def __len__(self):
        return len(self.probe)


def generate_verification_pairs(view: SplitView, direction: str, restriction: str, rng: Rng,
                                config: EvalConfig = EvalConfig()) -> VerificationPairs:
    """Alternating positive and negative pairs for every probe sample."""
    probe_mod, gal_mod = _modalities(direction)
    _, probe_ids_all = view.side(probe_mod)
    _, gal_ids_all = view.side(gal_mod)
    pools = _Pools(gal_ids_all)
    probe = _probe_rows(len(probe_ids_all), config, rng)
    pid = probe_ids_all[probe]
    label = np.arange(len(probe)) % 2 == 0

    cand = _candidate_mask(view, pid, pools.identities, restriction == "G")
    if len(probe) == 0 or cand.sum(axis=1).min() < 1:
        raise InsufficientIdentities(f"{direction}/{restriction}: a probe has no distractor identity")
    keys = np.where(cand, rng.uniform(size=cand.shape), np.inf)
    other = pools.identities[np.argmin(keys, axis=1)]
    candidate = pools.draw(np.where(label, pid, other), rng)
    return VerificationPairs(probe, candidate, label, direction, restriction)


@dataclass
class RetrievalQueries:
    """Each probe ranks every gallery-modality sample of the split (same attribute under G)."""

    probe: np.ndarray
    gallery_ids: np.ndarray
    direction: str
    restriction: str

    def __len__(self):
        return len(self.probe)


def generate_retrieval_queries(view: SplitView, direction: str, restriction: str, rng: Rng,
                               config: EvalConfig = EvalConfig()) -> RetrievalQueries:
    probe_mod, gal_mod = _modalities(direction)
    _, probe_ids_all = view.side(probe_mod)
    _, gal_ids_all = view.side(gal_mod)
    probe = np.arange(len(probe_ids_all))
    if len(probe) > config.max_queries:
        probe = np.sort(rng.choice(len(probe), config.max_queries))
    if len(np.unique(gal_ids_all)) < 2:
        raise InsufficientIdentities(f"{direction}/{restriction}: fewer than 2 gallery identities")
    return RetrievalQueries(probe, gal_ids_all, direction, restriction)


def generate_queries(view: SplitView, protocol: str, direction: str, restriction: str, rng: Rng,
                     config: EvalConfig = EvalConfig(), n: int = 2):
    if protocol == "matching":
        return generate_matching_queries(view, direction, restriction, n, rng, config)
    if protocol == "verification":
        return generate_verification_pairs(view, direction, restriction, rng, config)
    if protocol == "retrieval":
        return generate_retrieval_queries(view, direction, restriction, rng, config)
    raise ValueError(f"unknown protocol {protocol!r}")


# ---------------------------------------------------------------------------
# protocol scoring


def _sim(view: SplitView, direction: str, kind: str) -> np.ndarray:
    probe_mod, gal_mod = _modalities(direction)
    return similarity_matrix(view.side(probe_mod)[0], view.side(gal_mod)[0], kind)


def matching_scores(sim: np.ndarray, q: MatchingQueries) -> np.ndarray:
    return sim[q.probe[:, None], q.gallery]


def run_matching(sim, q: MatchingQueries) -> float:
    return match_accuracy(matching_scores(sim, q), q.positive)


def run_verification(sim, q: VerificationPairs) -> float:
    s = sim[q.probe, q.candidate]
    return verification_auc(s[q.label], s[~q.label])


def run_retrieval(sim, q: RetrievalQueries, view: SplitView) -> float:
    probe_mod, _ = _modalities(q.direction)
    probe_ids = view.side(probe_mod)[1][q.probe]
    rel = probe_ids[:, None] == q.gallery_ids[None, :]
    if q.restriction == "U":
        return retrieval_map(sim[q.probe], rel)
    aps = np.empty(len(q.probe))
    gal_attr = view.attribute[q.gallery_ids]
    probe_attr = view.attribute[probe_ids]
    for a in np.unique(probe_attr):
        rows = probe_attr == a
        cols = gal_attr == a
        aps[rows] = average_precisions(sim[q.probe[rows]][:, cols], rel[rows][:, cols])
    return float(aps.mean())


@dataclass
class MetricsReport:
    """Keys are "task/direction/restriction"; a None value marks an unsupported cell."""

    metrics: dict[str, float | None] = field(default_factory=dict)
    counts: dict[str, int] = field(default_factory=dict)
    curve: dict[str, dict[int, float | None]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "metrics": self.metrics,
            "query_counts": self.counts,
            "matching_curve": {k: {str(n): acc for n, acc in v.items()} for k, v in self.curve.items()},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def write(self, path: str | Path) -> list[Path]:
        """Write the JSON report plus one (n, acc) CSV per curve; returns every path written."""
        path = Path(path)
        path.write_text(self.to_json())
        written = [path]
        for key, points in self.curve.items():
            csv_path = path.with_name(f"{path.stem}_curve_{key.replace('/', '_')}.csv")
            with csv_path.open("w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["n", "acc"])
                for n, acc in sorted(points.items()):
                    w.writerow([n, "" if acc is None else repr(acc)])
            written.append(csv_path)
        return written


def evaluate_view(view: SplitView, rng: Rng, config: EvalConfig = EvalConfig()) -> MetricsReport:
    report = MetricsReport()
    for direction in DIRECTIONS:
        sim = _sim(view, direction, config.similarity)
        for res in RESTRICTIONS:
            cell = f"{direction}/{res}"
            curve = {}
            for n in range(2, config.n_max + 1):
                try:
                    q = generate_matching_queries(view, direction, res, n,
                                                  rng.child(f"matching/{cell}/{n}"), config)
                except InsufficientIdentities:
                    curve[n] = None
                    continue
                curve[n] = run_matching(sim, q)
                if n == 2:
                    report.counts[f"matching/{cell}"] = len(q)
            report.curve[cell] = curve
            report.metrics[f"matching/{cell}"] = curve.get(2)

            try:
                vq = generate_verification_pairs(view, direction, res, rng.child(f"verification/{cell}"), config)
                report.metrics[f"verification/{cell}"] = run_verification(sim, vq)
                report.counts[f"verification/{cell}"] = len(vq)
            except InsufficientIdentities:
                report.metrics[f"verification/{cell}"] = None

            try:
                rq = generate_retrieval_queries(view, direction, res, rng.child(f"retrieval/{cell}"), config)
                report.metrics[f"retrieval/{cell}"] = run_retrieval(sim, rq, view)
                report.counts[f"retrieval/{cell}"] = len(rq)
            except InsufficientIdentities:
                report.metrics[f"retrieval/{cell}"] = None
    return report


def embed_split(params: EncoderParams, dataset: SyntheticDataset, split) -> SplitView:
    base = split_view(dataset, split)
    return SplitView(embed(params, base.face, Modality.FACE), base.face_ids,
                     embed(params, base.voice, Modality.VOICE), base.voice_ids, base.attribute)


def evaluate_all(params: EncoderParams, dataset: SyntheticDataset, split=Split.TEST,
                 rng: Rng | None = None, config: EvalConfig = EvalConfig()) -> MetricsReport:
    rng = Rng(dataset.seed).child("eval") if rng is None else rng
    return evaluate_view(embed_split(params, dataset, split), rng, config)


def export_embeddings(params: EncoderParams, dataset: SyntheticDataset, split, path: str | Path) -> int:
    """Write ``identity,modality,e_1..e_D`` rows (faces first); returns the row count."""
    view = embed_split(params, dataset, split)
    rows = 0
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        D = view.face.shape[1]
        w.writerow(["identity", "modality"] + [f"e{j}" for j in range(D)])
        for name, emb, ids in (("face", view.face, view.face_ids), ("voice", view.voice, view.voice_ids)):
            for ident, vec in zip(ids, emb):
                w.writerow([int(ident), name] + [repr(float(e)) for e in vec])
                rows += 1
    return rows


def read_embeddings(path: str | Path) -> tuple[np.ndarray, list[str], np.ndarray]:
    with Path(path).open() as fh:
        r = csv.reader(fh)
        next(r)
        data = list(r)
    ids = np.array([int(row[0]) for row in data], dtype=np.int64)
    mods = [row[1] for row in data]
    emb = np.array([[float(e) for e in row[2:]] for row in data])
    return ids, mods, emb
