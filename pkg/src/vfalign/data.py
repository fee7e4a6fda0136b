"""Dataset containers, validation, and the on-disk dataset formats.

Binary layout (all integers and floats little-endian)::

    8 bytes   magic b"VFDSET01"
    8 bytes   uint64 header length H
    H bytes   UTF-8 JSON header: format, version, M, L, d_in, seed, config,
              n_face, n_voice (keys sorted)
    M records identity: int64 id, uint8 split, uint8 attribute,
              uint8 is_personalized, uint8 is_hard, L float64 latent,
              L float64 voice_latent
    n_face + n_voice records
              sample: int64 identity_id, uint8 modality (0 face, 1 voice),
              d_in float64 features

The text manifest is one comma-separated record per line (``#`` comments)::

    header,M,L,d_in,seed
    identity,id,split,attribute,is_personalized,is_hard,latent...[,voice_latent...]
    sample,identity_id,face|voice,features...

``split`` is ``train``, ``validation`` or ``test``. When only L latent values
are given the voice latent equals the latent.
"""

from __future__ import annotations

import enum
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

MAGIC = b"VFDSET01"


class Modality(enum.IntEnum):
    FACE = 0
    VOICE = 1


class Split(enum.IntEnum):
    TRAIN = 0
    VALIDATION = 1
    TEST = 2

    @classmethod
    def parse(cls, name: str | "Split") -> "Split":
        if isinstance(name, Split):
            return name
        return cls[name.strip().upper()]


@dataclass(frozen=True)
class Identity:
    id: int
    latent: np.ndarray
    voice_latent: np.ndarray
    is_personalized: bool
    is_hard: bool
    attribute: int


@dataclass(frozen=True)
class Sample:
    identity_id: int
    modality: Modality
    features: np.ndarray


@dataclass
class SyntheticDataset:
    """Identities plus per-modality observation matrices.

    Samples are stored column-wise: ``face_x[r]`` is the feature row of the
    face sample owned by identity ``face_ids[r]``.
    """

    identities: list[Identity]
    face_x: np.ndarray
    face_ids: np.ndarray
    voice_x: np.ndarray
    voice_ids: np.ndarray
    splits: dict[Split, np.ndarray]
    seed: int = 0
    config: dict = field(default_factory=dict)

    @property
    def M(self) -> int:
        return len(self.identities)

    @property
    def L(self) -> int:
        return len(self.identities[0].latent) if self.identities else 0

    @property
    def d_in(self) -> int:
        return self.face_x.shape[1]

    @property
    def attributes(self) -> np.ndarray:
        return np.array([ident.attribute for ident in self.identities], dtype=np.int64)

    @property
    def personalized(self) -> np.ndarray:
        return np.array([ident.is_personalized for ident in self.identities], dtype=bool)

    @property
    def hard(self) -> np.ndarray:
        return np.array([ident.is_hard for ident in self.identities], dtype=bool)

    def features(self, modality: Modality) -> tuple[np.ndarray, np.ndarray]:
        if modality == Modality.FACE:
            return self.face_x, self.face_ids
        return self.voice_x, self.voice_ids

    def samples(self, modality: Modality) -> Iterator[Sample]:
        x, ids = self.features(modality)
        for row, ident in zip(x, ids):
            yield Sample(int(ident), modality, row)

    @property
    def face_samples(self) -> list[Sample]:
        return list(self.samples(Modality.FACE))

    @property
    def voice_samples(self) -> list[Sample]:
        return list(self.samples(Modality.VOICE))

    def split_ids(self, split: Split | str) -> np.ndarray:
        return self.splits[Split.parse(split)]

    def split_of(self) -> np.ndarray:
        out = np.full(self.M, -1, dtype=np.int64)
        for split, ids in self.splits.items():
            out[ids] = int(split)
        return out

    def same_as(self, other: "SyntheticDataset") -> bool:
        if self.M != other.M or self.seed != other.seed or self.config != other.config:
            return False
        for a, b in zip(self.identities, other.identities):
            if (a.id, a.is_personalized, a.is_hard, a.attribute) != (
                b.id, b.is_personalized, b.is_hard, b.attribute
            ):
                return False
            if not (np.array_equal(a.latent, b.latent) and np.array_equal(a.voice_latent, b.voice_latent)):
                return False
        arrays = ["face_x", "face_ids", "voice_x", "voice_ids"]
        if not all(np.array_equal(getattr(self, k), getattr(other, k)) for k in arrays):
            return False
        return set(self.splits) == set(other.splits) and all(
            np.array_equal(self.splits[s], other.splits[s]) for s in self.splits
        )


@dataclass(frozen=True)
class Violation:
    rule: str
    detail: str
    identity: int | None = None


def validate_dataset(dataset: SyntheticDataset) -> list[Violation]:
    """Report every broken invariant; an empty list means well-formed."""
    report: list[Violation] = []
    M = dataset.M
    ids = [ident.id for ident in dataset.identities]
    if sorted(ids) != list(range(M)):
        report.append(Violation("ids dense and unique", f"ids are not exactly 0..{M - 1}"))
    for ident in dataset.identities:
        if not ident.is_personalized and not np.array_equal(ident.latent, ident.voice_latent):
            report.append(Violation(
                "voice_latent equals latent unless personalized",
                f"identity {ident.id} is not personalized but latents differ",
                ident.id,
            ))

    d_in = dataset.d_in
    for name, x, owner in (("face", dataset.face_x, dataset.face_ids),
                           ("voice", dataset.voice_x, dataset.voice_ids)):
        if x.ndim != 2 or x.shape[1] != d_in:
            report.append(Violation("features have d_in entries", f"{name} matrix has shape {x.shape}"))
        bad_rows = np.flatnonzero(~np.isfinite(x).all(axis=1)) if x.ndim == 2 else []
        for r in bad_rows:
            report.append(Violation("features finite", f"{name} sample {r} has non-finite entries",
                                    int(owner[r])))
        unknown = np.setdiff1d(owner, np.arange(M))
        for u in unknown:
            report.append(Violation("sample refers to an existing identity",
                                    f"{name} sample owner {u} does not exist", int(u)))

    membership = np.zeros(M, dtype=np.int64)
    for split, members in dataset.splits.items():
        members = np.asarray(members)
        valid = members[(members >= 0) & (members < M)]
        membership[valid] += 1
    for i in np.flatnonzero(membership > 1):
        report.append(Violation("splits partition identities without overlap",
                                f"identity {i} appears in more than one split", int(i)))
    for i in np.flatnonzero(membership == 0):
        report.append(Violation("splits partition identities without overlap",
                                f"identity {i} is in no split", int(i)))

    face_counts = np.bincount(dataset.face_ids[(dataset.face_ids >= 0) & (dataset.face_ids < M)], minlength=M)
    voice_counts = np.bincount(dataset.voice_ids[(dataset.voice_ids >= 0) & (dataset.voice_ids < M)], minlength=M)
    for i in range(M):
        if face_counts[i] < 1:
            report.append(Violation("owns >= 1 face sample", f"identity {i} has no face sample", i))
        if voice_counts[i] < 1:
            report.append(Violation("owns >= 1 voice sample", f"identity {i} has no voice sample", i))
    return report


# ---------------------------------------------------------------------------
# serialization


def _identity_dtype(L: int) -> np.dtype:
    return np.dtype([
        ("id", "<i8"), ("split", "u1"), ("attribute", "u1"),
        ("personalized", "u1"), ("hard", "u1"),
        ("latent", "<f8", (L,)), ("voice_latent", "<f8", (L,)),
    ])


def _sample_dtype(d_in: int) -> np.dtype:
    return np.dtype([("identity", "<i8"), ("modality", "u1"), ("features", "<f8", (d_in,))])


def dataset_to_bytes(dataset: SyntheticDataset) -> bytes:
    split_of = dataset.split_of()
    if (split_of < 0).any() or sum(len(v) for v in dataset.splits.values()) != dataset.M:
        raise ValueError("every identity must belong to exactly one split")
    L, d_in = dataset.L, dataset.d_in
    header = {
        "format": "vfalign-dataset", "version": 1,
        "M": dataset.M, "L": L, "d_in": d_in, "seed": dataset.seed,
        "config": dataset.config,
        "n_face": int(len(dataset.face_ids)), "n_voice": int(len(dataset.voice_ids)),
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")

    idrec = np.zeros(dataset.M, dtype=_identity_dtype(L))
    for r, ident in enumerate(dataset.identities):
        idrec[r] = (ident.id, split_of[ident.id], ident.attribute, ident.is_personalized,
                    ident.is_hard, ident.latent, ident.voice_latent)

    n_f, n_v = len(dataset.face_ids), len(dataset.voice_ids)
    srec = np.zeros(n_f + n_v, dtype=_sample_dtype(d_in))
    srec["identity"][:n_f] = dataset.face_ids
    srec["modality"][:n_f] = Modality.FACE
    srec["features"][:n_f] = dataset.face_x
    srec["identity"][n_f:] = dataset.voice_ids
    srec["modality"][n_f:] = Modality.VOICE
    srec["features"][n_f:] = dataset.voice_x
    return MAGIC + struct.pack("<Q", len(head)) + head + idrec.tobytes() + srec.tobytes()


def dataset_from_bytes(blob: bytes) -> SyntheticDataset:
    if blob[:8] != MAGIC:
        raise ValueError("not a vfalign dataset file")
    (hlen,) = struct.unpack("<Q", blob[8:16])
    header = json.loads(blob[16:16 + hlen].decode("utf-8"))
    M, L, d_in = header["M"], header["L"], header["d_in"]
    off = 16 + hlen
    idt = _identity_dtype(L)
    idrec = np.frombuffer(blob, dtype=idt, count=M, offset=off)
    off += M * idt.itemsize
    n = header["n_face"] + header["n_voice"]
    srec = np.frombuffer(blob, dtype=_sample_dtype(d_in), count=n, offset=off)

    identities = [
        Identity(int(r["id"]), np.array(r["latent"]), np.array(r["voice_latent"]),
                 bool(r["personalized"]), bool(r["hard"]), int(r["attribute"]))
        for r in idrec
    ]
    face = srec["modality"] == Modality.FACE
    splits = {s: np.sort(idrec["id"][idrec["split"] == s]).astype(np.int64) for s in Split}
    return SyntheticDataset(
        identities=identities,
        face_x=np.array(srec["features"][face]), face_ids=srec["identity"][face].astype(np.int64),
        voice_x=np.array(srec["features"][~face]), voice_ids=srec["identity"][~face].astype(np.int64),
        splits=splits, seed=int(header["seed"]), config=header["config"],
    )


def parse_manifest(text: str) -> SyntheticDataset:
    M = L = d_in = None
    seed = 0
    identities: dict[int, Identity] = {}
    membership: dict[Split, list[int]] = {s: [] for s in Split}
    samples: dict[Modality, list[tuple[int, list[float]]]] = {Modality.FACE: [], Modality.VOICE: []}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = [p.strip() for p in line.split(",")]
        kind = parts[0].lower()
        try:
            if kind == "header":
                M, L, d_in, seed = (int(p) for p in parts[1:5])
            elif kind == "identity":
                if L is None:
                    raise ValueError("identity record before header")
                iid = int(parts[1])
                split = Split.parse(parts[2])
                vals = [float(p) for p in parts[6:]]
                if len(vals) not in (L, 2 * L):
                    raise ValueError(f"expected {L} or {2 * L} latent values, got {len(vals)}")
                latent = np.array(vals[:L])
                voice = np.array(vals[L:]) if len(vals) == 2 * L else latent.copy()
                identities[iid] = Identity(iid, latent, voice, parts[4] in ("1", "true", "True"),
                                           parts[5] in ("1", "true", "True"), int(parts[3]))
                membership[split].append(iid)
            elif kind == "sample":
                modality = Modality[parts[2].upper()]
                samples[modality].append((int(parts[1]), [float(p) for p in parts[3:]]))
            else:
                raise ValueError(f"unknown record kind {parts[0]!r}")
        except (ValueError, KeyError, IndexError) as err:
            raise ValueError(f"manifest line {lineno}: {err}") from err
    if M is None:
        raise ValueError("manifest has no header record")

    def stack(mod):
        rows = samples[mod]
        x = np.array([r[1] for r in rows], dtype=np.float64).reshape(len(rows), d_in)
        return x, np.array([r[0] for r in rows], dtype=np.int64)

    face_x, face_ids = stack(Modality.FACE)
    voice_x, voice_ids = stack(Modality.VOICE)
    return SyntheticDataset(
        identities=[identities[i] for i in sorted(identities)],
        face_x=face_x, face_ids=face_ids, voice_x=voice_x, voice_ids=voice_ids,
        splits={s: np.array(sorted(v), dtype=np.int64) for s, v in membership.items()},
        seed=seed,
    )


def write_dataset(dataset: SyntheticDataset, path: str | Path) -> None:
    Path(path).write_bytes(dataset_to_bytes(dataset))


def read_dataset(path: str | Path) -> SyntheticDataset:
    blob = Path(path).read_bytes()
    if blob[:8] == MAGIC:
        return dataset_from_bytes(blob)
    return parse_manifest(blob.decode("utf-8"))
