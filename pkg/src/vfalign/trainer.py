"""Three-stage training: warm-up, identity-weight learning, retraining with frozen weights."""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .data import Modality, Split, SyntheticDataset
from .encoders import (EncoderParams, OptimizerState, backward, forward, init, lr_at,
                       sgd_step)
from .evaluation import EvalConfig, generate_matching_queries, run_matching, similarity_matrix, split_view
from .losses import implicit_per_sample, total_loss, uniform_weights
from .reweighting import (DegenerateBatchError, IdentityWeightState, batch_weights, initialize,
                          stop_condition, update_hardness, update_weights)
from .rng import Rng

log = logging.getLogger(__name__)

MAX_RESAMPLES = 100


class TrainingAbort(RuntimeError):
    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


@dataclass(frozen=True)
class TrainConfig:
    N: int = 64
    m: float = 3.4
    beta: float = 0.9
    alpha: float = 0.99
    k: int = 22
    T_warm: int = 500
    T_update: int = 100
    T_max: int = 10_000
    R_keep: float = 0.9
    lr: float = 1e-2
    lr_decay_iters: tuple[int, ...] = (2000, 3000)
    lr_decay: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    init_fraction: float = 0.3
    hidden: int = 256
    embed_dim: int = 128
    disable_explicit: bool = False
    disable_implicit: bool = False
    disable_reweighting: bool = False
    normalize_anchor: bool = False
    weight_scope: str = "batch"
    eval_every: int = 500
    stage2_cap_factor: int = 50
    seed: int = 0

    def errors(self, n_train: int | None = None) -> list[str]:
        out = []
        if self.disable_explicit and self.disable_implicit:
            out.append("disable_explicit and disable_implicit leave no objective")
        if not self.T_warm < self.T_max:
            out.append("T_warm must be < T_max")
        if self.N < 1:
            out.append("N must be >= 1")
        if n_train is not None and self.N > n_train:
            out.append(f"N={self.N} exceeds the {n_train} train identities")
        if not self.m > 0:
            out.append("m must be > 0")
        if not 0 < self.beta < 1:
            out.append("beta must lie in (0, 1)")
        if not 0 < self.alpha < 1:
            out.append("alpha must lie in (0, 1)")
        if self.k < 1:
            out.append("k must be >= 1")
        if self.T_update < 1:
            out.append("T_update must be >= 1")
        if not 0 < self.R_keep <= 1:
            out.append("R_keep must lie in (0, 1]")
        if not 0 < self.init_fraction <= 1:
            out.append("init_fraction must lie in (0, 1]")
        if self.weight_scope not in ("batch", "global"):
            out.append("weight_scope must be 'batch' or 'global'")
        if min(self.T_warm, self.T_max, self.eval_every) < 0:
            out.append("iteration counts must be >= 0")
        return out

    def validate(self, n_train: int | None = None) -> None:
        errs = self.errors(n_train)
        if errs:
            raise ValueError("; ".join(errs))

    def lr_for(self, t: int) -> float:
        return lr_at(self.lr, t, self.lr_decay_iters, self.lr_decay)


@dataclass
class TrainData:
    """Train-split samples with identities relabelled to 0..M-1."""

    identity_of_label: np.ndarray
    face_x: np.ndarray
    face_label: np.ndarray
    voice_x: np.ndarray
    voice_label: np.ndarray

    def __post_init__(self):
        self.face_pool = _pool(self.face_label, self.M)
        self.voice_pool = _pool(self.voice_label, self.M)

    @property
    def M(self) -> int:
        return len(self.identity_of_label)

    @classmethod
    def from_dataset(cls, dataset: SyntheticDataset) -> "TrainData":
        ids = dataset.split_ids(Split.TRAIN)
        label_of = np.full(dataset.M, -1, dtype=np.int64)
        label_of[ids] = np.arange(len(ids))
        fmask = label_of[dataset.face_ids] >= 0
        vmask = label_of[dataset.voice_ids] >= 0
        return cls(ids, dataset.face_x[fmask], label_of[dataset.face_ids[fmask]],
                   dataset.voice_x[vmask], label_of[dataset.voice_ids[vmask]])


def _pool(labels, M):
    order = np.argsort(labels, kind="stable")
    counts = np.bincount(labels, minlength=M)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    if (counts == 0).any():
        raise ValueError("every train identity needs at least one sample per modality")
    return order, starts, counts


@dataclass
class Batch:
    labels: np.ndarray
    face_rows: np.ndarray
    voice_rows: np.ndarray


def sample_batch(data: TrainData, N: int, eligible: np.ndarray, rng: Rng) -> Batch:
    """N distinct identities, then one face and one voice sample for each."""
    eligible = np.asarray(eligible, dtype=np.int64)
    if N > len(eligible):
        raise ValueError(f"cannot draw {N} distinct identities from {len(eligible)} eligible")
    labels = rng.choice(eligible, N)
    rows = []
    for order, starts, counts in (data.face_pool, data.voice_pool):
        rows.append(order[starts[labels] + rng.gen.integers(0, counts[labels])])
    return Batch(labels, rows[0], rows[1])


@dataclass
class TrainedModel:
    params: EncoderParams
    final_params: EncoderParams
    weights: IdentityWeightState
    identity_of_label: np.ndarray
    trace: list[dict] = field(default_factory=list)
    weight_history: list[dict] = field(default_factory=list)
    validation: list[dict] = field(default_factory=list)
    stage_bounds: dict[str, int] = field(default_factory=dict)
    best_iteration: int = 0
    stage2_skipped: bool = False

    @property
    def excluded_identities(self) -> np.ndarray:
        """Global identity ids left at zero weight."""
        return self.identity_of_label[self.weights.excluded]


class TrainingRun:
    """Mutable per-run plumbing shared by the three stages."""

    def __init__(self, config: TrainConfig, data: TrainData, root: Rng):
        self.config = config
        self.data = data
        self.root = root
        self.trace: list[dict] = []

    def embed(self, params, batch):
        x, cx = forward(params, self.data.face_x[batch.face_rows], Modality.FACE)
        v, cv = forward(params, self.data.voice_x[batch.voice_rows], Modality.VOICE)
        return x, v, cx, cv

    def step(self, params, opt, batch, emb, s_hat, stage, t, lr, nonzero):
        c = self.config
        x, v, cx, cv = emb
        out = total_loss(x, v, batch.labels, params.W, c.m, s_hat,
                         use_implicit=not c.disable_implicit, use_explicit=not c.disable_explicit,
                         normalize_anchor=c.normalize_anchor)
        record = {"stage": stage, "t": t, "loss_total": out.value, "loss_implicit": out.implicit,
                  "loss_explicit": out.explicit, "lr": lr, "nonzero_weight_count": nonzero}
        if not np.isfinite(out.value) or not np.isfinite(out.grad_x).all() or not np.isfinite(out.grad_v).all():
            raise TrainingAbort(f"non-finite loss in stage {stage} at iteration {t}", record)
        self.trace.append(record)
        grads = EncoderParams(backward(params, cx, out.grad_x), backward(params, cv, out.grad_v), out.grad_W)
        opt.lr = lr
        return sgd_step(params, grads, opt)

    def new_optimizer(self):
        c = self.config
        return OptimizerState(lr=c.lr, momentum=c.momentum, weight_decay=c.weight_decay)

    def dims(self):
        return {"d_in": self.data.face_x.shape[1], "H": self.config.hidden,
                "D": self.config.embed_dim, "M": self.data.M}


def run_stage1(run: TrainingRun) -> tuple[EncoderParams, OptimizerState]:
    c = run.config
    params = init(run.dims(), run.root.child("init/stage1"))
    opt = run.new_optimizer()
    rng = run.root.child("batch/stage1")
    everyone = np.arange(run.data.M)
    for t in range(1, c.T_warm + 1):
        batch = sample_batch(run.data, c.N, everyone, rng)
        params = run.step(params, opt, batch, run.embed(params, batch), uniform_weights(c.N),
                          1, t, c.lr_for(t), run.data.M)
    return params, opt


def run_stage2(run: TrainingRun, params: EncoderParams, opt: OptimizerState,
               history: list[dict]) -> tuple[EncoderParams, IdentityWeightState]:
    c = run.config
    M = run.data.M
    state = IdentityWeightState.fresh(M)
    rng = run.root.child("batch/stage2")
    everyone = np.arange(M)
    cap = c.stage2_cap_factor * c.T_update
    t = 0
    while not (state.initialized and stop_condition(state, c.R_keep, M)):
        if t >= cap:
            raise TrainingAbort(f"stage 2 did not reach R_keep={c.R_keep} within {cap} iterations",
                                {"nonzero": state.nonzero, "M": M})
        t += 1
        batch = sample_batch(run.data, c.N, everyone, rng)
        emb = run.embed(params, batch)
        losses = implicit_per_sample(emb[0], emb[1], batch.labels, params.W)
        state = update_hardness(state, batch.labels, losses, c.beta)
        if not state.initialized and state.H_seen.all():
            state = initialize(state, c.init_fraction)
            history.append(_history_record(t, "init", np.flatnonzero(state.s > 0), state))
        elif state.initialized and t % c.T_update == 0:
            state, promoted = update_weights(state, c.k, c.alpha)
            history.append(_history_record(t, "update", promoted, state))

        if state.initialized:
            for _ in range(MAX_RESAMPLES):
                try:
                    s_hat = batch_weights(state, batch.labels, c.weight_scope)
                    break
                except DegenerateBatchError:
                    batch = sample_batch(run.data, c.N, everyone, rng)
                    emb = run.embed(params, batch)
            else:
                raise TrainingAbort(f"{MAX_RESAMPLES} consecutive zero-weight batches at stage-2 iteration {t}")
        else:
            s_hat = uniform_weights(c.N)
        g = c.T_warm + t
        params = run.step(params, opt, batch, emb, s_hat, 2, g, c.lr_for(g), state.nonzero)
    state = IdentityWeightState(state.H, state.s, state.H_seen, state.age, iteration=t,
                                updates_applied=state.updates_applied, initialized=True)
    return params, state


def _history_record(t, kind, ids, state):
    return {
        "iteration": int(t), "event": kind, "promoted": [int(i) for i in ids],
        "s_checksum": hashlib.sha256(np.ascontiguousarray(state.s, dtype="<f8").tobytes()).hexdigest(),
        "nonzero": state.nonzero,
    }


def _selection_metric(dataset: SyntheticDataset, rng: Rng) -> Callable[[EncoderParams], float] | None:
    """Unrestricted 1:2 voice-to-face accuracy on the validation split."""
    view = split_view(dataset, Split.VALIDATION)
    if len(view.face_ids) == 0:
        return None
    q = generate_matching_queries(view, "V-F", "U", 2, rng, EvalConfig())

    def metric(params):
        x = forward(params, view.face, Modality.FACE)[0]
        v = forward(params, view.voice, Modality.VOICE)[0]
        return run_matching(similarity_matrix(v, x), q)

    return metric


def run_stage3(run: TrainingRun, state: IdentityWeightState,
               select: Callable[[EncoderParams], float] | None,
               validation: list[dict]) -> tuple[EncoderParams, EncoderParams, int]:
    c = run.config
    params = init(run.dims(), run.root.child("init/stage3"))
    opt = run.new_optimizer()
    rng = run.root.child("batch/stage3")
    eligible = np.flatnonzero(state.s > 0)
    best, best_acc, best_t = params.copy(), -np.inf, 0
    for t in range(1, c.T_max + 1):
        batch = sample_batch(run.data, c.N, eligible, rng)
        s_hat = batch_weights(state, batch.labels, c.weight_scope)
        params = run.step(params, opt, batch, run.embed(params, batch), s_hat, 3, t,
                          c.lr_for(t), state.nonzero)
        if select is not None and c.eval_every > 0 and (t % c.eval_every == 0 or t == c.T_max):
            acc = select(params)
            validation.append({"t": t, "val_acc_vf_u_1to2": acc})
            if acc > best_acc:
                best, best_acc, best_t = params.copy(), acc, t
    if select is None or c.eval_every <= 0 or c.T_max == 0:
        best, best_t = params.copy(), c.T_max
    return best, params, best_t


def train(config: TrainConfig, dataset: SyntheticDataset) -> TrainedModel:
    data = TrainData.from_dataset(dataset)
    config.validate(data.M)
    root = Rng(config.seed).child("train")
    run = TrainingRun(config, data, root)
    log.info("training on %d identities; anchors %s", data.M,
             "normalized" if config.normalize_anchor else "unnormalized")

    params, opt = run_stage1(run)
    bounds = {"stage1_end": config.T_warm}
    history: list[dict] = []
    if config.disable_reweighting:
        state = IdentityWeightState.all_ones(data.M)
        bounds["stage2_end"] = config.T_warm
    else:
        params, state = run_stage2(run, params, opt, history)
        bounds["stage2_end"] = config.T_warm + state.iteration
    log.info("stage 2 done: %d of %d identities kept", state.nonzero, data.M)

    validation: list[dict] = []
    select = _selection_metric(dataset, root.child("select"))
    best, final, best_t = run_stage3(run, state, select, validation)
    bounds["stage3_iterations"] = config.T_max
    return TrainedModel(best, final, state, data.identity_of_label, run.trace, history, validation,
                        bounds, best_t, config.disable_reweighting)
