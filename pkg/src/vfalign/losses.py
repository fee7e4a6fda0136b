"""Implicit (shared-classifier) and explicit (margin N-pair) alignment losses.

Shapes: ``x`` face embeddings and ``v`` voice embeddings are N x D, row i of
both belongs to identity ``y[i]``; ``W`` is the D x M classifier. ``s_hat``
holds per-sample weights, and plain training passes ``1/N`` everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class LossOutput:
    value: float
    grad_x: np.ndarray
    grad_v: np.ndarray
    grad_W: np.ndarray | None
    per_sample: np.ndarray


@dataclass
class BoundReport:
    lhs: float
    C: float
    D: np.ndarray
    rhs: float
    holds: bool

    @property
    def slack(self) -> float:
        return self.lhs - self.rhs

    def as_dict(self) -> dict:
        return {"lhs": self.lhs, "C": self.C, "D": self.D.tolist(), "rhs": self.rhs,
                "holds": self.holds, "slack": self.slack}


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def uniform_weights(n: int) -> np.ndarray:
    return np.full(n, 1.0 / n)


def _check_weights(s_hat, n):
    s_hat = np.asarray(s_hat, dtype=np.float64)
    if s_hat.shape != (n,):
        raise ValueError(f"expected {n} weights, got shape {s_hat.shape}")
    if (s_hat < 0).any():
        raise ValueError("sample weights must be non-negative")
    return s_hat


def _check_labels(y, M):
    y = np.asarray(y, dtype=np.int64)
    if ((y < 0) | (y >= M)).any():
        raise ValueError(f"labels must lie in [0, {M})")
    return y


def implicit_per_sample(x, v, y, W) -> np.ndarray:
    """-log softmax_y(W^T x_i) - log softmax_y(W^T v_i) for every row."""
    y = _check_labels(y, W.shape[1])
    rows = np.arange(len(y))
    return -log_softmax(x @ W)[rows, y] - log_softmax(v @ W)[rows, y]


def implicit_loss(x, v, y, W, s_hat=None) -> LossOutput:
    N, M = x.shape[0], W.shape[1]
    y = _check_labels(y, M)
    s_hat = uniform_weights(N) if s_hat is None else _check_weights(s_hat, N)
    rows = np.arange(N)

    log_px = log_softmax(x @ W)
    log_pv = log_softmax(v @ W)
    per = -log_px[rows, y] - log_pv[rows, y]

    # d(-log softmax_y)/dlogits = p - onehot(y)
    dx_logits = np.exp(log_px)
    dx_logits[rows, y] -= 1.0
    dv_logits = np.exp(log_pv)
    dv_logits[rows, y] -= 1.0
    dx_logits *= s_hat[:, None]
    dv_logits *= s_hat[:, None]

    return LossOutput(
        value=float(s_hat @ per),
        grad_x=dx_logits @ W.T,
        grad_v=dv_logits @ W.T,
        grad_W=x.T @ dx_logits + v.T @ dv_logits,
        per_sample=per,
    )


def _normalize(a):
    norms = np.linalg.norm(a, axis=1, keepdims=True)
    if (norms == 0).any():
        raise ValueError("zero-norm embedding row cannot be normalized")
    return a / norms, norms


def _normalize_backward(a_hat, norms, g_hat):
    # d(a/|a|) applied to g: (g - a_hat <a_hat, g>) / |a|
    return (g_hat - a_hat * np.sum(a_hat * g_hat, axis=1, keepdims=True)) / norms


def _npair_direction(anchor, gallery_hat, neg_mask, m):
    """One direction of the margin N-pair loss.

    Returns per-anchor terms log(m + sum_neg exp(a_ij - a_ii)) and the
    derivative of each term w.r.t. the similarity matrix a = anchor @ gallery_hat.T.
    """
    a = anchor @ gallery_hat.T
    diff = a - np.diag(a)[:, None]
    masked = np.where(neg_mask, diff, -np.inf)
    # log of the negative sum, -inf when an anchor has no negatives
    peak = masked.max(axis=1, keepdims=True)
    peak = np.where(np.isfinite(peak), peak, 0.0)
    with np.errstate(divide="ignore"):
        log_neg = np.log(np.exp(masked - peak).sum(axis=1)) + peak[:, 0]
    term = np.logaddexp(np.log(m), log_neg)
    with np.errstate(invalid="ignore"):
        dA = np.where(neg_mask, np.exp(masked - term[:, None]), 0.0)
    # positive pair: -S/(m+S) = -(1 - m/(m+S))
    np.fill_diagonal(dA, -np.exp(log_neg - term))
    return term, dA


def explicit_loss(x, v, y, m=3.4, s_hat=None, normalize_anchor=False) -> LossOutput:
    """Margin N-pair loss in both directions (voice anchors, then face anchors).

    Galleries are L2-normalized; anchors stay raw unless ``normalize_anchor``.
    """
    if not m > 0:
        raise ValueError(f"margin must be > 0, got {m}")
    N = x.shape[0]
    y = np.asarray(y, dtype=np.int64)
    s_hat = uniform_weights(N) if s_hat is None else _check_weights(s_hat, N)
    neg_mask = y[:, None] != y[None, :]

    x_hat, x_norm = _normalize(x)
    v_hat, v_norm = _normalize(v)
    v_anchor = v_hat if normalize_anchor else v
    x_anchor = x_hat if normalize_anchor else x

    t_vf, dA_vf = _npair_direction(v_anchor, x_hat, neg_mask, m)
    t_fv, dA_fv = _npair_direction(x_anchor, v_hat, neg_mask, m)
    dA_vf *= s_hat[:, None]
    dA_fv *= s_hat[:, None]

    g_v_anchor = dA_vf @ x_hat
    g_x_hat = dA_vf.T @ v_anchor
    g_x_anchor = dA_fv @ v_hat
    g_v_hat = dA_fv.T @ x_anchor

    if normalize_anchor:
        g_x = _normalize_backward(x_hat, x_norm, g_x_hat + g_x_anchor)
        g_v = _normalize_backward(v_hat, v_norm, g_v_hat + g_v_anchor)
    else:
        g_x = _normalize_backward(x_hat, x_norm, g_x_hat) + g_x_anchor
        g_v = _normalize_backward(v_hat, v_norm, g_v_hat) + g_v_anchor

    per = t_vf + t_fv
    return LossOutput(float(s_hat @ per), g_x, g_v, None, per)


@dataclass
class TotalLoss(LossOutput):
    implicit: float = 0.0
    explicit: float = 0.0
    implicit_per_sample: np.ndarray | None = None


def total_loss(x, v, y, W, m=3.4, s_hat=None, *, use_implicit=True, use_explicit=True,
               normalize_anchor=False) -> TotalLoss:
    """Sum of the enabled loss parts; disabled parts contribute exactly zero."""
    if not (use_implicit or use_explicit):
        raise ValueError("at least one of the implicit and explicit losses must be enabled")
    N, D = x.shape
    s_hat = uniform_weights(N) if s_hat is None else _check_weights(s_hat, N)
    gx = np.zeros_like(x)
    gv = np.zeros_like(v)
    gW = np.zeros_like(W)
    per = np.zeros(N)
    imp_val = exp_val = 0.0
    imp_per = None
    if use_implicit:
        imp = implicit_loss(x, v, y, W, s_hat)
        imp_val, imp_per = imp.value, imp.per_sample
        gx += imp.grad_x
        gv += imp.grad_v
        gW += imp.grad_W
        per += imp.per_sample
    if use_explicit:
        exp_ = explicit_loss(x, v, y, m, s_hat, normalize_anchor)
        exp_val = exp_.value
        gx += exp_.grad_x
        gv += exp_.grad_v
        per += exp_.per_sample
    value = imp_val + exp_val
    return TotalLoss(value, gx, gv, gW, per, implicit=imp_val, explicit=exp_val,
                     implicit_per_sample=imp_per)


def class_gaps(x, v, y, M) -> np.ndarray:
    """D_j = ||(M-1) sum_{y_i=j}(x_i+v_i) - sum_{y_i!=j}(x_i+v_i)|| for every class j."""
    y = np.asarray(y, dtype=np.int64)
    u = x + v
    per_class = np.zeros((M, x.shape[1]))
    np.add.at(per_class, y, u)
    total = u.sum(axis=0)
    # (M-1)*in_j - (total - in_j) = M*in_j - total
    return np.linalg.norm(M * per_class - total[None, :], axis=1)


def prop1_bound(x, v, y, W, tol=1e-9) -> BoundReport:
    """Lower bound of the uniform-weight implicit loss via Jensen on each softmax."""
    N = x.shape[0]
    M = W.shape[1]
    lhs = implicit_loss(x, v, y, W).value
    C = float(np.linalg.norm(W, axis=0).max())
    D = class_gaps(x, v, y, M)
    rhs = 2.0 * np.log(M) - C / (M * N) * float(D.sum())
    return BoundReport(lhs, C, D, float(rhs), bool(lhs >= rhs - tol))


@dataclass
class HingeReport:
    """Per-sample exact N-pair terms and their max-based brackets, per direction.

    Arrays are 2 x N: row 0 voice anchors against faces, row 1 the reverse.
    """

    exact: np.ndarray
    delta: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    violations: np.ndarray

    @property
    def n_violations(self) -> int:
        return int(self.violations.sum())


def hinge_diagnostic(x, v, y, m=3.4, normalize_anchor=False, rtol=1e-12) -> HingeReport:
    """Bracket each exact term by log(m + e^gap) and log(m + n_neg e^gap)."""
    y = np.asarray(y, dtype=np.int64)
    neg_mask = y[:, None] != y[None, :]
    n_neg = neg_mask.sum(axis=1)
    x_hat, _ = _normalize(x)
    v_hat, _ = _normalize(v)
    anchors = (v_hat if normalize_anchor else v, x_hat if normalize_anchor else x)
    galleries = (x_hat, v_hat)

    exact, delta, lower, upper = [], [], [], []
    for anchor, gallery in zip(anchors, galleries):
        term, _ = _npair_direction(anchor, gallery, neg_mask, m)
        a = anchor @ gallery.T
        gap = np.where(neg_mask, a, -np.inf).max(axis=1) - np.diag(a)
        lo = np.logaddexp(np.log(m), gap)
        with np.errstate(divide="ignore"):
            hi = np.logaddexp(np.log(m), gap + np.log(np.maximum(n_neg, 1)))
        exact.append(term)
        delta.append(gap)
        lower.append(lo)
        upper.append(hi)
    exact, delta, lower, upper = map(np.array, (exact, delta, lower, upper))
    slack = rtol * np.maximum(1.0, np.abs(exact))
    violations = (exact < lower - slack) | (exact > upper + slack)
    return HingeReport(exact, delta, lower, upper, violations)
