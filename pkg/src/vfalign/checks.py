"""Self-checks: finite-difference gradients, the implicit-loss lower bound, and
the hinge bracketing of the N-pair terms.

Every trial draws from ``Rng(seed).child(f"{suite}/{trial}")`` so a failure
can be replayed from the printed seed and trial number alone.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import Modality
from .encoders import EncoderParams, backward, forward, init
from .losses import hinge_diagnostic, prop1_bound, total_loss
from .rng import Rng

FD_STEP = 1e-6
GRAD_TOL = 1e-5
# Central differences carry ~eps*|f|/h of rounding error, about 2e-10*|f| at
# h=1e-6. Gradients below GRAD_FLOOR*max(1, |f|) are compared in absolute terms.
GRAD_FLOOR = 1e-4


@dataclass
class CheckReport:
    name: str
    trials: int
    passed: bool
    worst: float
    failures: list[dict] = field(default_factory=list)
    details: dict = field(default_factory=dict)

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: {self.trials} trials, worst={self.worst:.3e}"


def _objective(params: EncoderParams, xf, xv, y, variant: str):
    x, cx = forward(params, xf, Modality.FACE)
    v, cv = forward(params, xv, Modality.VOICE)
    out = total_loss(x, v, y, params.W, 3.4, None,
                     use_implicit=variant != "explicit", use_explicit=variant != "implicit")
    return out, cx, cv


def _pre_signs(params, xf, xv):
    return np.concatenate([
        np.sign(forward(params, xf, Modality.FACE)[1].pre).ravel(),
        np.sign(forward(params, xv, Modality.VOICE)[1].pre).ravel(),
    ])


def grad_trial(seed: int, trial: int, coords: int = 100) -> dict:
    """One random network + batch; compares analytic and central-difference grads
    of the implicit, explicit and total losses at ``coords`` parameter entries each."""
    rng = Rng(seed).child(f"grad/{trial}")
    dims = {"d_in": 6, "H": 8, "D": 5, "M": 7}
    N = 6
    params = init(dims, rng.child("init"))
    for enc in (params.face, params.voice):
        enc.b1 += rng.uniform(-0.2, 0.2, enc.b1.shape)
        enc.b2 += rng.uniform(-0.2, 0.2, enc.b2.shape)
    xf = rng.normal((N, dims["d_in"]))
    xv = rng.normal((N, dims["d_in"]))
    y = rng.choice(dims["M"], N)

    worst = {}
    for variant in ("implicit", "explicit", "total"):
        out, cx, cv = _objective(params, xf, xv, y, variant)
        grads = EncoderParams(backward(params, cx, out.grad_x), backward(params, cv, out.grad_v),
                              out.grad_W).named()
        named = params.named()
        names = [n for n in named if variant != "explicit" or n != "W"]
        base_signs = _pre_signs(params, xf, xv)
        floor = GRAD_FLOOR * max(1.0, abs(out.value))
        pick = rng.child(f"coords/{variant}")
        checked = 0
        err_max = 0.0
        while checked < coords:
            name = names[pick.integers(len(names))]
            arr = named[name]
            idx = tuple(int(pick.integers(s)) for s in arr.shape)
            old = arr[idx]
            values = []
            kink = False
            for delta in (FD_STEP, -FD_STEP):
                arr[idx] = old + delta
                if not np.array_equal(_pre_signs(params, xf, xv), base_signs):
                    kink = True
                values.append(_objective(params, xf, xv, y, variant)[0].value)
            arr[idx] = old
            if kink:
                continue
            numeric = (values[0] - values[1]) / (2 * FD_STEP)
            analytic = grads[name][idx]
            err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
            err_max = max(err_max, err)
            checked += 1
        worst[variant] = err_max
    return worst


def grad_suite(seed: int = 0, trials: int = 20, coords: int = 100) -> CheckReport:
    worst = 0.0
    failures = []
    per_loss = {"implicit": 0.0, "explicit": 0.0, "total": 0.0}
    for trial in range(trials):
        errs = grad_trial(seed, trial, coords)
        for k, e in errs.items():
            per_loss[k] = max(per_loss[k], e)
        if max(errs.values()) >= GRAD_TOL:
            failures.append({"seed": seed, "trial": trial, "errors": errs})
        worst = max(worst, *errs.values())
    return CheckReport("grad", trials, not failures, worst, failures,
                       {"worst_per_loss": per_loss, "coords_per_loss": coords})


def bound_instance(seed: int, trial: int):
    rng = Rng(seed).child(f"bound/{trial}")
    N, M, D = 1 + int(rng.integers(16)), 1 + int(rng.integers(8)), 1 + int(rng.integers(8))
    x = rng.normal((N, D)) * rng.uniform(0.1, 5.0)
    v = rng.normal((N, D)) * rng.uniform(0.1, 5.0)
    W = rng.normal((D, M))
    norms = np.linalg.norm(W, axis=0)
    W *= rng.uniform(0.0, 2.0, M) / np.where(norms > 0, norms, 1.0)
    return x, v, rng.integers(M, N), W


def bound_suite(seed: int = 0, trials: int = 1000) -> CheckReport:
    failures = []
    min_slack = np.inf
    for trial in range(trials):
        x, v, y, W = bound_instance(seed, trial)
        rep = prop1_bound(x, v, y, W)
        min_slack = min(min_slack, rep.slack)
        if not rep.holds:
            failures.append({"seed": seed, "trial": trial, "slack": rep.slack})
    # the bound is tight at W = 0
    x, v, y, W = bound_instance(seed, trials)
    tight = prop1_bound(x, v, y, np.zeros_like(W))
    equality = tight.lhs == tight.rhs or abs(tight.lhs - tight.rhs) <= 1e-12
    if not equality:
        failures.append({"seed": seed, "trial": "W=0", "slack": tight.slack})
    return CheckReport("bound", trials, not failures, float(min_slack), failures,
                       {"min_slack": float(min_slack), "zero_W_slack": tight.slack})


def hinge_suite(seed: int = 0, trials: int = 100, m: float = 3.4) -> CheckReport:
    failures = []
    violations = 0
    for trial in range(trials):
        rng = Rng(seed).child(f"hinge/{trial}")
        N, D = 2 + int(rng.integers(30)), 1 + int(rng.integers(16))
        x = rng.normal((N, D)) * rng.uniform(0.1, 10.0)
        v = rng.normal((N, D)) * rng.uniform(0.1, 10.0)
        rep = hinge_diagnostic(x, v, rng.permutation(N), m)
        violations += rep.n_violations
        if rep.n_violations:
            failures.append({"seed": seed, "trial": trial, "violations": rep.n_violations})

    # dominant negative: gap to the runner-up >= 20 puts the exact term at the lower end
    rng = Rng(seed).child("hinge/dominant")
    D = 4
    gallery = rng.normal((6, D))
    gallery /= np.linalg.norm(gallery, axis=1, keepdims=True)
    gallery[2:] = -gallery[1] + 1e-3 * rng.normal((4, D))
    anchor = np.zeros((6, D))
    anchor[0] = 30.0 * gallery[1]
    anchor[1:] = gallery[1:]
    rep = hinge_diagnostic(gallery, anchor, np.arange(6), m)
    a = anchor[0] @ (gallery / np.linalg.norm(gallery, axis=1, keepdims=True)).T
    runner_gap = a[1] - np.max(np.delete(a, [0, 1]))
    lower_gap = abs(rep.exact[0, 0] - rep.lower[0, 0])
    if runner_gap < 20 or lower_gap > 1e-8 or rep.n_violations:
        failures.append({"seed": seed, "trial": "dominant", "lower_gap": lower_gap,
                         "runner_gap": float(runner_gap)})
    return CheckReport("hinge", trials, not failures, float(violations), failures,
                       {"violations": violations, "dominant_lower_gap": lower_gap,
                        "dominant_runner_gap": float(runner_gap)})
