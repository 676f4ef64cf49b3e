"""Exact reverse-mode gradients for the regularized activations.

The one-step backward follows the two routes by which the logits reach the
output A = S(o - lam*div(eta)):

* directly through the shifted softmax, and
* through eta = P(-kappa * grad(S(o))).

Transposing the chain uses that grad and div are negative adjoints
(grad^T = -div, div^T = -grad) and that the per-pixel softmax Jacobian
diag(s) - s s^T and the disc-projection Jacobian are both symmetric.

The multi-iteration backward is exact reverse-mode over the unrolled dual
loop actually executed by the forward pass: gradients with respect to
eta^k, xi^k and A^k are accumulated in inverse iteration order, the xi
gradient flowing unchanged into the previous iteration, and every
iteration contributes a shifted-softmax term to d/do.

A finite-difference harness validates all of it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .activations import IterativeTape, OneStepTape
from .grid import div, dual_norms, grad


def softmax_jvp(probs: np.ndarray, vec: np.ndarray) -> np.ndarray:
    """Apply the softmax Jacobian (diag(s) - s s^T) per pixel; symmetric, so
    this is both the JVP and the VJP."""
    dot = (probs * vec).sum(axis=0, keepdims=True)
    return probs * (vec - dot)


def _project_vjp(xi: np.ndarray, d_eta: np.ndarray) -> np.ndarray:
    """Transposed Jacobian of the unit-disc projection at xi applied to d_eta.

    Identity where ||xi|| <= 1 (including the boundary, where the interior
    branch is the continuous choice), (I - u u^T)/||xi|| with u = xi/||xi||
    outside.
    """
    norm = dual_norms(xi)[:, None, :, :]
    safe = np.maximum(norm, 1.0)
    unit = xi / safe
    dot = (unit * d_eta).sum(axis=1, keepdims=True)
    outside = (d_eta - unit * dot) / safe
    return np.where(norm > 1.0, outside, d_eta)


def reg_softmax_onestep_backward(tape: OneStepTape, d_out: np.ndarray) -> np.ndarray:
    """d(loss)/d(logits) for the one-step regularized softmax.

    d_out is d(loss)/d(output).  The eta route picks up the factor
    kappa*lam: lam from the logit shift, kappa from the dual step.
    """
    if not isinstance(tape, OneStepTape):
        raise TypeError("reg_softmax_onestep_backward needs a one-step tape")
    if d_out.shape != tape.out.shape:
        raise ValueError(f"d_out shape {d_out.shape} != output shape {tape.out.shape}")
    cfg = tape.cfg
    dz = softmax_jvp(tape.out, d_out)
    d_eta = cfg.lam * grad(dz)
    d_xi = _project_vjp(tape.xi, d_eta)
    d_probs0 = -div(-cfg.kappa * d_xi)
    return dz + softmax_jvp(tape.probs0, d_probs0)


def reg_softmax_unrolled_backward(tape: IterativeTape, d_out: np.ndarray) -> np.ndarray:
    """d(loss)/d(logits) through all T iterations of the dual loop.

    Reverse sweep over the executed graph: for every iteration the primal
    gradient splits into a direct shifted-softmax term on the logits and a
    dual term; the dual term flows through the projection into xi, where it
    both feeds the previous primal (via the gradient step) and carries over
    unchanged to the previous xi.
    """
    if not isinstance(tape, IterativeTape):
        raise TypeError("reg_softmax_unrolled_backward needs an iterative tape")
    if d_out.shape != tape.logits.shape:
        raise ValueError(f"d_out shape {d_out.shape} != logits shape {tape.logits.shape}")
    cfg = tape.cfg
    d_probs = d_out
    d_xi_carry = np.zeros_like(tape.xis[0]) if tape.xis else None
    d_o = np.zeros_like(tape.logits)
    for t in range(len(tape.xis), 0, -1):
        dz = softmax_jvp(tape.probs[t], d_probs)
        d_o += dz
        d_eta = cfg.lam * grad(dz)
        d_xi = _project_vjp(tape.xis[t - 1], d_eta) + d_xi_carry
        d_probs = cfg.tau * cfg.lam * div(d_xi)
        d_xi_carry = d_xi
    return d_o + softmax_jvp(tape.probs[0], d_probs)


def lambda_gradient(tape: OneStepTape, d_out: np.ndarray) -> float:
    """d(loss)/d(lam) for the one-step scheme.

    Exact there because eta = P(-kappa*grad(S(o))) does not involve lam;
    only the logit shift -lam*div(eta) does.
    """
    if not isinstance(tape, OneStepTape):
        raise TypeError("lambda_gradient needs a one-step tape (eta depends on lam "
                        "in iterative mode)")
    dz = softmax_jvp(tape.out, d_out)
    return float(-(div(tape.eta) * dz).sum())


def update_lambda(lam: float, grad_lam: float, tau_lambda: float) -> float:
    """Gradient step on the TV weight, clamped at zero."""
    if tau_lambda <= 0:
        raise ValueError(f"tau_lambda must be > 0, got {tau_lambda}")
    return max(0.0, lam - tau_lambda * grad_lam)


@dataclass
class GradReport:
    """Outcome of one finite-difference validation run.

    max_rel_err is per-coordinate against the numeric gradient, with small
    entries measured against 1e-3 times the overall gradient scale so that
    roundoff on near-zero coordinates does not drown the comparison.
    """

    max_rel_err: float
    max_abs_err: float
    probes: int
    tolerance: float
    nonfinite_probes: int = 0

    @property
    def passed(self) -> bool:
        return self.nonfinite_probes == 0 and self.max_rel_err <= self.tolerance


def finite_diff_check(forward, point: np.ndarray, analytic: np.ndarray,
                      epsilon: float = 1e-5, tolerance: float = 1e-6,
                      max_probes: int = 200, seed: int = 0) -> GradReport:
    """Central-difference check of an analytic gradient of a scalar function.

    Every coordinate is probed when the field has at most 64 entries;
    larger fields get max_probes randomly sampled coordinates.  Non-finite
    forward values are counted in the report instead of propagating.
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise ValueError(f"epsilon must lie in [1e-7, 1e-3], got {epsilon}")
    point = np.asarray(point, dtype=np.float64)
    flat = point.ravel()
    n = flat.size
    if n <= 64:
        coords = np.arange(n)
    else:
        coords = np.random.default_rng(seed).choice(n, size=min(max_probes, n),
                                                    replace=False)
    ana = np.asarray(analytic, dtype=np.float64).ravel()
    numeric = np.zeros(len(coords))
    nonfinite = 0
    for k, i in enumerate(coords):
        x = flat.copy()
        x[i] += epsilon
        fp = forward(x.reshape(point.shape))
        x[i] -= 2 * epsilon
        fm = forward(x.reshape(point.shape))
        if not (np.isfinite(fp) and np.isfinite(fm)):
            nonfinite += 1
            continue
        numeric[k] = (fp - fm) / (2 * epsilon)
    picked = ana[coords]
    abs_err = np.abs(picked - numeric)
    scale = max(np.abs(picked).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    denom = np.maximum(np.abs(numeric), max(1e-3 * scale, 1e-300))
    max_rel = float((abs_err / denom).max(initial=0.0))
    if nonfinite:
        max_rel = np.inf
    return GradReport(max_rel_err=max_rel, max_abs_err=float(abs_err.max(initial=0.0)),
                      probes=len(coords), tolerance=tolerance,
                      nonfinite_probes=nonfinite)
