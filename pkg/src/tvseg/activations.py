"""Plain and TV-regularized activation layers.

The regularized softmax is the minimizer of the softmax variational
objective (negative linear term plus entropy over per-pixel simplices)
augmented with ``lam * TV``.  It is computed by the primal-dual projection
iteration: dual steps accumulate on a running ``xi`` field, ``eta`` is its
unit-disc projection, and the primal is a softmax of shifted logits.  The
regularized ReLU solves the nonnegativity-constrained ROF objective with
the same dual loop.

Two modes exist for the softmax:

* ``iterative`` -- T full dual iterations, used at test time;
* ``one_step``  -- a single iteration from zero initialization whose dual
  step is the fixed constant ``kappa``, cheap enough to run inside every
  training step.

Forward passes record tapes carrying exactly what the backward passes in
``tvseg.backward`` need.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .grid import div, grad, project_unit_disc


@dataclass(frozen=True)
class RegActConfig:
    """Knobs of the regularized activations.

    lam is the trainable TV weight; kappa the fixed scaled dual step of the
    one-step scheme; tau the dual step of the iterative scheme (stable up
    to 1/8); iterations the dual loop length T.
    """

    lam: float = 0.5
    kappa: float = 0.25
    tau: float = 0.125
    iterations: int = 100
    mode: str = "one_step"

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"lam must be >= 0, got {self.lam}")
        if self.kappa <= 0:
            raise ValueError(f"kappa must be > 0, got {self.kappa}")
        if not 0 < self.tau <= 0.125:
            raise ValueError(f"tau must be in (0, 1/8], got {self.tau}")
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        if self.mode not in ("one_step", "iterative"):
            raise ValueError(f"mode must be 'one_step' or 'iterative', got {self.mode!r}")


@dataclass
class OneStepTape:
    """Forward record of the one-step regularized softmax."""

    logits: np.ndarray
    probs0: np.ndarray  # softmax(logits), the point the dual step is taken at
    xi: np.ndarray
    eta: np.ndarray
    out: np.ndarray
    cfg: RegActConfig


@dataclass
class IterativeTape:
    """Full per-iteration history of the iterative regularized softmax.

    probs[k] is the primal after k dual iterations (probs[0] = softmax(o));
    xis[k-1]/etas[k-1] are the duals that produced probs[k].  residual is
    the final max-norm primal change, reported for convergence monitoring.
    """

    logits: np.ndarray
    cfg: RegActConfig
    probs: list = field(default_factory=list)
    xis: list = field(default_factory=list)
    etas: list = field(default_factory=list)
    residual: float = np.inf


def softmax(o: np.ndarray) -> np.ndarray:
    """Per-pixel softmax over the channel axis, overflow-safe."""
    z = o - o.max(axis=0, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=0, keepdims=True)


def relu(o: np.ndarray) -> np.ndarray:
    """Elementwise max(0, o)."""
    return np.maximum(o, 0.0)


def reg_softmax_onestep(o: np.ndarray, cfg: RegActConfig):
    """One dual iteration from zero initialization; returns (probs, tape)."""
    if cfg.mode != "one_step":
        raise ValueError("reg_softmax_onestep requires cfg.mode == 'one_step'")
    probs0 = softmax(o)
    xi = -cfg.kappa * grad(probs0)
    eta = project_unit_disc(xi)
    out = softmax(o - cfg.lam * div(eta))
    return out, OneStepTape(logits=o, probs0=probs0, xi=xi, eta=eta, out=out, cfg=cfg)


def reg_softmax_iterative(o: np.ndarray, cfg: RegActConfig):
    """T primal-dual iterations; returns (probs, eta, tape).

    Never fails on slow convergence: the last primal change in max-norm is
    stored in ``tape.residual`` for diagnostics.
    """
    if cfg.mode != "iterative":
        raise ValueError("reg_softmax_iterative requires cfg.mode == 'iterative'")
    probs = softmax(o)
    xi = np.zeros(grad(probs).shape, dtype=np.float64)
    eta = np.zeros_like(xi)
    tape = IterativeTape(logits=o, cfg=cfg, probs=[probs])
    step = cfg.tau * cfg.lam
    for _ in range(cfg.iterations):
        xi = xi - step * grad(probs)
        eta = project_unit_disc(xi)
        prev = probs
        probs = softmax(o - cfg.lam * div(eta))
        tape.xis.append(xi)
        tape.etas.append(eta)
        tape.probs.append(probs)
    tape.residual = float(np.abs(probs - prev).max())
    return probs, eta, tape


def reg_relu_iterative(o: np.ndarray, cfg: RegActConfig):
    """Regularized ReLU by the same dual loop; returns (out, eta)."""
    out = relu(o)
    xi = np.zeros(grad(out).shape, dtype=np.float64)
    eta = np.zeros_like(xi)
    step = cfg.tau * cfg.lam
    for _ in range(cfg.iterations):
        xi = xi - step * grad(out)
        eta = project_unit_disc(xi)
        out = relu(o - cfg.lam * div(eta))
    return out, eta


def post_tv(o: np.ndarray, lam: float, iterations: int = 100) -> np.ndarray:
    """Test-time TV post-processing of plain logits: run the full dual loop."""
    cfg = RegActConfig(lam=lam, tau=0.125, iterations=iterations, mode="iterative")
    probs, _, _ = reg_softmax_iterative(o, cfg)
    return probs
