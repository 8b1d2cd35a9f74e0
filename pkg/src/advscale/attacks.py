"""Gradient-based adversarial attacks and adversarial-error evaluation.

Four families: single-step signed-gradient (fgsm_linf), its L2-normalized
variant (fgsm_l2), the single-step least-likely-class descent (step_ll)
and iterated projected signed-gradient ascent (pgd).  Budgets live on the
raw [0, 255] pixel scale.  sign(0) = 0, and attacked pixels are clipped
back into [0, 255] unless a spec disables it.

Attacks always differentiate the plain cross-entropy loss, regardless of
how the model was trained: the attacker targets misclassification, not
the training objective.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import nn

FAMILIES = ("fgsm_linf", "fgsm_l2", "step_ll", "pgd")

_CE = nn.LossSpec(0.0)


class DegenerateGradientError(ValueError):
    """The loss gradient vanished, so no attack direction exists."""


@dataclass(frozen=True)
class AttackSpec:
    family: str
    epsilon: float
    pgd_steps: int = 20
    pgd_step_size: Optional[float] = None  # default 2.5 * eps / steps
    pgd_random_start: bool = False
    clip_to_valid: bool = True

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown attack family {self.family!r}")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.pgd_steps <= 0:
            raise ValueError("pgd_steps must be positive")
        if self.pgd_step_size is not None and self.pgd_step_size <= 0:
            raise ValueError("pgd_step_size must be positive")

    @property
    def step_size(self) -> float:
        if self.pgd_step_size is not None:
            return self.pgd_step_size
        return 2.5 * self.epsilon / self.pgd_steps


def _clip(x_adv: np.ndarray, clip: bool) -> np.ndarray:
    return np.clip(x_adv, 0.0, 255.0) if clip else x_adv


def fgsm(net, x, y, epsilon: float, clip: bool = True) -> np.ndarray:
    """x + eps * sign(dL/dx), clipped to the valid pixel range."""
    g = nn.grad_input(net, x, y, _CE)
    return _clip(x + epsilon * np.sign(g), clip)


def _l2_directions(net, x, y):
    """Unit-norm gradient directions; degenerate rows flagged, not raised."""
    g = nn.grad_input(net, x, y, _CE)
    flat = g.reshape(g.shape[0], -1)
    norms = np.linalg.norm(flat, axis=1)
    degenerate = norms == 0.0
    safe = np.where(degenerate, 1.0, norms)
    d = (flat / safe[:, None]).reshape(g.shape)
    d[degenerate] = 0.0
    return d, degenerate


def fgsm_l2(net, x, y, epsilon: float, clip: bool = True) -> np.ndarray:
    """x + eps * dL/dx / ||dL/dx||_2; before clipping the perturbation has
    L2 norm exactly eps.  Raises DegenerateGradientError on zero gradient."""
    xb, single = nn._as_batch(net, x)
    yb = np.atleast_1d(np.asarray(y, dtype=np.int64))
    d, degenerate = _l2_directions(net, xb, yb)
    if degenerate.any():
        raise DegenerateGradientError(
            f"zero loss gradient for {int(degenerate.sum())} example(s)"
        )
    out = _clip(xb + epsilon * d, clip)
    return out[0] if single else out


def least_likely_class(net, x) -> np.ndarray:
    """argmin of the clean logits (ties resolved to the lowest index)."""
    logits = nn.forward(net, x)
    return np.argmin(logits, axis=-1)


def step_ll(net, x, epsilon: float, clip: bool = True) -> np.ndarray:
    """Move toward the least-likely class: x - eps * sign(dL(x, y_ll)/dx)."""
    y_ll = least_likely_class(net, x)
    g = nn.grad_input(net, x, y_ll, _CE)
    return _clip(x - epsilon * np.sign(g), clip)


def project_linf(x_adv: np.ndarray, x0: np.ndarray, epsilon: float) -> np.ndarray:
    """Nearest point of the L-infinity ball of radius eps around x0."""
    return np.clip(x_adv, x0 - epsilon, x0 + epsilon)


def pgd(net, x, y, spec: AttackSpec, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """k-step projected signed-gradient ascent inside the eps L-inf ball.

    With one step, step size eps and no random start this reduces bitwise
    to fgsm.  The optional random start draws uniformly from the ball.
    """
    if spec.family != "pgd":
        raise ValueError(f"pgd called with family {spec.family!r}")
    xb, single = nn._as_batch(net, x)
    yb = np.atleast_1d(np.asarray(y, dtype=np.int64))
    x0 = xb
    eps = spec.epsilon
    cur = x0
    if spec.pgd_random_start:
        if rng is None:
            rng = np.random.default_rng(0)
        cur = _clip(x0 + rng.uniform(-eps, eps, size=x0.shape), spec.clip_to_valid)
    for _ in range(spec.pgd_steps):
        g = nn.grad_input(net, cur, yb, _CE)
        cur = cur + spec.step_size * np.sign(g)
        cur = project_linf(cur, x0, eps)
        cur = _clip(cur, spec.clip_to_valid)
    return cur[0] if single else cur


def apply_attack(net, x, y, spec: AttackSpec, rng=None,
                 skip_degenerate: bool = False) -> np.ndarray:
    """Dispatch on spec.family.  With skip_degenerate, zero-gradient
    examples are left unperturbed instead of raising (curve evaluation)."""
    if spec.family == "fgsm_linf":
        return fgsm(net, x, y, spec.epsilon, spec.clip_to_valid)
    if spec.family == "step_ll":
        return step_ll(net, x, spec.epsilon, spec.clip_to_valid)
    if spec.family == "pgd":
        return pgd(net, x, y, spec, rng)
    if spec.family == "fgsm_l2":
        if not skip_degenerate:
            return fgsm_l2(net, x, y, spec.epsilon, spec.clip_to_valid)
        xb, single = nn._as_batch(net, x)
        yb = np.atleast_1d(np.asarray(y, dtype=np.int64))
        d, _ = _l2_directions(net, xb, yb)
        out = _clip(xb + spec.epsilon * d, spec.clip_to_valid)
        return out[0] if single else out
    raise ValueError(f"unknown attack family {spec.family!r}")


def default_eps_grid(lo: float = 0.01, hi: float = 64.0, n: int = 32) -> np.ndarray:
    """Log-spaced budget grid densely sampling the small-eps window."""
    return np.geomspace(lo, hi, n)


@dataclass
class AdvErrorCurve:
    """Adversarial error (clean accuracy minus attacked accuracy) over a
    budget grid, plus clipping/degeneracy audit counts."""

    epsilons: np.ndarray
    clean_accuracy: float
    adv_accuracy: np.ndarray
    adv_error: np.ndarray
    clipped_frac: np.ndarray  # fraction of coordinates clipping touched
    n_degenerate: np.ndarray = field(default=None)
    family: str = ""

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["epsilon", "clean_acc", "adv_acc", "adv_error", "n_clipped_frac"])
            for i, eps in enumerate(self.epsilons):
                w.writerow([
                    repr(float(eps)),
                    repr(self.clean_accuracy),
                    repr(float(self.adv_accuracy[i])),
                    repr(float(self.adv_error[i])),
                    repr(float(self.clipped_frac[i])),
                ])


def adv_error_curve(net, data, spec_template: AttackSpec, eps_grid,
                    rng: Optional[np.random.Generator] = None) -> AdvErrorCurve:
    """Attack every example at each budget on the grid and measure the
    accuracy drop.  Zero-gradient examples count as unperturbed; the count
    is recorded in the curve metadata."""
    eps_grid = np.asarray(eps_grid, dtype=np.float64)
    if len(eps_grid) > 1 and np.any(np.diff(eps_grid) <= 0):
        raise ValueError("epsilon grid must be strictly increasing")
    if len(eps_grid) and eps_grid[0] < 0:
        raise ValueError("epsilon grid must be nonnegative")
    x = np.asarray(data.inputs, dtype=np.float64)
    y = np.asarray(data.labels, dtype=np.int64)
    clean_acc = nn.accuracy(net, x, y)

    # single-step directions do not depend on eps: compute them once
    fam = spec_template.family
    if fam == "fgsm_linf":
        move = np.sign(nn.grad_input(net, x, y, _CE))
        n_deg = np.zeros(len(eps_grid), dtype=np.int64)
    elif fam == "step_ll":
        move = -np.sign(nn.grad_input(net, x, least_likely_class(net, x), _CE))
        n_deg = np.zeros(len(eps_grid), dtype=np.int64)
    elif fam == "fgsm_l2":
        move, degenerate = _l2_directions(net, x, y)
        n_deg = np.full(len(eps_grid), int(degenerate.sum()), dtype=np.int64)
    elif fam == "pgd":
        move = None
        n_deg = np.zeros(len(eps_grid), dtype=np.int64)
    else:
        raise ValueError(f"unknown attack family {fam!r}")

    adv_acc = np.zeros(len(eps_grid))
    clipped = np.zeros(len(eps_grid))
    for i, eps in enumerate(eps_grid):
        if fam == "pgd":
            x_adv = pgd(net, x, y, replace(spec_template, epsilon=float(eps)), rng)
            # valid-range clipping pins coordinates exactly at the bounds
            at_bound = ((x_adv == 0.0) & (x > 0.0)) | ((x_adv == 255.0) & (x < 255.0))
            clipped[i] = float(np.mean(at_bound)) if eps > 0 else 0.0
        else:
            raw = x + eps * move
            x_adv = _clip(raw, spec_template.clip_to_valid)
            clipped[i] = float(np.mean(x_adv != raw)) if eps > 0 else 0.0
        adv_acc[i] = nn.accuracy(net, x_adv, y)
    return AdvErrorCurve(
        epsilons=eps_grid,
        clean_accuracy=clean_acc,
        adv_accuracy=adv_acc,
        adv_error=clean_acc - adv_acc,
        clipped_frac=clipped,
        n_degenerate=n_deg,
        family=fam,
    )


def transfer_eval(source_net, target_net, data, spec: AttackSpec,
                  rng: Optional[np.random.Generator] = None) -> float:
    """Adversarial accuracy of target_net on examples crafted against
    source_net only (the target is never queried for gradients)."""
    if tuple(source_net.input_shape) != tuple(target_net.input_shape):
        raise ValueError("source and target input shapes differ")
    if source_net.n_classes != target_net.n_classes:
        raise ValueError("source and target class counts differ")
    x = np.asarray(data.inputs, dtype=np.float64)
    y = np.asarray(data.labels, dtype=np.int64)
    x_adv = apply_attack(source_net, x, y, spec, rng=rng, skip_degenerate=True)
    return nn.accuracy(target_net, x_adv, y)
