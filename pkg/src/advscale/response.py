"""Linear response of the logits to L2-normalized gradient attacks.

For a unit-norm attack direction d = g/||g||_2 (g the cross-entropy input
gradient), the logits move to first order as h(x + eps*d) ~ h(x) + eps*G(x)
where G(x) = J^T J delta / ||J delta||_2 is the response vector built from
the input-logit Jacobian J and the output error delta = p - onehot(y).

From G come three estimates of the smallest class-flipping perturbation:
the measured crossing along the fixed direction (`epsilon_hat_true`), the
per-class threshold minimum from the linearization (`epsilon_hat_linear`),
and a mean-field version using dataset-averaged rank-ordered response
entries (`epsilon_hat_mf`).

All perturbation scans here follow the theory and do NOT clip to the valid
pixel range; the attacks module owns clipped evaluation.  Ranks are
1-based: rank 1 is the largest clean logit.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import nn
from .attacks import DegenerateGradientError

_CE = nn.LossSpec(0.0)

DEFAULT_EPS_MAX = 64.0
DEFAULT_TOL = 1e-3
GRID_POINTS = 64


@dataclass(frozen=True)
class GammaRecord:
    """Per-example response vector in clean-logit rank order.

    gamma[i] is the response of the (i+1)-th largest clean logit;
    rank_map[c] is the 0-based rank of class c (rank_map[argmax] == 0).
    """

    gamma: np.ndarray
    rank_map: np.ndarray


@dataclass(frozen=True)
class MeanGamma:
    """Rank-ordered response entries averaged over a dataset."""

    mean_gamma: np.ndarray
    n_examples: int
    n_degenerate: int = 0

    @property
    def top2_gap(self) -> float:
        """<G_2> - <G_1>: how fast the top logit gap closes per unit eps."""
        return float(self.mean_gamma[1] - self.mean_gamma[0])


@dataclass(frozen=True)
class EpsilonHatRecord:
    example_id: int
    delta_12: float
    eps_hat_true: Optional[float]
    eps_hat_linear: Optional[float]
    eps_hat_mf: Optional[float]
    fooled_into_rank: Optional[int]


def _response_batch(net, x, y):
    """Vectorized response computation over a batch.

    Returns (logits, order, gamma_ranked, direction, degenerate) where
    order[b] lists class indices by descending clean logit (stable ties),
    gamma_ranked rows are in that order, direction rows are the unit-norm
    attack directions (zero rows where degenerate).
    """
    xb, _ = nn._as_batch(net, x)
    yb = np.atleast_1d(np.asarray(y, dtype=np.int64))
    logits, caches = nn._forward(net, xb)
    delta = nn.ce_delta(nn.softmax(logits), yb)
    g, _ = nn._backward(net, caches, delta)  # J delta, raw-pixel space
    flat = g.reshape(len(g), -1)
    norms = np.linalg.norm(flat, axis=1)
    degenerate = norms == 0.0
    safe = np.where(degenerate, 1.0, norms)
    direction = (flat / safe[:, None]).reshape(g.shape)
    direction[degenerate] = 0.0
    gamma_class = nn._jvp(net, caches, direction)  # J^T J delta / ||J delta||
    order = np.argsort(-logits, axis=1, kind="stable")
    gamma_ranked = np.take_along_axis(gamma_class, order, axis=1)
    return logits, order, gamma_ranked, direction, degenerate


def gamma(net, x, y) -> GammaRecord:
    """Response vector of one example, reordered by clean-logit rank."""
    logits, order, gamma_ranked, _, degenerate = _response_batch(net, x, y)
    if degenerate[0]:
        raise DegenerateGradientError("||J delta|| = 0: no response direction")
    rank_map = np.empty(net.n_classes, dtype=np.int64)
    rank_map[order[0]] = np.arange(net.n_classes)
    return GammaRecord(gamma_ranked[0], rank_map)


def linear_logits(net, x, y, epsilon: float) -> np.ndarray:
    """First-order prediction h(x) + eps * G(x) in class order (unranked)."""
    xb, _ = nn._as_batch(net, x)
    yb = np.atleast_1d(np.asarray(y, dtype=np.int64))
    logits, caches = nn._forward(net, xb)
    delta = nn.ce_delta(nn.softmax(logits), yb)
    g, _ = nn._backward(net, caches, delta)
    flat = g.reshape(len(g), -1)
    norms = np.linalg.norm(flat, axis=1)
    if np.any(norms == 0.0):
        raise DegenerateGradientError("||J delta|| = 0: no response direction")
    direction = (flat / norms[:, None]).reshape(g.shape)
    pred = logits + epsilon * nn._jvp(net, caches, direction)
    return pred[0] if np.asarray(x).shape == tuple(net.input_shape) else pred


def attack_direction(net, x, y) -> np.ndarray:
    """Unit-norm L2 attack direction(s) at the clean input."""
    _, _, _, direction, degenerate = _response_batch(net, x, y)
    if degenerate.any():
        raise DegenerateGradientError(
            f"zero gradient for {int(degenerate.sum())} example(s)"
        )
    return direction[0] if np.asarray(x).shape == tuple(net.input_shape) else direction


def epsilon_hat_true_batch(net, x, y, eps_max: float = DEFAULT_EPS_MAX,
                           tol: float = DEFAULT_TOL, direction=None):
    """Smallest class-flipping perturbation along a fixed clean-point
    direction (default: the unit-norm L2 attack direction), for every
    example at once.

    Scans a log-spaced grid for the first argmax change, then bisects the
    bracketing interval down to absolute width tol.  Returns
    (eps_hat, fooled_rank, clean_correct): eps_hat is NaN where the scan
    never fooled the network, 0.0 where the clean prediction was already
    wrong (flagged by clean_correct=False); fooled_rank is the 1-based
    clean rank of the class that overtook rank 1 (0 where undefined).
    """
    xb, _ = nn._as_batch(net, x)
    yb = np.atleast_1d(np.asarray(y, dtype=np.int64))
    n = len(xb)
    logits, order, _, default_dir, degenerate = _response_batch(net, xb, yb)
    if direction is None:
        direction = default_dir
    else:
        direction = np.asarray(direction, dtype=np.float64).reshape(xb.shape)
        degenerate = np.zeros(n, dtype=bool)
    clean_pred = order[:, 0]
    clean_correct = clean_pred == yb

    eps_hat = np.full(n, np.nan)
    fooled_rank = np.zeros(n, dtype=np.int64)
    eps_hat[~clean_correct] = 0.0
    active = clean_correct & ~degenerate

    bshape = (-1,) + (1,) * len(net.input_shape)
    grid = np.geomspace(tol, eps_max, GRID_POINTS)

    lo = np.zeros(n)
    hi = np.full(n, np.nan)
    flipped_class = np.full(n, -1, dtype=np.int64)
    pending = active.copy()
    prev = np.zeros(n)
    for eps in grid:
        if not pending.any():
            break
        idx = np.flatnonzero(pending)
        x_try = xb[idx] + eps * direction[idx]
        pred = np.argmax(nn.forward(net, x_try), axis=1)
        changed = pred != clean_pred[idx]
        hit = idx[changed]
        lo[hit] = prev[hit]
        hi[hit] = eps
        flipped_class[hit] = pred[changed]
        pending[hit] = False
        prev[idx] = eps

    found = active & ~pending & ~np.isnan(hi)
    if found.any():
        idx = np.flatnonzero(found)
        flo = lo[idx].copy()
        fhi = hi[idx].copy()
        fcls = flipped_class[idx].copy()
        width = fhi - flo
        n_iter = int(np.ceil(np.log2(max(width.max() / tol, 1.0)))) + 1
        for _ in range(n_iter):
            mid = 0.5 * (flo + fhi)
            x_try = xb[idx] + mid.reshape(bshape) * direction[idx]
            pred = np.argmax(nn.forward(net, x_try), axis=1)
            changed = pred != clean_pred[idx]
            fhi = np.where(changed, mid, fhi)
            fcls = np.where(changed, pred, fcls)
            flo = np.where(changed, flo, mid)
        eps_hat[idx] = 0.5 * (flo + fhi)
        # clean rank of the class whose logit overtook rank 1 (1-based)
        rank_of = np.argsort(order[idx], axis=1, kind="stable")
        fooled_rank[idx] = rank_of[np.arange(len(idx)), fcls] + 1
    return eps_hat, fooled_rank, clean_correct


def epsilon_hat_true(net, x, y, eps_max: float = DEFAULT_EPS_MAX,
                     tol: float = DEFAULT_TOL, direction=None) -> Optional[float]:
    """Single-example wrapper: None when never fooled within eps_max,
    0.0 when the clean prediction is already wrong."""
    if direction is not None:
        direction = np.asarray(direction)[None]
    eps_hat, _, _ = epsilon_hat_true_batch(
        net, np.asarray(x)[None], [y], eps_max, tol, direction
    )
    return None if np.isnan(eps_hat[0]) else float(eps_hat[0])


def epsilon_hat_linear(net, x, y) -> Optional[float]:
    """min over ranks j of Delta_1j / (G_j - G_1), candidates restricted to
    ranks whose response gap is positive; None when no candidate exists."""
    rec = gamma(net, x, y)
    logits = nn.forward(net, x)
    return epsilon_hat_linear_from(np.sort(logits)[::-1], rec.gamma)


def epsilon_hat_linear_from(sorted_logits: np.ndarray, gamma_ranked: np.ndarray) -> Optional[float]:
    deltas = sorted_logits[0] - sorted_logits[1:]
    gaps = gamma_ranked[1:] - gamma_ranked[0]
    ok = gaps > 0.0
    if not ok.any():
        return None
    return float(np.min(deltas[ok] / gaps[ok]))


def mean_gamma(net, data, correct_only: bool = True) -> MeanGamma:
    """Componentwise average of rank-ordered response vectors.

    By default only correctly classified examples enter the average (the
    linearized theory assumes correct clean prediction); degenerate
    examples are skipped and counted.
    """
    x = np.asarray(data.inputs, dtype=np.float64)
    y = np.asarray(data.labels, dtype=np.int64)
    logits, order, gamma_ranked, _, degenerate = _response_batch(net, x, y)
    keep = ~degenerate
    if correct_only:
        keep &= order[:, 0] == y
    if not keep.any():
        raise DegenerateGradientError("no usable examples for mean response")
    return MeanGamma(
        mean_gamma=gamma_ranked[keep].mean(axis=0),
        n_examples=int(keep.sum()),
        n_degenerate=int(degenerate.sum()),
    )


def epsilon_hat_mf(delta_12: float, mg: MeanGamma) -> Optional[float]:
    """Mean-field estimate Delta_12 / (<G_2> - <G_1>); None when the mean
    response gap is not positive."""
    if delta_12 < 0:
        raise ValueError("delta_12 must be >= 0")
    gap = mg.top2_gap
    if gap <= 0.0:
        return None
    return delta_12 / gap


def epsilon_tilde(epsilon, mg: MeanGamma):
    """Network-specific rescaling eps * (<G_2> - <G_1>) that maps attack
    budgets onto the logit-gap axis."""
    return np.asarray(epsilon, dtype=np.float64) * mg.top2_gap


def epsilon_hat_records(net, data, eps_max: float = DEFAULT_EPS_MAX,
                        tol: float = DEFAULT_TOL,
                        mg: Optional[MeanGamma] = None) -> list:
    """All three estimators for every example of a dataset."""
    x = np.asarray(data.inputs, dtype=np.float64)
    y = np.asarray(data.labels, dtype=np.int64)
    if mg is None:
        mg = mean_gamma(net, data)
    logits, order, gamma_ranked, _, degenerate = _response_batch(net, x, y)
    sorted_logits = np.take_along_axis(logits, order, axis=1)
    delta12 = sorted_logits[:, 0] - sorted_logits[:, 1]
    eps_true, fooled_rank, _ = epsilon_hat_true_batch(net, x, y, eps_max, tol)
    records = []
    for i in range(len(x)):
        lin = (
            None
            if degenerate[i]
            else epsilon_hat_linear_from(sorted_logits[i], gamma_ranked[i])
        )
        records.append(
            EpsilonHatRecord(
                example_id=i,
                delta_12=float(delta12[i]),
                eps_hat_true=None if np.isnan(eps_true[i]) else float(eps_true[i]),
                eps_hat_linear=lin,
                eps_hat_mf=epsilon_hat_mf(float(delta12[i]), mg),
                fooled_into_rank=int(fooled_rank[i]) if fooled_rank[i] > 0 else None,
            )
        )
    return records


def write_epsilon_hat_csv(path, records) -> None:
    """CSV schema: example_id, delta_12, eps_hat_true, eps_hat_linear,
    eps_hat_mf, fooled_into_rank; absent values are empty fields."""

    def cell(v):
        return "" if v is None else repr(float(v)) if isinstance(v, float) else str(v)

    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow([
            "example_id", "delta_12", "eps_hat_true",
            "eps_hat_linear", "eps_hat_mf", "fooled_into_rank",
        ])
        for r in records:
            w.writerow([
                r.example_id,
                repr(r.delta_12),
                cell(r.eps_hat_true),
                cell(r.eps_hat_linear),
                cell(r.eps_hat_mf),
                "" if r.fooled_into_rank is None else r.fooled_into_rank,
            ])


def fgsm_rank2_fraction(net, data, eps_values) -> float:
    """Fraction of successfully attacked examples whose prediction flips
    into the clean rank-2 class.

    A success is a correctly classified example that the signed-gradient
    attack misclassifies at some budget in `eps_values`; the flip class is
    the prediction at the success threshold (located by bisecting the
    bracketing grid interval), i.e. the first gap to close along the
    attack path, which is what the dominant-failure-mode claim is about."""
    x = np.asarray(data.inputs, dtype=np.float64)
    y = np.asarray(data.labels, dtype=np.int64)
    logits = nn.forward(net, x)
    order = np.argsort(-logits, axis=1, kind="stable")
    rank2 = order[:, 1]
    correct = order[:, 0] == y
    move = np.sign(nn.grad_input(net, x, y, _CE))
    bshape = (-1,) + (1,) * len(net.input_shape)

    pending = correct.copy()
    lo = np.zeros(len(x))
    hi = np.zeros(len(x))
    flipped_to = np.full(len(x), -1, dtype=np.int64)
    prev = np.zeros(len(x))
    for eps in np.sort(np.asarray(eps_values, dtype=np.float64)):
        if not pending.any():
            break
        idx = np.flatnonzero(pending)
        x_adv = np.clip(x[idx] + eps * move[idx], 0.0, 255.0)
        pred = np.argmax(nn.forward(net, x_adv), axis=1)
        hit = pred != y[idx]
        lo[idx[hit]] = prev[idx[hit]]
        hi[idx[hit]] = eps
        flipped_to[idx[hit]] = pred[hit]
        pending[idx[hit]] = False
        prev[idx] = eps
    success = flipped_to >= 0
    if not success.any():
        raise ValueError("no successful attacks in the given budget range")
    idx = np.flatnonzero(success)
    flo, fhi, fcls = lo[idx], hi[idx], flipped_to[idx]
    for _ in range(18):
        mid = 0.5 * (flo + fhi)
        x_adv = np.clip(x[idx] + mid.reshape(bshape) * move[idx], 0.0, 255.0)
        pred = np.argmax(nn.forward(net, x_adv), axis=1)
        changed = pred != y[idx]
        fhi = np.where(changed, mid, fhi)
        fcls = np.where(changed, pred, fcls)
        flo = np.where(changed, flo, mid)
    return float(np.mean(fcls == rank2[idx]))
