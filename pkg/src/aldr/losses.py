"""Training objectives and their gradient routing.

Every loss is a fused autodiff op with an analytic backward.  ``ROUTES`` lists
the parameter groups each objective is allowed to update; the trainer passes
those sets to :func:`aldr.autodiff.backward`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.polynomial import chebyshev

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DegenerateInputError, DimensionError, NumericFault, ParameterError, ValidationError

ROUTES: dict[str, frozenset[str]] = {
    "L_p": frozenset({"E_p", "C_speaker"}),
    "L_adv_s": frozenset({"C_adv"}),
    "L_adv_e": frozenset({"E_e"}),
    "L_r": frozenset({"D_r", "E_p", "E_e"}),
}

DEFAULT_WEIGHTS = (1.0, 0.1, 0.02)


def _targets(targets, logits: Tensor) -> np.ndarray:
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    if logits.ndim != 2 or t.shape[0] != logits.shape[0]:
        raise DimensionError(f"logits {logits.shape} do not match {t.shape[0]} targets")
    n = logits.shape[1]
    if t.size and (t.min() < 0 or t.max() >= n):
        raise ValidationError(f"targets must lie in [0, {n}), got range [{t.min()}, {t.max()}]")
    return t


def _log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_ce(logits: Tensor, targets) -> Tensor:
    """Mean over the batch of ``-log softmax(logits)[target]``."""
    t = _targets(targets, logits)
    logp = _log_softmax(logits.data)
    B = logp.shape[0]
    rows = np.arange(B)

    def _bw(g, needs):
        d = np.exp(logp)
        d[rows, t] -= 1.0
        return (d * (g / B),)

    return ad._make(np.array(-logp[rows, t].mean()), (logits,), _bw)


def adv_classifier_loss(logits_e: Tensor, targets) -> Tensor:
    """Speaker cross-entropy of the adversary on ``f_e``; update ``C_adv`` only."""
    return softmax_ce(logits_e, targets)


def adv_eliminate_loss(logits_e: Tensor) -> Tensor:
    """Cross-entropy between the adversary's prediction and the uniform distribution.

    Minimized (value ``log N``) exactly when the prediction is uniform.
    """
    if logits_e.ndim != 2:
        raise DimensionError(f"logits must be [B, N], got {logits_e.shape}")
    B, N = logits_e.shape
    if N < 2:
        raise ParameterError(f"need at least 2 classes, got {N}")
    logp = _log_softmax(logits_e.data)

    def _bw(g, needs):
        return ((np.exp(logp) - 1.0 / N) * (g / B),)

    return ad._make(np.array(-logp.mean(axis=1).mean()), (logits_e,), _bw)


def reconstruction_loss(S_hat: Tensor, S) -> Tensor:
    """Half squared L2 distance per item, averaged over the batch."""
    target = S.data if isinstance(S, Tensor) else np.asarray(S, dtype=np.float64)
    if S_hat.shape != target.shape:
        raise DimensionError(f"reconstruction shape {S_hat.shape} != target shape {target.shape}")
    diff = S_hat.data - target
    B = diff.shape[0] if diff.ndim else 1
    parents = (S_hat, S) if isinstance(S, Tensor) else (S_hat,)
    return ad._make(
        np.array(0.5 * np.sum(diff * diff) / B),
        parents,
        lambda g, needs: (diff * (g / B), -diff * (g / B)),
    )


# ---------------------------------------------------------------------------
# angular margin


@dataclass
class ASoftmaxConfig:
    m: int = 4
    lambda_cos: float = 5.0

    def __post_init__(self):
        if int(self.m) != self.m or self.m < 1:
            raise ParameterError(f"margin m must be an integer >= 1, got {self.m}")
        if self.lambda_cos < 0:
            raise ParameterError(f"lambda_cos must be >= 0, got {self.lambda_cos}")
        self.m = int(self.m)


def _margin_piece(cos_theta: np.ndarray, m: int) -> np.ndarray:
    theta = np.arccos(np.clip(cos_theta, -1.0, 1.0))
    return np.minimum(np.floor(theta * m / math.pi), m - 1)


def margin_phi(cos_theta, m: int):
    """``(-1)^k cos(m theta) - 2k`` evaluated from ``cos(theta)``.

    ``k`` is the index of the interval ``[k pi/m, (k+1) pi/m]`` holding theta;
    ``cos(m theta)`` is the Chebyshev polynomial ``T_m(cos theta)``.
    """
    if m < 1:
        raise ParameterError(f"margin m must be >= 1, got {m}")
    c = np.clip(np.asarray(cos_theta, dtype=np.float64), -1.0, 1.0)
    k = _margin_piece(c, m)
    sign = np.where(k % 2 == 0, 1.0, -1.0)
    return sign * chebyshev.chebval(c, [0] * m + [1]) - 2.0 * k


def margin_phi_derivative(cos_theta, m: int):
    """d phi / d cos(theta) on the piece holding ``cos_theta``."""
    c = np.clip(np.asarray(cos_theta, dtype=np.float64), -1.0, 1.0)
    k = _margin_piece(c, m)
    sign = np.where(k % 2 == 0, 1.0, -1.0)
    return sign * chebyshev.chebval(c, chebyshev.chebder([0] * m + [1]))


def margin_phi_angle(theta, m: int):
    return margin_phi(np.cos(theta), m)


def angular_margin_logits(features: Tensor, weights: Tensor, targets, cfg: ASoftmaxConfig) -> Tensor:
    """Logits ``|x| cos(theta_i)`` with the target entry replaced by the margin blend.

    Weight columns are normalized on every call; the target logit is
    ``(lambda |x| cos(theta_t) + |x| phi(theta_t)) / (lambda + 1)``.
    """
    x, W = features.data, weights.data
    if x.ndim != 2 or W.ndim != 2 or x.shape[1] != W.shape[0]:
        raise DimensionError(f"features {x.shape} incompatible with weights {W.shape}")
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    if t.shape[0] != x.shape[0]:
        raise DimensionError(f"{x.shape[0]} features but {t.shape[0]} targets")
    if t.size and (t.min() < 0 or t.max() >= W.shape[1]):
        raise ValidationError(f"targets must lie in [0, {W.shape[1]})")
    r = np.linalg.norm(x, axis=1)
    if np.any(r == 0):
        raise DegenerateInputError("a feature vector has zero norm; its angle is undefined")
    wn = np.linalg.norm(W, axis=0)
    if np.any(wn == 0):
        raise DegenerateInputError("a classifier weight column has zero norm")
    m, lam = cfg.m, float(cfg.lambda_cos)
    Wn = W / wn
    z = x @ Wn
    rows = np.arange(x.shape[0])
    c = np.clip(z[rows, t] / r, -1.0, 1.0)
    phi = margin_phi(c, m)
    dphi = margin_phi_derivative(c, m)
    out = z.copy()
    out[rows, t] = (lam * z[rows, t] + r * phi) / (lam + 1.0)

    def _bw(g, needs):
        gt = g[rows, t]
        gz = g.copy()
        gz[rows, t] = gt * lam / (lam + 1.0)
        a = gt / (lam + 1.0)
        dx = gz @ Wn.T
        # d(r * phi(c))/dx with c = x . w_t / r
        xhat = x / r[:, None]
        dx += a[:, None] * (phi[:, None] * xhat + dphi[:, None] * (Wn[:, t].T - c[:, None] * xhat))
        dWn = x.T @ gz
        np.add.at(dWn.T, t, (a * dphi)[:, None] * x)
        dW = (dWn - Wn * np.sum(Wn * dWn, axis=0)) / wn
        return (dx if needs[0] else None, dW if needs[1] else None)

    return ad._make(out, (features, weights), _bw)


def a_softmax_loss(features: Tensor, weights: Tensor, targets, cfg: ASoftmaxConfig | None = None) -> Tensor:
    cfg = cfg or ASoftmaxConfig()
    return softmax_ce(angular_margin_logits(features, weights, targets, cfg), targets)


def lambda_cos_schedule(step: int, start: float = 5.0, end: float = 5.0, steps: int = 1) -> float:
    """Linear decay from ``start`` to ``end`` over ``steps``; constant by default."""
    if steps <= 0 or step >= steps:
        return float(end)
    return float(start + (end - start) * step / steps)


# ---------------------------------------------------------------------------
# combination


@dataclass
class LossBundle:
    L_p: Tensor | None
    L_adv_s: Tensor | None
    L_adv_e: Tensor | None
    L_r: Tensor | None
    L_total: Tensor
    weights: tuple[float, float, float]

    def values(self) -> dict[str, float]:
        def v(t):
            return 0.0 if t is None else float(t.data)

        return {
            "L_p": v(self.L_p),
            "L_adv_s": v(self.L_adv_s),
            "L_adv_e": v(self.L_adv_e),
            "L_r": v(self.L_r),
            "L_total": v(self.L_total),
        }


def _as_tensor(x) -> Tensor | None:
    if x is None or isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def total_loss(
    L_p=None,
    L_adv_s=None,
    L_adv_e=None,
    L_r=None,
    lambda_p: float = 1.0,
    lambda_adv: float = 0.1,
    lambda_r: float = 0.02,
) -> LossBundle:
    """Weighted combination; absent components count as zero."""
    comps = {"L_p": _as_tensor(L_p), "L_adv_s": _as_tensor(L_adv_s), "L_adv_e": _as_tensor(L_adv_e), "L_r": _as_tensor(L_r)}
    for name, t in comps.items():
        if t is not None and not np.all(np.isfinite(t.data)):
            raise NumericFault(f"loss component {name} is not finite ({float(t.data)})", component=name)
    w = {"L_p": lambda_p, "L_adv_s": lambda_adv, "L_adv_e": lambda_adv, "L_r": lambda_r}
    present = [(t, w[n]) for n, t in comps.items() if t is not None]
    if present:
        total = ad.weighted_sum([t for t, _ in present], [x for _, x in present])
    else:
        total = Tensor(np.array(0.0))
    return LossBundle(comps["L_p"], comps["L_adv_s"], comps["L_adv_e"], comps["L_r"], total, (lambda_p, lambda_adv, lambda_r))
