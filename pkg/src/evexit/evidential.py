"""Beta/Dirichlet evidence: belief masses, uncertainty, entropies, losses.

Two-sided API: plain numpy functions for inference and reporting, and
graph-building counterparts (suffix ``_t``) used in training so the
entropy-regularized losses are differentiable end to end.

Conventions. Head logits z are mapped to concentrations via relu(z) + 1,
so alpha, beta >= 1 always. For a Beta head, b1 = (alpha-1)/(alpha+beta)
is the positive belief, b2 = (beta-1)/(alpha+beta) the negative belief,
u = 2/(alpha+beta), and b1 + b2 + u = 1 exactly. For a C-class Dirichlet,
b = (alpha-1)/S with S = sum(alpha), and u = C/S = 1 - sum(b).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special as _sp

from . import tensor as T
from .tensor import Tensor

__all__ = [
    "BetaEvidence",
    "DirichletEvidence",
    "LossConfig",
    "EvidenceError",
    "beta_from_logits",
    "dirichlet_from_logits",
    "beta_prediction",
    "dirichlet_prediction",
    "beta_entropy",
    "dirichlet_entropy",
    "beta_log_pdf",
    "binary_evidence_loss_t",
    "multiclass_evidence_loss_t",
]

PROB_EPS = 1e-7


class EvidenceError(ValueError):
    """Evidence invariant violated (some concentration below 1)."""


@dataclass(frozen=True)
class BetaEvidence:
    """Per-event two-parameter evidence; arrays broadcast elementwise."""

    alpha: np.ndarray
    beta: np.ndarray

    def __post_init__(self):
        a, b = np.asarray(self.alpha), np.asarray(self.beta)
        if np.any(a < 1.0) or np.any(b < 1.0):
            raise EvidenceError("Beta evidence requires alpha, beta >= 1")
        object.__setattr__(self, "alpha", a)
        object.__setattr__(self, "beta", b)


@dataclass(frozen=True)
class DirichletEvidence:
    """C-class evidence; last axis indexes classes."""

    alpha: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.alpha)
        if np.any(a < 1.0):
            raise EvidenceError("Dirichlet evidence requires alpha >= 1")
        object.__setattr__(self, "alpha", a)

    @property
    def strength(self) -> np.ndarray:
        return self.alpha.sum(axis=-1)


@dataclass(frozen=True)
class LossConfig:
    """Entropy-regularizer weight with an optional linear warm-up ramp."""

    lam: float = 0.1
    anneal_epochs: int = 10

    def __post_init__(self):
        if not np.isfinite(self.lam) or self.lam < 0:
            raise ValueError(f"lambda must be finite and >= 0, got {self.lam}")

    def lam_at(self, epoch: int) -> float:
        if self.anneal_epochs <= 0:
            return self.lam
        return self.lam * min(1.0, epoch / self.anneal_epochs)


def beta_from_logits(z: np.ndarray) -> BetaEvidence:
    """logits (..., 2) -> evidence with alpha = relu(z0)+1, beta = relu(z1)+1."""
    z = np.asarray(z)
    if z.shape[-1] != 2:
        raise ValueError(f"expected trailing axis of 2 logits, got shape {z.shape}")
    ev = np.maximum(z, 0.0) + 1.0
    return BetaEvidence(alpha=ev[..., 0], beta=ev[..., 1])


def dirichlet_from_logits(z: np.ndarray) -> DirichletEvidence:
    return DirichletEvidence(alpha=np.maximum(np.asarray(z), 0.0) + 1.0)


def beta_prediction(ev: BetaEvidence) -> dict[str, np.ndarray]:
    """Belief masses, predicted class, uncertainty and mean probability.

    yhat is 0 for a positive prediction, 1 for negative; the tie
    p = 0.5 resolves to the lower index (positive).
    """
    s = ev.alpha + ev.beta
    b1 = (ev.alpha - 1.0) / s
    b2 = (ev.beta - 1.0) / s
    u = 2.0 / s
    p = ev.alpha / s
    yhat = np.where(b2 > b1, 1, 0)
    return {"b1": b1, "b2": b2, "u": u, "p": p, "yhat": yhat}


def dirichlet_prediction(ev: DirichletEvidence) -> dict[str, np.ndarray]:
    s = ev.strength[..., None]
    b = (ev.alpha - 1.0) / s
    p = ev.alpha / s
    u = 1.0 - b.sum(axis=-1)
    yhat = np.argmax(p, axis=-1)
    return {"b": b, "p": p, "u": u, "yhat": yhat}


def beta_entropy(alpha, beta) -> np.ndarray:
    """Differential entropy of Beta(alpha, beta) in nats."""
    return dirichlet_entropy(np.stack(np.broadcast_arrays(alpha, beta), axis=-1))


def dirichlet_entropy(alpha) -> np.ndarray:
    """Differential entropy of Dirichlet(alpha); classes on the last axis.

    H = ln B(alpha) + (S - C) psi(S) - sum_c (alpha_c - 1) psi(alpha_c).
    """
    alpha = np.asarray(alpha, dtype=np.float64)
    if np.any(alpha <= 0):
        raise ValueError("Dirichlet entropy needs strictly positive alpha")
    c = alpha.shape[-1]
    s = alpha.sum(axis=-1)
    log_b = _sp.gammaln(alpha).sum(axis=-1) - _sp.gammaln(s)
    return log_b + (s - c) * _sp.psi(s) - ((alpha - 1.0) * _sp.psi(alpha)).sum(axis=-1)


def beta_log_pdf(p, alpha, beta) -> np.ndarray:
    """log Beta(p; alpha, beta) density, float64; used by quadrature checks."""
    p = np.asarray(p, dtype=np.float64)
    log_b = _sp.gammaln(alpha) + _sp.gammaln(beta) - _sp.gammaln(alpha + beta)
    return (alpha - 1.0) * np.log(p) + (beta - 1.0) * np.log1p(-p) - log_b


def _dirichlet_entropy_t(alpha: Tensor) -> Tensor:
    """Graph version of dirichlet_entropy over the last axis."""
    c = alpha.shape[-1]
    s = T.tensor_sum(alpha, axis=-1)
    log_b = T.sub(T.tensor_sum(T.lgamma(alpha), axis=-1), T.lgamma(s))
    mid = T.mul(T.sub(s, float(c)), T.digamma(s))
    tail = T.tensor_sum(T.mul(T.sub(alpha, 1.0), T.digamma(alpha)), axis=-1)
    return T.sub(T.add(log_b, mid), tail)


def _evidence_t(logits: Tensor) -> Tensor:
    return T.add(T.relu(logits), 1.0)


def binary_evidence_loss_t(logits: Tensor, labels: np.ndarray, lam: float) -> Tensor:
    """BCE on the Beta mean minus lam times the Beta entropy, averaged.

    logits: (N, C, 2) head outputs; labels: (N, C) one-vs-all 0/1 targets.
    The mean probability alpha/(alpha+beta) is clamped to
    [1e-7, 1 - 1e-7] before the log terms.
    """
    labels = np.asarray(labels)
    if not np.isin(labels, (0, 1)).all():
        raise ValueError("labels must be 0/1")
    if logits.shape[:-1] != labels.shape or logits.shape[-1] != 2:
        raise ValueError(f"logits {logits.shape} do not match labels {labels.shape}")
    ev = _evidence_t(logits)  # (N, C, 2), alpha at index 0
    s = T.tensor_sum(ev, axis=-1)
    alpha = T.tensor_sum(T.mul(ev, np.array([1.0, 0.0], dtype=logits.dtype)), axis=-1)
    p = T.clip(T.div(alpha, s), PROB_EPS, 1.0 - PROB_EPS)
    y = labels.astype(logits.dtype)
    bce = T.sub(
        T.mul(T.mul(y, T.log(p)), -1.0),
        T.mul(1.0 - y, T.log(T.sub(1.0, p))),
    )
    per_head = bce if lam == 0.0 else T.sub(bce, T.mul(_dirichlet_entropy_t(ev), lam))
    return T.tensor_mean(per_head)


def multiclass_evidence_loss_t(logits: Tensor, labels: np.ndarray, lam: float) -> Tensor:
    """Cross-entropy on the Dirichlet mean minus lam times its entropy.

    logits: (N, C); labels: (N,) class indices.
    """
    labels = np.asarray(labels)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    onehot = np.zeros((n, c), dtype=logits.dtype)
    onehot[np.arange(n), labels] = 1.0
    ev = _evidence_t(logits)
    s = T.tensor_sum(ev, axis=-1, keepdims=True)
    p = T.clip(T.div(ev, s), PROB_EPS, 1.0 - PROB_EPS)
    ce = T.mul(T.tensor_sum(T.mul(onehot, T.log(p)), axis=-1), -1.0)
    per_sample = ce if lam == 0.0 else T.sub(ce, T.mul(_dirichlet_entropy_t(ev), lam))
    return T.tensor_mean(per_sample)
