"""
Kernel Ridge Regression
Kernel matrices, KRR prediction and the inducing-point loss with its gradient
"""

import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from scipy.spatial.distance import cdist

from .config_schema import KernelSpec
from .gradcheck import central_difference

logger = logging.getLogger(__name__)

JITTER_LADDER = (1.0, 10.0, 100.0)


class KernelSolveError(RuntimeError):
    """K(X~, X~) + lambda*I could not be factorized"""

    def __init__(self, message: str, lam: float):
        super().__init__(message)
        self.lam = lam


@dataclass(frozen=True, eq=False)
class SupportSet:
    """Support points X~ (n~ x d) with label rows y~ (n~ x S)"""
    points: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        points = np.atleast_2d(np.asarray(self.points, dtype=np.float64))
        labels = np.atleast_2d(np.asarray(self.labels, dtype=np.float64))
        if points.shape[0] != labels.shape[0]:
            raise ValueError(f"{points.shape[0]} support points but {labels.shape[0]} label rows")
        if not np.allclose(labels.sum(axis=1), 1.0, atol=1e-9):
            raise ValueError("support label rows must sum to 1")
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "labels", labels)


def _ntk_relu(a: np.ndarray, b: np.ndarray, depth: int) -> np.ndarray:
    # infinite-width ReLU network with c_sigma = 2, so diagonal entries stay at |x|^2 / d
    d = a.shape[1]
    sigma = a @ b.T / d
    norm = np.sqrt(np.outer(np.sum(a * a, axis=1) / d, np.sum(b * b, axis=1) / d))
    ntk = sigma.copy()
    for _ in range(depth):
        cos = np.divide(sigma, norm, out=np.zeros_like(sigma), where=norm > 0)
        theta = np.arccos(np.clip(cos, -1.0, 1.0))
        sigma_dot = (np.pi - theta) / np.pi
        sigma = norm * (np.sin(theta) + (np.pi - theta) * np.cos(theta)) / np.pi
        ntk = ntk * sigma_dot + sigma
    return ntk


def kernel_matrix(a: np.ndarray, b: np.ndarray, spec: KernelSpec) -> np.ndarray:
    """K_ij = k(a_i, b_j) for the RBF or the depth-L ReLU NTK"""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    if spec.variant == "rbf":
        return np.exp(-cdist(a, b, "sqeuclidean") / (2.0 * spec.bandwidth ** 2))
    return _ntk_relu(a, b, spec.depth)


def resolve_lambda(spec: KernelSpec, k_ss: np.ndarray) -> float:
    """Absolute lambda, or lambda0 scaled by the mean diagonal of K(X~, X~)"""
    if spec.regularization == "absolute":
        return spec.reg_value
    scale = float(np.mean(np.diag(k_ss))) if k_ss.size else 1.0
    return spec.reg_value * (scale if scale > 0 else 1.0)


def _factorize(k_ss: np.ndarray, lam: float) -> Tuple[tuple, float]:
    eye = np.eye(k_ss.shape[0])
    for step, factor in enumerate(JITTER_LADDER):
        reg = lam * factor
        try:
            chol = cho_factor(k_ss + reg * eye, lower=True)
        except (LinAlgError, ValueError):
            continue
        if np.all(np.isfinite(chol[0])):
            if step:
                logger.warning(f"KRR solve needed jitter escalation to lambda={reg:.3e}")
            return chol, reg
    raise KernelSolveError(
        f"K(X~, X~) + lambda*I is not positive definite for lambda up to {lam * JITTER_LADDER[-1]:.3e}",
        lam)


@dataclass
class _KrrFit:
    k_ss: np.ndarray
    k_ts: np.ndarray
    chol: tuple
    alpha: np.ndarray
    lam: float

    @property
    def predictions(self) -> np.ndarray:
        return self.k_ts @ self.alpha


def _fit(points: np.ndarray, labels: np.ndarray, targets: np.ndarray,
         spec: KernelSpec, lam: Optional[float]) -> _KrrFit:
    k_ss = kernel_matrix(points, points, spec)
    if lam is None:
        lam = resolve_lambda(spec, k_ss)
    chol, lam_used = _factorize(k_ss, lam)
    alpha = cho_solve(chol, labels)
    k_ts = kernel_matrix(targets, points, spec)
    return _KrrFit(k_ss, k_ts, chol, alpha, lam_used)


def krr_predict(support: SupportSet, targets: np.ndarray, spec: KernelSpec,
                lam: Optional[float] = None) -> np.ndarray:
    """K(X, X~) (K(X~, X~) + lambda I)^-1 y~ through a Cholesky solve"""
    return _fit(support.points, support.labels, targets, spec, lam).predictions


def _loss(fit: _KrrFit, y_onehot: np.ndarray) -> float:
    residual = y_onehot - fit.predictions
    return 0.5 * float(np.sum(residual * residual))


def kip_loss(support: SupportSet, targets: np.ndarray, y_onehot: np.ndarray,
             spec: KernelSpec, lam: Optional[float] = None) -> float:
    """0.5 * ||y - KRR(X)||_F^2"""
    return _loss(_fit(support.points, support.labels, targets, spec, lam), y_onehot)


def _rbf_grad(fit: _KrrFit, points: np.ndarray, targets: np.ndarray,
              y_onehot: np.ndarray, bandwidth: float) -> np.ndarray:
    residual = fit.predictions - y_onehot
    g_ts = residual @ fit.alpha.T  # dL/dK(X, X~)
    beta = cho_solve(fit.chol, fit.k_ts.T @ residual)
    g_ss = -beta @ fit.alpha.T  # dL/dK(X~, X~)

    w = g_ts * fit.k_ts
    grad = w.T @ targets - w.sum(axis=0)[:, None] * points
    v = (g_ss + g_ss.T) * fit.k_ss
    grad += v @ points - v.sum(axis=1)[:, None] * points
    return grad / bandwidth ** 2


def kip_loss_and_grad(support: SupportSet, targets: np.ndarray, y_onehot: np.ndarray,
                      spec: KernelSpec, lam: Optional[float] = None,
                      h: float = 1e-5) -> Tuple[float, np.ndarray]:
    """
    KIP loss and its gradient with respect to the support points

    RBF kernels are differentiated in closed form through both kernel blocks and the
    solve. Other kernels fall back to central differences (one loss per coordinate),
    which also captures the dependence of a trace-scaled lambda on X~.
    """
    targets = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    y_onehot = np.atleast_2d(np.asarray(y_onehot, dtype=np.float64))
    fit = _fit(support.points, support.labels, targets, spec, lam)
    loss = _loss(fit, y_onehot)
    if spec.variant == "rbf":
        return loss, _rbf_grad(fit, support.points, targets, y_onehot, spec.bandwidth)

    def loss_at(points: np.ndarray) -> float:
        return _loss(_fit(points, support.labels, targets, spec, lam), y_onehot)

    return loss, central_difference(loss_at, support.points, h)


def kip_grad(support: SupportSet, targets: np.ndarray, y_onehot: np.ndarray,
             spec: KernelSpec, lam: Optional[float] = None) -> np.ndarray:
    return kip_loss_and_grad(support, targets, y_onehot, spec, lam)[1]
