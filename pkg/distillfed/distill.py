"""
Client Dataset Distillation
Kernel inducing points (KIP) and per-class GMM coresets, plus the JSONL upload format
"""

import json
import logging
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import numpy as np
from scipy.special import logsumexp

from .config_schema import DistillConfig
from .data import Dataset
from .kernel import SupportSet, kip_loss_and_grad, krr_predict
from .seeding import Stream, derive_rng, derive_seed

logger = logging.getLogger(__name__)


class DistillationError(RuntimeError):
    """Distillation produced a non-finite loss or gradient"""

    def __init__(self, message: str, step: int, loss_trace: List[float], client_id: int = -1):
        super().__init__(message)
        self.step = step
        self.loss_trace = loss_trace
        self.client_id = client_id


@dataclass
class DistillStats:
    client_id: int
    instance: str
    epochs: int = 0
    initial_accuracy: float = 0.0
    best_accuracy: float = 0.0
    last_accuracy: float = 0.0
    best_epoch: int = 0
    loss_trace: List[float] = field(default_factory=list)  # mean loss per epoch

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True, eq=False)
class DistilledDataset:
    """Synthetic support points with exact one-hot labels and per-row provenance"""
    points: np.ndarray
    labels: np.ndarray
    client_ids: np.ndarray
    instance: str
    stats: Optional[DistillStats] = None

    def __post_init__(self):
        points = np.asarray(self.points, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.float64)
        client_ids = np.asarray(self.client_ids, dtype=np.int64).reshape(-1)
        if points.ndim != 2 or labels.ndim != 2:
            raise ValueError("points and labels must be matrices")
        if not points.shape[0] == labels.shape[0] == client_ids.shape[0]:
            raise ValueError("points, labels and client ids must have equal row counts")
        if labels.size and not (np.all((labels == 0.0) | (labels == 1.0)) and np.all(labels.sum(axis=1) == 1.0)):
            raise ValueError("distilled labels must be exact one-hot rows")
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "client_ids", client_ids)

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def num_classes(self) -> int:
        return self.labels.shape[1]

    @property
    def classes(self) -> np.ndarray:
        return np.argmax(self.labels, axis=1) if len(self) else np.zeros(0, dtype=np.int64)

    @property
    def client_id(self) -> int:
        """Lowest contributing client id (the canonical sort key)"""
        return int(self.client_ids.min()) if len(self) else -1

    def support(self) -> SupportSet:
        return SupportSet(self.points, self.labels)

    @classmethod
    def empty(cls, dim: int, num_classes: int, instance: str = "kip") -> "DistilledDataset":
        return cls(np.zeros((0, dim)), np.zeros((0, num_classes)), np.zeros(0, dtype=np.int64), instance)


@dataclass
class GmmModel:
    """Diagonal-covariance Gaussian mixture"""
    means: np.ndarray
    covariances: np.ndarray
    weights: np.ndarray
    log_likelihood_trace: List[float]
    reseeded: int = 0

    @property
    def n_iter(self) -> int:
        return len(self.log_likelihood_trace) - 1


def distill_accuracy(points: np.ndarray, labels: np.ndarray, client_data: Dataset, cfg: DistillConfig) -> float:
    """Argmax agreement of KRR on the support with the true local labels"""
    predictions = krr_predict(SupportSet(points, labels), client_data.features, cfg.kernel)
    return float(np.mean(np.argmax(predictions, axis=1) == client_data.labels))


def _jittered_sample(features: np.ndarray, count: int, jitter_std: float,
                     rng: np.random.Generator) -> np.ndarray:
    chosen = rng.choice(features.shape[0], size=count, replace=True)
    return features[chosen] + rng.normal(0.0, jitter_std, size=(count, features.shape[1]))


def init_support(client_data: Dataset, cfg: DistillConfig, client_id: int = 0,
                 instance: str = "kip") -> DistilledDataset:
    """Seeded per-class sample of imgs_per_class local points"""
    rng = derive_rng(cfg.seed, Stream.INIT_SUPPORT)
    per_class = cfg.imgs_per_class
    blocks, classes = [], []
    for c in np.unique(client_data.labels):
        members = client_data.features[client_data.labels == c]
        if members.shape[0] >= per_class:
            blocks.append(members[rng.choice(members.shape[0], size=per_class, replace=False)])
        else:
            logger.warning(f"Client {client_id}: class {c} has {members.shape[0]} points for "
                           f"{per_class} per class, sampling with jitter")
            blocks.append(_jittered_sample(members, per_class, cfg.jitter_std, rng))
        classes.extend([int(c)] * per_class)
    labels = np.eye(client_data.num_classes)[classes]
    return DistilledDataset(np.vstack(blocks), labels, np.full(len(classes), client_id), instance)


def distill_kip(client_data: Dataset, cfg: DistillConfig, client_id: int = 0) -> DistilledDataset:
    """
    Kernel inducing points on one client's data

    Each step draws a target batch of ceil(target_batch_frac * n_k) local points and takes a
    plain gradient step on the full support set; labels stay fixed. After every epoch the
    distillation accuracy is measured on the whole local dataset, the best snapshot is kept
    and the loop stops once the accuracy reaches acc_threshold.
    """
    start = init_support(client_data, cfg, client_id)
    points, labels = start.points.copy(), start.labels
    targets, target_onehot = client_data.features, client_data.onehot()
    n = len(client_data)
    batch = max(1, math.ceil(cfg.target_batch_frac * n))
    rng = derive_rng(cfg.seed, Stream.DISTILL)

    initial = distill_accuracy(points, labels, client_data, cfg)
    stats = DistillStats(client_id, "kip", initial_accuracy=initial, best_accuracy=initial, last_accuracy=initial)
    best_points = points.copy()
    step_losses: List[float] = []

    for epoch in range(1, cfg.max_epochs + 1):
        perm = rng.permutation(n)
        epoch_losses = []
        for lo in range(0, n, batch):
            idx = perm[lo:lo + batch]
            loss, grad = kip_loss_and_grad(SupportSet(points, labels), targets[idx], target_onehot[idx], cfg.kernel)
            step_losses.append(loss)
            if not (np.isfinite(loss) and np.all(np.isfinite(grad))):
                raise DistillationError(
                    f"client {client_id}: non-finite KIP loss/gradient at step {len(step_losses)}",
                    step=len(step_losses), loss_trace=step_losses, client_id=client_id)
            points = points - cfg.distill_lr * grad
            epoch_losses.append(loss)

        accuracy = distill_accuracy(points, labels, client_data, cfg)
        stats.epochs = epoch
        stats.last_accuracy = accuracy
        stats.loss_trace.append(float(np.mean(epoch_losses)))
        logger.debug(f"Client {client_id} epoch {epoch}: loss {stats.loss_trace[-1]:.6f}, acc {accuracy:.4f}")
        if accuracy > stats.best_accuracy:
            stats.best_accuracy = accuracy
            stats.best_epoch = epoch
            best_points = points.copy()
        if accuracy >= cfg.acc_threshold:
            break

    logger.info(f"Client {client_id}: KIP finished after {stats.epochs} epochs, "
                f"accuracy {stats.initial_accuracy:.3f} -> {stats.best_accuracy:.3f}")
    return DistilledDataset(best_points, labels, start.client_ids, "kip", stats)


def _kmeans_plus_plus(points: np.ndarray, m: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    centers = [points[rng.integers(n)]]
    for _ in range(1, m):
        d2 = np.min(((points[:, None, :] - np.asarray(centers)[None, :, :]) ** 2).sum(axis=2), axis=1)
        total = d2.sum()
        idx = rng.integers(n) if total <= 0 else rng.choice(n, p=d2 / total)
        centers.append(points[idx])
    return np.array(centers)


def _e_step(points: np.ndarray, means: np.ndarray, covariances: np.ndarray, weights: np.ndarray):
    diff2 = (points[:, None, :] - means[None, :, :]) ** 2
    log_prob = -0.5 * np.sum(np.log(2.0 * np.pi * covariances)[None, :, :] + diff2 / covariances[None, :, :], axis=2)
    with np.errstate(divide="ignore"):
        log_prob = log_prob + np.log(weights)[None, :]
    log_norm = logsumexp(log_prob, axis=1)
    return log_prob - log_norm[:, None], float(np.mean(log_norm))


def fit_gmm(points: np.ndarray, m: int, seed: int, max_iter: int = 100,
            tol: float = 1e-6, eps_floor: float = 1e-6) -> GmmModel:
    """
    Fit an m-component diagonal GMM with EM

    Args:
        points: N x d samples, N >= m
        m: number of components
        seed: seeds the k-means++ initialisation
        max_iter: EM iteration budget
        tol: stop once the mean log-likelihood gains less than this
        eps_floor: lower bound for every variance entry

    Returns:
        GmmModel whose trace holds the mean log-likelihood before the first and after every M-step.
        A component whose responsibility mass vanishes is re-seeded at the point farthest from
        the other means.
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    n = points.shape[0]
    if n < m:
        raise ValueError(f"cannot fit {m} components to {n} points")
    rng = derive_rng(seed, Stream.GMM)
    base_var = np.maximum(points.var(axis=0), eps_floor)
    means = _kmeans_plus_plus(points, m, rng)
    covariances = np.tile(base_var, (m, 1))
    weights = np.full(m, 1.0 / m)
    reseeded = 0

    log_resp, ll = _e_step(points, means, covariances, weights)
    trace = [ll]
    for _ in range(max_iter):
        resp = np.exp(log_resp)
        nk = resp.sum(axis=0)
        empty = nk < 10.0 * np.finfo(np.float64).eps * n
        live = ~empty
        means = means.copy()
        means[live] = (resp[:, live].T @ points) / nk[live][:, None]
        for k in np.flatnonzero(live):
            covariances[k] = np.maximum(resp[:, k] @ (points - means[k]) ** 2 / nk[k], eps_floor)
        for k in np.flatnonzero(empty):
            others = means[np.arange(m) != k]
            d2 = ((points[:, None, :] - others[None, :, :]) ** 2).sum(axis=2).min(axis=1)
            means[k] = points[int(np.argmax(d2))]
            covariances[k] = base_var
            nk[k] = 1.0
            reseeded += 1
            logger.warning(f"GMM component {k} lost all mass, re-seeded at the farthest point")
        weights = nk / nk.sum()

        log_resp, ll = _e_step(points, means, covariances, weights)
        trace.append(ll)
        if ll - trace[-2] < tol:
            break

    return GmmModel(means, covariances, weights, trace, reseeded)


def distill_coreset_gmm(client_data: Dataset, cfg: DistillConfig, client_id: int = 0) -> DistilledDataset:
    """Per owned class, GMM component means with imgs_per_class components"""
    per_class = cfg.imgs_per_class
    fallback_rng = derive_rng(cfg.seed, Stream.INIT_SUPPORT)
    blocks, classes = [], []
    for c in np.unique(client_data.labels):
        members = client_data.features[client_data.labels == c]
        if members.shape[0] >= per_class:
            gmm = fit_gmm(members, per_class, derive_seed(cfg.seed, int(c)),
                          cfg.gmm_max_iter, cfg.gmm_tol, cfg.gmm_eps_floor)
            blocks.append(gmm.means)
        else:
            logger.warning(f"Client {client_id}: class {c} has {members.shape[0]} points for "
                           f"{per_class} components, sampling with jitter")
            blocks.append(_jittered_sample(members, per_class, cfg.jitter_std, fallback_rng))
        classes.extend([int(c)] * per_class)

    points = np.vstack(blocks)
    labels = np.eye(client_data.num_classes)[classes]
    accuracy = distill_accuracy(points, labels, client_data, cfg)
    stats = DistillStats(client_id, "coreset", initial_accuracy=accuracy,
                         best_accuracy=accuracy, last_accuracy=accuracy)
    return DistilledDataset(points, labels, np.full(len(classes), client_id), "coreset", stats)


def write_jsonl(distilled: DistilledDataset, path: Union[str, Path]) -> None:
    """One record per support point: client_id, class, vector"""
    with open(path, "w") as f:
        for client_id, cls, vector in zip(distilled.client_ids, distilled.classes, distilled.points):
            f.write(json.dumps({"client_id": int(client_id), "class": int(cls), "vector": vector.tolist()}) + "\n")


def read_jsonl(path: Union[str, Path], num_classes: int, instance: str = "kip") -> DistilledDataset:
    records = [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
    if not records:
        raise ValueError(f"{path}: no distilled records")
    points = np.array([r["vector"] for r in records], dtype=np.float64)
    labels = np.eye(num_classes)[[r["class"] for r in records]]
    return DistilledDataset(points, labels, [r["client_id"] for r in records], instance)
