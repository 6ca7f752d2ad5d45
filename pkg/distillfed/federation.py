"""
Federated Orchestration
One-shot FedD3, model-averaging baselines (FedAvg, FedProx, FedNova, SCAFFOLD),
hybrid FedD3 and straggler injection
"""

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence, TypeVar

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .config_schema import FedConfig, Method, ModelSpec
from .data import Dataset, Partition, make_partition
from .data_qa import PartitionQA
from .distill import DistillationError, DistilledDataset, distill_coreset_gmm, distill_kip
from .kernel import KernelSolveError
from .metrics import BITS_PER_PARAMETER, CommLedger, distilled_uplink_bits, model_uplink_bits
from .model import NonFiniteError, ProxTerm, Weights, evaluate, mlp_init, sgd_train
from .seeding import Stream, derive_rng, derive_seed

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")


class ClientFailure(RuntimeError):
    """A client could not produce its upload"""

    def __init__(self, message: str, client_id: int):
        super().__init__(message)
        self.client_id = client_id


@dataclass
class ClientState:
    client_id: int
    data: Dataset
    control: Optional[np.ndarray] = None  # SCAFFOLD c_k
    distilled_pool: Optional[DistilledDataset] = None  # hybrid: uploads of every other client


@dataclass(frozen=True)
class LocalUpdate:
    client_id: int
    num_samples: int
    weights: Optional[Weights] = None
    steps: int = 0
    control: Optional[np.ndarray] = None
    error: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.error is None


class RunReport(BaseModel):
    """Outcome of one federated run"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    method: str
    seed: int
    accuracies: List[float] = Field(default_factory=list)  # test accuracy after each round
    ledger: CommLedger
    survivors: List[List[int]] = Field(default_factory=list)
    failed_clients: List[List[int]] = Field(default_factory=list)
    distill_stats: List[Dict[str, Any]] = Field(default_factory=list)
    partition_qa: Dict[str, Any] = Field(default_factory=dict)
    config: Dict[str, Any] = Field(default_factory=dict)
    wall_time_seconds: float = 0.0
    final_weights: Optional[Weights] = Field(default=None, exclude=True)
    # SCAFFOLD state after the last round
    server_control: Optional[np.ndarray] = Field(default=None, exclude=True)
    client_controls: Optional[Dict[int, np.ndarray]] = Field(default=None, exclude=True)

    @property
    def rounds_executed(self) -> int:
        return len(self.ledger)

    @property
    def final_accuracy(self) -> float:
        return self.accuracies[-1] if self.accuracies else 0.0

    def curve_rows(self) -> List[Dict[str, Any]]:
        """round, cum_uplink_bits, cum_log2_volume, test_acc"""
        rows, cum_bits, cum_log2 = [], 0, 0.0
        for entry, acc in zip(self.ledger.rounds, self.accuracies):
            cum_bits += entry.uplink_bits
            cum_log2 += entry.log2_term
            rows.append({"round": entry.round, "cum_uplink_bits": cum_bits,
                         "cum_log2_volume": cum_log2, "test_acc": acc})
        return rows


def _map_clients(fn: Callable[[T], R], items: Sequence[T], workers: int) -> List[R]:
    # results come back in submission order whatever the worker count
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=min(32, workers)) as executor:
        return list(executor.map(fn, items))


def apply_stragglers(clients: Iterable[int], drop_rate: float, round_index: int, seed: int) -> List[int]:
    """Seeded Bernoulli drop, one independent draw per (round, client)"""
    if not 0.0 <= drop_rate < 1.0:
        raise ValueError(f"drop_rate must lie in [0, 1), got {drop_rate}")
    clients = list(clients)
    if drop_rate == 0.0:
        return clients
    return [k for k in clients
            if derive_rng(seed, Stream.STRAGGLER, round_index, k).random() >= drop_rate]


def aggregate_distilled(uploads: Sequence[DistilledDataset]) -> DistilledDataset:
    """Union of client uploads in ascending client-id order, provenance kept per row"""
    if not uploads:
        raise ValueError("no distilled uploads to aggregate")
    dim, num_classes = uploads[0].dim, uploads[0].num_classes
    for upload in uploads:
        if upload.dim != dim:
            raise ValueError(f"client {upload.client_id} uploaded dimension {upload.dim}, expected {dim}")
        if upload.num_classes != num_classes:
            raise ValueError(f"client {upload.client_id} uploaded {upload.num_classes} classes, "
                             f"expected {num_classes}")
    ordered = sorted(uploads, key=lambda u: u.client_id)
    instances = {u.instance for u in ordered}
    return DistilledDataset(
        np.vstack([u.points for u in ordered]),
        np.vstack([u.labels for u in ordered]),
        np.concatenate([u.client_ids for u in ordered]),
        instances.pop() if len(instances) == 1 else "mixed",
    )


def _partition(cfg: FedConfig, train: Dataset, partition: Optional[Partition]) -> Partition:
    if partition is None:
        partition = make_partition(train, cfg.partition, cfg.num_clients, cfg.classes_per_client, cfg.seed)
    if partition.num_clients != cfg.num_clients:
        raise ValueError(f"partition has {partition.num_clients} clients, config expects {cfg.num_clients}")
    return partition


def _partition_qa(train: Dataset, partition: Partition) -> Dict[str, Any]:
    return PartitionQA(train, partition).run_all_checks()


def _model_spec(cfg: FedConfig, train: Dataset) -> ModelSpec:
    return ModelSpec(widths=[train.dim, *cfg.hidden_widths, train.num_classes], seed=cfg.seed)


def distill_client(cfg: FedConfig, client_id: int, data: Dataset, instance: str) -> DistilledDataset:
    """Distill one client's data with its own derived seed"""
    dcfg = cfg.distill.model_copy(update={"seed": derive_seed(cfg.seed, Stream.DISTILL, client_id)})
    try:
        if instance == "kip":
            return distill_kip(data, dcfg, client_id)
        return distill_coreset_gmm(data, dcfg, client_id)
    except (DistillationError, KernelSolveError, ValueError) as e:
        raise ClientFailure(f"client {client_id}: distillation failed: {e}", client_id) from e


def _distill_all(cfg: FedConfig, train: Dataset, partition: Partition,
                 clients: Sequence[int], instance: str) -> List[DistilledDataset]:
    return _map_clients(
        lambda k: distill_client(cfg, k, partition.client_data(train, k), instance),
        list(clients), cfg.client_workers)


def run_fedd3(cfg: FedConfig, train: Dataset, test: Dataset,
              partition: Optional[Partition] = None) -> RunReport:
    """
    One-shot FedD3

    Surviving clients distill their data once and upload it; the server trains the
    global model on the union of the uploads. The ledger holds exactly one round.
    """
    if not cfg.method.is_fedd3:
        raise ValueError(f"run_fedd3 needs a fedd3 method, got {cfg.method.value}")
    start = time.perf_counter()
    partition = _partition(cfg, train, partition)
    qa = _partition_qa(train, partition)
    instance = "kip" if cfg.method == Method.FEDD3_KIP else "coreset"
    logger.info(f"FedD3 ({instance}): {cfg.num_clients} clients, seed {cfg.seed}")

    survivors = apply_stragglers(range(cfg.num_clients), cfg.straggler_drop_rate, 0, cfg.seed)
    uploads = _distill_all(cfg, train, partition, survivors, instance)

    ledger = CommLedger(method=cfg.method.value)
    weights = mlp_init(_model_spec(cfg, train))
    if uploads:
        pool = aggregate_distilled(uploads)
        ledger.record([distilled_uplink_bits(u, cfg.image_channels, cfg.bit_depth, train.num_classes)
                       for u in uploads])
        server_cfg = cfg.server_train.model_copy(update={"seed": derive_seed(cfg.seed, Stream.SERVER_TRAIN)})
        weights, _ = sgd_train(weights, pool.points, pool.labels, server_cfg)
    else:
        logger.warning("Every client dropped out, the global model stays at its initialisation")
        ledger.record([])

    acc = evaluate(weights, test)
    logger.info(f"FedD3 done: {len(uploads)}/{cfg.num_clients} uploads, "
                f"{ledger.total_uplink_bits} uplink bits, test accuracy {acc:.4f}")
    return RunReport(
        method=cfg.method.value, seed=cfg.seed, accuracies=[acc], ledger=ledger,
        survivors=[list(survivors)], failed_clients=[[]],
        distill_stats=[u.stats.to_dict() for u in uploads if u.stats is not None],
        partition_qa=qa, config=cfg.model_dump(mode="json"),
        wall_time_seconds=time.perf_counter() - start, final_weights=weights)


def _local_update(cfg: FedConfig, round_index: int, client: ClientState, global_weights: Weights,
                  server_control: Optional[np.ndarray]) -> LocalUpdate:
    train_cfg = cfg.local_train.model_copy(update={
        "epochs": cfg.local_epochs,
        "seed": derive_seed(cfg.seed, Stream.LOCAL_TRAIN, round_index, client.client_id),
    })
    features, targets = client.data.features, client.data.onehot()
    if client.distilled_pool is not None and len(client.distilled_pool):
        features = np.vstack([features, client.distilled_pool.points])
        targets = np.vstack([targets, client.distilled_pool.labels])
    n = features.shape[0]

    prox = ProxTerm(cfg.fedprox_mu, global_weights) if cfg.method == Method.FEDPROX else None
    scaffold = cfg.method == Method.SCAFFOLD
    correction = server_control - client.control if scaffold else None
    gradient_sum = np.zeros(global_weights.param_count) if scaffold else None
    try:
        weights, trace = sgd_train(global_weights, features, targets, train_cfg, prox, correction,
                                   gradient_sum=gradient_sum)
    except NonFiniteError as e:
        logger.warning(f"Round {round_index + 1}: client {client.client_id} failed in layer {e.layer}: {e}")
        return LocalUpdate(client.client_id, n, error=str(e))
    if not np.all(np.isfinite(weights.vector)):
        logger.warning(f"Round {round_index + 1}: client {client.client_id} produced non-finite weights")
        return LocalUpdate(client.client_id, n, error="non-finite weights")

    steps = len(trace)
    control = None
    if scaffold:
        # option II estimate: mean uncorrected local gradient
        control = gradient_sum / steps if steps else client.control
    return LocalUpdate(client.client_id, n, weights, steps, control)


def _aggregate(cfg: FedConfig, global_weights: Weights, updates: List[LocalUpdate]) -> Weights:
    sizes = np.array([u.num_samples for u in updates], dtype=np.float64)
    p = sizes / sizes.sum()
    local = np.stack([u.weights.vector for u in updates])
    if cfg.method == Method.FEDNOVA:
        steps = np.array([max(u.steps, 1) for u in updates], dtype=np.float64)
        directions = (global_weights.vector[None, :] - local) / steps[:, None]
        tau_eff = float(p @ steps)
        return global_weights.with_vector(global_weights.vector - tau_eff * (p @ directions))
    if cfg.method == Method.SCAFFOLD:
        deltas = local - global_weights.vector[None, :]
        return global_weights.with_vector(global_weights.vector + cfg.scaffold_server_lr * (p @ deltas))
    return global_weights.with_vector(p @ local)


def _run_rounds(cfg: FedConfig, train: Dataset, test: Dataset, partition: Partition,
                pools: Optional[Dict[int, DistilledDataset]] = None,
                first_round_uplink: Sequence[int] = (), first_round_downlink: int = 0) -> RunReport:
    start = time.perf_counter()
    qa = _partition_qa(train, partition)
    weights = mlp_init(_model_spec(cfg, train))
    model_bits = BITS_PER_PARAMETER * weights.param_count
    upload_bits = model_uplink_bits(weights.param_count, cfg.method)

    clients = [ClientState(k, partition.client_data(train, k)) for k in range(cfg.num_clients)]
    server_control = None
    if cfg.method == Method.SCAFFOLD:
        server_control = np.zeros(weights.param_count)
        for client in clients:
            client.control = np.zeros(weights.param_count)
    if pools is not None:
        for client in clients:
            client.distilled_pool = pools[client.client_id]
    n_total = float(sum(len(c.data) for c in clients))

    rounds = cfg.effective_rounds
    if cfg.shots == "one_shot" and cfg.pre_aggregation:
        rounds += 1
    ledger = CommLedger(method=cfg.method.value)
    accuracies: List[float] = []
    survivors_log: List[List[int]] = []
    failed_log: List[List[int]] = []

    for t in range(rounds):
        survivors = apply_stragglers(range(cfg.num_clients), cfg.straggler_drop_rate, t, cfg.seed)
        extra_up = list(first_round_uplink) if t == 0 else []
        extra_down = first_round_downlink if t == 0 else 0
        if not survivors:
            logger.warning(f"Round {t + 1}: every client dropped out, round skipped")
            ledger.record(extra_up, extra_down)
            survivors_log.append([])
            failed_log.append([])
            accuracies.append(evaluate(weights, test))
            continue

        snapshot, control = weights, server_control
        updates = _map_clients(lambda k: _local_update(cfg, t, clients[k], snapshot, control),
                               survivors, cfg.client_workers)
        delivered = sorted((u for u in updates if u.ok), key=lambda u: u.client_id)
        failed = [u.client_id for u in updates if not u.ok]

        if delivered:
            weights = _aggregate(cfg, weights, delivered)
            if server_control is not None:
                control_shift = np.zeros_like(server_control)
                for update in delivered:
                    client = clients[update.client_id]
                    control_shift += (update.num_samples / n_total) * (update.control - client.control)
                    client.control = update.control
                server_control = server_control + control_shift
        else:
            logger.warning(f"Round {t + 1}: no client delivered an update")

        ledger.record(extra_up + [upload_bits] * len(delivered), extra_down + model_bits * len(survivors))
        survivors_log.append(list(survivors))
        failed_log.append(failed)
        acc = evaluate(weights, test)
        accuracies.append(acc)
        logger.info(f"Round {t + 1}/{rounds} [{cfg.method.value}]: {len(delivered)} updates, "
                    f"{ledger.rounds[-1].uplink_bits} uplink bits, test accuracy {acc:.4f}")

    return RunReport(
        method=cfg.method.value, seed=cfg.seed, accuracies=accuracies, ledger=ledger,
        survivors=survivors_log, failed_clients=failed_log, partition_qa=qa,
        config=cfg.model_dump(mode="json"), wall_time_seconds=time.perf_counter() - start,
        final_weights=weights, server_control=server_control,
        client_controls=({c.client_id: c.control for c in clients} if server_control is not None else None))


def run_fl(cfg: FedConfig, train: Dataset, test: Dataset,
           partition: Optional[Partition] = None) -> RunReport:
    """Model-averaging baseline, one-shot (T=1) or multi-shot"""
    if cfg.method.is_fedd3:
        raise ValueError(f"run_fl needs a baseline method, got {cfg.method.value}")
    logger.info(f"{cfg.method.value} ({cfg.shots}): {cfg.num_clients} clients, seed {cfg.seed}")
    return _run_rounds(cfg, train, test, _partition(cfg, train, partition))


def run_hybrid(cfg: FedConfig, train: Dataset, test: Dataset,
               partition: Optional[Partition] = None) -> RunReport:
    """
    Hybrid FedD3

    Every client distills once and uploads alongside its first model update. With the
    first broadcast each client receives the pool of all other clients' distilled data
    and trains on its local data plus that pool in every later round.
    """
    if not cfg.hybrid or cfg.shots != "multi_shot":
        raise ValueError("run_hybrid needs hybrid=True and shots='multi_shot'")
    if cfg.method.is_fedd3:
        raise ValueError(f"hybrid aggregation needs a baseline method, got {cfg.method.value}")
    partition = _partition(cfg, train, partition)
    logger.info(f"Hybrid {cfg.method.value} with {cfg.hybrid_instance} pools: "
                f"{cfg.num_clients} clients, seed {cfg.seed}")

    uploads = _distill_all(cfg, train, partition, range(cfg.num_clients), cfg.hybrid_instance)
    pools: Dict[int, DistilledDataset] = {}
    for p in range(cfg.num_clients):
        others = [u for u in uploads if u.client_id != p and len(u)]
        pools[p] = (aggregate_distilled(others) if others
                    else DistilledDataset.empty(train.dim, train.num_classes, cfg.hybrid_instance))

    def bits(d: DistilledDataset) -> int:
        return distilled_uplink_bits(d, cfg.image_channels, cfg.bit_depth, train.num_classes)

    report = _run_rounds(cfg, train, test, partition, pools,
                         first_round_uplink=[bits(u) for u in uploads],
                         first_round_downlink=sum(bits(pools[p]) for p in range(cfg.num_clients)))
    report.distill_stats = [u.stats.to_dict() for u in uploads if u.stats is not None]
    return report


def run(cfg: FedConfig, train: Dataset, test: Dataset, partition: Optional[Partition] = None) -> RunReport:
    """Dispatch on method and hybrid flag"""
    if cfg.method.is_fedd3:
        return run_fedd3(cfg, train, test, partition)
    if cfg.hybrid:
        return run_hybrid(cfg, train, test, partition)
    return run_fl(cfg, train, test, partition)
