#!/usr/bin/env python3
"""
Federated Orchestration Tests
FedD3 rounds, baseline aggregation rules, hybrid pools and stragglers
"""

import numpy as np
import pytest

from distillfed.config_schema import BlobConfig, DistillConfig, FedConfig, ModelSpec, TrainConfig
from distillfed.data import gen_blobs, make_partition, train_test_split
from distillfed.distill import DistilledDataset
from distillfed.federation import (
    ClientState, _local_update, aggregate_distilled, apply_stragglers, run, run_fedd3, run_fl,
    run_hybrid,
)
from distillfed.metrics import label_bits, model_uplink_bits
from distillfed.model import NonFiniteError, loss_grad, mlp_init, param_count, sgd_train


@pytest.fixture(scope="module")
def blobs():
    data = gen_blobs(BlobConfig(num_classes=4, dim=6, points_per_class=40, within_std=0.4, seed=3))
    return train_test_split(data, 0.25, seed=3)


def _cfg(**overrides) -> FedConfig:
    base = {
        "method": "fedavg", "num_clients": 4, "partition": "iid", "classes_per_client": 2,
        "hidden_widths": [8],
        "local_train": TrainConfig(lr=0.05, batch_size=10),
        "server_train": TrainConfig(epochs=20, lr=0.05, batch_size=8),
        "distill": DistillConfig(imgs_per_class=1),
        "seed": 1,
    }
    base.update(overrides)
    return FedConfig(**base)


def _upload(client_id: int, rows: int = 2, dim: int = 3, num_classes: int = 4, instance: str = "kip"):
    labels = np.eye(num_classes)[np.arange(rows) % num_classes]
    points = np.full((rows, dim), float(client_id))
    return DistilledDataset(points, labels, np.full(rows, client_id), instance)


class TestAggregateDistilled:
    def test_sorted_by_client(self):
        pool = aggregate_distilled([_upload(2), _upload(0), _upload(1)])
        assert pool.client_ids.tolist() == [0, 0, 1, 1, 2, 2]
        assert pool.points[:, 0].tolist() == [0.0, 0.0, 1.0, 1.0, 2.0, 2.0]
        assert pool.instance == "kip"

    def test_single_upload_unchanged(self):
        upload = _upload(3)
        pool = aggregate_distilled([upload])
        assert np.array_equal(pool.points, upload.points)
        assert np.array_equal(pool.labels, upload.labels)

    def test_mixed_instances(self):
        assert aggregate_distilled([_upload(0), _upload(1, instance="coreset")]).instance == "mixed"

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="dimension"):
            aggregate_distilled([_upload(0), _upload(1, dim=5)])

    def test_class_count_mismatch(self):
        with pytest.raises(ValueError, match="classes"):
            aggregate_distilled([_upload(0), _upload(1, num_classes=3)])

    def test_nothing_to_aggregate(self):
        with pytest.raises(ValueError):
            aggregate_distilled([])


class TestStragglers:
    def test_survival_rate(self):
        survivors = apply_stragglers(range(10000), 0.3, round_index=0, seed=5)
        assert abs(len(survivors) / 10000 - 0.7) < 0.02

    def test_deterministic_and_round_keyed(self):
        first = apply_stragglers(range(50), 0.5, 0, seed=5)
        assert first == apply_stragglers(range(50), 0.5, 0, seed=5)
        assert first != apply_stragglers(range(50), 0.5, 1, seed=5)

    def test_zero_rate_keeps_everyone(self):
        assert apply_stragglers(range(7), 0.0, 3, seed=0) == list(range(7))

    @pytest.mark.parametrize("rate", [-0.1, 1.0, 1.5])
    def test_invalid_rate(self, rate):
        with pytest.raises(ValueError):
            apply_stragglers(range(3), rate, 0, seed=0)


class TestFedD3:
    def test_single_ledger_round(self, blobs):
        train, test = blobs
        cfg = _cfg(method="fedd3_coreset", partition="pathological")
        report = run_fedd3(cfg, train, test)
        assert report.rounds_executed == 1
        # one mean per owned class, two classes per client
        per_client = 2 * (6 * 8 + label_bits(4))
        assert report.ledger.rounds[0].client_uplink_bits == [per_client] * 4
        assert report.ledger.total_downlink_bits == 0
        assert len(report.distill_stats) == 4
        assert 0.0 <= report.final_accuracy <= 1.0

    def test_learns_separable_blobs(self, blobs):
        train, test = blobs
        cfg = _cfg(method="fedd3_coreset", partition="pathological",
                   distill=DistillConfig(imgs_per_class=2),
                   server_train=TrainConfig(epochs=200, lr=0.05, batch_size=8))
        assert run_fedd3(cfg, train, test).final_accuracy >= 0.8

    def test_stragglers_shrink_the_upload(self, blobs):
        train, test = blobs
        cfg = _cfg(method="fedd3_coreset", num_clients=8, straggler_drop_rate=0.5)
        report = run_fedd3(cfg, train, test)
        survivors = apply_stragglers(range(8), 0.5, 0, cfg.seed)
        assert report.survivors == [survivors]
        assert len(report.ledger.rounds[0].client_uplink_bits) == len(survivors)

    def test_everyone_dropped(self, blobs, monkeypatch):
        monkeypatch.setattr("distillfed.federation.apply_stragglers", lambda *args: [])
        train, test = blobs
        report = run_fedd3(_cfg(method="fedd3_coreset"), train, test)
        assert report.rounds_executed == 1
        assert report.ledger.total_uplink_bits == 0
        assert len(report.accuracies) == 1

    def test_rejects_baseline(self, blobs):
        with pytest.raises(ValueError):
            run_fedd3(_cfg(), *blobs)


class TestBaselines:
    def test_rejects_fedd3(self, blobs):
        with pytest.raises(ValueError):
            run_fl(_cfg(method="fedd3_kip"), *blobs)

    def test_fedavg_matches_centralized_gradient_step(self, blobs):
        train, test = blobs
        full_batch = TrainConfig(lr=0.1, momentum=0.0, batch_size=10000)
        cfg = _cfg(partition="pathological", local_train=full_batch)
        report = run_fl(cfg, train, test)
        start = mlp_init(ModelSpec(widths=[6, 8, 4], seed=cfg.seed))
        central, _ = sgd_train(start, train.features, train.onehot(), full_batch.model_copy(update={"epochs": 1}))
        assert np.allclose(report.final_weights.vector, central.vector, atol=1e-10)

    def test_fedprox_without_mu_is_fedavg(self, blobs):
        train, test = blobs
        fedavg = run_fl(_cfg(shots="multi_shot", rounds=3), train, test)
        fedprox = run_fl(_cfg(method="fedprox", fedprox_mu=0.0, shots="multi_shot", rounds=3), train, test)
        assert np.array_equal(fedavg.final_weights.vector, fedprox.final_weights.vector)
        assert fedavg.accuracies == fedprox.accuracies

    def test_fednova_with_equal_steps_is_fedavg(self, blobs):
        train, test = blobs
        # iid dealing gives every client 30 points, so every client takes the same step count
        fedavg = run_fl(_cfg(local_epochs=2), train, test)
        fednova = run_fl(_cfg(method="fednova", local_epochs=2), train, test)
        assert np.allclose(fedavg.final_weights.vector, fednova.final_weights.vector, atol=1e-12)
        assert fednova.ledger.rounds[0].client_uplink_bits == [model_uplink_bits(param_count([6, 8, 4]), "fednova")] * 4

    def test_first_scaffold_round_is_fedavg(self, blobs):
        train, test = blobs
        fedavg = run_fl(_cfg(partition="pathological"), train, test)
        scaffold = run_fl(_cfg(method="scaffold", partition="pathological"), train, test)
        assert np.allclose(fedavg.final_weights.vector, scaffold.final_weights.vector, atol=1e-12)
        assert scaffold.ledger.total_uplink_bits == 2 * fedavg.ledger.total_uplink_bits

    def test_scaffold_control_update(self, blobs):
        train, _ = blobs
        cfg = _cfg(method="scaffold", local_train=TrainConfig(lr=0.05, momentum=0.0, batch_size=10))
        start = mlp_init(ModelSpec(widths=[6, 8, 4], seed=cfg.seed))
        zeros = np.zeros(start.param_count)
        client = ClientState(0, train.subset(np.arange(30)), control=zeros)
        update = _local_update(cfg, 0, client, start, zeros)
        assert update.steps == 3
        expected = (start.vector - update.weights.vector) / (3 * 0.05)
        assert np.allclose(update.control, expected)

    def test_scaffold_control_update_under_momentum(self, blobs):
        train, _ = blobs
        cfg = _cfg(method="scaffold", local_epochs=50,
                   local_train=TrainConfig(lr=1e-5, momentum=0.9, batch_size=30))
        start = mlp_init(ModelSpec(widths=[6, 8, 4], seed=cfg.seed))
        zeros = np.zeros(start.param_count)
        client = ClientState(0, train.subset(np.arange(30)), control=zeros)
        update = _local_update(cfg, 0, client, start, zeros)
        _, grad = loss_grad(start, client.data.features, client.data.onehot())
        assert update.steps == 50
        assert np.linalg.norm(update.control - grad.vector) <= 1e-2 * np.linalg.norm(grad.vector)
        # the displacement alone overshoots the gradient by roughly 1 / (1 - momentum)
        displacement = (start.vector - update.weights.vector) / (50 * 1e-5)
        assert np.linalg.norm(displacement) > 5 * np.linalg.norm(grad.vector)

    def test_scaffold_server_control_is_weighted_client_mean(self, blobs):
        train, test = blobs
        cfg = _cfg(method="scaffold", num_clients=2, partition="pathological")
        report = run_fl(cfg, train, test)
        partition = make_partition(train, "pathological", 2, 2, cfg.seed)
        sizes = [len(partition.client_data(train, k)) for k in range(2)]
        weighted = sum(n / sum(sizes) * report.client_controls[k] for k, n in enumerate(sizes))
        assert np.linalg.norm(report.client_controls[0]) > 0.0
        assert np.allclose(report.server_control, weighted, atol=1e-12)

    def test_multi_shot_ledger(self, blobs):
        train, test = blobs
        report = run_fl(_cfg(shots="multi_shot", rounds=4), train, test)
        model_bits = 32 * param_count([6, 8, 4])
        assert report.rounds_executed == 4 and len(report.accuracies) == 4
        assert all(r.uplink_bits == 4 * model_bits for r in report.ledger.rounds)
        assert all(r.downlink_bits == 4 * model_bits for r in report.ledger.rounds)

    def test_pre_aggregation_adds_a_round(self, blobs):
        report = run_fl(_cfg(pre_aggregation=True), *blobs)
        assert report.rounds_executed == 2

    def test_failed_client_is_excluded(self, blobs, monkeypatch):
        calls = []

        def flaky(*args, **kwargs):
            calls.append(1)
            if len(calls) == 1:
                raise NonFiniteError("non-finite activations in layer 1", layer=1)
            return sgd_train(*args, **kwargs)

        monkeypatch.setattr("distillfed.federation.sgd_train", flaky)
        report = run_fl(_cfg(num_clients=3), *blobs)
        assert report.failed_clients == [[0]]
        assert report.survivors == [[0, 1, 2]]
        assert len(report.ledger.rounds[0].client_uplink_bits) == 2

    def test_worker_count_does_not_change_results(self, blobs):
        train, test = blobs
        serial = run_fl(_cfg(shots="multi_shot", rounds=2), train, test)
        threaded = run_fl(_cfg(shots="multi_shot", rounds=2, client_workers=4), train, test)
        volatile = {"wall_time_seconds", "config"}
        assert np.array_equal(serial.final_weights.vector, threaded.final_weights.vector)
        assert serial.model_dump(exclude=volatile) == threaded.model_dump(exclude=volatile)

    def test_stragglers_in_every_round(self, blobs):
        train, test = blobs
        cfg = _cfg(num_clients=8, shots="multi_shot", rounds=3, straggler_drop_rate=0.4)
        report = run_fl(cfg, train, test)
        for t, survivors in enumerate(report.survivors):
            assert survivors == apply_stragglers(range(8), 0.4, t, cfg.seed)

    def test_everyone_dropped_records_an_empty_round(self, blobs, monkeypatch):
        monkeypatch.setattr("distillfed.federation.apply_stragglers", lambda *args: [])
        train, test = blobs
        cfg = _cfg()
        report = run_fl(cfg, train, test)
        first = report.ledger.rounds[0]
        assert report.rounds_executed == 1
        assert first.client_uplink_bits == [] and first.uplink_bits == 0 and first.downlink_bits == 0
        assert report.survivors == [[]] and len(report.accuracies) == 1
        start = mlp_init(ModelSpec(widths=[6, 8, 4], seed=cfg.seed))
        assert np.array_equal(report.final_weights.vector, start.vector)


class TestHybrid:
    def test_single_client_reduces_to_fedavg(self, blobs):
        train, test = blobs
        plain = run_fl(_cfg(num_clients=1, shots="multi_shot", rounds=2), train, test)
        hybrid = run_hybrid(_cfg(num_clients=1, shots="multi_shot", rounds=2, hybrid=True), train, test)
        assert np.array_equal(plain.final_weights.vector, hybrid.final_weights.vector)
        assert hybrid.ledger.rounds[1].uplink_bits == plain.ledger.rounds[1].uplink_bits

    def test_ledger_carries_distilled_pools(self, blobs):
        train, test = blobs
        cfg = _cfg(num_clients=2, partition="pathological", shots="multi_shot", rounds=2, hybrid=True)
        report = run_hybrid(cfg, train, test)
        partition = make_partition(train, "pathological", 2, 2, cfg.seed)
        rows = [len(classes) for classes in partition.class_sets]
        distilled = [n * (6 * 8 + label_bits(4)) for n in rows]
        model_bits = 32 * param_count([6, 8, 4])
        first, second = report.ledger.rounds
        assert first.client_uplink_bits == distilled + [model_bits, model_bits]
        # each client receives the other client's upload plus the model
        assert first.downlink_bits == sum(distilled) + 2 * model_bits
        assert second.uplink_bits == 2 * model_bits
        assert len(report.distill_stats) == 2

    def test_pools_change_local_training(self, blobs):
        train, test = blobs
        base = {"num_clients": 2, "partition": "pathological", "shots": "multi_shot", "rounds": 1}
        plain = run_fl(_cfg(**base), train, test)
        hybrid = run_hybrid(_cfg(hybrid=True, **base), train, test)
        assert not np.array_equal(plain.final_weights.vector, hybrid.final_weights.vector)

    def test_requires_multi_shot(self, blobs):
        with pytest.raises(ValueError):
            run_hybrid(_cfg(), *blobs)

    def test_iid_hybrid_tracks_plain_fedavg(self, blobs):
        train, test = blobs
        base = {"shots": "multi_shot", "rounds": 10, "local_epochs": 2}
        plain = run_fl(_cfg(**base), train, test)
        hybrid = run_hybrid(_cfg(hybrid=True, **base), train, test)
        assert abs(hybrid.final_accuracy - plain.final_accuracy) <= 0.03

    def test_dispatch(self, blobs):
        train, test = blobs
        report = run(_cfg(shots="multi_shot", rounds=2, hybrid=True), train, test)
        assert report.rounds_executed == 2
        assert report.ledger.rounds[0].uplink_bits > report.ledger.rounds[1].uplink_bits


if __name__ == '__main__':
    pytest.main([__file__, "-v"])
