#!/usr/bin/env python3
"""
Desk-Scale Replication Tests
Directional checks of the headline claims on Gaussian blobs (run with -m acceptance)
"""

from pathlib import Path

import pandas as pd
import pytest

from distillfed.config_schema import ExperimentConfig
from distillfed.engine import ExperimentEngine
from distillfed.run_experiment import load_config

pytestmark = pytest.mark.acceptance

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
CHANCE = 0.1


def _variant(config: ExperimentConfig, federation=None, **update) -> ExperimentConfig:
    document = {**config.model_dump(), **update}
    if federation:
        document["federation"] = {**config.federation.model_dump(), **federation}
    return ExperimentConfig.model_validate(document)


def _medians(config, tmp_path, sweep="run", jobs=4) -> pd.DataFrame:
    result = ExperimentEngine(config, out_dir=str(tmp_path), jobs=jobs).run_sweep(sweep)
    assert result["failures"] == [], result["failures"]
    return pd.read_csv(result["aggregate_path"]).set_index(["axis_value", "method"])


class TestNonIid:
    @pytest.fixture(scope="class")
    def table(self, tmp_path_factory):
        config = load_config(str(CONFIGS / "noniid_robustness.json"))
        config = _variant(config, methods=["fedd3_kip", "fedavg"])
        return _medians(config, tmp_path_factory.mktemp("noniid"))

    def test_fedd3_beats_one_shot_fedavg(self, table):
        fedd3 = table.loc[(-1.0, "fedd3_kip"), "final_accuracy_median"]
        fedavg = table.loc[(-1.0, "fedavg"), "final_accuracy_median"]
        assert fedd3 >= fedavg + 0.10, f"FedD3 {fedd3:.3f} vs FedAvg {fedavg:.3f}"

    def test_fedd3_uplink_is_a_fraction_of_fedavg(self, table):
        fedd3 = table.loc[(-1.0, "fedd3_kip")]
        fedavg = table.loc[(-1.0, "fedavg")]
        assert fedd3["uplink_bits_median"] < 0.25 * fedavg["uplink_bits_median"]
        assert fedd3["final_accuracy_median"] >= fedavg["final_accuracy_median"]

    def test_iid_gap(self, table, tmp_path):
        config = load_config(str(CONFIGS / "noniid_robustness.json"))
        config = _variant(config, federation={"partition": "iid"}, methods=["fedd3_kip"])
        iid = _medians(config, tmp_path).loc[(-1.0, "fedd3_kip"), "final_accuracy_median"]
        noniid = table.loc[(-1.0, "fedd3_kip"), "final_accuracy_median"]
        assert iid - noniid <= 0.10


class TestHybridRescue:
    def test_pools_rescue_one_class_clients(self, tmp_path):
        config = load_config(str(CONFIGS / "hybrid_rescue.json"))
        hybrid = _medians(config, tmp_path / "hybrid").loc[(-1.0, "fedavg"), "final_accuracy_median"]
        plain_config = _variant(config, federation={"hybrid": False})
        plain = _medians(plain_config, tmp_path / "plain").loc[(-1.0, "fedavg"), "final_accuracy_median"]
        assert plain <= CHANCE + 0.05, f"plain FedAvg {plain:.3f}"
        assert hybrid >= CHANCE + 0.20, f"hybrid FedAvg {hybrid:.3f}"


class TestClientSweep:
    def test_accuracy_does_not_grow_with_clients(self, tmp_path):
        config = load_config(str(CONFIGS / "client_sweep.json"))
        table = _medians(config, tmp_path, "clients")
        accs = [table.loc[(float(m), "fedd3_kip"), "final_accuracy_median"] for m in (5, 10, 20)]
        assert all(later <= earlier + 0.05 for earlier, later in zip(accs, accs[1:])), accs


class TestStragglers:
    def test_fedd3_ahead_at_every_drop_rate(self, tmp_path):
        config = load_config(str(CONFIGS / "straggler_sweep.json"))
        table = _medians(config, tmp_path, "stragglers")
        for rate in (0.0, 0.25, 0.5):
            fedd3 = table.loc[(rate, "fedd3_kip"), "final_accuracy_median"]
            fedavg = table.loc[(rate, "fedavg"), "final_accuracy_median"]
            assert fedd3 >= fedavg, f"drop rate {rate}: FedD3 {fedd3:.3f} vs FedAvg {fedavg:.3f}"


if __name__ == '__main__':
    pytest.main([__file__, "-v", "-m", "acceptance"])
