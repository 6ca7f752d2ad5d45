"""
distillfed - Federated learning from decentralized distilled datasets
Desk-scale simulation of one-shot FedD3 against model-averaging baselines
"""

from .config_schema import (
    DatasetSource, DistillConfig, ExperimentConfig, FedConfig, KernelSpec, Method, ModelSpec, TrainConfig,
)
from .data import Dataset, Partition, gen_blobs, load_idx, make_partition
from .distill import DistilledDataset, distill_coreset_gmm, distill_kip, fit_gmm
from .engine import ExperimentEngine
from .federation import RunReport, aggregate_distilled, run, run_fedd3, run_fl, run_hybrid
from .kernel import SupportSet, kip_grad, kip_loss, krr_predict
from .metrics import CommLedger, distilled_uplink_bits, gce, model_uplink_bits
from .model import Weights, evaluate, loss_grad, mlp_init, sgd_train

__all__ = [
    'DatasetSource', 'DistillConfig', 'ExperimentConfig', 'FedConfig', 'KernelSpec', 'Method', 'ModelSpec',
    'TrainConfig', 'Dataset', 'Partition', 'gen_blobs', 'load_idx', 'make_partition', 'DistilledDataset',
    'distill_coreset_gmm', 'distill_kip', 'fit_gmm', 'ExperimentEngine', 'RunReport', 'aggregate_distilled',
    'run', 'run_fedd3', 'run_fl', 'run_hybrid', 'SupportSet', 'kip_grad', 'kip_loss', 'krr_predict',
    'CommLedger', 'distilled_uplink_bits', 'gce', 'model_uplink_bits', 'Weights', 'evaluate', 'loss_grad',
    'mlp_init', 'sgd_train',
]
