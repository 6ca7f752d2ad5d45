"""
Experiment Configuration Schema
Typed settings for data sources, kernels, distillation, training and federation
"""

from enum import Enum
from typing import List, Optional, Literal

from pydantic import BaseModel, Field, field_validator, model_validator


class Method(str, Enum):
    """Federated training method run by a cell"""
    FEDD3_KIP = "fedd3_kip"
    FEDD3_CORESET = "fedd3_coreset"
    FEDAVG = "fedavg"
    FEDPROX = "fedprox"
    FEDNOVA = "fednova"
    SCAFFOLD = "scaffold"

    @property
    def is_fedd3(self) -> bool:
        return self in (Method.FEDD3_KIP, Method.FEDD3_CORESET)


class BlobConfig(BaseModel):
    """Gaussian blob generator (desk-scale stand-in for image datasets)"""
    num_classes: int = Field(10, ge=1)
    dim: int = Field(16, ge=1)
    points_per_class: int = Field(250, ge=1)
    center_spread: float = Field(1.0, ge=0.0)  # std-dev of class centers
    within_std: float = Field(0.6, gt=0.0)  # std-dev around a center
    seed: int = Field(0, ge=0)


class KernelSpec(BaseModel):
    """Kernel used for ridge regression and inducing-point distillation"""
    variant: Literal["rbf", "arccos_ntk"] = "rbf"
    bandwidth: float = Field(1.0, gt=0.0)  # RBF sigma
    depth: int = Field(4, ge=1)  # number of ReLU layers for the NTK
    regularization: Literal["absolute", "trace_scaled"] = "trace_scaled"
    reg_value: float = Field(1e-6, gt=0.0)  # lambda or lambda0


class DistillConfig(BaseModel):
    """Client-side dataset distillation settings"""
    imgs_per_class: int = Field(1, ge=1)
    distill_lr: float = Field(0.004, ge=0.0)
    max_epochs: int = Field(3000, ge=1)
    target_batch_frac: float = Field(0.10, gt=0.0, le=1.0)
    acc_threshold: float = Field(0.999, ge=0.0, le=1.0)
    jitter_std: float = Field(1e-3, gt=0.0)  # fallback jitter for under-populated classes
    gmm_max_iter: int = Field(100, ge=1)
    gmm_tol: float = Field(1e-6, ge=0.0)
    gmm_eps_floor: float = Field(1e-6, gt=0.0)
    kernel: KernelSpec = Field(default_factory=KernelSpec)
    seed: int = Field(0, ge=0)


class ModelSpec(BaseModel):
    """Multilayer perceptron shape: [d, h1, ..., S]"""
    widths: List[int]
    seed: int = Field(0, ge=0)

    @field_validator("widths")
    @classmethod
    def check_widths(cls, widths: List[int]) -> List[int]:
        if len(widths) < 2:
            raise ValueError("a model needs at least an input and an output layer")
        if any(w < 1 for w in widths):
            raise ValueError(f"layer widths must be positive, got {widths}")
        return widths


class TrainConfig(BaseModel):
    """Momentum SGD settings for local and server training"""
    epochs: int = Field(1, ge=0)
    lr: float = Field(0.05, ge=0.0)
    momentum: float = Field(0.9, ge=0.0, lt=1.0)
    batch_size: int = Field(50, ge=1)
    seed: int = Field(0, ge=0)


class FedConfig(BaseModel):
    """One federated run: method, clients, partition and training knobs"""
    method: Method = Method.FEDD3_KIP
    shots: Literal["one_shot", "multi_shot"] = "one_shot"
    rounds: int = Field(1, ge=1)
    num_clients: int = Field(10, ge=1)
    partition: Literal["iid", "pathological"] = "pathological"
    classes_per_client: int = Field(2, ge=1)
    local_epochs: int = Field(1, ge=1)
    hidden_widths: List[int] = Field(default_factory=lambda: [64])
    local_train: TrainConfig = Field(default_factory=TrainConfig)
    server_train: TrainConfig = Field(default_factory=lambda: TrainConfig(epochs=300, lr=0.05))
    distill: DistillConfig = Field(default_factory=DistillConfig)
    hybrid: bool = False
    hybrid_instance: Literal["coreset", "kip"] = "coreset"
    pre_aggregation: bool = False  # one extra round before a one-shot baseline
    straggler_drop_rate: float = Field(0.0, ge=0.0, lt=1.0)
    fedprox_mu: float = Field(0.1, ge=0.0)
    scaffold_server_lr: float = Field(1.0, gt=0.0)
    image_channels: Literal[1, 3] = 1
    bit_depth: int = Field(8, ge=1)
    volume_accounting: Literal["summed", "per_client"] = "summed"
    client_workers: int = Field(1, ge=1)
    seed: int = Field(0, ge=0)

    @model_validator(mode="after")
    def check_hybrid(self) -> "FedConfig":
        if self.hybrid and self.shots != "multi_shot":
            raise ValueError("hybrid federated learning requires shots='multi_shot'")
        return self

    @property
    def effective_rounds(self) -> int:
        return 1 if self.shots == "one_shot" else self.rounds


class DatasetSource(BaseModel):
    """Where training/test data comes from"""
    type: Literal["blobs", "idx"] = "blobs"
    blobs: BlobConfig = Field(default_factory=BlobConfig)
    images_path: Optional[str] = None
    labels_path: Optional[str] = None
    test_images_path: Optional[str] = None  # a separate IDX test set; else split
    test_labels_path: Optional[str] = None
    test_fraction: float = Field(0.2, gt=0.0, lt=1.0)

    @model_validator(mode="after")
    def check_paths(self) -> "DatasetSource":
        if self.type == "idx" and not (self.images_path and self.labels_path):
            raise ValueError("idx sources need images_path and labels_path")
        return self


class SweepAxes(BaseModel):
    """Axes swept by the sweep-* subcommands"""
    imgs_per_class: List[int] = Field(default_factory=list)
    num_clients: List[int] = Field(default_factory=list)
    classes_per_client: List[int] = Field(default_factory=list)
    drop_rates: List[float] = Field(default_factory=list)
    global_distilled: Optional[int] = Field(None, ge=1)  # fixed total for the client sweep


class ExperimentConfig(BaseModel):
    """Complete experiment document (one file = one experiment)"""
    name: str
    description: str = ""
    dataset: DatasetSource = Field(default_factory=DatasetSource)
    federation: FedConfig = Field(default_factory=FedConfig)
    methods: List[Method] = Field(default_factory=lambda: [Method.FEDD3_KIP])
    seeds: List[int] = Field(default_factory=lambda: [0])
    sweeps: SweepAxes = Field(default_factory=SweepAxes)
    gammas: List[float] = Field(default_factory=lambda: [0.01, 1.0])
    local_epochs_grid: List[int] = Field(default_factory=list)  # best-of grid for one-shot baselines
    eval_rounds: Optional[int] = Field(None, ge=1)
    output_dir: str = "results"
    save_weights: bool = False

    @field_validator("seeds")
    @classmethod
    def check_seeds(cls, seeds: List[int]) -> List[int]:
        if not seeds:
            raise ValueError("seed list must not be empty")
        if any(s < 0 for s in seeds):
            raise ValueError("seeds must be non-negative")
        return seeds

    @field_validator("gammas")
    @classmethod
    def check_gammas(cls, gammas: List[float]) -> List[float]:
        if any(g <= 0 for g in gammas):
            raise ValueError("gamma values must be positive")
        return gammas

    @field_validator("local_epochs_grid")
    @classmethod
    def check_grid(cls, grid: List[int]) -> List[int]:
        if any(e < 1 for e in grid):
            raise ValueError("local epochs must be >= 1")
        return grid
