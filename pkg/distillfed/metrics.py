"""
Communication Accounting
Bit-exact uplink volumes, the per-round ledger and Gamma Communication Efficiency (GCE)
"""

import math
from pathlib import Path
from typing import Dict, Iterable, List, Literal, Optional, Union

import pandas as pd
from pydantic import BaseModel, Field

from .config_schema import Method
from .distill import DistilledDataset

BITS_PER_PARAMETER = 32
FEDNOVA_EXTRA_BITS = 8  # local step count tau_k travels with the model

Accounting = Literal["summed", "per_client"]


class RoundVolume(BaseModel):
    round: int
    uplink_bits: int = Field(0, ge=0)
    downlink_bits: int = Field(0, ge=0)
    client_uplink_bits: List[int] = Field(default_factory=list)

    @property
    def log2_term(self) -> float:
        return math.log2(self.uplink_bits + 1)


class CommLedger(BaseModel):
    """Append-only per-round communication volumes"""
    method: str
    rounds: List[RoundVolume] = Field(default_factory=list)

    def __len__(self) -> int:
        return len(self.rounds)

    def record(self, client_uplink_bits: Iterable[int], downlink_bits: int = 0) -> RoundVolume:
        """Append one round; V_t is the sum over delivering clients"""
        per_client = [int(b) for b in client_uplink_bits]
        if any(b < 0 for b in per_client) or downlink_bits < 0:
            raise ValueError("communication volumes must be non-negative")
        entry = RoundVolume(round=len(self.rounds) + 1, uplink_bits=sum(per_client),
                            downlink_bits=int(downlink_bits), client_uplink_bits=per_client)
        self.rounds.append(entry)
        return entry

    @property
    def total_uplink_bits(self) -> int:
        return sum(r.uplink_bits for r in self.rounds)

    @property
    def total_downlink_bits(self) -> int:
        return sum(r.downlink_bits for r in self.rounds)

    def log2_volume(self, accounting: Accounting = "summed") -> float:
        """sum_t log2(V_t + 1), or sum_t sum_k log2(v_tk + 1) for per-client accounting"""
        if accounting == "summed":
            return sum(r.log2_term for r in self.rounds)
        if accounting == "per_client":
            return sum(math.log2(b + 1) for r in self.rounds for b in r.client_uplink_bits)
        raise ValueError(f"unknown volume accounting: {accounting}")

    def truncated(self, rounds: int) -> "CommLedger":
        return CommLedger(method=self.method, rounds=[r.model_copy() for r in self.rounds[:rounds]])

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [{"round": r.round, "method": self.method, "uplink_bits": r.uplink_bits,
              "downlink_bits": r.downlink_bits, "log2_term": r.log2_term} for r in self.rounds],
            columns=["round", "method", "uplink_bits", "downlink_bits", "log2_term"],
        )

    def to_csv(self, path: Union[str, Path]) -> None:
        self.to_frame().to_csv(path, index=False)


class GceParams(BaseModel):
    gamma: float = Field(..., gt=0.0)
    accuracy: float = Field(..., ge=0.0, lt=1.0)


def model_uplink_bits(param_count: int, method: Union[Method, str]) -> int:
    """Per-client per-round upload: P for FedAvg/FedProx, P+8 for FedNova, 2P for SCAFFOLD"""
    if param_count < 1:
        raise ValueError("param_count must be positive")
    try:
        method = Method(method)
    except ValueError:
        raise ValueError(f"unknown method: {method}") from None
    p = BITS_PER_PARAMETER * param_count
    if method in (Method.FEDAVG, Method.FEDPROX):
        return p
    if method == Method.FEDNOVA:
        return p + FEDNOVA_EXTRA_BITS
    if method == Method.SCAFFOLD:
        return 2 * p
    raise ValueError(f"method {method.value} does not upload a model")


def label_bits(num_classes: int) -> int:
    """ceil(log2 S)"""
    return (num_classes - 1).bit_length()


def distilled_uplink_bits(distilled: DistilledDataset, channels: int = 1, bit_depth: int = 8,
                          num_classes: Optional[int] = None) -> int:
    """n~ * d * bit_depth pixel bits (channels folded into d) plus n~ * ceil(log2 S) label bits"""
    if channels not in (1, 3):
        raise ValueError(f"channels must be 1 or 3, got {channels}")
    if distilled.dim % channels:
        raise ValueError(f"dimension {distilled.dim} is not divisible by {channels} channels")
    s = distilled.num_classes if num_classes is None else num_classes
    n = len(distilled)
    return n * distilled.dim * bit_depth + n * label_bits(s)


def gce(acc: float, gamma: float, ledger: CommLedger, accounting: Accounting = "summed") -> float:
    """ACC / ((1 - ACC)^gamma * sum_t log2(V_t + 1)) over uplink volumes"""
    params = GceParams(gamma=gamma, accuracy=acc)
    if not ledger.rounds:
        raise ValueError("GCE needs at least one ledger round")
    volume = ledger.log2_volume(accounting)
    if volume <= 0:
        raise ValueError("GCE is undefined for zero communication volume")
    return params.accuracy / ((1.0 - params.accuracy) ** params.gamma * volume)


def gce_table(acc: float, gammas: List[float], ledger: CommLedger,
              accounting: Accounting = "summed") -> Dict[str, Optional[float]]:
    """GCE per gamma; None where the metric is undefined"""
    table: Dict[str, Optional[float]] = {}
    for gamma in gammas:
        try:
            table[f"gce_{gamma:g}"] = gce(acc, gamma, ledger, accounting)
        except ValueError:
            table[f"gce_{gamma:g}"] = None
    return table
