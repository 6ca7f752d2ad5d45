"""
Partition Quality Checks
Automated QA for client partitions before a federated run
"""

import logging
from typing import Any, Dict, List

import numpy as np

from .data import Dataset, Partition

logger = logging.getLogger(__name__)


class PartitionQA:
    def __init__(self, dataset: Dataset, partition: Partition):
        self.dataset = dataset
        self.partition = partition
        self.issues: List[str] = []

    def check_disjoint(self) -> int:
        """Count indices assigned to more than one client"""
        flat = np.concatenate(self.partition.assignments)
        duplicates = len(flat) - len(np.unique(flat))
        if duplicates:
            self.issues.append(f"{duplicates} indices assigned to several clients")
        return duplicates

    def check_coverage(self) -> int:
        """Count assigned indices outside [0, n)"""
        flat = np.concatenate(self.partition.assignments)
        out_of_range = int(np.sum((flat < 0) | (flat >= len(self.dataset))))
        if out_of_range:
            self.issues.append(f"{out_of_range} indices outside the dataset")
        return out_of_range

    def check_class_sets(self) -> List[int]:
        """Clients whose labels disagree with their declared class set"""
        bad = []
        expected = self.partition.classes_per_client
        for k, (idx, classes) in enumerate(zip(self.partition.assignments, self.partition.class_sets)):
            present = set(int(c) for c in np.unique(self.dataset.labels[idx]))
            if present != set(classes):
                bad.append(k)
            elif self.partition.mode == "pathological" and len(classes) != expected:
                bad.append(k)
        if bad:
            self.issues.append(f"{len(bad)} clients with inconsistent class sets")
        return bad

    def check_load_balance(self) -> int:
        """Spread between the largest and smallest client"""
        sizes = self.partition.client_sizes()
        spread = max(sizes) - min(sizes)
        # round-robin dealing differs by at most one point, shard dealing by one shard
        allowed = 1 if self.partition.mode == "iid" else self.partition.max_shard_size
        if spread > allowed:
            self.issues.append(f"client load spread {spread} exceeds {allowed}")
        return spread

    def run_all_checks(self) -> Dict[str, Any]:
        """Execute all QA checks"""
        self.issues = []
        duplicates = self.check_disjoint()
        out_of_range = self.check_coverage()
        bad_class_sets = self.check_class_sets()
        spread = self.check_load_balance()

        if self.issues:
            for issue in self.issues:
                logger.warning(f"Partition QA: {issue}")
        else:
            sizes = self.partition.client_sizes()
            logger.info(f"Partition QA passed: {self.partition.num_clients} clients, "
                        f"sizes {min(sizes)}..{max(sizes)}")

        return {
            "duplicates": duplicates,
            "out_of_range": out_of_range,
            "bad_class_sets": bad_class_sets,
            "load_spread": spread,
            "issues": list(self.issues),
        }
