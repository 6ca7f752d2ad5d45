"""
Experiment Engine - Config-driven federated runs and sweeps
Plans (axis, method, seed) cells, executes them on a process pool, writes per-cell
reports plus aggregate and curve CSVs
"""

import json
import logging
import re
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import pandas as pd

from .config_schema import ExperimentConfig, FedConfig
from .data import Dataset, IdxFormatError, gen_blobs, load_idx, train_test_split
from .federation import ClientFailure, RunReport, run
from .metrics import gce_table
from .model import save_weights
from .seeding import Stream, derive_seed

logger = logging.getLogger(__name__)

SWEEPS = {
    "run": None,
    "clients": "num_clients",
    "imgcls": "imgs_per_class",
    "ck": "classes_per_client",
    "stragglers": "drop_rates",
}

AGGREGATE_COLUMNS = ["axis", "axis_value", "method", "seeds"]
CURVE_COLUMNS = ["cell_id", "method", "seed", "axis", "axis_value", "round",
                 "cum_uplink_bits", "cum_log2_volume", "test_acc"]


class SweepConfigError(ValueError):
    """A sweep axis is missing or cannot be realised"""


@dataclass(frozen=True)
class Cell:
    cell_id: str
    method: str
    seed: int
    axis: str
    axis_value: Optional[float]
    federation: Dict[str, Any]  # fully resolved FedConfig document


def _slug(value: Any) -> str:
    return re.sub(r"[^A-Za-z0-9_.]+", "-", str(value)).strip("-")


def per_client_imgs(global_distilled: int, m: int, fed: FedConfig, num_classes: int) -> Optional[int]:
    """Img/Cls that keeps the global distilled count fixed at m clients, None if not integral"""
    classes = fed.classes_per_client if fed.partition == "pathological" else num_classes
    if global_distilled % (m * classes):
        return None
    return global_distilled // (m * classes)


def load_data(config: ExperimentConfig, run_seed: int) -> Tuple[Dataset, Dataset]:
    """Train/test datasets for one seed"""
    source = config.dataset
    split_seed = derive_seed(run_seed, Stream.SPLIT)
    if source.type == "blobs":
        blobs = source.blobs.model_copy(update={"seed": derive_seed(source.blobs.seed, run_seed)})
        return train_test_split(gen_blobs(blobs), source.test_fraction, split_seed)
    dataset = load_idx(source.images_path, source.labels_path)
    if source.test_images_path and source.test_labels_path:
        test = load_idx(source.test_images_path, source.test_labels_path, dataset.num_classes)
        return dataset, test
    return train_test_split(dataset, source.test_fraction, split_seed)


def _num_classes(config: ExperimentConfig) -> int:
    if config.dataset.type == "blobs":
        return config.dataset.blobs.num_classes
    try:
        return load_idx(config.dataset.images_path, config.dataset.labels_path).num_classes
    except (IdxFormatError, OSError) as e:
        raise SweepConfigError(f"cannot read the IDX dataset to plan the sweep: {e}") from e


def plan_cells(config: ExperimentConfig, sweep: str = "run") -> List[Cell]:
    """Expand an experiment into its (axis value, method, seed) cells"""
    if sweep not in SWEEPS:
        raise SweepConfigError(f"unknown sweep {sweep!r}, expected one of {sorted(SWEEPS)}")
    base = config.federation
    axis_field = SWEEPS[sweep]
    if axis_field is None:
        points: List[Optional[float]] = [None]
    else:
        points = list(getattr(config.sweeps, axis_field))
        if not points:
            raise SweepConfigError(f"sweep {sweep} needs a nonempty sweeps.{axis_field} list")

    methods = list(config.methods)
    if sweep == "imgcls":
        methods = [m for m in methods if m.is_fedd3]
        if not methods:
            raise SweepConfigError("the Img/Cls sweep needs at least one fedd3 method")

    num_classes = _num_classes(config) if sweep == "clients" else 0
    cells = []
    for value in points:
        for method in methods:
            update: Dict[str, Any] = {"method": method}
            distill = base.distill
            if sweep == "clients":
                m = int(value)
                update["num_clients"] = m
                if method.is_fedd3 and config.sweeps.global_distilled is not None:
                    ipc = per_client_imgs(config.sweeps.global_distilled, m, base, num_classes)
                    if ipc is None:
                        valid = [k for k in range(1, config.sweeps.global_distilled + 1)
                                 if per_client_imgs(config.sweeps.global_distilled, k, base, num_classes)]
                        raise SweepConfigError(
                            f"global distilled count {config.sweeps.global_distilled} is not divisible "
                            f"across {m} clients; valid client counts: {valid}")
                    distill = distill.model_copy(update={"imgs_per_class": ipc})
            elif sweep == "imgcls":
                distill = distill.model_copy(update={"imgs_per_class": int(value)})
            elif sweep == "ck":
                update["classes_per_client"] = int(value)
                update["partition"] = "pathological"
            elif sweep == "stragglers":
                update["straggler_drop_rate"] = float(value)
            update["distill"] = distill

            for seed in config.seeds:
                fed = FedConfig.model_validate({**base.model_dump(), **update, "seed": seed})
                axis_tag = "" if value is None else f"-{sweep}{_slug(value)}"
                cell_id = f"{_slug(config.name)}{axis_tag}-{method.value}-s{seed}"
                cells.append(Cell(cell_id, method.value, seed, sweep, value, fed.model_dump(mode="json")))
    return cells


def _run_with_grid(config: ExperimentConfig, fed: FedConfig, train: Dataset,
                   test: Dataset) -> Tuple[RunReport, Dict[str, float]]:
    grid = config.local_epochs_grid
    if fed.method.is_fedd3 or fed.shots != "one_shot" or not grid:
        return run(fed, train, test), {}
    best, candidates = None, {}
    for epochs in grid:
        report = run(fed.model_copy(update={"local_epochs": epochs}), train, test)
        candidates[str(epochs)] = report.final_accuracy
        if best is None or report.final_accuracy > best.final_accuracy:
            best = report
    logger.info(f"Local-epoch grid {grid}: best final accuracy {best.final_accuracy:.4f}")
    return best, candidates


def execute_cell(config: ExperimentConfig, cell: Cell, out_dir: Path) -> Dict[str, Any]:
    """Run one cell and write its report; failures become a failed payload"""
    logger.info(f"Starting cell {cell.cell_id}")
    payload: Dict[str, Any] = {k: v for k, v in asdict(cell).items() if k != "federation"}
    try:
        fed = FedConfig.model_validate(cell.federation)
        train, test = load_data(config, cell.seed)
        report, candidates = _run_with_grid(config, fed, train, test)

        ledger = report.ledger
        eval_accuracy = report.final_accuracy
        if config.eval_rounds is not None and fed.shots == "multi_shot":
            # best accuracy within the first eval_rounds rounds, volume over the same rounds
            eval_accuracy = max(report.accuracies[:config.eval_rounds])
            ledger = ledger.truncated(config.eval_rounds)
        payload.update({
            "status": "ok",
            "final_accuracy": report.final_accuracy,
            "eval_accuracy": eval_accuracy,
            "uplink_bits": ledger.total_uplink_bits,
            "downlink_bits": ledger.total_downlink_bits,
            "rounds": report.rounds_executed,
            "gce": gce_table(eval_accuracy, config.gammas, ledger, fed.volume_accounting),
            "local_epochs_candidates": candidates,
            "curve": report.curve_rows(),
            "report": report.model_dump(mode="json", exclude={"wall_time_seconds"}),
            "experiment": config.model_dump(mode="json"),
        })
        if config.save_weights and report.final_weights is not None:
            (out_dir / "weights").mkdir(parents=True, exist_ok=True)
            save_weights(report.final_weights, out_dir / "weights" / f"{cell.cell_id}.json")
        logger.info(f"Cell {cell.cell_id}: accuracy {report.final_accuracy:.4f}, "
                    f"{payload['uplink_bits']} uplink bits")
    except Exception as e:
        logger.warning(f"Cell {cell.cell_id} failed: {e}")
        payload.update({"status": "failed", "error": f"{type(e).__name__}: {e}"})
        if isinstance(e, ClientFailure):
            payload["client_id"] = e.client_id

    reports = out_dir / "reports"
    reports.mkdir(parents=True, exist_ok=True)
    (reports / f"{cell.cell_id}.json").write_text(json.dumps(payload, indent=2, sort_keys=True))
    return payload


def _execute_cell_job(args: Tuple[Dict[str, Any], Cell, str]) -> Dict[str, Any]:
    config, cell, out_dir = args
    return execute_cell(ExperimentConfig.model_validate(config), cell, Path(out_dir))


class ExperimentEngine:
    def __init__(self, config: ExperimentConfig, out_dir: Optional[str] = None,
                 jobs: int = 1, resume: bool = False):
        self.config = config
        self.out_dir = Path(out_dir or config.output_dir)
        self.jobs = max(1, jobs)
        self.resume = resume

    def _completed(self, cell: Cell) -> Optional[Dict[str, Any]]:
        path = self.out_dir / "reports" / f"{cell.cell_id}.json"
        if not path.exists():
            return None
        try:
            payload = json.loads(path.read_text())
        except json.JSONDecodeError:
            return None
        return payload if payload.get("status") == "ok" else None

    def aggregate(self, payloads: List[Dict[str, Any]]) -> pd.DataFrame:
        """Median, mean and std over seeds per (axis value, method)"""
        rows = []
        for p in payloads:
            if p.get("status") != "ok":
                continue
            row = {"axis": p["axis"], "axis_value": p["axis_value"], "method": p["method"],
                   "seed": p["seed"], "final_accuracy": p["final_accuracy"],
                   "eval_accuracy": p["eval_accuracy"], "uplink_bits": p["uplink_bits"]}
            row.update(p["gce"])
            rows.append(row)
        if not rows:
            return pd.DataFrame(columns=AGGREGATE_COLUMNS)
        df = pd.DataFrame(rows)
        df["axis_value"] = pd.to_numeric(df["axis_value"]).fillna(-1.0)
        metrics = [c for c in df.columns if c not in ("axis", "axis_value", "method", "seed")]
        df[metrics] = df[metrics].astype(float)
        grouped = df.groupby(["axis", "axis_value", "method"], sort=True)
        table = grouped[metrics].agg(["median", "mean", "std"])
        table.columns = [f"{metric}_{stat}" for metric, stat in table.columns]
        table.insert(0, "seeds", grouped["seed"].count())
        return table.reset_index()

    @staticmethod
    def curves(payloads: List[Dict[str, Any]]) -> pd.DataFrame:
        rows = [{"cell_id": p["cell_id"], "method": p["method"], "seed": p["seed"],
                 "axis": p["axis"], "axis_value": p["axis_value"], **point}
                for p in payloads if p.get("status") == "ok" for point in p["curve"]]
        return pd.DataFrame(rows, columns=CURVE_COLUMNS)

    def run_sweep(self, sweep: str = "run") -> Dict[str, Any]:
        """Execute every cell of a sweep and write the CSV tables"""
        logger.info(f"Starting experiment: {self.config.name} ({sweep})")
        start_time = time.perf_counter()
        cells = plan_cells(self.config, sweep)
        self.out_dir.mkdir(parents=True, exist_ok=True)

        payloads: Dict[str, Dict[str, Any]] = {}
        pending = []
        for cell in cells:
            done = self._completed(cell) if self.resume else None
            if done is not None:
                payloads[cell.cell_id] = done
            else:
                pending.append(cell)
        skipped = len(cells) - len(pending)
        if skipped:
            logger.info(f"Resuming: {skipped} completed cells skipped")

        if self.jobs > 1 and len(pending) > 1:
            config_doc = self.config.model_dump(mode="json")
            jobs = [(config_doc, cell, str(self.out_dir)) for cell in pending]
            with ProcessPoolExecutor(max_workers=min(32, self.jobs)) as executor:
                for cell, payload in zip(pending, executor.map(_execute_cell_job, jobs)):
                    payloads[cell.cell_id] = payload
        else:
            for cell in pending:
                payloads[cell.cell_id] = execute_cell(self.config, cell, self.out_dir)

        ordered = [payloads[cell.cell_id] for cell in cells]
        aggregate_path = self.out_dir / f"aggregate_{sweep}.csv"
        curves_path = self.out_dir / f"curves_{sweep}.csv"
        self.aggregate(ordered).to_csv(aggregate_path, index=False)
        self.curves(ordered).to_csv(curves_path, index=False)

        failures = [{"cell_id": p["cell_id"], "error": p.get("error")}
                    for p in ordered if p.get("status") != "ok"]
        duration = time.perf_counter() - start_time
        return {
            "status": "success" if not failures else "partial",
            "experiment": self.config.name,
            "sweep": sweep,
            "cells": len(cells),
            "completed": len(cells) - len(failures),
            "skipped": skipped,
            "failures": failures,
            "aggregate_path": str(aggregate_path),
            "curves_path": str(curves_path),
            "duration_seconds": duration,
        }
