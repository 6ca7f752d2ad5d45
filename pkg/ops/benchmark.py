#!/usr/bin/env python3
"""
FedD3 Compute-Cost Benchmarks
Times client-side KIP distillation against one-shot local training on the same client data
"""

import time
from statistics import mean, median
from typing import Any, Dict, List, Optional

from distillfed.config_schema import BlobConfig, DistillConfig, KernelSpec, ModelSpec, TrainConfig
from distillfed.data import Dataset, gen_blobs, make_partition
from distillfed.distill import distill_coreset_gmm, distill_kip
from distillfed.metrics import distilled_uplink_bits, model_uplink_bits
from distillfed.model import mlp_init, sgd_train


class DistillFedBenchmark:
    def __init__(self, blobs: Optional[BlobConfig] = None, num_clients: int = 10, classes_per_client: int = 2,
                 hidden_widths: Optional[List[int]] = None, seed: int = 0):
        self.dataset = gen_blobs(blobs or BlobConfig())
        self.partition = make_partition(self.dataset, "pathological", num_clients, classes_per_client, seed)
        self.widths = [self.dataset.dim, *(hidden_widths or [64]), self.dataset.num_classes]
        self.seed = seed

    def client(self, client_id: int) -> Dataset:
        return self.partition.client_data(self.dataset, client_id)

    def benchmark_kip(self, steps: int = 100, imgs_per_class: int = 1, bandwidth: float = 3.0) -> Dict[str, Any]:
        """KIP distillation for a fixed number of gradient steps per client"""
        print(f"\n🧪 KIP Distillation ({steps} steps, {imgs_per_class} Img/Cls)")
        latencies = []
        bits = 0
        for k in range(self.partition.num_clients):
            data = self.client(k)
            # target_batch_frac=1 makes one epoch equal one step
            cfg = DistillConfig(imgs_per_class=imgs_per_class, max_epochs=steps, target_batch_frac=1.0,
                                acc_threshold=1.0, kernel=KernelSpec(bandwidth=bandwidth), seed=self.seed)
            start = time.perf_counter()
            distilled = distill_kip(data, cfg, k)
            latencies.append(time.perf_counter() - start)
            bits += distilled_uplink_bits(distilled)

        print(f"✅ Distilled {len(latencies)} clients")
        print(f"   P50 per client: {median(latencies) * 1000:.1f}ms")
        print(f"   Avg per client: {mean(latencies) * 1000:.1f}ms")
        print(f"   Uplink: {bits} bits")
        return {"clients": len(latencies), "p50": median(latencies), "mean": mean(latencies),
                "total": sum(latencies), "uplink_bits": bits}

    def benchmark_coreset(self, imgs_per_class: int = 1) -> Dict[str, Any]:
        """GMM coreset distillation per client"""
        print(f"\n🎯 Coreset Distillation ({imgs_per_class} Img/Cls)")
        latencies = []
        for k in range(self.partition.num_clients):
            cfg = DistillConfig(imgs_per_class=imgs_per_class, kernel=KernelSpec(bandwidth=3.0), seed=self.seed)
            start = time.perf_counter()
            distill_coreset_gmm(self.client(k), cfg, k)
            latencies.append(time.perf_counter() - start)

        print(f"✅ Avg per client: {mean(latencies) * 1000:.1f}ms")
        return {"clients": len(latencies), "p50": median(latencies), "mean": mean(latencies),
                "total": sum(latencies)}

    def benchmark_local_training(self, epochs: int = 50) -> Dict[str, Any]:
        """One-shot local training of the global model architecture per client"""
        print(f"\n🏋️ Local Training ({epochs} epochs)")
        init = mlp_init(ModelSpec(widths=self.widths, seed=self.seed))
        latencies = []
        for k in range(self.partition.num_clients):
            data = self.client(k)
            cfg = TrainConfig(epochs=epochs, seed=self.seed)
            start = time.perf_counter()
            sgd_train(init, data.features, data.onehot(), cfg)
            latencies.append(time.perf_counter() - start)
        bits = model_uplink_bits(init.param_count, "fedavg") * len(latencies)

        print(f"✅ Trained {len(latencies)} clients")
        print(f"   P50 per client: {median(latencies) * 1000:.1f}ms")
        print(f"   Uplink: {bits} bits")
        return {"clients": len(latencies), "p50": median(latencies), "mean": mean(latencies),
                "total": sum(latencies), "uplink_bits": bits}

    def run_all_benchmarks(self) -> Dict[str, Any]:
        """Execute full benchmark suite"""
        print("=" * 70)
        print("FEDD3 CLIENT COMPUTE BENCHMARKS")
        print("=" * 70)

        results = {}
        results['kip'] = self.benchmark_kip()
        results['coreset'] = self.benchmark_coreset()
        results['local'] = self.benchmark_local_training()

        ratio = results['kip']['total'] / results['local']['total'] if results['local']['total'] > 0 else 0
        volume = results['kip']['uplink_bits'] / results['local']['uplink_bits']

        print("\n" + "=" * 70)
        print("SUMMARY")
        print("=" * 70)
        print(f"KIP time per client: {results['kip']['mean'] * 1000:.1f}ms")
        print(f"Coreset time per client: {results['coreset']['mean'] * 1000:.1f}ms")
        print(f"Local training per client: {results['local']['mean'] * 1000:.1f}ms")
        print(f"KIP / local training time: {ratio:.2f}x")
        print(f"Distilled / model uplink volume: {volume:.4f}")
        print("=" * 70)

        results['time_ratio'] = ratio
        results['volume_ratio'] = volume
        return results


if __name__ == '__main__':
    bench = DistillFedBenchmark()
    bench.run_all_benchmarks()
