"""A quick overhead sweep: how much each provenance mode adds to training time.

The sizes here are small so the sweep finishes in seconds; ``fedprov bench`` runs
the full sweep from a config file.

    python3 demos/overhead_sweep.py
"""

from __future__ import annotations

from fedprov import DatasetSpec, ModelSpec, TrainingConfig
from fedprov.bench import BenchConfig, check_orderings, run_bench

base = TrainingConfig(
    run_seed=1,
    num_clients=2,
    n_global=2,
    n_client=2,
    lr=0.01,
    model_spec=ModelSpec((2, 2)),
    dataset_spec=DatasetSpec(num_samples=8, input_dim=2, output_dim=2),
)
report = run_bench(BenchConfig(base=base, sizes=(1_000, 10_000, 100_000), repetitions=3))

print(f"{'mode':<22}{'params':>9}{'median s':>11}{'overhead %':>12}{'bytes':>12}")
for row in report.rows:
    print(f"{row.mode:<22}{row.size:>9}{row.median_seconds:>11.4f}{row.overhead_pct:>12.1f}{row.bytes:>12}")
for problem in check_orderings(report):
    print("note:", problem)
