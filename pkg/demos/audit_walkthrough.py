"""Train a small federation, break one stored snapshot, and watch the ledger catch it.

    python3 demos/audit_walkthrough.py [workdir]
"""

from __future__ import annotations

import shutil
import sys
import tempfile
from pathlib import Path

from fedprov import (
    DatasetSpec,
    ModelSpec,
    ProvenanceMode,
    ProvenanceStore,
    TrainingConfig,
    replay_verify,
    rollback,
    run_federated,
    verify_chain,
)
from fedprov.tamper import tamper


def main(workdir: Path) -> None:
    config = TrainingConfig(
        run_seed=7,
        num_clients=3,
        n_global=3,
        n_client=2,
        lr=0.05,
        model_spec=ModelSpec((4, 8, 2)),
        dataset_spec=DatasetSpec(num_samples=30, input_dim=4, output_dim=2, seed=1),
        provenance_mode=ProvenanceMode.from_name("snapshot+hash-sync"),
        store_path=workdir / "run",
    )
    result = run_federated(config)
    print(f"trained: {result.records_written} records in {result.wall_time:.3f}s")

    store = ProvenanceStore.open(config.store_path)
    for client in store.client_ids:
        print(f"  chain {client}: {verify_chain(store, client).checked} links verified")
    print(f"replay matches the store: {replay_verify(config, store).matched}")

    # Anyone holding the snapshot can restore the model a client had after round 2, epoch 1.
    params = rollback(store, 2, 2, 1)
    print(f"rolled back client 2 to (2, 1): {params.num_parameters} parameters")

    # Flip one byte in that snapshot and repair the frame checksum, so only the chain can tell.
    broken = workdir / "broken"
    shutil.copytree(config.store_path, broken)
    tamper(broken, 2, 2, 1, offset=40, xor=0x10, fix_crc=True)
    outcome = verify_chain(ProvenanceStore.open(broken), 2, full_scan=True)
    first = outcome.first_failure
    print(f"after tampering: ok={outcome.ok}, first failure at round {first.round} epoch {first.epoch} ({first.reason})")


if __name__ == "__main__":
    if len(sys.argv) > 1:
        main(Path(sys.argv[1]))
    else:
        with tempfile.TemporaryDirectory() as tmp:
            main(Path(tmp))
