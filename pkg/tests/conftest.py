from __future__ import annotations

import pytest

from fedprov.fl import ProvenanceMode, TrainingConfig
from fedprov.model import DatasetSpec, ModelSpec


def make_config(store_path=None, *, mode="snapshot+hash-sync", clients=2, rounds=2, epochs=2,
                layers=(3, 4, 2), samples=None, seed=5, **kw) -> TrainingConfig:
    samples = samples if samples is not None else 2 * clients
    return TrainingConfig(
        run_seed=seed,
        num_clients=clients,
        n_global=rounds,
        n_client=epochs,
        lr=0.05,
        model_spec=ModelSpec(tuple(layers)),
        dataset_spec=DatasetSpec(samples, layers[0], layers[-1], seed=11),
        provenance_mode=ProvenanceMode.from_name(mode),
        store_path=store_path,
        **kw,
    )


@pytest.fixture
def config_factory(tmp_path):
    counter = iter(range(10_000))

    def factory(**kw):
        kw.setdefault("store_path", tmp_path / f"store-{next(counter)}")
        return make_config(**kw)

    return factory


def pytest_terminal_summary(terminalreporter):
    from acceptance_report import RESULTS

    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(RESULTS):
        name, ok, detail = RESULTS[number]
        line = f"criterion {number:>2} {name}: {'PASS' if ok else 'FAIL'}"
        if detail:
            line += f" ({detail})"
        terminalreporter.write_line(line)
