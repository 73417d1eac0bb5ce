"""Federated rounds with FedAvg aggregation and provenance hooks.

Clients are numbered 1..num_clients and trained sequentially inside a round.
Rounds and epochs count from 1. Client id 0 is the server's chain: at every
(round, epoch) it holds the FedAvg of the clients' models after that epoch, so
the entry at the round's last epoch is exactly the next round's global model.
"""

from __future__ import annotations

import hashlib
import json
import time
from collections.abc import Callable, Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import AggregationError, ConfigError, FedProvError, StorageError
from .model import Dataset, DatasetSpec, ModelSpec, gen_dataset, init_model, partition_shards, train_epoch
from .params import ParameterSet, canonical_encode
from .pipeline import PersistencePipeline, PipelineStats
from .provenance import Recorder
from .store import Manifest, ProvenanceStore

Hook = Callable[[int, int, int, ParameterSet], None]

GLOBAL_CLIENT = 0
PERSISTENCE = ("synchronous", "background")


@dataclass(frozen=True)
class ProvenanceMode:
    snapshot: bool = False
    hash: bool = False
    persistence: str = "synchronous"

    def __post_init__(self):
        if self.persistence not in PERSISTENCE:
            raise ConfigError(f"persistence must be one of {PERSISTENCE}, got {self.persistence!r}")

    @property
    def enabled(self) -> bool:
        return self.snapshot or self.hash

    @property
    def name(self) -> str:
        if not self.enabled:
            return "none"
        parts = "+".join(p for p, on in (("snapshot", self.snapshot), ("hash", self.hash)) if on)
        return f"{parts}-{'sync' if self.persistence == 'synchronous' else 'async'}"

    @classmethod
    def from_name(cls, name: str) -> ProvenanceMode:
        if name == "none":
            return cls()
        features, _, persistence = name.rpartition("-")
        flags = set(features.split("+"))
        if not features or not flags <= {"snapshot", "hash"} or persistence not in ("sync", "async"):
            raise ConfigError(f"unknown provenance mode {name!r}")
        return cls(
            snapshot="snapshot" in flags,
            hash="hash" in flags,
            persistence="synchronous" if persistence == "sync" else "background",
        )


@dataclass(frozen=True)
class TrainingConfig:
    run_seed: int
    num_clients: int
    n_global: int
    n_client: int
    lr: float
    model_spec: ModelSpec
    dataset_spec: DatasetSpec
    provenance_mode: ProvenanceMode = field(default_factory=ProvenanceMode)
    store_path: Path | None = None
    record_global: bool = True
    queue_capacity: int = 64
    workers: int = 1

    def __post_init__(self):
        for name in ("num_clients", "n_global", "n_client", "queue_capacity", "workers"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if not (isinstance(self.lr, (int, float)) and self.lr > 0 and np.isfinite(self.lr)):
            raise ConfigError(f"lr must be a positive finite number, got {self.lr!r}")
        if not 0 <= self.run_seed < 2**64:
            raise ConfigError(f"run_seed must be an unsigned 64-bit integer, got {self.run_seed}")
        spec, data = self.model_spec, self.dataset_spec
        if data.input_dim != spec.layer_sizes[0] or data.output_dim != spec.layer_sizes[-1]:
            raise ConfigError(
                f"dataset is {data.input_dim} -> {data.output_dim} but model is "
                f"{spec.layer_sizes[0]} -> {spec.layer_sizes[-1]}"
            )
        if data.num_samples % self.num_clients:
            raise ConfigError(f"{data.num_samples} samples cannot be split across {self.num_clients} clients")
        if self.store_path is not None:
            object.__setattr__(self, "store_path", Path(self.store_path))

    @property
    def client_ids(self) -> list[int]:
        return list(range(1, self.num_clients + 1))

    @property
    def chain_ids(self) -> list[int]:
        return ([GLOBAL_CLIENT] if self.record_global else []) + self.client_ids

    def expected_counts(self) -> dict[int, int]:
        counts = {c: self.n_global * self.n_client for c in self.client_ids}
        if self.record_global:
            counts[GLOBAL_CLIENT] = self.n_global * self.n_client
        return counts

    def to_dict(self) -> dict:
        return {
            "run_seed": self.run_seed,
            "num_clients": self.num_clients,
            "n_global": self.n_global,
            "n_client": self.n_client,
            "lr": self.lr,
            "model": {"layer_sizes": list(self.model_spec.layer_sizes)},
            "dataset": asdict(self.dataset_spec),
            "provenance": asdict(self.provenance_mode),
            "store_path": None if self.store_path is None else str(self.store_path),
            "record_global": self.record_global,
            "queue_capacity": self.queue_capacity,
            "workers": self.workers,
        }

    def digest(self) -> str:
        """SHA-256 hex of the sorted, compact JSON of every field except ``store_path``."""
        data = self.to_dict()
        del data["store_path"]
        text = json.dumps(data, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode("utf-8")).hexdigest()

    @classmethod
    def from_dict(cls, data: dict) -> TrainingConfig:
        known = {"run_seed", "num_clients", "n_global", "n_client", "lr", "model", "dataset",
                 "provenance", "store_path", "record_global", "queue_capacity", "workers"}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            layer_sizes = tuple(data["model"]["layer_sizes"])
            model_spec = ModelSpec(layer_sizes)
            ds = dict(data.get("dataset", {}))
            ds.setdefault("input_dim", layer_sizes[0])
            ds.setdefault("output_dim", layer_sizes[-1])
            dataset_spec = DatasetSpec(**ds)
            mode = data.get("provenance", {})
            mode = ProvenanceMode.from_name(mode) if isinstance(mode, str) else ProvenanceMode(**mode)
            kwargs = {k: data[k] for k in ("record_global", "queue_capacity", "workers", "store_path") if k in data}
            return cls(
                run_seed=int(data["run_seed"]),
                num_clients=data["num_clients"],
                n_global=data["n_global"],
                n_client=data["n_client"],
                lr=float(data["lr"]),
                model_spec=model_spec,
                dataset_spec=dataset_spec,
                provenance_mode=mode,
                **kwargs,
            )
        except KeyError as exc:
            raise ConfigError(f"missing config key {exc}") from None
        except TypeError as exc:
            raise ConfigError(f"malformed config: {exc}") from None


def load_config(path) -> TrainingConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path} must hold a JSON object")
    return TrainingConfig.from_dict(data)


def manifest_for(config: TrainingConfig) -> Manifest:
    mode = config.provenance_mode
    return Manifest(
        config_digest=config.digest(),
        client_ids=config.chain_ids,
        expected_counts=config.expected_counts(),
        mode={
            "snapshot": mode.snapshot,
            "hash": mode.hash,
            "persistence": mode.persistence,
            "n_global": config.n_global,
            "n_client": config.n_client,
            "record_global": config.record_global,
        },
    )


@dataclass
class RunResult:
    final_global_model: ParameterSet
    wall_time: float
    records_written: int
    timings: dict[str, float]
    hook_calls: int = 0
    bytes_written: int = 0
    pipeline: PipelineStats | None = None

    def to_dict(self) -> dict:
        return {
            "final_model_sha256": hashlib.sha256(canonical_encode(self.final_global_model)).hexdigest(),
            "num_parameters": self.final_global_model.num_parameters,
            "wall_time": self.wall_time,
            "records_written": self.records_written,
            "hook_calls": self.hook_calls,
            "bytes_written": self.bytes_written,
            "timings": dict(self.timings),
            "pipeline": None if self.pipeline is None else self.pipeline.to_dict(),
        }


def _annotate(exc: FedProvError, client_id, round_id, epoch):
    if not getattr(exc, "_annotated", False):
        exc.args = (f"client {client_id}, round {round_id}, epoch {epoch}: {exc}",) + exc.args[1:]
        exc._annotated = True
    return exc


def client_update(
    client_id: int,
    round_id: int,
    model: ParameterSet,
    shard: Dataset,
    config: TrainingConfig,
    hook: Hook | None = None,
    *,
    first_epoch: int = 1,
    timings: dict | None = None,
) -> ParameterSet:
    """Run epochs ``first_epoch..n_client``, calling ``hook`` after each one."""
    clock = time.perf_counter
    for epoch in range(first_epoch, config.n_client + 1):
        try:
            t0 = clock()
            model = train_epoch(model, shard, config.lr)
            t1 = clock()
            if hook is not None:
                hook(client_id, round_id, epoch, model)
            t2 = clock()
        except FedProvError as exc:
            raise _annotate(exc, client_id, round_id, epoch)
        if timings is not None:
            timings["train"] = timings.get("train", 0.0) + (t1 - t0)
            timings["provenance"] = timings.get("provenance", 0.0) + (t2 - t1)
    return model


class RunningMean:
    """Weighted average built one model at a time, in the order added.

    ``acc += (w_k / W_k) * (m_k - acc)`` with ``W_k`` the cumulative weight, so
    identical inputs come back bit-for-bit unchanged.
    """

    def __init__(self):
        self._acc: dict[str, np.ndarray] | None = None
        self._structure = None
        self._total = 0.0

    def add(self, model: ParameterSet, weight: float) -> None:
        if self._structure is None:
            self._structure = model.structure()
        elif model.structure() != self._structure:
            raise AggregationError(f"model has structure {model.structure()}, expected {self._structure}")
        if weight == 0:
            return
        self._total += weight
        if self._acc is None:
            self._acc = model.to_dict()
            return
        frac = weight / self._total
        for name, arr in model.items():
            self._acc[name] += frac * (arr - self._acc[name])

    def result(self) -> ParameterSet:
        if self._acc is None:
            raise AggregationError("nothing to aggregate")
        return ParameterSet(self._acc)


def aggregate(models: Sequence[ParameterSet], weights: Sequence[float]) -> ParameterSet:
    """FedAvg: weighted average of ``models``, accumulated in list order."""
    if not models:
        raise AggregationError("nothing to aggregate")
    if len(weights) != len(models):
        raise AggregationError(f"{len(models)} models but {len(weights)} weights")
    if any(not w >= 0 for w in weights) or abs(sum(weights) - 1.0) > 1e-9:
        raise AggregationError(f"weights must be non-negative and sum to 1, got {list(weights)}")
    mean = RunningMean()
    for m, w in zip(models, weights):
        mean.add(m, w)
    return mean.result()


def _federated_rounds(
    config: TrainingConfig,
    shards: list[Dataset],
    global_model: ParameterSet,
    hook: Hook | None,
    timings: dict,
    *,
    global_hook: Hook | None = None,
    first_round: int = 1,
    resume_models: dict[int, ParameterSet] | None = None,
    resume_epoch: int = 0,
) -> ParameterSet:
    """The round loop. ``hook`` sees every client epoch; ``global_hook`` sees the
    server chain, one call per (round, epoch) that was trained in this call."""
    weight = 1.0 / config.num_clients
    weights = [weight] * config.num_clients
    clock = time.perf_counter
    for round_id in range(first_round, config.n_global + 1):
        resuming = resume_models is not None and round_id == first_round
        first_epoch = resume_epoch + 1 if resuming else 1
        means = {e: RunningMean() for e in range(first_epoch, config.n_client + 1)} if global_hook else None

        def epoch_hook(client_id, r, e, params):
            if means is not None:
                means[e].add(params, weight)
            if hook is not None:
                hook(client_id, r, e, params)

        updated = []
        for client_id, shard in zip(config.client_ids, shards):
            start = resume_models[client_id] if resuming else global_model
            updated.append(
                client_update(client_id, round_id, start, shard, config, epoch_hook,
                              first_epoch=first_epoch, timings=timings)
            )
        t0 = clock()
        try:
            if not means:
                global_model = aggregate(updated, weights)
            else:
                # same additions in the same order as aggregate(updated, weights)
                global_model = means[config.n_client].result()
        except FedProvError as exc:
            raise _annotate(exc, GLOBAL_CLIENT, round_id, config.n_client)
        t1 = clock()
        timings["aggregate"] = timings.get("aggregate", 0.0) + (t1 - t0)
        if means:
            for epoch, mean in means.items():
                try:
                    global_hook(GLOBAL_CLIENT, round_id, epoch,
                                global_model if epoch == config.n_client else mean.result())
                except FedProvError as exc:
                    raise _annotate(exc, GLOBAL_CLIENT, round_id, epoch)
            timings["provenance"] = timings.get("provenance", 0.0) + (clock() - t1)
    return global_model


def _setup(config: TrainingConfig):
    shards = partition_shards(gen_dataset(config.dataset_spec), config.num_clients)
    return shards, init_model(config.model_spec, config.run_seed)


def run_federated(config: TrainingConfig, *, sink=None, hook: Hook | None = None) -> RunResult:
    """Train ``n_global`` rounds; record provenance per ``config.provenance_mode``.

    Without ``sink`` a new store is created at ``config.store_path`` when the
    mode records anything. Wall time covers the round loop and the final
    flush, not data generation or store creation.
    """
    mode = config.provenance_mode
    shards, global_model = _setup(config)
    store = pipeline = None
    if sink is None and mode.enabled:
        if config.store_path is None:
            raise ConfigError("provenance is enabled but no store_path is configured")
        store = ProvenanceStore.create(config.store_path, manifest_for(config))
        if mode.persistence == "background":
            sink = pipeline = PersistencePipeline(store, config.queue_capacity, config.workers)
        else:
            sink = store
    recorder = Recorder(sink, mode) if sink is not None and mode.enabled else None
    calls = 0

    def dispatch(client_id, round_id, epoch, params):
        if recorder is not None:
            recorder(client_id, round_id, epoch, params)
        if hook is not None:
            hook(client_id, round_id, epoch, params)

    def client_dispatch(client_id, round_id, epoch, params):
        nonlocal calls
        calls += 1
        dispatch(client_id, round_id, epoch, params)

    global_hook = dispatch if config.record_global and (recorder is not None or hook is not None) else None

    timings: dict[str, float] = {"train": 0.0, "provenance": 0.0, "aggregate": 0.0, "flush": 0.0}
    stats = None
    t_start = time.perf_counter()
    try:
        final = _federated_rounds(config, shards, global_model, client_dispatch, timings, global_hook=global_hook)
    finally:
        t_flush = time.perf_counter()
        if pipeline is not None:
            stats = pipeline.flush_and_close()
        if store is not None:
            store.close()
        timings["flush"] = time.perf_counter() - t_flush
    wall = time.perf_counter() - t_start
    if stats is not None and stats.failed:
        raise StorageError(f"{stats.failed} record(s) were not persisted: {stats.first_failure}")
    return RunResult(
        final_global_model=final,
        wall_time=wall,
        records_written=recorder.records_written if recorder is not None else 0,
        timings=timings,
        hook_calls=calls,
        bytes_written=store.bytes_written if store is not None else 0,
        pipeline=stats,
    )


def resume_federated(
    config: TrainingConfig, client_models: dict[int, ParameterSet], round_id: int, epoch: int, hook: Hook | None
) -> ParameterSet:
    """Continue a run from every client's state after (round_id, epoch).

    ``hook`` sees every client epoch after the resume point and, when the
    config records the global chain, every later global entry.
    """
    if not 1 <= round_id <= config.n_global or not 1 <= epoch <= config.n_client:
        raise ConfigError(f"({round_id}, {epoch}) is outside the run's schedule")
    missing = set(config.client_ids) - set(client_models)
    if missing:
        raise ConfigError(f"no resume state for clients {sorted(missing)}")
    shards, global_model = _setup(config)
    return _federated_rounds(
        config, shards, global_model, hook, {},
        global_hook=hook if config.record_global else None,
        first_round=round_id, resume_models=client_models, resume_epoch=epoch,
    )
