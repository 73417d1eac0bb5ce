"""Overhead benchmark: time every provenance mode against a no-provenance baseline.

Each (size, mode) cell runs ``repetitions`` times with identical seeds; modes
are interleaved within a repetition, rotating the start, so slow drift in the
host affects every mode alike. Medians are reported. A cell only counts once
its store has been checked against a reference hash chain computed in memory.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import shutil
import statistics
import tempfile
from dataclasses import dataclass, field, replace
from pathlib import Path

from .errors import ConfigError, FedProvError
from .fl import ProvenanceMode, TrainingConfig, run_federated
from .model import ModelSpec
from .provenance import MemorySink, compute_chain_hash, verify_chain
from .store import ProvenanceStore

logger = logging.getLogger(__name__)

DEFAULT_MODES = ("none", "snapshot-sync", "snapshot-async", "hash-sync", "hash-async", "snapshot+hash-async")
DEFAULT_SIZES = (10_000, 100_000, 1_000_000)
COLUMNS = ("mode", "size", "median_seconds", "overhead_pct", "records", "bytes")


def overhead_pct(t_mode: float, t_base: float) -> float:
    if not t_base > 0:
        raise ValueError(f"baseline time must be positive, got {t_base}")
    return 100.0 * (t_mode - t_base) / t_base


def model_for_size(num_parameters: int) -> ModelSpec:
    """Smallest square single-layer model ``[d, d]`` with at least ``num_parameters``."""
    if num_parameters < 2:
        raise ConfigError(f"size must be at least 2 parameters, got {num_parameters}")
    d = max(1, math.isqrt(num_parameters) - 1)
    while d * d + d < num_parameters:
        d += 1
    return ModelSpec((d, d))


@dataclass
class BenchConfig:
    base: TrainingConfig
    modes: tuple[str, ...] = DEFAULT_MODES
    repetitions: int = 5
    sizes: tuple[int, ...] = DEFAULT_SIZES
    warmup: bool = True
    workdir: Path | None = None

    def __post_init__(self):
        self.modes = tuple(self.modes)
        self.sizes = tuple(self.sizes)
        if self.repetitions < 3:
            raise ConfigError(f"repetitions must be at least 3 for a median, got {self.repetitions}")
        for name in self.modes:
            ProvenanceMode.from_name(name)
        if len(set(self.modes)) != len(self.modes):
            raise ConfigError(f"duplicate modes in {list(self.modes)}")
        if self.modes and "none" not in self.modes:
            raise ConfigError("the 'none' mode is required as the overhead baseline")
        if not self.sizes:
            raise ConfigError("at least one model size is required")
        for size in self.sizes:
            model_for_size(size)

    @classmethod
    def from_dict(cls, data: dict) -> BenchConfig:
        unknown = set(data) - {"base", "modes", "repetitions", "sizes", "warmup", "workdir"}
        if unknown:
            raise ConfigError(f"unknown bench config keys: {sorted(unknown)}")
        if "base" not in data:
            raise ConfigError("bench config needs a 'base' training config")
        kwargs = {k: data[k] for k in ("modes", "repetitions", "sizes", "warmup", "workdir") if k in data}
        return cls(base=TrainingConfig.from_dict(data["base"]), **kwargs)

    def config_for(self, size: int, mode: str, store_path: Path | None) -> TrainingConfig:
        spec = model_for_size(size)
        d = spec.layer_sizes[0]
        dataset = replace(self.base.dataset_spec, input_dim=d, output_dim=d)
        return replace(
            self.base,
            model_spec=spec,
            dataset_spec=dataset,
            provenance_mode=ProvenanceMode.from_name(mode),
            store_path=store_path,
        )


@dataclass(frozen=True)
class BenchRow:
    mode: str
    size: int
    median_seconds: float
    overhead_pct: float
    records: int
    bytes: int

    def as_tuple(self) -> tuple:
        return tuple(getattr(self, c) for c in COLUMNS)


@dataclass
class BenchReport:
    rows: list[BenchRow] = field(default_factory=list)
    invalid: list[dict] = field(default_factory=list)
    samples: dict[tuple[str, int], list[float]] = field(default_factory=dict)

    def row(self, mode: str, size: int) -> BenchRow | None:
        for r in self.rows:
            if r.mode == mode and r.size == size:
                return r
        return None

    @property
    def sizes(self) -> list[int]:
        return sorted({r.size for r in self.rows})

    def to_dict(self) -> dict:
        return {
            "columns": list(COLUMNS),
            "rows": [dict(zip(COLUMNS, r.as_tuple())) for r in self.rows],
            "invalid": list(self.invalid),
        }


def _reference_chain(cfg: TrainingConfig) -> dict:
    sink = MemorySink()
    run_federated(replace(cfg, provenance_mode=ProvenanceMode(hash=True), store_path=None), sink=sink)
    return sink.ledger()


def check_store(path: Path, reference: dict) -> str | None:
    """Return a description of the first problem with a benchmark store, or None."""
    store = ProvenanceStore.open(path)
    seen = 0
    for c in store.client_ids:
        entries = store.entries(c)
        if entries and entries[0].hash is not None and entries[0].blob_len is not None:
            outcome = verify_chain(store, c)
            if not outcome.ok:
                return f"verify_chain failed at {outcome.first_failure}"
        prev = None
        for entry in entries:
            key = (c, entry.round, entry.epoch)
            want = reference.get(key)
            if want is None:
                return f"unexpected record {key}"
            if entry.hash is not None and entry.hash != want:
                return f"stored hash differs from reference at {key}"
            if entry.blob_len is not None:
                prev = compute_chain_hash(store.read(c, entry).param_blob, prev)
                if prev != want:
                    return f"snapshot blob does not reproduce the reference chain at {key}"
            seen += 1
    if seen != len(reference):
        return f"{seen} records stored, {len(reference)} expected"
    return None


def run_bench(config: BenchConfig) -> BenchReport:
    report = BenchReport()
    if not config.modes:
        return report
    root = Path(tempfile.mkdtemp(prefix="fedprov-bench-", dir=config.workdir))
    try:
        for size in config.sizes:
            _bench_size(config, size, root, report)
    finally:
        shutil.rmtree(root, ignore_errors=True)
    return report


def _bench_size(config: BenchConfig, size: int, root: Path, report: BenchReport) -> None:
    reference = _reference_chain(config.config_for(size, "none", None))
    times: dict[str, list[float]] = {m: [] for m in config.modes}
    counts: dict[str, tuple[int, int]] = {}
    bad: dict[str, str] = {}
    modes = list(config.modes)

    def one(mode: str, tag: str) -> float | None:
        path = root / f"{size}-{mode}-{tag}"
        cfg = config.config_for(size, mode, path if mode != "none" else None)
        try:
            result = run_federated(cfg)
            if cfg.provenance_mode.enabled:
                problem = check_store(path, reference)
                if problem:
                    raise FedProvError(problem)
        except FedProvError as exc:
            bad.setdefault(mode, str(exc))
            return None
        finally:
            shutil.rmtree(path, ignore_errors=True)
        counts[mode] = (result.records_written, result.bytes_written)
        return result.wall_time

    if config.warmup:
        for mode in modes:
            one(mode, "warmup")
    for rep in range(config.repetitions):
        k = rep % len(modes)
        for mode in modes[k:] + modes[:k]:
            t = one(mode, str(rep))
            if t is not None:
                times[mode].append(t)
    for mode in modes:
        report.samples[(mode, size)] = list(times[mode])
        if mode in bad:
            report.invalid.append({"mode": mode, "size": size, "reason": bad[mode]})
    if "none" in bad:
        return
    base = statistics.median(times["none"])
    for mode in modes:
        if mode in bad:
            continue
        median = statistics.median(times[mode])
        records, nbytes = counts.get(mode, (0, 0))
        report.rows.append(BenchRow(mode, size, median, overhead_pct(median, base), records, nbytes))
    logger.info("size %d: %s", size, {r.mode: round(r.overhead_pct, 1) for r in report.rows if r.size == size})


def _largest(report: BenchReport) -> tuple[int, dict[str, float]]:
    size = report.sizes[-1]
    return size, {r.mode: r.overhead_pct for r in report.rows if r.size == size}


def ordering_violations(report: BenchReport, *, hash_factor: float = 2.0) -> list[str]:
    """At the largest size: async no worse than sync, hash ``hash_factor`` times below snapshot."""
    if not report.rows:
        return []
    size, ov = _largest(report)
    violations = []
    for feature in ("snapshot", "hash"):
        s, a = ov.get(f"{feature}-sync"), ov.get(f"{feature}-async")
        if s is not None and a is not None and not a <= s:
            violations.append(f"{feature}-async overhead {a:.2f}% exceeds {feature}-sync {s:.2f}% at size {size}")
    for p in ("sync", "async"):
        h, s = ov.get(f"hash-{p}"), ov.get(f"snapshot-{p}")
        if h is not None and s is not None and not (h < s and hash_factor * h <= s):
            violations.append(
                f"hash-{p} overhead {h:.2f}% is not {hash_factor:g}x below snapshot-{p} {s:.2f}% at size {size}"
            )
    return violations


def additivity_violations(report: BenchReport, *, tolerance: float = 20.0) -> list[str]:
    """At the largest size: combined async overhead within ``tolerance`` points of the sum of its parts."""
    if not report.rows:
        return []
    size, ov = _largest(report)
    combo, sa, ha = ov.get("snapshot+hash-async"), ov.get("snapshot-async"), ov.get("hash-async")
    if None in (combo, sa, ha) or abs(combo - (sa + ha)) <= tolerance:
        return []
    return [
        f"snapshot+hash-async overhead {combo:.2f}% is not within {tolerance:g} points "
        f"of snapshot-async + hash-async = {sa + ha:.2f}% at size {size}"
    ]


def check_orderings(report: BenchReport, *, additivity_tolerance: float = 20.0, hash_factor: float = 2.0) -> list[str]:
    """Every violated ordering or additivity property at the largest size, as readable strings."""
    return ordering_violations(report, hash_factor=hash_factor) + additivity_violations(
        report, tolerance=additivity_tolerance
    )


def report_csv(report: BenchReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(COLUMNS)
    for r in report.rows:
        writer.writerow([r.mode, r.size, repr(r.median_seconds), repr(r.overhead_pct), r.records, r.bytes])
    return buf.getvalue()


def report_json(report: BenchReport) -> str:
    return json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n"


def emit_report(report: BenchReport, path, fmt: str = "csv") -> Path:
    if fmt not in ("csv", "json"):
        raise ValueError(f"format must be csv or json, got {fmt!r}")
    path = Path(path)
    text = report_csv(report) if fmt == "csv" else report_json(report)
    path.write_text(text, encoding="utf-8")
    return path


def load_report(path) -> list[dict]:
    """Rows of a CSV or JSON report with numeric fields restored."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if path.suffix == ".json":
        return json.loads(text)["rows"]
    rows = []
    for raw in csv.DictReader(io.StringIO(text)):
        rows.append({
            "mode": raw["mode"],
            "size": int(raw["size"]),
            "median_seconds": float(raw["median_seconds"]),
            "overhead_pct": float(raw["overhead_pct"]),
            "records": int(raw["records"]),
            "bytes": int(raw["bytes"]),
        })
    return rows
