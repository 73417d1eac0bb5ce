"""``fedprov`` command line: train, verify, replay, audit, rollback, bench.

Exit codes: 0 success, 1 verification or audit failure, 2 usage or config
error, 3 storage or model error. With ``--json`` the payload is the only thing
written to stdout; diagnostics always go to stderr. Relative store paths are
resolved against ``$FEDPROV_STORE_ROOT`` when it is set.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import bench as bench_mod
from .errors import (
    AuditInputError,
    ConfigError,
    CorruptRecordError,
    FedProvError,
    NoSnapshotError,
    NotFoundError,
    NotVerifiableOfflineError,
    UsageError,
    VersionMismatchError,
)
from .fl import ProvenanceMode, load_config, run_federated
from .params import canonical_encode
from .provenance import CORRUPT_RECORD, Failure, lineage, replay_verify, rollback, verify_chain
from .store import ProvenanceStore, StoreExistsError

EXIT_OK, EXIT_FAILED, EXIT_USAGE, EXIT_STORAGE = 0, 1, 2, 3
STORE_ROOT_ENV = "FEDPROV_STORE_ROOT"
DEV_ENV = "FEDPROV_DEV"

# errors that mean "the request itself is wrong", as opposed to a broken store or model
_USAGE_ERRORS = (
    ConfigError, UsageError, AuditInputError, NotFoundError, NoSnapshotError,
    NotVerifiableOfflineError, StoreExistsError, VersionMismatchError,
)


@dataclass
class CommandOutcome:
    code: int
    summary: str
    payload: dict | list | None = None


def exit_code_for(exc: BaseException) -> int:
    return EXIT_USAGE if isinstance(exc, _USAGE_ERRORS) else EXIT_STORAGE


def resolve_store(path: str | os.PathLike) -> Path:
    p = Path(path)
    root = os.environ.get(STORE_ROOT_ENV)
    if root and not p.is_absolute():
        return Path(root) / p
    return p


def _open_existing(path: str) -> ProvenanceStore:
    root = resolve_store(path)
    if not (root / "manifest.json").is_file():
        raise NotFoundError(f"no provenance store at {root}")
    return ProvenanceStore.open(root, strict=False)


# -- commands -------------------------------------------------------------------


def cmd_train(args) -> CommandOutcome:
    config = load_config(args.config)
    changes = {}
    if args.mode is not None:
        changes["provenance_mode"] = ProvenanceMode.from_name(args.mode)
    if args.seed is not None:
        changes["run_seed"] = args.seed
    if args.store is not None:
        changes["store_path"] = resolve_store(args.store)
    elif config.store_path is not None:
        changes["store_path"] = resolve_store(config.store_path)
    config = replace(config, **changes)
    if config.store_path is None and config.provenance_mode.enabled:
        if not os.environ.get(STORE_ROOT_ENV):
            raise ConfigError(f"no store path: pass --store, set store_path in the config or set {STORE_ROOT_ENV}")
        config = replace(config, store_path=resolve_store(f"run-{config.digest()[:12]}"))
    result = run_federated(config)
    payload = result.to_dict()
    payload["store"] = None if config.store_path is None else str(config.store_path)
    payload["mode"] = config.provenance_mode.name
    summary = (
        f"trained {config.n_global} rounds x {config.num_clients} clients in {result.wall_time:.3f}s, "
        f"{result.records_written} records ({config.provenance_mode.name})"
    )
    if config.store_path is not None and config.provenance_mode.enabled:
        summary += f" -> {config.store_path}"
    return CommandOutcome(EXIT_OK, summary, payload)


def cmd_verify(args) -> CommandOutcome:
    store = _open_existing(args.store)
    clients = [args.client] if args.client is not None else store.client_ids
    unknown = [c for c in clients if c not in store.client_ids]
    if unknown:
        raise NotFoundError(f"store has no client {unknown[0]}")
    results = {}
    for c in clients:
        try:
            results[c] = verify_chain(store, c, full_scan=args.full_scan).to_dict()
        except CorruptRecordError as exc:
            coords = exc.coords or (c, 0, 0)
            failure = Failure(*coords, CORRUPT_RECORD)
            results[c] = {"ok": False, "first_failure": failure.to_dict(), "checked": 0, "failures": [failure.to_dict()]}
    ok = all(r["ok"] for r in results.values())
    firsts = [r["first_failure"] for r in results.values() if r["first_failure"] is not None]
    first = min(firsts, key=lambda f: (f["round"], f["epoch"], f["client_id"])) if firsts else None
    payload = {"ok": ok, "first_failure": first, "clients": {str(c): r for c, r in results.items()}}
    if ok:
        summary = f"ok: {len(results)} chain(s) verified, {sum(r['checked'] for r in results.values())} records"
    else:
        summary = (
            f"FAILED: {first['reason']} at client {first['client_id']}, "
            f"round {first['round']}, epoch {first['epoch']}"
        )
    return CommandOutcome(EXIT_OK if ok else EXIT_FAILED, summary, payload)


def cmd_replay(args) -> CommandOutcome:
    config = load_config(args.config)
    store = _open_existing(args.store)
    outcome = replay_verify(config, store)
    payload = outcome.to_dict()
    if outcome.matched:
        return CommandOutcome(EXIT_OK, f"matched: {outcome.compared} hashes reproduced", payload)
    c, r, e = outcome.first_divergence
    return CommandOutcome(EXIT_FAILED, f"DIVERGED at client {c}, round {r}, epoch {e}", payload)


def _tensor_stats(params) -> dict:
    out = {}
    for name, arr in params.items():
        out[name] = {
            "shape": list(arr.shape),
            "min": float(np.min(arr)) if arr.size else None,
            "max": float(np.max(arr)) if arr.size else None,
            "mean": float(np.mean(arr)) if arr.size else None,
        }
    return out


def cmd_audit(args) -> CommandOutcome:
    store = _open_existing(args.store)
    if args.client not in store.client_ids:
        raise NotFoundError(f"store has no client {args.client}")
    if (args.round is None) != (args.epoch is None):
        raise UsageError("--round and --epoch go together")
    if args.round is None:
        rows = lineage(store, args.client)
        lines = [
            f"({row['round']}, {row['epoch']})  "
            f"{row['hash'][:16] if row['hash'] else '-' * 16}  "
            f"{row['blob_bytes'] if row['blob_bytes'] is not None else '-'}"
            for row in rows
        ]
        summary = f"client {args.client}: {len(rows)} record(s)" + "".join("\n  " + line for line in lines)
        return CommandOutcome(EXIT_OK, summary, {"client_id": args.client, "records": rows})
    record = store.get(args.client, args.round, args.epoch)
    detail = {
        "client_id": args.client,
        "round": args.round,
        "epoch": args.epoch,
        "hash": record.hash.hex if record.hash is not None else None,
        "blob_bytes": len(record.param_blob) if record.param_blob is not None else None,
        "tensors": None,
    }
    if record.param_blob is not None:
        detail["tensors"] = _tensor_stats(rollback(store, args.client, args.round, args.epoch))
    summary = f"client {args.client} ({args.round}, {args.epoch}) hash {detail['hash'] or '-'}"
    for name, s in (detail["tensors"] or {}).items():
        summary += f"\n  {name} {s['shape']} min={s['min']:.6g} max={s['max']:.6g} mean={s['mean']:.6g}"
    return CommandOutcome(EXIT_OK, summary, detail)


def cmd_rollback(args) -> CommandOutcome:
    store = _open_existing(args.store)
    params = rollback(store, args.client, args.round, args.epoch)
    out = Path(args.out)
    if out.exists() and not args.force:
        raise ConfigError(f"{out} exists; pass --force to overwrite")
    blob = canonical_encode(params)
    out.write_bytes(blob)
    payload = {
        "client_id": args.client, "round": args.round, "epoch": args.epoch,
        "out": str(out), "bytes": len(blob), "num_parameters": params.num_parameters,
    }
    return CommandOutcome(EXIT_OK, f"wrote {len(blob)} bytes ({params.num_parameters} parameters) to {out}", payload)


def cmd_bench(args) -> CommandOutcome:
    path = Path(args.config)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read bench config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path} must hold a JSON object")
    config = bench_mod.BenchConfig.from_dict(data)
    fmt = args.format or ("json" if str(args.out).endswith(".json") else "csv")
    report = bench_mod.run_bench(config)
    bench_mod.emit_report(report, args.out, fmt)
    violations = [] if args.no_check else bench_mod.check_orderings(report)
    problems = [f"invalid cell {c['mode']}@{c['size']}: {c['reason']}" for c in report.invalid] + violations
    payload = report.to_dict()
    payload["violations"] = violations
    payload["out"] = str(args.out)
    lines = [f"{r.mode:>20} {r.size:>9} {r.median_seconds:9.4f}s {r.overhead_pct:8.2f}%" for r in report.rows]
    summary = "\n".join(lines + [f"report written to {args.out}"] + [f"VIOLATION: {p}" for p in problems])
    return CommandOutcome(EXIT_FAILED if problems else EXIT_OK, summary, payload)


def cmd_tamper(args) -> CommandOutcome:
    from .tamper import tamper

    root = resolve_store(args.store)
    if not (root / "manifest.json").is_file():
        raise NotFoundError(f"no provenance store at {root}")
    at = tamper(root, args.client, args.round, args.epoch, args.offset, args.xor,
                field=args.field, fix_crc=args.fix_crc)
    payload = {"client_id": args.client, "round": args.round, "epoch": args.epoch,
               "field": args.field, "file_offset": at, "fix_crc": args.fix_crc}
    return CommandOutcome(EXIT_OK, f"flipped byte {at} of client {args.client}'s log", payload)


# -- parser -------------------------------------------------------------------


def _dev_enabled(argv: list[str]) -> bool:
    return "--dev" in argv or os.environ.get(DEV_ENV, "") not in ("", "0")


def _global_flags(parser: argparse.ArgumentParser, *, top: bool) -> None:
    # on subcommands the defaults are suppressed so they never clobber the top-level values
    default = False if top else argparse.SUPPRESS
    parser.add_argument("--json", action="store_true", default=default, help="print the JSON payload on stdout")
    parser.add_argument("-q", "--quiet", action="store_true", default=default, help="suppress the human-readable summary")
    parser.add_argument("--dev", action="store_true", default=default, help=argparse.SUPPRESS)


def build_parser(dev: bool = False) -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedprov", description="Federated learning with a tamper-evident provenance ledger.")
    _global_flags(parser, top=True)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True
    # global flags are also accepted after the command name
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, top=False)

    def add(name, **kw):
        return sub.add_parser(name, parents=[common], **kw)

    p = add("train", help="run federated training and record provenance")
    p.add_argument("config", help="training config (JSON)")
    p.add_argument("--store", help="store directory (must not exist or be empty)")
    p.add_argument("--mode", help="provenance mode, e.g. none, snapshot-sync, hash-async, snapshot+hash-async")
    p.add_argument("--seed", type=int, help="override run_seed")
    p.set_defaults(func=cmd_train)

    p = add("verify", help="check stored hash chains against stored snapshots")
    p.add_argument("store")
    p.add_argument("--client", type=int)
    p.add_argument("--full-scan", action="store_true", help="report every failure, not just the first per client")
    p.set_defaults(func=cmd_verify)

    p = add("replay", help="re-run training and compare every hash with the store")
    p.add_argument("config")
    p.add_argument("store")
    p.set_defaults(func=cmd_replay)

    p = add("audit", help="list a client's lineage or show one record")
    p.add_argument("store")
    p.add_argument("--client", type=int, required=True)
    p.add_argument("--round", type=int)
    p.add_argument("--epoch", type=int)
    p.set_defaults(func=cmd_audit)

    p = add("rollback", help="write the parameters stored at (round, epoch) to a file")
    p.add_argument("store")
    p.add_argument("--client", type=int, required=True)
    p.add_argument("--round", type=int, required=True)
    p.add_argument("--epoch", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_rollback)

    p = add("bench", help="time each provenance mode against the baseline")
    p.add_argument("config", help="bench config (JSON)")
    p.add_argument("--out", required=True)
    p.add_argument("--format", choices=("csv", "json"))
    p.add_argument("--no-check", action="store_true", help="skip the ordering assertions")
    p.set_defaults(func=cmd_bench)

    if dev:
        p = add("tamper")
        p.add_argument("store")
        p.add_argument("--client", type=int, required=True)
        p.add_argument("--round", type=int, required=True)
        p.add_argument("--epoch", type=int, required=True)
        p.add_argument("--offset", type=int, required=True)
        p.add_argument("--xor", type=lambda s: int(s, 0), default=1)
        p.add_argument("--field", choices=("blob", "hash"), default="blob")
        p.add_argument("--fix-crc", action="store_true", help="recompute the frame checksum after the flip")
        p.set_defaults(func=cmd_tamper)
    return parser


def emit(outcome: CommandOutcome, *, as_json: bool, quiet: bool, out=None, err=None) -> None:
    out = out or sys.stdout
    err = err or sys.stderr
    if as_json:
        if outcome.payload is not None:
            out.write(json.dumps(outcome.payload, sort_keys=True) + "\n")
        if not quiet and outcome.summary:
            err.write(outcome.summary + "\n")
    elif not quiet:
        stream = out if outcome.code == EXIT_OK else err
        stream.write(outcome.summary + "\n")


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser(dev=_dev_enabled(argv))
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        outcome = args.func(args)
    except FedProvError as exc:
        code = exit_code_for(exc)
        if args.json:
            sys.stdout.write(json.dumps({"error": type(exc).__name__, "message": str(exc)}, sort_keys=True) + "\n")
        sys.stderr.write(f"fedprov {args.command}: {exc}\n")
        return code
    except OSError as exc:
        sys.stderr.write(f"fedprov {args.command}: {exc}\n")
        return EXIT_STORAGE
    emit(outcome, as_json=args.json, quiet=args.quiet)
    return outcome.code


if __name__ == "__main__":
    sys.exit(main())
