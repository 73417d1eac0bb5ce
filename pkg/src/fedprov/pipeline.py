"""Background persistence: a bounded hand-off between training and the store.

Hashes are computed by the caller before submission; workers only write frames.
Flushes are batched: a worker flushes when its queue runs dry, and
:meth:`PersistencePipeline.flush_and_close` flushes once more at the barrier. Records are routed to worker
``client_id % workers`` so each client's frames reach disk in submission order.
A full pipeline blocks the submitter.
"""

from __future__ import annotations

import logging
import queue
import threading
from dataclasses import dataclass

from .errors import StorageError, UsageError
from .records import HashSignature, SnapshotRecord

logger = logging.getLogger(__name__)

_STOP = object()


@dataclass(frozen=True)
class PipelineStats:
    submitted: int
    persisted: int
    failed: int
    first_failure: str | None = None

    def to_dict(self) -> dict:
        return {
            "submitted": self.submitted,
            "persisted": self.persisted,
            "failed": self.failed,
            "first_failure": self.first_failure,
        }


class PersistencePipeline:
    def __init__(self, store, capacity: int = 64, workers: int = 1):
        if capacity < 1 or workers < 1:
            raise UsageError("capacity and workers must be positive")
        self.store = store
        self.capacity = capacity
        self._slots = threading.Semaphore(capacity)
        self._queues = [queue.Queue() for _ in range(workers)]
        self._running = threading.Event()
        self._running.set()
        self._lock = threading.Lock()
        self._submitted = 0
        self._persisted = 0
        self._failed = 0
        self._first_failure: str | None = None
        self._last: dict[int, SnapshotRecord] = {}
        self._closed = False
        self._stats: PipelineStats | None = None
        self._threads = [
            threading.Thread(target=self._work, args=(q,), name=f"persist-{i}", daemon=True)
            for i, q in enumerate(self._queues)
        ]
        for t in self._threads:
            t.start()

    # test hooks for a controlled scheduler
    def pause(self) -> None:
        self._running.clear()

    def resume(self) -> None:
        self._running.set()

    def _work(self, q: queue.Queue) -> None:
        while True:
            record = q.get()
            if record is _STOP:
                q.task_done()
                return
            self._running.wait()
            try:
                if self._first_failure is None:
                    self.store.append(record, flush=False)
                    if q.empty():
                        self.store.flush(record.client_id)
                    with self._lock:
                        self._persisted += 1
                else:
                    with self._lock:
                        self._failed += 1
            except Exception as exc:  # surfaced to the submitter, never swallowed
                logger.error("persisting %s failed: %s", record.coords, exc)
                with self._lock:
                    self._failed += 1
                    if self._first_failure is None:
                        self._first_failure = f"client {record.client_id} round {record.round} epoch {record.epoch}: {exc}"
            finally:
                self._slots.release()
                q.task_done()

    def submit(self, record: SnapshotRecord) -> None:
        if self._closed:
            raise UsageError("pipeline is closed")
        if self._first_failure is not None:
            raise StorageError(f"background persistence failed: {self._first_failure}")
        self._slots.acquire()
        with self._lock:
            self._submitted += 1
            self._last[record.client_id] = record
        self._queues[record.client_id % len(self._queues)].put(record)

    append = submit

    def latest_hash(self, client_id: int) -> HashSignature | None:
        with self._lock:
            last = self._last.get(client_id)
        if last is not None:
            return last.hash
        return self.store.latest_hash(client_id)

    def last_coords(self, client_id: int) -> tuple[int, int] | None:
        with self._lock:
            last = self._last.get(client_id)
        if last is not None:
            return last.position
        return self.store.last_coords(client_id)

    @property
    def pending(self) -> int:
        with self._lock:
            return self._submitted - self._persisted - self._failed

    def stats(self) -> PipelineStats:
        with self._lock:
            return PipelineStats(self._submitted, self._persisted, self._failed, self._first_failure)

    def flush_and_close(self) -> PipelineStats:
        """Drain every queue, stop the workers and flush the store. Idempotent."""
        if self._stats is not None:
            return self._stats
        self._closed = True
        self._running.set()
        for q in self._queues:
            q.put(_STOP)
        for t in self._threads:
            t.join()
        try:
            self.store.flush()
        except StorageError as exc:
            with self._lock:
                if self._first_failure is None:
                    self._first_failure = str(exc)
        self._stats = self.stats()
        return self._stats
