"""Line-delimited metrics records: one JSON object per epoch per phase.

Records carry (run, phase, epoch, named scalars, wall). Line-by-line
appends keep partial runs parseable after a crash. ``wall`` is the only
non-deterministic field; comparisons for reproducibility strip it.
"""

from __future__ import annotations

import json
import time

from .errors import UsageError


class MetricsWriter:
    def __init__(self, path, run_id):
        self.path = path
        self.run_id = run_id
        self._file = open(path, "w", encoding="utf-8")
        self._last = {}

    def write(self, phase, epoch, scalars):
        prev = self._last.get(phase, -1)
        if epoch <= prev:
            raise UsageError(f"non-monotone epoch {epoch} after {prev} in phase {phase!r}")
        self._last[phase] = epoch
        record = {"run": self.run_id, "phase": phase, "epoch": epoch}
        record.update({k: float(v) for k, v in scalars.items()})
        record["wall"] = time.time()
        self._file.write(json.dumps(record, sort_keys=True) + "\n")
        self._file.flush()

    def close(self):
        self._file.close()

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        self.close()
        return False


def read_metrics(path):
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records


def strip_wall(records):
    """Records without their wall-clock field, for determinism comparisons."""
    return [{k: v for k, v in r.items() if k != "wall"} for r in records]
