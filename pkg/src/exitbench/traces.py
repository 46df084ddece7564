"""Trace files: per-sample, per-exit logits written as JSON lines.

Line 1 is a header {schema_version, num_exits, num_classes}; every
following line is one record {id, label, logits, repr?, cost, source}.
Floats serialize through Python's shortest-repr doubles, which widen
float32 exactly, so write -> read -> write is byte-stable.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional

import numpy as np

TRACE_SCHEMA_VERSION = 1


@dataclass
class TraceRecord:
    id: object  # int or str sample identifier
    label: int
    logits: np.ndarray  # (num_exits, num_classes) float32
    cost: np.ndarray  # (num_exits,) strictly increasing, last exactly 1.0
    source: str  # "clean" or "<corruption>:<severity>"
    repr: Optional[list] = None  # per-exit (dim_i,) float32 vectors

    def __post_init__(self):
        self.logits = np.asarray(self.logits, dtype=np.float32)
        self.cost = np.asarray(self.cost, dtype=np.float64)
        if self.logits.ndim != 2:
            raise ValueError(f"logits must be 2-D, got {self.logits.shape}")
        if self.cost.shape != (self.logits.shape[0],):
            raise ValueError(
                f"cost length {self.cost.shape} != num_exits {self.logits.shape[0]}")
        if np.any(np.diff(self.cost) <= 0) or self.cost[-1] != 1.0:
            raise ValueError(
                f"cost must increase strictly to exactly 1.0: {self.cost}")
        if self.repr is not None:
            if len(self.repr) != self.logits.shape[0]:
                raise ValueError("one representation per exit required")
            self.repr = [np.asarray(r, dtype=np.float32) for r in self.repr]


def write_traces(records, path):
    records = list(records)
    if records:
        num_exits, num_classes = records[0].logits.shape
    else:
        num_exits = num_classes = 0
    header = {"schema_version": TRACE_SCHEMA_VERSION,
              "num_exits": num_exits, "num_classes": num_classes}
    with open(path, "w", encoding="ascii") as fh:
        fh.write(json.dumps(header, sort_keys=True))
        fh.write("\n")
        for i, rec in enumerate(records):
            if rec.logits.shape != (num_exits, num_classes):
                raise ValueError(
                    f"record {i} has logits shape {rec.logits.shape}, "
                    f"file is {num_exits}x{num_classes}")
            obj = {
                "id": rec.id,
                "label": int(rec.label),
                "logits": rec.logits.tolist(),
                "cost": rec.cost.tolist(),
                "source": rec.source,
            }
            if rec.repr is not None:
                obj["repr"] = [r.tolist() for r in rec.repr]
            fh.write(json.dumps(obj, sort_keys=True))
            fh.write("\n")


def read_traces(path):
    """Parse and validate a trace file; errors name the offending line."""
    with open(path, "r", encoding="ascii") as fh:
        header_line = fh.readline()
        if not header_line:
            raise ValueError(f"{path}: empty file, expected a header line")
        header = json.loads(header_line)
        if header.get("schema_version") != TRACE_SCHEMA_VERSION:
            raise ValueError(
                f"{path}: unsupported trace schema "
                f"{header.get('schema_version')}")
        num_exits, num_classes = header["num_exits"], header["num_classes"]
        records = []
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            obj = json.loads(line)
            logits = obj["logits"]
            if (len(logits) != num_exits
                    or any(len(row) != num_classes for row in logits)):
                raise ValueError(
                    f"{path}:{lineno}: logits must be "
                    f"{num_exits}x{num_classes}")
            if len(obj["cost"]) != num_exits:
                raise ValueError(
                    f"{path}:{lineno}: cost must have {num_exits} entries")
            try:
                rec = TraceRecord(
                    id=obj["id"], label=obj["label"],
                    logits=np.array(logits, dtype=np.float32),
                    cost=np.array(obj["cost"], dtype=np.float64),
                    source=obj["source"],
                    repr=obj.get("repr"))
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc
            records.append(rec)
    return records


class TraceMatrix:
    """Column view of a homogeneous record list for array-style consumers."""

    def __init__(self, records):
        records = list(records)
        if not records:
            raise ValueError("cannot stack an empty record list")
        self.ids = [r.id for r in records]
        self.labels = np.array([r.label for r in records], dtype=np.int64)
        self.logits = np.stack([r.logits for r in records])  # (N, E, C)
        self.cost = records[0].cost.copy()
        for r in records:
            if not np.array_equal(r.cost, self.cost):
                raise ValueError("records disagree on exit cost fractions")
        self.sources = [r.source for r in records]
        if all(r.repr is not None for r in records):
            self.reprs = [np.stack([r.repr[e] for r in records])
                          for e in range(self.num_exits)]
        else:
            self.reprs = None

    @property
    def num_exits(self):
        return self.logits.shape[1]

    @property
    def num_classes(self):
        return self.logits.shape[2]

    def __len__(self):
        return self.logits.shape[0]
