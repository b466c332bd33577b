"""Time-tag event store: binary detection records plus ground-truth sidecar.

Binary layout (little-endian, documented, schema version 1):

    bytes 0..7    magic b"IONTAG01"
    bytes 8..11   u32 length of the JSON header that follows
    header        UTF-8 JSON: schema_version, seed, config/constants hashes,
                  n_records, repetition bookkeeping
    records       n_records x 10 bytes: detector u8, origin u8,
                  timestamp i64 in picoseconds

Records are kept stably sorted by (timestamp, detector).  Ground truth is
a JSON-lines sidecar with one line per true photon; for very large
campaigns a compact aggregate (per-repetition counts, .npz) replaces the
per-photon lines, flagged in the summary.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"IONTAG01"
SCHEMA_VERSION = 1

RECORD_DTYPE = np.dtype([("detector", "u1"), ("origin", "u1"),
                         ("timestamp_ps", "<i8")])


class StoreFormatError(ValueError):
    pass


def config_hash(config):
    """Stable sha256 of a JSON-serializable config."""
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"),
                      default=str).encode()
    return hashlib.sha256(blob).hexdigest()


@dataclass
class TruthRecord:
    rep: int
    t_ns: float            # time within the repetition
    q: int
    upper: str
    lower: str
    label: str
    second: bool = False   # 2nd+ blue photon within one trigger window
    detected: int = -1     # detector id, -1 if undetected
    direction: tuple = None


@dataclass
class EventStore:
    records: np.ndarray                   # RECORD_DTYPE, sorted
    n_repetitions: int
    period_ns: float
    trigger_offset_ns: float
    trigger_duration_ns: float
    seed: int
    config_sha: str = ""
    constants_sha: str = ""
    schema_version: int = SCHEMA_VERSION
    summary: dict = field(default_factory=dict)
    truth: list = field(default_factory=list)         # TruthRecord, optional
    truth_counts: np.ndarray = None                   # per-rep true 393 counts

    @property
    def duration_ns(self):
        return self.n_repetitions * self.period_ns

    def detector_records(self, detector_id, origins=None):
        mask = self.records["detector"] == detector_id
        if origins is not None:
            mask &= np.isin(self.records["origin"], list(origins))
        return self.records[mask]

    def timestamps_ns(self, detector_id, origins=None):
        return self.detector_records(detector_id, origins)["timestamp_ps"] / 1000.0

    def canonical_sort(self):
        order = np.lexsort((self.records["detector"],
                            self.records["timestamp_ps"]))
        self.records = self.records[order]

    # ---- persistence ----

    def _header(self):
        return {
            "schema_version": self.schema_version,
            "seed": int(self.seed),
            "config_sha": self.config_sha,
            "constants_sha": self.constants_sha,
            "n_records": int(self.records.size),
            "n_repetitions": int(self.n_repetitions),
            "period_ns": float(self.period_ns),
            "trigger_offset_ns": float(self.trigger_offset_ns),
            "trigger_duration_ns": float(self.trigger_duration_ns),
        }

    def save(self, basepath):
        base = Path(basepath)
        base.parent.mkdir(parents=True, exist_ok=True)
        header = json.dumps(self._header(), sort_keys=True).encode()
        with open(base.with_suffix(".tags"), "wb") as fh:
            fh.write(MAGIC)
            fh.write(np.uint32(len(header)).tobytes())
            fh.write(header)
            fh.write(np.ascontiguousarray(self.records).tobytes())
        if self.truth:
            with open(base.with_suffix(".truth.jsonl"), "w") as fh:
                for t in self.truth:
                    fh.write(json.dumps({
                        "rep": t.rep, "t_ns": round(t.t_ns, 6), "q": t.q,
                        "upper": t.upper, "lower": t.lower, "label": t.label,
                        "second": bool(t.second), "detected": t.detected,
                        "direction": None if t.direction is None else
                        [round(float(x), 9) for x in t.direction],
                    }, sort_keys=True) + "\n")
        elif self.truth_counts is not None:
            np.savez_compressed(base.with_suffix(".truth.npz"),
                                counts=self.truth_counts)
        summary = dict(self.summary)
        summary.update(self._header())
        with open(base.with_suffix(".summary.json"), "w") as fh:
            json.dump(summary, fh, sort_keys=True, indent=1)
        return base.with_suffix(".tags")

    @classmethod
    def load(cls, basepath):
        base = Path(basepath)
        path = base if base.suffix == ".tags" else base.with_suffix(".tags")
        blob = path.read_bytes()
        if blob[:8] != MAGIC:
            raise StoreFormatError(f"{path}: bad magic {blob[:8]!r}")
        hlen = int(np.frombuffer(blob[8:12], dtype="<u4")[0])
        header = json.loads(blob[12:12 + hlen].decode())
        if header.get("schema_version") != SCHEMA_VERSION:
            raise StoreFormatError(
                f"{path}: unsupported schema version "
                f"{header.get('schema_version')!r} (supported: {SCHEMA_VERSION})")
        records = np.frombuffer(blob[12 + hlen:], dtype=RECORD_DTYPE).copy()
        if records.size != header["n_records"]:
            raise StoreFormatError(
                f"{path}: expected {header['n_records']} records, "
                f"found {records.size}")
        store = cls(records=records,
                    n_repetitions=header["n_repetitions"],
                    period_ns=header["period_ns"],
                    trigger_offset_ns=header["trigger_offset_ns"],
                    trigger_duration_ns=header["trigger_duration_ns"],
                    seed=header["seed"],
                    config_sha=header.get("config_sha", ""),
                    constants_sha=header.get("constants_sha", ""))
        summary_path = base.with_suffix(".summary.json")
        if summary_path.exists():
            store.summary = json.loads(summary_path.read_text())
        truth_path = base.with_suffix(".truth.jsonl")
        if truth_path.exists():
            for line in truth_path.read_text().splitlines():
                d = json.loads(line)
                store.truth.append(TruthRecord(
                    rep=d["rep"], t_ns=d["t_ns"], q=d["q"], upper=d["upper"],
                    lower=d["lower"], label=d["label"], second=d["second"],
                    detected=d.get("detected", -1),
                    direction=None if d.get("direction") is None
                    else tuple(d["direction"])))
        npz_path = base.with_suffix(".truth.npz")
        if npz_path.exists():
            store.truth_counts = np.load(npz_path)["counts"]
        return store

    def true_blue_counts(self):
        """Per-repetition count of true trigger-window 393 photons."""
        if self.truth_counts is not None:
            return self.truth_counts
        counts = np.zeros(self.n_repetitions, dtype=np.int32)
        for t in self.truth:
            if t.label == "393":
                counts[t.rep] += 1
        return counts
