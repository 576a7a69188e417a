"""Beat extraction from MLII recordings: AAMI labels, baseline removal, windows, decimation."""

from __future__ import annotations

import csv
import enum
import json
import logging
import os
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.ndimage import median_filter

from .wfdb_io import Annotation, Record, read_record

logger = logging.getLogger(__name__)

__all__ = [
    "BeatClass",
    "AAMI_MAP",
    "Beat",
    "map_aami",
    "denoise",
    "segment_beats",
    "downsample",
    "ingest_record",
    "ingest_corpus",
    "MITDB_RECORDS",
    "WINDOW_BEFORE",
    "WINDOW_AFTER",
    "write_beats_jsonl",
    "read_beats_jsonl",
    "read_beats_csv",
    "beats_to_matrix",
]

WINDOW_BEFORE = 99
WINDOW_AFTER = 180

MITDB_RECORDS = (
    "100 101 102 103 104 105 106 107 108 109 111 112 113 114 115 116 117 118 119 "
    "121 122 123 124 200 201 202 203 205 207 208 209 210 212 213 214 215 217 219 "
    "220 221 222 223 228 230 231 232 233 234"
).split()


class BeatClass(enum.IntEnum):
    """The five AAMI EC57 heartbeat superclasses, in reporting order."""

    N = 0
    S = 1
    V = 2
    F = 3
    Q = 4


# AAMI EC57 grouping of MIT-BIH beat symbols. Anything else is not a beat.
AAMI_MAP: dict[str, BeatClass] = {
    "N": BeatClass.N,
    "L": BeatClass.N,
    "R": BeatClass.N,
    "e": BeatClass.N,
    "j": BeatClass.N,
    "A": BeatClass.S,
    "a": BeatClass.S,
    "J": BeatClass.S,
    "S": BeatClass.S,
    "V": BeatClass.V,
    "E": BeatClass.V,
    "F": BeatClass.F,
    "/": BeatClass.Q,
    "f": BeatClass.Q,
    "Q": BeatClass.Q,
}


def map_aami(symbol: str) -> BeatClass | None:
    """AAMI class of an annotation symbol, or ``None`` for non-beat annotations."""
    return AAMI_MAP.get(symbol)


@dataclass(frozen=True, eq=False)
class Beat:
    times: np.ndarray
    values: np.ndarray
    label: BeatClass
    record_name: str
    r_peak_index: int
    effective_frequency: float
    # min-max normalisation parameters: millivolts = values * scale + offset
    amplitude_offset: float = 0.0
    amplitude_scale: float = 1.0

    def __post_init__(self):
        if len(self.times) != len(self.values) or len(self.times) < 2:
            raise ValueError("a beat needs matching times/values of length >= 2")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("beat times must be strictly increasing")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("beat values must be finite")

    @property
    def beat_id(self) -> str:
        return f"{self.record_name}:{self.r_peak_index}"

    def __len__(self) -> int:
        return len(self.values)

    def millivolts(self) -> np.ndarray:
        return self.values * self.amplitude_scale + self.amplitude_offset


def _odd(n: int) -> int:
    return n if n % 2 else n + 1


def denoise(signal: np.ndarray, fs: float) -> np.ndarray:
    """Remove baseline wander from a millivolt signal.

    The baseline is a 200 ms median filter followed by a 600 ms median
    filter, computed after a least-squares line has been taken out of the
    record. Removing the line first makes the result exactly invariant to
    linear drift.
    """
    x = np.asarray(signal, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("denoise requires a finite signal")
    if not fs > 0:
        raise ValueError("invalid sampling frequency")
    if x.size < 2:
        return np.zeros_like(x)
    idx = np.arange(x.size, dtype=np.float64)
    slope, intercept = np.polyfit(idx, x, 1)
    detrended = x - (slope * idx + intercept)
    short = _odd(int(round(0.2 * fs)))
    long = _odd(int(round(0.6 * fs)))
    baseline = median_filter(detrended, size=short, mode="nearest")
    baseline = median_filter(baseline, size=long, mode="nearest")
    return detrended - baseline


def _normalise(window: np.ndarray) -> tuple[np.ndarray, float, float]:
    lo, hi = float(window.min()), float(window.max())
    scale = hi - lo
    if scale <= 0:
        return np.zeros_like(window), lo, 1.0
    return (window - lo) / scale, lo, scale


def segment_beats(
    signal: np.ndarray,
    annotations: Sequence[Annotation],
    fs: float,
    record_name: str = "",
    before: int = WINDOW_BEFORE,
    after: int = WINDOW_AFTER,
) -> tuple[list[Beat], int]:
    """Cut one normalised window per labelled beat annotation.

    Returns the beats and the number of labelled beats skipped because their
    window ran past either end of the record.
    """
    signal = np.asarray(signal, dtype=np.float64)
    length = before + after + 1
    times = np.arange(length, dtype=np.float64) / (length - 1)
    beats, skipped = [], 0
    for ann in annotations:
        label = map_aami(ann.symbol)
        if label is None:
            continue
        start, stop = ann.sample_index - before, ann.sample_index + after + 1
        if start < 0 or stop > signal.size:
            skipped += 1
            continue
        values, offset, scale = _normalise(signal[start:stop])
        beats.append(
            Beat(
                times=times,
                values=values,
                label=label,
                record_name=record_name,
                r_peak_index=int(ann.sample_index),
                effective_frequency=float(fs),
                amplitude_offset=offset,
                amplitude_scale=scale,
            )
        )
    return beats, skipped


def downsample(beat: Beat, factor: int) -> Beat:
    """Keep every ``factor``-th sample (indices 0, n, 2n, ...); no interpolation."""
    if factor < 1 or int(factor) != factor:
        raise ValueError("downsampling factor must be a positive integer")
    if factor >= len(beat):
        raise ValueError(f"factor {factor} leaves fewer than two samples of a {len(beat)}-sample beat")
    if factor == 1:
        return beat
    return replace(
        beat,
        times=beat.times[::factor],
        values=beat.values[::factor],
        effective_frequency=beat.effective_frequency / factor,
    )


def ingest_record(record: Record, lead: str = "MLII") -> tuple[list[Beat], int]:
    """Denoise the requested lead of a parsed record and segment its beats.

    Records without that lead yield no beats (a warning is logged).
    """
    channel = record.channel_index(lead)
    name = record.header.record_name
    if channel is None:
        logger.warning("record %s has no %s lead; skipped", name, lead)
        return [], 0
    fs = record.header.sampling_frequency
    clean = denoise(record.physical(channel), fs)
    return segment_beats(clean, record.annotations, fs, record_name=name)


def _ingest_path(path: str) -> tuple[list[Beat], int]:
    return ingest_record(read_record(path))


def ingest_corpus(
    root: str | os.PathLike,
    records: Iterable[str] | None = None,
    n_jobs: int = 1,
) -> tuple[list[Beat], dict]:
    """Ingest every record under ``root`` (or the named subset).

    Returns the beats in record order and a summary with per-class counts,
    skipped windows and records without an MLII lead.
    """
    root = Path(root)
    if records is None:
        records = sorted(p.stem for p in root.glob("*.hea"))
    records = list(records)
    paths = [str(root / r) for r in records]
    if n_jobs == 1:
        results = [_ingest_path(p) for p in paths]
    else:
        from joblib import Parallel, delayed

        results = Parallel(n_jobs=n_jobs)(delayed(_ingest_path)(p) for p in paths)
    beats: list[Beat] = []
    skipped = 0
    without_lead = []
    for name, (record_beats, n_skipped) in zip(records, results):
        beats.extend(record_beats)
        skipped += n_skipped
        if not record_beats and n_skipped == 0:
            without_lead.append(name)
    counts = {c.name: 0 for c in BeatClass}
    for b in beats:
        counts[b.label.name] += 1
    summary = {
        "records": records,
        "n_beats": len(beats),
        "class_counts": counts,
        "skipped_windows": skipped,
        "records_without_beats": without_lead,
    }
    return beats, summary


# ---------------------------------------------------------------------------
# beat corpus files
# ---------------------------------------------------------------------------


def _beat_to_dict(beat: Beat) -> dict:
    return {
        "record_name": beat.record_name,
        "r_peak_index": beat.r_peak_index,
        "label": beat.label.name,
        "effective_frequency": beat.effective_frequency,
        "amplitude_offset": beat.amplitude_offset,
        "amplitude_scale": beat.amplitude_scale,
        "times": beat.times.tolist(),
        "values": beat.values.tolist(),
    }


def write_beats_jsonl(beats: Iterable[Beat], path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for beat in beats:
            fh.write(json.dumps(_beat_to_dict(beat)) + "\n")


def read_beats_jsonl(path: str | os.PathLike) -> list[Beat]:
    beats = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            d = json.loads(line)
            beats.append(
                Beat(
                    times=np.asarray(d["times"], dtype=np.float64),
                    values=np.asarray(d["values"], dtype=np.float64),
                    label=BeatClass[d["label"]],
                    record_name=d["record_name"],
                    r_peak_index=int(d["r_peak_index"]),
                    effective_frequency=float(d["effective_frequency"]),
                    amplitude_offset=float(d.get("amplitude_offset", 0.0)),
                    amplitude_scale=float(d.get("amplitude_scale", 1.0)),
                )
            )
    return beats


def read_beats_csv(path: str | os.PathLike, fs: float = 360.0) -> list[Beat]:
    """Import pre-segmented beats.

    Expected columns: ``record_name``, ``r_peak_index``, ``label`` (N/S/V/F/Q),
    optionally ``effective_frequency``, then the sample values in order. Times
    are spread evenly over [0, 1].
    """
    beats = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        meta = {"record_name", "r_peak_index", "label", "effective_frequency"}
        value_cols = [c for c in reader.fieldnames or [] if c not in meta]
        for row in reader:
            values = np.asarray([float(row[c]) for c in value_cols], dtype=np.float64)
            beats.append(
                Beat(
                    times=np.linspace(0.0, 1.0, values.size),
                    values=values,
                    label=BeatClass[row["label"].strip()],
                    record_name=row["record_name"],
                    r_peak_index=int(row["r_peak_index"]),
                    effective_frequency=float(row.get("effective_frequency") or fs),
                )
            )
    return beats


def beats_to_matrix(beats: Sequence[Beat]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stack equally-sampled beats into ``(times, values[n, T], labels[n])``."""
    if not beats:
        raise ValueError("no beats")
    times = beats[0].times
    for b in beats:
        if len(b) != len(times) or not np.array_equal(b.times, times):
            raise ValueError("beats must share one time grid to be stacked")
    values = np.stack([b.values for b in beats])
    labels = np.asarray([int(b.label) for b in beats])
    return times, values, labels
