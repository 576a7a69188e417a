"""Synthetic surrogate ECG corpus written as genuine WFDB records.

This generator is a stand-in for when the MIT-BIH corpus is not available.
Every beat is a sum of Gaussian waves (P, Q, R, S, T and a pacing spike)
whose shape depends on the beat type. Records add per-record morphology
variation, per-beat jitter, baseline wander, mains hum and white noise. The
files use the same layout as MIT-BIH (format 212, 360 Hz, MLII plus a
second lead, ``.atr`` annotations), so the whole ingestion path runs on them.

Results obtained on this corpus say nothing about performance on real
recordings.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .wfdb_io import Annotation, Record, RecordHeader, SignalSpec, write_record

__all__ = ["SurrogateConfig", "synth_record", "write_surrogate_corpus"]

FS = 360.0

# (centre offset from R in s, amplitude in mV, width in s)
_WAVES = {
    "N": [(-0.20, 0.15, 0.025), (-0.03, -0.12, 0.010), (0.0, 1.10, 0.012), (0.03, -0.25, 0.012), (0.28, 0.30, 0.045)],
    "A": [(-0.16, -0.08, 0.020), (-0.03, -0.12, 0.010), (0.0, 1.05, 0.012), (0.03, -0.25, 0.012), (0.27, 0.28, 0.045)],
    "V": [(0.0, 1.40, 0.035), (0.07, -0.50, 0.030), (0.32, -0.45, 0.060)],
    "F": [(-0.20, 0.10, 0.025), (0.0, 1.20, 0.022), (0.05, -0.40, 0.020), (0.30, -0.10, 0.055)],
    "/": [(-0.04, 1.50, 0.002), (0.02, 0.90, 0.030), (0.08, -0.60, 0.030), (0.30, -0.35, 0.060)],
    "f": [(-0.04, 1.20, 0.002), (0.0, 1.00, 0.022), (0.06, -0.45, 0.022), (0.29, -0.15, 0.055)],
}
# RR interval (relative to the current sinus RR) preceding each beat type
_PREMATURITY = {"N": 1.0, "A": 0.68, "V": 0.72, "F": 0.9, "/": 1.0, "f": 0.95}

_MIXES = {
    "sinus": {"N": 0.68, "A": 0.10, "V": 0.14, "F": 0.08},
    "paced": {"/": 0.80, "f": 0.05, "N": 0.15},
}


@dataclass(frozen=True)
class SurrogateConfig:
    n_records: int = 12
    n_paced: int = 3
    duration_s: float = 300.0
    noise_mv: float = 0.03
    wander_mv: float = 0.15
    seed: int = 0


def _beat_shape(t: np.ndarray, waves, amp_scale: np.ndarray, width_scale: np.ndarray) -> np.ndarray:
    out = np.zeros_like(t)
    for (centre, amp, width), a, w in zip(waves, amp_scale, width_scale):
        out += amp * a * np.exp(-0.5 * ((t - centre) / (width * w)) ** 2)
    return out


def synth_record(name: str, kind: str, config: SurrogateConfig, rng: np.random.Generator) -> Record:
    n = int(round(config.duration_s * FS))
    t = np.arange(n) / FS
    signal = np.zeros(n)
    mix = _MIXES[kind]
    symbols = list(mix)
    probs = np.array([mix[s] for s in symbols])
    heart_rate = rng.uniform(60, 95)
    rr = 60.0 / heart_rate
    record_amp = {s: rng.uniform(0.7, 1.3, len(w)) for s, w in _WAVES.items()}
    record_width = {s: rng.uniform(0.85, 1.15, len(w)) for s, w in _WAVES.items()}
    support = np.arange(-0.45, 0.65, 1 / FS)

    annotations = []
    r_time = 0.6
    prev = "N"
    while True:
        sym = symbols[rng.choice(len(symbols), p=probs)]
        gap = rr * _PREMATURITY[sym] * rng.normal(1.0, 0.03)
        if prev == "V":  # compensatory pause after a ventricular beat
            gap += rr * 0.25
        r_time += gap
        if r_time + 0.7 > config.duration_s:
            break
        waves = _WAVES[sym]
        shape = _beat_shape(
            support,
            waves,
            record_amp[sym] * rng.normal(1.0, 0.05, len(waves)),
            record_width[sym] * rng.normal(1.0, 0.03, len(waves)),
        )
        start = int(round(r_time * FS)) + int(round(support[0] * FS))
        stop = min(start + support.size, n)
        signal[start:stop] += shape[: stop - start]
        peak = start + int(np.argmax(np.abs(shape[: stop - start])))
        annotations.append(Annotation(peak, sym))
        prev = sym

    wander = config.wander_mv * np.sin(2 * np.pi * rng.uniform(0.15, 0.4) * t + rng.uniform(0, 2 * np.pi))
    hum = 0.01 * np.sin(2 * np.pi * 60.0 * t)
    mlii = signal + wander + hum + rng.normal(0, config.noise_mv, n)
    v1 = -0.5 * signal + 0.5 * wander + rng.normal(0, config.noise_mv, n)

    gain, base = 200.0, 1024
    adc = np.clip(np.round(np.stack([mlii, v1]) * gain) + base, 0, 2047).astype(np.int64)
    specs = tuple(SignalSpec(f"{name}.dat", 212, gain, base, "mV", 11, base, int(adc[i, 0]), None, lead) for i, lead in enumerate(("MLII", "V1")))
    header = RecordHeader(name, 2, FS, n, specs, (f"synthetic surrogate record ({kind})",))
    return Record(header=header, adc=adc, annotations=annotations)


def write_surrogate_corpus(directory: str | os.PathLike, config: SurrogateConfig = SurrogateConfig()) -> list[str]:
    """Write ``config.n_records`` records to ``directory``; returns their names."""
    directory = Path(directory)
    rng = np.random.default_rng(config.seed)
    names = []
    for i in range(config.n_records):
        name = f"s{i + 1:02d}"
        kind = "paced" if i < config.n_paced else "sinus"
        write_record(directory, synth_record(name, kind, config, rng))
        names.append(name)
    return names
