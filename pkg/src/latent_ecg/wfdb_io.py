"""Readers (and minimal writers) for MIT-BIH style WFDB records.

Three files make up a record:

* ``<record>.hea`` -- text header (record line, one line per signal, comments)
* ``<record>.dat`` -- samples packed in format 212 (two 12-bit samples per 3 bytes)
* ``<record>.atr`` -- reference beat annotations in MIT annotation format

Only format 212 is supported; that is what every MIT-BIH Arrhythmia record uses.
"""

from __future__ import annotations

import math
import os
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "WfdbError",
    "HeaderParseError",
    "Format212Error",
    "AnnotationParseError",
    "SignalSpec",
    "RecordHeader",
    "Annotation",
    "Record",
    "ANNOTATION_SYMBOLS",
    "SYMBOL_CODES",
    "parse_header",
    "format_header",
    "decode_format212",
    "encode_format212",
    "parse_annotations",
    "encode_annotations",
    "read_record",
    "write_record",
]


class WfdbError(ValueError):
    """Base class for all WFDB parsing failures."""


class HeaderParseError(WfdbError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        where = f" (line {line})" if line is not None else ""
        super().__init__(f"{message}{where}")


class Format212Error(WfdbError):
    def __init__(self, message: str, offset: int):
        self.offset = offset
        super().__init__(f"{message} at byte offset {offset}")


class AnnotationParseError(WfdbError):
    def __init__(self, message: str, ordinal: int):
        self.ordinal = ordinal
        super().__init__(f"{message} (entry {ordinal})")


# Standard WFDB annotation codes. Codes 15, 17 and 42..58 are unassigned.
ANNOTATION_SYMBOLS: dict[int, str] = {
    0: " ",
    1: "N",
    2: "L",
    3: "R",
    4: "a",
    5: "V",
    6: "F",
    7: "J",
    8: "A",
    9: "S",
    10: "E",
    11: "j",
    12: "/",
    13: "Q",
    14: "~",
    16: "|",
    18: "s",
    19: "T",
    20: "*",
    21: "D",
    22: '"',
    23: "=",
    24: "p",
    25: "B",
    26: "^",
    27: "t",
    28: "+",
    29: "u",
    30: "?",
    31: "!",
    32: "[",
    33: "]",
    34: "e",
    35: "n",
    36: "@",
    37: "x",
    38: "f",
    39: "(",
    40: ")",
    41: "r",
}
SYMBOL_CODES: dict[str, int] = {s: c for c, s in ANNOTATION_SYMBOLS.items()}

_SKIP, _NUM, _SUB, _CHAN, _AUX = 59, 60, 61, 62, 63


@dataclass(frozen=True)
class SignalSpec:
    file_name: str
    fmt: int
    gain: float
    baseline: int
    units: str
    adc_resolution: int
    adc_zero: int
    initial_value: int | None
    checksum: int | None
    lead_name: str


@dataclass(frozen=True)
class RecordHeader:
    record_name: str
    n_signals: int
    sampling_frequency: float
    n_samples: int
    signals: tuple[SignalSpec, ...]
    comments: tuple[str, ...] = ()

    @property
    def lead_names(self) -> list[str]:
        return [s.lead_name for s in self.signals]


@dataclass(frozen=True)
class Annotation:
    sample_index: int
    symbol: str
    aux_note: str = ""


@dataclass
class Record:
    header: RecordHeader
    adc: np.ndarray  # int16/int32, shape (n_signals, n_samples)
    annotations: list[Annotation] = field(default_factory=list)

    def physical(self, channel: int) -> np.ndarray:
        """Channel ``channel`` converted from ADC units to millivolts."""
        spec = self.header.signals[channel]
        return (self.adc[channel].astype(np.float64) - spec.baseline) / spec.gain

    def channel_index(self, lead_name: str) -> int | None:
        try:
            return self.header.lead_names.index(lead_name)
        except ValueError:
            return None


# ---------------------------------------------------------------------------
# header
# ---------------------------------------------------------------------------

_GAIN_RE = re.compile(r"^([-+0-9.eE]+)(?:\(([-+0-9]+)\))?(?:/(\S+))?$")


def _to_number(token: str, kind, what: str, line: int):
    try:
        return kind(token)
    except ValueError:
        raise HeaderParseError(f"non-numeric {what}: {token!r}", line) from None


def parse_header(text_content: str) -> RecordHeader:
    """Parse the text of a ``.hea`` file.

    Unknown trailing fields are ignored; comment lines (``#``) are kept verbatim.
    """
    lines: list[tuple[int, str]] = []
    comments: list[str] = []
    for lineno, raw in enumerate(text_content.splitlines(), start=1):
        stripped = raw.strip()
        if not stripped:
            continue
        if stripped.startswith("#"):
            comments.append(stripped.lstrip("#").strip())
            continue
        lines.append((lineno, stripped))
    if not lines:
        raise HeaderParseError("empty header", 1)

    lineno, record_line = lines[0]
    fields = record_line.split()
    if len(fields) < 2:
        raise HeaderParseError("record line needs a name and a signal count", lineno)
    record_name = fields[0].split("/")[0]
    n_signals = _to_number(fields[1], int, "signal count", lineno)
    if n_signals < 1:
        raise HeaderParseError("record declares no signals", lineno)
    fs = 250.0  # WFDB default
    if len(fields) > 2:
        fs_token = re.split(r"[/(]", fields[2])[0]
        fs = _to_number(fs_token, float, "sampling frequency", lineno)
    if not fs > 0 or not math.isfinite(fs):
        raise HeaderParseError("invalid sampling frequency", lineno)
    n_samples = 0
    if len(fields) > 3:
        n_samples = _to_number(fields[3], int, "sample count", lineno)
        if n_samples < 0:
            raise HeaderParseError("negative sample count", lineno)

    signal_lines = lines[1:]
    if len(signal_lines) < n_signals:
        raise HeaderParseError(
            f"header declares {n_signals} signals but has {len(signal_lines)} signal lines",
            lines[-1][0],
        )

    signals = []
    for lineno, text in signal_lines[:n_signals]:
        parts = text.split()
        if len(parts) < 2:
            raise HeaderParseError("signal line needs a file name and a format", lineno)
        fmt_match = re.match(r"^(\d+)", parts[1])
        if fmt_match is None:
            raise HeaderParseError(f"non-numeric signal format: {parts[1]!r}", lineno)
        fmt = int(fmt_match.group(1))
        if fmt != 212:
            raise HeaderParseError(f"unsupported signal format {fmt}", lineno)

        gain, baseline, units = 200.0, None, "mV"
        if len(parts) > 2:
            m = _GAIN_RE.match(parts[2])
            if m is None:
                raise HeaderParseError(f"non-numeric gain: {parts[2]!r}", lineno)
            gain = _to_number(m.group(1), float, "gain", lineno)
            if m.group(2) is not None:
                baseline = int(m.group(2))
            if m.group(3) is not None:
                units = m.group(3)
        if gain == 0:
            gain = 200.0  # WFDB: zero gain means "uncalibrated", default applies
        adc_res = _to_number(parts[3], int, "ADC resolution", lineno) if len(parts) > 3 else 12
        adc_zero = _to_number(parts[4], int, "ADC zero", lineno) if len(parts) > 4 else 0
        init = _to_number(parts[5], int, "initial value", lineno) if len(parts) > 5 else None
        checksum = _to_number(parts[6], int, "checksum", lineno) if len(parts) > 6 else None
        # parts[7] is the block size; the description is everything after it
        lead = " ".join(parts[8:]) if len(parts) > 8 else ""
        signals.append(
            SignalSpec(
                file_name=parts[0],
                fmt=fmt,
                gain=gain,
                baseline=adc_zero if baseline is None else baseline,
                units=units,
                adc_resolution=adc_res,
                adc_zero=adc_zero,
                initial_value=init,
                checksum=checksum,
                lead_name=lead,
            )
        )
    return RecordHeader(
        record_name=record_name,
        n_signals=n_signals,
        sampling_frequency=fs,
        n_samples=n_samples,
        signals=tuple(signals),
        comments=tuple(comments),
    )


def format_header(header: RecordHeader) -> str:
    fs = header.sampling_frequency
    fs_text = str(int(fs)) if float(fs).is_integer() else repr(fs)
    out = [f"{header.record_name} {header.n_signals} {fs_text} {header.n_samples}"]
    for s in header.signals:
        gain = int(s.gain) if float(s.gain).is_integer() else s.gain
        out.append(
            f"{s.file_name} {s.fmt} {gain}({s.baseline})/{s.units} {s.adc_resolution} {s.adc_zero} {s.initial_value or 0} {s.checksum or 0} 0 {s.lead_name}"
        )
    out.extend(f"# {c}" for c in header.comments)
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------------------
# format 212
# ---------------------------------------------------------------------------


def decode_format212(data: bytes, n_samples_per_signal: int, n_signals: int) -> np.ndarray:
    """Unpack format-212 bytes into an ``(n_signals, n_samples)`` int array.

    Samples are interleaved across signals in declaration order, two 12-bit
    two's-complement samples per 3-byte group.
    """
    if n_signals not in (1, 2):
        raise ValueError("format 212 decoding supports 1 or 2 signals")
    total = n_samples_per_signal * n_signals
    needed = (3 * total + 1) // 2
    buf = np.frombuffer(data, dtype=np.uint8)
    if buf.size < needed:
        raise Format212Error(
            f"truncated format-212 stream: need {needed} bytes for {total} samples, got {buf.size}",
            int(buf.size),
        )
    n_groups = (total + 1) // 2
    padded = np.zeros(n_groups * 3, dtype=np.int32)
    padded[: min(buf.size, n_groups * 3)] = buf[: n_groups * 3]
    groups = padded.reshape(-1, 3)
    b0, b1, b2 = groups[:, 0], groups[:, 1], groups[:, 2]
    out = np.empty(n_groups * 2, dtype=np.int32)
    out[0::2] = ((b1 & 0x0F) << 8) | b0
    out[1::2] = ((b1 & 0xF0) << 4) | b2
    out = out[:total]
    out[out >= 2048] -= 4096
    return out.reshape(n_samples_per_signal, n_signals).T.copy()


def encode_format212(samples: np.ndarray) -> bytes:
    """Pack an ``(n_signals, n_samples)`` int array; inverse of :func:`decode_format212`."""
    samples = np.atleast_2d(np.asarray(samples))
    if samples.min(initial=0) < -2048 or samples.max(initial=0) > 2047:
        raise ValueError("format 212 holds 12-bit values in [-2048, 2047]")
    flat = samples.T.reshape(-1).astype(np.int32) & 0xFFF
    total = flat.size
    if total % 2:
        flat = np.append(flat, 0)
    s0, s1 = flat[0::2], flat[1::2]
    groups = np.empty((s0.size, 3), dtype=np.uint8)
    groups[:, 0] = s0 & 0xFF
    groups[:, 1] = ((s0 >> 8) & 0x0F) | ((s1 >> 4) & 0xF0)
    groups[:, 2] = s1 & 0xFF
    raw = groups.reshape(-1).tobytes()
    return raw[: (3 * total + 1) // 2]


# ---------------------------------------------------------------------------
# annotations
# ---------------------------------------------------------------------------


def parse_annotations(data: bytes) -> list[Annotation]:
    """Decode an MIT-format annotation stream.

    Each entry is a little-endian 16-bit word: the high 6 bits hold the
    annotation code and the low 10 bits the sample increment since the
    previous annotation. Codes 59..63 are pseudo-annotations (SKIP, NUM, SUB,
    CHAN, AUX) that extend time or attach data to the preceding annotation.
    Parsing stops at the all-zero terminator.
    """
    buf = np.frombuffer(data, dtype=np.uint8)
    if buf.size % 2:
        raise AnnotationParseError("odd byte count, last entry truncated", buf.size // 2)
    words = buf[0::2].astype(np.int64) | (buf[1::2].astype(np.int64) << 8)
    n = words.size

    result: list[Annotation] = []
    time = 0
    i = 0
    ordinal = 0
    while i < n:
        word = int(words[i])
        code, value = word >> 10, word & 0x3FF
        if code == 0 and value == 0:
            break
        if code == _SKIP:
            if i + 2 >= n:
                raise AnnotationParseError("truncated SKIP entry", ordinal)
            hi, lo = int(words[i + 1]), int(words[i + 2])
            interval = (hi << 16) | lo
            if interval >= 1 << 31:
                interval -= 1 << 32
            time += interval
            i += 3
            continue
        if code in (_NUM, _SUB, _CHAN):
            i += 1
            continue
        if code == _AUX:
            n_words = (value + 1) // 2
            if i + 1 + n_words > n:
                raise AnnotationParseError("truncated AUX entry", ordinal)
            text = buf[2 * (i + 1) : 2 * (i + 1) + value].tobytes().decode("latin-1")
            text = text.rstrip("\x00")
            if result:
                prev = result[-1]
                result[-1] = Annotation(prev.sample_index, prev.symbol, text)
            i += 1 + n_words
            continue
        symbol = ANNOTATION_SYMBOLS.get(code)
        if symbol is None:
            raise AnnotationParseError(f"unknown annotation code {code}", ordinal)
        time += value
        result.append(Annotation(time, symbol))
        ordinal += 1
        i += 1
    return result


def encode_annotations(annotations: list[Annotation]) -> bytes:
    """Write annotations in MIT format (SKIP for long gaps, AUX for notes)."""
    words: list[int] = []
    prev = 0
    for ann in annotations:
        code = SYMBOL_CODES.get(ann.symbol)
        if code is None:
            raise ValueError(f"no annotation code for symbol {ann.symbol!r}")
        dt = ann.sample_index - prev
        if dt < 0 or dt > 1023:
            interval = dt & 0xFFFFFFFF
            words.extend([_SKIP << 10, interval >> 16, interval & 0xFFFF])
            dt = 0
        words.append((code << 10) | dt)
        if ann.aux_note:
            raw = ann.aux_note.encode("latin-1")
            words.append((_AUX << 10) | len(raw))
            if len(raw) % 2:
                raw += b"\x00"
            words.extend(raw[k] | (raw[k + 1] << 8) for k in range(0, len(raw), 2))
        prev = ann.sample_index
    words.append(0)
    return np.asarray(words, dtype="<u2").tobytes()


# ---------------------------------------------------------------------------
# record level
# ---------------------------------------------------------------------------


def read_record(path: str | os.PathLike, annotator: str = "atr") -> Record:
    """Read ``<path>.hea``, its format-212 signal file and ``<path>.<annotator>``.

    A missing annotation file yields an empty annotation list.
    """
    path = Path(path)
    header = parse_header(path.with_name(path.name + ".hea").read_text(encoding="latin-1"))
    files = {s.file_name for s in header.signals}
    if len(files) != 1:
        raise WfdbError("signals spread over several .dat files are not supported")
    raw = (path.parent / files.pop()).read_bytes()
    n_samples = header.n_samples
    if n_samples == 0:
        n_samples = (len(raw) * 2 // 3) // header.n_signals
    adc = decode_format212(raw, n_samples, header.n_signals)
    ann_path = path.with_name(f"{path.name}.{annotator}")
    annotations = parse_annotations(ann_path.read_bytes()) if ann_path.exists() else []
    return Record(header=header, adc=adc, annotations=annotations)


def write_record(directory: str | os.PathLike, record: Record, annotator: str = "atr") -> Path:
    """Write a record as ``.hea``/``.dat``/``.<annotator>`` files; returns the record path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    name = record.header.record_name
    (directory / f"{name}.dat").write_bytes(encode_format212(record.adc))
    (directory / f"{name}.hea").write_text(format_header(record.header))
    (directory / f"{name}.{annotator}").write_bytes(encode_annotations(record.annotations))
    return directory / name
