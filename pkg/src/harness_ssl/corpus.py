"""Utterances, TSV manifests and the synthetic two-speaker tone corpus."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .audio import Waveform, load_wav, write_wav

MANIFEST_COLUMNS = ("utt_id", "path", "duration_s")


class ManifestError(ValueError):
    pass


@dataclass
class Utterance:
    utt_id: str
    wave: Waveform
    label: Optional[str] = None


@dataclass(frozen=True)
class ManifestRow:
    utt_id: str
    path: str
    duration_s: float
    label: Optional[str] = None


def read_manifest(path, require_label: bool = False, check_paths: bool = True) -> List[ManifestRow]:
    """Parse a TSV manifest with header ``utt_id path duration_s [label]``.

    Relative audio paths resolve against the manifest's directory.
    """
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh, delimiter="\t")
        try:
            header = next(reader)
        except StopIteration:
            raise ManifestError(f"{path}: empty manifest") from None
        if tuple(header[:3]) != MANIFEST_COLUMNS or len(header) > 4 or (
            len(header) == 4 and header[3] != "label"
        ):
            raise ManifestError(f"{path}: header must be 'utt_id path duration_s [label]', got {header}")
        has_label = len(header) == 4
        if require_label and not has_label:
            raise ManifestError(f"{path}: manifest has no label column")
        rows, seen = [], set()
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != len(header):
                raise ManifestError(f"{path}:{lineno}: expected {len(header)} fields, got {len(rec)}")
            utt_id, p, dur = rec[0], rec[1], rec[2]
            if utt_id in seen:
                raise ManifestError(f"{path}:{lineno}: duplicate utt_id {utt_id!r}")
            seen.add(utt_id)
            try:
                duration = float(dur)
            except ValueError:
                raise ManifestError(f"{path}:{lineno}: bad duration {dur!r}") from None
            if not duration > 0:
                raise ManifestError(f"{path}:{lineno}: duration must be positive")
            audio = Path(p) if Path(p).is_absolute() else path.parent / p
            if check_paths and not audio.exists():
                raise ManifestError(f"{path}:{lineno}: audio file {audio} does not exist")
            rows.append(ManifestRow(utt_id, str(audio), duration, rec[3] if has_label else None))
    return rows


def write_manifest(path, rows: Sequence[ManifestRow]) -> None:
    has_label = any(r.label is not None for r in rows)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(MANIFEST_COLUMNS + (("label",) if has_label else ()))
        for r in rows:
            rec = [r.utt_id, r.path, f"{r.duration_s:.6g}"]
            if has_label:
                rec.append(r.label or "")
            w.writerow(rec)


def load_corpus(rows: Sequence[ManifestRow]) -> List[Utterance]:
    return [Utterance(r.utt_id, load_wav(r.path), r.label) for r in sorted(rows, key=lambda r: r.utt_id)]


# --------------------------------------------------------------------------
# synthetic data

# (fundamental Hz, formant-ish spectral tilt) per "speaker"
SPEAKERS = {"spk0": 140.0, "spk1": 230.0}
# vowel-like units: relative weights of harmonic bands
UNITS = (
    (1.0, 0.2, 0.05),
    (0.2, 1.0, 0.3),
    (0.1, 0.3, 1.0),
    (0.6, 0.6, 0.0),
)


def tone_utterance(speaker: str, units: Sequence[int], unit_seconds: float = 0.25,
                   sample_rate: int = 16000, rng: Optional[np.random.Generator] = None) -> Waveform:
    """Concatenated harmonic 'syllables' with a speaker-specific pitch."""
    f0 = SPEAKERS[speaker]
    n = int(unit_seconds * sample_rate)
    t = np.arange(n) / sample_rate
    env = np.minimum(1.0, np.minimum(t, t[::-1]) / 0.01)
    pieces = []
    for u in units:
        weights = UNITS[u]
        sig = np.zeros(n)
        for band, wgt in enumerate(weights):
            for h in range(1 + 3 * band, 4 + 3 * band):
                sig += wgt * np.sin(2 * np.pi * f0 * h * t) / h ** 0.5
        pieces.append(env * sig)
    x = np.concatenate(pieces)
    if rng is not None:
        x = x + 0.01 * rng.standard_normal(x.shape)
    x = 0.5 * x / np.max(np.abs(x))
    return Waveform(x, sample_rate)


def synth_tone_corpus(n_utts: int = 125, units_per_utt: int = 6, unit_seconds: float = 0.4,
                      seed: int = 0) -> List[Utterance]:
    """Deterministic toy corpus; ``label`` is the speaker id.

    Units cycle through a fixed order from a random phase, so a masked unit
    is predictable from its neighbours.
    """
    rng = np.random.default_rng(seed)
    speakers = sorted(SPEAKERS)
    out = []
    for i in range(n_utts):
        spk = speakers[i % len(speakers)]
        units = (rng.integers(len(UNITS)) + np.arange(units_per_utt)) % len(UNITS)
        out.append(Utterance(f"utt{i:04d}", tone_utterance(spk, units, unit_seconds, rng=rng), spk))
    return out


def write_corpus(utts: Sequence[Utterance], directory) -> Path:
    """Write WAVs plus ``manifest.tsv`` into ``directory``; returns the manifest path."""
    directory = Path(directory)
    (directory / "wav").mkdir(parents=True, exist_ok=True)
    rows = []
    for u in utts:
        rel = Path("wav") / f"{u.utt_id}.wav"
        write_wav(directory / rel, u.wave)
        rows.append(ManifestRow(u.utt_id, str(rel), u.wave.duration, u.label))
    manifest = directory / "manifest.tsv"
    write_manifest(manifest, rows)
    return manifest
