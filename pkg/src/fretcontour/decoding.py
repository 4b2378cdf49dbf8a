"""Frame-level tablature, onset-gated note decoding and contour attachment."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .dataset import HOP_SECONDS, TablatureTargets, note_frame_range
from .notes import PitchContour, StampedNote, StringConfig
from .objectives import deviation_from_logits

DEFAULT_THRESHOLD = 0.5


def _sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * (1 + np.tanh(x / 2))


@dataclass
class FrameTablature:
    """
    Per-string, per-frame tablature.

    ``fret`` is [string, frame] with -1 for an inactive string; ``activation``
    and ``deviation`` (semitones) are meaningful only where ``fret >= 0``.
    """
    fret: np.ndarray
    activation: np.ndarray = None
    deviation: np.ndarray = None

    def __post_init__(self):
        self.fret = np.asarray(self.fret, dtype=int)
        if self.activation is None:
            self.activation = (self.fret >= 0).astype(np.float64)
        if self.deviation is None:
            self.deviation = np.zeros(self.fret.shape)

    @property
    def n_strings(self):
        return self.fret.shape[0]

    @property
    def n_frames(self):
        return self.fret.shape[1]

    @property
    def active(self):
        return self.fret >= 0

    def pitches(self, cfg: StringConfig = StringConfig(), with_deviation: bool = True):
        """[string, frame] continuous pitch, NaN where inactive."""
        open_pitches = np.asarray(cfg.open_string_pitches, dtype=np.float64)[:, None]
        out = open_pitches + self.fret + (self.deviation if with_deviation else 0)
        return np.where(self.active, out, np.nan)

    def one_hot(self, n_fret_classes: int) -> np.ndarray:
        """[string, fret_class, frame] activity."""
        out = np.zeros((self.n_strings, n_fret_classes, self.n_frames), dtype=np.float32)
        s, t = np.nonzero(self.active)
        out[s, self.fret[s, t], t] = 1
        return out

    @classmethod
    def from_targets(cls, targets: TablatureTargets, r: float = 1.0) -> FrameTablature:
        act = targets.activity > 0
        fret = np.where(act.any(1), act.argmax(1), -1)
        dev = np.take_along_axis(targets.deviation_semitones(r), np.maximum(fret, 0)[:, None], 1)[:, 0]
        return cls(fret, act.any(1).astype(np.float64), np.where(fret >= 0, dev, 0.0))


def threshold_tablature(tablature_logits, threshold: float = DEFAULT_THRESHOLD,
                        deviation_logits=None, r: float = 1.0) -> FrameTablature:
    """
    Select at most one fret per string and frame: the class with the largest
    activation among those reaching ``threshold``.

    Logit arrays are [frame, string, fret_class].
    """
    act = _sigmoid(tablature_logits)
    best = act.argmax(-1)
    best_act = np.take_along_axis(act, best[..., None], -1)[..., 0]
    on = best_act >= threshold
    fret = np.where(on, best, -1).T
    if deviation_logits is not None:
        dev_all = deviation_from_logits(np.asarray(deviation_logits, dtype=np.float64), r)
        dev = np.take_along_axis(dev_all, best[..., None], -1)[..., 0]
        dev = np.where(on, dev, 0.0).T
    else:
        dev = np.zeros(fret.shape)
    return FrameTablature(fret, np.where(on, best_act, 0.0).T, dev)


def threshold_onsets(onset_logits, threshold: float = DEFAULT_THRESHOLD) -> np.ndarray:
    """[frame, string, fret_class] logits -> boolean onset activity of the same shape."""
    return _sigmoid(onset_logits) >= threshold


def _offset_time(frame_times, t, hop):
    return frame_times[t] if t < len(frame_times) else frame_times[-1] + hop


def _hop_of(frame_times):
    return float(frame_times[1] - frame_times[0]) if len(frame_times) > 1 else HOP_SECONDS


def decode_notes(frames: FrameTablature, onset_activity, frame_times,
                 cfg: StringConfig = StringConfig(),
                 new_note_on_fret_change: bool = False) -> list[StampedNote]:
    """
    Onset-gated note decoding.

    A note on (string, fret) begins at a tablature-active frame whose onset is
    active, unless a note on that pair is already sounding from the same onset
    run. It lasts while the pair stays active and ends at the first inactive
    frame or at the next onset run. A fret change without an onset ends the
    note; with ``new_note_on_fret_change`` it also starts one on the new fret.
    """
    onset_activity = np.asarray(onset_activity, dtype=bool)
    frame_times = np.asarray(frame_times, dtype=np.float64)
    hop = _hop_of(frame_times)
    notes = []
    for s in range(frames.n_strings):
        current = None  # (fret, start)
        for t in range(frames.n_frames + 1):
            f = frames.fret[s, t] if t < frames.n_frames else -1
            onset_here = f >= 0 and onset_activity[t, s, f]
            if current is not None:
                cf, start = current
                new_onset_run = (cf == f and onset_here and not onset_activity[t - 1, s, f])
                if cf == f and not new_onset_run:
                    continue
                notes.append(StampedNote.create(s, cf, frame_times[start],
                                                _offset_time(frame_times, t, hop), cfg))
                fret_change = f >= 0 and f != cf
                current = None
                if fret_change and new_note_on_fret_change and not onset_here:
                    current = (f, t)
                    continue
            if onset_here:
                current = (f, t)
    notes.sort(key=lambda n: (n.onset, n.string))
    return notes


def decode_notes_clustered(frames: FrameTablature, frame_times, cfg: StringConfig = StringConfig(),
                           min_note_frames: int = 2) -> list[StampedNote]:
    """One note per maximal run of a (string, fret) pair lasting at least ``min_note_frames``."""
    frame_times = np.asarray(frame_times, dtype=np.float64)
    hop = _hop_of(frame_times)
    notes = []
    for s in range(frames.n_strings):
        row = frames.fret[s]
        t = 0
        while t < len(row):
            if row[t] < 0:
                t += 1
                continue
            end = t
            while end < len(row) and row[end] == row[t]:
                end += 1
            if end - t >= min_note_frames:
                notes.append(StampedNote.create(s, int(row[t]), frame_times[t],
                                                _offset_time(frame_times, end, hop), cfg))
            t = end
    notes.sort(key=lambda n: (n.onset, n.string))
    return notes


def attach_contours(notes, frames: FrameTablature, frame_times,
                    cfg: StringConfig = StringConfig()) -> list[PitchContour]:
    """One contour per note: nominal pitch plus the frame deviation over the note's frames."""
    frame_times = np.asarray(frame_times, dtype=np.float64)
    hop = _hop_of(frame_times)
    r = cfg.max_deviation_r
    contours = []
    for i, n in enumerate(notes):
        start, stop = note_frame_range(n, frames.n_frames, hop)
        ts = np.arange(start, stop)
        ts = ts[frames.fret[n.string, ts] == n.fret]
        dev = np.clip(frames.deviation[n.string, ts], -r, r)
        contours.append(PitchContour(i, frame_times[ts], n.nominal_pitch + dev))
    return contours


@dataclass
class TranscriptionResult:
    notes: list
    contours: list
    frames: FrameTablature
    frame_times: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def to_jsonl(self) -> str:
        by_note = {c.note_id: c for c in self.contours}
        lines = []
        for i, n in enumerate(self.notes):
            c = by_note.get(i, PitchContour(i))
            lines.append(json.dumps({
                "string": n.string, "fret": n.fret,
                "onset_s": round(n.onset, 6), "offset_s": round(n.offset, 6),
                "contour": [{"time_s": round(float(t), 6), "pitch_midi": round(float(p), 6)}
                            for t, p in zip(c.times, c.pitches)],
            }))
        return "".join(line + "\n" for line in lines)

    def write_jsonl(self, path):
        with open(path, "w") as f:
            f.write(self.to_jsonl())


def read_transcription_jsonl(path, cfg: StringConfig = StringConfig()):
    """Notes and contours back from a transcription JSON-lines file."""
    notes, contours = [], []
    with open(path) as f:
        for i, line in enumerate(l for l in f if l.strip()):
            r = json.loads(line)
            notes.append(StampedNote.create(r["string"], r["fret"], r["onset_s"], r["offset_s"], cfg))
            contours.append(PitchContour(i, [p["time_s"] for p in r["contour"]],
                                         [p["pitch_midi"] for p in r["contour"]]))
    return notes, contours


GRID_MAGIC = b"FTAB"
GRID_VERSION = 1


def save_frame_grid(path, frames: FrameTablature, frame_times, r: float):
    """
    Binary layout (little endian): magic, u16 version, u16 strings, u32 frames,
    f64 r, f64[T] frame times, i8[S*T] fret, f32[S*T] activation, f32[S*T] deviation.
    """
    s, t = frames.fret.shape
    with open(path, "wb") as f:
        f.write(GRID_MAGIC + struct.pack("<HHId", GRID_VERSION, s, t, r))
        f.write(np.asarray(frame_times, "<f8").tobytes())
        f.write(frames.fret.astype("<i1").tobytes())
        f.write(frames.activation.astype("<f4").tobytes())
        f.write(frames.deviation.astype("<f4").tobytes())


def load_frame_grid(path):
    with open(path, "rb") as f:
        if f.read(4) != GRID_MAGIC:
            raise ValueError(f"{path} is not a frame grid file")
        version, s, t, r = struct.unpack("<HHId", f.read(16))
        if version != GRID_VERSION:
            raise ValueError(f"unsupported frame grid version {version}")
        times = np.frombuffer(f.read(8 * t), "<f8")
        fret = np.frombuffer(f.read(s * t), "<i1").reshape(s, t).astype(int)
        act = np.frombuffer(f.read(4 * s * t), "<f4").reshape(s, t).astype(np.float64)
        dev = np.frombuffer(f.read(4 * s * t), "<f4").reshape(s, t).astype(np.float64)
    return FrameTablature(fret, act, dev), times, r
