"""
Annotation ingestion, note-contour grouping and frame-level target generation.

Annotations come from GuitarSet-style JAMS files with one ``note_midi`` and one
``pitch_contour`` annotation per string (``annotation_metadata.data_source``
holds the string index). Targets live on the feature frame grid.
"""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .features import SAMPLE_RATE, AudioClip, load_audio
from .notes import PitchContour, PitchObservation, StampedNote, StringConfig

log = logging.getLogger(__name__)

HOP_SECONDS = 512 / SAMPLE_RATE
N_PLAYERS = 6


def hz_to_midi(freq):
    return 69 + 12 * np.log2(np.asarray(freq, dtype=np.float64) / 440.0)


def midi_to_hz(midi):
    return 440.0 * 2 ** ((np.asarray(midi, dtype=np.float64) - 69) / 12)


##################################################
# JAMS I/O                                       #
##################################################


def _iter_observations(data):
    # JAMS serializes observations either as records or as parallel columns
    if isinstance(data, dict):
        keys = list(data.keys())
        for row in zip(*(data[k] for k in keys)):
            yield dict(zip(keys, row))
    else:
        yield from data


def _string_index(annotation) -> int:
    source = annotation.get("annotation_metadata", {}).get("data_source")
    try:
        return int(source)
    except (TypeError, ValueError):
        raise ValueError(f"annotation lacks a string index in data_source: {source!r}")


def parse_jams(jam: dict, cfg: StringConfig = StringConfig()):
    """
    Extract string-level notes and pitch observations from a parsed JAMS document.

    Returns
    ----------
    notes : list of StampedNote
    observations : list of PitchObservation
    """
    annotations = jam.get("annotations", [])
    note_anns = [a for a in annotations if a.get("namespace") in ("note_midi", "note_hz")]
    pitch_anns = [a for a in annotations if a.get("namespace") in ("pitch_contour",)]
    if not note_anns:
        raise ValueError("annotation file has no note_midi namespace")
    if not pitch_anns:
        raise ValueError("annotation file has no pitch_contour namespace")

    notes = []
    for ann in note_anns:
        string = _string_index(ann)
        for obs in _iter_observations(ann["data"]):
            value = float(obs["value"])
            midi = float(hz_to_midi(value)) if ann["namespace"] == "note_hz" else value
            fret = int(round(midi - cfg.open_string_pitches[string]))
            if not 0 <= fret <= cfg.n_frets:
                raise ValueError(f"note at {obs['time']:.3f}s on string {string} with "
                                 f"MIDI {midi:.2f} implies fret {fret} outside [0, {cfg.n_frets}]")
            onset = float(obs["time"])
            offset = onset + float(obs["duration"])
            if offset <= onset:
                log.warning("skipping zero-duration note at %.3fs on string %d", onset, string)
                continue
            notes.append(StampedNote.create(string, fret, onset, offset, cfg))

    observations = []
    for ann in pitch_anns:
        string = _string_index(ann)
        for obs in _iter_observations(ann["data"]):
            value = obs["value"]
            freq = value.get("frequency", 0) if isinstance(value, dict) else value
            voiced = value.get("voiced", True) if isinstance(value, dict) else True
            if not voiced or freq is None or freq <= 0:
                continue
            observations.append(PitchObservation(float(obs["time"]),
                                                 float(hz_to_midi(freq)), string))

    notes.sort(key=lambda n: (n.onset, n.string))
    observations.sort(key=lambda o: (o.string, o.time))
    return notes, observations


def load_guitarset_track(annotation_path, audio_path=None, cfg: StringConfig = StringConfig()):
    """Load (audio, notes, pitch observations) for one track; audio is None if no path."""
    with open(annotation_path) as f:
        jam = json.load(f)
    try:
        notes, observations = parse_jams(jam, cfg)
    except ValueError as e:
        raise ValueError(f"rejecting {annotation_path}: {e}") from e
    clip = load_audio(audio_path) if audio_path is not None else None
    return clip, notes, observations


def write_jams(path, notes, observations, duration: float, cfg: StringConfig = StringConfig()):
    """Write notes and observations in the GuitarSet JAMS layout."""
    annotations = []
    for s in range(cfg.n_strings):
        data = [{"time": n.onset, "duration": n.offset - n.onset,
                 "value": float(n.nominal_pitch), "confidence": None}
                for n in notes if n.string == s]
        annotations.append({"namespace": "note_midi", "data": data,
                            "annotation_metadata": {"data_source": str(s)}})
    for s in range(cfg.n_strings):
        data = [{"time": o.time, "duration": 0.0,
                 "value": {"index": 0, "frequency": float(midi_to_hz(o.pitch)), "voiced": True},
                 "confidence": None}
                for o in observations if o.string == s]
        annotations.append({"namespace": "pitch_contour", "data": data,
                            "annotation_metadata": {"data_source": str(s)}})
    jam = {"annotations": annotations, "file_metadata": {"duration": duration},
           "sandbox": {}}
    with open(path, "w") as f:
        json.dump(jam, f)


def write_note_records(path, notes, contours):
    """One JSON line per note with its contour embedded."""
    by_note = {c.note_id: c for c in contours}
    with open(path, "w") as f:
        for i, n in enumerate(notes):
            c = by_note.get(i, PitchContour(i))
            f.write(json.dumps({
                "string": n.string, "fret": n.fret, "onset": n.onset, "offset": n.offset,
                "nominal_pitch": n.nominal_pitch,
                "contour": {"times": c.times.tolist(), "pitches": c.pitches.tolist()},
            }) + "\n")


def read_note_records(path):
    notes, contours = [], []
    with open(path) as f:
        for i, line in enumerate(line for line in f if line.strip()):
            r = json.loads(line)
            notes.append(StampedNote(r["string"], r["fret"], r["onset"], r["offset"],
                                     r["nominal_pitch"]))
            contours.append(PitchContour(i, r["contour"]["times"], r["contour"]["pitches"]))
    return notes, contours


##################################################
# NOTE-CONTOUR GROUPING                          #
##################################################


@dataclass
class GroupingConfig:
    # slack (s) around each note span when assigning observations
    boundary_slack: float = 0.05
    # clusters spanning fewer frames than this are treated as sporadic
    min_cluster_frames: int = 3
    # gap (s) between consecutive observations that starts a new cluster
    cluster_gap: float = 0.1
    hop_seconds: float = HOP_SECONDS


def _time_distance(t, note):
    if t < note.onset:
        return note.onset - t
    if t > note.offset:
        return t - note.offset
    return 0.0


def assign_observations(notes, observations, cfg: StringConfig = StringConfig(),
                        slack: float = 0.05) -> np.ndarray:
    """
    Assign each observation to a same-string note, or -1 if none qualifies.

    A candidate note must contain the observation time within ``slack`` and have
    a nominal pitch within r of the observed pitch. Among candidates the nearest
    nominal pitch wins; ties go to the temporally closer note, then the earlier index.
    """
    r = cfg.max_deviation_r
    by_string = {}
    for i, n in enumerate(notes):
        by_string.setdefault(n.string, []).append(i)

    assignment = np.full(len(observations), -1, dtype=int)
    for j, o in enumerate(observations):
        best = None
        for i in by_string.get(o.string, ()):
            n = notes[i]
            if not (n.onset - slack <= o.time <= n.offset + slack):
                continue
            gap = abs(o.pitch - n.nominal_pitch)
            if gap > r + 1e-9:
                continue
            key = (gap, _time_distance(o.time, n), i)
            if best is None or key < best:
                best = key
        if best is not None:
            assignment[j] = best[2]
    return assignment


def _split_clusters(times, gap):
    breaks = np.where(np.diff(times) > gap)[0] + 1
    return np.split(np.arange(len(times)), breaks)


def cluster_group_contours(notes, observations, cfg: StringConfig = StringConfig(),
                           grouping: GroupingConfig = GroupingConfig()):
    """
    Group pitch observations into one contour per note.

    Observations further than r from every candidate nominal pitch are discarded.
    Each note's observations are split into clusters at temporal gaps; clusters
    shorter than ``min_cluster_frames`` frames are dropped as sporadic and the
    longest surviving cluster becomes the note's contour (possibly empty).
    """
    assignment = assign_observations(notes, observations, cfg, grouping.boundary_slack)
    min_span = grouping.min_cluster_frames * grouping.hop_seconds

    contours = []
    for i in range(len(notes)):
        members = [observations[j] for j in np.where(assignment == i)[0]]
        members.sort(key=lambda o: o.time)
        times = np.array([o.time for o in members])
        pitches = np.array([o.pitch for o in members])
        if len(times):
            keep = np.concatenate([[True], np.diff(times) > 0])
            times, pitches = times[keep], pitches[keep]

        best = np.zeros(0, dtype=int)
        for cluster in _split_clusters(times, grouping.cluster_gap) if len(times) else []:
            span = times[cluster[-1]] - times[cluster[0]] + grouping.hop_seconds
            if span < min_span - 1e-9:
                continue
            if len(cluster) > len(best):
                best = cluster
        contours.append(PitchContour(i, times[best], pitches[best]))
    return contours


def standard_grouping(notes, observations, cfg: StringConfig = StringConfig()):
    """Interval-only grouping: each observation goes to the same-string note containing it."""
    contours = []
    for i, n in enumerate(notes):
        members = sorted((o for o in observations
                          if o.string == n.string and n.onset <= o.time < n.offset),
                         key=lambda o: o.time)
        times = np.array([o.time for o in members])
        pitches = np.array([o.pitch for o in members])
        if len(times):
            keep = np.concatenate([[True], np.diff(times) > 0])
            times, pitches = times[keep], pitches[keep]
        contours.append(PitchContour(i, times, pitches))
    return contours


def realign_note_boundaries(notes, contours):
    """
    Snap each note's span to its contour's span; later onsets truncate earlier
    offsets on the same string so realigned notes never overlap.
    """
    by_note = {c.note_id: c for c in contours}
    realigned = []
    for i, n in enumerate(notes):
        span = by_note[i].span if i in by_note else None
        if span is not None and span[1] > span[0]:
            n = n.with_bounds(*span)
        realigned.append(n)

    for s in {n.string for n in notes}:
        idx = sorted((i for i, n in enumerate(notes) if n.string == s),
                     key=lambda i: (notes[i].onset, i))
        for a, b in zip(idx, idx[1:]):
            prev, cur = realigned[a], realigned[b]
            if prev.offset <= cur.onset:
                continue
            if cur.onset > prev.onset:
                realigned[a] = prev.with_bounds(prev.onset, cur.onset)
            elif prev.offset < cur.offset:
                # later note snapped before the earlier one; delay it instead
                realigned[b] = cur.with_bounds(prev.offset, cur.offset)
            else:
                realigned[a], realigned[b] = notes[a], notes[b]
                if notes[a].offset > notes[b].onset > notes[a].onset:
                    realigned[a] = notes[a].with_bounds(notes[a].onset, notes[b].onset)
    return realigned


##################################################
# TARGETS                                        #
##################################################


@dataclass
class TablatureTargets:
    activity: np.ndarray        # [string, fret_class, frame] in {0, 1}
    onsets: np.ndarray
    deviation_x: np.ndarray     # normalized deviation in [0, 1]
    deviation_mask: np.ndarray

    @property
    def n_frames(self) -> int:
        return self.activity.shape[-1]

    def deviation_semitones(self, r: float) -> np.ndarray:
        return (2 * self.deviation_x - 1) * r

    @classmethod
    def silence(cls, n_strings, n_fret_classes, n_frames):
        shape = (n_strings, n_fret_classes, n_frames)
        zeros = np.zeros(shape, dtype=np.float32)
        return cls(zeros.copy(), zeros.copy(), np.full(shape, 0.5, np.float32), zeros.copy())


def note_frame_range(note: StampedNote, n_frames: int, hop_seconds: float = HOP_SECONDS):
    """Frame indices i with onset <= i * hop < offset."""
    eps = 1e-9
    start = max(0, math.ceil(note.onset / hop_seconds - eps))
    stop = min(n_frames, math.ceil(note.offset / hop_seconds - eps))
    return start, stop


def generate_targets(notes, contours, n_frames: int, cfg: StringConfig = StringConfig(),
                     hop_seconds: float = HOP_SECONDS) -> TablatureTargets:
    r = cfg.max_deviation_r
    t = TablatureTargets.silence(cfg.n_strings, cfg.n_fret_classes, n_frames)
    owner = np.full((cfg.n_strings, n_frames), -1)
    times = np.arange(n_frames) * hop_seconds
    by_note = {c.note_id: c for c in contours}

    for i, n in enumerate(notes):
        start, stop = note_frame_range(n, n_frames, hop_seconds)
        if stop <= start:
            continue
        clash = owner[n.string, start:stop]
        if np.any(clash >= 0):
            other = notes[int(clash[clash >= 0][0])]
            raise ValueError(f"notes at {other.onset:.3f}s and {n.onset:.3f}s are both "
                             f"active on string {n.string}")
        owner[n.string, start:stop] = i
        t.activity[n.string, n.fret, start:stop] = 1
        t.onsets[n.string, n.fret, start] = 1
        t.deviation_mask[n.string, n.fret, start:stop] = 1

        contour = by_note.get(i)
        if contour is not None and len(contour):
            pitch = np.interp(times[start:stop], contour.times, contour.pitches)
            dev = np.clip(pitch - n.nominal_pitch, -r, r)
        else:
            dev = np.zeros(stop - start)
        t.deviation_x[n.string, n.fret, start:stop] = (dev / r + 1) / 2
    return t


def build_targets(notes, observations, n_frames, cfg: StringConfig = StringConfig(),
                  grouping_mode: str = "cluster", grouping: GroupingConfig = GroupingConfig()):
    """Group, optionally realign, then rasterize targets."""
    if grouping_mode == "cluster":
        contours = cluster_group_contours(notes, observations, cfg, grouping)
        notes = realign_note_boundaries(notes, contours)
    elif grouping_mode == "standard":
        contours = standard_grouping(notes, observations, cfg)
    else:
        raise ValueError(f"unknown grouping mode {grouping_mode!r}")
    return generate_targets(notes, contours, n_frames, cfg, grouping.hop_seconds)


def reference_frame_pitches(observations, frame_times, n_strings=6, max_dt=None, max_gap=None):
    """
    Resample observations onto the frame grid: per string and frame, the pitch of
    the nearest observation within ``max_dt`` seconds (default half a hop), else NaN.

    Frames outside every contour segment stay NaN, where a segment is a run of
    observations spaced at most ``max_gap`` apart (default two hops) and covers
    the closed interval from its first to its last observation.
    """
    frame_times = np.asarray(frame_times)
    hop = frame_times[1] - frame_times[0] if len(frame_times) > 1 else HOP_SECONDS
    max_dt = hop / 2 if max_dt is None else max_dt
    max_gap = 2 * hop if max_gap is None else max_gap
    eps = 1e-9
    out = np.full((n_strings, len(frame_times)), np.nan)
    for s in range(n_strings):
        obs = sorted((o for o in observations if o.string == s), key=lambda o: o.time)
        if not obs:
            continue
        ts = np.array([o.time for o in obs])
        ps = np.array([o.pitch for o in obs])
        idx = np.clip(np.searchsorted(ts, frame_times), 1, len(ts) - 1) if len(ts) > 1 \
            else np.zeros(len(frame_times), dtype=int)
        if len(ts) > 1:
            left = idx - 1
            idx = np.where(np.abs(ts[left] - frame_times) <= np.abs(ts[idx] - frame_times),
                           left, idx)
        near = np.abs(ts[idx] - frame_times) <= max_dt + eps

        breaks = np.nonzero(np.diff(ts) > max_gap + eps)[0]
        seg_start = ts[np.r_[0, breaks + 1]]
        seg_end = ts[np.r_[breaks, len(ts) - 1]]
        k = np.searchsorted(seg_start, frame_times + eps, side="right") - 1
        inside = (k >= 0) & (frame_times <= seg_end[np.maximum(k, 0)] + eps)

        keep = near & inside
        out[s, keep] = ps[idx[keep]]
    return out


##################################################
# FOLDS                                          #
##################################################


def player_of(track_id: str) -> int:
    head = Path(track_id).name.split("_")[0]
    try:
        player = int(head)
    except ValueError:
        raise ValueError(f"cannot read a player id from track {track_id!r}")
    if not 0 <= player < N_PLAYERS:
        raise ValueError(f"unknown player {player} in track {track_id!r}")
    return player


def player_folds(track_ids):
    """
    Six (train, validation, test) splits: fold k tests on player k, validates
    on player (k + 1) mod 6 and trains on the rest.
    """
    players = {t: player_of(t) for t in track_ids}
    folds = []
    for k in range(N_PLAYERS):
        test = [t for t in track_ids if players[t] == k]
        val = [t for t in track_ids if players[t] == (k + 1) % N_PLAYERS]
        train = [t for t in track_ids if players[t] not in (k, (k + 1) % N_PLAYERS)]
        folds.append((train, val, test))
    return folds


class GuitarSet:
    """Index over a GuitarSet root with ``annotation/`` and ``audio_mono-mic/`` folders."""

    ENV_VAR = "GUITARSET_ROOT"

    def __init__(self, root=None, audio_dir="audio_mono-mic", audio_suffix="_mic.wav"):
        root = root or os.environ.get(self.ENV_VAR)
        if root is None:
            raise ValueError(f"no dataset root given and ${self.ENV_VAR} is unset")
        self.root = Path(root)
        self.audio_dir = self.root / audio_dir
        self.audio_suffix = audio_suffix
        if not (self.root / "annotation").is_dir():
            raise ValueError(f"{self.root} has no annotation/ folder")

    def track_ids(self):
        return sorted(p.stem for p in (self.root / "annotation").glob("*.jams"))

    def annotation_path(self, track_id):
        return self.root / "annotation" / f"{track_id}.jams"

    def audio_path(self, track_id):
        return self.audio_dir / f"{track_id}{self.audio_suffix}"

    def load(self, track_id, cfg: StringConfig = StringConfig()):
        return load_guitarset_track(self.annotation_path(track_id), self.audio_path(track_id), cfg)


##################################################
# SYNTHETIC FIXTURES                             #
##################################################


@dataclass
class NoteSpec:
    string: int
    fret: int
    onset: float
    offset: float
    # linear bend from 0 to ``bend`` semitones across the note
    bend: float = 0.0
    vibrato_depth: float = 0.0
    vibrato_rate: float = 5.5
    amplitude: float = 0.3

    def deviation(self, t):
        t = np.asarray(t, dtype=np.float64)
        frac = (t - self.onset) / (self.offset - self.onset)
        vib = self.vibrato_depth * np.sin(2 * np.pi * self.vibrato_rate * (t - self.onset))
        return self.bend * frac + vib

    @property
    def max_deviation(self) -> float:
        return abs(self.bend) + abs(self.vibrato_depth)


def synthesize_fixture(specs, cfg: StringConfig = StringConfig(), duration: float | None = None,
                       hop_seconds: float = HOP_SECONDS, n_harmonics: int = 12):
    """
    Render additive-sawtooth audio for ``specs`` and return ground-truth notes
    and pitch observations sampled on the feature frame grid and at each
    note's onset and offset.
    """
    specs = list(specs)
    for sp in specs:
        if not 0 <= sp.string < cfg.n_strings or not 0 <= sp.fret <= cfg.n_frets:
            raise ValueError(f"string/fret ({sp.string}, {sp.fret}) out of range")
        if sp.max_deviation > cfg.max_deviation_r + 1e-9:
            raise ValueError(f"modulation of {sp.max_deviation} st exceeds r = {cfg.max_deviation_r}")
        if not sp.onset < sp.offset:
            raise ValueError("note onset must precede offset")
    if duration is None:
        duration = max((sp.offset for sp in specs), default=0.0) + 0.25

    sr = SAMPLE_RATE
    n = int(round(duration * sr))
    audio = np.zeros(n)
    notes, observations = [], []
    n_frames = -(-n // 512)
    grid = np.arange(n_frames) * hop_seconds
    for sp in specs:
        note = StampedNote.create(sp.string, sp.fret, sp.onset, sp.offset, cfg)
        notes.append(note)

        i0, i1 = int(round(sp.onset * sr)), min(n, int(round(sp.offset * sr)))
        t = np.arange(i0, i1) / sr
        freq = midi_to_hz(note.nominal_pitch + sp.deviation(t))
        phase = 2 * np.pi * np.cumsum(freq) / sr
        env = np.ones(len(t))
        ramp = min(len(t) // 2, int(0.01 * sr))
        if ramp:
            env[:ramp] = np.linspace(0, 1, ramp)
            env[-ramp:] = np.linspace(1, 0, ramp)
        env *= np.exp(-1.5 * (t - sp.onset))
        wave = np.zeros(len(t))
        for k in range(1, n_harmonics + 1):
            if k * freq.max() >= sr / 2:
                break
            wave += np.sin(k * phase) / k
        audio[i0:i1] += sp.amplitude * env * wave

        # frame-grid samples plus both endpoints, so the contour spans the whole note
        inside = grid[(grid > sp.onset) & (grid < sp.offset)]
        for ft in [sp.onset, *inside, sp.offset]:
            observations.append(PitchObservation(float(ft), float(note.nominal_pitch + sp.deviation(ft)),
                                                 sp.string))

    peak = np.abs(audio).max()
    if peak > 1:
        audio /= peak
    observations.sort(key=lambda o: (o.string, o.time))
    return AudioClip(audio, sr), notes, observations


def demo_fixture_specs():
    """
    Two short excerpts for smoke runs and demos: a single 1-second open low-E
    note away from the clip edges, and a polyphonic passage with bends and vibrato.
    """
    open_e = [NoteSpec(0, 0, 1.8, 2.8)]
    passage = [NoteSpec(1, 2, 0.1, 1.0), NoteSpec(3, 2, 0.1, 1.0), NoteSpec(4, 3, 0.1, 1.0),
               NoteSpec(0, 5, 1.1, 2.5, vibrato_depth=0.4), NoteSpec(2, 7, 1.2, 2.0, bend=0.8),
               NoteSpec(5, 0, 2.2, 3.2), NoteSpec(2, 9, 2.6, 4.2, bend=1.0),
               NoteSpec(4, 2, 3.3, 4.3, vibrato_depth=0.3), NoteSpec(1, 0, 3.4, 4.3)]
    return [open_e, passage]


def bend_fixture_specs():
    """Two short steady notes and a long linear bend from 0 to +1 semitone."""
    return [NoteSpec(0, 5, 0.2, 0.7), NoteSpec(3, 2, 0.3, 0.8),
            NoteSpec(2, 4, 0.9, 2.9, bend=1.0)]
