"""
Frame-, note- and continuous-pitch-level precision/recall/F1.

Conventions: when both prediction and reference are empty every score is 1;
otherwise an empty side yields 0 for the undefined ratio.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import maximum_bipartite_matching

from .dataset import HOP_SECONDS, note_frame_range
from .decoding import FrameTablature
from .notes import StringConfig

DEFAULT_TOLERANCES = (0.05, 0.1, 0.2, 0.3, 0.4, 0.5)
ONSET_TOLERANCE = 0.05
PITCH_TOLERANCE = 0.5
_EPS = 1e-9


@dataclass(frozen=True)
class PRF:
    precision: float
    recall: float
    f1: float
    tp: int = 0
    n_pred: int = 0
    n_ref: int = 0

    @classmethod
    def from_counts(cls, tp: int, n_pred: int, n_ref: int) -> PRF:
        if n_pred == 0 and n_ref == 0:
            return cls(1.0, 1.0, 1.0, 0, 0, 0)
        p = tp / n_pred if n_pred else 0.0
        r = tp / n_ref if n_ref else 0.0
        f = 2 * p * r / (p + r) if p + r > 0 else 0.0
        return cls(p, r, f, int(tp), int(n_pred), int(n_ref))

    @staticmethod
    def mean(scores) -> PRF:
        """Average of P, R and F1 across tracks; counts are summed."""
        scores = list(scores)
        if not scores:
            raise ValueError("cannot average an empty list of scores")
        return PRF(float(np.mean([s.precision for s in scores])),
                   float(np.mean([s.recall for s in scores])),
                   float(np.mean([s.f1 for s in scores])),
                   sum(s.tp for s in scores), sum(s.n_pred for s in scores),
                   sum(s.n_ref for s in scores))

    @staticmethod
    def pooled(scores) -> PRF:
        scores = list(scores)
        return PRF.from_counts(sum(s.tp for s in scores), sum(s.n_pred for s in scores),
                               sum(s.n_ref for s in scores))


@dataclass
class ToleranceSweep:
    tolerances: list
    scores: list
    string_dependent: bool

    def __post_init__(self):
        if np.any(np.diff(self.tolerances) <= 0):
            raise ValueError("tolerances must be strictly increasing")

    def f1(self):
        return [s.f1 for s in self.scores]


##################################################
# FRAME LEVEL                                    #
##################################################


def _check_aligned(pred, ref):
    if pred.fret.shape != ref.fret.shape:
        raise ValueError(f"frame grids differ: {pred.fret.shape} vs {ref.fret.shape}")


def frame_tablature_prf(pred: FrameTablature, ref: FrameTablature) -> PRF:
    """True positives are exact (string, fret, frame) matches."""
    _check_aligned(pred, ref)
    tp = int(np.sum(pred.active & (pred.fret == ref.fret)))
    return PRF.from_counts(tp, int(pred.active.sum()), int(ref.active.sum()))


def _pitch_sets(frames: FrameTablature, cfg: StringConfig):
    nominal = np.asarray(cfg.open_string_pitches)[:, None] + frames.fret
    return [set(nominal[frames.active[:, t], t].tolist()) for t in range(frames.n_frames)]


def frame_multipitch_prf(pred: FrameTablature, ref: FrameTablature,
                         cfg: StringConfig = StringConfig()) -> PRF:
    """Per-frame sets of nominal MIDI pitches, duplicates across strings collapsed."""
    _check_aligned(pred, ref)
    tp = n_pred = n_ref = 0
    for p, r in zip(_pitch_sets(pred, cfg), _pitch_sets(ref, cfg)):
        tp += len(p & r)
        n_pred += len(p)
        n_ref += len(r)
    return PRF.from_counts(tp, n_pred, n_ref)


##################################################
# NOTE LEVEL                                     #
##################################################


def note_prf(pred_notes, ref_notes, string_dependent: bool,
             onset_tolerance: float = ONSET_TOLERANCE,
             pitch_tolerance: float = PITCH_TOLERANCE) -> PRF:
    """Onset-only note scores via maximum one-to-one matching."""
    n_pred, n_ref = len(pred_notes), len(ref_notes)
    if n_pred == 0 or n_ref == 0:
        return PRF.from_counts(0, n_pred, n_ref)
    p_on = np.array([n.onset for n in pred_notes])
    r_on = np.array([n.onset for n in ref_notes])
    p_pitch = np.array([n.nominal_pitch for n in pred_notes], dtype=np.float64)
    r_pitch = np.array([n.nominal_pitch for n in ref_notes], dtype=np.float64)
    hits = (np.abs(r_on[:, None] - p_on[None]) <= onset_tolerance + _EPS) & \
           (np.abs(r_pitch[:, None] - p_pitch[None]) <= pitch_tolerance + _EPS)
    if string_dependent:
        p_str = np.array([n.string for n in pred_notes])
        r_str = np.array([n.string for n in ref_notes])
        hits &= r_str[:, None] == p_str[None]
    match = maximum_bipartite_matching(csr_matrix(hits.astype(np.int8)), perm_type="column")
    return PRF.from_counts(int(np.sum(match >= 0)), n_pred, n_ref)


##################################################
# CONTINUOUS MPE                                 #
##################################################


def _match_count_sorted(p, q, tol):
    # leftmost-first matching on the line is maximum for threshold compatibility
    p, q = np.sort(p), np.sort(q)
    i = j = count = 0
    while i < len(p) and j < len(q):
        if p[i] < q[j] - tol - _EPS:
            i += 1
        elif q[j] < p[i] - tol - _EPS:
            j += 1
        else:
            count += 1
            i += 1
            j += 1
    return count


def _match_count_greedy(p, q, tol):
    # each prediction in turn takes its closest unmatched reference
    free = list(q)
    count = 0
    for x in p:
        if not free:
            break
        d = np.abs(np.asarray(free) - x)
        k = int(d.argmin())
        if d[k] <= tol + _EPS:
            free.pop(k)
            count += 1
    return count


def continuous_mpe_sweep(pred_pitches, ref_pitches, tolerances=DEFAULT_TOLERANCES,
                         string_dependent: bool = True, matching: str = "optimal") -> ToleranceSweep:
    """
    Frame-level continuous pitch scores per tolerance (semitones).

    ``pred_pitches`` and ``ref_pitches`` are [string, frame] arrays with NaN
    where a string is silent. String-dependent matching only pairs pitches on
    the same string; string-agnostic matching pairs freely within a frame.
    """
    tolerances = list(tolerances)
    if not tolerances:
        raise ValueError("empty tolerance list")
    pred = np.asarray(pred_pitches, dtype=np.float64)
    ref = np.asarray(ref_pitches, dtype=np.float64)
    if pred.shape != ref.shape:
        raise ValueError(f"pitch grids differ: {pred.shape} vs {ref.shape}")
    if matching not in ("optimal", "greedy"):
        raise ValueError(f"unknown matching {matching!r}")
    p_on, r_on = ~np.isnan(pred), ~np.isnan(ref)
    n_pred, n_ref = int(p_on.sum()), int(r_on.sum())

    scores = []
    for tol in tolerances:
        if string_dependent:
            both = p_on & r_on
            tp = int(np.sum(np.abs(pred[both] - ref[both]) <= tol + _EPS))
        else:
            count = _match_count_sorted if matching == "optimal" else _match_count_greedy
            tp = 0
            for t in np.nonzero(p_on.any(0) & r_on.any(0))[0]:
                tp += count(pred[p_on[:, t], t], ref[r_on[:, t], t], tol)
        scores.append(PRF.from_counts(tp, n_pred, n_ref))
    return ToleranceSweep(tolerances, scores, string_dependent)


def nominal_pitch_baseline(frames: FrameTablature, cfg: StringConfig = StringConfig()):
    """Continuous pitch inputs with every deviation forced to zero."""
    return frames.pitches(cfg, with_deviation=False)


##################################################
# TRACK EVALUATION                               #
##################################################


def notes_to_frames(notes, n_frames: int, hop_seconds: float = HOP_SECONDS,
                    n_strings: int = 6) -> FrameTablature:
    """Rasterize notes; on same-string overlap the later note wins."""
    fret = np.full((n_strings, n_frames), -1)
    for n in sorted(notes, key=lambda n: n.onset):
        start, stop = note_frame_range(n, n_frames, hop_seconds)
        fret[n.string, start:stop] = n.fret
    return FrameTablature(fret)


FAMILIES = ("tablature", "pitch", "note_dependent", "note_agnostic")


def evaluate_track(pred_frames: FrameTablature, pred_notes, ref_notes, ref_pitches,
                   cfg: StringConfig = StringConfig(), tolerances=DEFAULT_TOLERANCES,
                   hop_seconds: float = HOP_SECONDS, matching: str = "optimal") -> dict:
    """
    All metric families for one track, against the original annotations.

    ``ref_pitches`` is the [string, frame] reference pitch grid.
    """
    ref_frames = notes_to_frames(ref_notes, pred_frames.n_frames, hop_seconds, cfg.n_strings)
    pred_pitch = pred_frames.pitches(cfg)
    return {
        "tablature": frame_tablature_prf(pred_frames, ref_frames),
        "pitch": frame_multipitch_prf(pred_frames, ref_frames, cfg),
        "note_dependent": note_prf(pred_notes, ref_notes, True),
        "note_agnostic": note_prf(pred_notes, ref_notes, False),
        "mpe_dependent": continuous_mpe_sweep(pred_pitch, ref_pitches, tolerances, True, matching),
        "mpe_agnostic": continuous_mpe_sweep(pred_pitch, ref_pitches, tolerances, False, matching),
    }


def aggregate(track_results: list) -> dict:
    """Mean over tracks of every PRF (and of every tolerance of each sweep)."""
    out = {}
    for key in track_results[0]:
        first = track_results[0][key]
        if isinstance(first, ToleranceSweep):
            scores = [PRF.mean(r[key].scores[i] for r in track_results)
                      for i in range(len(first.tolerances))]
            out[key] = ToleranceSweep(first.tolerances, scores, first.string_dependent)
        else:
            out[key] = PRF.mean(r[key] for r in track_results)
    return out


def table_row(results: dict) -> dict:
    """Twelve columns: P/R/F1 for each of the four discrete families."""
    row = {}
    for fam in FAMILIES:
        s = results[fam]
        row[f"{fam}_P"], row[f"{fam}_R"], row[f"{fam}_F1"] = s.precision, s.recall, s.f1
    return row


def write_metrics_csv(path, per_track: dict):
    """One row per track x metric family x tolerance (blank for discrete families)."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["track", "family", "tolerance", "precision", "recall", "f1",
                    "tp", "n_pred", "n_ref"])
        for track, results in per_track.items():
            for fam, value in results.items():
                if isinstance(value, ToleranceSweep):
                    for tol, s in zip(value.tolerances, value.scores):
                        w.writerow([track, fam, tol, s.precision, s.recall, s.f1,
                                    s.tp, s.n_pred, s.n_ref])
                else:
                    w.writerow([track, fam, "", value.precision, value.recall, value.f1,
                                value.tp, value.n_pred, value.n_ref])


def results_to_json(results: dict) -> dict:
    out = {}
    for fam, value in results.items():
        if isinstance(value, ToleranceSweep):
            out[fam] = {"tolerances": list(value.tolerances),
                        "string_dependent": value.string_dependent,
                        "scores": [asdict(s) for s in value.scores]}
        else:
            out[fam] = asdict(value)
    return out


def results_from_json(d: dict) -> dict:
    out = {}
    for fam, value in d.items():
        if "tolerances" in value:
            out[fam] = ToleranceSweep(value["tolerances"], [PRF(**s) for s in value["scores"]],
                                      value["string_dependent"])
        else:
            out[fam] = PRF(**value)
    return out


def write_summary_json(path, results: dict, extra: dict | None = None):
    payload = {"results": results_to_json(results)}
    if extra:
        payload.update(extra)
    with open(path, "w") as f:
        json.dump(payload, f, indent=2)
