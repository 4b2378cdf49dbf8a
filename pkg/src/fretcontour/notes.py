"""Note, pitch observation and contour records shared across the pipeline."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

STANDARD_TUNING = (40, 45, 50, 55, 59, 64)


@dataclass(frozen=True)
class StringConfig:
    open_string_pitches: tuple[int, ...] = STANDARD_TUNING
    n_frets: int = 19
    max_deviation_r: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "open_string_pitches", tuple(self.open_string_pitches))
        if len(self.open_string_pitches) != 6:
            raise ValueError("exactly 6 strings are supported")
        if self.n_frets < 1:
            raise ValueError("n_frets must be at least 1")
        if self.max_deviation_r <= 0:
            raise ValueError("max_deviation_r must be positive")

    @property
    def n_strings(self) -> int:
        return len(self.open_string_pitches)

    @property
    def n_fret_classes(self) -> int:
        return self.n_frets + 1

    def nominal_pitch(self, string: int, fret: int) -> int:
        return self.open_string_pitches[string] + fret

    def nominal_grid(self) -> np.ndarray:
        """[string, fret_class] array of nominal MIDI pitches."""
        return np.asarray(self.open_string_pitches)[:, None] + np.arange(self.n_fret_classes)


@dataclass(frozen=True)
class StampedNote:
    string: int
    fret: int
    onset: float
    offset: float
    nominal_pitch: int

    def __post_init__(self):
        if not self.onset < self.offset:
            raise ValueError(f"note onset {self.onset} must precede offset {self.offset}")
        if self.fret < 0:
            raise ValueError("fret must be nonnegative")

    @classmethod
    def create(cls, string: int, fret: int, onset: float, offset: float,
               cfg: StringConfig = StringConfig()) -> StampedNote:
        if not 0 <= fret <= cfg.n_frets:
            raise ValueError(f"fret {fret} outside [0, {cfg.n_frets}]")
        string, fret = int(string), int(fret)
        return cls(string, fret, float(onset), float(offset), cfg.nominal_pitch(string, fret))

    def with_bounds(self, onset: float, offset: float) -> StampedNote:
        return StampedNote(self.string, self.fret, float(onset), float(offset), self.nominal_pitch)


@dataclass(frozen=True)
class PitchObservation:
    time: float
    pitch: float
    string: int

    def __post_init__(self):
        if not (np.isfinite(self.pitch) and self.pitch > 0):
            raise ValueError(f"invalid pitch observation {self.pitch}")


@dataclass
class PitchContour:
    note_id: int
    times: np.ndarray = field(default_factory=lambda: np.zeros(0))
    pitches: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        self.pitches = np.asarray(self.pitches, dtype=np.float64)
        if self.times.shape != self.pitches.shape:
            raise ValueError("contour times and pitches differ in length")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("contour times must be strictly increasing")

    def __len__(self):
        return len(self.times)

    @property
    def span(self) -> tuple[float, float] | None:
        if not len(self.times):
            return None
        return float(self.times[0]), float(self.times[-1])
