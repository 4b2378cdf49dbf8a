"""Constant-Q and harmonic constant-Q feature extraction."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse
from scipy.signal import get_window, resample_poly

SAMPLE_RATE = 22050

# MIDI 24 (C1) and MIDI 40 (E2)
C1_HZ = 440.0 * 2 ** ((24 - 69) / 12)
E2_HZ = 440.0 * 2 ** ((40 - 69) / 12)

HCQT_HARMONICS = (0.5, 1, 2, 3, 4, 5)


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError(f"AudioClip must be mono, got shape {self.samples.shape}")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("AudioClip contains non-finite samples")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class FeatureConfig:
    mode: str = "hcqt"
    hop_length: int = 512
    bins_per_semitone: int = 3
    n_octaves: int = 4
    base_frequencies: list[float] = field(
        default_factory=lambda: [h * E2_HZ for h in HCQT_HARMONICS])
    # decibel conversion + per-channel min-max scaling to [0, 1]
    normalize: bool = True
    top_db: float = 80.0
    sparsity: float = 0.01

    def __post_init__(self):
        if self.mode not in ("hcqt", "cqt"):
            raise ValueError(f"unknown feature mode {self.mode!r}")
        if self.hop_length <= 0:
            raise ValueError("hop_length must be positive")
        expected = 6 if self.mode == "hcqt" else 1
        if len(self.base_frequencies) != expected:
            raise ValueError(f"{self.mode} mode needs exactly {expected} base "
                             f"frequencies, got {len(self.base_frequencies)}")

    @classmethod
    def hcqt(cls, **kwargs) -> FeatureConfig:
        return cls(mode="hcqt", **kwargs)

    @classmethod
    def cqt(cls, **kwargs) -> FeatureConfig:
        kwargs.setdefault("bins_per_semitone", 2)
        kwargs.setdefault("n_octaves", 8)
        kwargs.setdefault("base_frequencies", [C1_HZ])
        return cls(mode="cqt", **kwargs)

    @classmethod
    def for_mode(cls, mode: str, **kwargs) -> FeatureConfig:
        return cls.cqt(**kwargs) if mode == "cqt" else cls.hcqt(**kwargs)

    @property
    def bins_per_octave(self) -> int:
        return 12 * self.bins_per_semitone

    @property
    def n_bins(self) -> int:
        return self.bins_per_octave * self.n_octaves

    @property
    def n_channels(self) -> int:
        return len(self.base_frequencies)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> FeatureConfig:
        return cls(**d)


@dataclass
class SpectralFeatures:
    magnitudes: np.ndarray  # [channel, bin, frame]
    frame_times: np.ndarray
    config: FeatureConfig

    @property
    def n_frames(self) -> int:
        return self.magnitudes.shape[-1]


def frame_times(n_frames: int, cfg: FeatureConfig | None = None) -> np.ndarray:
    hop = cfg.hop_length if cfg is not None else 512
    return np.arange(n_frames) * hop / SAMPLE_RATE


def n_frames_for(n_samples: int, hop_length: int) -> int:
    return -(-n_samples // hop_length)


def bin_frequencies(f_base: float, n_bins: int, bins_per_octave: int) -> np.ndarray:
    return f_base * 2.0 ** (np.arange(n_bins) / bins_per_octave)


def _constant_q_kernels(f_base, n_bins, bins_per_octave, sr, sparsity):
    """
    Build the sparse spectral kernel bank for one constant-Q transform.

    Each bin k is a Hann-windowed complex exponential at f_k, of length
    ceil(Q sr / f_k) with Q = 1 / (2^(1/B) - 1), centered in an FFT frame
    large enough for the lowest bin and scaled by 1/N_k. Returns the
    conjugated kernel spectra (positive frequencies) and the FFT size.
    """
    freqs = bin_frequencies(f_base, n_bins, bins_per_octave)
    if freqs[-1] >= sr / 2:
        raise ValueError(f"top bin at {freqs[-1]:.1f} Hz exceeds the Nyquist "
                         f"frequency for sample rate {sr}")
    q = 1.0 / (2 ** (1.0 / bins_per_octave) - 1)
    lengths = np.ceil(q * sr / freqs).astype(int)
    n_fft = int(2 ** math.ceil(math.log2(lengths[0])))

    kernels = np.zeros((n_bins, n_fft), dtype=np.complex128)
    center = n_fft // 2
    for k, (f, n_k) in enumerate(zip(freqs, lengths)):
        n = np.arange(n_k) - (n_k - 1) / 2
        atom = get_window("hann", n_k, fftbins=False) * np.exp(2j * np.pi * f * n / sr) / n_k
        start = center - n_k // 2
        kernels[k, start:start + n_k] = atom

    # <x, kernel> = (1/N) sum_w X(w) conj(K(w)); keep the non-negative half
    spectra = np.conj(np.fft.fft(kernels, axis=1))[:, : n_fft // 2 + 1] / n_fft
    mags = np.abs(spectra)
    for k in range(n_bins):
        order = np.argsort(mags[k])
        cumulative = np.cumsum(mags[k][order])
        drop = order[cumulative <= sparsity * cumulative[-1]]
        spectra[k, drop] = 0
    return scipy.sparse.csr_matrix(spectra.T), n_fft, lengths


def _cqt_magnitude(samples, f_base, n_bins, bins_per_octave, hop, sr, sparsity):
    kernel, n_fft, _ = _constant_q_kernels(f_base, n_bins, bins_per_octave, sr, sparsity)
    n_frames = n_frames_for(len(samples), hop)
    padded = np.pad(samples, n_fft // 2, mode="reflect")
    out = np.empty((n_bins, n_frames))
    chunk = max(1, (1 << 22) // n_fft)
    for t0 in range(0, n_frames, chunk):
        idx = np.arange(t0, min(n_frames, t0 + chunk))
        starts = idx * hop
        frames = np.stack([padded[s:s + n_fft] for s in starts])
        spectrum = np.fft.rfft(frames, axis=1)
        out[:, idx] = np.abs(spectrum @ kernel).T
    return out


def _db_minmax(mag: np.ndarray, top_db: float) -> np.ndarray:
    peak = mag.max()
    if peak <= 0:
        return np.zeros_like(mag)
    db = 20 * np.log10(np.maximum(mag, peak * 1e-10) / peak)
    db = np.maximum(db, -top_db)
    lo, hi = db.min(), db.max()
    if hi - lo <= 0:
        return np.zeros_like(mag)
    return (db - lo) / (hi - lo)


def _check_clip(clip: AudioClip, cfg: FeatureConfig):
    if clip.sample_rate != SAMPLE_RATE:
        raise ValueError(f"expected audio at {SAMPLE_RATE} Hz, got {clip.sample_rate} Hz")
    if len(clip.samples) < cfg.hop_length:
        raise ValueError(f"audio has {len(clip.samples)} samples, shorter than one "
                         f"analysis window of {cfg.hop_length} samples")


def _transform(clip: AudioClip, cfg: FeatureConfig) -> SpectralFeatures:
    _check_clip(clip, cfg)
    channels = []
    for f_base in cfg.base_frequencies:
        mag = _cqt_magnitude(clip.samples, f_base, cfg.n_bins, cfg.bins_per_octave,
                             cfg.hop_length, SAMPLE_RATE, cfg.sparsity)
        if cfg.normalize:
            mag = _db_minmax(mag, cfg.top_db)
        channels.append(mag)
    magnitudes = np.stack(channels).astype(np.float32)
    return SpectralFeatures(magnitudes, frame_times(magnitudes.shape[-1], cfg), cfg)


def compute_cqt(clip: AudioClip, cfg: FeatureConfig) -> SpectralFeatures:
    """Single-channel CQT (8 octaves, 2 bins per semitone from C1 by default)."""
    if cfg.mode != "cqt":
        raise ValueError("compute_cqt requires a cqt-mode FeatureConfig")
    return _transform(clip, cfg)


def compute_hcqt(clip: AudioClip, cfg: FeatureConfig) -> SpectralFeatures:
    """
    Harmonic CQT: one CQT per harmonic h of E2 (h = 0.5, 1, ..., 5),
    stacked along the channel axis in that order.
    """
    if cfg.mode != "hcqt":
        raise ValueError("compute_hcqt requires an hcqt-mode FeatureConfig")
    return _transform(clip, cfg)


def compute_features(clip: AudioClip, cfg: FeatureConfig) -> SpectralFeatures:
    return compute_hcqt(clip, cfg) if cfg.mode == "hcqt" else compute_cqt(clip, cfg)


def load_audio(path: str | Path) -> AudioClip:
    """Read a WAV/FLAC file, downmix to mono and resample to 22050 Hz."""
    import soundfile

    data, sr = soundfile.read(str(path), dtype="float64", always_2d=True)
    samples = data.mean(axis=1)
    if sr != SAMPLE_RATE:
        g = math.gcd(int(sr), SAMPLE_RATE)
        samples = resample_poly(samples, SAMPLE_RATE // g, int(sr) // g)
    return AudioClip(samples, SAMPLE_RATE)


class FeatureCache:
    """On-disk cache of features, one .npz per (audio content, config)."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    @staticmethod
    def key(clip: AudioClip, cfg: FeatureConfig) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(clip.samples).tobytes())
        h.update(json.dumps(cfg.to_dict(), sort_keys=True).encode())
        return h.hexdigest()[:24]

    def path(self, clip: AudioClip, cfg: FeatureConfig, name: str = "") -> Path:
        prefix = f"{name}_" if name else ""
        return self.root / f"{prefix}{self.key(clip, cfg)}.npz"

    def load(self, clip, cfg, name=""):
        p = self.path(clip, cfg, name)
        if not p.exists():
            return None
        with np.load(p) as z:
            config = FeatureConfig.from_dict(json.loads(str(z["config"])))
            return SpectralFeatures(z["magnitudes"], z["frame_times"], config)

    def get(self, clip: AudioClip, cfg: FeatureConfig, name: str = "") -> SpectralFeatures:
        feats = self.load(clip, cfg, name)
        if feats is None:
            feats = compute_features(clip, cfg)
            np.savez(self.path(clip, cfg, name), magnitudes=feats.magnitudes,
                     frame_times=feats.frame_times,
                     config=json.dumps(cfg.to_dict(), sort_keys=True))
        return feats
