"""Training loop, model selection, cross-validation and inference."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import torch

from . import evaluation as ev
from .dataset import (HOP_SECONDS, GroupingConfig, TablatureTargets, build_targets,
                      player_folds, reference_frame_pitches)
from .decoding import (DEFAULT_THRESHOLD, FrameTablature, TranscriptionResult, attach_contours,
                       decode_notes, decode_notes_clustered, threshold_onsets,
                       threshold_tablature)
from .features import FeatureCache, FeatureConfig, SpectralFeatures, compute_features, load_audio
from .model import ModelConfig, TablatureModel, init_model, windowize
from .notes import StringConfig
from .objectives import LossConfig, compute_losses, deviation_from_logits

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "fretcontour-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    iterations: int = 2500
    batch_size: int = 30
    sequence_frames: int = 200
    learning_rate: float = 5e-4
    lr_halving_period: int = 500
    checkpoint_interval: int = 50
    seed: int = 0
    optimizer: str = "adam"
    device: str = "cpu"
    # ablation flags
    deviation_loss: str = "continuous_bernoulli"
    deviation_head: bool = True
    onset_head: bool = True
    lambda_inh: float = 10.0
    gamma: float = 10.0
    grouping_mode: str = "cluster"
    feature_mode: str = "hcqt"
    dev_mask: str = "activity"
    threshold: float = DEFAULT_THRESHOLD

    def __post_init__(self):
        for name in ("iterations", "batch_size", "sequence_frames", "lr_halving_period",
                     "checkpoint_interval"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.optimizer != "adam":
            raise ValueError("only the adam optimizer is supported")

    def learning_rate_at(self, iteration: int) -> float:
        return self.learning_rate * 2.0 ** (-(iteration // self.lr_halving_period))

    def loss_config(self, r: float = 1.0) -> LossConfig:
        return LossConfig(gamma=self.gamma, lambda_inh=self.lambda_inh,
                          deviation_loss=self.deviation_loss, r=r, dev_mask=self.dev_mask)

    def model_config(self, strings: StringConfig = StringConfig()) -> ModelConfig:
        return ModelConfig.for_features(
            self.feature_mode, n_strings=strings.n_strings,
            n_fret_classes=strings.n_fret_classes,
            heads_enabled={"tablature": True, "deviation": self.deviation_head,
                           "onset": self.onset_head})

    def feature_config(self) -> FeatureConfig:
        return FeatureConfig.for_mode(self.feature_mode)


# Table rows (2)-(8): label -> TrainConfig overrides
ABLATIONS = {
    "full": ("(2) Proposed", {}),
    "mse": ("(3) L_dev -> MSE", {"deviation_loss": "mse"}),
    "no_deviation_head": ("(4) No Deviation Head", {"deviation_head": False}),
    "no_onset_head": ("(5) No Onset Head", {"onset_head": False}),
    "no_inhibition": ("(6) No Inhibition", {"lambda_inh": 0.0}),
    "standard_grouping": ("(7) Standard Grouping", {"grouping_mode": "standard"}),
    "cqt": ("(8) CQT Features", {"feature_mode": "cqt"}),
}


def ablation_config(name: str, base: TrainConfig | None = None) -> TrainConfig:
    if name not in ABLATIONS:
        raise ValueError(f"unknown ablation {name!r}; choose from {sorted(ABLATIONS)}")
    return replace(base or TrainConfig(), **ABLATIONS[name][1])


##################################################
# TRACK DATA                                     #
##################################################


@dataclass
class TrackData:
    track_id: str
    features: np.ndarray           # [C, F, T]
    targets: TablatureTargets      # training targets (grouped, realigned)
    ref_notes: list                # original annotations
    ref_pitches: np.ndarray        # [string, frame] original pitch observations
    frame_times: np.ndarray

    @property
    def n_frames(self):
        return self.features.shape[-1]


def prepare_track(track_id, clip, notes, observations, feature_cfg: FeatureConfig,
                  strings: StringConfig = StringConfig(), grouping_mode: str = "cluster",
                  cache: FeatureCache | None = None, features: SpectralFeatures | None = None):
    if features is None:
        features = cache.get(clip, feature_cfg, track_id) if cache else compute_features(clip, feature_cfg)
    t = features.n_frames
    hop = feature_cfg.hop_length / 22050
    targets = build_targets(notes, observations, t, strings, grouping_mode,
                            GroupingConfig(hop_seconds=hop))
    ref_pitches = reference_frame_pitches(observations, features.frame_times, strings.n_strings)
    return TrackData(track_id, features.magnitudes.astype(np.float16), targets, list(notes),
                     ref_pitches, features.frame_times)


def _target_tensors(targets: TablatureTargets, start: int, stop: int):
    # [S, F, T] -> [T, S, F]
    out = {}
    for name in ("activity", "onsets", "deviation_x", "deviation_mask"):
        arr = getattr(targets, name)[..., start:stop]
        out[name] = torch.from_numpy(np.ascontiguousarray(np.moveaxis(arr, -1, 0))).float()
    return out


def sample_batch(tracks, cfg: TrainConfig, rng: np.random.Generator):
    """
    One contiguous ``sequence_frames`` excerpt per track, converted to context
    windows. Tracks shorter than the excerpt are padded with silent frames whose
    deviation targets are masked out.
    """
    if not tracks:
        raise ValueError("empty training set")
    seq = cfg.sequence_frames
    windows, targets = [], []
    for tr in tracks:
        t = tr.n_frames
        start = int(rng.integers(0, t - seq + 1)) if t > seq else 0
        stop = min(t, start + seq)
        # context frames come from the track itself, replicated at its edges
        lo, hi = max(0, start - 4), min(t, stop + 4)
        chunk = torch.from_numpy(tr.features[..., lo:hi].astype(np.float32))
        chunk = torch.cat([chunk[..., :1].expand(*chunk.shape[:-1], 4 - (start - lo)), chunk,
                           chunk[..., -1:].expand(*chunk.shape[:-1], 4 - (hi - stop))], -1)
        w = chunk.unfold(-1, 9, 1).permute(2, 0, 1, 3)
        tg = _target_tensors(tr.targets, start, stop)
        if stop - start < seq:
            pad = seq - (stop - start)
            w = torch.cat([w, torch.zeros(pad, *w.shape[1:])])
            silence = _target_tensors(TablatureTargets.silence(*tr.targets.activity.shape[:2], pad),
                                      0, pad)
            tg = {k: torch.cat([tg[k], silence[k]]) for k in tg}
        windows.append(w)
        targets.append(tg)
    batch_targets = {k: torch.cat([tg[k] for tg in targets]) for k in targets[0]}
    return torch.cat(windows), batch_targets


def iteration_batches(tracks, cfg: TrainConfig, rng: np.random.Generator):
    """One iteration: every track once, in shuffled batches of ``batch_size``."""
    if not tracks:
        raise ValueError("empty training set")
    order = rng.permutation(len(tracks))
    for i in range(0, len(order), cfg.batch_size):
        yield sample_batch([tracks[j] for j in order[i:i + cfg.batch_size]], cfg, rng)


##################################################
# INFERENCE                                      #
##################################################


@torch.no_grad()
def predict_logits(model: TablatureModel, features, chunk: int = 512) -> dict:
    """Head logits as [T, S, F] numpy arrays (None for disabled heads)."""
    model.eval()
    device = next(model.parameters()).device
    feats = features.magnitudes if isinstance(features, SpectralFeatures) else features
    windows = windowize(np.asarray(feats, dtype=np.float32))
    outs = {}
    for i in range(0, len(windows), chunk):
        res = model(windows[i:i + chunk].to(device))
        for k, v in res.items():
            if v is not None:
                outs.setdefault(k, []).append(v.cpu().double().numpy())
    return {k: np.concatenate(outs[k]) if k in outs else None
            for k in ("tablature", "deviation", "onset")}


def decode_logits(logits: dict, frame_times, strings: StringConfig = StringConfig(),
                  threshold: float = DEFAULT_THRESHOLD) -> TranscriptionResult:
    r = strings.max_deviation_r
    frames = threshold_tablature(logits["tablature"], threshold, logits.get("deviation"), r)
    if logits.get("onset") is not None:
        notes = decode_notes(frames, threshold_onsets(logits["onset"], threshold),
                             frame_times, strings)
    else:
        notes = decode_notes_clustered(frames, frame_times, strings)
    contours = attach_contours(notes, frames, frame_times, strings)
    return TranscriptionResult(notes, contours, frames, np.asarray(frame_times))


def predict_track(model, track: TrackData, strings: StringConfig = StringConfig(),
                  threshold: float = DEFAULT_THRESHOLD) -> TranscriptionResult:
    return decode_logits(predict_logits(model, track.features), track.frame_times, strings,
                         threshold)


def evaluate_tracks(model, tracks, strings: StringConfig = StringConfig(),
                    threshold: float = DEFAULT_THRESHOLD, tolerances=ev.DEFAULT_TOLERANCES):
    per_track = {}
    hop = float(tracks[0].frame_times[1] - tracks[0].frame_times[0]) \
        if tracks and len(tracks[0].frame_times) > 1 else HOP_SECONDS
    for tr in tracks:
        res = predict_track(model, tr, strings, threshold)
        per_track[tr.track_id] = ev.evaluate_track(res.frames, res.notes, tr.ref_notes,
                                                   tr.ref_pitches, strings, tolerances, hop)
    return per_track


def validation_f1(model, tracks, strings: StringConfig = StringConfig(),
                  threshold: float = DEFAULT_THRESHOLD) -> float:
    """Mean frame-level tablature F1 over tracks (model selection criterion)."""
    scores = []
    for tr in tracks:
        logits = predict_logits(model, tr.features)
        frames = threshold_tablature(logits["tablature"], threshold)
        hop = float(tr.frame_times[1] - tr.frame_times[0]) if tr.n_frames > 1 else HOP_SECONDS
        ref = ev.notes_to_frames(tr.ref_notes, tr.n_frames, hop, strings.n_strings)
        scores.append(ev.frame_tablature_prf(frames, ref).f1)
    return float(np.mean(scores))


def training_scores(model, tracks, strings: StringConfig = StringConfig(),
                    threshold: float = DEFAULT_THRESHOLD) -> dict:
    """Frame tablature F1 and masked deviation MAE against the training targets."""
    f1s, errors = [], []
    r = strings.max_deviation_r
    for tr in tracks:
        logits = predict_logits(model, tr.features)
        frames = threshold_tablature(logits["tablature"], threshold, logits.get("deviation"), r)
        ref = FrameTablature.from_targets(tr.targets, r)
        f1s.append(ev.frame_tablature_prf(frames, ref).f1)
        if logits.get("deviation") is not None:
            mask = tr.targets.deviation_mask > 0
            pred = np.moveaxis(deviation_from_logits(logits["deviation"], r), 0, -1)
            errors.append(np.abs(pred - tr.targets.deviation_semitones(r))[mask])
    mae = float(np.concatenate(errors).mean()) if errors else float("nan")
    return {"frame_tablature_f1": float(np.mean(f1s)), "deviation_mae": mae}


##################################################
# CHECKPOINTS                                    #
##################################################


def save_checkpoint(path, model, optimizer, iteration, train_cfg: TrainConfig,
                    strings: StringConfig = StringConfig(), feature_cfg: FeatureConfig | None = None):
    torch.save({
        "header": {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION},
        "model_config": model.cfg.to_dict(),
        "feature_config": (feature_cfg or train_cfg.feature_config()).to_dict(),
        "string_config": asdict(strings),
        "train_config": asdict(train_cfg),
        "model_state": model.state_dict(),
        "optimizer_state": optimizer.state_dict() if optimizer is not None else None,
        "iteration": iteration,
    }, path)


def load_checkpoint(path, map_location="cpu"):
    """Returns (model, checkpoint dict); rejects unknown formats and inconsistent configs."""
    ckpt = torch.load(path, map_location=map_location, weights_only=False)
    header = ckpt.get("header", {}) if isinstance(ckpt, dict) else {}
    if header.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    if header.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {header.get('version')}")
    mcfg = ModelConfig(**ckpt["model_config"])
    fcfg = FeatureConfig.from_dict(ckpt["feature_config"])
    if (fcfg.n_channels, fcfg.n_bins) != (mcfg.in_channels, mcfg.n_bins):
        raise ValueError(f"checkpoint features ({fcfg.n_channels}x{fcfg.n_bins}) do not match "
                         f"the model input ({mcfg.in_channels}x{mcfg.n_bins})")
    model = TablatureModel(mcfg)
    model.load_state_dict(ckpt["model_state"])
    model.eval()
    return model, ckpt


##################################################
# TRAINING                                       #
##################################################


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class FoldResult:
    fold: int
    best_checkpoint: str | None
    best_iteration: int
    history: list = field(default_factory=list)   # [(iteration, validation F1)]
    test_results: dict | None = None
    model: TablatureModel | None = field(default=None, repr=False)

    def to_json(self):
        return {"fold": self.fold, "best_checkpoint": self.best_checkpoint,
                "best_iteration": self.best_iteration, "history": self.history,
                "test_results": ev.results_to_json(self.test_results) if self.test_results else None}


def train_fold(train_tracks, val_tracks, cfg: TrainConfig, out_dir=None, fold: int = 0,
               strings: StringConfig = StringConfig(), feature_cfg: FeatureConfig | None = None,
               test_tracks=None, callback=None) -> FoldResult:
    """
    Train with Adam and a step-halving learning rate, validating every
    ``checkpoint_interval`` iterations and keeping the checkpoint with the best
    validation frame-level tablature F1.
    """
    if not train_tracks:
        raise ValueError("empty training set")
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    device = torch.device(cfg.device)
    model = init_model(cfg.model_config(strings), cfg.seed).to(device)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    loss_cfg = cfg.loss_config(strings.max_deviation_r)

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / "train_log.jsonl" if out_dir else None
    best_path = str(out_dir / "best.pt") if out_dir else None
    best_state, best_f1, best_iter = None, -1.0, -1
    history = []

    for it in range(cfg.iterations):
        lr = cfg.learning_rate_at(it)
        for group in optimizer.param_groups:
            group["lr"] = lr
        model.train()
        sums, n_batches = {}, 0
        for windows, targets in iteration_batches(train_tracks, cfg, rng):
            windows = windows.to(device)
            targets = {k: v.to(device) for k, v in targets.items()}
            losses = compute_losses(model(windows), targets, loss_cfg)
            if not torch.isfinite(losses["total"]):
                if out_dir is not None:
                    save_checkpoint(out_dir / "diverged.pt", model, optimizer, it, cfg, strings,
                                    feature_cfg)
                raise TrainingDiverged(f"non-finite loss at iteration {it}: "
                                       f"{ {k: float(v.detach()) for k, v in losses.items()} }")
            optimizer.zero_grad()
            losses["total"].backward()
            optimizer.step()
            for k, v in losses.items():
                sums[k] = sums.get(k, 0.0) + float(v.detach())
            n_batches += 1

        record = {"iteration": it, "lr": lr, "losses": {k: v / n_batches for k, v in sums.items()}}
        done = it + 1
        if done % cfg.checkpoint_interval == 0 or done == cfg.iterations:
            f1 = validation_f1(model, val_tracks or train_tracks, strings, cfg.threshold)
            history.append((done, f1))
            record["validation"] = {"frame_tablature_f1": f1}
            if f1 > best_f1:
                best_f1, best_iter = f1, done
                best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
                if out_dir is not None:
                    save_checkpoint(best_path, model, optimizer, done, cfg, strings, feature_cfg)
            if out_dir is not None:
                save_checkpoint(out_dir / "latest.pt", model, optimizer, done, cfg, strings,
                                feature_cfg)
        if log_path is not None:
            with open(log_path, "a") as f:
                f.write(json.dumps(record) + "\n")
        if callback is not None:
            callback(model, record)

    model.load_state_dict(best_state)
    result = FoldResult(fold, best_path, best_iter, history, model=model)
    if test_tracks:
        result.test_results = ev.aggregate(list(
            evaluate_tracks(model, test_tracks, strings, cfg.threshold).values()))
    return result


def cross_validate(tracks: dict, cfg: TrainConfig, out_dir=None,
                   strings: StringConfig = StringConfig(), folds=None):
    """
    Six-fold player-split cross-validation over ``tracks`` (id -> TrackData).

    Returns (fold results, aggregate results averaged over folds, 12-column row).
    """
    splits = player_folds(sorted(tracks))
    results = []
    for k, (train, val, test) in enumerate(splits):
        if folds is not None and k not in folds:
            continue
        if not (train and val and test):
            raise ValueError(f"fold {k} is missing data (train={len(train)}, "
                             f"val={len(val)}, test={len(test)})")
        log.info("fold %d: %d train / %d val / %d test", k, len(train), len(val), len(test))
        fold_dir = Path(out_dir) / f"fold_{k}" if out_dir else None
        results.append(train_fold([tracks[t] for t in train], [tracks[t] for t in val], cfg,
                                  fold_dir, k, strings, test_tracks=[tracks[t] for t in test]))
    agg = ev.aggregate([r.test_results for r in results])
    return results, agg, ev.table_row(agg)


##################################################
# TRANSCRIPTION                                  #
##################################################


def transcribe(audio_path, checkpoint, out_path=None, features: SpectralFeatures | None = None,
               threshold: float = DEFAULT_THRESHOLD) -> TranscriptionResult:
    """Audio file -> features -> model -> notes with contours (JSON lines if ``out_path``)."""
    model, ckpt = load_checkpoint(checkpoint) if not isinstance(checkpoint, tuple) else checkpoint
    fcfg = FeatureConfig.from_dict(ckpt["feature_config"])
    strings = StringConfig(**ckpt["string_config"])
    if features is None:
        features = compute_features(load_audio(audio_path), fcfg)
    elif features.config.to_dict() != fcfg.to_dict():
        raise ValueError("supplied features were computed with a different configuration "
                         "than the checkpoint expects")
    result = decode_logits(predict_logits(model, features), features.frame_times, strings, threshold)
    if out_path is not None:
        result.write_jsonl(out_path)
    return result


def config_from_dict(d: dict) -> TrainConfig:
    known = {f.name for f in fields(TrainConfig)}
    unknown = set(d) - known
    if unknown:
        raise ValueError(f"unknown training options {sorted(unknown)}")
    return TrainConfig(**d)


def load_dataset_tracks(dataset, track_ids, cfg: TrainConfig, strings: StringConfig = StringConfig(),
                        cache: FeatureCache | None = None) -> dict:
    """Ingest tracks from a GuitarSet index into TrackData, keyed by track id."""
    fcfg = cfg.feature_config()
    tracks = {}
    for tid in track_ids:
        clip, notes, observations = dataset.load(tid, strings)
        tracks[tid] = prepare_track(tid, clip, notes, observations, fcfg, strings,
                                    cfg.grouping_mode, cache)
    return tracks
