"""
Command-line interface.

    fretcontour [--config FILE] [--set section.key=value ...] COMMAND ...

Commands: synth, features, train, crossval, transcribe, evaluate, plot.
The dataset root defaults to $GUITARSET_ROOT.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
import soundfile
import yaml

from . import evaluation as ev
from .dataset import GuitarSet, demo_fixture_specs, synthesize_fixture, write_jams
from .decoding import save_frame_grid
from .features import SAMPLE_RATE, FeatureCache
from .notes import StringConfig
from .plotting import plot_tolerance_curves
from .training import (ABLATIONS, ablation_config, config_from_dict, cross_validate,
                       evaluate_tracks, load_checkpoint, load_dataset_tracks, player_folds,
                       train_fold, transcribe)

log = logging.getLogger("fretcontour")

LOSS_KEYS = ("gamma", "lambda_inh", "deviation_loss", "dev_mask")


def _parse_value(text):
    return yaml.safe_load(text)


def load_config(path=None, overrides=()):
    """
    Read a YAML config with ``train``, ``loss``, ``model`` and ``strings`` sections
    and apply ``section.key=value`` overrides. Returns (TrainConfig, StringConfig).
    """
    raw = {}
    if path is not None:
        with open(path) as f:
            raw = yaml.safe_load(f) or {}
    for item in overrides:
        key, _, value = item.partition("=")
        if "." not in key or not _:
            raise ValueError(f"override {item!r} must look like section.key=value")
        section, name = key.split(".", 1)
        raw.setdefault(section, {})[name] = _parse_value(value)

    unknown = set(raw) - {"train", "loss", "model", "strings"}
    if unknown:
        raise ValueError(f"unknown config sections {sorted(unknown)}")
    train = dict(raw.get("train", {}))
    for k, v in raw.get("loss", {}).items():
        if k not in LOSS_KEYS:
            raise ValueError(f"unknown loss option {k!r}")
        train[k] = v
    heads = raw.get("model", {}).get("heads_enabled", {})
    if "deviation" in heads:
        train["deviation_head"] = bool(heads["deviation"])
    if "onset" in heads:
        train["onset_head"] = bool(heads["onset"])
    return config_from_dict(train), StringConfig(**raw.get("strings", {}))


def _dataset(args):
    return GuitarSet(args.root)


def _cache(args):
    return FeatureCache(args.cache) if getattr(args, "cache", None) else None


def cmd_synth(args, cfg, strings):
    """Write a small GuitarSet-layout dataset of synthetic recordings."""
    root = Path(args.out)
    (root / "annotation").mkdir(parents=True, exist_ok=True)
    (root / "audio_mono-mic").mkdir(parents=True, exist_ok=True)
    specs = demo_fixture_specs()
    rng = np.random.default_rng(args.seed)
    for player in range(6):
        for k in range(args.per_player):
            base = specs[(player + k) % len(specs)]
            shift = float(rng.uniform(0, 0.2))
            shifted = [type(s)(**{**asdict(s), "onset": s.onset + shift, "offset": s.offset + shift})
                       for s in base]
            clip, notes, obs = synthesize_fixture(shifted, strings, duration=args.duration)
            tid = f"{player:02d}_Synth{k}-100-C_comp"
            write_jams(root / "annotation" / f"{tid}.jams", notes, obs, clip.duration, strings)
            soundfile.write(root / "audio_mono-mic" / f"{tid}_mic.wav", clip.samples, SAMPLE_RATE)
    print(f"wrote {6 * args.per_player} tracks to {root}")


def cmd_features(args, cfg, strings):
    gs = _dataset(args)
    cache = FeatureCache(args.cache)
    fcfg = cfg.feature_config()
    for tid in gs.track_ids():
        clip, _, _ = gs.load(tid, strings)
        cache.get(clip, fcfg, tid)
        log.info("cached features for %s", tid)
    print(f"features cached in {args.cache}")


def _write_fold(out, result):
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "fold_result.json", "w") as f:
        json.dump(result.to_json(), f, indent=2)


def cmd_train(args, cfg, strings):
    gs = _dataset(args)
    train, val, test = player_folds(gs.track_ids())[args.fold]
    tracks = load_dataset_tracks(gs, train + val + test, cfg, strings, _cache(args))
    out = Path(args.out)
    result = train_fold([tracks[t] for t in train], [tracks[t] for t in val], cfg, out, args.fold,
                        strings, test_tracks=[tracks[t] for t in test])
    _write_fold(out, result)
    print(json.dumps(ev.table_row(result.test_results)))


def cmd_crossval(args, cfg, strings):
    if args.ablation:
        cfg = ablation_config(args.ablation, cfg)
    gs = _dataset(args)
    tracks = load_dataset_tracks(gs, gs.track_ids(), cfg, strings, _cache(args))
    out = Path(args.out)
    folds = [int(k) for k in args.folds.split(",")] if args.folds else None
    results, agg, row = cross_validate(tracks, cfg, out, strings, folds)
    for r in results:
        _write_fold(out / f"fold_{r.fold}", r)
    label = ABLATIONS[args.ablation][0] if args.ablation else "custom"
    ev.write_summary_json(out / "summary.json", agg, {"label": label, "config": asdict(cfg)})
    with open(out / "table_row.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["experiment", *row])
        w.writeheader()
        w.writerow({"experiment": label, **row})
    print(json.dumps({"experiment": label, **row}))


def cmd_transcribe(args, cfg, strings):
    model, ckpt = load_checkpoint(args.checkpoint)
    result = transcribe(args.audio, (model, ckpt), args.out)
    if args.grid:
        save_frame_grid(args.grid, result.frames, result.frame_times,
                        ckpt["string_config"]["max_deviation_r"])
    print(f"{len(result.notes)} notes written to {args.out}")


def cmd_evaluate(args, cfg, strings):
    model, ckpt = load_checkpoint(args.checkpoint)
    cfg = config_from_dict(ckpt["train_config"])
    strings = StringConfig(**ckpt["string_config"])
    gs = _dataset(args)
    if args.tracks:
        ids = args.tracks.split(",")
    elif args.fold is not None:
        ids = player_folds(gs.track_ids())[args.fold][2]
    else:
        ids = gs.track_ids()
    tracks = load_dataset_tracks(gs, ids, cfg, strings, _cache(args))
    per_track = evaluate_tracks(model, list(tracks.values()), strings, cfg.threshold)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ev.write_metrics_csv(out / "metrics.csv", per_track)
    agg = ev.aggregate(list(per_track.values()))
    ev.write_summary_json(out / "summary.json", agg, {"label": args.label or Path(args.checkpoint).stem})
    print(json.dumps(ev.table_row(agg)))


def cmd_plot(args, cfg, strings):
    sweeps = {}
    for i, path in enumerate(args.summaries):
        with open(path) as f:
            payload = json.load(f)
        results = ev.results_from_json(payload["results"])
        label = args.labels[i] if args.labels and i < len(args.labels) else \
            payload.get("label", Path(path).stem)
        sweeps[label] = (results["mpe_dependent"], results["mpe_agnostic"])
    plot_tolerance_curves(sweeps, args.out)
    print(f"plot written to {args.out}")


def build_parser():
    p = argparse.ArgumentParser(prog="fretcontour", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--config", help="YAML configuration file")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override a configuration value")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic GuitarSet-layout dataset")
    s.add_argument("out")
    s.add_argument("--per-player", type=int, default=1)
    s.add_argument("--duration", type=float, default=4.6)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    def data_args(sp):
        sp.add_argument("--root", help="dataset root (default $GUITARSET_ROOT)")
        sp.add_argument("--cache", help="feature cache directory")

    s = sub.add_parser("features", help="extract and cache features")
    data_args(s)
    s.set_defaults(func=cmd_features)

    s = sub.add_parser("train", help="train a single fold")
    data_args(s)
    s.add_argument("--fold", type=int, required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("crossval", help="six-fold cross-validation")
    data_args(s)
    s.add_argument("--out", required=True)
    s.add_argument("--ablation", choices=sorted(ABLATIONS))
    s.add_argument("--folds", help="comma-separated subset of folds")
    s.set_defaults(func=cmd_crossval)

    s = sub.add_parser("transcribe", help="transcribe an audio file")
    s.add_argument("audio")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--out", required=True, help="JSON-lines output")
    s.add_argument("--grid", help="optional binary frame-grid output")
    s.set_defaults(func=cmd_transcribe)

    s = sub.add_parser("evaluate", help="evaluate a checkpoint on dataset tracks")
    data_args(s)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--fold", type=int, help="evaluate the test split of this fold")
    s.add_argument("--tracks", help="comma-separated track ids")
    s.add_argument("--label")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("plot", help="plot tolerance curves from summary JSON files")
    s.add_argument("summaries", nargs="+")
    s.add_argument("--labels", nargs="*")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_plot)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg, strings = load_config(args.config, args.set)
        args.func(args, cfg, strings)
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
