"""Command-line entry point: gen-synth, convert, train, calibrate, eval, detect."""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import evalkit, openset
from .config import ConfigError, ExperimentConfig
from .dataio import (Modality, RecordingFormatError, WindowSet, build_windows, load_csv_recording,
                     load_directory, load_recording, write_recording)
from .model import ABLATIONS, ModelConfig
from .seeding import sub_seed
from .synthgait import generate_dataset
from .training import CheckpointError, load_checkpoint, save_checkpoint, write_history_csv

log = logging.getLogger("osgait")

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_MISSING, EXIT_DIGEST = 0, 1, 2, 3, 4
THREADS_ENV = "OSGAIT_THREADS"


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_ERROR):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# Shared helpers
# ---------------------------------------------------------------------------

def _int_list(text: str) -> tuple[int, ...]:
    try:
        vals = tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma-separated integer list, got {text!r}") from None
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


def _modality(text: str | None, default: int | None) -> int | None:
    """``--modality`` value: None when the flag is absent keeps ``default``."""
    if text is None:
        return default
    return None if text == "all" else int(text)


def load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if getattr(args, "config", None) else ExperimentConfig()
    over = {}
    if getattr(args, "seed", None) is not None:
        over["seed"] = args.seed
    if getattr(args, "ablation", None) is not None:
        over["ablation"] = args.ablation
    if getattr(args, "deterministic", False):
        over["deterministic"] = True
    cfg = replace(cfg, **over)
    ev = {}
    if getattr(args, "k", None) is not None:
        ev["ks"] = args.k
    if getattr(args, "unknown_count", None) is not None:
        ev["unknown_count"] = args.unknown_count
    if getattr(args, "trials", None) is not None:
        ev["trials"] = args.trials
    if getattr(args, "split_by_chunk", False):
        ev["split_by_chunk"] = True
    if getattr(args, "modality", None) is not None:
        ev["modality"] = _modality(args.modality, None)
    if ev:
        cfg = replace(cfg, eval=replace(cfg.eval, **ev))
    if getattr(args, "points", None) is not None:
        cfg = replace(cfg, model=replace(cfg.model, N_p=args.points))
    if getattr(args, "data", None):
        cfg = replace(cfg, data=replace(cfg.data, recordings=str(args.data)))
    cfg.log_resolved()
    return cfg


def load_segments(cfg: ExperimentConfig):
    if cfg.data.recordings:
        root = Path(cfg.data.recordings)
        if not root.is_dir():
            raise CliError(f"recordings directory not found: {root}", EXIT_MISSING)
        segs = load_directory(root)
        if not segs:
            raise CliError(f"no .mmgt recordings in {root}", EXIT_MISSING)
        return segs
    s = cfg.synth
    _, segs = generate_dataset(s.M, s.seed, s.separability, s.duration_s, s.frame_rate_hz, s.modalities)
    return segs


def load_windows(cfg: ExperimentConfig, N_p: int | None = None) -> WindowSet:
    m = cfg.model
    return build_windows(load_segments(cfg), m.N_f, N_p or m.N_p, cfg.data.stride,
                         seed=sub_seed(cfg.seed, "resampling"),
                         center_velocity=cfg.data.center_velocity, dtype=m.dtype)


def protocol_of(cfg: ExperimentConfig, untrained: bool = False) -> evalkit.OpenSetProtocol:
    return evalkit.OpenSetProtocol(
        unknown_count=cfg.eval.unknown_count, ks=cfg.eval.ks, model=cfg.resolved_model(),
        train=replace(cfg.train, precision=cfg.model.dtype), split_by_chunk=cfg.eval.split_by_chunk,
        modality=cfg.eval.modality, untrained=untrained)


def _model_key(mc: ModelConfig) -> dict:
    d = mc.to_dict()
    d.pop("M")          # set by training to the number of known subjects
    d.pop("dtype")
    return d


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


def _file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _require(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise CliError(f"{what} not found: {p}", EXIT_MISSING)
    return p


def _out_dir(path) -> Path:
    p = Path(path)
    try:
        p.mkdir(parents=True, exist_ok=True)
        probe = p / ".write-test"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise CliError(f"output directory not writable: {p} ({exc.strerror})", EXIT_ERROR) from None
    return p


def _load_run(checkpoint: Path):
    """Checkpoint, its run record, and the experiment config stored with it."""
    run_path = checkpoint.with_name("run.json")
    _require(run_path, "run record (run.json next to the checkpoint)")
    run = json.loads(run_path.read_text())
    if run["checkpoint_sha256"] != _file_digest(checkpoint):
        raise CliError(f"checkpoint digest mismatch: {checkpoint} does not match {run_path}", EXIT_DIGEST)
    try:
        ckpt = load_checkpoint(checkpoint)
    except CheckpointError as exc:
        raise CliError(f"cannot read checkpoint {checkpoint}: {exc}", EXIT_ERROR) from None
    return ckpt, run, ExperimentConfig.from_dict(run["config"])


def _check_model_digest(cfg: ExperimentConfig, ckpt):
    want, have = _digest(_model_key(cfg.resolved_model())), _digest(_model_key(ckpt.model_config))
    if want != have:
        raise CliError(f"model config digest mismatch: config {want[:12]} vs checkpoint {have[:12]}; "
                       "pass the config the checkpoint was trained with", EXIT_DIGEST)


def _split_from_run(windows: WindowSet, run: dict) -> evalkit.TrialSplit:
    from .dataio import DatasetPartition
    s = run["split"]
    part = DatasetPartition(tuple(s["known"]), tuple(s["unknown"]), s["calibration_subject"], s["partition_seed"],
                            tuple(s["train"]), tuple(s["val"]), tuple(s["test"]))
    known = windows.subset(np.flatnonzero(np.isin(windows.labels, part.known)))
    return evalkit.TrialSplit(part, known, np.array(s["train"], dtype=int), np.array(s["val"], dtype=int),
                              np.array(s["test"], dtype=int))


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_gen_synth(args) -> int:
    cfg = load_config(args)
    out = _out_dir(args.out)
    s = cfg.synth
    profiles, segs = generate_dataset(s.M, s.seed, s.separability, s.duration_s, s.frame_rate_hz, s.modalities)
    for seg in segs:
        write_recording(out / f"subject{seg.subject_id:02d}_mod{int(seg.modality)}.mmgt", seg)
    (out / "profiles.json").write_text(json.dumps([p.to_dict() for p in profiles], indent=2))
    print(f"{'id':>3} {'height':>7} {'speed':>6} {'f_gait':>6} {'arm':>5} {'leg':>5} {'pts':>5}")
    for p in profiles:
        print(f"{p.subject_id:>3} {p.height:7.2f} {p.torso_speed_mean:6.2f} {p.gait_frequency:6.2f} "
              f"{p.arm_swing_amplitude:5.2f} {p.leg_swing_amplitude:5.2f} {p.point_rate_mean:5.1f}")
    print(f"wrote {len(segs)} recordings to {out}")
    return EXIT_OK


def cmd_convert(args) -> int:
    src = _require(args.input, "input CSV")
    try:
        seg = load_csv_recording(src, args.subject, args.recording_modality, args.rate)
    except (RecordingFormatError, ValueError) as exc:
        raise CliError(f"{src}: {exc}", EXIT_CONFIG) from None
    out = Path(args.out)
    _out_dir(out.parent)
    write_recording(out, seg)
    print(f"wrote {out} ({len(seg)} frames, sha256 {_file_digest(out)[:16]})")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args)
    out = _out_dir(args.out)
    windows = load_windows(cfg)
    proto = protocol_of(cfg)
    seed = sub_seed(cfg.seed, "trial", 0)     # same chain as trial 0 of `eval`
    split = evalkit.prepare_trial(windows, proto, seed)
    _, _, ckpt = evalkit.fit_trial(split, proto, seed)
    ckpt_path = out / "checkpoint.pcaa"
    sha = save_checkpoint(ckpt_path, ckpt)
    write_history_csv(out / "history.csv", ckpt.history)
    run = {"config": cfg.to_dict(), "config_digest": cfg.digest, "checkpoint_sha256": sha,
           "trial_seed": seed, "split": split.to_dict()}
    (out / "run.json").write_text(json.dumps(run, indent=2))
    print(f"checkpoint {ckpt_path} sha256 {sha}")
    return EXIT_OK


def cmd_calibrate(args) -> int:
    ckpt_path = _require(args.checkpoint, "checkpoint")
    ckpt, run, cfg = _load_run(ckpt_path)
    if args.config:
        _check_model_digest(load_config(args), ckpt)
    k = args.k[0] if args.k else cfg.detector.k
    windows = load_windows(cfg)
    split = _split_from_run(windows, run)
    model = ckpt.build_model()
    prior = ckpt.scoring_prior(model)
    tau = evalkit.calibrate_trial(windows, split, model, prior)
    out = Path(args.out) if args.out else ckpt_path.with_name("detector.json")
    _out_dir(out.parent)
    openset.DetectorConfig(tau, k).save(out, run["checkpoint_sha256"])
    print(f"tau={tau!r} k={k} -> {out}")
    return EXIT_OK


def _load_detector(path, ckpt_sha: str) -> openset.DetectorConfig:
    det, digest = openset.DetectorConfig.load(_require(path, "detector file"))
    if digest and digest != ckpt_sha:
        raise CliError(f"detector {path} was calibrated for a different checkpoint", EXIT_DIGEST)
    return det


def cmd_eval(args) -> int:
    out = _out_dir(args.out)
    if args.checkpoint:
        ckpt_path = _require(args.checkpoint, "checkpoint")
        ckpt, run, cfg = _load_run(ckpt_path)
        if args.config:
            _check_model_digest(load_config(args), ckpt)
        det = _load_detector(args.detector or ckpt_path.with_name("detector.json"), run["checkpoint_sha256"])
        ks = args.k or cfg.eval.ks
        modality = _modality(args.modality, cfg.eval.modality)
        windows = load_windows(cfg)
        split = _split_from_run(windows, run)
        model = ckpt.build_model()
        reports = evalkit.evaluate_trial(windows, split, model, ckpt.scoring_prior(model), det.tau, ks,
                                         0, run["trial_seed"], modality)
        report = evalkit.ExperimentReport(reports, {"run": run["config_digest"], "tau": det.tau,
                                                    "ks": list(ks), "modality": modality})
    else:
        cfg = load_config(args)
        if cfg.eval.points:
            sweep = evalkit.points_sweep(lambda n_p: load_windows(cfg, n_p), cfg.eval.points,
                                         protocol_of(cfg), cfg.eval.trials, cfg.seed)
            for n_p, rep in sweep.items():
                rep.write_json(out / f"report_Np{n_p}.json")
                rep.write_csv(out / f"results_Np{n_p}.csv")
            evalkit.write_trend_csv(out / "points_sweep.csv", evalkit.trend_rows(sweep), key="N_p")
            print(f"wrote sweep over N_p={list(cfg.eval.points)} to {out}")
            return EXIT_OK
        windows = load_windows(cfg)
        report = evalkit.run_openset_experiment(windows, protocol_of(cfg), cfg.eval.trials, cfg.seed)
        report.config["experiment"] = cfg.to_dict()
    report.write_json(out / "report.json")
    report.write_csv(out / "results.csv")
    for r in report.reports:
        np.savetxt(out / f"confusion_trial{r.trial}_k{r.k}.csv", np.array(r.confusion), fmt="%d", delimiter=",")
    for row in report.summary:
        print(f"k={row['k']} openness={row['openness']:.4f} macro-F1={row['mean_f1']:.4f} "
              f"± {row['dispersion']:.4f} ({row['n_trials']} trials)")
    print(f"report digest {report.digest}")
    return EXIT_OK


def cmd_detect(args) -> int:
    ckpt_path = _require(args.checkpoint, "checkpoint")
    ckpt, run, cfg = _load_run(ckpt_path)
    det = _load_detector(args.detector or ckpt_path.with_name("detector.json"), run["checkpoint_sha256"])
    k = args.k[0] if args.k else det.k
    rec = _require(args.recording, "recording")
    try:
        seg = load_recording(rec)
    except RecordingFormatError as exc:
        raise CliError(f"{rec}: {exc}", EXIT_CONFIG) from None
    mc = ckpt.model_config
    ws = build_windows([seg], mc.N_f, mc.N_p, cfg.data.stride, seed=sub_seed(cfg.seed, "resampling"),
                       center_velocity=cfg.data.center_velocity, dtype=mc.dtype)
    order = ws.time_order()[args.start:args.start + k]
    if len(order) < k:
        raise CliError(f"recording yields {len(ws)} windows; need {k} from index {args.start}", EXIT_CONFIG)
    model = ckpt.build_model()
    outcome = openset.detect(ws.data[order], model, ckpt.scoring_prior(model), replace(det, k=k))
    print(outcome)
    for s, p in zip(outcome.scores, outcome.predictions):
        print(f"  score={s:.4f} predicted={int(p)} {'above' if s > det.tau else 'below'} tau")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="experiment JSON config")
    common.add_argument("--seed", type=int, help="global seed (overrides config)")
    common.add_argument("--deterministic", action="store_true", help="single-threaded BLAS")
    common.add_argument("-v", "--verbose", action="store_true")

    exp = argparse.ArgumentParser(add_help=False)
    exp.add_argument("--data", type=Path, help="directory of .mmgt recordings (default: synthesize)")
    exp.add_argument("--k", type=_int_list, help="window counts, e.g. 1,2,4,6")
    exp.add_argument("--unknown-count", type=int, help="evaluated unknown subjects")
    exp.add_argument("--trials", type=int)
    exp.add_argument("--split-by-chunk", action="store_true")
    exp.add_argument("--points", type=int, help="N_p")
    exp.add_argument("--modality", choices=("0", "1", "2", "all"))
    exp.add_argument("--ablation", choices=ABLATIONS)

    p = argparse.ArgumentParser(prog="osgait", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-synth", parents=[common], help="write synthetic recordings")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_synth)

    c = sub.add_parser("convert", parents=[common], help="CSV frame,x,y,z,v -> .mmgt")
    c.add_argument("input")
    c.add_argument("--out", required=True)
    c.add_argument("--subject", type=int, required=True)
    c.add_argument("--recording-modality", type=int, choices=[m.value for m in Modality], default=0)
    c.add_argument("--rate", type=float, default=10.0)
    c.set_defaults(func=cmd_convert)

    t = sub.add_parser("train", parents=[common, exp], help="train on the known subjects of one partition")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    cal = sub.add_parser("calibrate", parents=[common, exp], help="fit tau from the calibration subject")
    cal.add_argument("--checkpoint", required=True)
    cal.add_argument("--out")
    cal.set_defaults(func=cmd_calibrate)

    e = sub.add_parser("eval", parents=[common, exp],
                       help="evaluate a checkpoint, or run the full multi-trial experiment")
    e.add_argument("--checkpoint")
    e.add_argument("--detector")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    d = sub.add_parser("detect", parents=[common], help="Known(id)/Unknown verdict on a recording")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--detector")
    d.add_argument("--recording", required=True)
    d.add_argument("--k", type=_int_list)
    d.add_argument("--start", type=int, default=0, help="first window (time order)")
    d.set_defaults(func=cmd_detect)
    return p


def _limit_threads(deterministic: bool):
    n = os.environ.get(THREADS_ENV)
    limit = 1 if deterministic else (int(n) if n else None)
    if limit is None:
        return None
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=limit)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _limit_threads(args.deterministic)
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except evalkit.TrialError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
