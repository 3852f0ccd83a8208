"""Command-line pipeline: synth, augment, extract, train-gmm, train-nn, score, fuse, evaluate.

Exit status is 0 on success, 1 on a usage error and 2 on a data error.
``REPLAYGUARD_LOG`` (error, info, debug) sets the log level.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import _accel
from .audio_io import AudioFormatError, augment_manifest, parse_factors
from .config import ConfigError, RunConfig, float_list
from .evaluation import (
    ScoreFileError,
    evaluate,
    fuse_scores,
    load_tdcf_config,
    read_scores,
    read_trials,
    write_report,
    write_scores,
)
from .features import FEATURE_KINDS, extract_manifest, load_feature_set, read_index
from .gmm import ModelFileError, fit_gmm, gmm_llr_score, load_gmm, save_gmm
from .manifest import ManifestError, read_manifest
from .nnet.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .nnet.model import PRESETS, build_model, score_utterance
from .nnet.train import TrainConfig, train
from .replay_sim import CorpusConfig, generate_corpus
from .spectral import FeatureFileError

log = logging.getLogger("replayguard")

DATA_ERRORS = (
    FileNotFoundError,
    AudioFormatError,
    ManifestError,
    FeatureFileError,
    ModelFileError,
    CheckpointError,
    ScoreFileError,
    ConfigError,
    ValueError,
    OSError,
    FloatingPointError,
)

RUN_CONFIG_NAME = "run.cfg"


class UsageError(Exception):
    pass


class _StageFilter(logging.Filter):
    def __init__(self, stage: str):
        super().__init__()
        self.stage = stage

    def filter(self, record):
        record.stage = self.stage
        return True


def setup_logging(stage: str) -> None:
    level = os.environ.get("REPLAYGUARD_LOG", "info").strip().upper()
    if level not in ("ERROR", "INFO", "DEBUG", "WARNING"):
        level = "INFO"
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(asctime)s [%(stage)s] %(levelname)s %(message)s"))
    handler.addFilter(_StageFilter(stage))
    log.handlers[:] = [handler]
    log.setLevel(level)
    log.propagate = False


def _resolve(args, overrides: dict) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    cfg.update({k: v for k, v in overrides.items() if v is not None}, "command line")
    return cfg


def _config_beside(path) -> Path:
    """Where the resolved config for a single-file output goes."""
    path = Path(path)
    return path.with_name(path.name + ".cfg")


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> None:
    cfg = _resolve(args, {
        "seed": args.seed, "n_bonafide": args.n_bonafide, "n_dev": args.n_dev, "n_eval": args.n_eval,
        "devices": args.devices, "min_duration_s": args.min_duration, "max_duration_s": args.max_duration,
        "jobs": args.jobs,
    })
    counts = {"train": cfg["n_bonafide"], "dev": cfg["n_dev"], "eval": cfg["n_eval"]}
    counts = {k: v for k, v in counts.items() if v > 0}
    devices = tuple(d.strip() for d in cfg["devices"].split(",") if d.strip())
    corpus = CorpusConfig(counts, devices, cfg["min_duration_s"], cfg["max_duration_s"], cfg["sample_rate"], cfg["seed"])
    out = Path(args.out)
    manifests = generate_corpus(out, corpus, cfg["jobs"])
    cfg.write(out / RUN_CONFIG_NAME)
    for split, m in manifests.items():
        log.info("wrote %s (%d entries)", out / split / "manifest.tsv", len(m))


def cmd_augment(args) -> None:
    cfg = _resolve(args, {"speed_factors": args.factors, "jobs": args.jobs})
    manifest = read_manifest(args.manifest)
    factors = parse_factors(cfg["speed_factors"])
    out = Path(args.out)
    m = augment_manifest(manifest, out, factors, cfg["jobs"])
    m.write(out / "manifest.tsv")
    m.write_trials(out / "trials.tsv")
    cfg.write(out / RUN_CONFIG_NAME)
    log.info("%d entries -> %d with factors %s", len(manifest), len(m), factors)


def cmd_extract(args) -> None:
    cfg = _resolve(args, {"feature": args.feature, "jobs": args.jobs})
    if cfg["feature"] not in FEATURE_KINDS:
        raise UsageError(f"unknown feature {cfg['feature']!r}; expected one of {FEATURE_KINDS}")
    manifest = read_manifest(args.manifest)
    out = Path(args.out)
    t = time.perf_counter()
    extract_manifest(manifest, cfg["feature"], out, cfg, cfg["jobs"])
    cfg.write(out / RUN_CONFIG_NAME)
    log.info("%s features for %d utterances in %.1f s", cfg["feature"], len(manifest), time.perf_counter() - t)


def _feature_kind_of(features_dir) -> str | None:
    p = Path(features_dir)
    p = p if p.is_dir() else p.parent
    if (p / RUN_CONFIG_NAME).exists():
        return RunConfig.load(p / RUN_CONFIG_NAME)["feature"]
    return None


def _check_feature(args) -> None:
    if getattr(args, "feature", None):
        found = _feature_kind_of(args.features)
        if found is not None and found != args.feature:
            raise ValueError(f"{args.features} holds {found} features, not {args.feature}")


def cmd_train_gmm(args) -> None:
    cfg = _resolve(args, {"seed": args.seed, "gmm_components": args.components, "gmm_iters": args.iters,
                              "deterministic": args.deterministic})
    _check_feature(args)
    _, feats, _ = load_feature_set(args.features, args.cls)
    if not feats:
        raise ValueError(f"no {args.cls} utterances in {args.features}")
    X = np.concatenate([f[0] for f in feats], axis=1).astype(np.float64)
    log.info("fitting %d-component GMM on %d %s frames of dimension %d", cfg["gmm_components"], X.shape[1], args.cls, X.shape[0])
    t = time.perf_counter()
    with _accel.blas_threads(cfg["deterministic"]):
        m = fit_gmm(X, cfg["gmm_components"], cfg["gmm_iters"], cfg["seed"], max_frames=cfg["gmm_max_frames"] or None)
    save_gmm(m, args.out)
    cfg.write(_config_beside(args.out))
    log.info("saved %s in %.1f s", args.out, time.perf_counter() - t)


def cmd_train_nn(args) -> None:
    cfg = _resolve(args, {
        "seed": args.seed, "preset": args.preset, "epochs": args.epochs, "batch_size": args.batch_size,
        "deterministic": args.deterministic,
    })
    _check_feature(args)
    if cfg["preset"] not in PRESETS:
        raise UsageError(f"unknown preset {cfg['preset']!r}; expected one of {sorted(PRESETS)}")
    _, feats, labels = load_feature_set(args.features)
    if len(set(labels.tolist())) < 2:
        raise ValueError("training needs both bonafide and spoof utterances")
    tcfg = TrainConfig(
        batch_size=cfg["batch_size"], min_frames=cfg["min_frames"], max_frames=cfg["max_frames"],
        lr_schedule=float_list(cfg["lr_schedule"]), momentum=cfg["momentum"], weight_decay=cfg["weight_decay"],
        plateau_patience=cfg["plateau_patience"], plateau_rel_tol=cfg["plateau_rel_tol"],
        epochs=cfg["epochs"], seed=cfg["seed"],
    )
    m = build_model(feats[0].shape[0], cfg["seed"], cfg["preset"])
    log.info("%s preset, %d parameters, %d utterances, backend %s", cfg["preset"], m.n_parameters(), len(feats), _accel.backend())
    with _accel.blas_threads(cfg["deterministic"]):
        curve = train(m, (feats, labels), tcfg)
    save_checkpoint(m, args.out)
    Path(str(args.out) + ".loss.tsv").write_text("".join(f"{i + 1}\t{v!r}\n" for i, v in enumerate(curve)))
    cfg.write(_config_beside(args.out))
    log.info("saved %s", args.out)


def cmd_score(args) -> None:
    cfg = _resolve(args, {"score_kind": args.score_kind, "deterministic": args.deterministic})
    index = read_index(args.features)
    ids, feats, _ = load_feature_set(args.features)
    with open(args.model, "rb") as f:
        magic = f.read(4)
    if magic == b"AGMM":
        if not args.spoof_model:
            raise UsageError("GMM scoring needs --spoof-model")
        bona, spoof = load_gmm(args.model), load_gmm(args.spoof_model)
        score_one = lambda x: gmm_llr_score(bona, spoof, x)  # noqa: E731
    elif magic == b"ARSN":
        m = load_checkpoint(args.model)
        score_one = lambda x: score_utterance(m, x, cfg["score_kind"])  # noqa: E731
    else:
        raise ValueError(f"{args.model}: unrecognised model file")
    with _accel.blas_threads(cfg["deterministic"]):
        scores = {i: score_one(x) for i, x in zip(ids, feats)}
    write_scores(scores, args.out)
    cfg.write(_config_beside(args.out))
    log.info("scored %d utterances from %s", len(scores), index.root)


def cmd_fuse(args) -> None:
    cfg = _resolve(args, {})
    fused = fuse_scores([read_scores(p) for p in args.scores])
    write_scores(fused, args.out)
    cfg.write(_config_beside(args.out))
    log.info("fused %d systems over %d utterances", len(args.scores), len(fused))


def cmd_evaluate(args) -> None:
    cfg = _resolve(args, {"tdcf_config": args.tdcf_config})
    tdcf = load_tdcf_config(cfg["tdcf_config"] or None)
    report = evaluate(read_scores(args.scores), read_trials(args.trials), tdcf)
    print(f"EER(%) {100 * report['eer']:.4f}")
    print(f"min-tDCF {report['min_tdcf']:.4f}")
    if report["polarity_suspect"]:
        log.warning("EER above 50%%: scores may have inverted polarity")
    out = Path(args.report) if args.report else Path(str(args.scores) + ".report.json")
    write_report(report, out)
    cfg.write(_config_beside(out))
    log.info("report written to %s", out)


# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="replayguard", description="Replay-spoofing countermeasure toolkit.")
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="key = value run configuration file")
        sp.set_defaults(func=fn)
        return sp

    sp = add("synth", cmd_synth, "generate a synthetic replay corpus")
    sp.add_argument("--out", required=True)
    sp.add_argument("--n-bonafide", type=int, help="bona-fide utterances in the train split")
    sp.add_argument("--n-dev", type=int)
    sp.add_argument("--n-eval", type=int)
    sp.add_argument("--devices", help="comma-separated device profiles (small,mid,hifi)")
    sp.add_argument("--min-duration", type=float)
    sp.add_argument("--max-duration", type=float)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--jobs", type=int)

    sp = add("augment", cmd_augment, "speed-perturb every manifest entry")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--factors", help="comma-separated speed factors, default 0.9,1.0,1.1")
    sp.add_argument("--jobs", type=int)

    sp = add("extract", cmd_extract, "extract features for a manifest")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--feature", choices=FEATURE_KINDS)
    sp.add_argument("--out", required=True)
    sp.add_argument("--jobs", type=int)

    sp = add("train-gmm", cmd_train_gmm, "fit a GMM to one class of a feature set")
    sp.add_argument("--features", required=True, help="feature directory or its index")
    sp.add_argument("--feature", choices=FEATURE_KINDS, help="expected feature kind (checked)")
    sp.add_argument("--class", dest="cls", required=True, choices=("bonafide", "spoof"))
    sp.add_argument("--out", required=True)
    sp.add_argument("--components", type=int)
    sp.add_argument("--iters", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--deterministic", action=argparse.BooleanOptionalAction, help="single-threaded BLAS for bit-identical reruns")

    sp = add("train-nn", cmd_train_nn, "train the ResNet classifier")
    sp.add_argument("--features", required=True)
    sp.add_argument("--feature", choices=FEATURE_KINDS, help="expected feature kind (checked)")
    sp.add_argument("--out", required=True)
    sp.add_argument("--preset", choices=sorted(PRESETS))
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--deterministic", action=argparse.BooleanOptionalAction, help="single-threaded BLAS for bit-identical reruns")

    sp = add("score", cmd_score, "score a feature set with a trained model")
    sp.add_argument("--model", required=True, help="ARSN checkpoint or bona-fide AGMM model")
    sp.add_argument("--spoof-model", help="spoof AGMM model (GMM scoring)")
    sp.add_argument("--features", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--score-kind", choices=("logit", "logsoftmax", "softmax"))
    sp.add_argument("--deterministic", action=argparse.BooleanOptionalAction, help="single-threaded BLAS for bit-identical reruns")

    sp = add("fuse", cmd_fuse, "average score files")
    sp.add_argument("scores", nargs="+")
    sp.add_argument("--out", required=True)

    sp = add("evaluate", cmd_evaluate, "EER and min-tDCF of a score file")
    sp.add_argument("--scores", required=True)
    sp.add_argument("--trials", required=True)
    sp.add_argument("--tdcf-config")
    sp.add_argument("--report", help="JSON report path (default: <scores>.report.json)")
    return p


def run_command(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"replayguard: error: {e}", file=sys.stderr)
        return 1
    except SystemExit as e:  # --help
        return 0 if e.code in (0, None) else 1
    setup_logging(args.command)
    try:
        args.func(args)
    except UsageError as e:
        log.error("%s", e)
        return 1
    except DATA_ERRORS as e:
        log.error("%s", e)
        return 2
    return 0


def main(argv=None) -> int:
    return run_command(sys.argv[1:] if argv is None else argv)


if __name__ == "__main__":
    sys.exit(main())
