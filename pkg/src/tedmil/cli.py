"""Command-line entry point: synth, train, eval, score, gradcheck, ablate.

Configuration is an INI file with sections ``[run]``, ``[network]``,
``[train]``, ``[loss]`` and ``[synthetic]``; command-line flags override it.
Outputs go to ``--out`` or, if omitted, to ``$TEDMIL_OUT/<subcommand>``
(``./tedmil_out/<subcommand>`` when the variable is unset).

Exit codes: 0 success, 1 validation error, 2 runtime or numeric failure.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import rng as rngmod
from .data import SyntheticSpec, generate_synthetic, load_bags, load_feature_file, load_manifest, load_annotations
from .errors import ContractError, FormatError, NumericError, ShapeError, ValidationError
from .evaluation import expand_scores, score_bags, summarize, write_report, evaluate
from .loss import LossConfig
from .network import NetworkConfig, init_params, load_checkpoint, score_video
from .trainer import TrainConfig, TrainingSet, gradcheck, load_state, save_state, train, TrainState

log = logging.getLogger("tedmil")

ENV_OUT = "TEDMIL_OUT"
CHECKPOINT_NAME = "model.ckpt"
ABLATION_KERNELS = (2, 4, 6, 8, 16)
ABLATION_VARIANTS = ("mean_distance", "max_hinge", "max_hinge_avg_mapping")

# network settings of the synthetic acceptance runs (input_dim comes from the data)
NETWORK_DEFAULTS = {"encoder_filters": (64, 16)}


@dataclass
class RunConfig:
    seed: int = 0
    network: dict = field(default_factory=lambda: dict(NETWORK_DEFAULTS))
    train: TrainConfig = field(default_factory=lambda: TrainConfig(iterations=2000))
    loss: LossConfig = field(default_factory=LossConfig)
    synthetic: dict = field(default_factory=dict)

    def network_config(self, input_dim: int, **overrides) -> NetworkConfig:
        return NetworkConfig(**{**self.network, **overrides, "input_dim": input_dim, "seed": self.seed})

    def synthetic_spec(self) -> SyntheticSpec:
        return SyntheticSpec(**{**self.synthetic, "seed": self.seed})

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        cp["run"] = {"seed": str(self.seed)}
        cp["network"] = {k: _fmt(v) for k, v in self.network.items()}
        cp["train"] = {k: _fmt(v) for k, v in asdict(self.train).items() if k != "seed"}
        cp["loss"] = {k: _fmt(v) for k, v in asdict(self.loss).items()}
        cp["synthetic"] = {k: _fmt(v) for k, v in asdict(self.synthetic_spec()).items() if k != "seed"}
        lines = []
        for section in cp.sections():
            lines.append(f"[{section}]")
            lines += [f"{k} = {v}" for k, v in cp[section].items()]
            lines.append("")
        return "\n".join(lines)


def _fmt(v) -> str:
    if isinstance(v, (tuple, list)):
        return ",".join(str(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def _coerce(section: str, key: str, raw: str, default):
    try:
        if isinstance(default, bool):
            return raw.strip().lower() in ("1", "true", "yes", "on")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple) or (default is None and section == "network"):
            return tuple(int(x) for x in raw.replace(" ", "").split(",") if x)
        return raw.strip()
    except ValueError:
        raise ValidationError(f"[{section}] {key}: cannot parse {raw!r}") from None


def _defaults(cls) -> dict:
    out = {}
    for f in fields(cls):
        if f.default is not f.default_factory:  # plain default
            out[f.name] = f.default
    return out


def load_config(path: Optional[str]) -> RunConfig:
    """Parse an INI config; unknown sections or keys are validation errors."""
    cfg = RunConfig()
    if not path:
        return cfg
    p = Path(path)
    if not p.is_file():
        raise ValidationError(f"config file {p} does not exist")
    cp = configparser.ConfigParser()
    try:
        cp.read(p)
    except configparser.Error as exc:
        raise ValidationError(f"{p}: {exc}") from None

    known = {
        "run": {"seed": 0},
        "network": {k: v for k, v in _defaults(NetworkConfig).items() if k not in ("input_dim", "seed")},
        "train": {k: v for k, v in _defaults(TrainConfig).items() if k != "seed"},
        "loss": _defaults(LossConfig),
        "synthetic": {k: v for k, v in _defaults(SyntheticSpec).items() if k != "seed"},
    }
    values = {s: {} for s in known}
    for section in cp.sections():
        if section not in known:
            raise ValidationError(f"{p}: unknown section [{section}]")
        for key, raw in cp[section].items():
            if key not in known[section]:
                raise ValidationError(f"{p}: unknown key {key!r} in [{section}]")
            values[section][key] = _coerce(section, key, raw, known[section][key])

    cfg.seed = values["run"].get("seed", 0)
    cfg.network.update(values["network"])
    cfg.train = TrainConfig(**{**asdict(cfg.train), **values["train"]})
    cfg.loss = LossConfig(**values["loss"])
    cfg.synthetic = values["synthetic"]
    return cfg


def resolve_config(args) -> RunConfig:
    """Config file plus flag overrides, fully validated."""
    cfg = load_config(getattr(args, "config", None))
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "kernel_length", None) is not None:
        cfg.network["kernel_length"] = args.kernel_length
    tr = asdict(cfg.train)
    if getattr(args, "iterations", None) is not None:
        tr["iterations"] = args.iterations
    tr["seed"] = cfg.seed
    cfg.train = TrainConfig(**tr)
    if getattr(args, "loss", None):
        cfg.loss = LossConfig(**{**asdict(cfg.loss), "variant": args.loss})
    # validate what does not depend on the data
    cfg.network_config(1)
    cfg.synthetic_spec()
    return cfg


def _out_dir(args, command: str) -> Path:
    if getattr(args, "out", None):
        return Path(args.out)
    return Path(os.environ.get(ENV_OUT, "tedmil_out")) / command


def _echo_config(cfg: RunConfig, out: Path):
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(cfg.to_ini())


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    cfg = resolve_config(args)
    spec = cfg.synthetic_spec()
    out = _out_dir(args, "synth")
    manifest = generate_synthetic(spec, out)
    _echo_config(cfg, out)
    kind = " (null-signal control)" if spec.null_signal else ""
    print(f"wrote {manifest}{kind}")
    return 0


def _training_data(manifest, bag_size: int):
    entries, _ = load_manifest(manifest)
    bags = load_bags(entries, split="train", bag_size=bag_size)
    if not bags:
        raise ValidationError(f"{manifest}: no training videos")
    return TrainingSet.from_bags(bags)


def run_training(cfg: RunConfig, manifest, out: Path, resume: bool = False, checkpoint=None,
                 network_overrides: Optional[dict] = None):
    """Train from a manifest into ``out``; returns the trained parameters."""
    data = _training_data(manifest, cfg.network.get("bag_size", 32))
    net = cfg.network_config(data.abnormal.shape[-1], **(network_overrides or {}))
    ckpt = Path(checkpoint) if checkpoint else out / CHECKPOINT_NAME
    if resume:
        if not ckpt.is_file():
            raise ValidationError(f"--resume: checkpoint {ckpt} does not exist")
        state = load_state(ckpt)
        if state.params.config.to_dict() != net.to_dict():
            raise ValidationError(f"--resume: checkpoint {ckpt} was trained with a different network config")
    else:
        state = TrainState.fresh(init_params(net, rngmod.stream(cfg.seed, "init")), cfg.seed)
    out.mkdir(parents=True, exist_ok=True)
    if not resume and (out / "train_log.csv").exists():
        (out / "train_log.csv").unlink()
    result = train(state.params, data, cfg.train, cfg.loss, state=state,
                   checkpoint_path=out / CHECKPOINT_NAME, log_path=out / "train_log.csv")
    return result.params


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    if not args.manifest:
        raise ValidationError("train needs --manifest")
    # read and validate all inputs before anything is written
    load_manifest(args.manifest)
    out = _out_dir(args, "train")
    params = run_training(cfg, args.manifest, out, resume=args.resume, checkpoint=args.checkpoint)
    _echo_config(cfg, out)
    print(f"trained {cfg.train.iterations} iterations; checkpoint {out / CHECKPOINT_NAME}")
    del params
    return 0


def cmd_eval(args) -> int:
    if not args.checkpoint or not args.manifest:
        raise ValidationError("eval needs --checkpoint and --manifest")
    params, _ = load_checkpoint(_existing(args.checkpoint, "checkpoint"))
    report = evaluate(params, args.manifest, args.annotations, split=args.split,
                      threshold=args.threshold, per_video=args.per_video)
    out = _out_dir(args, "eval")
    write_report(report, out)
    print(f"auc {report.auc:.6f}")
    print(f"false_alarm_rate {report.false_alarm:.6f}")
    print(f"n_frames {report.n_frames} n_videos {report.n_videos}")
    return 0


def cmd_score(args) -> int:
    if not args.checkpoint:
        raise ValidationError("score needs --checkpoint")
    params, _ = load_checkpoint(_existing(args.checkpoint, "checkpoint"))
    ff = load_feature_file(_existing(args.features, "feature file"))
    n_frames = args.n_frames if args.n_frames is not None else 16 * ff.n_clips
    inst = score_video(params, ff.matrix)
    frames = expand_scores(inst, n_frames, ff.n_clips)
    lines = [repr(float(s)) for s in inst] + [repr(float(s)) for s in frames]
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "scores.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["kind", "index", "score"])
            for i, s in enumerate(inst):
                w.writerow(["instance", i, repr(float(s))])
            for i, s in enumerate(frames):
                w.writerow(["frame", i, repr(float(s))])
    sys.stdout.write("\n".join(lines) + "\n")
    return 0


def cmd_gradcheck(args) -> int:
    cfg = resolve_config(args)
    variants = [cfg.loss.variant] if args.loss else ["mean_distance", "max_hinge"]
    ok = True
    for variant in variants:
        net = NetworkConfig(input_dim=args.dim, bag_size=args.bag_size, kernel_length=cfg.network.get("kernel_length", 4),
                            encoder_filters=tuple(args.filters), seed=cfg.seed)
        report = gradcheck(net, LossConfig(**{**asdict(cfg.loss), "variant": variant}), seed=cfg.seed,
                           tolerance=args.tolerance)
        for name in sorted(report.max_rel_error):
            print(f"{variant} {name} max_rel_error {report.max_rel_error[name]:.3e} "
                  f"checked {report.checked[name]} excluded {report.excluded[name]}")
        status = "PASS" if report.passed else "FAIL"
        print(f"{variant} worst {report.worst:.3e} tolerance {report.tolerance:.1e} {status}")
        ok = ok and report.passed
    return 0 if ok else 2


def cmd_ablate(args) -> int:
    cfg = resolve_config(args)
    if not args.manifest:
        raise ValidationError("ablate needs --manifest")
    entries, _ = load_manifest(args.manifest)
    kernels = tuple(args.kernel_lengths) if args.kernel_lengths else ABLATION_KERNELS
    bag_size = cfg.network.get("bag_size", 32)
    for k in kernels:
        if not 1 <= k <= bag_size:
            raise ValidationError(f"kernel length {k} must lie in [1, {bag_size}]")
    variants = [cfg.loss.variant] if args.loss else list(ABLATION_VARIANTS)
    data = _training_data(args.manifest, bag_size)
    test_bags = load_bags(entries, split="test", bag_size=bag_size)
    ann_path = Path(args.annotations) if args.annotations else Path(args.manifest).parent / "annotations.csv"
    annotations = {r.video_id: r for r in load_annotations(_existing(ann_path, "annotation file"))}
    labels = {e.video_id: e.label for e in entries}

    out = _out_dir(args, "ablate")
    out.mkdir(parents=True, exist_ok=True)
    _echo_config(cfg, out)
    rows = []
    for variant in variants:
        for k in kernels:
            net = cfg.network_config(data.abnormal.shape[-1], kernel_length=k)
            params = init_params(net, rngmod.stream(cfg.seed, "init"))
            loss_cfg = LossConfig(**{**asdict(cfg.loss), "variant": variant})
            train(params, data, cfg.train, loss_cfg)
            report = summarize(score_bags(params, test_bags, annotations), labels)
            rows.append((variant, k, cfg.train.iterations, report.auc, report.false_alarm))
            print(f"{variant} kernel_length={k} auc {report.auc:.4f} false_alarm {report.false_alarm:.4f}")
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["loss", "kernel_length", "iterations", "auc", "false_alarm_rate"])
        for variant, k, it, auc, fa in rows:
            w.writerow([variant, k, it, repr(auc), repr(fa)])
    return 0


def _existing(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise ValidationError(f"{what} {p} does not exist")
    return p


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tedmil", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, manifest=False, checkpoint=False, training=False):
        p.add_argument("--config", help="INI config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help=f"output directory (default ${ENV_OUT}/<command>)")
        if manifest:
            p.add_argument("--manifest")
            p.add_argument("--annotations", help="annotation CSV (default: next to the manifest)")
        if checkpoint:
            p.add_argument("--checkpoint")
        if training:
            p.add_argument("--loss", choices=["mean_distance", "max_hinge", "max_hinge_avg"])
            p.add_argument("--kernel-length", type=int)
            p.add_argument("--iterations", type=int)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model from a manifest")
    common(p, manifest=True, checkpoint=True, training=True)
    p.add_argument("--resume", action="store_true", help="continue from --checkpoint (default <out>/model.ckpt)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="frame-level AUC and false-alarm rate")
    common(p, manifest=True, checkpoint=True)
    p.add_argument("--split", default="test")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--per-video", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("score", help="score one feature file")
    common(p, checkpoint=True)
    p.add_argument("features", help="TEDF or CSV feature file")
    p.add_argument("--n-frames", type=int, help="frame count (default 16 per clip)")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check on a small network")
    common(p, training=True)
    p.add_argument("--dim", type=int, default=8)
    p.add_argument("--bag-size", type=int, default=8)
    p.add_argument("--filters", type=int, nargs=2, default=[8, 4])
    p.add_argument("--tolerance", type=float, default=1e-5)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="AUC per loss variant and kernel length")
    common(p, manifest=True, training=True)
    p.add_argument("--kernel-lengths", type=int, nargs="+")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValidationError, ContractError, ShapeError, FormatError) as exc:
        print(f"tedmil {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except (NumericError, FloatingPointError, OSError) as exc:
        print(f"tedmil {args.command}: failed: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
