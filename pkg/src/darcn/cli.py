"""Command-line entry point: ``darcn <command> [flags]``.

Settings resolve as: explicit flag, then ``DARCN_<FLAG>`` environment
variable (e.g. ``DARCN_SEED``, ``DARCN_PRESET``, ``DARCN_THREADS``), then
the ``--config`` JSON file, then built-in defaults.

Exit codes: 0 success, 1 usage error, 2 data or contract error,
3 numerical failure (non-finite loss, failed gradient audit).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError, DataError, DimensionError, NumericalError

ENV_PREFIX = "DARCN_"
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _env(name: str, cast=str):
    raw = os.environ.get(ENV_PREFIX + name.upper().replace("-", "_"))
    if raw is None:
        return None
    try:
        return cast(raw)
    except ValueError:
        raise UsageError(f"{ENV_PREFIX}{name.upper()}={raw!r} is not a valid {cast.__name__}") from None


def _resolve(args, name: str, cast=str, default=None):
    value = getattr(args, name, None)
    if value is None:
        value = _env(name, cast)
    return default if value is None else value


def _common(p: argparse.ArgumentParser, preset: str | None = "tiny") -> None:
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int, help="cap numerical thread pools (1 = deterministic mode)")
    if preset is not None:
        p.add_argument("--preset", choices=("paper", "tiny"))
        p.add_argument("--stages", type=int, help="number of recursive stages Q")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="darcn", description=__doc__.split("\n")[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("synth-data", help="generate the synthetic corpus and manifests")
    _common(p, preset=None)
    p.add_argument("--out", required=False, help="corpus root directory")
    p.add_argument("--train", type=int, help="number of training utterances (200)")
    p.add_argument("--val", type=int, help="number of validation utterances (40)")
    p.add_argument("--test", type=int, help="number of test utterances (20)")

    p = sub.add_parser("train", help="train a model")
    _common(p)
    p.add_argument("--in", dest="inp", help="corpus root holding train.tsv and val.tsv")
    p.add_argument("--train-manifest")
    p.add_argument("--val-manifest")
    p.add_argument("--out", help="run directory for checkpoints and train.log")
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--time-budget", type=float, help="stop after the epoch that crosses this many seconds")
    p.add_argument("--clip-norm", type=float, help="clip the global gradient norm (off by default)")
    p.add_argument("--resume", action="store_true", help="continue from <out>/last.ckpt")

    p = sub.add_parser("enhance", help="enhance one WAV file")
    _common(p)
    p.add_argument("--in", dest="inp", help="noisy 16 kHz mono WAV")
    p.add_argument("--out", help="output WAV")
    p.add_argument("--ckpt", help="checkpoint")

    p = sub.add_parser("evaluate", help="score a checkpoint on a manifest")
    _common(p)
    p.add_argument("--in", dest="inp", help="test manifest")
    p.add_argument("--ckpt")
    p.add_argument("--out", help="report path prefix (.tsv and .json are written)")

    p = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    _common(p)
    p.add_argument("--per-tensor", type=int, default=3, help="entries probed per model tensor")

    p = sub.add_parser("params", help="per-layer parameter table")
    _common(p)
    return ap


def _config_file(args) -> dict:
    import json

    path = _resolve(args, "config")
    if not path:
        return {}
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc


def _need(value, what: str):
    if value is None:
        raise UsageError(f"{what} is required")
    return value


def _arch(args, conf: dict):
    from .model import preset

    cfg = preset(_resolve(args, "preset", str, conf.get("preset", "tiny")))
    stages = _resolve(args, "stages", int, conf.get("stages"))
    return cfg if stages is None else replace(cfg, stages=stages)


def cmd_synth(args, conf) -> int:
    from .data import DESK_SPLITS, build_corpus

    splits = {k: int(_resolve(args, k, int, conf.get(k, v))) for k, v in DESK_SPLITS.items()}
    out = _need(_resolve(args, "out", str, conf.get("out")), "--out")
    paths = build_corpus(out, seed=_resolve(args, "seed", int, conf.get("seed", 0)), splits=splits)
    for name, path in sorted(paths.items()):
        print(f"{name}\t{path}")
    return EXIT_OK


def cmd_train(args, conf) -> int:
    from .training import TrainConfig, train

    conf = dict(conf)
    root = _resolve(args, "inp")
    for key, flag, default in (("train_manifest", "train_manifest", "train.tsv"),
                               ("val_manifest", "val_manifest", "val.tsv")):
        value = _resolve(args, flag)
        if value is None and root is not None:
            value = str(Path(root) / default)
        if value is not None:
            conf[key] = value
    for key, cast in (("seed", int), ("preset", str), ("stages", int), ("lr", float),
                      ("max_epochs", int), ("clip_norm", float)):
        value = _resolve(args, key, cast)
        if value is not None:
            conf[key] = value
    budget = _resolve(args, "time_budget", float)
    if budget is not None:
        conf["time_budget_s"] = budget
    out = _resolve(args, "out")
    if out is not None:
        conf["out_dir"] = out
    config = TrainConfig.from_dict(conf)
    result = train(config, resume=args.resume)
    print(f"best\t{result.best}\nlast\t{result.last}\nlog\t{result.log}\nepochs\t{len(result.history)}")
    return EXIT_OK


def cmd_enhance(args, conf) -> int:
    from .dsp import Waveform, read_wav, write_wav
    from .enhance import ModelEnhancer, enhance_waveform
    from .training import load_model

    inp = _need(_resolve(args, "inp", str, conf.get("in")), "--in")
    out = _need(_resolve(args, "out", str, conf.get("out")), "--out")
    ckpt = _need(_resolve(args, "ckpt", str, conf.get("ckpt")), "--ckpt")
    model, _, _ = load_model(ckpt)
    stages = _resolve(args, "stages", int, conf.get("stages"))
    wav = read_wav(inp)
    est = enhance_waveform(wav.samples, ModelEnhancer(model, stages))
    if not np.all(np.isfinite(est)):
        raise NumericalError("enhanced waveform is not finite")
    write_wav(out, Waveform(est, wav.sample_rate))
    print(out)
    return EXIT_OK


def cmd_evaluate(args, conf) -> int:
    from .enhance import evaluate

    manifest = _need(_resolve(args, "inp", str, conf.get("in")), "--in")
    ckpt = _need(_resolve(args, "ckpt", str, conf.get("ckpt")), "--ckpt")
    report = evaluate(ckpt, manifest, _resolve(args, "stages", int, conf.get("stages")))
    out = _resolve(args, "out", str, conf.get("out"))
    if out:
        for p in report.save(out):
            print(p, file=sys.stderr)
    sys.stdout.write(report.to_tsv())
    return EXIT_OK


def cmd_gradcheck(args, conf) -> int:
    from .gradcheck import audit_model, audit_ops, format_rows

    arch = _arch(args, conf)
    seed = _resolve(args, "seed", int, conf.get("seed", 0))
    rows = audit_ops(seed) + audit_model(arch.name, arch.stages, per_tensor=args.per_tensor, seed=seed)
    print(format_rows(rows))
    return EXIT_OK if all(r.passed for r in rows) else EXIT_NUMERIC


def cmd_params(args, conf) -> int:
    from .model import DarcnModel, format_parameter_table

    arch = _arch(args, conf)
    model = DarcnModel(arch, seed=_resolve(args, "seed", int, conf.get("seed", 0)), dtype=np.float32)
    print(format_parameter_table(model, 1.23 if arch.name == "paper" else None))
    return EXIT_OK


COMMANDS = {"synth-data": cmd_synth, "train": cmd_train, "enhance": cmd_enhance, "evaluate": cmd_evaluate,
            "gradcheck": cmd_gradcheck, "params": cmd_params}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a command is required")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        threads = _resolve(args, "threads", int)
        from .training import configure_threads

        limiter = configure_threads(threads)  # noqa: F841  (held for the command's lifetime)
        conf = _config_file(args)
        return COMMANDS[args.command](args, conf)
    except UsageError as exc:
        print(f"darcn: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ContractError, DimensionError, ConfigError) as exc:
        print(f"darcn: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, FloatingPointError) as exc:
        print(f"darcn: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def main(argv=None) -> int:
    return run(argv)


if __name__ == "__main__":
    sys.exit(main())
