# file: main_app.py

import argparse
import json
import logging
import sys

# --- Local Module Imports ---
from core.errors import EXIT_DATA, EXIT_INTERNAL, EXIT_OK, EXIT_USAGE, SdrError

COMMANDS = ("extract", "augment", "train", "pretrain", "finetune", "evaluate", "compare", "predict", "synth")
LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


class CliUsageError(Exception):
    """argparse failure; raised instead of letting argparse call sys.exit(2)."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliUsageError(message)


def build_parser():
    parser = _Parser(prog="main_app.py", description="Speech depression recognition pipeline.")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--manifest", help="dataset manifest CSV")
    parser.add_argument("--config", help="run config (dotted key=value file)")
    parser.add_argument("--out", help="output directory or file, depending on the command")
    parser.add_argument("--seed", type=int, help="root seed (overrides the config)")
    parser.add_argument("--experiment", default="basic", choices=("basic", "noise", "gender", "generalize"))
    parser.add_argument("--features", help="directory written by extract")
    parser.add_argument("--checkpoint", help="model checkpoint (.ckpt)")
    parser.add_argument("--pretrained", help="pretrained emotion checkpoint for finetune")
    parser.add_argument("--wav", help="recording for predict")
    parser.add_argument("--transcript", help="transcript TSV for predict (optional)")
    parser.add_argument("--split", choices=("train", "val", "test"), help="split evaluated by basic/noise")
    parser.add_argument("--plots", action="store_true", help="also write PNG figures")
    # compare only
    parser.add_argument("--baseline", help="reference checkpoint or evaluate output")
    parser.add_argument("--candidate", help="checkpoint or evaluate output compared with --baseline")
    # synth only
    parser.add_argument("--scheme", default="binary2", help="synthetic label scheme")
    parser.add_argument("--participants", type=int, default=20)
    parser.add_argument("--duration", type=float, default=60.0, help="seconds per synthetic recording")
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument("--verbose", "-v", action="store_true")
    verbosity.add_argument("--quiet", "-q", action="store_true")
    return parser


def _require(args, *names):
    missing = [f"--{n}" for n in names if not getattr(args, n)]
    if missing:
        raise CliUsageError(f"{args.command} needs {', '.join(missing)}")


def _emit(doc):
    print(json.dumps(doc, indent=2, sort_keys=True, default=str))


def run_command(args):
    """Dispatch one parsed command. Returns the process exit code."""
    from core import pipeline
    from core.run_config import load_run_config

    config = load_run_config(args.config)
    if args.seed is not None:
        config = config.with_seed(args.seed)
    progress = not args.quiet

    if args.command == "synth":
        _require(args, "out")
        result = pipeline.cmd_synth(args.out, args.participants, args.scheme, config.seed, args.duration,
                                    config.experiment.sample_rate_hz, progress, args.plots)
    elif args.command == "extract":
        _require(args, "manifest", "out")
        result = pipeline.cmd_extract(args.manifest, config, args.out, progress)
    elif args.command == "augment":
        _require(args, "manifest", "out")
        result = pipeline.cmd_augment(args.manifest, config, args.out, progress, args.plots)
    elif args.command in ("train", "pretrain"):
        _require(args, "manifest", "features", "out")
        cmd = pipeline.cmd_train if args.command == "train" else pipeline.cmd_pretrain
        result = cmd(args.manifest, config, args.features, args.out, progress, args.plots)
        result.pop("history")
    elif args.command == "finetune":
        _require(args, "manifest", "features", "pretrained", "out")
        result = pipeline.cmd_finetune(args.manifest, config, args.features, args.pretrained, args.out,
                                       progress, args.plots)
        result.pop("history")
    elif args.command == "evaluate":
        _require(args, "manifest")
        result = pipeline.cmd_evaluate(args.checkpoint, args.manifest, config, args.experiment, args.features,
                                       args.out, args.split, progress, args.plots)
    elif args.command == "compare":
        _require(args, "baseline", "candidate")
        result = pipeline.cmd_compare(args.baseline, args.candidate)
    else:
        _require(args, "checkpoint", "wav")
        result = pipeline.cmd_predict(args.checkpoint, args.wav, args.transcript, config)

    _emit(result)
    if result.get("failures"):
        logging.getLogger("main_app").error("%d row(s) failed", len(result["failures"]))
        return EXIT_DATA
    return EXIT_OK


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except CliUsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format=LOG_FORMAT)
    log = logging.getLogger("main_app")
    try:
        return run_command(args)
    except CliUsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SdrError as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return exc.exit_code
    except Exception:
        log.exception("internal error")
        return EXIT_INTERNAL


if __name__ == "__main__":
    # Check for required packages to provide a helpful error message on launch
    try:
        import librosa
        import scipy
        import sklearn
    except ImportError as exc:
        print(f"Missing package ({exc.name}). Please install the requirements by running:\n\n"
              "pip install -r requirements.txt", file=sys.stderr)
        sys.exit(EXIT_INTERNAL)
    sys.exit(main())
