"""Command-line entry point.

    python main.py synth-dataset
    python main.py prepare runs/corpus/manifest.json
    python main.py train-conversion runs/corpus/manifest.json [--baseline]
    python main.py train-vocoder runs/corpus/manifest.json --kind wavenet
    python main.py convert --ckpt CKPT --emotion 0 --wav in.wav --ppg in.ppgf --output out.wav
    python main.py convert --ckpt CKPT --all-eval runs/corpus/manifest.json --generator wavenet --vocoder-ckpt VCKPT
    python main.py synthesize in.wav --output out.wav --generator flowavenet --vocoder-ckpt VCKPT --speaker 0 --emotion 2
    python main.py evaluate [runs/eval_pairs.json]
    python main.py gradcheck

Exit codes: 0 success, 1 usage, 2 data, 3 numerical failure.
"""

import argparse
import sys
from typing import List, Optional

from config import load_config, validate_config
from errors import MtevcError, UsageError
from pipeline import GENERATORS, VOCODERS, Pipeline


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", default=None, help="TOML run configuration (default ./config.toml)")
    common.add_argument("--seed", type=int, default=None, help="override [run] seed")
    common.add_argument("--out", default=None, help="override [run] out_dir")
    common.add_argument("--strict", action="store_true", help="treat skipped items as a data error")

    parser = _Parser(prog="mtevc", description="Multi-target emotional voice conversion")
    commands = parser.add_subparsers(dest="command", parser_class=_Parser)
    commands.required = True

    p = commands.add_parser("synth-dataset", parents=[common], help="write the synthetic parallel corpus")
    p.add_argument("--corpus-dir", default=None, help="default <out>/corpus")

    p = commands.add_parser("prepare", parents=[common], help="analyse and cache Mel features")
    p.add_argument("manifest")

    p = commands.add_parser("train-conversion", parents=[common], help="train the conversion model")
    p.add_argument("manifest")
    p.add_argument("--baseline", action="store_true", help="Mel-only inputs, no PPG")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--resume", action="store_true", help="continue from the newest checkpoint")

    p = commands.add_parser("train-vocoder", parents=[common], help="train a neural vocoder")
    p.add_argument("manifest")
    p.add_argument("--kind", required=True, help=" or ".join(VOCODERS))
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--resume", action="store_true")

    p = commands.add_parser("convert", parents=[common], help="convert an utterance to a target emotion")
    p.add_argument("--ckpt", required=True, help="conversion checkpoint")
    p.add_argument("--generator", default="griffinlim", help=", ".join(GENERATORS))
    p.add_argument("--vocoder-ckpt", default=None)
    p.add_argument("--speaker", type=int, default=None, help="vocoder speaker id")
    p.add_argument("--emotion", type=int, default=None, help="target emotion id")
    p.add_argument("--wav", default=None, help="source WAV")
    p.add_argument("--ppg", default=None, help="source PPGF record (PPG model only)")
    p.add_argument("--output", default=None, help="converted WAV")
    p.add_argument("--all-eval", metavar="MANIFEST", default=None, help="convert every held-out utterance")

    p = commands.add_parser("synthesize", parents=[common], help="copy synthesis through a generator")
    p.add_argument("input", help="WAV or MELF file")
    p.add_argument("--output", required=True)
    p.add_argument("--generator", default="griffinlim", help=", ".join(GENERATORS))
    p.add_argument("--vocoder-ckpt", default=None)
    p.add_argument("--speaker", type=int, default=None)
    p.add_argument("--emotion", type=int, default=None)

    p = commands.add_parser("evaluate", parents=[common], help="MCD and LogF0-MSE report")
    p.add_argument("pairs", nargs="?", default=None, help="default <out>/eval_pairs.json")
    p.add_argument("--report", default=None, help="default <out>/report.json")

    commands.add_parser("gradcheck", parents=[common], help="finite-difference checks on tiny models")
    return parser


def run(args: argparse.Namespace) -> None:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out_dir = args.out
    validate_config(cfg)
    pipeline = Pipeline(cfg)

    if args.command == "synth-dataset":
        pipeline.synth_dataset(args.corpus_dir)
    elif args.command == "prepare":
        pipeline.prepare(args.manifest, strict=args.strict)
    elif args.command == "train-conversion":
        pipeline.train_conversion(args.manifest, baseline=args.baseline, steps=args.steps, resume=args.resume)
    elif args.command == "train-vocoder":
        pipeline.train_vocoder(args.manifest, args.kind, steps=args.steps, resume=args.resume)
    elif args.command == "convert":
        if args.all_eval:
            pipeline.convert_all_eval(args.all_eval, args.ckpt, args.generator, args.vocoder_ckpt, args.speaker)
        else:
            missing = [flag for flag, value in (("--wav", args.wav), ("--emotion", args.emotion), ("--output", args.output)) if value is None]
            if missing:
                raise UsageError(f"convert needs {', '.join(missing)} (or --all-eval MANIFEST)")
            pipeline.convert(
                args.wav, args.emotion, args.ckpt, args.output,
                generator=args.generator, vocoder_ckpt=args.vocoder_ckpt, speaker=args.speaker, ppg_path=args.ppg,
            )
    elif args.command == "synthesize":
        pipeline.synthesize(args.input, args.output, args.generator, args.vocoder_ckpt, args.speaker, args.emotion)
    elif args.command == "evaluate":
        pipeline.evaluate(args.pairs, args.report, strict=args.strict)
    elif args.command == "gradcheck":
        pipeline.gradcheck()


def main(argv: Optional[List[str]] = None) -> int:
    try:
        run(build_parser().parse_args(argv))
    except MtevcError as e:
        print(f"❌ {e}")
        return e.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
