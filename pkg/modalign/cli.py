"""
Command line front of the pipeline. Subcommands that build something resolve
their settings (preset, then JSON config file, then `--set key=value`
overrides). `eval` and `viz cam` take theirs from the checkpoint. Every run
writes its resolved settings next to its outputs and calls the matching
activity.

Exit status is 0 on success, 1 on invalid input and 2 on any other failure.
"""

import argparse
import os
import sys
from typing import Any, Callable, Dict, List, Optional, Sequence

from chaoslib.log import configure_logger

from modalign import __version__, get_logger
from modalign.config import PRESETS, load_run_config
from modalign.exceptions import InvalidInput
from modalign.pretrain.actions import pretrain_expert
from modalign.reporting.actions import (
    EMBEDDING_SOURCES,
    export_cam,
    export_tsne,
)
from modalign.training.actions import finetune_model, run_ablation
from modalign.training.probes import evaluate_checkpoint
from modalign.types import SPLITS
from modalign.utils import write_json
from modalign.volumes.actions import generate_phantom_dataset

__all__ = ["cli_main", "main"]

logger = get_logger()

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_FAILURE = 2


class UsageError(Exception):
    pass


class ArgumentParser(argparse.ArgumentParser):
    def error(self, message: str) -> None:
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise UsageError(message)


def _settings(args: argparse.Namespace, section: str):
    return load_run_config(
        section,
        path=getattr(args, "config", None),
        overrides=args.overrides,
        preset=args.preset,
    )


def _stem(path: str) -> str:
    return os.path.splitext(path)[0]


def _synth(args: argparse.Namespace) -> Dict[str, Any]:
    spec = load_run_config(
        "phantom", path=args.spec, overrides=args.overrides, preset=args.preset
    )
    return generate_phantom_dataset(args.out, spec=spec.to_dict())


def _pretrain(args: argparse.Namespace) -> Dict[str, Any]:
    settings = _settings(args, "pretrain")
    return pretrain_expert(
        args.manifest, args.modality, args.out, config=settings.to_dict()
    )


def _finetune(args: argparse.Namespace) -> Dict[str, Any]:
    settings = _settings(args, "finetune")
    return finetune_model(
        args.manifest, args.out, experts=args.experts, config=settings.to_dict()
    )


def _eval(args: argparse.Namespace) -> Dict[str, Any]:
    return evaluate_checkpoint(
        args.ckpt, args.manifest, split=args.split, report_path=args.report
    )


def _ablate(args: argparse.Namespace) -> Dict[str, Any]:
    settings = _settings(args, "finetune")
    write_json(f"{_stem(args.out)}-resolved-config.json", settings.to_dict())
    return run_ablation(
        args.manifest, args.experts, args.out, config=settings.to_dict()
    )


def _viz_tsne(args: argparse.Namespace) -> Dict[str, Any]:
    settings = _settings(args, "tsne")
    write_json(f"{_stem(args.out)}-resolved-config.json", settings.to_dict())
    return export_tsne(
        args.ckpt,
        args.manifest,
        args.out,
        split=args.split,
        source=args.source,
        tsne=settings.to_dict(),
        image_path=args.image,
    )


def _viz_cam(args: argparse.Namespace) -> Dict[str, Any]:
    return export_cam(
        args.ckpt,
        args.volume,
        args.out,
        class_index=args.class_index,
        image_path=args.image,
    )


def build_parser() -> ArgumentParser:
    common = ArgumentParser(add_help=False)
    common.add_argument(
        "--preset", default="desk", choices=sorted(PRESETS), help="base preset"
    )
    common.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override one setting, dotted keys reach nested fields",
    )

    parser = ArgumentParser(
        prog="modalign",
        description="Modality-aware 3D vision-language training pipeline",
    )
    parser.add_argument(
        "-v", "--verbose", action="store_true", help="debug logging"
    )
    parser.add_argument(
        "--version", action="version", version=f"%(prog)s {__version__}"
    )
    commands = parser.add_subparsers(
        dest="command", required=True, parser_class=ArgumentParser
    )

    synth = commands.add_parser(
        "synth", parents=[common], help="generate a phantom dataset"
    )
    synth.add_argument("--spec", help="phantom spec JSON")
    synth.add_argument("--out", required=True, help="dataset directory")
    synth.set_defaults(handler=_synth)

    pretrain = commands.add_parser(
        "pretrain", parents=[common], help="pretrain one modality expert"
    )
    pretrain.add_argument("--manifest", required=True)
    pretrain.add_argument("--modality", required=True)
    pretrain.add_argument("--config")
    pretrain.add_argument("--out", required=True, help="checkpoint path")
    pretrain.set_defaults(handler=_pretrain)

    finetune = commands.add_parser(
        "finetune", parents=[common], help="fine-tune the fusion classifier"
    )
    finetune.add_argument("--manifest", required=True)
    finetune.add_argument("--experts", help="directory of expert checkpoints")
    finetune.add_argument("--config")
    finetune.add_argument("--out", required=True, help="checkpoint path")
    finetune.set_defaults(handler=_finetune)

    evaluate = commands.add_parser("eval", help="evaluate a checkpoint")
    evaluate.add_argument("--ckpt", required=True)
    evaluate.add_argument("--manifest", required=True)
    evaluate.add_argument("--split", default="test", choices=SPLITS)
    evaluate.add_argument("--report", help="metrics JSON path")
    evaluate.set_defaults(handler=_eval)

    ablate = commands.add_parser(
        "ablate", parents=[common], help="run the component ablation"
    )
    ablate.add_argument("--manifest", required=True)
    ablate.add_argument("--experts", required=True)
    ablate.add_argument("--config")
    ablate.add_argument("--out", required=True, help="ablation table CSV")
    ablate.set_defaults(handler=_ablate)

    viz = commands.add_parser("viz", help="diagnostic exports")
    views = viz.add_subparsers(
        dest="view", required=True, parser_class=ArgumentParser
    )

    tsne = views.add_parser(
        "tsne", parents=[common], help="2D t-SNE of learned features"
    )
    tsne.add_argument("--ckpt", required=True)
    tsne.add_argument("--manifest", required=True)
    tsne.add_argument("--split", default="test", choices=SPLITS)
    tsne.add_argument("--source", default="fusion", choices=EMBEDDING_SOURCES)
    tsne.add_argument("--config")
    tsne.add_argument("--out", required=True, help="points CSV")
    tsne.add_argument("--image", help="optional PNG scatter")
    tsne.set_defaults(handler=_viz_tsne)

    cam = views.add_parser("cam", help="class activation map of a volume")
    cam.add_argument("--ckpt", required=True)
    cam.add_argument("--volume", required=True, help="MVOL input")
    cam.add_argument("--class-index", type=int)
    cam.add_argument("--out", required=True, help="MVOL output")
    cam.add_argument("--image", help="optional PNG overlay")
    cam.set_defaults(handler=_viz_cam)

    return parser


def cli_main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError:
        return EXIT_INVALID
    except SystemExit as x:
        # --help and --version
        return int(x.code or 0)

    configure_logger(verbose=args.verbose)
    handler: Callable[[argparse.Namespace], Dict[str, Any]] = args.handler
    try:
        result = handler(args)
    except InvalidInput as x:
        logger.error(f"Invalid input: {x}")
        return EXIT_INVALID
    except Exception as x:
        logger.error(f"{args.command} failed: {x}", exc_info=args.verbose)
        return EXIT_FAILURE

    logger.debug(f"{args.command} returned {result}")
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> None:
    sys.exit(cli_main(argv))
