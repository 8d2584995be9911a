"""Command-line entry point: ``tntpatch <subcommand> --config run.yaml``.

Exit codes: 0 success, 2 invalid config or arguments, 3 an attack stage ran
out of budget without passing its gates (outputs are still written), 4 a
training loop diverged, 5 any other pipeline error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
from PIL import Image

from . import pipeline
from .config import load_config
from .errors import ConfigError, Diverged, NotConverged, TnTError
from .patch_ops import LOCATIONS, Placement, load_patch, place, stamp

log = logging.getLogger("tntpatch.cli")

EXIT_OK, EXIT_CONFIG, EXIT_NOT_CONVERGED, EXIT_DIVERGED, EXIT_ERROR = 0, 2, 3, 4, 5


class JsonFormatter(logging.Formatter):
    def format(self, record):
        rec = {
            "time": time.strftime("%Y-%m-%dT%H:%M:%S", time.localtime(record.created)),
            "level": record.levelname.lower(),
            "logger": record.name,
            "msg": record.getMessage(),
        }
        if record.exc_info:
            rec["exc"] = self.formatException(record.exc_info)
        return json.dumps(rec)


def _setup_logging(level):
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(JsonFormatter())
    root = logging.getLogger()
    root.handlers[:] = [handler]
    root.setLevel(level.upper())


def _config(args):
    return load_config(args.config, args.set)


def _stage(fn, needs_workers=False):
    def run(args):
        cfg = _config(args)
        if args.dry_run:
            _print_plan(args.command, cfg)
            return EXIT_OK
        out = fn(cfg, workers=args.workers) if needs_workers else fn(cfg)
        print(out)
        return _outcome(args.command, out)

    return run


def _print_plan(command, cfg):
    doc = {
        "command": command,
        "artifact_root": str(cfg.artifact_root()),
        "config_hash": cfg.hash(),
        "artifacts": pipeline.plan(cfg),
        "config": json.loads(cfg.canonical()),
    }
    print(json.dumps(doc, sort_keys=True, indent=2))


def _outcome(command, out: Path):
    if command == "search-tnt":
        meta = json.loads((out / "candidate.json").read_text())
        if not meta["converged"]:
            raise NotConverged(f"no candidate passed both gates; best attempt saved in {out}")
    if command == "finetune-advgen":
        meta = json.loads((out / "result.json").read_text())
        if not meta["converged"]:
            raise NotConverged(f"fine-tuning did not pass both gates; last weights saved in {out}")
    return EXIT_OK


def cmd_stamp(args):
    placement = Placement(args.location, args.scale, args.row, args.col)
    with Image.open(args.image) as im:
        pixels = np.asarray(im.convert("RGB"))
    patch = load_patch(args.patch)
    h, w = pixels.shape[:2]
    delta, mask = place(patch, placement, h, w)
    stamped = stamp(pixels / 255.0, delta, mask)
    result = np.round(stamped * 255.0).astype(np.uint8)
    # unmasked pixels are copied rather than round-tripped through floats
    result = np.where(mask[..., None].astype(bool), result, pixels)
    out = Path(args.output or Path(args.image).with_name(Path(args.image).stem + "_stamped.png"))
    if args.dry_run:
        print(json.dumps({"command": "stamp", "output": str(out), "placement": placement.name}))
        return EXIT_OK
    out.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(result).save(out)
    print(out)
    return EXIT_OK


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run config (YAML or JSON)")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config key; repeatable")
    common.add_argument("--workers", type=int, default=1,
                        help="parallel workers; 1 is the deterministic reference mode")
    common.add_argument("--dry-run", action="store_true",
                        help="validate the config and print the plan without running anything")
    common.add_argument("--log-level", default="info")

    p = argparse.ArgumentParser(prog="tntpatch", description="Naturalistic adversarial patch toolkit")
    sub = p.add_subparsers(dest="command", required=True)
    stages = {
        "train-gan": (pipeline.train_gan, False, "train the patch generator (WGAN-GP)"),
        "train-classifier": (pipeline.train_classifier, False, "train the victim classifier"),
        "search-tnt": (pipeline.search, True, "search the generator latent space for a patch"),
        "finetune-advgen": (pipeline.finetune, False, "fine-tune the generator into an attacker"),
        "evaluate": (pipeline.evaluate, True, "write the evaluation report"),
    }
    for name, (fn, workers, help_) in stages.items():
        sp = sub.add_parser(name, parents=[common], help=help_)
        sp.set_defaults(func=_stage(fn, workers))

    sp = sub.add_parser("stamp", parents=[common], help="stamp a patch PNG onto an image")
    sp.add_argument("image")
    sp.add_argument("patch", help="RGBA patch PNG (alpha is the mask)")
    sp.add_argument("-o", "--output")
    sp.add_argument("--location", default="lower_right", choices=LOCATIONS)
    sp.add_argument("--scale", type=float, default=None, help="patch area / image area")
    sp.add_argument("--row", type=int)
    sp.add_argument("--col", type=int)
    sp.set_defaults(func=cmd_stamp)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _setup_logging(args.log_level)
    try:
        return args.func(args)
    except ConfigError as exc:
        log.error("tntpatch.errors.ConfigError: %s", exc)
        return EXIT_CONFIG
    except NotConverged as exc:
        log.error("tntpatch.errors.NotConverged: %s", exc)
        return EXIT_NOT_CONVERGED
    except Diverged as exc:
        log.error("%s: %s", type(exc).__module__ + "." + type(exc).__name__, exc)
        return EXIT_DIVERGED
    except TnTError as exc:
        log.error("%s: %s", type(exc).__module__ + "." + type(exc).__name__, exc)
        return EXIT_ERROR
    except ValueError as exc:
        log.error("invalid argument: %s", exc)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
