"""Command-line front end.

Usage::

    treenerv <command> --config run.json [--out DIR] [--seed N]

Every command prints one JSON summary line on stdout.  Failures exit nonzero
and print a single JSON line ``{"error": <kind>, "message": <text>}`` on
stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from collections.abc import Mapping
from pathlib import Path
from typing import Optional

import jsonschema
import numpy as np

from .codec import CodecError, ModelContainer, bpp, compress, decompress
from .decoder import DecoderConfig
from .trainer import TrainConfig, TuneConfig, evaluate, fit, tune_for_compression
from .video import SYNTH_KINDS, VideoSequence, analyze, load_frames, save_frames, synth

log = logging.getLogger("treenerv")

COMMANDS = ("fit", "reconstruct", "interpolate", "compress", "decompress", "analyze", "synth")
LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}

_INT = {"type": "integer"}
_NUM = {"type": "number"}

RUN_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "frames": {"type": "string"},
        "synth": {
            "type": "object",
            "additionalProperties": False,
            "required": ["kind"],
            "properties": {
                "kind": {"enum": list(SYNTH_KINDS)},
                "length": {"type": "integer", "minimum": 4},
                "height": {"type": "integer", "minimum": 1},
                "width": {"type": "integer", "minimum": 1},
                "channels": {"enum": [1, 3]},
                "seed": {"type": "integer", "minimum": 0},
            },
        },
        "model": {"type": "string"},
        "decoder": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "input_shape": {"type": "array", "items": _INT, "minItems": 3, "maxItems": 3},
                "strides": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 1},
                "channel_schedule": {"type": "array", "items": {"type": "integer", "minimum": 1}},
                "min_channels": {"type": "integer", "minimum": 1},
                "output_channels": {"enum": [1, 3]},
                "frame_size": {"type": ["array", "null"], "items": _INT, "minItems": 2, "maxItems": 2},
            },
        },
        "train": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "epochs": {"type": "integer", "minimum": 1},
                "warmup_epochs": {"type": "integer", "minimum": 0},
                "growth_interval": {"type": "integer", "minimum": 0},
                "growth_stages": {"type": "integer", "minimum": 0},
                "topk": {"type": "integer", "minimum": 1},
                "init_ratio": _NUM,
                "init_nodes": {"type": ["integer", "null"], "minimum": 2},
                "lr0": {"type": "number", "exclusiveMinimum": 0},
                "beta1": _NUM,
                "beta2": _NUM,
                "eps": _NUM,
                "seed": {"type": "integer", "minimum": 0},
            },
        },
        "compress": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "prune_fraction": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "bits": {"type": ["integer", "null"], "minimum": 2, "maximum": 16},
                "finetune": {"type": "boolean"},
                "prune_epochs": {"type": "integer", "minimum": 0},
                "quant_epochs": {"type": "integer", "minimum": 0},
            },
        },
        "save_frames": {"type": "boolean"},
    },
}


class CliError(Exception):
    """Failure with a short machine-readable kind."""

    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


# -- config -------------------------------------------------------------------


def load_config(path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            cfg = json.load(fh)
    except OSError as exc:
        raise CliError("io", f"cannot read config {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise CliError("config", f"{path} is not valid JSON: {exc.msg} at line {exc.lineno}") from exc
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    try:
        jsonschema.validate(cfg, RUN_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise CliError("schema", f"{where}: {exc.message}") from exc


def _decoder_config(cfg: dict, video: Optional[VideoSequence] = None) -> DecoderConfig:
    d = dict(cfg.get("decoder", {}))
    if video is not None:
        d.setdefault("output_channels", video.C)
        d.setdefault("frame_size", [video.H, video.W])
    try:
        return DecoderConfig.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise CliError("config", f"decoder: {exc}") from exc


def _train_config(cfg: dict, seed: Optional[int]) -> TrainConfig:
    t = dict(cfg.get("train", {}))
    if seed is not None:
        t["seed"] = seed
    tc = TrainConfig(**t)
    try:
        tc.validate()
    except ValueError as exc:
        raise CliError("config", f"train: {exc}") from exc
    return tc


def _video(cfg: dict, seed: Optional[int]) -> VideoSequence:
    if "frames" in cfg:
        return load_frames(cfg["frames"])
    if "synth" in cfg:
        s = cfg["synth"]
        return synth(
            s["kind"], s.get("length", 64), s.get("height", 32), s.get("width", 64),
            seed=seed if seed is not None else s.get("seed", 0), channels=s.get("channels", 3),
        )
    raise CliError("config", "either 'frames' or 'synth' is required for this command")


def _model_path(cfg: dict, out: Path) -> Path:
    return Path(cfg["model"]) if "model" in cfg else out / "model.tnrv"


class _LoggedFrames(Mapping):
    """Read-through view so that every frame read lands in ``access_log``."""

    def __init__(self, video: VideoSequence):
        self.video = video

    def __getitem__(self, i):
        if not 0 <= i < self.video.L:
            raise KeyError(i)
        return self.video.frame(i)

    def __iter__(self):
        return iter(range(self.video.L))

    def __len__(self):
        return self.video.L


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def _psnr_csv(per: dict, seen: Optional[set] = None) -> str:
    lines = ["frame,psnr" + (",split" if seen is not None else "")]
    for t in sorted(per):
        row = f"{t},{per[t]!r}"
        if seen is not None:
            row += ",seen" if t in seen else ",unseen"
        lines.append(row)
    return "\n".join(lines) + "\n"


# -- commands -----------------------------------------------------------------


def cmd_fit(cfg: dict, out: Path, seed: Optional[int]) -> dict:
    video = _video(cfg, seed)
    result = fit(_LoggedFrames(video), video.L, _decoder_config(cfg, video), _train_config(cfg, seed))
    path = out / "model.tnrv"
    out.mkdir(parents=True, exist_ok=True)
    compress(result.model, 0.0, None).save(path)
    _write(out / "train_log.csv", result.log_csv())
    return {"command": "fit", "psnr": result.final_psnr, "nodes": result.model.grid.node_count,
            "model": str(path), "log": str(out / "train_log.csv")}


def cmd_reconstruct(cfg: dict, out: Path, seed: Optional[int]) -> dict:
    model = decompress(ModelContainer.load(_model_path(cfg, out)))
    video = _video(cfg, seed)
    mean, per = evaluate(model, dict(enumerate(video.frames)))
    _write(out / "reconstruct_psnr.csv", _psnr_csv(per))
    if cfg.get("save_frames"):
        renders = [np.clip(model.render(float(t)), 0.0, 1.0) for t in range(video.L)]
        save_frames(renders, out / "frames")
    return {"command": "reconstruct", "psnr": mean, "frames": video.L}


def cmd_interpolate(cfg: dict, out: Path, seed: Optional[int]) -> dict:
    video = _video(cfg, seed)
    tc = _train_config(cfg, seed)
    tc.train_frame_mask = video.even_mask()
    video.access_log.clear()
    result = fit(_LoggedFrames(video), video.L, _decoder_config(cfg, video), tc)
    leaked = sorted({i for i in video.access_log if i % 2})
    if leaked:
        raise CliError("mask", f"held-out frames read during fit: {leaked[:8]}")
    out.mkdir(parents=True, exist_ok=True)
    compress(result.model, 0.0, None).save(out / "model.tnrv")
    _write(out / "train_log.csv", result.log_csv())
    _, per = evaluate(result.model, dict(enumerate(video.frames)))
    seen = {i for i in per if i % 2 == 0}
    _write(out / "interpolate_psnr.csv", _psnr_csv(per, seen))
    return {
        "command": "interpolate",
        "psnr_seen": float(np.mean([per[i] for i in seen])),
        "psnr_unseen": float(np.mean([per[i] for i in per if i not in seen])),
        "odd_frames_read_during_fit": 0,
    }


def cmd_compress(cfg: dict, out: Path, seed: Optional[int]) -> dict:
    model = decompress(ModelContainer.load(_model_path(cfg, out)))
    opts = cfg.get("compress", {})
    fraction, bits = opts.get("prune_fraction", 0.1), opts.get("bits", 8)
    if opts.get("finetune", False):
        if bits is None:
            raise CliError("config", "compress: finetune needs a bit width")
        video = _video(cfg, seed)
        tune = TuneConfig(prune_epochs=opts.get("prune_epochs", 20), quant_epochs=opts.get("quant_epochs", 5),
                          seed=seed if seed is not None else 0)
        model = tune_for_compression(model, _LoggedFrames(video), fraction, bits, tune)
    container = compress(model, fraction, bits)
    path = out / "model.compressed.tnrv"
    out.mkdir(parents=True, exist_ok=True)
    container.save(path)
    h, w = model.decoder.config.output_size
    return {"command": "compress", "model": str(path), "bits": container.total_bits,
            "bpp": bpp(container, model.grid.length, h, w), "finetune": bool(opts.get("finetune", False))}


def cmd_decompress(cfg: dict, out: Path, seed: Optional[int]) -> dict:
    model = decompress(ModelContainer.load(_model_path(cfg, out)))
    path = out / "model.decompressed.tnrv"
    out.mkdir(parents=True, exist_ok=True)
    compress(model, 0.0, None).save(path)
    return {"command": "decompress", "model": str(path), "parameters": model.parameter_count()}


def cmd_analyze(cfg: dict, out: Path, seed: Optional[int]) -> dict:
    model = decompress(ModelContainer.load(_model_path(cfg, out)))
    video = _video(cfg, seed)
    report = analyze(model, video)
    _write(out / "analysis_frames.csv", report.frames_csv())
    _write(out / "analysis_bins.csv", report.bins_csv())
    return {"command": "analyze", "correlation": report.correlation,
            "frames_csv": str(out / "analysis_frames.csv"), "bins_csv": str(out / "analysis_bins.csv")}


def cmd_synth(cfg: dict, out: Path, seed: Optional[int]) -> dict:
    if "synth" not in cfg:
        raise CliError("config", "'synth' section is required for the synth command")
    video = _video({"synth": cfg["synth"]}, seed)
    paths = save_frames(video, out / "frames")
    return {"command": "synth", "frames": len(paths), "dir": str(out / "frames")}


HANDLERS = {
    "fit": cmd_fit,
    "reconstruct": cmd_reconstruct,
    "interpolate": cmd_interpolate,
    "compress": cmd_compress,
    "decompress": cmd_decompress,
    "analyze": cmd_analyze,
    "synth": cmd_synth,
}


# -- entry point ----------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="treenerv", description="Tree-structured feature grid video representation.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", required=True, help="run configuration JSON")
    p.add_argument("--out", default="out", help="output directory (default: ./out)")
    p.add_argument("--seed", type=int, default=None, help="override the seed from the config")
    return p


def _setup_logging() -> None:
    level = os.environ.get("TREENERV_LOG", "error").lower()
    if level not in LOG_LEVELS:
        raise CliError("usage", f"TREENERV_LOG must be one of {sorted(LOG_LEVELS)}, got {level!r}")
    logging.basicConfig(level=LOG_LEVELS[level], stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    logging.getLogger("treenerv").setLevel(LOG_LEVELS[level])


def run(argv=None) -> dict:
    """Parse ``argv``, execute the command and return its summary."""
    args = build_parser().parse_args(argv)
    if args.seed is not None and not 0 <= args.seed < 2 ** 64:
        raise CliError("usage", f"--seed must be an unsigned 64-bit integer, got {args.seed}")
    cfg = load_config(args.config)
    return HANDLERS[args.command](cfg, Path(args.out), args.seed)


def main(argv=None) -> int:
    try:
        _setup_logging()
        summary = run(argv)
    except CliError as exc:
        err = {"error": exc.kind, "message": str(exc)}
    except CodecError as exc:
        err = {"error": "codec", "message": str(exc)}
    except OSError as exc:
        err = {"error": "io", "message": f"{exc.filename or ''}: {exc.strerror or exc}".strip(": ")}
    except (ValueError, KeyError) as exc:
        err = {"error": "input", "message": str(exc)}
    else:
        print(json.dumps(summary, sort_keys=True))
        return 0
    print(json.dumps(err), file=sys.stderr)
    return 2 if err["error"] in ("usage", "schema", "config") else 1


if __name__ == "__main__":
    sys.exit(main())
