"""Command-line entry points: edit, eval, handshake, demo-world.

Configuration precedence is CLI flag > config file > built-in default.
Every engine flag has a config-file equivalent under the same name (flags
spell underscores as dashes). Exit codes: 0 success, 2 configuration or
usage error, 3 transport failure, 4 protocol violation or version mismatch,
5 backend or runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from typing import Any, Sequence

from scoredit import __version__
from scoredit.backend.analytic import (
    DEMO_POND_PROMPT,
    DEMO_SOURCE_PROMPT,
    DEMO_TARGET_PROMPT,
    AnalyticBackend,
    demo_world,
    world_from_json,
    world_to_json,
)
from scoredit.backend.base import BackendError, DenoiserBackend, TransportError
from scoredit.backend.remote import RemoteBackend
from scoredit.backend.wire import ProtocolError
from scoredit.core import ConfigError, EngineConfig, load_config_file
from scoredit.engine import EditRequest, EngineError, run_edit, telemetry_document
from scoredit.imgio import ImageIOError, write_png
from scoredit.metrics import run_benchmark
from scoredit.promptdiff import PromptDiffError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_TRANSPORT = 3
EXIT_PROTOCOL = 4
EXIT_RUNTIME = 5

_EXIT_CODE_DOC = """\
exit codes:
  0  success
  2  configuration or usage error
  3  transport failure (backend unreachable)
  4  protocol violation or version mismatch
  5  backend or runtime failure
"""

# flag name -> config key (None means same name with dashes swapped)
_ENGINE_FLAGS: dict[str, dict[str, Any]] = {
    "steps": {"type": int},
    "lr": {"type": float},
    "lambda": {"type": float, "dest": "lambda_cfg"},
    "ema-alpha": {"type": float},
    "eta0": {"type": float},
    "eta-decay": {"type": float},
    "gamma-lo": {"type": float},
    "gamma-hi": {"type": float},
    "gamma-span": {"type": float},
    "t-min": {"type": int},
    "t-max": {"type": int},
    "cfg-omega": {"type": float},
    "loss-mode": {"type": str, "choices": ["sbp", "dds", "sds"]},
    "max-resamples": {"type": int},
    "seed": {"type": int},
}
_TOGGLE_FLAGS = ["use-mask", "use-ema", "use-filter", "use-normalize", "use-anneal"]


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="flat TOML-style config file")
    group = parser.add_argument_group("engine configuration (override config file)")
    for flag, spec in _ENGINE_FLAGS.items():
        kwargs = dict(spec)
        dest = kwargs.pop("dest", flag.replace("-", "_"))
        group.add_argument(f"--{flag}", dest=dest, default=None, **kwargs)
    for flag in _TOGGLE_FLAGS:
        group.add_argument(
            f"--{flag}",
            dest=flag.replace("-", "_"),
            action=argparse.BooleanOptionalAction,
            default=None,
        )


def _cli_config_overrides(args: argparse.Namespace) -> dict[str, Any]:
    out: dict[str, Any] = {}
    for flag, spec in _ENGINE_FLAGS.items():
        dest = spec.get("dest", flag.replace("-", "_"))
        value = getattr(args, dest)
        if value is not None:
            out[flag.replace("-", "_")] = value
    for flag in _TOGGLE_FLAGS:
        value = getattr(args, flag.replace("-", "_"))
        if value is not None:
            out[flag.replace("-", "_")] = value
    return out


def build_engine_config(args: argparse.Namespace) -> EngineConfig:
    file_map: dict[str, Any] = {}
    if args.config:
        file_map = load_config_file(args.config)
    known = set(EngineConfig.field_keys())
    engine_file_map = {k: v for k, v in file_map.items() if k in known}
    unknown = set(file_map) - known - _TOOL_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    return EngineConfig.from_mappings(engine_file_map, _cli_config_overrides(args))


_TOOL_KEYS = {"backend", "world", "workers", "out", "out_dir", "min_count",
              "mask_dump_every", "mask_dump_dir", "nouns"}


def _tool_option(args: argparse.Namespace, name: str, default: Any) -> Any:
    """Resolve a tool-level option with CLI > file > default precedence."""
    cli_value = getattr(args, name, None)
    if cli_value is not None:
        return cli_value
    if args.config:
        file_map = load_config_file(args.config)
        if name in file_map:
            return file_map[name]
    return default


def make_backend(spec: str, world_path: str | None) -> DenoiserBackend:
    if spec.startswith(("http://", "https://")):
        return RemoteBackend(spec)
    if spec == "analytic":
        if world_path:
            with open(world_path, "r", encoding="utf-8") as fh:
                return AnalyticBackend(world_from_json(fh.read()))
        return AnalyticBackend(demo_world())
    raise ConfigError(f"unknown backend {spec!r}: use 'analytic' or a service URL")


def cmd_edit(args: argparse.Namespace) -> int:
    cfg = build_engine_config(args)
    backend = make_backend(
        _tool_option(args, "backend", "analytic"), _tool_option(args, "world", None)
    )
    nouns = _tool_option(args, "nouns", None)
    if isinstance(nouns, str):
        nouns = [n.strip() for n in nouns.split(",") if n.strip()]
    req = EditRequest(
        source_image=args.image,
        y_src=args.src_prompt,
        y_tgt=args.tgt_prompt,
        config=cfg,
        nouns=nouns,
        mask_dump_dir=_tool_option(args, "mask_dump_dir", None),
        mask_dump_every=int(_tool_option(args, "mask_dump_every", 0)),
    )
    result = run_edit(req, backend)
    out_png = _tool_option(args, "out", "edited.png")
    telemetry_path = args.telemetry or f"{out_png}.telemetry.json"
    write_png(result.image, out_png)
    with open(telemetry_path, "w", encoding="utf-8") as fh:
        json.dump(telemetry_document(result, cfg), fh, indent=2, sort_keys=True)
        fh.write("\n")
    accepted = sum(r.accepted for r in result.telemetry)
    print(
        f"wrote {out_png} and {telemetry_path} "
        f"({accepted}/{len(result.telemetry)} steps accepted, "
        f"{result.wall_time_s:.2f}s)"
    )
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = build_engine_config(args)
    backend = make_backend(
        _tool_option(args, "backend", "analytic"), _tool_option(args, "world", None)
    )
    out_dir = _tool_option(args, "out_dir", "eval_out")
    report = run_benchmark(
        args.manifest,
        cfg,
        backend,
        workers=int(_tool_option(args, "workers", 1)),
        min_count=int(_tool_option(args, "min_count", 30)),
        out_dir=out_dir,
    )
    for warning in report.warnings:
        print(f"warning: {warning}", file=sys.stderr)
    agg = report.aggregate
    print(f"examples: {agg['examples_ok']} ok, {agg['examples_failed']} failed")
    for key in ("mean_clip_t", "mean_clip_r", "clip_auc", "l1_star", "clip_i_star"):
        if key in agg:
            print(f"{key:>12}: {agg[key]:.6f}")
    print(f"report written to {out_dir}/")
    return EXIT_OK


def cmd_handshake(args: argparse.Namespace) -> int:
    backend = make_backend(
        _tool_option(args, "backend", "analytic"), _tool_option(args, "world", None)
    )
    hs = backend.handshake()
    doc = {
        "protocol": hs.protocol,
        "latent_shape": list(hs.latent_shape),
        "attention": {
            "self_resolution": hs.attention.self_resolution,
            "cross_resolution": hs.attention.cross_resolution,
            "self_layers": hs.attention.self_layers,
            "cross_layers": hs.attention.cross_layers,
        },
        "capabilities": {
            "encode": hs.capabilities.encode,
            "decode": hs.capabilities.decode,
            "attention": hs.capabilities.attention,
            "embeddings": hs.capabilities.embeddings,
            "tokenize": hs.capabilities.tokenize,
        },
        "schedule_endpoints": [hs.schedule.at(0), hs.schedule.at(999)],
    }
    print(json.dumps(doc, indent=2))
    return EXIT_OK


DEMO_CONFIG = """\
# configuration for edits against the bundled analytic demo world
steps = 100
lr = 1.0          # demo-world latents are O(1); production denoisers use 2000
seed = 0
"""


def cmd_demo_world(args: argparse.Namespace) -> int:
    import os

    out_dir = args.out_dir
    os.makedirs(out_dir, exist_ok=True)
    world = demo_world()
    backend = AnalyticBackend(world)
    with open(os.path.join(out_dir, "world.json"), "w", encoding="utf-8") as fh:
        fh.write(world_to_json(world))
    source = backend.decode(world.components[0].mean)
    write_png(source, os.path.join(out_dir, "source.png"))
    with open(os.path.join(out_dir, "config.toml"), "w", encoding="utf-8") as fh:
        fh.write(DEMO_CONFIG)
    manifest_rows = [
        {
            "id": "boulder",
            "image": "source.png",
            "y_src": DEMO_SOURCE_PROMPT,
            "y_tgt": DEMO_TARGET_PROMPT,
            "y_local": DEMO_TARGET_PROMPT,
            "instruction": "add a boulder to the meadow",
        },
        {
            "id": "pond",
            "image": "source.png",
            "y_src": DEMO_SOURCE_PROMPT,
            "y_tgt": DEMO_POND_PROMPT,
            "y_local": DEMO_POND_PROMPT,
            "instruction": "put a pond in the meadow",
        },
    ]
    with open(os.path.join(out_dir, "manifest.jsonl"), "w", encoding="utf-8") as fh:
        for row in manifest_rows:
            fh.write(json.dumps(row) + "\n")
    print(f"demo world written to {out_dir}/ (world.json, source.png, config.toml, manifest.jsonl)")
    print("try: scoredit edit "
          f"{out_dir}/source.png --src-prompt '{DEMO_SOURCE_PROMPT}' "
          f"--tgt-prompt '{DEMO_TARGET_PROMPT}' --world {out_dir}/world.json "
          f"--config {out_dir}/config.toml --out edited.png")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="scoredit",
        description="Score-distillation image editing",
        epilog=_EXIT_CODE_DOC,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--version", action="version", version=f"scoredit {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p_edit = sub.add_parser("edit", help="edit one image toward a target prompt",
                            epilog=_EXIT_CODE_DOC,
                            formatter_class=argparse.RawDescriptionHelpFormatter)
    p_edit.add_argument("image", help="source image (PNG or PPM, RGB)")
    p_edit.add_argument("--src-prompt", required=True)
    p_edit.add_argument("--tgt-prompt", required=True)
    p_edit.add_argument("--nouns", default=None,
                        help="comma-separated noun words (bypasses prompt diffing)")
    p_edit.add_argument("--backend", default=None, help="'analytic' or a service URL")
    p_edit.add_argument("--world", default=None, help="analytic world JSON file")
    p_edit.add_argument("--out", default=None, help="output PNG path (default edited.png)")
    p_edit.add_argument("--telemetry", default=None,
                        help="telemetry JSON path (default <out>.telemetry.json)")
    p_edit.add_argument("--mask-dump-dir", default=None)
    p_edit.add_argument("--mask-dump-every", type=int, default=None)
    _add_config_flags(p_edit)
    p_edit.set_defaults(func=cmd_edit)

    p_eval = sub.add_parser("eval", help="run the benchmark harness over a manifest",
                            epilog=_EXIT_CODE_DOC,
                            formatter_class=argparse.RawDescriptionHelpFormatter)
    p_eval.add_argument("manifest", help="JSONL manifest path")
    p_eval.add_argument("--backend", default=None)
    p_eval.add_argument("--world", default=None)
    p_eval.add_argument("--out-dir", default=None)
    p_eval.add_argument("--workers", type=int, default=None)
    p_eval.add_argument("--min-count", type=int, default=None,
                        help="minimum surviving examples per threshold")
    _add_config_flags(p_eval)
    p_eval.set_defaults(func=cmd_eval)

    p_hs = sub.add_parser("handshake", help="print the backend handshake")
    p_hs.add_argument("--backend", default=None)
    p_hs.add_argument("--world", default=None)
    p_hs.add_argument("--config", default=None)
    p_hs.set_defaults(func=cmd_handshake)

    p_demo = sub.add_parser("demo-world", help="write the analytic demo fixture")
    p_demo.add_argument("--out-dir", default="demo_world")
    p_demo.set_defaults(func=cmd_demo_world)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError, ImageIOError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TransportError as exc:
        print(f"transport error: {exc}", file=sys.stderr)
        return EXIT_TRANSPORT
    except ProtocolError as exc:
        print(f"protocol error: {exc}", file=sys.stderr)
        return EXIT_PROTOCOL
    except (BackendError, EngineError, PromptDiffError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
