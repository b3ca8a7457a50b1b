"""Run the inference service: ``python -m sdservice --backbone tiny``."""

from __future__ import annotations

import argparse
import sys

import uvicorn

from sdservice.app import ServiceConfig, create_app
from sdservice.backbones import BackboneError, make_backbone


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="sdservice",
                                     description="denoiser inference service")
    parser.add_argument("--backbone", default="tiny", choices=["tiny", "pretrained"])
    parser.add_argument("--device", default="cpu")
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, default=8799)
    args = parser.parse_args(argv)
    try:
        backbone = make_backbone(args.backbone, device=args.device)
        app = create_app(backbone, ServiceConfig(
            backbone=args.backbone, device=args.device,
            host=args.host, port=args.port,
        ))
    except BackboneError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


if __name__ == "__main__":
    sys.exit(main())
