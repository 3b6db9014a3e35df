"""Command line for the feature exporter."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .encoders import ENCODER_SPECS
from .export import ExportError, ExportJob, run_export


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gve-export",
        description="Export dense patch features from a pretrained vision encoder.",
    )
    parser.add_argument("--encoder", required=True, choices=sorted(ENCODER_SPECS))
    parser.add_argument("--manifest", required=True, help="input CSV (id,path,label,split)")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--device", default="cpu", help="torch device hint")
    parser.add_argument("--batch-size", type=int, default=8)
    parser.add_argument(
        "--model-id",
        default=None,
        help="hub id or local path of the pretrained weights (offline use)",
    )
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    job = ExportJob(
        encoder=args.encoder,
        manifest_path=Path(args.manifest),
        out_dir=Path(args.out),
        device=args.device,
        batch_size=args.batch_size,
    )
    try:
        from .encoders import load_encoder

        encoder = load_encoder(args.encoder, device=args.device, model_id=args.model_id)
        written = run_export(job, encoder=encoder)
    except (ExportError, RuntimeError, ValueError) as exc:
        print(f"gve-export: {exc}", file=sys.stderr)
        return 1
    print(f"gve-export: wrote {written} feature file(s) to {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
