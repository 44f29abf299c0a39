"""Command line for the feature exporter.

Exit codes: 0 success, 2 usage or input problem, 3 extraction/self-check
abort, 5 model retrieval failure.
"""

from __future__ import annotations

import argparse
import sys

from .errors import ExportError, InputError, RetrievalError
from .export import DEFAULT_MODEL_ID, ExportConfig, export


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="feature-export",
        description="Write one FPYR feature pyramid per manifest image.",
    )
    parser.add_argument("--manifest", required=True)
    parser.add_argument("--data-root", default=None)
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--model-id", default=DEFAULT_MODEL_ID)
    parser.add_argument("--timestep", type=int, default=0)
    parser.add_argument("--pathway", choices=["latent", "pixel"], default="latent")
    parser.add_argument(
        "--backend",
        choices=["hub", "surrogate"],
        default="hub",
        help="surrogate produces deterministic stand-in features at the real widths",
    )
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    cfg = ExportConfig(
        model_id=args.model_id,
        timestep=args.timestep,
        pathway=args.pathway,
        backend=args.backend,
        out_dir=args.out,
    )
    try:
        written = export(args.manifest, cfg, root_dir=args.data_root)
    except RetrievalError as e:
        print(f"retrieval error: {e}", file=sys.stderr)
        return 5
    except ExportError as e:
        print(f"export aborted: {e}", file=sys.stderr)
        return 3
    except (InputError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    print(f"wrote {len(written)} pyramids to {cfg.out_dir}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
