"""CLI: embed-export --images DIR --out DIR [--config spec.json | flags]."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .export import BranchSpec, ExportError, ExportSpec, export_bank


def _parse_branch(text: str) -> BranchSpec:
    """'id:backend[:dim-or-model]' e.g. 'clip:projection:512',
    'vae:pixel', 'dino:torchvision:resnet18'."""
    parts = text.split(":")
    if len(parts) < 2:
        raise ExportError(f"bad branch spec {text!r}; use id:backend[:arg]")
    bid, backend = parts[0], parts[1]
    arg = parts[2] if len(parts) > 2 else None
    if backend == "projection":
        if arg is None:
            raise ExportError(f"branch {bid}: projection needs a dim")
        return BranchSpec(branch_id=bid, backend=backend, dim=int(arg))
    if backend == "torchvision":
        return BranchSpec(branch_id=bid, backend=backend, model_name=arg)
    return BranchSpec(branch_id=bid, backend=backend)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="embed-export",
        description="Encode an image folder into an embedding bank.")
    p.add_argument("--images", required=True, help="image directory")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--config", help="JSON export spec; flags override it")
    p.add_argument("--branch", action="append", default=[],
                   help="id:backend[:arg]; repeatable")
    p.add_argument("--size", type=int, help="square resize, divisible by 8")
    p.add_argument("--test-fraction", dest="test_fraction", type=float)
    p.add_argument("--seed", type=int)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    cfg = {}
    if args.config:
        cfg = json.loads(Path(args.config).read_text())
    branches = [BranchSpec(**b) for b in cfg.get("branches", [])]
    if args.branch:
        branches = [_parse_branch(t) for t in args.branch]
    spec = ExportSpec(
        branches=branches,
        image_size=args.size or cfg.get("image_size", 128),
        test_fraction=args.test_fraction
        if args.test_fraction is not None else cfg.get("test_fraction", 0.5),
        seed=args.seed if args.seed is not None else cfg.get("seed", 0),
    )
    try:
        manifest = export_bank(args.images, spec, args.out)
    except ExportError as e:
        print(f"ERROR export: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"ERROR io: {e}", file=sys.stderr)
        return 5
    dims = ", ".join(f"{b['branch_id']}={b['dim']}"
                     for b in manifest["branches"])
    print(f"exported {manifest['num_stimuli']} stimuli ({dims}) "
          f"to {args.out}  seed: {spec.seed}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
