"""CLI: encode an image dataset into a ULS1 embedding stream."""
from __future__ import annotations

import argparse
import sys

from .errors import ExporterError
from .export import DEFAULT_TEMPLATE, ENSEMBLE_TEMPLATES, ExportSpec, export


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="uls-export",
        description="Encode class-labeled images with a frozen vision-language "
        "model and write a ULS1 embedding stream.",
    )
    src = parser.add_mutually_exclusive_group(required=True)
    src.add_argument("--image-root", help="directory with one subfolder per class")
    src.add_argument("--manifest", help="TSV manifest: path<TAB>label per line")
    parser.add_argument(
        "--model",
        default="openai/clip-vit-base-patch16",
        help="checkpoint id, or stub:<dim>[:<seed>] for the offline encoder",
    )
    parser.add_argument("-o", "--out", required=True, help="ULS1 output path")
    parser.add_argument("--views", type=int, default=1, help="views per image (view 0 is canonical)")
    parser.add_argument("--template", action="append", help="prompt template with {} placeholder")
    parser.add_argument("--ensemble", action="store_true", help="use the built-in template ensemble")
    parser.add_argument("--seed", type=int, default=0, help="augmentation seed")
    parser.add_argument("--skip-log", default=None, help="write skipped image paths here")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.ensemble:
        templates = ENSEMBLE_TEMPLATES
    elif args.template:
        templates = tuple(args.template)
    else:
        templates = (DEFAULT_TEMPLATE,)
    try:
        spec = ExportSpec(
            model=args.model,
            out=args.out,
            image_root=args.image_root,
            manifest=args.manifest,
            views=args.views,
            templates=templates,
            seed=args.seed,
        )
        result = export(spec)
    except ExporterError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    if args.skip_log is not None:
        with open(args.skip_log, "w") as f:
            f.writelines(p + "\n" for p in result.skipped)
    print(
        f"wrote {args.out}: C={len(result.class_names)} N={result.n_written} "
        f"views={args.views} skipped={result.n_skipped}"
    )
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
