"""CLI for the embedding exporter.

Exit codes: 0 success, 1 usage, 2 unresolvable model or malformed input.
"""

from __future__ import annotations

import argparse
import json
import sys

from .exporter import ExportError, ExportSpec, ModelError, export


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise _UsageExit()


class _UsageExit(Exception):
    pass


def _build_parser() -> _Parser:
    parser = _Parser(prog="sbmoe-export",
                     description="Encode an id<TAB>text collection and write an SBMV store")
    parser.add_argument("--model", required=True,
                        help="encoder name or local path resolvable by transformers")
    parser.add_argument("--input", required=True, help="input TSV (id<TAB>text per line)")
    parser.add_argument("--output", required=True, help="output SBMV path")
    parser.add_argument("--pooling", choices=["mean", "cls"], default="mean",
                        help="sentence pooling over token states (default mean)")
    parser.add_argument("--batch-size", type=int, default=16,
                        help="encoding batch size (default 16)")
    parser.add_argument("--max-length", type=int, default=256,
                        help="max tokenized sequence length (default 256)")
    return parser


def main(argv=None) -> int:
    try:
        args = _build_parser().parse_args(argv)
    except _UsageExit:
        return 1
    try:
        spec = ExportSpec(model=args.model, input_tsv=args.input, output=args.output,
                          pooling=args.pooling, batch_size=args.batch_size,
                          max_length=args.max_length)
        summary = export(spec)
    except (ExportError, ModelError, FileNotFoundError) as exc:
        print(f"sbmoe-export: {exc}", file=sys.stderr)
        return 2
    print(json.dumps(summary, sort_keys=True))
    return 0


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
