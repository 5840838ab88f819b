"""Export CLI.

    newsrec-export export --model <id-or-path> --pooling {cls,last-l} \
        --l 10 --news <news.tsv> --out <store.nre1> [--field title]
    newsrec-export export-weights --model <id-or-path> --depth 4 \
        --out <weights.ntc>
"""

import argparse
import sys

from .exporter import (CheckpointUnavailable, ExportJob, SequenceTooShort,
                       TokenizerMismatch, UnsupportedArchitecture,
                       export_mini_transformer, run_export)


def build_parser():
    parser = argparse.ArgumentParser(prog="newsrec-export", description=__doc__)
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("export", help="write an NRE1 news-embedding store")
    p.add_argument("--model", required=True)
    p.add_argument("--pooling", choices=["cls", "last-l"], required=True)
    p.add_argument("--l", type=int, default=10, dest="last_tokens")
    p.add_argument("--news", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--field", choices=["title", "abstract"], default="title")
    p.add_argument("--batch-size", type=int, default=16)

    p = sub.add_parser("export-weights",
                       help="write transformer weights to a container")
    p.add_argument("--model", required=True)
    p.add_argument("--depth", type=int, required=True)
    p.add_argument("--out", required=True)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.verb == "export":
            job = ExportJob(model_id=args.model, pooling=args.pooling,
                            news_path=args.news, output_path=args.out,
                            last_tokens=args.last_tokens, text_field=args.field,
                            batch_size=args.batch_size)
            vectors = run_export(job)
            print(f"wrote {len(vectors)} vectors to {args.out}")
        else:
            tensors = export_mini_transformer(args.model, args.depth, args.out)
            print(f"wrote {len(tensors)} tensors to {args.out}")
        return 0
    except (ValueError, SequenceTooShort) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except (CheckpointUnavailable, TokenizerMismatch,
            UnsupportedArchitecture, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
