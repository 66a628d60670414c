"""Command line entry point: rewardserve --kind formula --port 8731."""

from __future__ import annotations

import argparse
import sys

from .models import build_model
from .server import serve


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rewardserve",
        description="Serve a reward model over the reward wire protocol.",
    )
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, default=8731)
    parser.add_argument("--kind", choices=["formula", "classifier"], default="formula")
    parser.add_argument(
        "--model-id",
        default="distilbert-base-uncased-finetuned-sst-2-english",
        help="classifier kind only: model identifier",
    )
    parser.add_argument(
        "--revision", default="af0f99b", help="classifier kind only: revision pin"
    )
    parser.add_argument(
        "--device", default="cpu", help="classifier kind only: torch device string"
    )
    parser.add_argument(
        "--bearer-token-env",
        default=None,
        metavar="NAME",
        help="require Authorization: Bearer <value of this env var> on score calls",
    )
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.kind == "formula":
        model = build_model("formula")
    else:
        model = build_model(
            "classifier",
            model_id=args.model_id,
            revision=args.revision,
            device=args.device,
        )
    print(
        f"serving {model.fingerprint()} on http://{args.host}:{args.port}",
        file=sys.stderr,
    )
    try:
        serve(args.host, args.port, model, args.bearer_token_env)
    except KeyboardInterrupt:
        pass
    except OSError as exc:
        print(f"error: cannot bind {args.host}:{args.port}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
