"""Command-line entry point: ``listrerank {train,rerank,eval,serve,synth}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .dataset import dumps_dataset, load_dataset, synthesize_dataset
from .evalkit import evaluate, format_table
from .inference import IterConfig, Reranker
from .model import init_params, load_checkpoint, save_checkpoint
from .service import Engine, handle_rerank, make_server
from .trainer import load_train_config, train


def _iter_cfg(args) -> IterConfig:
    return IterConfig(alpha=args.alpha, beta=args.beta)


def cmd_train(args) -> int:
    train_cfg, model_cfg = load_train_config(args.config)
    if args.init:
        ckpt = load_checkpoint(args.init)
        model_cfg, params = ckpt.config, ckpt.params
    else:
        params = init_params(model_cfg)
    datasets = []
    for i, stage in enumerate(train_cfg.stages):
        path = stage.data or args.data
        if path is None:
            raise ValueError(f"stage {i} has no data file; pass --data or set 'data' in the stage config")
        datasets.append(load_dataset(path))
    params, records = train(params, model_cfg, datasets, train_cfg)
    save_checkpoint(args.out, model_cfg, params, meta={"steps": len(records)})
    if records:
        last = records[-1]
        print(json.dumps({"steps": last.step, "final_loss": last.loss, "checkpoint": str(args.out)}))
    return 0


def cmd_rerank(args) -> int:
    ckpt = load_checkpoint(args.model)
    engine = Engine.from_checkpoint(ckpt, _iter_cfg(args), max_passages=args.max_passages)
    raw = sys.stdin.read() if args.input in (None, "-") else Path(args.input).read_text(encoding="utf-8")
    response = handle_rerank(json.loads(raw), engine)
    print(json.dumps(response, indent=2))
    return 0


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.model)
    reranker = Reranker(ckpt.config, ckpt.params)
    report = evaluate(reranker, load_dataset(args.data), _iter_cfg(args), args.mode)
    if args.json:
        Path(args.json).write_text(report.to_json(), encoding="utf-8")
    row = {
        "model_id": ckpt.model_id,
        "mode": report.mode,
        "queries": report.n_queries,
        "skipped": len(report.skipped),
        "mAP": report.map,
        "iterative_applicable": report.iterative_applicable,
        "runtime_s": report.runtime_s,
    }
    print(format_table([row]))
    return 0


def cmd_serve(args) -> int:
    ckpt = load_checkpoint(args.model)
    engine = Engine.from_checkpoint(ckpt, _iter_cfg(args), max_passages=args.max_passages)
    server = make_server(engine, args.host, args.port)
    host, port = server.server_address[:2]
    print(f"serving model {engine.model_id} on http://{host}:{port}", file=sys.stderr, flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return 0


def cmd_synth(args) -> int:
    ds = synthesize_dataset(
        args.seed, args.queries, args.passages, args.topics, args.overlap, args.max_positives
    )
    text = dumps_dataset(ds)
    if args.out in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(args.out).write_text(text, encoding="utf-8")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="listrerank", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_iter(p):
        p.add_argument("--alpha", type=int, default=20, help="iterate while more passages than this remain")
        p.add_argument("--beta", type=float, default=0.2, help="fraction of passages ranked per round")

    p = sub.add_parser("train", help="train a model from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--data", help="dataset used by stages that name no data file")
    p.add_argument("--init", help="checkpoint to start from")
    p.add_argument("--out", required=True, help="checkpoint to write")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("rerank", help="rank one request read from a file or stdin")
    p.add_argument("--model", required=True)
    p.add_argument("--input", help="request JSON file; '-' or omitted reads stdin")
    p.add_argument("--max-passages", type=int, default=1000)
    add_iter(p)
    p.set_defaults(func=cmd_rerank)

    p = sub.add_parser("eval", help="mAP of a checkpoint on a dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--mode", choices=["iterative", "direct"], default="iterative")
    p.add_argument("--json", help="also write the full report here")
    add_iter(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("serve", help="run the HTTP rerank service")
    p.add_argument("--model", required=True)
    p.add_argument("--host", help="bind address (env LISTRERANK_HOST)")
    p.add_argument("--port", type=int, help="bind port (env LISTRERANK_PORT)")
    p.add_argument("--max-passages", type=int, default=1000)
    add_iter(p)
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("synth", help="write a synthetic dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--queries", type=int, default=400)
    p.add_argument("--passages", type=int, default=8)
    p.add_argument("--topics", type=int, default=40)
    p.add_argument("--overlap", type=float, default=0.25, help="hard-negative word overlap")
    p.add_argument("--max-positives", type=int, default=3)
    p.add_argument("--out", help="output path; '-' or omitted writes stdout")
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001
        print(f"listrerank {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
