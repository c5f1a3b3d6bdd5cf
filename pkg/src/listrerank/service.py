"""JSON-over-HTTP rerank service.

``POST /rerank`` ranks passages for one query; ``GET /health`` reports the
loaded model. Request handling never mutates engine state, so the threaded
server can serve requests concurrently.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Any, Mapping

from .inference import IterConfig, RankMode, Reranker
from .model import Checkpoint

log = logging.getLogger(__name__)

DEFAULT_MAX_PASSAGES = 1000
DEFAULT_MAX_BODY_BYTES = 16 * 1024 * 1024
DEFAULT_HOST = "127.0.0.1"
DEFAULT_PORT = 8080
ENV_HOST = "LISTRERANK_HOST"
ENV_PORT = "LISTRERANK_PORT"


class ServiceError(Exception):
    def __init__(self, status: int, message: str):
        super().__init__(message)
        self.status = status
        self.message = message


@dataclass
class Engine:
    reranker: Reranker
    model_id: str
    iter_cfg: IterConfig = IterConfig()
    max_passages: int = DEFAULT_MAX_PASSAGES

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, iter_cfg: IterConfig = IterConfig(), **kw) -> "Engine":
        return cls(Reranker(ckpt.config, ckpt.params), ckpt.model_id, iter_cfg, **kw)

    @property
    def config_hash(self) -> str:
        doc = {
            "model": self.reranker.config.to_dict(),
            "alpha": self.iter_cfg.alpha,
            "beta": self.iter_cfg.beta,
            "max_passages": self.max_passages,
        }
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]

    def health(self) -> dict:
        return {"status": "ok", "model_id": self.model_id, "config_hash": self.config_hash}


def _parse_request(req: Any, max_passages: int) -> tuple[str, list[str], list[str], int | None, RankMode]:
    if not isinstance(req, Mapping):
        raise ServiceError(400, "request body must be a JSON object")
    query = req.get("query")
    if not isinstance(query, str):
        raise ServiceError(400, "'query' must be a string")
    passages = req.get("passages")
    if not isinstance(passages, list):
        raise ServiceError(400, "'passages' must be a list")
    if not passages:
        raise ServiceError(400, "'passages' must not be empty")
    if len(passages) > max_passages:
        raise ServiceError(413, f"{len(passages)} passages exceed the limit of {max_passages}")
    texts, ids = [], []
    for i, p in enumerate(passages):
        if isinstance(p, str):
            texts.append(p)
            ids.append(str(i))
        elif isinstance(p, Mapping) and isinstance(p.get("text"), str):
            texts.append(p["text"])
            pid = p.get("id", str(i))
            if not isinstance(pid, str):
                raise ServiceError(400, f"passage {i}: 'id' must be a string")
            ids.append(pid)
        else:
            raise ServiceError(400, f"passage {i} must be a string or an object with 'text'")
    top_k = req.get("top_k")
    if top_k is not None:
        if not isinstance(top_k, int) or isinstance(top_k, bool) or not 1 <= top_k <= len(texts):
            raise ServiceError(400, f"'top_k' must be an integer in [1, {len(texts)}]")
    try:
        mode = RankMode(req.get("mode", RankMode.ITERATIVE.value))
    except ValueError:
        raise ServiceError(400, "'mode' must be 'iterative' or 'direct'") from None
    return query, texts, ids, top_k, mode


def handle_rerank(req: Any, engine: Engine) -> dict:
    t0 = time.perf_counter()
    query, texts, ids, top_k, mode = _parse_request(req, engine.max_passages)
    result = engine.reranker.rerank(query, texts, mode, engine.iter_cfg, ids)
    results = [
        {"index": int(i), "id": ids[i], "score": float(result.scores[i]), "rank": int(result.ranks[i])}
        for i in result.order()
    ]
    if top_k is not None:
        results = results[:top_k]
    return {
        "results": results,
        "rounds": result.rounds,
        "model_id": engine.model_id,
        "latency_ms": (time.perf_counter() - t0) * 1000.0,
    }


RESPONSE_SCHEMA = {
    "type": "object",
    "required": ["results", "rounds", "model_id", "latency_ms"],
    "properties": {
        "results": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["index", "id", "score", "rank"],
                "properties": {
                    "index": {"type": "integer", "minimum": 0},
                    "id": {"type": "string"},
                    "score": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                    "rank": {"type": "integer", "minimum": 1},
                },
            },
        },
        "rounds": {"type": "integer", "minimum": 1},
        "model_id": {"type": "string"},
        "latency_ms": {"type": "number", "minimum": 0},
    },
}


def make_handler(engine: Engine, max_body_bytes: int = DEFAULT_MAX_BODY_BYTES):
    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"

        def _send(self, status: int, body: dict) -> None:
            data = json.dumps(body).encode("utf-8")
            self.send_response(status)
            self.send_header("Content-Type", "application/json; charset=utf-8")
            self.send_header("Content-Length", str(len(data)))
            self.end_headers()
            self.wfile.write(data)

        def do_GET(self):
            if self.path == "/health":
                self._send(200, engine.health())
            else:
                self._send(404, {"error": f"no route for GET {self.path}"})

        def do_POST(self):
            if self.path != "/rerank":
                self._send(404, {"error": f"no route for POST {self.path}"})
                return
            length = int(self.headers.get("Content-Length") or 0)
            if length > max_body_bytes:
                self.close_connection = True
                self._send(413, {"error": f"body of {length} bytes exceeds {max_body_bytes}"})
                return
            try:
                req = json.loads(self.rfile.read(length).decode("utf-8"))
            except (UnicodeDecodeError, json.JSONDecodeError) as exc:
                self._send(400, {"error": f"invalid JSON: {exc}"})
                return
            try:
                self._send(200, handle_rerank(req, engine))
            except ServiceError as exc:
                self._send(exc.status, {"error": exc.message})
            except Exception as exc:  # noqa: BLE001
                log.exception("rerank failed")
                self._send(500, {"error": str(exc)})

        def log_message(self, fmt, *args):
            log.info("%s - %s", self.address_string(), fmt % args)

    return Handler


def resolve_bind(host: str | None = None, port: int | None = None) -> tuple[str, int]:
    """Flag values win over environment variables, which win over defaults."""
    host = host or os.environ.get(ENV_HOST) or DEFAULT_HOST
    if port is None:
        port = int(os.environ.get(ENV_PORT, DEFAULT_PORT))
    return host, port


def make_server(engine: Engine, host: str | None = None, port: int | None = None) -> ThreadingHTTPServer:
    server = ThreadingHTTPServer(resolve_bind(host, port), make_handler(engine))
    server.daemon_threads = True
    return server
