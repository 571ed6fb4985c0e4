"""In-process HTTP stubs: an OpenAI-style chat endpoint and a search endpoint.

Used by the test-suite and for offline demos of the remote backends.
"""

from __future__ import annotations

import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Callable, Optional

from .protocol import Kind
from .retrieval import LexicalRetriever

ChatScript = Callable[[list[dict]], str]


def default_chat_script(messages: list[dict]) -> str:
    """Search once, then judge: the shape of a typical tool-using verification."""
    transcript = messages[-1]["content"] if messages[-1]["role"] == "assistant" else ""
    if Kind.INFORMATION.close_tag not in transcript:
        return (
            "<think>The final step states a sum. Let's search to confirm the addition fact.</think>"
            "<search>7 plus 5</search>"
        )
    return "<think>The retrieved fact card agrees with the claim.</think><answer>1</answer>"


class _Server:
    def __init__(self, handler: type[BaseHTTPRequestHandler]) -> None:
        self.httpd = ThreadingHTTPServer(("127.0.0.1", 0), handler)
        self.thread = threading.Thread(target=self.httpd.serve_forever, daemon=True)

    @property
    def port(self) -> int:
        return self.httpd.server_address[1]

    def start(self):
        self.thread.start()
        return self

    def stop(self) -> None:
        self.httpd.shutdown()
        self.httpd.server_close()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()


def _json_handler(respond: Callable[[str, dict], tuple[int, dict]], log: list) -> type[BaseHTTPRequestHandler]:
    class Handler(BaseHTTPRequestHandler):
        def do_POST(self) -> None:  # noqa: N802
            length = int(self.headers.get("Content-Length", 0))
            try:
                body = json.loads(self.rfile.read(length) or b"{}")
            except ValueError:
                self._send(400, {"error": "invalid json"})
                return
            log.append({"path": self.path, "body": body, "headers": dict(self.headers)})
            status, payload = respond(self.path, body)
            self._send(status, payload)

        def _send(self, status: int, payload: dict) -> None:
            data = json.dumps(payload).encode("utf-8")
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(data)))
            self.end_headers()
            self.wfile.write(data)

        def log_message(self, *args) -> None:
            pass

    return Handler


class StubChatServer(_Server):
    """Minimal ``POST /v1/chat/completions``.

    Matched stop strings are stripped from the returned content, as OpenAI
    does; ``report_stop_reason`` adds vLLM's ``stop_reason`` field. Requests
    with ``logprobs`` get ``top_logprobs`` for the ``1``/``0`` tokens built
    from ``answer_logprobs``.
    """

    def __init__(
        self,
        script: ChatScript = default_chat_script,
        answer_logprobs: Optional[tuple[float, float]] = (-0.1, -2.4),
        report_stop_reason: bool = False,
    ) -> None:
        self.script = script
        self.answer_logprobs = answer_logprobs
        self.report_stop_reason = report_stop_reason
        self.requests: list[dict] = []
        super().__init__(_json_handler(self._respond, self.requests))

    @property
    def base_url(self) -> str:
        return f"http://127.0.0.1:{self.port}/v1"

    def _respond(self, path: str, body: dict) -> tuple[int, dict]:
        if not path.endswith("/chat/completions"):
            return 404, {"error": "not found"}
        if body.get("logprobs"):
            if self.answer_logprobs is None:
                return 200, {"choices": [{"message": {"content": "1"}, "finish_reason": "length", "logprobs": None}]}
            lp1, lp0 = self.answer_logprobs
            top = [{"token": "1", "logprob": lp1}, {"token": "0", "logprob": lp0}]
            content = [{"token": "1" if lp1 >= lp0 else "0", "logprob": max(lp1, lp0), "top_logprobs": top}]
            return 200, {"choices": [{"message": {"content": content[0]["token"]}, "finish_reason": "length",
                                      "logprobs": {"content": content}}]}
        text = self.script(body["messages"])
        stop_reason = None
        for stop in body.get("stop") or []:
            idx = text.find(stop)
            if idx != -1:
                text, stop_reason = text[:idx], stop
                break
        choice = {"index": 0, "message": {"role": "assistant", "content": text},
                  "finish_reason": "stop"}
        if self.report_stop_reason:
            choice["stop_reason"] = stop_reason
        return 200, {"id": "stub", "object": "chat.completion", "model": body.get("model"), "choices": [choice]}


class StubSearchServer(_Server):
    """``POST /search`` with ``{"query", "k"}`` answered from a local index."""

    def __init__(self, retriever: LexicalRetriever) -> None:
        self.retriever = retriever
        self.requests: list[dict] = []
        super().__init__(_json_handler(self._respond, self.requests))

    @property
    def endpoint(self) -> str:
        return f"http://127.0.0.1:{self.port}/search"

    def _respond(self, path: str, body: dict) -> tuple[int, dict]:
        hits = self.retriever.search(body["query"], int(body.get("k", 3)))
        return 200, {
            "hits": [{"id": h.doc.id, "title": h.doc.title, "text": h.doc.text, "score": h.score} for h in hits]
        }
