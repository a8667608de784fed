"""Minimal local server speaking the chat-completions wire format.

Used for integration tests and for dry-running HTTP configs without a model::

    python -m lexcon.stub_server --port 8089 --reply "A cat sat."
"""

from __future__ import annotations

import argparse
import json
import threading
import time
from collections import deque
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Optional, Union

# A scripted step is either a completion string or (status, body) to return verbatim.
Step = Union[str, tuple[int, str]]


class StubCompletionServer:
    def __init__(self, reply: str = "ok", steps: Optional[list[Step]] = None,
                 host: str = "127.0.0.1", port: int = 0, delay_s: float = 0.0):
        self.reply = reply
        self.delay_s = delay_s
        self.steps: deque[Step] = deque(steps or [])
        self.requests: list[dict] = []
        self.headers: list[dict] = []
        self._lock = threading.Lock()
        outer = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, *args):  # silence stderr
                pass

            def do_POST(self):
                length = int(self.headers.get("Content-Length", 0))
                raw = self.rfile.read(length)
                if not self.path.rstrip("/").endswith("/chat/completions"):
                    self._send(404, '{"error": "not found"}')
                    return
                try:
                    body = json.loads(raw)
                except ValueError:
                    self._send(400, '{"error": "bad json"}')
                    return
                with outer._lock:
                    outer.requests.append(body)
                    outer.headers.append(dict(self.headers))
                    step = outer.steps.popleft() if outer.steps else outer.reply
                if outer.delay_s:
                    time.sleep(outer.delay_s)
                if isinstance(step, tuple):
                    self._send(*step)
                else:
                    self._send(200, json.dumps(completion_body(step, body.get("model", "stub"))))

            def _send(self, status: int, text: str):
                data = text.encode("utf-8")
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

        self.httpd = ThreadingHTTPServer((host, port), Handler)
        self._thread: Optional[threading.Thread] = None

    @property
    def base_url(self) -> str:
        host, port = self.httpd.server_address[:2]
        return f"http://{host}:{port}"

    def start(self) -> "StubCompletionServer":
        self._thread = threading.Thread(target=self.httpd.serve_forever, daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self.httpd.shutdown()
        self.httpd.server_close()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()


def completion_body(content: str, model: str = "stub") -> dict:
    return {
        "id": "chatcmpl-stub",
        "object": "chat.completion",
        "model": model,
        "choices": [{"index": 0, "message": {"role": "assistant", "content": content},
                     "finish_reason": "stop"}],
        "usage": {"prompt_tokens": 0, "completion_tokens": len(content.split()),
                  "total_tokens": len(content.split())},
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--host", default="127.0.0.1")
    ap.add_argument("--port", type=int, default=8089)
    ap.add_argument("--reply", default="ok", help="completion returned for every request")
    args = ap.parse_args(argv)
    server = StubCompletionServer(args.reply, host=args.host, port=args.port)
    print(f"serving on {server.base_url}")
    try:
        server.httpd.serve_forever()
    except KeyboardInterrupt:
        pass


if __name__ == "__main__":
    main()
