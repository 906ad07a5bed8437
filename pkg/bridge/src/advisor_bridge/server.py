"""Newline-delimited JSON advisor server.

One JSON object per line in, one per line out, strictly in request order.
Request kinds: recommend (scene_text, obs), feedback (sample), shutdown.
Every response echoes the request id; a request that cannot be served gets
{"id": ..., "error": ...} and the connection keeps going. Logging goes to
stderr so stdout stays a clean protocol channel.

A real model can replace the stub: any object with
recommend(obs, scene_text) -> Recommendation and feedback(sample) -> str|None
plugs into serve_stdio / serve_tcp. The stub is the deterministic rule table
plus feedback-adapted overrides.
"""

import json
import logging
import socketserver
import sys

from .rules import Recommendation, check_obs, recommend
from .store import FeedbackStore

log = logging.getLogger("advisor_bridge")


class StubAdvisor:
    def __init__(self, store: FeedbackStore | None = None):
        self.store = store if store is not None else FeedbackStore()

    def recommend(self, obs, scene_text: str = "") -> Recommendation:
        return recommend(obs, self.store.overrides)

    def feedback(self, sample) -> str | None:
        return self.store.add(sample)


def handle_request(obj: dict, advisor) -> tuple[dict, bool]:
    """Map one request object to (response object, keep serving)."""
    rid = obj.get("id")
    kind = obj.get("kind")
    if kind == "recommend":
        obs = obj.get("obs")
        problem = check_obs(obs)
        if problem is not None:
            return {"id": rid, "error": problem}, True
        rec = advisor.recommend(obs, obj.get("scene_text", ""))
        return {"id": rid, "action": rec.action, "confidence": rec.confidence,
                "rationale": rec.rationale}, True
    if kind == "feedback":
        warning = advisor.feedback(obj.get("sample"))
        if warning is not None:
            log.warning(warning)
        return {"id": rid, "ok": True}, True
    if kind == "shutdown":
        return {"id": rid, "ok": True}, False
    return {"id": rid, "error": f"unknown request kind: {kind!r}"}, True


def serve_lines(reader, writer, advisor) -> bool:
    """Drive the lockstep request/response loop; True when a shutdown
    request ended it, False on plain EOF."""
    while True:
        line = reader.readline()
        if not line:
            return False
        line = line.strip()
        if not line:
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            obj = None
            response, keep = {"id": None,
                              "error": f"malformed request: {exc.msg}"}, True
        if obj is not None:
            if isinstance(obj, dict):
                response, keep = handle_request(obj, advisor)
            else:
                response, keep = {"id": None,
                                  "error": "request must be a JSON object"}, True
        writer.write(json.dumps(response, ensure_ascii=False) + "\n")
        writer.flush()
        if not keep:
            return True


def serve_stdio(advisor=None) -> int:
    advisor = advisor if advisor is not None else StubAdvisor()
    serve_lines(sys.stdin, sys.stdout, advisor)
    return 0


def serve_tcp(host: str, port: int, advisor=None) -> int:
    """Serve one connection at a time; a shutdown request stops the server."""
    advisor = advisor if advisor is not None else StubAdvisor()

    class Handler(socketserver.StreamRequestHandler):
        def handle(self):
            reader = self.rfile
            writer = self.wfile

            class _Text:
                # byte streams under the line protocol; utf-8 both ways
                @staticmethod
                def readline():
                    return reader.readline().decode("utf-8", "replace")

                @staticmethod
                def write(text):
                    writer.write(text.encode("utf-8"))

                @staticmethod
                def flush():
                    writer.flush()

            if serve_lines(_Text, _Text, advisor):
                self.server._saw_shutdown = True

    with socketserver.TCPServer((host, port), Handler) as server:
        server._saw_shutdown = False
        log.info("serving on %s:%d", *server.server_address)
        while not server._saw_shutdown:
            server.handle_request()
    return 0
