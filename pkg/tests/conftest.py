import base64
import hashlib
import json
import math
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

import pytest

from vlmrerank.datamodel import CandidateList
from vlmrerank.simbackend import synthesize_dataset

FIXTURES = Path(__file__).parent / "fixtures"


def stub_yes_probability(candidate_id: str) -> float:
    """P(Yes) the stub server assigns to an aerial image, derived from its id."""
    h = int(hashlib.sha256(candidate_id.encode()).hexdigest()[:8], 16)
    return 0.05 + 0.9 * (h % 1000) / 999


def image_bytes(image_id: str) -> bytes:
    return b"\x89PNG-stub:" + image_id.encode()


def _image_ids(body: dict) -> list[str]:
    ids = []
    for msg in body["messages"]:
        if isinstance(msg["content"], str):
            continue
        for part in msg["content"]:
            if part["type"] == "image_url":
                url = part["image_url"]["url"]
                data = base64.b64decode(url.split(",", 1)[1])
                ids.append(data.split(b":", 1)[1].decode())
    return ids


class StubVlm:
    """Deterministic chat-completion server.

    Pointwise prompts get ' Yes'/' No' logprobs from :func:`stub_yes_probability` of the
    aerial image, and direct prompts get round(100 p) as text. Likert prompts put all mass
    on '3'. Pairwise prompts prefer the image whose id ends in '-gt', else slot 1.
    Free-text reasoning turns get fixed prose.
    """

    def __init__(self):
        self.requests: list[dict] = []
        self.lock = threading.Lock()
        self.script: list[int] = []  # status codes to return before normal replies

    def reply(self, body: dict) -> tuple[int, dict]:
        with self.lock:
            self.requests.append(body)
            if self.script:
                return self.script.pop(0), {"error": "scripted"}
        ids = _image_ids(body)
        text_in = json.dumps(body["messages"])
        if len(ids) == 3:
            pref = "2" if ids[2].endswith("-gt") else "1"
            return 200, _completion(f'{{"preference": "{pref}"}}', None)
        if body["messages"][-1]["role"] == "user" and len(body["messages"]) == 1 and "step-by-step" in text_in and not body.get("logprobs"):
            return 200, _completion("The road layout matches in part.", None)
        if "single digit" in text_in:
            return 200, _completion("3", [[("3", 0.0)]] if body.get("logprobs") else None)
        p = stub_yes_probability(ids[-1])
        if "confidence score" in text_in:
            return 200, _completion(f"Score: {round(100 * p)}", None)
        tops = [[(" Yes", math.log(p)), (" No", math.log(1 - p))]]
        return 200, _completion("Yes" if p >= 0.5 else "No", tops if body.get("logprobs") else None)


def _completion(text: str, tops):
    choice = {"index": 0, "message": {"role": "assistant", "content": text}, "finish_reason": "stop"}
    if tops is not None:
        choice["logprobs"] = {
            "content": [
                {"token": alts[0][0], "logprob": alts[0][1], "top_logprobs": [{"token": t, "logprob": lp} for t, lp in alts]}
                for alts in tops
            ]
        }
    return {"id": "stub", "object": "chat.completion", "choices": [choice]}


@pytest.fixture
def stub_server():
    stub = StubVlm()

    class Handler(BaseHTTPRequestHandler):
        def do_POST(self):
            length = int(self.headers.get("Content-Length", 0))
            body = json.loads(self.rfile.read(length))
            status, payload = stub.reply(body)
            data = json.dumps(payload).encode()
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(data)))
            self.end_headers()
            self.wfile.write(data)

        def log_message(self, *args):
            pass

    server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    stub.url = f"http://127.0.0.1:{server.server_address[1]}/v1/chat/completions"
    yield stub
    server.shutdown()
    server.server_close()


def write_images(root: Path, lists: list[CandidateList]) -> None:
    for cl in lists:
        p = root / cl.query.image_ref
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_bytes(image_bytes(cl.query.id))
        for c in cl.candidates:
            p = root / c.image_ref
            p.parent.mkdir(parents=True, exist_ok=True)
            p.write_bytes(image_bytes(c.id))


@pytest.fixture
def small_dataset(tmp_path):
    lists = synthesize_dataset(6, 5, seed=11)
    write_images(tmp_path, lists)
    return lists


# -- acceptance report ----------------------------------------------------------------------

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
