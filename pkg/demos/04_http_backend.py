"""Point the HTTP backend at a local endpoint and check it matches the template backend.

The endpoint here answers with the template text, so the two reports must
agree sentence for sentence. Swap in a real model server with
``orthodoc report case.json --backend http --backend-url URL``.

Run: python demos/04_http_backend.py
"""

import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from orthodoc.backend import GenerationRequest, HttpBackend, TemplateBackend, generate_template
from orthodoc.config import EngineConfig
from orthodoc.fusion import predict
from orthodoc.pipeline import build_workspace
from orthodoc.report import Reporter, emit_latex
from orthodoc.synthetic import bundled_dataset


class TemplateEndpoint(BaseHTTPRequestHandler):
    def do_POST(self):  # noqa: N802
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        text = generate_template(GenerationRequest(body["prompt"], body["request_id"])).text
        data = json.dumps({"text": text}).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def log_message(self, *args):
        pass


def main():
    cfg = EngineConfig()
    ws = build_workspace(bundled_dataset(), cfg)
    case = ws.test[0]
    prediction = predict(case, ws.weights)

    server = ThreadingHTTPServer(("127.0.0.1", 0), TemplateEndpoint)
    threading.Thread(target=server.serve_forever, daemon=True).start()
    url = f"http://127.0.0.1:{server.server_address[1]}"
    try:
        via_http = Reporter(ws.retriever(cfg), ws.store, HttpBackend(url)).run(case, prediction)[1]
    finally:
        server.shutdown()
    local = Reporter(ws.retriever(cfg), ws.store, TemplateBackend()).run(case, prediction)[1]

    same = [c.sentence for _, c in via_http.claims()] == [c.sentence for _, c in local.claims()]
    print(f"endpoint {url}")
    print(f"claims identical to the local template backend: {same}")
    tex_http, tex_local = emit_latex(via_http, ws.store), emit_latex(local, ws.store)
    print(f"LaTeX bodies identical: {tex_http == tex_local}")


if __name__ == "__main__":
    main()
