"""HTTP JSON API exposing the frozen pipeline to the sketchpad UI.

Images travel as base64-encoded raw 8-bit buffers (row-major), never as a
codec format, so both sides stay bit-exact and dependency-free. Handlers are
pure functions over an immutable model snapshot; per-request randomness is
isolated, so concurrent identical seeded requests return identical bytes.
"""

from __future__ import annotations

import base64
import binascii
import json
import threading
import traceback
import uuid
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np

from .backbone import IMAGE_SIZE, BackboneBundle
from .datasets import edge_map
from .lctn import LatentCodeTranslator
from .pipeline import DEFAULT_K_RATIO, STEP_MODES, SampleConfig, translate
from .rng import Rng


class FieldError(Exception):
    """Validation failure attributable to one request field."""

    def __init__(self, field: str, message: str):
        super().__init__(message)
        self.field = field


def _require(body: dict, field: str, kind, optional: bool = False):
    if field not in body or body[field] is None:
        if optional:
            return None
        raise FieldError(field, f"missing required field '{field}'")
    value = body[field]
    if kind is int and isinstance(value, bool):
        raise FieldError(field, f"'{field}' must be an integer")
    try:
        return kind(value)
    except (TypeError, ValueError):
        raise FieldError(field, f"'{field}' must be {kind.__name__}") from None


def _decode_b64(field: str, value: str, expected_len: int) -> np.ndarray:
    try:
        raw = base64.b64decode(value, validate=True)
    except (binascii.Error, TypeError):
        raise FieldError(field, f"'{field}' is not valid base64") from None
    if len(raw) != expected_len:
        raise FieldError(field, f"'{field}' decodes to {len(raw)} bytes, "
                         f"expected {expected_len}")
    return np.frombuffer(raw, dtype=np.uint8)


class SketchService:
    """Transport-independent request handlers (the HTTP layer delegates here)."""

    def __init__(self, bundle: BackboneBundle | None = None,
                 lctn: LatentCodeTranslator | None = None,
                 server_seed: int = 0, log=None):
        self.bundle = bundle
        self.lctn = lctn
        self._log = log or (lambda msg: None)
        self._seed_rng = Rng(server_seed)
        self._seed_counter = 0
        self._lock = threading.Lock()

    @property
    def model_loaded(self) -> bool:
        return self.bundle is not None and self.lctn is not None

    def _draw_seed(self) -> int:
        # server-drawn seeds come from a logged substream so every
        # generation stays replayable
        with self._lock:
            n = self._seed_counter
            self._seed_counter += 1
        seed = self._seed_rng.draw_seed("request", str(n))
        self._log(f"drew seed {seed} for request #{n}")
        return seed

    def health(self) -> tuple[int, dict]:
        return 200, {"status": "ok", "model_loaded": self.model_loaded}

    def meta(self) -> tuple[int, dict]:
        if not self.model_loaded:
            return 503, {"error": {"message": "model not loaded"}}
        return 200, {
            "classes": list(self.bundle.class_names),
            "styles": list(self.bundle.style_names),
            "image_size": IMAGE_SIZE,
            "latent_size": 8,
            "T": self.bundle.schedule.T,
            "k_default": DEFAULT_K_RATIO,
            "step_modes": list(STEP_MODES),
        }

    def sample(self, body: dict) -> tuple[int, dict]:
        if not self.model_loaded:
            return 503, {"error": {"message": "model not loaded"}}
        width = _require(body, "width", int)
        height = _require(body, "height", int)
        if width != IMAGE_SIZE:
            raise FieldError("width", f"width must be {IMAGE_SIZE}, got {width}")
        if height != IMAGE_SIZE:
            raise FieldError("height", f"height must be {IMAGE_SIZE}, got {height}")
        sketch_raw = _decode_b64("sketch", _require(body, "sketch", str),
                                 width * height)
        class_id = _require(body, "class_id", int)
        if not 0 <= class_id < len(self.bundle.class_names):
            raise FieldError("class_id", f"class_id must be in "
                             f"[0, {len(self.bundle.class_names)})")
        style_id = _require(body, "style_id", int, optional=True)
        if style_id is not None and not 0 <= style_id < len(self.bundle.style_names):
            raise FieldError("style_id", f"style_id must be in "
                             f"[0, {len(self.bundle.style_names)})")
        k_ratio = _require(body, "k_ratio", float, optional=True)
        if k_ratio is None:
            k_ratio = DEFAULT_K_RATIO
        if not 0.0 < k_ratio < 1.0:
            raise FieldError("k_ratio", "k_ratio must lie strictly within (0, 1)")
        step_mode = _require(body, "step_mode", str, optional=True) or "aligned"
        if step_mode not in STEP_MODES:
            raise FieldError("step_mode", f"step_mode must be one of {STEP_MODES}")
        include_direct = bool(body.get("include_direct", False))
        seed = _require(body, "seed", int, optional=True)
        seed_used = self._draw_seed() if seed is None else seed

        sketch = sketch_raw.reshape(height, width).astype(np.float64) / 255.0
        cfg = SampleConfig(class_id=class_id, seed=seed_used, k_ratio=k_ratio,
                           style_id=style_id, step_mode=step_mode,
                           return_direct_decode=include_direct)
        res = translate(self.bundle, self.lctn, sketch, cfg)

        def pack(img_chw: np.ndarray) -> str:
            u8 = (np.clip(img_chw, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
            return base64.b64encode(u8.transpose(1, 2, 0).tobytes()).decode("ascii")

        return 200, {
            "image": pack(res.image),
            "width": IMAGE_SIZE,
            "height": IMAGE_SIZE,
            "direct_image": pack(res.direct_decode_image) if include_direct else None,
            "seed_used": seed_used,
            "k_used": res.k_used,
            "timings_ms": {k: round(v, 3) for k, v in res.timings_ms.items()},
        }

    def edge(self, body: dict) -> tuple[int, dict]:
        width = _require(body, "width", int)
        height = _require(body, "height", int)
        raw = _decode_b64("image", _require(body, "image", str), width * height * 3)
        rgb = raw.reshape(height, width, 3).astype(np.float64) / 255.0
        edges = edge_map(rgb.transpose(2, 0, 1))
        packed = base64.b64encode(
            (edges * 255.0).astype(np.uint8).tobytes()).decode("ascii")
        return 200, {"edges": packed, "width": width, "height": height}

    # -- dispatch -----------------------------------------------------------

    ROUTES = {
        ("GET", "/api/health"): "health",
        ("GET", "/api/meta"): "meta",
        ("POST", "/api/sample"): "sample",
        ("POST", "/api/edge"): "edge",
    }

    def dispatch(self, method: str, path: str, body: dict | None) -> tuple[int, dict]:
        known_paths = {p for _, p in self.ROUTES}
        if path not in known_paths:
            return 404, {"error": {"message": f"no such endpoint {path}"}}
        handler_name = self.ROUTES.get((method, path))
        if handler_name is None:
            return 405, {"error": {"message": f"{method} not allowed on {path}"}}
        handler = getattr(self, handler_name)
        try:
            if method == "POST":
                return handler(body or {})
            return handler()
        except FieldError as e:
            return 400, {"error": {"field": e.field, "message": str(e)}}
        except Exception:
            error_id = uuid.uuid4().hex[:12]
            self._log(f"internal error {error_id}:\n{traceback.format_exc()}")
            return 500, {"error": {"message": "internal error", "id": error_id}}


def _make_handler(service: SketchService):
    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"

        def _send(self, status: int, payload: dict) -> None:
            body = json.dumps(payload, sort_keys=True).encode("utf-8")
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(body)))
            self.send_header("Access-Control-Allow-Origin", "*")
            self.send_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS")
            self.send_header("Access-Control-Allow-Headers", "Content-Type")
            self.end_headers()
            self.wfile.write(body)

        def do_OPTIONS(self):  # CORS preflight
            self.send_response(204)
            self.send_header("Access-Control-Allow-Origin", "*")
            self.send_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS")
            self.send_header("Access-Control-Allow-Headers", "Content-Type")
            self.send_header("Content-Length", "0")
            self.end_headers()

        def _handle(self, method: str):
            body = None
            if method == "POST":
                length = int(self.headers.get("Content-Length") or 0)
                raw = self.rfile.read(length) if length else b""
                try:
                    body = json.loads(raw.decode("utf-8")) if raw else {}
                except (json.JSONDecodeError, UnicodeDecodeError):
                    self._send(400, {"error": {"field": "body",
                                               "message": "request body is not valid JSON"}})
                    return
                if not isinstance(body, dict):
                    self._send(400, {"error": {"field": "body",
                                               "message": "request body must be a JSON object"}})
                    return
            status, payload = service.dispatch(method, self.path.split("?")[0], body)
            self._send(status, payload)

        def do_GET(self):
            self._handle("GET")

        def do_POST(self):
            self._handle("POST")

        def log_message(self, fmt, *args):  # route through the service logger
            service._log("http: " + fmt % args)

    return Handler


def make_server(service: SketchService, host: str = "127.0.0.1",
                port: int = 8080) -> ThreadingHTTPServer:
    return ThreadingHTTPServer((host, port), _make_handler(service))


def serve(bundle: BackboneBundle, lctn: LatentCodeTranslator,
          host: str = "127.0.0.1", port: int = 8080, log=print) -> None:
    """Run the API until interrupted; asserts the frozen digest at shutdown."""
    service = SketchService(bundle, lctn, log=log)
    server = make_server(service, host=host, port=port)
    digest_at_start = bundle.check_digest()
    log(f"serving on http://{host}:{port} (backbone {digest_at_start})")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        log("shutting down")
    finally:
        server.server_close()
        bundle.check_digest()  # serving must never mutate the model
        log("backbone digest verified at shutdown")
