"""Point-annotation HTTP service over a dataset directory.

Serves event-frame previews and sparse point labels for a directory of
sample folders (the synth.save_sample layout: each folder holds events.txt
and optionally meta.json). Annotations live in one JSON document next to the
data, written atomically (temp file + rename) on every change; a per-frame
version counter implements last-writer-wins for concurrent editors.

Endpoints (JSON unless noted):

    GET  /frames                 frame inventory with label status
    GET  /frames/{id}/image      PNG event rendering at the frame's target time
    GET  /frames/{id}/labels     current point labels
    PUT  /frames/{id}/labels     replace point labels (validated)
    GET  /classes                class palette (id, name, color)
    GET  /export                 labels.json bundle usable directly for training
    GET  /...                    static files from an optional frontend build

The service binds loopback by default and refuses to start when the
annotation store exists but cannot be parsed.
"""

from __future__ import annotations

import io
import json
import os
import re
import threading
from dataclasses import dataclass
from http import HTTPStatus
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np

from . import events as ev
from . import labels as lb

PREVIEW_WINDOW_US = 30_000
MAX_BODY_BYTES = 1 << 20


class StoreCorruptError(RuntimeError):
    """annotations.json exists but is not a valid store document."""


@dataclass
class FrameEntry:
    frame_id: str
    width: int
    height: int
    n_events: int
    t_ref: int


class AnnotationStore:
    """Frame inventory plus a persistent, versioned label document."""

    def __init__(self, data_dir, palette=None):
        self.data_dir = data_dir
        self.lock = threading.Lock()
        self.frames: dict[str, FrameEntry] = {}
        self._streams: dict[str, ev.EventStream] = {}
        self._scan_frames()
        self.palette = palette or self._load_palette()
        self.class_ids = {c.id for c in self.palette}
        self.store_path = os.path.join(data_dir, "annotations.json")
        self.doc = self._load_store()

    def _scan_frames(self) -> None:
        for name in sorted(os.listdir(self.data_dir)):
            d = os.path.join(self.data_dir, name)
            path = os.path.join(d, "events.txt")
            if not os.path.isfile(path):
                continue
            stream = ev.read_events(path)
            t_ref = int(stream.ts[-1]) if len(stream) else 0
            meta_path = os.path.join(d, "meta.json")
            if os.path.isfile(meta_path):
                with open(meta_path, encoding="utf-8") as fh:
                    meta = json.load(fh)
                t_ref = int(meta.get("t_ref", t_ref))
            self.frames[name] = FrameEntry(name, stream.width, stream.height,
                                           len(stream), t_ref)
            self._streams[name] = stream
        if not self.frames:
            raise FileNotFoundError(f"no sample folders with events.txt under {self.data_dir}")

    def _load_palette(self):
        path = os.path.join(self.data_dir, "palette.json")
        if os.path.isfile(path):
            with open(path, encoding="utf-8") as fh:
                return lb.palette_from_json(json.load(fh))
        return lb.synthetic_palette(6)

    def _load_store(self) -> dict:
        if not os.path.isfile(self.store_path):
            return {"schema_version": 1, "frames": {}}
        try:
            with open(self.store_path, encoding="utf-8") as fh:
                doc = json.load(fh)
            if not isinstance(doc, dict) or "frames" not in doc \
                    or not isinstance(doc["frames"], dict):
                raise ValueError("missing frames table")
            for rec in doc["frames"].values():
                if "points" not in rec or "version" not in rec:
                    raise ValueError("frame record missing points/version")
        except (ValueError, json.JSONDecodeError) as exc:
            raise StoreCorruptError(
                f"{self.store_path} is not a valid annotation store: {exc}") from exc
        return doc

    def _persist(self) -> None:
        tmp = self.store_path + ".tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(self.doc, fh, indent=1, sort_keys=True)
            fh.write("\n")
        os.replace(tmp, self.store_path)

    # -- store operations (all take the lock) --

    def list_frames(self) -> list[dict]:
        with self.lock:
            out = []
            for entry in self.frames.values():
                rec = self.doc["frames"].get(entry.frame_id)
                out.append({
                    "frame_id": entry.frame_id,
                    "width": entry.width, "height": entry.height,
                    "n_events": entry.n_events, "t_ref": entry.t_ref,
                    "n_points": len(rec["points"]) if rec else 0,
                    "version": rec["version"] if rec else 0,
                })
            return out

    def get_labels(self, frame_id: str) -> dict:
        with self.lock:
            if frame_id not in self.frames:
                raise KeyError(frame_id)
            rec = self.doc["frames"].get(frame_id)
            if rec is None:
                return {"frame_id": frame_id, "mode": "1C1C", "points": [],
                        "version": 0}
            return {"frame_id": frame_id, "mode": rec["mode"],
                    "points": rec["points"], "version": rec["version"]}

    def put_labels(self, frame_id: str, body: dict) -> dict:
        mode = body.get("mode", "1C1C")
        points = body.get("points")
        if not isinstance(points, list):
            raise ValueError("body must carry a points list")
        triples = []
        for p in points:
            if not isinstance(p, dict) or not {"x", "y", "class_id"} <= set(p):
                raise ValueError("each point needs integer x, y, class_id")
            triples.append((int(p["x"]), int(p["y"]), int(p["class_id"])))
        with self.lock:
            entry = self.frames[frame_id]
            violations = lb.validate_points(triples, mode, entry.width,
                                            entry.height, self.class_ids)
            if violations:
                raise lb.LabelValidationError(violations)
            rec = self.doc["frames"].get(frame_id)
            version = (rec["version"] if rec else 0) + 1
            self.doc["frames"][frame_id] = {
                "mode": mode,
                "points": [{"x": x, "y": y, "class_id": c} for x, y, c in triples],
                "version": version,
            }
            try:
                self._persist()
            except Exception:
                # failed writes must not leave memory ahead of disk
                if rec is None:
                    del self.doc["frames"][frame_id]
                else:
                    self.doc["frames"][frame_id] = rec
                raise
            return {"frame_id": frame_id, "version": version}

    def export(self) -> dict:
        with self.lock:
            frames = []
            for frame_id in sorted(self.doc["frames"]):
                rec = self.doc["frames"][frame_id]
                frames.append({"frame_id": frame_id, "mode": rec["mode"],
                               "points": rec["points"]})
            return {"frames": frames}

    def render_png(self, frame_id: str) -> bytes:
        from PIL import Image
        with self.lock:
            entry = self.frames[frame_id]
            stream = self._streams[frame_id]
        t1 = max(entry.t_ref, 1)
        t0 = max(0, t1 - PREVIEW_WINDOW_US)
        img = ev.render_frame(ev.slice_window(stream, t0, t1))
        buf = io.BytesIO()
        Image.fromarray(img).save(buf, format="PNG")
        return buf.getvalue()


_FRAME_ROUTE = re.compile(r"^/frames/([A-Za-z0-9._-]+)/(image|labels)$")


def _make_handler(store: AnnotationStore, static_dir=None):
    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"
        server_version = "evseg-annotate/1"

        def log_message(self, fmt, *args):  # quiet by default
            pass

        def _json(self, status, payload):
            body = json.dumps(payload).encode()
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def _bytes(self, status, body, ctype):
            self.send_response(status)
            self.send_header("Content-Type", ctype)
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def do_GET(self):
            try:
                self._route_get()
            except KeyError:
                self._json(HTTPStatus.NOT_FOUND, {"error": "unknown frame"})
            except BrokenPipeError:
                pass

        def _route_get(self):
            path = self.path.split("?", 1)[0]
            if path == "/frames":
                self._json(HTTPStatus.OK, {"frames": store.list_frames()})
                return
            if path == "/classes":
                self._json(HTTPStatus.OK, {"classes": lb.palette_to_json(store.palette)})
                return
            if path == "/export":
                self._json(HTTPStatus.OK, store.export())
                return
            m = _FRAME_ROUTE.match(path)
            if m:
                frame_id, kind = m.groups()
                if kind == "labels":
                    self._json(HTTPStatus.OK, store.get_labels(frame_id))
                else:
                    self._bytes(HTTPStatus.OK, store.render_png(frame_id), "image/png")
                return
            if static_dir is not None:
                self._static(path)
                return
            self._json(HTTPStatus.NOT_FOUND, {"error": f"no route for {path}"})

        def _static(self, path):
            rel = "index.html" if path == "/" else path.lstrip("/")
            full = os.path.realpath(os.path.join(static_dir, rel))
            if not full.startswith(os.path.realpath(static_dir) + os.sep) \
                    and full != os.path.realpath(static_dir):
                self._json(HTTPStatus.NOT_FOUND, {"error": "not found"})
                return
            if not os.path.isfile(full):
                self._json(HTTPStatus.NOT_FOUND, {"error": "not found"})
                return
            ctype = {
                ".html": "text/html", ".js": "text/javascript",
                ".css": "text/css", ".map": "application/json",
                ".png": "image/png", ".svg": "image/svg+xml",
            }.get(os.path.splitext(full)[1], "application/octet-stream")
            with open(full, "rb") as fh:
                self._bytes(HTTPStatus.OK, fh.read(), ctype)

        def do_PUT(self):
            path = self.path.split("?", 1)[0]
            m = _FRAME_ROUTE.match(path)
            if not m or m.group(2) != "labels":
                self._json(HTTPStatus.NOT_FOUND, {"error": f"no route for {path}"})
                return
            frame_id = m.group(1)
            length = int(self.headers.get("Content-Length", 0))
            if length > MAX_BODY_BYTES:
                self._json(HTTPStatus.REQUEST_ENTITY_TOO_LARGE,
                           {"error": "body too large"})
                return
            raw = self.rfile.read(length)
            try:
                body = json.loads(raw)
                result = store.put_labels(frame_id, body)
            except KeyError:
                self._json(HTTPStatus.NOT_FOUND, {"error": "unknown frame"})
                return
            except lb.LabelValidationError as exc:
                self._json(HTTPStatus.UNPROCESSABLE_ENTITY,
                           {"error": "validation failed", "violations": exc.violations})
                return
            except OSError as exc:
                self._json(HTTPStatus.INTERNAL_SERVER_ERROR,
                           {"error": f"store write failed: {exc}"})
                return
            except (ValueError, json.JSONDecodeError) as exc:
                self._json(HTTPStatus.BAD_REQUEST, {"error": str(exc)})
                return
            self._json(HTTPStatus.OK, result)

    return Handler


def make_server(data_dir, host="127.0.0.1", port=0, static_dir=None,
                palette=None) -> ThreadingHTTPServer:
    """Build (but do not start) the annotation server; port 0 picks a free one."""
    store = AnnotationStore(data_dir, palette)
    server = ThreadingHTTPServer((host, port), _make_handler(store, static_dir))
    server.store = store
    return server


def serve(data_dir, host="127.0.0.1", port=8731, static_dir=None) -> None:
    server = make_server(data_dir, host, port, static_dir)
    # flush so scripts reading piped stdout can discover the bound port
    print(f"annotation service on http://{host}:{server.server_address[1]} "
          f"({len(server.store.frames)} frames)", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
