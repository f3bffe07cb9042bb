"""Real-time render service: extract a Gaussian cloud once per working pair,
then render many novel views from it over a WebSocket.

Protocol. Client -> server: JSON text
    {"type": "pose", "matrix": [16 f64, row-major camera-to-world],
     "fov_y_deg": f64, "width": u32, "height": u32}
Server -> client: binary frame  b"GPSF" + u32 width + u32 height +
u32 payload_len + PNG payload; errors as JSON text {"type":"error","message":...}.
"""

from __future__ import annotations

import asyncio
import threading
import time
from dataclasses import dataclass, field

import numpy as np
from fastapi import FastAPI, WebSocket, WebSocketDisconnect

from . import dataset as ds
from .camera import PinholeCamera, select_working_pair
from .imgio import encode_frame
from .regressor import GaussianCloud
from .renderer import render
from .training import Pipeline


def camera_from_pose(msg) -> PinholeCamera:
    """Pose message / pose.json fields -> pinhole camera (square pixels,
    principal point at the image center)."""
    matrix = np.asarray(msg["matrix"], dtype=np.float64)
    if matrix.size != 16:
        raise ValueError("matrix must have 16 entries")
    if not np.all(np.isfinite(matrix)):
        raise ValueError("matrix entries must be finite")
    m = matrix.reshape(4, 4)
    width, height = int(msg["width"]), int(msg["height"])
    fov = float(msg["fov_y_deg"])
    if width <= 0 or height <= 0:
        raise ValueError("width and height must be positive")
    if not 0 < fov < 180:
        raise ValueError("fov_y_deg must be in (0, 180)")
    r_c2w = m[:3, :3]
    center = m[:3, 3]
    f = 0.5 * height / np.tan(np.deg2rad(fov) / 2)
    K = np.array([[f, 0.0, width / 2], [0.0, f, height / 2], [0.0, 0.0, 1.0]])
    R = r_c2w.T
    return PinholeCamera(K, R, -R @ center, width, height)


@dataclass
class ExtractedSubject:
    cloud: GaussianCloud
    pair: tuple[int, int]
    extracted_at: float = field(default_factory=time.time)


class RenderService:
    """Per-scene session state: pipeline, ring, and the per-pair cloud cache."""

    def __init__(self, pipeline: Pipeline, sample: ds.SceneSample):
        self.pipeline = pipeline
        self.sample = sample
        self.cache: dict[tuple[int, int], ExtractedSubject] = {}
        self.counters = {"extractions": 0, "frames": 0, "cache_hits": 0}
        self._lock = threading.Lock()  # single extraction queue, shared result

    def get_subject(self, pair) -> ExtractedSubject:
        with self._lock:
            if pair not in self.cache:
                cloud, _ = self.pipeline.extract(self.sample, *pair)
                self.cache[pair] = ExtractedSubject(cloud, pair)
                self.counters["extractions"] += 1
            else:
                self.counters["cache_hits"] += 1
            return self.cache[pair]

    def handle_pose(self, msg) -> bytes:
        if msg.get("type") != "pose":
            raise ValueError(f"unknown message type {msg.get('type')!r}")
        cam = camera_from_pose(msg)
        pair = select_working_pair(self.sample.ring, cam.center)
        subject = self.get_subject(pair)
        out = render(subject.cloud, cam)
        self.counters["frames"] += 1
        return encode_frame(out.image.data, cam.width, cam.height)


def create_app(service: RenderService) -> FastAPI:
    app = FastAPI()
    app.state.service = service

    @app.websocket("/ws")
    async def ws_endpoint(ws: WebSocket):
        await ws.accept()
        try:
            while True:
                text = await ws.receive_text()
                try:
                    import json
                    msg = json.loads(text)
                    frame = await asyncio.to_thread(service.handle_pose, msg)
                except (ValueError, KeyError, TypeError) as e:
                    await ws.send_json({"type": "error", "message": str(e)})
                    continue
                await ws.send_bytes(frame)
        except WebSocketDisconnect:
            pass

    return app


def serve(checkpoint, scene_dir, port=8765, host="127.0.0.1"):
    import uvicorn

    from .training import restore_checkpoint

    pipeline = Pipeline()
    restore_checkpoint(checkpoint, pipeline)
    sample = ds.load_scene(scene_dir, with_depth=False)
    app = create_app(RenderService(pipeline, sample))
    uvicorn.run(app, host=host, port=port, log_level="warning")
