"""HTTP service for interactive click-and-grasp over saved scenes.

State is loaded once (checkpoint, scene directory) and never mutated, so
identical requests return identical bodies. Endpoints:

  GET  /api/scenes              -> {"scenes": [scene ids]}
  GET  /api/scene/{id}          -> binary point cloud: u32 point count, then
                                   f32 xyz triplets (little-endian); image
                                   size rides in X-Image-Width/-Height headers
  GET  /api/scene/{id}/image    -> 8-bit PNG depth preview for pixel picking
  POST /api/grasp               -> {"grasps": [...]} for a body of
                                   {scene_id, mode, pixel|bbox, k, radius}

Error contract: 400 malformed payload, 404 unknown scene, 422 when guidance
yields no usable region (e.g. a click on a pixel without depth).
"""

from __future__ import annotations

import io
import struct
import threading
from pathlib import Path

import numpy as np
from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse, Response

from . import sceneio
from .guidance import GuidanceSource
from .model import load_checkpoint
from .pipeline import DetectConfig, NoRegions, detect

SERVICE_MODES = ("grid", "click", "bbox")
MAX_K = 512
RADIUS_RANGE = (0.02, 0.30)


class SceneStore:
    """Read-only scene directory with a lazy, lock-guarded cache."""

    def __init__(self, root: Path):
        self.root = Path(root)
        self._cache: dict[str, tuple] = {}
        self._lock = threading.Lock()
        self.ids = sorted(p.name for p in self.root.iterdir()
                          if (p / "depth.png").exists())

    def get(self, scene_id: str):
        if scene_id not in self.ids:
            raise KeyError(scene_id)
        with self._lock:
            if scene_id not in self._cache:
                scene, labels = sceneio.load_scene(self.root / scene_id)
                self._cache[scene_id] = (scene, labels, scene.cloud())
            return self._cache[scene_id]


def _cloud_payload(cloud) -> bytes:
    pts = np.ascontiguousarray(cloud.points, dtype="<f4")
    return struct.pack("<I", len(pts)) + pts.tobytes()


def _depth_preview_png(depth_mm: np.ndarray) -> bytes:
    from PIL import Image

    valid = depth_mm > 0
    img = np.zeros(depth_mm.shape, dtype=np.uint8)
    if valid.any():
        lo, hi = int(depth_mm[valid].min()), int(depth_mm[valid].max())
        span = max(hi - lo, 1)
        # nearest surfaces brightest, invalid pixels black
        img[valid] = (255 - (depth_mm[valid].astype(np.int32) - lo) * 205 // span
                      ).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(img).save(buf, format="PNG")
    return buf.getvalue()


def _bad_request(message: str) -> JSONResponse:
    return JSONResponse(status_code=400, content={"detail": message})


def build_app(scene_root: Path, checkpoint: Path) -> FastAPI:
    params, anchors, model_config = load_checkpoint(checkpoint)
    store = SceneStore(Path(scene_root))
    app = FastAPI(title="flexlog", docs_url=None, redoc_url=None)
    app.add_middleware(CORSMiddleware, allow_origins=["*"],
                       allow_methods=["GET", "POST"], allow_headers=["*"])

    @app.exception_handler(RequestValidationError)
    async def _validation_as_400(request: Request, exc: RequestValidationError):
        return _bad_request("malformed request body")

    @app.get("/api/scenes")
    def list_scenes():
        return {"scenes": store.ids}

    @app.get("/api/scene/{scene_id}")
    def scene_cloud(scene_id: str):
        try:
            scene, _labels, cloud = store.get(scene_id)
        except KeyError:
            return JSONResponse(status_code=404,
                                content={"detail": f"unknown scene {scene_id}"})
        h, w = scene.depth_mm.shape
        return Response(content=_cloud_payload(cloud),
                        media_type="application/octet-stream",
                        headers={"X-Image-Width": str(w),
                                 "X-Image-Height": str(h),
                                 "X-Point-Count": str(len(cloud.points))})

    @app.get("/api/scene/{scene_id}/image")
    def scene_image(scene_id: str):
        try:
            scene, _labels, _cloud = store.get(scene_id)
        except KeyError:
            return JSONResponse(status_code=404,
                                content={"detail": f"unknown scene {scene_id}"})
        return Response(content=_depth_preview_png(scene.depth_mm),
                        media_type="image/png")

    @app.post("/api/grasp")
    async def grasp(request: Request):
        try:
            body = await request.json()
        except Exception:
            return _bad_request("body is not valid JSON")
        if not isinstance(body, dict):
            return _bad_request("body must be a JSON object")

        scene_id = body.get("scene_id")
        if not isinstance(scene_id, str):
            return _bad_request("scene_id must be a string")
        mode = body.get("mode", "click")
        if mode not in SERVICE_MODES:
            return _bad_request(f"mode must be one of {list(SERVICE_MODES)}")
        k = body.get("k", 48)
        if not isinstance(k, int) or not 1 <= k <= MAX_K:
            return _bad_request(f"k must be an integer in [1, {MAX_K}]")
        radius = body.get("radius", 0.08)
        if not isinstance(radius, (int, float)) or isinstance(radius, bool) \
                or not RADIUS_RANGE[0] <= float(radius) <= RADIUS_RANGE[1]:
            return _bad_request(f"radius must be a number in {RADIUS_RANGE}")

        if mode == "click":
            pixel = body.get("pixel")
            if (not isinstance(pixel, (list, tuple)) or len(pixel) != 2
                    or not all(isinstance(x, int) for x in pixel)):
                return _bad_request("click mode needs pixel: [u, v] integers")
            source = GuidanceSource(mode="click", payload=tuple(pixel))
        elif mode == "bbox":
            bbox = body.get("bbox")
            if (not isinstance(bbox, (list, tuple)) or len(bbox) != 4
                    or not all(isinstance(x, int) for x in bbox)):
                return _bad_request("bbox mode needs bbox: [u0, v0, u1, v1] integers")
            source = GuidanceSource(mode="bbox", payload=tuple(bbox))
        else:
            source = GuidanceSource(mode="uniform_grid", payload=None)

        try:
            scene, _labels, cloud = store.get(scene_id)
        except KeyError:
            return JSONResponse(status_code=404,
                                content={"detail": f"unknown scene {scene_id}"})
        h, w = scene.depth_mm.shape
        config = DetectConfig(k=k, radius=float(radius),
                              n_points=model_config.n_points)
        try:
            result = detect(cloud, (h, w), source, params, anchors,
                            model_config, config, intrinsics=scene.intrinsics)
        except NoRegions as e:
            return JSONResponse(status_code=422, content={"detail": str(e)})
        except ValueError as e:  # structurally bad guidance, e.g. bbox bounds
            return _bad_request(str(e))

        records = []
        for d in result.grasps:
            rec = d.grasp.to_json()
            rec["region_index"] = d.region_index
            rec["combo"] = list(d.combo)
            pix = result.regions[d.region_index].frame.source_pixel
            rec["source_pixel"] = None if pix is None else list(pix)
            records.append(rec)
        return {"scene_id": scene_id, "mode": mode, "k": k,
                "radius": float(radius), "grasps": records}

    return app
