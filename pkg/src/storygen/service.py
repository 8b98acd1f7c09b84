"""HTTP demo service exposing a trained checkpoint to the browser UI.

Generation is compute-bound and the model is a single shared instance, so
requests are serialized through one lock; HTTP handling itself stays
concurrent. Weights are never mutated after load.
"""

from __future__ import annotations

import base64
import hashlib
import io
import json
import threading
import time
from pathlib import Path

import numpy as np
from fastapi import FastAPI, HTTPException, Request
from fastapi.exceptions import RequestValidationError
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse
from PIL import Image
from pydantic import BaseModel, Field

from .data import load_dataset
from .training import load_checkpoint
from .transformer import SamplerConfig, generate_story


class SamplerSpec(BaseModel):
    temperature: float = Field(default=1.0, ge=0.0)
    top_k: int = Field(default=64, ge=0)
    seed: int = 0


class GenerateRequest(BaseModel):
    captions: list[str]
    source_image: str | None = None  # base64 PNG at the model's frame size
    source_id: str | None = None  # dataset story id, uses its first frame
    sampler: SamplerSpec = Field(default_factory=SamplerSpec)


class GenerateResponse(BaseModel):
    frames: list[str]
    model_id: str
    sampler: SamplerSpec
    timings: dict[str, float]


def _png_to_array(b64: str, expected_size: int) -> np.ndarray:
    try:
        raw = base64.b64decode(b64, validate=True)
        img = Image.open(io.BytesIO(raw)).convert("RGB")
    except Exception as exc:
        raise HTTPException(400, f"source_image is not a decodable image: {exc}")
    if img.size != (expected_size, expected_size):
        raise HTTPException(400, f"source_image must be {expected_size}x{expected_size}, "
                                 f"got {img.size[0]}x{img.size[1]}")
    return np.asarray(img, dtype=np.float32) / 255.0


def _array_to_png(frame: np.ndarray) -> str:
    arr = (np.clip(frame, 0.0, 1.0) * 255.0).round().astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def _digest(payload) -> str:
    canon = json.dumps(payload, sort_keys=True, default=str)
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


class ModelRuntime:
    """Loaded checkpoint plus the lock that serializes generation."""

    def __init__(self, checkpoint: str | Path, data_root: str | Path | None = None):
        self.model, self.vae, self.vocab, meta = load_checkpoint(checkpoint)
        self.card = meta.get("model_card")
        self.model_id = (self.card or {}).get("model_id") or Path(checkpoint).stem
        self.config_digest = _digest(
            {"config": self.model.config.__dict__, "vocab": self.vocab.to_list()})
        self.lock = threading.Lock()
        self.sources: dict[str, np.ndarray] = {}
        if data_root:
            dataset = load_dataset(data_root)
            for split in dataset.records:
                for sample in dataset.samples(split):
                    self.sources[sample.id] = sample.source_frame

    def resolve_source(self, req: GenerateRequest) -> np.ndarray:
        if (req.source_image is None) == (req.source_id is None):
            raise HTTPException(400, "provide exactly one of source_image or source_id")
        if req.source_image is not None:
            return _png_to_array(req.source_image, self.model.config.image_size)
        if req.source_id not in self.sources:
            raise HTTPException(400, f"unknown source_id {req.source_id!r}")
        return self.sources[req.source_id]

    def generate(self, req: GenerateRequest) -> GenerateResponse:
        source = self.resolve_source(req)
        sampler = SamplerConfig(temperature=req.sampler.temperature,
                                top_k=req.sampler.top_k, seed=req.sampler.seed)
        start = time.perf_counter()
        with self.lock:
            queued = time.perf_counter()
            story = generate_story(self.model, self.vae, req.captions, source,
                                   self.vocab, sampler)
        done = time.perf_counter()
        frames = [_array_to_png(f) for f in story.frames]
        return GenerateResponse(
            frames=frames, model_id=self.model_id, sampler=req.sampler,
            timings={"queue_s": round(queued - start, 4),
                     "generate_s": round(done - queued, 4),
                     "total_s": round(time.perf_counter() - start, 4)})


def create_app(checkpoint: str | Path | None,
               data_root: str | Path | None = None) -> FastAPI:
    """Build the service; with checkpoint None every endpoint reports 503."""
    app = FastAPI(title="storygen demo service")
    app.add_middleware(CORSMiddleware, allow_origins=["*"], allow_methods=["*"],
                       allow_headers=["*"])
    runtime = ModelRuntime(checkpoint, data_root) if checkpoint else None
    app.state.runtime = runtime

    @app.exception_handler(RequestValidationError)
    async def malformed(request: Request, exc: RequestValidationError):
        first = exc.errors()[0] if exc.errors() else {}
        where = ".".join(str(p) for p in first.get("loc", []))
        return JSONResponse(status_code=400,
                            content={"detail": f"malformed request: {where}: "
                                               f"{first.get('msg', 'invalid')}"})

    def require_runtime() -> ModelRuntime:
        if app.state.runtime is None:
            raise HTTPException(503, "model not ready")
        return app.state.runtime

    @app.get("/api/health")
    def health():
        rt = require_runtime()
        return {"status": "ok", "model_id": rt.model_id,
                "config_digest": rt.config_digest}

    @app.get("/api/model-card")
    def model_card():
        rt = require_runtime()
        if not rt.card:
            raise HTTPException(404, "checkpoint carries no model card")
        return {"card": rt.card, "digest": _digest(rt.card)}

    @app.post("/api/generate", response_model=GenerateResponse)
    def generate(req: GenerateRequest):
        rt = require_runtime()
        if len(req.captions) < 2:
            raise HTTPException(400, "need at least 2 captions (source + targets)")
        if len(req.captions) > rt.model.config.max_frames:
            raise HTTPException(413, f"too many captions: {len(req.captions)} exceeds "
                                     f"the model limit of {rt.model.config.max_frames}")
        if any(not c.strip() for c in req.captions):
            raise HTTPException(400, "captions must be non-empty")
        return rt.generate(req)

    return app
