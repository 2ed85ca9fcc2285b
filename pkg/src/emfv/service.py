"""HTTP service for enrollment, one-to-one authentication and one-to-many
identification.

Handlers are plain functions of ``(state, body) -> (status, payload)``;
:func:`create_app` mounts them on FastAPI. The served index is an immutable
snapshot swapped under a single writer lock, so readers never block each
other. Probe vectors and images are never logged or echoed back.
"""
from __future__ import annotations

import base64
import binascii
import json
import logging
import os
import threading
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from .errors import (
    BandCollisionError,
    DegenerateVectorError,
    DimensionError,
    DuplicatePersonError,
    EmfvError,
    EmptyGalleryError,
    FormatError,
    LayerShapeError,
    UnknownPersonError,
)
from .index import (
    BandedIndex,
    Gallery,
    MeanPolicy,
    Outcome,
    authenticate_distance,
    build_index,
    classify_distance,
    enroll,
    identify_distance,
)
from .core import MeanVector, normalize_rows
from .nn import Network, extract_features
from .store import load_snapshot, save_snapshot

log = logging.getLogger(__name__)


class ApiError(Exception):
    def __init__(self, status, code, message):
        super().__init__(message)
        self.status, self.code, self.message = status, code, message


@dataclass(frozen=True)
class ServiceConfig:
    addr: str = "127.0.0.1:8080"
    snapshot: str = "emfv_snapshot.json"
    mean_policy: str = "frozen"
    margin: float = 0.05
    tie_tolerance: float = 1e-9
    token: str = ""
    weights: str | None = None
    dimension: int = 256

    @classmethod
    def load(cls, path=None, env=None) -> "ServiceConfig":
        """Read a JSON config file, then apply EMFV_* environment overrides."""
        env = os.environ if env is None else env
        values = {}
        if path:
            values = json.loads(Path(path).read_text())
            unknown = set(values) - {f.name for f in fields(cls)}
            if unknown:
                raise ValueError(f"unknown config keys: {sorted(unknown)}")
        for key, var in (("addr", "EMFV_ADDR"), ("snapshot", "EMFV_SNAPSHOT"),
                         ("token", "EMFV_TOKEN")):
            if env.get(var):
                values[key] = env[var]
        cfg = cls(**values)
        MeanPolicy(cfg.mean_policy)
        return cfg

    @property
    def host_port(self) -> tuple[str, int]:
        host, _, port = self.addr.rpartition(":")
        return host or "127.0.0.1", int(port)


class ServiceState:
    """Current (index, gallery) pair plus the optional network."""

    def __init__(self, config: ServiceConfig, index: BandedIndex | None = None,
                 gallery: Gallery | None = None, network: Network | None = None):
        self.config = config
        self.network = network
        self._lock = threading.Lock()
        if index is None and Path(config.snapshot).exists():
            index, gallery = load_snapshot(config.snapshot)
        if index is None:
            dim = network.feature_dimension if network is not None else config.dimension
            gallery = Gallery(dim)
            index = BandedIndex(MeanVector(np.zeros(dim), 1), (), dim, version=0,
                                margin=config.margin, tie_tolerance=config.tie_tolerance)
        self._current = (index, gallery)

    @property
    def snapshot(self) -> tuple[BandedIndex, Gallery]:
        return self._current

    def commit(self, mutate):
        """Apply ``mutate(index, gallery)`` under the writer lock; persist then swap."""
        with self._lock:
            idx, gallery = self._current
            new_idx, new_gallery = mutate(idx, gallery)
            save_snapshot(new_idx, new_gallery, self.config.snapshot)
            self._current = (new_idx, new_gallery)
            return new_idx, new_gallery


def _check_token(state: ServiceState, authorization: str | None):
    expected = state.config.token
    if not expected:
        raise ApiError(401, "unauthorized", "service has no operator token configured")
    if authorization != f"Bearer {expected}":
        raise ApiError(401, "unauthorized", "missing or invalid bearer token")


def _decode_image(state: ServiceState, payload) -> np.ndarray:
    if state.network is None:
        raise ApiError(501, "images_unsupported", "no trained network is loaded")
    if not isinstance(payload, dict) or "data" not in payload or "shape" not in payload:
        raise ApiError(400, "malformed", "image must be {shape: [h, w], data: base64 float64}")
    try:
        raw = base64.b64decode(payload["data"], validate=True)
        img = np.frombuffer(raw, dtype="<f8").reshape([int(s) for s in payload["shape"]])
    except (binascii.Error, ValueError, TypeError):
        raise ApiError(400, "malformed", "image payload could not be decoded") from None
    try:
        return extract_features(state.network, img)
    except LayerShapeError:
        raise ApiError(400, "dimension_mismatch", "image shape does not fit the network") from None


def _vector(state: ServiceState, item, dimension: int) -> np.ndarray:
    """A sample or probe: a bare array of numbers, {"vector": [...]} or {"image": {...}}."""
    if isinstance(item, dict) and "image" in item:
        v = _decode_image(state, item["image"])
    else:
        if isinstance(item, dict):
            item = item.get("vector")
        if not isinstance(item, list) or not all(
                isinstance(x, (int, float)) and not isinstance(x, bool) for x in item):
            raise ApiError(400, "malformed", "vector must be an array of numbers")
        v = np.asarray(item, dtype=np.float64)
    if v.size != dimension:
        raise ApiError(400, "dimension_mismatch", f"expected {dimension} values, got {v.size}")
    if not np.all(np.isfinite(v)) or np.any(v < 0):
        raise ApiError(400, "malformed", "vector entries must be finite and nonnegative")
    try:
        return normalize_rows(v[None])[0]
    except DegenerateVectorError:
        raise ApiError(400, "degenerate_vector", "vector is all zeros") from None


def _require(body, key):
    if not isinstance(body, dict) or key not in body:
        raise ApiError(400, "malformed", f"request must contain {key!r}")
    return body[key]


def handle_enroll(state: ServiceState, body, authorization=None):
    _check_token(state, authorization)
    person = _require(body, "person_id")
    samples = _require(body, "samples")
    if not isinstance(person, str) or not person:
        raise ApiError(400, "malformed", "person_id must be a non-empty string")
    if not isinstance(samples, list) or not samples:
        raise ApiError(400, "malformed", "samples must be a non-empty list")
    dim = state.snapshot[0].dimension
    rows = np.stack([_vector(state, s, dim) for s in samples])
    policy = MeanPolicy(state.config.mean_policy)

    def mutate(idx, gallery):
        if len(idx) == 0:
            if person in gallery:
                raise DuplicatePersonError(f"person {person!r} already enrolled")
            new_gallery = gallery.with_person(person, rows)
            return build_index(new_gallery, state.config.margin,
                               tie_tolerance=state.config.tie_tolerance,
                               version=idx.version + 1), new_gallery
        return enroll(idx, gallery, person, rows, policy)

    try:
        idx, _ = state.commit(mutate)
    except (BandCollisionError, DuplicatePersonError) as e:
        raise ApiError(409, e.code, str(e)) from None
    except (DimensionError, EmptyGalleryError) as e:
        raise ApiError(400, e.code, str(e)) from None
    band = idx.band_for(person)
    log.info("enroll ok: index v%d, %d persons", idx.version, len(idx))
    return 200, {"version": idx.version, "person_id": person, "band": [band.low, band.high]}


def handle_authenticate(state: ServiceState, body):
    person = _require(body, "person_id")
    idx, _ = state.snapshot
    if not isinstance(person, str) or person not in idx:
        raise ApiError(404, "unknown_person", "person is not enrolled")
    probe = _vector(state, _require(body, "probe"), idx.dimension)
    d = idx.distance(probe)
    accepted = authenticate_distance(idx, person, d)
    log.info("authenticate: %s (index v%d)", "accept" if accepted else "reject", idx.version)
    return 200, {"decision": "accept" if accepted else "reject", "distance": d,
                 "version": idx.version}


def handle_identify(state: ServiceState, body):
    idx, _ = state.snapshot
    probe_item = _require(body, "probe")
    k = body.get("max_neighbors", 3)
    if not isinstance(k, int) or isinstance(k, bool) or k < 1:
        raise ApiError(400, "malformed", "max_neighbors must be a positive integer")
    if len(idx) == 0:
        return 200, {"matches": [], "tie": None, "outcome": Outcome.EMPTY_INDEX.value,
                     "distance": None, "version": idx.version}
    probe = _vector(state, probe_item, idx.dimension)
    d = idx.distance(probe)
    result = classify_distance(idx, d)
    matches = identify_distance(idx, d, k)
    tie = list(result.persons) if result.outcome is Outcome.AMBIGUOUS_TIE else None
    log.info("identify: %s (index v%d)", result.outcome.value, idx.version)
    return 200, {"matches": [{"person_id": p, "gap": g} for p, g in matches], "tie": tie,
                 "outcome": result.outcome.value, "distance": d, "version": idx.version}


def handle_persons(state: ServiceState):
    idx, _ = state.snapshot
    return 200, {"version": idx.version,
                 "persons": [{"person_id": b.person, "band": [b.low, b.high]} for b in idx.bands]}


def handle_health(state: ServiceState):
    idx, _ = state.snapshot
    return 200, {"status": "ok", "version": idx.version, "persons": len(idx),
                 "images": state.network is not None}


def create_app(state: ServiceState):
    app = FastAPI(title="emfv")

    def reply(status, payload):
        return JSONResponse(payload, status_code=status)

    async def call(request: Request, handler, *args):
        try:
            body = json.loads(await request.body() or b"null")
        except (json.JSONDecodeError, UnicodeDecodeError):
            return reply(400, {"code": "malformed", "message": "body is not valid JSON"})
        try:
            return reply(*handler(state, body, *args))
        except ApiError as e:
            log.info("request rejected: %s", e.code)
            return reply(e.status, {"code": e.code, "message": e.message})
        except UnknownPersonError as e:
            return reply(404, {"code": e.code, "message": str(e)})
        except (FormatError, EmfvError) as e:
            return reply(400, {"code": e.code, "message": str(e)})

    @app.post("/v1/enroll")
    async def enroll_route(request: Request):
        return await call(request, handle_enroll, request.headers.get("authorization"))

    @app.post("/v1/authenticate")
    async def authenticate_route(request: Request):
        return await call(request, handle_authenticate)

    @app.post("/v1/identify")
    async def identify_route(request: Request):
        return await call(request, handle_identify)

    @app.get("/v1/persons")
    def persons_route():
        return reply(*handle_persons(state))

    @app.get("/v1/health")
    def health_route():
        return reply(*handle_health(state))

    return app


def serve(config: ServiceConfig, network: Network | None = None):
    import uvicorn

    state = ServiceState(config, network=network)
    host, port = config.host_port
    uvicorn.run(create_app(state), host=host, port=port, log_level="info")
