"""JSON-over-HTTP control service.

Synchronous request/response around explicit session state: a session owns
one simulator episode, one task specification, and one incremental rollout.
All tensors cross the wire as base64 little-endian bytes with dtype and
shape fields; errors carry machine-readable codes.
"""

from __future__ import annotations

import base64
import threading
import uuid

import numpy as np
from fastapi import FastAPI, Request
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse

from . import grounding as gr
from . import harness as hz
from . import policy as pol
from . import specs as sp
from . import worldsim as ws


class ServiceError(Exception):
    def __init__(self, status, code, message):
        self.status = status
        self.code = code
        self.message = message
        super().__init__(message)


def encode_tensor(arr):
    arr = np.ascontiguousarray(arr)
    arr = arr.astype(arr.dtype.newbyteorder("<"))
    return {"dtype": arr.dtype.str, "shape": list(arr.shape),
            "data": base64.b64encode(arr.tobytes()).decode("ascii")}


def decode_tensor(payload):
    data = base64.b64decode(payload["data"])
    arr = np.frombuffer(data, dtype=np.dtype(payload["dtype"]))
    return arr.reshape(payload["shape"]).copy()


def heatmap_preview(heatmap):
    """Quantize a -1..1 heatmap to the grayscale bytes render-heatmap writes."""
    return np.round((heatmap + 1.0) * 127.5).astype(np.uint8)


class Session:
    """One simulator episode plus its specification and rollout state."""

    def __init__(self, policy, config, vocab, template, seed):
        self.id = uuid.uuid4().hex
        self.lock = threading.Lock()
        self.policy = policy
        self.config = config
        self.vocab = vocab
        self.template = template
        self.seed = int(seed)
        self.env = hz.SimEnvFactory(vocab, config)(template, seed)
        self.obs = self.env.reset()
        self.embedding_images = hz.embedding_images(
            self.env.scene, self.obs, vocab,
            config["data"]["noise_sigma"], self.seed)
        self.reps = None
        self.rep_id = None
        self.runner = None
        self.frame = 0
        self.event_log = []

    def observation_payload(self):
        views = {}
        for cid, view in sorted(self.obs.views.items()):
            views[cid] = {
                "entity_id": encode_tensor(view.entity_id),
                "depth": encode_tensor(view.depth),
                "subregion": encode_tensor(view.subregion),
            }
        return {
            "t": self.obs.t,
            "proprio": encode_tensor(np.asarray(self.obs.proprio)),
            "views": views,
            "instruction": self.env.task.instruction,
        }

    def _accept_reps(self, reps):
        self.reps = reps
        self.rep_id = uuid.uuid4().hex
        self.runner = None
        self.frame = 0
        self.event_log = []
        previews = {}
        for cid, emb in sorted(self.embedding_images.items()):
            maps = hz.pixel_heatmaps(emb, reps[0])
            previews[cid] = {
                name: encode_tensor(heatmap_preview(maps[k]))
                for k, name in enumerate(gr.AFFORDANCE_TYPES)
            }
        return {
            "representation_id": self.rep_id,
            "representation": encode_tensor(reps[0].as_vector()),
            "n_subtasks": len(reps),
            "heatmaps": previews,
        }

    def set_points(self, body):
        clicks = body.get("clicks")
        if not isinstance(clicks, dict) or not clicks:
            raise ServiceError(400, "empty_spec", "clicks must be a non-empty map")
        parsed = {}
        for name, click in clicks.items():
            try:
                camera = click["camera"]
                u, v = click["pixel"]
            except (KeyError, TypeError, ValueError):
                raise ServiceError(400, "bad_click",
                                   f"click {name!r} needs camera and pixel [u, v]")
            parsed[name] = (camera, (int(u), int(v)))
        spec = sp.PointSpec(parsed, motion_token=body.get("motion_token"))
        try:
            rep = sp.points_to_taskrep(self.obs, self.embedding_images, spec,
                                       self.vocab)
        except sp.SpecError as e:
            raise ServiceError(400, "bad_spec", str(e))
        except KeyError as e:
            raise ServiceError(400, "unknown_token", str(e))
        return self._accept_reps([rep])

    def set_language(self, body):
        text = body.get("text")
        if not isinstance(text, str) or not text.strip():
            raise ServiceError(400, "empty_spec", "text must be a non-empty string")
        try:
            reps = sp.parse_instruction(text, self.vocab)
        except sp.SpecError as e:
            raise ServiceError(400, "bad_instruction", str(e))
        return self._accept_reps(reps)

    def step(self):
        if self.reps is None:
            raise ServiceError(409, "no_specification",
                               "submit a point or language specification first")
        if self.runner is None:
            self.runner = hz.ChunkRunner(
                self.policy, self.env, self.reps, seed=self.seed,
                max_steps=self.config["eval"]["max_steps"])
            # ChunkRunner resets the environment; refresh the observation so
            # later observation fetches stay consistent with the rollout.
            self.obs = self.runner.obs
        actions, chunk_events, done = self.runner.step_chunk()
        new_obs = self.runner.obs_history[-len(actions):] if actions else []
        frames = []
        for a, evs, obs in zip(actions, chunk_events, new_obs):
            self.frame += 1
            self.event_log.extend([self.frame, list(ev)] for ev in evs)
            frames.append({
                "index": self.frame,
                "action": encode_tensor(np.asarray(a)),
                "proprio": encode_tensor(np.asarray(obs.proprio)),
                "entity_image": encode_tensor(obs.views["topdown"].entity_id),
                "events": [list(ev) for ev in evs],
            })
        self.obs = self.runner.obs
        return {
            "frames": frames,
            "events": [list(ev) for evs in chunk_events for ev in evs],
            "done": bool(done),
            "steps_taken": self.runner.t,
        }

    def report(self):
        success = None
        if self.runner is not None and self.runner.done:
            traj = self.env.finish(self.runner.actions, self.runner.events)
            success = bool(self.env.succeeded(traj))
        return {
            "template": self.template,
            "seed": self.seed,
            "instruction": self.env.task.instruction,
            "specified": self.reps is not None,
            "representation_id": self.rep_id,
            "steps_taken": 0 if self.runner is None else self.runner.t,
            "done": bool(self.runner is not None and self.runner.done),
            "success": success,
            "event_log": self.event_log,
        }


def create_app(policy, config):
    app = FastAPI(title="affordance control service")
    # the browser UI is served from a different origin than the API
    app.add_middleware(CORSMiddleware, allow_origins=["*"],
                       allow_methods=["*"], allow_headers=["*"])
    sessions = {}
    registry_lock = threading.Lock()
    vocab = hz.vocabulary_from_config(config)

    def get_session(session_id):
        with registry_lock:
            session = sessions.get(session_id)
        if session is None:
            raise ServiceError(404, "unknown_session",
                               f"no session {session_id!r}")
        return session

    @app.exception_handler(ServiceError)
    async def _service_error(request: Request, exc: ServiceError):
        return JSONResponse(status_code=exc.status,
                            content={"error": {"code": exc.code,
                                               "message": exc.message}})

    @app.post("/session")
    async def create_session(body: dict):
        template = body.get("template")
        if template not in ws.TEMPLATE_IDS:
            raise ServiceError(400, "unknown_template",
                               f"template must be one of {sorted(ws.TEMPLATE_IDS)}")
        try:
            seed = int(body.get("seed", 0))
        except (TypeError, ValueError):
            raise ServiceError(400, "bad_seed", "seed must be an integer")
        session = Session(policy, config, vocab, template, seed)
        with registry_lock:
            sessions[session.id] = session
        return {
            "session_id": session.id,
            "observation": session.observation_payload(),
            "embedding_images": {
                cid: f"/session/{session.id}/embedding/{cid}"
                for cid in sorted(session.embedding_images)
            },
            "affordance_types": list(gr.AFFORDANCE_TYPES),
        }

    @app.get("/session/{session_id}/observation")
    async def observation(session_id: str):
        session = get_session(session_id)
        with session.lock:
            return session.observation_payload()

    @app.get("/session/{session_id}/embedding/{camera_id}")
    async def embedding(session_id: str, camera_id: str):
        session = get_session(session_id)
        if camera_id not in session.embedding_images:
            raise ServiceError(404, "unknown_camera",
                               f"no camera {camera_id!r}")
        return {"camera_id": camera_id,
                "embedding": encode_tensor(session.embedding_images[camera_id])}

    @app.post("/session/{session_id}/spec/points")
    async def spec_points(session_id: str, body: dict):
        session = get_session(session_id)
        with session.lock:
            return session.set_points(body)

    @app.post("/session/{session_id}/spec/language")
    async def spec_language(session_id: str, body: dict):
        session = get_session(session_id)
        with session.lock:
            return session.set_language(body)

    @app.post("/session/{session_id}/rollout/step")
    async def rollout_step(session_id: str):
        session = get_session(session_id)
        with session.lock:
            return session.step()

    @app.get("/session/{session_id}/report")
    async def report(session_id: str):
        session = get_session(session_id)
        with session.lock:
            return session.report()

    return app


def serve(checkpoint_path, config, host="127.0.0.1", port=8731):
    import uvicorn

    policy = hz.load_checkpoint(checkpoint_path, config)
    app = create_app(policy, config)
    uvicorn.run(app, host=host, port=port, log_level="warning")
