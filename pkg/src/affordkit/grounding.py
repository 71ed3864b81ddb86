"""Affordance grounding: task representations, heatmaps, and point clouds.

A task representation is one embedding per affordance channel plus a motion
embedding. Heatmaps are cosine similarities between pixel embeddings and a
channel embedding; they are computed once on the initial observation, lifted
onto 3D points, fused across cameras, and carried through the episode. Each
control step re-expresses the fused cloud in the current end-effector frame,
crops it to the workspace, and downsamples it to a fixed size.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .encoder import DEFAULT_M, embed_pixels, embed_text

AFFORDANCE_TYPES = (
    "grasp",
    "place",
    "function",
    "direct_contact",
    "indirect_contact",
    "avoid",
    "walk_to",
    "step_on",
)
K = len(AFFORDANCE_TYPES)

COSINE_EPS = 1e-8
CROP_RADIUS = 2.0
DEFAULT_CLOUD_POINTS = 1024

AUGMENT_SCALE_RANGE = (0.7, 1.3)
AUGMENT_GAMMA_RANGE = (0.8, 2.0)


class GroundingError(Exception):
    pass


@dataclass
class TaskRepresentation:
    """One embedding per affordance channel, plus a motion embedding."""

    channels: np.ndarray  # (K, M)
    motion: np.ndarray  # (M,)

    def __post_init__(self):
        self.channels = np.asarray(self.channels, dtype=float)
        self.motion = np.asarray(self.motion, dtype=float)
        if self.channels.shape[0] != K or self.channels.ndim != 2:
            raise GroundingError(
                f"channels must have shape ({K}, M), got {self.channels.shape}")
        if self.motion.shape != (self.channels.shape[1],):
            raise GroundingError(
                f"motion must have shape ({self.channels.shape[1]},), got {self.motion.shape}")

    @property
    def m(self):
        return self.channels.shape[1]

    def channel(self, name):
        return self.channels[AFFORDANCE_TYPES.index(name)]

    def as_vector(self):
        return np.concatenate([self.channels.ravel(), self.motion])

    @classmethod
    def from_vector(cls, vec, m=DEFAULT_M):
        vec = np.asarray(vec, dtype=float)
        if vec.shape != ((K + 1) * m,):
            raise GroundingError(
                f"expected vector of length {(K + 1) * m}, got {vec.shape}")
        return cls(vec[: K * m].reshape(K, m), vec[K * m:])

    @classmethod
    def zeros(cls, m=DEFAULT_M):
        return cls(np.zeros((K, m)), np.zeros(m))

    @classmethod
    def random_unit(cls, m=DEFAULT_M, seed=0):
        rng = np.random.default_rng(seed)
        vecs = rng.normal(size=(K + 1, m))
        vecs /= np.linalg.norm(vecs, axis=1, keepdims=True)
        return cls(vecs[:K], vecs[K])

    def copy(self):
        return TaskRepresentation(self.channels.copy(), self.motion.copy())


def rep_from_slot_tokens(vocab, slot_tokens, motion_token=None):
    """Ground-truth task representation from per-affordance token tuples.

    Channels without a slot stay zero, which grounds to an all-zero heatmap
    (the cosine guard maps zero embeddings to zero similarity).
    """
    channels = np.zeros((K, vocab.m))
    for name, tokens in slot_tokens.items():
        if name not in AFFORDANCE_TYPES:
            raise GroundingError(f"unknown affordance channel: {name!r}")
        channels[AFFORDANCE_TYPES.index(name)] = embed_text(vocab, tokens)
    motion = embed_text(vocab, [motion_token]) if motion_token else np.zeros(vocab.m)
    return TaskRepresentation(channels, motion)


def cosine_map(embeddings, z):
    """Cosine similarity of each row of embeddings (..., M) against z (M,).

    Degenerate inputs (either side below the norm guard) map to exactly 0.
    """
    embeddings = np.asarray(embeddings, dtype=float)
    z = np.asarray(z, dtype=float)
    en = np.linalg.norm(embeddings, axis=-1)
    zn = np.linalg.norm(z)
    denom = en * zn
    sims = np.where(denom > COSINE_EPS,
                    embeddings @ z / np.where(denom > COSINE_EPS, denom, 1.0),
                    0.0)
    return sims


def compute_heatmaps(embeddings, rep):
    """Stack cosine maps for every affordance channel: (..., M) -> (..., K)."""
    return np.stack([cosine_map(embeddings, rep.channels[k]) for k in range(K)],
                    axis=-1)


# ---------------------------------------------------------------------------
# grounded point clouds


@dataclass
class GroundedPoints:
    """Fused world-frame points with per-point heatmaps and pixel embeddings.

    `sources` names the camera and flat pixel index each point was lifted
    from, so heatmaps can be re-rendered or re-derived for exactly these
    points later (e.g. when tuning the task representation).
    """

    positions: np.ndarray  # (P, 3) world frame
    heatmaps: np.ndarray  # (P, K)
    embeddings: np.ndarray  # (P, M)
    sources: list  # [(camera_id, flat_pixel_index), ...]
    entity_ids: np.ndarray  # (P,) id of the entity each point was lifted from


def ground_observation(obs, entity_attrs, rep, vocab, *, lift,
                       noise_sigma=0.0, seed=0):
    """Embed, heatmap, lift, and fuse all cameras of one observation.

    `lift` maps a CameraView to (positions, flat pixel indices, entity ids);
    the world simulator provides it. Per-camera pixel noise is decorrelated
    by hashing the camera's position in the view ordering into the seed.
    """
    positions, heats, embs, sources, ids = [], [], [], [], []
    for i, (camera_id, view) in enumerate(sorted(obs.views.items())):
        emb_img = embed_pixels(vocab, view.entity_id, view.subregion, entity_attrs,
                               noise_sigma=noise_sigma, seed=[seed, i])
        pts, flat_idx, point_ids = lift(view)
        flat_emb = emb_img.reshape(-1, vocab.m)[flat_idx]
        positions.append(pts)
        embs.append(flat_emb)
        heats.append(compute_heatmaps(flat_emb, rep))
        ids.append(point_ids)
        sources.extend((camera_id, int(j)) for j in flat_idx)
    if positions:
        positions = np.concatenate(positions, axis=0)
        heats = np.concatenate(heats, axis=0)
        embs = np.concatenate(embs, axis=0)
        ids = np.concatenate(ids, axis=0)
    else:
        positions = np.zeros((0, 3))
        heats = np.zeros((0, K))
        embs = np.zeros((0, vocab.m))
        ids = np.zeros(0, dtype=int)
    return GroundedPoints(positions, heats, embs, sources, ids)


def track_positions(grounded, initial_poses, current_poses):
    """World positions of the grounded points, tracked to the current scene.

    Heatmaps are computed once at grounding time and stay attached to their
    points; each point then follows the entity it was lifted from via that
    entity's SE(2) pose change. Points from entities whose pose is unchanged
    or unknown pass through untouched.
    """
    out = np.array(grounded.positions, dtype=float)
    for eid, pose0 in initial_poses.items():
        pose1 = current_poses.get(eid)
        if pose1 is None or tuple(pose1) == tuple(pose0):
            continue
        mask = grounded.entity_ids == eid
        if not np.any(mask):
            continue
        x0, y0, t0 = pose0
        x1, y1, t1 = pose1
        c, s = math.cos(t1 - t0), math.sin(t1 - t0)
        dx = out[mask, 0] - x0
        dy = out[mask, 1] - y0
        out[mask, 0] = x1 + c * dx - s * dy
        out[mask, 1] = y1 + s * dx + c * dy
    return out


def to_ee_frame(positions, robot):
    """Express world (x, y, z) points in the end-effector frame.

    The frame is centered on the planar end-effector position and rotated by
    the torso heading; z passes through unchanged.
    """
    positions = np.asarray(positions, dtype=float)
    ee = robot.ee_position()
    th = robot.torso[2]
    c, s = math.cos(th), math.sin(th)
    dx = positions[:, 0] - ee[0]
    dy = positions[:, 1] - ee[1]
    out = np.empty_like(positions)
    out[:, 0] = c * dx + s * dy
    out[:, 1] = -s * dx + c * dy
    out[:, 2] = positions[:, 2]
    return out


def crop_indices(ee_positions, radius=CROP_RADIUS):
    """Indices of points within the planar workspace radius of the ee frame."""
    planar = np.linalg.norm(ee_positions[:, :2], axis=1)
    return np.nonzero(planar <= radius)[0]


def downsample_indices(count, n, seed):
    """Deterministic index selection to exactly n points.

    Samples without replacement when enough points exist, with replacement
    otherwise. An empty input yields an empty selection (the caller
    substitutes the all-zero sentinel cloud).
    """
    if count == 0:
        return np.zeros(0, dtype=int)
    rng = np.random.default_rng([int(seed) & (2**63 - 1), count])
    return np.sort(rng.choice(count, size=n, replace=count < n))


def grounded_cloud(grounded, robot, n_points=DEFAULT_CLOUD_POINTS, *,
                   seed=0, radius=CROP_RADIUS):
    """Heatmap-informed ee-frame cloud (n, 3 + K) for one control step.

    Returns (cloud, indices) where indices select rows of the fused grounded
    arrays (so callers can recover the matching pixel embeddings). An empty
    crop yields the all-zero sentinel cloud and empty indices.
    """
    ee_pts = to_ee_frame(grounded.positions, robot)
    keep = crop_indices(ee_pts, radius)
    pick = downsample_indices(len(keep), n_points, seed)
    if len(pick) == 0:
        return np.zeros((n_points, 3 + K)), keep[:0]
    idx = keep[pick]
    cloud = np.concatenate([ee_pts[idx], grounded.heatmaps[idx]], axis=1)
    return cloud, idx


def current_cloud(obs, robot, *, lift, n_points=DEFAULT_CLOUD_POINTS,
                  seed=0, radius=CROP_RADIUS):
    """Plain ee-frame (n, 3) cloud of the current observation (no heatmaps)."""
    positions = []
    for camera_id, view in sorted(obs.views.items()):
        pts, _, _ = lift(view)
        positions.append(pts)
    positions = (np.concatenate(positions, axis=0) if positions
                 else np.zeros((0, 3)))
    ee_pts = to_ee_frame(positions, robot)
    keep = crop_indices(ee_pts, radius)
    pick = downsample_indices(len(keep), n_points, seed)
    if len(pick) == 0:
        return np.zeros((n_points, 3))
    return ee_pts[keep[pick]]


# ---------------------------------------------------------------------------
# augmentation


def augment_heatmaps(heatmaps, rng):
    """Per-channel scale + gamma jitter that preserves each channel's argmax.

    h' = s * sign(h) * |h|**gamma with s ~ U[0.7, 1.3] and gamma ~ U[0.8, 2.0]
    drawn independently per channel, then divided by the channel's peak
    magnitude when that exceeds 1. Every stage is strictly monotone per
    channel, so the per-channel argmax is exactly preserved (hard clipping
    would instead create ties at +-1 that can move the argmax).
    """
    heatmaps = np.asarray(heatmaps, dtype=float)
    k = heatmaps.shape[-1]
    s = rng.uniform(*AUGMENT_SCALE_RANGE, size=k)
    gamma = rng.uniform(*AUGMENT_GAMMA_RANGE, size=k)
    out = s * np.sign(heatmaps) * np.abs(heatmaps) ** gamma
    peak = np.maximum(1.0, np.abs(out.reshape(-1, k)).max(axis=0))
    return out / peak
