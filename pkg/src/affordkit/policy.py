"""Heatmap-conditioned diffusion policy over action chunks.

Two permutation-invariant point-stream encoders (one for the heatmap-informed
initial cloud, one for the current cloud) are fused with the motion embedding
and proprioception into a context latent. A small MLP denoiser predicts the
clean normalized action chunk from its noised version (x0-parameterization:
noise-prediction divides model error by sqrt(alpha_bar) when recovering the
chunk, which at near-zero terminal alpha_bar amplifies it by two orders of
magnitude); closed-loop control samples a chunk by ancestral denoising over a
strided subset of the training schedule and executes its first few actions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import grounding as gr
from .worldsim import ACTION_DIM, WorldConfig

TIME_FEATURES = 5


class PolicyError(Exception):
    pass


@dataclass
class PolicyConfig:
    m: int = 16  # embedding width
    k: int = gr.K  # affordance channels
    proprio_dim: int = 8
    n_grounded_points: int = gr.DEFAULT_CLOUD_POINTS
    n_current_points: int = gr.DEFAULT_CLOUD_POINTS
    chunk_len: int = 8
    action_dim: int = ACTION_DIM
    execute_horizon: int = 2
    point_hidden: int = 64
    point_out: int = 128
    fusion_out: int = 128
    denoiser_hidden: int = 256
    train_steps: int = 50  # diffusion steps S
    infer_steps: int = 25  # strided ancestral-sampling subset
    # Linear schedule scaled for S=50 so the terminal cumulative alpha is
    # near zero (~4e-5); an un-scaled 1e-4..2e-2 range over 50 steps leaves
    # ~63% of the signal at the last step and sampling from a unit Gaussian
    # is then out of distribution.
    beta_start: float = 2e-3
    beta_end: float = 0.4

    def to_meta(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_meta(cls, meta):
        fields = {k: meta[k] for k in cls.__dataclass_fields__}
        return cls(**fields)


@dataclass
class Normalizer:
    """Per-dimension z-score statistics for action chunks."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, actions):
        actions = np.asarray(actions, dtype=float)
        return cls(actions.mean(axis=0), np.maximum(actions.std(axis=0), 1e-6))

    def normalize(self, a):
        return (np.asarray(a, dtype=float) - self.mean) / self.std

    def denormalize(self, a):
        return np.asarray(a, dtype=float) * self.std + self.mean


def diffusion_schedule(config):
    """Linear beta schedule and its cumulative alpha products."""
    betas = np.linspace(config.beta_start, config.beta_end, config.train_steps)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    return betas, alphas, alpha_bars


def inference_step_indices(config):
    """Strided descending subset of the training schedule for sampling."""
    idx = np.linspace(config.train_steps - 1, 0, config.infer_steps)
    return np.unique(np.round(idx).astype(int))[::-1]


def time_features(steps, total):
    """Small Fourier encoding of diffusion step indices (B,) -> (B, 5)."""
    s = np.asarray(steps, dtype=float) / total
    return np.stack([s, np.sin(2 * np.pi * s), np.cos(2 * np.pi * s),
                     np.sin(4 * np.pi * s), np.cos(4 * np.pi * s)], axis=-1)


def _init_linear(rng, fan_in, fan_out, name, params):
    w = ad.parameter(rng.normal(size=(fan_in, fan_out)) * math.sqrt(2.0 / fan_in),
                     name=f"{name}.w")
    b = ad.parameter(np.zeros(fan_out), name=f"{name}.b")
    params.extend([w, b])
    return w, b


class DiffusionPolicy:
    """Parameters plus pure-function forward passes over the autodiff tape."""

    def __init__(self, config=None, seed=0):
        self.config = config or PolicyConfig()
        c = self.config
        rng = np.random.default_rng([816, int(seed) & (2**63 - 1)])
        self.params = []
        p = self.params
        self.g1 = _init_linear(rng, 3 + c.k, c.point_hidden, "grounded.l1", p)
        self.g2 = _init_linear(rng, c.point_hidden, c.point_out, "grounded.l2", p)
        self.c1 = _init_linear(rng, 3, c.point_hidden, "current.l1", p)
        self.c2 = _init_linear(rng, c.point_hidden, c.point_out, "current.l2", p)
        fusion_in = 2 * c.point_out + c.m + c.proprio_dim
        self.f1 = _init_linear(rng, fusion_in, c.fusion_out, "fusion.l1", p)
        den_in = c.chunk_len * c.action_dim + TIME_FEATURES + c.fusion_out
        self.d1 = _init_linear(rng, den_in, c.denoiser_hidden, "denoiser.l1", p)
        self.d2 = _init_linear(rng, c.denoiser_hidden, c.denoiser_hidden, "denoiser.l2", p)
        self.d3 = _init_linear(rng, c.denoiser_hidden,
                               c.chunk_len * c.action_dim, "denoiser.l3", p)
        # near-zero output layer: the untrained denoiser predicts the ~zero
        # (mean) chunk, so the initial loss sits at the unit-variance baseline
        # of ~1.0 while gradients still reach the upstream layers
        self.d3[0].data *= 1e-3
        self.betas, self.alphas, self.alpha_bars = diffusion_schedule(c)
        self.normalizer = None

    # -- forward passes -----------------------------------------------------

    def _point_stream(self, cloud, layers):
        (w1, b1), (w2, b2) = layers
        h = ad.relu(ad.add(ad.matmul(cloud, w1), b1))
        h = ad.relu(ad.add(ad.matmul(h, w2), b2))
        return ad.max_reduce(h, axis=1)

    def encode_context(self, grounded_cloud, current_cloud, z_motion, proprio):
        """Fuse both point streams with motion and proprio: tensors in, (B, F) out.

        All inputs are batched autodiff tensors: grounded (B, N, 3+K),
        current (B, N', 3), z_motion (B, M), proprio (B, P).
        """
        if grounded_cloud.shape[-1] != 3 + self.config.k:
            raise PolicyError(
                f"grounded cloud must have {3 + self.config.k} columns, "
                f"got {grounded_cloud.shape}")
        if current_cloud.shape[-1] != 3:
            raise PolicyError(f"current cloud must have 3 columns, got {current_cloud.shape}")
        g = self._point_stream(grounded_cloud, (self.g1, self.g2))
        cur = self._point_stream(current_cloud, (self.c1, self.c2))
        fused = ad.concat([g, cur, z_motion, proprio], axis=1)
        w, b = self.f1
        return ad.relu(ad.add(ad.matmul(fused, w), b))

    def denoise(self, noisy_chunks, steps, context):
        """Predicted clean chunks (B, T*A) from noisy chunks at the given steps."""
        temb = ad.constant(time_features(steps, self.config.train_steps))
        x = ad.concat([noisy_chunks, temb, context], axis=1)
        (w1, b1), (w2, b2), (w3, b3) = self.d1, self.d2, self.d3
        h = ad.relu(ad.add(ad.matmul(x, w1), b1))
        h = ad.relu(ad.add(ad.matmul(h, w2), b2))
        return ad.add(ad.matmul(h, w3), b3)

    def diffusion_loss(self, batch, rng, *, grounded_override=None,
                       motion_override=None):
        """Chunk-reconstruction MSE on one batch; callers own the surrounding tape.

        batch carries normalized chunks (B, T*A) and the context inputs as
        plain arrays. `grounded_override` / `motion_override` substitute
        autodiff tensors for the grounded clouds and motion embeddings (used
        when tuning the task representation).
        """
        chunks = batch["chunks"]
        b = chunks.shape[0]
        steps = rng.integers(0, self.config.train_steps, size=b)
        eps = rng.standard_normal(chunks.shape)
        ab = self.alpha_bars[steps][:, None]
        noisy = np.sqrt(ab) * chunks + np.sqrt(1.0 - ab) * eps
        grounded = (grounded_override if grounded_override is not None
                    else ad.constant(batch["grounded"]))
        motion = (motion_override if motion_override is not None
                  else ad.constant(batch["motion"]))
        context = self.encode_context(grounded,
                                      ad.constant(batch["current"]),
                                      motion,
                                      ad.constant(batch["proprio"]))
        x0_hat = self.denoise(ad.constant(noisy), steps, context)
        return ad.mse(x0_hat, ad.constant(chunks))

    def sample_chunk(self, grounded_cloud, current_cloud, z_motion, proprio, rng):
        """Ancestral denoising to one de-normalized, bound-clipped (T, A) chunk."""
        if self.normalizer is None:
            raise PolicyError("policy has no action normalizer; train or load first")
        c = self.config
        context = self.encode_context(
            ad.constant(grounded_cloud[None]), ad.constant(current_cloud[None]),
            ad.constant(np.asarray(z_motion)[None]),
            ad.constant(np.asarray(proprio)[None]))
        x = rng.standard_normal((1, c.chunk_len * c.action_dim))
        steps = inference_step_indices(c)
        for i, s in enumerate(steps):
            x0_hat = self.denoise(ad.constant(x), np.array([s]), context).data
            ab_t = self.alpha_bars[s]
            ab_prev = self.alpha_bars[steps[i + 1]] if i + 1 < len(steps) else 1.0
            eps_hat = (x - math.sqrt(ab_t) * x0_hat) / math.sqrt(1.0 - ab_t)
            if i + 1 < len(steps):
                var = (1.0 - ab_prev) / (1.0 - ab_t) * (1.0 - ab_t / ab_prev)
                dir_coef = math.sqrt(max(1.0 - ab_prev - var, 0.0))
                x = (math.sqrt(ab_prev) * x0_hat + dir_coef * eps_hat
                     + math.sqrt(var) * rng.standard_normal(x.shape))
            else:
                x = x0_hat
        chunk = self.normalizer.denormalize(
            x.reshape(c.chunk_len, c.action_dim))
        low, high = action_bounds()
        return np.clip(chunk, low, high)

    # -- persistence ----------------------------------------------------------

    def architecture_hash(self):
        return ad.architecture_hash([(p.name, p.data.shape) for p in self.params],
                                    extra=self.config.to_meta())

    def parameter_checksum(self):
        import hashlib

        h = hashlib.sha256()
        for p in self.params:
            h.update(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
        return h.hexdigest()


def action_bounds(world_config=None):
    """Per-dimension (low, high) arrays for de-normalized action clipping."""
    wc = world_config or WorldConfig()
    b = wc.action_bounds
    high = np.array([b[0], b[1], b[2], b[3], b[4], 1.0])
    low = np.array([-b[0], -b[1], -b[2], -b[3], -b[4], 0.0])
    return low, high


def save_policy(path, policy):
    if policy.normalizer is None:
        raise PolicyError("cannot save a policy without normalizer statistics")
    meta = {
        "config": policy.config.to_meta(),
        "normalizer_mean": policy.normalizer.mean.tolist(),
        "normalizer_std": policy.normalizer.std.tolist(),
    }
    return ad.save_params(path, policy.params, meta=meta)


def load_policy(path):
    arrays, manifest = ad.load_params(path)
    config = PolicyConfig.from_meta(manifest["meta"]["config"])
    policy = DiffusionPolicy(config, seed=0)
    for p in policy.params:
        if p.name not in arrays:
            raise PolicyError(f"checkpoint is missing parameter {p.name!r}")
        if arrays[p.name].shape != p.data.shape:
            raise PolicyError(
                f"checkpoint parameter {p.name!r} has shape "
                f"{arrays[p.name].shape}, expected {p.data.shape}")
        p.data = arrays[p.name].astype(np.float64)
    policy.normalizer = Normalizer(np.array(manifest["meta"]["normalizer_mean"]),
                                   np.array(manifest["meta"]["normalizer_std"]))
    return policy


# ---------------------------------------------------------------------------
# training dataset


@dataclass
class Episode:
    """One expert episode prepared for training.

    The initial observation's grounded points are stored once in the world
    frame; each step stores its cropped/downsampled selection as indices into
    those arrays (`grounded_idx`, so heatmaps can be re-derived from the
    stored pixel embeddings when the task representation changes) plus the
    selected points' entity-tracked world positions (`grounded_points`) and
    the ee frame (`frames`: ee x, ee y, heading) that re-expresses them.
    A step whose crop was empty stores all -1 indices and reconstructs as the
    all-zero sentinel cloud.
    """

    rep_vector: np.ndarray  # ((K+1)*M,)
    grounded_positions: np.ndarray  # (P, 3) world frame at grounding time
    grounded_heatmaps: np.ndarray  # (P, K)
    grounded_embeddings: np.ndarray  # (P, M)
    frames: np.ndarray  # (T, 3): ee x, ee y, heading per step
    proprios: np.ndarray  # (T, proprio_dim)
    current_clouds: np.ndarray  # (T, n, 3) ee frame
    grounded_idx: np.ndarray  # (T, n) indices into the grounded arrays
    actions: np.ndarray  # (T, action_dim)
    grounded_points: np.ndarray | None = None  # (T, n, 3) tracked world frame
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.actions)


def transform_points(positions, frame):
    """World (x, y, z) points into the (ee_x, ee_y, heading) frame."""
    ex, ey, th = frame
    c, s = math.cos(th), math.sin(th)
    dx = positions[:, 0] - ex
    dy = positions[:, 1] - ey
    out = np.empty_like(positions)
    out[:, 0] = c * dx + s * dy
    out[:, 1] = -s * dx + c * dy
    out[:, 2] = positions[:, 2]
    return out


def episode_grounded_cloud(episode, t, heatmaps=None):
    """The (n, 3+K) grounded cloud of step t, optionally with replacement heatmaps."""
    idx = episode.grounded_idx[t]
    k = episode.grounded_heatmaps.shape[1]
    n = episode.grounded_idx.shape[1]
    if len(idx) == 0 or idx[0] < 0:  # empty-crop sentinel
        return np.zeros((n, 3 + k))
    h = episode.grounded_heatmaps if heatmaps is None else heatmaps
    world = (episode.grounded_points[t] if episode.grounded_points is not None
             else episode.grounded_positions[idx])
    pts = transform_points(world, episode.frames[t])
    return np.concatenate([pts, h[idx]], axis=1)


def chunk_at(episode, t, chunk_len):
    """Action chunk starting at t, padded by repeating the last action."""
    actions = episode.actions
    chunk = actions[t:t + chunk_len]
    if len(chunk) < chunk_len:
        pad = np.repeat(actions[-1:], chunk_len - len(chunk), axis=0)
        chunk = np.concatenate([chunk, pad], axis=0)
    return chunk


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 16
    lr: float = 3e-4
    augment: bool = True
    seed: int = 0


def build_batch(episodes, windows, normalizer, chunk_len, rng=None, augment=False):
    """Assemble a training batch from (episode index, step) windows."""
    grounded, current, motion, proprio, chunks = [], [], [], [], []
    m = None
    for ei, t in windows:
        ep = episodes[ei]
        m = ep.rep_vector.shape[0] // (gr.K + 1)
        heat = ep.grounded_heatmaps
        if augment:
            heat = gr.augment_heatmaps(heat, rng)
        grounded.append(episode_grounded_cloud(ep, t, heatmaps=heat))
        current.append(ep.current_clouds[t])
        motion.append(ep.rep_vector[gr.K * m:])
        proprio.append(ep.proprios[t])
        chunks.append(normalizer.normalize(chunk_at(ep, t, chunk_len)).ravel())
    return {
        "grounded": np.stack(grounded),
        "current": np.stack(current),
        "motion": np.stack(motion),
        "proprio": np.stack(proprio),
        "chunks": np.stack(chunks),
    }


def train(episodes, policy_config=None, train_config=None):
    """Fit a diffusion policy by imitation; returns (policy, loss curve)."""
    if not episodes:
        raise PolicyError("training dataset is empty")
    tc = train_config or TrainConfig()
    policy = DiffusionPolicy(policy_config, seed=tc.seed)
    c = policy.config
    all_actions = np.concatenate([ep.actions for ep in episodes], axis=0)
    policy.normalizer = Normalizer.fit(all_actions)
    windows = [(ei, t) for ei, ep in enumerate(episodes) for t in range(len(ep))]
    rng = np.random.default_rng([2121, tc.seed & (2**63 - 1)])
    opt = ad.Optimizer(policy.params, kind="adam", lr=tc.lr)
    losses = []
    for epoch in range(tc.epochs):
        # cosine decay to 5% of the base rate; the fine motor phases
        # (carrying, sweeping alignment) benefit from small late steps
        frac = epoch / max(tc.epochs - 1, 1)
        opt.lr = tc.lr * (0.05 + 0.95 * 0.5 * (1.0 + np.cos(np.pi * frac)))
        order = rng.permutation(len(windows))
        for start in range(0, len(order), tc.batch_size):
            picked = [windows[i] for i in order[start:start + tc.batch_size]]
            batch = build_batch(episodes, picked, policy.normalizer,
                                c.chunk_len, rng=rng, augment=tc.augment)
            opt.zero_grad()
            with ad.Tape() as tape:
                loss = policy.diffusion_loss(batch, rng)
            if not np.isfinite(loss.data):
                raise PolicyError(
                    f"non-finite loss at epoch {epoch}, batch offset {start}")
            tape.backward(loss)
            opt.step()
            losses.append(float(loss.data))
    return policy, losses


# ---------------------------------------------------------------------------
# closed-loop rollout


def subtask_advance_event(rep):
    """The event name that completes this subtask, or None for the last stage.

    A subtask that grasps without placing is complete on `grasped`; one that
    places is complete on `placed`. Anything else runs to the next stage
    immediately (single-stage instructions never consult this).
    """
    k_grasp = gr.AFFORDANCE_TYPES.index("grasp")
    k_place = gr.AFFORDANCE_TYPES.index("place")
    has_grasp = np.any(rep.channels[k_grasp] != 0)
    has_place = np.any(rep.channels[k_place] != 0)
    if has_place:
        return "placed"
    if has_grasp:
        return "grasped"
    return None


def rollout(policy, env, reps, *, seed=0, max_steps=None, zero_heatmaps=False):
    """Closed-loop receding-horizon control of one episode.

    `env` is a RolloutEnv-style adapter exposing reset/observe/step/ground
    (the harness provides the simulator-backed implementation); `reps` is the
    subtask sequence of TaskRepresentations. Heatmaps are grounded once from
    the initial observation, their points tracked with the entities they were
    lifted from, and re-derived from stored pixel embeddings when the active
    subtask changes.
    """
    c = policy.config
    rng = np.random.default_rng([97, int(seed) & (2**63 - 1)])
    obs = env.reset()
    grounded = env.ground(obs, reps[0])
    poses0 = env.entity_poses()
    stage = 0
    heatmaps = grounded.heatmaps
    if zero_heatmaps:
        heatmaps = np.zeros_like(heatmaps)
    budget = max_steps if max_steps is not None else env.step_budget()
    actions, events = [], []
    t = 0
    while t < budget:
        robot = env.robot_state()
        frame = (*robot.ee_position(), robot.torso[2])
        tracked = gr.track_positions(grounded, poses0, env.entity_poses())
        ee_pts = transform_points(tracked, frame)
        keep = gr.crop_indices(ee_pts)
        pick = gr.downsample_indices(len(keep), c.n_grounded_points,
                                     seed=rng.integers(2**62))
        if len(pick) == 0:
            g_cloud = np.zeros((c.n_grounded_points, 3 + c.k))
        else:
            idx = keep[pick]
            g_cloud = np.concatenate([ee_pts[idx], heatmaps[idx]], axis=1)
        cur_cloud = env.current_cloud(obs, n_points=c.n_current_points,
                                      seed=rng.integers(2**62))
        motion = reps[stage].motion
        chunk = policy.sample_chunk(g_cloud, cur_cloud, motion, obs.proprio, rng)
        advanced = False
        for a in chunk[:c.execute_horizon]:
            obs, step_events = env.step(a)
            actions.append(a)
            events.append(step_events)
            t += 1
            trigger = (subtask_advance_event(reps[stage])
                       if stage < len(reps) - 1 else None)
            if trigger and any(ev[0] == trigger for ev in step_events):
                stage += 1
                heatmaps = gr.compute_heatmaps(grounded.embeddings, reps[stage])
                if zero_heatmaps:
                    heatmaps = np.zeros_like(heatmaps)
                advanced = True
            if t >= budget or advanced:
                break
        if env.is_done():
            break
    return env.finish(actions, events)
