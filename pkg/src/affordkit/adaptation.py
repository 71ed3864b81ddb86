"""Few-shot task-representation tuning against a frozen diffusion policy.

Given a handful of demonstrations of an unknown task, the policy parameters
stay frozen and gradient descent runs over the (K+1)*M scalars of the task
representation alone: each step re-derives the affordance heatmaps from the
candidate representation via the differentiable cosine path over the demos'
stored point embeddings, then scores them with the policy's own
noise-prediction loss.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import grounding as gr
from .policy import build_batch, episode_grounded_cloud, rollout

INIT_MODES = ("zeros", "random_unit", "from_partial_language")

# Scale of the random nudge applied to zero-norm channels at initialization.
# The cosine similarity op has an epsilon guard that zeroes the gradient of an
# exactly-zero vector, so an all-zeros start would never move; a tiny random
# direction carries no task information but lets gradients flow.
ZERO_INIT_NUDGE = 1e-2


class AdaptationError(Exception):
    pass


@dataclass
class TuningConfig:
    lr: float = 1e-3
    steps: int = 300
    batch_size: int | None = None  # None = full batch over all demo windows
    init: str = "random_unit"
    seed: int = 0
    # starting representation for init="from_partial_language": known slots
    # keep their language embedding, empty slots start from a random nudge
    partial: gr.TaskRepresentation | None = None

    def __post_init__(self):
        if self.lr < 0:
            raise AdaptationError(f"learning rate must be >= 0, got {self.lr}")
        if self.steps < 1:
            raise AdaptationError(f"steps must be >= 1, got {self.steps}")
        if self.init not in INIT_MODES:
            raise AdaptationError(
                f"unknown init mode {self.init!r}; expected one of {INIT_MODES}")
        if self.init == "from_partial_language" and self.partial is None:
            raise AdaptationError(
                "init='from_partial_language' requires a partial representation")


@dataclass
class TuningResult:
    representation: gr.TaskRepresentation  # unit-renormalized best c*
    vector: np.ndarray  # raw best c* (as optimized, no renormalization)
    initial_vector: np.ndarray
    losses: list = field(default_factory=list)
    best_loss: float = float("nan")
    best_step: int = -1


def _init_vector(config, m, rng):
    """Initial representation vector per the configured mode."""
    segments = []
    if config.init == "from_partial_language":
        base = config.partial.as_vector().reshape(gr.K + 1, m)
    else:
        base = np.zeros((gr.K + 1, m))
    for i in range(gr.K + 1):
        seg = base[i].copy()
        if config.init == "random_unit":
            seg = rng.standard_normal(m)
            seg /= np.linalg.norm(seg)
        elif np.linalg.norm(seg) <= gr.COSINE_EPS:
            seg = rng.standard_normal(m) * ZERO_INIT_NUDGE
        segments.append(seg)
    return np.concatenate(segments)


def _grounded_from_rep(c_tensor, positions, embeddings, m, batch):
    """Differentiable (B, n, 3+K) grounded clouds from the representation.

    positions: constant (B, n, 3) ee-frame points; embeddings: constant
    (B, n, M) per-point embeddings; c_tensor: ((K+1)*M,) parameter.
    """
    b, n, _ = positions.shape
    emb = ad.constant(embeddings)
    cols = [ad.constant(positions)]
    for k in range(gr.K):
        channel = ad.slice_axis(c_tensor, 0, k * m, m)
        cols.append(ad.reshape(ad.cosine_similarity(emb, channel), (b, n, 1)))
    return ad.concat(cols, axis=2)


def _motion_from_rep(c_tensor, m, batch_size):
    """Differentiable (B, M) motion rows, all sharing the tuned z_motion."""
    row = ad.reshape(ad.slice_axis(c_tensor, 0, gr.K * m, m), (1, m))
    return ad.concat([row] * batch_size, axis=0)


def _window_inputs(demos, windows, policy, normalizer):
    """Constant arrays shared by every tuning step for the given windows."""
    chunk_len = policy.config.chunk_len
    batch = build_batch(demos, windows, normalizer, chunk_len)
    positions, embeddings = [], []
    for ei, t in windows:
        ep = demos[ei]
        cloud = episode_grounded_cloud(ep, t)
        positions.append(cloud[:, :3])
        idx = ep.grounded_idx[t]
        emb = ep.grounded_embeddings[np.maximum(idx, 0)].copy()
        emb[idx < 0] = 0.0  # empty-crop sentinel rows ground to zero heatmaps
        embeddings.append(emb)
    return batch, np.stack(positions), np.stack(embeddings)


def tuning_loss(policy, demos, vector, rng, windows=None):
    """Noise-prediction loss of a fixed representation on demo windows.

    The independent scoring path used by tests and by held-out evaluation:
    no gradients, same heatmap re-derivation as the tuning loop.
    """
    m = policy.config.m
    if windows is None:
        windows = [(ei, t) for ei, ep in enumerate(demos) for t in range(len(ep))]
    batch, positions, embeddings = _window_inputs(demos, windows, policy,
                                                  policy.normalizer)
    c_t = ad.constant(np.asarray(vector, dtype=float))
    grounded = _grounded_from_rep(c_t, positions, embeddings, m, batch)
    motion = _motion_from_rep(c_t, m, len(windows))
    loss = policy.diffusion_loss(batch, rng, grounded_override=grounded,
                                 motion_override=motion)
    return float(loss.data)


def heatmap_tune(policy, demos, config=None):
    """Optimize the task representation on demonstrations, policy frozen.

    Adam over the (K+1)*M representation scalars only; every step recomputes
    the demo heatmaps from the candidate representation and scores them with
    the policy's noise-prediction loss. Returns the best-loss representation.
    Raises AdaptationError (with the step index) if the loss diverges.
    """
    config = config or TuningConfig()
    if not demos:
        raise AdaptationError("few-shot demonstration set is empty")
    if policy.normalizer is None:
        raise AdaptationError("policy has no action normalizer; train or load first")
    m = policy.config.m
    checksum_before = policy.parameter_checksum()
    rng = np.random.default_rng([9242, config.seed & (2**63 - 1)])
    c = ad.parameter(_init_vector(config, m, rng), name="task_representation")
    initial = c.data.copy()
    all_windows = [(ei, t) for ei, ep in enumerate(demos) for t in range(len(ep))]
    opt = ad.Optimizer([c], kind="adam", lr=config.lr)
    losses = []
    best_loss, best_step, best_vec = float("inf"), -1, initial.copy()
    for step in range(config.steps):
        if config.batch_size is None or config.batch_size >= len(all_windows):
            windows = all_windows
        else:
            picked = rng.choice(len(all_windows), config.batch_size, replace=False)
            windows = [all_windows[i] for i in picked]
        batch, positions, embeddings = _window_inputs(demos, windows, policy,
                                                      policy.normalizer)
        opt.zero_grad()
        with ad.Tape() as tape:
            grounded = _grounded_from_rep(c, positions, embeddings, m, batch)
            motion = _motion_from_rep(c, m, len(windows))
            loss = policy.diffusion_loss(batch, rng, grounded_override=grounded,
                                         motion_override=motion)
            tape.backward(loss)
        value = float(loss.data)
        if not np.isfinite(value):
            raise AdaptationError(f"tuning loss diverged at step {step}")
        losses.append(value)
        if value < best_loss:
            best_loss, best_step, best_vec = value, step, c.data.copy()
        opt.step()
    if policy.parameter_checksum() != checksum_before:
        raise AdaptationError("policy parameters changed during tuning")
    rep = gr.TaskRepresentation.from_vector(_renormalize(best_vec, m), m)
    return TuningResult(representation=rep, vector=best_vec,
                        initial_vector=initial, losses=losses,
                        best_loss=best_loss, best_step=best_step)


def _renormalize(vector, m):
    """Unit-normalize each channel segment for export (cosine ignores scale)."""
    out = vector.reshape(gr.K + 1, m).copy()
    for row in out:
        norm = np.linalg.norm(row)
        if norm > gr.COSINE_EPS:
            row /= norm
    return out.ravel()


def evaluate_adaptation(policy, rep, make_env, seeds, *, max_steps=80,
                        rollout_seed_offset=0):
    """Success rate of the frozen policy conditioned on a representation.

    make_env(seed) builds a fresh environment episode; returns (per-seed
    success list, mean success rate).
    """
    results = []
    for seed in seeds:
        env = make_env(seed)
        env.reset()
        traj = rollout(policy, env, [rep], seed=seed + rollout_seed_offset,
                       max_steps=max_steps)
        results.append(bool(env.succeeded(traj)))
    return results, float(np.mean(results))
