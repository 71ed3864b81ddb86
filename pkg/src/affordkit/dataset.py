"""Expert-demonstration dataset generation for policy training."""

from __future__ import annotations

import numpy as np

from . import grounding as gr
from . import worldsim as ws
from .policy import Episode


class DatasetError(Exception):
    pass


def build_episode(traj, states, rep, vocab, *, config=None, n_grounded=128,
                  n_current=128, noise_sigma=0.05, seed=0):
    """Package one expert trajectory into a training Episode.

    Heatmaps come from the initial observation only; their points are then
    tracked with the entities they were lifted from. Each step stores the
    indices of its cropped/downsampled grounded cloud, the selected tracked
    world positions, and the ee frame, so per-step clouds (and re-derived
    heatmaps) can be reconstructed exactly.
    """
    config = config or ws.WorldConfig()
    scene0, robot0 = states[0]
    obs0 = ws.observe(scene0, robot0, 0, config)
    lift = lambda view: ws.lift_pixels(view, config)
    grounded = gr.ground_observation(obs0, scene0.entity_attrs(), rep, vocab,
                                     lift=lift, noise_sigma=noise_sigma,
                                     seed=seed)
    poses0 = scene0.entity_poses()
    rng = np.random.default_rng([3137, int(seed) & (2**63 - 1)])
    frames, proprios, currents, g_idx, g_pts = [], [], [], [], []
    n_steps = len(traj.actions)
    for t in range(n_steps):
        scene_t, robot_t = states[t]
        obs_t = ws.observe(scene_t, robot_t, t, config)
        frame = (*robot_t.ee_position(), robot_t.torso[2])
        tracked = gr.track_positions(grounded, poses0, scene_t.entity_poses())
        ee_pts = gr.to_ee_frame(tracked, robot_t)
        keep = gr.crop_indices(ee_pts)
        pick = gr.downsample_indices(len(keep), n_grounded,
                                     seed=rng.integers(2**62))
        if len(pick):
            idx = keep[pick]
            g_pts.append(tracked[idx])
        else:  # empty-crop sentinel
            idx = np.full(n_grounded, -1, dtype=int)
            g_pts.append(np.zeros((n_grounded, 3)))
        g_idx.append(idx)
        currents.append(gr.current_cloud(obs_t, robot_t, lift=lift,
                                         n_points=n_current,
                                         seed=rng.integers(2**62)))
        frames.append(frame)
        proprios.append(obs_t.proprio)
    actions = np.stack([a.as_vector() for a in traj.actions])
    return Episode(
        rep_vector=rep.as_vector(),
        grounded_positions=grounded.positions,
        grounded_heatmaps=grounded.heatmaps,
        grounded_embeddings=grounded.embeddings,
        frames=np.asarray(frames),
        proprios=np.stack(proprios),
        current_clouds=np.stack(currents),
        grounded_idx=np.stack(g_idx),
        actions=actions,
        grounded_points=np.stack(g_pts),
        meta={
            "template_id": traj.task.template_id,
            "seed": int(scene0.seed),
            "instruction": traj.task.instruction,
            "slots": dict(traj.task.slots),
        },
    )


def generate_dataset(templates, n_episodes, vocab, *, config=None,
                     n_grounded=128, n_current=128, noise_sigma=0.05, seed=0,
                     action_noise=0.0, max_failure_rate=0.1):
    """Scripted-expert dataset cycling over templates.

    `action_noise` jitters the executed expert actions so episodes cover
    recovery states (see run_expert_episode). Episodes whose expert run fails
    the task predicate are dropped; if the failure rate exceeds
    `max_failure_rate` the run aborts (a noisy expert would poison imitation).
    """
    config = config or ws.WorldConfig()
    episodes = []
    failures = 0
    attempts = 0
    ep_seed = int(seed)
    while len(episodes) < n_episodes:
        template = templates[attempts % len(templates)]
        traj, states = ws.run_expert_episode(template, ep_seed + attempts, config,
                                             action_noise=action_noise)
        attempts += 1
        if not ws.evaluate_success(traj.task, traj, config):
            failures += 1
            if attempts >= 20 and failures / attempts > max_failure_rate:
                raise DatasetError(
                    f"expert failure rate {failures}/{attempts} exceeds "
                    f"{max_failure_rate:.0%}; aborting dataset generation")
            continue
        rep = gr.rep_from_slot_tokens(vocab, traj.task.slot_tokens,
                                      traj.task.motion_token)
        episodes.append(build_episode(
            traj, states, rep, vocab, config=config, n_grounded=n_grounded,
            n_current=n_current, noise_sigma=noise_sigma,
            seed=ep_seed + attempts - 1))
    if attempts and failures / attempts > max_failure_rate:
        raise DatasetError(
            f"expert failure rate {failures}/{attempts} exceeds "
            f"{max_failure_rate:.0%}")
    return episodes
