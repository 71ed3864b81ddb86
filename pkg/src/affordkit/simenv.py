"""Simulator-backed environment adapter for closed-loop policy rollouts."""

from __future__ import annotations

import numpy as np

from . import grounding as gr
from . import worldsim as ws


class SimEnv:
    """Wraps one simulator episode behind the rollout interface.

    Observation noise and scene generation are seeded from the episode seed,
    so a rollout is fully determined by (checkpoint, template, seed, policy
    sampling seed).
    """

    def __init__(self, template_id, seed, vocab, *, config=None, noise_sigma=0.05):
        self.config = config or ws.WorldConfig()
        self.template_id = template_id
        self.seed = int(seed)
        self.vocab = vocab
        self.noise_sigma = noise_sigma
        self.scene = None
        self.robot = None
        self.task = None
        self.t = 0
        self._actions = []
        self._events = []

    def _lift(self, view):
        return ws.lift_pixels(view, self.config)

    def reset(self):
        self.scene, self.task = ws.generate_scene(self.template_id, self.seed,
                                                  self.config)
        self.robot = ws.RobotState()
        self.t = 0
        self._actions = []
        self._events = []
        return ws.observe(self.scene, self.robot, self.t, self.config)

    def ground(self, obs, rep):
        return gr.ground_observation(obs, self.scene.entity_attrs(), rep,
                                     self.vocab, lift=self._lift,
                                     noise_sigma=self.noise_sigma, seed=self.seed)

    def robot_state(self):
        return self.robot

    def entity_poses(self):
        return self.scene.entity_poses()

    def step_budget(self):
        return self.config.step_budget

    def current_cloud(self, obs, n_points, seed):
        return gr.current_cloud(obs, self.robot, lift=self._lift,
                                n_points=n_points, seed=seed)

    def step(self, action_vector):
        action = ws.Action.from_vector(action_vector)
        self.scene, self.robot, events = ws.step(self.scene, self.robot, action,
                                                 self.config)
        self.t += 1
        self._actions.append(action)
        self._events.append(list(events))
        return ws.observe(self.scene, self.robot, self.t, self.config), list(events)

    def _trajectory(self):
        return ws.Trajectory(self.task, list(self._actions), list(self._events),
                             self.scene, self.robot)

    def is_done(self):
        """Early stop once the task predicate already holds."""
        if not self._actions:
            return False
        return ws.evaluate_success(self.task, self._trajectory(), self.config)

    def finish(self, actions, events):
        return self._trajectory()

    def succeeded(self, trajectory):
        return ws.evaluate_success(self.task, trajectory, self.config)
