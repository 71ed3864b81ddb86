"""Dataset generation, training/evaluation drivers, and shared service logic.

Everything here is glue around the core modules: a versioned JSON run config
with no hidden defaults, a dependency-free binary episode store with a
checksummed manifest, the four evaluation suites, and the chunk-at-a-time
rollout runner shared by the CLI and the HTTP service.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import adaptation as adp
from . import dataset as ds
from . import encoder as enc
from . import grounding as gr
from . import policy as pol
from . import specs as sp
from . import worldsim as ws

CONFIG_VERSION = 1
MANIFEST_VERSION = 1
EPISODE_MAGIC = b"AKEPIS1\n"

REQUIRED_CONFIG = {
    "version": None,
    "vocabulary": ("master_seed", "m"),
    "data": ("templates", "episodes_per_template", "n_grounded_points",
             "n_current_points", "noise_sigma", "action_noise"),
    "policy": tuple(pol.PolicyConfig.__dataclass_fields__),
    "train": ("epochs", "batch_size", "lr", "augment", "seed"),
    "eval": ("seeds_per_task", "max_steps"),
    "tune": ("lr", "steps", "init", "n_demos"),
}

EVAL_SUITES = ("language", "point", "demo", "ablation_no_heatmap")


class HarnessError(Exception):
    pass


# ---------------------------------------------------------------------------
# run configuration


def default_config():
    """The desk-scale run configuration; every field is explicit."""
    return {
        "version": CONFIG_VERSION,
        "vocabulary": {"master_seed": 0, "m": 16},
        "data": {
            "templates": ["walk_to", "pick_place", "sweep"],
            "episodes_per_template": 167,
            "n_grounded_points": 128,
            "n_current_points": 128,
            "noise_sigma": 0.05,
            "action_noise": 0.015,
        },
        "policy": pol.PolicyConfig(n_grounded_points=128,
                                   n_current_points=128,
                                   denoiser_hidden=512).to_meta(),
        "train": {"epochs": 60, "batch_size": 16, "lr": 3e-4, "augment": True,
                  "seed": 0},
        "eval": {"seeds_per_task": 10, "max_steps": 120},
        "tune": {"lr": 1e-3, "steps": 300, "init": "random_unit", "n_demos": 10},
    }


def validate_config(config):
    for section, keys in REQUIRED_CONFIG.items():
        if section not in config:
            raise HarnessError(f"config is missing section {section!r}")
        if keys is None:
            continue
        for key in keys:
            if key not in config[section]:
                raise HarnessError(
                    f"config section {section!r} is missing field {key!r}")
    if config["version"] != CONFIG_VERSION:
        raise HarnessError(
            f"config version {config['version']} != supported {CONFIG_VERSION}")
    return config


def load_config(path):
    with open(path) as f:
        return validate_config(json.load(f))


def config_hash(config):
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def vocabulary_from_config(config):
    v = config["vocabulary"]
    return sp.default_vocabulary(master_seed=v["master_seed"], m=v["m"])


# ---------------------------------------------------------------------------
# episode storage: little-endian raw arrays behind a one-line JSON header


_EPISODE_ARRAYS = ("rep_vector", "grounded_positions", "grounded_heatmaps",
                   "grounded_embeddings", "frames", "proprios",
                   "current_clouds", "grounded_idx", "actions",
                   "grounded_points")


def save_episode(path, episode):
    header = {"meta": episode.meta, "arrays": []}
    blobs = []
    for name in _EPISODE_ARRAYS:
        arr = np.ascontiguousarray(getattr(episode, name))
        arr = arr.astype(arr.dtype.newbyteorder("<"))
        header["arrays"].append({"name": name, "dtype": arr.dtype.str,
                                 "shape": list(arr.shape)})
        blobs.append(arr.tobytes())
    head = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(EPISODE_MAGIC)
        f.write(len(head).to_bytes(8, "little"))
        f.write(head)
        for blob in blobs:
            f.write(blob)


def load_episode(path):
    with open(path, "rb") as f:
        if f.read(len(EPISODE_MAGIC)) != EPISODE_MAGIC:
            raise HarnessError(f"{path}: not an episode file")
        n = int.from_bytes(f.read(8), "little")
        header = json.loads(f.read(n))
        fields = {}
        for spec in header["arrays"]:
            dtype = np.dtype(spec["dtype"])
            count = int(np.prod(spec["shape"])) if spec["shape"] else 1
            data = np.frombuffer(f.read(count * dtype.itemsize), dtype=dtype)
            fields[spec["name"]] = data.reshape(spec["shape"]).copy()
    return pol.Episode(meta=header["meta"], **fields)


def _sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def gen_data(config, seed, out_dir):
    """Scripted-expert dataset for every configured template; returns manifest.

    Aborts (via the dataset module) if any template's expert failure rate
    exceeds 10%.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    vocab = vocabulary_from_config(config)
    d = config["data"]
    entries = []
    for ti, template in enumerate(d["templates"]):
        episodes = ds.generate_dataset(
            [template], d["episodes_per_template"], vocab,
            n_grounded=d["n_grounded_points"], n_current=d["n_current_points"],
            noise_sigma=d["noise_sigma"], action_noise=d["action_noise"],
            seed=seed + 100_000 * ti)
        for ep in episodes:
            name = f"{template}_{ep.meta['seed']:08d}.ep"
            save_episode(out / name, ep)
            entries.append({"file": name, "sha256": _sha256_file(out / name),
                            "template": template, "seed": ep.meta["seed"]})
    manifest = {
        "version": MANIFEST_VERSION,
        "config_hash": config_hash(config),
        "vocabulary": config["vocabulary"],
        "vocabulary_dump": vocab.to_manifest(),
        "templates": list(d["templates"]),
        "count": len(entries),
        "episodes": entries,
    }
    with open(out / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
    return manifest


def load_dataset(dataset_dir, verify=True):
    root = Path(dataset_dir)
    with open(root / "manifest.json") as f:
        manifest = json.load(f)
    episodes = []
    for entry in manifest["episodes"]:
        path = root / entry["file"]
        if verify and _sha256_file(path) != entry["sha256"]:
            raise HarnessError(f"checksum mismatch for {entry['file']}")
        episodes.append(load_episode(path))
    return episodes, manifest


# ---------------------------------------------------------------------------
# training


def run_training(dataset_dir, config, out_path):
    """Train from a stored dataset and write a checkpoint stamped with the
    config hash; refuses datasets generated under a different config."""
    episodes, manifest = load_dataset(dataset_dir)
    if manifest["config_hash"] != config_hash(config):
        raise HarnessError("dataset was generated under a different config")
    t = config["train"]
    policy, losses = pol.train(
        episodes, pol.PolicyConfig.from_meta(config["policy"]),
        pol.TrainConfig(epochs=t["epochs"], batch_size=t["batch_size"],
                        lr=t["lr"], augment=t["augment"], seed=t["seed"]))
    pol.save_policy(out_path, policy)
    _stamp_checkpoint(out_path, config)
    return policy, losses


def _stamp_checkpoint(path, config):
    """Rewrite the checkpoint manifest with the run-config hash attached."""
    policy = pol.load_policy(path)
    meta = {
        "config": policy.config.to_meta(),
        "normalizer_mean": policy.normalizer.mean.tolist(),
        "normalizer_std": policy.normalizer.std.tolist(),
        "run_config_hash": config_hash(config),
    }
    from . import autodiff as ad

    ad.save_params(path, policy.params, meta=meta)


def load_checkpoint(path, config=None):
    policy = pol.load_policy(path)
    if config is not None:
        from . import autodiff as ad

        _, manifest = ad.load_params(path)
        stamped = manifest["meta"].get("run_config_hash")
        if stamped is not None and stamped != config_hash(config):
            raise HarnessError("checkpoint config hash does not match the "
                               "provided run config")
    return policy


# ---------------------------------------------------------------------------
# pixel-space heatmaps (shared by render-heatmap and the service preview)


def embedding_images(scene, obs, vocab, noise_sigma, seed):
    """Per-camera (H, W, M) pixel-embedding images, seeded like grounding."""
    return {
        cid: enc.embed_pixels(vocab, view.entity_id, view.subregion,
                              scene.entity_attrs(), noise_sigma=noise_sigma,
                              seed=[seed, i])
        for i, (cid, view) in enumerate(sorted(obs.views.items()))
    }


def pixel_heatmaps(embedding_image, rep):
    """(K, H, W) per-channel cosine heatmap over one embedding image."""
    h, w, m = embedding_image.shape
    flat = embedding_image.reshape(h * w, m)
    maps = gr.compute_heatmaps(flat, rep)  # (H*W, K)
    return np.transpose(maps.reshape(h, w, gr.K), (2, 0, 1))


def render_heatmap_images(config, template, seed, instruction, out_dir):
    """Write grayscale per-channel heatmap PNGs; returns the file map.

    Pixel values map heatmap -1..1 to 0..255, so the files are directly
    comparable with the service's preview payloads.
    """
    from PIL import Image

    vocab = vocabulary_from_config(config)
    scene, task = ws.generate_scene(template, seed)
    obs = ws.observe(scene, ws.RobotState(), 0)
    images = embedding_images(scene, obs, vocab,
                              config["data"]["noise_sigma"], seed)
    text = instruction or task.instruction
    reps = sp.parse_instruction(text, vocab)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = {}
    for cid, emb in sorted(images.items()):
        maps = pixel_heatmaps(emb, reps[0])
        for k, name in enumerate(gr.AFFORDANCE_TYPES):
            gray = np.round((maps[k] + 1.0) * 127.5).astype(np.uint8)
            path = out / f"{cid}_{name}.png"
            Image.fromarray(gray, mode="L").save(path)
            # raw sidecar: exact bytes for pixel-level comparison by clients
            # without a PNG decoder
            gray.tofile(out / f"{cid}_{name}.u8")
            written[f"{cid}/{name}"] = str(path)
    return written


# ---------------------------------------------------------------------------
# chunk-at-a-time rollout (shared by run_eval via policy.rollout and by the
# HTTP service, which needs to hand control back to the client between chunks)


class ChunkRunner:
    """Receding-horizon execution, one action chunk per `step_chunk` call."""

    def __init__(self, policy, env, reps, *, seed=0, max_steps=None,
                 zero_heatmaps=False):
        self.policy = policy
        self.env = env
        self.reps = reps
        self.rng = np.random.default_rng([97, int(seed) & (2**63 - 1)])
        self.obs = env.reset()
        self.grounded = env.ground(self.obs, reps[0])
        self.poses0 = env.entity_poses()
        self.stage = 0
        self.zero_heatmaps = zero_heatmaps
        self.heatmaps = (np.zeros_like(self.grounded.heatmaps)
                         if zero_heatmaps else self.grounded.heatmaps)
        self.budget = max_steps if max_steps is not None else env.step_budget()
        self.t = 0
        self.actions = []
        self.events = []
        self.obs_history = []
        self.done = False

    def step_chunk(self):
        """Sample and execute one chunk; returns (actions, events, done)."""
        if self.done:
            return [], [], True
        c = self.policy.config
        robot = self.env.robot_state()
        frame = (*robot.ee_position(), robot.torso[2])
        tracked = gr.track_positions(self.grounded, self.poses0,
                                     self.env.entity_poses())
        ee_pts = pol.transform_points(tracked, frame)
        keep = gr.crop_indices(ee_pts)
        pick = gr.downsample_indices(len(keep), c.n_grounded_points,
                                     seed=self.rng.integers(2**62))
        if len(pick) == 0:
            g_cloud = np.zeros((c.n_grounded_points, 3 + c.k))
        else:
            idx = keep[pick]
            g_cloud = np.concatenate([ee_pts[idx], self.heatmaps[idx]], axis=1)
        cur = self.env.current_cloud(self.obs, n_points=c.n_current_points,
                                     seed=self.rng.integers(2**62))
        chunk = self.policy.sample_chunk(g_cloud, cur, self.reps[self.stage].motion,
                                         self.obs.proprio, self.rng)
        executed, chunk_events = [], []
        for a in chunk[:c.execute_horizon]:
            self.obs, step_events = self.env.step(a)
            self.actions.append(a)
            self.events.append(step_events)
            self.obs_history.append(self.obs)
            executed.append(a)
            chunk_events.append(step_events)
            self.t += 1
            trigger = (pol.subtask_advance_event(self.reps[self.stage])
                       if self.stage < len(self.reps) - 1 else None)
            advanced = trigger and any(ev[0] == trigger for ev in step_events)
            if advanced:
                self.stage += 1
                self.heatmaps = gr.compute_heatmaps(self.grounded.embeddings,
                                                    self.reps[self.stage])
                if self.zero_heatmaps:
                    self.heatmaps = np.zeros_like(self.heatmaps)
            if self.t >= self.budget or advanced:
                break
        if self.t >= self.budget or self.env.is_done():
            self.done = True
        return executed, chunk_events, self.done

    def run(self):
        while not self.done:
            self.step_chunk()
        return self.env.finish(self.actions, self.events)


# ---------------------------------------------------------------------------
# evaluation suites


def _entity_pixel(view, entity_id, rng):
    vs, us = np.nonzero(view.entity_id == entity_id)
    if len(us) == 0:
        raise HarnessError(f"entity {entity_id} is not visible")
    i = rng.integers(len(us))
    return (int(us[i]), int(vs[i]))


def _point_reps(env, vocab, noise_sigma, seed):
    """Ground-truth point clicks: one pixel sampled on each slot entity."""
    obs = ws.observe(env.scene, ws.RobotState(), 0, env.config)
    images = embedding_images(env.scene, obs, vocab, noise_sigma, env.seed)
    rng = np.random.default_rng([555, seed])
    clicks = {}
    view = obs.views["topdown"]
    for name, eid in env.task.slots.items():
        clicks[name] = ("topdown", _entity_pixel(view, eid, rng))
    spec = sp.PointSpec(clicks, motion_token=env.task.motion_token)
    return [sp.points_to_taskrep(obs, images, spec, vocab)]


def task_signature(task):
    """Slot-token fingerprint: two scenes with the same signature pose the
    same task (same target attributes), differing only in layout."""
    return tuple(sorted((k, tuple(v)) for k, v in task.slot_tokens.items()))


def matching_seeds(template, signature, start, count, limit=20_000):
    """The first `count` seeds >= start whose scene poses `signature`."""
    seeds = []
    seed = start
    while len(seeds) < count and seed < start + limit:
        _, task = ws.generate_scene(template, seed)
        if task_signature(task) == signature:
            seeds.append(seed)
        seed += 1
    if len(seeds) < count:
        raise HarnessError(
            f"found only {len(seeds)}/{count} scenes of the requested task")
    return seeds


def build_demos(template, seeds, config, vocab, n_demos):
    """Successful expert episodes (with zeroed task representation) for
    few-shot tuning; the tuner never sees the ground-truth instruction."""
    d = config["data"]
    zero_rep = gr.TaskRepresentation.zeros(config["vocabulary"]["m"])
    demos = []
    for seed in seeds:
        traj, states = ws.run_expert_episode(template, seed)
        if not ws.evaluate_success(traj.task, traj):
            continue
        demos.append(ds.build_episode(
            traj, states, zero_rep, vocab, n_grounded=d["n_grounded_points"],
            n_current=d["n_current_points"], noise_sigma=d["noise_sigma"],
            seed=seed))
        if len(demos) == n_demos:
            break
    if len(demos) < n_demos:
        raise HarnessError(f"only {len(demos)}/{n_demos} expert demos succeeded")
    return demos


def _demo_reps(template, policy, vocab, config, signature, demo_seed_base):
    """Few-shot representation: tune on expert demos of one concrete task."""
    t = config["tune"]
    demo_seeds = matching_seeds(template, signature, demo_seed_base,
                                4 * t["n_demos"])
    demos = build_demos(template, demo_seeds, config, vocab, t["n_demos"])
    result = adp.heatmap_tune(policy, demos,
                              adp.TuningConfig(lr=t["lr"], steps=t["steps"],
                                               init=t["init"], seed=0))
    return [result.representation]


def _argmax_on_entity(grounded, slots):
    """Fraction of this task's affordance slots whose heatmap argmax point
    lies on the slot's ground-truth entity."""
    hits, total = 0, 0
    for name, eid in slots.items():
        if name not in gr.AFFORDANCE_TYPES:
            continue
        k = gr.AFFORDANCE_TYPES.index(name)
        if len(grounded.heatmaps) == 0:
            continue
        idx = int(np.argmax(grounded.heatmaps[:, k]))
        hits += int(grounded.entity_ids[idx] == eid)
        total += 1
    return (hits, total)


def _run_trial(policy, template, seed, suite, config, vocab, demo_reps,
               max_steps, zero_heatmaps):
    d = config["data"]
    env = SimEnvFactory(vocab, config)(template, seed)
    env.reset()
    if suite == "point":
        reps = _point_reps(env, vocab, d["noise_sigma"], seed)
    elif suite == "demo":
        reps = demo_reps
    else:  # language and ablation share the language pathway
        reps = sp.parse_instruction(env.task.instruction, vocab)
    runner = ChunkRunner(policy, env, reps, seed=seed, max_steps=max_steps,
                         zero_heatmaps=zero_heatmaps)
    traj = runner.run()
    grasped = [ev[1] for evs in runner.events for ev in evs
               if ev[0] == "grasped"]
    hits, total = _argmax_on_entity(runner.grounded, env.task.slots)
    return {
        "template": template, "seed": seed,
        "success": bool(env.succeeded(traj)),
        "steps": len(runner.actions),
        "zero_heatmaps": zero_heatmaps,
        "first_grasp": grasped[0] if grasped else None,
        "target": env.task.slots.get("grasp"),
        "argmax_hits": hits, "argmax_slots": total,
    }


def run_eval(policy, suite, config, *, templates=None, seeds=None,
             report_dir=None, workers=4):
    """Roll out one evaluation suite; returns a MetricsReport dict.

    The ablation suite runs each seed twice — heatmaps zeroed and intact —
    and reports the paired per-task delta. Trials run in a thread pool; each
    trial owns its environment and random streams, so results are identical
    to a sequential run.
    """
    from concurrent.futures import ThreadPoolExecutor

    if suite not in EVAL_SUITES:
        raise HarnessError(f"unknown suite {suite!r}; expected one of {EVAL_SUITES}")
    vocab = vocabulary_from_config(config)
    d = config["data"]
    templates = list(templates or d["templates"])
    n_seeds = config["eval"]["seeds_per_task"]
    max_steps = config["eval"]["max_steps"]
    t0 = time.time()
    per_task = {}
    trials = []
    for template in templates:
        demo_reps = None
        first_seed = int(seeds[0]) if seeds is not None else 1000
        if suite == "demo":
            # tune once per concrete task (fixed slot attributes) and
            # evaluate on fresh layouts of that same task
            _, ref_task = ws.generate_scene(template, first_seed)
            signature = task_signature(ref_task)
            demo_reps = _demo_reps(template, policy, vocab, config,
                                   signature, 900_000)
            seed_list = matching_seeds(template, signature, first_seed,
                                       n_seeds)
        else:
            seed_list = [int(seeds[i]) if seeds is not None else 1000 + i
                         for i in range(n_seeds)]
        variants = ([True, False] if suite == "ablation_no_heatmap"
                    else [False])
        jobs = [(seed, zero) for seed in seed_list for zero in variants]
        with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
            rows = list(pool.map(
                lambda job: _run_trial(policy, template, job[0], suite, config,
                                       vocab, demo_reps, max_steps, job[1]),
                jobs))
        trials.extend(rows)
        primary = [r for r in rows if r["zero_heatmaps"] == (variants[0])]
        successes = sum(r["success"] for r in primary)
        entry = {"successes": successes, "trials": n_seeds,
                 "rate": successes / n_seeds}
        if suite == "ablation_no_heatmap":
            paired = [r for r in rows if not r["zero_heatmaps"]]
            entry["paired_successes"] = sum(r["success"] for r in paired)
            entry["paired_rate"] = entry["paired_successes"] / n_seeds
            entry["delta"] = entry["paired_rate"] - entry["rate"]
        per_task[template] = entry
    hits = sum(t["argmax_hits"] for t in trials)
    slots = sum(t["argmax_slots"] for t in trials)
    report = {
        "suite": suite,
        "config_hash": config_hash(config),
        "per_task": per_task,
        "trials": trials,
        "seeds": sorted({t["seed"] for t in trials}),
        "argmax_on_entity_rate": (hits / slots) if slots else None,
        "wall_clock_s": time.time() - t0,
    }
    if report_dir is not None:
        out = Path(report_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / f"report_{suite}.json", "w") as f:
            json.dump(report, f, indent=1, sort_keys=True)
        with open(out / f"report_{suite}.txt", "w") as f:
            f.write(format_report(report))
    return report


def format_report(report):
    lines = [f"suite: {report['suite']}",
             f"wall clock: {report['wall_clock_s']:.1f} s"]
    if report.get("argmax_on_entity_rate") is not None:
        lines.append(
            f"heatmap argmax on entity: {report['argmax_on_entity_rate']:.0%}")
    lines.append("")
    header = f"{'task':<12} {'success':>8} {'trials':>7} {'rate':>6}"
    if report["suite"] == "ablation_no_heatmap":
        header += f" {'paired':>7} {'delta':>7}"
    lines.append(header)
    for task, row in sorted(report["per_task"].items()):
        line = (f"{task:<12} {row['successes']:>8} {row['trials']:>7} "
                f"{row['rate']:>6.0%}")
        if "delta" in row:
            line += f" {row['paired_rate']:>7.0%} {row['delta']:>+7.0%}"
        lines.append(line)
    return "\n".join(lines) + "\n"


class SimEnvFactory:
    """Builds simulator episodes bound to one vocabulary and run config."""

    def __init__(self, vocab, config):
        self.vocab = vocab
        self.config = config

    def __call__(self, template, seed):
        from .simenv import SimEnv

        return SimEnv(template, seed, self.vocab,
                      noise_sigma=self.config["data"]["noise_sigma"])
