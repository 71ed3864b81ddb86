"""Deterministic planar mobile-manipulation world.

SE(2) robot (torso pose + end-effector offset + gripper) among disc/rect
entities with heights. Two orthographic cameras (topdown height field, front
range field), quasi-static kinematic contacts (pushed entities translate with
the contacting body while overlap persists), scripted experts, and
template-specific success predicates.

Conventions:
  * image arrays are (H, W); a pixel is addressed as (u, v) = (column, row)
  * topdown pixel (u, v) maps to world x = xmin + (u+0.5)*sx,
    y = ymin + (v+0.5)*sy; depth is the height of the tallest entity there
  * front camera sits at y = ymin looking along +y; pixel (u, v) maps to
    x = xmin + (u+0.5)*sx, z = (v+0.5)*sz; depth is the range to the nearest
    entity surface whose height exceeds z, else the full workspace depth
  * lifted 3D points: topdown (x, y, depth); front (x, ymin+depth, z)
  * tools are rects split along their local x axis into a handle sub-region
    (x_local < 0) and a head sub-region (x_local >= 0)
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .encoder import SUBREGION_HANDLE, SUBREGION_HEAD, SUBREGION_NONE

TEMPLATE_IDS = ("walk_to", "pick_place", "sweep")

PROPRIO_DIM = 8
ACTION_DIM = 6
STEP_BUDGET = 600


class WorldError(Exception):
    pass


class UnknownTemplateError(WorldError):
    def __init__(self, template_id):
        super().__init__(f"unknown scene template: {template_id!r}")


@dataclass
class WorldConfig:
    bounds: tuple = (-2.0, 2.0, -2.0, 2.0)  # xmin, xmax, ymin, ymax
    action_bounds: tuple = (0.05, 0.05, 0.1, 0.05, 0.05)  # dx, dy, dth, ddx, ddy
    arm_reach: float = 0.7
    grasp_radius: float = 0.12
    ee_radius: float = 0.06
    ee_push_min_height: float = 0.1  # gripper carries above lower entities
    torso_radius: float = 0.15
    spawn_radius: tuple = (0.45, 0.9)
    overlap_tolerance: float = 0.05
    distractor_probability: float = 0.5
    step_budget: int = STEP_BUDGET
    topdown_size: tuple = (48, 48)  # (W, H)
    front_size: tuple = (48, 16)
    front_z_max: float = 0.4

    @property
    def camera_ids(self):
        return ("topdown", "front")


@dataclass
class Entity:
    id: int
    category: str
    color: str
    shape: str  # disc | rect
    pose: tuple  # (x, y, theta)
    extents: tuple  # disc: (radius,); rect: (half_x, half_y)
    height: float
    graspable: bool = False
    container: bool = False
    steppable: bool = False
    tool: bool = False

    def __post_init__(self):
        if any(e <= 0 for e in self.extents):
            raise WorldError(f"entity {self.id}: extents must be positive")
        if self.height < 0:
            raise WorldError(f"entity {self.id}: height must be >= 0")
        if self.tool and self.shape != "rect":
            raise WorldError(f"entity {self.id}: tools must be rects (handle/head split)")

    @property
    def position(self):
        return np.array(self.pose[:2])

    @property
    def bounding_radius(self):
        if self.shape == "disc":
            return self.extents[0]
        return math.hypot(*self.extents)

    def attribute_tokens(self):
        return (self.color, self.category)

    def contains(self, point):
        """Footprint membership of a world (x, y) point."""
        dx = point[0] - self.pose[0]
        dy = point[1] - self.pose[1]
        if self.shape == "disc":
            return dx * dx + dy * dy <= self.extents[0] ** 2
        c, s = math.cos(self.pose[2]), math.sin(self.pose[2])
        lx = c * dx + s * dy
        ly = -s * dx + c * dy
        return abs(lx) <= self.extents[0] and abs(ly) <= self.extents[1]

    def local_x(self, point):
        c, s = math.cos(self.pose[2]), math.sin(self.pose[2])
        return c * (point[0] - self.pose[0]) + s * (point[1] - self.pose[1])

    def handle_point(self):
        if not self.tool:
            raise WorldError(f"entity {self.id} is not a tool")
        c, s = math.cos(self.pose[2]), math.sin(self.pose[2])
        r = 0.6 * self.extents[0]
        return np.array([self.pose[0] - r * c, self.pose[1] - r * s])

    def head_point(self):
        if not self.tool:
            raise WorldError(f"entity {self.id} is not a tool")
        c, s = math.cos(self.pose[2]), math.sin(self.pose[2])
        r = 0.6 * self.extents[0]
        return np.array([self.pose[0] + r * c, self.pose[1] + r * s])

    @property
    def head_radius(self):
        return self.extents[1] + 0.03

    def grasp_point(self):
        return self.handle_point() if self.tool else self.position


@dataclass
class RobotState:
    torso: tuple = (0.0, 0.0, 0.0)
    ee_offset: tuple = (0.3, 0.0)
    gripper_closed: bool = False
    held_entity: int | None = None
    held_offset: tuple = (0.0, 0.0)  # world-frame grasp offset, fixed while held

    def ee_position(self):
        x, y, th = self.torso
        c, s = math.cos(th), math.sin(th)
        dx, dy = self.ee_offset
        return np.array([x + c * dx - s * dy, y + s * dx + c * dy])

    def proprio(self):
        x, y, th = self.torso
        return np.array([
            x, y, math.cos(th), math.sin(th),
            self.ee_offset[0], self.ee_offset[1],
            1.0 if self.gripper_closed else 0.0,
            1.0 if self.held_entity is not None else 0.0,
        ])


@dataclass
class Action:
    torso_delta: tuple = (0.0, 0.0, 0.0)
    ee_delta: tuple = (0.0, 0.0)
    gripper_cmd: float = 0.0  # desired state: <0.5 open, >=0.5 closed

    def as_vector(self):
        return np.array([*self.torso_delta, *self.ee_delta, self.gripper_cmd])

    @classmethod
    def from_vector(cls, v):
        v = np.asarray(v, dtype=float)
        if v.shape != (ACTION_DIM,):
            raise WorldError(f"action vector must have shape ({ACTION_DIM},), got {v.shape}")
        return cls(tuple(v[:3]), tuple(v[3:5]), float(v[5]))


@dataclass
class Scene:
    entities: list
    bounds: tuple
    seed: int

    def entity(self, eid):
        for e in self.entities:
            if e.id == eid:
                return e
        raise WorldError(f"no entity with id {eid}")

    def entity_attrs(self):
        return {e.id: e.attribute_tokens() for e in self.entities}

    def entity_poses(self):
        return {e.id: tuple(e.pose) for e in self.entities}

    def copy(self):
        return Scene([replace(e) for e in self.entities], self.bounds, self.seed)


@dataclass
class TaskInstance:
    template_id: str
    slots: dict  # affordance name -> entity id
    slot_tokens: dict  # affordance name -> token tuple (for ground-truth reps)
    instruction: str
    success_predicate: str
    motion_token: str | None = None


@dataclass
class CameraView:
    camera_id: str
    depth: np.ndarray  # (H, W) meters
    entity_id: np.ndarray  # (H, W) int, 0 = background
    subregion: np.ndarray  # (H, W) int


@dataclass
class Observation:
    views: dict  # camera_id -> CameraView
    proprio: np.ndarray
    t: int


@dataclass
class StepEvents:
    events: list = field(default_factory=list)

    def add(self, name, *args):
        self.events.append((name, *args))

    def __iter__(self):
        return iter(self.events)

    def __bool__(self):
        return bool(self.events)


@dataclass
class Trajectory:
    task: TaskInstance
    actions: list
    events: list  # one list of event tuples per step
    final_scene: Scene
    final_robot: RobotState
    expert_success: bool = False

    def all_events(self):
        return [ev for step in self.events for ev in step]


# ---------------------------------------------------------------------------
# cameras


def _topdown_grid(config):
    xmin, xmax, ymin, ymax = config.bounds
    w, h = config.topdown_size
    xs = xmin + (np.arange(w) + 0.5) * (xmax - xmin) / w
    ys = ymin + (np.arange(h) + 0.5) * (ymax - ymin) / h
    return np.meshgrid(xs, ys)


def _front_axes(config):
    xmin, xmax, ymin, ymax = config.bounds
    w, h = config.front_size
    xs = xmin + (np.arange(w) + 0.5) * (xmax - xmin) / w
    zs = (np.arange(h) + 0.5) * config.front_z_max / h
    return xs, zs


def _subregion_mask(entity, X, Y):
    if not entity.tool:
        return None
    c, s = math.cos(entity.pose[2]), math.sin(entity.pose[2])
    lx = c * (X - entity.pose[0]) + s * (Y - entity.pose[1])
    return np.where(lx < 0, SUBREGION_HANDLE, SUBREGION_HEAD)


def render(scene, robot, camera_id, config=None):
    """Render one orthographic camera view of the scene.

    The robot body itself is not rendered; held entities appear at their
    attached pose (kept current by step()).
    """
    config = config or WorldConfig()
    if camera_id == "topdown":
        return _render_topdown(scene, config)
    if camera_id == "front":
        return _render_front(scene, config)
    raise WorldError(f"unknown camera: {camera_id!r} (expected topdown or front)")


def _render_topdown(scene, config):
    X, Y = _topdown_grid(config)
    xmin, xmax, ymin, ymax = config.bounds
    w, h = config.topdown_size
    # each pixel samples a cell of this half-size; an entity is drawn on every
    # pixel whose cell it intersects, so entities smaller than a pixel still
    # render (a center-in-shape test can miss a disc lying between samples)
    hx = (xmax - xmin) / w / 2.0
    hy = (ymax - ymin) / h / 2.0
    depth = np.zeros_like(X)
    ids = np.zeros(X.shape, dtype=np.int32)
    sub = np.zeros(X.shape, dtype=np.int32)
    for e in sorted(scene.entities, key=lambda e: e.height):
        if e.shape == "disc":
            dx = np.maximum(np.abs(X - e.pose[0]) - hx, 0.0)
            dy = np.maximum(np.abs(Y - e.pose[1]) - hy, 0.0)
            mask = dx ** 2 + dy ** 2 <= e.extents[0] ** 2
        else:
            c, s = math.cos(e.pose[2]), math.sin(e.pose[2])
            lx = c * (X - e.pose[0]) + s * (Y - e.pose[1])
            ly = -s * (X - e.pose[0]) + c * (Y - e.pose[1])
            mask = (np.abs(lx) <= e.extents[0] + hx) & \
                (np.abs(ly) <= e.extents[1] + hy)
        depth[mask] = e.height
        ids[mask] = e.id
        sub[mask] = 0
        sm = _subregion_mask(e, X, Y)
        if sm is not None:
            sub[mask] = sm[mask]
    return CameraView("topdown", depth, ids, sub)


def _render_front(scene, config):
    xmin, xmax, ymin, ymax = config.bounds
    xs, zs = _front_axes(config)
    w, h = config.front_size
    background = ymax - ymin
    depth = np.full((h, w), background)
    ids = np.zeros((h, w), dtype=np.int32)
    sub = np.zeros((h, w), dtype=np.int32)
    # nearest-surface y per entity per column; axis-aligned rects assumed
    # (generation never rotates rects and stepping never rotates entities)
    hx = (xmax - xmin) / w / 2.0  # half column width: sub-pixel entities
    for e in scene.entities:      # must still land on their nearest column
        if e.shape == "disc":
            dx = xs - e.pose[0]
            inside = np.abs(dx) <= e.extents[0] + hx
            ysurf = np.where(inside, e.pose[1] - np.sqrt(
                np.maximum(e.extents[0] ** 2 - np.minimum(
                    np.abs(dx), e.extents[0]) ** 2, 0.0)), np.inf)
        else:
            inside = np.abs(xs - e.pose[0]) <= e.extents[0] + hx
            ysurf = np.where(inside, e.pose[1] - e.extents[1], np.inf)
        rng = ysurf - ymin
        zmask = zs < e.height
        cand = np.broadcast_to(rng, (h, w)).copy()
        cand[~zmask, :] = np.inf
        closer = cand < depth
        depth = np.where(closer, cand, depth)
        ids = np.where(closer, e.id, ids)
        if e.tool:
            lx = xs - e.pose[0]  # axis-aligned tool assumed for front view
            col_sub = np.where(lx < 0, SUBREGION_HANDLE, SUBREGION_HEAD)
            sub = np.where(closer, np.broadcast_to(col_sub, (h, w)), sub)
        else:
            sub = np.where(closer, SUBREGION_NONE, sub)
    return CameraView("front", depth, ids, sub)


def observe(scene, robot, t, config=None):
    config = config or WorldConfig()
    views = {cid: render(scene, robot, cid, config) for cid in config.camera_ids}
    return Observation(views, robot.proprio(), t)


def lift_pixels(view, config=None):
    """Inverse-project all foreground pixels of a view to world 3D points.

    Returns (positions (P, 3), flat pixel indices (P,), entity ids (P,)).
    """
    config = config or WorldConfig()
    xmin, xmax, ymin, ymax = config.bounds
    h, w = view.depth.shape
    vv, uu = np.nonzero(view.entity_id)
    d = view.depth[vv, uu]
    if view.camera_id == "topdown":
        x = xmin + (uu + 0.5) * (xmax - xmin) / w
        y = ymin + (vv + 0.5) * (ymax - ymin) / h
        pts = np.stack([x, y, d], axis=1)
    elif view.camera_id == "front":
        x = xmin + (uu + 0.5) * (xmax - xmin) / w
        z = (vv + 0.5) * config.front_z_max / h
        pts = np.stack([x, ymin + d, z], axis=1)
    else:
        raise WorldError(f"unknown camera: {view.camera_id!r}")
    return pts, vv * w + uu, view.entity_id[vv, uu]


# ---------------------------------------------------------------------------
# dynamics


def _wrap_angle(a):
    return (a + math.pi) % (2 * math.pi) - math.pi


def _pushable(entity):
    # Containers and furniture are anchored; only loose graspables slide.
    return entity.graspable and not entity.steppable


def step(scene, robot, action, config=None):
    """Advance the world one step. Returns (scene', robot', events).

    Contact rule (quasi-static): a pushable entity translates by exactly the
    pusher disc at its end-of-step position: a pushable entity penetrated by
    a pusher is translated out along the contact normal by exactly the
    penetration depth, leaving the two just touching. Pushers are the
    end-effector disc and, when a tool is held, the tool-head disc. The
    end-effector only pushes entities at least `ee_push_min_height` tall (it
    carries above lower ones); the tool head slides on the floor and pushes
    anything pushable. Contact events fire for every penetration regardless;
    torso overlap emits `traversed` (or `stepped_on`) rather than `contacted`.
    """
    config = config or WorldConfig()
    vec = action.as_vector()
    if not np.all(np.isfinite(vec)):
        raise WorldError("action contains NaN or inf")
    events = StepEvents()

    b = config.action_bounds
    lo = np.array([-b[0], -b[1], -b[2], -b[3], -b[4]])
    hi = -lo
    clipped = np.clip(vec[:5], lo, hi)

    x, y, th = robot.torso
    nx, ny = x + clipped[0], y + clipped[1]
    nth = _wrap_angle(th + clipped[2])
    xmin, xmax, ymin, ymax = scene.bounds
    m = config.torso_radius
    cx, cy = np.clip(nx, xmin + m, xmax - m), np.clip(ny, ymin + m, ymax - m)
    if (cx, cy) != (nx, ny):
        events.add("clamped")
    dx, dy = robot.ee_offset[0] + clipped[3], robot.ee_offset[1] + clipped[4]
    reach = math.hypot(dx, dy)
    if reach > config.arm_reach:
        dx, dy = dx * config.arm_reach / reach, dy * config.arm_reach / reach
        events.add("clamped")

    old_ee = robot.ee_position()
    new_robot = replace(robot, torso=(cx, cy, nth), ee_offset=(dx, dy))
    new_ee = new_robot.ee_position()
    ee_delta = new_ee - old_ee

    new_scene = scene.copy()

    # held entity rides the end-effector at a fixed world-frame offset
    held = None
    if robot.held_entity is not None:
        held = new_scene.entity(robot.held_entity)
        hx, hy = new_ee + np.array(robot.held_offset)
        held.pose = (hx, hy, held.pose[2])

    # pushers evaluated at their end-of-step positions
    pushers = [("ee", new_ee, config.ee_radius)]
    if held is not None and held.tool:
        pushers.append(("tool", held.head_point(), held.head_radius))

    for e in new_scene.entities:
        if held is not None and e.id == held.id:
            continue
        for kind, pos, radius in pushers:
            hit = _penetration(pos, radius, e)
            if hit is None:
                continue
            if kind == "ee":
                events.add("contacted", e.id)
            else:
                events.add("tool_contacted", e.id)
            pushes = _pushable(e) and (
                kind == "tool" or e.height >= config.ee_push_min_height)
            if pushes:
                depth, normal = hit
                px = np.clip(e.pose[0] + depth * normal[0], xmin, xmax)
                py = np.clip(e.pose[1] + depth * normal[1], ymin, ymax)
                e.pose = (px, py, e.pose[2])

    # torso-level contact / traversal events
    for e in new_scene.entities:
        if held is not None and e.id == held.id:
            continue
        if _overlap_disc_entity(np.array([cx, cy]), config.torso_radius, e):
            if e.steppable:
                events.add("stepped_on", e.id)
            else:
                events.add("traversed", e.id)

    # gripper command: desired state, applied after motion
    want_closed = vec[5] >= 0.5
    if want_closed and not robot.gripper_closed:
        new_robot = replace(new_robot, gripper_closed=True)
    if want_closed and new_robot.held_entity is None:
        target = _nearest_graspable(new_scene, new_ee, config.grasp_radius,
                                    exclude=held.id if held else None)
        if target is not None:
            offset = target.position - new_ee
            new_robot = replace(new_robot, gripper_closed=True,
                                held_entity=target.id, held_offset=tuple(offset))
            events.add("grasped", target.id)
    if not want_closed:
        if new_robot.held_entity is not None:
            dropped = new_scene.entity(new_robot.held_entity)
            for e in new_scene.entities:
                if e.container and e.id != dropped.id and e.contains(dropped.position):
                    events.add("placed", dropped.id, e.id)
                    break
        new_robot = replace(new_robot, gripper_closed=False,
                            held_entity=None, held_offset=(0.0, 0.0))

    # container entry of the end-effector
    for e in new_scene.entities:
        if e.container and e.contains(new_ee):
            events.add("entered", e.id)

    return new_scene, new_robot, events


def _penetration(center, radius, entity):
    """Depth and outward unit normal of disc (center, radius) into entity.

    The normal points from the pusher toward the entity, i.e. the direction
    the entity must translate to resolve the overlap. Returns None when the
    two are separated or exactly touching.
    """
    dx = entity.pose[0] - center[0]
    dy = entity.pose[1] - center[1]
    if entity.shape == "disc":
        dist = math.hypot(dx, dy)
        depth = radius + entity.extents[0] - dist
        if depth <= 0.0:
            return None
        if dist < 1e-9:
            return depth, np.array([1.0, 0.0])
        return depth, np.array([dx, dy]) / dist
    c, s = math.cos(entity.pose[2]), math.sin(entity.pose[2])
    # pusher center in the rectangle's local frame
    lx = c * -dx + s * -dy
    ly = -s * -dx + c * -dy
    ex, ey = entity.extents
    qx, qy = lx - np.clip(lx, -ex, ex), ly - np.clip(ly, -ey, ey)
    if qx == 0.0 and qy == 0.0:
        # center inside the rectangle: expel along the shallowest face
        px, py = ex - abs(lx), ey - abs(ly)
        if px <= py:
            local = np.array([-math.copysign(1.0, lx) if lx else 1.0, 0.0])
            depth = radius + px
        else:
            local = np.array([0.0, -math.copysign(1.0, ly) if ly else 1.0])
            depth = radius + py
    else:
        dist = math.hypot(qx, qy)
        depth = radius - dist
        if depth <= 0.0:
            return None
        local = np.array([-qx, -qy]) / dist
    world = np.array([c * local[0] - s * local[1], s * local[0] + c * local[1]])
    return depth, world


def _overlap_disc_entity(center, radius, entity):
    dx = center[0] - entity.pose[0]
    dy = center[1] - entity.pose[1]
    if entity.shape == "disc":
        return math.hypot(dx, dy) <= radius + entity.extents[0]
    c, s = math.cos(entity.pose[2]), math.sin(entity.pose[2])
    lx = c * dx + s * dy
    ly = -s * dx + c * dy
    qx = max(abs(lx) - entity.extents[0], 0.0)
    qy = max(abs(ly) - entity.extents[1], 0.0)
    return math.hypot(qx, qy) <= radius


def _nearest_graspable(scene, ee, grasp_radius, exclude=None):
    best, best_d = None, None
    for e in scene.entities:
        if not e.graspable or e.id == exclude:
            continue
        d = float(np.linalg.norm(e.grasp_point() - ee))
        if d <= grasp_radius and (best is None or d < best_d):
            best, best_d = e, d
    return best


# ---------------------------------------------------------------------------
# scene generation

COLORS = ("red", "blue", "green", "yellow", "maroon", "white")
_TEMPLATE_SALT = {tid: i + 1 for i, tid in enumerate(TEMPLATE_IDS)}


def generate_scene(template_id, seed, config=None):
    """Deterministically build (Scene, TaskInstance) for a registered template."""
    config = config or WorldConfig()
    if template_id not in _TEMPLATE_SALT:
        raise UnknownTemplateError(template_id)
    rng = np.random.default_rng([_TEMPLATE_SALT[template_id], int(seed) & (2**63 - 1)])
    builder = {
        "walk_to": _build_walk_to,
        "pick_place": _build_pick_place,
        "sweep": _build_sweep,
    }[template_id]
    return builder(rng, seed, config)


def _place_entities(rng, protos, config, max_attempts=100):
    """Rejection-sample non-overlapping poses in the spawn annulus.

    Returns (entities, attempts_used). protos are (builder, bounding_radius)
    pairs; builder receives the sampled (x, y).
    """
    r_lo, r_hi = config.spawn_radius
    for attempt in range(1, max_attempts + 1):
        placed = []
        ok = True
        for make, radius in protos:
            for _ in range(30):
                ang = rng.uniform(0, 2 * math.pi)
                rad = rng.uniform(r_lo, r_hi)
                pos = (rad * math.cos(ang), rad * math.sin(ang))
                if all(math.hypot(pos[0] - p[0], pos[1] - p[1])
                       >= radius + pr + config.overlap_tolerance
                       for (p, pr) in placed):
                    placed.append((pos, radius))
                    break
            else:
                ok = False
                break
        if ok:
            entities = [make(pos) for (pos, _), (make, _) in zip(placed, protos)]
            return entities, attempt
    raise WorldError(f"could not place entities without overlap in {max_attempts} attempts")


def _pick_colors(rng, n):
    return [COLORS[i] for i in rng.choice(len(COLORS), size=n, replace=False)]


def _maybe_distractor(rng, config, next_id, used_colors):
    if rng.uniform() >= config.distractor_probability:
        return []
    color = COLORS[rng.choice(len(COLORS))]
    while color in used_colors:
        color = COLORS[rng.choice(len(COLORS))]
    return [lambda pos, c=color, i=next_id: Entity(
        id=i, category="snack", color=c, shape="disc", pose=(*pos, 0.0),
        extents=(0.05,), height=0.05, graspable=True)]


def _build_walk_to(rng, seed, config):
    color, c2 = _pick_colors(rng, 2)
    protos = [(lambda pos: Entity(id=1, category="table", color=color, shape="rect",
                                  pose=(*pos, 0.0), extents=(0.22, 0.16), height=0.3), 0.28)]
    extra = _maybe_distractor(rng, config, 2, {color})
    protos += [(m, 0.08) for m in extra]
    entities, _ = _place_entities(rng, protos, config)
    scene = Scene(entities, config.bounds, seed)
    task = TaskInstance(
        template_id="walk_to",
        slots={"walk_to": 1},
        slot_tokens={"walk_to": (color, "table")},
        instruction=f"walk to the {color} table",
        success_predicate="reached_walk_to",
    )
    return scene, task


def _build_pick_place(rng, seed, config):
    """Pick-and-place with a same-category distractor cup: the instruction's
    color is the only cue disambiguating the two cups."""
    c_target, c_distract, c_basket = _pick_colors(rng, 3)
    protos = [
        (lambda pos: Entity(id=1, category="cup", color=c_target, shape="disc",
                            pose=(*pos, 0.0), extents=(0.05,), height=0.1,
                            graspable=True), 0.06),
        (lambda pos: Entity(id=2, category="cup", color=c_distract, shape="disc",
                            pose=(*pos, 0.0), extents=(0.05,), height=0.1,
                            graspable=True), 0.06),
        (lambda pos: Entity(id=3, category="basket", color=c_basket, shape="disc",
                            pose=(*pos, 0.0), extents=(0.18,), height=0.08,
                            container=True), 0.18),
    ]
    entities, _ = _place_entities(rng, protos, config)
    scene = Scene(entities, config.bounds, seed)
    task = TaskInstance(
        template_id="pick_place",
        slots={"grasp": 1, "place": 3},
        slot_tokens={"grasp": (c_target, "cup"), "place": (c_basket, "basket")},
        instruction=f"pick up the {c_target} cup and place it in the {c_basket} basket",
        success_predicate="placed_in_container",
    )
    return scene, task


def _build_sweep(rng, seed, config):
    c_brush, c_snack, c_basket = _pick_colors(rng, 3)
    # The sweep direction must roughly match the held brush's head direction
    # (+x: held offsets are world-frame fixed), so the basket is sampled in a
    # cone +x of the snack.
    protos = [
        (lambda pos: Entity(id=1, category="brush", color=c_brush, shape="rect",
                            pose=(*pos, 0.0), extents=(0.14, 0.04), height=0.06,
                            graspable=True, tool=True), 0.16),
        (lambda pos: Entity(id=2, category="snack", color=c_snack, shape="disc",
                            pose=(*pos, 0.0), extents=(0.05,), height=0.04,
                            graspable=True), 0.06),
    ]
    for _ in range(100):
        entities, _ = _place_entities(rng, protos, config)
        snack = entities[1]
        ang = rng.uniform(-0.5, 0.5)
        dist = rng.uniform(0.45, 0.7)
        bx = snack.pose[0] + dist * math.cos(ang)
        by = snack.pose[1] + dist * math.sin(ang)
        xmin, xmax, ymin, ymax = config.bounds
        basket = Entity(id=3, category="basket", color=c_basket, shape="disc",
                        pose=(bx, by, 0.0), extents=(0.18,), height=0.08,
                        container=True)
        clear = (xmin + 0.25 <= bx <= xmax - 0.25 and ymin + 0.25 <= by <= ymax - 0.25
                 and all(np.linalg.norm(basket.position - e.position)
                         >= basket.bounding_radius + e.bounding_radius
                         + config.overlap_tolerance for e in entities))
        if clear:
            entities.append(basket)
            break
    else:
        raise WorldError("could not place sweep basket in 100 attempts")
    scene = Scene(entities, config.bounds, seed)
    task = TaskInstance(
        template_id="sweep",
        slots={"grasp": 1, "function": 1, "indirect_contact": 2, "place": 3},
        slot_tokens={
            "grasp": (c_brush, "brush", "handle"),
            "function": (c_brush, "brush", "head"),
            "indirect_contact": (c_snack, "snack"),
            "place": (c_basket, "basket"),
        },
        instruction=(f"sweep the {c_snack} snack into the {c_basket} basket "
                     f"using the {c_brush} brush"),
        success_predicate="swept_in_container",
    )
    return scene, task


# ---------------------------------------------------------------------------
# scripted experts


def scripted_expert(task, scene, robot, config=None):
    """Finite-state expert controller; returns an Action, or None when done.

    The controller is a pure function of the current state: the phase is
    inferred from holding/position predicates rather than stored.
    """
    config = config or WorldConfig()
    fn = {
        "walk_to": _expert_walk_to,
        "pick_place": _expert_pick_place,
        "sweep": _expert_sweep,
    }.get(task.template_id)
    if fn is None:
        raise UnknownTemplateError(task.template_id)
    return fn(task, scene, robot, config)


def _clip_step(delta, max_step):
    d = float(np.linalg.norm(delta))
    if d <= max_step:
        return np.asarray(delta, dtype=float)
    return np.asarray(delta) * (max_step / d)


def _towards(robot, target_xy, config, gripper, gain=1.0):
    step_xy = _clip_step((np.asarray(target_xy) - robot.ee_position()) * gain,
                         config.action_bounds[0])
    return Action(torso_delta=(step_xy[0], step_xy[1], 0.0), gripper_cmd=gripper)


def _avoiding(robot, target_xy, obstacles, config, gripper, keepout_pad=0.05):
    """Greedy go-to with tangential detours around keep-out discs."""
    ee = robot.ee_position()
    direct = np.asarray(target_xy) - ee
    step_xy = _clip_step(direct, config.action_bounds[0])
    nxt = ee + step_xy
    for center, radius in obstacles:
        keepout = radius + config.ee_radius + keepout_pad
        if np.linalg.norm(nxt - center) < keepout:
            away = ee - center
            away_n = away / max(np.linalg.norm(away), 1e-9)
            tang = np.array([-away_n[1], away_n[0]])
            if np.dot(tang, direct) < 0:
                tang = -tang
            step_xy = _clip_step(tang + 0.5 * away_n, config.action_bounds[0])
            break
    return Action(torso_delta=(step_xy[0], step_xy[1], 0.0), gripper_cmd=gripper)


def _expert_walk_to(task, scene, robot, config):
    target = scene.entity(task.slots["walk_to"])
    torso_xy = np.array(robot.torso[:2])
    err = target.position - torso_xy
    if np.linalg.norm(err) <= 0.40:
        return None
    step_xy = _clip_step(err, config.action_bounds[0])
    return Action(torso_delta=(step_xy[0], step_xy[1], 0.0))


def _expert_pick_place(task, scene, robot, config):
    cup = scene.entity(task.slots["grasp"])
    basket = scene.entity(task.slots["place"])
    if robot.held_entity != cup.id:
        if robot.held_entity is not None:
            return Action(gripper_cmd=0.0)  # grabbed the wrong entity; drop it
        if basket.contains(cup.position) and not robot.gripper_closed:
            return None  # placed
        err = cup.position - robot.ee_position()
        nearest = _nearest_graspable(scene, robot.ee_position(), config.grasp_radius)
        if (np.linalg.norm(err) <= config.grasp_radius * 0.95
                and nearest is not None and nearest.id == cup.id):
            return Action(gripper_cmd=1.0)
        return _towards(robot, cup.position, config, gripper=0.0)
    # carrying: move over the basket center, then release
    err = basket.position - cup.position
    if np.linalg.norm(err) <= basket.extents[0] * 0.4:
        return Action(gripper_cmd=0.0)
    step_xy = _clip_step(err, config.action_bounds[0])
    return Action(torso_delta=(step_xy[0], step_xy[1], 0.0), gripper_cmd=1.0)


def _expert_sweep(task, scene, robot, config):
    brush = scene.entity(task.slots["grasp"])
    snack = scene.entity(task.slots["indirect_contact"])
    basket = scene.entity(task.slots["place"])
    if basket.contains(snack.position):
        return None
    if robot.held_entity != brush.id:
        if robot.held_entity is not None:
            return Action(gripper_cmd=0.0)
        handle = brush.handle_point()
        err = handle - robot.ee_position()
        if np.linalg.norm(err) <= config.grasp_radius * 0.6:
            return Action(gripper_cmd=1.0)
        return _avoiding(robot, handle, [(snack.position, snack.extents[0])],
                         config, gripper=0.0)
    head = brush.head_point()
    head_off = head - robot.ee_position()
    contact_r = brush.head_radius + snack.extents[0]
    push_dir = basket.position - snack.position
    push_dir /= max(np.linalg.norm(push_dir), 1e-9)
    to_snack = snack.position - head
    gap = float(np.linalg.norm(to_snack))
    aligned = gap > 1e-9 and float(np.dot(to_snack / gap, push_dir)) > 0.8
    if aligned and gap <= contact_r + 0.06:
        # dribble: drive the head slightly into the snack along the current
        # snack-to-basket line; the contact expels the snack toward the basket
        target_head = snack.position - push_dir * (contact_r - 0.03)
        step_xy = _clip_step(target_head - head, config.action_bounds[0])
        return Action(torso_delta=(step_xy[0], step_xy[1], 0.0), gripper_cmd=1.0)
    # re-stage behind the snack. Both the gripper disc and the offset tool
    # head must round the snack without clipping it, so keep-outs are placed
    # for each (the head avoids the snack iff the gripper avoids its image
    # shifted by the rigid head offset).
    stage_ee = snack.position - push_dir * (contact_r + 0.02) - head_off
    obstacles = [(snack.position, 0.12),
                 (snack.position - head_off, contact_r + 0.01 - config.ee_radius)]
    return _avoiding(robot, stage_ee, obstacles, config, gripper=1.0,
                     keepout_pad=0.0)


def run_expert_episode(template_id, seed, config=None, robot=None,
                       action_noise=0.0):
    """Generate a scene and roll the scripted expert to completion.

    `action_noise` adds zero-mean Gaussian jitter (std in meters, clipped to
    the action bounds) to the executed torso translation. The reactive expert
    corrects on subsequent steps, so the recorded episode visits perturbed
    states while its actions still point back toward task completion —
    coverage an imitation learner needs for states its own drift produces.
    """
    config = config or WorldConfig()
    scene, task = generate_scene(template_id, seed, config)
    robot = robot or RobotState()
    rng = (np.random.default_rng([4241, int(seed) & (2**63 - 1)])
           if action_noise > 0 else None)
    actions, events = [], []
    success = False
    states = [(scene, robot)]
    for _ in range(config.step_budget):
        act = scripted_expert(task, scene, robot, config)
        if act is None:
            success = True
            break
        if rng is not None:
            jitter = rng.normal(0.0, action_noise, size=2)
            dx, dy, dth = act.torso_delta
            bx, by = config.action_bounds[0], config.action_bounds[1]
            act = replace(act, torso_delta=(
                float(np.clip(dx + jitter[0], -bx, bx)),
                float(np.clip(dy + jitter[1], -by, by)),
                dth))
        scene, robot, evs = step(scene, robot, act, config)
        actions.append(act)
        events.append(list(evs))
        states.append((scene, robot))
    traj = Trajectory(task, actions, events, scene, robot, expert_success=success)
    return traj, states


# ---------------------------------------------------------------------------
# success evaluation


def evaluate_success(task, trajectory, config=None):
    """Template-specific predicate over the final state and the event log."""
    config = config or WorldConfig()
    if not trajectory.actions:
        return False
    scene = trajectory.final_scene
    pred = task.success_predicate
    if pred == "reached_walk_to":
        target = scene.entity(task.slots["walk_to"])
        dist = np.linalg.norm(target.position - np.array(trajectory.final_robot.torso[:2]))
        return bool(dist <= 0.45)
    if pred == "placed_in_container":
        obj = scene.entity(task.slots["grasp"])
        basket = scene.entity(task.slots["place"])
        return bool(basket.contains(obj.position)
                    and trajectory.final_robot.held_entity != obj.id)
    if pred == "swept_in_container":
        snack = scene.entity(task.slots["indirect_contact"])
        basket = scene.entity(task.slots["place"])
        touched = any(ev[0] == "contacted" and ev[1] == snack.id
                      for ev in trajectory.all_events())
        return bool(basket.contains(snack.position) and not touched)
    if pred.startswith("avoid:"):
        avoid_id = task.slots["avoid"]
        touched = any(
            ev[0] in ("contacted", "tool_contacted", "stepped_on", "traversed")
            and ev[1] == avoid_id for ev in trajectory.all_events())
        inner = replace(task, success_predicate=pred.split(":", 1)[1])
        return evaluate_success(inner, trajectory, config) and not touched
    raise WorldError(f"unknown success predicate: {pred!r}")


def first_grasped_entity(trajectory):
    for ev in trajectory.all_events():
        if ev[0] == "grasped":
            return ev[1]
    return None
