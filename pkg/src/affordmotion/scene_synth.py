"""Procedural language-scene-motion triples.

Scenes are a floor plus 3-4 axis-aligned cuboid/compound furniture pieces sampled as
surface points. Tasks pick an action on one piece and synthesize a joint trajectory by
posing the simplified body along a straight collision-free walk followed by a blend
into the action's end pose.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation, Slerp

from .bodyfit import BodyParams, forward_kinematics
from .geometry import (DEFAULT_SIGMA, AffordanceMap, MotionSequence, PointCloud,
                       compute_affordance_map)
from .skeleton import DEFAULT_LAYOUT, JOINT_NAMES, REST_POSITIONS, SkeletonLayout
from .text import TextEncoder, TextPrompt, encode_text

CATEGORIES = ("table", "chair", "bed", "desk", "sofa", "shelf", "door", "toilet")
LABELS = CATEGORIES + ("floor",)
ACTIONS = ("walk", "sit", "lie", "stand_up")

ACTION_TARGETS = {
    "walk": CATEGORIES,
    "sit": ("chair", "sofa", "bed", "toilet"),
    "lie": ("bed", "sofa"),
    "stand_up": ("chair", "sofa", "bed", "toilet"),
}

TEMPLATES = {
    "walk": ("walk to the {}", "go to the {}", "walk over to the {}", "approach the {}"),
    "sit": ("sit on the {}", "sit down on the {}", "take a seat on the {}"),
    "lie": ("lie on the {}", "lie down on the {}"),
    "stand_up": ("stand up from the {}", "get up from the {}"),
}

BASE_COLORS = {
    "table": (0.55, 0.35, 0.20), "chair": (0.80, 0.20, 0.20), "bed": (0.30, 0.45, 0.85),
    "desk": (0.65, 0.55, 0.35), "sofa": (0.20, 0.65, 0.30), "shelf": (0.50, 0.25, 0.55),
    "door": (0.90, 0.85, 0.60), "toilet": (0.95, 0.95, 0.95), "floor": (0.45, 0.45, 0.45),
}

@dataclass
class SceneObject:
    label: str
    point_indices: np.ndarray
    centroid: np.ndarray
    # axis-aligned cuboids (P x 2 x 3: min, max); empty for the floor
    boxes: np.ndarray = field(default_factory=lambda: np.zeros((0, 2, 3), np.float32))
    front: np.ndarray = field(default_factory=lambda: np.array([0.0, 1.0], np.float32))
    seat_height: float = 0.0

    def __post_init__(self):
        if self.label not in LABELS:
            raise ValueError(f"unknown object label {self.label!r}")
        self.point_indices = np.asarray(self.point_indices, dtype=np.int64)
        if len(self.point_indices) == 0:
            raise ValueError("object has no points")
        self.centroid = np.asarray(self.centroid, dtype=np.float32)
        self.boxes = np.asarray(self.boxes, dtype=np.float32).reshape(-1, 2, 3)
        self.front = np.asarray(self.front, dtype=np.float32)

    @property
    def footprint(self) -> np.ndarray:
        """(xmin, ymin, xmax, ymax) of the union of boxes."""
        return np.concatenate([self.boxes[:, 0, :2].min(0), self.boxes[:, 1, :2].max(0)])


@dataclass
class HSISample:
    scene: PointCloud
    objects: list
    motion: MotionSequence
    prompt: TextPrompt
    target_object: int
    affordance: AffordanceMap
    action: str = "walk"

    def __post_init__(self):
        if not 0 <= self.target_object < len(self.objects):
            raise ValueError("target object index out of range")

    @property
    def target(self) -> SceneObject:
        return self.objects[self.target_object]


@dataclass
class SceneConfig:
    floor_extent: float = 4.0
    furniture_count: tuple = (3, 4)
    points_per_object: int = 1024
    floor_points: int = 4096
    clearance: float = 0.3
    max_retries: int = 100
    layout_attempts: int = 50
    categories: tuple = CATEGORIES
    color_noise: float = 0.03


@dataclass
class TaskConfig:
    n_frames: int = 120
    frame_rate: float = 20.0
    actions: tuple = ACTIONS
    sigma: float = DEFAULT_SIGMA
    walk_goal_offset: float = 0.25
    min_walk: float = 1.0
    max_retries: int = 300


# ---------------------------------------------------------------- furniture

def _box(x0, y0, z0, x1, y1, z1):
    return np.array([[x0, y0, z0], [x1, y1, z1]], dtype=np.float64)


def _legs(w, d, h, t=0.05):
    xs, ys = (-w / 2, w / 2 - t), (-d / 2, d / 2 - t)
    return [_box(x, y, 0, x + t, y + t, h) for x in xs for y in ys]


def _build(label, rng):
    """Boxes in a local frame (footprint centred at the origin, front toward +y).

    Returns (boxes, seat top height or None).
    """
    u = rng.uniform
    if label == "table":
        w, d, h = u(1.0, 1.4), u(0.6, 0.9), u(0.70, 0.78)
        return [_box(-w / 2, -d / 2, h - 0.04, w / 2, d / 2, h)] + _legs(w, d, h - 0.04), None
    if label == "desk":
        w, d, h = u(1.0, 1.4), u(0.5, 0.7), u(0.72, 0.76)
        return [_box(-w / 2, -d / 2, h - 0.04, w / 2, d / 2, h),
                _box(-w / 2, -d / 2, 0, -w / 2 + 0.03, d / 2, h - 0.04),
                _box(w / 2 - 0.03, -d / 2, 0, w / 2, d / 2, h - 0.04)], None
    if label == "chair":
        w, d, h = u(0.44, 0.5), u(0.44, 0.5), u(0.44, 0.48)
        boxes = [_box(-w / 2, -d / 2, h - 0.04, w / 2, d / 2, h),
                 _box(-w / 2, -d / 2, h, w / 2, -d / 2 + 0.04, u(0.85, 0.95))] + _legs(w, d, h - 0.04, 0.04)
        return boxes, h
    if label == "sofa":
        w, d, h = u(1.6, 2.0), u(0.8, 0.9), u(0.44, 0.46)
        arm, back = 0.15, 0.2
        boxes = [_box(-w / 2, -d / 2, 0, w / 2, d / 2, h),
                 _box(-w / 2, -d / 2, h, w / 2, -d / 2 + back, 0.8),
                 _box(-w / 2, -d / 2 + back, h, -w / 2 + arm, d / 2, 0.6),
                 _box(w / 2 - arm, -d / 2 + back, h, w / 2, d / 2, 0.6)]
        return boxes, h
    if label == "bed":
        w, d, h = u(1.4, 1.6), u(1.9, 2.1), u(0.48, 0.55)
        boxes = [_box(-w / 2, -d / 2, 0, w / 2, d / 2, h),
                 _box(-w / 2, -d / 2, h, w / 2, -d / 2 + 0.06, 0.95)]
        return boxes, h
    if label == "shelf":
        w, d, h = u(0.8, 1.0), u(0.3, 0.4), u(1.6, 1.9)
        return [_box(-w / 2, -d / 2, 0, w / 2, d / 2, h)], None
    if label == "door":
        return [_box(-0.45, -0.03, 0, 0.45, 0.03, u(1.95, 2.05))], None
    if label == "toilet":
        w, d, h = 0.4, u(0.62, 0.68), u(0.44, 0.46)
        boxes = [_box(-w / 2, -d / 2 + 0.22, 0, w / 2, d / 2, h),
                 _box(-w / 2, -d / 2, 0, w / 2, -d / 2 + 0.22, 0.8)]
        return boxes, h
    raise ValueError(f"unknown furniture label {label!r}")


def _rotate_boxes(boxes, quarter_turns, offset):
    c, s = np.round(np.cos(quarter_turns * np.pi / 2)), np.round(np.sin(quarter_turns * np.pi / 2))
    rot = np.array([[c, -s], [s, c]])
    out = []
    for b in boxes:
        corners = b[:, :2] @ rot.T
        lo, hi = corners.min(0) + offset, corners.max(0) + offset
        out.append(np.array([[lo[0], lo[1], b[0, 2]], [hi[0], hi[1], b[1, 2]]]))
    return np.stack(out), rot


def _sample_box_surfaces(boxes, n, rng):
    faces = []
    for lo, hi in boxes:
        size = hi - lo
        for axis in range(3):
            a, b = [i for i in range(3) if i != axis]
            for side in (lo[axis], hi[axis]):
                faces.append((axis, side, a, b, lo, hi, size[a] * size[b]))
    areas = np.array([f[-1] for f in faces])
    choice = rng.choice(len(faces), n, p=areas / areas.sum())
    pts = np.empty((n, 3))
    uv = rng.random((n, 2))
    for k, (axis, side, a, b, lo, hi, _) in enumerate(faces):
        m = choice == k
        pts[m, axis] = side
        pts[m, a] = lo[a] + uv[m, 0] * (hi[a] - lo[a])
        pts[m, b] = lo[b] + uv[m, 1] * (hi[b] - lo[b])
    return pts


def _overlap(a, b, gap=0.0):
    return not (a[2] + gap <= b[0] or b[2] + gap <= a[0] or a[3] + gap <= b[1] or b[3] + gap <= a[1])


def _place(labels, config, rng):
    half = config.floor_extent / 2
    placed = []
    for label in labels:
        for _ in range(config.max_retries):
            local, seat = _build(label, rng)
            turns = int(rng.integers(4))
            probe, _ = _rotate_boxes(local, turns, np.zeros(2))
            span = probe[:, 1, :2].max(0) - probe[:, 0, :2].min(0)
            if (span > config.floor_extent - 0.2).any():
                continue
            center = rng.uniform(-half + span / 2 + 0.05, half - span / 2 - 0.05)
            boxes, rot = _rotate_boxes(local, turns, center)
            footprint = np.concatenate([boxes[:, 0, :2].min(0), boxes[:, 1, :2].max(0)])
            if any(_overlap(footprint, other[1], config.clearance) for other in placed):
                continue
            placed.append((label, footprint, boxes, rot @ np.array([0.0, 1.0]), seat or 0.0))
            break
        else:
            return None
    return placed


def generate_scene(config: SceneConfig | None = None, rng_seed=0):
    """Floor plus non-overlapping furniture. Returns (PointCloud, objects) with the floor object last."""
    config = config or SceneConfig()
    rng = np.random.default_rng(rng_seed)
    lo_count, hi_count = config.furniture_count
    count = int(rng.integers(lo_count, hi_count + 1))
    if count > len(config.categories):
        raise ValueError("more furniture requested than categories available")
    labels = [str(x) for x in rng.choice(config.categories, count, replace=False)]
    half = config.floor_extent / 2

    placed = None
    for _ in range(config.layout_attempts):
        placed = _place(labels, config, rng)
        if placed is not None:
            break
    if placed is None:
        raise RuntimeError(f"could not place {labels} without overlap")

    positions, colors, ids, objects = [], [], [], []
    offset = 0
    for i, (label, _, boxes, front, seat_h) in enumerate(placed):
        pts = _sample_box_surfaces(boxes, config.points_per_object, rng)
        positions.append(pts)
        colors.append(np.clip(np.array(BASE_COLORS[label]) + rng.normal(0, config.color_noise, pts.shape), 0, 1))
        ids.append(np.full(len(pts), i))
        objects.append(SceneObject(label, np.arange(offset, offset + len(pts)), pts.mean(0), boxes, front, seat_h))
        offset += len(pts)
    floor = np.column_stack([rng.uniform(-half, half, (config.floor_points, 2)), np.zeros(config.floor_points)])
    positions.append(floor)
    colors.append(np.clip(np.array(BASE_COLORS["floor"]) + rng.normal(0, config.color_noise, floor.shape), 0, 1))
    ids.append(np.full(len(floor), -1))
    objects.append(SceneObject("floor", np.arange(offset, offset + len(floor)), floor.mean(0)))

    scene = PointCloud(np.concatenate(positions).astype(np.float32), np.concatenate(colors).astype(np.float32),
                       np.concatenate(ids).astype(np.int32))
    return scene, objects


# ---------------------------------------------------------------- poses

J = {name: i for i, name in enumerate(JOINT_NAMES)}


def _rot_index(name):
    return J[name] - 1


def _gait_rots(phase, amp):
    r = np.zeros((len(JOINT_NAMES) - 1, 3))
    s = np.sin(phase)
    r[_rot_index("left_hip"), 0] = 0.45 * amp * s
    r[_rot_index("right_hip"), 0] = -0.45 * amp * s
    r[_rot_index("left_knee"), 0] = -0.6 * amp * max(0.0, -np.cos(phase))
    r[_rot_index("right_knee"), 0] = -0.6 * amp * max(0.0, np.cos(phase))
    r[_rot_index("left_shoulder"), 0] = -0.35 * amp * s
    r[_rot_index("right_shoulder"), 0] = 0.35 * amp * s
    r[_rot_index("left_elbow"), 0] = 0.2 * amp
    r[_rot_index("right_elbow"), 0] = 0.2 * amp
    return r


def _sit_rots():
    r = np.zeros((len(JOINT_NAMES) - 1, 3))
    for side in ("left", "right"):
        r[_rot_index(f"{side}_hip"), 0] = np.pi / 2
        r[_rot_index(f"{side}_knee"), 0] = -np.pi / 2
        r[_rot_index(f"{side}_shoulder"), 0] = 0.4
        r[_rot_index(f"{side}_elbow"), 0] = 0.9
    r[_rot_index("spine1"), 0] = -0.1
    return r


def _yaw_facing(direction):
    """Yaw that turns the rest facing (+y) toward a 2D direction."""
    return float(np.arctan2(-direction[0], direction[1]))


def _smoothstep(x):
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3 - 2 * x)


def _unit(v):
    n = np.linalg.norm(v)
    return v / n if n > 1e-9 else np.array([0.0, 1.0])


def _walk(start, goal, n, frame_rate, stride=1.3):
    """Root translation, root rotvec and joint rotations for a straight eased walk."""
    if n <= 0:
        return np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, len(JOINT_NAMES) - 1, 3))
    u = _smoothstep(np.linspace(0, 1, n))
    xy = start[None] + u[:, None] * (goal - start)[None]
    dist = np.linalg.norm(goal - start) * u
    speed = np.gradient(dist) * frame_rate if n > 1 else np.zeros(1)
    amp = np.clip(speed / 0.6, 0, 1)
    yaw = _yaw_facing(_unit(goal - start))
    rots = np.stack([_gait_rots(2 * np.pi * d / stride, a) for d, a in zip(dist, amp)])
    bob = 0.015 * amp * np.abs(np.cos(2 * np.pi * dist / stride))
    trans = np.column_stack([xy - REST_POSITIONS[0, :2], bob - 0.02 * amp])
    root = np.tile([0.0, 0.0, yaw], (n, 1))
    return trans, root, rots


def _blend(a, b, n):
    """Smoothly move body params from keyframe a to keyframe b over n frames (excluding a)."""
    (ta, ra, ja), (tb, rb, jb) = a, b
    w = _smoothstep(np.arange(1, n + 1) / n)
    slerp = Slerp([0.0, 1.0], Rotation.from_rotvec(np.stack([ra, rb])))
    trans = ta[None] + w[:, None] * (tb - ta)[None]
    root = slerp(w).as_rotvec()
    rots = ja[None] + w[:, None, None] * (jb - ja)[None]
    return trans, root, rots


def _lie_orientation(head_dir):
    h = np.array([head_dir[0], head_dir[1], 0.0])
    up = np.array([0.0, 0.0, 1.0])
    x = np.cross(up, h)
    return Rotation.from_matrix(np.column_stack([x, up, h])).as_rotvec()


def _segment_clear(a, b, rects, step=0.05):
    n = max(2, int(np.ceil(np.linalg.norm(b - a) / step)) + 1)
    pts = a[None] + np.linspace(0, 1, n)[:, None] * (b - a)[None]
    for r in rects:
        inside = (pts[:, 0] > r[0]) & (pts[:, 0] < r[2]) & (pts[:, 1] > r[1]) & (pts[:, 1] < r[3])
        if inside.any():
            return False
    return True


def _point_free(p, rects):
    return all(not (r[0] < p[0] < r[2] and r[1] < p[1] < r[3]) for r in rects)


def _inflate(rect, m):
    return np.array([rect[0] - m, rect[1] - m, rect[2] + m, rect[3] + m])


def _free_point(rng, half, rects, margin=0.4):
    for _ in range(200):
        p = rng.uniform(-half + margin, half - margin, 2)
        if _point_free(p, rects):
            return p
    return None


def _pick_start(rng, half, others, target_rect, goal, cfg, check_target):
    for _ in range(cfg.max_retries):
        s = _free_point(rng, half, others + [_inflate(target_rect, 0.25)])
        if s is None or np.linalg.norm(s - goal) < cfg.min_walk:
            continue
        rects = others + ([target_rect] if check_target else [])
        if _segment_clear(s, goal, rects):
            return s
    return None


def generate_task(scene: PointCloud, objects: list, rng_seed=0, config: TaskConfig | None = None,
                  action: str | None = None, encoder: TextEncoder | None = None,
                  layout: SkeletonLayout = DEFAULT_LAYOUT) -> HSISample:
    config = config or TaskConfig()
    rng = np.random.default_rng(rng_seed)
    furniture = [i for i, o in enumerate(objects) if o.label != "floor"]
    actions = [action] if action else list(config.actions)
    options = [(a, i) for a in actions for i in furniture if objects[i].label in ACTION_TARGETS[a]]
    if not options:
        raise ValueError("no reachable target for the requested actions")
    act, target = options[int(rng.integers(len(options)))]
    obj = objects[target]
    half = float(np.abs(scene.positions[:, :2]).max())
    rects = {i: objects[i].footprint.astype(np.float64) for i in furniture}
    others = [_inflate(rects[i], 0.2) for i in furniture if i != target]
    target_rect = rects[target]

    F, fr = config.n_frames, config.frame_rate
    n_trans = 0 if act == "walk" else min(int(round(1.2 * fr)), F // 3)
    n_hold = max(1, int(round(0.1 * F)))
    n_walk = F - n_trans - n_hold
    if n_walk < 2:
        raise ValueError("too few frames for the task timeline")
    centroid = obj.centroid[:2].astype(np.float64)
    front = obj.front.astype(np.float64)
    rest = np.zeros((len(JOINT_NAMES) - 1, 3))

    if act == "walk":
        # pick the start first, then stop a fixed offset short of the centroid along the approach
        for _ in range(config.max_retries):
            s = _free_point(rng, half, others + [_inflate(target_rect, 0.25)])
            if s is None or np.linalg.norm(s - centroid) < config.min_walk + config.walk_goal_offset:
                continue
            goal = centroid + config.walk_goal_offset * _unit(s - centroid)
            if _segment_clear(s, goal, others):
                break
        else:
            raise ValueError("no reachable target")
        tr, ro, jr = _walk(s, goal, n_walk, fr)
        last = (tr[-1], ro[-1], rest)
        hold = [np.repeat(x[None], n_hold, 0) for x in last]
        parts = [(tr, ro, jr), hold]
    elif act in ("sit", "lie"):
        if act == "sit":
            seat_xy = _seat_xy(obj)
            candidates = [seat_xy + front * 0.55]
            end_trans = np.array([*(seat_xy - REST_POSITIONS[0, :2]), obj.seat_height + 0.06 - REST_POSITIONS[0, 2]])
            end_root, end_rots = np.array([0.0, 0.0, _yaw_facing(front)]), _sit_rots()
        else:
            top = float(obj.boxes[:, 1, 2].min())
            long_axis, head_dir = _long_axis(obj)
            lie_xy = (_seat_xy(obj) if obj.label == "sofa" else 0.5 * (obj.footprint[:2] + obj.footprint[2:])) \
                + 0.1 * head_dir
            candidates = []
            for sign in rng.permutation([-1.0, 1.0]):
                side = sign * np.array([-long_axis[1], long_axis[0]])
                candidates.append(lie_xy + side * (_half_width(obj, side) + 0.4))
            end_trans = np.array([*(lie_xy - REST_POSITIONS[0, :2]), top + 0.1 - REST_POSITIONS[0, 2]])
            end_root, end_rots = _lie_orientation(head_dir), rest
        s = approach = None
        for approach in candidates:
            if np.abs(approach).max() > half - 0.3 or not _point_free(approach, others):
                continue
            s = _pick_start(rng, half, others, target_rect, approach, config, check_target=True)
            if s is not None:
                break
        if s is None:
            raise ValueError("no reachable target")
        tr, ro, jr = _walk(s, approach, n_walk, fr)
        blend = _blend((tr[-1], ro[-1], jr[-1]), (end_trans, end_root, end_rots), n_trans)
        hold = [np.repeat(x[-1][None], n_hold, 0) for x in blend]
        parts = [(tr, ro, jr), blend, hold]
    else:  # stand_up
        seat_xy = _seat_xy(obj)
        stand_xy = seat_xy + front * 0.55
        sit_key = (np.array([*(seat_xy - REST_POSITIONS[0, :2]), obj.seat_height + 0.06 - REST_POSITIONS[0, 2]]),
                   np.array([0.0, 0.0, _yaw_facing(front)]), _sit_rots())
        stand_key = (np.array([*(stand_xy - REST_POSITIONS[0, :2]), 0.0]), np.array([0.0, 0.0, _yaw_facing(front)]), rest)
        away = None
        for _ in range(config.max_retries):
            p = _free_point(rng, half, others + [_inflate(target_rect, 0.25)])
            if p is not None and np.linalg.norm(p - stand_xy) >= config.min_walk and \
                    _segment_clear(stand_xy, p, others + [target_rect]):
                away = p
                break
        if away is None:
            raise ValueError("no reachable target")
        hold = [np.repeat(x[None], n_hold, 0) for x in sit_key]
        blend = _blend(sit_key, stand_key, n_trans)
        tr, ro, jr = _walk(stand_xy, away, n_walk, fr)
        # turn from the seat's facing toward the walking direction during the first walk frames
        n_turn = min(len(ro), max(1, int(0.3 * fr)))
        w = _smoothstep(np.arange(1, n_turn + 1) / n_turn)
        start_yaw, walk_yaw = _yaw_facing(front), ro[0, 2]
        delta = (walk_yaw - start_yaw + np.pi) % (2 * np.pi) - np.pi
        ro[:n_turn, 2] = start_yaw + w * delta
        parts = [hold, blend, (tr, ro, jr)]

    trans = np.concatenate([p[0] for p in parts])
    root = np.concatenate([p[1] for p in parts])
    rots = np.concatenate([p[2] for p in parts])
    joints = forward_kinematics(BodyParams(trans, root, rots, 1.0))
    # lift frames whose lowest joint would sink into the floor (mid-blend leg configurations)
    joints[..., 2] += np.maximum(0.0, -joints[..., 2].min(1))[:, None]
    motion = MotionSequence(joints.astype(np.float32), fr)

    label = obj.label
    templates = TEMPLATES[act]
    raw = templates[int(rng.integers(len(templates)))].format(label)
    prompt = encode_text(raw, encoder)
    affordance = compute_affordance_map(scene, motion, layout, config.sigma)
    affordance = AffordanceMap(affordance.values.astype(np.float32), config.sigma)
    return HSISample(scene, objects, motion, prompt, target, affordance, act)


def _seat_xy(obj: SceneObject) -> np.ndarray:
    # seat centre: slightly in front of the footprint centre along the facing direction
    fp = obj.footprint.astype(np.float64)
    center = 0.5 * (fp[:2] + fp[2:])
    depth = abs(obj.front[0]) * (fp[2] - fp[0]) + abs(obj.front[1]) * (fp[3] - fp[1])
    if obj.label == "bed":
        return center + obj.front * (depth / 2 - 0.3)
    if obj.label == "sofa":
        return center + obj.front * 0.12
    if obj.label == "toilet":
        return center + obj.front * 0.13
    return center + obj.front * 0.02


def _long_axis(obj: SceneObject):
    """Unit long axis of the footprint and the head direction (toward the back/headboard)."""
    head = -obj.front.astype(np.float64)
    fp = obj.footprint
    span = fp[2:] - fp[:2]
    axis = np.array([1.0, 0.0]) if span[0] >= span[1] else np.array([0.0, 1.0])
    if abs(axis @ head) < 0.5:  # sofa: lie along the seat, head toward +axis
        head = axis
    return axis, head


def _half_width(obj: SceneObject, side: np.ndarray) -> float:
    span = obj.footprint[2:] - obj.footprint[:2]
    return float(abs(side[0]) * span[0] / 2 + abs(side[1]) * span[1] / 2)


def generate_dataset(n_samples: int, seed: int = 0, scene_config: SceneConfig | None = None,
                     task_config: TaskConfig | None = None, n_points: int | None = None,
                     encoder: TextEncoder | None = None, max_attempts: int = 20) -> list:
    """Independent scenes/tasks under per-sample seeds; optionally downsampled to ``n_points``."""
    samples = []
    ss = np.random.SeedSequence(seed)
    for child in ss.spawn(n_samples):
        s_seed, t_seed, d_seed = (int(x) for x in child.generate_state(3))
        for attempt in range(max_attempts):
            try:
                scene, objects = generate_scene(scene_config, [s_seed, attempt])
                if n_points is not None:
                    scene, objects = downsample_scene(scene, objects, n_points, [d_seed, attempt])
                sample = generate_task(scene, objects, [t_seed, attempt], task_config, encoder=encoder)
                break
            except (RuntimeError, ValueError):
                continue
        else:
            raise RuntimeError("could not generate a valid sample")
        samples.append(sample)
    return samples


def downsample_scene(scene: PointCloud, objects: list, n_points: int, rng_seed=0):
    """Uniformly downsample and remap object point indices; objects left without points are dropped."""
    if n_points <= 0:
        raise ValueError("n_points must be positive")
    rng = np.random.default_rng(rng_seed)
    idx = rng.choice(len(scene), n_points, replace=len(scene) < n_points)
    small = scene.subset(idx)
    new_objects = []
    for o in objects:
        members = np.flatnonzero(np.isin(idx, o.point_indices))
        if len(members):
            new_objects.append(SceneObject(o.label, members, o.centroid, o.boxes, o.front, o.seat_height))
    if not any(o.label != "floor" for o in new_objects):
        raise ValueError("downsampling removed all furniture")
    ids = np.full(n_points, -1, dtype=np.int32)
    for k, o in enumerate(o for o in new_objects if o.label != "floor"):
        ids[o.point_indices] = k
    return PointCloud(small.positions, small.colors, ids), new_objects


def with_affordance(sample: HSISample, layout: SkeletonLayout = DEFAULT_LAYOUT,
                    sigma: float | None = None) -> HSISample:
    sigma = sample.affordance.sigma if sigma is None else sigma
    aff = compute_affordance_map(sample.scene, sample.motion, layout, sigma)
    return HSISample(sample.scene, sample.objects, sample.motion, sample.prompt, sample.target_object,
                     AffordanceMap(aff.values.astype(np.float32), sigma), sample.action)
