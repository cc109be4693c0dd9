"""Deterministic synthetic scenes: planar box worlds rendered by ray casting.

A scene is a flat world of vehicle-sized boxes observed by multiple
agents, each carrying a ring of pinhole cameras. Per camera, every pixel
ray is intersected with every box (slab method) and the nearest hit
fills four channels: inverse hit distance, occupancy flag, azimuth of
the struck surface normal, and a per-object hash. A learnable per-pixel
linear stem lifts those 4 channels to the model width, so 3D-to-2D query
projection lands on real, object-consistent signal.

Scene generation and ray casting are pure functions of (seed, config)
and one rig respectively, so they parallelize freely across cameras and
scenes and reproduce bit-exactly.
"""

import json
import math
import os
from dataclasses import dataclass

import numpy as np

from .attention import FeatureMap
from .geometry import CameraIntrinsics, CameraRig, HomTransform, compose, invert
from .numcore import LinearParams, Tensor, linear, make_rng
from .perception import DetectionBox

SCHEMA_VERSION = 1

BOX_HEIGHT = 1.5     # boxes rise from the ground plane to this height
CAM_HEIGHT = 1.2     # camera mounting height, below box tops so level rays hit
GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0

# camera axes in the car frame: optical z -> car +x, image right -> car -y,
# image down -> car -z
_CAM_BASE = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])


# ------------------------------------------------------------------- types

@dataclass(frozen=True)
class SceneObject:
    pose: HomTransform
    length: float
    width: float

    def __post_init__(self):
        if self.length <= 0.0 or self.width <= 0.0:
            raise ValueError("object extents must be positive")


@dataclass(frozen=True)
class SceneAgent:
    agent_id: int
    pose: HomTransform
    rigs: tuple


@dataclass(frozen=True)
class Scene:
    seed: int
    objects: tuple
    agents: tuple
    timestamp: float
    world_half: float
    layout: str

    def __post_init__(self):
        ids = [a.agent_id for a in self.agents]
        if len(ids) != len(set(ids)):
            raise ValueError("agent ids must be unique")
        for obj in self.objects:
            x, y = obj.pose.m[0, 3], obj.pose.m[1, 3]
            if abs(x) > self.world_half or abs(y) > self.world_half:
                raise ValueError("object outside world bounds")

    def agent(self, agent_id):
        for a in self.agents:
            if a.agent_id == agent_id:
                return a
        raise KeyError(f"no agent {agent_id} in scene")

    def all_rigs(self):
        return [rig for a in self.agents for rig in a.rigs]

    def world_poses(self):
        return {a.agent_id: a.pose for a in self.agents}


@dataclass(frozen=True)
class RawChannels:
    """Per-camera (H_f, W_f, 4) grid.

    Channels: 0 inverse hit distance (0 on miss), 1 occupancy flag,
    2 azimuth of the struck face's outward normal mapped to [0,1]
    (0.5 for horizontal faces), 3 per-object hash.
    """
    car_id: int
    cam_id: int
    data: np.ndarray

    def __post_init__(self):
        d = self.data
        if d.ndim != 3 or d.shape[2] != 4:
            raise ValueError("raw channels must be (H, W, 4)")
        if d[:, :, 0].min() < 0.0:
            raise ValueError("inverse depth must be nonnegative")
        occ = d[:, :, 1]
        if not np.all((occ == 0.0) | (occ == 1.0)):
            raise ValueError("occupancy must be 0 or 1")


def object_hash(index):
    """View-independent, object-consistent channel value in (0, 1)."""
    return (GOLDEN * (index + 1)) % 1.0


# -------------------------------------------------------------- generation

def ring_intrinsics(feat_size=32, fov_deg=90.0):
    """Square pinhole intrinsics for a given field of view."""
    f = (feat_size / 2.0) / math.tan(math.radians(fov_deg) / 2.0)
    return CameraIntrinsics(fx=f, fy=f, cx=feat_size / 2.0,
                            cy=feat_size / 2.0, width=feat_size,
                            height=feat_size)


def ring_rig(car_id, cam_id, yaw, intrinsics):
    """A camera at the car origin, raised to CAM_HEIGHT, facing along yaw."""
    c, s = math.cos(yaw), math.sin(yaw)
    r_yaw = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    ext = HomTransform.from_rt(r_yaw @ _CAM_BASE, (0.0, 0.0, CAM_HEIGHT))
    return CameraRig(car_id, cam_id, ext, intrinsics)


def _place(rng, draw, accept, retries, what):
    """Rejection-sample one position; bounded retries keep failure loud."""
    for _ in range(retries):
        cand = draw(rng)
        if accept(cand):
            return cand
    raise ValueError(f"infeasible placement: no valid {what} "
                     f"after {retries} retries")


def generate_scene(seed, n_objects, n_agents, cams_per_agent=2,
                   layout="grid", world_half=20.0, min_agent_dist=6.0,
                   feat_size=32, fov_deg=90.0, retries=200) -> Scene:
    """Build one deterministic scene.

    Agents keep min_agent_dist between each other; objects keep 2.5 m of
    clearance from every agent (no camera starts inside a box) and 3 m
    between centers so ground-truth boxes stay separable. The grid
    layout scatters objects over a jittered lattice; the intersection
    layout confines everything to two orthogonal road strips.
    """
    if n_objects < 1 or n_agents < 1 or cams_per_agent < 1:
        raise ValueError("counts must be at least 1")
    if cams_per_agent > 6:
        raise ValueError("at most 6 cameras per agent")
    if layout not in ("grid", "intersection"):
        raise ValueError(f"unknown layout {layout!r}")
    rng = make_rng(seed)
    road_half = 3.5
    span = 0.85 * world_half

    def on_road(rng_):
        along = rng_.uniform(2.0, span) * rng_.choice([-1.0, 1.0])
        lateral = rng_.uniform(-0.7, 0.7) * road_half
        arm = rng_.choice([0, 1])
        if arm == 0:
            return along, lateral, 0.0 if along < 0 else math.pi
        return lateral, along, -math.pi / 2 if along < 0 else math.pi / 2

    agent_xy = []
    agent_poses = []
    for _ in range(n_agents):
        def draw(rng_):
            if layout == "grid":
                return (rng_.uniform(-span, span), rng_.uniform(-span, span),
                        rng_.uniform(-math.pi, math.pi))
            return on_road(rng_)

        def accept(cand):
            return all(math.hypot(cand[0] - x, cand[1] - y) >= min_agent_dist
                       for x, y in agent_xy)

        x, y, yaw = _place(rng, draw, accept, retries, "agent position")
        agent_xy.append((x, y))
        agent_poses.append(HomTransform.from_yaw_xy(yaw, x, y))

    objects = []
    obj_xy = []
    if layout == "grid":
        side = math.ceil(math.sqrt(n_objects))
        spacing = 2.0 * span / max(side, 2)
        lattice = [(-span + spacing * (i + 0.5), -span + spacing * (j + 0.5))
                   for i in range(side) for j in range(side)]
    for idx in range(n_objects):
        def draw(rng_):
            if layout == "grid":
                bx, by = lattice[int(rng_.integers(len(lattice)))]
                jitter = 0.25 * spacing
                return (bx + rng_.uniform(-jitter, jitter),
                        by + rng_.uniform(-jitter, jitter),
                        rng_.uniform(-math.pi, math.pi))
            x, y, heading = on_road(rng_)
            return x, y, heading + rng_.uniform(-0.15, 0.15)

        def accept(cand):
            ok_agents = all(math.hypot(cand[0] - x, cand[1] - y) >= 2.5
                            for x, y in agent_xy)
            ok_objects = all(math.hypot(cand[0] - x, cand[1] - y) >= 3.0
                             for x, y in obj_xy)
            return ok_agents and ok_objects

        x, y, yaw = _place(rng, draw, accept, retries, "object position")
        obj_xy.append((x, y))
        objects.append(SceneObject(
            pose=HomTransform.from_yaw_xy(yaw, x, y),
            length=rng.uniform(3.5, 5.5), width=rng.uniform(1.6, 2.2)))

    intrinsics = ring_intrinsics(feat_size, fov_deg)
    agents = []
    for aid, pose in enumerate(agent_poses):
        rigs = tuple(
            ring_rig(aid, cam, 2.0 * math.pi * cam / cams_per_agent, intrinsics)
            for cam in range(cams_per_agent))
        agents.append(SceneAgent(agent_id=aid, pose=pose, rigs=rigs))
    return Scene(seed=seed, objects=tuple(objects), agents=tuple(agents),
                 timestamp=0.0, world_half=world_half, layout=layout)


# -------------------------------------------------------------- ray casting

def _ray_grid(intrinsics):
    """Unit ray directions through every pixel, camera frame, (H*W, 3)."""
    h, w = intrinsics.height, intrinsics.width
    v, u = np.meshgrid(np.arange(h, dtype=np.float64),
                       np.arange(w, dtype=np.float64), indexing="ij")
    x = (u.reshape(-1) - intrinsics.cx) / intrinsics.fx
    y = (v.reshape(-1) - intrinsics.cy) / intrinsics.fy
    d = np.stack([x, y, np.ones(h * w)], axis=1)
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def _slab_hits(origin, dirs, obj: SceneObject):
    """Nearest positive ray parameter against one box, plus the entry axis.

    Returns (t, axis, sign): t is inf where the ray misses; rays starting
    inside the box count as misses (placement keeps cameras out of boxes).
    """
    world_from_obj = obj.pose
    obj_from_world = invert(world_from_obj)
    o = obj_from_world.apply(origin)
    d = dirs @ obj_from_world.m[:3, :3].T
    lo = np.array([-obj.length / 2.0, -obj.width / 2.0, 0.0])
    hi = np.array([obj.length / 2.0, obj.width / 2.0, BOX_HEIGHT])
    n = dirs.shape[0]
    t_enter = np.full(n, -np.inf)
    t_exit = np.full(n, np.inf)
    enter_axis = np.zeros(n, dtype=np.int64)
    miss = np.zeros(n, dtype=bool)
    for axis in range(3):
        da = d[:, axis]
        oa = o[axis]
        parallel = np.abs(da) < 1e-12
        miss |= parallel & ((oa < lo[axis]) | (oa > hi[axis]))
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (lo[axis] - oa) / da
            t2 = (hi[axis] - oa) / da
        near = np.minimum(t1, t2)
        far = np.maximum(t1, t2)
        near[parallel] = -np.inf
        far[parallel] = np.inf
        better = near > t_enter
        enter_axis[better] = axis
        t_enter = np.maximum(t_enter, near)
        t_exit = np.minimum(t_exit, far)
    ok = (~miss) & (t_enter <= t_exit) & (t_enter > 1e-9)
    t = np.where(ok, t_enter, np.inf)
    sign = -np.sign(np.take_along_axis(d, enter_axis[:, None], axis=1)[:, 0])
    return t, enter_axis, sign


def raycast_channels(scene: Scene, rig: CameraRig) -> RawChannels:
    """Render one camera of one scene agent into raw channels.

    The rig must be one of the scene's own (same car, camera, extrinsic,
    intrinsics); casting someone else's rig is an error. Misses leave
    all four channels zero.
    """
    agent = scene.agent(rig.car_id)
    own = next((r for r in agent.rigs if r.cam_id == rig.cam_id), None)
    if own is None or own.intrinsics != rig.intrinsics or \
            not np.array_equal(own.extrinsic.m, rig.extrinsic.m):
        raise ValueError("rig does not belong to this scene")
    cam_pose = compose(agent.pose, rig.extrinsic)
    origin = cam_pose.m[:3, 3]
    dirs = _ray_grid(rig.intrinsics) @ cam_pose.m[:3, :3].T
    n = dirs.shape[0]
    best_t = np.full(n, np.inf)
    best_obj = np.full(n, -1, dtype=np.int64)
    best_axis = np.zeros(n, dtype=np.int64)
    best_sign = np.zeros(n)
    for idx, obj in enumerate(scene.objects):
        t, axis, sign = _slab_hits(origin, dirs, obj)
        closer = t < best_t
        best_t[closer] = t[closer]
        best_obj[closer] = idx
        best_axis[closer] = axis[closer]
        best_sign[closer] = sign[closer]
    h, w = rig.intrinsics.height, rig.intrinsics.width
    data = np.zeros((n, 4))
    hit = best_obj >= 0
    data[hit, 0] = 1.0 / best_t[hit]
    data[hit, 1] = 1.0
    for idx, obj in enumerate(scene.objects):
        rows = np.where(hit & (best_obj == idx))[0]
        if rows.size == 0:
            continue
        r = obj.pose.m[:3, :3]
        for axis in range(3):
            sel = rows[best_axis[rows] == axis]
            if sel.size == 0:
                continue
            normal = r[:, axis]
            for s in (-1.0, 1.0):
                ss = sel[best_sign[sel] == s]
                if ss.size == 0:
                    continue
                if axis == 2:
                    az = 0.0
                else:
                    ny, nx = s * normal[1], s * normal[0]
                    if ny == 0.0:
                        ny = 0.0  # flush -0.0 so a back face maps to +pi
                    az = math.atan2(ny, nx)
                data[ss, 2] = (az + math.pi) / (2.0 * math.pi)
        data[rows, 3] = object_hash(idx)
    return RawChannels(car_id=rig.car_id, cam_id=rig.cam_id,
                       data=data.reshape(h, w, 4))


def feature_stem(raw: RawChannels, params: LinearParams) -> FeatureMap:
    """Per-pixel linear lift of the 4 raw channels to the model width."""
    h, w, c_in = raw.data.shape
    if params.weight.data.shape[1] != c_in:
        raise ValueError("stem input width must match raw channel count")
    feats = linear(Tensor(raw.data.reshape(h * w, c_in)), params)
    c = params.weight.data.shape[0]
    return FeatureMap(car_id=raw.car_id, cam_id=raw.cam_id,
                      data=feats.reshape(h, w, c))


# ------------------------------------------------------------- ground truth

def ground_truth(scene: Scene, ego_id, bev_half=51.2):
    """Objects within the square BEV range, in the ego frame, unit score."""
    ego_pose = scene.agent(ego_id).pose
    ego_from_world = invert(ego_pose)
    out = []
    for obj in scene.objects:
        rel = compose(ego_from_world, obj.pose)
        x, y = rel.m[0, 3], rel.m[1, 3]
        if abs(x) > bev_half or abs(y) > bev_half:
            continue
        yaw = math.atan2(rel.m[1, 0], rel.m[0, 0])
        out.append(DetectionBox(cx=x, cy=y, length=obj.length,
                                width=obj.width, yaw=yaw, class_score=1.0))
    return out


# -------------------------------------------------------------------- files

def _pose_to_list(t: HomTransform):
    return [float(v) for v in t.flat()]


def scene_to_dict(scene: Scene):
    return {
        "schema_version": SCHEMA_VERSION,
        "seed": scene.seed,
        "timestamp": scene.timestamp,
        "world_half": scene.world_half,
        "layout": scene.layout,
        "objects": [
            {"pose": _pose_to_list(o.pose), "length": o.length,
             "width": o.width}
            for o in scene.objects
        ],
        "agents": [
            {
                "agent_id": a.agent_id,
                "pose": _pose_to_list(a.pose),
                "rigs": [
                    {
                        "cam_id": r.cam_id,
                        "extrinsic": _pose_to_list(r.extrinsic),
                        "intrinsics": {
                            "fx": r.intrinsics.fx, "fy": r.intrinsics.fy,
                            "cx": r.intrinsics.cx, "cy": r.intrinsics.cy,
                            "width": r.intrinsics.width,
                            "height": r.intrinsics.height,
                        },
                    }
                    for r in a.rigs
                ],
            }
            for a in scene.agents
        ],
    }


def scene_from_dict(d) -> Scene:
    if d.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"unsupported scene schema {d.get('schema_version')!r}")
    objects = tuple(
        SceneObject(pose=HomTransform(np.array(o["pose"]).reshape(4, 4)),
                    length=o["length"], width=o["width"])
        for o in d["objects"])
    agents = []
    for a in d["agents"]:
        rigs = tuple(
            CameraRig(
                a["agent_id"], r["cam_id"],
                HomTransform(np.array(r["extrinsic"]).reshape(4, 4)),
                CameraIntrinsics(**r["intrinsics"]))
            for r in a["rigs"])
        agents.append(SceneAgent(agent_id=a["agent_id"],
                                 pose=HomTransform(np.array(a["pose"]).reshape(4, 4)),
                                 rigs=rigs))
    return Scene(seed=d["seed"], objects=objects, agents=tuple(agents),
                 timestamp=d["timestamp"], world_half=d["world_half"],
                 layout=d["layout"])


def save_scene(scene: Scene, path):
    with open(path, "w") as f:
        json.dump(scene_to_dict(scene), f, indent=1)


def load_scene(path) -> Scene:
    with open(path) as f:
        return scene_from_dict(json.load(f))


def save_channels(channels, out_dir):
    """Cache rendered channels as .npy grids plus a manifest."""
    os.makedirs(out_dir, exist_ok=True)
    entries = []
    for ch in sorted(channels, key=lambda c: (c.car_id, c.cam_id)):
        name = f"car{ch.car_id}_cam{ch.cam_id}.npy"
        np.save(os.path.join(out_dir, name), ch.data)
        entries.append({"car": ch.car_id, "cam": ch.cam_id, "file": name})
    with open(os.path.join(out_dir, "channels.json"), "w") as f:
        json.dump({"schema_version": SCHEMA_VERSION, "channels": entries}, f,
                  indent=1)


def load_channels(out_dir):
    with open(os.path.join(out_dir, "channels.json")) as f:
        manifest = json.load(f)
    out = []
    for e in manifest["channels"]:
        data = np.load(os.path.join(out_dir, e["file"]))
        out.append(RawChannels(car_id=e["car"], cam_id=e["cam"], data=data))
    return out
