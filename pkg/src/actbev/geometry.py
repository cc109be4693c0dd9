"""Rigid transforms, pinhole projection, BEV reference pillars and camera hit sets.

Conventions used throughout the package:
  - World/car frames are right-handed, z up, distances in meters.
  - Camera frame: x right, y down, z forward (optical axis).
  - Image frame: u right (column), v down (row), in pixels; integer
    coordinates are pixel centers.
  - BEV grid: axis 0 indexes x (h_cells cells over x_range), axis 1
    indexes y (w_cells cells over y_range); queries sit at cell centers.

All math is double precision so projection chains and hit tests are
deterministic across platforms.
"""

from dataclasses import dataclass, field

import numpy as np

_EYE4 = np.eye(4)


class HomTransform:
    """A rigid 4x4 homogeneous transform (rotation + translation)."""

    __slots__ = ("m",)

    def __init__(self, m):
        m = np.asarray(m, dtype=np.float64).reshape(4, 4)
        if not np.array_equal(m[3], [0.0, 0.0, 0.0, 1.0]):
            raise ValueError("bottom row must be exactly (0,0,0,1)")
        r = m[:3, :3]
        if np.abs(r.T @ r - np.eye(3)).max() > 1e-6:
            raise ValueError("rotation block is not orthonormal")
        if np.linalg.det(r) < 0.0:
            raise ValueError("rotation block must be proper (det +1)")
        self.m = m

    @staticmethod
    def identity():
        return HomTransform(_EYE4)

    @staticmethod
    def from_rt(rotation, translation):
        m = np.eye(4)
        m[:3, :3] = rotation
        m[:3, 3] = translation
        return HomTransform(m)

    @staticmethod
    def from_translation(x, y, z=0.0):
        m = np.eye(4)
        m[:3, 3] = (x, y, z)
        return HomTransform(m)

    @staticmethod
    def from_yaw_xy(yaw, x, y, z=0.0):
        """Rotation by yaw around +z, then translation; the planar vehicle pose."""
        c, s = np.cos(yaw), np.sin(yaw)
        m = np.array([
            [c, -s, 0.0, x],
            [s, c, 0.0, y],
            [0.0, 0.0, 1.0, z],
            [0.0, 0.0, 0.0, 1.0],
        ])
        return HomTransform(m)

    def apply(self, points):
        """Transform an (..., 3) array of points."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.m[:3, :3].T + self.m[:3, 3]

    def flat(self):
        """Row-major 16-vector, the serialization and pose-embedding layout."""
        return self.m.reshape(16).copy()

    def __repr__(self):
        t = self.m[:3, 3]
        return f"HomTransform(t=[{t[0]:.3f}, {t[1]:.3f}, {t[2]:.3f}])"


def compose(a: HomTransform, b: HomTransform) -> HomTransform:
    """Chained transform a.b (apply b first, then a)."""
    return HomTransform(a.m @ b.m)


def invert(t: HomTransform) -> HomTransform:
    """Rigid inverse (R^T, -R^T t); cheaper and better conditioned than a general inverse."""
    r = t.m[:3, :3]
    m = np.eye(4)
    m[:3, :3] = r.T
    m[:3, 3] = -r.T @ t.m[:3, 3]
    return HomTransform(m)


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be at least 1x1")

    def flat(self):
        """The four real intrinsic parameters, in broadcast order."""
        return np.array([self.fx, self.fy, self.cx, self.cy])


@dataclass(frozen=True)
class CameraRig:
    """One camera mounted on one car; extrinsic maps camera frame -> car frame."""
    car_id: int
    cam_id: int
    extrinsic: HomTransform
    intrinsics: CameraIntrinsics


@dataclass(frozen=True)
class BevGrid:
    """Metric anchoring of the query grid: h_cells x w_cells over x_range x y_range."""
    h_cells: int
    w_cells: int
    x_range: tuple
    y_range: tuple
    z_refs: tuple

    def __post_init__(self):
        if self.h_cells < 1 or self.w_cells < 1:
            raise ValueError("grid must have at least one cell per axis")
        if self.x_range[1] <= self.x_range[0] or self.y_range[1] <= self.y_range[0]:
            raise ValueError("degenerate metric range")
        if len(self.z_refs) < 1:
            raise ValueError("need at least one reference height")
        object.__setattr__(self, "z_refs", tuple(float(z) for z in self.z_refs))

    @property
    def n_ref(self):
        return len(self.z_refs)

    @property
    def cell_dx(self):
        return (self.x_range[1] - self.x_range[0]) / self.h_cells

    @property
    def cell_dy(self):
        return (self.y_range[1] - self.y_range[0]) / self.w_cells

    @property
    def half_range(self):
        """Half extent of the longer axis; the pose-embedding translation scale."""
        return max(self.x_range[1] - self.x_range[0],
                   self.y_range[1] - self.y_range[0]) / 2.0

    def cell_center(self, x_idx, y_idx):
        if not (0 <= x_idx < self.h_cells and 0 <= y_idx < self.w_cells):
            raise IndexError(f"cell ({x_idx},{y_idx}) outside {self.h_cells}x{self.w_cells} grid")
        x = self.x_range[0] + (x_idx + 0.5) * self.cell_dx
        y = self.y_range[0] + (y_idx + 0.5) * self.cell_dy
        return x, y

    def all_centers(self):
        """(h_cells*w_cells, 2) array of cell centers, row-major (x index slowest)."""
        xs = self.x_range[0] + (np.arange(self.h_cells) + 0.5) * self.cell_dx
        ys = self.y_range[0] + (np.arange(self.w_cells) + 0.5) * self.cell_dy
        gx, gy = np.meshgrid(xs, ys, indexing="ij")
        return np.stack([gx.reshape(-1), gy.reshape(-1)], axis=1)


@dataclass(frozen=True)
class PixelPoint:
    u: float
    v: float
    depth: float


def project_point(cam_from_ego: HomTransform, k: CameraIntrinsics, p_ego):
    """Project one ego-frame point; returns a PixelPoint or None when out of view.

    Out of view means behind the camera (depth <= 0) or outside
    [0,width) x [0,height). Not an error: callers treat absence as a
    zero contribution.
    """
    p = cam_from_ego.apply(np.asarray(p_ego, dtype=np.float64))
    z = p[2]
    if z <= 0.0:
        return None
    u = k.fx * p[0] / z + k.cx
    v = k.fy * p[1] / z + k.cy
    if not (0.0 <= u < k.width and 0.0 <= v < k.height):
        return None
    return PixelPoint(u=float(u), v=float(v), depth=float(z))


def project_points(cam_from_ego: HomTransform, k: CameraIntrinsics, pts):
    """Vectorized projection of (..., 3) ego-frame points.

    Returns (uv, depth, valid): uv (..., 2); valid marks points in front of
    the camera and inside the image bounds. uv is only meaningful where
    depth > 0 (division is guarded, not masked).
    """
    p = cam_from_ego.apply(pts)
    z = p[..., 2]
    safe_z = np.where(z > 0.0, z, 1.0)
    u = k.fx * p[..., 0] / safe_z + k.cx
    v = k.fy * p[..., 1] / safe_z + k.cy
    valid = (z > 0.0) & (u >= 0.0) & (u < k.width) & (v >= 0.0) & (v < k.height)
    return np.stack([u, v], axis=-1), z, valid


def reference_pillar(grid: BevGrid, x_idx: int, y_idx: int):
    """The n_ref 3D points lifted above the cell center, ego frame."""
    x, y = grid.cell_center(x_idx, y_idx)
    return [np.array([x, y, z]) for z in grid.z_refs]


def pillar_points(grid: BevGrid):
    """(n_cells, n_ref, 3) pillar points for every cell, row-major cell order."""
    centers = grid.all_centers()
    n = centers.shape[0]
    pts = np.empty((n, grid.n_ref, 3))
    pts[:, :, 0] = centers[:, 0:1]
    pts[:, :, 1] = centers[:, 1:2]
    pts[:, :, 2] = np.asarray(grid.z_refs)[None, :]
    return pts


def relative_poses(world_poses: dict, ego_id) -> dict:
    """Re-express car-to-world poses in the frame of car ego_id.

    The returned dict maps car_id -> (ego-frame pose); ego_id itself maps
    to the identity. This is the conversion between scene files (world
    poses) and the grid-anchored frame every other geometry op expects.
    """
    w_inv = invert(world_poses[ego_id])
    return {cid: compose(w_inv, pose) for cid, pose in world_poses.items()}


def camera_chain(car_pose: HomTransform, rig_extrinsic: HomTransform) -> HomTransform:
    """camera-from-grid-frame transform: cam <- car_k <- grid frame.

    car_pose maps car-frame points into the frame the BEV grid is
    anchored in (use relative_poses to get there from world poses).
    """
    return compose(invert(rig_extrinsic), invert(car_pose))


def hit_set(q_cell, rigs, agent_poses, grid: BevGrid):
    """Cameras whose view contains at least one of the query's pillar points.

    agent_poses maps car_id -> pose in the grid's anchor frame (the ego
    frame; the ego car carries the identity pose). Membership needs one
    point in view, not all, so partially visible cells still collaborate.
    """
    if not rigs:
        raise ValueError("need at least one camera rig")
    pts = np.asarray(reference_pillar(grid, q_cell[0], q_cell[1]))
    hits = set()
    for rig in rigs:
        chain = camera_chain(agent_poses[rig.car_id], rig.extrinsic)
        _, _, valid = project_points(chain, rig.intrinsics, pts)
        if valid.any():
            hits.add((rig.car_id, rig.cam_id))
    return hits


@dataclass
class ProjectionCache:
    """Pillar projections of every grid cell into every camera, precomputed once per scene.

    uv[key]    : (n_cells, n_ref, 2) image positions
    valid[key] : (n_cells, n_ref) in-view flags
    hit[key]   : (n_cells,) camera hit flags (any pillar point in view)
    chains[key]: camera-from-ego transform, the pose-embedding input
    keys are (car_id, cam_id), sorted.
    """
    keys: list
    uv: dict
    valid: dict
    hit: dict
    chains: dict
    car_hit_count: dict = field(default_factory=dict)

    @staticmethod
    def build(grid: BevGrid, rigs, agent_poses):
        pts = pillar_points(grid)
        keys, uv, valid, hit, chains = [], {}, {}, {}, {}
        for rig in sorted(rigs, key=lambda r: (r.car_id, r.cam_id)):
            key = (rig.car_id, rig.cam_id)
            chain = camera_chain(agent_poses[rig.car_id], rig.extrinsic)
            uv_k, _, valid_k = project_points(chain, rig.intrinsics, pts)
            keys.append(key)
            uv[key] = uv_k
            valid[key] = valid_k
            hit[key] = valid_k.any(axis=1)
            chains[key] = chain
        cache = ProjectionCache(keys=keys, uv=uv, valid=valid, hit=hit, chains=chains)
        cars = sorted({k for k, _ in keys})
        n_cells = pts.shape[0]
        for car in cars:
            count = np.zeros(n_cells, dtype=np.int64)
            for key in keys:
                if key[0] == car:
                    count += hit[key]
            cache.car_hit_count[car] = count
        return cache
