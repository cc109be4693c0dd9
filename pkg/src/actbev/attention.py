"""Deformable attention, spatial cross-attention, and pose-gated selective attention.

One deformable-attention call predicts, from the query vector alone, a
set of sampling offsets and softmax weights per head (shared by every
camera view and reference point the query touches), samples the feature
map at reference-point-plus-offset, and mixes per-head value/output
projections:

    out = sum_m W_m [ sum_n A_mn * W'_m f(p + dp_mn) ]

Spatial cross-attention averages that over the cameras whose frustum
contains the query's pillar (the hit set) and sums over the pillar's
reference heights. The selective variant additionally weights each
(car, camera) pair by an interest score in [0,1] and, at inference,
skips pairs whose score is at or below a threshold; the per-car hit
normalization stays geometric, so a skipped pair behaves exactly like a
pair included with weight zero.

Two surfaces are provided: per-query ops mirroring the math one call at
a time (the shape the oracle tests transcribe), and batched kernels used
by the encoder, which run the same arithmetic over row lists so a whole
grid costs a handful of numpy calls. Both share _attend_rows, so their
outputs agree bitwise.
"""

from dataclasses import dataclass

import numpy as np

from .geometry import BevGrid, CameraRig, PixelPoint, camera_chain, hit_set, \
    project_point, reference_pillar
from .numcore import LinearParams, Tensor, as_tensor, bilinear_sample, concat, \
    index_rows, linear, segment_sum, softmax, take_axis


# ------------------------------------------------------------------- types

@dataclass
class BevQueries:
    """Query grid and its learned positional embedding, both (H, W, C)."""
    grid: Tensor
    pos: Tensor

    def __post_init__(self):
        if self.grid.data.shape != self.pos.data.shape:
            raise ValueError("grid and positional embedding shapes differ")

    @property
    def n_cells(self):
        h, w, _ = self.grid.data.shape
        return h * w

    def flat(self):
        h, w, c = self.grid.data.shape
        return self.grid.reshape(h * w, c)

    def flat_pos(self):
        h, w, c = self.pos.data.shape
        return self.pos.reshape(h * w, c)


@dataclass
class FeatureMap:
    """Per-camera feature grid (H_f, W_f, C).

    img_width/img_height, when set, declare the pixel size of the source
    image so geometric reference points can be rescaled into feature
    coordinates; when unset, positions are taken to be in the map's own
    pixel units already.
    """
    car_id: int
    cam_id: int
    data: Tensor
    img_width: int = None
    img_height: int = None

    @property
    def key(self):
        return (self.car_id, self.cam_id)

    def feat_uv(self, uv):
        """Rescale image-pixel (u, v) into this map's pixel coordinates."""
        uv = np.asarray(uv, dtype=np.float64)
        if self.img_width is None:
            return uv
        h_f, w_f, _ = self.data.shape
        scale = np.array([w_f / self.img_width, h_f / self.img_height])
        return uv * scale


class DfmAttnParams:
    """Learnable pieces of one deformable-attention call.

    Per head: value projection w_val (C -> C/H) and output projection
    w_out (C/H -> C). Offset and weight predictors map the query to
    n_head*n_key 2-vectors / logits; both start at zero so the first
    forward samples exactly at the reference point with uniform weights.
    """

    def __init__(self, n_head, n_key, w_val, w_out, offset_pred, weight_pred):
        self.n_head = n_head
        self.n_key = n_key
        self.w_val = list(w_val)
        self.w_out = list(w_out)
        self.offset_pred = offset_pred
        self.weight_pred = weight_pred

    @staticmethod
    def create(rng, c, n_head=2, n_key=4):
        if c % n_head != 0:
            raise ValueError("channel width must divide evenly across heads")
        c_head = c // n_head
        w_val = [LinearParams.create(rng, c, c_head) for _ in range(n_head)]
        w_out = [LinearParams.create(rng, c_head, c) for _ in range(n_head)]
        offset_pred = LinearParams.create(rng, c, n_head * n_key * 2, zero=True)
        weight_pred = LinearParams.create(rng, c, n_head * n_key, zero=True)
        return DfmAttnParams(n_head, n_key, w_val, w_out, offset_pred, weight_pred)

    def named(self, prefix):
        out = {}
        for h in range(self.n_head):
            out.update(self.w_val[h].named(f"{prefix}.val{h}"))
            out.update(self.w_out[h].named(f"{prefix}.out{h}"))
        out.update(self.offset_pred.named(f"{prefix}.offset"))
        out.update(self.weight_pred.named(f"{prefix}.weight"))
        return out


# --------------------------------------------------------- shared internals

def predict_offsets_weights(q, params: DfmAttnParams):
    """Offsets (n, H, K, 2) and softmaxed weights (n, H, K) from queries (n, C)."""
    n = q.data.shape[0]
    h, k = params.n_head, params.n_key
    offs = linear(q, params.offset_pred).reshape(n, h, k, 2)
    logits = linear(q, params.weight_pred).reshape(n, h, k)
    return offs, softmax(logits)


def gather_positions(offs, rows, base_uv):
    """Sampling positions for selected rows: base reference + predicted offsets."""
    n, h, k, _ = offs.data.shape
    m = len(rows)
    off_rows = index_rows(offs.reshape(n, h * k * 2), rows).reshape(m, h, k, 2)
    return off_rows + Tensor(np.asarray(base_uv).reshape(m, 1, 1, 2))


def attend_samples(samples, attn, rows, params: DfmAttnParams):
    """Head mixing on precomputed samples (m, H, K, C): weight, pool, project."""
    n, h, k = attn.data.shape
    m = len(rows)
    a_rows = index_rows(attn.reshape(n, h * k), rows).reshape(m, h, k)
    out = None
    for head in range(h):
        s_h = take_axis(samples, head, 1)                    # (m, K, C)
        a_h = take_axis(a_rows, head, 1).reshape(m, k, 1)    # (m, K, 1)
        v = linear(s_h, params.w_val[head])                  # (m, K, C/H)
        pooled = (v * a_h).sum(axis=1)                       # (m, C/H)
        o = linear(pooled, params.w_out[head])               # (m, C)
        out = o if out is None else out + o
    return out


def attend_rows(offs, attn, rows, base_uv, fmap: Tensor, params: DfmAttnParams):
    """Full deformable attention for a row list against one feature map."""
    pos = gather_positions(offs, rows, base_uv)
    samples = bilinear_sample(fmap, pos)
    return attend_samples(samples, attn, rows, params)


# ----------------------------------------------------------- per-query ops

def _map_tensor(f):
    return f.data if isinstance(f, FeatureMap) else as_tensor(f)


def dfm_attn(q, p, f, params: DfmAttnParams):
    """One deformable-attention evaluation; p in the feature map's pixel units.

    q is a C-vector; accepts a PixelPoint or a bare (u, v) pair.
    """
    q = as_tensor(q)
    uv = (p.u, p.v) if isinstance(p, PixelPoint) else (p[0], p[1])
    q2 = q.reshape(1, q.data.shape[-1])
    offs, attn = predict_offsets_weights(q2, params)
    rows = np.array([0])
    out = attend_rows(offs, attn, rows, np.asarray([uv]), _map_tensor(f), params)
    return out.reshape(q.data.shape[-1])


def per_camera_attn(q, ref_point, f_ki: FeatureMap, params: DfmAttnParams):
    """One (query, camera, reference-height) term of the camera sum.

    ref_point is the image-pixel projection of the pillar point, or None
    when the point missed the view; a missed point contributes zero no
    matter what offsets would have been predicted, the same rule the
    border-zero sampler applies inside the image.
    """
    c = q.data.shape[-1] if isinstance(q, Tensor) else np.asarray(q).shape[-1]
    if ref_point is None:
        return Tensor(np.zeros(c))
    uv = f_ki.feat_uv((ref_point.u, ref_point.v))
    return dfm_attn(q, (uv[0], uv[1]), f_ki, params)


def _camera_term(q, q_cell, rig, pose, grid, fmap, params):
    """Sum over the pillar's reference heights for one camera."""
    chain = camera_chain(pose, rig.extrinsic)
    acc = None
    for point in reference_pillar(grid, q_cell[0], q_cell[1]):
        pp = project_point(chain, rig.intrinsics, point)
        if pp is None:
            continue
        term = per_camera_attn(q, pp, fmap, params)
        acc = term if acc is None else acc + term
    c = q.data.shape[-1]
    return acc if acc is not None else Tensor(np.zeros(c))


def spatial_cross_attn(q, q_cell, feature_maps, rigs, agent_poses,
                       grid: BevGrid, params: DfmAttnParams):
    """Average over hit cameras of the per-camera reference-height sums.

    feature_maps maps (car_id, cam_id) to FeatureMap. An empty hit set
    returns the zero vector; the residual connection upstream then leaves
    the query untouched.
    """
    q = as_tensor(q)
    hits = hit_set(q_cell, rigs, agent_poses, grid)
    if not hits:
        return Tensor(np.zeros(q.data.shape[-1]))
    acc = None
    for rig in sorted(rigs, key=lambda r: (r.car_id, r.cam_id)):
        key = (rig.car_id, rig.cam_id)
        if key not in hits:
            continue
        term = _camera_term(q, q_cell, rig, agent_poses[rig.car_id], grid,
                            feature_maps[key], params)
        acc = term if acc is None else acc + term
    return acc * (1.0 / len(hits))


def psa(q, q_cell, feature_maps, interest, rigs, agent_poses, grid: BevGrid,
        params: DfmAttnParams, epsilon=None):
    """Interest-gated cross-attention summed over cars (per-query form).

    interest maps (car_id, cam_id) to this query's score in [0,1]; a hit
    pair without a score is an error. Per-car normalization counts the
    geometric hit set, never the gating, so pairs skipped under epsilon
    (inference) change only the numerator terms they would have added.
    """
    q = as_tensor(q)
    c = q.data.shape[-1]
    hits = hit_set(q_cell, rigs, agent_poses, grid)
    by_car = {}
    for key in hits:
        if key not in interest:
            raise KeyError(f"no interest score for hit pair {key}")
        by_car.setdefault(key[0], []).append(key)
    rig_of = {(r.car_id, r.cam_id): r for r in rigs}
    acc = None
    for car in sorted(by_car):
        keys = sorted(by_car[car])
        car_acc = None
        for key in keys:
            score = interest[key]
            score_val = score.item() if isinstance(score, Tensor) else float(score)
            if not (0.0 <= score_val <= 1.0):
                raise ValueError(f"interest score for {key} outside [0,1]")
            if epsilon is not None and score_val <= epsilon:
                continue
            term = _camera_term(q, q_cell, rig_of[key], agent_poses[car], grid,
                                feature_maps[key], params)
            term = term * score
            car_acc = term if car_acc is None else car_acc + term
        if car_acc is not None:
            car_acc = car_acc * (1.0 / len(keys))
            acc = car_acc if acc is None else acc + car_acc
    return acc if acc is not None else Tensor(np.zeros(c))


def bev_self_attn(q: BevQueries, params: DfmAttnParams) -> BevQueries:
    """Deformable self-attention of the grid over itself, residual-added.

    Each query's reference point is its own cell, treating the grid as a
    feature map whose pixels are cells ((u, v) = (y index, x index)).
    """
    h, w, c = q.grid.data.shape
    qpos = q.flat() + q.flat_pos()
    offs, attn = predict_offsets_weights(qpos, params)
    xi, yi = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    base_uv = np.stack([yi.reshape(-1), xi.reshape(-1)], axis=1).astype(np.float64)
    rows = np.arange(h * w)
    out = attend_rows(offs, attn, rows, base_uv, q.grid, params)
    new_grid = q.grid + out.reshape(h, w, c)
    return BevQueries(grid=new_grid, pos=q.pos)


# ------------------------------------------------------------ batched kernels

def psa_batched(qpos, cache, feature_maps, grid: BevGrid, params: DfmAttnParams,
                interest=None, mask=None, sampler=None):
    """Selective cross-attention over the whole grid at once.

    qpos:         (n_cells, C) queries with positional embedding added
    cache:        ProjectionCache for this scene/ego
    feature_maps: (car_id, cam_id) -> FeatureMap
    interest:     (car_id, cam_id) -> (n_cells,) score tensor, or None for
                  the dense path (every hit pair at weight one, no gating
                  arithmetic at all)
    mask:         (car_id, cam_id) -> (n_cells,) bool of pairs to keep
                  (inference pruning); None keeps every hit pair
    sampler:      callable(key, fmap, positions, rows) -> (m,H,K,C)
                  samples tensor, letting a transport fetch samples
                  remotely; rows are the grid cells the positions belong
                  to, so the transport can account per-cell payloads.
                  None samples the local map

    Returns (out, stats): out (n_cells, C); stats maps each camera key to
    (n_hit, n_active) pair counts for this call.
    """
    n = qpos.data.shape[0]
    c = qpos.data.shape[1]
    offs, attn = predict_offsets_weights(qpos, params)
    pieces, piece_rows = [], []
    stats = {}
    for key in cache.keys:
        hit = cache.hit[key]
        if interest is not None and hit.any() and key not in interest:
            raise KeyError(f"no interest map for hit pair {key}")
        active = hit if mask is None or key not in mask else (hit & mask[key])
        stats[key] = (int(hit.sum()), int(active.sum()))
        if not active.any():
            continue
        fmap = feature_maps[key]
        inv_norm = np.zeros(n)
        counted = cache.car_hit_count[key[0]]
        inv_norm[counted > 0] = 1.0 / counted[counted > 0]
        gate = None
        if interest is not None:
            gate = interest[key].reshape(n, 1)
        for j in range(grid.n_ref):
            rows = np.where(active & cache.valid[key][:, j])[0]
            if rows.size == 0:
                continue
            base_uv = fmap.feat_uv(cache.uv[key][rows, j])
            pos = gather_positions(offs, rows, base_uv)
            if sampler is None:
                samples = bilinear_sample(fmap.data, pos)
            else:
                samples = sampler(key, fmap, pos, rows)
            out = attend_samples(samples, attn, rows, params)
            if gate is not None:
                out = out * index_rows(gate, rows)
            out = out * Tensor(inv_norm[rows].reshape(-1, 1))
            pieces.append(out)
            piece_rows.append(rows)
    if not pieces:
        return Tensor(np.zeros((n, c))), stats
    merged = concat(pieces, axis=0) if len(pieces) > 1 else pieces[0]
    all_rows = np.concatenate(piece_rows)
    return segment_sum(merged, all_rows, n), stats
