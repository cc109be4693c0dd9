"""Query-exchange protocol between agents, with byte accounting.

Collaboration runs in three stages. Agents broadcast their world poses
and camera rigs once per scene; the ego plans, per encoder layer, which
(query cell, camera) pairs survive the interest gate; and for each
surviving pair the ego ships the predicted sampling positions to the
camera's owner, who answers with bilinear samples of its own feature
map. Partners never need model parameters: offsets are predicted on the
ego side, so a partner only evaluates its map at the requested points.

Every float on the wire costs 8 bytes. A request carries n_head * n_key
positions (2 floats each) per visible reference height, optionally plus
the C-float query vector once per newly requested cell; a response
carries one C-float vector per sample. No feature map ever crosses the
wire whole, and whenever fewer samples than map pixels are fetched the
response traffic is strictly below shipping the map itself.

Transport runs in process (function calls standing in for a network)
and merges responses in fixed (car_id, cam_id, query cell) order, so a
wire run is bit-reproducible against the monolithic computation.
"""

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .attention import FeatureMap, predict_offsets_weights
from .geometry import BevGrid, ProjectionCache, relative_poses
from .numcore import Tensor, bilinear_sample, no_grad
from .perception import detect, encode_bev, eval_ap, eval_center_distance_ap
from .selection import ActiveMask

FLOAT_BYTES = 8
POSE_FLOATS = 16          # one flattened 4x4 pose
RIG_FLOATS = 16 + 4       # extrinsic 4x4 plus fx, fy, cx, cy


# ------------------------------------------------------------------- poses

@dataclass(frozen=True)
class PoseTable:
    """World poses and camera rigs of every participating agent.

    entries maps agent_id -> (world pose, tuple of rigs). The table is
    what a pose broadcast delivers; everything downstream (projection
    caches, hit sets, request plans) derives from it.
    """
    entries: dict

    def __post_init__(self):
        for agent_id, (pose, rigs) in self.entries.items():
            for rig in rigs:
                if rig.car_id != agent_id:
                    raise ValueError("rig filed under the wrong agent")

    @property
    def agent_ids(self):
        return sorted(self.entries)

    def world_poses(self):
        return {a: pose for a, (pose, _) in self.entries.items()}

    def all_rigs(self):
        return [rig for a in self.agent_ids for rig in self.entries[a][1]]

    def relative(self, ego_id):
        """Agent poses in the ego frame; the ego entry is the identity."""
        if ego_id not in self.entries:
            raise ValueError(f"pose table does not contain ego {ego_id}")
        return relative_poses(self.world_poses(), ego_id)

    def restrict(self, agent_ids):
        missing = [a for a in agent_ids if a not in self.entries]
        if missing:
            raise KeyError(f"no pose entry for agents {missing}")
        return PoseTable(entries={a: self.entries[a] for a in agent_ids})

    @property
    def payload_bytes(self):
        """Broadcast cost: per agent one pose plus per rig one extrinsic
        and four intrinsic parameters, 8 bytes per float."""
        total = 0
        for a in self.entries:
            _, rigs = self.entries[a]
            total += (POSE_FLOATS + len(rigs) * RIG_FLOATS) * FLOAT_BYTES
        return total


def broadcast_poses(scene) -> PoseTable:
    """Collect every agent's pose and rigs, as a broadcast would."""
    return PoseTable(entries={a.agent_id: (a.pose, tuple(a.rigs))
                              for a in scene.agents})


# ---------------------------------------------------------------- planning

@dataclass(frozen=True)
class RequestEntry:
    """One planned (query cell, camera) interaction.

    ref_pixels has one slot per reference height: the image-pixel
    projection, or None when the pillar point fell outside the view
    (border-flagged, nothing to sample there). query_vec is the cell's
    query-plus-positional feature, the input the offset predictor needs.
    """
    cell: int
    ref_pixels: tuple
    query_vec: np.ndarray


@dataclass(frozen=True)
class QueryRequestPlan:
    """Per-camera request lists for one encoder layer.

    wire holds partner cameras (these cross the network); local holds
    the ego's own cameras, which are processed in place but still count
    as interactions. Entry lists are in ascending cell order and keys
    iterate sorted, so plans are deterministic.
    """
    ego_id: int
    wire: dict
    local: dict

    @property
    def n_wire(self):
        return sum(len(v) for v in self.wire.values())

    @property
    def n_entries(self):
        return self.n_wire + sum(len(v) for v in self.local.values())


def plan_requests(mask: ActiveMask, q, grid: BevGrid, pose_table: PoseTable,
                  ego_id, cache: ProjectionCache = None) -> QueryRequestPlan:
    """Turn one layer's gate mask into per-camera request lists.

    Covers exactly the mask-true (cell, camera) pairs whose camera
    geometrically hits the cell. q is the layer's BevQueries; its
    query-plus-positional rows ride along as the request feature.
    """
    rel = pose_table.relative(ego_id)
    if cache is None:
        cache = ProjectionCache.build(grid, pose_table.all_rigs(), rel)
    qpos = q.flat().data + q.flat_pos().data
    mask_flat = mask.flat()
    wire, local = {}, {}
    for key in cache.keys:
        hit = cache.hit[key]
        if hit.any() and key not in mask_flat:
            raise KeyError(f"no mask for hit camera {key}")
        if key not in mask_flat:
            continue
        cells = np.where(mask_flat[key] & hit)[0]
        if cells.size == 0:
            continue
        entries = []
        for cell in cells.tolist():
            pixels = []
            for j in range(grid.n_ref):
                if cache.valid[key][cell, j]:
                    u, v = cache.uv[key][cell, j]
                    pixels.append((float(u), float(v)))
                else:
                    pixels.append(None)
            entries.append(RequestEntry(cell=cell, ref_pixels=tuple(pixels),
                                        query_vec=qpos[cell].copy()))
        side = local if key[0] == ego_id else wire
        side[key] = entries
    return QueryRequestPlan(ego_id=ego_id, wire=wire, local=local)


# ---------------------------------------------------------------- exchange

def exchange(plan: QueryRequestPlan, partner_feature_maps: dict, params,
             include_query=False):
    """Run the wire half of a plan against the partners' feature maps.

    For every wire entry the owning partner returns, per visible
    reference height, n_head * n_key bilinearly sampled C-vectors of its
    own map, taken at ego-predicted offset positions. Returns
    (responses, deltas): responses maps each camera key to a list of
    (n_visible_refs, n_head, n_key, C) arrays in entry order; deltas
    carries the byte counters this exchange adds to a CommReport.

    Positions go up at 2 floats each; with include_query the C-float
    query vector rides along once per entry. Samples come down at C
    floats each. 8 bytes per float throughout.
    """
    responses = {}
    bytes_up = 0
    bytes_down = 0
    h, k = params.n_head, params.n_key
    with no_grad():
        for key in sorted(plan.wire):
            entries = plan.wire[key]
            if key not in partner_feature_maps:
                raise KeyError(f"missing partner feature map for {key}")
            fmap = partner_feature_maps[key]
            c = fmap.data.data.shape[-1]
            qvecs = Tensor(np.stack([e.query_vec for e in entries]))
            offs, _ = predict_offsets_weights(qvecs, params)
            per_entry = []
            for i, entry in enumerate(entries):
                bases = [fmap.feat_uv(p) for p in entry.ref_pixels
                         if p is not None]
                if not bases:
                    per_entry.append(np.zeros((0, h, k, c)))
                    continue
                base = np.asarray(bases).reshape(len(bases), 1, 1, 2)
                pos = offs.data[i].reshape(1, h, k, 2) + base
                samples = bilinear_sample(fmap.data, Tensor(pos))
                per_entry.append(np.array(samples.data))
                bytes_up += pos.size * FLOAT_BYTES
                bytes_down += samples.data.size * FLOAT_BYTES
                if include_query:
                    bytes_up += entry.query_vec.size * FLOAT_BYTES
            responses[key] = per_entry
    return responses, {"bytes_up": bytes_up, "bytes_down": bytes_down}


class Transport:
    """In-process wire for encode_bev: the sampler that fetches remotely.

    Ego cameras sample the local map at zero cost. Partner cameras cost
    the positions going up and the samples coming down; the response is
    computed on the partner's own map, so the ego-side entry in
    feature_maps only has to carry correct shape metadata (see
    placeholder_maps). Account books survive across layers; begin_layer
    resets the per-layer set of cells whose query vector was already
    sent, so include_query charges each (cell, camera) once per layer.
    """

    def __init__(self, ego_id, partner_maps: dict, include_query=False):
        for key, fm in partner_maps.items():
            if key[0] == ego_id:
                raise ValueError("ego's own camera listed as a partner")
            if key != fm.key:
                raise ValueError("partner map filed under the wrong key")
        self.ego_id = ego_id
        self.partner_maps = dict(partner_maps)
        self.include_query = include_query
        self.bytes_up = 0
        self.bytes_down = 0
        self.bytes_down_by_key = {}
        self.samples_by_key = {}
        self._sent_cells = {}

    def begin_layer(self, layer_idx):
        self._sent_cells = {}

    def __call__(self, key, fmap, pos, rows):
        if key[0] == self.ego_id:
            return bilinear_sample(fmap.data, pos)
        if key not in self.partner_maps:
            raise KeyError(f"missing partner feature map for {key}")
        remote = self.partner_maps[key]
        self.bytes_up += int(pos.data.size) * FLOAT_BYTES
        if self.include_query:
            c = remote.data.data.shape[-1]
            seen = self._sent_cells.setdefault(key, set())
            fresh = [r for r in np.asarray(rows).tolist() if r not in seen]
            seen.update(fresh)
            self.bytes_up += len(fresh) * c * FLOAT_BYTES
        samples = bilinear_sample(remote.data, pos)
        count = int(np.prod(samples.data.shape[:-1]))
        self.bytes_down += int(samples.data.size) * FLOAT_BYTES
        self.bytes_down_by_key[key] = \
            self.bytes_down_by_key.get(key, 0) + samples.data.size * FLOAT_BYTES
        self.samples_by_key[key] = self.samples_by_key.get(key, 0) + count
        return samples

    def placeholder_maps(self):
        """Zero-data stand-ins carrying the partners' shape metadata."""
        return {key: FeatureMap(car_id=fm.car_id, cam_id=fm.cam_id,
                                data=Tensor(np.zeros_like(fm.data.data)),
                                img_width=fm.img_width,
                                img_height=fm.img_height)
                for key, fm in self.partner_maps.items()}

    def map_bytes(self, key):
        return self.partner_maps[key].data.data.size * FLOAT_BYTES

    def check_economy(self):
        """Response traffic must undercut shipping the map whole whenever
        fewer samples than map pixels were fetched. Returns the per-key
        (samples, pixels, bytes_down, map_bytes) books for inspection."""
        books = {}
        for key, n_samples in self.samples_by_key.items():
            h, w, _ = self.partner_maps[key].data.data.shape
            down = self.bytes_down_by_key[key]
            full = self.map_bytes(key)
            if n_samples < h * w and not down < full:
                raise AssertionError(
                    f"wire fetched {n_samples} samples for {key} but cost "
                    f"{down} bytes against a {full}-byte map")
            books[key] = (n_samples, h * w, down, full)
        return books


# --------------------------------------------------------------- reporting

@dataclass(frozen=True)
class CommReport:
    """Interaction and traffic totals for one evaluation run.

    n_ori counts every (cell, camera, layer) interaction the dense model
    would compute; n_act those the gate kept. p_ratio = n_act / n_ori.
    unique_cells counts grid cells active for at least one camera in at
    least one layer.
    """
    n_ori: int
    n_act: int
    p_ratio: float
    bytes_up: int
    bytes_down: int
    unique_cells: int

    def __post_init__(self):
        if not 0 <= self.n_act <= self.n_ori:
            raise ValueError("active interactions must lie in [0, n_ori]")
        if not 0.0 <= self.p_ratio <= 1.0:
            raise ValueError("p_ratio must lie in [0, 1]")
        if self.bytes_up < 0 or self.bytes_down < 0:
            raise ValueError("byte counters must be nonnegative")

    def merged(self, other):
        """Sum two reports' books (scenes of one evaluation run)."""
        n_ori = self.n_ori + other.n_ori
        n_act = self.n_act + other.n_act
        return CommReport(
            n_ori=n_ori, n_act=n_act,
            p_ratio=(n_act / n_ori) if n_ori else 1.0,
            bytes_up=self.bytes_up + other.bytes_up,
            bytes_down=self.bytes_down + other.bytes_down,
            unique_cells=self.unique_cells + other.unique_cells)


def pruned_pairs(masks, hit) -> int:
    """Interactions the gate dropped: hit pairs whose mask entry is
    false, summed over layers. Dense layers (mask None) drop nothing."""
    total = 0
    for mask in masks:
        if mask is None:
            continue
        flat = mask.flat()
        for key, h in hit.items():
            m = flat.get(key)
            if m is not None:
                total += int((h & ~m).sum())
    return total


def comm_report(masks, hit, bytes_up=0, bytes_down=0) -> CommReport:
    """Interaction counts from per-layer masks against the hit sets.

    masks is one entry per encoder layer: an ActiveMask, or None for a
    layer that ran dense (everything hit is active). hit maps camera
    keys to per-cell hit flags. Byte counters are passed through from
    whatever transport carried the traffic.
    """
    n_cells = next(iter(hit.values())).shape[0] if hit else 0
    dense_per_layer = sum(int(h.sum()) for h in hit.values())
    n_ori = dense_per_layer * len(masks)
    n_act = 0
    ever_active = np.zeros(n_cells, dtype=bool)
    for mask in masks:
        flat = mask.flat() if mask is not None else None
        for key, h in hit.items():
            act = h if flat is None or key not in flat else (h & flat[key])
            n_act += int(act.sum())
            ever_active |= act
    return CommReport(n_ori=n_ori, n_act=n_act,
                      p_ratio=(n_act / n_ori) if n_ori else 1.0,
                      bytes_up=bytes_up, bytes_down=bytes_down,
                      unique_cells=int(ever_active.sum()))


# ---------------------------------------------------------------- pipeline

def scene_feature_maps(scene, stem_params, agent_ids=None) -> dict:
    """Raycast and lift every camera of the chosen agents."""
    from .simworld import feature_stem, raycast_channels
    if agent_ids is None:
        agent_ids = [a.agent_id for a in scene.agents]
    out = {}
    for agent_id in agent_ids:
        for rig in scene.agent(agent_id).rigs:
            raw = raycast_channels(scene, rig)
            fm = feature_stem(raw, stem_params)
            out[fm.key] = fm
    return out


def evaluate_scene(scene, params, n_agents=None, epsilon=0.01, mode="infer",
                   gating="learned", score_floor=0.3, include_query=False,
                   wire=True):
    """One collaborative perception run: first n_agents agents, lowest
    agent id as ego, query exchange over the in-process wire.

    Returns a dict with predictions, ground truth, the CommReport, the
    pose-broadcast byte cost, and the raw encode result (interest maps
    and masks per layer).
    """
    from .simworld import ground_truth
    table = broadcast_poses(scene)
    ids = table.agent_ids
    if n_agents is not None:
        if n_agents > len(ids):
            raise ValueError(
                f"scene has {len(ids)} agents, {n_agents} requested")
        ids = ids[:n_agents]
        table = table.restrict(ids)
    ego_id = ids[0]
    rel = table.relative(ego_id)
    rigs = table.all_rigs()
    fmaps = scene_feature_maps(scene, params.stem, ids)
    transport = None
    if wire:
        partners = {k: fm for k, fm in fmaps.items() if k[0] != ego_id}
        transport = Transport(ego_id, partners, include_query=include_query)
        feature_maps = {k: fm for k, fm in fmaps.items() if k[0] == ego_id}
        feature_maps.update(transport.placeholder_maps())
    else:
        feature_maps = fmaps
    cache = ProjectionCache.build(params.grid, rigs, rel)
    with no_grad():
        res = encode_bev(feature_maps, rigs, rel, params, mode=mode,
                         gating=gating, epsilon=epsilon, cache=cache,
                         transport=transport)
        preds = detect(res.bev, params.head, params.grid,
                       score_floor=score_floor)
    gts = ground_truth(scene, ego_id, bev_half=params.grid.half_range)
    bytes_up = transport.bytes_up if transport else 0
    bytes_down = transport.bytes_down if transport else 0
    if transport:
        transport.check_economy()
    report = comm_report(res.masks, cache.hit,
                         bytes_up=bytes_up, bytes_down=bytes_down)
    return {"preds": preds, "gts": gts, "report": report,
            "pose_bytes": table.payload_bytes, "encode": res,
            "ego_id": ego_id, "cache": cache, "transport": transport}


# ------------------------------------------------------------------- sweep

SWEEP_COLUMNS = ("n_car", "ap50", "ap70", "cd_map",
                 "n_ori", "n_act", "p_ratio", "bytes_up", "bytes_down")


@dataclass(frozen=True)
class SweepRow:
    n_car: int
    ap50: float
    ap70: float
    cd_map: float
    report: CommReport

    def as_record(self):
        return {"n_car": self.n_car, "ap50": self.ap50, "ap70": self.ap70,
                "cd_map": self.cd_map, "n_ori": self.report.n_ori,
                "n_act": self.report.n_act, "p_ratio": self.report.p_ratio,
                "bytes_up": self.report.bytes_up,
                "bytes_down": self.report.bytes_down}


@dataclass(frozen=True)
class SweepResult:
    """Detection quality and traffic as the number of agents grows."""
    rows: dict = field(default_factory=dict)  # n_car -> SweepRow

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(SWEEP_COLUMNS)
            for n_car in sorted(self.rows):
                rec = self.rows[n_car].as_record()
                writer.writerow([_fmt(rec[col]) for col in SWEEP_COLUMNS])
        return path

    def to_json(self, path):
        records = [self.rows[n].as_record() for n in sorted(self.rows)]
        with open(path, "w") as fh:
            json.dump({"columns": list(SWEEP_COLUMNS), "rows": records},
                      fh, indent=1)
        return path


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.17g}"
    return str(v)


def _mean(values):
    return float(sum(values) / len(values)) if values else 0.0


def eval_scene_set(scenes, params, n_agents=None, epsilon=0.01,
                   gating="learned", score_floor=0.3, include_query=False,
                   wire=True, thresholds=(0.5, 0.7), workers=1):
    """Evaluate a scene list and aggregate: APs averaged over scenes,
    traffic books summed. Returns (ap50, ap70, cd_map, CommReport).

    workers > 1 fans scene evaluations over a thread pool; aggregation
    order follows the scene list either way, so results are identical.
    """
    def one(scene):
        return evaluate_scene(scene, params, n_agents=n_agents,
                              epsilon=epsilon, gating=gating,
                              score_floor=score_floor,
                              include_query=include_query, wire=wire)

    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=workers) as pool:
            evs = list(pool.map(one, scenes))
    else:
        evs = [one(scene) for scene in scenes]
    ap50s, ap70s, cds = [], [], []
    report = None
    for ev in evs:
        res = eval_ap(ev["preds"], ev["gts"], thresholds=thresholds)
        cd = eval_center_distance_ap(ev["preds"], ev["gts"])
        ap50s.append(res.ap[thresholds[0]])
        ap70s.append(res.ap[thresholds[1]])
        cds.append(cd.mean_ap)
        report = ev["report"] if report is None \
            else report.merged(ev["report"])
    return _mean(ap50s), _mean(ap70s), _mean(cds), report


def run_sweep(scenes, params, epsilon=0.01, n_max=5, score_floor=0.3,
              include_query=False, thresholds=(0.5, 0.7),
              workers=1) -> SweepResult:
    """Re-evaluate the scene set with the first 1..n_max agents attached.

    Every scene must carry at least n_max agents; the lowest agent id is
    always the ego, so the n_car = 1 row is single-agent performance.
    """
    if not scenes:
        raise ValueError("sweep needs at least one scene")
    for scene in scenes:
        if len(scene.agents) < n_max:
            raise ValueError(
                f"scene seed {scene.seed} has {len(scene.agents)} agents, "
                f"sweep needs {n_max}")
    rows = {}
    for n_car in range(1, n_max + 1):
        ap50, ap70, cd_map, report = eval_scene_set(
            scenes, params, n_agents=n_car, epsilon=epsilon,
            score_floor=score_floor, include_query=include_query,
            thresholds=thresholds, workers=workers)
        rows[n_car] = SweepRow(n_car=n_car, ap50=ap50, ap70=ap70,
                               cd_map=cd_map, report=report)
    return SweepResult(rows=rows)
