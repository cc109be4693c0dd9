"""Model assembly, detection head, set-matching loss, and AP evaluation.

The encoder stacks n_layers blocks of: BEV self-attention, interest-gated
cross-attention over every collaborator's cameras, and a feed-forward,
each followed by residual layer norm. Interest scores are recomputed per
block from that block's query features. A per-cell anchor-free head then
decodes boxes; training matches predictions to ground truth with a
Hungarian assignment and pays binary cross-entropy plus L1 on the
matched box parameters.

Three gating modes cover the comparison arms: "learned" uses the scoring
network (soft weights in training, hard epsilon pruning at inference),
"dense" bypasses scoring entirely (the all-queries baseline), and "ones"
runs the gated code path with every score pinned to 1.0, which must
reproduce "dense" exactly.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .attention import BevQueries, DfmAttnParams, FeatureMap, psa_batched
from .attention import bev_self_attn
from .geometry import BevGrid, ProjectionCache
from .numcore import LinearParams, Tensor, bce_with_logits, concat, \
    exp as texp, index_rows, layer_norm, linear, relu, tabs, take_axis, \
    tanh as ttanh
from .selection import SelectionParams, gate, interest_scores


# ------------------------------------------------------------------- boxes

@dataclass(frozen=True)
class DetectionBox:
    """A BEV rectangle in the ego frame with one class score."""
    cx: float
    cy: float
    length: float
    width: float
    yaw: float
    class_score: float

    def __post_init__(self):
        if self.length <= 0.0 or self.width <= 0.0:
            raise ValueError("box extents must be positive")
        if not (0.0 <= self.class_score <= 1.0):
            raise ValueError("class score must lie in [0,1]")


def _rect_corners(b: DetectionBox):
    c, s = math.cos(b.yaw), math.sin(b.yaw)
    dx, dy = b.length / 2.0, b.width / 2.0
    local = ((dx, dy), (-dx, dy), (-dx, -dy), (dx, -dy))  # counter-clockwise
    return [(b.cx + c * x - s * y, b.cy + s * x + c * y) for x, y in local]


def _poly_area(poly):
    acc = 0.0
    for i in range(len(poly)):
        x0, y0 = poly[i]
        x1, y1 = poly[(i + 1) % len(poly)]
        acc += x0 * y1 - x1 * y0
    return acc / 2.0


def _clip_polygon(subject, clip):
    """Intersection of a polygon with a convex CCW clip polygon."""
    out = list(subject)
    for i in range(len(clip)):
        if not out:
            return []
        ax, ay = clip[i]
        bx, by = clip[(i + 1) % len(clip)]
        inp, out = out, []
        d = [
            (bx - ax) * (py - ay) - (by - ay) * (px - ax)
            for px, py in inp
        ]
        for j in range(len(inp)):
            k = (j + 1) % len(inp)
            if d[j] >= 0.0:
                out.append(inp[j])
            if (d[j] >= 0.0) != (d[k] >= 0.0):
                t = d[j] / (d[j] - d[k])
                px, py = inp[j]
                qx, qy = inp[k]
                out.append((px + t * (qx - px), py + t * (qy - py)))
    return out


def bev_iou(a: DetectionBox, b: DetectionBox) -> float:
    """Rotated-rectangle intersection over union in the BEV plane."""
    ca, cb = _rect_corners(a), _rect_corners(b)
    area_a, area_b = _poly_area(ca), _poly_area(cb)
    if area_a <= 0.0 or area_b <= 0.0:
        raise ValueError("degenerate zero-area box")
    inter_poly = _clip_polygon(ca, cb)
    inter = _poly_area(inter_poly) if len(inter_poly) >= 3 else 0.0
    union = area_a + area_b - inter
    return inter / union


# -------------------------------------------------------------- parameters

@dataclass
class EncoderLayerParams:
    self_attn: DfmAttnParams
    psa: DfmAttnParams
    selection: SelectionParams
    ffn1: LinearParams
    ffn2: LinearParams
    ln: list  # three (gamma, beta) Tensor pairs

    def named(self, prefix):
        out = {}
        out.update(self.self_attn.named(f"{prefix}.selfattn"))
        out.update(self.psa.named(f"{prefix}.psa"))
        out.update(self.selection.named(f"{prefix}.gate"))
        out.update(self.ffn1.named(f"{prefix}.ffn1"))
        out.update(self.ffn2.named(f"{prefix}.ffn2"))
        for i, (g, b) in enumerate(self.ln):
            out[f"{prefix}.ln{i}.gamma"] = g
            out[f"{prefix}.ln{i}.beta"] = b
        return out


@dataclass
class DetHeadParams:
    """Per-cell classification (C -> 1) and regression (C -> 5) linears.

    Regression fields: center offsets relative to the cell center
    (tanh-bounded to half a cell), log length, log width, yaw.
    """
    cls: LinearParams
    reg: LinearParams

    @staticmethod
    def create(rng, c):
        return DetHeadParams(cls=LinearParams.create(rng, c, 1),
                             reg=LinearParams.create(rng, c, 5))

    def named(self, prefix):
        out = {}
        out.update(self.cls.named(f"{prefix}.cls"))
        out.update(self.reg.named(f"{prefix}.reg"))
        return out


@dataclass
class ModelParams:
    """Every learnable tensor plus the grid geometry they are tied to."""
    grid: BevGrid
    c: int
    stem: LinearParams
    query_init: Tensor
    pos_embed: Tensor
    layers: list
    head: DetHeadParams
    c_pe: int = 256

    @staticmethod
    def create(rng, grid: BevGrid, c=32, n_head=2, n_key=4, n_layers=3,
               c_pe=256, stem_in=4):
        def ln_pair():
            return (Tensor(np.ones(c), requires_grad=True),
                    Tensor(np.zeros(c), requires_grad=True))

        layers = []
        for _ in range(n_layers):
            layers.append(EncoderLayerParams(
                self_attn=DfmAttnParams.create(rng, c, n_head, n_key),
                psa=DfmAttnParams.create(rng, c, n_head, n_key),
                selection=SelectionParams.create(rng, c, c_pe=c_pe),
                ffn1=LinearParams.create(rng, c, 2 * c),
                ffn2=LinearParams.create(rng, 2 * c, c),
                ln=[ln_pair(), ln_pair(), ln_pair()],
            ))
        shape = (grid.h_cells, grid.w_cells, c)
        return ModelParams(
            grid=grid, c=c,
            stem=LinearParams.create(rng, stem_in, c),
            query_init=Tensor(0.1 * rng.normal(size=shape), requires_grad=True),
            pos_embed=Tensor(0.1 * rng.normal(size=shape), requires_grad=True),
            layers=layers, head=DetHeadParams.create(rng, c), c_pe=c_pe)

    def named(self):
        out = {}
        out.update(self.stem.named("stem"))
        out["query"] = self.query_init
        out["pos"] = self.pos_embed
        for i, layer in enumerate(self.layers):
            out.update(layer.named(f"layer{i}"))
        out.update(self.head.named("head"))
        return out


# ----------------------------------------------------------------- encoder

@dataclass
class EncodeResult:
    bev: BevQueries
    interest: list   # per layer: (car,cam) -> InterestScoreMap, or None (dense)
    masks: list      # per layer: ActiveMask (infer mode), or None
    stats: list      # per layer: (car,cam) -> (n_hit, n_active)


def encode_bev(feature_maps, rigs, pose_table, params: ModelParams,
               mode="train", gating="learned", epsilon=0.01, cache=None,
               transport=None) -> EncodeResult:
    """Run the full encoder stack for one ego agent.

    pose_table maps car_id to its pose in the ego frame (the ego entry is
    the identity). feature_maps must cover every camera pair that can be
    hit; with a transport attached, partner entries only need correct
    shape metadata since their samples arrive through the transport.
    A transport with a begin_layer(i) method is told when each encoder
    layer starts, so per-layer payload accounting can reset.

    mode "train" gates softly (multiply by scores); "infer" prunes pairs
    with score <= epsilon and records per-layer masks. gating "dense"
    skips scoring, "ones" pins every score to 1.0 through the gated path.
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"unknown mode {mode!r}")
    if gating not in ("learned", "dense", "ones"):
        raise ValueError(f"unknown gating {gating!r}")
    grid = params.grid
    if cache is None:
        cache = ProjectionCache.build(grid, rigs, pose_table)
    for key in cache.keys:
        if cache.hit[key].any() and key not in feature_maps:
            raise KeyError(f"no feature map for hit camera {key}")
    h, w = grid.h_cells, grid.w_cells
    n = h * w
    x = params.query_init
    pos = params.pos_embed
    interest_all, masks_all, stats_all = [], [], []
    for li, layer in enumerate(params.layers):
        if transport is not None and hasattr(transport, "begin_layer"):
            transport.begin_layer(li)
        attended = bev_self_attn(BevQueries(grid=x, pos=pos), layer.self_attn)
        x = layer_norm(attended.grid, layer.ln[0][0], layer.ln[0][1])

        interest_maps, interest_flat, mask_flat, mask_obj = None, None, None, None
        if gating == "learned":
            interest_maps = interest_scores(
                BevQueries(grid=x, pos=pos), cache.chains, layer.selection,
                half_range=grid.half_range)
            interest_flat = {key: sm.flat() for key, sm in interest_maps.items()}
            if mode == "infer":
                mask_obj = gate(interest_maps, epsilon)
                mask_flat = mask_obj.flat()
        elif gating == "ones":
            interest_flat = {key: Tensor(np.ones(n)) for key in cache.keys}

        qpos = x.reshape(n, params.c) + pos.reshape(n, params.c)
        attn_out, stats = psa_batched(
            qpos, cache, feature_maps, grid, layer.psa,
            interest=interest_flat, mask=mask_flat, sampler=transport)
        x = layer_norm(x + attn_out.reshape(h, w, params.c),
                       layer.ln[1][0], layer.ln[1][1])

        ff = linear(relu(linear(x, layer.ffn1)), layer.ffn2)
        x = layer_norm(x + ff, layer.ln[2][0], layer.ln[2][1])

        interest_all.append(interest_maps)
        masks_all.append(mask_obj)
        stats_all.append(stats)
    return EncodeResult(bev=BevQueries(grid=x, pos=pos), interest=interest_all,
                        masks=masks_all, stats=stats_all)


# --------------------------------------------------------------------- head

@dataclass
class HeadOutputs:
    cls_logits: Tensor  # (n_cells, 1)
    reg: Tensor         # (n_cells, 5)
    grid: BevGrid


def apply_head(bev: BevQueries, head: DetHeadParams, grid: BevGrid) -> HeadOutputs:
    h, w, c = bev.grid.data.shape
    feats = bev.grid.reshape(h * w, c)
    return HeadOutputs(cls_logits=linear(feats, head.cls),
                       reg=linear(feats, head.reg), grid=grid)


def decode_box_tensors(out: HeadOutputs):
    """Differentiable per-cell box parameters (cx, cy, length, width, yaw).

    Center offsets are tanh-bounded to half a cell, so decoded centers
    always stay inside the grid's metric range; sizes are exponentiated.
    """
    grid = out.grid
    centers = grid.all_centers()
    dcx = ttanh(take_axis(out.reg, 0, 1)) * (grid.cell_dx / 2.0)
    dcy = ttanh(take_axis(out.reg, 1, 1)) * (grid.cell_dy / 2.0)
    cx = dcx + Tensor(centers[:, 0])
    cy = dcy + Tensor(centers[:, 1])
    length = texp(take_axis(out.reg, 2, 1))
    width = texp(take_axis(out.reg, 3, 1))
    yaw = take_axis(out.reg, 4, 1)
    return cx, cy, length, width, yaw


def _score_np(out: HeadOutputs):
    z = out.cls_logits.data.reshape(-1)
    s = np.empty_like(z)
    pos = z >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    e = np.exp(z[~pos])
    s[~pos] = e / (1.0 + e)
    return s


def _rank_key(b: DetectionBox):
    """Canonical ordering: score descending, then box fields break ties."""
    return (-b.class_score, b.cx, b.cy, b.length, b.width, b.yaw)


def nms(boxes, iou_thresh=0.5):
    """Greedy suppression: drop any box overlapping a kept higher-ranked one."""
    kept = []
    for box in sorted(boxes, key=_rank_key):
        if all(bev_iou(box, other) <= iou_thresh for other in kept):
            kept.append(box)
    return kept


def detect(bev: BevQueries, head: DetHeadParams, grid: BevGrid,
           score_floor=0.3, nms_iou=0.5):
    """Decode per-cell predictions above score_floor, then suppress overlaps."""
    out = apply_head(bev, head, grid)
    scores = _score_np(out)
    cx, cy, length, width, yaw = (t.data for t in decode_box_tensors(out))
    boxes = [
        DetectionBox(cx=cx[i], cy=cy[i], length=length[i], width=width[i],
                     yaw=yaw[i], class_score=scores[i])
        for i in np.nonzero(scores > score_floor)[0]
    ]
    return nms(boxes, iou_thresh=nms_iou)


# --------------------------------------------------------------------- loss

def hungarian_match(cost):
    """Minimum-cost assignment on a rectangular cost matrix; returns row/col lists."""
    rows, cols = linear_sum_assignment(cost)
    return list(rows), list(cols)


def match_and_loss(preds: HeadOutputs, gts, pos_weight=10.0, box_weight=0.2):
    """Hungarian set loss for one scene.

    Assignment cost per (cell, gt): L1 center distance plus (1 - score).
    Loss: BCE over every cell's class logit (matched cells are positives,
    weighted by pos_weight) plus box_weight times the mean L1 error of
    the matched cells' decoded (cx, cy, length, width, yaw).

    Returns (loss, matches) with matches as (cell_idx, gt_idx) pairs.
    """
    n = preds.cls_logits.data.shape[0]
    cx, cy, length, width, yaw = decode_box_tensors(preds)
    for t in (cx, cy, length, width, yaw):
        if not np.isfinite(t.data).all():
            raise ValueError("non-finite decoded prediction; aborting match")
    targets = np.zeros(n)
    matches = []
    if gts:
        scores = _score_np(preds)
        gx = np.array([g.cx for g in gts])
        gy = np.array([g.cy for g in gts])
        dist = (np.abs(cx.data[:, None] - gx[None, :])
                + np.abs(cy.data[:, None] - gy[None, :]))
        cost = dist + (1.0 - scores)[:, None]
        rows, cols = hungarian_match(cost)
        matches = sorted(zip(rows, cols), key=lambda rc: rc[1])
        targets[[r for r, _ in matches]] = 1.0
    cls_loss = bce_with_logits(preds.cls_logits.reshape(n), targets,
                               pos_weight=pos_weight).mean()
    if not matches:
        return cls_loss, matches
    rows = np.array([r for r, _ in matches])
    order = [c for _, c in matches]
    g_vec = np.array([[gts[c].cx, gts[c].cy, gts[c].length, gts[c].width,
                       gts[c].yaw] for c in order])
    stacked = [index_rows(t.reshape(n, 1), rows) for t in (cx, cy, length, width, yaw)]
    pred_vec = concat(stacked, axis=1)
    box_loss = tabs(pred_vec - Tensor(g_vec)).mean()
    return cls_loss + box_weight * box_loss, matches


# --------------------------------------------------------------- evaluation

@dataclass
class EvalResult:
    ap: dict          # threshold -> AP
    tp: dict
    fp: dict
    fn: dict

    @property
    def mean_ap(self):
        if not self.ap:
            return 0.0
        return sum(self.ap.values()) / len(self.ap)


def _greedy_flags(preds_sorted, gts, better_idx):
    """TP flags by greedy matching in rank order.

    better_idx(pred, gts, taken) returns the index of the gt this pred
    matches, or None; a matched gt is consumed.
    """
    taken = [False] * len(gts)
    flags = []
    for p in preds_sorted:
        idx = better_idx(p, gts, taken)
        if idx is None:
            flags.append(False)
        else:
            taken[idx] = True
            flags.append(True)
    return flags


def _ap_from_flags(flags, n_gt):
    """All-point interpolated AP from per-rank TP flags.

    Sequential += accumulation; interpolated precision at rank i is the
    maximum precision at any rank >= i.
    """
    if n_gt == 0 or not flags:
        return 0.0
    prec, rec = [], []
    tp = 0
    fp = 0
    for flag in flags:
        if flag:
            tp += 1
        else:
            fp += 1
        prec.append(tp / (tp + fp))
        rec.append(tp / n_gt)
    p_int = list(prec)
    for i in range(len(p_int) - 2, -1, -1):
        p_int[i] = max(p_int[i], p_int[i + 1])
    ap = 0.0
    prev_r = 0.0
    for i in range(len(flags)):
        if rec[i] > prev_r:
            ap += (rec[i] - prev_r) * p_int[i]
            prev_r = rec[i]
    return ap


def _eval_generic(preds, gts, thresholds, match_rule) -> EvalResult:
    ranked = sorted(preds, key=_rank_key)
    ap, tp_d, fp_d, fn_d = {}, {}, {}, {}
    for thr in thresholds:
        flags = _greedy_flags(ranked, gts,
                              lambda p, g, taken: match_rule(p, g, taken, thr))
        ap[thr] = _ap_from_flags(flags, len(gts))
        tp_d[thr] = sum(flags)
        fp_d[thr] = len(flags) - sum(flags)
        fn_d[thr] = len(gts) - sum(flags)
    return EvalResult(ap=ap, tp=tp_d, fp=fp_d, fn=fn_d)


def eval_ap(preds, gts, thresholds=(0.5, 0.7)) -> EvalResult:
    """AP with match criterion IoU >= threshold.

    Each prediction, in canonical rank order, greedily claims the
    unmatched gt of highest IoU (ties to the lowest gt index) when that
    IoU clears the threshold.
    """

    def rule(p, gts_, taken, thr):
        best, best_iou = None, 0.0
        for i, g in enumerate(gts_):
            if taken[i]:
                continue
            iou = bev_iou(p, g)
            if iou > best_iou:
                best, best_iou = i, iou
        if best is not None and best_iou >= thr:
            return best
        return None

    return _eval_generic(preds, gts, thresholds, rule)


def eval_center_distance_ap(preds, gts, dist_thresholds=(0.5, 1.0, 2.0, 4.0)):
    """AP with match criterion Euclidean center distance <= threshold.

    Each prediction claims the nearest unmatched gt (ties to the lowest
    gt index) when that distance is within the threshold.
    """

    def rule(p, gts_, taken, thr):
        best, best_d = None, None
        for i, g in enumerate(gts_):
            if taken[i]:
                continue
            d = math.hypot(p.cx - g.cx, p.cy - g.cy)
            if best_d is None or d < best_d:
                best, best_d = i, d
        if best is not None and best_d <= thr:
            return best
        return None

    return _eval_generic(preds, gts, dist_thresholds, rule)
