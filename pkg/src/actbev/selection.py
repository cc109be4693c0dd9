"""Pose-conditioned interest scoring and the gate that prunes query exchange.

Every (query cell, camera) pair gets a score in (0,1): the query feature
(plus positional embedding) is concatenated with a linear embedding of
the camera-from-ego transform chain and pushed through a two-layer MLP
with a sigmoid. Training multiplies attention contributions by the
score; inference keeps only pairs whose score clears a threshold
epsilon, which is where the communication savings come from.

Scores are recomputed at every selective-attention layer from that
layer's query features, each layer with its own scoring parameters.
"""

import csv
import json
import os
from dataclasses import dataclass

import numpy as np

from .attention import BevQueries
from .geometry import HomTransform
from .numcore import LinearParams, Tensor, concat, index_rows, linear, mlp2, sigmoid

TRANSLATION_IDX = (3, 7, 11)  # translation slots of a row-major flat 4x4


@dataclass
class PoseEmbedding:
    vec: Tensor


class SelectionParams:
    """pe_linear: 16 -> C_pe; mlp: (C + C_pe) -> C -> 1.

    Hidden width equals the query width; the output is a single logit.
    """

    def __init__(self, pe_linear: LinearParams, mlp1: LinearParams,
                 mlp2_: LinearParams):
        if mlp2_.weight.data.shape[0] != 1:
            raise ValueError("interest head must end in one logit")
        self.pe_linear = pe_linear
        self.mlp1 = mlp1
        self.mlp2 = mlp2_

    @staticmethod
    def create(rng, c, c_pe=256):
        pe_linear = LinearParams.create(rng, 16, c_pe)
        mlp1 = LinearParams.create(rng, c + c_pe, c)
        mlp2_ = LinearParams.create(rng, c, 1)
        return SelectionParams(pe_linear, mlp1, mlp2_)

    def named(self, prefix):
        out = {}
        out.update(self.pe_linear.named(f"{prefix}.pe"))
        out.update(self.mlp1.named(f"{prefix}.mlp1"))
        out.update(self.mlp2.named(f"{prefix}.mlp2"))
        return out


@dataclass
class InterestScoreMap:
    """Scores for one camera over the whole grid, (H, W) in [0,1]."""
    car_id: int
    cam_id: int
    scores: Tensor

    def __post_init__(self):
        s = self.scores.data
        if s.min() < 0.0 or s.max() > 1.0:
            raise ValueError("interest scores must lie in [0,1]")

    @property
    def key(self):
        return (self.car_id, self.cam_id)

    def flat(self):
        h, w = self.scores.data.shape
        return self.scores.reshape(h * w)


@dataclass
class ActiveMask:
    """Per (cell, camera) keep/skip decisions at one epsilon."""
    epsilon: float
    masks: dict  # (car_id, cam_id) -> (H, W) bool array

    def flat(self):
        return {key: m.reshape(-1) for key, m in self.masks.items()}

    def n_true(self):
        return sum(int(m.sum()) for m in self.masks.values())


def pose_embed(t: HomTransform, params: SelectionParams,
               half_range=51.2) -> PoseEmbedding:
    """Linear embedding of the flattened transform.

    Translation entries are divided by the BEV half-range first so they
    share scale with the rotation entries; raw meters would dominate the
    embedding and stall gate learning.
    """
    flat = t.flat()
    for i in TRANSLATION_IDX:
        flat[i] = flat[i] / half_range
    vec = linear(Tensor(flat), params.pe_linear)
    return PoseEmbedding(vec=vec)


def interest_scores(q: BevQueries, chains: dict, params: SelectionParams,
                    half_range=51.2) -> dict:
    """One InterestScoreMap per camera from the current query features.

    chains maps (car_id, cam_id) to the camera-from-ego transform; ego's
    own cameras are scored too, since pruning applies to every pair.
    """
    h, w, c = q.grid.data.shape
    n = h * w
    qpos = q.flat() + q.flat_pos()
    rows = np.zeros(n, dtype=np.int64)
    out = {}
    for key in sorted(chains):
        pe = pose_embed(chains[key], params, half_range=half_range)
        c_pe = pe.vec.data.shape[0]
        tiled = index_rows(pe.vec.reshape(1, c_pe), rows)
        logits = mlp2(concat([qpos, tiled], axis=1), params.mlp1, params.mlp2)
        scores = sigmoid(logits).reshape(h, w)
        out[key] = InterestScoreMap(car_id=key[0], cam_id=key[1], scores=scores)
    return out


def gate(scores: dict, epsilon: float) -> ActiveMask:
    """Keep pairs scoring strictly above epsilon; ties are pruned."""
    if not (0.0 <= epsilon < 1.0):
        raise ValueError("epsilon must lie in [0, 1)")
    masks = {key: m.scores.data > epsilon for key, m in scores.items()}
    return ActiveMask(epsilon=epsilon, masks=masks)


def combined_car_maps(scores: dict):
    """Per-car display maps: camera maps summed then clipped to [0,1]."""
    by_car = {}
    for key, sm in sorted(scores.items()):
        car = key[0]
        if car not in by_car:
            by_car[car] = (np.array(sm.scores.data), [key[1]])
        else:
            acc, cams = by_car[car]
            by_car[car] = (acc + sm.scores.data, cams + [key[1]])
    return {car: (np.clip(acc, 0.0, 1.0), cams)
            for car, (acc, cams) in by_car.items()}


def export_interest_maps(scores: dict, layer_idx: int, out_dir):
    """Write per-car maps for one layer as CSV grids plus a manifest.

    Cameras of the same car are summed and clipped for display. Repeated
    calls for other layers extend the manifest; re-exporting a layer
    replaces its entries. Returns the written map paths.
    """
    os.makedirs(out_dir, exist_ok=True)
    manifest_path = os.path.join(out_dir, "manifest.json")
    entries = []
    if os.path.exists(manifest_path):
        with open(manifest_path) as fh:
            entries = json.load(fh)["maps"]
        entries = [e for e in entries if e["layer"] != layer_idx]
    paths = []
    for car, (grid_vals, cams) in sorted(combined_car_maps(scores).items()):
        name = f"layer{layer_idx}_car{car}.csv"
        path = os.path.join(out_dir, name)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            for row in grid_vals:
                writer.writerow([f"{v:.17g}" for v in row])
        entries.append({"layer": layer_idx, "car": car, "cameras": cams,
                        "file": name})
        paths.append(path)
    entries.sort(key=lambda e: (e["layer"], e["car"]))
    with open(manifest_path, "w") as fh:
        json.dump({"maps": entries}, fh, indent=1)
    return paths


def read_interest_map(path):
    """Read back one exported CSV grid."""
    with open(path, newline="") as fh:
        return np.array([[float(v) for v in row] for row in csv.reader(fh)])
