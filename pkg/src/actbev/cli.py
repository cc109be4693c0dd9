"""Batch entry points: scenes, training, evaluation, sweeps, reports.

Every command is a pure function of (config, inputs, seed): rerunning
it writes byte-identical outputs, with wall-clock timestamps confined
to the run manifest. Configuration is a single JSON file merged over
built-in defaults, then overridden by dotted-key --set arguments and
finally by the named flags, so the precedence is CLI > file > defaults.
Unknown keys and values that violate a module precondition are rejected
before any compute starts.

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 numerical
divergence during training.
"""

import argparse
import csv
import hashlib
import json
import os
import sys
import time

import numpy as np

from . import __version__
from .collab import SWEEP_COLUMNS, broadcast_poses, eval_scene_set, \
    evaluate_scene, run_sweep
from .geometry import BevGrid
from .numcore import Adam, load_checkpoint, make_rng, save_checkpoint
from .perception import ModelParams, apply_head, encode_bev, match_and_loss
from .selection import export_interest_maps
from .simworld import feature_stem, generate_scene, ground_truth, \
    load_scene, raycast_channels, save_scene

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_DIVERGED = 4


class ConfigError(ValueError):
    """Configuration rejected before any compute started."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite quantity."""


# ------------------------------------------------------------ configuration

DEFAULTS = {
    "seed": 0,
    "grid": {
        "h": 32, "w": 32,
        "x_range": [-12.8, 12.8], "y_range": [-12.8, 12.8],
        "z_refs": [0.0, 0.5, 1.0, 1.5],
    },
    "model": {"c": 32, "n_head": 2, "n_key": 2, "layers": 3},
    "selection": {"epsilon": 0.01, "c_pe": 64},
    "training": {
        "lr": 0.003, "steps": 150, "batch": 2,
        "gate_weight": 0.01, "gate_lr_mult": 3.0,
        "pos_weight": 10.0, "box_weight": 0.2,
    },
    "eval": {"score_floor": 0.3, "nms_iou": 0.5},
    "sweep": {"n_max": 5, "scenes": 10},
    "scenes": {
        "train": 60, "val": 10, "test": 10,
        "n_objects": 6, "n_agents": 5, "cams_per_agent": 2,
        "layout": "intersection", "world_half": 10.0,
        "min_agent_dist": 4.0,
        "feat_size": 32, "fov_deg": 90.0,
    },
    "paths": {"out": "runs/latest", "scenes": "scenes"},
}


def _merge(defaults, given, prefix=""):
    """Defaults overlaid with given values; unknown keys are rejected."""
    out = {}
    for key, base in defaults.items():
        if key in given:
            val = given[key]
            if isinstance(base, dict):
                if not isinstance(val, dict):
                    raise ConfigError(f"section {prefix}{key} must be a table")
                out[key] = _merge(base, val, prefix=f"{prefix}{key}.")
            else:
                out[key] = val
        else:
            out[key] = dict(base) if isinstance(base, dict) else base
    unknown = sorted(set(given) - set(defaults))
    if unknown:
        raise ConfigError(f"unknown config keys: "
                          f"{[prefix + k for k in unknown]}")
    return out


def _require(cond, message):
    if not cond:
        raise ConfigError(message)


def _validate(v):
    """Check every module precondition the config feeds into."""
    _require(isinstance(v["seed"], int) and v["seed"] >= 0,
             "seed must be a nonnegative integer")
    g = v["grid"]
    _require(int(g["h"]) >= 1 and int(g["w"]) >= 1,
             "grid must have at least one cell per axis")
    for rng_key in ("x_range", "y_range"):
        r = g[rng_key]
        _require(len(r) == 2 and r[0] < r[1],
                 f"grid.{rng_key} must be an increasing pair")
    _require(len(g["z_refs"]) >= 1, "grid.z_refs must not be empty")
    m = v["model"]
    _require(m["c"] >= 1 and m["n_head"] >= 1 and m["n_key"] >= 1
             and m["layers"] >= 1, "model dims must be positive")
    _require(m["c"] % m["n_head"] == 0,
             "model.c must divide evenly across heads")
    s = v["selection"]
    _require(0.0 <= s["epsilon"] < 1.0, "selection.epsilon must lie in [0,1)")
    _require(s["c_pe"] >= 1, "selection.c_pe must be positive")
    t = v["training"]
    _require(t["lr"] > 0.0, "training.lr must be positive")
    _require(int(t["steps"]) >= 0, "training.steps must be nonnegative")
    _require(int(t["batch"]) >= 1, "training.batch must be positive")
    _require(t["gate_weight"] >= 0.0 and t["gate_lr_mult"] > 0.0
             and t["pos_weight"] > 0.0 and t["box_weight"] >= 0.0,
             "training weights must be positive")
    e = v["eval"]
    _require(0.0 <= e["score_floor"] <= 1.0,
             "eval.score_floor must lie in [0,1]")
    _require(0.0 < e["nms_iou"] <= 1.0, "eval.nms_iou must lie in (0,1]")
    w = v["sweep"]
    _require(int(w["n_max"]) >= 1 and int(w["scenes"]) >= 1,
             "sweep sizes must be positive")
    sc = v["scenes"]
    _require(all(int(sc[k]) >= 1 for k in ("train", "val", "test")),
             "split sizes must be positive")
    _require(int(sc["n_objects"]) >= 1 and int(sc["n_agents"]) >= 1,
             "scene counts must be positive")
    _require(1 <= int(sc["cams_per_agent"]) <= 6,
             "cams_per_agent must lie in 1..6")
    _require(sc["layout"] in ("grid", "intersection"),
             "layout must be grid or intersection")
    _require(sc["world_half"] > 0.0, "world_half must be positive")
    _require(sc["min_agent_dist"] >= 0.0, "min_agent_dist must be nonnegative")
    _require(int(sc["feat_size"]) >= 2, "feat_size must be at least 2")
    _require(0.0 < sc["fov_deg"] < 180.0, "fov_deg must lie in (0,180)")


def _parse_override(text):
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not key.path=value")
    dotted, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return dotted.strip(), value


def _apply_override(values, dotted, value):
    parts = dotted.split(".")
    node = values
    for part in parts[:-1]:
        if part not in node or not isinstance(node[part], dict):
            raise ConfigError(f"unknown config key {dotted!r}")
        node = node[part]
    leaf = parts[-1]
    if leaf not in node or isinstance(node[leaf], dict):
        raise ConfigError(f"unknown config key {dotted!r}")
    node[leaf] = value


class RunConfig:
    """Validated configuration; the hash keys every artifact to its run."""

    def __init__(self, values):
        self.values = values

    def __getitem__(self, dotted):
        node = self.values
        for part in dotted.split("."):
            node = node[part]
        return node

    @property
    def hash(self):
        canonical = json.dumps(self.values, sort_keys=True,
                               separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()

    @staticmethod
    def build(config_path=None, overrides=()):
        given = {}
        if config_path is not None:
            try:
                with open(config_path) as fh:
                    given = json.load(fh)
            except json.JSONDecodeError as err:
                raise ConfigError(f"config file is not valid JSON: {err}")
        values = _merge(DEFAULTS, given)
        for dotted, value in overrides:
            _apply_override(values, dotted, value)
        _validate(values)
        return RunConfig(values)


class RunManifest:
    """What a command produced: config hash, code version, files, clock."""

    def __init__(self, config: RunConfig, command):
        self.config_hash = config.hash
        self.seed = config["seed"]
        self.command = command
        self.started = time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime())
        self.outputs = []

    def write(self, out_dir):
        doc = {
            "command": self.command,
            "config_hash": self.config_hash,
            "code_version": __version__,
            "seed": self.seed,
            "started": self.started,
            "finished": time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime()),
            "outputs": sorted(os.path.relpath(p, out_dir)
                              for p in self.outputs),
        }
        path = os.path.join(out_dir, "run_manifest.json")
        with open(path, "w") as fh:
            json.dump(doc, fh, indent=1, sort_keys=True)
        return path


def thread_cap():
    """Worker cap from ACTBEV_THREADS; 1 (serial) when unset or bad."""
    try:
        return max(1, int(os.environ.get("ACTBEV_THREADS", "1")))
    except ValueError:
        return 1


# ------------------------------------------------------------ shared pieces

def grid_from_config(config: RunConfig) -> BevGrid:
    g = config["grid"]
    return BevGrid(int(g["h"]), int(g["w"]),
                   tuple(g["x_range"]), tuple(g["y_range"]),
                   tuple(g["z_refs"]))


def model_from_config(config: RunConfig) -> ModelParams:
    m = config["model"]
    return ModelParams.create(
        make_rng(config["seed"]), grid_from_config(config),
        c=int(m["c"]), n_head=int(m["n_head"]), n_key=int(m["n_key"]),
        n_layers=int(m["layers"]), c_pe=int(config["selection.c_pe"]))


def _split_seed(config, split, index):
    base = config["seed"] * 1_000_000
    offset = {"train": 0, "val": 100_000, "test": 200_000}[split]
    return base + offset + index


def _split_dir(config, split):
    return os.path.join(config["paths.scenes"], split)


def load_split(config, split, limit=None):
    """Scenes of one split, in file order; missing dir raises OSError."""
    split_dir = _split_dir(config, split)
    names = sorted(n for n in os.listdir(split_dir) if n.endswith(".json"))
    if limit is not None:
        names = names[:limit]
    return [load_scene(os.path.join(split_dir, n)) for n in names]


def _fmt(value):
    if isinstance(value, float):
        return f"{value:.17g}"
    return str(value)


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])
    return path


def _write_json(path, doc):
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
    return path


# ----------------------------------------------------------------- scenes

def cmd_gen_scenes(config: RunConfig, manifest: RunManifest):
    sc = config["scenes"]
    for split in ("train", "val", "test"):
        split_dir = _split_dir(config, split)
        os.makedirs(split_dir, exist_ok=True)
        for i in range(int(sc[split])):
            try:
                scene = generate_scene(
                    seed=_split_seed(config, split, i),
                    n_objects=int(sc["n_objects"]),
                    n_agents=int(sc["n_agents"]),
                    cams_per_agent=int(sc["cams_per_agent"]),
                    layout=sc["layout"], world_half=sc["world_half"],
                    min_agent_dist=sc["min_agent_dist"],
                    feat_size=int(sc["feat_size"]), fov_deg=sc["fov_deg"])
            except ValueError as exc:
                # crowded geometry (too many agents for the world size)
                # is a configuration problem, not a crash
                raise ConfigError(str(exc)) from exc
            path = os.path.join(split_dir, f"scene_{i:04d}.json")
            save_scene(scene, path)
            manifest.outputs.append(path)
    return config["paths.scenes"]


# ---------------------------------------------------------------- training

def _scene_statics(scene, grid):
    """Raycasts, projections, and ground truth: fixed across steps."""
    table = broadcast_poses(scene)
    ego = table.agent_ids[0]
    rel = table.relative(ego)
    rigs = table.all_rigs()
    raws = [raycast_channels(scene, rig) for rig in rigs]
    from .geometry import ProjectionCache
    cache = ProjectionCache.build(grid, rigs, rel)
    gts = ground_truth(scene, ego, bev_half=grid.half_range)
    return {"rigs": rigs, "rel": rel, "raws": raws, "cache": cache,
            "gts": gts}


def _gate_term(res):
    terms = [sm.flat().mean() for maps in res.interest if maps is not None
             for _, sm in sorted(maps.items())]
    if not terms:
        return None
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total * (1.0 / len(terms))


def train_model(config: RunConfig, scenes, baseline=False):
    """Adam training loop; returns (model, loss rows).

    The gated arm multiplies attention by interest scores and adds a
    sparsity pressure on their mean; the dense arm runs the same model
    with gating off, from an identical initialization (same seed), so
    the two are comparable run for run. Non-finite losses abort.
    """
    if not scenes:
        raise ConfigError("training needs at least one scene")
    t = config["training"]
    grid = grid_from_config(config)
    model = model_from_config(config)
    named = model.named()
    lr_mults = {f"layer{i}.gate": t["gate_lr_mult"]
                for i in range(int(config["model.layers"]))}
    opt = Adam(named, lr=t["lr"], lr_mults=lr_mults if not baseline else None)
    statics = [_scene_statics(scene, grid) for scene in scenes]
    order = make_rng(config["seed"] + 7919)
    rows = []
    gating = "dense" if baseline else "learned"
    with np.errstate(over="ignore", invalid="ignore"):
        for step in range(int(t["steps"])):
            picks = order.integers(0, len(scenes), size=int(t["batch"]))
            total, det_val, gate_val = None, 0.0, 0.0
            for idx in picks.tolist():
                st = statics[idx]
                fmaps = {}
                for raw in st["raws"]:
                    fm = feature_stem(raw, model.stem)
                    fmaps[fm.key] = fm
                res = encode_bev(fmaps, st["rigs"], st["rel"], model,
                                 mode="train", gating=gating,
                                 cache=st["cache"])
                out = apply_head(res.bev, model.head, grid)
                try:
                    loss, _ = match_and_loss(
                        out, st["gts"], pos_weight=t["pos_weight"],
                        box_weight=t["box_weight"])
                except ValueError as err:
                    raise DivergenceError(
                        f"step {step}: {err}") from err
                det_val += loss.item()
                if not baseline:
                    gate = _gate_term(res)
                    if gate is not None:
                        loss = loss + gate * t["gate_weight"]
                        gate_val += gate.item()
                total = loss if total is None else total + loss
            total = total * (1.0 / len(picks))
            value = total.item()
            if not np.isfinite(value):
                raise DivergenceError(
                    f"step {step}: loss {value} "
                    f"(detection {det_val}, gate mean {gate_val})")
            opt.zero_grad()
            total.backward()
            opt.step()
            rows.append((step, value, det_val / len(picks),
                         gate_val / len(picks)))
    return model, rows


def cmd_train(config: RunConfig, manifest: RunManifest, baseline=False):
    out_dir = config["paths.out"]
    os.makedirs(out_dir, exist_ok=True)
    scenes = load_split(config, "train")
    arms = [("gated", False)] + ([("dense", True)] if baseline else [])
    for name, dense in arms:
        model, rows = train_model(config, scenes, baseline=dense)
        ckpt = os.path.join(out_dir, f"checkpoint_{name}.json")
        save_checkpoint(model.named(), ckpt)
        log = _write_csv(os.path.join(out_dir, f"loss_{name}.csv"),
                         ("step", "loss", "detection", "gate_mean"), rows)
        manifest.outputs.extend([ckpt, log])
    return out_dir


# -------------------------------------------------------------- evaluation

def _load_model_checkpoint(config, checkpoint_path):
    model = model_from_config(config)
    try:
        load_checkpoint(checkpoint_path, model.named())
    except ValueError as err:
        raise ConfigError(f"incompatible checkpoint: {err}") from err
    return model


def _default_checkpoint(config):
    return os.path.join(config["paths.out"], "checkpoint_gated.json")


def cmd_eval(config: RunConfig, manifest: RunManifest, checkpoint=None):
    out_dir = config["paths.out"]
    os.makedirs(out_dir, exist_ok=True)
    model = _load_model_checkpoint(
        config, checkpoint or _default_checkpoint(config))
    scenes = load_split(config, "test")
    if not scenes:
        raise ConfigError("evaluation needs at least one scene")
    eps = config["selection.epsilon"]
    floor = config["eval.score_floor"]
    ap50, ap70, cd_map, report = eval_scene_set(
        scenes, model, epsilon=eps, score_floor=floor,
        workers=thread_cap())
    pose_bytes = sum(broadcast_poses(s).payload_bytes for s in scenes)
    doc = {
        "ap50": ap50, "ap70": ap70, "cd_map": cd_map,
        "comm": {
            "n_ori": report.n_ori, "n_act": report.n_act,
            "p_ratio": report.p_ratio, "bytes_up": report.bytes_up,
            "bytes_down": report.bytes_down,
            "unique_cells": report.unique_cells,
        },
        "pose_bytes": pose_bytes,
        "n_scenes": len(scenes),
        "epsilon": eps,
    }
    metrics = _write_json(os.path.join(out_dir, "metrics.json"), doc)
    manifest.outputs.append(metrics)
    maps_dir = os.path.join(out_dir, "interest_maps")
    first = evaluate_scene(scenes[0], model, epsilon=eps,
                           score_floor=floor)
    for li, maps in enumerate(first["encode"].interest):
        if maps is None:
            continue
        manifest.outputs.extend(export_interest_maps(maps, li, maps_dir))
    manifest.outputs.append(os.path.join(maps_dir, "manifest.json"))
    return metrics


# ------------------------------------------------------------------- sweep

def cmd_sweep(config: RunConfig, manifest: RunManifest, checkpoint=None):
    out_dir = config["paths.out"]
    os.makedirs(out_dir, exist_ok=True)
    model = _load_model_checkpoint(
        config, checkpoint or _default_checkpoint(config))
    scenes = load_split(config, "test", limit=int(config["sweep.scenes"]))
    if not scenes:
        raise ConfigError("sweep needs at least one scene")
    try:
        sweep = run_sweep(scenes, model, epsilon=config["selection.epsilon"],
                          n_max=int(config["sweep.n_max"]),
                          score_floor=config["eval.score_floor"],
                          workers=thread_cap())
    except ValueError as err:
        raise ConfigError(str(err)) from err
    csv_path = sweep.to_csv(os.path.join(out_dir, "sweep.csv"))
    json_path = sweep.to_json(os.path.join(out_dir, "sweep.json"))
    plot_rows = [(n, sweep.rows[n].report.p_ratio * 100.0,
                  sweep.rows[n].ap50, sweep.rows[n].ap70)
                 for n in sorted(sweep.rows)]
    plot_path = _write_csv(os.path.join(out_dir, "plot_data.csv"),
                           ("n_car", "pct_queries", "ap50", "ap70"),
                           plot_rows)
    manifest.outputs.extend([csv_path, json_path, plot_path])
    return csv_path


# ------------------------------------------------------------------ report

def cmd_report(config: RunConfig, manifest: RunManifest):
    out_dir = config["paths.out"]
    lines = [
        "# Run report",
        "",
        f"- config hash: {config.hash}",
        f"- code version: {__version__}",
        f"- seed: {config['seed']}",
        "",
    ]
    metrics_path = os.path.join(out_dir, "metrics.json")
    sweep_path = os.path.join(out_dir, "sweep.csv")
    found = False
    if os.path.exists(metrics_path):
        found = True
        with open(metrics_path) as fh:
            doc = json.load(fh)
        lines += [
            "## Detection metrics",
            "",
            f"- AP@0.5: {_fmt(doc['ap50'])}",
            f"- AP@0.7: {_fmt(doc['ap70'])}",
            f"- center-distance mAP: {_fmt(doc['cd_map'])}",
            f"- active ratio: {_fmt(doc['comm']['p_ratio'])}",
            f"- bytes up/down: {doc['comm']['bytes_up']}"
            f"/{doc['comm']['bytes_down']}",
            "",
        ]
    if os.path.exists(sweep_path):
        found = True
        with open(sweep_path) as fh:
            rows = [line.strip() for line in fh if line.strip()]
        lines += ["## Agent-count sweep", ""]
        lines += [f"    {row}" for row in rows]
        lines.append("")
    if not found:
        raise FileNotFoundError(
            f"nothing to report: neither {metrics_path} nor {sweep_path}")
    path = os.path.join(out_dir, "report.md")
    with open(path, "w") as fh:
        fh.write("\n".join(lines))
    manifest.outputs.append(path)
    return path


# -------------------------------------------------------------------- main

def _build_parser():
    parser = argparse.ArgumentParser(
        prog="actbev",
        description="Active query selection for multi-agent BEV perception")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH",
                        help="JSON config file merged over defaults")
    common.add_argument("--set", action="append", default=[],
                        metavar="KEY.PATH=VALUE", dest="sets",
                        help="dotted-key config override (repeatable)")
    common.add_argument("--seed", type=int, help="override config seed")
    common.add_argument("--out", help="override paths.out")
    common.add_argument("--epsilon", type=float,
                        help="override selection.epsilon")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-scenes", parents=[common],
                   help="write train/val/test scene splits")
    train = sub.add_parser("train", parents=[common],
                           help="train the gated model")
    train.add_argument("--baseline", action="store_true",
                       help="also train the dense baseline, same seed")
    for name in ("eval", "sweep"):
        p = sub.add_parser(name, parents=[common])
        p.add_argument("--checkpoint", metavar="PATH",
                       help="checkpoint to evaluate "
                            "(default: <out>/checkpoint_gated.json)")
        if name == "sweep":
            p.add_argument("--n-max", type=int, help="override sweep.n_max")
    sub.add_parser("report", parents=[common],
                   help="summarize metrics and sweep files under --out")
    return parser


def _config_from_args(args):
    overrides = [_parse_override(s) for s in args.sets]
    if args.seed is not None:
        overrides.append(("seed", args.seed))
    if args.out is not None:
        overrides.append(("paths.out", args.out))
    if args.epsilon is not None:
        overrides.append(("selection.epsilon", args.epsilon))
    if getattr(args, "n_max", None) is not None:
        overrides.append(("sweep.n_max", args.n_max))
    return RunConfig.build(args.config, overrides)


def main(argv=None):
    args = _build_parser().parse_args(argv)
    try:
        config = _config_from_args(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    manifest = RunManifest(config, args.command)
    try:
        if args.command == "gen-scenes":
            target = cmd_gen_scenes(config, manifest)
            manifest_dir = config["paths.scenes"]
        elif args.command == "train":
            target = cmd_train(config, manifest, baseline=args.baseline)
            manifest_dir = config["paths.out"]
        elif args.command == "eval":
            target = cmd_eval(config, manifest, checkpoint=args.checkpoint)
            manifest_dir = config["paths.out"]
        elif args.command == "sweep":
            target = cmd_sweep(config, manifest, checkpoint=args.checkpoint)
            manifest_dir = config["paths.out"]
        else:
            target = cmd_report(config, manifest)
            manifest_dir = config["paths.out"]
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as err:
        print(f"diverged: {err}", file=sys.stderr)
        return EXIT_DIVERGED
    except OSError as err:
        print(f"i/o error: {err}", file=sys.stderr)
        return EXIT_IO
    manifest.write(manifest_dir)
    print(f"{args.command}: wrote {target}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
