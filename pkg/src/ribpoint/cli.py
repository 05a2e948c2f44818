"""Batch command-line front end.

Subcommands: synth, binarize, sample, train, infer, centerline, eval,
bench.  Every run writes its fully-resolved configuration and the tool
version next to its outputs (``run_config.json``).  Heavy imports happen
after thread setup so ``--threads`` can pin the BLAS pool.

Exit codes: 0 success, 2 usage error, 1 processing failure (with a
machine-readable JSON error record on stderr).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

VERSION = "0.1.0"

logger = logging.getLogger("ribpoint.cli")


def _setup_threads(threads: int) -> None:
    for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS",
                "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        os.environ[var] = str(threads)


def _setup_logging() -> None:
    level = os.environ.get("RIBPOINT_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def _load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    with open(path) as f:
        loaded = json.load(f)
    if not isinstance(loaded, dict):
        raise ValueError("config file must hold a JSON object")
    return loaded


def _resolve(defaults: dict, config: dict, args: argparse.Namespace) -> dict:
    """defaults < config file < explicit command-line flags."""
    resolved = dict(defaults)
    for key, value in config.items():
        if key not in defaults:
            raise ValueError(f"unknown config key {key!r}")
        resolved[key] = value
    for key in defaults:
        v = getattr(args, key, None)
        if v is not None:
            resolved[key] = v
    return resolved


def _write_run_config(out_dir: Path, command: str, resolved: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    record = {"command": command, "version": VERSION, "resolved": resolved}
    with open(out_dir / "run_config.json", "w") as f:
        json.dump(record, f, sort_keys=True, separators=(",", ":"))


def _canonical_dump(obj, path: Path) -> None:
    with open(path, "w") as f:
        json.dump(obj, f, sort_keys=True, separators=(",", ":"))


def _read_grid(path: str):
    from . import io
    p = Path(path)
    if p.suffix in (".nii", ".gz") or str(p).endswith(".nii.gz"):
        return io.import_nifti(p)
    return io.read_rvol(p)


# --- subcommands ---------------------------------------------------------

def cmd_synth(args) -> int:
    from .synth import PhantomConfig, generate_dataset
    defaults = {
        "train": 4, "dev": 1, "test": 1, "seed": 0,
        "dims": [256, 256, 256], "spacing": [1.0, 1.0, 1.0], "pairs": 12,
        "rib_radius_mm": 2.4, "vertebra_radius_mm": 9.0,
        "scapula_prob": 0.5, "implant_prob": 0.55, "table_prob": 0.35,
    }
    r = _resolve(defaults, _load_config_file(args.config), args)
    out = Path(args.out)
    base = PhantomConfig(dims=tuple(r["dims"]), spacing=tuple(r["spacing"]),
                         pairs=r["pairs"], rib_radius_mm=r["rib_radius_mm"],
                         vertebra_radius_mm=r["vertebra_radius_mm"])
    manifest = generate_dataset(r["train"], r["dev"], r["test"], r["seed"], out,
                                base_config=base,
                                scapula_prob=r["scapula_prob"],
                                implant_prob=r["implant_prob"],
                                table_prob=r["table_prob"])
    _write_run_config(out, "synth", r)
    n = sum(len(v) for v in manifest["splits"].values())
    print(f"wrote {n} cases to {out}")
    return 0


def cmd_binarize(args) -> int:
    from . import io
    from .pipeline import bone_mask
    defaults = {"threshold": 200, "remove_exterior": False}
    r = _resolve(defaults, _load_config_file(args.config), args)
    volume = _read_grid(args.input)
    mask = bone_mask(volume, raw=not r["remove_exterior"], threshold=r["threshold"])
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    io.write_rvol(mask, out)
    _write_run_config(out.parent, "binarize", {**r, "input": args.input,
                                               "out": str(out)})
    print(f"binarized {mask.count} voxels -> {out}")
    return 0


def cmd_sample(args) -> int:
    from .pipeline import bone_mask
    from .pointcloud import random_downsample, save_points, voxels_to_points
    defaults = {"n": 250000, "seed": 0, "raw": False, "threshold": 200}
    r = _resolve(defaults, _load_config_file(args.config), args)
    volume = _read_grid(args.input)
    bone = bone_mask(volume, raw=r["raw"], threshold=r["threshold"])
    pts = voxels_to_points(bone)
    if len(pts) == 0:
        raise ValueError("no foreground voxels to sample")
    sampled = random_downsample(pts, r["n"], seed=r["seed"])
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_points(sampled, out)
    _write_run_config(out.parent, "sample", {**r, "input": args.input,
                                             "out": str(out)})
    print(f"sampled {len(sampled)} points -> {out}")
    return 0


def _load_split_cases(data_dir: Path, split: str) -> list[Path]:
    with open(data_dir / "manifest.json") as f:
        manifest = json.load(f)
    return [data_dir / cid for cid in manifest["splits"][split]]


def _case_points(case_dir: Path, raw: bool, threshold: int):
    from . import io
    from .pipeline import bone_mask
    from .pointcloud import voxels_to_points
    volume = io.read_rvol(case_dir / "volume.rvol")
    labels = io.read_rvol(case_dir / "truth_labels.rvol")
    bone = bone_mask(volume, raw=raw, threshold=threshold)
    return voxels_to_points(bone, labels)


def cmd_train(args) -> int:
    from .checkpoint import save_checkpoint
    from .nn import default_network_config
    from .pointcloud import AugmentConfig
    from .training import TrainConfig, train
    defaults = {
        "seed": 0, "epochs": 250, "batch_size": 8, "points": 30000,
        "lr0": 1e-3, "decay": 0.5, "decay_every": 20, "lr_floor": 1e-5,
        "augment": True, "raw": False, "threshold": 200,
        "stop_dice": None, "use_dev": False, "net_seed": 0,
        "checkpoint_every": 50,
    }
    r = _resolve(defaults, _load_config_file(args.config), args)
    data_dir = Path(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    train_cases = _load_split_cases(data_dir, "train")
    logger.info("loading %d training cases", len(train_cases))
    dataset = [_case_points(c, r["raw"], r["threshold"]) for c in train_cases]
    val = None
    if r["use_dev"]:
        val = [_case_points(c, r["raw"], r["threshold"])
               for c in _load_split_cases(data_dir, "dev")]

    net_cfg = default_network_config(seed=r["net_seed"])
    tc = TrainConfig(epochs=r["epochs"], batch_size=r["batch_size"],
                     lr0=r["lr0"], decay=r["decay"], decay_every=r["decay_every"],
                     lr_floor=r["lr_floor"], points_per_sample=r["points"],
                     augment=AugmentConfig() if r["augment"] else None,
                     checkpoint_every=r["checkpoint_every"])

    def checkpoint_fn(model, epoch, tag):
        if tag == "periodic":
            save_checkpoint(model, out / f"checkpoint_epoch{epoch + 1:04d}.rckp")
        else:
            save_checkpoint(model, out / "checkpoint_best.rckp")

    model, history = train(dataset, net_cfg, tc, seed=r["seed"],
                           val_dataset=val, checkpoint_fn=checkpoint_fn,
                           stop_dice=r["stop_dice"])
    save_checkpoint(model, out / "checkpoint_final.rckp")
    _canonical_dump(history, out / "history.json")
    _write_run_config(out, "train", {**r, "data": str(data_dir)})
    print(f"trained {len(history)} epochs, final point dice "
          f"{history[-1]['train_dice']:.4f} -> {out / 'checkpoint_final.rckp'}")
    return 0


def cmd_infer(args) -> int:
    from . import io
    from .checkpoint import load_checkpoint
    from .pipeline import point_dice_against_truth, segment_volume
    from .pointcloud import save_points
    from .postprocess import instances_manifest, label_rib_instances
    defaults = {"points": 250000, "seed": 0, "dilate_radius": 2,
                "raw": False, "threshold": 200, "chunk": 65536,
                "instances": True}
    r = _resolve(defaults, _load_config_file(args.config), args)
    model = load_checkpoint(args.ckpt)
    volume = _read_grid(args.input)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    mask, pred_points, bone = segment_volume(
        model, volume, n_points=r["points"], seed=r["seed"], raw=r["raw"],
        threshold=r["threshold"], dilate_radius=r["dilate_radius"],
        chunk=r["chunk"])
    io.write_rvol(mask, out / "pred_mask.rvol")
    if len(pred_points):
        save_points(pred_points, out / "pred_points.rpts")
    if r["instances"]:
        label_map, inst = label_rib_instances(mask)
        io.write_rvol(label_map, out / "pred_instances.rvol")
        _canonical_dump(instances_manifest(inst), out / "pred_instances.json")
    metrics = {"predicted_voxels": mask.count, "sampled_points": len(pred_points)}
    if args.gt:
        gt = io.read_rvol(args.gt)
        metrics["dice_point"] = point_dice_against_truth(pred_points, gt)
    _canonical_dump(metrics, out / "infer_metrics.json")
    _write_run_config(out, "infer", {**r, "ckpt": str(args.ckpt),
                                     "input": args.input,
                                     "gt": args.gt})
    print(f"predicted {mask.count} voxels -> {out / 'pred_mask.rvol'}")
    return 0


def cmd_centerline(args) -> int:
    from . import io
    from .centerline import extract_centerline
    from .postprocess import label_rib_instances
    from .volume import LabelMap, StructuringElement
    defaults = {"dilate_radius": 3, "window": 5, "step": 2.0}
    r = _resolve(defaults, _load_config_file(args.config), args)
    grid = io.read_rvol(args.input)
    if isinstance(grid, LabelMap):
        from .metrics import _derive_pairs
        label_map = grid
        pair_map = _derive_pairs(grid)
        instances = [(k, pair_map.get(k, 0)) for k in range(1, grid.num_instances + 1)]
        sides = {}
    else:
        label_map, inst_list = label_rib_instances(grid)
        instances = [(i.instance_id, i.pair_index) for i in inst_list]
        sides = {i.instance_id: i.side for i in inst_list}
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    se = StructuringElement(r["dilate_radius"], "ball")
    ribs = []
    for inst_id, pair in instances:
        rib_mask = label_map.instance_mask(inst_id)
        if not rib_mask.bits.any():
            continue
        cl = extract_centerline(rib_mask, se, smooth_window=r["window"],
                                resample_step_mm=r["step"])
        ribs.append({
            "instance_id": inst_id,
            "side": sides.get(inst_id, ""),
            "pair_index": pair,
            "points_mm": [[float(c) for c in p] for p in cl.points],
            "arc_length_mm": cl.arc_length,
        })
    _canonical_dump({"case_id": Path(args.input).stem, "ribs": ribs}, out)
    _write_run_config(out.parent, "centerline", {**r, "input": args.input,
                                                 "out": str(out)})
    print(f"extracted {len(ribs)} centerlines -> {out}")
    return 0


def cmd_eval(args) -> int:
    from . import io
    from .metrics import canonical_json, dice, per_rib_recall, report_to_csv
    from .volume import BinaryMask, LabelMap
    r = _resolve({}, _load_config_file(args.config), args)
    pred = io.read_rvol(args.pred)
    gt = io.read_rvol(args.gt)
    if isinstance(pred, LabelMap):
        pred = pred.foreground()
    if not isinstance(gt, LabelMap):
        raise ValueError("--gt must be an instance label map")
    pair_index = None
    if args.meta:
        with open(args.meta) as f:
            meta = json.load(f)
        pair_index = {inst["id"]: inst["pair_index"] for inst in meta["instances"]}
    d = dice(gt.labels > 0, pred.bits)
    recall = per_rib_recall(gt, pred, pair_index)
    report = {
        "dice_voxel": d,
        "missing_ratio": recall.ratios,
        "per_rib": recall.to_json_dict(),
    }
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "eval_report.json", "w") as f:
        f.write(canonical_json(report))
    case = Path(args.pred).stem
    csv_text = report_to_csv({case: {"dice_voxel": d, **{f"missing_{k}": v
                                                         for k, v in recall.ratios.items()}}})
    (out / "eval_report.csv").write_text(csv_text)
    _write_run_config(out, "eval", {"pred": args.pred, "gt": args.gt,
                                    "meta": args.meta})
    print(canonical_json({"dice_voxel": round(d, 6),
                          "missing_ratio": recall.ratios}))
    return 0


def cmd_bench(args) -> int:
    import numpy as np

    from .checkpoint import load_checkpoint
    from .metrics import bench, canonical_json, dense_conv_baseline
    from .nn import default_network_config, infer, init_params
    from .pipeline import bone_mask
    from .pointcloud import normalize, random_downsample, voxels_to_points
    from .synth import PhantomConfig, generate_phantom
    defaults = {"repeats": 5, "points": 250000, "seed": 0, "kernels": True,
                "baseline_channels": 8}
    r = _resolve(defaults, _load_config_file(args.config), args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    if args.case:
        volume = _read_grid(args.case)
    else:
        volume, _ = generate_phantom(PhantomConfig(), seed=r["seed"])
    model = load_checkpoint(args.ckpt) if args.ckpt else \
        init_params(default_network_config(seed=r["seed"]))

    bone = bone_mask(volume, raw=False)
    pts = voxels_to_points(bone)
    normed, _t = normalize(pts)
    sampled = random_downsample(normed, r["points"], seed=r["seed"])
    vol_f32 = volume.data.astype(np.float32) / 1000.0

    stages = {
        "sparse_forward": lambda: infer(model, sampled),
        "dense_conv_baseline": lambda: dense_conv_baseline(
            vol_f32, channels=r["baseline_channels"], seed=r["seed"]),
    }
    counts = {
        "sparse_forward": {"points": len(sampled)},
        "dense_conv_baseline": {"voxels": int(volume.voxel_count),
                                "channels": r["baseline_channels"]},
    }
    report = bench(stages, repeats=r["repeats"], counts=counts,
                   threads=int(os.environ.get("OPENBLAS_NUM_THREADS", "0") or 0))
    payload = report.to_json_dict()
    sparse = payload["stages"]["sparse_forward"]["median_s"]
    dense = payload["stages"]["dense_conv_baseline"]["median_s"]
    payload["speedup_dense_over_sparse"] = dense / sparse if sparse > 0 else None

    if r["kernels"]:
        payload["kernel_backends"] = _bench_kernels(sampled.coords, r["repeats"])

    _canonical_dump(payload, out / "bench.json")
    _write_run_config(out, "bench", {**r, "case": args.case, "ckpt": args.ckpt})
    print(canonical_json({"sparse_forward_s": round(sparse, 4),
                          "dense_baseline_s": round(dense, 4),
                          "speedup": round(payload["speedup_dense_over_sparse"], 2)}))
    return 0


def _bench_kernels(coords, repeats: int) -> dict:
    """Compare the compiled and pure-Python kernel backends."""
    import numpy as np

    from . import kernels
    from .metrics import bench
    coords = np.ascontiguousarray(coords[:100000], dtype=np.float64)
    centers = coords[:512]
    out = {}
    for name, impl in kernels.available_backends().items():
        stages = {
            "fps_512": lambda impl=impl: kernels.farthest_point_sample(
                coords, 512, seed=1, impl=impl),
            "ball_query_512x32": lambda impl=impl: kernels.ball_query(
                centers, coords, 0.1, 32, impl=impl),
            "three_nn": lambda impl=impl: kernels.three_nn(
                coords, centers, 3, impl=impl),
        }
        rep = bench(stages, repeats=max(3, repeats))
        out[name] = {k: v["median_s"] for k, v in rep.stages.items()}
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ribpoint",
        description="Sparse point-cloud rib segmentation pipeline")
    parser.add_argument("--version", action="version", version=VERSION)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--threads", type=int, default=0,
                       help="BLAS/OpenMP threads (0 = library default)")
        p.add_argument("--config", default=None,
                       help="JSON file with parameter overrides")

    p = sub.add_parser("synth", help="generate a synthetic phantom dataset")
    common(p)
    p.add_argument("--train", type=int, default=None)
    p.add_argument("--dev", type=int, default=None)
    p.add_argument("--test", type=int, default=None)
    p.add_argument("--dims", type=_dims_arg, default=None,
                   help="volume dims as NX,NY,NZ")
    p.add_argument("--pairs", type=int, default=None)
    p.add_argument("--scapula-prob", dest="scapula_prob", type=float, default=None)
    p.add_argument("--implant-prob", dest="implant_prob", type=float, default=None)
    p.add_argument("--table-prob", dest="table_prob", type=float, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("binarize", help="threshold a volume to a bone mask")
    common(p)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--threshold", type=int, default=None)
    p.add_argument("--remove-exterior", dest="remove_exterior",
                   action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_binarize)

    p = sub.add_parser("sample", help="sample a point set from a volume")
    common(p)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--raw", action=argparse.BooleanOptionalAction, default=None,
                   help="sample from the plain threshold mask "
                        "(default: body-interior voxels)")
    p.add_argument("--threshold", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("train", help="train the segmentation network")
    common(p)
    p.add_argument("--data", required=True, help="dataset directory (manifest.json)")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--points", type=int, default=None)
    p.add_argument("--lr0", type=float, default=None)
    p.add_argument("--augment", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--use-dev", dest="use_dev",
                   action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--stop-dice", dest="stop_dice", type=float, default=None)
    p.add_argument("--net-seed", dest="net_seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="segment a volume with a checkpoint")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--points", type=int, default=None)
    p.add_argument("--dilate-radius", dest="dilate_radius", type=int, default=None)
    p.add_argument("--raw", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--gt", default=None, help="truth labels for point Dice")
    p.add_argument("--instances", action=argparse.BooleanOptionalAction,
                   default=None,
                   help="also write the anatomical instance label map")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("centerline", help="extract per-rib centerlines")
    common(p)
    p.add_argument("--in", dest="input", required=True,
                   help="instance label map or binary mask (.rvol)")
    p.add_argument("--dilate-radius", dest="dilate_radius", type=int, default=None)
    p.add_argument("--window", type=int, default=None)
    p.add_argument("--step", type=float, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_centerline)

    p = sub.add_parser("eval", help="Dice and missing-rib ratios")
    common(p)
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--meta", default=None,
                   help="case meta.json with instance pair indices")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="sparse vs dense timing comparison")
    common(p)
    p.add_argument("--case", default=None, help="volume to benchmark on "
                   "(default: built-in 256^3 phantom)")
    p.add_argument("--ckpt", default=None)
    p.add_argument("--repeats", type=int, default=None)
    p.add_argument("--points", type=int, default=None)
    p.add_argument("--kernels", action=argparse.BooleanOptionalAction,
                   default=None, help="include kernel backend comparison")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bench)

    return parser


def _dims_arg(text: str) -> list[int]:
    parts = [int(p) for p in text.split(",")]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("dims must be NX,NY,NZ")
    return parts


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    threads = getattr(args, "threads", 0)
    if not threads and args.command == "bench":
        threads = 1  # timed regions are single-threaded unless asked otherwise
    if threads:
        _setup_threads(threads)
    _setup_logging()
    try:
        return args.func(args)
    except Exception as exc:  # intentional catch-all: report and exit 1
        record = {"error": type(exc).__name__, "message": str(exc)}
        print(json.dumps(record, sort_keys=True), file=sys.stderr)
        logger.debug("failure detail", exc_info=True)
        return 1


if __name__ == "__main__":
    sys.exit(main())
