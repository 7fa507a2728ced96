"""Command-line pipeline: gen | train | infer | eval | compare.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
The MODMAP_THREADS environment variable caps internal worker counts.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import datagen, inference, metrics, tensorio, volume as vol
from .config import RunConfig
from .encoders import InstanceFeatures
from .model import build_model, load_checkpoint, save_checkpoint
from .nn import NumericError
from .training import train, train_multiclass


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


def _load_config(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "epochs", None) is not None:
        cfg.epochs = args.epochs
    if getattr(args, "subsample_k", None) is not None:
        cfg.subsample_k = args.subsample_k
    if getattr(args, "fuse", None) is not None:
        cfg.fuse = args.fuse
    if getattr(args, "multiclass", False):
        cfg.multiclass = True
    if getattr(args, "single_view", False):
        cfg.single_view = True
    if getattr(args, "dataset", None) is not None:
        cfg.dataset = args.dataset
    if getattr(args, "out", None) is not None:
        cfg.out = args.out
    return cfg


def _manifest(cfg: RunConfig) -> dict:
    root = Path(cfg.dataset)
    if not (root / datagen.MANIFEST_NAME).exists():
        raise DataError(f"no dataset manifest under {root}")
    return datagen.load_manifest(root)


def _categories(cfg: RunConfig, manifest: dict) -> list[dict]:
    cats = manifest["categories"]
    if cfg.categories:
        by_name = {c["name"]: c for c in cats}
        missing = [n for n in cfg.categories if n not in by_name]
        if missing:
            raise DataError(f"categories not in dataset: {missing}")
        cats = [by_name[n] for n in cfg.categories]
    return cats


def cmd_gen(cfg: RunConfig, force: bool = False) -> int:
    out = Path(cfg.dataset)
    if (out / datagen.MANIFEST_NAME).exists() and not force:
        raise UsageError(f"dataset already exists at {out}; pass --force to regenerate")
    classes = datagen.default_classes(cfg.seed, n_views=cfg.n_views, resolution=cfg.resolution)
    manifest = datagen.make_benchmark(
        out, seed=cfg.seed, classes=classes, grid_max_dim=cfg.grid_max_dim
    )
    cfg.write_resolved(out / "resolved_config.json")
    for cat in manifest["categories"]:
        n_train = sum(1 for i in cat["instances"] if i["split"] == "train")
        n_test = sum(1 for i in cat["instances"] if i["split"] == "test")
        n_def = sum(1 for i in cat["instances"] if i["label"] == 1)
        print(
            f"gen: {cat['name']}: {n_train} train + {n_test} test "
            f"({n_def} defective), {cat['n_views']} views @ {cat['resolution']}px"
        )
    return 0


def _train_sample(cfg: RunConfig, cat: dict) -> InstanceFeatures:
    inst_dir = Path(cfg.dataset) / cat["name"] / "train" / "train_000"
    if not inst_dir.exists():
        raise DataError(f"missing nominal training instance for {cat['name']}")
    views = datagen.load_instance(inst_dir, cat["n_views"])
    return InstanceFeatures.from_views(views, cfg.encoder_config())


def _write_history(path: Path, history: list[float]) -> None:
    with path.open("w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "mean_loss"])
        for k, loss in enumerate(history):
            writer.writerow([k, f"{loss:.8f}"])


def cmd_train(cfg: RunConfig) -> int:
    manifest = _manifest(cfg)
    cats = _categories(cfg, manifest)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.write_resolved(out / "resolved_config.json")
    enc = cfg.encoder_config()
    if cfg.multiclass:
        samples = [_train_sample(cfg, cat) for cat in cats]
        model = build_model(
            enc,
            n_views=cats[0]["n_views"],
            n_classes=len(cats),
            seed=cfg.seed,
            modulator_hidden=cfg.modulator_hidden,
            mapper_hidden_i2d=cfg.mapper_hidden_i2d,
            mapper_hidden_d2i=cfg.mapper_hidden_d2i,
        )
        history = train_multiclass(model, samples, cfg.train_config())
        save_checkpoint(out / "multiclass.ckpt", model, seed=cfg.seed)
        _write_history(out / "multiclass_loss.csv", history)
        print(f"train: multiclass over {len(cats)} classes, final loss {history[-1]:.5f}")
    else:
        for cat in cats:
            sample = _train_sample(cfg, cat)
            model = build_model(
                enc,
                n_views=cat["n_views"],
                seed=cfg.seed,
                modulator_hidden=cfg.modulator_hidden,
                mapper_hidden_i2d=cfg.mapper_hidden_i2d,
                mapper_hidden_d2i=cfg.mapper_hidden_d2i,
            )
            history = train(model, sample, cfg.train_config())
            save_checkpoint(out / f"{cat['name']}.ckpt", model, seed=cfg.seed)
            _write_history(out / f"{cat['name']}_loss.csv", history)
            print(f"train: {cat['name']}: final loss {history[-1]:.5f}")
    return 0


def _load_model_for(cfg: RunConfig, checkpoints: Path, cat_name: str, class_index_of: dict):
    if cfg.multiclass:
        path = checkpoints / "multiclass.ckpt"
        class_index = class_index_of[cat_name]
    else:
        path = checkpoints / f"{cat_name}.ckpt"
        class_index = None
    if not path.exists():
        raise DataError(f"missing checkpoint {path}")
    model, _ = load_checkpoint(path)
    if model.encoder_config != cfg.encoder_config():
        raise DataError(
            f"checkpoint encoder config {model.encoder_config} != run config {cfg.encoder_config()}"
        )
    return model, class_index


def infer_instance(
    model,
    views,
    grid: vol.GridSpec,
    cfg: RunConfig,
    class_index: int | None = None,
):
    """Maps, fused volume and instance score for one test instance."""
    features = InstanceFeatures.from_views(views, model.encoder_config)
    depths = [v.depth for v in views]
    maps = inference.infer_views(
        model,
        features,
        depths,
        subsample_k=cfg.subsample_k,
        seed=cfg.seed,
        single_view=cfg.single_view,
        class_index=class_index,
        tau_bg=cfg.tau_bg,
    )
    grid_vol = _volume_from_maps(maps, views, grid, model.encoder_config.patch_size, cfg.fuse)
    return maps, grid_vol, vol.instance_score(grid_vol)


def _volume_from_maps(maps, views, grid, patch_size, fuse):
    fused = [
        vol.fuse_modalities(maps.per_view_image[t], maps.per_view_depth[t], fuse)
        for t in range(maps.n_views)
    ]
    return vol.aggregate(
        fused, [v.depth for v in views], [v.calib for v in views], grid, patch_size
    )


def _write_instance_results(res_dir: Path, name: str, maps, grid_vol, score: float) -> None:
    res_dir.mkdir(parents=True, exist_ok=True)
    for t in range(maps.n_views):
        tensorio.write_tensor(res_dir / f"map_image_view_{t}.mmtf", maps.per_view_image[t])
        tensorio.write_tensor(res_dir / f"map_depth_view_{t}.mmtf", maps.per_view_depth[t])
        # Grayscale previews: linear [0, 2] -> [0, 255].
        tensorio.write_pgm(
            res_dir / f"preview_image_view_{t}.pgm", maps.per_view_image[t] / 2.0, maxval=255
        )
        tensorio.write_pgm(
            res_dir / f"preview_depth_view_{t}.pgm", maps.per_view_depth[t] / 2.0, maxval=255
        )
    tensorio.write_tensor(res_dir / "volume.mmtf", grid_vol.scores)
    tensorio.write_tensor(res_dir / "volume_hits.mmtf", grid_vol.hit_counts.astype(np.float32))
    with (res_dir / "volume.csv").open("w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["x", "y", "z", "score"])
        for x, y, z in np.argwhere(grid_vol.scores > 0):
            writer.writerow([x, y, z, f"{grid_vol.scores[x, y, z]:.8f}"])
    (res_dir / "score.txt").write_text(f"{name} {score:.8f}\n")


def cmd_infer(cfg: RunConfig, checkpoints: str, instance: str | None = None) -> int:
    manifest = _manifest(cfg)
    cats = _categories(cfg, manifest)
    class_index_of = {c["name"]: i for i, c in enumerate(manifest["categories"])}
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.write_resolved(out / "resolved_config.json")
    ckpt_dir = Path(checkpoints)
    for cat in cats:
        grid = vol.GridSpec.from_dict(cat["grid"])
        model, class_index = _load_model_for(cfg, ckpt_dir, cat["name"], class_index_of)
        if model.n_views != cat["n_views"]:
            raise DataError(
                f"checkpoint has {model.n_views} views, dataset {cat['n_views']}"
            )
        for inst in cat["instances"]:
            if inst["split"] != "test":
                continue
            name = f"{cat['name']}/{inst['id']}"
            if instance is not None and name != instance:
                continue
            views = datagen.load_instance(
                Path(cfg.dataset) / cat["name"] / "test" / inst["id"], cat["n_views"]
            )
            maps, grid_vol, score = infer_instance(model, views, grid, cfg, class_index)
            _write_instance_results(out / cat["name"] / inst["id"], name, maps, grid_vol, score)
            print(f"infer: {name}: score {score:.5f}")
    return 0


def _read_results(cfg: RunConfig, results: Path, cat: dict):
    """Scores, volumes and ground truth for every test instance of a category."""
    rows = []
    for inst in cat["instances"]:
        if inst["split"] != "test":
            continue
        res_dir = results / cat["name"] / inst["id"]
        score_file = res_dir / "score.txt"
        if not score_file.exists():
            raise DataError(f"missing inference result for {cat['name']}/{inst['id']}")
        score = float(score_file.read_text().split()[-1])
        scores = tensorio.read_tensor(res_dir / "volume.mmtf")
        hits = tensorio.read_tensor(res_dir / "volume_hits.mmtf").astype(np.int64)
        gt = (
            tensorio.read_tensor(
                Path(cfg.dataset) / cat["name"] / "test" / inst["id"] / "gt_volume.mmtf"
            )
            > 0.5
        )
        grid = vol.GridSpec.from_dict(cat["grid"])
        grid_vol = vol.VoxelGrid(spec=grid, scores=scores, hit_counts=hits)
        rows.append({"label": inst["label"], "score": score, "volume": grid_vol, "gt": gt})
    return rows


def category_metrics(cfg: RunConfig, results: Path, cat: dict) -> dict:
    rows = _read_results(cfg, results, cat)
    out = {"I-AUROC": metrics.auroc([r["score"] for r in rows], [r["label"] for r in rows])}
    volumes = [r["volume"] for r in rows]
    gts = [r["gt"] for r in rows]
    observed_scores = np.concatenate(
        [v.scores[v.hit_counts > 0].reshape(-1) for v in volumes]
    )
    thresholds = metrics.default_thresholds(observed_scores)
    curve = metrics.pooled_pro_curve(volumes, gts, thresholds)
    for limit in cfg.fpr_limits:
        out[f"V-AUPRO@{limit:g}"] = metrics.aupro_at(curve, limit)
    return out


_EVAL_NOTE = (
    "# unobserved voxels (no camera hit) are excluded from PRO region "
    "denominators and from both sides of the FPR"
)


def _write_metrics_csv(path: Path, per_cat: dict[str, dict]) -> None:
    names = list(per_cat)
    metric_names = list(next(iter(per_cat.values())))
    with path.open("w", newline="") as f:
        f.write(_EVAL_NOTE + "\n")
        writer = csv.writer(f)
        writer.writerow(["metric", *names, "mean"])
        for m in metric_names:
            vals = [per_cat[n][m] for n in names]
            writer.writerow([m, *(f"{v:.6f}" for v in vals), f"{np.mean(vals):.6f}"])


def cmd_eval(cfg: RunConfig, results: str, out_csv: str | None = None) -> int:
    manifest = _manifest(cfg)
    cats = _categories(cfg, manifest)
    results_dir = Path(results)
    per_cat = {cat["name"]: category_metrics(cfg, results_dir, cat) for cat in cats}
    path = Path(out_csv) if out_csv else results_dir / "metrics.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    _write_metrics_csv(path, per_cat)
    for name, vals in per_cat.items():
        print(f"eval: {name}: " + ", ".join(f"{k}={v:.4f}" for k, v in vals.items()))
    means = {
        k: float(np.mean([per_cat[n][k] for n in per_cat]))
        for k in next(iter(per_cat.values()))
    }
    print("eval: mean: " + ", ".join(f"{k}={v:.4f}" for k, v in means.items()))
    return 0


def cmd_compare(cfg: RunConfig, checkpoints: str, fuses: list[str], out_csv: str | None = None) -> int:
    """Re-aggregate the same anomaly maps under each fuse function."""
    manifest = _manifest(cfg)
    cats = _categories(cfg, manifest)
    class_index_of = {c["name"]: i for i, c in enumerate(manifest["categories"])}
    ckpt_dir = Path(checkpoints)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = {}
    for fuse in fuses:
        if fuse not in vol.FUSE_FUNCTIONS:
            raise UsageError(f"unknown fuse function {fuse!r}")
        rows[fuse] = {}
    for cat in cats:
        grid = vol.GridSpec.from_dict(cat["grid"])
        model, class_index = _load_model_for(cfg, ckpt_dir, cat["name"], class_index_of)
        per_fuse = {fuse: {"scores": [], "labels": [], "volumes": [], "gts": []} for fuse in fuses}
        for inst in cat["instances"]:
            if inst["split"] != "test":
                continue
            views = datagen.load_instance(
                Path(cfg.dataset) / cat["name"] / "test" / inst["id"], cat["n_views"]
            )
            features = InstanceFeatures.from_views(views, model.encoder_config)
            maps = inference.infer_views(
                model,
                features,
                [v.depth for v in views],
                subsample_k=cfg.subsample_k,
                seed=cfg.seed,
                class_index=class_index,
                tau_bg=cfg.tau_bg,
            )
            gt = (
                tensorio.read_tensor(
                    Path(cfg.dataset) / cat["name"] / "test" / inst["id"] / "gt_volume.mmtf"
                )
                > 0.5
            )
            for fuse in fuses:
                grid_vol = _volume_from_maps(
                    maps, views, grid, model.encoder_config.patch_size, fuse
                )
                per_fuse[fuse]["scores"].append(vol.instance_score(grid_vol))
                per_fuse[fuse]["labels"].append(inst["label"])
                per_fuse[fuse]["volumes"].append(grid_vol)
                per_fuse[fuse]["gts"].append(gt)
        for fuse in fuses:
            data = per_fuse[fuse]
            observed = np.concatenate(
                [v.scores[v.hit_counts > 0].reshape(-1) for v in data["volumes"]]
            )
            curve = metrics.pooled_pro_curve(
                data["volumes"], data["gts"], metrics.default_thresholds(observed)
            )
            rows[fuse][cat["name"]] = {
                "I-AUROC": metrics.auroc(data["scores"], data["labels"]),
                "V-AUPRO@0.01": metrics.aupro_at(curve, 0.01),
            }
    path = Path(out_csv) if out_csv else out / "compare.csv"
    cat_names = [c["name"] for c in cats]
    with path.open("w", newline="") as f:
        f.write(_EVAL_NOTE + "\n")
        writer = csv.writer(f)
        header = ["fuse"]
        for m in ("I-AUROC", "V-AUPRO@0.01"):
            header += [f"{m}:{n}" for n in cat_names] + [f"{m}:mean"]
        writer.writerow(header)
        for fuse in fuses:
            row = [fuse]
            for m in ("I-AUROC", "V-AUPRO@0.01"):
                vals = [rows[fuse][n][m] for n in cat_names]
                row += [f"{v:.6f}" for v in vals] + [f"{np.mean(vals):.6f}"]
            writer.writerow(row)
            print(f"compare: fuse={fuse}: " + ", ".join(
                f"{m}={np.mean([rows[fuse][n][m] for n in cat_names]):.4f}"
                for m in ("I-AUROC", "V-AUPRO@0.01")
            ))
    return 0


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="modmap", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON run config; flags override it")
        p.add_argument("--seed", type=int)
        p.add_argument("--dataset", help="dataset root directory")
        p.add_argument("--out", help="output directory")

    p = sub.add_parser("gen", help="generate the synthetic benchmark dataset")
    common(p)
    p.add_argument("--force", action="store_true", help="overwrite an existing dataset")

    p = sub.add_parser("train", help="train models on the nominal instances")
    common(p)
    p.add_argument("--epochs", type=int)
    p.add_argument("--multiclass", action="store_true")

    p = sub.add_parser("infer", help="write anomaly maps, volumes and scores")
    common(p)
    p.add_argument("--checkpoints", required=True, help="directory with .ckpt files")
    p.add_argument("--instance", help="restrict to one '<category>/<id>'")
    p.add_argument("--subsample-k", dest="subsample_k", type=int)
    p.add_argument("--fuse", choices=vol.FUSE_FUNCTIONS)
    p.add_argument("--multiclass", action="store_true")
    p.add_argument("--single-view", dest="single_view", action="store_true")

    p = sub.add_parser("eval", help="compute detection/segmentation metrics")
    common(p)
    p.add_argument("--results", required=True, help="directory written by infer")
    p.add_argument("--csv", help="metrics CSV path")

    p = sub.add_parser("compare", help="ablate the modality fuse function")
    common(p)
    p.add_argument("--checkpoints", required=True)
    p.add_argument("--fuse", default="max,min,product,mean", help="comma-separated list")
    p.add_argument("--subsample-k", dest="subsample_k", type=int)
    p.add_argument("--multiclass", action="store_true")
    p.add_argument("--csv", help="comparison CSV path")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = _load_config(args)
        if args.command == "gen":
            return cmd_gen(cfg, force=args.force)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "infer":
            return cmd_infer(cfg, checkpoints=args.checkpoints, instance=args.instance)
        if args.command == "eval":
            return cmd_eval(cfg, results=args.results, out_csv=args.csv)
        if args.command == "compare":
            return cmd_compare(
                cfg, checkpoints=args.checkpoints, fuses=args.fuse.split(","), out_csv=args.csv
            )
        raise UsageError(f"unknown command {args.command}")
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
