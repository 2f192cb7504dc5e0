"""Command-line entry point: ``flatsplat <command> [options]``.

Exit codes: 0 success, 2 invalid input or configuration, 3 numerical
failure, 4 file-system problems.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import gradcheck as gc
from .config import AblationSpec, RunConfig, build_experiment, make_anchors, make_scene, with_mode
from .errors import ConfigError, ContractError, FlatsplatError, IoError, NumericsError, ShapeError
from .imageio import read_f64, write_f64, write_ppm
from .metrics import MetricReport
from .orchestrator import (GroundTruthModel, encode_merged, evaluate, load_model, run, seam_discrepancy)
from .scene import assign_views, build_dataset, load_scene, partition, save_scene, scene_to_dict

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4
OUTPUT_ROOT_ENV = "FLATSPLAT_OUTPUT_ROOT"


# ---------------------------------------------------------------------------
# helpers


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _overrides(pairs) -> dict:
    out = {}
    for item in pairs or []:
        key, sep, val = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        out[key.strip()] = _parse_value(val)
    return out


def load_config(args) -> RunConfig:
    """Config from --config, else the copy stored in the output dir, else defaults;
    then --set overrides."""
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise IoError(f"config file not found: {path}", path)
        cfg = RunConfig.load(path)
    else:
        stored = _out_dir(RunConfig(), args) / "config.json"
        cfg = RunConfig.load(stored) if stored.is_file() else RunConfig()
    return cfg.with_overrides(_overrides(args.set))


def _out_dir(cfg: RunConfig, args) -> Path:
    base = Path(args.out) if args.out else Path(cfg.output.dir)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not base.is_absolute():
        base = Path(root) / base
    return base


def _mkdir(path: Path):
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create directory {path}: {exc}", path) from exc
    if not os.access(path, os.W_OK):
        raise IoError(f"directory is not writable: {path}", path)


def _write_json(path: Path, doc):
    try:
        path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}", path) from exc


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise IoError(f"{what} not found: {path}", path)
    return path


def _image_name(split: str, cam_id: int) -> str:
    return f"{split}_{cam_id:03d}"


def load_dataset(cfg: RunConfig, out: Path):
    """Dataset from a ``generate`` output directory (scene file plus float images)."""
    doc = load_scene(_require(out / "scene.json", "scene file"))
    images = []
    for cam in doc["cameras"]:
        p = _require(out / "images" / (_image_name("train", cam.id) + ".f64"), "image")
        images.append(read_f64(p, cam.width, cam.height))
    p = cfg.partition
    ds = build_dataset(doc["gaussians"], doc["cameras"], doc["test_cameras"], doc["domain"],
                       p.nx, p.ny, p.rho, seed=doc["seed"], images=images)
    return ds, make_anchors(cfg, ds)


def _latest_checkpoint(out: Path) -> Path:
    ck = sorted((out / "checkpoints").glob("ckpt_*.bin"))
    if not ck:
        raise IoError(f"no checkpoints under {out / 'checkpoints'}", out / "checkpoints")
    return ck[-1]


def _run_dir(args, out: Path) -> Path:
    return out / args.run_name if args.run_name else out


def _load_model(args, cfg: RunConfig, out: Path):
    """(model, checkpoint path, config the run was trained with)."""
    run_dir = _run_dir(args, out)
    path = _require(Path(args.checkpoint), "checkpoint") if args.checkpoint else _latest_checkpoint(run_dir)
    for cand in (path.parent.parent / "train_config.json", path.parent / "train_config.json",
                 run_dir / "train_config.json"):
        if cand.is_file():
            cfg = RunConfig.load(cand)
            break
    blocks = partition(cfg.domain, cfg.partition.nx, cfg.partition.ny, cfg.partition.rho)
    return load_model(path.read_bytes(), blocks, cfg.domain.diagonal), path, cfg


def _report_dict(r: MetricReport):
    return {"psnr": r.psnr, "ssim": r.ssim, "l1": r.l1}


# ---------------------------------------------------------------------------
# commands


def cmd_generate(args) -> int:
    cfg = load_config(args)
    out = _out_dir(cfg, args)
    gt, cams, test = make_scene(cfg)  # validation happens before anything is written
    _mkdir(out / "images")
    p = cfg.partition
    ds = build_dataset(gt, cams, test, cfg.domain, p.nx, p.ny, p.rho, seed=cfg.scene.seed)
    cfg.save(out / "config.json")
    save_scene(out / "scene.json", scene_to_dict(gt, cams, test, seed=cfg.scene.seed, domain=cfg.domain,
                                                  nx=p.nx, ny=p.ny, rho=p.rho))
    entries = []
    for split, cs, imgs in (("train", ds.cameras, ds.images), ("test", ds.test_cameras, ds.test_images)):
        for cam, img in zip(cs, imgs):
            name = _image_name(split, cam.id)
            write_ppm(out / "images" / f"{name}.ppm", img)
            write_f64(out / "images" / f"{name}.f64", img)
            entries.append({"camera": cam.id, "split": split, "ppm": f"images/{name}.ppm",
                            "f64": f"images/{name}.f64", "width": cam.width, "height": cam.height})
    manifest = {
        "version": 1,
        "seed": cfg.scene.seed,
        "n_train_views": len(ds.cameras),
        "n_test_views": len(ds.test_cameras),
        "images": entries,
        "blocks": [{"id": b.id, "core": b.core.as_list(), "extended": b.extended.as_list(),
                    "views": ds.assignments[b.id]} for b in ds.blocks],
    }
    _write_json(out / "manifest.json", manifest)
    print(f"wrote {len(entries)} images, {len(ds.blocks)} blocks to {out}")
    return EXIT_OK


def cmd_partition(args) -> int:
    cfg = load_config(args)
    out = _out_dir(cfg, args)
    doc = load_scene(_require(out / "scene.json", "scene file"))
    blocks = partition(doc["domain"], cfg.partition.nx, cfg.partition.ny, cfg.partition.rho)
    views = assign_views(doc["cameras"], blocks)
    rows = [{"id": b.id, "core": b.core.as_list(), "extended": b.extended.as_list(), "views": views[b.id]}
            for b in blocks]
    for r in rows:
        print(f"block {r['id']}: core={r['core']} extended={r['extended']} views={len(r['views'])}")
    _write_json(out / "partition.json", {"nx": cfg.partition.nx, "ny": cfg.partition.ny,
                                          "rho": cfg.partition.rho, "blocks": rows})
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args)
    if args.mode:
        cfg = with_mode(cfg, args.mode)
    if args.iterations is not None:
        cfg = cfg.with_overrides({"train.iterations": args.iterations})
    out = _out_dir(cfg, args)
    ds, anchors = load_dataset(cfg, out)
    resume = _require(Path(args.resume), "checkpoint") if args.resume else None
    run_dir = _run_dir(args, out)
    _mkdir(run_dir)
    cfg.save(run_dir / "train_config.json")
    res = run(cfg.train_config(), ds, anchors, run_dir, checkpoint_every=cfg.output.checkpoint_every,
              threads=args.threads, resume=resume)
    last = res.checkpoints[-1] if res.checkpoints else resume
    print(f"trained {res.trainer.iteration} iterations; last checkpoint {last}")
    return EXIT_OK


def _eval_cameras(ds, split):
    return (ds.test_cameras, ds.test_images) if split == "test" else (ds.cameras, ds.images)


def cmd_eval(args) -> int:
    cfg = load_config(args)
    out = _out_dir(cfg, args)
    if args.ground_truth:
        ds, _ = load_dataset(cfg, out)
        model, source = GroundTruthModel(ds.scene), "ground-truth"
    else:
        model, path, cfg = _load_model(args, cfg, out)
        ds, _ = load_dataset(cfg, out)
        source = str(path)
    cams, imgs = _eval_cameras(ds, args.split)
    mean, per_view = evaluate(model, cams, imgs)
    report = {"source": source, "split": args.split, "mean": _report_dict(mean),
              "views": [dict(camera=c.id, **_report_dict(r)) for c, r in zip(cams, per_view)],
              "seam": seam_discrepancy(model, ds.blocks, cams, imgs)}
    dest = Path(args.report) if args.report else _run_dir(args, out) / f"eval_{args.split}.json"
    _write_json(dest, report)
    print(f"PSNR {mean.psnr:.4f} dB  SSIM {mean.ssim:.6f}  L1 {mean.l1:.6f}  ({len(cams)} {args.split} views)")
    return EXIT_OK


def cmd_render(args) -> int:
    cfg = load_config(args)
    out = _out_dir(cfg, args)
    model, _, cfg = _load_model(args, cfg, out)
    ds, _ = load_dataset(cfg, out)
    cams = ds.test_cameras if args.split == "test" else ds.cameras
    if args.camera:
        wanted = set(args.camera)
        cams = [c for c in cams if c.id in wanted]
        if not cams:
            raise ContractError(f"no {args.split} camera with id in {sorted(wanted)}")
    dest = Path(args.dest) if args.dest else out / "renders"
    _mkdir(dest)
    for cam in cams:
        write_ppm(dest / f"{_image_name(args.split, cam.id)}.ppm", model.render(cam))
    print(f"rendered {len(cams)} views to {dest}")
    return EXIT_OK


def cmd_merge(args) -> int:
    cfg = load_config(args)
    out = _out_dir(cfg, args)
    model, src, _ = _load_model(args, cfg, out)
    dest = Path(args.dest) if args.dest else _run_dir(args, out) / "merged.bin"
    try:
        dest.write_bytes(encode_merged(model))
    except OSError as exc:
        raise IoError(f"cannot write {dest}: {exc}", dest) from exc
    print(f"merged {model.n_anchors} anchors from {len(model.pieces)} blocks of {src} into {dest}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    res = gc.run_suite(args.seed)
    p = res.pipeline
    print(f"pipeline: {p.n_checked} coords, {100 * p.frac_within_tol:.2f}% within {gc.PIPELINE_TOL:g}, "
          f"max rel err {p.max_rel_err:.3e}, {res.pipeline_seconds:.1f}s -> {'ok' if p.passed else 'FAIL'}")
    for name, r in res.primitives.items():
        print(f"{name}: max rel err {r.max_rel_err:.3e} -> {'ok' if r.passed else 'FAIL'}")
    return EXIT_OK if res.passed else EXIT_NUMERIC


def ablation_cell(cfg: RunConfig, out: Path, threads: int = 1) -> dict:
    """Train one (variant, seed) cell and score it on the held-out views."""
    exp = build_experiment(cfg)
    res = run(cfg.train_config(), exp.dataset, exp.anchors, out,
              checkpoint_every=max(1, cfg.train.iterations), threads=threads)
    model = res.trainer.merged()
    ds = exp.dataset
    mean, _ = evaluate(model, ds.test_cameras, ds.test_images)
    seam = seam_discrepancy(model, ds.blocks, ds.test_cameras, ds.test_images)
    return {"psnr": mean.psnr, "ssim": mean.ssim, "l1": mean.l1,
            "seam": float(np.mean(list(seam.values()))) if seam else 0.0}


def format_table(spec: AblationSpec, results: dict) -> str:
    cols = ("psnr", "ssim", "l1", "seam")
    lines = ["| variant | " + " | ".join(cols) + " |", "|---" * (len(cols) + 1) + "|"]
    for name in spec.variants:
        cells = []
        for c in cols:
            vals = np.array([results[name][str(s)][c] for s in spec.seeds])
            cells.append(f"{vals.mean():.4f} ± {vals.std(ddof=1):.4f}")
        lines.append(f"| {name} | " + " | ".join(cells) + " |")
    return "\n".join(lines)


def cmd_ablate(args) -> int:
    cfg = load_config(args)
    if args.iterations is not None:
        cfg = cfg.with_overrides({"train.iterations": args.iterations})
    try:
        spec = AblationSpec.from_dict(json.loads(_require(Path(args.spec), "ablation spec").read_text()))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"ablation spec is not valid JSON: {exc}") from exc
    out = _out_dir(cfg, args) / "ablation"
    _mkdir(out)
    results: dict = {}
    for name, seed, c in spec.configs(cfg):
        cell = ablation_cell(c, out / name / f"seed{seed}", threads=args.threads)
        results.setdefault(name, {})[str(seed)] = cell
        print(f"{name} seed {seed}: {spec.metric} {cell[spec.metric]:.4f}")
    table = format_table(spec, results)
    (out / "table.md").write_text(table + "\n")
    _write_json(out / "results.json", {"spec": spec.to_dict(), "results": results})
    print(table)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="flatsplat", description="Block-parallel 2D Gaussian splatting toolkit.")
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="run config JSON (default: <out>/config.json, else built-in defaults)")
        p.add_argument("--out", help=f"output directory (relative paths honour ${OUTPUT_ROOT_ENV})")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                       help="override one config field; VALUE is parsed as JSON when possible")
        p.add_argument("--run-name", help="subdirectory of the output dir holding one training run")
        p.set_defaults(func=fn)
        return p

    add("generate", cmd_generate, "render the synthetic scene and write the dataset")
    add("partition", cmd_partition, "print and save the block partition with its views")

    p = add("train", cmd_train, "train on a generated dataset")
    p.add_argument("--mode", choices=("full", "momentum_distill", "parallel_shared", "independent",
                                      "single_block"))
    p.add_argument("--iterations", type=int)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--threads", type=int, default=1, help="worker threads (results do not depend on it)")

    for name, fn, help_ in (("eval", cmd_eval, "score a checkpoint against reference images"),
                            ("render", cmd_render, "write PPM renders of a checkpoint")):
        p = add(name, fn, help_)
        p.add_argument("--checkpoint", help="training or merged checkpoint (default: latest)")
        p.add_argument("--split", choices=("train", "test"), default="test")
        if name == "eval":
            p.add_argument("--ground-truth", action="store_true", help="evaluate the ground-truth scene itself")
            p.add_argument("--report", help="JSON report path")
        else:
            p.add_argument("--camera", type=int, action="append", help="camera id (repeatable)")
            p.add_argument("--dest", help="output directory for PPMs")

    p = add("merge", cmd_merge, "write a merged checkpoint keeping each anchor in its owning block")
    p.add_argument("--checkpoint")
    p.add_argument("--dest")

    p = sub.add_parser("gradcheck", help="finite-difference check of the differentiable pipeline")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = add("ablate", cmd_ablate, "train a variant x seed matrix and tabulate mean ± std")
    p.add_argument("--spec", required=True, help="ablation spec JSON")
    p.add_argument("--iterations", type=int)
    p.add_argument("--threads", type=int, default=1)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except NumericsError as exc:
        where = f" (block {exc.block_id})" if exc.block_id is not None else ""
        print(f"error: numerical failure{where}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (IoError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, ContractError, ShapeError, FlatsplatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
