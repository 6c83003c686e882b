"""Command line interface: ``corrpose <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import cv2
import numpy as np

from . import __version__
from .config import RunConfig, load_config, updated
from .errors import CorrposeError, EmptyInput, FormatError
from .labelgen import BACKGROUND, PredictionMaps, corrupt, farthest_point_regions, rasterize
from .manifest import ImageEntry, Intrinsics, Manifest, MapPaths, PoseEntry, RoIEntry, load_manifest
from .mesh import TriMesh, box, load_mesh, satellite, save_ply
from .metrics import EvalRecord, add_metric, aggregate, pose_error, record_dict
from .pipeline import CorruptedOracleSource, MapSource, estimate
from .refiner import load_svm, save_svm, svm_from_config
from .render import rasterize_mesh
from .roi import RoI
from .synthetic import default_camera, make_scene
from .tensorfile import atomic_write, quantize_unit, read_tensor, read_unit_map, write_tensor

log = logging.getLogger("corrpose")

BUILTIN_MESHES = {"satellite": satellite, "box": lambda: box((0.2, 0.15, 0.1), subdivisions=1)}


# ---------------------------------------------------------------- helpers


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _jsonl(records) -> str:
    return "".join(_dumps(r) + "\n" for r in records)


def read_png(path) -> np.ndarray:
    img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise FormatError(f"{path}: cannot read image")
    if img.ndim == 2:
        img = np.repeat(img[:, :, None], 3, axis=2)
    return np.ascontiguousarray(img[:, :, 2::-1] if img.shape[2] >= 3 else img)


def write_png(path, image: np.ndarray) -> None:
    ok, buf = cv2.imencode(".png", np.ascontiguousarray(image[:, :, ::-1]))
    if not ok:
        raise FormatError(f"{path}: cannot encode image")
    atomic_write(path, buf.tobytes())


def image_seed(base: int, index: int) -> int:
    return int(np.random.SeedSequence((base, index)).generate_state(1)[0])


def effective_config(args) -> RunConfig:
    cfg = load_config(getattr(args, "config", None))
    pipe, pnp, seeds = cfg.pipeline, cfg.pnp, cfg.seeds
    if getattr(args, "jobs", None) is not None:
        pipe = updated(pipe, jobs=args.jobs)
    if getattr(args, "no_refine", False):
        pipe = updated(pipe, refine=False)
    if getattr(args, "no_ensemble", False):
        pipe = updated(pipe, ensemble=False)
    if getattr(args, "eps_mode", None):
        pnp = updated(pnp, policy=updated(pnp.policy, mode=args.eps_mode))
    if getattr(args, "seed", None) is not None:
        seeds = updated(seeds, pnp=args.seed, noise=args.seed)
    return RunConfig(pnp=pnp, refiner=cfg.refiner, pipeline=pipe, noise=cfg.noise, seeds=seeds)


def _load_object(man: Manifest) -> tuple[TriMesh, np.ndarray]:
    mesh = load_mesh(man.resolve(man.object.mesh))
    bbox = mesh.bbox if man.object.bbox is None else np.array(man.object.bbox)
    return mesh, bbox


def _roi_for(entry: ImageEntry, mesh: TriMesh) -> RoI:
    if entry.roi is not None:
        return entry.roi.roi()
    if entry.pose is None:
        raise FormatError(f"{entry.id}: no RoI and no pose to derive one from")
    mask = rasterize_mesh(mesh, entry.pose.pose(), entry.intrinsics.camera()).mask
    if not mask.any():
        raise FormatError(f"{entry.id}: object not visible at the ground-truth pose")
    return RoI.from_mask(mask, 0.1)


def _map_workers(fn, items, jobs: int):
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as ex:
            return list(ex.map(fn, items))
    return [fn(x) for x in items]


def _rel(path: Path, start: Path) -> str:
    return os.path.relpath(Path(path).resolve(), Path(start).resolve())


# ---------------------------------------------------------------- commands


def cmd_dump_config(args) -> int:
    cfg = effective_config(args)
    sys.stdout.write(json.dumps(cfg.model_dump(mode="json"), indent=2, sort_keys=True) + "\n")
    return 0


def cmd_render_scenes(args) -> int:
    """Random synthetic scenes with ground-truth poses and RoIs."""
    out = Path(args.out)
    if args.mesh in BUILTIN_MESHES:
        mesh = BUILTIN_MESHES[args.mesh]()
    else:
        mesh = load_mesh(args.mesh)
    K = default_camera()
    rng = np.random.default_rng(args.seed)
    out.mkdir(parents=True, exist_ok=True)
    save_ply(mesh, out / "mesh.ply")
    entries = []
    for i in range(args.n):
        sc = make_scene(mesh, rng, K, style=args.style)
        name = f"{i:04d}"
        write_png(out / "images" / f"{name}.png", sc.image)
        entries.append(
            ImageEntry(
                id=name,
                image=f"images/{name}.png",
                intrinsics=Intrinsics.of(K),
                split=args.style,
                pose=PoseEntry.of(sc.pose),
                roi=RoIEntry(center=sc.roi.center, side=sc.roi.side),
            )
        )
    man = Manifest(object={"mesh": "mesh.ply", "regions": args.regions}, images=entries)
    atomic_write(out / "manifest.json", man.to_json())
    log.info("wrote %d scenes to %s", args.n, out)
    return 0


def cmd_gen_labels(args) -> int:
    man = load_manifest(args.manifest)
    cfg = effective_config(args)
    mesh, bbox = _load_object(man)
    partition = farthest_point_regions(mesh, man.object.regions)
    out = Path(args.out)
    size = cfg.pipeline.map_size
    index, skipped = {}, []
    for entry in man.images:
        if entry.pose is None:
            skipped.append({"id": entry.id, "reason": "no ground-truth pose"})
            continue
        try:
            roi = _roi_for(entry, mesh)
            Kc = roi.crop_intrinsics(entry.intrinsics.camera(), size)
            lab = rasterize(mesh, entry.pose.pose(), Kc, partition=partition, bbox=bbox)
        except (CorrposeError, ValueError) as exc:
            skipped.append({"id": entry.id, "reason": f"{type(exc).__name__}: {exc}"})
            continue
        files = {
            "coords": f"{entry.id}_coords.eptf",
            "mask": f"{entry.id}_mask.eptf",
            "regions": f"{entry.id}_regions.eptf",
            "depth": f"{entry.id}_depth.eptf",
        }
        write_tensor(out / files["coords"], lab.coords.astype(np.float32), "f32")
        write_tensor(out / files["mask"], lab.mask.astype(np.uint8), "u8")
        # region ids are stored shifted by one so that 0 marks background
        write_tensor(out / files["regions"], (lab.regions - BACKGROUND).astype(np.uint16), "u16")
        write_tensor(out / files["depth"], lab.depth.astype(np.float32), "f32")
        index[entry.id] = {**files, "roi": {"center": list(roi.center), "side": roi.side}}
    atomic_write(
        out / "index.json",
        json.dumps({"images": index, "skipped": skipped, "map_size": size}, indent=2, sort_keys=True) + "\n",
    )
    for s in skipped:
        log.warning("skipped %s: %s", s["id"], s["reason"])
    return 1 if skipped else 0


def cmd_synth(args) -> int:
    """Corrupted oracle predictions written as tensor files plus a manifest."""
    src_path = Path(args.manifest)
    man = load_manifest(src_path)
    cfg = effective_config(args)
    mesh, bbox = _load_object(man)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    size = cfg.pipeline.map_size
    rotations = (0, 1, 2, 3) if cfg.pipeline.ensemble else (0,)
    fmt = "u16" if args.quantize else "f32"
    new_images, skipped = [], []
    for i, entry in enumerate(man.images):
        data = entry.model_dump()
        data["image"] = _rel(man.resolve(entry.image), out)
        if entry.pose is None:
            skipped.append({"id": entry.id, "reason": "no ground-truth pose"})
            data["predictions"] = None
            new_images.append(ImageEntry.model_validate(data))
            continue
        try:
            roi = _roi_for(entry, mesh)
            Kc = roi.crop_intrinsics(entry.intrinsics.camera(), size)
            lab = rasterize(mesh, entry.pose.pose(), Kc, bbox=bbox)
        except (CorrposeError, ValueError) as exc:
            skipped.append({"id": entry.id, "reason": f"{type(exc).__name__}: {exc}"})
            continue
        pred = corrupt(lab, cfg.noise, image_seed(cfg.seeds.noise, i))
        preds = {}
        for k in rotations:
            m = pred.rot90(k)
            stem = f"{entry.id}_r{k}"
            paths = MapPaths(coords=f"{stem}_coords.eptf", error=f"{stem}_error.eptf", confidence=f"{stem}_conf.eptf")
            conv = (lambda a: quantize_unit(a)) if fmt == "u16" else (lambda a: a.astype(np.float32))
            write_tensor(out / paths.coords, conv(m.coords), fmt)
            write_tensor(out / paths.error, conv(m.error), fmt)
            write_tensor(out / paths.confidence, conv(m.confidence), fmt)
            preds[k] = paths
        data["predictions"] = preds
        data["roi"] = {"center": list(roi.center), "side": roi.side}
        new_images.append(ImageEntry.model_validate(data))
    obj = man.object.model_dump()
    obj["mesh"] = _rel(man.resolve(man.object.mesh), out)
    obj["bbox"] = [list(map(float, bbox[0])), list(map(float, bbox[1]))]
    new = Manifest(object=obj, images=new_images)
    atomic_write(out / "manifest.json", new.to_json())
    for s in skipped:
        log.warning("skipped %s: %s", s["id"], s["reason"])
    return 1 if skipped else 0


def _file_source(man: Manifest, entry: ImageEntry) -> MapSource:
    if not entry.predictions:
        raise FormatError(f"{entry.id}: no prediction maps")
    maps = {}
    for k, p in entry.predictions.items():
        coords = read_tensor(man.resolve(p.coords))
        coords = coords.astype(np.float64) / 65535.0 if coords.dtype == np.uint16 else coords.astype(np.float64)
        regions = None if p.regions is None else read_unit_map(man.resolve(p.regions))
        maps[int(k)] = PredictionMaps(
            coords=coords,
            error=read_unit_map(man.resolve(p.error)),
            confidence=read_unit_map(man.resolve(p.confidence)),
            regions=regions,
        )
    return MapSource(maps)


def cmd_estimate(args) -> int:
    man = load_manifest(args.manifest)
    if not man.images:
        raise EmptyInput("manifest lists no images")
    cfg = effective_config(args)
    mesh, bbox = _load_object(man)
    svm = None
    if cfg.pipeline.refine:
        cache = Path(args.svm_cache) if args.svm_cache else None
        if cache is not None and cache.exists():
            svm = load_svm(cache)
        else:
            svm = svm_from_config(mesh, cfg.refiner)
            if cache is not None:
                save_svm(svm, cache)

    def run(item):
        i, entry = item
        t0 = time.perf_counter()
        rec = {"id": entry.id, "split": entry.split}
        try:
            K = entry.intrinsics.camera()
            image = read_png(man.resolve(entry.image))
            if image.shape[:2] != K.size:
                raise FormatError(f"{entry.id}: image size {image.shape[:2]} does not match intrinsics")
            roi = _roi_for(entry, mesh)
            if args.oracle:
                if entry.pose is None:
                    raise FormatError(f"{entry.id}: oracle source needs a ground-truth pose")
                source = CorruptedOracleSource(
                    mesh, entry.pose.pose(), K, cfg.pipeline.map_size, cfg.noise, image_seed(cfg.seeds.noise, i), bbox
                )
            else:
                source = _file_source(man, entry)
            est = estimate(image, K, roi, source, mesh, svm, cfg, bbox)
            rec.update(status="ok", **est.record())
        except (CorrposeError, ValueError, OSError) as exc:
            rec.update(status="failed", error=f"{type(exc).__name__}: {exc}")
            log.warning("%s failed: %s", entry.id, rec["error"])
        return rec, {"id": entry.id, "seconds": time.perf_counter() - t0}

    outs = _map_workers(run, list(enumerate(man.images)), cfg.pipeline.jobs)
    records = [r for r, _ in outs]
    atomic_write(args.out, _jsonl(records))
    timings = args.timings or f"{args.out}.timings.jsonl"
    atomic_write(timings, _jsonl([t for _, t in outs]))
    n_ok = sum(r["status"] == "ok" for r in records)
    log.info("%d/%d images estimated", n_ok, len(records))
    return 0 if n_ok else 1


def cmd_evaluate(args) -> int:
    man = load_manifest(args.manifest)
    mesh, _ = _load_object(man)
    gt = {e.id: e for e in man.images}
    results = [json.loads(ln) for ln in Path(args.results).read_text().splitlines() if ln.strip()]
    if not results:
        raise EmptyInput("no result records")
    evals, per_image, n_failed = [], [], 0
    for r in results:
        entry = gt.get(r["id"])
        if entry is None or entry.pose is None:
            continue
        if r.get("status") != "ok":
            n_failed += 1
            continue
        est = PoseEntry(quaternion=r["quaternion"], translation=r["translation"]).pose()
        truth = entry.pose.pose()
        e = pose_error(est, truth, args.zeroing)
        add = add_metric(est, truth, mesh).distance / mesh.diameter
        rec = EvalRecord(image=r["id"], split=r.get("split", entry.split), e_t=e.e_t, e_R=e.e_R, add=add)
        evals.append(rec)
        per_image.append(record_dict(rec))
    if not evals:
        raise EmptyInput("no successful result with ground truth")
    report = aggregate(evals)
    report["n_failed"] = n_failed
    report["zeroing"] = args.zeroing
    report["records"] = per_image
    atomic_write(args.out, json.dumps(report, indent=2, sort_keys=True) + "\n")
    if args.csv:
        curve = report["splits"]["all"]["add_curve"]
        atomic_write(args.csv, "threshold,fraction\n" + "".join(f"{t},{f}\n" for t, f in curve))
    lines = [f"{'split':<16}{'n':>6}{'e_t':>12}{'e_R':>12}{'e_pose':>12}{'ADD0.1d':>10}"]
    for name, s in report["splits"].items():
        lines.append(
            f"{name:<16}{s['count']:>6}{s['mean_e_t']:>12.5f}{s['mean_e_R']:>12.5f}"
            f"{s['mean_e_pose']:>12.5f}{s.get('add_0.1d', float('nan')):>10.3f}"
        )
    if n_failed:
        lines.append(f"failed images: {n_failed}")
    sys.stdout.write("\n".join(lines) + "\n")
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="corrpose", description="Dense-correspondence pose estimation toolkit.")
    p.add_argument("--version", action="version", version=f"corrpose {__version__}")
    p.add_argument("--dump-config", action="store_true", help="print the effective run config and exit")
    p.add_argument("-v", "--verbose", action="store_true")

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config (default: $CORRPOSE_CONFIG)")
    common.add_argument("--seed", type=int, help="overrides the pnp and noise seeds")
    common.add_argument("--jobs", type=int, help="images processed concurrently")
    common.add_argument("--no-refine", action="store_true")
    common.add_argument("--no-ensemble", action="store_true")
    common.add_argument("--eps-mode", choices=["fixed", "adaptive", "grid"])

    sub = p.add_subparsers(dest="command")

    s = sub.add_parser("dump-config", parents=[common], help="print the effective run config")
    s.set_defaults(func=cmd_dump_config)

    s = sub.add_parser("render-scenes", help="render random synthetic scenes and a manifest")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, default=10)
    s.add_argument("--mesh", default="satellite", help="builtin name (satellite, box) or mesh path")
    s.add_argument("--style", choices=["two-color", "clutter"], default="two-color")
    s.add_argument("--regions", type=int, default=8)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_render_scenes)

    s = sub.add_parser("gen-labels", parents=[common], help="render label tensors for every posed image")
    s.add_argument("manifest")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gen_labels)

    s = sub.add_parser("synth", parents=[common], help="write corrupted oracle predictions")
    s.add_argument("manifest")
    s.add_argument("--out", required=True)
    s.add_argument("--quantize", action="store_true", help="store maps as u16 instead of f32")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("estimate", parents=[common], help="estimate poses for every image")
    s.add_argument("manifest")
    s.add_argument("--out", required=True, help="result records (JSON lines)")
    s.add_argument("--timings", help="per-image timings (default: <out>.timings.jsonl)")
    s.add_argument("--oracle", action="store_true", help="use the corrupted oracle instead of map files")
    s.add_argument("--svm-cache", help="load or store the viewpoint model here")
    s.set_defaults(func=cmd_estimate)

    s = sub.add_parser("evaluate", help="score result records against the manifest")
    s.add_argument("results")
    s.add_argument("manifest")
    s.add_argument("--out", required=True, help="JSON report")
    s.add_argument("--csv", help="ADD curve as CSV")
    s.add_argument("--zeroing", choices=["independent", "conjunctive", "off"], default="independent")
    s.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s", stream=sys.stderr
    )
    if args.dump_config and args.command is None:
        return cmd_dump_config(args)
    if args.command is None:
        parser.print_help()
        return 2
    try:
        return args.func(args)
    except (CorrposeError, OSError) as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
