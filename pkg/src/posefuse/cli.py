"""Command-line front door.

Commands: index build | index query | maps | composite | eval | train-toy |
loss.  Every command with a --seed is a pure function of its inputs.  Exit
codes: 0 success, 2 parse error, 3 parameter error, 4 I/O error, 5 partial
job failure, 6 divergence.  A --config FILE of flat key=value pairs presets
any flag of the invoked command; explicit flags win.  POSEFUSE_THREADS caps
manifest-job parallelism (0 or unset = auto).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import affine, imageops, losses, metrics, pose, pq, toygan
from .errors import (
    BadMagic,
    CorruptPayload,
    DegeneratePose,
    DivergenceDetected,
    IdMismatch,
    NonFiniteCoordinate,
    ParseError,
    PosefuseError,
    UnsupportedVersion,
    WrongKeypointCount,
)

EXIT_OK = 0
EXIT_PARSE = 2
EXIT_PARAMETER = 3
EXIT_IO = 4
EXIT_JOB_FAILURE = 5
EXIT_DIVERGENCE = 6

_PARSE_ERRORS = (ParseError, WrongKeypointCount, NonFiniteCoordinate, DegeneratePose)
_IO_ERRORS = (OSError, BadMagic, UnsupportedVersion, CorruptPayload)


def _emit(payload: dict, out_path=None) -> None:
    text = json.dumps(payload, indent=2, sort_keys=True)
    if out_path:
        Path(out_path).write_text(text + "\n", encoding="utf-8")
    print(text)


def _thread_count() -> int:
    raw = os.environ.get("POSEFUSE_THREADS", "0")
    count = int(raw)
    if count < 0:
        raise ValueError(f"POSEFUSE_THREADS must be >= 0, got {raw}")
    return count or (os.cpu_count() or 1)


def _bank_features(poses):
    """Normalized features plus raw norms; rejects degenerate poses and
    duplicate ids outright so the index stays aligned with the bank file."""
    seen = set()
    for p in poses:
        if p.id in seen:
            raise ParseError(f"duplicate pose id {p.id!r} in bank")
        seen.add(p.id)
    kps = np.stack([p.keypoints2d for p in poses])
    feats = pose.extract_features_batch(kps)
    norms = np.linalg.norm(feats, axis=1)
    flat = np.flatnonzero(norms == 0.0)
    if flat.size:
        raise DegeneratePose(
            f"pose {poses[flat[0]].id!r} has all keypoints coincident; cannot index")
    return feats / norms[:, None], norms


def _quantization_mse(index: pq.PQIndex, vectors: np.ndarray) -> float:
    sub = index.subdim
    total = 0.0
    for j in range(index.m):
        recon = index.codebooks[j][index.codes[:, j]]
        diff = vectors[:, j * sub:(j + 1) * sub].astype(np.float64) - recon
        total += float((diff ** 2).sum())
    return total / len(vectors)


def cmd_index_build(args) -> int:
    poses = pose.load_poses_jsonl(args.poses)
    vectors, norms = _bank_features(poses)
    index = pq.train_codebooks(vectors.astype(np.float32), m=args.m, k=args.k,
                               iters=args.iters, seed=args.seed,
                               ids=[p.id for p in poses], raw_norms=norms)
    pq.save_index(index, args.out)
    _emit({
        "path": str(args.out),
        "n": index.n,
        "dim": index.dim,
        "m": index.m,
        "k": index.k,
        "quantization_mse": _quantization_mse(index, vectors),
    })
    return EXIT_OK


def _load_single_target(path):
    targets = pose.load_poses_jsonl(path)
    if not targets:
        raise ParseError(f"{path}: no poses found")
    return targets[0]


def cmd_index_query(args) -> int:
    bank = pose.load_poses_jsonl(args.poses)
    target = _load_single_target(args.target)
    if args.exact:
        matches = affine.retrieve_exact(bank, target, args.k)
    else:
        if not args.index:
            raise ValueError("--index is required unless --exact is given")
        index = pq.load_index(args.index)
        if index.ids != [p.id for p in bank]:
            raise IdMismatch(
                f"index ids do not match bank {args.poses} (count {index.n} vs {len(bank)})")
        params = pq.SearchParams(shortlist_n=args.shortlist, k=args.k)
        matches = pq.retrieve_pq(index, bank, target, params)
    _emit({
        "target": target.id,
        "matches": [
            {"id": m.candidate_id, "score": m.score, "transform": m.transform.params()}
            for m in matches
        ],
    }, args.out)
    return EXIT_OK


def cmd_maps(args) -> int:
    img = imageops.load_png(args.image)
    imageops.save_png(args.out_shape, imageops.edge_map(img))
    imageops.save_png(args.out_color, imageops.blur_average(img, args.blur_radius))
    _emit({"shape_map": str(args.out_shape), "color_map": str(args.out_color)})
    return EXIT_OK


def _load_manifest(path) -> dict:
    try:
        manifest = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc}") from exc
    if not isinstance(manifest, dict) or "jobs" not in manifest or "output_dir" not in manifest:
        raise ParseError(f"{path}: manifest must be an object with 'jobs' and 'output_dir'")
    seen = set()
    for i, job in enumerate(manifest["jobs"]):
        has_transform = "transform" in job
        has_target = "target_pose" in job or "target_pose_path" in job
        if has_transform == has_target:
            raise ParseError(
                f"{path}: job {i} must carry exactly one of transform / target_pose")
        job_id = str(job.get("id", f"job{i}"))
        if job_id in seen:
            raise ParseError(f"{path}: duplicate job id {job_id!r}")
        seen.add(job_id)
    return manifest


def _job_keypoints(job, base: Path, job_id: str) -> pose.HandPose:
    if "keypoints" in job:
        return pose.parse_pose(job["keypoints"], id=job_id)
    poses = pose.load_poses_jsonl(base / job["keypoints_path"])
    wanted = job.get("keypoints_id")
    if wanted is not None:
        for p in poses:
            if p.id == wanted:
                return pose.HandPose(id=job_id, keypoints2d=p.keypoints2d,
                                     keypoints3d=p.keypoints3d)
        raise ParseError(f"{job['keypoints_path']}: no pose with id {wanted!r}")
    if not poses:
        raise ParseError(f"{job['keypoints_path']}: no poses found")
    first = poses[0]
    return pose.HandPose(id=job_id, keypoints2d=first.keypoints2d,
                         keypoints3d=first.keypoints3d)


def _job_target(job, base: Path) -> pose.HandPose:
    if "target_pose" in job:
        return pose.parse_pose(job["target_pose"], id="target")
    return _load_single_target(base / job["target_pose_path"])


class _Retriever:
    """Shares the bank (and optional index) across retrieval-driven jobs."""

    def __init__(self, manifest: dict, base: Path):
        if "bank_poses" not in manifest:
            raise ParseError("manifest needs 'bank_poses' for retrieval-driven jobs")
        self.bank = pose.load_poses_jsonl(base / manifest["bank_poses"])
        self.index = None
        if manifest.get("bank_index"):
            self.index = pq.load_index(base / manifest["bank_index"])
            if self.index.ids != [p.id for p in self.bank]:
                raise IdMismatch("bank_index ids do not match bank_poses")
        self.shortlist = int(manifest.get("shortlist", min(200, len(self.bank))))

    def best(self, target: pose.HandPose) -> affine.Match:
        if self.index is not None:
            params = pq.SearchParams(shortlist_n=self.shortlist, k=1)
            matches = pq.retrieve_pq(self.index, self.bank, target, params)
        else:
            matches = affine.retrieve_exact(self.bank, target, 1)
        if not matches:
            raise DegeneratePose("retrieval produced no valid match")
        return matches[0]


def _run_job(job, idx, manifest, base, out_dir, retriever, timings):
    job_id = str(job.get("id", f"job{idx}"))
    started = time.perf_counter()
    result = {"id": job_id, "status": "ok"}
    try:
        fg = imageops.load_png(base / job["foreground"])
        mask = imageops.load_png(base / job["mask"], force_gray=True)
        bg = imageops.load_png(base / job["background"])
        kp = _job_keypoints(job, base, job_id)

        match_id = None
        if "transform" in job:
            transform = affine.Affine2D.from_params(job["transform"])
        else:
            match = retriever.best(_job_target(job, base))
            transform = match.transform
            match_id = match.candidate_id

        out_img, out_pose = imageops.composite(imageops.CompositeJob(
            foreground=fg, mask=mask, transform=transform,
            background=bg, keypoints=kp))
        image_path = out_dir / f"{job_id}.png"
        imageops.save_png(image_path, out_img)

        result["output_image"] = str(image_path)
        result["transform"] = transform.params()
        if match_id is not None:
            result["match_id"] = match_id
        result["_pose"] = out_pose
        result["_provenance"] = {
            "foreground": str(job["foreground"]),
            "mask": str(job["mask"]),
            "background": str(job["background"]),
            "match_id": match_id,
        }
        if manifest.get("report_loss"):
            weights = losses.LossWeights(
                lambda1=float(manifest.get("loss_lambda1", 10.0)),
                lambda2=float(manifest.get("loss_lambda2", 100.0)))
            radius = int(manifest.get("blur_radius", 5))
            bins = int(manifest.get("histogram_bins", 32))
            report = losses.ta_loss(weights, bg, out_img,
                                    imageops.blur_average(bg, radius), bins)
            result["loss"] = report.to_dict(weights)
    except (PosefuseError, OSError, ValueError, KeyError) as exc:
        result = {"id": job_id, "status": "error",
                  "error": f"{type(exc).__name__}: {exc}"}
    if timings:
        result["timing_ms"] = (time.perf_counter() - started) * 1000.0
    return result


def cmd_composite(args) -> int:
    manifest_path = Path(args.manifest)
    manifest = _load_manifest(manifest_path)
    base = manifest_path.parent
    out_dir = base / manifest["output_dir"]
    out_dir.mkdir(parents=True, exist_ok=True)

    needs_retrieval = any("transform" not in job for job in manifest["jobs"])
    retriever = _Retriever(manifest, base) if needs_retrieval else None

    jobs = list(enumerate(manifest["jobs"]))
    workers = _thread_count()
    if workers > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(
                lambda item: _run_job(item[1], item[0], manifest, base, out_dir,
                                      retriever, args.timings), jobs))
    else:
        results = [_run_job(job, idx, manifest, base, out_dir, retriever, args.timings)
                   for idx, job in jobs]

    seed = manifest.get("seed")
    annotations_path = out_dir / "annotations.jsonl"
    with open(annotations_path, "w", encoding="utf-8") as handle:
        for result in results:
            if result["status"] != "ok":
                continue
            out_pose = result.pop("_pose")
            provenance = result.pop("_provenance")
            handle.write(json.dumps({
                "id": out_pose.id,
                "keypoints": out_pose.keypoints2d.tolist(),
                "source": provenance,
                "transform": result["transform"],
                "seed": seed,
            }) + "\n")

    failed = sum(1 for r in results if r["status"] != "ok")
    _emit({
        "jobs": results,
        "failed": failed,
        "annotations": str(annotations_path),
        "output_dir": str(out_dir),
    }, args.report)
    return EXIT_JOB_FAILURE if failed else EXIT_OK


def cmd_eval(args) -> int:
    predictions = pose.load_poses_jsonl(args.pred)
    ground_truth = pose.load_poses_jsonl(args.gt)
    pairs = metrics.align_by_id(predictions, ground_truth)
    pred_set = metrics.PredictionSet(pairs=tuple(pairs), space=args.space)

    if args.auc_min is None or args.auc_max is None:
        auc_min, auc_max = (20.0, 50.0) if args.space == "3d" else (0.0, 30.0)
    else:
        auc_min, auc_max = args.auc_min, args.auc_max
    mean, median = metrics.epe(pred_set)
    curve = metrics.pck_curve(pred_set, auc_min, auc_max, args.steps)
    if args.curve_out:
        with open(args.curve_out, "w", encoding="utf-8") as handle:
            handle.write("threshold,pck\n")
            for t, v in zip(curve.thresholds, curve.values):
                handle.write(f"{t!r},{v!r}\n")
    _emit({
        "space": args.space,
        "pairs": len(pred_set.pairs),
        "epe_mean": mean,
        "epe_median": median,
        "pck_threshold": args.pck_threshold,
        "pck": metrics.pck(pred_set, args.pck_threshold),
        "auc": curve.auc,
        "auc_range": [auc_min, auc_max],
        "steps": args.steps,
    }, args.out)
    return EXIT_OK


def _parse_hidden(text: str) -> tuple:
    return tuple(int(part) for part in text.split(",") if part.strip())


def cmd_train_toy(args) -> int:
    config = toygan.ToyConfig(
        seed=args.seed,
        image_side=args.image_side,
        z_dim=args.z_dim,
        hidden=_parse_hidden(args.hidden),
        learning_rate=args.learning_rate,
        steps=args.steps,
        batch=args.batch,
        weights=losses.LossWeights(lambda1=args.lambda1, lambda2=args.lambda2),
        holdout=args.holdout,
        histogram_bins=args.bins,
        freeze_discriminator=args.freeze_discriminator,
        fixed_batch=args.fixed_batch,
        dump_every=args.dump_every,
        dump_dir=args.dump_dir,
    )
    try:
        report = toygan.train_toy_gan(config)
    except DivergenceDetected as exc:
        if exc.report is not None and args.out:
            Path(args.out).write_text(exc.report.to_json() + "\n", encoding="utf-8")
        raise
    if args.out:
        Path(args.out).write_text(report.to_json() + "\n", encoding="utf-8")
    _emit({
        "steps": len(report.records),
        "initial_holdout_ta": report.initial_holdout_ta,
        "final_holdout_ta": report.final_holdout_ta,
        "report": str(args.out) if args.out else None,
    })
    return EXIT_OK


def cmd_loss(args) -> int:
    real = imageops.load_png(args.real)
    generated = imageops.load_png(args.generated)
    if args.color_map:
        color_map = imageops.load_png(args.color_map)
    else:
        color_map = imageops.blur_average(real, args.blur_radius)
    weights = losses.LossWeights(lambda1=args.lambda1, lambda2=args.lambda2)
    report = losses.ta_loss(weights, real, generated, color_map, args.bins,
                            reference_real=args.reference_real)
    _emit(report.to_dict(weights), args.out)
    return EXIT_OK


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="posefuse", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    index = sub.add_parser("index", help="build or query the pose index")
    index_sub = index.add_subparsers(dest="index_command", required=True)

    build = index_sub.add_parser("build", help="train a quantization index over a pose bank")
    build.add_argument("--poses", required=True)
    build.add_argument("--out", required=True)
    build.add_argument("--m", type=int, default=4)
    build.add_argument("--k", type=int, default=256)
    build.add_argument("--iters", type=int, default=25)
    build.add_argument("--seed", type=int, required=True)
    build.set_defaults(func=cmd_index_build)

    query = index_sub.add_parser("query", help="retrieve best-matching bank poses")
    query.add_argument("--index")
    query.add_argument("--poses", required=True)
    query.add_argument("--target", required=True)
    query.add_argument("--k", type=int, default=1)
    query.add_argument("--shortlist", type=int, default=200)
    query.add_argument("--exact", action="store_true")
    query.add_argument("--out")
    query.set_defaults(func=cmd_index_query)

    maps = sub.add_parser("maps", help="write shape (edge) and color (blur) maps")
    maps.add_argument("--image", required=True)
    maps.add_argument("--out-shape", required=True)
    maps.add_argument("--out-color", required=True)
    maps.add_argument("--blur-radius", type=int, default=5)
    maps.set_defaults(func=cmd_maps)

    comp = sub.add_parser("composite", help="run a compositing manifest")
    comp.add_argument("--manifest", required=True)
    comp.add_argument("--report")
    comp.add_argument("--timings", action="store_true")
    comp.set_defaults(func=cmd_composite)

    ev = sub.add_parser("eval", help="score predictions against ground truth")
    ev.add_argument("--pred", required=True)
    ev.add_argument("--gt", required=True)
    ev.add_argument("--space", choices=("2d", "3d"), default="2d")
    ev.add_argument("--pck-threshold", type=float, default=20.0)
    ev.add_argument("--auc-min", type=float, default=None)
    ev.add_argument("--auc-max", type=float, default=None)
    ev.add_argument("--steps", type=int, default=100)
    ev.add_argument("--curve-out")
    ev.add_argument("--out")
    ev.set_defaults(func=cmd_eval)

    toy = sub.add_parser("train-toy", help="run the desk-scale adversarial trainer")
    toy.add_argument("--seed", type=int, required=True)
    toy.add_argument("--image-side", type=int, default=16)
    toy.add_argument("--z-dim", type=int, default=8)
    toy.add_argument("--hidden", default="128")
    toy.add_argument("--learning-rate", type=float, default=0.05)
    toy.add_argument("--steps", type=int, default=200)
    toy.add_argument("--batch", type=int, default=16)
    toy.add_argument("--lambda1", type=float, default=10.0)
    toy.add_argument("--lambda2", type=float, default=100.0)
    toy.add_argument("--holdout", type=int, default=16)
    toy.add_argument("--bins", type=int, default=8)
    toy.add_argument("--freeze-discriminator", action="store_true")
    toy.add_argument("--fixed-batch", action="store_true")
    toy.add_argument("--dump-every", type=int, default=0)
    toy.add_argument("--dump-dir")
    toy.add_argument("--out")
    toy.set_defaults(func=cmd_train_toy)

    loss = sub.add_parser("loss", help="score one generated image against a reference")
    loss.add_argument("--real", required=True)
    loss.add_argument("--generated", required=True)
    loss.add_argument("--color-map")
    loss.add_argument("--blur-radius", type=int, default=5)
    loss.add_argument("--bins", type=int, default=32)
    loss.add_argument("--lambda1", type=float, default=10.0)
    loss.add_argument("--lambda2", type=float, default=100.0)
    loss.add_argument("--reference-real", action="store_true")
    loss.add_argument("--out")
    loss.set_defaults(func=cmd_loss)
    return parser


def _config_flags(path) -> list[str]:
    """Turn key=value config lines into CLI flags; booleans become bare flags."""
    flags = []
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ParseError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, _, value = line.partition("=")
        flag = "--" + key.strip().replace("_", "-")
        value = value.strip()
        if value.lower() in ("true", "false"):
            if value.lower() == "true":
                flags.append(flag)
        else:
            flags.extend([flag, value])
    return flags


def _apply_config(argv: list[str]) -> list[str]:
    if "--config" not in argv:
        return argv
    at = argv.index("--config")
    if at + 1 >= len(argv):
        raise ParseError("--config requires a file path")
    flags = _config_flags(argv[at + 1])
    rest = argv[:at] + argv[at + 2:]
    insert_at = 2 if rest and rest[0] == "index" else 1
    return rest[:insert_at] + flags + rest[insert_at:]


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        argv = _apply_config(argv)
        args = _build_parser().parse_args(argv)
        return args.func(args)
    except _PARSE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except _IO_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except DivergenceDetected as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (PosefuseError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARAMETER


if __name__ == "__main__":
    sys.exit(main())
