"""Command-line pipeline: dataset synthesis, pose initialization and
refinement, canonical coordinate mapping, transfer, and evaluation.

Stages communicate through plain files so runs are resumable and an external
featurizer can interpose when the field carries no baked descriptors
(real-image mode): the align/init-pose commands then write candidate renders
plus a render manifest and wait for a completion marker before scoring.

Exit codes: 0 success (including "awaiting features"), 1 runtime failure,
2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import dataio
from .errors import CongealError, ConfigError
from .field import Aabb, VoxelField
from .geometry import CameraIntrinsics, CameraPose, RigidTransform
from .metric import FeatureImage
from .pose_fit import (
    CandidateGrid,
    InitConfig,
    OptimConfig,
    PoseEstimate,
    candidate_grid,
    init_pose,
    prepare_candidate_features,
    refine_pose,
)
from .render import RenderConfig, render, resample, tight_bbox_crop
from .synth import (
    Primitive,
    SynthSpec,
    make_dataset,
    random_view_poses,
    write_dataset,
)
from .warp import ImageContext, WarpConfig, WarpField, fit_forward_warp
from .evaluate import PckConfig, PoseSet, pck, procrustes_align
from .render import NocsImage

FEATURES_MARKER = "features.done"


# ---------------------------------------------------------------------------
# configuration


def _get(cfg: dict, key: str, default):
    v = cfg.get(key, default)
    return default if v is None else v


class RunConfig:
    """Validated view over the align/congeal configuration JSON."""

    def __init__(self, doc: dict, base: Path):
        if not isinstance(doc, dict):
            raise ConfigError("config root must be a JSON object")
        try:
            self.field_path = base / doc["field"]
            self.manifest_path = base / doc["manifest"]
        except KeyError as e:
            raise ConfigError(f"config missing required key {e}") from e
        self.out = Path(_get(doc, "out", "out"))
        if not self.out.is_absolute():
            self.out = base / self.out
        self.mode = _get(doc, "mode", "auto")
        if self.mode not in ("auto", "synthetic", "real"):
            raise ConfigError(f"unknown mode {self.mode!r}")
        self.seed = int(_get(doc, "seed", 0))
        self.jobs = int(_get(doc, "jobs", 1))
        self.write_trajectories = bool(_get(doc, "write_trajectories", False))

        g = _get(doc, "grid", {})
        self.grid_fovs = _get(g, "fov_values", None)
        self.grid_azimuths = _get(g, "azimuths", None)
        self.grid_elevations = _get(g, "elevations", None)
        self.grid_radius = _get(g, "radius", None)

        i = _get(doc, "init", {})
        self.init_cfg = InitConfig(
            render_size=(
                int(_get(i, "render_width", 64)),
                int(_get(i, "render_height", 64)),
            ),
            n_samples=int(_get(i, "n_samples", 64)),
            feature_size=(
                int(_get(i, "feature_height", 64)),
                int(_get(i, "feature_width", 64)),
            ),
            crop_threshold=float(_get(i, "crop_threshold", 0.5)),
        )

        r = _get(doc, "refine", {})
        self.refine_cfg = OptimConfig(
            learning_rate=float(_get(r, "learning_rate", 1e-3)),
            iterations=int(_get(r, "iterations", 1000)),
            beta1=float(_get(r, "beta1", 0.9)),
            beta2=float(_get(r, "beta2", 0.999)),
            epsilon=float(_get(r, "epsilon", 1e-8)),
            fd_step_rot=float(_get(r, "fd_step_rot", 1e-3)),
            fd_step_trans=_get(r, "fd_step_trans", None),
            fd_step_fov=float(_get(r, "fd_step_fov", 0.05)),
            n_samples=int(_get(r, "n_samples", 64)),
            patience=_get(r, "patience", None),
        )
        self.refine_mask_size = (
            int(_get(r, "mask_height", 0)) or None,
            int(_get(r, "mask_width", 0)) or None,
        )

        w = _get(doc, "warp", {})
        rw = _get(w, "rigidity_weights", (1.0, 0.1, 10.0))
        self.warp_cfg = WarpConfig(
            lambda_l2=float(_get(w, "lambda_l2", 10.0)),
            lambda_smooth=float(_get(w, "lambda_smooth", 0.0)),
            iterations=int(_get(w, "iterations", 4000)),
            learning_rate=float(_get(w, "learning_rate", 0.01)),
            huber_delta=float(_get(w, "huber_delta", 0.01)),
            rigidity_weights=tuple(float(x) for x in rw),
            weight_decay=float(_get(w, "weight_decay", 0.01)),
        )

        n = _get(doc, "nocs", {})
        self.nocs_size = (
            int(_get(n, "height", 64)),
            int(_get(n, "width", 64)),
        )
        self.nocs_samples = int(_get(n, "n_samples", 96))

    def make_grid(self, field: VoxelField) -> CandidateGrid:
        radius = self.grid_radius
        if radius is None:
            radius = CandidateGrid.default_radius(field)
        grid = CandidateGrid.default(float(radius))
        kw = {}
        if self.grid_fovs is not None:
            kw["fov_values"] = tuple(float(v) for v in self.grid_fovs)
        if self.grid_azimuths is not None:
            kw["azimuths"] = tuple(float(v) for v in self.grid_azimuths)
        if self.grid_elevations is not None:
            kw["elevations"] = tuple(float(v) for v in self.grid_elevations)
        return replace(grid, **kw) if kw else grid


def _load_config(path: str) -> RunConfig:
    p = Path(path)
    return RunConfig(dataio.read_json(p), p.parent)


# ---------------------------------------------------------------------------
# parallel helpers (block-wise so large arrays are pickled once per worker)


def _run_blocks(worker, arg_blocks, jobs: int):
    if jobs <= 1 or len(arg_blocks) <= 1:
        return [worker(b) for b in arg_blocks]
    with ProcessPoolExecutor(max_workers=min(jobs, len(arg_blocks))) as ex:
        return list(ex.map(worker, arg_blocks))


def _split(items: list, jobs: int) -> list[list]:
    jobs = max(1, min(jobs, len(items)))
    blocks = [[] for _ in range(jobs)]
    for i, it in enumerate(items):
        blocks[i % jobs].append((i, it))
    return blocks


def _candidate_worker(args):
    field, poses, cfg = args
    return prepare_candidate_features(field, poses, cfg)


def _image_worker(args):
    """Init + refine + NOCS/feature render + warp for a block of images."""
    field, block, shared = args
    results = []
    for index, entry in block:
        results.append((index, _process_image(field, entry, shared)))
    return results


def _process_image(field: VoxelField, entry: dict, shared: dict):
    out: dict = {"id": entry["id"], "status": "ok"}
    try:
        mask = dataio.read_mask(entry["mask_path"])
        feats = FeatureImage(dataio.read_tensor(entry["features_path"]))
        est = init_pose(
            field,
            feats,
            mask,
            shared["grid"],
            shared["init_cfg"],
            candidates=shared["candidates"],
            candidate_features=shared["candidate_features"],
        )
        out["init_score"] = est.score
        mh, mw = shared["refine_mask_size"]
        target_mask = mask
        if mh is not None and mw is not None and mask.shape != (mh, mw):
            target_mask = resample(mask, (mh, mw))
        refined = refine_pose(field, target_mask, est.pose, shared["refine_cfg"])
        out["refine_score"] = refined.score
        out["pose"] = refined.pose.to_json_dict()
        out["trajectory"] = refined.trajectory
        warp_result = _fit_image_warp(field, refined.pose, feats, shared)
        out.update(warp_result)
    except CongealError as e:
        out["status"] = f"failed: {e}"
    return out


def _fit_image_warp(field, pose: CameraPose, feats: FeatureImage, shared: dict):
    """Render NOCS + features at the final pose and fit the forward warp.

    With warp iterations 0 (the real-image mode first pass) only the NOCS
    render happens and a zero warp is emitted.
    """
    nh, nw = shared["nocs_size"]
    fpose = CameraPose(
        pose.extrinsics, CameraIntrinsics(pose.intrinsics.fov_deg, nw, nh)
    )
    rc = RenderConfig(n_samples=shared["nocs_samples"])
    cfg: WarpConfig = shared["warp_cfg"]
    channels = {"nocs", "features"} if cfg.iterations > 0 else {"nocs"}
    r = render(field, fpose, rc, channels=channels)
    nocs4 = np.concatenate(
        [r.nocs.values, r.nocs.valid[..., None].astype(float)], axis=-1
    )
    out = {"nocs": nocs4}
    real = feats.values
    if real.shape[:2] != (nh, nw):
        real = resample(real, (nh, nw))
    if cfg.iterations > 0:
        warp = fit_forward_warp(
            FeatureImage(real),
            r.features,
            cfg,
            source_size=(feats.width, feats.height),
            render_size=(nw, nh),
        )
        from .warp import warp_objective

        out["warp_objective"] = warp_objective(
            warp.displacement, FeatureImage(real), r.features, cfg, False
        )[0]
    else:
        warp = WarpField(
            np.zeros((nh, nw, 2)), (feats.width, feats.height), (nw, nh)
        )
        out["warp_objective"] = 0.0
    out["warp"] = warp.displacement
    return out


# ---------------------------------------------------------------------------
# synth command


def _parse_synth_spec(doc: dict) -> tuple[SynthSpec, dict]:
    try:
        prims = tuple(
            Primitive(
                kind=str(p["kind"]),
                center=tuple(float(x) for x in p["center"]),
                size=tuple(float(x) for x in p["size"]),
                color=tuple(float(x) for x in p["color"]),
            )
            for p in doc["primitives"]
        )
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"bad primitives list: {e}") from e
    dom = _get(doc, "domain", {})
    domain = Aabb(
        np.array(_get(dom, "min", (-1.0, -1.0, -1.0)), dtype=float),
        np.array(_get(dom, "max", (1.0, 1.0, 1.0)), dtype=float),
    )
    spec = SynthSpec(
        primitives=prims,
        resolution=int(_get(doc, "resolution", 128)),
        descriptor_mode=str(_get(doc, "descriptor_mode", "nocs_lift")),
        descriptor_dim=int(_get(doc, "descriptor_dim", 8)),
        noise_sigma=float(_get(doc, "noise_sigma", 0.0)),
        seed=int(_get(doc, "seed", 0)),
        domain=domain,
    )
    views = _get(doc, "views", {})
    return spec, views


def cmd_synth(args) -> int:
    doc = dataio.read_json(args.spec)
    try:
        spec, views = _parse_synth_spec(doc)
        if args.seed is not None:
            spec = replace(spec, seed=int(args.seed))
        count = int(_get(views, "count", 16))
        width = int(_get(views, "width", 64))
        height = int(_get(views, "height", 64))
        fov = float(_get(views, "fov_deg", 40.0))
        radius = _get(views, "radius", None)
        if radius is None:
            radius = 1.8 * spec.domain.diagonal / 2.0
        elev = tuple(_get(views, "elevation_range", (-60.0, 60.0)))
        vseed = int(_get(views, "seed", spec.seed))
        n_kp = int(_get(doc, "keypoints", 20))
        fsize = _get(doc, "feature_size", None)
        if fsize is not None:
            fsize = (int(fsize[0]), int(fsize[1]))
        rc = RenderConfig(n_samples=int(_get(doc, "render_samples", 96)))
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad synth spec: {e}") from e
    poses = random_view_poses(
        count, float(radius), fov, width, height, seed=vseed, elevation_range=elev
    )
    dataset = make_dataset(spec, poses, n_keypoints=n_kp, feature_size=fsize, render_cfg=rc)
    write_dataset(dataset, args.out)
    print(f"wrote {count} views to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# align pipeline and its stage commands


def _load_inputs(cfg: RunConfig):
    field = dataio.read_field(cfg.field_path)
    entries = dataio.read_manifest(cfg.manifest_path)
    if not entries:
        raise ConfigError("manifest lists no images")
    return field, entries


def _resolve_mode(cfg: RunConfig, field: VoxelField, entries: list[dict]) -> str:
    if cfg.mode != "auto":
        return cfg.mode
    if field.descriptors is not None and all(
        "features_path" in e for e in entries
    ):
        return "synthetic"
    return "real"


def _candidate_features_synthetic(cfg, field, poses):
    blocks = _split(list(poses), cfg.jobs)
    args = [(field, [p for _, p in b], cfg.init_cfg) for b in blocks]
    results = _run_blocks(_candidate_worker, args, cfg.jobs)
    feats: list = [None] * len(poses)
    for block, res in zip(blocks, results):
        for (i, _), f in zip(block, res):
            feats[i] = f
    return feats


def _candidate_features_real(cfg: RunConfig, field, poses) -> Optional[list]:
    """Two-pass handshake: write cropped candidate renders, await features."""
    rdir = cfg.out / "renders" / "candidates"
    fdir = cfg.out / "features" / "candidates"
    manifest = rdir / "render_manifest.json"
    if not manifest.exists():
        rdir.mkdir(parents=True, exist_ok=True)
        items = []
        rc = cfg.init_cfg.effective_render_cfg()
        for i, pose in enumerate(poses):
            r = render(field, pose, rc, channels={"color"})
            cid = f"cand_{i:05d}"
            try:
                crop, _ = tight_bbox_crop(
                    r.mask, r.color, cfg.init_cfg.crop_threshold
                )
            except CongealError:
                items.append({"id": cid, "path": None})
                continue
            dataio.write_ppm(rdir / f"{cid}.ppm", crop)
            items.append({"id": cid, "path": f"{cid}.ppm"})
        dataio.write_json(manifest, {"renders": items})
    if not (fdir / FEATURES_MARKER).exists():
        return None
    items = dataio.read_json(manifest)["renders"]
    feats = []
    for item in items:
        if item["path"] is None:
            feats.append(None)
            continue
        t = dataio.read_tensor(fdir / f"{item['id']}.tnsr")
        if t.shape[:2] != cfg.init_cfg.feature_size:
            t = resample(t, cfg.init_cfg.feature_size)
        feats.append(FeatureImage(t))
    return feats


def _final_render_features(cfg: RunConfig, field, results) -> Optional[dict]:
    """Second handshake round: features for the final-pose renders."""
    rdir = cfg.out / "renders" / "final"
    fdir = cfg.out / "features" / "final"
    manifest = rdir / "render_manifest.json"
    if not manifest.exists():
        rdir.mkdir(parents=True, exist_ok=True)
        items = []
        nh, nw = cfg.nocs_size
        for res in results:
            if "pose" not in res:
                continue
            pose = CameraPose.from_json_dict(res["pose"])
            fpose = CameraPose(
                pose.extrinsics,
                CameraIntrinsics(pose.intrinsics.fov_deg, nw, nh),
            )
            r = render(field, fpose, RenderConfig(n_samples=cfg.nocs_samples))
            dataio.write_ppm(rdir / f"{res['id']}.ppm", r.color)
            items.append({"id": res["id"], "path": f"{res['id']}.ppm"})
        dataio.write_json(manifest, {"renders": items})
    if not (fdir / FEATURES_MARKER).exists():
        return None
    out = {}
    for item in dataio.read_json(manifest)["renders"]:
        t = dataio.read_tensor(fdir / f"{item['id']}.tnsr")
        if t.shape[:2] != cfg.nocs_size:
            t = resample(t, cfg.nocs_size)
        out[item["id"]] = FeatureImage(t)
    return out


def _write_align_outputs(cfg: RunConfig, results: list[dict]) -> int:
    cfg.out.mkdir(parents=True, exist_ok=True)
    (cfg.out / "warps").mkdir(exist_ok=True)
    (cfg.out / "nocs").mkdir(exist_ok=True)
    poses = []
    report = []
    n_failed = 0
    for res in results:
        rep = {"id": res["id"], "status": res["status"]}
        if res["status"] != "ok":
            n_failed += 1
            report.append(rep)
            continue
        rep["init_score"] = res["init_score"]
        rep["refine_score"] = res["refine_score"]
        rep["warp_objective"] = res.get("warp_objective")
        report.append(rep)
        poses.append({"id": res["id"], **res["pose"], "score": res["refine_score"]})
        dataio.write_tensor(cfg.out / "warps" / f"{res['id']}.tnsr", res["warp"])
        dataio.write_tensor(cfg.out / "nocs" / f"{res['id']}.tnsr", res["nocs"])
        if cfg.write_trajectories and res.get("trajectory"):
            lines = ["iteration,score"]
            lines += [f"{i},{s!r}" for i, s in enumerate(res["trajectory"])]
            (cfg.out / f"{res['id']}.scores.csv").write_text("\n".join(lines) + "\n")
    dataio.write_json(cfg.out / "poses.json", {"poses": poses})
    dataio.write_json(
        cfg.out / "report.json",
        {"status": "ok", "n_failed": n_failed, "images": report},
    )
    if n_failed == len(results):
        print("all images failed", file=sys.stderr)
        return 1
    print(f"aligned {len(results) - n_failed}/{len(results)} images -> {cfg.out}")
    return 0


def _awaiting(cfg: RunConfig, what: str) -> int:
    cfg.out.mkdir(parents=True, exist_ok=True)
    dataio.write_json(cfg.out / "report.json", {"status": f"awaiting_{what}"})
    print(
        f"wrote {what.replace('_', ' ')} renders; run the featurizer on "
        f"{cfg.out}/renders and rerun this command once {FEATURES_MARKER} exists"
    )
    return 0


def cmd_align(args) -> int:
    cfg = _load_config(args.config)
    _apply_overrides(cfg, args)
    field, entries = _load_inputs(cfg)
    mode = _resolve_mode(cfg, field, entries)
    for e in entries:
        for key in ("mask_path", "features_path"):
            if key not in e:
                raise ConfigError(f"manifest entry {e['id']} lacks {key}")
    w, h = cfg.init_cfg.render_size
    grid = cfg.make_grid(field)
    poses = candidate_grid(grid, w, h)
    if mode == "synthetic":
        cand_feats = _candidate_features_synthetic(cfg, field, poses)
    else:
        cand_feats = _candidate_features_real(cfg, field, poses)
        if cand_feats is None:
            return _awaiting(cfg, "candidate_features")

    shared = {
        "grid": grid,
        "candidates": poses,
        "candidate_features": cand_feats,
        "init_cfg": cfg.init_cfg,
        "refine_cfg": cfg.refine_cfg,
        "refine_mask_size": cfg.refine_mask_size,
        "nocs_size": cfg.nocs_size,
        "nocs_samples": cfg.nocs_samples,
        "warp_cfg": cfg.warp_cfg,
    }
    if mode == "real":
        # Warp fitting needs featurized final renders; do poses first, then
        # the second handshake round, then the warps in-process.
        shared = dict(shared, warp_cfg=replace(cfg.warp_cfg, iterations=0))
    blocks = _split(entries, cfg.jobs)
    args_blocks = [(field, b, shared) for b in blocks]
    results_nested = _run_blocks(_image_worker, args_blocks, cfg.jobs)
    results: list = [None] * len(entries)
    for block_res in results_nested:
        for i, res in block_res:
            results[i] = res

    if mode == "real" and cfg.warp_cfg.iterations > 0:
        feats_by_id = _final_render_features(cfg, field, results)
        if feats_by_id is None:
            _write_align_outputs(cfg, results)
            return _awaiting(cfg, "final_features")
        by_id = {e["id"]: e for e in entries}
        for res in results:
            if res["status"] != "ok" or res["id"] not in feats_by_id:
                continue
            real = FeatureImage(
                dataio.read_tensor(by_id[res["id"]]["features_path"])
            )
            nh, nw = cfg.nocs_size
            vals = real.values
            if vals.shape[:2] != (nh, nw):
                vals = resample(vals, (nh, nw))
            warp = fit_forward_warp(
                FeatureImage(vals),
                feats_by_id[res["id"]],
                cfg.warp_cfg,
                source_size=(real.width, real.height),
                render_size=(nw, nh),
            )
            res["warp"] = warp.displacement
    return _write_align_outputs(cfg, results)


def cmd_init_pose(args) -> int:
    cfg = _load_config(args.config)
    _apply_overrides(cfg, args)
    field, entries = _load_inputs(cfg)
    mode = _resolve_mode(cfg, field, entries)
    w, h = cfg.init_cfg.render_size
    grid = cfg.make_grid(field)
    poses = candidate_grid(grid, w, h)
    if mode == "synthetic":
        cand_feats = _candidate_features_synthetic(cfg, field, poses)
    else:
        cand_feats = _candidate_features_real(cfg, field, poses)
        if cand_feats is None:
            return _awaiting(cfg, "candidate_features")
    cfg.out.mkdir(parents=True, exist_ok=True)
    out = []
    for e in entries:
        mask = dataio.read_mask(e["mask_path"])
        feats = FeatureImage(dataio.read_tensor(e["features_path"]))
        est = init_pose(
            field, feats, mask, grid, cfg.init_cfg,
            candidates=poses, candidate_features=cand_feats,
        )
        out.append({"id": e["id"], **est.pose.to_json_dict(), "score": est.score})
    dataio.write_json(cfg.out / "init_poses.json", {"poses": out})
    print(f"initialized {len(out)} poses -> {cfg.out / 'init_poses.json'}")
    return 0


def cmd_refine_pose(args) -> int:
    cfg = _load_config(args.config)
    _apply_overrides(cfg, args)
    field, entries = _load_inputs(cfg)
    init_doc = dataio.read_json(args.poses)
    by_id = {p["id"]: p for p in init_doc.get("poses", [])}
    cfg.out.mkdir(parents=True, exist_ok=True)
    out = []
    failed = 0
    for e in entries:
        if e["id"] not in by_id:
            raise ConfigError(f"poses file lacks image {e['id']}")
        init = CameraPose.from_json_dict(by_id[e["id"]])
        mask = dataio.read_mask(e["mask_path"])
        mh, mw = cfg.refine_mask_size
        if mh is not None and mw is not None and mask.shape != (mh, mw):
            mask = resample(mask, (mh, mw))
        try:
            est = refine_pose(field, mask, init, cfg.refine_cfg)
            out.append({"id": e["id"], **est.pose.to_json_dict(), "score": est.score})
        except CongealError as exc:
            failed += 1
            print(f"{e['id']}: {exc}", file=sys.stderr)
    dataio.write_json(cfg.out / "poses.json", {"poses": out})
    print(f"refined {len(out)} poses -> {cfg.out / 'poses.json'}")
    return 1 if failed == len(entries) else 0


def cmd_congeal(args) -> int:
    """Fit warps + NOCS renders for already-estimated poses."""
    cfg = _load_config(args.config)
    _apply_overrides(cfg, args)
    field, entries = _load_inputs(cfg)
    doc = dataio.read_json(args.poses)
    by_id = {p["id"]: p for p in doc.get("poses", [])}
    results = []
    for e in entries:
        if e["id"] not in by_id:
            raise ConfigError(f"poses file lacks image {e['id']}")
        pose = CameraPose.from_json_dict(by_id[e["id"]])
        feats = FeatureImage(dataio.read_tensor(e["features_path"]))
        shared = {
            "nocs_size": cfg.nocs_size,
            "nocs_samples": cfg.nocs_samples,
            "warp_cfg": cfg.warp_cfg,
        }
        res = {"id": e["id"], "status": "ok", "init_score": None,
               "refine_score": by_id[e["id"]].get("score"), "pose": by_id[e["id"]],
               "trajectory": None}
        res.update(_fit_image_warp(field, pose, feats, shared))
        results.append(res)
    return _write_align_outputs(cfg, results)


# ---------------------------------------------------------------------------
# transfer / edit / uncongeal


def _load_context(cfg: RunConfig, artifacts: Path, entry: dict) -> ImageContext:
    disp = dataio.read_tensor(artifacts / "warps" / f"{entry['id']}.tnsr")
    nocs4 = dataio.read_tensor(artifacts / "nocs" / f"{entry['id']}.tnsr")
    nocs = NocsImage(nocs4[..., :3].astype(float), nocs4[..., 3] >= 0.5)
    img = dataio.read_ppm(entry["image_path"])
    h, w = img.shape[:2]
    nh, nw = nocs.valid.shape
    warp = WarpField(disp.astype(float), (w, h), (nw, nh))
    return ImageContext(warp=warp, nocs=nocs, pose=None)


def _entry_for(entries: list[dict], image_id: str) -> dict:
    for e in entries:
        if e["id"] == image_id:
            return e
    raise ConfigError(f"manifest has no image {image_id!r}")


def cmd_transfer(args) -> int:
    cfg = _load_config(args.config)
    artifacts = Path(args.artifacts) if args.artifacts else cfg.out
    _, entries = _load_inputs(cfg)
    src = _load_context(cfg, artifacts, _entry_for(entries, args.source))
    tgt = _load_context(cfg, artifacts, _entry_for(entries, args.target))
    doc = dataio.read_json(args.keypoints)
    from .warp import transfer_keypoint
    from .errors import InvalidLift

    out = []
    for kp in doc.get("keypoints", []):
        try:
            u = transfer_keypoint(src, tgt, (float(kp["x"]), float(kp["y"])))
            out.append(
                {"image_id": args.target, "x": float(u[0]), "y": float(u[1])}
            )
        except InvalidLift:
            out.append(None)
        except (KeyError, TypeError) as e:
            raise ConfigError(f"bad keypoint entry: {e}") from e
    dataio.write_json(args.out_file, {"keypoints": out})
    print(f"transferred {len(out)} keypoints -> {args.out_file}")
    return 0


def cmd_edit(args) -> int:
    cfg = _load_config(args.config)
    artifacts = Path(args.artifacts) if args.artifacts else cfg.out
    _, entries = _load_inputs(cfg)
    src_entry = _entry_for(entries, args.source)
    tgt_entry = _entry_for(entries, args.target)
    src = _load_context(cfg, artifacts, src_entry)
    tgt = _load_context(cfg, artifacts, tgt_entry)
    source_image = dataio.read_ppm(src_entry["image_path"])
    target_image = dataio.read_ppm(tgt_entry["image_path"])
    region = dataio.read_mask(args.region)
    from .warp import transfer_pixels

    edited = transfer_pixels(source_image, src, tgt, region, target_image)
    dataio.write_ppm(args.out_image, edited)
    print(f"wrote edited image -> {args.out_image}")
    return 0


def cmd_uncongeal(args) -> int:
    cfg = _load_config(args.config)
    artifacts = Path(args.artifacts) if args.artifacts else cfg.out
    _, entries = _load_inputs(cfg)
    entry = _entry_for(entries, args.image_id)
    ctx = _load_context(cfg, artifacts, entry)
    doc = dataio.read_json(args.points)
    from .warp import reverse_2d2d, reverse_3d2d

    w, h = ctx.image_size
    out = []
    for p in doc.get("points", []):
        try:
            point = (float(p["x"]), float(p["y"]), float(p["z"]))
        except (KeyError, TypeError) as e:
            raise ConfigError(f"bad point entry: {e}") from e
        ut, residual = reverse_3d2d(ctx.nocs, point)
        u = reverse_2d2d(ctx.warp, ut)
        out.append({"x": float(u[0] * w), "y": float(u[1] * h), "residual": residual})
    dataio.write_json(args.out_file, {"points": out})
    print(f"uncongealed {len(out)} points -> {args.out_file}")
    return 0


# ---------------------------------------------------------------------------
# evaluation


def _pose_set_from_doc(doc: dict) -> tuple[list[str], PoseSet]:
    poses = doc.get("poses")
    if not poses:
        raise ConfigError("poses file lists no poses")
    ids = []
    transforms = []
    for p in poses:
        try:
            ids.append(str(p["id"]))
            cam = CameraPose.from_json_dict(p)
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigError(f"bad pose entry: {e}") from e
        transforms.append(cam.extrinsics.inverse())  # camera-to-world
    return ids, PoseSet(transforms)


def cmd_eval_pose(args) -> int:
    pred_ids, _ = _pose_set_from_doc(dataio.read_json(args.pred))
    pred_doc = dataio.read_json(args.pred)
    gt_doc = dataio.read_json(args.gt)
    pred_by_id = {p["id"]: p for p in pred_doc["poses"]}
    gt_by_id = {p["id"]: p for p in gt_doc["poses"]}
    common = sorted(set(pred_by_id) & set(gt_by_id))
    if len(common) < 2:
        raise ConfigError("need at least two poses shared between pred and gt")
    pred = PoseSet(
        [CameraPose.from_json_dict(pred_by_id[i]).extrinsics.inverse() for i in common]
    )
    gt = PoseSet(
        [CameraPose.from_json_dict(gt_by_id[i]).extrinsics.inverse() for i in common]
    )
    result = procrustes_align(pred, gt)
    metrics = {
        "rotation_deg_mean": result.rotation_deg_mean,
        "translation_mean": result.translation_mean,
        "per_pose": [
            {
                "id": i,
                "rotation_deg": float(r),
                "translation": float(t),
            }
            for i, r, t in zip(
                common, result.rotation_errors_deg, result.translation_errors
            )
        ],
    }
    print(json.dumps(metrics, indent=1))
    if args.out_file:
        dataio.write_json(args.out_file, metrics)
    return 0


def cmd_eval_pck(args) -> int:
    pred_doc = dataio.read_json(args.pred)
    gt_doc = dataio.read_json(args.gt)
    pred = [
        None if k is None else (float(k["x"]), float(k["y"]))
        for k in pred_doc.get("keypoints", [])
    ]
    gt = [
        (float(k["x"]), float(k["y"])) for k in gt_doc.get("keypoints", [])
    ]
    if len(pred) != len(gt):
        raise ConfigError("pred and gt keypoint lists differ in length")
    cfg = PckConfig(alpha=args.alpha, bbox=(args.bbox_h, args.bbox_w))
    value = pck(pred, gt, cfg)
    metrics = {"pck": value, "alpha": args.alpha}
    print(json.dumps(metrics, indent=1))
    if args.out_file:
        dataio.write_json(args.out_file, metrics)
    return 0


# ---------------------------------------------------------------------------
# entry point


def _apply_overrides(cfg: RunConfig, args) -> None:
    if getattr(args, "out", None):
        cfg.out = Path(args.out)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "jobs", None) is not None:
        cfg.jobs = args.jobs
    if getattr(args, "mode", None):
        cfg.mode = args.mode


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, help="run configuration JSON")
    p.add_argument("--out", help="output directory (overrides config)")
    p.add_argument("--seed", type=int, help="seed override")
    p.add_argument("--jobs", type=int, help="worker processes")
    p.add_argument("--mode", choices=["auto", "synthetic", "real"])


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="congeal3d",
        description="3D-aware alignment of object image collections",
    )
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic ground-truth dataset")
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("align", help="full pipeline: init, refine, congeal")
    _add_common(p)
    p.set_defaults(fn=cmd_align)

    p = sub.add_parser("init-pose", help="candidate-grid pose initialization")
    _add_common(p)
    p.set_defaults(fn=cmd_init_pose)

    p = sub.add_parser("refine-pose", help="gradient refinement of given poses")
    _add_common(p)
    p.add_argument("--poses", required=True)
    p.set_defaults(fn=cmd_refine_pose)

    p = sub.add_parser("congeal", help="NOCS renders + forward warps at given poses")
    _add_common(p)
    p.add_argument("--poses", required=True)
    p.set_defaults(fn=cmd_congeal)

    p = sub.add_parser("uncongeal", help="map canonical 3D points into an image")
    p.add_argument("--config", required=True)
    p.add_argument("--artifacts", help="align output dir (default: config out)")
    p.add_argument("--image-id", required=True)
    p.add_argument("--points", required=True)
    p.add_argument("--out-file", required=True)
    p.set_defaults(fn=cmd_uncongeal)

    p = sub.add_parser("transfer", help="transfer keypoints between two images")
    p.add_argument("--config", required=True)
    p.add_argument("--artifacts")
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--keypoints", required=True)
    p.add_argument("--out-file", required=True)
    p.set_defaults(fn=cmd_transfer)

    p = sub.add_parser("edit", help="copy a masked source region into the target")
    p.add_argument("--config", required=True)
    p.add_argument("--artifacts")
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--region", required=True, help="region mask PGM (source space)")
    p.add_argument("--out-image", required=True)
    p.set_defaults(fn=cmd_edit)

    p = sub.add_parser("eval-pose", help="Procrustes-aligned pose errors")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out-file")
    p.set_defaults(fn=cmd_eval_pose)

    p = sub.add_parser("eval-pck", help="percentage of correct keypoints")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--alpha", type=float, default=0.1)
    p.add_argument("--bbox-w", type=float, required=True)
    p.add_argument("--bbox-h", type=float, required=True)
    p.add_argument("--out-file")
    p.set_defaults(fn=cmd_eval_pck)

    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except CongealError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
