"""Command-line driver: dataset generation, the per-stage tools and the full pipeline.

Exit codes: 0 success, 2 usage error, 3 data or format error, 4 solver failure.
Errors are reported as one JSON line on stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import imaging, metrics, rectify, symmetry, synth
from .geometry import CameraPose, GeometryError
from .imaging import FormatError, Scene
from .solver import SolverConfig, SolverError, Tradeoffs, refine

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_SOLVER = 0, 2, 3, 4
STANDARD_FAMILIES = ("box-union", "mirrored-extrusion", "mirrored-superellipsoid-union")
DEFAULT_GRID = (0.1, 0.3, 1.0, 3.0, 10.0)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# Configs
# ---------------------------------------------------------------------------


@dataclass
class PipelineConfig:
    noise: synth.NoiseSpec = field(default_factory=synth.NoiseSpec)
    solver: SolverConfig = field(default_factory=SolverConfig)
    matcher: symmetry.MatcherConfig = field(default_factory=symmetry.MatcherConfig)
    filter: symmetry.FilterConfig = field(default_factory=symmetry.FilterConfig)
    # "simulated": the degraded ground-truth pairs; "matcher": detect on the rectified image
    correspondences: str = "simulated"
    # seeds the noise draws; overrides noise.seed
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        if self.correspondences not in ("simulated", "matcher"):
            raise ValueError(f"unknown correspondence source {self.correspondences!r}")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown pipeline config fields: {sorted(unknown)}")
        if "noise" in d:
            d["noise"] = synth.NoiseSpec.from_dict(d["noise"])
        if "solver" in d:
            s = dict(d["solver"])
            if "tradeoffs" in s:
                s["tradeoffs"] = Tradeoffs(**s["tradeoffs"])
            d["solver"] = SolverConfig(**s)
        if "matcher" in d:
            d["matcher"] = symmetry.MatcherConfig(**d["matcher"])
        if "filter" in d:
            d["filter"] = symmetry.FilterConfig(**d["filter"])
        return cls(**d)


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"invalid JSON: {e.msg}", e.pos, path) from None


def _write_json(path, doc) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(imaging.canonical_json(doc))


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------


def dataset_manifests(directory) -> list[Path]:
    directory = Path(directory)
    index = directory / "index.json"
    if not index.exists():
        raise FormatError("dataset has no index.json", None, index)
    doc = _read_json(index)
    if "scenes" not in doc:
        raise imaging.SchemaError("scenes", index)
    return [directory / s for s in doc["scenes"]]


def generate_dataset(out, n: int, size=(128, 128), seed: int = 0, families=STANDARD_FAMILIES, ranges: Optional[synth.CameraRanges] = None) -> list[Path]:
    """Scene ``i`` uses family ``families[i % len(families)]``."""
    out = Path(out)
    names = []
    for i in range(n):
        scene = synth.generate_scene(families[i % len(families)], i, seed, tuple(size), ranges)
        scene.extra["family"] = families[i % len(families)]
        scene.extra["index"] = i
        name = f"scene_{i:03d}"
        imaging.save_scene(scene, out / name)
        names.append(f"{name}/manifest.json")
    _write_json(out / "index.json", {"scenes": names, "seed": seed, "size": list(size), "families": list(families)})
    return [out / s for s in names]


def ground_truth_of(manifest: Path) -> Optional[Path]:
    rec = imaging.read_manifest(manifest)
    gt = rec.extra.get("ground_truth")
    return None if gt is None else (Path(manifest).parent / gt).resolve()


def corrupt_dataset(dataset, out, noise: synth.NoiseSpec) -> list[Path]:
    out = Path(out)
    names = []
    for m in dataset_manifests(dataset):
        scene = imaging.load_scene(m)
        deg = synth.corrupt(scene, noise)
        name = m.parent.name
        deg.extra["ground_truth"] = os.path.relpath(Path(m).resolve(), (out / name).resolve())
        imaging.save_scene(deg, out / name)
        names.append(f"{name}/manifest.json")
    _write_json(out / "index.json", {"scenes": names, "noise": noise.to_dict(), "source": str(Path(dataset))})
    return [out / s for s in names]


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------


def rectify_scene(scene: Scene):
    t = rectify.build_transform(scene.camera, scene.width, scene.height, scene.mask)
    rect_i, rect_m = rectify.rectify_image(scene.intensity, scene.mask, t)
    return t, rect_i, rect_m


def match_scene(scene: Scene, cfg: symmetry.MatcherConfig, threads: int = 1):
    t, rect_i, rect_m = rectify_scene(scene)
    flow = symmetry.match_scanlines(rect_i, rect_m, cfg, threads)
    pairs, _ = rectify.lift_flow_to_correspondences(flow, t, rect_m)
    return pairs


def run_scene(clean: Scene, cfg: PipelineConfig, degraded: Optional[Scene] = None) -> dict:
    """Corrupt (unless ``degraded`` is given), build correspondences, filter, refine, evaluate."""
    deg = degraded if degraded is not None else synth.corrupt(clean, replace(cfg.noise, seed=cfg.seed))
    if cfg.correspondences == "matcher":
        raw = match_scene(deg, cfg.matcher)
    else:
        raw = deg.correspondences
    filt = symmetry.consistency_filter(raw, cfg.filter)
    t0 = time.perf_counter()
    z, cam, rep = refine(deg.depth, deg.normals, deg.mask, filt, deg.camera, cfg.solver)
    seconds = time.perf_counter() - t0
    size = clean.extra.get("object_size", 1.0)
    out = {
        "initial": metrics.depth_metrics(deg.depth, clean.depth, clean.mask).to_dict(),
        "refined": metrics.depth_metrics(z, clean.depth, clean.mask).to_dict(),
        "pose_initial": metrics.pose_metrics(deg.camera, clean.camera, size).to_dict(),
        "pose_refined": metrics.pose_metrics(cam, clean.camera, size).to_dict(),
        "n_correspondences": len(raw),
        "n_filtered": len(filt),
        "solver": {k: v for k, v in rep.to_dict().items() if k not in ("linear_solves",)},
        "seconds": seconds,
    }
    return out, z, cam


def _aggregate(per_scene: list[dict]) -> dict:
    keys = ("rel", "rms", "sigma_125", "sigma_15625", "scale_invariant")
    agg = {"n_scenes": len(per_scene)}
    for stage in ("initial", "refined"):
        agg[stage] = {k: float(np.mean([r[stage][k] for r in per_scene])) for k in keys}
    for stage in ("pose_initial", "pose_refined"):
        agg[stage] = {k: float(np.mean([r[stage][k] for r in per_scene])) for k in ("rot_err_deg", "tx_rel_err", "s_abs_err")}
    agg["max_seconds"] = float(max(r["seconds"] for r in per_scene))
    return agg


def run_pipeline(manifests, cfg: PipelineConfig, out: Optional[Path] = None) -> dict:
    def one(m):
        clean = imaging.load_scene(m)
        rep, z, _ = run_scene(clean, cfg)
        rep["manifest"] = str(m)
        if out is not None:
            d = Path(out) / Path(m).parent.name
            d.mkdir(parents=True, exist_ok=True)
            imaging.write_pfm(d / "refined.pfm", z)
            _write_json(d / "report.json", rep)
        return rep

    if cfg.threads > 1:
        with ThreadPoolExecutor(cfg.threads) as ex:
            per_scene = list(ex.map(one, manifests))
    else:
        per_scene = [one(m) for m in manifests]
    return {"summary": _aggregate(per_scene), "scenes": per_scene, "config": cfg.to_dict()}


def tune(manifests, cfg: PipelineConfig, grid=DEFAULT_GRID, holdout: float = 0.1) -> dict:
    """Grid search over (lambda, mu) on the last ``holdout`` fraction of scenes."""
    n = max(1, int(round(holdout * len(manifests))))
    held = list(manifests)[-n:]
    scenes = [imaging.load_scene(m) for m in held]
    degraded = [synth.corrupt(s, replace(cfg.noise, seed=cfg.seed)) for s in scenes]
    rows = []
    for lam in grid:
        for mu in grid:
            c = replace(cfg, solver=replace(cfg.solver, tradeoffs=Tradeoffs(lam, mu)))
            rels = [run_scene(s, c, d)[0]["refined"]["rel"] for s, d in zip(scenes, degraded)]
            rows.append({"lambda": lam, "mu": mu, "mean_rel": float(np.mean(rels))})
    best = min(rows, key=lambda r: r["mean_rel"])
    return {"best": best, "grid": rows, "holdout": [str(m) for m in held]}


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_gen(a):
    families = STANDARD_FAMILIES
    ranges = None
    if a.spec:
        doc = _read_json(a.spec)
        families = tuple(doc.get("families", families))
        if "camera_ranges" in doc:
            ranges = synth.CameraRanges(**{k: tuple(v) if isinstance(v, list) else v for k, v in doc["camera_ranges"].items()})
    generate_dataset(a.out, a.scenes, tuple(a.size), a.seed, families, ranges)
    return {"scenes": a.scenes, "out": str(a.out)}


def cmd_corrupt(a):
    noise = synth.NoiseSpec.from_dict(_read_json(a.noise)) if a.noise else synth.NoiseSpec()
    paths = corrupt_dataset(a.dataset, a.out, noise)
    return {"scenes": len(paths), "out": str(a.out)}


def cmd_rectify(a):
    scene = imaging.load_scene(a.manifest)
    t, rect_i, rect_m = rectify_scene(scene)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    imaging.write_pfm(out / "intensity.pfm", rect_i)
    imaging.write_mask(out / "mask.pgm", rect_m)
    doc = t.to_dict()
    doc["manifest"] = str(Path(a.manifest).resolve())
    _write_json(out / "transform.json", doc)
    return {"out": str(out), "degenerate": t.degenerate}


def cmd_match(a):
    d = Path(a.rectified)
    doc = _read_json(d / "transform.json")
    t = rectify.RectifyTransform.from_dict(doc)
    rect_m = imaging.read_mask(d / "mask.pgm")
    rect_i = imaging.read_pfm(d / "intensity.pfm", channels=1)
    cfg = symmetry.MatcherConfig(a.patch_radius, a.search_radius, a.min_contrast, a.zncc_accept, a.lr_tolerance)
    flow = symmetry.match_scanlines(rect_i, rect_m, cfg, a.threads)
    pairs, dropped = rectify.lift_flow_to_correspondences(flow, t, rect_m)
    imaging.write_correspondences(a.out, pairs)
    return {"pairs": len(pairs), "dropped": dropped}


def cmd_filter(a):
    corr = imaging.read_correspondences(a.corr)
    kept = symmetry.consistency_filter(corr, symmetry.FilterConfig(a.threshold, a.chain_rule))
    imaging.write_correspondences(a.out, kept)
    return {"input": len(corr), "kept": len(kept)}


def cmd_refine(a):
    scene = imaging.load_scene(a.manifest)
    corr = imaging.read_correspondences(a.corr) if a.corr else scene.correspondences
    cfg = SolverConfig(Tradeoffs(a.lam, a.mu), max_outer_iters=a.max_iters, optimize_camera=not a.freeze_camera)
    z, cam, rep = refine(scene.depth, scene.normals, scene.mask, corr, scene.camera, cfg)
    imaging.write_pfm(a.out, z)
    if a.report:
        _write_json(a.report, rep.to_dict())
    return {"stop_reason": rep.stop_reason, "iterations": rep.iterations, "objective": rep.terms["total"]}


def cmd_eval(a):
    gt_path = ground_truth_of(a.manifest) or Path(a.manifest)
    gt = imaging.load_scene(gt_path)
    pred = imaging.read_pfm(a.pred, channels=1)
    if pred.shape != gt.mask.shape:
        raise FormatError("prediction size differs from the ground truth", None, a.pred)
    doc = {"depth": metrics.depth_metrics(pred, gt.depth, gt.mask).to_dict(), "ground_truth": str(gt_path)}
    if a.solver_report:
        cam = _read_json(a.solver_report)["camera_final"]
        pred_cam = CameraPose.from_quaternion(cam["quaternion"], cam["t_x"], cam["s"])
        doc["pose"] = metrics.pose_metrics(pred_cam, gt.camera, gt.extra.get("object_size", 1.0)).to_dict()
    if a.report:
        _write_json(a.report, doc)
    return doc


def cmd_pipeline(a):
    cfg = PipelineConfig.from_dict(_read_json(a.config)) if a.config else PipelineConfig()
    if a.threads is not None:
        cfg.threads = a.threads
    if a.source:
        cfg.correspondences = a.source
    manifests = dataset_manifests(a.dataset)
    doc = run_pipeline(manifests, cfg, Path(a.out) if a.out else None)
    _write_json(a.report, doc)
    return doc["summary"]


def cmd_tune(a):
    cfg = PipelineConfig.from_dict(_read_json(a.config)) if a.config else PipelineConfig()
    if a.grid == "default":
        grid = DEFAULT_GRID
    else:
        try:
            grid = tuple(float(v) for v in a.grid.split(","))
        except ValueError:
            raise UsageError(f"--grid must be 'default' or comma-separated numbers, got {a.grid!r}") from None
    doc = tune(dataset_manifests(a.dataset), cfg, grid, a.holdout)
    if a.report:
        _write_json(a.report, doc)
    return doc["best"]


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="symdepth", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="generate clean synthetic scenes")
    g.add_argument("--spec", help="JSON with optional 'families' and 'camera_ranges'")
    g.add_argument("--scenes", type=int, default=50)
    g.add_argument("--size", type=int, nargs=2, default=(128, 128), metavar=("W", "H"))
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_gen)

    c = sub.add_parser("corrupt", help="apply the noise model to a dataset")
    c.add_argument("--dataset", required=True)
    c.add_argument("--noise", help="JSON NoiseSpec; defaults when omitted")
    c.add_argument("--out", required=True)
    c.set_defaults(fn=cmd_corrupt)

    r = sub.add_parser("rectify", help="rectify one scene's intensity and mask")
    r.add_argument("--manifest", required=True)
    r.add_argument("--out", required=True)
    r.set_defaults(fn=cmd_rectify)

    m = sub.add_parser("match", help="scanline matching on a rectified scene")
    m.add_argument("--rectified", required=True)
    m.add_argument("--out", required=True)
    d = symmetry.MatcherConfig()
    m.add_argument("--patch-radius", type=int, default=d.patch_radius)
    m.add_argument("--search-radius", type=int, default=None)
    m.add_argument("--min-contrast", type=float, default=d.min_contrast)
    m.add_argument("--zncc-accept", type=float, default=d.zncc_accept)
    m.add_argument("--lr-tolerance", type=float, default=d.lr_tolerance)
    m.add_argument("--threads", type=int, default=1)
    m.set_defaults(fn=cmd_match)

    f = sub.add_parser("filter", help="cycle-consistency filter")
    f.add_argument("--corr", required=True)
    f.add_argument("--threshold", type=float, default=7.0)
    f.add_argument("--chain-rule", choices=("any", "nearest"), default="any")
    f.add_argument("--out", required=True)
    f.set_defaults(fn=cmd_filter)

    s = sub.add_parser("refine", help="joint depth and camera refinement")
    s.add_argument("--manifest", required=True)
    s.add_argument("--corr", help="filtered correspondences; the manifest's file when omitted")
    s.add_argument("--lambda", dest="lam", type=float, default=1.0)
    s.add_argument("--mu", type=float, default=1.0)
    s.add_argument("--max-iters", type=int, default=30)
    s.add_argument("--freeze-camera", action="store_true")
    s.add_argument("--out", required=True)
    s.add_argument("--report")
    s.set_defaults(fn=cmd_refine)

    e = sub.add_parser("eval", help="depth (and pose) metrics against ground truth")
    e.add_argument("--pred", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--solver-report", help="refine report; adds pose metrics for its final camera")
    e.add_argument("--report")
    e.set_defaults(fn=cmd_eval)

    pl = sub.add_parser("pipeline", help="corrupt, match, filter, refine and evaluate every scene")
    pl.add_argument("--dataset", required=True)
    pl.add_argument("--config")
    pl.add_argument("--report", required=True)
    pl.add_argument("--out", help="directory for per-scene refined depth and reports")
    pl.add_argument("--source", choices=("simulated", "matcher"))
    pl.add_argument("--threads", type=int)
    pl.set_defaults(fn=cmd_pipeline)

    t = sub.add_parser("tune", help="grid search over lambda and mu on a held-out split")
    t.add_argument("--dataset", required=True)
    t.add_argument("--config")
    t.add_argument("--grid", default="default")
    t.add_argument("--holdout", type=float, default=0.1)
    t.add_argument("--report")
    t.set_defaults(fn=cmd_tune)
    return p


def _fail(code: int, kind: str, message: str, **extra) -> int:
    doc = {"error": kind, "message": message, "exit_code": code}
    doc.update({k: v for k, v in extra.items() if v is not None})
    sys.stderr.write(json.dumps(doc, sort_keys=True) + "\n")
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        a = parser.parse_args(argv)
    except UsageError as e:
        return _fail(EXIT_USAGE, "usage", str(e))
    except SystemExit as e:  # --help
        return int(e.code or 0)
    try:
        result = a.fn(a)
    except UsageError as e:
        return _fail(EXIT_USAGE, "usage", str(e))
    except SolverError as e:
        return _fail(EXIT_SOLVER, "solver", str(e))
    except imaging.SchemaError as e:
        return _fail(EXIT_DATA, "schema", str(e), field=e.field, path=str(e.path) if e.path else None)
    except FormatError as e:
        return _fail(EXIT_DATA, "format", str(e), offset=e.offset, path=str(e.path) if e.path else None)
    except (FileNotFoundError, IsADirectoryError, PermissionError) as e:
        return _fail(EXIT_DATA, "io", str(e), path=e.filename)
    except (ValueError, GeometryError, synth.GenerationError) as e:
        return _fail(EXIT_DATA, "data", str(e))
    sys.stdout.write(json.dumps(result, sort_keys=True, default=float) + "\n")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
