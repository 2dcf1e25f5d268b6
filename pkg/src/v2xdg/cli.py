"""``v2xdg`` command line.

Exit codes: 0 success, 1 data error, 2 check failure, 3 usage error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import shutil
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Sequence

import jsonschema
import numpy as np

from . import __version__
from . import losses as L
from . import toy
from .awa import AwaParams, awa
from .errors import InvalidStep, SchemaViolation, UnknownTarget, V2XDGError
from .eval3d import EVAL_RANGE, INTERPOLATIONS, average_precision, load_detections, load_ground_truth
from .gradcheck import TARGETS, grad_check
from .pointcloud import SceneFrame, load_point_cloud, load_scene, read_manifest, save_point_cloud
from .weather import WeatherConfig, corrupt_scene

EXIT_OK, EXIT_DATA, EXIT_CHECK, EXIT_USAGE = 0, 1, 2, 3

RUN_MANIFEST = "run_manifest.json"
PARTIAL_MARKER = ".partial"
# forward_losses is ~70 parameters times a full pipeline pass, so it gets fewer default trials
DEFAULT_TRIALS = {name: (1 if name == "forward_losses" else 20) for name in TARGETS}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse would exit 2, which we reserve for check failures
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def config_hash(doc) -> str:
    canon = json.dumps(doc, sort_keys=True, separators=(",", ":"), allow_nan=False)
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def _read_json(path) -> object:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaViolation(f"{path}: invalid JSON ({exc})") from None


def _emit(args, doc: dict, lines: Sequence[str]) -> None:
    if args.json:
        print(json.dumps(doc, indent=2, sort_keys=True))
    else:
        for line in lines:
            print(line)


# ---------------------------------------------------------------------------
# gen-weather
# ---------------------------------------------------------------------------


def find_manifests(dataset_dir: Path) -> list[Path]:
    """Every ``*.json`` below ``dataset_dir`` except run manifests, as sorted relative paths."""
    found = [p.relative_to(dataset_dir) for p in dataset_dir.rglob("*.json") if p.name != RUN_MANIFEST]
    return sorted(found, key=lambda p: p.as_posix())


def _cloud_stats(pc) -> tuple[int, float]:
    n = len(pc)
    return n, (math.fsum(pc.intensity.tolist()) / n if n else 0.0)


def process_frame(dataset_dir: str, rel: str, out_dir: str, weather: dict, seed: int) -> dict:
    """Corrupt one frame and write it under ``out_dir`` with the same relative layout."""
    src_manifest = Path(dataset_dir) / rel
    dst_manifest = Path(out_dir) / rel
    doc = read_manifest(src_manifest)
    cfg = WeatherConfig.from_dict(weather)
    scene = load_scene(src_manifest)
    out = corrupt_scene(scene, cfg, seed)
    dst_manifest.parent.mkdir(parents=True, exist_ok=True)
    agents = []
    rel_dir = Path(rel).parent
    for entry in doc["agents"]:
        aid = entry["agent_id"]
        src = src_manifest.parent / entry["cloud"]
        dst = dst_manifest.parent / entry["cloud"]
        dst.parent.mkdir(parents=True, exist_ok=True)
        if cfg.condition == "clean":
            shutil.copyfile(src, dst)
        else:
            save_point_cloud(out.agent(aid).cloud, dst)
        n_in, i_in = _cloud_stats(scene.agent(aid).cloud)
        n_out, i_out = _cloud_stats(out.agent(aid).cloud)
        agents.append({
            "agent_id": aid,
            "output": (rel_dir / entry["cloud"]).as_posix(),
            "points_in": n_in,
            "points_out": n_out,
            "mean_intensity_in": i_in,
            "mean_intensity_out": i_out,
        })
    shutil.copyfile(src_manifest, dst_manifest)
    return {"manifest": Path(rel).as_posix(), "frame_id": scene.frame_id, "agents": agents}


def _frame_job(job):
    try:
        return True, process_frame(*job)
    except (V2XDGError, OSError, ValueError) as exc:
        return False, {"manifest": job[1], "error": f"{type(exc).__name__}: {exc}"}


def cmd_gen_weather(args) -> int:
    dataset_dir, out_dir = Path(args.dataset_dir), Path(args.out_dir)
    if not dataset_dir.is_dir():
        print(f"error: dataset directory not found: {dataset_dir}", file=sys.stderr)
        return EXIT_DATA
    if args.config:
        cfg = WeatherConfig.from_dict(_read_json(args.config))
    else:
        cfg = WeatherConfig(args.condition)
    weather = cfg.to_dict()
    rels = find_manifests(dataset_dir)
    jobs = [(str(dataset_dir), r.as_posix(), str(out_dir), weather, args.seed) for r in rels]
    out_dir.mkdir(parents=True, exist_ok=True)
    marker = out_dir / PARTIAL_MARKER
    if args.jobs == 1 or len(jobs) <= 1:
        results = [_frame_job(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_frame_job, jobs))  # map keeps frame order

    frames = [r for ok, r in results if ok]
    failures = [r for ok, r in results if not ok]
    manifest = {
        "tool_version": __version__,
        "config_hash": config_hash({"weather": weather}),
        "config": {"weather": weather},
        "seed": args.seed,
        "frames": frames,
    }
    if failures:
        manifest["failures"] = failures
    (out_dir / RUN_MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    if failures:
        marker.write_text("".join(f"{f['manifest']}: {f['error']}\n" for f in failures), encoding="utf-8")
        for f in failures:
            print(f"frame failed: {f['manifest']}: {f['error']}", file=sys.stderr)
        return EXIT_DATA
    if marker.exists():
        marker.unlink()
    lines = [f"{len(frames)} frame(s) written to {out_dir} ({cfg.condition}, seed {args.seed})",
             f"config hash {manifest['config_hash']}"]
    _emit(args, manifest, lines)
    return EXIT_OK


# ---------------------------------------------------------------------------
# awa-preview
# ---------------------------------------------------------------------------


def extent_ratios(pc, bounds) -> list[float]:
    """Per-axis ``max|coord| / bound`` over a cloud (0 for an empty cloud)."""
    if len(pc) == 0:
        return [0.0, 0.0, 0.0]
    return [float(v) for v in np.abs(pc.xyz).max(axis=0) / np.asarray(bounds)]


def cmd_awa_preview(args) -> int:
    pc = load_point_cloud(args.cloud)
    if args.identity:
        p = AwaParams.identity()
    elif args.config:
        p = AwaParams.from_dict(_read_json(args.config))
    else:
        p = AwaParams()
    out = awa(pc, p, args.seed)
    ratios = extent_ratios(out.reduced, p.bounds)
    doc = {
        "thresholds": list(out.thresholds),
        "points_source": len(pc),
        "points_reduced": len(out.reduced),
        "points_augmented": len(out.augmented),
        "noise_points": out.n_noise,
        "extent_ratio": ratios,
        "params": p.to_dict(),
        "seed": args.seed,
    }
    if args.out_dir:
        d = Path(args.out_dir)
        d.mkdir(parents=True, exist_ok=True)
        stem = Path(args.cloud).stem
        save_point_cloud(out.reduced, d / f"{stem}_reduced.bin")
        save_point_cloud(out.augmented, d / f"{stem}_augmented.bin")
    lines = [
        "delta      " + " ".join(f"{t:.6f}" for t in out.thresholds),
        f"points     source={len(pc)} reduced={len(out.reduced)} augmented={len(out.augmented)}",
        "extent     " + " ".join(f"{r:.6f}" for r in ratios),
    ]
    _emit(args, doc, lines)
    return EXIT_OK


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

_MAT = {"type": "array"}
LOSS_FIXTURE_SCHEMA = {
    "type": "object",
    "properties": {
        "coefficients": {"type": "object"},
        "l_pat": {"type": "object", "required": ["I_s", "I_a", "T"],
                  "properties": {"I_s": _MAT, "I_a": _MAT, "T": _MAT}},
        "l_ffa": {"type": "object", "required": ["F_s", "F_a"],
                  "properties": {"F_s": _MAT, "F_a": _MAT}},
        "aca_agent": {"type": "object", "required": ["ids", "source", "augmented"],
                      "properties": {"ids": {"type": "array", "items": {"type": "string"}},
                                     "source": _MAT, "augmented": _MAT,
                                     "cross_terms": {"type": "boolean"}}},
        "aca_group": {"type": "object", "required": ["source", "augmented"],
                      "properties": {"source": _MAT, "augmented": _MAT}},
        "focal_loss": {"type": "object", "required": ["logits", "targets"],
                       "properties": {"logits": _MAT, "targets": _MAT,
                                      "alpha": {"type": "number"}, "gamma": {"type": "number"}}},
        "smooth_l1": {"type": "object", "required": ["pred", "target"],
                      "properties": {"pred": _MAT, "target": _MAT, "beta": {"type": "number"}}},
        "parts": {"type": "object", "additionalProperties": {"type": "number"}},
    },
    "additionalProperties": False,
    "minProperties": 1,
}


def evaluate_loss_fixture(doc: dict) -> list[tuple[str, float, float]]:
    """Evaluate every loss named in a fixture: ``(name, value, gradient checksum)``.

    The checksum is the plain sum of every gradient entry.  A ``parts``
    entry (or any TWA/ACA kernels present) also yields a ``total`` row.
    """
    try:
        jsonschema.validate(doc, LOSS_FIXTURE_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise SchemaViolation(f"loss fixture: {where}: {exc.message}") from None
    coeff = L.LossCoefficients.from_dict(doc.get("coefficients", {}))
    rows: list[tuple[str, float, float]] = []
    parts: dict[str, float] = {}

    def add(name, rep, part=None):
        checksum = math.fsum(float(v) for g in rep.grads.values() for v in np.ravel(g))
        rows.append((name, rep.value, checksum))
        if part:
            parts[part] = rep.value

    a = np.asarray
    if "l_pat" in doc:
        d = doc["l_pat"]
        add("l_pat", L.l_pat(a(d["I_s"], float), a(d["I_a"], float), a(d["T"], float)), "pat")
    if "l_ffa" in doc:
        d = doc["l_ffa"]
        add("l_ffa", L.l_ffa(a(d["F_s"], float), a(d["F_a"], float)), "ffa")
    if "aca_agent" in doc:
        d = doc["aca_agent"]
        add("aca_agent", L.aca_agent_arrays(d["ids"], a(d["source"], float), a(d["augmented"], float),
                                            coeff.tau, d.get("cross_terms", False)), "aca_a")
    if "aca_group" in doc:
        d = doc["aca_group"]
        add("aca_group", L.aca_group_arrays(a(d["source"], float), a(d["augmented"], float), coeff.tau), "aca_g")
    if "focal_loss" in doc:
        d = doc["focal_loss"]
        add("focal_loss", L.focal_loss(a(d["logits"], float), a(d["targets"], float),
                                       d.get("alpha", coeff.focal_alpha), d.get("gamma", coeff.focal_gamma)))
    if "smooth_l1" in doc:
        d = doc["smooth_l1"]
        add("smooth_l1", L.smooth_l1(a(d["pred"], float), a(d["target"], float), d.get("beta", coeff.smooth_l1_beta)))
    if "parts" in doc:
        unknown = set(doc["parts"]) - set(L.PART_NAMES)
        if unknown:
            raise SchemaViolation(f"loss fixture: unknown parts {sorted(unknown)}")
        parts.update(doc["parts"])
    if parts:
        rows.append(("total", L.total_loss(parts, coeff), 0.0))
    return rows


def cmd_losses(args) -> int:
    path = args.fixture
    if not Path(path).exists():
        packaged = Path(__file__).parent / "fixtures" / path
        if packaged.exists():
            path = packaged
    doc = _read_json(path)
    if not isinstance(doc, dict):
        raise SchemaViolation(f"{path}: loss fixture must be a JSON object")
    rows = evaluate_loss_fixture(doc)
    out = {name: {"value": v, "grad_checksum": c} for name, v, c in rows}
    lines = [f"{name:<11} {v:.15g}  grad_checksum {c:.15g}" for name, v, c in rows]
    _emit(args, out, lines)
    return EXIT_OK


# ---------------------------------------------------------------------------
# gradcheck
# ---------------------------------------------------------------------------


def cmd_gradcheck(args) -> int:
    targets = list(TARGETS) if not args.targets else [t.strip() for t in args.targets.split(",") if t.strip()]
    for t in targets:
        if t not in TARGETS:
            raise UnknownTarget(f"unknown gradcheck target {t!r}; known: {', '.join(TARGETS)}")
    if not args.eps > 0:
        raise InvalidStep(f"finite-difference step must be > 0, got {args.eps}")
    if args.trials is not None and args.trials < 0:
        raise UsageError("--trials must be >= 0")
    rows = []
    if args.trials != 0:
        for t in targets:
            n = DEFAULT_TRIALS[t] if args.trials is None else args.trials
            rows.append(grad_check(t, trials=n, eps=args.eps, seed=args.seed))
    doc = {"rows": [{"target": r.target, "trials": r.trials, "max_rel_err": r.max_rel_err,
                     "threshold": r.threshold, "passed": r.passed,
                     "worst_input": r.worst_input, "worst_index": list(r.worst_index or ())}
                    for r in rows]}
    lines = [f"{'target':<15} {'trials':>6} {'max_rel_err':>12} {'threshold':>10}  status"]
    for r in rows:
        status = "ok" if r.passed else f"FAIL at {r.worst_input}{list(r.worst_index or ())}"
        lines.append(f"{r.target:<15} {r.trials:>6} {r.max_rel_err:>12.3e} {r.threshold:>10.0e}  {status}")
    _emit(args, doc, lines)
    return EXIT_OK if all(r.passed for r in rows) else EXIT_CHECK


# ---------------------------------------------------------------------------
# toyrun
# ---------------------------------------------------------------------------


def cmd_toyrun(args) -> int:
    cfg = toy.PipelineConfig.from_dict(_read_json(args.config)) if args.config else toy.PipelineConfig()
    if args.seed is not None:
        cfg = toy.PipelineConfig(cfg.grid, cfg.awa, cfg.coeff, cfg.shared_thresholds, args.seed, cfg.aca_cross_terms)
    scene: SceneFrame = load_scene(args.scene) if args.scene else toy.make_demo_scene(cfg.seed)
    flows = toy.prepare_flows(scene, cfg)
    enc = toy.EncoderParams.init(cfg.grid.channels, cfg.grid.channels, seed=cfg.seed, scale=args.init_scale)
    fus = toy.FusionParams()
    before = toy.alignment_losses(flows, enc, fus, cfg.coeff, cfg.aca_cross_terms)
    enc, fus, history = toy.descend(flows, enc, fus, cfg.coeff, args.steps, args.lr, cfg.aca_cross_terms)
    after = toy.alignment_losses(flows, enc, fus, cfg.coeff, cfg.aca_cross_terms)
    doc = {
        "config_hash": config_hash(cfg.to_dict()),
        "seed": cfg.seed,
        "steps": args.steps,
        "lr": args.lr,
        "initial": {"value": before.value, "parts": before.parts},
        "final": {"value": after.value, "parts": after.parts},
        "history": history,
    }
    lines = [f"frame {scene.frame_id}: {len(scene.agents)} agent(s), seed {cfg.seed}",
             f"initial objective {before.value:.15g}",
             f"final objective   {after.value:.15g} after {args.steps} step(s) at lr {args.lr:g}"]
    lines += [f"  {k:<6} {before.parts[k]:.10g} -> {after.parts[k]:.10g}" for k in before.parts]
    _emit(args, doc, lines)
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def _floats(text: str, n: int | None = None) -> list[float]:
    try:
        vals = [float(v) for v in text.split(",")]
    except ValueError:
        raise UsageError(f"expected comma-separated numbers, got {text!r}") from None
    if n is not None and len(vals) != n:
        raise UsageError(f"expected {n} comma-separated numbers, got {text!r}")
    return vals


def cmd_eval(args) -> int:
    thresholds = _floats(args.iou)
    for t in thresholds:
        if not 0.0 < t < 1.0:
            raise UsageError(f"IoU thresholds must lie in (0, 1), got {t}")
    if args.range:
        x0, x1, y0, y1 = _floats(args.range, 4)
        rng = ((x0, x1), (y0, y1))
    else:
        rng = EVAL_RANGE
    dets = load_detections(args.detections)
    gts = load_ground_truth(args.ground_truth)
    aps = {f"{t:g}": average_precision(dets, gts, t, rng, bev=args.bev, interpolation=args.interpolation)
           for t in thresholds}
    doc = {"ap": aps, "iou_mode": "bev" if args.bev else "3d", "interpolation": args.interpolation,
           "detections": len(dets), "ground_truth": sum(len(b) for b in gts.values())}
    _emit(args, doc, [f"AP@{k} {v:.4f}" for k, v in aps.items()])
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def _seed(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _common(seed_default: int | None = 0) -> argparse.ArgumentParser:
    # a fresh parent per subcommand: argparse shares parent actions, so defaults would leak
    common = argparse.ArgumentParser(add_help=False)
    seed_help = "root seed (default 0)" if seed_default is not None else "root seed (default: config seed)"
    common.add_argument("--seed", type=_seed, default=seed_default, help=seed_help)
    common.add_argument("--jobs", type=_positive_int, default=1, help="worker processes")
    common.add_argument("--config", help="JSON config file for the subcommand")
    common.add_argument("--json", action="store_true", help="machine-readable output")
    return common


def build_parser() -> argparse.ArgumentParser:

    parser = _Parser(prog="v2xdg", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-weather", parents=[_common()], help="corrupt a dataset with simulated weather")
    p.add_argument("dataset_dir")
    p.add_argument("out_dir")
    p.add_argument("--condition", choices=("clean", "fog", "rain", "snow"), default="fog",
                   help="condition with default parameters when --config is not given")
    p.set_defaults(func=cmd_gen_weather)

    p = sub.add_parser("awa-preview", parents=[_common()], help="augment one cloud and print statistics")
    p.add_argument("cloud")
    p.add_argument("--identity", action="store_true", help="delta forced to 1, no degradation")
    p.add_argument("--out-dir", help="also write the reduced and augmented clouds here")
    p.set_defaults(func=cmd_awa_preview)

    p = sub.add_parser("losses", parents=[_common()], help="evaluate a loss fixture")
    p.add_argument("fixture", help="fixture path, or the name of a packaged fixture")
    p.set_defaults(func=cmd_losses)

    p = sub.add_parser("gradcheck", parents=[_common()], help="finite-difference gradient checks")
    p.add_argument("--targets", help=f"comma-separated subset of: {', '.join(TARGETS)}")
    p.add_argument("--trials", type=int, default=None,
                   help="random instances per target (default 20; 1 for forward_losses)")
    p.add_argument("--eps", type=float, default=1e-5, help="central-difference step")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("toyrun", parents=[_common(None)], help="run the toy pipeline and descend")
    p.add_argument("--scene", help="scene manifest (default: a seeded demo scene)")
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--lr", type=float, default=1e-2)
    p.add_argument("--init-scale", type=float, default=toy.DEMO_INIT_SCALE)
    p.set_defaults(func=cmd_toyrun)

    p = sub.add_parser("eval", parents=[_common()], help="AP of detections against ground truth")
    p.add_argument("detections")
    p.add_argument("ground_truth")
    p.add_argument("--iou", default="0.5,0.7", help="comma-separated IoU thresholds")
    p.add_argument("--range", help="x_min,x_max,y_min,y_max (default -140,140,-40,40)")
    p.add_argument("--bev", action="store_true", help="match on BEV IoU instead of 3D IoU")
    p.add_argument("--interpolation", choices=INTERPOLATIONS, default="all_point")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, UnknownTarget, InvalidStep) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (V2XDGError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
