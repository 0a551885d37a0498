"""Pipeline stages: synth, scan, stitch, extract, dataset, train, classify,
triage, report.

Every stage reads only the documented on-disk artifacts of earlier stages and
writes only its own, so any stage can be rerun in isolation. All randomness
derives from the global seed through stable per-artifact subseeds; rerunning
with the same config and seed reproduces every CSV and mosaic byte for byte
(report.json carries wall-clock timings and is exempt).
"""

from __future__ import annotations

import csv
import hashlib
import json
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import classify as clf
from . import coreprep, stitcher, svgplot, synthscan, triage
from .config import PipelineConfig
from .errors import ParameterError, PipelineError
from .imaging import Raster, read_raster, read_sequence, write_raster, write_sequence

STAGES = ("synth", "scan", "stitch", "extract", "dataset", "train",
          "classify", "triage", "report")
REPEATS = 3


def subseed(*parts) -> int:
    """Stable 63-bit seed derived from the global seed and artifact identity."""
    data = "\x1f".join(str(p) for p in parts).encode()
    return int.from_bytes(hashlib.sha256(data).digest()[:8], "big") >> 1


def slide_ids(cfg: PipelineConfig) -> tuple[list[str], list[str]]:
    train = [f"train{i:03d}" for i in range(cfg.run.train_slides)]
    test = [f"test{i:03d}" for i in range(cfg.run.test_slides)]
    return train, test


def _scores_grid(cfg: PipelineConfig, sid: str) -> list[list[int | None]]:
    rows, cols = cfg.slide.grid_rows, cfg.slide.grid_cols
    spec = cfg.slide.scores.strip()
    if spec in ("balanced", "random"):
        rng = np.random.default_rng(subseed(cfg.run.seed, "scores", sid))
        n = rows * cols
        if spec == "balanced":
            flat = np.tile(np.arange(4), n // 4 + 1)[:n]
            rng.shuffle(flat)
        else:
            flat = rng.integers(0, 4, n)
        return [[int(flat[r * cols + c]) for c in range(cols)] for r in range(rows)]
    grid: list[list[int | None]] = []
    for row in spec.split(";"):
        cells: list[int | None] = []
        for cell in row.split(","):
            cell = cell.strip()
            cells.append(None if cell.lower() == "x" else int(cell))
        grid.append(cells)
    if len(grid) != rows or any(len(r) != cols for r in grid):
        raise ParameterError(
            f"explicit scores grid must be {rows}x{cols}, got "
            f"{len(grid)}x{set(len(r) for r in grid)}"
        )
    return grid


def _slide_spec(cfg: PipelineConfig, sid: str) -> synthscan.SlideSpec:
    s = cfg.slide
    return synthscan.SlideSpec(
        grid_rows=s.grid_rows, grid_cols=s.grid_cols,
        core_diameter_um=s.core_diameter_um, core_pitch_um=s.core_pitch_um,
        margin_um=s.margin_um, scale=s.scale_um_per_px,
        scores=_scores_grid(cfg, sid),
        seed=subseed(cfg.run.seed, "slide", sid),
        slide_width_um=s.slide_width_um, slide_height_um=s.slide_height_um,
    )


def _load_truth(out: Path, sid: str) -> synthscan.SlideTruth:
    raster = read_raster(out / "slides" / sid / "truth.bin")
    layout = synthscan.load_layout_csv(out / "slides" / sid / "layout.csv")
    return synthscan.SlideTruth(raster, layout)


def _update_report(out: Path, stage: str, info: dict):
    path = out / "report.json"
    report = {}
    if path.is_file():
        with open(path, "r", encoding="utf-8") as fh:
            report = json.load(fh)
    report.setdefault("stages", {})[stage] = info
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=1, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------

def stage_synth(cfg: PipelineConfig, out: Path, jobs: int = 1) -> dict:
    t0 = time.perf_counter()
    train, test = slide_ids(cfg)
    artifacts = []
    area_mm2 = 0.0
    for sid in train + test:
        truth = synthscan.synth_slide(_slide_spec(cfg, sid))
        sdir = out / "slides" / sid
        write_raster(truth.image, sdir / "truth.bin")
        truth.write_layout_csv(sdir / "layout.csv")
        artifacts.append(str(sdir))
        area_mm2 += (truth.image.width * truth.image.height
                     * truth.image.scale ** 2 / 1e6)
    dt = time.perf_counter() - t0
    return {"seconds": dt, "artifacts": artifacts,
            "throughput_mm2_s": area_mm2 / dt if dt > 0 else None}


def stage_scan(cfg: PipelineConfig, out: Path, jobs: int = 1) -> dict:
    t0 = time.perf_counter()
    train, test = slide_ids(cfg)
    artifacts = []
    area_mm2 = 0.0
    scan_rate = None
    for sid in train + test:
        truth = _load_truth(out, sid)
        extent = (truth.image.width * truth.image.scale,
                  truth.image.height * truth.image.scale)
        for rep in range(REPEATS):
            rng = np.random.default_rng(subseed(cfg.run.seed, "phase", sid, rep))
            sc = cfg.scan.scan_config(truth.image.scale, phase_frac=float(rng.random()))
            scan_rate = sc.acquisition_rate_mm2_s
            traj = synthscan.plan_trajectory(sc, extent)
            seq = synthscan.render_frames(truth, traj, sc,
                                          cfg.scan.frame_width_px,
                                          cfg.scan.frame_height_px)
            seq.manifest.trajectory = "trajectory.csv"
            rdir = out / "scans" / sid / f"rep{rep}"
            write_sequence(seq.manifest, seq.frames, rdir)
            traj.write_csv(rdir / "trajectory.csv")
            artifacts.append(str(rdir))
            area_mm2 += extent[0] * extent[1] / 1e6
    dt = time.perf_counter() - t0
    return {"seconds": dt, "artifacts": artifacts,
            "throughput_mm2_s": area_mm2 / dt if dt > 0 else None,
            "acquisition_rate_mm2_s": scan_rate}


def _scan_dirs(cfg: PipelineConfig, out: Path) -> list[tuple[str, int, Path]]:
    train, test = slide_ids(cfg)
    return [
        (sid, rep, out / "scans" / sid / f"rep{rep}")
        for sid in train + test for rep in range(REPEATS)
    ]


def stage_stitch(cfg: PipelineConfig, out: Path, jobs: int = 1) -> dict:
    t0 = time.perf_counter()
    artifacts = []
    area_mm2 = 0.0
    step_um = cfg.scan.stage_speed_um_s / cfg.scan.frame_rate_hz
    for sid, rep, rdir in _scan_dirs(cfg, out):
        manifest, reader = read_sequence(rdir)
        sc = cfg.scan.scan_config(manifest.scale_um_per_px)
        stitched = stitcher.stitch_scan(
            manifest, reader, step_um=step_um, row_pitch_um=sc.row_pitch_um,
            window=cfg.stitch.window, theta_static=cfg.stitch.theta_static,
            refine=cfg.stitch.refine, start_direction=cfg.scan.start_direction,
            jump_frames=cfg.scan.jump_frames,
        )
        mdir = out / "stitch" / sid / f"rep{rep}"
        write_raster(stitched.mosaic, mdir / "mosaic.bin")
        with open(mdir / "placement.json", "w", encoding="utf-8") as fh:
            json.dump({
                "provenance": stitched.provenance,
                "placements": [
                    {"frame": f, "x_px": x, "y_px": y}
                    for f, x, y in stitched.placements
                ],
            }, fh, indent=1, sort_keys=True)
            fh.write("\n")
        artifacts.append(str(mdir))
        area_mm2 += (stitched.mosaic.width * stitched.mosaic.height
                     * stitched.mosaic.scale ** 2 / 1e6)
    dt = time.perf_counter() - t0
    return {"seconds": dt, "artifacts": artifacts,
            "throughput_mm2_s": area_mm2 / dt if dt > 0 else None}


def stage_extract(cfg: PipelineConfig, out: Path, jobs: int = 1) -> dict:
    t0 = time.perf_counter()
    artifacts = []
    warnings: list[str] = []
    diameter_px = cfg.slide.core_diameter_um / cfg.slide.scale_um_per_px

    def one(job):
        sid, rep, _ = job
        mosaic = read_raster(out / "stitch" / sid / f"rep{rep}" / "mosaic.bin")
        balanced = coreprep.white_balance(
            mosaic, block=cfg.coreprep.wb_block,
            variance_threshold=cfg.coreprep.wb_variance_threshold,
            multiplicative=cfg.coreprep.wb_multiplicative,
        )
        boxes = coreprep.segment_cores(balanced, diameter_px,
                                       cfg.coreprep.min_area_fraction)
        grid = coreprep.fit_grid(boxes, cfg.slide.grid_rows, cfg.slide.grid_cols)
        label_map = coreprep.LabelMap.from_csv(
            out / "slides" / sid / "layout.csv",
            cfg.slide.grid_rows, cfg.slide.grid_cols,
        )
        records, warns = coreprep.assign_labels(balanced, grid, label_map, sid, rep)
        cdir = out / "cores" / sid / f"rep{rep}"
        coreprep.write_cores(records, cdir)
        return str(cdir), [f"{sid}/rep{rep}: {w}" for w in warns]

    jobs_list = _scan_dirs(cfg, out)
    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        for cdir, warns in pool.map(one, jobs_list):
            artifacts.append(cdir)
            warnings.extend(warns)
    dt = time.perf_counter() - t0
    return {"seconds": dt, "artifacts": artifacts, "warnings": warnings}


def stage_dataset(cfg: PipelineConfig, out: Path, jobs: int = 1) -> dict:
    t0 = time.perf_counter()
    artifacts = []

    def one(job):
        sid, rep, _ = job
        records = coreprep.read_cores(out / "cores" / sid / f"rep{rep}")
        sdir = out / "stacks" / sid / f"rep{rep}"
        for rec in records:
            seed = subseed(cfg.run.seed, "crop", sid, rep, rec.grid_row, rec.grid_col)
            stack = coreprep.build_stack(rec, seed)
            stack.save(sdir / f"core_r{rec.grid_row}c{rec.grid_col}.bin")
        return str(sdir)

    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        artifacts.extend(pool.map(one, _scan_dirs(cfg, out)))
    dt = time.perf_counter() - t0
    return {"seconds": dt, "artifacts": artifacts}


def _load_stacks(out: Path, sids: list[str]) -> list[coreprep.PatchStack]:
    stacks = []
    for sid in sids:
        for rep in range(REPEATS):
            sdir = out / "stacks" / sid / f"rep{rep}"
            for path in sorted(sdir.glob("*.bin")):
                stacks.append(coreprep.PatchStack.load(path))
    return stacks


def stage_train(cfg: PipelineConfig, out: Path, jobs: int = 1) -> dict:
    t0 = time.perf_counter()
    if cfg.classify.model == "import":
        return {"seconds": 0.0, "skipped": "classifier predictions are imported"}
    train, _ = slide_ids(cfg)
    stacks = [s for s in _load_stacks(out, train) if s.label is not None]
    if not stacks:
        raise PipelineError("no labeled training stacks found")
    features = [clf.extract_features(s) for s in stacks]
    labels = [s.label for s in stacks]
    if cfg.classify.class_count == 2:
        labels = [triage.binarize_label(l) for l in labels]
    model = clf.train_baseline(features, labels, cfg.classify.class_count,
                               epochs=cfg.classify.epochs,
                               learning_rate=cfg.classify.learning_rate,
                               seed=cfg.run.seed)
    path = model.save(out / "model" / "baseline.json")
    dt = time.perf_counter() - t0
    return {"seconds": dt, "artifacts": [str(path)],
            "final_loss": model.training["final_loss"],
            "samples": len(stacks)}


def stage_classify(cfg: PipelineConfig, out: Path, jobs: int = 1) -> dict:
    t0 = time.perf_counter()
    pdir = out / "predictions"
    if cfg.classify.model == "import":
        preds = clf.import_predictions(cfg.classify.import_path,
                                       cfg.classify.class_count)
    else:
        model = clf.BaselineModel.load(out / "model" / "baseline.json")
        _, test = slide_ids(cfg)
        preds = []
        for stack in _load_stacks(out, test):
            preds.append(clf.predict(model, stack, core_id=stack.core_id,
                                     repeat=stack.repeat))
    path = clf.export_predictions(preds, pdir / "predictions.csv")
    dt = time.perf_counter() - t0
    return {"seconds": dt, "artifacts": [str(path)], "predictions": len(preds)}


def _test_truth(cfg: PipelineConfig, out: Path) -> dict[str, int]:
    _, test = slide_ids(cfg)
    truth: dict[str, int] = {}
    for sid in test:
        for site in synthscan.load_layout_csv(out / "slides" / sid / "layout.csv"):
            truth[f"{sid}:r{site.row}c{site.col}"] = site.score
    return truth


def _repeat_sets(preds: list[clf.Prediction],
                 truth: dict[str, int]) -> list[triage.RepeatSet]:
    by_core: dict[str, list[clf.Prediction]] = {}
    for p in preds:
        by_core.setdefault(p.core_id, []).append(p)
    sets = []
    for core_id in sorted(by_core):
        group = by_core[core_id]
        if len(group) != REPEATS:
            raise PipelineError(
                f"core {core_id} has {len(group)} predictions, expected {REPEATS}"
            )
        sets.append(triage.RepeatSet(core_id, tuple(group),
                                     truth.get(core_id)))
    return sets


def _write_sweep_csv(path: Path, curve: triage.SweepCurve):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh)
        wr.writerow(["threshold", "accuracy", "indeterminate_fraction"])
        for p in curve.points:
            wr.writerow([repr(p.threshold),
                         "" if p.accuracy is None else repr(p.accuracy),
                         repr(p.indeterminate_fraction)])


def _write_confusion(path_base: Path, cm: triage.ConfusionMatrix):
    with open(path_base.with_suffix(".csv"), "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh)
        k = cm.counts.shape[0]
        wr.writerow(["truth\\prediction"] + [str(i) for i in range(k)])
        for r in range(k):
            wr.writerow([str(r)] + [str(int(v)) for v in cm.counts[r]])
        wr.writerow(["accuracy", repr(cm.accuracy)])
    with open(path_base.with_suffix(".json"), "w", encoding="utf-8") as fh:
        json.dump({"counts": cm.counts.tolist(), "accuracy": cm.accuracy},
                  fh, indent=1, sort_keys=True)
        fh.write("\n")


def _write_roc_csv(path: Path, curve: triage.RocCurve):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh)
        wr.writerow(["fpr", "tpr"])
        for f, t in zip(curve.fpr, curve.tpr):
            wr.writerow([repr(float(f)), repr(float(t))])
        wr.writerow(["auc", repr(curve.auc)])


def emit_report(results: dict, tdir: Path) -> list[str]:
    """Write sweep/confusion/ROC CSVs and SVGs plus summary.json.

    ``results`` maps class mode ("4"/"2") to per-method curves and matrices,
    as produced by stage_triage.
    """
    tdir.mkdir(parents=True, exist_ok=True)
    written: list[str] = []
    summary: dict = {"class_modes": {}, "methods": list(triage.METHODS)}
    for mode, payload in results.items():
        k = int(mode)
        class_labels = (["0", "1+", "2+", "3+"] if k == 4 else ["0/1+", "2+/3+"])
        mode_summary: dict = {"consistency": payload["consistency"], "methods": {}}
        for method, res in payload["methods"].items():
            curve: triage.SweepCurve = res["sweep"]
            base = f"{method}_{k}class"
            csv_path = tdir / f"sweep_{base}.csv"
            _write_sweep_csv(csv_path, curve)
            svg = svgplot.sweep_svg(
                [p.threshold for p in curve.points],
                [p.accuracy for p in curve.points],
                [p.indeterminate_fraction for p in curve.points],
                curve.theta_at_target, curve.target_rate,
                f"{k}-class {method}: accuracy vs confidence threshold",
            )
            (tdir / f"sweep_{base}.svg").write_text(svg, encoding="utf-8")
            written += [str(csv_path), str(tdir / f"sweep_{base}.svg")]

            for tag, cm in res["confusions"].items():
                base_path = tdir / f"confusion_{method}_{k}class_{tag}"
                _write_confusion(base_path, cm)
                svg = svgplot.confusion_svg(
                    cm.counts, class_labels, cm.accuracy,
                    f"{k}-class {method} confusion ({tag})",
                )
                base_path.with_suffix(".svg").write_text(svg, encoding="utf-8")
                written += [str(base_path.with_suffix(".csv")),
                            str(base_path.with_suffix(".json")),
                            str(base_path.with_suffix(".svg"))]

            if res.get("roc") is not None:
                roc: triage.RocCurve = res["roc"]
                _write_roc_csv(tdir / f"roc_{base}.csv", roc)
                svg = svgplot.roc_svg(roc.fpr, roc.tpr, roc.auc,
                                      f"{k}-class {method} ROC")
                (tdir / f"roc_{base}.svg").write_text(svg, encoding="utf-8")
                written += [str(tdir / f"roc_{base}.csv"),
                            str(tdir / f"roc_{base}.svg")]

            mode_summary["methods"][method] = {
                "accuracy_theta0": res["accuracy_theta0"],
                "theta_at_target": curve.theta_at_target,
                "accuracy_at_target": res["accuracy_at_target"],
                "indeterminate_at_target": res["indeterminate_at_target"],
                "auc": None if res.get("roc") is None else res["roc"].auc,
            }
        summary["class_modes"][mode] = mode_summary
    spath = tdir / "summary.json"
    with open(spath, "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=1, sort_keys=True)
        fh.write("\n")
    written.append(str(spath))
    return written


def _evaluate_mode(sets: list[triage.RepeatSet], truth: dict[str, int],
                   cfg: PipelineConfig, class_count: int) -> dict:
    grid = cfg.triage.grid()
    target = cfg.triage.target_indeterminate
    _, overall_consistency = triage.consistency(sets)
    payload: dict = {"consistency": overall_consistency, "methods": {}}
    for method in triage.METHODS:
        decisions = triage.aggregate_all(sets, method,
                                         cfg.triage.normalize_weighted)
        curve = triage.sweep(decisions, truth, grid, target)
        det0, _ = triage.apply_threshold(decisions, 0.0)
        cm0 = triage.confusion(det0, truth, class_count)
        res: dict = {"sweep": curve, "accuracy_theta0": cm0.accuracy,
                     "confusions": {"theta0": cm0}}
        theta = curve.theta_at_target
        if theta is not None:
            det_t, frac_t = triage.apply_threshold(decisions, theta)
            res["indeterminate_at_target"] = frac_t
            if det_t:
                cm_t = triage.confusion(det_t, truth, class_count)
                res["confusions"]["target"] = cm_t
                res["accuracy_at_target"] = cm_t.accuracy
            else:
                res["accuracy_at_target"] = None
        else:
            res["indeterminate_at_target"] = None
            res["accuracy_at_target"] = None
        if class_count == 2:
            truths = [truth[d.core_id] for d in decisions]
            scores = [d.positive_probability for d in decisions]
            if any(s is None for s in scores):
                res["roc"] = None
            else:
                res["roc"] = triage.roc_auc(truths, scores)
        else:
            res["roc"] = None
        payload["methods"][method] = res
    return payload


def stage_triage(cfg: PipelineConfig, out: Path, jobs: int = 1) -> dict:
    t0 = time.perf_counter()
    preds = clf.import_predictions(out / "predictions" / "predictions.csv",
                                   cfg.classify.class_count)
    truth4 = _test_truth(cfg, out)
    sets = _repeat_sets(preds, truth4)
    missing = [s.core_id for s in sets if s.true_label is None]
    if missing:
        raise PipelineError(f"predictions without ground truth: {missing[:5]}")

    results: dict[str, dict] = {}
    if cfg.classify.class_count == 4:
        results["4"] = _evaluate_mode(sets, truth4, cfg, 4)
        sets2 = [triage.binarize_repeat_set(s) for s in sets]
        truth2 = {k: triage.binarize_label(v) for k, v in truth4.items()}
        results["2"] = _evaluate_mode(sets2, truth2, cfg, 2)
    else:
        truth2 = {k: triage.binarize_label(v) for k, v in truth4.items()}
        twos = [triage.RepeatSet(s.core_id, s.predictions, truth2[s.core_id])
                for s in sets]
        results["2"] = _evaluate_mode(twos, truth2, cfg, 2)

    written = emit_report(results, out / "triage")
    dt = time.perf_counter() - t0
    return {"seconds": dt, "artifacts": written}


def stage_report(cfg: PipelineConfig, out: Path, jobs: int = 1) -> dict:
    """Validate artifact paths and surface the metric summary."""
    t0 = time.perf_counter()
    path = out / "report.json"
    if not path.is_file():
        raise PipelineError("no report.json; run earlier stages first")
    with open(path, "r", encoding="utf-8") as fh:
        report = json.load(fh)
    missing = []
    for stage, info in report.get("stages", {}).items():
        for artifact in info.get("artifacts", []):
            if not Path(artifact).exists():
                missing.append(f"{stage}: {artifact}")
    if missing:
        raise PipelineError(f"missing artifacts: {missing[:5]}")
    summary_path = out / "triage" / "summary.json"
    summary = None
    if summary_path.is_file():
        with open(summary_path, "r", encoding="utf-8") as fh:
            summary = json.load(fh)
    dt = time.perf_counter() - t0
    return {"seconds": dt, "summary": summary,
            "artifacts": [str(summary_path)] if summary else []}


STAGE_FUNCS = {
    "synth": stage_synth, "scan": stage_scan, "stitch": stage_stitch,
    "extract": stage_extract, "dataset": stage_dataset, "train": stage_train,
    "classify": stage_classify, "triage": stage_triage, "report": stage_report,
}


def run_stage(name: str, cfg: PipelineConfig, out: Path, jobs: int = 1) -> dict:
    if name not in STAGE_FUNCS:
        raise ParameterError(f"unknown stage {name!r}; expected one of {STAGES}")
    out.mkdir(parents=True, exist_ok=True)
    info = STAGE_FUNCS[name](cfg, out, jobs)
    _update_report(out, name, info)
    return info


def run_pipeline(cfg: PipelineConfig, out: Path, jobs: int = 1) -> dict:
    infos = {}
    for name in STAGES:
        infos[name] = run_stage(name, cfg, out, jobs)
    return infos
