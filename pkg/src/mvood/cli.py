"""Command-line pipeline: phantom -> preprocess -> split -> train ->
detect -> evaluate -> report.

One JSON run-config holds a section per stage plus a global seed; each
section validates independently and unknown keys are rejected. Stage
seeds not given explicitly are derived from the global seed and the
stage name, so a single number reproduces the whole pipeline.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from .datasets import (SplitConfig, leakage_check, make_view_triplets,
                       merge_splits, stratified_patient_split)
from .metrics import (BootstrapConfig, EvalReport, binary_metrics, bootstrap_ci,
                      compare_models, macro_auc)
from .models import ModelCheckpoint, VAEConfig, build_model
from .ood import FinetuneConfig, detect, finetune_classifier, iqr_threshold, reconstruction_scores
from .preprocess import PreprocessConfig, extract_labeled_slices, preprocess_volume
from .training import TrainConfig, fit
from .volume import (Manifest, ManifestRecord, PhantomSpec, VIEWS, generate_phantom,
                     load_volume, read_manifest, reslice_mask_views, reslice_views,
                     save_volume, write_manifest)

SCORE_HEADER = ["patient_id", "view", "slice", "label", "score", "prediction"]


def stage_seed(global_seed: int, stage: str) -> int:
    """Deterministic per-stage seed derived from the global seed."""
    digest = hashlib.sha256(f"{global_seed}:{stage}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


def _from_section(cls, section: dict, derived_seed: int | None = None):
    """Build a config dataclass from a JSON section; unknown keys error."""
    if cls is VAEConfig:
        return VAEConfig.from_dict(section)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(section) - names
    if unknown:
        raise ValueError(f"{cls.__name__}: unknown keys {sorted(unknown)}")
    kwargs = dict(section)
    for f in dataclasses.fields(cls):
        if f.name in kwargs and isinstance(kwargs[f.name], list):
            kwargs[f.name] = tuple(kwargs[f.name])
    if derived_seed is not None and "seed" in names and "seed" not in kwargs:
        kwargs["seed"] = derived_seed
    return cls(**kwargs)


class RunConfig:
    """Validated view over the run-config JSON."""

    SECTIONS = {"seed", "phantom", "preprocess", "split", "model", "train",
                "finetune", "bootstrap", "detect"}

    def __init__(self, raw: dict):
        unknown = set(raw) - self.SECTIONS
        if unknown:
            raise ValueError(f"run config: unknown sections {sorted(unknown)}")
        self.raw = raw
        self.seed = int(raw.get("seed", 0))
        detect_section = dict(raw.get("detect", {}))
        unknown = set(detect_section) - {"mvae_eval"}
        if unknown:
            raise ValueError(f"detect section: unknown keys {sorted(unknown)}")
        self.mvae_eval = detect_section.get("mvae_eval", "triplet")
        if self.mvae_eval not in ("triplet", "zero_fill"):
            raise ValueError(f"detect.mvae_eval must be triplet|zero_fill, got {self.mvae_eval!r}")

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path) as fh:
            return cls(json.load(fh))

    def phantom(self) -> PhantomSpec:
        return _from_section(PhantomSpec, self.raw.get("phantom", {}),
                             stage_seed(self.seed, "phantom"))

    def preprocess(self) -> PreprocessConfig:
        return _from_section(PreprocessConfig, self.raw.get("preprocess", {}))

    def split(self) -> SplitConfig:
        return _from_section(SplitConfig, self.raw.get("split", {}),
                             stage_seed(self.seed, "split"))

    def model(self, arch: str) -> VAEConfig:
        section = dict(self.raw.get("model", {}))
        section["multi_view"] = arch == "mvae"
        return _from_section(VAEConfig, section)

    def train(self) -> TrainConfig:
        return _from_section(TrainConfig, self.raw.get("train", {}),
                             stage_seed(self.seed, "train"))

    def finetune(self) -> FinetuneConfig:
        return _from_section(FinetuneConfig, self.raw.get("finetune", {}),
                             stage_seed(self.seed, "finetune"))

    def bootstrap(self) -> BootstrapConfig:
        return _from_section(BootstrapConfig, self.raw.get("bootstrap", {}),
                             stage_seed(self.seed, "bootstrap"))


# ---------------------------------------------------------------------------
# sample assembly from manifests
# ---------------------------------------------------------------------------

def load_split_samples(manifest: Manifest, config: PreprocessConfig) -> dict[str, list]:
    """Per-split lists of SliceSamples (all views) from a tagged manifest."""
    out: dict[str, list] = {"train": [], "tune": [], "eval": [], "": []}
    for record in manifest.records:
        if record.view not in VIEWS:
            continue
        v = load_volume(record.volume_path)
        mask = load_volume(record.mask_path) if record.mask_path else None
        samples = extract_labeled_slices(v, mask, config.slice_size)
        out.setdefault(record.split, []).extend(samples)
    return out


def _axial_only(samples):
    return [s for s in samples if s.view == "axial"]


def _eval_inputs(arch: str, samples, mvae_eval: str):
    """Scoring inputs for one split: triplets for mvae, axial slices else."""
    if arch == "mvae" and mvae_eval == "triplet":
        return make_view_triplets(samples)
    return _axial_only(samples)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_phantom(args) -> int:
    config = RunConfig.load(args.config)
    spec = config.phantom()
    out = Path(args.out)
    records = []
    for volume, mask in generate_phantom(spec):
        vol_path = out / f"{volume.patient_id}_volume3d"
        mask_path = out / f"{volume.patient_id}_mask3d"
        save_volume(volume, vol_path)
        save_volume(mask, mask_path)
        records.append(ManifestRecord(volume.patient_id, "volume3d",
                                      str(vol_path), str(mask_path)))
    write_manifest(Manifest(records), out / "manifest.csv")
    print(f"phantom: wrote {len(records)} patients to {out}")
    return 0


def cmd_preprocess(args) -> int:
    config = RunConfig.load(args.config)
    pconf = config.preprocess()
    manifest = read_manifest(args.manifest)
    out = Path(args.out)
    records = []
    for record in manifest.records:
        if record.view != "volume3d":
            raise ValueError(f"preprocess expects volume3d rows, got {record.view!r}")
        volume = load_volume(record.volume_path)
        mask = load_volume(record.mask_path) if record.mask_path else None
        views = reslice_views(volume)
        mask_views = reslice_mask_views(mask) if mask is not None else (None,) * 3
        for view_vol, view_mask in zip(views, mask_views):
            pv, pm = preprocess_volume(view_vol, view_mask, pconf)
            vol_path = out / f"{record.patient_id}_{view_vol.view}"
            save_volume(pv, vol_path)
            mask_path = ""
            if pm is not None:
                mask_path = str(out / f"{record.patient_id}_{view_vol.view}_mask")
                save_volume(pm, mask_path)
            records.append(ManifestRecord(record.patient_id, view_vol.view,
                                          str(vol_path), mask_path, record.split))
    write_manifest(Manifest(records), out / "manifest.csv")
    print(f"preprocess: wrote {len(records)} view volumes to {out}")
    return 0


def cmd_split(args) -> int:
    config = RunConfig.load(args.config)
    sconf = config.split()
    pconf = config.preprocess()
    manifest = read_manifest(args.manifest)
    samples = []
    for record in manifest.records:
        if record.view not in VIEWS:
            continue
        v = load_volume(record.volume_path)
        mask = load_volume(record.mask_path) if record.mask_path else None
        samples.extend(extract_labeled_slices(v, mask, pconf.slice_size))
    control_splits, case_splits = stratified_patient_split(samples, sconf)
    merged = merge_splits(control_splits, case_splits)
    report = leakage_check(list(merged.values()))
    if not report.ok:
        raise AssertionError(f"leakage detected: {report.violations}")

    assignment = {}
    for name, split in merged.items():
        for pid in split.patient_ids:
            assignment[pid] = name
    for record in manifest.records:
        record.split = assignment.get(record.patient_id, "")
    write_manifest(manifest, args.manifest)

    summary = {
        "leakage_ok": report.ok,
        "splits": {
            name: {
                "patients": len(split.patient_ids),
                "slices": len(split.samples),
                "positive_slices": sum(s.label for s in split.samples),
            }
            for name, split in sorted(merged.items())
        },
    }
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    with open(args.out, "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    print(f"split: {summary['splits']}")
    return 0


def cmd_train(args) -> int:
    config = RunConfig.load(args.config)
    pconf = config.preprocess()
    tconf = config.train()
    mconf = config.model(args.arch)
    manifest = read_manifest(args.manifest)
    by_split = load_split_samples(manifest, pconf)

    if args.arch == "mvae":
        train_samples = make_view_triplets(by_split["train"])
        val_samples = [t for t in make_view_triplets(by_split["tune"]) if t.label == 0]
    else:
        train_samples = _axial_only(by_split["train"])
        val_samples = [s for s in _axial_only(by_split["tune"]) if s.label == 0]

    model = build_model(args.arch, mconf, seed=stage_seed(config.seed, f"model:{args.arch}"))
    _, history = fit(model, train_samples, val_samples, tconf)

    out = Path(args.out)
    ModelCheckpoint(arch=args.arch, config=mconf, params=model.params).save(out)
    history.save_csv(out / "history.csv")
    print(f"train[{args.arch}]: stopped at epoch {history.stopped_epoch}, "
          f"best epoch {history.best_epoch}, "
          f"best val loss {min(history.val_losses):.6f}")
    return 0


def _write_scores(path, detections) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SCORE_HEADER)
        for d in detections:
            writer.writerow([d.sample_id.patient_id, d.sample_id.view, d.sample_id.index,
                             d.label, f"{d.score:.10g}", d.prediction])


def read_scores(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(labels, scores, predictions) from a scores.csv."""
    labels, scores, preds = [], [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != SCORE_HEADER:
            raise ValueError(f"{path}: bad scores header {header}")
        for row in reader:
            labels.append(int(row[3]))
            scores.append(float(row[4]))
            preds.append(int(row[5]))
    return np.array(labels), np.array(scores), np.array(preds)


def cmd_detect(args) -> int:
    config = RunConfig.load(args.config)
    pconf = config.preprocess()
    checkpoint = ModelCheckpoint.load(args.checkpoint)
    manifest = read_manifest(args.manifest)
    by_split = load_split_samples(manifest, pconf)

    if args.mode == "threshold":
        # fence is fit on tuning controls: slices (or whole triplets) with label 0
        tune_inputs = _eval_inputs(checkpoint.arch, by_split["tune"], config.mvae_eval)
        tune_inputs = [s for s in tune_inputs if s.label == 0]
        tune_scores = [s.score for s in
                       reconstruction_scores(checkpoint, tune_inputs, config.mvae_eval)]
        fence = iqr_threshold(tune_scores)
        eval_inputs = _eval_inputs(checkpoint.arch, by_split["eval"], config.mvae_eval)
        detections = detect("threshold", (checkpoint, fence), eval_inputs, config.mvae_eval)
        meta = {"mode": "threshold", "arch": checkpoint.arch,
                "q1": fence.q1, "q3": fence.q3, "iqr": fence.iqr,
                "threshold": fence.threshold}
    else:
        fconf = config.finetune()
        clf, losses = finetune_classifier(checkpoint, _axial_only(by_split["tune"]), fconf)
        eval_inputs = _axial_only(by_split["eval"])
        detections = detect("finetune", clf, eval_inputs)
        meta = {"mode": "finetune", "arch": checkpoint.arch,
                "epochs": fconf.epochs, "final_tune_loss": losses[-1]}

    detections.sort(key=lambda d: (d.sample_id.patient_id, d.sample_id.index))
    _write_scores(args.out, detections)
    with open(Path(args.out).with_suffix(".meta.json"), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
    positives = sum(d.prediction for d in detections)
    print(f"detect[{checkpoint.arch}/{args.mode}]: {len(detections)} slices, "
          f"{positives} flagged positive")
    return 0


METRIC_NAMES = ("accuracy", "precision", "recall", "f1", "sensitivity",
                "specificity", "macro_auc")


def evaluate_scores(name: str, labels, scores, predictions,
                    bconf: BootstrapConfig) -> EvalReport:
    """Point metrics plus stratified bootstrap CIs for one scores set."""
    stacked = np.stack([scores, predictions.astype(np.float64)], axis=1)

    def metric_fn(metric):
        if metric == "macro_auc":
            return lambda st, lb: macro_auc(st[:, 0], lb)
        return lambda st, lb: binary_metrics(st[:, 1].astype(int), lb)[metric]

    metrics = {m: bootstrap_ci(metric_fn(m), stacked, labels, bconf) for m in METRIC_NAMES}
    return EvalReport(
        name=name,
        metrics=metrics,
        n_samples=int(labels.size),
        n_positive=int(labels.sum()),
        bootstrap=bconf,
        notes={"positive_class": "lesion",
               "sensitivity_specificity": "reported alongside precision/recall"},
    )


def cmd_evaluate(args) -> int:
    config = RunConfig.load(args.config)
    bconf = config.bootstrap()
    reports = []
    for path in args.scores:
        labels, scores, preds = read_scores(path)
        reports.append(evaluate_scores(Path(path).stem, labels, scores, preds, bconf))

    payload = {"models": [r.to_dict() for r in reports]}
    if len(reports) == 2:
        comparison = compare_models(reports[0].metrics["macro_auc"].replicates,
                                    reports[1].metrics["macro_auc"].replicates, bconf)
        payload["comparison"] = {
            "metric": "macro_auc",
            "models": [reports[0].name, reports[1].name],
            "wilcoxon_w": comparison.statistic,
            "p_value": comparison.p_value,
            "significant": comparison.significant,
            "alpha": bconf.alpha,
        }
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    with open(args.out, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
    if args.plot:
        write_auc_plot(args.plot, reports)
    for r in reports:
        auc = r.metrics["macro_auc"]
        print(f"evaluate[{r.name}]: macro-AUC {auc.point:.3f} "
              f"[{auc.low:.3f}, {auc.high:.3f}]")
    return 0


def write_auc_plot(path, reports) -> None:
    """Hand-rolled SVG box/CI chart of macro-AUC bootstrap replicates."""
    width, height = 160 * max(1, len(reports)) + 80, 320
    x0, y0, y1 = 60, 20, 280
    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
    ]

    def y_of(v):
        return y1 - (y1 - y0) * v  # AUC in [0, 1]

    for frac in (0.0, 0.25, 0.5, 0.75, 1.0):
        y = y_of(frac)
        lines.append(f'<line x1="{x0}" y1="{y:.1f}" x2="{width - 20}" y2="{y:.1f}" '
                     f'stroke="#ddd"/>')
        lines.append(f'<text x="{x0 - 8}" y="{y + 4:.1f}" font-size="11" '
                     f'text-anchor="end">{frac:.2f}</text>')
    for i, r in enumerate(reports):
        auc = r.metrics["macro_auc"]
        reps = sorted(auc.replicates)
        q1, med, q3 = (float(np.percentile(reps, q, method="linear")) for q in (25, 50, 75))
        cx = x0 + 80 + 160 * i
        lines.append(f'<line x1="{cx}" y1="{y_of(auc.low):.1f}" x2="{cx}" '
                     f'y2="{y_of(auc.high):.1f}" stroke="black"/>')
        lines.append(f'<rect x="{cx - 30}" y="{y_of(q3):.1f}" width="60" '
                     f'height="{y_of(q1) - y_of(q3):.1f}" fill="#9ecae1" stroke="black"/>')
        lines.append(f'<line x1="{cx - 30}" y1="{y_of(med):.1f}" x2="{cx + 30}" '
                     f'y2="{y_of(med):.1f}" stroke="black" stroke-width="2"/>')
        lines.append(f'<circle cx="{cx}" cy="{y_of(auc.point):.1f}" r="3" fill="crimson"/>')
        lines.append(f'<text x="{cx}" y="{y1 + 20}" font-size="12" '
                     f'text-anchor="middle">{r.name}</text>')
    lines.append("</svg>")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("\n".join(lines))


def cmd_report(args) -> int:
    rows = []
    for path in args.inputs:
        with open(path) as fh:
            payload = json.load(fh)
        comparison = payload.get("comparison")
        for model in payload["models"]:
            row = {"name": model["name"]}
            for metric in METRIC_NAMES:
                m = model["metrics"][metric]
                row[metric] = f"{100 * m['point']:.1f} [{100 * m['ci_low']:.1f}, {100 * m['ci_high']:.1f}]"
            if comparison and model["name"] in comparison["models"]:
                row["p_value"] = (f"{comparison['p_value']:.4g}"
                                  + (" *" if comparison["significant"] else ""))
            else:
                row["p_value"] = "-"
            rows.append(row)

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    columns = ["name"] + list(METRIC_NAMES) + ["p_value"]
    with open(out, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        writer.writerows(rows)
    md = out.with_suffix(".md")
    with open(md, "w") as fh:
        fh.write("| " + " | ".join(columns) + " |\n")
        fh.write("|" + "---|" * len(columns) + "\n")
        for row in rows:
            fh.write("| " + " | ".join(str(row[c]) for c in columns) + " |\n")
    print(f"report: wrote {out} and {md} ({len(rows)} rows)")
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mvood",
                                     description="Multi-view VAE OOD lesion detection pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate the synthetic cohort")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_phantom)

    p = sub.add_parser("preprocess", help="reslice, resample, clip, normalize")
    p.add_argument("--config", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_preprocess)

    p = sub.add_parser("split", help="stratified patient-level split")
    p.add_argument("--config", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="split report JSON path")
    p.set_defaults(fn=cmd_split)

    p = sub.add_parser("train", help="train a VAE on control slices")
    p.add_argument("--arch", required=True, choices=["svae", "mvae"])
    p.add_argument("--config", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("detect", help="score evaluation slices")
    p.add_argument("--mode", required=True, choices=["threshold", "finetune"])
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="scores CSV path")
    p.set_defaults(fn=cmd_detect)

    p = sub.add_parser("evaluate", help="metrics, bootstrap CIs, Wilcoxon")
    p.add_argument("--scores", required=True, nargs="+")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="report JSON path")
    p.add_argument("--plot", default=None, help="optional SVG box/CI plot path")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("report", help="aggregate report JSONs into a table")
    p.add_argument("--inputs", required=True, nargs="+")
    p.add_argument("--out", required=True, help="table CSV path (MD written alongside)")
    p.set_defaults(fn=cmd_report)
    return parser


def execute(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 0
    try:
        return args.fn(args)
    except (ValueError, FileNotFoundError, KeyError, AssertionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(execute(sys.argv[1:]))


if __name__ == "__main__":
    main()
