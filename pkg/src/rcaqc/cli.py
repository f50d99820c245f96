"""Command-line interface: ``rcaqc {metrics,predict,experiment,calibrate,phantom}``.

Exit codes: 0 success, 1 runtime failure, 2 invalid input or usage.
Log verbosity follows the ``RCA_LOG`` environment variable (a level name,
default ``WARNING``).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import metrics as M
from . import quantify as Q
from .forest import ForestParams, predict_forest, train_atlas_forest
from .phantom import BUILTIN_SPECS, PhantomSpec, default_recipes, generate_cohort
from .rca import (
    AGGREGATIONS,
    ATLAS_FOREST,
    BACKENDS,
    SINGLE_ATLAS,
    BackendOptions,
    FieldCache,
    RcaPrediction,
    predictions_to_csv,
    rca_predict,
)
from .registration import RegistrationParams
from .volume import LabelVolume, ReferenceDatabase, Volume, load_volume

log = logging.getLogger("rcaqc")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2

# A lighter forest than ForestParams() so that a 100-case experiment stays
# within minutes; per-case forests only have to rank quality, not overfit.
EXPERIMENT_FOREST = {"num_trees": 6, "features_per_node": 50, "samples_per_class": 1500, "min_samples_leaf": 5}


class UsageError(ValueError):
    """Bad arguments or inputs; maps to exit code 2."""


# ---------------------------------------------------------------------------
# helpers


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _load_pair(image_path, labels_path) -> tuple:
    img, lab = load_volume(image_path), load_volume(labels_path)
    if not isinstance(img, Volume):
        raise UsageError(f"{image_path} is a label volume, expected an image")
    if not isinstance(lab, LabelVolume):
        raise UsageError(f"{labels_path} is an image volume, expected labels")
    return img, lab


def _load_labels(path) -> LabelVolume:
    vol = load_volume(path)
    if not isinstance(vol, LabelVolume):
        raise UsageError(f"{path} does not hold a label volume")
    return vol


def load_reference_dir(ref_dir, exclude: Sequence[str] = ()) -> ReferenceDatabase:
    """Reference pairs from a cohort directory (``manifest.json``) or ``<id>_image.volj``/``<id>_gt.volj`` files."""
    ref_dir = Path(ref_dir)
    if not ref_dir.is_dir():
        raise UsageError(f"reference directory {ref_dir} not found")
    manifest = ref_dir / "manifest.json"
    if manifest.exists():
        doc = json.loads(manifest.read_text())
        pairs = [(s["id"], ref_dir / s["gt_image"], ref_dir / s["gt_labels"]) for s in doc["subjects"]]
    else:
        pairs = []
        for img in sorted(ref_dir.glob("*_image.volj")):
            rid = img.name[: -len("_image.volj")]
            gt = ref_dir / f"{rid}_gt.volj"
            if gt.exists():
                pairs.append((rid, img, gt))
    pairs = [p for p in pairs if p[0] not in set(exclude)]
    if not pairs:
        raise UsageError(f"no reference pairs found in {ref_dir}")
    entries = [_load_pair(i, g) for _, i, g in pairs]
    return ReferenceDatabase(entries, [p[0] for p in pairs])


def _backend_options(forest: dict, registration: dict, seed: Optional[int] = None) -> BackendOptions:
    fp = dict(forest)
    if seed is not None:
        fp["seed"] = seed
    return BackendOptions(forest=ForestParams(**fp), registration=RegistrationParams(**registration))


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON ({exc})") from exc


# ---------------------------------------------------------------------------
# metrics / predict / calibrate / phantom


def cmd_metrics(args) -> int:
    pred, ref = _load_labels(args.pred), _load_labels(args.ref)
    labels = args.labels or None
    report = M.evaluate_all(pred, ref, labels, case_id=args.id or Path(args.pred).stem)
    if args.out:
        out = Path(args.out)
        _write(out / "metrics.csv", M.reports_to_csv([report]))
        _write(out / "metrics.json", M.reports_to_json([report]))
    else:
        sys.stdout.write(M.reports_to_csv([report]))
    return EXIT_OK


def cmd_predict(args) -> int:
    image, seg = _load_pair(args.image, args.seg)
    case_id = args.case_id or Path(args.seg).stem
    db = load_reference_dir(args.refs, exclude=list(args.exclude) + ([args.case_id] if args.case_id else []))
    cfg = _read_json(args.config) if args.config else {}
    opts = _backend_options(
        {**(EXPERIMENT_FOREST if args.fast_forest else {}), **cfg.get("forest", {})},
        cfg.get("registration", {}),
        args.seed,
    )
    pred = rca_predict(
        image, seg, db, args.backend, opts, aggregation=args.aggregation, case_id=case_id, jobs=args.jobs
    )
    out = Path(args.out or ".")
    _write(out / f"{case_id}_rca.json", pred.to_json())
    _write(out / f"{case_id}_rca.csv", pred.to_csv())
    for label in sorted({k[0] for k in pred.proxies}):
        log.info("%s label %d: predicted dsc %.4f", case_id, label, pred.value(label, "dsc"))
    return EXIT_OK


def calibration_reports(records, metric: str = "dsc", seed: int = 0) -> tuple:
    calibrated = Q.calibrate_loso(records, seed=seed)
    reports = []
    for variant in Q.VARIANTS:
        for is_cal, tag in ((False, "uncalibrated"), (True, "calibrated")):
            try:
                rep = Q.quantify(calibrated, variant, metric, calibrated=is_cal)
            except ValueError as exc:
                log.warning("%s/%s report skipped: %s", variant, tag, exc)
                continue
            rep.backend = f"{rep.backend}:{tag}" if rep.backend else tag
            reports.append(rep)
    return calibrated, reports


def cmd_calibrate(args) -> int:
    path = Path(args.records)
    if not path.exists():
        raise UsageError(f"records file {path} not found")
    records = Q.records_from_csv(path.read_text())
    if not records:
        raise UsageError("records file is empty")
    calibrated, reports = calibration_reports(records, args.metric, args.seed or 0)
    out = Path(args.out or ".")
    _write(out / "calibrated.csv", Q.records_to_csv(calibrated))
    _write(out / "calibration_report.csv", Q.reports_to_csv(reports))
    _write(out / "calibration_report.json", Q.reports_to_json(reports))
    return EXIT_OK


def cmd_phantom(args) -> int:
    if args.spec in BUILTIN_SPECS:
        spec = BUILTIN_SPECS[args.spec](args.seed or 0)
    else:
        path = Path(args.spec)
        if not path.exists():
            raise UsageError(f"{args.spec!r} is neither a builtin spec ({sorted(BUILTIN_SPECS)}) nor a file")
        spec = PhantomSpec.from_dict(_read_json(path))
        if args.seed is not None:
            spec = dataclasses.replace(spec, seed=args.seed)
    spec.validate()
    recipes = [] if args.no_recipes else default_recipes(spec.seed, small_label=spec.num_classes - 1)
    generate_cohort(spec, args.subjects, recipes, Path(args.out or "cohort"))
    return EXIT_OK


# ---------------------------------------------------------------------------
# experiment


@dataclass
class ExperimentConfig:
    manifest: str
    backends: tuple = (SINGLE_ATLAS,)
    metrics: tuple = M.ALL_METRICS
    aggregation: str = "max"
    folds: int = 3
    # "folds": references are the other folds; "all-but-self": every other subject
    reference_scheme: str = "folds"
    jobs: int = 1
    seed: int = 0
    forest: dict = field(default_factory=lambda: dict(EXPERIMENT_FOREST))
    registration: dict = field(default_factory=dict)
    degrade_depth: Optional[int] = None
    subjects: Optional[list] = None  # restrict test subjects; references still use the full cohort

    def validate(self) -> None:
        bad = [b for b in self.backends if b not in BACKENDS]
        if bad or not self.backends:
            raise UsageError(f"unknown backend(s) {bad}; choose from {BACKENDS}")
        bad = [m for m in self.metrics if m not in M.ALL_METRICS]
        if bad or not self.metrics:
            raise UsageError(f"unknown metric(s) {bad}")
        if self.aggregation not in AGGREGATIONS:
            raise UsageError(f"unknown aggregation {self.aggregation!r}")
        if self.reference_scheme not in ("folds", "all-but-self"):
            raise UsageError(f"unknown reference scheme {self.reference_scheme!r}")
        if self.folds < 2:
            raise UsageError("folds must be >= 2")
        if self.jobs < 1:
            raise UsageError("jobs must be >= 1")
        if self.degrade_depth is not None and self.degrade_depth < 1:
            raise UsageError("degrade depth must be >= 1")
        try:
            ForestParams(**self.forest)
            RegistrationParams(**self.registration)
        except TypeError as exc:
            raise UsageError(str(exc)) from exc

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["backends"] = list(self.backends)
        d["metrics"] = list(self.metrics)
        return d

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise UsageError(f"unknown config keys {sorted(unknown)}")
        doc = dict(doc)
        for key in ("backends", "metrics"):
            if key in doc:
                doc[key] = tuple(doc[key])
        return cls(**doc)


def assign_folds(subject_ids: Sequence[str], folds: int) -> dict:
    """Contiguous subject-level folds in manifest order."""
    if len(subject_ids) < folds:
        raise UsageError(f"{len(subject_ids)} subjects cannot form {folds} folds")
    parts = np.array_split(np.arange(len(subject_ids)), folds)
    return {subject_ids[i]: f for f, part in enumerate(parts) for i in part}


def reference_ids(test_id: str, subject_ids: Sequence[str], fold_of: dict, scheme: str) -> list:
    if scheme == "all-but-self":
        return [s for s in subject_ids if s != test_id]
    return [s for s in subject_ids if fold_of[s] != fold_of[test_id]]


def _case_seed(seed: int, *parts: int) -> int:
    return int(np.random.SeedSequence([seed, *parts]).generate_state(1)[0])


def _next_run_dir(out: Path) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    k = 1
    while True:
        run = out / f"run-{k:03d}"
        try:
            run.mkdir()
            return run
        except FileExistsError:
            k += 1


def _real_rows(seg: LabelVolume, gt: LabelVolume, labels) -> dict:
    report = M.evaluate_all(seg, gt, labels)
    return {lab: report[lab] for lab in labels}


def _segmenter_cases(cfg, subj, fold_refs, images, gts, labels) -> list:
    """Cases produced by an atlas-forest segmenter at full depth and at the degraded depth."""
    ref0 = fold_refs[0]
    params = ForestParams(**{**cfg.forest, "seed": _case_seed(cfg.seed, 7, subj["index"])})
    forest = train_atlas_forest(images[ref0], gts[ref0], params)
    cases = []
    for tag, depth in (("forest-full", None), (f"forest-depth{cfg.degrade_depth}", cfg.degrade_depth)):
        seg = predict_forest(forest, images[subj["id"]], depth)
        cases.append({"recipe_id": tag, "seg": seg, "real": _real_rows(seg, gts[subj["id"]], labels)})
    return cases


def run_experiment(cfg: ExperimentConfig, out: Path) -> Path:
    """Run RCA over a cohort; returns the run directory holding all outputs."""
    cfg.validate()
    manifest_path = Path(cfg.manifest)
    if not manifest_path.exists():
        raise UsageError(f"manifest {manifest_path} not found")
    root = manifest_path.parent
    doc = _read_json(manifest_path)
    subjects = doc["subjects"]
    ids = [s["id"] for s in subjects]
    labels = list(range(1, int(doc["num_classes"])))
    fold_of = assign_folds(ids, cfg.folds)
    images, gts = {}, {}
    for s in subjects:
        images[s["id"]], gts[s["id"]] = _load_pair(root / s["gt_image"], root / s["gt_labels"])
    tests = [s for s in subjects if cfg.subjects is None or s["id"] in set(cfg.subjects)]
    if not tests:
        raise UsageError("no test subjects selected")

    run = _next_run_dir(out)
    _write(run / "config.json", json.dumps(cfg.to_dict(), indent=1, sort_keys=True))
    records, failures = [], []
    predictions = {b: [] for b in cfg.backends}
    for subj in tests:
        sid = subj["id"]
        refs = reference_ids(sid, ids, fold_of, cfg.reference_scheme)
        db = ReferenceDatabase([(images[r], gts[r]) for r in refs], refs)
        if cfg.degrade_depth is not None:
            cases = _segmenter_cases(cfg, subj, refs, images, gts, labels)
        else:
            cases = []
            for c in subj["cases"]:
                rows = {int(k): M.MetricRow(**v) for k, v in c["real_metrics"].items()}
                cases.append({"recipe_id": c["recipe_id"], "seg_path": root / c["seg_path"], "real": rows})
        cache = FieldCache()
        tasks = [(b, k, c) for b in cfg.backends for k, c in enumerate(cases)]

        def one(task, sid=sid, db=db, cache=cache, subj=subj):
            backend, k, case = task
            case_id = f"{sid}_{case['recipe_id']}"
            try:
                seg = case["seg"] if "seg" in case else _load_labels(case["seg_path"])
                opts = _backend_options(cfg.forest, cfg.registration, _case_seed(cfg.seed, subj["index"], k))
                # the cache key uses the subject id: every case of a subject shares its registrations
                pred = rca_predict(
                    images[sid], seg, db, backend, opts, cfg.metrics, cfg.aggregation, labels,
                    case_id=sid, cache=cache if backend == SINGLE_ATLAS else None,
                )
                pred.case_id = case_id
                return pred
            except Exception as exc:  # noqa: BLE001 - one failing case must not end the run
                log.error("case %s (%s) failed: %s", case_id, backend, exc)
                return exc

        if cfg.jobs > 1:
            with ThreadPoolExecutor(max_workers=cfg.jobs) as pool:
                results = list(pool.map(one, tasks))
        else:
            results = [one(t) for t in tasks]
        cache.clear()
        for (backend, _, case), res in zip(tasks, results):
            case_id = f"{sid}_{case['recipe_id']}"
            if isinstance(res, Exception):
                failures.append({"case": case_id, "backend": backend, "error": str(res)})
                continue
            predictions[backend].append(res)
            _write(run / "predictions" / backend / f"{case_id}.json", res.to_json())
            for label in labels:
                for metric in cfg.metrics:
                    real = case["real"][label].value(metric)
                    records.append(
                        Q.PredictionRecord(sid, label, metric, res.value(label, metric), real, backend,
                                           case["recipe_id"], case_id)
                    )
        log.info("subject %s done (%d records so far)", sid, len(records))

    _write_experiment_outputs(run, cfg, records, predictions, failures)
    return run


def experiment_reports(records, backends, metrics) -> list:
    reports = []
    for backend in backends:
        recs = [r for r in records if r.backend == backend]
        for metric in metrics:
            for variant in Q.VARIANTS:
                try:
                    reports.append(Q.quantify(recs, variant, metric))
                except ValueError as exc:
                    log.warning("%s %s %s report skipped: %s", backend, metric, variant, exc)
    return reports


SCATTER_COLUMNS = ("predicted", "real", "label", "metric", "subject", "case")


def _write_experiment_outputs(run: Path, cfg, records, predictions, failures) -> None:
    for backend, preds in predictions.items():
        _write(run / f"predictions_{backend}.csv", predictions_to_csv(preds))
        lines = [",".join(SCATTER_COLUMNS)]
        for r in records:
            if r.backend == backend:
                lines.append(f"{r.predicted!r},{r.real!r},{r.label},{r.metric},{r.subject},{r.case}")
        _write(run / f"scatter_{backend}.csv", "\n".join(lines) + "\n")
    _write(run / "records.csv", Q.records_to_csv(records))
    reports = experiment_reports(records, cfg.backends, cfg.metrics)
    _write(run / "report.csv", Q.reports_to_csv(reports))
    _write(run / "report.json", Q.reports_to_json(reports))
    _write(run / "failures.json", json.dumps(failures, indent=1))


def cmd_experiment(args) -> int:
    doc = _read_json(args.config) if args.config else {}
    if args.manifest:
        doc["manifest"] = args.manifest
    if "manifest" not in doc:
        raise UsageError("a cohort manifest is required (positional argument or config key)")
    overrides = {
        "backends": tuple(args.backend) if args.backend else None,
        "metrics": tuple(args.metrics) if args.metrics else None,
        "aggregation": args.aggregation,
        "folds": args.folds,
        "reference_scheme": "all-but-self" if args.all_but_self else None,
        "degrade_depth": args.degrade_depth,
        "seed": args.seed,
        "jobs": args.jobs if args.jobs != 1 else None,
        "subjects": args.subjects,
    }
    doc.update({k: v for k, v in overrides.items() if v is not None})
    cfg = ExperimentConfig.from_dict(doc)
    run = run_experiment(cfg, Path(args.out or "experiment"))
    print(run)
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    # SUPPRESS lets the flags appear before or after the subcommand
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="random seed")
    common.add_argument("--jobs", type=int, default=argparse.SUPPRESS, help="worker threads")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory")

    parser = argparse.ArgumentParser(prog="rcaqc", description="Segmentation quality control by reverse classification accuracy.", parents=[common])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("metrics", parents=[common], help="evaluate a segmentation against a reference")
    p.add_argument("pred")
    p.add_argument("ref")
    p.add_argument("--labels", type=int, nargs="*")
    p.add_argument("--id", default="")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("predict", parents=[common], help="predict segmentation quality without ground truth")
    p.add_argument("image")
    p.add_argument("seg")
    p.add_argument("refs", help="reference directory")
    p.add_argument("--backend", choices=BACKENDS, default=SINGLE_ATLAS)
    p.add_argument("--aggregation", choices=AGGREGATIONS, default="max")
    p.add_argument("--case-id", default="")
    p.add_argument("--exclude", nargs="*", default=[], help="reference ids to leave out")
    p.add_argument("--config", help="JSON with 'forest' and 'registration' parameter overrides")
    p.add_argument("--fast-forest", action="store_true", help="use the lighter experiment forest")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("experiment", parents=[common], help="run RCA over a phantom cohort")
    p.add_argument("manifest", nargs="?")
    p.add_argument("--config")
    p.add_argument("--backend", action="append", choices=BACKENDS)
    p.add_argument("--metrics", nargs="+", choices=M.ALL_METRICS)
    p.add_argument("--aggregation", choices=AGGREGATIONS)
    p.add_argument("--folds", type=int)
    p.add_argument("--all-but-self", action="store_true", help="reference set = every subject except the test one")
    p.add_argument("--degrade-depth", type=int, help="segment with an atlas forest limited to this test depth")
    p.add_argument("--subjects", nargs="+", help="only test these subject ids")
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("calibrate", parents=[common], help="leave-one-subject-out calibration")
    p.add_argument("records")
    p.add_argument("--metric", default="dsc", choices=M.ALL_METRICS)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("phantom", parents=[common], help="generate a synthetic cohort")
    p.add_argument("spec", help=f"builtin name {sorted(BUILTIN_SPECS)} or JSON spec path")
    p.add_argument("--subjects", type=int, default=20)
    p.add_argument("--no-recipes", action="store_true", help="ground truth only")
    p.set_defaults(func=cmd_phantom)
    return parser


def _configure_logging() -> None:
    level = os.environ.get("RCA_LOG", "WARNING").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.WARNING),
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )


def main(argv: Optional[Sequence[str]] = None) -> int:
    _configure_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    for name, default in (("seed", None), ("jobs", 1), ("out", None)):
        if not hasattr(args, name):
            setattr(args, name, default)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001
        log.exception("unexpected failure")
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
