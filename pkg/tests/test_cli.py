import csv
import io
import json

import numpy as np
import pytest

from rcaqc.cli import ExperimentConfig, assign_folds, main, reference_ids
from rcaqc.quantify import PredictionRecord, records_to_csv
from rcaqc.volume import LabelVolume, load_volume, save_volume


@pytest.fixture(scope="module")
def cohort(tmp_path_factory):
    out = tmp_path_factory.mktemp("cohort")
    assert main(["phantom", "default20", "--subjects", "4", "--out", str(out)]) == 0
    return out


def _manifest(path):
    return json.loads((path / "manifest.json").read_text())


def test_metrics_identical_files(tmp_path, cohort, capsys):
    gt = cohort / _manifest(cohort)["subjects"][0]["gt_labels"]
    assert main(["metrics", str(gt), str(gt)]) == 0
    rows = list(csv.DictReader(io.StringIO(capsys.readouterr().out)))
    assert len(rows) == 4
    assert all(float(r["dsc"]) == 1.0 and float(r["hd_mm"]) == 0.0 for r in rows)
    assert main(["metrics", str(gt), str(gt), "--out", str(tmp_path)]) == 0
    assert (tmp_path / "metrics.csv").exists() and (tmp_path / "metrics.json").exists()


def test_metrics_dimension_mismatch(tmp_path, capsys):
    save_volume(LabelVolume(np.zeros((4, 4, 4), np.uint8)), tmp_path / "a.volj")
    save_volume(LabelVolume(np.zeros((4, 4, 5), np.uint8)), tmp_path / "b.volj")
    assert main(["metrics", str(tmp_path / "a.volj"), str(tmp_path / "b.volj")]) == 2
    assert "error" in capsys.readouterr().err


def test_metrics_matches_manifest(tmp_path, cohort):
    subj = _manifest(cohort)["subjects"][1]
    case = subj["cases"][3]
    assert main(["metrics", str(cohort / case["seg_path"]), str(cohort / subj["gt_labels"]), "--out", str(tmp_path)]) == 0
    rows = {int(r["label"]): r for r in csv.DictReader(open(tmp_path / "metrics.csv"))}
    for label, real in case["real_metrics"].items():
        for metric in ("dsc", "ji", "hd_mm", "asd_mm", "rvd"):
            assert float(rows[int(label)][metric]) == pytest.approx(real[metric], abs=1e-12)


def test_phantom_builtin_and_reproducible(tmp_path):
    assert main(["phantom", "default20", "--subjects", "2", "--no-recipes", "--seed", "5", "--out", str(tmp_path / "a")]) == 0
    assert main(["phantom", "default20", "--subjects", "2", "--no-recipes", "--seed", "5", "--out", str(tmp_path / "b")]) == 0
    for name in ("manifest.json", "s000_image.volj", "s001_gt.volj"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


@pytest.mark.slow
def test_phantom_default_has_twenty_subjects(tmp_path):
    assert main(["phantom", "default20", "--out", str(tmp_path)]) == 0
    doc = _manifest(tmp_path)
    assert len(doc["subjects"]) == 20
    assert sum(len(s["cases"]) for s in doc["subjects"]) == 100


def test_phantom_invalid_spec(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"structures": [{"label": 3}]}))
    assert main(["phantom", str(bad), "--out", str(tmp_path / "c")]) == 2
    assert main(["phantom", "nope", "--out", str(tmp_path / "c")]) == 2
    bad.write_text("{not json")
    assert main(["phantom", str(bad), "--out", str(tmp_path / "c")]) == 2


def test_unknown_command_is_usage_error():
    assert main(["frobnicate"]) == 2
    assert main([]) == 2


def test_calibrate_commands(tmp_path):
    rng = np.random.default_rng(0)
    recs = []
    for s in range(5):
        for lab in (1, 2, 3):
            for _ in range(4):
                real = float(rng.uniform(0.2, 0.9))
                recs.append(PredictionRecord(f"s{s}", lab, "dsc", real - 0.15, real))
    path = tmp_path / "records.csv"
    path.write_text(records_to_csv(recs))
    assert main(["calibrate", str(path), "--out", str(tmp_path / "cal")]) == 0
    report = {(r["backend"], r["variant"]): r for r in json.loads((tmp_path / "cal" / "calibration_report.json").read_text())}
    assert report[("uncalibrated", "all")]["mae"] > 0.14
    assert report[("calibrated", "all")]["mae"] < report[("uncalibrated", "all")]["mae"]
    assert "calibrated" in (tmp_path / "cal" / "calibrated.csv").read_text().splitlines()[0]

    single = tmp_path / "one.csv"
    single.write_text(records_to_csv([r for r in recs if r.subject == "s0"]))
    assert main(["calibrate", str(single), "--out", str(tmp_path / "x")]) == 2
    assert main(["calibrate", str(tmp_path / "missing.csv")]) == 2


def test_predict_empty_seg_and_rerun(tmp_path, cohort):
    subj = _manifest(cohort)["subjects"][0]
    gt = load_volume(cohort / subj["gt_labels"])
    empty = tmp_path / "empty.volj"
    save_volume(gt.with_labels(np.zeros(gt.dims, np.uint8)), empty)
    image = str(cohort / subj["gt_image"])
    assert main(["predict", image, str(empty), str(cohort), "--case-id", subj["id"], "--out", str(tmp_path / "e")]) == 0
    doc = json.loads((tmp_path / "e" / f"{subj['id']}_rca.json").read_text())
    dsc = [p for p in doc["proxies"] if p["metric"] == "dsc"]
    assert all(p["proxy"] == 0.0 and p["zero_support"] for p in dsc)

    seg = str(cohort / subj["cases"][1]["seg_path"])
    args = ["predict", image, seg, str(cohort), "--case-id", subj["id"], "--seed", "3"]
    assert main(args + ["--out", str(tmp_path / "r1")]) == 0
    assert main(args + ["--out", str(tmp_path / "r2")]) == 0
    for ext in ("json", "csv"):
        name = f"{subj['id']}_rca.{ext}"
        assert (tmp_path / "r1" / name).read_bytes() == (tmp_path / "r2" / name).read_bytes()
    doc = json.loads((tmp_path / "r1" / f"{subj['id']}_rca.json").read_text())
    assert subj["id"] not in doc["reference_ids"] and len(doc["reference_ids"]) == 3


def test_predict_missing_references(tmp_path, cohort):
    subj = _manifest(cohort)["subjects"][0]
    image, seg = str(cohort / subj["gt_image"]), str(cohort / subj["gt_labels"])
    assert main(["predict", image, seg, str(tmp_path / "nowhere")]) == 2
    (tmp_path / "empty_refs").mkdir()
    assert main(["predict", image, seg, str(tmp_path / "empty_refs")]) == 2


@pytest.mark.slow
def test_predict_with_24_references(tmp_path):
    refs = tmp_path / "refs"
    assert main(["phantom", "default20", "--subjects", "25", "--no-recipes", "--out", str(refs)]) == 0
    assert main(["predict", str(refs / "s000_image.volj"), str(refs / "s000_gt.volj"), str(refs),
                 "--case-id", "s000", "--out", str(tmp_path / "o")]) == 0
    doc = json.loads((tmp_path / "o" / "s000_rca.json").read_text())
    large = next(p for p in doc["proxies"] if p["label"] == 1 and p["metric"] == "dsc")
    assert len(large["scores"]) == 24
    assert large["proxy"] == max(large["scores"])


def test_folds_partition_and_exclude_self():
    ids = [f"s{i:03d}" for i in range(20)]
    fold_of = assign_folds(ids, 3)
    assert sorted(set(fold_of.values())) == [0, 1, 2]
    for sid in ids:
        for scheme in ("folds", "all-but-self"):
            assert sid not in reference_ids(sid, ids, fold_of, scheme)
    assert len(reference_ids("s000", ids, fold_of, "all-but-self")) == 19


def test_experiment_config_validation():
    with pytest.raises(ValueError):
        ExperimentConfig("m.json", backends=("cnn",)).validate()
    with pytest.raises(ValueError):
        ExperimentConfig.from_dict({"manifest": "m", "colour": 1})
    cfg = ExperimentConfig("m.json", metrics=("dsc", "hd"))
    assert ExperimentConfig.from_dict(cfg.to_dict()) == cfg


def _read_scatter(path):
    return list(csv.DictReader(open(path)))


@pytest.fixture(scope="module")
def experiment(cohort, tmp_path_factory):
    out = tmp_path_factory.mktemp("exp")
    base = ["experiment", str(cohort / "manifest.json"), "--folds", "2", "--metrics", "dsc", "hd",
            "--subjects", "s000", "s002", "--out", str(out)]
    assert main(base) == 0
    assert main(base + ["--aggregation", "top3-mean", "--all-but-self"]) == 0
    assert main(base + ["--all-but-self"]) == 0
    return out


def test_experiment_outputs(experiment):
    run = experiment / "run-001"
    for name in ("config.json", "report.csv", "report.json", "records.csv", "scatter_single-atlas.csv",
                 "predictions_single-atlas.csv", "failures.json"):
        assert (run / name).exists(), name
    scatter = _read_scatter(run / "scatter_single-atlas.csv")
    assert list(scatter[0]) == ["predicted", "real", "label", "metric", "subject", "case"]
    assert len(scatter) == 2 * 5 * 4 * 2
    report = json.loads((run / "report.json").read_text())
    assert {(r["metric"], r["variant"]) for r in report} == {("dsc", "all"), ("dsc", "no-zeros"), ("hd", "all"), ("hd", "no-zeros")}
    # 2 folds over 4 subjects: s000's references are the other fold
    pred = json.loads((run / "predictions" / "single-atlas" / "s000_sev050.json").read_text())
    assert pred["reference_ids"] == ["s002", "s003"]


def test_experiment_runs_are_append_only(experiment):
    assert sorted(p.name for p in experiment.iterdir()) == ["run-001", "run-002", "run-003"]


def test_top3_mean_never_exceeds_max(experiment):
    top3 = _read_scatter(experiment / "run-002" / "scatter_single-atlas.csv")
    best = _read_scatter(experiment / "run-003" / "scatter_single-atlas.csv")
    assert len(top3) == len(best)
    for a, b in zip(top3, best):
        assert (a["case"], a["label"], a["metric"]) == (b["case"], b["label"], b["metric"])
        if a["metric"] == "dsc":
            assert float(a["predicted"]) <= float(b["predicted"])
        else:
            assert float(a["predicted"]) >= float(b["predicted"])


def test_experiment_missing_manifest(tmp_path):
    assert main(["experiment", str(tmp_path / "nope.json"), "--out", str(tmp_path)]) == 2
    assert main(["experiment", "--out", str(tmp_path)]) == 2


def _degraded_run(cohort, out, depth):
    args = ["experiment", str(cohort / "manifest.json"), "--folds", "2", "--metrics", "dsc",
            "--subjects", "s000", "s001", "--degrade-depth", str(depth), "--out", str(out)]
    assert main(args) == 0
    rows = _read_scatter(out / "run-001" / "scatter_single-atlas.csv")
    full = [float(r["real"]) for r in rows if r["case"].endswith("forest-full")]
    shallow = [float(r["real"]) for r in rows if r["case"].endswith(f"forest-depth{depth}")]
    assert len(full) == len(shallow) == 8
    return full, shallow


@pytest.mark.slow
def test_degrade_depth_lowers_real_dsc(cohort, tmp_path):
    full, shallow = _degraded_run(cohort, tmp_path, 4)
    assert np.mean(shallow) < np.mean(full) - 0.1


@pytest.mark.slow
@pytest.mark.xfail(reason="phantom forests already saturate by depth 8; see decisions ledger", strict=False)
def test_degrade_depth_8_lowers_real_dsc(cohort, tmp_path):
    full, shallow = _degraded_run(cohort, tmp_path, 8)
    assert np.mean(shallow) < np.mean(full)
