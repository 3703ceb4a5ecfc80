import json
import subprocess
import sys

import pytest

from cfekit.cli import EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, build_parser, main
from cfekit.evaluator import annotations_as_detections
from cfekit.network import VARIANTS
from cfekit.synth import load_dataset

TINY_ARCH = {"input_size": 64, "widths": [8, 8, 16]}


def run(*argv):
    return main([str(a) for a in argv])


def manifest(out):
    return json.loads((out / "manifest.json").read_text())


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run("gen", "--count", 40, "--seed", 3, "--out", root / "data") == EXIT_OK
    (root / "arch.json").write_text(json.dumps(TINY_ARCH))
    (root / "train.json").write_text(json.dumps({"epochs": 1, "batch_size": 8}))
    return root


@pytest.fixture(scope="module")
def trained(workspace):
    out = workspace / "run_full"
    code = run("train", "--data", workspace / "data", "--arch", workspace / "arch.json", "--config",
               workspace / "train.json", "--variant", "cfenet_full", "--seed", 1, "--out", out)
    assert code == EXIT_OK
    return out


def test_gen_writes_images_splits_and_manifest(workspace):
    data = workspace / "data"
    assert len(list((data / "images").iterdir())) == 40
    sizes = [len((data / f"{s}.txt").read_text().split()) for s in ("train", "val", "test")]
    assert sizes == [28, 4, 8]
    m = manifest(data)
    assert m["seed"] == 3 and m["command"][:2] == ["cfekit", "gen"]
    assert "annotations.json" in m["artifacts"] and "train.txt" in m["artifacts"]


def test_gen_repeats_give_identical_checksums(workspace, tmp_path):
    assert run("gen", "--count", 40, "--seed", 3, "--out", tmp_path / "again") == EXIT_OK
    assert manifest(tmp_path / "again")["artifacts"] == manifest(workspace / "data")["artifacts"]


def test_gen_with_spec_file(tmp_path):
    from cfekit.synth import toy_scene_spec

    spec = tmp_path / "toy.json"
    spec.write_text(json.dumps(toy_scene_spec(64, seed=2).to_dict()))
    assert run("gen", "--spec", spec, "--count", 10, "--out", tmp_path / "d") == EXIT_OK
    assert len(list((tmp_path / "d" / "images").iterdir())) == 10


def test_gen_zero_count_is_usage_error(tmp_path):
    assert run("gen", "--count", 0, "--out", tmp_path) == EXIT_USAGE


def test_usage_errors(tmp_path, capsys):
    assert run("bogus", "--out", tmp_path) == EXIT_USAGE
    assert run("train", "--data", tmp_path, "--variant", "ssd_plus", "--out", tmp_path) == EXIT_USAGE
    assert "usage error" in capsys.readouterr().err


def test_variant_choices_are_the_five_variants():
    sub = next(a for a in build_parser()._actions if a.dest == "command")
    train = sub.choices["train"]
    variant = next(a for a in train._actions if a.dest == "variant")
    assert tuple(variant.choices) == VARIANTS


def test_missing_data_dir_is_named(tmp_path, capsys):
    missing = tmp_path / "nowhere"
    assert run("train", "--data", missing, "--out", tmp_path / "o") == EXIT_DATA
    assert str(missing) in capsys.readouterr().err


def test_train_outputs(trained):
    for name in ("weights.cfew", "loss_trace.csv", "arch.json", "train_config.json", "manifest.json"):
        assert (trained / name).exists(), name
    m = manifest(trained)
    assert m["seed"] == 1 and set(m["artifacts"]) >= {"weights.cfew", "loss_trace.csv"}
    assert json.loads((trained / "arch.json").read_text())["variant"] == "cfenet_full"


def test_train_is_bit_deterministic_and_variants_differ(workspace, trained, tmp_path):
    args = ["train", "--data", workspace / "data", "--arch", workspace / "arch.json", "--config",
            workspace / "train.json", "--seed", 1]
    assert run(*args, "--variant", "cfenet_full", "--out", tmp_path / "again") == EXIT_OK
    assert (tmp_path / "again" / "weights.cfew").read_bytes() == (trained / "weights.cfew").read_bytes()
    assert run(*args, "--variant", "ssd_baseline", "--out", tmp_path / "base") == EXIT_OK
    assert (tmp_path / "base" / "weights.cfew").stat().st_size < (trained / "weights.cfew").stat().st_size


def test_eval_headline_modes_and_determinism(workspace, trained, tmp_path, capsys):
    common = ["--data", workspace / "data", "--weights", trained / "weights.cfew"]
    assert run("eval", *common, "--out", tmp_path / "a") == EXIT_OK
    assert run("eval", *common, "--out", tmp_path / "b") == EXIT_OK
    assert (tmp_path / "a" / "report.json").read_bytes() == (tmp_path / "b" / "report.json").read_bytes()
    assert run("eval", *common, "--iou-mode", "bdd70", "--out", tmp_path / "c") == EXIT_OK
    coco = json.loads((tmp_path / "a" / "report.json").read_text())
    bdd = json.loads((tmp_path / "c" / "report.json").read_text())
    assert coco["headline"] == coco["ap_5095"] and bdd["headline"] == bdd["ap_iou70"]
    assert (tmp_path / "a" / "per_category.csv").read_text().startswith("category,")


def test_eval_multiscale_routes_through_merge(workspace, trained, tmp_path, monkeypatch):
    import cfekit.postprocess as pp

    calls = []
    original = pp.detect_multi_scale_batch
    monkeypatch.setattr(pp, "detect_multi_scale_batch", lambda *a, **k: calls.append(1) or original(*a, **k))
    code = run("eval", "--data", workspace / "data", "--weights", trained / "weights.cfew", "--multiscale",
               "0.75,1.0,1.5", "--out", tmp_path)
    assert code == EXIT_OK and calls
    assert run("eval", "--data", workspace / "data", "--weights", trained / "weights.cfew", "--multiscale",
               "big", "--out", tmp_path) == EXIT_USAGE


def test_perfect_oracle_detections_score_100(workspace, tmp_path, capsys):
    val = load_dataset(workspace / "data", "val")
    det = tmp_path / "oracle.jsonl"
    det.write_text("".join(json.dumps(d) + "\n" for d in annotations_as_detections(val.annotations)))
    for mode in ("coco", "bdd70"):
        assert run("eval", "--data", workspace / "data", "--detections", det, "--iou-mode", mode,
                   "--out", tmp_path / mode) == EXIT_OK
        assert f"{mode} headline: 100.00" in capsys.readouterr().out


def test_infer_writes_json_lines(workspace, trained, tmp_path):
    assert run("infer", "--data", workspace / "data", "--weights", trained / "weights.cfew", "--out", tmp_path) == 0
    lines = (tmp_path / "detections.jsonl").read_text().splitlines()
    assert lines and set(json.loads(lines[0])) == {"image_id", "category_id", "bbox", "score"}


def test_bad_weights_file_is_data_error(workspace, tmp_path):
    bad = tmp_path / "w.cfew"
    bad.write_bytes(b"garbage")
    (tmp_path / "arch.json").write_text(json.dumps(TINY_ARCH))
    assert run("eval", "--data", workspace / "data", "--weights", bad, "--out", tmp_path / "o") == EXIT_DATA


def test_gradcheck_reports_and_negative_control(tmp_path):
    arch = tmp_path / "a.json"
    arch.write_text(json.dumps({"variant": "ssd_baseline"}))
    assert run("gradcheck", "--arch", arch, "--out", tmp_path / "ok") == EXIT_OK
    rep = json.loads((tmp_path / "ok" / "gradcheck.json").read_text())
    assert rep["passed"] and rep["max_relative_error"] < 1e-3 and isinstance(rep["worst_parameter"], str)
    assert run("gradcheck", "--arch", arch, "--corrupt-gradient", "--out", tmp_path / "bad") == EXIT_NUMERIC
    assert not json.loads((tmp_path / "bad" / "gradcheck.json").read_text())["passed"]


def test_bench_command(tmp_path, capsys):
    arch = tmp_path / "a.json"
    arch.write_text(json.dumps({"widths": [8, 8, 16]}))
    code = run("bench", "--arch", arch, "--variants", "ssd_baseline,cfenet_full", "--input-size", 64,
               "--iterations", 2, "--out", tmp_path / "b")
    assert code == EXIT_OK
    rep = json.loads((tmp_path / "b" / "bench.json").read_text())
    assert [r["variant"] for r in rep["latency"]] == ["ssd_baseline", "cfenet_full"]
    assert rep["latency"][1]["macs"] > rep["latency"][0]["macs"]
    assert rep["factorization"]["spatial_ratio"] == pytest.approx(2 / 7)
    assert run("bench", "--variants", "nope", "--out", tmp_path / "c") == EXIT_USAGE


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "cfekit", "gen", "--count", "3", "--out", str(tmp_path)],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert (tmp_path / "manifest.json").exists()
