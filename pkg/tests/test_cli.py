import csv
import json

import pytest

from fnbounds.cli import main

from conftest import HAVE_CC


def _run(*argv) -> int:
    return main(list(argv))


@pytest.fixture
def synth_dir(tmp_path):
    spec = {
        "n_binaries": 2,
        "functions_per_binary": 8,
        "variants": ["plain"],
        "pad_size": 4,
    }
    spec_path = tmp_path / "spec.json"
    spec_path.write_text(json.dumps(spec))
    out = tmp_path / "corpus"
    rc = _run("corpus", "synth", "--seed", "5", "--spec", str(spec_path), "--out", str(out))
    assert rc == 0
    return out


def test_corpus_synth_writes_files(synth_dir):
    assert (synth_dir / "manifest.csv").is_file()
    assert len(list(synth_dir.glob("*.elf"))) == 2
    assert len(list(synth_dir.glob("*.labels"))) == 2


def test_gt_extract_matches_generator_labels(tmp_path, synth_dir):
    out = tmp_path / "labels"
    rc = _run("gt", "extract", "--manifest", str(synth_dir / "manifest.csv"),
              "--out", str(out))
    assert rc == 0
    for generated in synth_dir.glob("*.labels"):
        extracted = out / generated.name
        assert extracted.read_bytes() == generated.read_bytes()


def test_detect_score_analyze_chain(tmp_path, synth_dir):
    detections = tmp_path / "dets"
    assert _run("detect", "--manifest", str(synth_dir / "manifest.csv"),
                "--detector", "pattern", "--out", str(detections)) == 0
    assert len(list(detections.glob("*.txt"))) == 2

    scores = tmp_path / "scores.csv"
    summary = tmp_path / "summary.csv"
    assert _run("score", "--manifest", str(synth_dir / "manifest.csv"),
                "--detections", str(detections), "--detector-id", "pattern",
                "--out", str(scores), "--summary", str(summary)) == 0
    with open(scores, newline="") as handle:
        rows = [r for r in csv.DictReader(handle)]
    assert {r["class"] for r in rows} == {"S", "E", "SE"}
    assert all(float(r["f1"]) == 1.0 for r in rows)  # plain corpus is easy

    seeds = tmp_path / "seeds.csv"
    assert _run("analyze", "--manifest", str(synth_dir / "manifest.csv"),
                "--detections", str(detections), "--radius", "8", "--k", "4",
                "--out", str(seeds)) == 0
    assert seeds.read_text().startswith("rank,kind,incidence,pattern_hex")


def test_rewrite_inject_and_verify(tmp_path, synth_dir):
    manifest = synth_dir / "manifest.csv"
    with open(manifest, newline="") as handle:
        first = next(csv.DictReader(handle))
    binary_id = first["path"].rsplit(".", 1)[0]

    from fnbounds.binary import load_code_image, load_label_map
    from fnbounds.rewriter import scan_pads

    image = load_code_image(synth_dir / first["path"], image_id=binary_id)
    lm = load_label_map(synth_dir / f"{binary_id}.labels", binary_id, image.domain())
    pad = scan_pads(image, lm)[0]

    plan = tmp_path / "plan.csv"
    plan.write_text(
        "binary,address,length,mode,payload_hex\n"
        f"{binary_id},{pad.address:#x},{pad.length},verbatim_after_return,deadbeef\n"
    )
    out = tmp_path / "mutated"
    assert _run("rewrite", "inject", "--plan", str(plan), "--manifest", str(manifest),
                "--out", str(out)) == 0
    mutated_path = out / f"{binary_id}.elf"
    assert mutated_path.is_file()
    assert _run("rewrite", "verify", "--original", str(synth_dir / first["path"]),
                "--mutated", str(mutated_path), "--plan", str(plan)) == 0

    # tamper outside the pad: verify must fail with exit 3
    blob = bytearray(mutated_path.read_bytes())
    blob[-1] ^= 0xFF
    tampered = out / "tampered.elf"
    tampered.write_bytes(bytes(blob))
    assert _run("rewrite", "verify", "--original", str(synth_dir / first["path"]),
                "--mutated", str(tampered), "--plan", str(plan)) == 3


def test_search_run_cli(tmp_path, synth_dir):
    out = tmp_path / "search"
    rc = _run("search", "run", "--manifest", str(synth_dir / "manifest.csv"),
              "--k", "4", "--budget", "8", "--rng", "1", "--out", str(out),
              "--detector", "pattern", "--no-extents")
    assert rc == 0
    assert (out / "search_log.csv").is_file()
    result = json.loads((out / "result.json").read_text())
    assert set(result) == {"baseline_mean_f1", "best_payload_hex", "best_mean_f1", "delta_f1"}


def test_report_cli(tmp_path, synth_dir):
    detections = tmp_path / "dets"
    scores = tmp_path / "scores.csv"
    _run("detect", "--manifest", str(synth_dir / "manifest.csv"),
         "--detector", "pattern", "--out", str(detections))
    _run("score", "--manifest", str(synth_dir / "manifest.csv"),
         "--detections", str(detections), "--out", str(scores))
    out = tmp_path / "report"
    assert _run("report", "--scores", str(scores), "--out", str(out)) == 0
    assert (out / "summary_table.csv").is_file()
    assert (out / "scatter.csv").is_file()


def test_pipeline_invalid_config_exits_2(tmp_path):
    config = tmp_path / "config.json"
    config.write_text(json.dumps({"detector": "no-such-detector"}))
    assert _run("pipeline", "run", "--config", str(config), "--out", str(tmp_path / "o")) == 2


def test_pipeline_unknown_field_exits_2(tmp_path):
    config = tmp_path / "config.json"
    config.write_text(json.dumps({"detectorr": "pattern"}))
    assert _run("pipeline", "run", "--config", str(config), "--out", str(tmp_path / "o")) == 2


def test_pipeline_smoke_pattern(tmp_path):
    config = tmp_path / "config.json"
    config.write_text(json.dumps({
        "corpus_source": "synth",
        "synth_spec": {"n_binaries": 2, "functions_per_binary": 6, "variants": ["plain"],
                       "pad_size": 4},
        "detector": "pattern",
        "search_enabled": False,
    }))
    out = tmp_path / "out"
    assert _run("pipeline", "run", "--config", str(config), "--out", str(out), "--rng", "3") == 0
    assert (out / "corpus" / "manifest.csv").is_file()
    assert (out / "scores" / "scores.csv").is_file()
    assert (out / "report" / "summary_table.csv").is_file()
    assert not (out / "search").exists()
