import json
import subprocess
import sys

import pytest

from abd.cli import main

TINY = ["--epochs", "1", "--d-model", "8", "--d-state", "4", "--n-layers", "1"]


def pipeline(root, seed=7, patients=30):
    root.mkdir()
    c = str(root / "c.jsonl")
    assert main(["gen", "--variant", "base", "--patients", str(patients), "--seed", str(seed), "--out", c]) == 0
    assert main(["prep", "--cohort", c, "--out", str(root / "prep")]) == 0
    assert main(["label", "--cohort", c, "--out", str(root / "lab")]) == 0
    assert main(["train", "--cohort", c, "--seed", str(seed), "--out", str(root / "run"), "--only-folds", "0", "1",
                 *TINY]) == 0
    assert main(["eval", "--pred", str(root / "run" / "predictions.jsonl"), "--labels",
                 str(root / "lab" / "labels.jsonl"), "--lead", "4", "--out", str(root / "ev")]) == 0
    return root


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    base = tmp_path_factory.mktemp("cli")
    return pipeline(base / "a"), pipeline(base / "b")


def test_pipeline_artifacts(runs):
    a, _ = runs
    assert (a / "c.jsonl").exists() and (a / "c.truth.jsonl").exists()
    assert {p.name for p in (a / "prep").iterdir()} == {"vocab.json", "cleaned.jsonl", "windows.jsonl"}
    assert (a / "lab" / "markov.csv").read_text().startswith("from,Normal,Delirium,Coma,Deceased,Exit")
    for f in (0, 1):
        assert (a / "run" / f"fold{f}" / "manifest.json").exists()
        assert (a / "run" / f"fold{f}" / "loss_log.csv").read_text().startswith("fold,epoch,train_loss,val_loss")
    m = json.loads((a / "ev" / "metrics.json").read_text())
    assert m["n_folds"] == 2 and "4" in m["lead"]
    assert "lead_4" in (a / "ev" / "metrics.csv").read_text().splitlines()[0]
    assert (a / "ev" / "fp_offsets.csv").read_text().startswith("class,offset_intervals,count")


def test_pipeline_byte_identical(runs):
    a, b = runs
    for rel in ("c.jsonl", "c.truth.jsonl", "prep/vocab.json", "lab/labels.jsonl", "run/predictions.jsonl",
                "run/fold0/params.bin", "ev/metrics.json", "ev/metrics.csv"):
        assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel


def test_eval_from_checkpoints_and_report(runs, tmp_path):
    a, _ = runs
    other = str(tmp_path / "hb.jsonl")
    assert main(["gen", "--variant", "hospital_b", "--patients", "15", "--seed", "3", "--out", other]) == 0
    assert main(["eval", "--checkpoints", str(a / "run"), "--cohort", other, "--group-by", "sex_male",
                 "--out", str(tmp_path / "x")]) == 0
    m = json.loads((tmp_path / "x" / "metrics.json").read_text())
    assert m["meta"]["source"] == "checkpoints" and m["groups"]
    assert main(["report", "--metrics", f"in={a / 'ev' / 'metrics.json'}", f"out={tmp_path / 'x' / 'metrics.json'}",
                 "--out", str(tmp_path / "rep")]) == 0
    head = (tmp_path / "rep" / "table_auroc.csv").read_text().splitlines()[0]
    assert head == "head,class,in,out"
    assert (tmp_path / "rep" / "table_external.csv").read_text().splitlines()[0] == "head,class,out"
    assert "in:lead_4" in (tmp_path / "rep" / "table_lead.csv").read_text()


def test_ablation_flag(tmp_path):
    c = str(tmp_path / "c.jsonl")
    main(["gen", "--patients", "15", "--seed", "1", "--out", c])
    assert main(["train", "--cohort", c, "--seed", "1", "--out", str(tmp_path / "r"), "--only-folds", "0",
                 "--ablate-transition-head", *TINY]) == 0
    manifest = json.loads((tmp_path / "r" / "fold0" / "manifest.json").read_text())
    assert manifest["meta"]["transition_head"] is False


def test_config_overrides_flags(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"patients": 12, "seed": 5}))
    out = tmp_path / "c.jsonl"
    assert main(["gen", "--patients", "99", "--seed", "1", "--out", str(out), "--config", str(cfg)]) == 0
    assert len({json.loads(l)["patient_id"] for l in out.read_text().splitlines()}) == 12
    cfg.write_text(json.dumps({"bogus": 1}))
    assert main(["gen", "--seed", "1", "--out", str(out), "--config", str(cfg)]) == 1


def test_exit_codes(tmp_path, capsys):
    assert main(["gen", "--out", str(tmp_path / "c.jsonl"), "--bogus"]) == 1
    assert "usage" in capsys.readouterr().err
    assert main(["nonsense"]) == 1
    assert main(["gen", "--out", str(tmp_path / "c.jsonl")]) == 1  # seed is mandatory
    assert main(["label", "--cohort", str(tmp_path / "missing.jsonl"), "--out", str(tmp_path / "o")]) == 2
    assert main(["eval", "--pred", str(tmp_path / "p.jsonl"), "--labels", str(tmp_path / "l.jsonl"),
                 "--out", str(tmp_path / "e")]) == 2
    assert main(["eval", "--out", str(tmp_path / "e")]) == 1
    assert main(["gen", "--seed", "1", "--out", str(tmp_path / "c.jsonl"), "--threads", "0"]) == 1


def test_threads_env(tmp_path, monkeypatch):
    monkeypatch.setenv("ABD_THREADS", "x")
    assert main(["gen", "--seed", "1", "--out", str(tmp_path / "c.jsonl")]) == 1
    monkeypatch.setenv("ABD_THREADS", "2")
    assert main(["gen", "--seed", "1", "--patients", "10", "--out", str(tmp_path / "c.jsonl")]) == 0


def test_console_script_help():
    r = subprocess.run([sys.executable, "-m", "abd.cli", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "gen" in r.stdout
