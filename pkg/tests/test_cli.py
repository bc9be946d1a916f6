import contextlib
import io
import json
import shutil
from pathlib import Path

import numpy as np
import pytest

from osgait.cli import EXIT_CONFIG, EXIT_DIGEST, EXIT_MISSING, EXIT_OK, main
from osgait.dataio import load_recording, write_csv_recording

CONFIG = Path(__file__).resolve().parents[1] / "configs" / "tiny.json"


def run(*argv):
    buf, err = io.StringIO(), io.StringIO()
    with contextlib.redirect_stdout(buf), contextlib.redirect_stderr(err):
        code = main([str(a) for a in argv])
    return code, buf.getvalue() + err.getvalue()


@pytest.fixture(scope="module")
def ws(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run("gen-synth", "--config", CONFIG, "--out", root / "data")[0] == EXIT_OK
    code, out = run("train", "--config", CONFIG, "--data", root / "data", "--out", root / "run")
    assert code == EXIT_OK, out
    assert run("calibrate", "--checkpoint", root / "run" / "checkpoint.pcaa", "--k", "2")[0] == EXIT_OK
    return root


def test_gen_synth_layout_and_determinism(ws, tmp_path):
    files = sorted((ws / "data").glob("*.mmgt"))
    assert len(files) == 5 * 3
    seg = load_recording(files[0])
    assert len(seg) == 60                                   # 6 s at 10 Hz
    assert run("gen-synth", "--config", CONFIG, "--out", tmp_path)[0] == EXIT_OK
    for f in files:
        assert (tmp_path / f.name).read_bytes() == f.read_bytes()
    assert json.loads((ws / "data" / "profiles.json").read_text())[0]["subject_id"] == 1


def test_train_artifacts(ws):
    run_json = json.loads((ws / "run" / "run.json").read_text())
    assert {"config", "config_digest", "checkpoint_sha256", "trial_seed", "split"} <= set(run_json)
    assert (ws / "run" / "history.csv").read_text().startswith("epoch,L_C,L_R,L,L_D,val_L,val_accuracy")
    det = json.loads((ws / "run" / "detector.json").read_text())
    assert det["k"] == 2 and det["checkpoint_digest"] == run_json["checkpoint_sha256"]


def test_eval_checkpoint_rows_per_k(ws):
    code, out = run("eval", "--checkpoint", ws / "run" / "checkpoint.pcaa", "--k", "1,2,4,6", "--out", ws / "ev")
    assert code == EXIT_OK, out
    rep = json.loads((ws / "ev" / "report.json").read_text())
    assert {"config_digest", "trials", "summary", "report_digest"} <= set(rep)
    assert [t["k"] for t in rep["trials"]] == [1, 2, 4, 6]
    assert len((ws / "ev" / "results.csv").read_text().splitlines()) == 5
    assert (ws / "ev" / "confusion_trial0_k4.csv").exists()


def test_full_experiment_is_reproducible(ws, tmp_path):
    args = ("eval", "--config", CONFIG, "--data", ws / "data", "--k", "1,2,4,6", "--trials", "2",
            "--deterministic")
    code, out = run(*args, "--out", tmp_path / "a")
    assert code == EXIT_OK, out
    rep = json.loads((tmp_path / "a" / "report.json").read_text())
    for t in range(2):
        assert sum(r["trial"] == t for r in rep["trials"]) == 4
    code, out2 = run(*args, "--out", tmp_path / "b")
    assert out.splitlines()[-1] == out2.splitlines()[-1]          # report digest line
    assert (tmp_path / "a" / "results.csv").read_bytes() == (tmp_path / "b" / "results.csv").read_bytes()


def test_points_sweep_writes_trend(ws, tmp_path):
    cfg = json.loads(CONFIG.read_text())
    cfg["eval"].update(points=[6, 8], trials=1, ks=[1])
    path = tmp_path / "sweep.json"
    path.write_text(json.dumps(cfg))
    code, out = run("eval", "--config", path, "--data", ws / "data", "--out", tmp_path)
    assert code == EXIT_OK, out
    lines = (tmp_path / "points_sweep.csv").read_text().splitlines()
    assert lines[0] == "N_p,openness,k,mean_f1,dispersion" and [l.split(",")[0] for l in lines[1:]] == ["6", "8"]
    assert (tmp_path / "report_Np6.json").exists()


def test_points_flag_sets_n_p(ws, tmp_path):
    code, out = run("train", "--config", CONFIG, "--data", ws / "data", "--points", 6, "--out", tmp_path)
    assert code == EXIT_OK, out
    assert json.loads((tmp_path / "run.json").read_text())["config"]["model"]["N_p"] == 6


def test_detect_prints_verdict_and_scores(ws):
    rec = sorted((ws / "data").glob("subject01_mod0.mmgt"))[0]
    code, out = run("detect", "--checkpoint", ws / "run" / "checkpoint.pcaa", "--recording", rec)
    assert code == EXIT_OK, out
    lines = out.splitlines()
    assert lines[0] == "Unknown" or lines[0].startswith("Known(")
    assert sum("score=" in l for l in lines) == 2


def test_convert_csv(ws, tmp_path):
    seg = load_recording(ws / "data" / "subject02_mod1.mmgt")
    write_csv_recording(tmp_path / "r.csv", seg)
    code, _ = run("convert", tmp_path / "r.csv", "--out", tmp_path / "r.mmgt", "--subject", 2,
                  "--recording-modality", 1)
    assert code == EXIT_OK
    back = load_recording(tmp_path / "r.mmgt")
    assert back.subject_id == 2 and len(back) == len(seg)
    np.testing.assert_allclose(back.frames[3].points, seg.frames[3].points, rtol=1e-6)


def test_error_exit_codes(ws, tmp_path):
    code, out = run("calibrate", "--checkpoint", tmp_path / "nope.pcaa")
    assert code == EXIT_MISSING and "checkpoint" in out
    bad = tmp_path / "bad.json"
    bad.write_text('{"unknown_section": {}}')
    code, out = run("train", "--config", bad, "--out", tmp_path / "x")
    assert code == EXIT_CONFIG and "unknown key" in out
    # a tampered checkpoint no longer matches the digest recorded in run.json
    shutil.copytree(ws / "run", tmp_path / "run")
    raw = bytearray((tmp_path / "run" / "checkpoint.pcaa").read_bytes())
    raw[100] ^= 1
    (tmp_path / "run" / "checkpoint.pcaa").write_bytes(bytes(raw))
    code, out = run("eval", "--checkpoint", tmp_path / "run" / "checkpoint.pcaa", "--out", tmp_path / "e")
    assert code == EXIT_DIGEST
    # a model config that disagrees with the checkpoint
    other = tmp_path / "other.json"
    cfg = json.loads(CONFIG.read_text())
    cfg["model"]["N_p"] = 12
    other.write_text(json.dumps(cfg))
    code, out = run("calibrate", "--checkpoint", ws / "run" / "checkpoint.pcaa", "--config", other,
                    "--out", tmp_path / "d.json")
    assert code == EXIT_DIGEST
    with pytest.raises(SystemExit):
        run("eval", "--modality", "7", "--out", tmp_path)


def test_detector_for_other_checkpoint_rejected(ws, tmp_path):
    shutil.copytree(ws / "run", tmp_path / "run")
    det = json.loads((tmp_path / "run" / "detector.json").read_text())
    det["checkpoint_digest"] = "0" * 64
    (tmp_path / "run" / "detector.json").write_text(json.dumps(det))
    rec = ws / "data" / "subject01_mod0.mmgt"
    code, out = run("detect", "--checkpoint", tmp_path / "run" / "checkpoint.pcaa", "--recording", rec)
    assert code == EXIT_DIGEST and "different checkpoint" in out


def test_detect_known_subject_after_training(tmp_path):
    cfg = json.loads(CONFIG.read_text())
    cfg["synth"].update(M=4, duration_s=20.0, separability=1.0)
    cfg["train"].update(epochs=15, learning_rate=1e-3)
    cfg["eval"]["unknown_count"] = 1
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg))
    assert run("gen-synth", "--config", path, "--out", tmp_path / "data")[0] == EXIT_OK
    assert run("train", "--config", path, "--data", tmp_path / "data", "--out", tmp_path / "run")[0] == EXIT_OK
    ckpt = tmp_path / "run" / "checkpoint.pcaa"
    assert run("calibrate", "--checkpoint", ckpt, "--k", "5")[0] == EXIT_OK
    known = json.loads((tmp_path / "run" / "run.json").read_text())["split"]["known"]
    code, out = run("detect", "--checkpoint", ckpt, "--recording", tmp_path / "data" / f"subject{known[0]:02d}_mod0.mmgt")
    assert code == EXIT_OK
    assert out.splitlines()[0] == f"Known({known[0]})", out
