import csv
import json
import shutil

import numpy as np
import pytest

from wmtract import config as cf
from wmtract.cli import main
from wmtract.errors import ConfigError
from wmtract.volgrid import read_nifti

SMALL = [
    "phantom.dims=[16,16,16]", "phantom.start=[3,4,8]", "phantom.end=[12,4,8]", "phantom.bulge=[0,6,0]",
    "phantom.radius=2", "phantom.jitter_radius=[1.5,2]", "phantom.jitter_endpoint=1", "phantom.jitter_bulge=1",
    "phantom.n_train=2", "phantom.n_validate=1", "phantom.n_test=3",
    "network.levels=2", "network.base_channels=4", "train.epochs=1", "train.batch_size=2",
]


def run(*args, sets=()):
    argv = list(args)
    for s in sets:
        argv += ["--set", s]
    return main(argv)


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    sets = SMALL + [f"io.data_dir={root / 'data'}", f"io.run_dir={root / 'run'}", "phantom.snr=null"]
    for cmd in ("make-phantom", "fit-tensor", "train", "segment"):
        assert run(cmd, sets=sets) == 0, cmd
    return root, sets


def test_config_defaults_and_overrides():
    cfg = cf.load_config(None, ["loss.weight=10", "network.architecture=vnet", "seed=5", "roi.size=[8,8,8]"])
    assert cfg["loss"]["weight"] == 10.0 and cfg["network"]["architecture"] == "vnet" and cfg["seed"] == 5
    assert cfg["roi"]["size"] == [8, 8, 8]
    assert cf.defaults()["phantom"]["snr"] == 20.0


@pytest.mark.parametrize(
    "override,path",
    [
        ("loss.weight=0.5", "loss.weight"),
        ("network.architecture=resnet", "network.architecture"),
        ("optim.bogus=1", "optim.bogus"),
        ("nosection.key=1", "nosection.key"),
        ("train.batch_size=two", "train.batch_size"),
        ("io.input=tensor+fa", "network.in_channels"),
        ("io.input=adc", "io.input"),
        ("phantom.dims=[1,2]", "phantom.dims"),
    ],
)
def test_config_errors_name_field(override, path):
    with pytest.raises(ConfigError) as ei:
        cf.load_config(None, [override])
    assert path in str(ei.value)


def test_config_file(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"seed": 3, "optim": {"name": "nadam"}}))
    cfg = cf.load_config(p, ["seed=4"])
    assert cfg["seed"] == 4 and cfg["optim"]["name"] == "nadam"
    p.write_text(json.dumps({"optim": {"nme": "nadam"}}))
    with pytest.raises(ConfigError, match="optim.nme"):
        cf.load_config(p)
    p.write_text("{not json")
    with pytest.raises(ConfigError):
        cf.load_config(p)


def test_exit_codes(tmp_path, capsys):
    assert run("train", sets=["loss.weight=0"]) == 2
    assert "loss.weight" in capsys.readouterr().err
    assert run("train", "--config", str(tmp_path / "missing.json")) == 2
    assert run("train", sets=[f"io.data_dir={tmp_path / 'none'}", f"io.run_dir={tmp_path / 'r'}"]) == 1
    assert "manifest.json" in capsys.readouterr().err
    with pytest.raises(SystemExit):
        main(["frobnicate"])


def test_gradcheck_command(tmp_path):
    assert run("gradcheck", sets=[f"io.run_dir={tmp_path}", "metrics.gradcheck_seeds=2"]) == 0
    rows = list(csv.reader(open(tmp_path / "gradcheck.csv", newline="")))
    assert rows[0] == ["operator", "max_rel_error", "pass"]
    assert len(rows) > 10 and all(r[2] == "pass" for r in rows[1:])
    assert json.loads((tmp_path / "config.json").read_text())["metrics"]["gradcheck_seeds"] == 2


def test_pipeline_outputs(work):
    root, _ = work
    entries = json.loads((root / "data" / "manifest.json").read_text())
    assert [e["split"] for e in entries] == ["train", "train", "validate", "test", "test", "test"]
    assert {"tensor", "fa", "md", "tensor_rescan", "fa_rescan", "md_rescan"} <= set(entries[0]["paths"])
    assert read_nifti(root / "data" / entries[0]["paths"]["tensor"]).channels == 6
    run_dir = root / "run"
    for name in ("best.wmtp", "last.wmtp", "train_log.jsonl", "config.json", "audit.json"):
        assert (run_dir / name).exists()
    assert len((run_dir / "train_log.jsonl").read_text().splitlines()) == 1
    timing = json.loads((run_dir / "segment" / "timing.json").read_text())
    assert sorted(timing) == ["sub-003", "sub-004", "sub-005"]
    for sid in timing:
        for f in ("probability.nii", "mask.nii", "probability_rescan.nii", "mask_rescan.nii"):
            assert (run_dir / "segment" / sid / f).exists()


def test_evaluate_perfect_prediction(work, tmp_path):
    root, sets = work
    run_dir = tmp_path / "run"
    for sid in ("sub-003", "sub-004", "sub-005"):
        d = run_dir / "segment" / sid
        d.mkdir(parents=True)
        shutil.copy(root / "data" / sid / "truth.nii", d / "mask.nii")
    assert run("evaluate", sets=sets + [f"io.run_dir={run_dir}"]) == 0
    summary = json.loads((run_dir / "evaluate" / "summary.json").read_text())
    assert summary["mean_dice"] == 1.0 and summary["n"] == 3
    rows = list(csv.reader(open(run_dir / "evaluate" / "dice.csv", newline="")))
    assert rows[1:] == [[s, "1.0"] for s in ("sub-003", "sub-004", "sub-005")]
    assert (run_dir / "evaluate" / "config.json").exists() or (run_dir / "config.json").exists()


def test_repro_stats_identical_rescans(work, tmp_path):
    root, sets = work
    run_dir = tmp_path / "run"
    for sid in ("sub-003", "sub-004", "sub-005"):
        d = run_dir / "segment" / sid
        d.mkdir(parents=True)
        shutil.copy(root / "data" / sid / "truth.nii", d / "mask.nii")
        shutil.copy(root / "data" / sid / "truth.nii", d / "mask_rescan.nii")
    assert run("repro-stats", sets=sets + [f"io.run_dir={run_dir}"]) == 0
    out = run_dir / "repro"
    rep = json.loads((out / "repro_report.json").read_text())
    assert rep["kappa_mean"] == 1.0
    for name in ("fa", "md", "volume_ml"):
        m = rep["measures"][name]
        assert m["diff_mean"] == 0 and m["paired"]["p"] == 1
        assert m["r2"] == pytest.approx(1.0, abs=1e-12)
        svg = (out / f"bland_altman_{name}.svg").read_text()
        assert svg.count("<circle") == 3 and svg.count("<line") == 3
    first = {p.name: p.read_bytes() for p in out.iterdir()}
    assert run("repro-stats", sets=sets + [f"io.run_dir={run_dir}"]) == 0
    assert {p.name: p.read_bytes() for p in out.iterdir()} == first


def test_segment_missing_checkpoint(work, tmp_path):
    _, sets = work
    assert run("segment", sets=sets + [f"io.checkpoint={tmp_path / 'x.wmtp'}", f"io.run_dir={tmp_path}"]) == 1


def test_module_entry_point(tmp_path):
    import subprocess
    import sys

    r = subprocess.run([sys.executable, "-m", "wmtract", "gradcheck", "--set", "loss.kind=mse"], capture_output=True, text=True)
    assert r.returncode == 2 and "loss.kind" in r.stderr
