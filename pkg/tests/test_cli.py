import json
import subprocess
import sys

import pytest

from dist_ssl.cli import main
from dist_ssl.config import OUT_DIR_ENV
from tests.conftest import TINY_CONFIG


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "tiny.toml"
    path.write_text(TINY_CONFIG)
    return path


def test_missing_config_prints_usage(capsys):
    assert main(["run"]) != 0
    err = capsys.readouterr().err
    assert err.startswith("usage:")
    assert "error: E_USAGE" in err


def test_bad_config_is_one_greppable_line(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text("[data]\nlabeled_fraction = 0\n")
    assert main(["run", "--config", str(bad)]) == 1
    lines = capsys.readouterr().err.strip().splitlines()
    assert lines == [lines[0]] and lines[0].startswith("error: E_CONFIG data.labeled_fraction")


def test_stage2_without_stage1(tmp_path, config_file, capsys):
    assert main(["stage2", "--config", str(config_file), "--out", str(tmp_path / "empty")]) == 1
    assert "stage1 artifacts missing" in capsys.readouterr().err


def test_run_twice_is_byte_identical(tmp_path, config_file):
    for name in ("a", "b"):
        assert main(["run", "--config", str(config_file), "--seed", "1", "--out", str(tmp_path / name)]) == 0
    for rel in ["report.json", "seed_1/report.json", "seed_1/manifests/stage1.tsv", "seed_1/manifests/stage2.tsv"]:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()
    assert json.loads((tmp_path / "a" / "report.json").read_text())["seeds"] == [1]


def test_snapshot_reproduces_the_run(tmp_path, config_file):
    assert main(["run", "--config", str(config_file), "--out", str(tmp_path / "a")]) == 0
    snapshot = tmp_path / "a" / "config.snapshot.toml"
    assert main(["run", "--config", str(snapshot), "--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a" / "report.json").read_bytes() == (tmp_path / "b" / "report.json").read_bytes()


def recount(manifest, metadata):
    labels = {c["id"]: c["label"] for c in json.loads(metadata.read_text())["clips"]}
    counts = {}
    for line in manifest.read_text().splitlines()[1:]:
        cid, cls, _, _, retained, _ = line.split("\t")
        key = ("correct" if int(cls) == labels[cid] else "incorrect") + ("_retained" if retained == "1" else "_discarded")
        counts[key] = counts.get(key, 0) + 1
    return counts


def test_stage1_stage2_and_audit(tmp_path, config_file, capsys):
    out = tmp_path / "run"
    assert main(["stage1", "--config", str(config_file), "--out", str(out)]) == 0
    assert main(["stage2", "--config", str(config_file), "--out", str(out)]) == 0
    assert (out / "seed_0" / "checkpoints" / "student_stage2.bin").is_file()
    capsys.readouterr()
    manifest = out / "seed_0" / "manifests" / "stage1.tsv"
    metadata = out / "seed_0" / "data" / "metadata.json"
    assert main(["audit", "--manifest", str(manifest), "--metadata", str(metadata)]) == 0
    counts = json.loads(capsys.readouterr().out)
    expected = recount(manifest, metadata)
    for key in ("correct_retained", "incorrect_retained", "correct_discarded", "incorrect_discarded"):
        assert counts[key] == expected.get(key, 0)


def test_out_dir_from_environment(tmp_path, config_file, monkeypatch):
    monkeypatch.setenv(OUT_DIR_ENV, str(tmp_path / "env_out"))
    assert main(["supervised", "--config", str(config_file)]) == 0
    assert (tmp_path / "env_out" / "supervised.json").is_file()
    assert main(["supervised", "--config", str(config_file), "--out", str(tmp_path / "flag_out")]) == 0
    assert (tmp_path / "flag_out" / "supervised.json").is_file()


def test_gen_data_and_eval(tmp_path, config_file, capsys):
    data_dir = tmp_path / "data"
    assert main(["gen-data", "--config", str(config_file), "--out", str(data_dir)]) == 0
    assert len(list((data_dir / "clips").iterdir())) == 96
    out = tmp_path / "run"
    assert main(["supervised", "--config", str(config_file), "--out", str(out)]) == 0
    capsys.readouterr()
    model = out / "seed_0" / "checkpoints" / "teacher_e3.bin"
    assert main(["eval", "--config", str(config_file), "--model", str(model), "--data", str(data_dir)]) == 0
    from_disk = json.loads(capsys.readouterr().out)
    assert main(["eval", "--config", str(config_file), "--model", str(model)]) == 0
    regenerated = json.loads(capsys.readouterr().out)
    assert from_disk == regenerated
    assert from_disk["n"] == 10


def test_timeline_command(tmp_path, config_file, capsys):
    out = tmp_path / "run"
    assert main(["supervised", "--config", str(config_file), "--out", str(out)]) == 0
    model = out / "seed_0" / "checkpoints" / "teacher_e3.bin"
    assert main(["timeline", "--config", str(config_file), "--model", str(model),
                 "--phases", "0:3,1:3,2:3", "--out", str(tmp_path / "tl")]) == 0
    lines = (tmp_path / "tl" / "timeline.tsv").read_text().splitlines()
    assert lines[0] == "start\tend\tclass"
    assert [line.split("\t")[0] for line in lines[1:]] == ["0.000", "2.000", "4.000", "6.000"]
    assert (tmp_path / "tl" / "timeline.png").stat().st_size > 0
    assert "window agreement" in capsys.readouterr().out


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "dist_ssl.cli", "audit", "--manifest", str(tmp_path / "x"),
                           "--metadata", str(tmp_path / "y")], capture_output=True, text=True)
    assert proc.returncode == 1
    assert proc.stderr.startswith("error: E_IO")
