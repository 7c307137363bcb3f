import json
import shutil

import numpy as np
import pytest

from cli import EXIT_IO, EXIT_OK, EXIT_USAGE, content_hash, main
from conftest import random_cloud
from config import build_config
from voxel_pipeline import load_buffers

TINY_CONF = """\
profile = reduced
voxel.range = -3.0, 1.0, -4.0, 4.0, 0.0, 8.0
voxel.max_voxels = 800
voxel.max_points = 8
model.vfe_channels = 4, 8
model.feature_dim = 8
model.middle_channels = 4
model.rpn_block_channels = 8, 8, 8
model.rpn_block_convs = 1, 1, 1
model.rpn_upsample_channels = 8
train.batch_size = 2
train.epochs = 1
train.decay_epoch = 1
"""

LABEL_LINE = "Car 0.00 0 -1.57 600.00 150.00 700.00 250.00 1.56 1.60 3.90 1.00 1.60 20.00 -1.57"


@pytest.fixture
def cloud_file(tmp_path, rng):
    path = tmp_path / "000001.bin"
    random_cloud(rng, build_config("reduced").voxel.range, 3000).points.astype("<f4").tofile(path)
    return path


def _manifest(out_dir):
    with open(out_dir / "manifest.json", encoding="utf-8") as f:
        return json.load(f)


def test_voxelize_stats_and_dump(cloud_file, tmp_path, capsys):
    out = tmp_path / "out"
    dump = tmp_path / "buffers.vxb"
    code = main(["voxelize", "--class", "reduced", "--cloud", str(cloud_file), "--stats", "--dump", str(dump),
                 "--out", str(out)])
    assert code == EXIT_OK
    printed = capsys.readouterr().out
    for key in ("num_voxels", "point_overflow", "voxel_overflow_points", "voxel_overflow_voxels"):
        assert f"{key}:" in printed
    manifest = _manifest(out)
    assert manifest["command"] == "voxelize"
    assert manifest["config"]["profile"] == "reduced"
    assert len(manifest["input_hash"]) == 40
    assert "buffer_build" in manifest["timings"]
    buffers = load_buffers(str(dump))
    assert buffers.num_voxels == manifest["outputs"]["stats"]["num_voxels"]


def test_exit_codes(cloud_file, tmp_path):
    assert main(["voxelize", "--bogus"]) == EXIT_USAGE
    assert main(["voxelize", "--class", "truck", "--cloud", str(cloud_file)]) == EXIT_USAGE
    assert main(["voxelize", "--cloud", str(tmp_path / "missing.bin")]) == EXIT_IO
    truncated = tmp_path / "truncated.bin"
    truncated.write_bytes(cloud_file.read_bytes()[:-3])
    assert main(["voxelize", "--cloud", str(truncated)]) == EXIT_IO
    bad_conf = tmp_path / "bad.conf"
    bad_conf.write_text("voxel.voxel_size = 0.4, 0.3, 0.2\n", encoding="utf-8")
    assert main(["voxelize", "--config", str(bad_conf), "--cloud", str(cloud_file)]) == EXIT_USAGE


def test_selfcheck_filter(tmp_path, capsys):
    assert main(["selfcheck", "--filter", "geometry", "--out", str(tmp_path)]) == EXIT_OK
    assert _manifest(tmp_path)["outputs"]["passed"] is True
    assert main(["selfcheck", "--filter", "nope"]) == EXIT_USAGE


def test_selfcheck_full_flag(tmp_path, monkeypatch):
    import selfcheck

    calls = []

    def fake_run(filter_group=None, full=False):
        calls.append((filter_group, full))
        return selfcheck.SelfCheckReport()

    monkeypatch.setattr(selfcheck, "run_selfcheck", fake_run)
    assert main(["selfcheck", "--filter", "targets", "--full", "--out", str(tmp_path)]) == EXIT_OK
    assert main(["selfcheck", "--filter", "targets"]) == EXIT_OK
    assert calls == [("targets", True), ("targets", False)]


def test_train_then_infer(tmp_path):
    conf = tmp_path / "tiny.conf"
    conf.write_text(TINY_CONF, encoding="utf-8")
    run_dir = tmp_path / "run"
    assert main(["train", "--config", str(conf), "--data", "synthetic:2", "--max-steps", "1",
                 "--out", str(run_dir)]) == EXIT_OK
    assert (run_dir / "loss.csv").exists()
    checkpoint = run_dir / "final.vxpc"
    assert _manifest(run_dir)["outputs"]["checkpoint"] == str(checkpoint)

    infer_dir = tmp_path / "infer"
    assert main(["infer", "--config", str(conf), "--checkpoint", str(checkpoint), "--data", "synthetic:1",
                 "--out", str(infer_dir), "--export-ply", str(tmp_path / "ply")]) == EXIT_OK
    assert (infer_dir / "data" / "000000.txt").exists()
    assert (tmp_path / "ply" / "000000.ply").exists()

    corrupted = tmp_path / "corrupted.vxpc"
    corrupted.write_bytes(b"NOPE" + checkpoint.read_bytes()[4:])
    assert main(["infer", "--config", str(conf), "--checkpoint", str(corrupted), "--data", "synthetic:1"]) == EXIT_IO


def test_eval_on_kitti_files(tmp_path, capsys):
    labels = tmp_path / "label_2"
    results = tmp_path / "results"
    labels.mkdir()
    results.mkdir()
    (labels / "000000.txt").write_text(LABEL_LINE + "\n", encoding="utf-8")
    (results / "000000.txt").write_text(LABEL_LINE + " 0.95\n", encoding="utf-8")
    out = tmp_path / "out"
    assert main(["eval", "--results", str(results), "--labels", str(labels), "--out", str(out)]) == EXIT_OK
    ap = _manifest(out)["outputs"]["ap"]
    assert ap == pytest.approx({"easy": 1.0, "moderate": 1.0, "hard": 1.0})

    assert main(["eval", "--results", str(results), "--labels", str(labels), "--difficulty", "all",
                 "--out", str(out)]) == EXIT_OK
    assert _manifest(out)["outputs"]["ap"] == pytest.approx({"all": 1.0})


def test_content_hash_ignores_location(tmp_path):
    first = tmp_path / "a" / "data"
    first.mkdir(parents=True)
    (first / "x.bin").write_bytes(np.arange(8, dtype=np.float32).tobytes())
    second = tmp_path / "b" / "data"
    shutil.copytree(first, second)
    assert content_hash([str(first)]) == content_hash([str(second)])
    (second / "x.bin").write_bytes(b"changed")
    assert content_hash([str(first)]) != content_hash([str(second)])


def test_bench_reports_stages(tmp_path, capsys):
    conf = tmp_path / "tiny.conf"
    conf.write_text(TINY_CONF, encoding="utf-8")
    assert main(["bench", "--config", str(conf), "--reps", "2", "--points", "2000", "--out", str(tmp_path)]) == EXIT_OK
    bench = _manifest(tmp_path)["outputs"]["bench"]
    assert set(bench) == {"buffer_build", "vfe", "middle", "rpn"}
    assert all(row["runs"] == 2 for row in bench.values())
