import zipfile

import numpy as np
import pandas as pd
import pytest
import torch

from ctstop.config import NetworkConfig, OptimizerConfig
from ctstop.ct_core import Sinogram
from ctstop.errors import ArchitectureMismatch, ShapeMismatch
from ctstop.policy_net import build_network, make_optimizer
from ctstop.storage import (
    append_jsonl,
    export_run_bundle,
    load_array,
    load_checkpoint,
    load_sinogram,
    read_jsonl,
    read_table,
    save_array,
    save_checkpoint,
    save_sinogram,
    write_jsonl,
    write_table,
)


def _small_net(grid=16, seed=0):
    return build_network(grid, 180, NetworkConfig(channels=(4, 8), groups=2), seed=seed)


def test_container_keeps_values_and_meta(tmp_path):
    arr = np.arange(12, dtype=np.float64).reshape(3, 4) / 7.0
    json_path, raw_path = save_array(str(tmp_path / "img"), arr, phantom_id="p-1")
    assert raw_path.endswith(".raw")
    assert (tmp_path / "img.raw").stat().st_size == 12 * 4
    data, header = load_array(json_path)
    assert data.dtype == np.float32 and data.shape == (3, 4)
    np.testing.assert_allclose(data, arr, rtol=1e-6)
    assert header["phantom_id"] == "p-1"
    assert header["byteorder"] == "little"


def test_truncated_raw_is_rejected(tmp_path):
    save_array(str(tmp_path / "img"), np.ones((4, 4)))
    raw = tmp_path / "img.raw"
    raw.write_bytes(raw.read_bytes()[:-4])
    with pytest.raises(ShapeMismatch):
        load_array(str(tmp_path / "img.json"))


def test_sinogram_header_carries_angles(tmp_path):
    sino = Sinogram((0, 45, 90), np.ones((3, 5)), noise_level=0.05)
    save_sinogram(str(tmp_path / "scan.json"), sino, current=600)
    back, header = load_sinogram(str(tmp_path / "scan"))
    assert back.angles == (0, 45, 90)
    assert back.noise_level == 0.05
    assert header["current"] == 600


def test_jsonl_append(tmp_path):
    path = str(tmp_path / "log.jsonl")
    write_jsonl(path, [{"a": 1}])
    append_jsonl(path, [{"a": 2}, {"a": 3}])
    assert [r["a"] for r in read_jsonl(path)] == [1, 2, 3]


def test_tables_are_tab_separated(tmp_path):
    path = write_table(str(tmp_path / "t.tsv"), [{"shape": "triangle", "psnr": 21.5}], columns=["shape", "psnr"])
    with open(path, encoding="utf-8") as f:
        assert f.readline().rstrip("\n") == "shape\tpsnr"
    df = read_table(path)
    assert isinstance(df, pd.DataFrame) and df.loc[0, "psnr"] == 21.5


def test_checkpoint_restores_weights_and_optimizer(tmp_path):
    net = _small_net(seed=3)
    opt = make_optimizer(net, OptimizerConfig())
    path = save_checkpoint(str(tmp_path / "ckpt" / "net.pt"), net, opt, step_count=7, episode=42, variant="naive")
    back, payload = load_checkpoint(path, expected_grid=16, expected_actions=180)
    for a, b in zip(net.state_dict().values(), back.state_dict().values()):
        assert torch.equal(a, b)
    assert payload["header"]["episode"] == 42
    assert payload["header"]["variant"] == "naive"
    assert payload["optimizer"] is not None


def test_checkpoint_grid_mismatch(tmp_path):
    path = save_checkpoint(str(tmp_path / "net.pt"), _small_net())
    with pytest.raises(ArchitectureMismatch):
        load_checkpoint(path, expected_grid=32)
    with pytest.raises(ArchitectureMismatch):
        load_checkpoint(path, expected_actions=181)


def test_foreign_file_is_not_a_checkpoint(tmp_path):
    path = str(tmp_path / "other.pt")
    torch.save({"weights": torch.zeros(3)}, path)
    with pytest.raises(ArchitectureMismatch):
        load_checkpoint(path)


def test_run_bundle_contains_all_files(tmp_path):
    run = tmp_path / "20260101_train"
    (run / "checkpoints").mkdir(parents=True)
    (run / "run_config.yaml").write_text("seed: 0\n")
    (run / "checkpoints" / "final.pt").write_bytes(b"x")
    zip_path = export_run_bundle(str(run))
    assert zip_path.endswith("20260101_train.zip")
    with zipfile.ZipFile(zip_path) as z:
        names = set(z.namelist())
    assert names == {"20260101_train/run_config.yaml", "20260101_train/checkpoints/final.pt"}
