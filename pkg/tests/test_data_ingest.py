import hashlib
import os

import numpy as np
import pytest
import tifffile

from ctstop.config import IngestConfig
from ctstop.data_ingest import (
    Disk,
    FanSinogram,
    GroupKey,
    RawScan,
    expected_groups,
    fan_disk_sinogram,
    fan_to_parallel_coords,
    fetch_dataset,
    ingest_group,
    parallel_disk_sinogram,
    preprocess,
    rebin_fan_to_parallel,
    verify_cache,
)
from ctstop.errors import ChecksumMismatch, GeometryMissing
from ctstop.storage import load_sinogram

PAYLOAD = b"projection archive bytes" * 100
RECORD_URL = "https://records.example/api/records/1"


class _Response:
    def __init__(self, body=None, content=b""):
        self._body = body
        self._content = content

    def raise_for_status(self):
        pass

    def json(self):
        return self._body

    def iter_content(self, chunk_size=1):
        for i in range(0, len(self._content), chunk_size):
            yield self._content[i:i + chunk_size]


class FakeSession:
    def __init__(self, content=PAYLOAD, md5=None):
        self.content = content
        self.md5 = md5 or hashlib.md5(content).hexdigest()
        self.calls = []

    def get(self, url, stream=False, timeout=None):
        self.calls.append(url)
        if url == RECORD_URL:
            return _Response(body={"files": [{
                "key": "scans.zip", "size": len(self.content), "checksum": f"md5:{self.md5}",
                "links": {"self": "https://records.example/files/scans.zip"},
            }]})
        return _Response(content=self.content)


class RefusingSession:
    def get(self, *args, **kwargs):
        raise AssertionError("a warm cache must not touch the network")


def test_expected_group_count():
    groups = expected_groups()
    assert len(groups) == 48
    assert GroupKey("pentagon", 12, 100) in groups


def test_fetch_is_idempotent(tmp_path):
    cache = str(tmp_path / "cache")
    session = FakeSession()
    paths = fetch_dataset(RECORD_URL, cache, session=session)
    assert len(session.calls) == 2
    with open(paths[0], "rb") as f:
        assert f.read() == PAYLOAD
    assert os.path.exists(os.path.join(cache, "checksums.tsv"))
    assert fetch_dataset(RECORD_URL, cache, session=RefusingSession()) == paths
    assert verify_cache(cache) == paths


def test_corrupt_cache_is_downloaded_again(tmp_path):
    cache = str(tmp_path / "cache")
    paths = fetch_dataset(RECORD_URL, cache, session=FakeSession())
    with open(paths[0], "r+b") as f:
        f.write(b"XX")
    with pytest.raises(ChecksumMismatch):
        verify_cache(cache)
    session = FakeSession()
    fetch_dataset(RECORD_URL, cache, session=session)
    assert len(session.calls) == 2
    verify_cache(cache)


def test_download_with_wrong_md5_is_rejected(tmp_path):
    cache = str(tmp_path / "cache")
    with pytest.raises(ChecksumMismatch):
        fetch_dataset(RECORD_URL, cache, session=FakeSession(md5="0" * 32))
    assert not os.path.exists(os.path.join(cache, "scans.zip"))


def _raw(intensity_row, flat_row=None, n_proj=3601):
    proj = np.broadcast_to(np.asarray(intensity_row, dtype=np.float32), (n_proj, 10, 956))
    flat = None if flat_row is None else np.tile(np.asarray(flat_row, dtype=np.float64), (10, 1))
    return RawScan(projections=proj, sod=225.0, odd=225.0, detector_pitch=0.1496, flat=flat,
                   dark=np.zeros((10, 956)))


def test_preprocess_decimates_and_takes_logs():
    row = np.linspace(500.0, 1500.0, 956).astype(np.float32)
    fan = preprocess(_raw(row, flat_row=row))
    assert fan.data.shape == (361, 239)
    np.testing.assert_allclose(fan.data, 0.0, atol=1e-12)
    np.testing.assert_allclose(fan.betas[:3], [0.0, 1.0, 2.0])
    assert fan.betas[-1] == pytest.approx(360.0)
    assert fan.sdd == 450.0


def test_less_light_means_more_attenuation():
    flat = np.full(956, 1000.0)
    dim = preprocess(_raw(np.full(956, 250.0), flat_row=flat)).data
    bright = preprocess(_raw(np.full(956, 500.0), flat_row=flat)).data
    np.testing.assert_allclose(bright, np.log(2.0))
    assert np.all(dim > bright)


def test_missing_flat_uses_brightest_pixel():
    fan = preprocess(_raw(np.full(956, 800.0)))
    np.testing.assert_allclose(fan.data, 0.0, atol=1e-12)


def test_central_ray_keeps_its_angle():
    phi, s = fan_to_parallel_coords(np.array([37.0]), np.array([0.0]), 225.0)
    assert phi[0] == 37.0 and s[0] == 0.0


def test_rebinning_reproduces_parallel_disk_projections():
    disks = [Disk(x=2.0, y=-1.0, radius=20.0)]
    betas = np.arange(361, dtype=float)
    detector_u = (np.arange(0, 956, 4) - 477.5) * 0.1496
    fan = fan_disk_sinogram(disks, betas, detector_u, sod=225.0, sdd=450.0)
    parallel = rebin_fan_to_parallel(fan, n_angles=180, n_bins=240)
    assert parallel.sinogram.data.shape == (180, 240)
    assert parallel.bin_spacing == pytest.approx(4 * 0.1496 / 2.0)
    s = (np.arange(240) - 119.5) * parallel.bin_spacing
    expected = parallel_disk_sinogram(disks, np.arange(180), s)
    rel = np.linalg.norm(parallel.sinogram.data - expected) / np.linalg.norm(expected)
    assert rel < 0.02


def test_rebinning_needs_distances():
    fan = FanSinogram(data=np.zeros((361, 8)), betas=np.arange(361.0), detector_u=np.arange(8.0), sod=None, sdd=450.0)
    with pytest.raises(GeometryMissing):
        rebin_fan_to_parallel(fan)


def test_ingest_group_from_tiff_files(tmp_path):
    scan_dir = tmp_path / "raw" / "triangle_01_600uA"
    scan_dir.mkdir(parents=True)
    for i in range(37):
        tifffile.imwrite(str(scan_dir / f"scan_{i:06d}.tif"), np.full((2, 16), 400, dtype=np.uint16))
    tifffile.imwrite(str(scan_dir / "io000000.tif"), np.full((2, 16), 800, dtype=np.uint16))
    (scan_dir / "scan_settings.txt").write_text("SOD : 200 mm\nvoltage: 90\n")
    cfg = IngestConfig(projection_step=1, middle_row=0, column_step=1, detector_pitch=0.5, n_bins=16)
    stem = ingest_group(cfg, GroupKey("triangle", 1, 600), str(tmp_path / "raw"), str(tmp_path / "out"))
    assert os.path.basename(stem) == "triangle_01_600uA"
    sino, header = load_sinogram(stem)
    assert sino.data.shape == (180, 16)
    assert header["current"] == 600 and header["sod"] == 200.0 and header["sdd"] == 425.0
