"""Experimental scans: download, flat/dark correction, decimation and fan-to-parallel rebinning."""
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple
import glob
import hashlib
import os
import zipfile

import numpy as np
import requests
import tifffile
from filelock import FileLock
from scipy.ndimage import map_coordinates

from .config import IngestConfig, ensure_dir
from .ct_core import Sinogram
from .errors import ChecksumMismatch, DataError, GeometryMissing, MissingFlatField, NetworkError, ShapeMismatch
from .logging_utils import get_logger, Timer
from .storage import read_table, save_sinogram, write_table

logger = get_logger("data_ingest")

MANIFEST_NAME = "checksums.tsv"
EXPECTED_PROJECTIONS = 3601
CHUNK_BYTES = 1 << 20
LOG_FLOOR = 1e-6


# ----------------------------------------------------------------- types

@dataclass(frozen=True)
class GroupKey:
    shape: str
    sample: int
    current: int

    @property
    def slug(self) -> str:
        return f"{self.shape}_{self.sample:02d}_{self.current}uA"


def expected_groups(cfg: Optional[IngestConfig] = None) -> List[GroupKey]:
    """2 shapes x 12 samples x 2 emission currents."""
    cfg = cfg or IngestConfig()
    return [GroupKey(s, int(n), int(c)) for s in cfg.shapes for n in cfg.samples for c in cfg.currents]


@dataclass
class RawScan:
    projections: np.ndarray  # (n_proj, rows, cols) intensities
    sod: Optional[float]
    odd: Optional[float]
    detector_pitch: float
    emission_current: Optional[int] = None
    shape_label: Optional[str] = None
    flat: Optional[np.ndarray] = None  # (rows, cols)
    dark: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.projections.ndim != 3:
            raise ShapeMismatch(f"raw projections must be (n, rows, cols), got {self.projections.shape}")
        for name in ("flat", "dark"):
            ref = getattr(self, name)
            if ref is not None and ref.shape != self.projections.shape[1:]:
                raise ShapeMismatch(f"{name} field {ref.shape} does not match detector {self.projections.shape[1:]}")

    @property
    def n_projections(self) -> int:
        return self.projections.shape[0]


@dataclass
class FanSinogram:
    data: np.ndarray  # (n_views, n_columns) line integrals
    betas: np.ndarray  # view angles in degrees
    detector_u: np.ndarray  # column positions on the flat detector, mm
    sod: Optional[float]
    sdd: Optional[float]

    @property
    def magnification(self) -> float:
        return self.sdd / self.sod


@dataclass
class ParallelSinogram:
    sinogram: Sinogram
    bin_spacing: float  # mm in the object plane
    meta: Dict[str, object] = field(default_factory=dict)


# ----------------------------------------------------------------- download

def sha256_file(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(CHUNK_BYTES), b""):
            h.update(chunk)
    return h.hexdigest()


def _md5_file(path: str) -> str:
    h = hashlib.md5()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(CHUNK_BYTES), b""):
            h.update(chunk)
    return h.hexdigest()


def _manifest_path(cache_dir: str) -> str:
    return os.path.join(cache_dir, MANIFEST_NAME)


def read_manifest(cache_dir: str) -> List[Dict[str, object]]:
    path = _manifest_path(cache_dir)
    if not os.path.exists(path):
        return []
    return read_table(path, dtype={"path": str, "sha256": str}).to_dict("records")


def verify_entry(cache_dir: str, entry: Dict[str, object]) -> None:
    path = os.path.join(cache_dir, str(entry["path"]))
    if not os.path.exists(path):
        raise ChecksumMismatch(f"{entry['path']} is missing from the cache")
    size = os.path.getsize(path)
    if size != int(entry["bytes"]):
        raise ChecksumMismatch(f"{entry['path']}: {size} bytes, manifest says {entry['bytes']}")
    if sha256_file(path) != entry["sha256"]:
        raise ChecksumMismatch(f"{entry['path']}: SHA-256 does not match the manifest")


def verify_cache(cache_dir: str) -> List[str]:
    """Check every manifest entry; returns the local paths."""
    entries = read_manifest(cache_dir)
    if not entries:
        raise ChecksumMismatch(f"no checksum manifest in {cache_dir}")
    for entry in entries:
        verify_entry(cache_dir, entry)
    return [os.path.join(cache_dir, str(e["path"])) for e in entries]


def _download(session, url: str, dest: str, expected_size: Optional[int], expected_md5: Optional[str]) -> None:
    tmp = dest + ".part"
    try:
        resp = session.get(url, stream=True, timeout=60)
        resp.raise_for_status()
        with open(tmp, "wb") as f:
            for chunk in resp.iter_content(chunk_size=CHUNK_BYTES):
                if chunk:
                    f.write(chunk)
    except requests.RequestException as e:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise NetworkError(f"download of {url} failed: {e}") from e
    if expected_size is not None and os.path.getsize(tmp) != expected_size:
        os.remove(tmp)
        raise ChecksumMismatch(f"{os.path.basename(dest)}: size differs from the record")
    if expected_md5 is not None and _md5_file(tmp) != expected_md5:
        os.remove(tmp)
        raise ChecksumMismatch(f"{os.path.basename(dest)}: md5 differs from the record")
    os.replace(tmp, dest)


def _record_files(session, record_url: str) -> List[Dict[str, object]]:
    try:
        resp = session.get(record_url, timeout=60)
        resp.raise_for_status()
        record = resp.json()
    except requests.RequestException as e:
        raise NetworkError(f"cannot reach {record_url}: {e}") from e
    files = []
    for item in record.get("files", []):
        checksum = str(item.get("checksum", ""))
        md5 = checksum.split(":", 1)[1] if checksum.startswith("md5:") else None
        links = item.get("links", {})
        files.append({"key": item["key"], "size": item.get("size"), "md5": md5,
                      "url": links.get("self") or links.get("download")})
    if not files:
        raise DataError(f"record {record_url} lists no files")
    return files


def fetch_dataset(record_url: str, cache_dir: str, session=None) -> List[str]:
    """Download every file of the record into `cache_dir` once; later calls only verify checksums."""
    ensure_dir(cache_dir)
    timer = Timer()
    with FileLock(os.path.join(cache_dir, ".fetch.lock")):
        entries = read_manifest(cache_dir)
        if entries:
            try:
                paths = [os.path.join(cache_dir, str(e["path"])) for e in entries]
                for entry in entries:
                    verify_entry(cache_dir, entry)
                logger.info("Dataset cache hit", extra={"event": "fetch_cached", "data": {"files": len(paths)}})
                return paths
            except ChecksumMismatch as e:
                logger.warning("Cached file failed verification; downloading again",
                               extra={"event": "fetch_checksum_error", "data": {"error": str(e)}})
        session = session or requests.Session()
        good = {}
        for entry in entries:
            try:
                verify_entry(cache_dir, entry)
                good[str(entry["path"])] = entry
            except ChecksumMismatch:
                pass
        manifest: List[Dict[str, object]] = []
        paths: List[str] = []
        for item in _record_files(session, record_url):
            name = str(item["key"])
            dest = os.path.join(cache_dir, name)
            if name in good:
                manifest.append(good[name])
                paths.append(dest)
                continue
            with FileLock(dest + ".lock"):
                _download(session, str(item["url"]), dest, item["size"], item["md5"])
            manifest.append({"path": name, "bytes": os.path.getsize(dest), "sha256": sha256_file(dest)})
            paths.append(dest)
            logger.info("File downloaded", extra={"event": "fetch_file", "data": {"file": name, "bytes": manifest[-1]["bytes"]}})
        write_table(_manifest_path(cache_dir), manifest, columns=["path", "bytes", "sha256"])
    logger.info("Dataset fetched", extra={"event": "fetch_done", "data": {"files": len(paths), "ms": timer.elapsed_ms()}})
    return paths


def extract_archives(paths: Sequence[str], dest_dir: str) -> List[str]:
    """Unpack zip archives once each; a `.done` marker makes repeated calls free."""
    out = []
    for path in paths:
        if not path.endswith(".zip"):
            continue
        target = os.path.join(dest_dir, os.path.splitext(os.path.basename(path))[0])
        marker = target + ".done"
        if not os.path.exists(marker):
            ensure_dir(target)
            with zipfile.ZipFile(path) as z:
                z.extractall(target)
            open(marker, "w").close()
        out.append(target)
    return out


# ----------------------------------------------------------------- reader

class FlexRayReader:
    """Reads one scan directory: `scan_*.tif` projections, `io*.tif` flats, `di*.tif` darks.

    Geometry comes from a settings text file when one is present, otherwise from the config.
    """

    def __init__(self, cfg: IngestConfig):
        self.cfg = cfg

    def find_group(self, root: str, key: GroupKey) -> str:
        variants = [f"{key.sample:02d}", str(key.sample)]
        for sample in variants:
            pattern = self.cfg.group_glob.format(shape=key.shape, sample=sample, current=key.current)
            hits = sorted(d for d in glob.glob(os.path.join(root, "**", pattern), recursive=True) if os.path.isdir(d))
            if hits:
                return hits[0]
        raise DataError(f"no scan directory for {key.slug} under {root}")

    def _stack(self, paths: Sequence[str]) -> Optional[np.ndarray]:
        if not paths:
            return None
        return np.mean([tifffile.imread(p).astype(np.float64) for p in paths], axis=0)

    def _settings(self, scan_dir: str) -> Dict[str, float]:
        found: Dict[str, float] = {}
        for path in glob.glob(os.path.join(scan_dir, "*settings*.txt")):
            with open(path, "r", encoding="utf-8", errors="ignore") as f:
                for line in f:
                    if ":" not in line:
                        continue
                    name, _, value = line.partition(":")
                    name = name.strip().upper()
                    try:
                        number = float(value.strip().split()[0])
                    except (ValueError, IndexError):
                        continue
                    if name in ("SOD", "SDD", "ODD"):
                        found[name] = number
        return found

    def read(self, scan_dir: str, key: Optional[GroupKey] = None) -> RawScan:
        timer = Timer()
        files = sorted(glob.glob(os.path.join(scan_dir, "scan_*.tif")))
        if not files:
            raise DataError(f"no projections (scan_*.tif) in {scan_dir}")
        projections = np.stack([tifffile.imread(p) for p in files]).astype(np.float32)
        settings = self._settings(scan_dir)
        sod = settings.get("SOD", self.cfg.sod)
        odd = settings.get("ODD", settings["SDD"] - sod if "SDD" in settings else self.cfg.odd)
        raw = RawScan(
            projections=projections,
            sod=sod,
            odd=odd,
            detector_pitch=self.cfg.detector_pitch,
            emission_current=key.current if key else None,
            shape_label=key.shape if key else None,
            flat=self._stack(sorted(glob.glob(os.path.join(scan_dir, "io*.tif")))),
            dark=self._stack(sorted(glob.glob(os.path.join(scan_dir, "di*.tif")))),
        )
        logger.info("Raw scan read", extra={"event": "raw_read", "data": {"dir": scan_dir, "projections": raw.n_projections, "ms": timer.elapsed_ms()}})
        return raw


# ----------------------------------------------------------------- preprocessing

def flat_field(raw: RawScan, row: int, cols: np.ndarray) -> np.ndarray:
    if raw.flat is None:
        raise MissingFlatField("scan has no flat field")
    return raw.flat[row, cols].astype(np.float64)


def preprocess(raw: RawScan, cfg: Optional[IngestConfig] = None) -> FanSinogram:
    """Every step-th projection, the middle detector row, every 4th column, then p = -ln((I-D)/(F-D))."""
    cfg = cfg or IngestConfig()
    n_proj, n_rows, n_cols = raw.projections.shape
    if n_proj != EXPECTED_PROJECTIONS:
        logger.warning("Unexpected projection count", extra={"event": "preprocess_count", "data": {"projections": n_proj}})
    if not (0 <= cfg.middle_row < n_rows):
        raise ShapeMismatch(f"row {cfg.middle_row} outside a detector with {n_rows} rows")
    views = np.arange(0, n_proj, cfg.projection_step)
    cols = np.arange(cfg.column_offset, n_cols, cfg.column_step)
    intensity = raw.projections[views][:, cfg.middle_row, cols].astype(np.float64)
    dark = raw.dark[cfg.middle_row, cols].astype(np.float64) if raw.dark is not None else np.zeros(len(cols))
    try:
        flat = flat_field(raw, cfg.middle_row, cols)
    except MissingFlatField:
        logger.warning("Flat field missing; normalizing by the maximum intensity",
                       extra={"event": "preprocess_flat_missing", "data": {"shape": raw.shape_label}})
        flat = np.full(len(cols), float(intensity.max()))
    ratio = (intensity - dark[None, :]) / np.maximum(flat - dark, LOG_FLOOR)[None, :]
    data = -np.log(np.maximum(ratio, LOG_FLOOR))
    step_deg = 360.0 / (n_proj - 1)
    betas = views * step_deg
    detector_u = (cols - (n_cols - 1) / 2.0) * raw.detector_pitch
    sdd = raw.sod + raw.odd if raw.sod is not None and raw.odd is not None else None
    return FanSinogram(data=data, betas=betas, detector_u=detector_u, sod=raw.sod, sdd=sdd)


# ----------------------------------------------------------------- rebinning

def fan_to_parallel_coords(beta: np.ndarray, gamma: np.ndarray, sod: float) -> Tuple[np.ndarray, np.ndarray]:
    """(beta, gamma) in degrees -> (phi, s): phi = beta + gamma, s = SOD sin(gamma)."""
    return beta + gamma, sod * np.sin(np.deg2rad(gamma))


def _fractional(values: np.ndarray, grid: np.ndarray) -> np.ndarray:
    """Fractional index of `values` on a uniform increasing grid; outside values give -1."""
    step = grid[1] - grid[0]
    idx = (values - grid[0]) / step
    return np.where((idx >= 0) & (idx <= len(grid) - 1), idx, -1.0)


def rebin_fan_to_parallel(fan: FanSinogram, n_angles: int = 180, n_bins: int = 240,
                          bin_spacing: Optional[float] = None) -> ParallelSinogram:
    """Resample onto phi = 0..n_angles-1 degrees and centered bins by bilinear interpolation in (beta, column).

    Rays whose view lies outside the recorded range use the conjugate ray (phi + 180, -s).
    """
    if fan.sod is None or fan.sdd is None:
        raise GeometryMissing("rebinning needs source-object and source-detector distances")
    timer = Timer()
    pitch = float(fan.detector_u[1] - fan.detector_u[0])
    spacing = bin_spacing if bin_spacing is not None else pitch / fan.magnification
    phi = np.arange(n_angles, dtype=np.float64)[:, None]
    s = ((np.arange(n_bins) - (n_bins - 1) / 2.0) * spacing)[None, :]
    ratio = np.clip(s / fan.sod, -1.0, 1.0)
    gamma = np.rad2deg(np.arcsin(ratio))
    u = fan.sdd * np.tan(np.deg2rad(gamma))
    col = _fractional(u, fan.detector_u)
    col = np.broadcast_to(col, (n_angles, n_bins))

    span = fan.betas[-1] - fan.betas[0]
    beta = np.mod(phi - gamma - fan.betas[0], 360.0) + fan.betas[0]
    row = _fractional(beta, fan.betas)
    # conjugate ray: same line seen from the opposite side of the fan
    beta_c = np.mod(phi + 180.0 + gamma - fan.betas[0], 360.0) + fan.betas[0]
    u_c = -u
    col_c = np.broadcast_to(_fractional(u_c, fan.detector_u), (n_angles, n_bins))
    row_c = _fractional(beta_c, fan.betas)
    use_c = (row < 0) & (row_c >= 0)
    rows = np.where(use_c, row_c, row)
    cols = np.where(use_c, col_c, col)
    valid = (rows >= 0) & (cols >= 0)
    values = map_coordinates(fan.data, [np.where(valid, rows, 0.0), np.where(valid, cols, 0.0)], order=1, mode="nearest")
    data = np.where(valid, values, 0.0)
    logger.info(
        "Fan data rebinned",
        extra={"event": "rebin", "data": {"views": int(fan.data.shape[0]), "angles": n_angles, "bins": n_bins,
                                         "span_deg": float(span), "conjugate": int(use_c.sum()), "ms": timer.elapsed_ms()}},
    )
    return ParallelSinogram(sinogram=Sinogram(tuple(range(n_angles)), data), bin_spacing=float(spacing))


# ----------------------------------------------------------------- analytic disks

@dataclass(frozen=True)
class Disk:
    x: float
    y: float
    radius: float
    attenuation: float = 1.0


def _chords(disks: Sequence[Disk], phi_deg: np.ndarray, s: np.ndarray) -> np.ndarray:
    phi = np.deg2rad(phi_deg)
    total = np.zeros(np.broadcast(phi, s).shape)
    for d in disks:
        s0 = d.x * np.cos(phi) + d.y * np.sin(phi)
        h = d.radius ** 2 - (s - s0) ** 2
        total += d.attenuation * 2.0 * np.sqrt(np.maximum(h, 0.0))
    return total


def parallel_disk_sinogram(disks: Sequence[Disk], angles_deg: np.ndarray, s: np.ndarray) -> np.ndarray:
    """Exact line integrals through disks for parallel rays (angle x bin)."""
    return _chords(disks, np.asarray(angles_deg, dtype=float)[:, None], np.asarray(s, dtype=float)[None, :])


def fan_disk_sinogram(disks: Sequence[Disk], betas_deg: np.ndarray, detector_u: np.ndarray,
                      sod: float, sdd: float) -> FanSinogram:
    """Flat-detector fan projections; each ray is evaluated as the parallel ray it coincides with."""
    gamma = np.rad2deg(np.arctan(np.asarray(detector_u, dtype=float) / sdd))
    phi, s = fan_to_parallel_coords(np.asarray(betas_deg, dtype=float)[:, None], gamma[None, :], sod)
    return FanSinogram(data=_chords(disks, phi, s), betas=np.asarray(betas_deg, dtype=float),
                       detector_u=np.asarray(detector_u, dtype=float), sod=sod, sdd=sdd)


# ----------------------------------------------------------------- end to end

def ingest_group(cfg: IngestConfig, key: GroupKey, dataset_root: str, out_dir: str,
                 reader: Optional[FlexRayReader] = None) -> str:
    """Read, preprocess and rebin one projection group; writes a sinogram container named after the group."""
    timer = Timer()
    reader = reader or FlexRayReader(cfg)
    raw = reader.read(reader.find_group(dataset_root, key), key)
    fan = preprocess(raw, cfg)
    parallel = rebin_fan_to_parallel(fan, n_angles=180, n_bins=cfg.n_bins)
    stem = os.path.join(out_dir, key.slug)
    save_sinogram(stem, parallel.sinogram, shape=key.shape, sample=key.sample, current=key.current,
                  bin_spacing_mm=parallel.bin_spacing, sod=fan.sod, sdd=fan.sdd)
    logger.info("Group ingested", extra={"event": "ingest_group", "data": {"group": key.slug, "ms": timer.elapsed_ms()}})
    return stem
