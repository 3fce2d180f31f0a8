"""On-disk formats: image containers, jsonl manifests, tsv tables, checkpoints, run bundles."""
import json
import os
import zipfile
from typing import Any, Dict, Iterable, List, Optional, Tuple

import numpy as np
import pandas as pd
import torch

from .config import ensure_dir
from .ct_core import Sinogram
from .errors import ArchitectureMismatch, ShapeMismatch
from .logging_utils import get_logger
from .policy_net import ActorCritic, Architecture

logger = get_logger("storage")

CONTAINER_VERSION = 1
CHECKPOINT_FORMAT = "ctstop-checkpoint"
CHECKPOINT_VERSION = 1


# ----------------------------------------------------------------- containers

def _stem(path: str) -> str:
    root, ext = os.path.splitext(path)
    return root if ext in (".json", ".raw") else path


def save_array(path: str, array: np.ndarray, **meta: Any) -> Tuple[str, str]:
    """Write `<stem>.json` (shape, dtype, order, extra fields) and `<stem>.raw` (little-endian float32)."""
    stem = _stem(path)
    ensure_dir(os.path.dirname(os.path.abspath(stem)))
    data = np.ascontiguousarray(array, dtype="<f4")
    header = {"version": CONTAINER_VERSION, "shape": list(data.shape), "dtype": "float32",
              "byteorder": "little", "order": "C"}
    header.update(meta)
    with open(stem + ".json", "w", encoding="utf-8") as f:
        json.dump(header, f, ensure_ascii=False, indent=2)
    data.tofile(stem + ".raw")
    return stem + ".json", stem + ".raw"


def load_array(path: str) -> Tuple[np.ndarray, Dict[str, Any]]:
    stem = _stem(path)
    with open(stem + ".json", "r", encoding="utf-8") as f:
        header = json.load(f)
    shape = tuple(int(s) for s in header["shape"])
    data = np.fromfile(stem + ".raw", dtype="<f4")
    if data.size != int(np.prod(shape)):
        raise ShapeMismatch(f"{stem}.raw holds {data.size} values, header says {shape}")
    return data.reshape(shape).astype(np.float32), header


def save_sinogram(path: str, sino: Sinogram, **meta: Any) -> Tuple[str, str]:
    return save_array(path, sino.data, angles=list(sino.angles), eta=sino.noise_level, **meta)


def load_sinogram(path: str) -> Tuple[Sinogram, Dict[str, Any]]:
    data, header = load_array(path)
    sino = Sinogram(tuple(header["angles"]), data.astype(np.float64), noise_level=float(header.get("eta", 0.0)))
    return sino, header


# ----------------------------------------------------------------- jsonl / tsv

def write_jsonl(path: str, records: Iterable[Dict[str, Any]]) -> str:
    ensure_dir(os.path.dirname(os.path.abspath(path)))
    with open(path, "w", encoding="utf-8") as f:
        for rec in records:
            f.write(json.dumps(rec, ensure_ascii=False))
            f.write("\n")
    return path


def append_jsonl(path: str, records: Iterable[Dict[str, Any]]) -> str:
    with open(path, "a", encoding="utf-8") as f:
        for rec in records:
            f.write(json.dumps(rec, ensure_ascii=False))
            f.write("\n")
    return path


def read_jsonl(path: str) -> List[Dict[str, Any]]:
    with open(path, "r", encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


def write_table(path: str, rows: Any, columns: Optional[List[str]] = None) -> str:
    """Tab-separated table with a header row; accepts a DataFrame or a list of dicts."""
    ensure_dir(os.path.dirname(os.path.abspath(path)))
    df = rows if isinstance(rows, pd.DataFrame) else pd.DataFrame(list(rows), columns=columns)
    df.to_csv(path, sep="\t", index=False)
    return path


def read_table(path: str, **kwargs: Any) -> pd.DataFrame:
    return pd.read_csv(path, sep="\t", **kwargs)


# ----------------------------------------------------------------- checkpoints

def save_checkpoint(path: str, net: ActorCritic, optimizer: Optional[torch.optim.Optimizer] = None,
                    step_count: int = 0, episode: int = 0, variant: str = "terminal",
                    extra: Optional[Dict[str, Any]] = None) -> str:
    ensure_dir(os.path.dirname(os.path.abspath(path)))
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "architecture": net.arch.to_dict(),
        "grid": net.arch.grid,
        "n_actions": net.arch.n_actions,
        "variant": variant,
        "step_count": int(step_count),
        "episode": int(episode),
    }
    header.update(extra or {})
    payload = {
        "header": header,
        "state_dict": {k: v.detach().cpu().clone() for k, v in net.state_dict().items()},
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
    }
    tmp = path + ".tmp"
    torch.save(payload, tmp)
    os.replace(tmp, path)
    logger.info("Checkpoint saved", extra={"event": "checkpoint_save", "data": {"path": path, "episode": episode, "step": step_count}})
    return path


def read_checkpoint(path: str) -> Dict[str, Any]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    header = payload.get("header", {})
    if header.get("format") != CHECKPOINT_FORMAT:
        raise ArchitectureMismatch(f"{path} is not a checkpoint written by this package")
    if int(header.get("version", 0)) > CHECKPOINT_VERSION:
        raise ArchitectureMismatch(f"{path} has checkpoint version {header['version']}, newest supported is {CHECKPOINT_VERSION}")
    return payload


def load_checkpoint(path: str, expected_grid: Optional[int] = None,
                    expected_actions: Optional[int] = None) -> Tuple[ActorCritic, Dict[str, Any]]:
    """Rebuild the network stored in `path`; returns (net, payload)."""
    payload = read_checkpoint(path)
    header = payload["header"]
    if expected_grid is not None and int(header["grid"]) != int(expected_grid):
        raise ArchitectureMismatch(f"checkpoint was trained at G={header['grid']}, input has G={expected_grid}")
    if expected_actions is not None and int(header["n_actions"]) != int(expected_actions):
        raise ArchitectureMismatch(f"checkpoint has {header['n_actions']} actions, expected {expected_actions}")
    arch = header["architecture"]
    net = ActorCritic(Architecture(
        grid=int(arch["grid"]), n_actions=int(arch["n_actions"]), channels=tuple(arch["channels"]),
        pools=tuple(arch["pools"]), groups=int(arch["groups"]), leaky_slope=float(arch["leaky_slope"]),
        critic_hidden=arch.get("critic_hidden"), dtype=arch.get("dtype", "float32"),
    ))
    try:
        net.load_state_dict(payload["state_dict"])
    except RuntimeError as e:
        raise ArchitectureMismatch(f"checkpoint parameters do not fit the stored architecture: {e}") from e
    logger.info("Checkpoint loaded", extra={"event": "checkpoint_load", "data": {"path": path, "episode": header["episode"]}})
    return net, payload


# ----------------------------------------------------------------- bundles

def export_run_bundle(run_dir: str, zip_name: Optional[str] = None) -> str:
    """Zip every file of a run directory next to it."""
    run_dir = os.path.abspath(run_dir)
    name = zip_name or f"{os.path.basename(run_dir)}.zip"
    zip_path = os.path.join(os.path.dirname(run_dir), name)
    n_files = 0
    with zipfile.ZipFile(zip_path, "w", compression=zipfile.ZIP_DEFLATED) as z:
        for root, _, files in os.walk(run_dir):
            for fname in sorted(files):
                full = os.path.join(root, fname)
                z.write(full, arcname=os.path.relpath(full, os.path.dirname(run_dir)))
                n_files += 1
    logger.info("Run exported", extra={"event": "run_export", "data": {"zip": zip_path, "files": n_files}})
    return zip_path
