"""
Dataset Module
Array files, dataset directories with a JSON manifest, dose normalization
and the torch Dataset feeding the trainer
"""
from typing import Dict, Iterator, List, Optional, Sequence
import logging
import os
import struct
import zlib

import numpy as np
import torch
from torch.utils.data import Dataset

from app.models.schemas import PlanningSample, STRUCTURES
from app.utils.exceptions import CorruptionError, DatasetError, PersistenceError
from app.utils.helpers import load_json, save_to_json

logger = logging.getLogger(__name__)

ARRAY_MAGIC = b"FDDMARR1"
MANIFEST_NAME = "manifest.json"
MANIFEST_SCHEMA_VERSION = 1
# Prescription scaled by this factor maps to +1 in normalized units
DOSE_HEADROOM = 1.1

ARRAY_FILES: Dict[str, str] = {"ct": "ct", "dose": "dose"}
ARRAY_FILES.update({f"mask_{name}": f"mask_{name.lower()}" for name in STRUCTURES})


# ============ Array files ============

def encode_array(array: np.ndarray) -> bytes:
    """magic | u32 rank | u32 dims | float32 LE payload | u32 CRC32 of everything before it"""
    body = (
        ARRAY_MAGIC
        + struct.pack("<I", array.ndim)
        + struct.pack(f"<{array.ndim}I", *array.shape)
        + np.ascontiguousarray(array, dtype="<f4").tobytes()
    )
    return body + struct.pack("<I", zlib.crc32(body))


def decode_array(data: bytes, label: str = "array") -> np.ndarray:
    if len(data) < len(ARRAY_MAGIC) + 8 or data[:len(ARRAY_MAGIC)] != ARRAY_MAGIC:
        raise CorruptionError(f"{label}: not an array file")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise CorruptionError(f"{label}: checksum mismatch")
    offset = len(ARRAY_MAGIC)
    (rank,) = struct.unpack_from("<I", body, offset)
    offset += 4
    shape = struct.unpack_from(f"<{rank}I", body, offset)
    offset += 4 * rank
    payload = body[offset:]
    if len(payload) != 4 * int(np.prod(shape, dtype=np.int64)):
        raise CorruptionError(f"{label}: payload size does not match shape {shape}")
    return np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)


def write_array(path: str, array: np.ndarray) -> None:
    try:
        os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
        with open(path, "wb") as f:
            f.write(encode_array(array))
    except OSError as exc:
        raise PersistenceError(f"Failed to write {path}: {exc}") from exc


def read_array(path: str, label: Optional[str] = None) -> np.ndarray:
    try:
        with open(path, "rb") as f:
            data = f.read()
    except FileNotFoundError as exc:
        raise DatasetError(f"Missing array {path}") from exc
    except OSError as exc:
        raise PersistenceError(f"Failed to read {path}: {exc}") from exc
    return decode_array(data, label or path)


# ============ Dataset directories ============

def sample_dir(root: str, sample_id: str) -> str:
    return os.path.join(root, "samples", sample_id)


def write_dataset(samples: Sequence[PlanningSample], directory: str, splits: Sequence[str],
                  generator: Optional[dict] = None) -> str:
    """
    Persist samples and their manifest

    Args:
        samples: Samples to write
        directory: Dataset root
        splits: Split name per sample
        generator: Optional generator config recorded in the manifest

    Returns:
        Path of the manifest
    """
    if len(splits) != len(samples):
        raise DatasetError(f"{len(splits)} split labels for {len(samples)} samples")

    entries = []
    for sample, split in zip(samples, splits):
        folder = sample_dir(directory, sample.sample_id)
        write_array(os.path.join(folder, "ct.arr"), sample.ct)
        write_array(os.path.join(folder, "dose.arr"), sample.dose)
        for name in STRUCTURES:
            write_array(os.path.join(folder, f"mask_{name.lower()}.arr"), sample.masks[name])
        entries.append({
            "id": sample.sample_id,
            "index": sample.index,
            "seed": sample.seed,
            "split": split,
            "prescription": sample.prescription,
            "shape": list(sample.shape),
        })

    manifest = {
        "schema_version": MANIFEST_SCHEMA_VERSION,
        "count": len(entries),
        "generator": generator or {},
        "samples": entries,
    }
    path = os.path.join(directory, MANIFEST_NAME)
    os.makedirs(directory, exist_ok=True)
    save_to_json(manifest, path, strict=True)
    logger.info(f"✅ Wrote {len(entries)} samples to {directory}")
    return path


def read_manifest(directory: str) -> dict:
    manifest = load_json(os.path.join(directory, MANIFEST_NAME))
    if manifest.get("schema_version") != MANIFEST_SCHEMA_VERSION:
        raise DatasetError(f"Unsupported manifest schema {manifest.get('schema_version')}")
    entries = manifest.get("samples", [])
    if manifest.get("count") != len(entries):
        raise DatasetError(f"Manifest count {manifest.get('count')} disagrees with {len(entries)} entries")
    samples_root = os.path.join(directory, "samples")
    on_disk = sorted(os.listdir(samples_root)) if os.path.isdir(samples_root) else []
    if len(on_disk) != len(entries):
        raise DatasetError(f"Manifest lists {len(entries)} samples but {len(on_disk)} are on disk")
    return manifest


def read_sample(directory: str, entry: dict) -> PlanningSample:
    sample_id = entry["id"]
    folder = sample_dir(directory, sample_id)
    # Labels carry the sample id so checksum errors name the damaged sample
    arrays = {
        key: read_array(os.path.join(folder, f"{stem}.arr"), label=f"sample {sample_id} {stem}")
        for key, stem in ARRAY_FILES.items()
    }
    return PlanningSample(
        sample_id=sample_id,
        index=entry["index"],
        seed=entry["seed"],
        ct=arrays["ct"],
        masks={name: arrays[f"mask_{name}"] for name in STRUCTURES},
        dose=arrays["dose"],
        prescription=entry["prescription"],
    )


def read_dataset(directory: str, split: Optional[str] = None) -> Iterator[PlanningSample]:
    """Stream samples in manifest order, optionally restricted to one split"""
    manifest = read_manifest(directory)
    for entry in manifest["samples"]:
        if split is None or entry["split"] == split:
            yield read_sample(directory, entry)


# ============ Normalization ============

def dose_scale(prescription):
    return prescription * DOSE_HEADROOM


def normalize_dose(dose, prescription):
    """Gy -> [-1, 1] with 0 Gy at -1 and 1.1 x prescription at +1"""
    return dose / dose_scale(prescription) * 2.0 - 1.0


def denormalize_dose(normalized, prescription):
    return (normalized + 1.0) / 2.0 * dose_scale(prescription)


# ============ Torch dataset ============

class PlanningDataset(Dataset):
    """Planning input X and normalized dose Y as float tensors"""

    def __init__(self, samples: Sequence[PlanningSample]):
        self.samples: List[PlanningSample] = list(samples)

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, idx: int) -> dict:
        sample = self.samples[idx]
        x = torch.from_numpy(sample.planning_input())
        y = torch.from_numpy(normalize_dose(sample.dose, sample.prescription).astype(np.float32))[None]
        return {
            "x": x,
            "y": y,
            "prescription": torch.tensor(sample.prescription, dtype=torch.float32),
            "sample_id": sample.sample_id,
        }
