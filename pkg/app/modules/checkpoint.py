"""
Checkpoint Module
Versioned, checksummed container for network weights and training state

Layout:
    b"FDDMCKPT" | u32 format version | 32-byte config digest | u32 header length |
    u32 header CRC32 | header JSON | float32 LE tensors (header order) | raw blobs
"""
from dataclasses import dataclass, field
from typing import Dict, Optional
import hashlib
import io
import json
import logging
import os
import struct
import zlib

import numpy as np
import torch

from app.models.schemas import BlobEntry, CheckpointHeader, NetworkConfig, PipelineMode, TensorEntry
from app.utils.exceptions import CheckpointVersionError, CorruptionError, PersistenceError

logger = logging.getLogger(__name__)

MAGIC = b"FDDMCKPT"
FORMAT_VERSION = 1
_PREAMBLE = struct.Struct("<I32sII")


@dataclass
class Checkpoint:
    """Everything needed to rebuild the models and resume training"""
    mode: PipelineMode
    networks: Dict[str, NetworkConfig]
    state: Dict[str, Dict[str, torch.Tensor]]
    timesteps: int
    beta_start: float
    beta_end: float
    schedule_kind: str = "linear"
    step: int = 0
    epoch: int = 0
    seed: int = 0
    blobs: Dict[str, bytes] = field(default_factory=dict)

    def config_digest(self) -> bytes:
        payload = json.dumps(
            {name: cfg.model_dump(mode="json") for name, cfg in sorted(self.networks.items())},
            sort_keys=True,
        )
        return hashlib.sha256(payload.encode("utf-8")).digest()


def pack_optimizer_state(optimizer: torch.optim.Optimizer) -> bytes:
    buffer = io.BytesIO()
    torch.save(optimizer.state_dict(), buffer)
    return buffer.getvalue()


def unpack_optimizer_state(payload: bytes) -> dict:
    return torch.load(io.BytesIO(payload), weights_only=True)


def _tensor_bytes(tensor: torch.Tensor) -> bytes:
    return tensor.detach().cpu().to(torch.float32).numpy().astype("<f4").tobytes()


def save_checkpoint(path: str, checkpoint: Checkpoint) -> None:
    """
    Write a checkpoint atomically (temporary file + rename)

    Args:
        path: Destination file
        checkpoint: Checkpoint to persist
    """
    entries = []
    payloads = []
    for net_name in sorted(checkpoint.state):
        for param_name, tensor in checkpoint.state[net_name].items():
            data = _tensor_bytes(tensor)
            entries.append(TensorEntry(
                name=f"{net_name}.{param_name}",
                shape=list(tensor.shape),
                crc32=zlib.crc32(data),
            ))
            payloads.append(data)

    blob_entries = []
    for name, blob in checkpoint.blobs.items():
        blob_entries.append(BlobEntry(name=name, nbytes=len(blob), crc32=zlib.crc32(blob)))
        payloads.append(blob)

    header = CheckpointHeader(
        format_version=FORMAT_VERSION,
        mode=checkpoint.mode,
        networks=checkpoint.networks,
        timesteps=checkpoint.timesteps,
        beta_start=checkpoint.beta_start,
        beta_end=checkpoint.beta_end,
        schedule_kind=checkpoint.schedule_kind,
        step=checkpoint.step,
        epoch=checkpoint.epoch,
        seed=checkpoint.seed,
        tensors=entries,
        blobs=blob_entries,
    )
    header_bytes = header.model_dump_json().encode("utf-8")

    tmp_path = f"{path}.tmp"
    try:
        os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
        with open(tmp_path, "wb") as f:
            f.write(MAGIC)
            f.write(_PREAMBLE.pack(FORMAT_VERSION, checkpoint.config_digest(),
                                   len(header_bytes), zlib.crc32(header_bytes)))
            f.write(header_bytes)
            for data in payloads:
                f.write(data)
        os.replace(tmp_path, path)
    except OSError as exc:
        raise PersistenceError(f"Failed to write checkpoint {path}: {exc}") from exc

    logger.info(f"💾 Saved checkpoint {path} (step {checkpoint.step}, {len(entries)} tensors)")


def _read_exact(f, count: int, what: str) -> bytes:
    data = f.read(count)
    if len(data) != count:
        raise CorruptionError(f"Truncated checkpoint while reading {what}")
    return data


def load_checkpoint(path: str) -> Checkpoint:
    """
    Read and verify a checkpoint

    Raises:
        CheckpointVersionError: Unknown format version
        CorruptionError: Bad magic, truncation or checksum mismatch
        PersistenceError: File cannot be opened
    """
    try:
        f = open(path, "rb")
    except OSError as exc:
        raise PersistenceError(f"Cannot open checkpoint {path}: {exc}") from exc

    with f:
        if _read_exact(f, len(MAGIC), "magic") != MAGIC:
            raise CorruptionError(f"{path} is not a checkpoint (bad magic)")
        version, digest, header_len, header_crc = _PREAMBLE.unpack(
            _read_exact(f, _PREAMBLE.size, "preamble")
        )
        if version != FORMAT_VERSION:
            raise CheckpointVersionError(
                f"Checkpoint {path} has format version {version}, expected {FORMAT_VERSION}"
            )
        header_bytes = _read_exact(f, header_len, "header")
        if zlib.crc32(header_bytes) != header_crc:
            raise CorruptionError(f"Checkpoint {path} header checksum mismatch")
        header = CheckpointHeader.model_validate_json(header_bytes)

        state: Dict[str, Dict[str, torch.Tensor]] = {}
        for entry in header.tensors:
            nbytes = 4 * int(np.prod(entry.shape, dtype=np.int64))
            data = _read_exact(f, nbytes, entry.name)
            if zlib.crc32(data) != entry.crc32:
                raise CorruptionError(f"Checkpoint {path}: checksum mismatch in {entry.name}")
            net_name, param_name = entry.name.split(".", 1)
            array = np.frombuffer(data, dtype="<f4").reshape(entry.shape).astype(np.float32)
            state.setdefault(net_name, {})[param_name] = torch.from_numpy(array)

        blobs: Dict[str, bytes] = {}
        for entry in header.blobs:
            data = _read_exact(f, entry.nbytes, entry.name)
            if zlib.crc32(data) != entry.crc32:
                raise CorruptionError(f"Checkpoint {path}: checksum mismatch in blob {entry.name}")
            blobs[entry.name] = data

        if f.read(1):
            raise CorruptionError(f"Checkpoint {path} has trailing bytes")

    checkpoint = Checkpoint(
        mode=header.mode,
        networks=header.networks,
        state=state,
        timesteps=header.timesteps,
        beta_start=header.beta_start,
        beta_end=header.beta_end,
        schedule_kind=header.schedule_kind,
        step=header.step,
        epoch=header.epoch,
        seed=header.seed,
        blobs=blobs,
    )
    if checkpoint.config_digest() != digest:
        raise CorruptionError(f"Checkpoint {path}: config digest does not match its header")
    logger.info(f"Loaded checkpoint {path} (mode {header.mode.value}, step {header.step})")
    return checkpoint
