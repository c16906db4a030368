"""Single-file checkpoint container.

Layout: a text header (magic + version, metadata lines, one line per tensor
with name/dtype/shape/byte offset) terminated by ``header_end``, followed by
raw little-endian tensor records. Loading a checkpoint and resuming
reproduces the uninterrupted run's trajectory bit for bit, so everything
stochastic lives here: weights, logits, optimizer moments, rng state and the
radius-schedule position. Writes are atomic (temp file + rename).
"""

from __future__ import annotations

import io
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .ndgraph import read_tensor, write_tensor

__all__ = ["CheckpointError", "Checkpoint", "save_checkpoint", "load_checkpoint"]

MAGIC = "TNAS"
VERSION = 1


class CheckpointError(ValueError):
    """Unreadable, corrupt or incompatible checkpoint file."""


@dataclass
class Checkpoint:
    phase: str
    epoch: int
    config_text: str
    config_hash: str
    seed: int
    r_step: int = 0
    rng_state: dict | None = None
    adam_t: dict = field(default_factory=dict)  # group name -> step counter
    scalars: dict = field(default_factory=dict)  # extra float metadata
    tensors: dict = field(default_factory=dict)  # name -> ndarray (ordered)


def save_checkpoint(path, ck):
    body = io.BytesIO()
    tensor_lines = []
    for name, arr in ck.tensors.items():
        offset = body.tell()
        code = "f4" if arr.dtype == np.float32 else "f8"
        shape = "x".join(str(d) for d in arr.shape) or "scalar"
        tensor_lines.append(f"tensor {name} {code} {shape} {offset}")
        write_tensor(body, arr)
    header = [
        f"{MAGIC} {VERSION}",
        f"phase {ck.phase}",
        f"epoch {ck.epoch}",
        f"config_hash {ck.config_hash}",
        f"seed {ck.seed}",
        f"r_step {ck.r_step}",
        f"rng_state {json.dumps(ck.rng_state)}",
        f"adam_t {json.dumps(ck.adam_t)}",
        f"scalars {json.dumps(ck.scalars)}",
        f"config_lines {len(ck.config_text.splitlines())}",
    ]
    header.extend(ck.config_text.splitlines())
    header.extend(tensor_lines)
    header.append("header_end")
    blob = ("\n".join(header) + "\n").encode() + body.getvalue()
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def load_checkpoint(path):
    with open(path, "rb") as fh:
        data = fh.read()
    end = data.find(b"header_end\n")
    if end < 0:
        raise CheckpointError(f"{path}: missing header terminator")
    header = data[:end].decode()
    payload = data[end + len(b"header_end\n") :]
    lines = header.splitlines()
    magic = lines[0].split()
    if len(magic) != 2 or magic[0] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {lines[0]!r}")
    if int(magic[1]) != VERSION:
        raise CheckpointError(f"{path}: format version {magic[1]} unsupported (want {VERSION})")

    meta = {}
    i = 1
    for i in range(1, len(lines)):
        key, _, val = lines[i].partition(" ")
        meta[key] = val
        if key == "config_lines":
            break
    n_cfg = int(meta["config_lines"])
    config_text = "\n".join(lines[i + 1 : i + 1 + n_cfg]) + ("\n" if n_cfg else "")
    tensor_lines = lines[i + 1 + n_cfg :]

    ck = Checkpoint(
        phase=meta["phase"],
        epoch=int(meta["epoch"]),
        config_text=config_text,
        config_hash=meta["config_hash"],
        seed=int(meta["seed"]),
        r_step=int(meta["r_step"]),
        rng_state=json.loads(meta["rng_state"]),
        adam_t=json.loads(meta["adam_t"]),
        scalars=json.loads(meta["scalars"]),
    )
    body = io.BytesIO(payload)
    for line in tensor_lines:
        parts = line.split()
        if len(parts) != 5 or parts[0] != "tensor":
            raise CheckpointError(f"{path}: malformed tensor line {line!r}")
        _, name, code, _, offset = parts
        body.seek(int(offset))
        try:
            ck.tensors[name] = read_tensor(body, code)
        except ValueError as e:
            raise CheckpointError(f"{path}: tensor {name}: {e}") from None
    return ck


def rng_state(gen):
    """JSON-serializable state of a numpy Generator."""
    return gen.bit_generator.state


def restore_rng(state):
    gen = np.random.default_rng()
    gen.bit_generator.state = state
    return gen
