"""
Checkpoint files (`.rmck`).

Layout: magic b"RMCK", uint16 version, uint32 length of a UTF-8 JSON header,
the header itself, then every array named in `header["arrays"]` in that order
as an `.rmt` record. The header echoes the model and training config, the
iteration and the numpy RNG state; model weights, Adam moments and the torch
style-sampling RNG state are stored as arrays.
"""
import io
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import torch

from .config import (
    CorruptFileError,
    ConfigMismatchError,
    ModelConfig,
    TrainConfig,
    VersionMismatchError,
)
from .remic_model import ReMIC
from .tensor_io import read_tensor, write_tensor

logger = logging.getLogger(__name__)

MAGIC = b"RMCK"
VERSION = 1
PREAMBLE = struct.Struct("<4sHI")
ADAM_KEYS = ("step", "exp_avg", "exp_avg_sq")


@dataclass
class CheckpointData:
    header: dict[str, Any]
    arrays: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def iteration(self) -> int:
        return int(self.header["iteration"])

    @property
    def model_config(self) -> ModelConfig:
        return ModelConfig(**self.header["model_config"])

    @property
    def train_config(self) -> TrainConfig | None:
        values = self.header.get("train_config")
        return TrainConfig(**values) if values is not None else None


def write_checkpoint(path: str | Path, data: CheckpointData) -> Path:
    path = Path(path)
    header = dict(data.header, arrays=list(data.arrays))
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    buffer = io.BytesIO()
    buffer.write(PREAMBLE.pack(MAGIC, VERSION, len(blob)))
    buffer.write(blob)
    for array in data.arrays.values():
        write_tensor(buffer, array)
    path.parent.mkdir(parents=True, exist_ok=True)
    # Atomic replace.
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(buffer.getvalue())
    tmp.replace(path)
    return path


def read_checkpoint(path: str | Path) -> CheckpointData:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Checkpoint not found: {path}")
    with open(path, "rb") as f:
        preamble = f.read(PREAMBLE.size)
        if len(preamble) != PREAMBLE.size:
            raise CorruptFileError(f"{path}: truncated checkpoint preamble.")
        magic, version, length = PREAMBLE.unpack(preamble)
        if magic != MAGIC:
            raise CorruptFileError(f"{path}: not a checkpoint (magic {magic!r}).")
        if version != VERSION:
            raise VersionMismatchError(f"{path}: checkpoint version {version}, this build reads version {VERSION}.")
        blob = f.read(length)
        if len(blob) != length:
            raise CorruptFileError(f"{path}: truncated checkpoint header.")
        try:
            header = json.loads(blob.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CorruptFileError(f"{path}: unreadable checkpoint header ({e}).") from e
        for key in ("arrays", "iteration", "model_config"):
            if key not in header:
                raise CorruptFileError(f"{path}: checkpoint header lacks '{key}'.")
        arrays = {name: read_tensor(f, f"{path}[{name}]") for name in header.pop("arrays")}
        if f.read(1):
            raise CorruptFileError(f"{path}: trailing bytes after the last array.")
    return CheckpointData(header, arrays)


def _optimizer_arrays(name: str, optimizer: torch.optim.Optimizer) -> dict[str, np.ndarray]:
    arrays = {}
    for index, state in sorted(optimizer.state_dict()["state"].items()):
        for key in ADAM_KEYS:
            arrays[f"optim/{name}/{index}/{key}"] = torch.as_tensor(state[key]).detach().cpu().numpy()
    return arrays


def _restore_optimizer(name: str, optimizer: torch.optim.Optimizer, arrays: dict[str, np.ndarray]) -> None:
    state_dict = optimizer.state_dict()
    prefix = f"optim/{name}/"
    state: dict[int, dict[str, torch.Tensor]] = {}
    for key, array in arrays.items():
        if not key.startswith(prefix):
            continue
        index, slot = key[len(prefix):].split("/")
        state.setdefault(int(index), {})[slot] = torch.from_numpy(array.copy())
    for index, slots in state.items():
        if set(slots) != set(ADAM_KEYS):
            raise CorruptFileError(f"Optimizer state for {name} parameter {index} is incomplete: {sorted(slots)}.")
    state_dict["state"] = state
    optimizer.load_state_dict(state_dict)


def save_checkpoint(
    path: str | Path,
    model: ReMIC,
    iteration: int,
    optimizers: dict[str, torch.optim.Optimizer] | None = None,
    rng: np.random.Generator | None = None,
    style_rng: torch.Generator | None = None,
    train_config: TrainConfig | None = None,
) -> Path:
    header: dict[str, Any] = {
        "iteration": iteration,
        "model_config": model.config.model_dump(mode="json"),
        "train_config": train_config.model_dump(mode="json") if train_config is not None else None,
        "numpy_rng": rng.bit_generator.state if rng is not None else None,
    }
    arrays = {f"model/{key}": value.detach().cpu().numpy() for key, value in model.state_dict().items()}
    for name, optimizer in (optimizers or {}).items():
        arrays.update(_optimizer_arrays(name, optimizer))
    if style_rng is not None:
        arrays["rng/torch_style"] = style_rng.get_state().numpy()
    path = write_checkpoint(path, CheckpointData(header, arrays))
    logger.info("Saved checkpoint at iteration %d to %s", iteration, path)
    return path


def check_model_config(expected: ModelConfig, found: ModelConfig, source: str = "checkpoint") -> None:
    if expected == found:
        return
    ours, theirs = expected.model_dump(), found.model_dump()
    diffs = [f"{k}: {theirs[k]!r} != {ours[k]!r}" for k in ours if ours[k] != theirs[k]]
    raise ConfigMismatchError(f"{source} was written for a different model ({'; '.join(diffs)}).")


def load_checkpoint(
    path: str | Path,
    model: ReMIC,
    optimizers: dict[str, torch.optim.Optimizer] | None = None,
    rng: np.random.Generator | None = None,
    style_rng: torch.Generator | None = None,
) -> CheckpointData:
    """Restore weights (and optionally optimizer and RNG state) in place."""
    data = read_checkpoint(path)
    check_model_config(model.config, data.model_config, str(path))
    _load_weights(model, data, path)
    for name, optimizer in (optimizers or {}).items():
        _restore_optimizer(name, optimizer, data.arrays)
    if rng is not None:
        if data.header.get("numpy_rng") is None:
            raise CorruptFileError(f"{path}: no sampling RNG state stored.")
        rng.bit_generator.state = data.header["numpy_rng"]
    if style_rng is not None:
        if "rng/torch_style" not in data.arrays:
            raise CorruptFileError(f"{path}: no style RNG state stored.")
        style_rng.set_state(torch.from_numpy(data.arrays["rng/torch_style"].copy()))
    logger.info("Loaded checkpoint %s (iteration %d)", path, data.iteration)
    return data


def load_model(path: str | Path) -> ReMIC:
    """Rebuild a model from the config echoed in a checkpoint and load its weights."""
    data = read_checkpoint(path)
    model = ReMIC(data.model_config)
    _load_weights(model, data, path)
    model.eval()
    return model


def _load_weights(model: ReMIC, data: CheckpointData, path: str | Path) -> None:
    prefix = "model/"
    weights = {k[len(prefix):]: torch.from_numpy(v.copy()) for k, v in data.arrays.items() if k.startswith(prefix)}
    try:
        model.load_state_dict(weights)
    except RuntimeError as e:
        raise CorruptFileError(f"{path}: model weights do not match the architecture ({e}).") from e
