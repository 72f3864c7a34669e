"""
Parameter Store and Checkpoint Files

``ParameterSet`` is the single owner of every trainable tensor in a network;
sub-networks register their tensors under a dotted prefix (``fen.``, ``rpn.``,
``roi.``, ``relation.``, ``cpn.``), which is also how parameter counts are
reported per sub-network.

Checkpoint format (joblib, compressed), version ``FORMAT_VERSION``::

    {
        "format_version": 1,
        "parameters": {name: {"shape": [...], "values": ndarray}},
        "velocity": {name: ndarray} or None,
        "epoch": int,
        "config": nested dict of the resolved RunConfig,
        "sections": ["head", ...],
    }
"""

from collections import OrderedDict
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Tuple, Union

import joblib
import numpy as np
from loguru import logger

from models.errors import ConfigError, DataError
from models.tensor import Tensor

FORMAT_VERSION = 1


class ParameterSet:
    """Ordered, named collection of trainable tensors."""

    def __init__(self, dtype=np.float64):
        self.dtype = np.dtype(dtype)
        self._tensors: "OrderedDict[str, Tensor]" = OrderedDict()

    def add(self, name: str, values: np.ndarray) -> Tensor:
        if name in self._tensors:
            raise ConfigError(f"Duplicate parameter name: {name}")
        tensor = Tensor(values, requires_grad=True, dtype=self.dtype, name=name)
        self._tensors[name] = tensor
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __iter__(self) -> Iterator[Tuple[str, Tensor]]:
        return iter(self._tensors.items())

    def __len__(self) -> int:
        return len(self._tensors)

    def names(self) -> List[str]:
        return list(self._tensors)

    def tensors(self) -> List[Tensor]:
        return list(self._tensors.values())

    def count(self, prefix: str = "") -> int:
        """Number of scalar parameters whose name starts with ``prefix``."""
        return int(sum(t.size for n, t in self._tensors.items() if n.startswith(prefix)))

    def count_by_group(self) -> Dict[str, int]:
        groups: Dict[str, int] = OrderedDict()
        for name, tensor in self._tensors.items():
            group = name.split(".", 1)[0]
            groups[group] = groups.get(group, 0) + tensor.size
        return dict(groups)

    def zero_grad(self):
        for tensor in self._tensors.values():
            tensor.grad = None

    def state(self) -> Dict[str, np.ndarray]:
        return {name: t.values.copy() for name, t in self._tensors.items()}

    def load_state(self, state: Dict[str, np.ndarray]):
        """Copy values into the registered tensors; names and shapes must match."""
        missing = sorted(set(self._tensors) - set(state))
        extra = sorted(set(state) - set(self._tensors))
        if missing or extra:
            raise ConfigError(
                f"Checkpoint parameters do not match the network "
                f"(missing={missing[:5]}, unexpected={extra[:5]})"
            )
        for name, tensor in self._tensors.items():
            values = np.asarray(state[name])
            if values.shape != tensor.shape:
                raise ConfigError(
                    f"Parameter {name}: checkpoint shape {values.shape} != network shape {tensor.shape}"
                )
            tensor.values = values.astype(self.dtype, copy=True)


def save_checkpoint(
    path: Union[str, Path],
    parameters: ParameterSet,
    config: Dict[str, Any],
    sections: List[str],
    epoch: int = 0,
    velocity: Optional[Dict[str, np.ndarray]] = None,
    compression: int = 3,
):
    """Write a checkpoint file (see module docstring for the layout)."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DataError(f"Cannot create checkpoint directory {path.parent}: {e}") from e
    payload = {
        "format_version": FORMAT_VERSION,
        "parameters": {
            name: {"shape": list(t.shape), "values": t.values.copy()} for name, t in parameters
        },
        "velocity": velocity,
        "epoch": int(epoch),
        "config": config,
        "sections": list(sections),
    }
    try:
        joblib.dump(payload, path, compress=compression)
    except OSError as e:
        raise DataError(f"Cannot write checkpoint {path}: {e}") from e
    logger.info(f"Checkpoint saved to {path} (epoch {epoch}, {parameters.count():,} parameters)")


def load_checkpoint(path: Union[str, Path]) -> Dict[str, Any]:
    """Read and validate a checkpoint file.

    Raises:
        DataError: If the file is missing or unreadable
        ConfigError: If the format version is unsupported
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"Checkpoint not found: {path}")
    try:
        payload = joblib.load(path)
    except Exception as e:
        raise DataError(f"Cannot read checkpoint {path}: {e}") from e
    if not isinstance(payload, dict) or payload.get("format_version") != FORMAT_VERSION:
        version = payload.get("format_version") if isinstance(payload, dict) else None
        raise ConfigError(f"Unsupported checkpoint format version: {version}")
    for name, entry in payload["parameters"].items():
        if list(np.shape(entry["values"])) != list(entry["shape"]):
            raise DataError(f"Checkpoint entry {name} is corrupt (shape mismatch)")
    logger.info(f"Loaded checkpoint {path} (epoch {payload['epoch']})")
    return payload


def parameter_state(payload: Dict[str, Any]) -> Dict[str, np.ndarray]:
    return {name: entry["values"] for name, entry in payload["parameters"].items()}
