"""Checkpoint archive: one compressed npz with namespaced parameter arrays.

Keys are `detector/<param_name>` for the detector, `dcbank/<i>/<param_name>`
for the i-th bank classifier, and `__config__` holding a JSON config echo.
Loads are strict: name sets and shapes must match the receiving modules.
Writes are atomic (temp file in the same directory, then rename).
"""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

import numpy as np
import torch

from .dcbank import DomainBank
from .detector import Detector, DetectorConfig

CONFIG_KEY = "__config__"


def save_checkpoint(
    path: str | Path,
    detector: Detector,
    bank: DomainBank | None = None,
    config: dict | None = None,
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays: dict[str, np.ndarray] = {}
    for name, tensor in detector.state_dict().items():
        arrays[f"detector/{name}"] = tensor.detach().cpu().numpy()
    if bank is not None:
        for i, clf in enumerate(bank.classifiers):
            for name, tensor in clf.state_dict().items():
                arrays[f"dcbank/{i}/{name}"] = tensor.detach().cpu().numpy()
    arrays[CONFIG_KEY] = np.asarray(json.dumps(config or {}))

    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".npz.tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            np.savez_compressed(f, **arrays)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no checkpoint at {path}")
    with np.load(path, allow_pickle=False) as data:
        arrays = {k: data[k] for k in data.files if k != CONFIG_KEY}
        config = json.loads(str(data[CONFIG_KEY])) if CONFIG_KEY in data.files else {}
    return arrays, config


def _load_module_state(module: torch.nn.Module, arrays: dict[str, np.ndarray], label: str) -> None:
    expected = module.state_dict()
    if set(arrays) != set(expected):
        missing = set(expected) - set(arrays)
        extra = set(arrays) - set(expected)
        raise ValueError(
            f"{label} parameter names mismatch: missing={sorted(missing)[:4]} extra={sorted(extra)[:4]}"
        )
    for name, target in expected.items():
        value = arrays[name]
        if tuple(value.shape) != tuple(target.shape):
            raise ValueError(
                f"{label} shape mismatch for {name}: checkpoint {value.shape} vs module {tuple(target.shape)}"
            )
    module.load_state_dict({k: torch.as_tensor(v) for k, v in arrays.items()})


def load_detector_state(detector: Detector, arrays: dict[str, np.ndarray]) -> None:
    sub = {k[len("detector/") :]: v for k, v in arrays.items() if k.startswith("detector/")}
    if not sub:
        raise ValueError("checkpoint holds no detector/ arrays")
    _load_module_state(detector, sub, "detector")


def load_bank_state(bank: DomainBank, arrays: dict[str, np.ndarray]) -> None:
    for i, clf in enumerate(bank.classifiers):
        prefix = f"dcbank/{i}/"
        sub = {k[len(prefix) :]: v for k, v in arrays.items() if k.startswith(prefix)}
        if not sub:
            raise ValueError(f"checkpoint holds no arrays for bank classifier {i}")
        _load_module_state(clf, sub, f"dcbank classifier {i}")


def bank_size(arrays: dict[str, np.ndarray]) -> int:
    """Number of bank classifiers stored in the archive (0 if none)."""
    indices = {int(k.split("/")[1]) for k in arrays if k.startswith("dcbank/")}
    return len(indices)


def build_detector(path: str | Path) -> tuple[Detector, dict]:
    """Reconstruct a detector from a checkpoint's config echo and weights."""
    arrays, config = load_checkpoint(path)
    det_cfg = DetectorConfig(**config.get("detector", {}))
    detector = Detector(det_cfg)
    load_detector_state(detector, arrays)
    detector.eval()
    return detector, config
