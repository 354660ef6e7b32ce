"""Model checkpoint file: magic "FWM1", then u32 array count, then for each
state array a shape header (u32 ndim, ndim x u32 dims) and a float32 payload,
all little-endian, in the model's canonical state order.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .model import DetectorConfig, ModelParams, build_model

MODEL_MAGIC = b"FWM1"


def save_model(path, params: ModelParams) -> None:
    arrays = [arr for _, arr in params.state_arrays()]
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(np.array([len(arrays)], dtype="<u4").tobytes())
        for arr in arrays:
            fh.write(np.array([arr.ndim], dtype="<u4").tobytes())
            fh.write(np.array(arr.shape, dtype="<u4").tobytes())
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_model(path, config: DetectorConfig) -> ModelParams:
    """Rebuild a model for ``config`` and fill it from the checkpoint file."""
    raw = Path(path).read_bytes()
    if raw[:4] != MODEL_MAGIC:
        raise ValueError(f"{path} is not a model checkpoint (bad magic {raw[:4]!r})")
    count = int(np.frombuffer(raw, dtype="<u4", count=1, offset=4)[0])
    offset = 8
    arrays = []
    for _ in range(count):
        ndim = int(np.frombuffer(raw, dtype="<u4", count=1, offset=offset)[0])
        offset += 4
        shape = tuple(int(d) for d in np.frombuffer(raw, dtype="<u4", count=ndim, offset=offset))
        offset += 4 * ndim
        n = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(raw, dtype="<f4", count=n, offset=offset)
        offset += 4 * n
        arrays.append(data.astype(np.float64).reshape(shape))

    params = build_model(config, seed=0)
    names = [name for name, _ in params.state_arrays()]
    if len(names) != count:
        raise ValueError(
            f"{path} holds {count} arrays but the configured model has {len(names)}"
        )
    params.load_state(dict(zip(names, arrays)))
    return params
