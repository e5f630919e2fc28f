"""Binary checkpoints of a trained model and its posterior reservoir.

Layout: the 8-byte magic ``DGPMPC1\\n`` followed by an ``.npz`` archive.
Arrays are stored by name; a JSON document in the ``meta`` entry records
the layer structure and scalar settings.  No pickling is involved.
"""

from __future__ import annotations

import dataclasses
import io
import json
from pathlib import Path
from typing import Optional, Tuple

import numpy as np
import torch

from dgpmpc.dgp import DgpModel, GpLayer, Normalizer
from dgpmpc.errors import ConfigError
from dgpmpc.inference import PosteriorReservoir, SghmcConfig
from dgpmpc.kernels import DTYPE, KernelSpec

MAGIC = b"DGPMPC1\n"
FORMAT_VERSION = 1


def _np(t) -> np.ndarray:
    return t.detach().cpu().numpy().copy() if isinstance(t, torch.Tensor) else np.asarray(t, dtype=np.float64)


def save_checkpoint(path, model: DgpModel, reservoir: Optional[PosteriorReservoir] = None) -> None:
    arrays = {"noise_precision": _np(model.noise_precision)}
    layers = []
    for i, layer in enumerate(model.layers):
        arrays[f"layer{i}_Z"] = _np(layer.inducing_inputs)
        arrays[f"layer{i}_lengthscales"] = _np(layer.kernel.lengthscales)
        arrays[f"layer{i}_signal_variance"] = _np(layer.kernel.signal_variance)
        layers.append({"family": layer.kernel.family.value, "output_dim": layer.output_dim,
                       "mean": layer.mean_kind.value})
    for name in ("input_mean", "input_std", "output_mean", "output_std"):
        arrays[f"normalizer_{name}"] = np.asarray(getattr(model.normalizer, name), dtype=np.float64)
    meta = {
        "version": FORMAT_VERSION,
        "state_dim": model.state_dim,
        "action_dim": model.action_dim,
        "jitter": model.jitter,
        "layers": layers,
        "reservoir": None,
    }
    if reservoir is not None:
        for i, (u, p) in enumerate(zip(reservoir.position, reservoir.momentum)):
            arrays[f"position{i}"] = _np(u)
            arrays[f"momentum{i}"] = _np(p)
        for k, sample in enumerate(reservoir.samples):
            for i, u in enumerate(sample):
                arrays[f"sample{k}_{i}"] = _np(u)
        meta["reservoir"] = {
            "capacity": reservoir.capacity,
            "count": len(reservoir),
            "step_size": reservoir.step_size,
            "steps_taken": reservoir.steps_taken,
            "warnings": list(reservoir.warnings),
        }
    arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(MAGIC + buf.getvalue())


def load_checkpoint(path) -> Tuple[DgpModel, Optional[PosteriorReservoir]]:
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise ConfigError(f"{path} is not a dgpmpc checkpoint (bad magic header)")
    with np.load(io.BytesIO(raw[len(MAGIC):]), allow_pickle=False) as npz:
        arrays = {k: npz[k] for k in npz.files}
    meta = json.loads(arrays.pop("meta").tobytes().decode("utf-8"))
    if meta.get("version") != FORMAT_VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version {meta.get('version')!r}")
    t = lambda a: torch.from_numpy(np.array(a, dtype=np.float64))
    layers = tuple(
        GpLayer(
            KernelSpec(info["family"], t(arrays[f"layer{i}_lengthscales"]), t(arrays[f"layer{i}_signal_variance"])),
            t(arrays[f"layer{i}_Z"]), info["output_dim"], info["mean"],
        )
        for i, info in enumerate(meta["layers"])
    )
    norm = Normalizer(*(arrays[f"normalizer_{n}"] for n in ("input_mean", "input_std", "output_mean", "output_std")))
    model = DgpModel(layers, t(arrays["noise_precision"]).to(DTYPE), meta["state_dim"], meta["action_dim"], norm,
                     meta["jitter"])
    info = meta["reservoir"]
    if info is None:
        return model, None
    L = len(layers)
    config = dataclasses.replace(SghmcConfig(), reservoir_size=info["capacity"], step_size=info["step_size"])
    reservoir = PosteriorReservoir([t(arrays[f"position{i}"]) for i in range(L)], config)
    reservoir.momentum = [t(arrays[f"momentum{i}"]) for i in range(L)]
    for k in range(info["count"]):
        reservoir.push([t(arrays[f"sample{k}_{i}"]) for i in range(L)])
    reservoir.steps_taken = info["steps_taken"]
    reservoir.warnings = list(info["warnings"])
    return model, reservoir
