"""Checkpoint archives.

A checkpoint is an uncompressed zip with fixed timestamps, so identical
training state always produces identical bytes::

    meta.json                              stage, step, epoch, history, scalars, info,
                                           descriptors, parameter shapes,
                                           optimiser hyper-parameters
    params/<bundle>/<name>.ahd1            one AHD1 blob per parameter
    optim/<optimiser>/<index>.<key>.ahd1   Adam moment buffers

Parameter blobs are float32 TensorImages of shape ``(1, numel, 1)``; the
original shape is kept in ``meta.json``.
"""

from __future__ import annotations

import json
import logging
import os
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from ahdc_lab.errors import MissingArtifactError
from ahdc_lab.models import TensorImage
from ahdc_lab.nets import ModelBundle, build_bundle, descriptor_from_dict, descriptor_to_dict
from ahdc_lab.tensorio import decode_tensor, encode_tensor

logger = logging.getLogger("ahdc_lab")

FORMAT = "ahdc-checkpoint/1"
_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


def _blob(t: torch.Tensor) -> bytes:
    values = t.detach().to(torch.float32).reshape(1, -1, 1).cpu().numpy()
    return encode_tensor(TensorImage(values))


def _unblob(data: bytes, shape: list[int], source: str) -> torch.Tensor:
    image = decode_tensor(data, source=source)
    if not isinstance(image, TensorImage):
        raise ValueError(f"{source}: expected a float tensor blob")
    flat = torch.from_numpy(np.array(image.values, dtype=np.float32)).reshape(-1)
    if flat.numel() != int(np.prod(shape, dtype=np.int64)):
        raise ValueError(f"{source}: blob has {flat.numel()} values, shape {shape} needs {int(np.prod(shape))}")
    return flat.reshape(shape)


def _write(zf: zipfile.ZipFile, name: str, data: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_ZIP_EPOCH)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def _encode_optimizer(name: str, optimizer: torch.optim.Optimizer) -> tuple[dict, dict[str, bytes]]:
    sd = optimizer.state_dict()
    blobs: dict[str, bytes] = {}
    state_meta: dict[str, dict] = {}
    for index, entries in sorted(sd["state"].items()):
        meta: dict[str, dict] = {}
        for key, value in sorted(entries.items()):
            if isinstance(value, torch.Tensor) and value.dim() > 0:
                path = f"optim/{name}/{index}.{key}.ahd1"
                blobs[path] = _blob(value)
                meta[key] = {"blob": path, "shape": list(value.shape)}
            else:
                meta[key] = {"scalar": float(value), "tensor": isinstance(value, torch.Tensor)}
        state_meta[str(index)] = meta
    return {"param_groups": sd["param_groups"], "state": state_meta}, blobs


def _decode_optimizer(meta: dict, zf: zipfile.ZipFile) -> dict:
    state: dict[int, dict] = {}
    for index, entries in meta["state"].items():
        restored = {}
        for key, info in entries.items():
            if "blob" in info:
                restored[key] = _unblob(zf.read(info["blob"]), info["shape"], info["blob"])
            elif info["tensor"]:
                restored[key] = torch.tensor(info["scalar"], dtype=torch.float32)
            else:
                restored[key] = info["scalar"]
        state[int(index)] = restored
    return {"state": state, "param_groups": meta["param_groups"]}


def save_checkpoint(
    path: str | Path,
    *,
    stage: str,
    step: int,
    epoch: int,
    bundles: dict[str, ModelBundle],
    optimizers: dict[str, torch.optim.Optimizer] | None = None,
    scalars: dict[str, float] | None = None,
    history: list[dict] | None = None,
    info: dict | None = None,
) -> Path:
    """Write a checkpoint archive atomically.

    Returns:
        The checkpoint path.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    files: dict[str, bytes] = {}
    bundle_meta: dict[str, dict] = {}
    for bundle_name, bundle in sorted(bundles.items()):
        shapes = {}
        for param_name, param in bundle.module.named_parameters():
            files[f"params/{bundle_name}/{param_name}.ahd1"] = _blob(param)
            shapes[param_name] = list(param.shape)
        bundle_meta[bundle_name] = {"descriptor": descriptor_to_dict(bundle.descriptor), "shapes": shapes}

    optim_meta: dict[str, dict] = {}
    for opt_name, optimizer in sorted((optimizers or {}).items()):
        optim_meta[opt_name], blobs = _encode_optimizer(opt_name, optimizer)
        files.update(blobs)

    meta = {
        "format": FORMAT,
        "stage": stage,
        "step": step,
        "epoch": epoch,
        "bundles": bundle_meta,
        "optimizers": optim_meta,
        "scalars": dict(sorted((scalars or {}).items())),
        "history": history or [],
        "info": info or {},
    }
    files["meta.json"] = (json.dumps(meta, indent=2, sort_keys=True) + "\n").encode()

    tmp = path.with_name(path.name + ".tmp")
    with zipfile.ZipFile(tmp, "w") as zf:
        for name in sorted(files):
            _write(zf, name, files[name])
    os.replace(tmp, path)
    logger.debug("Wrote checkpoint %s (step %d)", path, step)
    return path


@dataclass
class Checkpoint:
    """Contents of a checkpoint archive, parameters still detached from any module."""

    path: Path
    stage: str
    step: int
    epoch: int
    descriptors: dict[str, object]
    params: dict[str, dict[str, torch.Tensor]]
    optimizers: dict[str, dict] = field(default_factory=dict)
    scalars: dict[str, float] = field(default_factory=dict)
    history: list[dict] = field(default_factory=list)
    info: dict = field(default_factory=dict)

    def bundle(self, name: str) -> ModelBundle:
        """Rebuild bundle *name* from its descriptor and load its parameters."""
        if name not in self.descriptors:
            raise KeyError(f"Checkpoint {self.path} has no bundle '{name}'")
        bundle = build_bundle(self.descriptors[name], seed=0, component=name)
        load_parameters(bundle, self.params[name])
        return bundle


def load_parameters(bundle: ModelBundle, params: dict[str, torch.Tensor]) -> None:
    """Copy *params* into *bundle* in place.

    Raises:
        ValueError: On missing, unexpected or mis-shaped parameters.
    """
    own = dict(bundle.module.named_parameters())
    missing = sorted(set(own) - set(params))
    unexpected = sorted(set(params) - set(own))
    if missing or unexpected:
        raise ValueError(f"Parameter set mismatch: missing {missing}, unexpected {unexpected}")
    for name, param in own.items():
        if tuple(params[name].shape) != tuple(param.shape):
            raise ValueError(
                f"Shape mismatch for parameter '{name}': checkpoint {tuple(params[name].shape)}, "
                f"model {tuple(param.shape)}"
            )
    with torch.no_grad():
        for name, param in own.items():
            param.copy_(params[name].to(param.dtype))


def load_checkpoint(path: str | Path) -> Checkpoint:
    """Read a checkpoint written by :func:`save_checkpoint`.

    Raises:
        MissingArtifactError: If *path* does not exist.
        ValueError: If the archive is malformed or a blob disagrees with its recorded shape.
    """
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"missing checkpoint: {path}")
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("meta.json"))
        if meta.get("format") != FORMAT:
            raise ValueError(f"{path}: unsupported checkpoint format {meta.get('format')!r}")
        descriptors = {}
        params: dict[str, dict[str, torch.Tensor]] = {}
        for bundle_name, info in meta["bundles"].items():
            descriptors[bundle_name] = descriptor_from_dict(info["descriptor"])
            params[bundle_name] = {
                param_name: _unblob(
                    zf.read(f"params/{bundle_name}/{param_name}.ahd1"), shape, f"{path}:{bundle_name}.{param_name}"
                )
                for param_name, shape in info["shapes"].items()
            }
        optimizers = {name: _decode_optimizer(info, zf) for name, info in meta["optimizers"].items()}
    return Checkpoint(
        path=path,
        stage=meta["stage"],
        step=meta["step"],
        epoch=meta["epoch"],
        descriptors=descriptors,
        params=params,
        optimizers=optimizers,
        scalars=meta["scalars"],
        history=meta["history"],
        info=meta.get("info", {}),
    )


def latest_checkpoint(directory: str | Path) -> Path:
    """Path of ``final.ckpt`` in *directory*, falling back to the highest-epoch checkpoint."""
    directory = Path(directory)
    final = directory / "final.ckpt"
    if final.exists():
        return final
    candidates = sorted(directory.glob("epoch_*.ckpt"))
    if not candidates:
        raise MissingArtifactError(f"missing checkpoint: no checkpoints in {directory}")
    return candidates[-1]
