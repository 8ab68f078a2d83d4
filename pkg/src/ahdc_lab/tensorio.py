"""AHD1 tensor codec and JSON dataset manifests.

AHD1 layout (little-endian)::

    bytes 0-3    magic "AHD1"
    byte  4      dtype (1 = float32, 2 = uint8)
    byte  5      channels
    bytes 6-9    height (u32)
    bytes 10-13  width (u32)
    bytes 14-21  spacing dy, dx (float32)
    bytes 22-    payload, row-major, channel-last

Float tensors load as :class:`TensorImage`, uint8 tensors as :class:`LabelMask`.
"""

from __future__ import annotations

import csv
import json
import re
import struct
from pathlib import Path

import numpy as np

from ahdc_lab.models import DomainDataset, LabelMask, Sample, Split, TensorImage

MAGIC = b"AHD1"
DTYPE_FLOAT32 = 1
DTYPE_UINT8 = 2
HEADER = struct.Struct("<4sBBIIff")

_DTYPES = {DTYPE_FLOAT32: np.dtype("<f4"), DTYPE_UINT8: np.dtype("u1")}

# Characters forbidden in file names on common filesystems
_INVALID_FILENAME_RE = re.compile(r'[<>:"/\\|?*@]')


def sanitize_filename(name: str) -> str:
    """Replace characters invalid in file names with underscores."""
    return _INVALID_FILENAME_RE.sub("_", name)


def encode_tensor(t: TensorImage | LabelMask) -> bytes:
    """Serialise a tensor to AHD1 bytes."""
    if isinstance(t, LabelMask):
        # Re-check: the buffer is read-only, but a mask may have been built around a foreign array.
        if not np.isin(t.values, (0, 1)).all():
            raise ValueError("LabelMask values must be 0 or 1")
        dtype_code, channels, payload = DTYPE_UINT8, 1, t.values.astype(_DTYPES[DTYPE_UINT8])
    elif isinstance(t, TensorImage):
        dtype_code, channels, payload = DTYPE_FLOAT32, t.channels, t.values.astype(_DTYPES[DTYPE_FLOAT32])
    else:
        raise TypeError(f"Cannot encode {type(t).__name__} as AHD1")
    if channels > 255:
        raise ValueError(f"AHD1 supports at most 255 channels, got {channels}")
    header = HEADER.pack(MAGIC, dtype_code, channels, t.height, t.width, *t.spacing)
    return header + np.ascontiguousarray(payload).tobytes()


def decode_tensor(data: bytes, source: str = "<bytes>") -> TensorImage | LabelMask:
    """Parse AHD1 bytes; *source* is used in error messages."""
    if len(data) < HEADER.size:
        raise ValueError(f"{source}: truncated AHD1 header ({len(data)} bytes)")
    magic, dtype_code, channels, height, width, dy, dx = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise ValueError(f"{source}: bad magic {magic!r}, expected {MAGIC!r}")
    if dtype_code not in _DTYPES:
        raise ValueError(f"{source}: unknown dtype code {dtype_code}")
    dtype = _DTYPES[dtype_code]
    expected = height * width * channels * dtype.itemsize
    payload = data[HEADER.size :]
    if len(payload) != expected:
        raise ValueError(f"{source}: payload has {len(payload)} bytes, expected {expected}")
    values = np.frombuffer(payload, dtype=dtype).reshape(height, width, channels)
    if dtype_code == DTYPE_UINT8:
        if channels != 1:
            raise ValueError(f"{source}: uint8 tensors must have one channel, got {channels}")
        return LabelMask(values[..., 0], spacing=(dy, dx))
    return TensorImage(values, spacing=(dy, dx))


def save_tensor(path: str | Path, t: TensorImage | LabelMask) -> None:
    """Write *t* to *path* in AHD1 format.

    Raises:
        ValueError: If the tensor violates its invariants (nothing is written).
        OSError: If the file cannot be written; the message names the path.
    """
    data = encode_tensor(t)
    path = Path(path)
    try:
        path.write_bytes(data)
    except OSError as e:
        raise OSError(f"Failed to write tensor {path}: {e}") from e


def load_tensor(path: str | Path) -> TensorImage | LabelMask:
    """Read an AHD1 file written by :func:`save_tensor`."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except FileNotFoundError:
        raise FileNotFoundError(f"Tensor file not found: {path}") from None
    except OSError as e:
        raise OSError(f"Failed to read tensor {path}: {e}") from e
    return decode_tensor(data, source=str(path))


# ---------------------------------------------------------------------------
# Manifests
# ---------------------------------------------------------------------------


def _resolve(rel: str, base_dir: Path) -> Path:
    p = Path(rel).expanduser()
    return p if p.is_absolute() else base_dir / p


def load_manifest(path: str | Path) -> DomainDataset:
    """Load a dataset manifest and every tensor it references.

    Raises:
        FileNotFoundError: If the manifest or a referenced tensor is missing.
        ValueError: On malformed entries, labelled samples without a mask,
            or duplicate ids.
    """
    manifest_path = Path(path)
    if not manifest_path.exists():
        raise FileNotFoundError(f"Manifest not found: {manifest_path}")
    base_dir = manifest_path.parent

    raw = json.loads(manifest_path.read_text())
    if not isinstance(raw, dict) or "name" not in raw or not isinstance(raw.get("samples"), list):
        raise ValueError(f"{manifest_path}: manifest must be an object with 'name' and a 'samples' list")

    samples: list[Sample] = []
    for entry in raw["samples"]:
        sample_id = entry.get("id")
        if not sample_id:
            raise ValueError(f"{manifest_path}: sample entry without an id")
        try:
            split = Split(entry.get("split"))
        except ValueError:
            split_value = entry.get("split")
            raise ValueError(f"{manifest_path}: sample '{sample_id}' has unknown split {split_value!r}") from None
        if split is Split.TRAIN_LABELLED and entry.get("mask") is None:
            raise ValueError(f"{manifest_path}: sample '{sample_id}': labelled sample missing mask")

        image = load_tensor(_resolve(entry["image"], base_dir))
        if not isinstance(image, TensorImage):
            raise ValueError(f"{manifest_path}: image of '{sample_id}' is not a float tensor")
        mask = None
        if entry.get("mask") is not None:
            mask = load_tensor(_resolve(entry["mask"], base_dir))
            if not isinstance(mask, LabelMask):
                raise ValueError(f"{manifest_path}: mask of '{sample_id}' is not a uint8 tensor")
        samples.append(
            Sample(id=sample_id, image=image, mask=mask, domain=str(entry.get("domain", raw["name"])), split=split)
        )

    return DomainDataset(name=raw["name"], samples=tuple(samples))


def save_manifest(dataset: DomainDataset, path: str | Path, tensor_dir: str = "tensors") -> Path:
    """Write every sample's tensors under ``<manifest dir>/<tensor_dir>`` and the manifest JSON.

    Returns:
        The manifest path.
    """
    manifest_path = Path(path)
    base_dir = manifest_path.parent
    (base_dir / tensor_dir).mkdir(parents=True, exist_ok=True)

    entries = []
    for sample in dataset.samples:
        stem = sanitize_filename(sample.id)
        image_rel = f"{tensor_dir}/{stem}.ahd1"
        save_tensor(base_dir / image_rel, sample.image)
        mask_rel = None
        if sample.mask is not None:
            mask_rel = f"{tensor_dir}/{stem}_mask.ahd1"
            save_tensor(base_dir / mask_rel, sample.mask)
        entries.append(
            {
                "id": sample.id,
                "image": image_rel,
                "mask": mask_rel,
                "domain": sample.domain,
                "split": sample.split.value,
            }
        )

    manifest_path.write_text(json.dumps({"name": dataset.name, "samples": entries}, indent=2) + "\n")
    return manifest_path


# ---------------------------------------------------------------------------
# Tables
# ---------------------------------------------------------------------------


def write_csv(path: str | Path, columns: list[str], rows: list[dict]) -> Path:
    """Write *rows* as CSV with a header; floats use ``repr`` so values round-trip exactly."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([repr(float(v)) if isinstance(v, float) else v for v in (row[c] for c in columns)])
    return path


def read_csv(path: str | Path) -> list[dict[str, str]]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))
