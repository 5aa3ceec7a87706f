"""Dataset directories: ``manifest.json`` plus one ``.ggs`` file per slice.

Slice file layout (little-endian)::

    b"GGAS" | u32 version=1 | u32 H | u32 W | H*W f32 image
    | u8 mask flag | H*W u8 mask (if flag) | u32 CRC32 of all preceding bytes
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from ..exceptions import ChecksumError, FormatError, MissingManifestError, TruncationError
from .dataset import Dataset, Sample, sample_id

MAGIC = b"GGAS"
VERSION = 1
MANIFEST_VERSION = 1
MANIFEST = "manifest.json"
SUFFIX = ".ggs"


def encode_slice(sample: Sample) -> bytes:
    h, w = sample.image.shape
    image32 = sample.image.astype("<f4")
    if not np.array_equal(image32.astype(np.float64), sample.image):
        raise FormatError(f"image of {sample.sample_id!r} is not representable in float32")
    parts = [MAGIC, struct.pack("<III", VERSION, h, w), image32.tobytes()]
    if sample.mask is None:
        parts.append(b"\x00")
    else:
        parts.append(b"\x01" + np.asarray(sample.mask, dtype=np.uint8).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode_slice(buf: bytes, path=None, expect_shape=None):
    """Return ``(image float64, mask uint8 or None)`` from slice-file bytes."""
    if len(buf) < 16:
        raise TruncationError("slice file shorter than its header", path, len(buf))
    if buf[:4] != MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}", path, 0)
    version, h, w = struct.unpack_from("<III", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported slice version {version}", path, 4)
    if expect_shape is not None and (h, w) != tuple(expect_shape):
        raise FormatError(f"slice is {h}x{w}, manifest says {expect_shape[0]}x{expect_shape[1]}", path, 8)
    pos = 16
    n = h * w
    if len(buf) < pos + 4 * n + 1 + 4:
        raise TruncationError("slice file truncated inside image payload", path, len(buf))
    with np.errstate(invalid="ignore"):  # corrupt NaN payloads are rejected below
        image = np.frombuffer(buf, dtype="<f4", count=n, offset=pos).astype(np.float64).reshape(h, w)
    pos += 4 * n
    flag = buf[pos]
    if flag not in (0, 1):
        raise FormatError(f"invalid mask flag {flag}", path, pos)
    pos += 1
    mask = None
    if flag:
        if len(buf) < pos + n + 4:
            raise TruncationError("slice file truncated inside mask payload", path, len(buf))
        mask = np.frombuffer(buf, dtype=np.uint8, count=n, offset=pos).reshape(h, w).copy()
        pos += n
    if len(buf) != pos + 4:
        if len(buf) < pos + 4:
            raise TruncationError("slice file missing CRC", path, len(buf))
        raise FormatError("trailing bytes after CRC", path, pos + 4)
    (crc,) = struct.unpack_from("<I", buf, pos)
    if zlib.crc32(buf[:pos]) != crc:
        raise ChecksumError("slice CRC32 mismatch", path, pos)
    if mask is not None and mask.max(initial=0) > 1:
        raise FormatError("mask values must be 0 or 1", path, pos - n)
    if not np.all(np.isfinite(image)):
        raise FormatError("image contains non-finite values", path, 16)
    return image, mask


def _canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def write_dataset(dataset: Dataset, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    h, w = dataset.image_shape
    slices = {len(dataset.slices(p)) for p in dataset.patients()}
    if len(slices) != 1:
        raise FormatError("all patients must have the same number of slices")
    for s in dataset:
        (directory / f"{s.sample_id}{SUFFIX}").write_bytes(encode_slice(s))
    manifest = {
        "version": MANIFEST_VERSION,
        "H": h,
        "W": w,
        "slices_per_patient": slices.pop(),
        "sites": sorted({s.site for s in dataset}),
        "seed": dataset.meta.get("seed"),
        "site_params": dataset.meta.get("site_params", {}),
        "split": {p: dataset.split[p] for p in dataset.patients()},
        "patient_sites": {p: dataset.site_of(p) for p in dataset.patients()},
    }
    manifest["crc32"] = zlib.crc32(_canonical(manifest))
    (directory / MANIFEST).write_bytes(_pretty(manifest))
    return directory


def _pretty(manifest: dict) -> bytes:
    return (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode("utf-8")


def read_manifest(directory) -> dict:
    path = Path(directory) / MANIFEST
    if not path.is_file():
        raise MissingManifestError("no manifest.json", str(directory))
    raw = path.read_bytes()
    try:
        manifest = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"manifest is not valid UTF-8 JSON ({exc})", path, getattr(exc, "pos", None)) from None
    if not isinstance(manifest, dict) or "crc32" not in manifest:
        raise FormatError("manifest lacks crc32", path)
    # the CRC covers content only, so also pin the exact layout the writer emits
    if _pretty(manifest) != raw:
        raise FormatError("manifest bytes differ from their canonical layout", path)
    claimed = manifest.pop("crc32")
    if zlib.crc32(_canonical(manifest)) != claimed:
        raise ChecksumError("manifest CRC32 mismatch", path)
    if manifest.get("version") != MANIFEST_VERSION:
        raise FormatError(f"unsupported manifest version {manifest.get('version')!r}", path)
    return manifest


def read_dataset(directory) -> Dataset:
    directory = Path(directory)
    manifest = read_manifest(directory)
    h, w = manifest["H"], manifest["W"]
    samples = []
    for pid in sorted(manifest["split"]):
        site = manifest["patient_sites"][pid]
        for k in range(manifest["slices_per_patient"]):
            sid = sample_id(pid, k)
            path = directory / f"{sid}{SUFFIX}"
            if not path.is_file():
                raise TruncationError(f"slice file {path.name} listed by manifest is missing", str(directory))
            image, mask = decode_slice(path.read_bytes(), path, (h, w))
            samples.append(Sample(sid, pid, site, k, image, mask))
    meta = {
        "H": h,
        "W": w,
        "slices_per_patient": manifest["slices_per_patient"],
        "sites": manifest["sites"],
        "seed": manifest["seed"],
        "site_params": manifest["site_params"],
    }
    return Dataset(samples, manifest["split"], meta)
