"""On-disk formats: raw float32 grids, NIfTI-1 ingestion, PNG, manifests.

The native format is a raw grid: an 8-byte magic, one dimensionality byte,
one little-endian uint32 extent per axis, then the float32 voxels in C
order. NIfTI-1 support is read-only, single-file (.nii or .nii.gz), and
covers the common scalar dtypes; intensities are min-max normalised to
[0, 1] on load.
"""
from __future__ import annotations

import gzip
import json
import struct
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .image import Image
from .phantom import DatasetManifest, SubjectRecord, render_record

RAW_MAGIC = b"AGMGRID1"

_NIFTI_DTYPES = {
    2: np.dtype("uint8"),
    4: np.dtype("int16"),
    8: np.dtype("int32"),
    16: np.dtype("float32"),
    64: np.dtype("float64"),
    256: np.dtype("int8"),
    512: np.dtype("uint16"),
    768: np.dtype("uint32"),
}


def write_grid(array: np.ndarray, path) -> None:
    """Write any float32 array in the raw grid format (no range constraint)."""
    array = np.ascontiguousarray(array, dtype=np.float32)
    if array.ndim not in (2, 3):
        raise ValueError("raw grids are 2-D or 3-D")
    with open(path, "wb") as f:
        f.write(RAW_MAGIC)
        f.write(struct.pack("<B", array.ndim))
        for n in array.shape:
            f.write(struct.pack("<I", n))
        f.write(array.astype("<f4").tobytes(order="C"))


def read_grid(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != RAW_MAGIC:
            raise ValueError(f"{path}: not a raw grid file (bad magic)")
        (ndim,) = struct.unpack("<B", f.read(1))
        if ndim not in (2, 3):
            raise ValueError(f"{path}: unsupported dimensionality {ndim}")
        shape = struct.unpack(f"<{ndim}I", f.read(4 * ndim))
        count = int(np.prod(shape))
        payload = f.read(count * 4)
        if len(payload) != count * 4:
            raise ValueError(f"{path}: truncated payload")
        data = np.frombuffer(payload, dtype="<f4", count=count)
    return data.reshape(shape).copy()


def save_volume(image: Image, path) -> None:
    write_grid(image.data, path)


def _read_nifti(path) -> tuple[np.ndarray, tuple[float, ...]]:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    if len(raw) < 348:
        raise ValueError(f"{path}: too short for a NIfTI-1 header")
    (sizeof_hdr,) = struct.unpack("<i", raw[:4])
    if sizeof_hdr == 348:
        end = "<"
    elif struct.unpack(">i", raw[:4])[0] == 348:
        end = ">"
    else:
        raise ValueError(f"{path}: not a NIfTI-1 file (sizeof_hdr != 348)")
    magic = raw[344:348]
    if magic[:3] == b"ni1":
        raise ValueError(f"{path}: detached .hdr/.img pairs are not supported")
    if magic[:3] != b"n+1":
        raise ValueError(f"{path}: not a NIfTI-1 file (bad magic {magic!r})")

    dim = struct.unpack(f"{end}8h", raw[40:56])
    ndim = dim[0]
    if not 1 <= ndim <= 7:
        raise ValueError(f"{path}: invalid dim[0]={ndim}")
    shape = tuple(dim[1 : 1 + ndim])
    (datatype,) = struct.unpack(f"{end}h", raw[70:72])
    if datatype not in _NIFTI_DTYPES:
        raise ValueError(f"{path}: unsupported NIfTI datatype code {datatype}")
    pixdim = struct.unpack(f"{end}8f", raw[76:108])
    (vox_offset,) = struct.unpack(f"{end}f", raw[108:112])
    slope, inter = struct.unpack(f"{end}2f", raw[112:120])

    dtype = _NIFTI_DTYPES[datatype].newbyteorder(end)
    count = int(np.prod(shape))
    start = int(vox_offset)
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=start)
    # NIfTI stores the first axis fastest (Fortran order).
    data = data.reshape(shape[::-1]).transpose(range(ndim - 1, -1, -1))
    data = data.astype(np.float64)
    # scl_slope == 0 means "no scaling" by convention.
    if np.isfinite(slope) and slope != 0.0:
        inter = inter if np.isfinite(inter) else 0.0
        if slope != 1.0 or inter != 0.0:
            data = data * slope + inter

    # Drop trailing singleton axes (e.g. a 3-D scan stored as X,Y,Z,1).
    while data.ndim > 3 and data.shape[-1] == 1:
        data = data[..., 0]
    if data.ndim not in (2, 3):
        raise ValueError(f"{path}: expected a 2-D or 3-D volume, got shape {shape}")
    spacing = tuple(float(abs(p)) or 1.0 for p in pixdim[1 : 1 + data.ndim])
    return data, spacing


def load_volume(path) -> Image:
    """Load a raw grid or NIfTI-1 volume and min-max normalise to [0, 1]."""
    path = Path(path)
    with open(path, "rb") as f:
        head = f.read(8)
    if head == RAW_MAGIC:
        data = read_grid(path).astype(np.float64)
        spacing = None
    elif head[:2] == b"\x1f\x8b" or path.suffix in (".nii",) or path.name.endswith(".nii.gz"):
        data, spacing = _read_nifti(path)
    else:
        raise ValueError(f"{path}: unrecognised volume format")
    if not np.all(np.isfinite(data)):
        raise ValueError(f"{path}: volume contains non-finite voxels")
    lo, hi = float(data.min()), float(data.max())
    if hi > lo:
        data = (data - lo) / (hi - lo)
    else:
        data = np.zeros_like(data)
    return Image(data.astype(np.float32), spacing=spacing)


def save_png(image: Image, path) -> None:
    """Export a 2-D image as 8-bit grayscale PNG."""
    if image.ndim != 2:
        raise ValueError("PNG export takes a 2-D image (slice 3-D volumes first)")
    arr = np.clip(np.rint(image.data * 255.0), 0, 255).astype(np.uint8)
    PILImage.fromarray(arr, mode="L").save(path)


def _diverging_rgb(values: np.ndarray, limit: float) -> np.ndarray:
    """Blue-white-red colormap, symmetric about zero."""
    t = np.clip(values / limit, -1.0, 1.0)
    rgb = np.ones(values.shape + (3,))
    neg = np.clip(-t, 0.0, 1.0)[..., None]
    pos = np.clip(t, 0.0, 1.0)[..., None]
    blue = np.array([0.20, 0.35, 0.85])
    red = np.array([0.85, 0.20, 0.15])
    rgb = rgb * (1.0 - neg) + blue * neg
    rgb = rgb * (1.0 - pos) + red * pos
    return np.clip(np.rint(rgb * 255.0), 0, 255).astype(np.uint8)


def save_difference_png(diff: np.ndarray, path, limit: float | None = None) -> None:
    """Export a signed 2-D difference map with a diverging color scale.

    The scale is centred at zero; ``limit`` (default: the max absolute
    value, or 1 if the map is identically zero) maps to full saturation.
    """
    diff = np.asarray(diff, dtype=np.float64)
    if diff.ndim != 2:
        raise ValueError("difference PNG export takes a 2-D map")
    if limit is None:
        limit = float(np.abs(diff).max()) or 1.0
    PILImage.fromarray(_diverging_rgb(diff, limit), mode="RGB").save(path)


def save_manifest(manifest: DatasetManifest, path) -> None:
    records = []
    for rec in manifest.records:
        if isinstance(rec.image_ref, Image):
            raise ValueError(
                f"record {rec.subject_id} holds an inline image; write it to "
                "disk and set image_ref to the path before saving"
            )
        records.append(
            {"subject_id": rec.subject_id, "age": rec.age, "image_ref": rec.image_ref}
        )
    doc = {
        "age_min": manifest.age_min,
        "age_max": manifest.age_max,
        "dimensionality": manifest.dimensionality,
        "records": records,
        "generator_config": manifest.generator_config,
    }
    with open(path, "w") as f:
        json.dump(doc, f, indent=1, sort_keys=True)
        f.write("\n")


def load_manifest(path) -> DatasetManifest:
    with open(path) as f:
        doc = json.load(f)
    try:
        records = [
            SubjectRecord(r["subject_id"], int(r["age"]), r.get("image_ref"))
            for r in doc["records"]
        ]
        return DatasetManifest(
            records=records,
            age_min=int(doc["age_min"]),
            age_max=int(doc["age_max"]),
            dimensionality=int(doc["dimensionality"]),
            generator_config=doc.get("generator_config"),
        )
    except KeyError as exc:
        raise ValueError(f"{path}: manifest missing required field {exc}") from exc


def resolve_image(manifest: DatasetManifest, record: SubjectRecord, base_dir=None) -> Image:
    """Materialise a record's pixels from path, inline image, or generator."""
    ref = record.image_ref
    if isinstance(ref, Image):
        return ref
    if isinstance(ref, str):
        p = Path(ref)
        if base_dir is not None and not p.is_absolute():
            p = Path(base_dir) / p
        return load_volume(p)
    return render_record(manifest, record)


def dataset_arrays(manifest: DatasetManifest, base_dir=None):
    """All images of a manifest as one float32 array plus ages and ids."""
    images = [resolve_image(manifest, rec, base_dir) for rec in manifest.records]
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise ValueError(f"records disagree on shape: {sorted(shapes)}")
    data = np.stack([im.data for im in images])
    ages = np.array([rec.age for rec in manifest.records], dtype=np.int64)
    ids = [rec.subject_id for rec in manifest.records]
    return data, ages, ids
