"""Binary codecs for every artifact format.

All OV* formats are little-endian and start with a 4-byte ASCII magic and a
u32 version (currently 1). Decoders validate every type invariant and raise
:class:`~ovseg3r_prep.errors.FormatError` with the byte offset of the first
problem. Encoders are canonical: ``encode(decode(encode(x))) == encode(x)``.

Point clouds use PLY through ``plyfile``.
"""

from __future__ import annotations

import io
import logging
import struct
from collections.abc import Callable
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np
from plyfile import PlyData, PlyElement

from ovseg3r_prep.errors import FormatError, ValidationError
from ovseg3r_prep.io_utils import write_bytes_atomic
from ovseg3r_prep.model import (
    CorrespondenceTable,
    EdgeList,
    FeatureMatrix,
    ImageFeatureStack,
    InstanceRaster,
    PointCloud,
    ScenePrediction,
    SuperpointMask,
)

logger = logging.getLogger(__name__)

VERSION = 1
_PREFIX = struct.Struct("<4sI")

_CORR_RECORD = np.dtype([("view", "<u4"), ("x", "<f4"), ("y", "<f4")])
_EDGE_RECORD = np.dtype([("i", "<u4"), ("j", "<u4"), ("w", "<f4")])
_U32_MAX = 0xFFFFFFFF


class _Reader:
    """Cursor over an in-memory artifact that reports byte offsets."""

    def __init__(self, data: bytes, fmt: str) -> None:
        self.data = data
        self.fmt = fmt
        self.pos = 0

    def fail(self, offset: int, message: str) -> FormatError:
        return FormatError(self.fmt, offset, message)

    def prefix(self) -> None:
        if len(self.data) < _PREFIX.size:
            raise self.fail(0, f"truncated header, expected magic '{self.fmt}'")
        magic, version = _PREFIX.unpack_from(self.data, 0)
        if magic != self.fmt.encode("ascii"):
            found = magic.decode("ascii", errors="replace")
            raise self.fail(
                0, f"magic mismatch: expected '{self.fmt}', found {found!r}"
            )
        if version != VERSION:
            raise self.fail(4, f"unsupported version {version}, expected {VERSION}")
        self.pos = _PREFIX.size

    def scalar(self, code: str, name: str) -> int:
        size = struct.calcsize("<" + code)
        if self.pos + size > len(self.data):
            raise self.fail(self.pos, f"truncated header field '{name}'")
        (value,) = struct.unpack_from("<" + code, self.data, self.pos)
        self.pos += size
        return int(value)

    def array(self, dtype: np.dtype | str, count: int, name: str) -> np.ndarray:
        dtype = np.dtype(dtype)
        nbytes = count * dtype.itemsize
        remaining = len(self.data) - self.pos
        if nbytes > remaining:
            raise self.fail(
                self.pos,
                f"dimension overflow: '{name}' needs {nbytes} bytes "
                f"but only {remaining} remain",
            )
        array = np.frombuffer(self.data, dtype=dtype, count=count, offset=self.pos)
        self.pos += nbytes
        return array

    def finish(self) -> None:
        if self.pos != len(self.data):
            raise self.fail(
                self.pos, f"{len(self.data) - self.pos} trailing bytes after payload"
            )


def _first(mask: np.ndarray) -> int:
    return int(np.flatnonzero(mask)[0])


def _check_finite(
    reader: _Reader, values: np.ndarray, base: int, stride: int, name: str
) -> None:
    bad = ~np.isfinite(values)
    if bad.any():
        k = _first(bad)
        raise reader.fail(base + k * stride, f"non-finite {name} at element {k}")


def _prefix(fmt: str) -> bytes:
    return _PREFIX.pack(fmt.encode("ascii"), VERSION)


def _u32(value: int, name: str) -> bytes:
    if not 0 <= value <= _U32_MAX:
        raise ValidationError(f"{name}={value} does not fit in u32")
    return struct.pack("<I", value)


# --- OV3C: correspondence table -------------------------------------------


def encode_ov3c(corr: CorrespondenceTable) -> bytes:
    records = np.empty(corr.point_count, dtype=_CORR_RECORD)
    records["view"] = corr.views
    records["x"] = corr.xy[:, 0]
    records["y"] = corr.xy[:, 1]
    return b"".join(
        [
            _prefix("OV3C"),
            _u32(corr.point_count, "N"),
            _u32(corr.view_count, "V"),
            corr.view_dims.astype("<u4").tobytes(),
            records.tobytes(),
        ]
    )


def decode_ov3c(data: bytes) -> CorrespondenceTable:
    reader = _Reader(data, "OV3C")
    reader.prefix()
    n_offset = reader.pos
    n = reader.scalar("I", "N")
    v_offset = reader.pos
    views = reader.scalar("I", "V")
    if n < 1:
        raise reader.fail(n_offset, "N must be >= 1")
    if views < 1:
        raise reader.fail(v_offset, "V must be >= 1")
    dims_offset = reader.pos
    dims = reader.array("<u4", 2 * views, "view dims").reshape(views, 2)
    if np.any(dims == 0):
        raise reader.fail(dims_offset + 4 * _first(dims.ravel() == 0), "zero view dim")
    base = reader.pos
    records = reader.array(_CORR_RECORD, n, "records")
    reader.finish()

    stride = _CORR_RECORD.itemsize
    bad_view = records["view"] >= views
    if bad_view.any():
        k = _first(bad_view)
        raise reader.fail(
            base + k * stride,
            f"view index {records['view'][k]} >= V={views} for point {k}",
        )
    for name, field_offset in (("x", 4), ("y", 8)):
        values = records[name]
        _check_finite(reader, values, base + field_offset, stride, name)
        outside = (values < 0.0) | (values > 1.0)
        if outside.any():
            k = _first(outside)
            raise reader.fail(
                base + k * stride + field_offset,
                f"{name}={values[k]} outside [0, 1] for point {k}",
            )
    xy = np.stack([records["x"], records["y"]], axis=1)
    return CorrespondenceTable(views=records["view"], xy=xy, view_dims=dims)


# --- OV2M: instance raster ---------------------------------------------------


def encode_ov2m(raster: InstanceRaster) -> bytes:
    v, h, w = raster.labels.shape
    return b"".join(
        [
            _prefix("OV2M"),
            _u32(v, "V"),
            _u32(h, "H"),
            _u32(w, "W"),
            raster.labels.astype("<i4").tobytes(),
        ]
    )


def decode_ov2m(data: bytes) -> InstanceRaster:
    reader = _Reader(data, "OV2M")
    reader.prefix()
    dims = []
    for name in ("V", "H", "W"):
        offset = reader.pos
        value = reader.scalar("I", name)
        if value < 1:
            raise reader.fail(offset, f"{name} must be >= 1")
        dims.append(value)
    v, h, w = dims
    base = reader.pos
    labels = reader.array("<i4", v * h * w, "labels")
    reader.finish()
    below = labels < -1
    if below.any():
        k = _first(below)
        raise reader.fail(base + 4 * k, f"label {labels[k]} < -1 (label range)")
    return InstanceRaster(labels=labels.reshape(v, h, w))


# --- OVFM: feature matrix ---------------------------------------------------


def encode_ovfm(matrix: FeatureMatrix) -> bytes:
    return b"".join(
        [
            _prefix("OVFM"),
            _u32(matrix.rows, "rows"),
            _u32(matrix.cols, "cols"),
            matrix.data.astype("<f4").tobytes(),
        ]
    )


def decode_ovfm(data: bytes) -> FeatureMatrix:
    reader = _Reader(data, "OVFM")
    reader.prefix()
    rows = reader.scalar("I", "rows")
    cols = reader.scalar("I", "cols")
    base = reader.pos
    values = reader.array("<f4", rows * cols, "data")
    reader.finish()
    _check_finite(reader, values, base, 4, "feature value")
    return FeatureMatrix(data=values.reshape(rows, cols))


# --- OVIF: image feature stack ----------------------------------------------


def encode_ovif(stack: ImageFeatureStack) -> bytes:
    v, h, w, c = stack.data.shape
    return b"".join(
        [
            _prefix("OVIF"),
            _u32(v, "V"),
            _u32(h, "h"),
            _u32(w, "w"),
            _u32(c, "C"),
            stack.data.astype("<f4").tobytes(),
        ]
    )


def decode_ovif(data: bytes) -> ImageFeatureStack:
    reader = _Reader(data, "OVIF")
    reader.prefix()
    dims = []
    for name in ("V", "h", "w", "C"):
        offset = reader.pos
        value = reader.scalar("I", name)
        if value < 1 and name != "C":
            raise reader.fail(offset, f"{name} must be >= 1")
        dims.append(value)
    base = reader.pos
    values = reader.array("<f4", int(np.prod(dims)), "data")
    reader.finish()
    _check_finite(reader, values, base, 4, "feature value")
    return ImageFeatureStack(data=values.reshape(dims))


# --- OVSP: superpoint labels ------------------------------------------------


def encode_ovsp(sp: SuperpointMask) -> bytes:
    return b"".join(
        [
            _prefix("OVSP"),
            _u32(sp.point_count, "N"),
            _u32(sp.superpoint_count, "n"),
            sp.point_labels.astype("<u4").tobytes(),
        ]
    )


def decode_ovsp(data: bytes, strict: bool = True) -> SuperpointMask:
    """Decode superpoint labels.

    Args:
        data: Raw OVSP bytes.
        strict: Reject non-contiguous labels. When False, ``n`` is re-derived
            and labels are remapped by ascending original label.

    Returns:
        The decoded superpoint mask.

    Raises:
        FormatError: On any malformed input.
    """
    reader = _Reader(data, "OVSP")
    reader.prefix()
    n_offset = reader.pos
    points = reader.scalar("I", "N")
    if points < 1:
        raise reader.fail(n_offset, "N must be >= 1")
    count = reader.scalar("I", "n")
    base = reader.pos
    labels = reader.array("<u4", points, "labels").astype(np.int64)
    reader.finish()

    if not strict:
        unique, remapped = np.unique(labels, return_inverse=True)
        if unique.size != count:
            logger.warning("OVSP header n=%d re-derived as %d", count, unique.size)
        return SuperpointMask(point_labels=remapped, superpoint_count=unique.size)

    too_big = labels >= count
    if too_big.any():
        k = _first(too_big)
        raise reader.fail(
            base + 4 * k, f"labels not contiguous: label {labels[k]} >= n={count}"
        )
    used = np.bincount(labels, minlength=count).astype(bool)
    if not used.all():
        raise reader.fail(
            base, f"labels not contiguous: label {_first(~used)} is never used"
        )
    return SuperpointMask(point_labels=labels, superpoint_count=count)


# --- OVEG: edge list --------------------------------------------------------


def encode_oveg(edges: EdgeList) -> bytes:
    if edges.edge_count and edges.max_endpoint() > _U32_MAX:
        raise ValidationError("edge endpoint does not fit in u32")
    records = np.empty(edges.edge_count, dtype=_EDGE_RECORD)
    records["i"] = edges.i
    records["j"] = edges.j
    records["w"] = edges.w
    return b"".join(
        [_prefix("OVEG"), struct.pack("<Q", edges.edge_count), records.tobytes()]
    )


def decode_oveg(data: bytes) -> EdgeList:
    reader = _Reader(data, "OVEG")
    reader.prefix()
    count = reader.scalar("Q", "E")
    base = reader.pos
    records = reader.array(_EDGE_RECORD, count, "records")
    reader.finish()

    stride = _EDGE_RECORD.itemsize
    i = records["i"].astype(np.int64)
    j = records["j"].astype(np.int64)
    w = records["w"]
    unordered = i >= j
    if unordered.any():
        k = _first(unordered)
        raise reader.fail(base + k * stride, f"edge {k} has i={i[k]} >= j={j[k]}")
    _check_finite(reader, w, base + 8, stride, "weight")
    outside = (w < 0.0) | (w > 2.0)
    if outside.any():
        k = _first(outside)
        raise reader.fail(base + k * stride + 8, f"weight {w[k]} outside [0, 2]")
    if count:
        order = np.lexsort((np.arange(count), j, i))
        same = (np.diff(i[order]) == 0) & (np.diff(j[order]) == 0)
        repeated = np.flatnonzero(same)
        if repeated.size:
            k = int(order[repeated + 1].min())
            raise reader.fail(
                base + k * stride, f"duplicate edge ({i[k]}, {j[k]}) at record {k}"
            )
    return EdgeList(i=i, j=j, w=w)


# --- OVPR: scene prediction -------------------------------------------------


def encode_ovpr(pred: ScenePrediction) -> bytes:
    return b"".join(
        [
            _prefix("OVPR"),
            _u32(pred.query_count, "q"),
            _u32(pred.superpoint_count, "n"),
            pred.masks.astype(np.uint8).tobytes(),
            pred.classes.astype("<i4").tobytes(),
            pred.init_superpoints.astype("<u4").tobytes(),
        ]
    )


def decode_ovpr(data: bytes) -> ScenePrediction:
    reader = _Reader(data, "OVPR")
    reader.prefix()
    q = reader.scalar("I", "q")
    n = reader.scalar("I", "n")
    mask_base = reader.pos
    masks = reader.array(np.uint8, q * n, "masks")
    class_base = reader.pos
    classes = reader.array("<i4", q, "classes")
    init_base = reader.pos
    init = reader.array("<u4", q, "init_superpoints").astype(np.int64)
    reader.finish()

    not_bool = masks > 1
    if not_bool.any():
        raise reader.fail(mask_base + _first(not_bool), "mask byte is not 0 or 1")
    negative = classes < 0
    if negative.any():
        k = _first(negative)
        raise reader.fail(class_base + 4 * k, f"class index {classes[k]} < 0")
    out_of_range = init >= n
    if out_of_range.any():
        k = _first(out_of_range)
        raise reader.fail(
            init_base + 4 * k, f"init superpoint {init[k]} >= n={n} (label range)"
        )
    if q:
        order = np.argsort(init, kind="stable")
        repeated = np.flatnonzero(np.diff(init[order]) == 0)
        if repeated.size:
            k = int(order[repeated[0] + 1])
            raise reader.fail(init_base + 4 * k, f"init superpoint {init[k]} repeated")
    return ScenePrediction(
        masks=masks.reshape(q, n).astype(bool), classes=classes, init_superpoints=init
    )


# --- PLY: point clouds ------------------------------------------------------


def encode_ply(
    cloud: PointCloud, colors: np.ndarray | None = None, text: bool = False
) -> bytes:
    """Encode a cloud as PLY with float x, y, z (and uchar colors if given)."""
    fields: list[tuple[str, str]] = [("x", "f4"), ("y", "f4"), ("z", "f4")]
    if colors is not None:
        colors = np.asarray(colors)
        if colors.shape != (cloud.point_count, 3):
            raise ValidationError(
                f"colors must have shape ({cloud.point_count}, 3), got {colors.shape}"
            )
        fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
    vertex = np.empty(cloud.point_count, dtype=fields)
    for axis, name in enumerate("xyz"):
        vertex[name] = cloud.positions[:, axis]
    if colors is not None:
        for channel, name in enumerate(("red", "green", "blue")):
            vertex[name] = colors[:, channel]
    element = PlyElement.describe(vertex, "vertex")
    stream = io.BytesIO()
    PlyData([element], text=text, byte_order="<").write(stream)
    return stream.getvalue()


def decode_ply(data: bytes) -> PointCloud:
    try:
        ply = PlyData.read(io.BytesIO(data))
    except Exception as e:
        raise FormatError("PLY", 0, f"unreadable PLY: {e}") from e
    if not ply.text and ply.byte_order != "<":
        raise FormatError("PLY", 0, "only ascii and binary_little_endian are supported")
    try:
        vertex = ply["vertex"]
    except KeyError as e:
        raise FormatError("PLY", 0, "missing element 'vertex'") from e
    names = {prop.name for prop in vertex.properties}
    missing = [axis for axis in "xyz" if axis not in names]
    if missing:
        raise FormatError("PLY", 0, f"vertex element lacks properties {missing}")
    positions = np.stack(
        [np.asarray(vertex[axis], dtype=np.float32) for axis in "xyz"], axis=1
    )
    if positions.shape[0] < 1:
        raise FormatError("PLY", 0, "vertex element is empty")
    if not np.all(np.isfinite(positions)):
        row = _first(~np.isfinite(positions).all(axis=1))
        header_end = data.find(b"end_header")
        raise FormatError(
            "PLY", max(header_end, 0), f"non-finite coordinate in vertex {row}"
        )
    return PointCloud(positions=positions)


# --- registry ---------------------------------------------------------------


@dataclass(frozen=True)
class Codec:
    """Encoder/decoder pair registered under a file suffix."""

    suffix: str
    value_type: type
    encode: Callable[[Any], bytes]
    decode: Callable[[bytes], Any]


CODECS: dict[str, Codec] = {
    codec.suffix: codec
    for codec in (
        Codec(".ply", PointCloud, encode_ply, decode_ply),
        Codec(".ov3c", CorrespondenceTable, encode_ov3c, decode_ov3c),
        Codec(".ov2m", InstanceRaster, encode_ov2m, decode_ov2m),
        Codec(".ovfm", FeatureMatrix, encode_ovfm, decode_ovfm),
        Codec(".ovif", ImageFeatureStack, encode_ovif, decode_ovif),
        Codec(".ovsp", SuperpointMask, encode_ovsp, decode_ovsp),
        Codec(".oveg", EdgeList, encode_oveg, decode_oveg),
        Codec(".ovpr", ScenePrediction, encode_ovpr, decode_ovpr),
    )
}


def _codec_for(path: Path) -> Codec:
    suffix = path.suffix.lower()
    if suffix not in CODECS:
        raise ValidationError(
            f"unknown artifact suffix '{suffix}' for {path}; "
            f"expected one of {sorted(CODECS)}"
        )
    return CODECS[suffix]


def load(path: Path, expected: type | None = None) -> Any:
    """Read and decode the artifact at ``path``, picking the codec by suffix.

    Raises:
        FileNotFoundError: If the file does not exist.
        FormatError: If the contents are malformed.
        ValidationError: If the suffix is unknown or the type is unexpected.
    """
    if not path.exists():
        raise FileNotFoundError(f"Artifact not found: {path}")
    codec = _codec_for(path)
    if expected is not None and codec.value_type is not expected:
        raise ValidationError(
            f"{path} holds a {codec.value_type.__name__}, "
            f"expected {expected.__name__}"
        )
    value = codec.decode(path.read_bytes())
    logger.debug("loaded %s from %s", type(value).__name__, path)
    return value


def save(path: Path, value: Any) -> None:
    """Encode ``value`` with the codec matching ``path`` and write it atomically."""
    codec = _codec_for(path)
    if not isinstance(value, codec.value_type):
        raise ValidationError(
            f"cannot write {type(value).__name__} to a '{codec.suffix}' file"
        )
    write_bytes_atomic(path, codec.encode(value))
    logger.debug("saved %s to %s", type(value).__name__, path)
