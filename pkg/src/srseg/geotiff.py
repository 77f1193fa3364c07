"""Minimal GeoTIFF reader/writer for the raster types this package produces.

Supports classic (non-Big) TIFF, strip organization, band-interleaved pixels,
uint8/uint16/float32/float64 samples, and optional deflate compression. The
georeferencing triple (pixel scale, tiepoint, EPSG geokey) is mandatory on
read: a file without it is rejected rather than silently defaulted. Written
files contain no timestamps, so identical rasters produce identical bytes.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from .raster import GeoRaster, GeoTransform, GEOGRAPHIC_EPSG

__all__ = ["read_geotiff", "write_geotiff", "GeoTiffError"]


class GeoTiffError(ValueError):
    """Malformed or unsupported GeoTIFF content."""


# TIFF tag ids
_IMAGE_WIDTH = 256
_IMAGE_LENGTH = 257
_BITS_PER_SAMPLE = 258
_COMPRESSION = 259
_PHOTOMETRIC = 262
_STRIP_OFFSETS = 273
_SAMPLES_PER_PIXEL = 277
_ROWS_PER_STRIP = 278
_STRIP_BYTE_COUNTS = 279
_PLANAR_CONFIG = 284
_PREDICTOR = 317
_TILE_WIDTH = 322
_EXTRA_SAMPLES = 338
_SAMPLE_FORMAT = 339
_MODEL_PIXEL_SCALE = 33550
_MODEL_TIEPOINT = 33922
_GEO_KEY_DIRECTORY = 34735
_GDAL_NODATA = 42113

# field type -> (struct char, size)
_TYPES = {1: ("B", 1), 2: ("c", 1), 3: ("H", 2), 4: ("I", 4),
          5: ("II", 8), 11: ("f", 4), 12: ("d", 8)}

_GT_MODEL_TYPE = 1024
_GT_RASTER_TYPE = 1025
_GEOGRAPHIC_TYPE = 2048
_PROJECTED_CS_TYPE = 3072


def _read_ifd(buf: bytes, bo: str) -> dict[int, tuple]:
    (ifd_off,) = struct.unpack_from(bo + "I", buf, 4)
    (n,) = struct.unpack_from(bo + "H", buf, ifd_off)
    tags = {}
    for i in range(n):
        tag, ftype, count = struct.unpack_from(bo + "HHI", buf, ifd_off + 2 + 12 * i)
        if ftype not in _TYPES:
            continue
        ch, size = _TYPES[ftype]
        nbytes = size * count
        voff = ifd_off + 2 + 12 * i + 8
        if nbytes > 4:
            (voff,) = struct.unpack_from(bo + "I", buf, voff)
        if ftype == 2:
            vals = buf[voff:voff + count].split(b"\x00", 1)[0].decode("ascii", "replace")
        elif ftype == 5:
            raw = struct.unpack_from(bo + "I" * (2 * count), buf, voff)
            vals = tuple(raw[2 * j] / raw[2 * j + 1] for j in range(count))
        else:
            vals = struct.unpack_from(bo + ch * count, buf, voff)
        tags[tag] = vals
    return tags


def _tag1(tags: dict, tag: int, default=None):
    v = tags.get(tag)
    if v is None:
        return default
    return v[0] if isinstance(v, tuple) else v


def read_geotiff(path) -> GeoRaster:
    """Load a GeoTIFF as a band-major :class:`GeoRaster`.

    Raises :class:`FileNotFoundError` for missing files and
    :class:`GeoTiffError` for unsupported layouts, missing geotransform, or
    missing CRS.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    buf = path.read_bytes()
    if len(buf) < 8 or buf[:2] not in (b"II", b"MM"):
        raise GeoTiffError(f"{path}: not a TIFF file")
    bo = "<" if buf[:2] == b"II" else ">"
    (magic,) = struct.unpack_from(bo + "H", buf, 2)
    if magic != 42:
        raise GeoTiffError(f"{path}: not a classic TIFF (magic={magic})")
    tags = _read_ifd(buf, bo)

    if _TILE_WIDTH in tags:
        raise GeoTiffError(f"{path}: tiled TIFF layout is not supported")
    if _tag1(tags, _PREDICTOR, 1) != 1:
        raise GeoTiffError(f"{path}: predictor-compressed TIFF is not supported")

    width = _tag1(tags, _IMAGE_WIDTH)
    height = _tag1(tags, _IMAGE_LENGTH)
    if width is None or height is None:
        raise GeoTiffError(f"{path}: missing image dimensions")
    spp = int(_tag1(tags, _SAMPLES_PER_PIXEL, 1))
    bits = tags.get(_BITS_PER_SAMPLE, (8,))
    fmt = tags.get(_SAMPLE_FORMAT, (1,) * spp)
    if len(set(bits)) != 1 or len(set(fmt)) != 1:
        raise GeoTiffError(f"{path}: mixed per-band sample types are not supported")
    key = (bits[0], fmt[0])
    dtype_map = {(8, 1): np.uint8, (16, 1): np.uint16,
                 (32, 1): np.uint32, (32, 3): np.float32, (64, 3): np.float64}
    if key not in dtype_map:
        raise GeoTiffError(f"{path}: unsupported pixel type (bits={bits[0]}, format={fmt[0]})")
    dtype = np.dtype(dtype_map[key]).newbyteorder(bo)

    comp = int(_tag1(tags, _COMPRESSION, 1))
    if comp not in (1, 8, 32946):
        raise GeoTiffError(f"{path}: unsupported compression {comp}")
    planar = int(_tag1(tags, _PLANAR_CONFIG, 1))
    offsets = tags.get(_STRIP_OFFSETS)
    counts = tags.get(_STRIP_BYTE_COUNTS)
    if offsets is None or counts is None:
        raise GeoTiffError(f"{path}: missing strip layout")
    rps = int(_tag1(tags, _ROWS_PER_STRIP, height))

    raw = b"".join(
        zlib.decompress(buf[o:o + c]) if comp != 1 else buf[o:o + c]
        for o, c in zip(offsets, counts)
    )
    flat = np.frombuffer(raw, dtype=dtype)
    if flat.size != width * height * spp:
        raise GeoTiffError(f"{path}: pixel payload has {flat.size} samples, "
                           f"expected {width * height * spp}")
    if planar == 1:
        data = flat.reshape(height, width, spp).transpose(2, 0, 1)
    elif planar == 2:
        data = flat.reshape(spp, height, width)
    else:
        raise GeoTiffError(f"{path}: unsupported planar configuration {planar}")
    data = np.ascontiguousarray(data.astype(dtype.newbyteorder("=")))

    scale = tags.get(_MODEL_PIXEL_SCALE)
    tiepoint = tags.get(_MODEL_TIEPOINT)
    if scale is None or tiepoint is None:
        raise GeoTiffError(f"{path}: missing geotransform (pixel scale / tiepoint)")
    i, j, _, x, y, _ = tiepoint[:6]
    origin_x = x - i * scale[0]
    origin_y = y + j * scale[1]

    geokeys = tags.get(_GEO_KEY_DIRECTORY)
    epsg = None
    if geokeys is not None:
        nkeys = geokeys[3]
        for k in range(int(nkeys)):
            key_id, loc, cnt, val = geokeys[4 + 4 * k: 8 + 4 * k]
            if key_id in (_GEOGRAPHIC_TYPE, _PROJECTED_CS_TYPE) and loc == 0:
                epsg = int(val)
    if epsg is None:
        raise GeoTiffError(f"{path}: missing CRS (no EPSG geokey)")

    nodata = None
    nd_str = tags.get(_GDAL_NODATA)
    if nd_str:
        try:
            nodata = float(nd_str.strip().strip("\x00"))
            if data.dtype.kind in "ui" or nodata == int(nodata):
                nodata = int(nodata) if nodata == int(nodata) else nodata
        except ValueError:
            nodata = None

    transform = GeoTransform(origin_x, origin_y, scale[0], scale[1], f"EPSG:{epsg}")
    return GeoRaster(data, transform, nodata)


def _pack_entry(bo, tag, ftype, values, aux: bytearray, aux_base: int) -> bytes:
    ch, size = _TYPES[ftype]
    if ftype == 2:
        payload = values  # already bytes with NUL
        count = len(payload)
    else:
        payload = struct.pack(bo + ch * len(values), *values)
        count = len(values)
    if len(payload) <= 4:
        return struct.pack(bo + "HHI", tag, ftype, count) + payload.ljust(4, b"\x00")
    off = aux_base + len(aux)
    aux.extend(payload)
    if len(aux) % 2:
        aux.extend(b"\x00")
    return struct.pack(bo + "HHII", tag, ftype, count, off)


def write_geotiff(raster: GeoRaster, path, compress: bool = False) -> None:
    """Write a :class:`GeoRaster` as a band-interleaved strip GeoTIFF.

    uint8 rasters round-trip bit-exactly; float32 within storage precision.
    ``compress`` enables deflate strips.
    """
    path = Path(path)
    data = raster.data
    if data.dtype == np.float64:
        data = data.astype(np.float32)
    if data.dtype not in (np.dtype(np.uint8), np.dtype(np.uint16), np.dtype(np.float32)):
        raise GeoTiffError(f"cannot write dtype {data.dtype}; use uint8, uint16, or float32")
    bands, height, width = data.shape
    interleaved = np.ascontiguousarray(data.transpose(1, 2, 0))  # h, w, bands
    row_bytes = width * bands * data.dtype.itemsize
    rows_per_strip = max(1, min(height, (1 << 16) // max(1, row_bytes)))
    n_strips = (height + rows_per_strip - 1) // rows_per_strip
    strips = []
    for s in range(n_strips):
        chunk = interleaved[s * rows_per_strip:(s + 1) * rows_per_strip]
        payload = chunk.astype(data.dtype.newbyteorder("<")).tobytes()
        strips.append(zlib.compress(payload, 6) if compress else payload)

    t = raster.transform
    sample_format = 3 if data.dtype.kind == "f" else 1
    bits = data.dtype.itemsize * 8
    epsg = t.epsg
    model_type = 2 if t.is_geographic else 1
    cs_key = _GEOGRAPHIC_TYPE if model_type == 2 else _PROJECTED_CS_TYPE
    geokeys = [1, 1, 0, 3,
               _GT_MODEL_TYPE, 0, 1, model_type,
               _GT_RASTER_TYPE, 0, 1, 1,
               cs_key, 0, 1, epsg]

    entries = [
        (_IMAGE_WIDTH, 4, (width,)),
        (_IMAGE_LENGTH, 4, (height,)),
        (_BITS_PER_SAMPLE, 3, (bits,) * bands),
        (_COMPRESSION, 3, (8 if compress else 1,)),
        (_PHOTOMETRIC, 3, (1,)),
        (_STRIP_OFFSETS, 4, None),  # filled below
        (_SAMPLES_PER_PIXEL, 3, (bands,)),
        (_ROWS_PER_STRIP, 4, (rows_per_strip,)),
        (_STRIP_BYTE_COUNTS, 4, tuple(len(s) for s in strips)),
        (_PLANAR_CONFIG, 3, (1,)),
        (_SAMPLE_FORMAT, 3, (sample_format,) * bands),
        (_MODEL_PIXEL_SCALE, 12, (t.pixel_size_x, t.pixel_size_y, 0.0)),
        (_MODEL_TIEPOINT, 12, (0.0, 0.0, 0.0, t.origin_x, t.origin_y, 0.0)),
        (_GEO_KEY_DIRECTORY, 3, tuple(geokeys)),
    ]
    if bands > 1:
        entries.insert(10, (_EXTRA_SAMPLES, 3, (0,) * (bands - 1)))
    if raster.nodata is not None:
        nd = raster.nodata
        text = (f"{int(nd)}" if float(nd) == int(nd) else repr(float(nd))).encode() + b"\x00"
        entries.append((_GDAL_NODATA, 2, text))
    entries.sort(key=lambda e: e[0])

    bo = "<"
    ifd_offset = 8
    ifd_size = 2 + 12 * len(entries) + 4
    aux_base = ifd_offset + ifd_size
    # first pass with dummy strip offsets to size the aux area
    aux_probe = bytearray()
    for tag, ftype, values in entries:
        vals = (0,) * n_strips if values is None else values
        _pack_entry(bo, tag, ftype, vals, aux_probe, aux_base)
    data_base = aux_base + len(aux_probe)
    offsets = []
    pos = data_base
    for s in strips:
        offsets.append(pos)
        pos += len(s)

    aux = bytearray()
    packed = []
    for tag, ftype, values in entries:
        vals = tuple(offsets) if values is None else values
        packed.append(_pack_entry(bo, tag, ftype, vals, aux, aux_base))
    assert len(aux) == len(aux_probe)

    out = bytearray()
    out += struct.pack(bo + "2sHI", b"II", 42, ifd_offset)
    out += struct.pack(bo + "H", len(entries))
    out += b"".join(packed)
    out += struct.pack(bo + "I", 0)
    out += aux
    for s in strips:
        out += s
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(bytes(out))
