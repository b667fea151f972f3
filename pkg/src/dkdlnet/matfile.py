"""Reader for MATLAB level-5 MAT-files, the container CWRU recordings ship in.

Only what the vibration corpus needs: named 2-D numeric matrices of class
double or int16, plain or zlib-compressed, in either byte order. Anything
else in the file (cells, structs, complex or higher-rank arrays) is skipped
with a warning naming the variable, never a crash.

Format summary: a 128-byte header (116 bytes of text, 8 reserved, version
word 0x0100, endian tag "IM"/"MI") followed by tagged data elements. Each
tag is two 32-bit words (storage type, byte count), except the small-element
form where both live in the first word and up to 4 data bytes follow in the
second. Matrices are miMATRIX elements whose payload is a sequence of
sub-elements (flags, dimensions, name, values); values may be stored in a
narrower type than the array class and are widened on read. Data is
column-major. Compressed elements (miCOMPRESSED) wrap one complete element
in a zlib stream and are the only elements not padded to 8 bytes.
"""

from __future__ import annotations

import logging
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Union

import numpy as np

from .errors import MatFormatError, MatTruncatedError

log = logging.getLogger(__name__)

HEADER_SIZE = 128

MI_INT8 = 1
MI_UINT8 = 2
MI_INT16 = 3
MI_UINT16 = 4
MI_INT32 = 5
MI_UINT32 = 6
MI_SINGLE = 7
MI_DOUBLE = 9
MI_INT64 = 12
MI_UINT64 = 13
MI_MATRIX = 14
MI_COMPRESSED = 15

_STORAGE_DTYPES = {
    MI_INT8: "i1", MI_UINT8: "u1", MI_INT16: "i2", MI_UINT16: "u2",
    MI_INT32: "i4", MI_UINT32: "u4", MI_SINGLE: "f4", MI_DOUBLE: "f8",
    MI_INT64: "i8", MI_UINT64: "u8",
}

MX_DOUBLE_CLASS = 6
MX_INT16_CLASS = 10

_CLASS_DTYPES = {MX_DOUBLE_CLASS: np.float64, MX_INT16_CLASS: np.int16}
_CLASS_NAMES = {
    1: "cell", 2: "struct", 3: "object", 4: "char", 5: "sparse", 6: "double",
    7: "single", 8: "int8", 9: "uint8", 10: "int16", 11: "uint16",
    12: "int32", 13: "uint32", 14: "int64", 15: "uint64",
}

_FLAG_COMPLEX = 0x0800


@dataclass
class MatVariable:
    name: str
    data: np.ndarray  # 2-d, dtype float64 or int16


class _Cursor:
    """Bounds-checked reads over a buffer; offsets reported relative to the file."""

    def __init__(self, buf: bytes, byte_order: str, file_offset: int = 0):
        self.buf = buf
        self.bo = byte_order
        self.pos = 0
        self.file_offset = file_offset

    @property
    def offset(self) -> int:
        return self.file_offset + self.pos

    def remaining(self) -> int:
        return len(self.buf) - self.pos

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise MatTruncatedError(
                f"{what} needs {n} bytes but only {len(self.buf) - self.pos} remain",
                self.offset)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack(self.bo + "I", self.take(4, what))[0]

    def tag(self, what: str):
        """(storage_type, nbytes, payload); advances past padding except for
        compressed elements, which the format leaves unpadded."""
        start = self.offset
        first = self.u32(f"{what} tag")
        if first >> 16:  # small element: count in the high half-word
            mdtype, nbytes = first & 0xFFFF, first >> 16
            payload = self.take(4, f"{what} small data")[:nbytes]
            return mdtype, nbytes, payload
        mdtype = first
        nbytes = self.u32(f"{what} tag")
        payload = self.take(nbytes, f"{what} data (element starting at byte {start})")
        if mdtype != MI_COMPRESSED:
            self.take((8 - nbytes % 8) % 8, f"{what} padding")
        return mdtype, nbytes, payload


def _detect_byte_order(buf: bytes, path) -> str:
    if len(buf) < HEADER_SIZE:
        raise MatFormatError(
            f"{path}: not a MAT-v5 file (only {len(buf)} bytes, header needs {HEADER_SIZE})")
    endian = buf[126:128]
    if endian == b"IM":
        bo = "<"
    elif endian == b"MI":
        bo = ">"
    else:
        raise MatFormatError(f"{path}: not a MAT-v5 file (endian indicator {endian!r})")
    version = struct.unpack(bo + "H", buf[124:126])[0]
    if version != 0x0100:
        raise MatFormatError(f"{path}: not a MAT-v5 file (version word 0x{version:04x})")
    return bo


def _numeric_subelement(cur: _Cursor, what: str) -> np.ndarray:
    mdtype, nbytes, payload = cur.tag(what)
    code = _STORAGE_DTYPES.get(mdtype)
    if code is None:
        raise MatFormatError(f"{what}: storage type {mdtype} is not numeric")
    dtype = np.dtype(cur.bo + code)
    if nbytes % dtype.itemsize:
        raise MatFormatError(
            f"{what}: {nbytes} bytes is not a whole number of {dtype} values")
    return np.frombuffer(payload, dtype=dtype)


def _parse_matrix(payload: bytes, bo: str, file_offset: int) -> Optional[MatVariable]:
    cur = _Cursor(payload, bo, file_offset)

    mdtype, _, flag_bytes = cur.tag("array flags")
    if mdtype != MI_UINT32 or len(flag_bytes) < 8:
        raise MatFormatError(f"matrix at byte {file_offset}: malformed array-flags block")
    flags = struct.unpack(bo + "I", flag_bytes[:4])[0]
    array_class = flags & 0xFF
    is_complex = bool(flags & _FLAG_COMPLEX)

    mdtype, nbytes, dim_bytes = cur.tag("dimensions")
    if mdtype != MI_INT32:
        raise MatFormatError(f"matrix at byte {file_offset}: dimensions stored as type {mdtype}")
    dims = struct.unpack(f"{bo}{nbytes // 4}i", dim_bytes)

    mdtype, _, name_bytes = cur.tag("array name")
    if mdtype != MI_INT8:
        raise MatFormatError(f"matrix at byte {file_offset}: name stored as type {mdtype}")
    name = name_bytes.decode("latin-1")

    target = _CLASS_DTYPES.get(array_class)
    if target is None:
        kind = _CLASS_NAMES.get(array_class, f"class {array_class}")
        log.warning("skipping variable %r: unsupported array class %s", name, kind)
        return None
    if is_complex:
        log.warning("skipping variable %r: complex arrays are not supported", name)
        return None
    if len(dims) != 2:
        log.warning("skipping variable %r: %d-d array, only 2-d supported", name, len(dims))
        return None

    values = _numeric_subelement(cur, f"values of {name!r}")
    count = int(dims[0]) * int(dims[1])
    if values.size != count:
        raise MatFormatError(
            f"variable {name!r}: {values.size} stored values for dimensions {dims}")
    data = values.astype(target).reshape(dims, order="F")
    return MatVariable(name=name, data=data)


def parse_mat(path: Union[str, Path]) -> List[MatVariable]:
    """All supported named matrices in the file, in file order."""
    path = Path(path)
    buf = path.read_bytes()
    bo = _detect_byte_order(buf, path)
    cur = _Cursor(buf, bo)
    cur.pos = HEADER_SIZE
    out: List[MatVariable] = []
    while cur.remaining():
        if cur.remaining() < 8:
            raise MatTruncatedError(
                f"{cur.remaining()} trailing bytes where an element tag was expected",
                cur.offset)
        element_offset = cur.offset
        mdtype, _, payload = cur.tag("data element")
        if mdtype == MI_COMPRESSED:
            try:
                inner = zlib.decompress(payload)
            except zlib.error as exc:
                raise MatFormatError(
                    f"bad compressed element at byte {element_offset}: {exc}") from exc
            icur = _Cursor(inner, bo, element_offset)
            imdtype, _, ipayload = icur.tag("compressed element")
            if imdtype != MI_MATRIX:
                log.warning("skipping compressed element of type %d", imdtype)
                continue
            var = _parse_matrix(ipayload, bo, element_offset)
        elif mdtype == MI_MATRIX:
            var = _parse_matrix(payload, bo, element_offset)
        else:
            log.warning("skipping top-level element of type %d at byte %d",
                        mdtype, element_offset)
            continue
        if var is not None:
            out.append(var)
    return out


def mat_arrays(path: Union[str, Path]) -> dict:
    """{name: array} view of ``parse_mat``."""
    return {v.name: v.data for v in parse_mat(path)}
