"""Minimal NRRD reader/writer for the subset this toolkit uses.

Supported: NRRD0004/0005, 3 dimensions, types float (float32) and uchar,
encodings raw and gzip, fields sizes / space directions / space origin /
endian / kinds / space. Everything else raises an explicit error naming
the offending field. Round trips are bit-exact in scalars and within 1e-9
in metadata.
"""

from __future__ import annotations

import gzip
from pathlib import Path

import numpy as np

from .volume import Volume

_TYPE_ALIASES = {
    "float": np.float32,
    "float32": np.float32,
    "uchar": np.uint8,
    "unsigned char": np.uint8,
    "uint8": np.uint8,
    "uint8_t": np.uint8,
}

_SUPPORTED_FIELDS = {
    "type",
    "dimension",
    "sizes",
    "encoding",
    "endian",
    "space",
    "space directions",
    "space origin",
    "kinds",
}


class NrrdFormatError(ValueError):
    pass


def _parse_vector(s: str) -> np.ndarray:
    s = s.strip()
    if not (s.startswith("(") and s.endswith(")")):
        raise NrrdFormatError(f"malformed vector {s!r}")
    return np.array([float(x) for x in s[1:-1].split(",")])


def _fmt_vector(v) -> str:
    return "(" + ",".join(f"{x:.17g}" for x in v) + ")"


def read_nrrd(path) -> Volume:
    path = Path(path)
    with open(path, "rb") as f:
        magic = f.readline().decode("ascii").strip()
        if not magic.startswith("NRRD000"):
            raise NrrdFormatError(f"not an NRRD file: magic {magic!r}")
        version = int(magic[-1])
        if version not in (4, 5):
            raise NrrdFormatError(f"unsupported NRRD version {version}; only NRRD0004/0005")
        fields = {}
        keyvals = {}
        while True:
            line = f.readline()
            if not line:
                raise NrrdFormatError("unexpected EOF in header")
            line = line.decode("ascii").rstrip("\r\n")
            if line == "":
                break
            if line.startswith("#"):
                continue
            if ":=" in line:
                k, v = line.split(":=", 1)
                keyvals[k.strip()] = v.strip()
                continue
            if ": " not in line:
                raise NrrdFormatError(f"malformed header line {line!r}")
            k, v = line.split(": ", 1)
            k = k.strip()
            if k not in _SUPPORTED_FIELDS:
                raise NrrdFormatError(f"unsupported NRRD field: {k!r}")
            fields[k] = v.strip()
        payload = f.read()

    for required in ("type", "dimension", "sizes", "encoding"):
        if required not in fields:
            raise NrrdFormatError(f"missing required field: {required!r}")
    if int(fields["dimension"]) != 3:
        raise NrrdFormatError(f"unsupported dimension: {fields['dimension']} (only 3)")
    tname = fields["type"]
    if tname not in _TYPE_ALIASES:
        raise NrrdFormatError(f"unsupported type: {tname!r}")
    dtype = np.dtype(_TYPE_ALIASES[tname])
    if fields.get("endian", "little") != "little" and dtype.itemsize > 1:
        raise NrrdFormatError(f"unsupported endian: {fields['endian']!r}")
    sizes = [int(x) for x in fields["sizes"].split()]
    if len(sizes) != 3:
        raise NrrdFormatError("sizes must have 3 entries")

    enc = fields["encoding"]
    if enc in ("gzip", "gz"):
        payload = gzip.decompress(payload)
    elif enc != "raw":
        raise NrrdFormatError(f"unsupported encoding: {enc!r}")
    expected = sizes[0] * sizes[1] * sizes[2] * dtype.itemsize
    if len(payload) < expected:
        raise NrrdFormatError(f"payload too short: {len(payload)} < {expected} bytes")
    data = np.frombuffer(payload[:expected], dtype=dtype.newbyteorder("<"))
    # NRRD stores the first axis fastest
    scalars = data.reshape(sizes[::-1]).transpose(2, 1, 0).astype(dtype)

    if "space directions" in fields:
        parts = _split_vectors(fields["space directions"])
        vecs = [_parse_vector(p) for p in parts]
        if len(vecs) != 3:
            raise NrrdFormatError("space directions must have 3 vectors")
        m = np.stack(vecs, axis=1)  # column i = direction of axis i
        spacing = np.linalg.norm(m, axis=0)
        direction = m / spacing
    else:
        spacing = np.ones(3)
        direction = np.eye(3)
    origin = _parse_vector(fields["space origin"]) if "space origin" in fields else np.zeros(3)
    modality = keyvals.get("ablreg modality", "US3D" if dtype == np.float32 else "MASK")
    return Volume(scalars=scalars, spacing=spacing, origin=origin, direction=direction, modality=modality)


def _split_vectors(s: str):
    parts, depth, cur = [], 0, ""
    for ch in s:
        if ch == "(":
            depth += 1
        if depth > 0:
            cur += ch
        if ch == ")":
            depth -= 1
            if depth == 0:
                parts.append(cur)
                cur = ""
    return parts


def write_nrrd(volume: Volume, path, encoding: str = "raw") -> None:
    path = Path(path)
    if encoding not in ("raw", "gzip"):
        raise NrrdFormatError(f"unsupported encoding: {encoding!r}")
    dtype = volume.scalars.dtype
    tname = "float" if dtype == np.float32 else "uchar"
    nx, ny, nz = volume.dims
    dirs = volume.direction * volume.spacing  # column i scaled
    lines = [
        "NRRD0004",
        "# written by ablreg",
        f"type: {tname}",
        "dimension: 3",
        "space: left-posterior-superior",
        f"sizes: {nx} {ny} {nz}",
        "space directions: "
        + " ".join(_fmt_vector(dirs[:, i]) for i in range(3)),
        "kinds: domain domain domain",
        "endian: little",
        f"encoding: {encoding}",
        f"space origin: {_fmt_vector(volume.origin)}",
        f"ablreg modality:={volume.modality}",
        "",  # blank line terminating the header
        "",
    ]
    payload = np.ascontiguousarray(volume.scalars.transpose(2, 1, 0)).astype(
        dtype.newbyteorder("<"), copy=False
    ).tobytes()
    if encoding == "gzip":
        payload = gzip.compress(payload, mtime=0)
    with open(path, "wb") as f:
        f.write("\n".join(lines).encode("ascii"))
        f.write(payload)
