"""Minimal PLY ingestion/emission: vertex x/y/z only, ascii or binary LE."""

from __future__ import annotations

import numpy as np

from .errors import ParseError

_TYPE_MAP = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}


def read_ply(path) -> np.ndarray:
    """Read vertex positions from an ascii or binary_little_endian PLY file.

    Returns an (N, 3) float64 array of the x/y/z vertex properties; all other
    properties and elements are skipped.
    """
    with open(path, "rb") as fh:
        data = fh.read()
    nl = data.find(b"end_header")
    if not data.startswith(b"ply") or nl < 0:
        raise ParseError("not a PLY file")
    header_end = data.find(b"\n", nl) + 1
    header = data[:header_end].decode("ascii", errors="replace")

    fmt = None
    vertex_count = None
    props = []  # (name, numpy type) for the vertex element only
    current_element = None
    for line in header.splitlines():
        tok = line.strip().split()
        if not tok:
            continue
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            current_element = tok[1]
            if current_element == "vertex":
                vertex_count = int(tok[2])
        elif tok[0] == "property" and current_element == "vertex":
            if tok[1] == "list":
                raise ParseError("list properties on vertices are unsupported")
            if tok[1] not in _TYPE_MAP:
                raise ParseError(f"unsupported property type {tok[1]}")
            props.append((tok[2], _TYPE_MAP[tok[1]]))
    if fmt not in ("ascii", "binary_little_endian"):
        raise ParseError(f"unsupported PLY format {fmt!r}")
    if vertex_count is None:
        raise ParseError("no vertex element")
    names = [n for n, _ in props]
    for axis in ("x", "y", "z"):
        if axis not in names:
            raise ParseError(f"vertex element lacks property {axis!r}")

    body = data[header_end:]
    if fmt == "ascii":
        rows = body.decode("ascii").split("\n")
        out = np.empty((vertex_count, 3), dtype=np.float64)
        cols = [names.index(a) for a in ("x", "y", "z")]
        got = 0
        for line in rows:
            if got == vertex_count:
                break
            parts = line.split()
            if not parts:
                continue
            if len(parts) < len(props):
                raise ParseError("truncated ascii vertex row")
            out[got] = [float(parts[c]) for c in cols]
            got += 1
        if got != vertex_count:
            raise ParseError("fewer vertex rows than declared")
        return out
    dtype = np.dtype([(n, "<" + t) for n, t in props])
    need = dtype.itemsize * vertex_count
    if len(body) < need:
        raise ParseError("binary vertex block truncated")
    rec = np.frombuffer(body[:need], dtype=dtype)
    return np.stack(
        [rec["x"].astype(np.float64), rec["y"].astype(np.float64), rec["z"].astype(np.float64)],
        axis=1,
    )


def write_ply(path, points: np.ndarray, binary: bool = True) -> None:
    """Write an (N, 3) array as a PLY vertex cloud (float32 positions)."""
    pts = np.asarray(points, dtype=np.float32)
    fmt = "binary_little_endian" if binary else "ascii"
    header = (
        "ply\n"
        f"format {fmt} 1.0\n"
        f"element vertex {len(pts)}\n"
        "property float x\n"
        "property float y\n"
        "property float z\n"
        "end_header\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        if binary:
            fh.write(pts.astype("<f4").tobytes())
        else:
            for x, y, z in pts:
                fh.write(f"{x:g} {y:g} {z:g}\n".encode("ascii"))
