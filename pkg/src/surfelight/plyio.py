"""Minimal PLY reader/writer for point sets with named custom channels.

Supports the subset the pipeline needs: a single ``vertex`` element with
scalar properties, binary little-endian (default, bit-exact for float64
round-trips) or ascii.  Comments carry lightweight metadata such as the
pipeline stage.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

_PLY_TYPES = {
    "float": np.float32,
    "float32": np.float32,
    "double": np.float64,
    "float64": np.float64,
    "uchar": np.uint8,
    "uint8": np.uint8,
    "int": np.int32,
    "int32": np.int32,
    "uint": np.uint32,
    "uint32": np.uint32,
}
_TYPE_NAMES = {np.dtype(np.float32): "float", np.dtype(np.float64): "double",
               np.dtype(np.uint8): "uchar", np.dtype(np.int32): "int",
               np.dtype(np.uint32): "uint"}


def write_ply(path: str | Path, channels: dict[str, np.ndarray],
              comments: list[str] | None = None, binary: bool = True) -> None:
    """Write named per-point scalar channels as a PLY vertex element.

    All channels must share the leading length; dtypes are preserved.
    """
    names = list(channels)
    if not names:
        raise ValueError("no channels to write")
    arrays = [np.ascontiguousarray(channels[n]) for n in names]
    count = len(arrays[0])
    for n, a in zip(names, arrays):
        if a.ndim != 1:
            raise ValueError(f"channel {n!r} must be 1-D, got shape {a.shape}")
        if len(a) != count:
            raise ValueError(f"channel {n!r} length {len(a)} != {count}")
        if a.dtype not in _TYPE_NAMES:
            raise ValueError(f"channel {n!r} has unsupported dtype {a.dtype}")

    fmt = "binary_little_endian" if binary else "ascii"
    header = [f"ply", f"format {fmt} 1.0"]
    header += [f"comment {c}" for c in (comments or [])]
    header.append(f"element vertex {count}")
    header += [f"property {_TYPE_NAMES[a.dtype]} {n}" for n, a in zip(names, arrays)]
    header.append("end_header")

    path = Path(path)
    if binary:
        rec = np.empty(count, dtype=np.dtype(
            [(n, a.dtype.newbyteorder("<")) for n, a in zip(names, arrays)]))
        for n, a in zip(names, arrays):
            rec[n] = a
        with path.open("wb") as f:
            f.write(("\n".join(header) + "\n").encode("ascii"))
            f.write(rec.tobytes())
    else:
        with path.open("w") as f:
            f.write("\n".join(header) + "\n")
            for i in range(count):
                f.write(" ".join(repr(a[i]) if a.dtype.kind == "f" else str(a[i])
                                 for a in arrays) + "\n")


def read_ply(path: str | Path) -> tuple[dict[str, np.ndarray], list[str]]:
    """Read a PLY vertex element back as (channels, comments)."""
    raw = Path(path).read_bytes()
    end = raw.find(b"end_header")
    if end < 0:
        raise ValueError(f"{path}: not a PLY file (no end_header)")
    body_start = raw.index(b"\n", end) + 1
    header_lines = raw[:end].decode("ascii").splitlines()

    fmt = None
    count = 0
    comments: list[str] = []
    props: list[tuple[str, np.dtype]] = []
    in_vertex = False
    for line in header_lines:
        parts = line.strip().split()
        if not parts:
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "comment":
            comments.append(line.strip()[len("comment "):])
        elif parts[0] == "element":
            in_vertex = parts[1] == "vertex"
            if in_vertex:
                count = int(parts[2])
        elif parts[0] == "property" and in_vertex:
            if parts[1] == "list":
                raise ValueError(f"{path}: list properties are not supported")
            props.append((parts[2], np.dtype(_PLY_TYPES[parts[1]])))

    if fmt not in ("binary_little_endian", "ascii"):
        raise ValueError(f"{path}: unsupported PLY format {fmt!r}")

    if fmt == "binary_little_endian":
        dtype = np.dtype([(n, t.newbyteorder("<")) for n, t in props])
        rec = np.frombuffer(raw, dtype=dtype, count=count, offset=body_start)
        return {n: np.ascontiguousarray(rec[n]) for n, _ in props}, comments

    rows = raw[body_start:].decode("ascii").split()
    table = np.array(rows, dtype=np.float64).reshape(count, len(props))
    return {n: table[:, i].astype(t) for i, (n, t) in enumerate(props)}, comments
