"""On-disk formats: binary PGM (P5) images and the text checkpoint archive."""
from __future__ import annotations

from pathlib import Path

import numpy as np

CHECKPOINT_MAGIC = "# dhif-checkpoint v1"


def write_pgm(path, data: np.ndarray, maxval: int = 65535) -> None:
    """Write an integer array as binary PGM; 16-bit samples are big-endian."""
    arr = np.asarray(data)
    if arr.ndim != 2:
        raise ValueError(f"PGM needs a 2-D array, got {arr.shape}")
    if arr.min(initial=0) < 0 or arr.max(initial=0) > maxval:
        raise ValueError(f"values outside [0, {maxval}]")
    dtype = ">u2" if maxval > 255 else "u1"
    h, w = arr.shape
    with open(Path(path), "wb") as fh:
        fh.write(f"P5\n{w} {h}\n{maxval}\n".encode("ascii"))
        fh.write(arr.astype(dtype).tobytes())


def read_pgm(path) -> tuple[np.ndarray, int]:
    """Returns ``(array, maxval)``; comments in the header are skipped."""
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: truncated PGM header")
        tokens.append(raw[start:pos])
    pos += 1  # single whitespace byte before the raster
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    w, h, maxval = (int(t) for t in tokens[1:])
    dtype = ">u2" if maxval > 255 else "u1"
    nbytes = w * h * np.dtype(dtype).itemsize
    body = raw[pos : pos + nbytes]
    if len(body) != nbytes:
        raise ValueError(f"{path}: expected {nbytes} raster bytes, found {len(body)}")
    return np.frombuffer(body, dtype=dtype).reshape(h, w).astype(np.int64), maxval


def save_image(path, image: np.ndarray) -> None:
    """Store a [0, 1] float map at 16-bit precision."""
    write_pgm(path, np.rint(np.clip(image, 0.0, 1.0) * 65535).astype(np.int64))


def load_image(path) -> np.ndarray:
    arr, maxval = read_pgm(path)
    return arr / float(maxval)


def save_mask(path, mask: np.ndarray) -> None:
    write_pgm(path, (np.asarray(mask) > 0).astype(np.int64) * 255, maxval=255)


def load_mask(path) -> np.ndarray:
    arr, _ = read_pgm(path)
    return (arr > 0).astype(np.uint8)


def save_checkpoint(path, tensors: dict, meta: dict) -> None:
    """Text archive: ``meta key = value`` lines, then per tensor a
    ``tensor <name> <ndim> <dims...>`` line followed by one line of values
    written with ``repr`` so they round-trip exactly."""
    with open(Path(path), "w") as fh:
        fh.write(CHECKPOINT_MAGIC + "\n")
        for key, val in meta.items():
            fh.write(f"meta {key} = {val}\n")
        for name, arr in tensors.items():
            arr = np.asarray(arr, dtype=np.float64)
            dims = " ".join(str(d) for d in arr.shape)
            fh.write(f"tensor {name} {arr.ndim} {dims}\n".replace("  ", " "))
            fh.write(" ".join(repr(float(v)) for v in arr.ravel()) + "\n")


def load_checkpoint(path) -> tuple[dict, dict]:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].strip() != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    meta, tensors = {}, {}
    i = 1
    while i < len(lines):
        line = lines[i]
        if line.startswith("meta "):
            key, _, val = line[5:].partition(" = ")
            meta[key.strip()] = val.strip()
            i += 1
        elif line.startswith("tensor "):
            parts = line.split()
            name, ndim = parts[1], int(parts[2])
            shape = tuple(int(d) for d in parts[3 : 3 + ndim])
            vals = lines[i + 1].split() if i + 1 < len(lines) else []
            data = np.array([float(v) for v in vals], dtype=np.float64)
            if data.size != int(np.prod(shape)):
                raise ValueError(f"{path}: tensor {name} has {data.size} values for shape {shape}")
            tensors[name] = data.reshape(shape)
            i += 2
        elif not line.strip():
            i += 1
        else:
            raise ValueError(f"{path}:{i + 1}: unrecognised line")
    return tensors, meta
