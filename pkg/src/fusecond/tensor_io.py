"""Bit-exact file formats.

* Tensor: magic ``FUS3``, u32 version=1, u32 ndim in 1..4, ndim x u64
  dims, then row-major little-endian float32 payload, length enforced.
* Sparse voxel latent: magic ``SLAT``, u32 version=1, u32 grid size N,
  u64 voxel count L, u32 channels C, L x 3 u32 positions in
  lexicographic order, then L x C float32 latents row-major.
* Mask: ASCII, line 1 ``MASK <rows> <cols>`` then rows lines of cols
  space-separated 0/1 digits.
* Index list: ASCII, line 1 ``INDICES <n>`` then n lines of one
  non-negative integer each, strictly increasing.
"""

from __future__ import annotations

import os

import numpy as np

from .errors import FormatError

TENSOR_MAGIC = b"FUS3"
SLAT_MAGIC = b"SLAT"
MAX_NDIM = 4


def save_tensor(path: str | os.PathLike, tensor: np.ndarray) -> None:
    tensor = np.asarray(tensor, dtype=np.float32)
    if not 1 <= tensor.ndim <= MAX_NDIM:
        raise FormatError(f"tensor rank {tensor.ndim} outside 1..{MAX_NDIM}")
    with open(path, "wb") as fh:
        fh.write(TENSOR_MAGIC)
        fh.write(np.uint32(1).tobytes())
        fh.write(np.uint32(tensor.ndim).tobytes())
        fh.write(np.asarray(tensor.shape, dtype="<u8").tobytes())
        fh.write(np.ascontiguousarray(tensor, dtype="<f4").tobytes())


def _read_exact(fh, count: int, what: str) -> bytes:
    data = fh.read(count)
    if len(data) != count:
        raise FormatError(f"truncated file while reading {what}")
    return data


def load_tensor(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != TENSOR_MAGIC:
            raise FormatError(f"{path}: bad tensor magic")
        version = np.frombuffer(_read_exact(fh, 4, "version"), "<u4")[0]
        if version != 1:
            raise FormatError(f"{path}: unsupported tensor version {version}")
        ndim = int(np.frombuffer(_read_exact(fh, 4, "ndim"), "<u4")[0])
        if not 1 <= ndim <= MAX_NDIM:
            raise FormatError(f"{path}: rank {ndim} outside 1..{MAX_NDIM}")
        dims = np.frombuffer(_read_exact(fh, 8 * ndim, "dims"), "<u8")
        if (dims == 0).any():
            raise FormatError(f"{path}: zero-length dimension")
        count = int(np.prod(dims))
        if count > 2**31:
            raise FormatError(f"{path}: dimension overflow")
        payload = _read_exact(fh, 4 * count, "payload")
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes after payload")
    return np.frombuffer(payload, "<f4").reshape(dims.astype(np.int64)).copy()


def save_slat(path: str | os.PathLike, grid_size: int, positions: np.ndarray, latents: np.ndarray) -> None:
    positions = np.asarray(positions, dtype=np.int64)
    latents = np.asarray(latents, dtype=np.float32)
    if positions.ndim != 2 or positions.shape[1] != 3:
        raise FormatError("positions must be L x 3")
    if latents.ndim != 2 or latents.shape[0] != positions.shape[0]:
        raise FormatError("latents must be L x C")
    with open(path, "wb") as fh:
        fh.write(SLAT_MAGIC)
        fh.write(np.uint32(1).tobytes())
        fh.write(np.uint32(grid_size).tobytes())
        fh.write(np.uint64(positions.shape[0]).tobytes())
        fh.write(np.uint32(latents.shape[1]).tobytes())
        fh.write(np.ascontiguousarray(positions, dtype="<u4").tobytes())
        fh.write(np.ascontiguousarray(latents, dtype="<f4").tobytes())


def load_slat(path: str | os.PathLike) -> tuple[int, np.ndarray, np.ndarray]:
    """Returns (grid_size, positions int64 Lx3, latents float32 LxC)."""
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != SLAT_MAGIC:
            raise FormatError(f"{path}: bad voxel-latent magic")
        version = np.frombuffer(_read_exact(fh, 4, "version"), "<u4")[0]
        if version != 1:
            raise FormatError(f"{path}: unsupported version {version}")
        grid_size = int(np.frombuffer(_read_exact(fh, 4, "grid"), "<u4")[0])
        count = int(np.frombuffer(_read_exact(fh, 8, "count"), "<u8")[0])
        channels = int(np.frombuffer(_read_exact(fh, 4, "channels"), "<u4")[0])
        positions = np.frombuffer(_read_exact(fh, 12 * count, "positions"), "<u4")
        positions = positions.reshape(count, 3).astype(np.int64)
        latents = np.frombuffer(_read_exact(fh, 4 * count * channels, "latents"), "<f4")
        latents = latents.reshape(count, channels).copy()
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes after payload")
    return grid_size, positions, latents


def save_mask(path: str | os.PathLike, mask: np.ndarray) -> None:
    mask = np.asarray(mask, dtype=np.int64)
    rows, cols = mask.shape
    lines = [f"MASK {rows} {cols}"]
    lines += [" ".join(str(int(v)) for v in row) for row in mask]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_mask(path: str | os.PathLike) -> np.ndarray:
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    lines = text.splitlines()
    if not lines:
        raise FormatError(f"{path}: empty mask file")
    header = lines[0].split()
    if len(header) != 3 or header[0] != "MASK":
        raise FormatError(f"{path}: bad mask header {lines[0]!r}")
    try:
        rows, cols = int(header[1]), int(header[2])
    except ValueError as exc:
        raise FormatError(f"{path}: non-integer mask dimensions") from exc
    if rows <= 0 or cols <= 0:
        raise FormatError(f"{path}: non-positive mask dimensions")
    if len(lines) != rows + 1:
        raise FormatError(f"{path}: expected {rows} data lines, got {len(lines) - 1}")
    out = np.zeros((rows, cols), dtype=np.uint8)
    for r, line in enumerate(lines[1:]):
        tokens = line.split()
        if len(tokens) != cols:
            raise FormatError(f"{path}: row {r} has {len(tokens)} values, expected {cols}")
        for c, tok in enumerate(tokens):
            if tok == "0":
                pass
            elif tok == "1":
                out[r, c] = 1
            else:
                raise FormatError(f"{path}: invalid mask token {tok!r}")
    return out


def save_indices(path: str | os.PathLike, indices: np.ndarray) -> None:
    indices = np.asarray(indices, dtype=np.int64)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"INDICES {indices.size}\n")
        for v in indices:
            fh.write(f"{int(v)}\n")


def load_indices(path: str | os.PathLike) -> np.ndarray:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise FormatError(f"{path}: empty index file")
    header = lines[0].split()
    if len(header) != 2 or header[0] != "INDICES":
        raise FormatError(f"{path}: bad index header {lines[0]!r}")
    try:
        count = int(header[1])
        values = [int(line) for line in lines[1:]]
    except ValueError as exc:
        raise FormatError(f"{path}: non-integer content") from exc
    if len(values) != count:
        raise FormatError(f"{path}: expected {count} indices, got {len(values)}")
    out = np.asarray(values, dtype=np.int64)
    if out.size and ((out < 0).any() or (np.diff(out) <= 0).any()):
        raise FormatError(f"{path}: indices must be non-negative and strictly increasing")
    return out
