"""Binary PGM (P5) / PPM (P6) images, binary label maps, and float sidecars.

Formats are header-plus-raw with maxval 255, so round trips are bit-exact and
carry no codec dependence.  Probability maps get quantised to 8-bit PGM for
portability; the exact float64 values go to a sidecar file when they matter
(fine-grained threshold sweeps).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

PROB_MAGIC = b"LGPROB1\x00"  # padded to 8 bytes; header is 16 bytes with extents


class DataError(ValueError):
    """Malformed or inconsistent data file."""


@dataclass
class Raster:
    """8-bit image, row-major, channel-interleaved; channels is 1 or 3."""

    width: int
    height: int
    channels: int
    pixels: np.ndarray  # (H, W, C) uint8

    def __post_init__(self):
        if self.channels not in (1, 3):
            raise DataError(f"raster must have 1 or 3 channels, got {self.channels}")
        if self.width <= 0 or self.height <= 0:
            raise DataError(f"raster extents must be positive, got {self.width}x{self.height}")
        if self.pixels.shape != (self.height, self.width, self.channels):
            raise DataError("pixel buffer shape does not match declared extents")
        if self.pixels.dtype != np.uint8:
            raise DataError("pixels must be uint8")


@dataclass
class LabelMap:
    """Per-pixel binary labels; 1 marks object pixels."""

    width: int
    height: int
    labels: np.ndarray  # (H, W) uint8 in {0, 1}

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise DataError("label map extents must be positive")
        if self.labels.shape != (self.height, self.width):
            raise DataError("label buffer shape does not match declared extents")
        if not np.isin(self.labels, (0, 1)).all():
            raise DataError("labels must be 0/1")


def _read_header_tokens(blob: bytes, path) -> tuple:
    """Magic, width, height, maxval plus the payload offset.

    Tokens are separated by whitespace; '#' comments run to end of line and
    may sit between tokens.  Exactly one whitespace byte follows maxval.
    """
    tokens = []
    i = 0
    while len(tokens) < 4:
        if i >= len(blob):
            raise DataError(f"{path}: truncated header")
        c = blob[i:i + 1]
        if c == b"#":
            while i < len(blob) and blob[i:i + 1] not in (b"\n", b"\r"):
                i += 1
        elif c.isspace():
            i += 1
        else:
            j = i
            while j < len(blob) and not blob[j:j + 1].isspace() and blob[j:j + 1] != b"#":
                j += 1
            tokens.append(blob[i:j])
            i = j
    if i >= len(blob) or not blob[i:i + 1].isspace():
        raise DataError(f"{path}: missing whitespace after maxval")
    return tokens, i + 1


def read_raster(path) -> Raster:
    """Parse a binary P5/P6 file with maxval 255."""
    with open(path, "rb") as fh:
        blob = fh.read()
    tokens, offset = _read_header_tokens(blob, path)
    magic = tokens[0]
    if magic == b"P5":
        channels = 1
    elif magic == b"P6":
        channels = 3
    else:
        raise DataError(f"{path}: unsupported magic {magic!r} (want P5 or P6)")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise DataError(f"{path}: non-numeric header field") from exc
    if width <= 0 or height <= 0:
        raise DataError(f"{path}: non-positive extents {width}x{height}")
    if maxval != 255:
        raise DataError(f"{path}: maxval must be 255, got {maxval}")
    need = width * height * channels
    payload = blob[offset:]
    if len(payload) < need:
        raise DataError(f"{path}: truncated payload ({len(payload)} of {need} bytes)")
    if len(payload) > need:
        raise DataError(f"{path}: {len(payload) - need} trailing bytes after payload")
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, channels)
    return Raster(width, height, channels, pixels.copy())


def write_raster(raster: Raster, path) -> None:
    """Canonical header (single spaces, newlines) followed by the raw payload."""
    magic = b"P5" if raster.channels == 1 else b"P6"
    header = magic + b"\n" + f"{raster.width} {raster.height}".encode() + b"\n255\n"
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(raster.pixels, dtype=np.uint8).tobytes())


def label_to_raster(labels: LabelMap) -> Raster:
    """Labels as a viewable P5 image: 1 -> 255."""
    return Raster(labels.width, labels.height, 1, (labels.labels * np.uint8(255))[..., None])


def raster_to_label(raster: Raster) -> LabelMap:
    """Grayscale image back to binary labels; >= 128 counts as object."""
    if raster.channels != 1:
        raise DataError("label rasters must be single-channel")
    return LabelMap(raster.width, raster.height,
                    (raster.pixels[..., 0] >= 128).astype(np.uint8))


def read_label(path) -> LabelMap:
    return raster_to_label(read_raster(path))


def write_label(labels: LabelMap, path) -> None:
    write_raster(label_to_raster(labels), path)


def prob_to_raster(prob: np.ndarray) -> Raster:
    """Quantise probabilities to 8 bits: round(p * 255)."""
    prob = np.asarray(prob, dtype=np.float64)
    if prob.min() < 0.0 or prob.max() > 1.0:
        raise DataError("probabilities must lie in [0, 1]")
    q = np.rint(prob * 255.0).astype(np.uint8)
    h, w = prob.shape
    return Raster(w, h, 1, q[..., None])


def raster_to_prob(raster: Raster) -> np.ndarray:
    if raster.channels != 1:
        raise DataError("probability rasters must be single-channel")
    return raster.pixels[..., 0].astype(np.float64) / 255.0


def write_prob_sidecar(prob: np.ndarray, path) -> None:
    """Exact float64 map: 16-byte header (magic, u32 height, u32 width), then
    row-major little-endian payload."""
    prob = np.asarray(prob, dtype=np.float64)
    if prob.ndim != 2:
        raise DataError("probability map must be 2-D")
    h, w = prob.shape
    with open(path, "wb") as fh:
        fh.write(PROB_MAGIC)
        fh.write(struct.pack("<II", h, w))
        fh.write(prob.astype("<f8").tobytes())


def read_prob_sidecar(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(PROB_MAGIC):
        raise DataError(f"{path}: not a probability sidecar")
    if len(blob) < 16:
        raise DataError(f"{path}: truncated header")
    h, w = struct.unpack("<II", blob[8:16])
    need = 16 + 8 * h * w
    if len(blob) != need:
        raise DataError(f"{path}: payload size mismatch")
    return np.frombuffer(blob[16:], dtype="<f8").reshape(h, w).astype(np.float64)
