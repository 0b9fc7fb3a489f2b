"""Grayscale image persistence: binary PGM (P5) plus optional PNG.

Intensities are quantised as value = round(intensity * (2^bits - 1)) with
bits in {8, 16}; 16-bit samples are big-endian per the PGM convention. The
pixel pitch is carried in a header comment so PGM round-trips preserve it.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .render import TransmissionImage

_PITCH_TAG = "# pixel_pitch "


def encode_pgm(img: TransmissionImage, bits: int = 16) -> bytes:
    if bits not in (8, 16):
        raise ValueError("bits must be 8 or 16")
    maxval = (1 << bits) - 1
    vals = np.rint(img.intensities * maxval).astype(np.uint32)
    header = f"P5\n{_PITCH_TAG}{img.pixel_pitch!r}\n{img.width} {img.height}\n{maxval}\n"
    if bits == 8:
        payload = vals.astype(np.uint8).tobytes()
    else:
        payload = vals.astype(">u2").tobytes()
    return header.encode("ascii") + payload


def write_pgm(img: TransmissionImage, path: str | Path, bits: int = 16) -> None:
    Path(path).write_bytes(encode_pgm(img, bits))


def decode_pgm(data: bytes) -> TransmissionImage:
    if not data.startswith(b"P5"):
        raise ValueError("not a binary PGM (P5) file")
    pitch = 1.0
    pos = 2
    tokens: list[int] = []
    while len(tokens) < 3:
        if pos >= len(data):
            raise ValueError("truncated PGM header")
        ch = data[pos : pos + 1]
        if ch == b"#":
            end = data.index(b"\n", pos)
            comment = data[pos:end].decode("ascii", errors="replace")
            if comment.startswith(_PITCH_TAG):
                pitch = float(comment[len(_PITCH_TAG) :])
            pos = end + 1
        elif ch.isspace():
            pos += 1
        else:
            end = pos
            while end < len(data) and not data[end : end + 1].isspace():
                end += 1
            tokens.append(int(data[pos:end]))
            pos = end
    pos += 1  # single whitespace after maxval
    width, height, maxval = tokens
    if maxval not in (255, 65535):
        raise ValueError(f"unsupported PGM maxval: {maxval}")
    count = width * height
    if maxval == 255:
        raw = np.frombuffer(data, dtype=np.uint8, count=count, offset=pos)
    else:
        raw = np.frombuffer(data, dtype=">u2", count=count, offset=pos)
    vals = raw.reshape(height, width).astype(np.float64) / maxval
    return TransmissionImage(vals, pitch)


def read_pgm(path: str | Path) -> TransmissionImage:
    return decode_pgm(Path(path).read_bytes())


def write_png(img: TransmissionImage, path: str | Path, bits: int = 8) -> None:
    from PIL import Image

    if bits not in (8, 16):
        raise ValueError("bits must be 8 or 16")
    maxval = (1 << bits) - 1
    vals = np.rint(img.intensities * maxval)
    if bits == 8:
        Image.fromarray(vals.astype(np.uint8), mode="L").save(path)
    else:
        Image.fromarray(vals.astype(np.uint32), mode="I").convert("I;16").save(path)


def read_png(path: str | Path, pixel_pitch: float = 1.0) -> TransmissionImage:
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.dtype == np.uint8:
        maxval = 255
    elif arr.dtype in (np.uint16, np.int32):
        maxval = 65535
    else:
        raise ValueError(f"unsupported PNG dtype: {arr.dtype}")
    return TransmissionImage(arr.astype(np.float64) / maxval, pixel_pitch)
