"""File formats: portable pixmaps, RXPW1 weight containers, annotation text.

Weights container (all integers little-endian uint32)::

    b"RXPW1" | count | count x (name_len | name utf-8 | rank | extents[rank] | float32 LE payload)

Annotation records, one lesion per line::

    <scene_id> <class_key> <cx> <cy> <w> <h>

Detection records, one per line::

    <class_key> <score:.6f> <cx:.3f> <cy:.3f> <w:.3f> <h:.3f>

Support manifests: ``<image_path> <class_key> <cx> <cy> <w> <h>``; relative
paths resolve against the manifest's directory. ``#`` starts a comment line
in all text formats.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .detector import BBox
from .lesions import LesionClass, parse_lesion_class

MAGIC = b"RXPW1"


class FormatError(ValueError):
    """Malformed input file."""


class ImageFormatError(FormatError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class WeightsFormatError(FormatError):
    pass


class MagicError(WeightsFormatError):
    pass


class TruncatedError(WeightsFormatError):
    pass


class DuplicateNameError(WeightsFormatError):
    pass


# -- portable pixmaps -------------------------------------------------------

_WS = b" \t\n\r\x0b\x0c"


def _header_token(data: bytes, pos: int) -> tuple[bytes, int, int]:
    """Next whitespace-delimited header token: (token, start offset, end offset)."""
    while pos < len(data):
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif data[pos] in _WS:
            pos += 1
        else:
            break
    start = pos
    while pos < len(data) and data[pos] not in _WS and data[pos : pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise ImageFormatError("unexpected end of header", start)
    return data[start:pos], start, pos


def decode_pnm(data: bytes) -> np.ndarray:
    """Decode binary P6/P5 bytes into a [3, H, W] float32 tensor in [0, 1]."""
    magic = data[:2]
    if magic not in (b"P6", b"P5"):
        raise ImageFormatError(f"expected P6 or P5 magic, got {magic!r}", 0)
    pos = 2
    fields, starts = [], []
    for _ in range(3):
        tok, start, pos = _header_token(data, pos)
        if not tok.isdigit():
            raise ImageFormatError(f"expected an integer, got {tok!r}", start)
        fields.append(int(tok))
        starts.append(start)
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise ImageFormatError(f"bad dimensions {width}x{height}", starts[0] if width < 1 else starts[1])
    if maxval != 255:
        raise ImageFormatError(f"only maxval 255 is supported, got {maxval}", starts[2])
    if pos >= len(data) or data[pos] not in _WS:
        raise ImageFormatError("missing whitespace after maxval", pos)
    pos += 1
    channels = 3 if magic == b"P6" else 1
    need = width * height * channels
    if len(data) - pos < need:
        raise ImageFormatError(f"pixel data truncated: need {need} bytes, have {len(data) - pos}", pos)
    px = np.frombuffer(data, dtype=np.uint8, count=need, offset=pos)
    img = px.reshape(height, width, channels).transpose(2, 0, 1)
    if channels == 1:
        img = np.repeat(img, 3, axis=0)
    return (img.astype(np.float32) / np.float32(255.0)).astype(np.float32)


def to_bytes(image) -> np.ndarray:
    """Quantize [0, 1] values to uint8, rounding half up."""
    v = np.asarray(image, dtype=np.float64)
    return np.clip(np.floor(v * 255.0 + 0.5), 0, 255).astype(np.uint8)


def encode_ppm(image) -> bytes:
    img = np.asarray(image)
    if img.ndim == 2:
        img = img[None]
    if img.shape[0] == 1:
        img = np.repeat(img, 3, axis=0)
    if img.shape[0] != 3:
        raise ValueError(f"expected [3, H, W] or [1, H, W], got {img.shape}")
    _, h, w = img.shape
    return b"P6\n%d %d\n255\n" % (w, h) + to_bytes(img).transpose(1, 2, 0).tobytes()


def read_image(path) -> np.ndarray:
    return decode_pnm(Path(path).read_bytes())


def write_image(path, image) -> None:
    Path(path).write_bytes(encode_ppm(image))


# -- weights -----------------------------------------------------------------


def write_weights_bytes(weights: dict) -> bytes:
    out = [MAGIC, struct.pack("<I", len(weights))]
    for name, value in weights.items():
        arr = np.asarray(value, dtype="<f4")
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)) + raw)
        out.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(out)


def read_weights_bytes(data: bytes) -> dict:
    if data[: len(MAGIC)] != MAGIC:
        raise MagicError(f"bad magic {data[:len(MAGIC)]!r}, expected {MAGIC!r}")
    pos = len(MAGIC)

    def take(n, what):
        nonlocal pos
        if pos + n > len(data):
            raise TruncatedError(f"truncated while reading {what}: need {n} bytes at offset {pos}")
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<I", take(4, "entry count"))
    weights = {}
    for i in range(count):
        (nlen,) = struct.unpack("<I", take(4, f"name length of entry {i}"))
        name = take(nlen, f"name of entry {i}").decode("utf-8")
        (rank,) = struct.unpack("<I", take(4, f"rank of entry {name!r}"))
        shape = struct.unpack(f"<{rank}I", take(4 * rank, f"extents of entry {name!r}"))
        n = int(np.prod(shape)) if rank else 1
        payload = take(4 * n, f"payload of entry {name!r}")
        if name in weights:
            raise DuplicateNameError(f"duplicate entry name {name!r}")
        weights[name] = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(shape)
    if pos != len(data):
        raise WeightsFormatError(f"{len(data) - pos} trailing bytes after {count} entries")
    return weights


def save_weights(path, weights: dict) -> None:
    Path(path).write_bytes(write_weights_bytes(weights))


def load_weights(path, spec=None) -> dict:
    weights = read_weights_bytes(Path(path).read_bytes())
    if spec is not None:
        from .net import check_weights

        check_weights(spec, weights)
    return weights


# -- text records ------------------------------------------------------------


def _records(text: str):
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if line and not line.startswith("#"):
            yield lineno, line.split()


def _box(fields, lineno) -> BBox:
    try:
        return BBox(*(float(v) for v in fields))
    except ValueError as exc:
        raise FormatError(f"line {lineno}: {exc}") from None


def _cls(name, lineno) -> LesionClass:
    try:
        return parse_lesion_class(name)
    except ValueError as exc:
        raise FormatError(f"line {lineno}: {exc}") from None


def format_annotations(records) -> str:
    """``records``: iterable of ``(scene_id, BBox, LesionClass)``."""
    lines = [f"{sid} {cls.key} {b.cx:.6f} {b.cy:.6f} {b.w:.6f} {b.h:.6f}" for sid, b, cls in records]
    return "".join(line + "\n" for line in lines)


def parse_annotations(text: str) -> dict:
    """Map scene id -> list of (BBox, LesionClass), in file order."""
    out: dict = {}
    for lineno, f in _records(text):
        if len(f) != 6:
            raise FormatError(f"line {lineno}: expected 6 fields, got {len(f)}")
        out.setdefault(f[0], []).append((_box(f[2:], lineno), _cls(f[1], lineno)))
    return out


def format_detections(detections) -> str:
    return "".join(
        f"{d.lesion_class.key} {d.score:.6f} {d.box.cx:.3f} {d.box.cy:.3f} {d.box.w:.3f} {d.box.h:.3f}\n"
        for d in detections
    )


def parse_detections(text: str) -> list:
    from .pipeline import Detection

    out = []
    for lineno, f in _records(text):
        if len(f) != 6:
            raise FormatError(f"line {lineno}: expected 6 fields, got {len(f)}")
        out.append(Detection(_box(f[2:], lineno), _cls(f[0], lineno), float(f[1])))
    return out


def read_support_manifest(path) -> list:
    """Support examples ``(image, BBox, LesionClass)`` listed in a manifest."""
    path = Path(path)
    cache: dict = {}
    support = []
    for lineno, f in _records(path.read_text()):
        if len(f) != 6:
            raise FormatError(f"{path}:{lineno}: expected 6 fields, got {len(f)}")
        img_path = (path.parent / f[0]).resolve()
        if img_path not in cache:
            cache[img_path] = read_image(img_path)
        support.append((cache[img_path], _box(f[2:], lineno), _cls(f[1], lineno)))
    return support
