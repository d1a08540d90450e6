"""Binary weight / feature-cache formats and image decoding.

All multi-byte integers are little-endian; file writes go through a temp
file plus atomic rename so readers never see partial output.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile

import numpy as np

from .backbone import BackboneConfig, XFeatModel
from .matcher import FeatureSet
from .tensor import Tensor

WEIGHT_MAGIC = b"XFTW"
FEATURE_MAGIC = b"XFTC"
FORMAT_VERSION = 1
DTYPE_F32 = 0


class FileFormatError(ValueError):
    pass


def atomic_write(path, payload: bytes):
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.off = 0

    def take(self, n):
        if self.off + n > len(self.buf):
            raise FileFormatError("truncated file")
        out = self.buf[self.off:self.off + n]
        self.off += n
        return out

    def u8(self):
        return self.take(1)[0]

    def u16(self):
        return struct.unpack("<H", self.take(2))[0]

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]


# ----------------------------------------------------------------------
# Weight files
# ----------------------------------------------------------------------

def save_weights(model: XFeatModel, path):
    """Self-describing checkpoint: magic, version, config JSON, tensor table."""
    chunks = [WEIGHT_MAGIC, struct.pack("<I", FORMAT_VERSION)]
    cfg = json.dumps(model.config.to_dict()).encode()
    chunks.append(struct.pack("<I", len(cfg)))
    chunks.append(cfg)
    entries = [(name, t.data) for name, t in model.params.items()]
    entries += [("state:" + name, arr) for name, arr in model.state.items()]
    chunks.append(struct.pack("<I", len(entries)))
    for name, arr in entries:
        data = np.ascontiguousarray(arr, dtype=np.float32)
        nb = name.encode()
        chunks.append(struct.pack("<H", len(nb)))
        chunks.append(nb)
        chunks.append(struct.pack("<BB", DTYPE_F32, data.ndim))
        chunks.append(struct.pack(f"<{data.ndim}I", *data.shape))
        chunks.append(data.tobytes())
    atomic_write(path, b"".join(chunks))


def load_weights(path) -> XFeatModel:
    with open(path, "rb") as f:
        r = _Reader(f.read())
    if r.take(4) != WEIGHT_MAGIC:
        raise FileFormatError("bad magic")
    version = r.u32()
    if version != FORMAT_VERSION:
        raise FileFormatError(f"unsupported weight file version {version}")
    cfg = BackboneConfig.from_dict(json.loads(r.take(r.u32()).decode()))
    model = XFeatModel(cfg)
    seen = set()
    for _ in range(r.u32()):
        name = r.take(r.u16()).decode()
        if name in seen:
            raise FileFormatError(f"duplicate tensor '{name}'")
        seen.add(name)
        dtype = r.u8()
        if dtype != DTYPE_F32:
            raise FileFormatError(f"unknown dtype code {dtype}")
        rank = r.u8()
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank))
        count = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(dims).copy()
        if name.startswith("state:"):
            model.state[name[6:]] = arr
        else:
            model.params[name] = Tensor(arr, requires_grad=True)
    return model


# ----------------------------------------------------------------------
# Feature cache files
# ----------------------------------------------------------------------

_MODE_CODES = {"sparse": 0, "semi-dense": 1}
_MODE_NAMES = {v: k for k, v in _MODE_CODES.items()}


def save_features(fs: FeatureSet, path):
    n = len(fs)
    d = fs.descriptors.shape[1] if n else 64
    head = struct.pack("<4sIIIBI", FEATURE_MAGIC, FORMAT_VERSION,
                       int(fs.image_size[0]), int(fs.image_size[1]),
                       _MODE_CODES[fs.mode], n)
    body = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes()
                    for a in (fs.x, fs.y, fs.score,
                              fs.descriptors.reshape(n, d), fs.reliability))
    atomic_write(path, head + body)


def load_features(path) -> FeatureSet:
    with open(path, "rb") as f:
        r = _Reader(f.read())
    if r.take(4) != FEATURE_MAGIC:
        raise FileFormatError("bad magic")
    version = r.u32()
    if version != FORMAT_VERSION:
        raise FileFormatError(f"unsupported feature file version {version}")
    w, h = r.u32(), r.u32()
    mode = r.u8()
    if mode not in _MODE_NAMES:
        raise FileFormatError(f"unknown mode flag {mode}")
    n = r.u32()

    def arr(count):
        return np.frombuffer(r.take(4 * count), dtype="<f4").copy()

    x, y, score = arr(n), arr(n), arr(n)
    desc = arr(n * 64).reshape(n, 64)
    rel = arr(n)
    if r.off != len(r.buf):
        raise FileFormatError("trailing bytes in feature file")
    return FeatureSet((w, h), _MODE_NAMES[mode], x, y, score, desc, rel)


# ----------------------------------------------------------------------
# Images
# ----------------------------------------------------------------------

_BT601 = np.array([0.299, 0.587, 0.114])


def _parse_pnm_header(buf):
    # magic, width, height, maxval with comment/whitespace handling
    tokens = []
    i = 2
    while len(tokens) < 3:
        while i < len(buf) and buf[i:i + 1].isspace():
            i += 1
        if i < len(buf) and buf[i:i + 1] == b"#":
            while i < len(buf) and buf[i] != 0x0A:
                i += 1
            continue
        start = i
        while i < len(buf) and not buf[i:i + 1].isspace():
            i += 1
        if start == i:
            raise FileFormatError("truncated PNM header")
        tokens.append(int(buf[start:i]))
    return tokens[0], tokens[1], tokens[2], i + 1


def decode_image(path) -> np.ndarray:
    """Grayscale H x W float array in [0, 1]; color uses BT.601 luminance."""
    with open(path, "rb") as f:
        buf = f.read()
    if buf[:2] in (b"P5", b"P6"):
        w, h, maxval, off = _parse_pnm_header(buf)
        if maxval <= 0 or maxval > 255:
            raise FileFormatError(f"unsupported PNM maxval {maxval}")
        channels = 1 if buf[:2] == b"P5" else 3
        need = w * h * channels
        raw = np.frombuffer(buf[off:off + need], dtype=np.uint8)
        if raw.size != need:
            raise FileFormatError("truncated PNM payload")
        img = raw.astype(np.float64).reshape(h, w, channels) / maxval
        return img[:, :, 0] if channels == 1 else img @ _BT601
    try:
        from PIL import Image
        with Image.open(path) as im:
            arr = np.asarray(im, dtype=np.float64)
    except Exception as exc:
        raise FileFormatError(f"cannot decode image '{path}': {exc}") from exc
    if arr.ndim == 2:
        return arr / 255.0
    return (arr[:, :, :3] / 255.0) @ _BT601


def write_pgm(image, path):
    """Binary P5, maxval 255; values outside [0, 1] are clipped."""
    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    data = np.round(img * 255.0).astype(np.uint8)
    h, w = data.shape
    atomic_write(path, f"P5\n{w} {h}\n255\n".encode() + data.tobytes())
