"""Binary PPM (P6) image I/O and bilinear resizing.

Images are float64 arrays shaped 3×H×W with values in [0, 1].
"""
import os
import tempfile

import numpy as np

from ..errors import IOWriteError


def to_bytes(img):
    return np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def encode_ppm(img):
    img = np.asarray(img)
    if img.dtype != np.uint8:
        img = to_bytes(img)
    _, h, w = img.shape
    header = f"P6\n{w} {h}\n255\n".encode("ascii")
    return header + np.ascontiguousarray(img.transpose(1, 2, 0)).tobytes()


def atomic_write(path, payload):
    path = os.fspath(path)
    folder = os.path.dirname(path) or "."
    try:
        os.makedirs(folder, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=folder, prefix=".tmp-")
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.chmod(tmp, 0o644)    # mkstemp creates 0600
        os.replace(tmp, path)
    except OSError as exc:
        raise IOWriteError(f"cannot write {path}: {exc}") from exc


def write_ppm(path, img):
    atomic_write(path, encode_ppm(img))


def _tokens(buf, count):
    out, i = [], 0
    while len(out) < count:
        while i < len(buf) and buf[i:i + 1].isspace():
            i += 1
        if buf[i:i + 1] == b"#":
            while i < len(buf) and buf[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        j = i
        while j < len(buf) and not buf[j:j + 1].isspace():
            j += 1
        if j == i:
            raise ValueError("truncated PPM header")
        out.append(buf[i:j])
        i = j
    return out, i + 1


def decode_ppm(buf):
    (magic, w, h, maxval), offset = _tokens(buf, 4)
    if magic != b"P6" or int(maxval) != 255:
        raise ValueError("only 8-bit binary PPM (P6) is supported")
    w, h = int(w), int(h)
    data = np.frombuffer(buf, dtype=np.uint8, count=w * h * 3, offset=offset)
    return data.reshape(h, w, 3).transpose(2, 0, 1)


def read_ppm(path, raw=False):
    with open(path, "rb") as fh:
        img = decode_ppm(fh.read())
    return img.copy() if raw else img / 255.0


def resize(img, out_h=256, out_w=128):
    """Bilinear resize with half-pixel centres (align_corners=False)."""
    img = np.asarray(img, dtype=np.float64)
    _, h, w = img.shape
    if (h, w) == (out_h, out_w):
        return img.copy()

    def axis(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0, n_in - 1)
        lo = np.floor(src).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    y0, y1, ty = axis(h, out_h)
    x0, x1, tx = axis(w, out_w)
    top = img[:, y0][:, :, x0] + (img[:, y0][:, :, x1] - img[:, y0][:, :, x0]) * tx
    bot = img[:, y1][:, :, x0] + (img[:, y1][:, :, x1] - img[:, y1][:, :, x0]) * tx
    out = top + (bot - top) * ty[:, None]
    return np.clip(out, 0.0, 1.0)
