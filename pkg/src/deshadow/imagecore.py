"""Float image helpers: validation, Gaussian filtering, area resampling and I/O.

Images are plain numpy arrays of shape ``(H, W, C)`` with ``C`` in {1, 3},
holding linear radiometric values.  Every function here is pure.
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np

__all__ = [
    "ImageFormatError",
    "as_image",
    "gaussian_kernel",
    "gaussian_blur",
    "resample_area",
    "resize_bilinear",
    "split_frequency",
    "luma",
    "srgb_encode",
    "srgb_decode",
    "read_image",
    "write_image",
    "read_pfm",
    "write_pfm",
]


class ImageFormatError(ValueError):
    """Raised for malformed or unsupported image files."""


def as_image(img, dtype=None) -> np.ndarray:
    """Return ``img`` as a validated ``(H, W, C)`` float array.

    2-D arrays are promoted to a single channel.  Non-finite values are
    rejected because every downstream operation assumes finite data.
    """
    arr = np.asarray(img)
    if arr.ndim == 2:
        arr = arr[..., None]
    if arr.ndim != 3 or arr.shape[2] not in (1, 3):
        raise ValueError(f"expected (H, W, C) image with C in (1, 3), got shape {arr.shape}")
    if dtype is not None:
        arr = arr.astype(dtype, copy=False)
    elif not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float32)
    if not np.all(np.isfinite(arr)):
        raise ValueError("image contains non-finite values")
    return arr


def gaussian_kernel(sigma: float) -> np.ndarray:
    """1-D Gaussian taps with radius ``ceil(3 sigma)``, renormalized to sum 1."""
    radius = int(math.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _blur_axis(arr: np.ndarray, k: np.ndarray, axis: int) -> np.ndarray:
    radius = (len(k) - 1) // 2
    pad = [(0, 0)] * arr.ndim
    pad[axis] = (radius, radius)
    padded = np.pad(arr, pad, mode="edge")
    n = arr.shape[axis]
    out = np.zeros_like(arr)
    for i, w in enumerate(k):
        out += w * np.take(padded, np.arange(i, i + n), axis=axis)
    return out


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur with clamp-to-edge borders.

    ``sigma == 0`` returns an exact copy.  Accumulation is done in float64
    and cast back to the input dtype.
    """
    if not math.isfinite(sigma):
        raise ValueError(f"sigma must be finite, got {sigma}")
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    img = as_image(img)
    if sigma == 0:
        return img.copy()
    k = gaussian_kernel(sigma)
    out = _blur_axis(img.astype(np.float64), k, axis=0)
    out = _blur_axis(out, k, axis=1)
    return out.astype(img.dtype)


def _area_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic matrix of input-pixel overlaps for one axis."""
    scale = n_in / n_out
    mat = np.zeros((n_out, n_in), dtype=np.float64)
    for o in range(n_out):
        lo, hi = o * scale, (o + 1) * scale
        i0, i1 = int(math.floor(lo)), min(int(math.ceil(hi)), n_in)
        for i in range(i0, i1):
            overlap = min(hi, i + 1) - max(lo, i)
            if overlap > 0:
                mat[o, i] = overlap
        mat[o] /= mat[o].sum()
    return mat


def resample_area(img: np.ndarray, out_w: int, out_h: int) -> np.ndarray:
    """Box-filter resample: each output pixel is the area-weighted mean of the
    input pixels it covers.  Exact block means for integer factors."""
    if out_w < 1 or out_h < 1:
        raise ValueError(f"output size must be >= 1, got {out_w}x{out_h}")
    img = as_image(img)
    h, w, _ = img.shape
    if (h, w) == (out_h, out_w):
        return img.copy()
    if h % out_h == 0 and w % out_w == 0:
        fy, fx = h // out_h, w // out_w
        blocks = img.astype(np.float64).reshape(out_h, fy, out_w, fx, -1)
        return blocks.mean(axis=(1, 3)).astype(img.dtype)
    ay = _area_matrix(h, out_h)
    ax = _area_matrix(w, out_w)
    out = np.einsum("oh,hwc,pw->opc", ay, img.astype(np.float64), ax)
    return out.astype(img.dtype)


def resize_bilinear(img: np.ndarray, out_w: int, out_h: int) -> np.ndarray:
    """Bilinear resize with pixel-center alignment and clamped borders."""
    img = as_image(img)
    h, w, _ = img.shape
    if (h, w) == (out_h, out_w):
        return img.copy()
    ys = np.clip((np.arange(out_h) + 0.5) * h / out_h - 0.5, 0, h - 1)
    xs = np.clip((np.arange(out_w) + 0.5) * w / out_w - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]
    src = img.astype(np.float64)
    top = src[y0][:, x0] * (1 - wx) + src[y0][:, x1] * wx
    bot = src[y1][:, x0] * (1 - wx) + src[y1][:, x1] * wx
    return (top * (1 - wy) + bot * wy).astype(img.dtype)


def split_frequency(img: np.ndarray, sigma: float) -> tuple[np.ndarray, np.ndarray]:
    """Split into ``(low, high)`` with ``low = blur(img)`` and ``high = img - low``."""
    if not sigma > 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    img = as_image(img)
    low = gaussian_blur(img, sigma)
    return low, img - low


def luma(img: np.ndarray) -> np.ndarray:
    """Rec.601 luma as an ``(H, W)`` float64 array."""
    img = as_image(img)
    if img.shape[2] == 1:
        return img[..., 0].astype(np.float64)
    x = img.astype(np.float64)
    return 0.299 * x[..., 0] + 0.587 * x[..., 1] + 0.114 * x[..., 2]


def srgb_encode(x: np.ndarray) -> np.ndarray:
    """Linear -> sRGB-encoded values (the sRGB OETF), input clipped to [0, 1]."""
    x = np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0)
    return np.where(x <= 0.0031308, 12.92 * x, 1.055 * np.power(x, 1 / 2.4) - 0.055)


def srgb_decode(v: np.ndarray) -> np.ndarray:
    """sRGB-encoded values in [0, 1] -> linear (the sRGB EOTF)."""
    v = np.asarray(v, dtype=np.float64)
    return np.where(v <= 0.04045, v / 12.92, np.power((v + 0.055) / 1.055, 2.4))


# --------------------------------------------------------------------- PFM


def write_pfm(path: str | Path, img: np.ndarray) -> None:
    img = as_image(img)
    if img.shape[2] not in (1, 3):
        raise ValueError("PFM supports 1 or 3 channels")
    h, w, c = img.shape
    header = f"{'PF' if c == 3 else 'Pf'}\n{w} {h}\n-1.0\n".encode("ascii")
    # PFM scanlines are stored bottom-to-top.
    payload = np.ascontiguousarray(img[::-1].astype("<f4")).tobytes()
    Path(path).write_bytes(header + payload)


def _read_token(buf: bytes, pos: int, field: str) -> tuple[str, int]:
    while pos < len(buf) and buf[pos : pos + 1].isspace():
        pos += 1
    start = pos
    while pos < len(buf) and not buf[pos : pos + 1].isspace():
        pos += 1
    if start == pos:
        raise ImageFormatError(f"PFM header truncated: missing {field} at byte offset {start}")
    return buf[start:pos].decode("ascii", errors="replace"), pos


def read_pfm(path: str | Path) -> np.ndarray:
    buf = Path(path).read_bytes()
    magic, pos = _read_token(buf, 0, "magic")
    if magic not in ("PF", "Pf"):
        raise ImageFormatError(f"bad PFM magic {magic!r} at byte offset 0")
    channels = 3 if magic == "PF" else 1
    fields = {}
    for name in ("width", "height", "scale"):
        tok_start = pos
        tok, pos = _read_token(buf, pos, name)
        try:
            fields[name] = float(tok) if name == "scale" else int(tok)
        except ValueError:
            raise ImageFormatError(
                f"PFM {name} is not a number ({tok!r}) at byte offset {tok_start}"
            ) from None
    if pos >= len(buf):
        raise ImageFormatError(f"PFM header truncated after scale at byte offset {pos}")
    pos += 1  # the single whitespace byte ending the header
    w, h, scale = fields["width"], fields["height"], fields["scale"]
    if w <= 0 or h <= 0:
        raise ImageFormatError(f"PFM has non-positive size {w}x{h}")
    endian = "<" if scale < 0 else ">"
    n = w * h * channels
    if len(buf) - pos < 4 * n:
        raise ImageFormatError(
            f"PFM payload truncated: expected {4 * n} bytes at byte offset {pos}, "
            f"found {len(buf) - pos}"
        )
    data = np.frombuffer(buf, dtype=f"{endian}f4", count=n, offset=pos)
    img = data.reshape(h, w, channels)[::-1].astype(np.float32)
    return img


# --------------------------------------------------------------------- PNG

_PNG_SIG = b"\x89PNG\r\n\x1a\n"


def _png_bit_depth(buf: bytes) -> int:
    if buf[:8] != _PNG_SIG:
        raise ImageFormatError("bad PNG signature at byte offset 0")
    if len(buf) < 33 or buf[12:16] != b"IHDR":
        raise ImageFormatError("PNG missing IHDR chunk at byte offset 8")
    bit_depth, color_type = buf[24], buf[25]
    if bit_depth != 8:
        raise ImageFormatError(f"unsupported PNG bit depth {bit_depth} (byte offset 24); only 8-bit")
    return color_type


def read_png(path: str | Path) -> np.ndarray:
    from PIL import Image as PILImage

    buf = Path(path).read_bytes()
    _png_bit_depth(buf)
    with PILImage.open(path) as im:
        im.load()
        if im.mode in ("L", "LA"):
            arr = np.asarray(im.convert("L"), dtype=np.float64)[..., None]
        else:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return srgb_decode(arr / 255.0).astype(np.float32)


def write_png(path: str | Path, img: np.ndarray) -> None:
    from PIL import Image as PILImage

    img = as_image(img)
    enc = np.round(srgb_encode(img) * 255.0).astype(np.uint8)
    PILImage.fromarray(enc[..., 0] if enc.shape[2] == 1 else enc).save(path, format="PNG")


def read_image(path: str | Path) -> np.ndarray:
    """Read a PFM (float, as stored) or 8-bit PNG (sRGB decoded to linear)."""
    path = Path(path)
    head = path.read_bytes()[:8]
    if head.startswith(_PNG_SIG[:4]):
        return read_png(path)
    if head[:2] in (b"PF", b"Pf"):
        return read_pfm(path)
    raise ImageFormatError(f"unrecognized image format for {path} at byte offset 0")


def write_image(path: str | Path, img: np.ndarray, format: str | None = None) -> None:
    """Write ``img`` as ``"pfm"`` or ``"png"`` (inferred from the suffix if omitted)."""
    fmt = (format or Path(path).suffix.lstrip(".")).lower()
    if fmt == "pfm":
        write_pfm(path, img)
    elif fmt == "png":
        write_png(path, img)
    else:
        raise ValueError(f"unsupported image format {fmt!r}")
