"""Synthetic image corpus, metric, file I/O and the train/validation split.

Images are [3, H, W] float arrays in [0, 1]. Low-resolution counterparts are
exact n x n box means of the high-resolution image, so data synthesis stays
dependency-free and analytically testable. Bicubic (Catmull-Rom) upsampling
lives here as well; the distillation teacher is built on it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "DataError",
    "ImagePair",
    "gen_synthetic",
    "downsample",
    "make_pairs",
    "psnr",
    "split",
    "bicubic_upsample",
    "write_pgm",
    "read_pgm",
]


class DataError(ValueError):
    """Malformed image file or illegal image arguments."""


@dataclass
class ImagePair:
    hr: np.ndarray  # [3, H, W] in [0, 1]
    lr: np.ndarray  # [3, H/n, W/n] in [0, 1]
    id: int


def _texture(rng, kind, h, w):
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    if kind == 0:
        # smoothed gaussian field, rescaled to fill [0, 1]
        img = rng.standard_normal((3, h, w))
        for _ in range(3):
            img = (
                img
                + np.roll(img, 1, axis=1)
                + np.roll(img, -1, axis=1)
                + np.roll(img, 1, axis=2)
                + np.roll(img, -1, axis=2)
            ) / 5.0
        lo = img.min(axis=(1, 2), keepdims=True)
        hi = img.max(axis=(1, 2), keepdims=True)
        return (img - lo) / np.maximum(hi - lo, 1e-12)
    if kind == 1:
        # checkerboard of random period and phase, near-full contrast
        period = int(rng.integers(2, 9))
        px, py = rng.integers(0, period, size=2)
        board = (((yy + py) // period + (xx + px) // period) % 2).astype(np.float64)
        lo = rng.uniform(0.0, 0.1, size=(3, 1, 1))
        hi = rng.uniform(0.9, 1.0, size=(3, 1, 1))
        return lo + (hi - lo) * board[None]
    if kind == 2:
        # linear gradient with a random direction per channel family
        ang = rng.uniform(0, 2 * np.pi)
        ramp = np.cos(ang) * xx / max(w - 1, 1) + np.sin(ang) * yy / max(h - 1, 1)
        ramp = (ramp - ramp.min()) / max(ramp.max() - ramp.min(), 1e-12)
        off = rng.uniform(-0.1, 0.1, size=(3, 1, 1))
        return np.clip(ramp[None] + off, 0.0, 1.0)
    # superposed sinusoids
    img = np.zeros((3, h, w))
    for _ in range(3):
        fx, fy = rng.uniform(0.5, 4.0, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        amp = rng.uniform(0.2, 0.5)
        wave = amp * np.sin(2 * np.pi * (fx * xx / w + fy * yy / h) + phase)
        img += wave[None] * rng.uniform(0.5, 1.0, size=(3, 1, 1))
    img = 0.5 + img / 2.0
    return np.clip(img, 0.0, 1.0)


def gen_synthetic(seed, count, h, w):
    """Deterministic procedural textures; image i depends only on (seed, i).

    ``seed`` may be an int or a numpy SeedSequence.
    """
    if h < 16 or w < 16:
        raise DataError(f"images must be at least 16x16, got {h}x{w}")
    base = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(int(seed))
    images = []
    for i in range(count):
        ss = np.random.SeedSequence(entropy=base.entropy, spawn_key=base.spawn_key + (i,))
        images.append(_texture(np.random.default_rng(ss), i % 4, h, w))
    return images


def downsample(hr, n):
    """n x n box-mean downsampling; extents must divide."""
    c, h, w = hr.shape
    if h % n != 0 or w % n != 0:
        raise DataError(f"extents {h}x{w} not divisible by scale {n}")
    return hr.reshape(c, h // n, n, w // n, n).mean(axis=(2, 4))


def make_pairs(images, n, start_id=0):
    return [ImagePair(hr=img, lr=downsample(img, n), id=start_id + i) for i, img in enumerate(images)]


def psnr(a, b, peak=1.0):
    """10*log10(peak^2/MSE) in dB, capped at 100 when MSE < 1e-10."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DataError(f"psnr: shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-10:
        return 100.0
    return float(10.0 * np.log10(peak * peak / mse))


def split(dataset, seed):
    """Seeded disjoint half/half split; an odd element goes to the first half."""
    idx = np.random.default_rng(seed).permutation(len(dataset))
    n1 = (len(dataset) + 1) // 2
    first = [dataset[i] for i in idx[:n1]]
    second = [dataset[i] for i in idx[n1:]]
    return first, second


# ---------------------------------------------------------------------------
# bicubic (Catmull-Rom) upsampling


def _catmull_rom(t):
    t = abs(t)
    if t <= 1.0:
        return 1.5 * t**3 - 2.5 * t**2 + 1.0
    if t < 2.0:
        return -0.5 * t**3 + 2.5 * t**2 - 4.0 * t + 2.0
    return 0.0


def _upsample_axis(x, n, axis):
    """Bicubic interpolation along one axis, border-replicated, phase-exact."""
    x = np.moveaxis(x, axis, -1)
    size = x.shape[-1]
    out_size = size * n
    # output i samples the input at (i + 0.5)/n - 0.5
    src = (np.arange(out_size) + 0.5) / n - 0.5
    base = np.floor(src).astype(int)
    frac = src - base
    taps = np.stack([np.clip(base + k - 1, 0, size - 1) for k in range(4)])  # [4, out]
    weights = np.stack(
        [np.vectorize(_catmull_rom)(frac + 1 - k) for k in range(4)]
    )  # [4, out]
    y = np.zeros(x.shape[:-1] + (out_size,), dtype=np.float64)
    for k in range(4):
        y += x[..., taps[k]] * weights[k]
    return np.moveaxis(y, -1, axis)


def bicubic_upsample(img, n):
    """Catmull-Rom upsampling by integer factor n on the last two axes."""
    if n == 1:
        return np.asarray(img, dtype=np.float64).copy()
    y = _upsample_axis(np.asarray(img, dtype=np.float64), n, axis=-1)
    return _upsample_axis(y, n, axis=-2)


# ---------------------------------------------------------------------------
# PGM (binary P5). Color images use three concatenated P5 planes in one file,
# one per channel, each carrying a "# plane i/3" header comment.


def write_pgm(path, image):
    """8-bit binary PGM; [1,H,W] single plane or [3,H,W] three planes."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] not in (1, 3):
        raise DataError(f"write_pgm expects [1,H,W] or [3,H,W], got {image.shape}")
    c, h, w = image.shape
    q = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        for p in range(c):
            fh.write(f"P5\n# plane {p + 1}/{c}\n{w} {h}\n255\n".encode())
            fh.write(q[p].tobytes())


def _read_token(buf, pos):
    # skip whitespace and '#' comments, return (token, new_pos)
    n = len(buf)
    while pos < n:
        ch = buf[pos : pos + 1]
        if ch == b"#":
            while pos < n and buf[pos : pos + 1] != b"\n":
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos : pos + 1].isspace():
        pos += 1
    if start == pos:
        raise DataError(f"unexpected end of file at byte {start}")
    return buf[start:pos], pos


def read_pgm(path):
    """Read one or more concatenated P5 planes; returns [C,H,W] in [0,1]."""
    with open(path, "rb") as fh:
        buf = fh.read()
    planes = []
    shape = None
    pos = 0
    while pos < len(buf):
        magic, pos = _read_token(buf, pos)
        if magic != b"P5":
            raise DataError(f"unsupported magic {magic!r} at byte {pos - len(magic)} (only binary P5)")
        wtok, pos = _read_token(buf, pos)
        htok, pos = _read_token(buf, pos)
        mtok, pos = _read_token(buf, pos)
        try:
            w, h, maxval = int(wtok), int(htok), int(mtok)
        except ValueError as e:
            raise DataError(f"malformed header near byte {pos}: {e}") from None
        if maxval != 255:
            raise DataError(f"unsupported maxval {maxval} at byte {pos} (only 8-bit)")
        if pos >= len(buf) or not buf[pos : pos + 1].isspace():
            raise DataError(f"missing whitespace after maxval at byte {pos}")
        pos += 1  # single whitespace after maxval
        end = pos + w * h
        if end > len(buf):
            raise DataError(f"truncated payload at byte {pos}: need {w * h} bytes, have {len(buf) - pos}")
        plane = np.frombuffer(buf[pos:end], dtype=np.uint8).reshape(h, w)
        planes.append(plane.astype(np.float64) / 255.0)
        if shape is None:
            shape = plane.shape
        elif plane.shape != shape:
            raise DataError(f"plane {len(planes)} shape {plane.shape} differs from first plane {shape}")
        pos = end
        # allow trailing whitespace between planes / at EOF
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
    if not planes:
        raise DataError("empty file")
    return np.stack(planes)
