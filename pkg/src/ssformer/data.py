"""Dataset plumbing: netpbm images, augmentation, synthesis, checkpoints.

Images are binary PGM (P5) or PPM (P6) with maxval 255; nothing else is
decoded. In memory an image is a float32 [C,H,W] array in [0,1] and a mask
is a strictly binary float32 [1,H,W] array. Checkpoints are a flat named
tensor container with a fixed little-endian layout (magic "SSF1") that
round-trips bit-exactly.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, InvalidShape, InvalidTarget
from .nn import interp_matrix
from .rng import Rng


@dataclass
class Sample:
    image: np.ndarray  # [3,H,W] float32 in [0,1]
    mask: np.ndarray   # [1,H,W] float32 in {0,1}
    id: str


# ---------------------------------------------------------------------------
# netpbm codec


def _next_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    n = len(buf)
    while pos < n:
        c = buf[pos:pos + 1]
        if c == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    if pos >= n:
        raise FormatError(f"truncated header at byte {pos}")
    start = pos
    while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
        pos += 1
    return buf[start:pos], pos


def load_netpbm(path, binarize: bool = False) -> np.ndarray:
    """Decode P5 -> [1,H,W] or P6 -> [3,H,W] float32 in [0,1].

    `binarize` thresholds at 128/255, for mask files.
    """
    with open(path, "rb") as fh:
        buf = fh.read()
    magic, pos = _next_token(buf, 0)
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"bad magic {magic!r} at byte 0")
    channels = 1 if magic == b"P5" else 3
    fields = []
    for _ in range(3):
        tok, pos = _next_token(buf, pos)
        if not tok.isdigit():
            raise FormatError(f"non-numeric header field {tok!r} at byte {pos - len(tok)}")
        fields.append(int(tok))
    w, h, maxval = fields
    if maxval != 255:
        raise FormatError(f"unsupported maxval {maxval} at byte {pos - len(str(maxval))}")
    pos += 1  # single whitespace byte separates header from raster
    need = w * h * channels
    if len(buf) - pos < need:
        raise FormatError(f"truncated raster at byte {len(buf)}: need {need} bytes from {pos}")
    raster = np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos)
    img = raster.reshape(h, w, channels).transpose(2, 0, 1).astype(np.float32) / 255.0
    if binarize:
        img = (img >= 128.0 / 255.0).astype(np.float32)
    return img


def save_netpbm(arr: np.ndarray, path) -> None:
    """Encode [1,H,W] as P5 or [3,H,W] as P6, quantizing [0,1] to 8 bits."""
    a = np.asarray(arr)
    if a.ndim == 2:
        a = a[None]
    if a.ndim != 3 or a.shape[0] not in (1, 3):
        raise InvalidShape(f"expected [1|3,H,W], got {a.shape}")
    magic = b"P5" if a.shape[0] == 1 else b"P6"
    q = np.clip(np.rint(a * 255.0), 0, 255).astype(np.uint8)
    raster = q.transpose(1, 2, 0).tobytes()
    with open(path, "wb") as fh:
        fh.write(magic + b"\n%d %d\n255\n" % (a.shape[2], a.shape[1]))
        fh.write(raster)


# ---------------------------------------------------------------------------
# resizing


def resize(arr: np.ndarray, size: tuple, method: str = "bilinear") -> np.ndarray:
    """Resize [C,H,W] to (h, w); bilinear for images, nearest for masks."""
    h, w = size
    if h < 1 or w < 1:
        raise InvalidShape(f"target size {size} must be >= 1")
    c, ih, iw = arr.shape
    if (ih, iw) == (h, w):
        return arr.copy()
    if method == "nearest":
        ri = np.minimum((np.arange(h) + 0.5) * ih / h, ih - 1).astype(np.int64)
        ci = np.minimum((np.arange(w) + 0.5) * iw / w, iw - 1).astype(np.int64)
        return np.ascontiguousarray(arr[:, ri[:, None], ci[None, :]])
    if method != "bilinear":
        raise ValueError(f"unknown method {method!r}")
    ah = interp_matrix(ih, h, np.float64)
    aw = interp_matrix(iw, w, np.float64)
    out = np.matmul(np.matmul(ah, arr.astype(np.float64)), aw.T)
    return out.astype(arr.dtype)


# ---------------------------------------------------------------------------
# binary morphology

_CROSS = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)


def _check_mask(mask: np.ndarray) -> np.ndarray:
    m = np.asarray(mask)
    if not ((m == 0) | (m == 1)).all():
        raise InvalidTarget("morphology input must be binary")
    return m.astype(bool)


def _morph(mask, element, iters, dilating: bool):
    m = _check_mask(mask)
    squeeze = m.ndim == 3
    if squeeze:
        m = m[0]
    element = _CROSS if element is None else np.asarray(element, dtype=bool)
    kh, kw = element.shape
    offs = [(i - kh // 2, j - kw // 2) for i in range(kh) for j in range(kw) if element[i, j]]
    h, w = m.shape
    for _ in range(iters):
        acc = np.zeros_like(m) if dilating else np.ones_like(m)
        for di, dj in offs:
            # shifted view with zero padding outside the frame
            shifted = np.zeros_like(m)
            src_i = slice(max(0, di), min(h, h + di))
            dst_i = slice(max(0, -di), min(h, h - di))
            src_j = slice(max(0, dj), min(w, w + dj))
            dst_j = slice(max(0, -dj), min(w, w - dj))
            shifted[dst_i, dst_j] = m[src_i, src_j]
            if dilating:
                acc |= shifted
            else:
                acc &= shifted
        m = acc
    out = m[None] if squeeze else m
    return out.astype(np.float32)


def dilate(mask, element=None, iters: int = 1) -> np.ndarray:
    """Binary max-filter under the element (default 3x3 cross), zero-padded."""
    return _morph(mask, element, iters, dilating=True)


def erode(mask, element=None, iters: int = 1) -> np.ndarray:
    """Binary min-filter under the element; the border always erodes."""
    return _morph(mask, element, iters, dilating=False)


# ---------------------------------------------------------------------------
# augmentation


def _scale_keep_size(img: np.ndarray, u: float, method: str) -> np.ndarray:
    c, h, w = img.shape
    sh = max(1, int(round(h * u)))
    sw = max(1, int(round(w * u)))
    scaled = resize(img, (sh, sw), method)
    out = np.zeros((c, h, w), dtype=img.dtype)
    if sh >= h:
        top = (sh - h) // 2
        left = (sw - w) // 2
        out[:] = scaled[:, top:top + h, left:left + w]
    else:
        top = (h - sh) // 2
        left = (w - sw) // 2
        out[:, top:top + sh, left:left + sw] = scaled
    return out


def augment(s: Sample, rng: Rng) -> Sample:
    """Random flips, scale jitter, 90-degree rotation, mask morphology.

    Each stage fires with probability 1/2, in this fixed order; geometric
    stages hit image and mask identically, morphology hits the mask only.
    """
    img = s.image
    mask = s.mask
    if rng.uniform() < 0.5:
        img = img[:, :, ::-1]
        mask = mask[:, :, ::-1]
    if rng.uniform() < 0.5:
        img = img[:, ::-1, :]
        mask = mask[:, ::-1, :]
    if rng.uniform() < 0.5:
        u = 0.75 + 0.5 * rng.uniform()
        img = _scale_keep_size(np.ascontiguousarray(img), u, "bilinear")
        mask = _scale_keep_size(np.ascontiguousarray(mask), u, "nearest")
    if rng.uniform() < 0.5:
        k = rng.randint(1, 4)
        img = np.rot90(img, k, axes=(1, 2))
        mask = np.rot90(mask, k, axes=(1, 2))
    if rng.uniform() < 0.5:
        op = dilate if rng.uniform() < 0.5 else erode
        mask = op(np.ascontiguousarray(mask), iters=rng.randint(1, 3))
    return Sample(image=np.ascontiguousarray(img, dtype=np.float32),
                  mask=np.ascontiguousarray(mask, dtype=np.float32),
                  id=s.id)


# ---------------------------------------------------------------------------
# synthetic dataset


def _smooth_noise(size: int, rng: Rng, coarse: int) -> np.ndarray:
    grid = rng.normal(coarse * coarse).reshape(coarse, coarse)
    up = resize(grid[None].astype(np.float32), (size, size), "bilinear")[0]
    return up


def _one_sample(size: int, rng: Rng, sid: str) -> Sample:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    for _ in range(200):
        base = 0.40 + 0.12 * _smooth_noise(size, rng, max(4, size // 8))
        mask = np.zeros((size, size), dtype=bool)
        bump = np.zeros((size, size), dtype=np.float64)
        for _ in range(rng.randint(1, 4)):
            cx = (0.2 + 0.6 * rng.uniform()) * size
            cy = (0.2 + 0.6 * rng.uniform()) * size
            a = (0.08 + 0.20 * rng.uniform()) * size
            b = (0.08 + 0.20 * rng.uniform()) * size
            theta = np.pi * rng.uniform()
            amp = (0.25 + 0.20 * rng.uniform()) * (1.0 if rng.uniform() < 0.5 else -1.0)
            soft = 0.05 + 0.10 * rng.uniform()
            dx = xx - cx
            dy = yy - cy
            ct, st = np.cos(theta), np.sin(theta)
            d = ((dx * ct + dy * st) / a) ** 2 + ((-dx * st + dy * ct) / b) ** 2
            mask |= d < 1.0
            bump += amp / (1.0 + np.exp(np.minimum((d - 1.0) / soft, 60.0)))
        cover = mask.mean()
        if 0.01 <= cover <= 0.60:
            break
    else:
        raise InvalidShape(f"could not hit coverage bounds at size {size}")
    gray = np.clip(base + bump, 0.0, 1.0)
    tint = 0.9 + 0.2 * rng.uniform(3)
    image = np.clip(gray[None] * tint[:, None, None], 0.0, 1.0).astype(np.float32)
    return Sample(image=image, mask=mask[None].astype(np.float32), id=sid)


def synth_dataset(n: int, size: int, seed: int) -> list[Sample]:
    """Deterministic blob-on-noise segmentation set; masks are exact
    ellipse interiors, foreground coverage forced into [1%, 60%]."""
    if size % 32:
        raise InvalidShape(f"size {size} not divisible by 32")
    if n < 1:
        raise InvalidShape(f"need n >= 1, got {n}")
    root = Rng(seed)
    return [_one_sample(size, root.spawn(i), f"{i:04d}") for i in range(n)]


# ---------------------------------------------------------------------------
# dataset directory layout: images/<id>.ppm + masks/<id>.pgm


def save_dataset(samples, root) -> None:
    img_dir = os.path.join(root, "images")
    mask_dir = os.path.join(root, "masks")
    os.makedirs(img_dir, exist_ok=True)
    os.makedirs(mask_dir, exist_ok=True)
    for s in samples:
        save_netpbm(s.image, os.path.join(img_dir, f"{s.id}.ppm"))
        save_netpbm(s.mask, os.path.join(mask_dir, f"{s.id}.pgm"))


def load_dataset(root) -> list[Sample]:
    img_dir = os.path.join(root, "images")
    mask_dir = os.path.join(root, "masks")
    if not os.path.isdir(img_dir):
        return []
    samples = []
    for name in sorted(os.listdir(img_dir)):
        if not name.endswith(".ppm"):
            continue
        stem = name[:-4]
        mask_path = os.path.join(mask_dir, f"{stem}.pgm")
        if not os.path.exists(mask_path):
            raise FormatError(f"image {name} has no mask {stem}.pgm")
        image = load_netpbm(os.path.join(img_dir, name))
        mask = load_netpbm(mask_path, binarize=True)
        samples.append(Sample(image=image, mask=mask, id=stem))
    return samples


# ---------------------------------------------------------------------------
# checkpoints

_MAGIC = b"SSF1"
_VERSION = 1


def checkpoint_save(params: dict[str, np.ndarray], path) -> None:
    """Write the named-tensor container; all values must be float32."""
    names = list(params)
    if len(set(names)) != len(names):
        raise FormatError("duplicate tensor name")
    chunks = [_MAGIC, struct.pack("<II", _VERSION, len(names))]
    for name in names:
        arr = np.ascontiguousarray(params[name])
        if arr.dtype != np.float32:
            raise FormatError(f"tensor {name} is {arr.dtype}, checkpoints hold float32")
        nb = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(nb)))
        chunks.append(nb)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.astype("<f4", copy=False).tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def checkpoint_load(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != _MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r} at byte 0")
    if len(buf) < 12:
        raise FormatError(f"truncated header at byte {len(buf)}")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != _VERSION:
        raise FormatError(f"unsupported version {version} at byte 4")
    pos = 12
    out: dict[str, np.ndarray] = {}

    def need(nbytes: int, what: str):
        if len(buf) - pos < nbytes:
            raise FormatError(f"truncated {what} at byte {pos}")

    for _ in range(count):
        need(4, "name length")
        (name_len,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        need(name_len, "name")
        name = buf[pos:pos + name_len].decode("utf-8")
        pos += name_len
        if name in out:
            raise FormatError(f"duplicate tensor name {name!r} at byte {pos}")
        need(4, f"rank of {name}")
        (rank,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        if rank > 4:
            raise FormatError(f"tensor {name} has rank {rank} > 4 at byte {pos - 4}")
        need(4 * rank, f"dims of {name}")
        dims = struct.unpack_from(f"<{rank}I", buf, pos)
        pos += 4 * rank
        payload = 4 * int(np.prod(dims, dtype=np.int64)) if rank else 4
        need(payload, f"payload of {name}")
        arr = np.frombuffer(buf, dtype="<f4", count=payload // 4, offset=pos).reshape(dims)
        pos += payload
        out[name] = arr.copy()
    return out
