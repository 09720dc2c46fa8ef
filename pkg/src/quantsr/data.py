"""Image I/O, bicubic resampling, aligned patch sampling and synthetic data.

Images are ``(3, H, W)`` uint8 arrays in RGB order. Model inputs are the same
data divided by 255 (float32). A dataset directory looks like::

    <root>/hr/<id>.png        high-resolution ground truth (3H x 3W)
    <root>/lr/<id>.png        bicubic x1/3 of the HR image (H x W)
    <root>/teacher/<id>.png   optional teacher prediction, HR-shaped
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image

from .errors import InvalidArgument
from .losses import dct_matrix

logger = logging.getLogger(__name__)

SCALE = 3
KINDS = ("gradients", "checkerboards", "gaussian-blobs", "band-limited-noise")
BICUBIC_A = -0.5


# -- PNG I/O --------------------------------------------------------------------


def load_png(path: str | Path) -> np.ndarray:
    """Read an 8-bit PNG as ``(3, H, W)`` uint8. Grayscale is broadcast to RGB,
    alpha is dropped; 16-bit and other modes are rejected."""
    path = Path(path)
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            if mode == "P":
                im = im.convert("RGBA" if "transparency" in im.info else "RGB")
                mode = im.mode
            arr = np.asarray(im)
    except FileNotFoundError:
        raise
    except OSError as exc:
        raise OSError(f"{path}: cannot read PNG ({exc})") from exc
    if mode in ("L", "LA"):
        gray = arr if mode == "L" else arr[..., 0]
        return np.repeat(gray[None].astype(np.uint8), 3, axis=0)
    if mode in ("RGB", "RGBA") and arr.dtype == np.uint8:
        return np.ascontiguousarray(arr[..., :3].transpose(2, 0, 1))
    raise OSError(f"{path}: unsupported PNG mode {mode}; expected 8-bit RGB or grayscale")


def save_png(img: np.ndarray, path: str | Path) -> None:
    if img.dtype != np.uint8 or img.ndim != 3 or img.shape[0] != 3:
        raise InvalidArgument(f"save_png expects a (3, H, W) uint8 image, got {img.dtype} {img.shape}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.ascontiguousarray(img.transpose(1, 2, 0)), mode="RGB").save(path, format="PNG")


def normalize(img: np.ndarray) -> np.ndarray:
    return img.astype(np.float32) / np.float32(255.0)


def denormalize(x: np.ndarray) -> np.ndarray:
    """Clamp to ``[0, 1]`` and round half-to-even onto the 8-bit grid."""
    return np.rint(np.clip(x, 0.0, 1.0) * 255.0).astype(np.uint8)


# -- bicubic resampling ------------------------------------------------------------


def cubic_kernel(x: np.ndarray, a: float = BICUBIC_A) -> np.ndarray:
    x = np.abs(x)
    x2, x3 = x * x, x * x * x
    near = (a + 2) * x3 - (a + 3) * x2 + 1
    far = a * x3 - 5 * a * x2 + 8 * a * x - 4 * a
    return np.where(x <= 1, near, np.where(x < 2, far, 0.0))


def resize_matrix(n_in: int, n_out: int, antialias: bool = True) -> np.ndarray:
    """``(n_out, n_in)`` bicubic interpolation matrix with half-pixel centres and
    edge clamping. When downscaling with ``antialias`` the kernel is stretched
    by the scale factor."""
    scale = n_out / n_in
    kscale = min(scale, 1.0) if antialias else 1.0
    support = 2.0 / kscale
    centers = (np.arange(n_out) + 0.5) / scale - 0.5
    left = np.floor(centers - support).astype(np.int64) + 1
    taps = int(np.ceil(2 * support)) + 1
    idx = left[:, None] + np.arange(taps)[None, :]
    weights = cubic_kernel((centers[:, None] - idx) * kscale) * kscale
    weights /= weights.sum(axis=1, keepdims=True)
    m = np.zeros((n_out, n_in))
    rows = np.repeat(np.arange(n_out)[:, None], taps, axis=1)
    np.add.at(m, (rows, np.clip(idx, 0, n_in - 1)), weights)
    return m


def bicubic_resize(img: np.ndarray, out_h: int, out_w: int, antialias: bool = True) -> np.ndarray:
    """Separable bicubic (a = -0.5) resize of a ``(..., H, W)`` array.

    uint8 input gives uint8 output (rounded half-to-even, clipped); float input
    gives float64 output.
    """
    if out_h < 1 or out_w < 1:
        raise InvalidArgument(f"output size must be >= 1, got {(out_h, out_w)}")
    h, w = img.shape[-2:]
    mh = resize_matrix(h, out_h, antialias)
    mw = resize_matrix(w, out_w, antialias)
    out = mh @ img.astype(np.float64) @ mw.T
    if img.dtype == np.uint8:
        return np.clip(np.rint(out), 0, 255).astype(np.uint8)
    return out


def bicubic_upscale(lr: np.ndarray, scale: int = SCALE) -> np.ndarray:
    h, w = lr.shape[-2:]
    return bicubic_resize(lr, h * scale, w * scale)


# -- pairs and patches --------------------------------------------------------------


@dataclass
class ImagePair:
    lr: np.ndarray
    hr: np.ndarray
    id: str

    def __post_init__(self):
        if self.lr.shape[0] != 3 or self.hr.shape[0] != 3:
            raise InvalidArgument(f"{self.id}: images must have 3 channels")
        lh, lw = self.lr.shape[1:]
        if self.hr.shape[1:] != (SCALE * lh, SCALE * lw):
            raise InvalidArgument(
                f"{self.id}: HR {self.hr.shape[1:]} is not exactly {SCALE}x LR {self.lr.shape[1:]}"
            )


@dataclass
class PatchSample:
    lr_patch: np.ndarray
    hr_patch: np.ndarray
    teacher_patch: np.ndarray | None
    augmentation: tuple[bool, bool, bool]  # (hflip, vflip, transpose)


def augment(x: np.ndarray, hflip: bool, vflip: bool, transpose: bool) -> np.ndarray:
    """Apply horizontal flip, vertical flip, then transpose to the last two axes."""
    if hflip:
        x = x[..., ::-1]
    if vflip:
        x = x[..., ::-1, :]
    if transpose:
        x = np.swapaxes(x, -1, -2)
    return np.ascontiguousarray(x)


def sample_patch(
    pair: ImagePair,
    p: int,
    rng: np.random.Generator,
    teacher: np.ndarray | None = None,
    augment_prob: float = 0.5,
) -> PatchSample:
    """Random aligned crop: LR ``[v:v+p, u:u+p]`` and HR ``[3v:3(v+p), 3u:3(u+p)]``.

    ``teacher`` (normalized, HR-shaped) receives the same crop and augmentation.
    """
    _, h, w = pair.lr.shape
    if p < 1 or p > min(h, w):
        raise InvalidArgument(f"patch size {p} exceeds LR image {pair.id} of size {(h, w)}")
    v = int(rng.integers(0, h - p + 1))
    u = int(rng.integers(0, w - p + 1))
    flips = rng.random(3) < augment_prob
    aug = (bool(flips[0]), bool(flips[1]), bool(flips[2]))
    s = SCALE
    lr = augment(pair.lr[:, v : v + p, u : u + p], *aug)
    hr = augment(pair.hr[:, s * v : s * (v + p), s * u : s * (u + p)], *aug)
    t = None
    if teacher is not None:
        t = augment(teacher[:, s * v : s * (v + p), s * u : s * (u + p)], *aug).astype(np.float32)
    return PatchSample(normalize(lr), normalize(hr), t, aug)


def sample_batch(
    pairs: Sequence[ImagePair],
    p: int,
    batch: int,
    rng: np.random.Generator,
    teachers: dict[str, np.ndarray] | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
    """Stack ``batch`` random patches into ``(x, y, t)`` NCHW arrays."""
    idx = rng.integers(0, len(pairs), size=batch)
    samples = []
    for i in idx:
        pair = pairs[int(i)]
        t = teachers.get(pair.id) if teachers is not None else None
        samples.append(sample_patch(pair, p, rng, t))
    x = np.stack([s.lr_patch for s in samples])
    y = np.stack([s.hr_patch for s in samples])
    t = None
    if teachers is not None:
        if any(s.teacher_patch is None for s in samples):
            # a missing prediction disables KD for the whole batch
            t = None
        else:
            t = np.stack([s.teacher_patch for s in samples])
    return x, y, t


def iterate_batches(
    pairs: Sequence[ImagePair], p: int, batch: int, rng: np.random.Generator
) -> Iterator[np.ndarray]:
    while True:
        yield sample_batch(pairs, p, batch, rng)[0]


# -- dataset directories -------------------------------------------------------------


def write_dataset(pairs: Sequence[ImagePair], root: str | Path) -> None:
    root = Path(root)
    for pair in pairs:
        save_png(pair.hr, root / "hr" / f"{pair.id}.png")
        save_png(pair.lr, root / "lr" / f"{pair.id}.png")


def load_dataset(root: str | Path) -> list[ImagePair]:
    root = Path(root)
    hr_dir, lr_dir = root / "hr", root / "lr"
    if not hr_dir.is_dir() or not lr_dir.is_dir():
        raise FileNotFoundError(f"{root}: expected hr/ and lr/ subdirectories")
    pairs = []
    for hr_path in sorted(hr_dir.glob("*.png")):
        lr_path = lr_dir / hr_path.name
        if not lr_path.exists():
            raise FileNotFoundError(f"{lr_path}: missing LR image for {hr_path.stem}")
        pairs.append(ImagePair(load_png(lr_path), load_png(hr_path), hr_path.stem))
    if not pairs:
        raise InvalidArgument(f"{root}: dataset is empty")
    return pairs


def split_dataset(pairs: Sequence[ImagePair], val_count: int) -> tuple[list[ImagePair], list[ImagePair]]:
    """Last ``val_count`` pairs (in id order) are held out."""
    if not 0 <= val_count < len(pairs):
        raise InvalidArgument(f"cannot hold out {val_count} of {len(pairs)} images")
    pairs = list(pairs)
    cut = len(pairs) - val_count
    return pairs[:cut], pairs[cut:]


def teacher_cache_lookup(
    dataset_dir: str | Path,
    image_id: str,
    hr_shape: tuple[int, ...] | None = None,
    missing: str = "error",
) -> np.ndarray | None:
    """Load the cached teacher prediction for ``image_id`` as normalized floats.

    With ``missing="skip"`` an absent file returns ``None`` (KD is skipped for
    that sample); with ``"error"`` it raises.
    """
    if missing not in ("error", "skip"):
        raise InvalidArgument(f"missing must be 'error' or 'skip', got {missing!r}")
    path = Path(dataset_dir) / "teacher" / f"{image_id}.png"
    if not path.exists():
        if missing == "skip":
            return None
        raise FileNotFoundError(f"{path}: no teacher prediction for image {image_id}")
    t = load_png(path)
    if hr_shape is not None and t.shape != tuple(hr_shape):
        raise InvalidArgument(f"teacher prediction for {image_id} has shape {t.shape}, expected {tuple(hr_shape)}")
    return normalize(t)


def load_teachers(
    dataset_dir: str | Path, pairs: Sequence[ImagePair], missing: str = "error"
) -> dict[str, np.ndarray]:
    out = {}
    for pair in pairs:
        t = teacher_cache_lookup(dataset_dir, pair.id, pair.hr.shape, missing)
        if t is not None:
            out[pair.id] = t
    return out


# -- synthetic data -------------------------------------------------------------------


def _grid(size: int) -> tuple[np.ndarray, np.ndarray]:
    c = (np.arange(size) + 0.5) / size
    return np.meshgrid(c, c, indexing="ij")


def _gradients(rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = _grid(size)
    out = np.empty((3, size, size))
    for ch in range(3):
        theta = rng.uniform(0, 2 * np.pi)
        ramp = np.cos(theta) * xx + np.sin(theta) * yy
        ramp = (ramp - ramp.min()) / max(np.ptp(ramp), 1e-12)
        lo, hi = np.sort(rng.uniform(0, 1, 2))
        out[ch] = lo + (hi - lo) * ramp
    return out


def _checkerboard(rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = _grid(size)
    cell = rng.uniform(4, 16) / size
    theta = rng.uniform(0, np.pi / 2)
    ox, oy = rng.uniform(0, 1, 2)
    u = (np.cos(theta) * (xx - ox) + np.sin(theta) * (yy - oy)) / cell
    v = (-np.sin(theta) * (xx - ox) + np.cos(theta) * (yy - oy)) / cell
    mask = (np.floor(u) + np.floor(v)) % 2
    a, b = rng.uniform(0, 1, (2, 3))
    return a[:, None, None] * (1 - mask) + b[:, None, None] * mask


def _blobs(rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = _grid(size)
    out = np.broadcast_to(rng.uniform(0, 1, (3, 1, 1)), (3, size, size)).copy()
    for _ in range(int(rng.integers(3, 9))):
        cy, cx = rng.uniform(0, 1, 2)
        sigma = rng.uniform(0.03, 0.2)
        g = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))
        out += rng.uniform(-0.6, 0.6, (3, 1, 1)) * g
    return np.clip(out, 0, 1)


def band_limited_field(rng: np.random.Generator, size: int, cutoff: float = 0.4) -> np.ndarray:
    """``(3, size, size)`` field in ``[0, 1]`` whose full-image orthonormal DCT is
    zero for every frequency index ``>= cutoff * size`` along either axis."""
    k = max(1, int(cutoff * size))
    d = dct_matrix(size)
    out = np.empty((3, size, size))
    for ch in range(3):
        coeffs = np.zeros((size, size))
        decay = 1.0 / (1.0 + np.add.outer(np.arange(k), np.arange(k)))
        coeffs[:k, :k] = rng.standard_normal((k, k)) * decay
        field = d.T @ coeffs @ d
        # affine rescale touches only the DC coefficient
        field = (field - field.min()) / max(np.ptp(field), 1e-12)
        out[ch] = field
    return out


_GENERATORS = {
    "gradients": _gradients,
    "checkerboards": _checkerboard,
    "gaussian-blobs": _blobs,
    "band-limited-noise": band_limited_field,
}


def make_synthetic_dataset(kind: str, n: int, size: int, seed: int) -> list[ImagePair]:
    """Procedural HR images (``size`` x ``size``) with bicubic x1/3 LR partners.

    ``kind`` is one of :data:`KINDS` or ``"mixed"`` (cycles through them).
    """
    if kind != "mixed" and kind not in _GENERATORS:
        raise InvalidArgument(f"unknown dataset kind {kind!r}; expected one of {KINDS + ('mixed',)}")
    if size % SCALE or size < SCALE:
        raise InvalidArgument(f"HR size {size} must be a positive multiple of {SCALE}")
    if n < 1:
        raise InvalidArgument(f"n must be >= 1, got {n}")
    children = np.random.SeedSequence(seed).spawn(n)
    pairs = []
    for i, ss in enumerate(children):
        k = KINDS[i % len(KINDS)] if kind == "mixed" else kind
        field = _GENERATORS[k](np.random.default_rng(ss), size)
        hr = np.rint(np.clip(field, 0, 1) * 255).astype(np.uint8)
        lr = bicubic_resize(hr, size // SCALE, size // SCALE)
        pairs.append(ImagePair(lr, hr, f"{i:04d}"))
    return pairs
