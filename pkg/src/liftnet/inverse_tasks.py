"""Forward operators, degradations, image datasets and PSNR for imaging tasks."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .linops import Conv2dOp, IdentityOp, LinOp, MaskOp


def gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    """Isotropic Gaussian on a ``size x size`` grid, normalised to sum 1."""
    if size < 1 or size % 2 == 0:
        raise ValueError("kernel size must be a positive odd integer")
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    r = np.arange(size) - size // 2
    with np.errstate(under="ignore"):
        g = np.exp(-(r[:, None] ** 2 + r[None, :] ** 2) / (2.0 * sigma**2))
    return g / g.sum()


# Degradations


@dataclass(frozen=True)
class Blur:
    size: int = 5
    sigma: float = 1.0
    noise: float = 0.0
    name = "blur"

    def __post_init__(self):
        if self.noise < 0:
            raise ValueError("noise level must be nonnegative")


@dataclass(frozen=True)
class Noise:
    sigma: float = 0.1
    name = "noise"

    @property
    def noise(self) -> float:
        return self.sigma

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("noise level must be nonnegative")


@dataclass(frozen=True)
class Inpaint:
    drop: float = 0.3
    seed: int = 0
    noise: float = 0.0
    name = "inpaint"

    def __post_init__(self):
        if not 0 < self.drop < 1:
            raise ValueError("drop fraction must lie in (0, 1)")
        if self.noise < 0:
            raise ValueError("noise level must be nonnegative")


DegradationSpec = Blur | Noise | Inpaint


def inpaint_mask(n_pixels: int, drop: float, rng: np.random.Generator) -> np.ndarray:
    """Keep-mask with exactly ``round(drop * n_pixels)`` dropped positions."""
    keep = np.ones(n_pixels, dtype=bool)
    keep[rng.choice(n_pixels, int(round(drop * n_pixels)), replace=False)] = False
    return keep


def forward_operator(spec, shape: tuple[int, int], index: int = 0) -> LinOp:
    """The linear part ``H`` of a degradation for images of ``shape``.

    Inpainting masks are drawn from ``default_rng([spec.seed, index])`` so
    that every image gets its own mask.
    """
    h, w = shape
    if isinstance(spec, Blur):
        k = gaussian_kernel(spec.size, spec.sigma)
        return Conv2dOp(k[None, None], (1, h, w), stride=1, padding="same", name="blur")
    if isinstance(spec, Noise):
        return IdentityOp(h * w)
    if isinstance(spec, Inpaint):
        rng = np.random.default_rng([spec.seed, index])
        return MaskOp(inpaint_mask(h * w, spec.drop, rng), compress=False)
    raise TypeError(f"unknown degradation {spec!r}")


def degrade(spec, image: np.ndarray, rng: np.random.Generator, shape: tuple[int, int] | None = None,
            index: int = 0) -> np.ndarray:
    """``H x + noise * N(0, I)``; observations are not clipped."""
    image = np.asarray(image, dtype=float)
    if shape is None:
        side = int(round(np.sqrt(image.shape[-1])))
        shape = (side, side)
    op = forward_operator(spec, shape, index)
    y = op.apply(image)
    if spec.noise > 0:
        y = y + spec.noise * rng.standard_normal(y.shape)
    return y


def degrade_dataset(spec, images: np.ndarray, shape: tuple[int, int], seed: int) -> np.ndarray:
    """Degrade every image with its own stream ``default_rng([seed, i])``."""
    images = np.atleast_2d(images)
    out = np.empty_like(images, dtype=float)
    for i, img in enumerate(images):
        out[i] = degrade(spec, img, np.random.default_rng([seed, i]), shape, index=i)
    return out


def psnr(x: np.ndarray, ref: np.ndarray, peak: float = 1.0) -> float:
    """``10 log10(peak^2 / MSE)`` in dB, capped at 99 dB for MSE <= 1e-12."""
    x = np.asarray(x, dtype=float)
    ref = np.asarray(ref, dtype=float)
    if x.shape != ref.shape:
        raise ValueError("shapes differ")
    if not peak > 0:
        raise ValueError("peak must be positive")
    mse = float(np.mean((x - ref) ** 2))
    if mse <= 1e-12:
        return 99.0
    return min(99.0, 10.0 * np.log10(peak**2 / mse))


def psnr_batch(x: np.ndarray, ref: np.ndarray, peak: float = 1.0) -> np.ndarray:
    return np.array([psnr(a, b, peak) for a, b in zip(np.atleast_2d(x), np.atleast_2d(ref))])


# Datasets


@dataclass
class ImageDataset:
    """Flat images in ``[0, 1]`` with their geometry and train/val tags."""

    images: np.ndarray
    shape: tuple[int, int]
    split: np.ndarray = field(default=None)
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=float).reshape(-1, self.shape[0] * self.shape[1])
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise ValueError("pixels must lie in [0, 1]")
        if self.split is None:
            self.split = np.array(["train"] * len(self.images))
        self.split = np.asarray(self.split, dtype="<U5")
        if self.split.shape != (len(self.images),):
            raise ValueError("one split tag per image")

    def __len__(self) -> int:
        return self.images.shape[0]

    def subset(self, idx) -> "ImageDataset":
        labels = None if self.labels is None else self.labels[idx]
        return ImageDataset(self.images[idx], self.shape, self.split[idx], labels)

    def part(self, tag: str) -> "ImageDataset":
        return self.subset(np.flatnonzero(self.split == tag))


class IdxError(ValueError):
    """Malformed IDX data; ``offset`` is the byte position of the problem."""

    def __init__(self, msg: str, offset: int):
        super().__init__(f"{msg} (byte offset {offset})")
        self.offset = offset


_IDX_TYPES = {0x08: np.uint8}


def read_idx(data: bytes, expect_ndim: int) -> np.ndarray:
    """Parse an IDX buffer of unsigned bytes with ``expect_ndim`` dimensions."""
    if len(data) < 4:
        raise IdxError("truncated magic number", len(data))
    zero, dtype_code, ndim = struct.unpack(">HBB", data[:4])
    if zero != 0 or dtype_code not in _IDX_TYPES or ndim != expect_ndim:
        raise IdxError(f"bad magic 0x{int.from_bytes(data[:4], 'big'):08x}", 0)
    head = 4 + 4 * ndim
    if len(data) < head:
        raise IdxError("truncated dimension header", len(data))
    dims = struct.unpack(f">{ndim}I", data[4:head])
    n = int(np.prod(dims))
    if len(data) < head + n:
        raise IdxError(f"truncated data: expected {n} bytes", len(data))
    if len(data) > head + n:
        raise IdxError("trailing bytes after data", head + n)
    return np.frombuffer(data, dtype=_IDX_TYPES[dtype_code], count=n, offset=head).reshape(dims)


def write_idx(path, array: np.ndarray):
    """Write an unsigned-byte array in IDX format."""
    array = np.asarray(array, dtype=np.uint8)
    header = struct.pack(">HBB", 0, 0x08, array.ndim) + struct.pack(f">{array.ndim}I", *array.shape)
    Path(path).write_bytes(header + array.tobytes())


def load_mnist_idx(images_path, labels_path=None, count: int | None = None, seed: int | None = None,
                   val_count: int = 0) -> ImageDataset:
    """Load IDX images (and labels), scaled to ``[0, 1]``.

    ``count`` training images and ``val_count`` validation images are drawn
    without replacement with ``default_rng(seed)`` (or taken in file order
    when ``seed`` is None).
    """
    imgs = read_idx(Path(images_path).read_bytes(), 3)
    labels = None
    if labels_path is not None:
        labels = read_idx(Path(labels_path).read_bytes(), 1)
        if labels.shape[0] != imgs.shape[0]:
            raise IdxError("label count differs from image count", 4)
    total = imgs.shape[0]
    count = total - val_count if count is None else count
    if count < 0 or val_count < 0 or count + val_count > total:
        raise ValueError(f"requested {count} + {val_count} images, file holds {total}")
    order = np.arange(total) if seed is None else np.random.default_rng(seed).permutation(total)
    idx = order[:count + val_count]
    split = np.array(["train"] * count + ["val"] * val_count)
    h, w = imgs.shape[1:]
    return ImageDataset(imgs[idx].reshape(len(idx), h * w) / 255.0, (h, w), split,
                        None if labels is None else labels[idx].astype(int))


def synth_dataset(n: int, size: int = 16, rng: np.random.Generator | int = 0, n_val: int = 0,
                  blobs: tuple[int, int] = (1, 3)) -> ImageDataset:
    """Images made of one to three Gaussian bumps, clipped to ``[0, 1]``.

    Bump centres are uniform on the grid, widths uniform in
    ``[size/12, size/6]`` and amplitudes uniform in ``[0.5, 1]``.
    """
    if n < 0 or n_val < 0 or size < 1:
        raise ValueError("counts must be nonnegative and size positive")
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    r = np.arange(size)
    total = n + n_val
    out = np.zeros((total, size, size))
    for i in range(total):
        for _ in range(rng.integers(blobs[0], blobs[1] + 1)):
            cy, cx = rng.uniform(0, size - 1, 2)
            width = rng.uniform(size / 12, size / 6)
            amp = rng.uniform(0.5, 1.0)
            out[i] += amp * np.exp(-((r[:, None] - cy) ** 2 + (r[None, :] - cx) ** 2) / (2 * width**2))
    np.clip(out, 0.0, 1.0, out=out)
    split = np.array(["train"] * n + ["val"] * n_val)
    return ImageDataset(out.reshape(total, size * size), (size, size), split)
