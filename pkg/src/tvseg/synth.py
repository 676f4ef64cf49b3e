"""Synthetic cell images (background / cytoplasm / nucleus), noise models,
the noisy-training corruption protocol, and minimal PPM/PGM file I/O.

Each sample is a purple-tinted cell on a textured light background with a
few reddish distractor blobs: an ellipse of cytoplasm containing a darker
nucleus ellipse, with smooth shading.  The label map is computed from the
same geometry that renders the image, so ground truth is exact by
construction.  Generation and noising are deterministic per seed and
independent across samples.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

BACKGROUND, CYTOPLASM, NUCLEUS = 0, 1, 2

_BG_COLOR = np.array([0.80, 0.715, 0.815])
_CYTO_COLOR = np.array([0.70, 0.585, 0.785])
_NUCLEUS_COLOR = np.array([0.58, 0.45, 0.70])
_DISTRACTOR_COLOR = np.array([0.76, 0.615, 0.69])


@dataclass
class Sample:
    """One image/label pair; image is (3, N, N) in [0, 1], label is (N, N)."""

    image: np.ndarray
    label: np.ndarray


class NetpbmError(ValueError):
    """Base class for PPM/PGM file problems."""


class NetpbmHeaderError(NetpbmError):
    pass


class NetpbmPayloadError(NetpbmError):
    pass


class NetpbmMaxvalError(NetpbmError):
    pass


def _smooth_noise(rng, size, cells=8):
    """Low-frequency random field in [-1, 1] via bilinear upsampling of a
    coarse grid."""
    coarse = rng.uniform(-1.0, 1.0, size=(cells + 1, cells + 1))
    t = np.linspace(0.0, cells, size)
    i0 = np.minimum(t.astype(int), cells - 1)
    frac = t - i0
    rows = (coarse[i0, :] * (1 - frac)[:, None] + coarse[i0 + 1, :] * frac[:, None])
    return rows[:, i0] * (1 - frac)[None, :] + rows[:, i0 + 1] * frac[None, :]


def _ellipse(size, cx, cy, a, b, theta):
    """Boolean mask and normalized squared radius of a rotated ellipse."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dx, dy = xx - cx, yy - cy
    c, s = np.cos(theta), np.sin(theta)
    u = (c * dx + s * dy) / a
    v = (-s * dx + c * dy) / b
    r2 = u * u + v * v
    return r2 <= 1.0, r2


def _erode(mask):
    """4-neighborhood erosion with a False border."""
    er = mask.copy()
    er[1:, :] &= mask[:-1, :]
    er[:-1, :] &= mask[1:, :]
    er[:, 1:] &= mask[:, :-1]
    er[:, :-1] &= mask[:, 1:]
    er[0, :] = er[-1, :] = False
    er[:, 0] = er[:, -1] = False
    return er


def _render_cell(rng, size):
    """One attempt at a sample; returns None for degenerate geometry."""
    cx, cy = rng.uniform(0.40, 0.60, size=2) * size
    a = rng.uniform(0.22, 0.32) * size
    b = rng.uniform(0.22, 0.32) * size
    theta = rng.uniform(0.0, np.pi)
    cyto, cyto_r2 = _ellipse(size, cx, cy, a, b, theta)

    shrink = rng.uniform(0.50, 0.66)
    off = rng.uniform(-0.15, 0.15, size=2) * min(a, b)
    n_theta = rng.uniform(0.0, np.pi)
    nucleus, nuc_r2 = _ellipse(size, cx + off[0], cy + off[1],
                               shrink * a, shrink * b, n_theta)

    if not (nucleus & ~_erode(cyto)).sum() == 0:
        return None  # nucleus touches the cytoplasm boundary
    label = np.full((size, size), BACKGROUND, dtype=np.int64)
    label[cyto] = CYTOPLASM
    label[nucleus] = NUCLEUS
    counts = np.bincount(label.ravel(), minlength=3)
    if counts.min() == 0 or not (counts[0] > counts[1] > counts[2]):
        return None

    # class appearances deliberately overlap: smooth shading, texture and a
    # per-sample tint move pixel colors a good part of the class separation,
    # so heavier pixel noise produces genuine misclassification speckle
    tint = rng.uniform(-0.04, 0.04, size=3)
    image = np.empty((3, size, size))
    texture = _smooth_noise(rng, size)
    image[:] = _BG_COLOR[:, None, None] + 0.07 * texture[None]
    for _ in range(rng.integers(2, 6)):
        dc = rng.uniform(0.0, 1.0, size=2) * size
        dr = rng.uniform(0.04, 0.09) * size
        blob, blob_r2 = _ellipse(size, dc[0], dc[1], dr, dr * rng.uniform(0.7, 1.3),
                                 rng.uniform(0, np.pi))
        blob &= ~cyto
        shade = 1.0 - 0.20 * np.clip(blob_r2, 0.0, 1.0)
        image[:, blob] = (_DISTRACTOR_COLOR[:, None] * shade[None, blob])

    cyto_shade = 1.0 - 0.10 * np.clip(cyto_r2, 0.0, 1.0) + 0.07 * texture
    image[:, cyto] = _CYTO_COLOR[:, None] * cyto_shade[None, cyto]
    nuc_shade = 1.0 - 0.12 * np.clip(nuc_r2, 0.0, 1.0) + 0.07 * texture
    image[:, nucleus] = _NUCLEUS_COLOR[:, None] * nuc_shade[None, nucleus]
    image += tint[:, None, None]
    image += 0.02 * rng.normal(size=image.shape)  # sensor grain
    return Sample(image=np.clip(image, 0.0, 1.0), label=label)


def generate_cells(count: int, size: int, seed: int):
    """Deterministic list of synthetic cell samples."""
    if size < 32 or size % 4:
        raise ValueError(f"size must be >= 32 and divisible by 4, got {size}")
    samples = []
    for i in range(count):
        rng = np.random.default_rng([seed, i])
        sample = None
        while sample is None:
            sample = _render_cell(rng, size)
        samples.append(sample)
    return samples


# ---------------------------------------------------------------------------
# noise models

def add_gaussian_noise(image: np.ndarray, sigma: float, seed: int) -> np.ndarray:
    """I.i.d. zero-mean gaussian perturbation, clipped back to [0, 1]."""
    if sigma == 0.0:
        return image.copy()
    rng = np.random.default_rng(seed)
    return np.clip(image + rng.normal(0.0, sigma, size=image.shape), 0.0, 1.0)


def add_salt_pepper(image: np.ndarray, fraction: float, kind: str,
                    seed: int) -> np.ndarray:
    """Set floor(fraction * N1 * N2) whole pixels to 1 (salt), 0 (pepper) or
    an even split (both), across all channels."""
    if kind not in ("salt", "pepper", "both"):
        raise ValueError(f"kind must be salt, pepper or both, got {kind!r}")
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"fraction must lie in [0, 1], got {fraction}")
    _, n1, n2 = image.shape
    k = int(fraction * n1 * n2)
    out = image.copy()
    if k == 0:
        return out
    rng = np.random.default_rng(seed)
    flat = rng.choice(n1 * n2, size=k, replace=False)
    rows, cols = flat // n2, flat % n2
    if kind == "both":
        half = k // 2
        out[:, rows[:half], cols[:half]] = 1.0
        out[:, rows[half:], cols[half:]] = 0.0
    else:
        out[:, rows, cols] = 1.0 if kind == "salt" else 0.0
    return out


def corrupt_training_subset(dataset, subset_count: int, seed: int):
    """Noisy-training protocol: corrupt a random subset, each sample getting
    either gaussian sigma=0.05 or 1% salt-and-pepper, chosen uniformly."""
    if subset_count > len(dataset):
        raise ValueError(f"subset_count {subset_count} exceeds dataset size "
                         f"{len(dataset)}")
    rng = np.random.default_rng(seed)
    chosen = set(rng.choice(len(dataset), size=subset_count, replace=False).tolist())
    out = []
    for i, sample in enumerate(dataset):
        if i in chosen:
            sub_seed = int(rng.integers(0, 2 ** 31))
            if rng.integers(0, 2) == 0:
                image = add_gaussian_noise(sample.image, 0.05, sub_seed)
            else:
                image = add_salt_pepper(sample.image, 0.01, "both", sub_seed)
            out.append(Sample(image=image, label=sample.label.copy()))
        else:
            out.append(Sample(image=sample.image.copy(),
                              label=sample.label.copy()))
    return out


# ---------------------------------------------------------------------------
# netpbm I/O: binary PPM (P6) for images, binary PGM (P5) for label maps,
# both with maxval 255

def _parse_netpbm_header(blob, magic, path):
    if blob[:2] != magic:
        raise NetpbmHeaderError(f"{path}: expected {magic.decode()} magic, "
                                f"got {blob[:2]!r}")
    fields = []
    pos = 2
    while len(fields) < 3:
        if pos >= len(blob):
            raise NetpbmHeaderError(f"{path}: truncated header")
        ch = blob[pos:pos + 1]
        if ch.isspace():
            pos += 1
        elif ch == b"#":
            pos = blob.find(b"\n", pos)
            if pos < 0:
                raise NetpbmHeaderError(f"{path}: unterminated header comment")
        elif ch.isdigit():
            end = pos
            while end < len(blob) and blob[end:end + 1].isdigit():
                end += 1
            fields.append(int(blob[pos:end]))
            pos = end
        else:
            raise NetpbmHeaderError(f"{path}: unexpected byte {ch!r} in header")
    width, height, maxval = fields
    if maxval != 255:
        raise NetpbmMaxvalError(f"{path}: only maxval 255 supported, got {maxval}")
    return width, height, pos + 1  # payload starts after one whitespace byte


def write_ppm(path, image: np.ndarray) -> None:
    """Binary PPM, values scaled by 255 and rounded to nearest."""
    _, h, w = image.shape
    data = np.rint(image * 255.0).astype(np.uint8).transpose(1, 2, 0)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(data.tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    w, h, start = _parse_netpbm_header(blob, b"P6", path)
    need = 3 * w * h
    payload = blob[start:start + need]
    if len(payload) < need:
        raise NetpbmPayloadError(f"{path}: payload has {len(payload)} bytes, "
                                 f"needs {need}")
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3)
    return pixels.transpose(2, 0, 1).astype(np.float64) / 255.0


def write_pgm(path, label: np.ndarray) -> None:
    """Binary PGM holding raw class indices."""
    h, w = label.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(label.astype(np.uint8).tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    w, h, start = _parse_netpbm_header(blob, b"P5", path)
    need = w * h
    payload = blob[start:start + need]
    if len(payload) < need:
        raise NetpbmPayloadError(f"{path}: payload has {len(payload)} bytes, "
                                 f"needs {need}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w).astype(np.int64)


# ---------------------------------------------------------------------------
# dataset directory layout: images/NNNN.ppm, labels/NNNN.pgm, manifest.txt

def save_dataset(root, samples, manifest: dict) -> None:
    img_dir = os.path.join(root, "images")
    lab_dir = os.path.join(root, "labels")
    os.makedirs(img_dir, exist_ok=True)
    os.makedirs(lab_dir, exist_ok=True)
    for i, sample in enumerate(samples):
        write_ppm(os.path.join(img_dir, f"{i:04d}.ppm"), sample.image)
        write_pgm(os.path.join(lab_dir, f"{i:04d}.pgm"), sample.label)
    with open(os.path.join(root, "manifest.txt"), "w") as fh:
        for key, value in manifest.items():
            fh.write(f"{key}={value}\n")


def load_manifest(root) -> dict:
    manifest = {}
    with open(os.path.join(root, "manifest.txt")) as fh:
        for line in fh:
            line = line.strip()
            if line and "=" in line:
                key, value = line.split("=", 1)
                manifest[key] = value
    return manifest


def load_dataset(root, indices=None):
    """Samples from a dataset directory, optionally a subset by index."""
    manifest = load_manifest(root)
    if indices is None:
        indices = range(int(manifest["count"]))
    samples = []
    for i in indices:
        image = read_ppm(os.path.join(root, "images", f"{i:04d}.ppm"))
        label = read_pgm(os.path.join(root, "labels", f"{i:04d}.pgm"))
        samples.append(Sample(image=image, label=label))
    return samples, manifest
