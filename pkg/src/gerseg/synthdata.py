"""Synthetic segmentation corpus: bright deformed-ellipse blobs on a textured
background, with exact analytic masks, plus 16-bit PGM image I/O.

The corpus is a pure function of its config: every image derives its own
generator from (seed, image index), so corpora are reproducible and images
can be generated in any order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError


@dataclass(frozen=True)
class SynthConfig:
    n_images: int = 250
    image_size: int = 64
    blobs_min: int = 1
    blobs_max: int = 3
    radius_min: float = 5.0
    radius_max: float = 14.0
    fg_mean: float = 0.75
    bg_mean: float = 0.35
    noise_sigma: float = 0.10
    seed: int = 7

    def __post_init__(self):
        if self.n_images < 0:
            raise ConfigError("n_images must be >= 0")
        if self.image_size < 8 or self.image_size % 8:
            raise ConfigError("image_size must be a positive multiple of 8")
        if not (0 < self.radius_min <= self.radius_max):
            raise ConfigError("need 0 < radius_min <= radius_max")
        if self.radius_max >= self.image_size / 2:
            raise ConfigError("radius_max must be below image_size/2")
        if not (1 <= self.blobs_min <= self.blobs_max):
            raise ConfigError("need 1 <= blobs_min <= blobs_max")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")


@dataclass(frozen=True)
class Blob:
    center: tuple[float, float]        # (row, col)
    axes: tuple[float, float]          # semi-axes before rotation
    quarter_turns: int                 # orientation in 90-degree steps
    wobble: tuple[tuple[float, float, float], ...]  # (amplitude, frequency, phase)


@dataclass
class Sample:
    id: str
    image: np.ndarray   # [1, H, W] float64
    mask: np.ndarray    # [H, W] uint8
    blobs: tuple[Blob, ...] | None = None


def blob_interior(blob: Blob, size: int) -> np.ndarray:
    """Exact analytic interior of one deformed ellipse on the pixel grid."""
    yy, xx = np.meshgrid(np.arange(size, dtype=np.float64),
                         np.arange(size, dtype=np.float64), indexing="ij")
    dy = yy - blob.center[0]
    dx = xx - blob.center[1]
    for _ in range(blob.quarter_turns % 4):
        dy, dx = -dx, dy
    a, b = blob.axes
    rho = np.ones_like(dy)
    theta = np.arctan2(dx, dy)
    for amp, freq, phase in blob.wobble:
        rho += amp * np.cos(freq * theta + phase)
    return (dy / a) ** 2 + (dx / b) ** 2 <= rho ** 2


def _make_blobs(rng: np.random.Generator, cfg: SynthConfig) -> tuple[Blob, ...]:
    count = int(rng.integers(cfg.blobs_min, cfg.blobs_max + 1))
    blobs = []
    for _ in range(count):
        r = float(rng.uniform(cfg.radius_min, cfg.radius_max))
        lo, hi = r, cfg.image_size - 1 - r
        center = (float(rng.uniform(lo, hi)), float(rng.uniform(lo, hi)))
        axes = (r, r * float(rng.uniform(0.6, 1.0)))
        quarter_turns = int(rng.integers(0, 4))
        wobble = tuple(
            (float(rng.uniform(0.0, 0.12)), int(f), float(rng.uniform(0, 2 * math.pi)))
            for f in (2, 3)
        )
        blobs.append(Blob(center, axes, quarter_turns, wobble))
    return tuple(blobs)


def _background(rng: np.random.Generator, cfg: SynthConfig) -> np.ndarray:
    size = cfg.image_size
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    tex = np.full((size, size), cfg.bg_mean)
    for _ in range(3):
        fy, fx = rng.integers(1, 5, size=2)
        phase = rng.uniform(0, 2 * math.pi)
        amp = rng.uniform(0.02, 0.06)
        tex += amp * np.cos(2 * math.pi * (fy * yy + fx * xx) / size + phase)
    return tex


def generate_sample(cfg: SynthConfig, index: int) -> Sample:
    rng = np.random.default_rng([cfg.seed, 0xDA7A, index])
    blobs = _make_blobs(rng, cfg)
    mask = np.zeros((cfg.image_size, cfg.image_size), dtype=bool)
    for blob in blobs:
        mask |= blob_interior(blob, cfg.image_size)
    image = _background(rng, cfg)
    image[mask] += cfg.fg_mean - cfg.bg_mean
    image += rng.normal(0.0, cfg.noise_sigma, size=image.shape)
    return Sample(
        id=f"s{index:04d}",
        image=image[None].astype(np.float64),
        mask=mask.astype(np.uint8),
        blobs=blobs,
    )


def generate(cfg: SynthConfig) -> list[Sample]:
    return [generate_sample(cfg, i) for i in range(cfg.n_images)]


def split(corpus: list, train_frac: float, seed: int):
    """Shuffled (train, val, test): train_frac to train, the rest split evenly."""
    if not (0 < train_frac < 1):
        raise ConfigError("train_frac must be in (0, 1)")
    order = np.random.default_rng([seed, 0x539]).permutation(len(corpus))
    n_train = int(round(train_frac * len(corpus)))
    rest = len(corpus) - n_train
    n_val = rest // 2
    train = [corpus[i] for i in order[:n_train]]
    val = [corpus[i] for i in order[n_train : n_train + n_val]]
    test = [corpus[i] for i in order[n_train + n_val :]]
    return train, val, test


# -- PGM i/o ------------------------------------------------------------------

_PGM_MAX = 65535


def write_pgm(path, plane: np.ndarray):
    """16-bit binary PGM; intensities mapped affinely from [min, max] to
    [0, 65535], the range recorded in a header comment for exact readback."""
    if plane.ndim != 2:
        raise DataError(f"PGM writer expects a 2-D array, got {plane.shape}")
    lo, hi = float(plane.min()), float(plane.max())
    if hi > lo:
        quant = np.rint((plane - lo) / (hi - lo) * _PGM_MAX).astype(">u2")
    else:
        quant = np.zeros(plane.shape, dtype=">u2")
    header = f"P5\n# range {lo!r} {hi!r}\n{plane.shape[1]} {plane.shape[0]}\n{_PGM_MAX}\n"
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(quant.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read a PGM written by write_pgm back into float64 intensities."""
    with open(path, "rb") as f:
        data = f.read()
    tokens: list[bytes] = []
    lo = hi = None
    pos = 0
    while len(tokens) < 4:
        if pos >= len(data):
            raise DataError(f"{path}: truncated PGM header")
        line, _, rest = data[pos:].partition(b"\n")
        pos += len(line) + 1
        if line.startswith(b"#"):
            parts = line.split()
            if len(parts) == 4 and parts[1] == b"range":
                lo, hi = float(parts[2]), float(parts[3])
            continue
        tokens += line.split()
    if tokens[0] != b"P5":
        raise DataError(f"{path}: not a binary PGM (P5) file")
    try:
        width, height, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    except ValueError as e:
        raise DataError(f"{path}: malformed PGM header") from e
    if maxval != _PGM_MAX:
        raise DataError(f"{path}: expected 16-bit PGM with maxval {_PGM_MAX}")
    raw = data[pos : pos + 2 * width * height]
    if len(raw) != 2 * width * height:
        raise DataError(f"{path}: truncated PGM pixel data")
    quant = np.frombuffer(raw, dtype=">u2").reshape(height, width).astype(np.float64)
    if lo is None:
        return quant
    if hi == lo:
        return np.full((height, width), lo)
    return lo + quant / _PGM_MAX * (hi - lo)


# -- corpus on disk -----------------------------------------------------------

SPLITS = ("train", "val", "test")


def save_corpus(splits: dict[str, list[Sample]], root):
    """Layout: root/{split}/{id}.img.pgm + {id}.mask.pgm and root/manifest.tsv."""
    import os

    lines = ["id\tsplit\tblobs"]
    for split_name in SPLITS:
        os.makedirs(os.path.join(root, split_name), exist_ok=True)
        for s in splits.get(split_name, []):
            write_pgm(os.path.join(root, split_name, f"{s.id}.img.pgm"), s.image[0])
            write_pgm(os.path.join(root, split_name, f"{s.id}.mask.pgm"),
                      s.mask.astype(np.float64))
            lines.append(f"{s.id}\t{split_name}\t{len(s.blobs) if s.blobs else 0}")
    with open(os.path.join(root, "manifest.tsv"), "w") as f:
        f.write("\n".join(lines) + "\n")


def load_corpus(root) -> dict[str, list[Sample]]:
    import os

    manifest = os.path.join(root, "manifest.tsv")
    if not os.path.exists(manifest):
        raise DataError(f"no manifest.tsv under {root}")
    out: dict[str, list[Sample]] = {s: [] for s in SPLITS}
    with open(manifest) as f:
        header = f.readline().strip()
        if header != "id\tsplit\tblobs":
            raise DataError(f"{manifest}: unexpected header {header!r}")
        for line in f:
            sid, split_name, _ = line.strip().split("\t")
            img = read_pgm(os.path.join(root, split_name, f"{sid}.img.pgm"))
            msk = read_pgm(os.path.join(root, split_name, f"{sid}.mask.pgm"))
            out[split_name].append(
                Sample(id=sid, image=img[None], mask=msk.astype(np.uint8))
            )
    return out
