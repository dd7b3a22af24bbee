"""Synthetic multi-domain segmentation data.

Each sample is a soft-boundary ellipse on a textured background. Named domains
share the blob geometry (so the task is identical) and differ only in intensity
statistics: gamma contrast, a low-frequency multiplicative bias field, and
additive Gaussian noise. Training on the mild domain and evaluating on the
harsh one exhibits a real performance gap, which the ablation harness needs.
"""

import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import map_coordinates


class FormatError(ValueError):
    """A binary file failed magic, version, length, or checksum validation."""


# -- types ---------------------------------------------------------------------

@dataclass(frozen=True)
class Sample:
    """One image/mask pair: image (H, W) float64 z-scored, mask (H, W) int labels."""

    image: np.ndarray
    mask: np.ndarray


@dataclass(frozen=True)
class BlobConfig:
    """Foreground ellipse geometry. Radii are fractions of min(H, W)."""

    center_jitter: float = 6.0
    radius_lo: float = 0.18
    radius_hi: float = 0.30
    softness: float = 1.5

    def __post_init__(self):
        if not (0.0 < self.radius_lo <= self.radius_hi):
            raise ValueError(
                f"degenerate blob radii: lo={self.radius_lo} hi={self.radius_hi}")
        if self.softness <= 0.0:
            raise ValueError(f"boundary softness must be > 0, got {self.softness}")
        if self.center_jitter < 0.0:
            raise ValueError(f"center jitter must be >= 0, got {self.center_jitter}")


@dataclass(frozen=True)
class DomainConfig:
    """Intensity-statistics profile of one acquisition domain."""

    name: str
    noise_sigma: float
    bias_amplitude: float
    contrast_gamma: float
    blob: BlobConfig = field(default_factory=BlobConfig)
    seed: int = 0

    def __post_init__(self):
        if self.noise_sigma < 0.0:
            raise ValueError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if self.bias_amplitude < 0.0:
            raise ValueError(
                f"bias_amplitude must be >= 0, got {self.bias_amplitude}")
        if self.contrast_gamma <= 0.0:
            raise ValueError(
                f"contrast_gamma must be > 0, got {self.contrast_gamma}")


# A is the mild source domain; C is deliberately harsh (heavy noise, strong
# bias field, hard gamma) so the A-to-C shift is nontrivial.
DOMAINS = {
    "A": DomainConfig("A", noise_sigma=0.05, bias_amplitude=0.0,
                      contrast_gamma=1.0, seed=101),
    "B": DomainConfig("B", noise_sigma=0.10, bias_amplitude=0.2,
                      contrast_gamma=0.8, seed=202),
    "C": DomainConfig("C", noise_sigma=0.6, bias_amplitude=1.0,
                      contrast_gamma=2.2, seed=303),
    "D": DomainConfig("D", noise_sigma=0.15, bias_amplitude=0.4,
                      contrast_gamma=1.25, seed=404),
}

_BACKGROUND_LEVEL = 0.2
_FOREGROUND_CONTRAST = 0.8
_TEXTURE_AMPLITUDE = 0.08
_TEXTURE_GRID = 8


def zscore(image: np.ndarray) -> np.ndarray:
    """Normalize to mean 0, std 1. Constant images are rejected."""
    sd = float(image.std())
    if sd < 1e-12:
        raise ValueError("cannot z-score a constant image")
    return (image - image.mean()) / sd


def _upsample_bilinear(coarse: np.ndarray, h: int, w: int) -> np.ndarray:
    gi = np.linspace(0.0, coarse.shape[0] - 1.0, h)
    gj = np.linspace(0.0, coarse.shape[1] - 1.0, w)
    ii, jj = np.meshgrid(gi, gj, indexing="ij")
    return map_coordinates(coarse, [ii, jj], order=1, mode="nearest")


def _gen_sample(domain: DomainConfig, h: int, w: int,
                rng: np.random.Generator) -> Sample:
    blob = domain.blob
    scale = min(h, w)
    r_i, r_j = rng.uniform(blob.radius_lo, blob.radius_hi, size=2) * scale
    if max(r_i, r_j) + blob.center_jitter >= scale / 2.0:
        raise ValueError(
            f"blob cannot fit: radius {max(r_i, r_j):.1f}px + jitter "
            f"{blob.center_jitter:.1f}px exceeds half extent {scale / 2.0:.1f}px")
    ci = h / 2.0 + rng.uniform(-blob.center_jitter, blob.center_jitter)
    cj = w / 2.0 + rng.uniform(-blob.center_jitter, blob.center_jitter)
    theta = rng.uniform(0.0, np.pi)

    ii, jj = np.meshgrid(np.arange(h, dtype=float),
                         np.arange(w, dtype=float), indexing="ij")
    di, dj = ii - ci, jj - cj
    u = np.cos(theta) * di + np.sin(theta) * dj
    v = -np.sin(theta) * di + np.cos(theta) * dj
    radial = np.sqrt((u / r_i) ** 2 + (v / r_j) ** 2)
    mask = (radial <= 1.0).astype(np.int64)

    # Signed boundary distance in pixels, softened into [0, 1].
    dist = (1.0 - radial) * np.sqrt(r_i * r_j)
    fg = 1.0 / (1.0 + np.exp(-dist / blob.softness))

    texture = _upsample_bilinear(
        rng.standard_normal((_TEXTURE_GRID, _TEXTURE_GRID)), h, w)
    img = _BACKGROUND_LEVEL + _TEXTURE_AMPLITUDE * texture \
        + _FOREGROUND_CONTRAST * fg

    # Domain transform: gamma contrast, multiplicative bias field, noise.
    img = np.clip(img, 0.0, None) ** domain.contrast_gamma
    if domain.bias_amplitude > 0.0:
        fi, fj = rng.uniform(0.5, 1.5, size=2)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        bias = np.cos(2.0 * np.pi * (fi * ii / h + fj * jj / w) + phase)
        img = img * (1.0 + domain.bias_amplitude * bias)
    if domain.noise_sigma > 0.0:
        img = img + rng.normal(0.0, domain.noise_sigma, size=(h, w))

    return Sample(image=zscore(img), mask=mask)


def gen_dataset(domain: DomainConfig, n: int,
                rng: np.random.Generator | None = None,
                image_size: tuple[int, int] = (64, 64)) -> list[Sample]:
    """Generate n samples; pure function of (domain, n, seed)."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    h, w = image_size
    if rng is None:
        rng = np.random.default_rng(domain.seed)
    return [_gen_sample(domain, h, w, rng) for _ in range(n)]


# -- augmentation -----------------------------------------------------------------

@dataclass(frozen=True)
class AugmentConfig:
    rotation_deg: float = 10.0
    translate_frac: float = 0.05
    elastic_sigma: float = 1.5
    elastic_grid: int = 4
    noise_sigma: float = 0.02


def _rot_matrix(angle_deg: float) -> np.ndarray:
    a = np.deg2rad(angle_deg)
    return np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]])


def affine_warp(arr: np.ndarray, angle_deg: float,
                translate: tuple[float, float], order: int) -> np.ndarray:
    """Pull-map warped[o] = arr[R(angle) (o - c) + c + t] about the image center.

    order=1 bilinear with edge replication (images), order=0 nearest with
    zero fill (label masks).
    """
    h, w = arr.shape
    c0, c1 = (h - 1) / 2.0, (w - 1) / 2.0
    ii, jj = np.meshgrid(np.arange(h, dtype=float),
                         np.arange(w, dtype=float), indexing="ij")
    rot = _rot_matrix(angle_deg)
    di, dj = ii - c0, jj - c1
    src_i = rot[0, 0] * di + rot[0, 1] * dj + c0 + translate[0]
    src_j = rot[1, 0] * di + rot[1, 1] * dj + c1 + translate[1]
    mode = "nearest" if order >= 1 else "constant"
    out = map_coordinates(arr.astype(float), [src_i, src_j],
                          order=order, mode=mode, cval=0.0)
    return out.astype(arr.dtype) if order == 0 else out


def invert_affine(angle_deg: float,
                  translate: tuple[float, float]) -> tuple[float, tuple[float, float]]:
    """Parameters (angle', t') such that warping twice is the identity map."""
    t_inv = -_rot_matrix(-angle_deg) @ np.asarray(translate, dtype=float)
    return -angle_deg, (float(t_inv[0]), float(t_inv[1]))


def _elastic_displacement(h: int, w: int, cfg: AugmentConfig,
                          rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    g = cfg.elastic_grid
    coarse_i = rng.normal(0.0, cfg.elastic_sigma, size=(g, g))
    coarse_j = rng.normal(0.0, cfg.elastic_sigma, size=(g, g))
    return _upsample_bilinear(coarse_i, h, w), _upsample_bilinear(coarse_j, h, w)


def _displace(arr: np.ndarray, disp_i: np.ndarray, disp_j: np.ndarray,
              order: int) -> np.ndarray:
    h, w = arr.shape
    ii, jj = np.meshgrid(np.arange(h, dtype=float),
                         np.arange(w, dtype=float), indexing="ij")
    mode = "nearest" if order >= 1 else "constant"
    out = map_coordinates(arr.astype(float), [ii + disp_i, jj + disp_j],
                          order=order, mode=mode, cval=0.0)
    return out.astype(arr.dtype) if order == 0 else out


def augment(sample: Sample, rng: np.random.Generator,
            cfg: AugmentConfig | None = None) -> Sample:
    """Random small affine + elastic warp + noise; image and mask move together.

    A zero-magnitude config is the exact identity.
    """
    if cfg is None:
        cfg = AugmentConfig()
    img, mask = sample.image, sample.mask
    h, w = img.shape
    changed = False

    angle = rng.uniform(-cfg.rotation_deg, cfg.rotation_deg)
    t_i = rng.uniform(-cfg.translate_frac, cfg.translate_frac) * h
    t_j = rng.uniform(-cfg.translate_frac, cfg.translate_frac) * w
    if angle != 0.0 or t_i != 0.0 or t_j != 0.0:
        img = affine_warp(img, angle, (t_i, t_j), order=1)
        mask = affine_warp(mask, angle, (t_i, t_j), order=0)
        changed = True

    if cfg.elastic_sigma > 0.0:
        disp_i, disp_j = _elastic_displacement(h, w, cfg, rng)
        img = _displace(img, disp_i, disp_j, order=1)
        mask = _displace(mask, disp_i, disp_j, order=0)
        changed = True

    if cfg.noise_sigma > 0.0:
        img = img + rng.normal(0.0, cfg.noise_sigma, size=img.shape)
        changed = True

    if not changed:
        return sample
    return Sample(image=zscore(img), mask=mask)


# -- metrics ----------------------------------------------------------------------

def dice_score(pred: np.ndarray, gt: np.ndarray, k: int = 1) -> float:
    """2 |P intersect G| / (|P| + |G|) for class k; 1.0 when both sets are empty."""
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    p = pred == k
    g = gt == k
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / denom


# -- persistence --------------------------------------------------------------------

_DATASET_MAGIC = b"DBFD"
_DATASET_VERSION = 1
_HEADER = struct.Struct("<4sHIHHB")  # magic, version, n, H, W, K


def dataset_save(samples: list[Sample], path: str | Path,
                 num_classes: int | None = None) -> None:
    """Write magic + header + per-sample f64 image / u8 mask + CRC32 trailer."""
    if not samples:
        raise ValueError("refusing to save an empty dataset")
    h, w = samples[0].image.shape
    max_label = max(int(s.mask.max()) for s in samples)
    k = num_classes if num_classes is not None else max_label + 1
    if not (0 < k <= 255):
        raise ValueError(f"num_classes must be in [1, 255], got {k}")
    if max_label >= k:
        raise ValueError(f"mask label {max_label} >= num_classes {k}")

    buf = bytearray(_HEADER.pack(_DATASET_MAGIC, _DATASET_VERSION,
                                 len(samples), h, w, k))
    for s in samples:
        if s.image.shape != (h, w) or s.mask.shape != (h, w):
            raise ValueError(
                f"inconsistent sample shape: {s.image.shape} vs {(h, w)}")
        buf += np.ascontiguousarray(s.image, dtype="<f8").tobytes()
        buf += np.ascontiguousarray(s.mask, dtype=np.uint8).tobytes()
    buf += struct.pack("<I", zlib.crc32(bytes(buf)))
    Path(path).write_bytes(bytes(buf))


def dataset_load(path: str | Path) -> list[Sample]:
    """Inverse of dataset_save with full validation."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size + 4:
        raise FormatError(f"file too short ({len(raw)} bytes): {path}")
    magic, version, n, h, w, k = _HEADER.unpack_from(raw)
    if magic != _DATASET_MAGIC:
        raise FormatError(
            f"bad magic: expected {_DATASET_MAGIC!r}, found {magic!r}")
    if version != _DATASET_VERSION:
        raise FormatError(
            f"unsupported version: expected {_DATASET_VERSION}, found {version}")
    expected = _HEADER.size + n * (h * w * 9) + 4
    if len(raw) != expected:
        raise FormatError(
            f"truncated or oversized file: expected {expected} bytes, "
            f"found {len(raw)}")
    (stored_crc,) = struct.unpack_from("<I", raw, len(raw) - 4)
    actual_crc = zlib.crc32(raw[:-4])
    if stored_crc != actual_crc:
        raise FormatError(
            f"checksum mismatch: stored {stored_crc:#010x}, "
            f"computed {actual_crc:#010x}")

    samples = []
    offset = _HEADER.size
    for _ in range(n):
        img = np.frombuffer(raw, dtype="<f8", count=h * w,
                            offset=offset).reshape(h, w).copy()
        offset += h * w * 8
        mask = np.frombuffer(raw, dtype=np.uint8, count=h * w,
                             offset=offset).reshape(h, w).astype(np.int64)
        offset += h * w
        if mask.max(initial=0) >= k:
            raise FormatError(f"mask label {mask.max()} >= declared K {k}")
        samples.append(Sample(image=img, mask=mask))
    return samples


def dataset_meta(path: str | Path) -> tuple[int, int, int, int]:
    """Header fields (n, H, W, K) without loading sample payloads."""
    with open(path, "rb") as f:
        head = f.read(_HEADER.size)
    if len(head) < _HEADER.size:
        raise FormatError(f"file too short ({len(head)} bytes): {path}")
    magic, version, n, h, w, k = _HEADER.unpack(head)
    if magic != _DATASET_MAGIC:
        raise FormatError(
            f"bad magic: expected {_DATASET_MAGIC!r}, found {magic!r}")
    if version != _DATASET_VERSION:
        raise FormatError(
            f"unsupported version: expected {_DATASET_VERSION}, found {version}")
    return n, h, w, k


def pgm_write(arr: np.ndarray, path: str | Path) -> None:
    """Dump a 2D array as binary PGM (P5, maxval 255), min-max scaled."""
    if arr.ndim != 2:
        raise ValueError(f"PGM dump needs a 2D array, got shape {arr.shape}")
    a = np.asarray(arr, dtype=float)
    lo, hi = float(a.min()), float(a.max())
    if hi - lo < 1e-12:
        scaled = np.zeros(a.shape, dtype=np.uint8)
    else:
        scaled = np.round((a - lo) / (hi - lo) * 255.0).astype(np.uint8)
    header = f"P5\n{a.shape[1]} {a.shape[0]}\n255\n".encode("ascii")
    Path(path).write_bytes(header + scaled.tobytes())
