"""Synthetic hyperspectral scenes and the observation/degradation model.

A ground-truth cube Y (H, W, M) spawns the two network inputs:

* the low-spatial-resolution cube  X_h = spatial_degrade(Y): per-band
  Gaussian blur followed by block-average decimation by the scale factor;
* the low-spectral-resolution image X_m = spectral_degrade(Y): each pixel
  spectrum mapped through a row-stochastic band-response matrix D.

Synthetic scenes are linear mixtures of a few smooth spectral signatures
weighted by smooth, softmax-normalized abundance fields, so spectra carry
angular structure worth reconstructing.  Everything is deterministic given
(spec, seed).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, UsageError


@dataclass
class HsiCube:
    """An H x W x M image cube; clean cubes keep values in [0, 1]."""

    data: np.ndarray
    band_ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise DimensionError(f"HsiCube needs (H, W, M) data, got shape {self.data.shape}")
        if self.data.dtype not in (np.float32, np.float64):
            self.data = self.data.astype(np.float32)
        if min(self.data.shape) < 1:
            raise DimensionError(f"HsiCube extents must be >= 1, got {self.data.shape}")
        if not self.band_ids:
            self.band_ids = [f"b{i:03d}" for i in range(self.data.shape[2])]
        elif len(self.band_ids) != self.data.shape[2]:
            raise DimensionError(
                f"{len(self.band_ids)} band ids for {self.data.shape[2]} bands"
            )

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def bands(self) -> int:
        return self.data.shape[2]


@dataclass
class SyntheticSceneSpec:
    """Recipe for one synthetic scene."""

    num_endmembers: int = 4
    spectral_smoothness: float = 4.0  # Gaussian sigma along the band axis
    blob_scale: float = 8.0           # Gaussian sigma of the abundance fields, pixels
    seed: int = 0

    def __post_init__(self):
        if self.num_endmembers < 1:
            raise UsageError("num_endmembers must be >= 1")


@dataclass
class DegradationConfig:
    """Blur + decimation (spatial) and band-response matrix (spectral)."""

    blur_sigma: float
    blur_kernel_size: int
    decimation: int
    spectral_response: np.ndarray

    def __post_init__(self):
        if self.blur_kernel_size < 1 or self.blur_kernel_size % 2 == 0:
            raise UsageError(f"blur_kernel_size must be odd and >= 1, got {self.blur_kernel_size}")
        if self.decimation < 1:
            raise UsageError(f"decimation must be >= 1, got {self.decimation}")
        d = np.asarray(self.spectral_response, dtype=np.float64)
        if d.ndim != 2:
            raise DimensionError(f"spectral_response must be 2-D, got shape {d.shape}")
        if np.any(d < 0) or not np.allclose(d.sum(axis=1), 1.0, atol=1e-6):
            raise UsageError("spectral_response rows must be nonnegative and sum to 1")
        self.spectral_response = d

    @classmethod
    def for_scale(cls, scale: int, bands: int, msi_bands: int) -> "DegradationConfig":
        """Standard setup: sigma = scale/2, kernel size 2*ceil(3*sigma)+1,
        contiguous boxcar band response."""
        sigma = scale / 2.0
        size = 2 * math.ceil(3.0 * sigma) + 1
        return cls(
            blur_sigma=sigma,
            blur_kernel_size=size,
            decimation=scale,
            spectral_response=build_spectral_response(bands, msi_bands),
        )


def gaussian_kernel(sigma: float, size: int) -> np.ndarray:
    """Normalized 1-D Gaussian taps (sum == 1)."""
    if size % 2 == 0:
        raise UsageError("kernel size must be odd")
    c = size // 2
    x = np.arange(size, dtype=np.float64) - c
    k = np.exp(-0.5 * (x / max(sigma, 1e-12)) ** 2)
    return k / k.sum()


def _correlate1d(arr: np.ndarray, kernel: np.ndarray, axis: int) -> np.ndarray:
    """Separable correlation with half-sample symmetric boundary handling."""
    r = len(kernel) // 2
    if r == 0:
        return arr * kernel[0]
    pad = [(0, 0)] * arr.ndim
    pad[axis] = (r, r)
    ap = np.pad(arr, pad, mode="symmetric")
    win = sliding_window_view(ap, len(kernel), axis=axis)
    return win @ kernel


def gaussian_blur(data: np.ndarray, sigma: float, size: int) -> np.ndarray:
    """Per-band isotropic Gaussian blur of an (H, W, ...) array."""
    k = gaussian_kernel(sigma, size)
    out = _correlate1d(data.astype(np.float64, copy=False), k, axis=0)
    return _correlate1d(out, k, axis=1)


def block_mean(data: np.ndarray, factor: int) -> np.ndarray:
    """Average non-overlapping factor x factor blocks of an (H, W, M) array."""
    h, w = data.shape[:2]
    if h % factor or w % factor:
        raise DimensionError(f"decimation factor {factor} does not divide extents {h}x{w}")
    shaped = data.reshape(h // factor, factor, w // factor, factor, *data.shape[2:])
    return shaped.mean(axis=(1, 3))


# ---------------------------------------------------------------------------
# synthetic scenes
# ---------------------------------------------------------------------------

def synthesize_components(spec: SyntheticSceneSpec, h: int, w: int, m: int):
    """The mixing ingredients: (signatures (k, M), abundances (H, W, k),
    brightness (H, W)).  Abundances sum to 1 at every pixel."""
    rng = np.random.default_rng(spec.seed)
    k = spec.num_endmembers

    sig = rng.standard_normal((k, m))
    sig = _correlate1d(sig, gaussian_kernel(spec.spectral_smoothness, _odd(6 * spec.spectral_smoothness)), axis=1)
    lo = rng.uniform(0.05, 0.25, size=(k, 1))
    hi = rng.uniform(0.55, 0.95, size=(k, 1))
    span = sig.max(axis=1, keepdims=True) - sig.min(axis=1, keepdims=True)
    sig = lo + (hi - lo) * (sig - sig.min(axis=1, keepdims=True)) / np.maximum(span, 1e-12)

    fields = rng.standard_normal((h, w, k))
    kern = gaussian_kernel(spec.blob_scale, _odd(6 * spec.blob_scale))
    fields = _correlate1d(_correlate1d(fields, kern, axis=0), kern, axis=1)
    fields = (fields - fields.mean(axis=(0, 1))) / np.maximum(fields.std(axis=(0, 1)), 1e-12)
    e = np.exp(fields - fields.max(axis=2, keepdims=True))
    abund = e / e.sum(axis=2, keepdims=True)

    bright = rng.standard_normal((h, w))
    bright = _correlate1d(_correlate1d(bright, kern, axis=0), kern, axis=1)
    span = bright.max() - bright.min()
    bright = 0.7 + 0.3 * (bright - bright.min()) / max(span, 1e-12)

    return sig, abund, bright


def _odd(x: float) -> int:
    n = max(int(math.ceil(x)), 1)
    return n if n % 2 else n + 1


def generate_synthetic_hsi(spec: SyntheticSceneSpec, h: int, w: int, m: int) -> HsiCube:
    """Linear-mixture scene, clipped to [0, 1], deterministic per seed."""
    sig, abund, bright = synthesize_components(spec, h, w, m)
    cube = (abund @ sig) * bright[:, :, None]
    return HsiCube(np.clip(cube, 0.0, 1.0).astype(np.float32))


# ---------------------------------------------------------------------------
# degradation model
# ---------------------------------------------------------------------------

def spatial_degrade(y: HsiCube, cfg: DegradationConfig) -> HsiCube:
    """Per-band Gaussian blur, then block-average decimation by cfg.decimation."""
    s = cfg.decimation
    if y.height % s or y.width % s:
        raise DimensionError(
            f"decimation {s} does not divide scene extents {y.height}x{y.width}"
        )
    blurred = gaussian_blur(y.data, cfg.blur_sigma, cfg.blur_kernel_size)
    return HsiCube(block_mean(blurred, s).astype(np.float32), band_ids=list(y.band_ids))


def spectral_degrade(y: HsiCube, cfg: DegradationConfig) -> HsiCube:
    """Map every pixel spectrum through the band-response matrix D."""
    d = cfg.spectral_response
    if d.shape[1] != y.bands:
        raise DimensionError(
            f"spectral_response expects {d.shape[1]} bands, cube has {y.bands}"
        )
    out = y.data.astype(np.float64) @ d.T
    return HsiCube(out.astype(np.float32))


def build_spectral_response(m: int, m_m: int) -> np.ndarray:
    """Row-stochastic (m_m, m) matrix averaging contiguous band partitions."""
    if m_m > m:
        raise UsageError(f"cannot synthesize {m_m} output bands from {m} input bands")
    if m_m < 1:
        raise UsageError("need at least one output band")
    d = np.zeros((m_m, m), dtype=np.float64)
    for i in range(m_m):
        b0, b1 = (i * m) // m_m, ((i + 1) * m) // m_m
        d[i, b0:b1] = 1.0 / (b1 - b0)
    return d


def make_scene_triple(spec: SyntheticSceneSpec, h: int, w: int, m: int,
                      cfg: DegradationConfig) -> tuple[HsiCube, HsiCube, HsiCube]:
    """(Y, X_h, X_m) for one synthetic scene."""
    y = generate_synthetic_hsi(spec, h, w, m)
    return y, spatial_degrade(y, cfg), spectral_degrade(y, cfg)


def add_awgn(x: HsiCube, snr_db: float, seed) -> HsiCube:
    """White Gaussian noise at the requested SNR; snr_db=inf returns the input
    unchanged.  ``seed`` is anything ``np.random.default_rng`` accepts.
    Output is deliberately not clipped to [0, 1]."""
    if not math.isfinite(snr_db):
        if snr_db < 0:
            raise UsageError("snr_db must be finite or +inf")
        return HsiCube(x.data.copy(), band_ids=list(x.band_ids))
    rng = np.random.default_rng(seed)
    signal_power = float(np.mean(x.data.astype(np.float64) ** 2))
    noise_power = signal_power / (10.0 ** (snr_db / 10.0))
    noise = rng.standard_normal(x.data.shape) * math.sqrt(noise_power)
    return HsiCube((x.data + noise).astype(np.float32), band_ids=list(x.band_ids))


def measure_snr_db(clean: np.ndarray, noisy: np.ndarray) -> float:
    """10*log10(sum(signal^2) / sum(noise^2))."""
    n = noisy.astype(np.float64) - clean.astype(np.float64)
    return 10.0 * math.log10(float(np.sum(clean.astype(np.float64) ** 2)) / float(np.sum(n ** 2)))


# ---------------------------------------------------------------------------
# geometric augmentation
# ---------------------------------------------------------------------------

@dataclass
class GeomTransform:
    """One joint geometric draw; crop offsets/size are in HR pixels and must
    be multiples of the scale factor so the LR grid stays aligned."""

    flip_h: bool = False
    flip_v: bool = False
    rot90: int = 0
    crop: tuple[int, int, int] | None = None  # (row, col, size) at HR scale

    @property
    def is_identity(self) -> bool:
        return not self.flip_h and not self.flip_v and self.rot90 % 4 == 0 and self.crop is None


def sample_transform(rng: np.random.Generator, hr_height: int, hr_width: int,
                     scale: int, crop_size: int | None = None) -> GeomTransform:
    """Draw a random transform; all randomness comes from ``rng``."""
    crop = None
    if crop_size is not None:
        if crop_size % scale:
            raise UsageError(f"crop size {crop_size} must be divisible by scale {scale}")
        if crop_size > hr_height or crop_size > hr_width:
            raise UsageError(f"crop {crop_size} exceeds scene extents {hr_height}x{hr_width}")
        i = int(rng.integers(0, (hr_height - crop_size) // scale + 1)) * scale
        j = int(rng.integers(0, (hr_width - crop_size) // scale + 1)) * scale
        crop = (i, j, crop_size)
    return GeomTransform(
        flip_h=bool(rng.integers(0, 2)),
        flip_v=bool(rng.integers(0, 2)),
        rot90=int(rng.integers(0, 4)),
        crop=crop,
    )


def apply_transform(cube: HsiCube, t: GeomTransform, scale: int = 1) -> HsiCube:
    """Apply a transform; ``scale`` > 1 divides the crop geometry for LR cubes."""
    data = cube.data
    if t.crop is not None:
        i, j, size = t.crop
        if i % scale or j % scale or size % scale:
            raise UsageError(f"crop {t.crop} not aligned to scale {scale}")
        i, j, size = i // scale, j // scale, size // scale
        if i + size > data.shape[0] or j + size > data.shape[1]:
            raise UsageError(f"crop {t.crop} exceeds cube extents {data.shape[:2]}")
        data = data[i:i + size, j:j + size, :]
    if t.flip_v:
        data = data[::-1, :, :]
    if t.flip_h:
        data = data[:, ::-1, :]
    if t.rot90 % 4:
        data = np.rot90(data, t.rot90 % 4, axes=(0, 1))
    return HsiCube(np.ascontiguousarray(data), band_ids=list(cube.band_ids))


def augment(xh: HsiCube, xm: HsiCube, y: HsiCube, rng: np.random.Generator,
            scale: int, crop_size: int | None = None) -> tuple[HsiCube, HsiCube, HsiCube]:
    """One joint geometric draw applied consistently to the aligned triple."""
    if xm.height != xh.height * scale or xm.width != xh.width * scale:
        raise DimensionError(
            f"X_m {xm.height}x{xm.width} is not {scale}x the X_h grid {xh.height}x{xh.width}"
        )
    t = sample_transform(rng, y.height, y.width, scale, crop_size)
    return (
        apply_transform(xh, t, scale=scale),
        apply_transform(xm, t, scale=1),
        apply_transform(y, t, scale=1),
    )


# ---------------------------------------------------------------------------
# reference resampler (model-free baseline)
# ---------------------------------------------------------------------------

def _keys_matrix(n_in: int, factor: int) -> np.ndarray:
    """(n_in*factor, n_in) Catmull-Rom (a=-0.5) interpolation matrix."""
    a = -0.5

    def kernel(t: float) -> float:
        t = abs(t)
        if t <= 1.0:
            return (a + 2.0) * t ** 3 - (a + 3.0) * t ** 2 + 1.0
        if t < 2.0:
            return a * t ** 3 - 5.0 * a * t ** 2 + 8.0 * a * t - 4.0 * a
        return 0.0

    n_out = n_in * factor
    m = np.zeros((n_out, n_in), dtype=np.float64)
    for o in range(n_out):
        u = (o + 0.5) / factor - 0.5
        base = math.floor(u)
        for tap in range(base - 1, base + 3):
            wgt = kernel(u - tap)
            m[o, min(max(tap, 0), n_in - 1)] += wgt
    return m


def bicubic_upsample(cube: HsiCube, factor: int) -> HsiCube:
    """Model-free reference: per-band bicubic interpolation to the HR grid."""
    if factor < 1:
        raise UsageError(f"factor must be >= 1, got {factor}")
    if factor == 1:
        return HsiCube(cube.data.copy(), band_ids=list(cube.band_ids))
    uh = _keys_matrix(cube.height, factor)
    uw = _keys_matrix(cube.width, factor)
    out = np.einsum("ai,bj,ijm->abm", uh, uw, cube.data.astype(np.float64), optimize=True)
    return HsiCube(out.astype(np.float32), band_ids=list(cube.band_ids))


# ---------------------------------------------------------------------------
# layout bridges to the NCHW tensor world
# ---------------------------------------------------------------------------

def cube_to_nchw(cube: HsiCube, dtype=np.float32) -> np.ndarray:
    """(H, W, M) -> (1, M, H, W)."""
    return np.ascontiguousarray(cube.data.transpose(2, 0, 1)[None, ...]).astype(dtype, copy=False)


def stack_cubes_nchw(cubes, dtype=np.float32) -> np.ndarray:
    """List of equally shaped cubes -> (N, M, H, W)."""
    return np.stack([cube_to_nchw(c, dtype)[0] for c in cubes], axis=0)


def nchw_to_cube(arr: np.ndarray, index: int = 0) -> HsiCube:
    """(N, M, H, W) -> cube layout for one batch element."""
    return HsiCube(np.ascontiguousarray(arr[index].transpose(1, 2, 0)))
