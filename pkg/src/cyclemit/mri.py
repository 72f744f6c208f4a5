"""Sampling patterns, synthetic coil maps, the multi-coil encoding operator,
noise injection, and ellipse-phantom dataset generation.

Conventions: images are (H, W) complex arrays normalized so max magnitude
is 1; k-space stacks are (n_coils, H, W) in natural FFT order; phase-encode
lines index the last axis, with line indices written in centered order (DC
at ``n_lines // 2``).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ComplexTensor

_CG_GUARD = np.array([1e-300])


class PatternError(ValueError):
    pass


class OperatorError(ValueError):
    pass


class IllConditionedError(RuntimeError):
    """CG failed to reach tolerance within the iteration cap."""


# -- sampling patterns ----------------------------------------------------


@dataclass(frozen=True)
class SamplingPattern:
    """Set of acquired phase-encode lines (centered index convention)."""

    n_lines: int
    indices: np.ndarray
    accel: int
    acs_count: int
    kind: str = "equispaced"
    comb: np.ndarray | None = None  # underlying equispaced comb, pre-ACS

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        if idx.size == 0 or idx.min() < 0 or idx.max() >= self.n_lines:
            raise PatternError("indices out of range")
        if np.unique(idx).size != idx.size or np.any(np.diff(idx) <= 0):
            raise PatternError("indices must be sorted and unique")
        object.__setattr__(self, "indices", idx)

    @property
    def acs_indices(self) -> np.ndarray:
        lo = self.n_lines // 2 - self.acs_count // 2
        return np.arange(lo, lo + self.acs_count)

    @property
    def complement_indices(self) -> np.ndarray:
        mask = np.ones(self.n_lines, dtype=bool)
        mask[self.indices] = False
        return np.nonzero(mask)[0]

    def line_mask(self) -> np.ndarray:
        """0/1 mask over lines, centered order."""
        m = np.zeros(self.n_lines)
        m[self.indices] = 1.0
        return m

    def natural_mask(self) -> np.ndarray:
        """0/1 mask over lines in natural FFT order (DC first)."""
        return np.fft.ifftshift(self.line_mask())

    def complement(self) -> "SamplingPattern":
        comp = self.complement_indices
        if comp.size == 0:
            raise PatternError("fully sampled pattern has no complement")
        return SamplingPattern(self.n_lines, comp, self.accel, 0, kind="complement")


def _acs_block(n_lines: int, acs_count: int) -> np.ndarray:
    lo = n_lines // 2 - acs_count // 2
    return np.arange(lo, lo + acs_count)


def equispaced_pattern(
    n_lines: int, accel: int, acs_count: int, offset: int = 0
) -> SamplingPattern:
    if accel < 2:
        raise PatternError("acceleration must be >= 2")
    if acs_count % 2 != 0:
        raise PatternError("acs_count must be even")
    if acs_count >= n_lines:
        raise PatternError("acs_count must be smaller than n_lines")
    if not 0 <= offset < accel:
        raise PatternError("offset must lie in [0, accel)")
    comb = np.arange(offset, n_lines, accel)
    idx = np.union1d(comb, _acs_block(n_lines, acs_count))
    return SamplingPattern(n_lines, idx, accel, acs_count, "equispaced", comb)


def shifted_patterns(base: SamplingPattern) -> list[SamplingPattern]:
    """The accel-1 one-line shifts of an equispaced pattern, ACS preserved."""
    if base.kind != "equispaced" or base.comb is None:
        raise PatternError("shifted_patterns requires an equispaced base")
    acs = _acs_block(base.n_lines, base.acs_count)
    out = []
    for k in range(1, base.accel):
        comb_k = np.sort((base.comb + k) % base.n_lines)
        idx = np.union1d(comb_k, acs)
        out.append(
            SamplingPattern(base.n_lines, idx, base.accel, base.acs_count, "equispaced", comb_k)
        )
    return out


def vd_gaussian_pattern(
    n_lines: int, accel: int, acs_count: int, seed: int
) -> SamplingPattern:
    """Variable-density random pattern, Gaussian-weighted toward the center."""
    if accel < 2:
        raise PatternError("acceleration must be >= 2")
    if acs_count % 2 != 0:
        raise PatternError("acs_count must be even")
    budget = n_lines // accel
    acs = _acs_block(n_lines, acs_count)
    n_draw = budget - acs_count
    if n_draw < 0:
        raise PatternError(
            f"line budget {budget} cannot include {acs_count} ACS lines"
        )
    pool = np.setdiff1d(np.arange(n_lines), acs)
    center = n_lines / 2 - 0.5
    sigma = n_lines / 6.0
    w = np.exp(-((pool - center) ** 2) / (2 * sigma**2))
    rng = np.random.default_rng(seed)
    drawn = rng.choice(pool, size=n_draw, replace=False, p=w / w.sum())
    idx = np.union1d(drawn, acs)
    return SamplingPattern(n_lines, idx, accel, acs_count, "vd_gaussian", None)


# -- coil maps ------------------------------------------------------------


@dataclass(frozen=True)
class CoilMaps:
    """Per-coil complex sensitivity images with unit sum-of-squares."""

    maps: np.ndarray  # (n_coils, H, W)
    band_size: int
    zeta: float  # achieved max out-of-band energy per coil

    @property
    def n_coils(self) -> int:
        return self.maps.shape[0]

    @property
    def image_shape(self) -> tuple[int, int]:
        return self.maps.shape[1:]


def out_of_band_energy(maps: np.ndarray, band_size: int) -> float:
    """Max over coils of Fourier energy outside the centred band.

    The band is ``band_size`` wide in each spatial dimension (unitary FFT,
    absolute energy).
    """
    maps = np.atleast_3d(np.asarray(maps, dtype=np.complex128))
    h, w = maps.shape[-2:]
    lo_h = h // 2 - band_size // 2
    lo_w = w // 2 - band_size // 2
    worst = 0.0
    for s in maps.reshape(-1, h, w):
        spec = np.fft.fftshift(np.fft.fft2(s, norm="ortho"))
        inside = spec[lo_h : lo_h + band_size, lo_w : lo_w + band_size]
        energy = float(np.vdot(spec, spec).real - np.vdot(inside, inside).real)
        worst = max(worst, energy)
    return max(worst, 0.0)


def _bandlimit(img: np.ndarray, band_size: int) -> np.ndarray:
    h, w = img.shape
    spec = np.fft.fftshift(np.fft.fft2(img, norm="ortho"))
    keep = np.zeros_like(spec)
    lo_h = h // 2 - band_size // 2
    lo_w = w // 2 - band_size // 2
    keep[lo_h : lo_h + band_size, lo_w : lo_w + band_size] = spec[
        lo_h : lo_h + band_size, lo_w : lo_w + band_size
    ]
    return np.fft.ifft2(np.fft.ifftshift(keep), norm="ortho")


def synth_coil_maps(
    image_shape: tuple[int, int],
    n_coils: int,
    band_size: int,
    seed: int,
    residual_amp: float = 0.0,
    mod_amp: float = 0.3,
    blend: float = 0.5,
) -> CoilMaps:
    """Smooth synthetic coil maps, pixelwise normalized to unit SOS.

    Each coil carries a distinct in-band harmonic along the line axis
    modulated by a seeded smooth field.  ``blend`` pulls every coil toward
    a shared smooth profile, controlling how well conditioned the
    undersampled operator is (0 = fully orthogonal harmonics).
    ``residual_amp`` injects a controlled out-of-band residual
    (pre-normalization) for smoothness sweeps.
    """
    if n_coils < 1:
        raise OperatorError("n_coils must be >= 1")
    h, w = image_shape
    rng = np.random.default_rng(seed)
    _, xx = np.mgrid[0:h, 0:w]
    mod_band = max(2, min(3, band_size - 1))
    common_noise = rng.standard_normal((h, w)) + 1j * rng.standard_normal((h, w))
    common = _bandlimit(common_noise, mod_band)
    common = 1.0 + 0.3 * common / max(np.abs(common).max(), 1e-30)
    maps = np.zeros((n_coils, h, w), dtype=np.complex128)
    for k in range(n_coils):
        freq = (k % band_size) - band_size // 2
        noise = rng.standard_normal((h, w)) + 1j * rng.standard_normal((h, w))
        field = _bandlimit(noise, mod_band)
        mod = 1.0 + mod_amp * field / max(np.abs(field).max(), 1e-30)
        s = (1.0 - blend) * np.exp(2j * np.pi * freq * xx / w) * mod + blend * common
        s = _bandlimit(s, band_size)
        if residual_amp > 0:
            # independent substream so the base maps are identical across
            # residual amplitudes in a sweep
            rng_hf = np.random.default_rng([seed, 7919, k])
            hf_noise = rng_hf.standard_normal((h, w)) + 1j * rng_hf.standard_normal((h, w))
            hf = hf_noise - _bandlimit(hf_noise, band_size)
            s = s + residual_amp * hf * np.sqrt(
                np.vdot(s, s).real / max(np.vdot(hf, hf).real, 1e-30)
            )
        maps[k] = s
    sos = np.sqrt((np.abs(maps) ** 2).sum(axis=0))
    maps = maps / np.maximum(sos, 1e-12)[None]
    zeta = out_of_band_energy(maps, band_size)
    return CoilMaps(maps, band_size, zeta)


def identity_maps(image_shape: tuple[int, int]) -> CoilMaps:
    """Single coil with unit sensitivity everywhere."""
    maps = np.ones((1, *image_shape), dtype=np.complex128)
    return CoilMaps(maps, 2, 0.0)


# -- encoding operator ----------------------------------------------------


@dataclass(frozen=True)
class EncodingOperator:
    """Coil weighting, unitary 2-D FFT, and phase-encode line masking."""

    pattern: SamplingPattern
    coils: CoilMaps
    image_shape: tuple[int, int]
    _mask: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        h, w = self.image_shape
        if self.coils.image_shape != (h, w):
            raise OperatorError("coil maps do not match image shape")
        if self.pattern.n_lines != w:
            raise OperatorError("pattern line count must equal image width")
        object.__setattr__(self, "_mask", self.pattern.natural_mask())

    @property
    def n_coils(self) -> int:
        return self.coils.n_coils

    @property
    def range_size(self) -> int:
        """M: acquired complex samples across coils."""
        return self.pattern.indices.size * self.image_shape[0] * self.n_coils

    @property
    def domain_size(self) -> int:
        """N: image pixels."""
        return self.image_shape[0] * self.image_shape[1]

    def complement(self) -> "EncodingOperator":
        return EncodingOperator(self.pattern.complement(), self.coils, self.image_shape)


# The three encoding chains (coil weighting, unitary FFT, line masking and
# their conjugates) are fused single primitives: they are linear, mutually
# adjoint (the normal map is self-adjoint), and fusing keeps graphs small.


def _sense_forward_value(x: np.ndarray, op: EncodingOperator) -> np.ndarray:
    k = np.fft.fft2(op.coils.maps * x[None], norm="ortho")
    return k * op._mask


def _sense_adjoint_value(y: np.ndarray, op: EncodingOperator) -> np.ndarray:
    img = np.fft.ifft2(y * op._mask, norm="ortho")
    return (np.conj(op.coils.maps) * img).sum(axis=0)


def _sense_normal_value(x: np.ndarray, op: EncodingOperator) -> np.ndarray:
    k = np.fft.fft2(op.coils.maps * x[None], norm="ortho") * op._mask
    img = np.fft.ifft2(k, norm="ortho")
    return (np.conj(op.coils.maps) * img).sum(axis=0)


ad.register_primitive("sense_forward", lambda g, node, pv: (_sense_adjoint_value(g, node.aux),))
ad.register_primitive("sense_adjoint", lambda g, node, pv: (_sense_forward_value(g, node.aux),))
ad.register_primitive("sense_normal", lambda g, node, pv: (_sense_normal_value(g, node.aux),))


def apply_forward(op: EncodingOperator, x) -> ComplexTensor:
    """E x: per-coil weighted unitary FFT with line masking, (n_c, H, W)."""
    x = x if isinstance(x, ComplexTensor) else ad.tensor(x)
    if x.shape != op.image_shape:
        raise ad.ShapeError(f"image shape {x.shape} != {op.image_shape}")
    ad._check_pow2(x.shape)
    return ad.emit_primitive("sense_forward", [x], _sense_forward_value(x.data, op), op)


def apply_adjoint(op: EncodingOperator, y) -> ComplexTensor:
    """E^H y: mask, inverse FFT, conjugate coil combination, (H, W)."""
    y = y if isinstance(y, ComplexTensor) else ad.tensor(y)
    if y.shape != (op.n_coils, *op.image_shape):
        raise ad.ShapeError(f"k-space shape {y.shape} != {(op.n_coils, *op.image_shape)}")
    return ad.emit_primitive("sense_adjoint", [y], _sense_adjoint_value(y.data, op), op)


def apply_normal(op: EncodingOperator, x) -> ComplexTensor:
    """E^H E x with a single mask application."""
    x = x if isinstance(x, ComplexTensor) else ad.tensor(x)
    if x.shape != op.image_shape:
        raise ad.ShapeError(f"image shape {x.shape} != {op.image_shape}")
    return ad.emit_primitive("sense_normal", [x], _sense_normal_value(x.data, op), op)


def materialize(op: EncodingOperator) -> np.ndarray:
    """Dense (M, N) matrix of the operator, acquired samples only."""
    h, w = op.image_shape
    n = h * w
    cols = np.zeros((op.range_size, n), dtype=np.complex128)
    sel = op._mask > 0.5
    for j in range(n):
        e = np.zeros(n)
        e[j] = 1.0
        y = apply_forward(op, e.reshape(h, w)).data
        cols[:, j] = y[:, :, sel].reshape(-1)
    return cols


# -- CG and the k-space pseudoinverse --------------------------------------


def cg_solve(
    apply_A: Callable[[ComplexTensor], ComplexTensor],
    b: ComplexTensor,
    n_iters: int | None = None,
    rel_tol: float | None = None,
    max_iters: int = 200,
    x0: np.ndarray | None = None,
):
    """Conjugate gradients, differentiable through every iteration.

    With ``n_iters`` set, runs exactly that many iterations (fixed count).
    Otherwise iterates until the relative residual falls below ``rel_tol``
    or ``max_iters`` is hit.  ``x0`` is an optional constant warm start.
    Returns (x, iterations, relative_residual).
    """
    if x0 is None:
        x = ad.scalar_mul(0.0, b)
        r = b
    else:
        x = ad.add(ad.scalar_mul(0.0, b), np.asarray(x0))
        r = ad.subtract(b, apply_A(x))
    p = r
    rs = ad.rdot(r, r)
    b_norm = float(np.linalg.norm(b.data))
    if b_norm == 0.0 or float(rs.data.real.item()) == 0.0:
        return (ad.scalar_mul(0.0, b) if b_norm == 0.0 else x), 0, 0.0
    total = n_iters if n_iters is not None else max_iters
    done = 0
    for _ in range(total):
        if n_iters is None and float(np.sqrt(rs.data.real.item())) <= rel_tol * b_norm:
            break
        Ap = apply_A(p)
        pAp = ad.rdot(p, Ap)
        alpha = ad.divide(rs, ad.add(pAp, _CG_GUARD))
        x = ad.add(x, ad.multiply(alpha, p))
        r = ad.subtract(r, ad.multiply(alpha, Ap))
        rs_new = ad.rdot(r, r)
        beta = ad.divide(rs_new, ad.add(rs, _CG_GUARD))
        p = ad.add(r, ad.multiply(beta, p))
        rs = rs_new
        done += 1
    rel_res = float(np.sqrt(max(rs.data.real.item(), 0.0))) / b_norm
    return x, done, rel_res


def min_l2_kspace(
    op: EncodingOperator,
    z,
    ridge: float = 1e-6,
    rel_tol: float = 1e-8,
    max_iters: int = 200,
    x0: np.ndarray | None = None,
    u_out: list | None = None,
) -> ComplexTensor:
    """Minimum-l2 k-space consistent with a zero-filled image.

    Solves (E^H E + ridge I) u = z by CG and returns w = E u, which is
    supported on the acquired lines and satisfies E^H w ~= z.  ``x0`` warm
    starts the solve; ``u_out`` (a 1-slot list) receives the detached
    solution for reuse as the next warm start.
    """
    z = z if isinstance(z, ComplexTensor) else ad.tensor(z)

    def A(v):
        return ad.add(apply_normal(op, v), ad.scalar_mul(ridge, v))

    u, iters, rel_res = cg_solve(A, z, rel_tol=rel_tol, max_iters=max_iters, x0=x0)
    if rel_res > rel_tol:
        raise IllConditionedError(
            f"pseudoinverse CG stalled at residual {rel_res:.2e} after {iters} iterations"
        )
    if u_out is not None:
        u_out.clear()
        u_out.append(u.data.copy())
    return apply_forward(op, u)


# -- noise -----------------------------------------------------------------


def complex_noise(shape, sigma: float, seed) -> np.ndarray:
    """Circular complex Gaussian with per-sample std ``sigma``."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    rng = np.random.default_rng(seed)
    scale = sigma / np.sqrt(2.0)
    return scale * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))


def add_complex_noise(t, sigma: float, seed) -> ComplexTensor:
    t = t if isinstance(t, ComplexTensor) else ad.tensor(t)
    if sigma == 0.0:
        return t
    return ad.add(t, complex_noise(t.shape, sigma, seed))


def estimate_noise_std(y: np.ndarray, pattern: SamplingPattern) -> float:
    """Robust (MAD) noise estimate from the acquired k-space corners.

    Uses the outer-quarter acquired lines restricted to the outer-quarter
    readout rows, where image content is weakest.
    """
    y = np.asarray(y)
    n = pattern.n_lines
    h = y.shape[-2]
    centered = np.fft.fftshift(y, axes=(-2, -1))
    dist_l = np.abs(np.arange(n) - n // 2)
    line_mask = pattern.line_mask()
    outer_l = [i for i in range(n) if dist_l[i] >= n // 4 and line_mask[i] > 0]
    if not outer_l:
        outer_l = list(pattern.indices)
    outer_r = [i for i in range(h) if abs(i - h // 2) >= h // 4]
    vals = centered[..., outer_r, :][..., outer_l].reshape(-1)
    comps = np.concatenate([vals.real, vals.imag])
    mad = np.median(np.abs(comps - np.median(comps)))
    return float(1.4826 * mad * np.sqrt(2.0))


# -- phantoms --------------------------------------------------------------


@dataclass
class PhantomSample:
    """Reference image with its exact fully sampled multi-coil k-space."""

    x_ref: np.ndarray
    y_full: np.ndarray
    maps: CoilMaps
    metadata: dict

    def measurements(self, op: EncodingOperator, noise_std: float = 0.0) -> np.ndarray:
        """Acquired k-space y = P y_full (+ seeded acquisition noise)."""
        y = self.y_full * op._mask
        if noise_std > 0:
            key = [self.metadata.get("seed", 0), self.metadata.get("index", 0), 23]
            y = y + complex_noise(y.shape, noise_std, key) * op._mask
        return y


def _ellipse(h, w, cy, cx, ay, ax_, angle, yy, xx):
    ct, st = np.cos(angle), np.sin(angle)
    u = (yy - cy) * ct + (xx - cx) * st
    v = -(yy - cy) * st + (xx - cx) * ct
    return ((u / ay) ** 2 + (v / ax_) ** 2) <= 1.0


def phantom_dataset(
    count: int,
    image_shape: tuple[int, int],
    n_coils: int,
    seed: int,
    maps: CoilMaps | None = None,
    phase_amp: float = 1.1,
) -> list[PhantomSample]:
    """Random-ellipse phantoms with smooth phase, max magnitude 1."""
    if count < 1:
        raise ValueError("count must be >= 1")
    from scipy.ndimage import gaussian_filter

    h, w = image_shape
    if maps is None:
        maps = synth_coil_maps(image_shape, n_coils, band_size=max(4, h // 8), seed=seed)
    yy, xx = np.mgrid[0:h, 0:w]
    samples = []
    for i in range(count):
        rng = np.random.default_rng([seed, i])
        mag = np.zeros((h, w))
        base = _ellipse(
            h, w, h / 2 + rng.uniform(-2, 2), w / 2 + rng.uniform(-2, 2),
            rng.uniform(0.30, 0.38) * h, rng.uniform(0.30, 0.38) * w,
            rng.uniform(0, np.pi), yy, xx,
        )
        mag[base] += rng.uniform(0.35, 0.55)
        n_ell = rng.integers(3, 7)
        ellipses = []
        for _ in range(n_ell):
            cy = h / 2 + rng.uniform(-0.22, 0.22) * h
            cx = w / 2 + rng.uniform(-0.22, 0.22) * w
            ay = rng.uniform(0.05, 0.18) * h
            ax_ = rng.uniform(0.05, 0.18) * w
            ang = rng.uniform(0, np.pi)
            amp = rng.uniform(-0.4, 0.7)
            mag[_ellipse(h, w, cy, cx, ay, ax_, ang, yy, xx)] += amp
            ellipses.append(dict(cy=cy, cx=cx, ay=ay, ax=ax_, angle=ang, amp=amp))
        mag = gaussian_filter(np.clip(mag, 0.0, None), sigma=0.8)
        mag = mag / mag.max()
        field = rng.standard_normal((h, w)) + 1j * rng.standard_normal((h, w))
        field = _bandlimit(field, 6).real
        phase = phase_amp * field / np.max(np.abs(field))
        x = mag * np.exp(1j * phase)
        y_full = np.fft.fft2(maps.maps * x[None], norm="ortho")
        samples.append(
            PhantomSample(x, y_full, maps, dict(seed=seed, index=i, ellipses=ellipses))
        )
    return samples


def zerofilled(op: EncodingOperator, y) -> np.ndarray:
    """Detached zero-filled image E^H y."""
    return apply_adjoint(op, np.asarray(y)).data
