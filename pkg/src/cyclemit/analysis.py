"""Numerical evaluation of the per-unroll stability bound and image
quality metrics (PSNR, SSIM)."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, asdict
from typing import Sequence

import numpy as np
from scipy.signal import convolve2d

from . import autodiff as ad
from . import mri
from .mri import EncodingOperator


class ConvergenceError(RuntimeError):
    pass


# -- image quality ---------------------------------------------------------

PSNR_CAP = 200.0


def psnr(test, ref) -> float:
    """Peak SNR in dB between magnitude images; peak is max |ref|."""
    t = np.abs(np.asarray(test))
    r = np.abs(np.asarray(ref))
    if t.shape != r.shape:
        raise ValueError("psnr requires matching shapes")
    peak = r.max()
    if peak <= 0:
        raise ValueError("reference peak must be positive")
    mse = float(np.mean((t - r) ** 2))
    if mse == 0.0:
        return float("inf")
    return float(20.0 * np.log10(peak / np.sqrt(mse)))


def psnr_capped(test, ref) -> float:
    """PSNR with the +inf sentinel capped for serialization."""
    return min(psnr(test, ref), PSNR_CAP)


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax**2) / (2 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim(test, ref, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean SSIM on magnitude images, 11x11 Gaussian window, sigma 1.5.

    Window statistics use 'valid' overlap; the dynamic range is max |ref|.
    """
    t = np.abs(np.asarray(test)).astype(float)
    r = np.abs(np.asarray(ref)).astype(float)
    if t.shape != r.shape:
        raise ValueError("ssim requires matching shapes")
    peak = r.max()
    if peak <= 0:
        raise ValueError("reference peak must be positive")
    w = _gaussian_window()
    c1 = (k1 * peak) ** 2
    c2 = (k2 * peak) ** 2

    mu_t = convolve2d(t, w, mode="valid")
    mu_r = convolve2d(r, w, mode="valid")
    tt = convolve2d(t * t, w, mode="valid") - mu_t**2
    rr = convolve2d(r * r, w, mode="valid") - mu_r**2
    tr = convolve2d(t * r, w, mode="valid") - mu_t * mu_r
    num = (2 * mu_t * mu_r + c1) * (2 * tr + c2)
    den = (mu_t**2 + mu_r**2 + c1) * (tt + rr + c2)
    return float(np.mean(num / den))


# -- spectral machinery ----------------------------------------------------


def power_iteration(matvec, shape, tol: float = 1e-8, max_iters: int = 10_000, seed: int = 0):
    """Largest eigenvalue of a Hermitian PSD operator by power iteration."""
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
    v /= np.linalg.norm(v)
    lam = 0.0
    for it in range(max_iters):
        w = matvec(v)
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0, it + 1
        lam_new = float(np.vdot(v, w).real)
        v = w / nw
        if it > 0 and abs(lam_new - lam) <= tol * max(abs(lam_new), 1e-30):
            return lam_new, it + 1
        lam = lam_new
    raise ConvergenceError(f"power iteration did not converge in {max_iters} iterations")


def operator_singular_extremes(op: EncodingOperator, dense_threshold: int = 4096, seed: int = 0):
    """(sigma_min, sigma_max) of the encoding operator.

    sigma_max always comes from power iteration on E^H E; sigma_min from a
    dense SVD when the domain is small enough, otherwise from a shifted
    power iteration.
    """

    def normal_mv(v):
        return mri.apply_normal(op, ad.tensor(v)).data

    lam_max, _ = power_iteration(normal_mv, op.image_shape, seed=seed)
    sigma_max = float(np.sqrt(max(lam_max, 0.0)))
    if op.domain_size <= dense_threshold:
        sv = np.linalg.svd(mri.materialize(op), compute_uv=False)
        sigma_min = float(sv[-1])
    else:
        shift = lam_max * (1 + 1e-6)

        def shifted(v):
            return shift * v - normal_mv(v)

        lam_s, _ = power_iteration(shifted, op.image_shape, seed=seed + 1)
        sigma_min = float(np.sqrt(max(shift - lam_s, 0.0)))
    return sigma_min, sigma_max


def coil_high_freq_energy(coils: mri.CoilMaps | np.ndarray, band_size: int) -> float:
    """Max per-coil Fourier energy outside the centred band."""
    maps = coils.maps if isinstance(coils, mri.CoilMaps) else coils
    h = maps.shape[-2]
    if band_size % 2 != 0 or band_size > h:
        raise ValueError("band size must be even and within the bandwidth")
    return mri.out_of_band_energy(maps, band_size)


@dataclass
class Lemma1Report:
    lhs: float
    rhs: float
    holds: bool
    zeta: float
    c1: float
    c2: float
    acs_covers_band: bool

    def to_json(self) -> str:
        return json.dumps(asdict(self))


def lemma1_bound_check(op: EncodingOperator, seed: int = 0) -> Lemma1Report:
    """Check ||E E_c^H||_2 <= 2 n_c sqrt(zeta) + (n_c / sqrt(N)) zeta."""
    comp = op.complement()
    L = op.coils.band_size
    acs_ok = op.pattern.acs_count >= 2 * L
    if not acs_ok:
        warnings.warn(
            f"ACS width {op.pattern.acs_count} does not cover the 2L band {2 * L}; "
            "the bound precondition is violated", stacklevel=2
        )

    def ttH(u):
        v = mri.apply_forward(comp, mri.apply_adjoint(op, ad.tensor(u)).data).data
        return mri.apply_forward(op, mri.apply_adjoint(comp, v).data).data

    lam, _ = power_iteration(ttH, (op.n_coils, *op.image_shape), seed=seed)
    lhs = float(np.sqrt(max(lam, 0.0)))
    zeta = coil_high_freq_energy(op.coils, L)
    n_c = op.n_coils
    c1 = 2.0 * n_c
    c2 = n_c / np.sqrt(op.domain_size)
    rhs = float(c1 * np.sqrt(zeta) + c2 * zeta)
    return Lemma1Report(lhs, rhs, lhs <= rhs, zeta, c1, float(c2), acs_ok)


# -- Lipschitz probe -------------------------------------------------------


@dataclass
class LipschitzEstimate:
    m: float
    n_inputs: int
    n_dirs: int
    deltas: tuple
    seed: int

    def to_json(self) -> str:
        return json.dumps(asdict(self))


def lipschitz_estimate(
    model,
    inputs: Sequence[np.ndarray],
    deltas: Sequence[float] = (1e-3, 1e-2),
    n_dirs: int = 4,
    seed: int = 0,
) -> LipschitzEstimate:
    """Empirical local Lipschitz constant of the proximal network.

    Max over probe inputs, random directions and step sizes of
    ||D(x + du) - D(x)|| / ||du||.  A lower estimate of the true constant.
    """
    from . import recon

    if len(inputs) < 1:
        raise ValueError("need at least one probe input")
    rng = np.random.default_rng(seed)
    params, config = model.params, model.config
    worst = 0.0
    for x in inputs:
        x = np.asarray(x, dtype=np.complex128)
        base = recon.prox_apply(params, x, config).data
        for _ in range(n_dirs):
            u = rng.standard_normal(x.shape) + 1j * rng.standard_normal(x.shape)
            u /= np.linalg.norm(u)
            for d in deltas:
                out = recon.prox_apply(params, x + d * u, config).data
                worst = max(worst, float(np.linalg.norm(out - base) / d))
    return LipschitzEstimate(worst, len(inputs), n_dirs, tuple(deltas), seed)


# -- the composed bound ----------------------------------------------------


@dataclass
class BoundConstants:
    sigma_min_omega: float
    sigma_max_omega: float
    sigma_min_comp: float
    sigma_max_comp: float
    zeta: float
    band_size: int
    c1: float
    c2: float
    lemma_lhs: float
    corollary_expr: float  # n_c * zeta / sqrt(N), reported but not asserted
    m: float
    mu: float
    n_unrolls: int
    beta: float
    alpha_omega: float
    alpha_comp: float
    contraction: float  # alpha_omega + alpha_comp
    C: float

    def to_json(self) -> str:
        return json.dumps(asdict(self))


def theorem1_constant(
    beta: float, alpha_omega: float, alpha_comp: float, n_unrolls: int
) -> float:
    """C = beta * sum_{j<K} a^j + a^K with a = alpha_omega + alpha_comp."""
    a = alpha_omega + alpha_comp
    k = n_unrolls
    if abs(a - 1.0) < 1e-12:
        return float(beta * k + 1.0)
    geo = (1.0 - a**k) / (1.0 - a)
    return float(beta * geo + a**k)


def compose_bound_constants(model, op: EncodingOperator, probe_inputs, seed: int = 0) -> BoundConstants:
    """All Theorem-1 ingredients measured numerically and composed."""
    s_min, s_max = operator_singular_extremes(op, seed=seed)
    comp = op.complement()
    c_min, c_max = operator_singular_extremes(comp, seed=seed + 1)
    lemma = lemma1_bound_check(op, seed=seed)
    lip = lipschitz_estimate(model, probe_inputs, seed=seed)
    mu = model.params.mu_value()
    k = model.config.n_unrolls
    n_c = op.n_coils
    root_n = np.sqrt(op.domain_size)

    denom = s_min**2 + mu
    comp_gap = 1.0 - c_max**2
    inv_gap = float(1.0 / np.sqrt(comp_gap)) if comp_gap > 0 else float("inf")
    beta = s_max**2 / denom
    alpha_omega = lip.m * s_max**3 / denom * inv_gap
    alpha_comp = (mu / denom) * lemma.rhs * lip.m * c_max * inv_gap
    C = theorem1_constant(beta, alpha_omega, alpha_comp, k)
    return BoundConstants(
        sigma_min_omega=s_min, sigma_max_omega=s_max,
        sigma_min_comp=c_min, sigma_max_comp=c_max,
        zeta=lemma.zeta, band_size=op.coils.band_size,
        c1=lemma.c1, c2=lemma.c2, lemma_lhs=lemma.lhs,
        corollary_expr=float(n_c * lemma.zeta / root_n),
        m=lip.m, mu=mu, n_unrolls=k,
        beta=float(beta), alpha_omega=float(alpha_omega),
        alpha_comp=float(alpha_comp),
        contraction=float(alpha_omega + alpha_comp), C=float(C),
    )


def empirical_theorem1_check(
    model,
    op: EncodingOperator,
    samples,
    constants: BoundConstants,
    n_random: int = 100,
    seed: int = 0,
    converted_perturbations: Sequence[np.ndarray] = (),
) -> dict:
    """Max measured ||E(x_pert - x)|| / ||w|| over acquired-line
    perturbations, compared against the composed constant."""
    rng = np.random.default_rng(seed)
    mask = op._mask > 0.5
    ratios = []
    for trial in range(n_random):
        sample = samples[trial % len(samples)]
        y = sample.measurements(op)
        scale = float(np.linalg.norm(y)) * 10 ** rng.uniform(-3, -1)
        w = (rng.standard_normal(y.shape) + 1j * rng.standard_normal(y.shape)) * mask
        w *= scale / np.linalg.norm(w)
        ratios.append(_bound_ratio(model, op, y, w))
    for w in converted_perturbations:
        y = samples[0].measurements(op)
        ratios.append(_bound_ratio(model, op, y, np.asarray(w)))
    max_ratio = float(max(ratios))
    return dict(
        max_ratio=max_ratio,
        C=constants.C,
        holds=bool(max_ratio <= constants.C),
        n_trials=len(ratios),
        ratios_quantiles=dict(
            q50=float(np.quantile(ratios, 0.5)), q95=float(np.quantile(ratios, 0.95))
        ),
    )


def _bound_ratio(model, op, y, w) -> float:
    wn = float(np.linalg.norm(w))
    if wn == 0.0:
        return 0.0
    x_clean = model.apply(mri.zerofilled(op, y), op).data
    x_pert = model.apply(mri.zerofilled(op, y + w), op).data
    num = float(np.linalg.norm(mri.apply_forward(op, x_pert - x_clean).data))
    return num / wn
