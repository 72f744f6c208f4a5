"""Adversarial perturbations against a frozen reconstructor.

All attacks use projected sign/normalized-gradient ascent from a seeded
random start inside the constraint set (the unsupervised objective is
stationary at zero, so a cold start would never move).  Losses are MSE on
complex outputs; the target is the clean reconstruction unless
``supervised`` selects the reference image.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from . import mri
from .autodiff import ComplexTensor
from .mri import EncodingOperator


class AttackSpecError(ValueError):
    pass


@dataclass
class AttackSpec:
    """Attack parameters.

    ``epsilon`` is absolute for image-domain attacks; for ``pgd_l2_kspace``
    it is a fraction of ||y||_2 and for ``herringbone`` a fraction of
    max |y|.  ``alpha`` defaults to epsilon / 5.
    """

    kind: str = "pgd"  # pgd | fgsm | pgd_l2_kspace | herringbone | adaptive
    domain: str = "image"
    epsilon: float = 0.01
    alpha: float | None = None
    n_iters: int = 10
    supervised: bool = False
    seed: int = 0
    # adaptive
    adapt_lambda: float = 0.0
    adapt_steps: int = 4
    # herringbone
    n_spikes: int = 25
    low_freq_bias: float = 0.125  # sigma_f as a fraction of bandwidth

    def __post_init__(self):
        if self.kind not in ("pgd", "fgsm", "pgd_l2_kspace", "herringbone", "adaptive"):
            raise AttackSpecError(f"unknown attack kind {self.kind!r}")
        if self.epsilon <= 0:
            raise AttackSpecError("epsilon must be > 0")
        if self.kind == "fgsm":
            self.n_iters = 1
            if self.alpha is None:
                self.alpha = self.epsilon
        if self.alpha is None:
            self.alpha = self.epsilon / 5.0
        if self.alpha > self.epsilon + 1e-15:
            raise AttackSpecError("alpha must not exceed epsilon")
        if self.n_iters < 1:
            raise AttackSpecError("n_iters must be >= 1")
        if self.kind in ("pgd_l2_kspace", "herringbone"):
            self.domain = "kspace"

    def sidecar(self) -> dict:
        return dict(
            kind=self.kind, domain=self.domain, epsilon=self.epsilon,
            alpha=self.alpha, n_iters=self.n_iters, supervised=self.supervised,
            seed=self.seed, adapt_lambda=self.adapt_lambda,
            adapt_steps=self.adapt_steps, n_spikes=self.n_spikes,
            low_freq_bias=self.low_freq_bias, init="uniform-random-in-ball",
        )


@dataclass
class Perturbation:
    domain: str
    values: np.ndarray  # image (H, W) or k-space (n_c, H, W)
    achieved_norm: float
    spec: AttackSpec


def complex_mse(a, b):
    """MSE between complex tensors (b may be a constant array)."""
    diff = ad.subtract(a, b)
    return ad.scalar_mul(1.0 / diff.size, ad.sum_abs2(diff))


def _sign_arr(g: np.ndarray) -> np.ndarray:
    return np.sign(g.real) + 1j * np.sign(g.imag)


def _clip_box(r: np.ndarray, eps: float) -> np.ndarray:
    return np.clip(r.real, -eps, eps) + 1j * np.clip(r.imag, -eps, eps)


def _box_init(shape, eps: float, seed) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return eps * (rng.uniform(-1, 1, shape) + 1j * rng.uniform(-1, 1, shape))


def _target(model, op, z, spec: AttackSpec, x_ref):
    if spec.supervised:
        if x_ref is None:
            raise AttackSpecError("supervised attack requires x_ref")
        return np.asarray(x_ref)
    return model.apply(z, op).data


def linf_norm(a: np.ndarray) -> float:
    return float(max(np.abs(a.real).max(), np.abs(a.imag).max()))


def pgd_attack(model, op: EncodingOperator, z, spec: AttackSpec, x_ref=None) -> Perturbation:
    """Sign-gradient ascent in the epsilon box around the zerofilled input."""
    if spec.kind not in ("pgd", "fgsm"):
        raise AttackSpecError("pgd_attack expects kind pgd or fgsm")
    z = np.asarray(z, dtype=np.complex128)
    target = _target(model, op, z, spec, x_ref)
    r = _clip_box(_box_init(z.shape, spec.epsilon, spec.seed), spec.epsilon)
    for _ in range(spec.n_iters):
        g = ad.DiffGraph()
        r_leaf = g.leaf(r)
        out = model.apply(ad.add(r_leaf, z), op)
        loss = complex_mse(out, target)
        grad = g.backward(loss, [r_leaf])[r_leaf.node_id].data
        r = _clip_box(r + spec.alpha * _sign_arr(grad), spec.epsilon)
    return Perturbation("image", r, linf_norm(r), spec)


def fgsm_attack(model, op: EncodingOperator, z, spec: AttackSpec, x_ref=None) -> Perturbation:
    """Single sign step of size epsilon (1-iteration PGD)."""
    if spec.kind != "fgsm":
        raise AttackSpecError("fgsm_attack expects kind fgsm")
    return pgd_attack(model, op, z, spec, x_ref=x_ref)


def l2_kspace_attack(model, op: EncodingOperator, y, spec: AttackSpec, x_ref=None) -> Perturbation:
    """Normalized-gradient PGD inside an l2 ball around the measurements."""
    if spec.kind != "pgd_l2_kspace":
        raise AttackSpecError("l2_kspace_attack expects kind pgd_l2_kspace")
    y = np.asarray(y, dtype=np.complex128)
    eps = spec.epsilon * float(np.linalg.norm(y))
    alpha = (spec.alpha / spec.epsilon) * eps  # same fraction of the ball
    mask = op._mask > 0.5
    z_clean = mri.zerofilled(op, y)
    target = _target(model, op, z_clean, spec, x_ref)

    def project(w):
        w = w * mask
        n = np.linalg.norm(w)
        return w if n <= eps else w * (eps / n)

    rng_init = _box_init(y.shape, 1.0, spec.seed) * mask
    w = project(rng_init * eps / max(np.linalg.norm(rng_init), 1e-30))
    for _ in range(spec.n_iters):
        g = ad.DiffGraph()
        w_leaf = g.leaf(w)
        z = mri.apply_adjoint(op, ad.add(w_leaf, y))
        loss = complex_mse(model.apply(z, op), target)
        grad = g.backward(loss, [w_leaf])[w_leaf.node_id].data
        gn = np.linalg.norm(grad)
        if gn > 0:
            w = project(w + alpha * grad / gn)
    return Perturbation("kspace", w, float(np.linalg.norm(w)), spec)


def _spike_support(op: EncodingOperator, spec: AttackSpec) -> np.ndarray:
    """Flat indices of D acquired k-space bins, low-frequency biased."""
    nc, (h, w) = op.n_coils, op.image_shape
    mask = op._mask > 0.5
    fy = np.fft.fftfreq(h)[:, None]
    fx = np.fft.fftfreq(w)[None, :]
    sigma = spec.low_freq_bias
    weight = np.exp(-(fy**2 + fx**2) / (2 * sigma**2))
    full = np.broadcast_to(weight * mask, (nc, h, w)).reshape(-1)
    avail = np.nonzero(full > 0)[0]
    if spec.n_spikes > avail.size:
        raise AttackSpecError(
            f"requested {spec.n_spikes} spikes but only {avail.size} acquired bins"
        )
    p = full[avail] / full[avail].sum()
    rng = np.random.default_rng(spec.seed)
    return rng.choice(avail, size=spec.n_spikes, replace=False, p=p)


def herringbone_attack(model, op: EncodingOperator, y, spec: AttackSpec, x_ref=None) -> Perturbation:
    """Sparse bounded spikes: fixed support, amplitudes optimized by PGD."""
    if spec.kind != "herringbone":
        raise AttackSpecError("herringbone_attack expects kind herringbone")
    y = np.asarray(y, dtype=np.complex128)
    shape = y.shape
    if spec.n_spikes == 0:
        return Perturbation("kspace", np.zeros(shape, complex), 0.0, spec)
    eps = spec.epsilon * float(np.abs(y).max())
    alpha = (spec.alpha / spec.epsilon) * eps
    support = _spike_support(op, spec)
    z_clean = mri.zerofilled(op, y)
    target = _target(model, op, z_clean, spec, x_ref)

    def project(xi):
        mag = np.abs(xi)
        xi = np.where(mag > eps, xi * (eps / np.maximum(mag, 1e-30)), xi)
        return xi

    rng = np.random.default_rng(spec.seed)
    xi = project(0.1 * eps * (rng.uniform(-1, 1, spec.n_spikes) + 1j * rng.uniform(-1, 1, spec.n_spikes)))
    for _ in range(spec.n_iters):
        g = ad.DiffGraph()
        xi_leaf = g.leaf(xi)
        w = ad.scatter_fixed(xi_leaf, support, shape)
        z = mri.apply_adjoint(op, ad.add(w, y))
        loss = complex_mse(model.apply(z, op), target)
        grad = g.backward(loss, [xi_leaf])[xi_leaf.node_id].data
        xi = project(xi + alpha * _sign_arr(grad))
    w = np.zeros(int(np.prod(shape)), complex)
    w[support] = xi
    w = w.reshape(shape)
    return Perturbation("kspace", w, float(np.abs(xi).max()), spec)


def to_kspace(op: EncodingOperator, pert: Perturbation) -> Perturbation:
    """Convert an image-domain perturbation to its minimum-l2 k-space form."""
    if pert.domain != "image":
        return pert
    w = mri.min_l2_kspace(op, pert.values).data
    return Perturbation("kspace", w, float(np.linalg.norm(w)), pert.spec)


def adaptive_attack(
    model,
    op: EncodingOperator,
    z,
    spec: AttackSpec,
    patterns: Sequence[mri.SamplingPattern],
    noise_draws: Sequence[np.ndarray],
    mitigation_eps: float,
    mitigation_alpha: float,
    x_ref=None,
    use_checkpointing: bool = True,
    byte_limit: int | None = 1 << 30,
) -> Perturbation:
    """Jointly attack the reconstruction and the unrolled defense.

    The defense objective is unrolled ``spec.adapt_steps`` times inside the
    attack graph.  The inner descent directions pass through a sign, whose
    derivative vanishes almost everywhere, so they are computed detached;
    the resulting gradient equals the full double-backward gradient.  The
    final objective value stays on-graph.  Noise draws are the same arrays
    the defender will use.
    """
    from . import defense  # deferred: defense imports attacks' spec types

    if spec.kind != "adaptive":
        raise AttackSpecError("adaptive_attack expects kind adaptive")
    if spec.adapt_lambda < 0 or spec.adapt_steps < 1:
        raise AttackSpecError("adaptive attack requires lambda >= 0 and T >= 1")
    z = np.asarray(z, dtype=np.complex128)
    if spec.adapt_lambda == 0.0:
        base = AttackSpec(kind="pgd", epsilon=spec.epsilon, alpha=spec.alpha,
                          n_iters=spec.n_iters, supervised=spec.supervised, seed=spec.seed)
        pert = pgd_attack(model, op, z, base, x_ref=x_ref)
        return Perturbation("image", pert.values, pert.achieved_norm, spec)

    target = _target(model, op, z, spec, x_ref)
    d_ops = [mri.EncodingOperator(p, op.coils, op.image_shape) for p in patterns]

    def cyclic(z_t):
        return defense.cyclic_loss(model, op, d_ops, z_t, noise_draws)

    r = _clip_box(_box_init(z.shape, spec.epsilon, spec.seed), spec.epsilon)
    for _ in range(spec.n_iters):
        g = ad.DiffGraph()
        if not use_checkpointing and byte_limit is not None:
            g.byte_limit = byte_limit
        r_leaf = g.leaf(r)
        zr = ad.add(r_leaf, z)
        base_loss = complex_mse(model.apply(zr, op), target)

        z_t = zr
        for _t in range(spec.adapt_steps):
            inner = defense.cyclic_grad(model, op, d_ops, z_t.data, noise_draws)
            step = mitigation_alpha * _sign_arr(inner)
            moved = ad.subtract(z_t, step)
            z_t = ad.add(zr, ad.clamp_sym(ad.subtract(moved, zr), mitigation_eps))
        if use_checkpointing:
            g_T = ad.checkpoint_call(lambda zz: cyclic(zz), z_t)
        else:
            g_T = cyclic(z_t)
        total = ad.add(base_loss, ad.scalar_mul(spec.adapt_lambda, g_T))
        grad = g.backward(total, [r_leaf])[r_leaf.node_id].data
        r = _clip_box(r + spec.alpha * _sign_arr(grad), spec.epsilon)
    return Perturbation("image", r, linf_norm(r), spec)
