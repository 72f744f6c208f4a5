"""Unrolled reconstruction: a shared-weight residual-CNN proximal
alternating with conjugate-gradient data fidelity.

The network input is the zero-filled image z = E^H y, which also serves as
the data term of every CG solve, so the whole forward pass is a function
of (z, E) only.  The unroll ends with a data-fidelity step.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import mri
from .autodiff import ComplexTensor

MU_FLOOR = 1e-4
BLOCK_SCALE = 0.1  # constant residual-block scaling


@dataclass(frozen=True)
class UnrollConfig:
    n_unrolls: int = 4
    cg_iters: int = 8
    channels: int = 8
    n_blocks: int = 2
    kernel_size: int = 3

    def __post_init__(self):
        if self.n_unrolls < 0 or self.cg_iters < 1:
            raise ValueError("n_unrolls must be >= 0 and cg_iters >= 1")


@dataclass
class ProxNetParams:
    """Weights of the proximal network plus the data-fidelity penalty.

    One residual block's weights are shared by every block.  ``mu_raw``
    is the unclamped penalty; the effective mu is max(mu_raw, MU_FLOOR).
    """

    w_in: np.ndarray  # (ch, 2, k, k)
    b_in: np.ndarray  # (ch, 1, 1)
    w1: np.ndarray  # (ch, ch, k, k)
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w_out: np.ndarray  # (2, ch, k, k)
    b_out: np.ndarray  # (2, 1, 1)
    mu_raw: np.ndarray  # shape (1,)

    FIELDS = ("w_in", "b_in", "w1", "b1", "w2", "b2", "w_out", "b_out", "mu_raw")

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: np.asarray(getattr(self, name)) for name in self.FIELDS}

    def copy(self) -> "ProxNetParams":
        return ProxNetParams(**{k: v.copy() for k, v in self.arrays().items()})

    def mu_value(self) -> float:
        return float(max(np.asarray(self.mu_raw).real.reshape(()), MU_FLOOR))


def init_params(config: UnrollConfig, seed: int, scale: float = 0.1, mu_init: float = 0.05) -> ProxNetParams:
    """He-style random complex weights; biases zero; mu at its initial value.

    Complex weights keep the split-ReLU pre-activations generically away
    from their kinks in both real and imaginary parts.
    """
    rng = np.random.default_rng(seed)
    k, ch = config.kernel_size, config.channels

    def w(shape):
        fan_in = shape[1] * shape[2] * shape[3]
        re = rng.standard_normal(shape)
        im = rng.standard_normal(shape)
        return (re + 0.5j * im) * scale / np.sqrt(fan_in)

    return ProxNetParams(
        w_in=w((ch, 2, k, k)),
        b_in=np.zeros((ch, 1, 1), dtype=np.complex128),
        w1=w((ch, ch, k, k)),
        b1=np.zeros((ch, 1, 1), dtype=np.complex128),
        w2=w((ch, ch, k, k)),
        b2=np.zeros((ch, 1, 1), dtype=np.complex128),
        w_out=w((2, ch, k, k)),
        b_out=np.zeros((2, 1, 1), dtype=np.complex128),
        mu_raw=np.full(1, mu_init),
    )


def zero_params(config: UnrollConfig, mu_init: float = 0.05) -> ProxNetParams:
    p = init_params(config, seed=0, scale=0.0, mu_init=mu_init)
    return p


def attach_params(params: ProxNetParams, graph: ad.DiffGraph) -> ProxNetParams:
    """Re-wrap every field as a leaf of ``graph`` (for training)."""
    return ProxNetParams(**{k: graph.leaf(v) for k, v in params.arrays().items()})


def _conv_block(x, w, b):
    return ad.add(ad.conv2d(x, w), b)


def prox_apply(params: ProxNetParams, x, config: UnrollConfig) -> ComplexTensor:
    """Residual CNN denoiser acting on the real/imag channel pair.

    Zero weights reduce it to the identity skip.
    """
    x = x if isinstance(x, ComplexTensor) else ad.tensor(x)
    if len(x.shape) != 2:
        raise ad.ShapeError("prox_apply expects an (H, W) image")
    c = ad.complex_to_channels(x)
    h = _conv_block(c, params.w_in, params.b_in)
    for _ in range(config.n_blocks):
        t = ad.relu_split(_conv_block(h, params.w1, params.b1))
        t = _conv_block(t, params.w2, params.b2)
        h = ad.add(h, ad.scalar_mul(BLOCK_SCALE, t))
    out = _conv_block(h, params.w_out, params.b_out)
    return ad.add(x, ad.channels_to_complex(out))


def effective_mu(params: ProxNetParams):
    """Clamped penalty as a graph value: max(Re(mu_raw), MU_FLOOR)."""
    raw = params.mu_raw if isinstance(params.mu_raw, ComplexTensor) else ad.tensor(params.mu_raw)
    real = ad.scalar_mul(0.5, ad.add(raw, ad.conjugate(raw)))
    shifted = ad.relu_split(ad.add(real, np.array([-MU_FLOOR])))
    return ad.add(shifted, np.array([MU_FLOOR]))


def df_solve(op, y, z, mu, cg_iters: int, return_residual: bool = False):
    """Data-fidelity step: CG on (E^H E + mu I) x = E^H y + mu z.

    Runs exactly ``cg_iters`` iterations from a zero initial guess and is
    differentiable end to end.  ``op`` needs only ``apply_normal``-style
    semantics via :func:`mri.apply_normal` (or a compatible object with a
    ``normal`` callable).
    """
    ehy = mri.apply_adjoint(op, y) if not callable(getattr(op, "normal", None)) else op.adjoint(y)
    return _df_core(op, ehy, z, mu, cg_iters, return_residual)


def _df_core(op, ehy, z, mu, cg_iters: int, return_residual: bool = False):
    z = z if isinstance(z, ComplexTensor) else ad.tensor(z)
    ehy = ehy if isinstance(ehy, ComplexTensor) else ad.tensor(ehy)
    mu_t = mu if isinstance(mu, ComplexTensor) else ad.tensor(np.asarray(mu, dtype=float).reshape(1))

    normal = op.normal if callable(getattr(op, "normal", None)) else (
        lambda v: mri.apply_normal(op, v)
    )

    def A(v):
        return ad.add(normal(v), ad.multiply(mu_t, v))

    b = ad.add(ehy, ad.multiply(mu_t, z))
    x, _, rel_res = mri.cg_solve(A, b, n_iters=cg_iters)
    if return_residual:
        return x, rel_res
    return x


@dataclass
class Reconstructor:
    """Frozen unrolled model: parameters, architecture, and smoothing.

    With ``smooth_p`` > 1 and ``smooth_sigma`` > 0 the proximal input is
    averaged over seeded Gaussian draws before the data-fidelity step.
    """

    params: ProxNetParams
    config: UnrollConfig
    smooth_p: int = 1
    smooth_sigma: float = 0.0
    smooth_seed: int = 0

    def apply(self, z, op) -> ComplexTensor:
        return reconstruct(self.params, self.config, z, op,
                           smooth_p=self.smooth_p,
                           smooth_sigma=self.smooth_sigma,
                           smooth_seed=self.smooth_seed)


def reconstruct(
    params: ProxNetParams,
    config: UnrollConfig,
    z,
    op,
    smooth_p: int = 1,
    smooth_sigma: float = 0.0,
    smooth_seed: int = 0,
) -> ComplexTensor:
    """Alternate the proximal and data fidelity for n_unrolls steps.

    Starts from the zero-filled input and ends with data fidelity.  With
    ``n_unrolls`` = 0 the input is returned unchanged.
    """
    z = z if isinstance(z, ComplexTensor) else ad.tensor(z)
    x = z
    mu_t = effective_mu(params)
    smoothing = smooth_sigma > 0.0 and smooth_p >= 1
    for step in range(config.n_unrolls):
        if smoothing:
            acc = None
            for p in range(smooth_p):
                eta = mri.complex_noise(x.shape, smooth_sigma, [smooth_seed, step, p])
                d_p = prox_apply(params, ad.add(x, eta), config)
                acc = d_p if acc is None else ad.add(acc, d_p)
            d = ad.scalar_mul(1.0 / smooth_p, acc)
        else:
            d = prox_apply(params, x, config)
        x = _df_core(op, z, d, mu_t, config.cg_iters)
    return x


def measurement_residual(op, x, y) -> float:
    """Relative measurement inconsistency ||E x - y|| / ||y||."""
    x = np.asarray(x.data if isinstance(x, ComplexTensor) else x)
    y = np.asarray(y.data if isinstance(y, ComplexTensor) else y)
    ex = mri.apply_forward(op, x).data
    return float(np.linalg.norm(ex - y) / max(np.linalg.norm(y), 1e-30))
