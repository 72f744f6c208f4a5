"""Training-free mitigation by cyclic measurement consistency, plus the
two-stage residual-margin detector.

The mitigation objective measures, per synthesized pattern, the distance
between the minimum-l2 k-space of the current input and the acquired-line
k-space of a second-stage reconstruction from data resynthesized under
that pattern.  A reverse sign-gradient descent minimizes it inside an
l-infinity box around the perturbed input.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import mri
from .analysis import psnr
from .autodiff import ComplexTensor
from .mri import EncodingOperator, SamplingPattern


@dataclass
class MitigationConfig:
    epsilon: float
    alpha: float | None = None  # default epsilon / 5
    max_iters: int = 200
    tol: float = 1e-3
    patience: int = 5
    k_patterns: int | None = None  # default accel - 1
    noise_std: float = 0.0
    stages: int = 2
    seed: int = 0
    use_measurements: bool = False  # compare against raw y instead of pinv
    # offline-calibrated clean-loss level; descent stops once reached
    stop_loss: float | None = None
    # minimum relative improvement within the first patience window for the
    # input to count as perturbed; below it the input is returned unchanged
    material_tol: float = 0.35

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be > 0")
        if self.alpha is None:
            self.alpha = self.epsilon / 5.0
        if self.stages not in (2, 3):
            raise ValueError("stages must be 2 or 3")
        if self.patience < 1 or self.max_iters < 1:
            raise ValueError("patience and max_iters must be >= 1")


@dataclass
class BlindSchedule:
    eps_start: float = 0.04
    eps_step: float = 0.01
    alpha_start: float | None = None  # default eps_start / 5
    alpha_end_fraction: float = 3.5  # final alpha = eps / 3.5
    stop_tol: float = 1e-3
    n_alpha_steps: int = 3

    def __post_init__(self):
        if not self.eps_start > self.eps_step > 0:
            raise ValueError("require eps_start > eps_step > 0")
        if self.alpha_start is None:
            self.alpha_start = self.eps_start / 5.0


@dataclass
class DetectionReport:
    zeta1: float
    zeta2: float
    tau: float
    flagged: bool

    @property
    def margin(self) -> float:
        return self.zeta2 - self.zeta1

    def to_json(self) -> str:
        return json.dumps(dict(zeta1=self.zeta1, zeta2=self.zeta2,
                               margin=self.margin, tau=self.tau, flagged=self.flagged))


@dataclass
class NoiseDraws:
    """Per-pattern noise, fixed for a whole mitigation run."""

    stage1: list[np.ndarray]
    stage2: dict[tuple[int, int], np.ndarray] = field(default_factory=dict)


def synth_patterns(pattern: SamplingPattern, k: int, seed: int = 0) -> list[SamplingPattern]:
    """K patterns from the same family as the acquisition pattern."""
    if not 1 <= k <= pattern.accel - 1:
        raise ValueError("k must lie in [1, accel - 1]")
    if pattern.kind == "equispaced":
        return mri.shifted_patterns(pattern)[:k]
    return [
        mri.vd_gaussian_pattern(pattern.n_lines, pattern.accel, pattern.acs_count, [seed, j])
        for j in range(k)
    ]


def make_noise_draws(
    shape: tuple[int, ...], k: int, noise_std: float, seed: int, stages: int = 2
) -> NoiseDraws:
    stage1 = [mri.complex_noise(shape, noise_std, [seed, 11, j]) for j in range(k)]
    stage2 = {}
    if stages == 3:
        for i in range(k):
            for j in range(k):
                if i != j:
                    stage2[(i, j)] = mri.complex_noise(shape, noise_std, [seed, 13, i, j])
    return NoiseDraws(stage1, stage2)


def cyclic_loss(
    model,
    op: EncodingOperator,
    delta_ops: Sequence[EncodingOperator],
    z,
    draws: NoiseDraws | Sequence[np.ndarray],
    stages: int = 2,
    y_measurements: np.ndarray | None = None,
    pinv_warm: list | None = None,
):
    """Mean cyclic-consistency residual over the synthesized patterns.

    Differentiable in ``z``.  With ``y_measurements`` the first term is the
    raw acquired k-space instead of the minimum-l2 solution.  ``pinv_warm``
    is an optional 1-slot list caching the pseudoinverse CG iterate between
    calls at nearby inputs.
    """
    if isinstance(draws, NoiseDraws):
        stage1, stage2 = draws.stage1, draws.stage2
    else:
        stage1, stage2 = list(draws), {}
    z = z if isinstance(z, ComplexTensor) else ad.tensor(z)
    if y_measurements is not None:
        y_ref = ad.tensor(np.asarray(y_measurements))
    else:
        x0 = pinv_warm[0] if pinv_warm else None
        y_ref = mri.min_l2_kspace(op, z, x0=x0, u_out=pinv_warm)
    x1 = model.apply(z, op)
    terms = []
    if stages == 2:
        for k, dop in enumerate(delta_ops):
            y_k = ad.add(mri.apply_forward(dop, x1), stage1[k])
            x2 = model.apply(mri.apply_adjoint(dop, y_k), dop)
            terms.append(ad.l2_norm(ad.subtract(y_ref, mri.apply_forward(op, x2))))
    else:
        x2s = {}
        for i, dop in enumerate(delta_ops):
            y_i = ad.add(mri.apply_forward(dop, x1), stage1[i])
            x2s[i] = model.apply(mri.apply_adjoint(dop, y_i), dop)
        for i in range(len(delta_ops)):
            for j in range(len(delta_ops)):
                if i == j:
                    continue
                gop = delta_ops[j]
                y_ij = ad.add(mri.apply_forward(gop, x2s[i]), stage2[(i, j)])
                x3 = model.apply(mri.apply_adjoint(gop, y_ij), gop)
                terms.append(ad.l2_norm(ad.subtract(y_ref, mri.apply_forward(op, x3))))
    acc = terms[0]
    for t in terms[1:]:
        acc = ad.add(acc, t)
    return ad.scalar_mul(1.0 / len(terms), acc)


def cyclic_value_and_grad(model, op, delta_ops, z_value, draws, **kw):
    g = ad.DiffGraph()
    z_leaf = g.leaf(np.asarray(z_value))
    loss = cyclic_loss(model, op, delta_ops, z_leaf, draws, **kw)
    grad = g.backward(loss, [z_leaf])[z_leaf.node_id].data
    return loss.real_item(), grad


def cyclic_grad(model, op, delta_ops, z_value, draws, **kw) -> np.ndarray:
    return cyclic_value_and_grad(model, op, delta_ops, z_value, draws, **kw)[1]


@dataclass
class MitigationResult:
    z_mitigated: np.ndarray
    reconstruction: np.ndarray
    losses: list[float]
    best_loss: float
    n_iters: int
    converged: bool
    epsilon: float = 0.0
    alpha: float = 0.0


def _sign_arr(g: np.ndarray) -> np.ndarray:
    return np.sign(g.real) + 1j * np.sign(g.imag)


def _clip_to_box(z, center, eps):
    d = z - center
    return center + np.clip(d.real, -eps, eps) + 1j * np.clip(d.imag, -eps, eps)


def mitigate(
    model,
    op: EncodingOperator,
    z_pert,
    config: MitigationConfig,
    x_ref: np.ndarray | None = None,
    trace_path: str | Path | None = None,
    y_measurements: np.ndarray | None = None,
    patterns: Sequence[SamplingPattern] | None = None,
    draws: NoiseDraws | None = None,
    z_init: np.ndarray | None = None,
) -> MitigationResult:
    """Reverse sign-gradient descent of the cyclic loss in the epsilon box.

    Stops once the best loss improves by less than ``config.tol``
    (relative) over a ``config.patience``-iteration window, or at
    ``config.max_iters``.  Returns the best-loss iterate and its
    reconstruction.
    """
    z_pert = np.asarray(z_pert, dtype=np.complex128)
    k = config.k_patterns or (op.pattern.accel - 1)
    if config.stages == 3 and k < 2:
        raise ValueError("3-stage mitigation needs at least 2 synthesized patterns")
    if patterns is None:
        patterns = synth_patterns(op.pattern, k, config.seed)
    delta_ops = [EncodingOperator(p, op.coils, op.image_shape) for p in patterns]
    if draws is None:
        draws = make_noise_draws(
            (op.n_coils, *op.image_shape), k, config.noise_std, config.seed, config.stages
        )
    kw = dict(stages=config.stages, y_measurements=y_measurements)

    trace_rows = []
    pinv_warm: list = []
    z_t = z_pert.copy() if z_init is None else _clip_to_box(
        np.asarray(z_init, dtype=np.complex128), z_pert, config.epsilon
    )
    best_z = z_t
    best_hist: list[float] = []
    losses: list[float] = []
    converged = False
    for it in range(config.max_iters):
        loss, grad = cyclic_value_and_grad(
            model, op, delta_ops, z_t, draws, pinv_warm=pinv_warm, **kw
        )
        losses.append(loss)
        if not best_hist or loss < best_hist[-1]:
            best_z = z_t
        best_hist.append(min(loss, best_hist[-1]) if best_hist else loss)
        if trace_path is not None:
            row = dict(
                iter=it, loss=loss,
                box_violation=float(max(0.0, _box_excess(z_t, z_pert, config.epsilon))),
            )
            if x_ref is not None:
                row["psnr_vs_ref"] = psnr(model.apply(z_t, op).data, x_ref)
            trace_rows.append(row)
        if config.stop_loss is not None and best_hist[it] <= config.stop_loss:
            converged = True
            break
        if it == config.patience:
            gain = (best_hist[0] - best_hist[it]) / max(best_hist[0], 1e-30)
            if gain < config.material_tol:
                # already cyclically consistent: keep the input untouched
                best_z = z_pert
                converged = True
                break
        if it > config.patience:
            ref = best_hist[it - config.patience]
            if (ref - best_hist[it]) < config.tol * max(ref, 1e-30):
                converged = True
                break
        z_t = _clip_to_box(z_t - config.alpha * _sign_arr(grad), z_pert, config.epsilon)

    reconstruction = model.apply(best_z, op).data
    if trace_path is not None:
        path = Path(trace_path)
        tmp = path.with_suffix(path.suffix + ".tmp")
        with open(tmp, "w") as fh:
            for row in trace_rows:
                fh.write(json.dumps(row) + "\n")
        tmp.replace(path)
    return MitigationResult(
        z_mitigated=best_z,
        reconstruction=reconstruction,
        losses=losses,
        best_loss=best_hist[-1] if best_hist else np.inf,
        n_iters=len(losses),
        converged=converged,
        epsilon=config.epsilon,
        alpha=config.alpha,
    )


def _box_excess(z, center, eps) -> float:
    d = z - center
    return float(max(np.abs(d.real).max(), np.abs(d.imag).max()) - eps)


def mitigate_multistage(model, op, z_pert, config: MitigationConfig, **kw) -> MitigationResult:
    """Multi-level cyclic consistency; the 2-stage path is exactly mitigate."""
    if config.stages == 3:
        k = config.k_patterns or (op.pattern.accel - 1)
        if k < 2:
            raise ValueError("3-stage mitigation needs at least 2 synthesized patterns")
    return mitigate(model, op, z_pert, config, **kw)


def mitigate_blind(
    model,
    op: EncodingOperator,
    z_pert,
    schedule: BlindSchedule,
    base_config: MitigationConfig | None = None,
    **kw,
) -> MitigationResult:
    """Mitigation without knowledge of the attack: linear (eps, alpha) search.

    Phase 1 decreases the box radius at a fixed step size until the cyclic
    loss stops improving; phase 2 fixes the radius and decreases the step
    size toward eps / alpha_end_fraction.  Always an l-infinity box.
    """
    z_pert = np.asarray(z_pert, dtype=np.complex128)
    base = base_config or MitigationConfig(epsilon=schedule.eps_start)

    def run(eps, alpha, z_init):
        cfg = MitigationConfig(
            epsilon=eps, alpha=alpha, max_iters=base.max_iters, tol=base.tol,
            patience=base.patience, k_patterns=base.k_patterns,
            noise_std=base.noise_std, stages=base.stages, seed=base.seed,
            use_measurements=base.use_measurements,
        )
        return mitigate(model, op, z_pert, cfg, z_init=z_init, **kw)

    best: MitigationResult | None = None
    eps = schedule.eps_start
    alpha = schedule.alpha_start
    while eps > schedule.eps_step / 2:
        res = run(eps, min(alpha, eps), best.z_mitigated if best else None)
        if best is not None and res.best_loss >= best.best_loss * (1 - schedule.stop_tol):
            if res.best_loss < best.best_loss:
                best = res
            break
        if best is None or res.best_loss < best.best_loss:
            best = res
        eps = eps - schedule.eps_step
    eps_sel = best.epsilon
    alpha_lo = eps_sel / schedule.alpha_end_fraction
    alphas = np.linspace(min(alpha, eps_sel), alpha_lo, schedule.n_alpha_steps + 1)[1:]
    for a in alphas:
        res = run(eps_sel, float(a), best.z_mitigated)
        if res.best_loss < best.best_loss:
            best = res
        elif res.best_loss >= best.best_loss * (1 - schedule.stop_tol):
            break
    return best


def detect(
    model,
    op: EncodingOperator,
    delta: SamplingPattern | EncodingOperator,
    y,
    tau: float,
    noise_std: float = 0.0,
    seed: int = 0,
) -> DetectionReport:
    """Two-stage residual-margin detector on one synthesized pattern."""
    y = np.asarray(y, dtype=np.complex128)
    dop = delta if isinstance(delta, EncodingOperator) else EncodingOperator(
        delta, op.coils, op.image_shape
    )
    y_norm = float(np.linalg.norm(y))
    z = mri.zerofilled(op, y)
    x1 = model.apply(z, op).data
    zeta1 = float(np.linalg.norm(y - mri.apply_forward(op, x1).data)) / y_norm
    y_d = mri.apply_forward(dop, x1).data + mri.complex_noise(y.shape, noise_std, [seed, 29])
    x2 = model.apply(mri.zerofilled(dop, y_d), dop).data
    zeta2 = float(np.linalg.norm(y - mri.apply_forward(op, x2).data)) / y_norm
    return DetectionReport(zeta1, zeta2, tau, (zeta2 - zeta1) >= tau)


def calibrate_tau(clean_margins: Sequence[float]) -> float:
    """Threshold from clean-validation margins: max + 3 MAD."""
    m = np.asarray(list(clean_margins), dtype=float)
    if m.size == 0:
        raise ValueError("calibration requires at least one margin")
    mad = np.median(np.abs(m - np.median(m)))
    return float(m.max() + 3.0 * mad)


def calibrate_stop_loss(
    model,
    op: EncodingOperator,
    clean_inputs: Sequence[np.ndarray],
    config: MitigationConfig,
    quantile: float = 0.9,
) -> float:
    """Dataset-dependent clean level of the cyclic loss, measured offline.

    Descending below this level on a clean-like input only overfits the
    run's fixed noise draws, so mitigation treats it as converged.
    """
    if not clean_inputs:
        raise ValueError("calibration requires clean inputs")
    k = config.k_patterns or (op.pattern.accel - 1)
    patterns = synth_patterns(op.pattern, k, config.seed)
    delta_ops = [EncodingOperator(p, op.coils, op.image_shape) for p in patterns]
    draws = make_noise_draws(
        (op.n_coils, *op.image_shape), k, config.noise_std, config.seed, config.stages
    )
    losses = []
    for z in clean_inputs:
        g = ad.DiffGraph()
        loss = cyclic_loss(model, op, delta_ops, g.leaf(np.asarray(z)), draws,
                           stages=config.stages)
        losses.append(loss.real_item())
    return float(np.quantile(losses, quantile))
