"""Supervised, adversarial, and smoothed training of the unrolled model.

Plain full-order gradient descent with global-norm clipping; deterministic
for a fixed seed.  Returns the best-validation checkpoint.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import mri, recon
from .analysis import psnr
from .mri import EncodingOperator, PhantomSample
from .recon import ProxNetParams, Reconstructor, UnrollConfig

GRAD_CLIP = 1.0


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainingConfig:
    mode: str = "supervised"  # supervised | adversarial_eq4 | adversarial_eq5 | smug
    epochs: int = 60
    lr: float = 2.0
    seed: int = 0
    val_fraction: float = 0.2
    # rotate through the one-line-shifted patterns during training; the
    # cyclic defense assumes the model generalizes across them
    augment_patterns: bool = True
    noise_std: float = 0.0  # acquisition noise during training
    # adversarial settings
    attack_eps: float = 0.01
    attack_alpha: float | None = None  # default eps / 5
    attack_iters: int = 10
    balance_lambda: float = 1.0  # eq5 trade-off
    # smug settings
    smug_p: int = 10
    smug_sigma: float = 0.01

    def __post_init__(self):
        if self.mode not in ("supervised", "adversarial_eq4", "adversarial_eq5", "smug"):
            raise ValueError(f"unknown training mode {self.mode!r}")
        if self.mode.startswith("adversarial") and self.attack_eps < 0:
            raise ValueError("attack_eps must be >= 0")
        if self.mode == "smug" and self.smug_p < 1:
            raise ValueError("smug_p must be >= 1")


@dataclass
class TrainingResult:
    params: ProxNetParams
    curve: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_val_psnr: float = -np.inf

    def model(self, config: UnrollConfig, smooth_p: int = 1, smooth_sigma: float = 0.0) -> Reconstructor:
        return Reconstructor(self.params, config, smooth_p, smooth_sigma)


def magnitude_mse(a, b_mag: np.ndarray):
    """Mean squared error between |a| and a fixed magnitude image."""
    diff = ad.subtract(ad.magnitude(a), np.abs(b_mag) + 0j)
    return ad.scalar_mul(1.0 / diff.size, ad.sum_abs2(diff))


def _split(samples, val_fraction):
    n_val = max(1, int(round(len(samples) * val_fraction))) if len(samples) > 1 else 0
    return samples[: len(samples) - n_val], samples[len(samples) - n_val :]


def _sample_loss(graph_params, cfg, sample, op, z, mode, tconf, smooth_seed):
    if mode == "smug":
        out = recon.reconstruct(
            graph_params, cfg, z, op,
            smooth_p=tconf.smug_p, smooth_sigma=tconf.smug_sigma, smooth_seed=smooth_seed,
        )
    else:
        out = recon.reconstruct(graph_params, cfg, z, op)
    return magnitude_mse(out, sample.x_ref)


def _clip_grads(grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    total = np.sqrt(sum(float(np.vdot(g, g).real) for g in grads.values()))
    if total > GRAD_CLIP:
        scale = GRAD_CLIP / total
        return {k: g * scale for k, g in grads.items()}
    return grads


def train(
    dataset: list[PhantomSample],
    op: EncodingOperator,
    unroll: UnrollConfig,
    tconf: TrainingConfig,
    curve_path: str | Path | None = None,
) -> TrainingResult:
    """Gradient-descent training loop common to all modes."""
    from . import attacks  # deferred: attacks imports recon

    if not dataset:
        raise ValueError("dataset must be nonempty")
    train_set, val_set = _split(dataset, tconf.val_fraction)
    params = recon.init_params(unroll, seed=tconf.seed)
    ops = [op]
    if tconf.augment_patterns and op.pattern.kind == "equispaced":
        ops += [
            EncodingOperator(p, op.coils, op.image_shape)
            for p in mri.shifted_patterns(op.pattern)
        ]
    zs = {
        (id(s), k): mri.zerofilled(o, s.measurements(o, tconf.noise_std))
        for s in dataset
        for k, o in enumerate(ops)
    }

    result = TrainingResult(params.copy())
    prev_loss = np.inf
    for epoch in range(tconf.epochs):
        order = np.random.default_rng([tconf.seed, epoch]).permutation(len(train_set))
        grad_acc = {k: np.zeros(v.shape, dtype=np.complex128) for k, v in params.arrays().items()}
        loss_acc = 0.0
        for pos, idx in enumerate(order):
            sample = train_set[idx]
            k_op = (epoch + pos) % len(ops)
            s_op = ops[k_op]
            z = zs[(id(sample), k_op)]
            inputs = [z]
            if tconf.mode.startswith("adversarial") and tconf.attack_eps > 0:
                model = Reconstructor(params, unroll)
                spec = attacks.AttackSpec(
                    kind="pgd",
                    epsilon=tconf.attack_eps,
                    alpha=tconf.attack_alpha,
                    n_iters=tconf.attack_iters,
                    supervised=True,
                    seed=int(np.random.default_rng([tconf.seed, epoch, idx]).integers(2**31)),
                )
                pert = attacks.pgd_attack(model, s_op, z, spec, x_ref=sample.x_ref)
                inputs = [z + pert.values]

            g = ad.DiffGraph()
            gp = recon.attach_params(params, g)
            if tconf.mode == "adversarial_eq5" and tconf.attack_eps > 0:
                clean = _sample_loss(gp, unroll, sample, s_op, g.leaf(z), "supervised", tconf, 0)
                pert_loss = _sample_loss(gp, unroll, sample, s_op, g.leaf(inputs[0]), "supervised", tconf, 0)
                loss = ad.add(clean, ad.scalar_mul(tconf.balance_lambda, pert_loss))
            else:
                smooth_seed = int(np.random.default_rng([tconf.seed, epoch, idx, 7]).integers(2**31))
                loss = _sample_loss(gp, unroll, sample, s_op, g.leaf(inputs[0]), tconf.mode, tconf, smooth_seed)
            lval = loss.real_item()
            if not np.isfinite(lval):
                raise TrainingDiverged(
                    f"loss became non-finite at epoch {epoch} (previous {prev_loss:.3e})"
                )
            loss_acc += lval
            leaves = {name: getattr(gp, name) for name in ProxNetParams.FIELDS}
            grads = g.backward(loss, list(leaves.values()))
            for name, leaf in leaves.items():
                grad_acc[name] += grads[leaf.node_id].data
        n = max(len(train_set), 1)
        grads = _clip_grads({k: v / n for k, v in grad_acc.items()})
        arrays = params.arrays()
        for name in ProxNetParams.FIELDS:
            arrays[name] = arrays[name] - tconf.lr * grads[name]
        arrays["mu_raw"] = arrays["mu_raw"].real.astype(np.complex128)
        params = ProxNetParams(**arrays)

        val_psnr = evaluate_psnr(Reconstructor(params, unroll), val_set or train_set, op)
        record = dict(epoch=epoch, train_loss=loss_acc / n, val_psnr=val_psnr)
        result.curve.append(record)
        if val_psnr > result.best_val_psnr:
            result.best_val_psnr = val_psnr
            result.best_epoch = epoch
            result.params = params.copy()
        prev_loss = loss_acc / n

    if curve_path is not None:
        path = Path(curve_path)
        tmp = path.with_suffix(path.suffix + ".tmp")
        with open(tmp, "w") as fh:
            for rec in result.curve:
                fh.write(json.dumps(rec) + "\n")
        tmp.replace(path)
    return result


def evaluate_psnr(model: Reconstructor, samples, op) -> float:
    vals = []
    for s in samples:
        z = mri.zerofilled(op, s.measurements(op))
        out = model.apply(z, op).data
        vals.append(psnr(out, s.x_ref))
    return float(np.mean(vals))


def train_supervised(dataset, op, unroll, tconf=None, **kw) -> TrainingResult:
    tconf = tconf or TrainingConfig(mode="supervised")
    return train(dataset, op, unroll, tconf, **kw)


def train_adversarial(dataset, op, unroll, tconf=None, **kw) -> TrainingResult:
    tconf = tconf or TrainingConfig(mode="adversarial_eq4")
    return train(dataset, op, unroll, tconf, **kw)


def train_smug(dataset, op, unroll, tconf=None, **kw) -> TrainingResult:
    tconf = tconf or TrainingConfig(mode="smug")
    return train(dataset, op, unroll, tconf, **kw)
