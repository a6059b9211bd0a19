"""Joint training at desk scale: Adam, warmup/inverse-sqrt schedule, proxy losses.

The full-scale recipe pairs a recognition loss on the fused feature with an
enhancement loss; neither is reproducible here, so both are replaced by
reconstruction targets: the fused output X_F and the enhanced-branch output
x_e_in are each pulled toward the clean feature, weighted (1 - lambda) and
lambda with lambda = 0.3.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import (
    IffArchConfig,
    IffNetParams,
    desk_arch,
    iffnet_forward,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from .simulate import FeatureTriple, SimConfig, oracle_mse
from .tensor import Tensor, add, backward, mse, scale

log = logging.getLogger("iffnet.train")


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    """Desk-scale defaults; the full-size recipe uses warmup_steps=25000,
    batch_size=64 and the default IffArchConfig."""

    lr_peak: float = 0.002
    warmup_steps: int = 500
    enh_loss_weight: float = 0.3
    batch_size: int = 8
    steps: int = 2000
    seed: int = 0
    train_items: int = 256
    eval_every: int = 500
    arch: IffArchConfig = field(default_factory=desk_arch)
    sim: SimConfig = field(default_factory=SimConfig)

    def __post_init__(self):
        if not 0.0 <= self.enh_loss_weight <= 1.0:
            raise ValueError(f"enh_loss_weight must be in [0, 1], got {self.enh_loss_weight}")
        if self.warmup_steps < 1:
            raise ValueError(f"warmup_steps must be >= 1, got {self.warmup_steps}")


def multitask_loss(x_f: Tensor, clean: Tensor, x_e_proxy: Tensor, clean_enh_target: Tensor,
                   weight: float) -> Tensor:
    """(1 - w) * MSE(x_f, clean) + w * MSE(x_e_proxy, clean_enh_target)."""
    if not 0.0 <= weight <= 1.0:
        raise ValueError(f"enhancement loss weight must be in [0, 1], got {weight}")
    fused_term = scale(mse(x_f, clean), 1.0 - weight)
    enh_term = scale(mse(x_e_proxy, clean_enh_target), weight)
    return add(fused_term, enh_term)


def lr_schedule(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to lr_peak, then decay with the inverse square root of step."""
    if step < 1:
        raise ValueError(f"lr_schedule is defined for step >= 1, got {step}")
    if step <= cfg.warmup_steps:
        return cfg.lr_peak * step / cfg.warmup_steps
    return cfg.lr_peak * (cfg.warmup_steps / step) ** 0.5


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def init_optimizer(params: IffNetParams) -> OptimizerState:
    m = {p: np.zeros_like(t.data) for p, t in params.tensors.items()}
    v = {p: np.zeros_like(t.data) for p, t in params.tensors.items()}
    return OptimizerState(m=m, v=v)


def adam_step(params: IffNetParams, state: OptimizerState, lr: float):
    """Bias-corrected Adam update, in place; every parameter must hold a grad."""
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for path, param in params.tensors.items():
        g = param.grad
        if g is None:
            raise ValueError(f"adam_step: parameter {path!r} has no gradient")
        m = state.m[path] = b1 * state.m[path] + (1.0 - b1) * g
        v = state.v[path] = b2 * state.v[path] + (1.0 - b2) * (g * g)
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        param.data = (param.data - lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(
            param.data.dtype, copy=False
        )


def _batch_arrays(items: list[FeatureTriple]):
    clean = np.stack([t.clean.data for t in items])
    noisy = np.stack([t.noisy.data for t in items])
    enh = np.stack([t.enhanced.data for t in items])
    return Tensor(enh), Tensor(noisy), Tensor(clean)


@dataclass
class TrainResult:
    params: IffNetParams
    metrics: list[str]  # one "step\tlr\tloss\tmse_fused" line per step


def train(cfg: TrainConfig, dataset: list[FeatureTriple]) -> TrainResult:
    """Loop batches through forward / loss / backward / Adam with the schedule.

    Deterministic for a fixed config: the same seed drives init and batch
    order, so metrics and final parameters are bit-identical across runs.
    """
    if not dataset:
        raise ValueError("train: dataset is empty")
    params = init_params(cfg.arch, seed=cfg.seed)
    opt = init_optimizer(params)
    rng = np.random.default_rng(cfg.seed)
    order: list[int] = []
    metrics: list[str] = []

    for step in range(1, cfg.steps + 1):
        if len(order) < cfg.batch_size:
            order.extend(rng.permutation(len(dataset)).tolist())
        picks = [dataset[i] for i in order[: cfg.batch_size]]
        del order[: cfg.batch_size]

        x_e, x_n, clean = _batch_arrays(picks)
        fused, diag = iffnet_forward(x_e, x_n, params, training=True)
        clean4 = Tensor(clean.data.reshape(diag.enhanced.x_in.shape))
        loss = multitask_loss(fused, clean, diag.enhanced.x_in, clean4, cfg.enh_loss_weight)
        loss_val = loss.item()
        lr = lr_schedule(step, cfg)
        if not np.isfinite(loss_val):
            raise TrainingDiverged(f"non-finite loss at step {step} (lr {lr:.6g})")

        params.zero_grads()
        backward(loss)
        adam_step(params, opt, lr)

        fused_mse = oracle_mse(fused, clean)
        metrics.append(f"{step}\t{lr:.10g}\t{loss_val:.10g}\t{fused_mse:.10g}")
        if cfg.eval_every and step % cfg.eval_every == 0:
            probe = evaluate(params, dataset[: min(16, len(dataset))])
            log.info("step %d  loss %.6g  eval %s", step, loss_val, probe)

    return TrainResult(params=params, metrics=metrics)


def train_run(cfg: TrainConfig, dataset: list[FeatureTriple], out_dir) -> TrainResult:
    """Train and persist metrics.tsv plus a checkpoint directory under out_dir."""
    result = train(cfg, dataset)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.tsv").write_text("\n".join(result.metrics) + "\n", encoding="ascii")
    save_checkpoint(result.params, out / "checkpoint")
    return result


def evaluate(params_or_dir, dataset: list[FeatureTriple]) -> dict[str, float]:
    """Mean MSE against clean of the fused output and of both raw inputs.

    The input MSEs are properties of the data alone; only mse_fused depends
    on the checkpoint.
    """
    params = params_or_dir if isinstance(params_or_dir, IffNetParams) else load_checkpoint(params_or_dir)
    if not dataset:
        raise ValueError("evaluate: dataset is empty")
    fused_total = enh_total = noisy_total = 0.0
    for item in dataset:
        fused, _ = iffnet_forward(item.enhanced, item.noisy, params, training=False)
        fused_total += oracle_mse(fused, item.clean)
        enh_total += oracle_mse(item.enhanced, item.clean)
        noisy_total += oracle_mse(item.noisy, item.clean)
    n = len(dataset)
    return {
        "mse_fused": fused_total / n,
        "mse_enh_input": enh_total / n,
        "mse_noisy_input": noisy_total / n,
    }
