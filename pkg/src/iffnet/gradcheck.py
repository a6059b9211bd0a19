"""Finite-difference verification of every differentiable primitive and of the
whole network, run in float64 so central differences are trustworthy."""

from __future__ import annotations

import numpy as np

from .model import IffArchConfig, init_params, iffnet_forward, interaction, merge, residual_block, separable_self_attention
from .tensor import (
    BatchNormState,
    Tensor,
    add,
    affine_combine,
    batch_norm,
    concat_channels,
    conv2d,
    finite_diff_check,
    matmul,
    mse,
    mul,
    prelu,
    reshape_axis,
    reshape_axis_inv,
    sigmoid,
    softmax_rows,
    tsum,
)
from .training import multitask_loss

TOLERANCE = 1e-5


def _rand(rng, *shape):
    return rng.standard_normal(shape)


def _rand_off_zero(rng, *shape):
    # keep values away from the PReLU kink so central differences stay valid
    return np.sign(rng.standard_normal(shape)) * rng.uniform(0.3, 1.2, size=shape)


def primitive_checks(seed: int = 0) -> dict[str, float]:
    """Max relative gradient error per primitive, keyed 'op/argument'."""
    rng = np.random.default_rng(seed)
    n, c, t, f = 2, 3, 4, 5
    errors: dict[str, float] = {}

    x = _rand(rng, n, c, t, f)
    w = _rand(rng, 2, c, 3, 3) * 0.5
    b = _rand(rng, 2)
    errors["conv2d/input"] = finite_diff_check(
        lambda v: tsum(conv2d(v, Tensor(w), Tensor(b))), Tensor(x)
    )
    errors["conv2d/weight"] = finite_diff_check(
        lambda v: tsum(conv2d(Tensor(x), v, Tensor(b))), Tensor(w)
    )
    errors["conv2d/bias"] = finite_diff_check(
        lambda v: tsum(conv2d(Tensor(x), Tensor(w), v)), Tensor(b)
    )

    gamma, beta = rng.uniform(0.5, 1.5, c), _rand(rng, c)

    def bn_of(v, g, bt):
        state = BatchNormState(c, dtype=np.float64)
        out = batch_norm(v, g, bt, state, training=True)
        return tsum(mul(out, out))  # quadratic so the input grad is nonzero

    errors["batch_norm/input"] = finite_diff_check(
        lambda v: bn_of(v, Tensor(gamma), Tensor(beta)), Tensor(x)
    )
    errors["batch_norm/gamma"] = finite_diff_check(
        lambda v: bn_of(Tensor(x), v, Tensor(beta)), Tensor(gamma)
    )
    errors["batch_norm/beta"] = finite_diff_check(
        lambda v: bn_of(Tensor(x), Tensor(gamma), v), Tensor(beta)
    )

    xk = _rand_off_zero(rng, n, c, t, f)
    slope = rng.uniform(0.1, 0.5, c)
    errors["prelu/input"] = finite_diff_check(lambda v: tsum(prelu(v, Tensor(slope))), Tensor(xk))
    errors["prelu/slope"] = finite_diff_check(lambda v: tsum(prelu(Tensor(xk), v)), Tensor(slope))

    errors["sigmoid/input"] = finite_diff_check(
        lambda v: tsum(mul(sigmoid(v), sigmoid(v))), Tensor(_rand(rng, t, f))
    )
    sm_in = _rand(rng, 4, 5)
    sm_probe = Tensor(_rand(rng, 4, 5))
    errors["softmax_rows/input"] = finite_diff_check(
        lambda v: tsum(mul(softmax_rows(v), sm_probe)), Tensor(sm_in)
    )

    a2, b2 = _rand(rng, 3, 4), _rand(rng, 4, 2)
    errors["matmul/a"] = finite_diff_check(lambda v: tsum(matmul(v, Tensor(b2))), Tensor(a2))
    errors["matmul/b"] = finite_diff_check(lambda v: tsum(matmul(Tensor(a2), v)), Tensor(b2))

    x3 = _rand(rng, c, t, f)
    probe3 = Tensor(_rand(rng, t, c * f))
    errors["reshape_axis/temporal"] = finite_diff_check(
        lambda v: tsum(mul(reshape_axis(v, "temporal"), probe3)), Tensor(x3)
    )
    probe4 = Tensor(_rand(rng, c, t, f))
    errors["reshape_axis_inv/frequency"] = finite_diff_check(
        lambda v: tsum(mul(reshape_axis_inv(v, (c, t, f), "frequency"), probe4)),
        Tensor(_rand(rng, f, c * t)),
    )

    other = Tensor(_rand(rng, n, 2, t, f))
    errors["concat_channels/input"] = finite_diff_check(
        lambda v: tsum(mul(concat_channels([v, other]), concat_channels([v, other]))), Tensor(x)
    )

    ea, eb, em = _rand(rng, t, f), _rand(rng, t, f), rng.uniform(0.1, 0.9, (t, f))
    errors["ewise/add"] = finite_diff_check(lambda v: tsum(mul(add(v, Tensor(eb)), v)), Tensor(ea))
    errors["ewise/mul"] = finite_diff_check(lambda v: tsum(mul(v, Tensor(eb))), Tensor(ea))
    errors["ewise/affine-combine-a"] = finite_diff_check(
        lambda v: tsum(mul(affine_combine(v, Tensor(eb), Tensor(em)), v)), Tensor(ea)
    )
    errors["ewise/affine-combine-m"] = finite_diff_check(
        lambda v: tsum(affine_combine(Tensor(ea), Tensor(eb), sigmoid(v))), Tensor(em)
    )
    return errors


def block_checks(seed: int = 0) -> dict[str, float]:
    """Composite blocks checked against finite differences on their inputs."""
    rng = np.random.default_rng(seed)
    cfg = IffArchConfig(num_ra_blocks=1, ra_filters=2)
    params = init_params(cfg, seed=seed, dtype=np.float64)
    n, c, t, f = 1, cfg.ra_filters, 4, 3
    errors: dict[str, float] = {}

    x = _rand_off_zero(rng, n, c, t, f)
    errors["separable_self_attention/temporal"] = finite_diff_check(
        lambda v: tsum(mul(separable_self_attention(v, "temporal"),
                           separable_self_attention(v, "temporal"))), Tensor(x)
    )
    errors["separable_self_attention/frequency"] = finite_diff_check(
        lambda v: tsum(mul(separable_self_attention(v, "frequency"),
                           separable_self_attention(v, "frequency"))), Tensor(x)
    )
    errors["residual_block/input"] = finite_diff_check(
        lambda v: tsum(residual_block(v, params, "enh.ra0.res0", training=True)), Tensor(x)
    )
    xn = _rand(rng, n, c, t, f)
    errors["interaction/input"] = finite_diff_check(
        lambda v: tsum(interaction(v, Tensor(xn), params, "inter0", training=True)[0]), Tensor(x)
    )
    planes = [Tensor(_rand(rng, n, 1, t, f)) for _ in range(3)]
    errors["merge/input"] = finite_diff_check(
        lambda v: tsum(merge(v, *planes, params, training=True)[1]), Tensor(_rand(rng, n, 1, t, f))
    )
    return errors


def end_to_end_check(seed: int = 0, blocks: int = 1, filters: int = 2, t: int = 4, f: int = 3):
    """Gradient of the full multitask objective w.r.t. every parameter and input.

    Returns (max_error, per_path_errors).
    """
    rng = np.random.default_rng(seed)
    cfg = IffArchConfig(num_ra_blocks=blocks, ra_filters=filters)
    params = init_params(cfg, seed=seed, dtype=np.float64)
    x_e = _rand_off_zero(rng, t, f)
    x_n = _rand_off_zero(rng, t, f)
    clean = _rand(rng, t, f)
    clean_t = Tensor(clean)
    clean4 = Tensor(clean.reshape(1, 1, t, f))

    def loss_from(xe_t, xn_t):
        fused, diag = iffnet_forward(xe_t, xn_t, params, training=True)
        return multitask_loss(fused, clean_t, diag.enhanced.x_in, clean4, 0.3)

    detail: dict[str, float] = {}
    for path in params.paths():
        saved = params.tensors[path]

        def f_param(v, path=path, saved=saved):
            params.tensors[path] = v
            try:
                return loss_from(Tensor(x_e), Tensor(x_n))
            finally:
                params.tensors[path] = saved

        detail[f"param:{path}"] = finite_diff_check(f_param, saved)

    detail["input:x_e"] = finite_diff_check(lambda v: loss_from(v, Tensor(x_n)), Tensor(x_e))
    detail["input:x_n"] = finite_diff_check(lambda v: loss_from(Tensor(x_e), v), Tensor(x_n))
    return max(detail.values()), detail


def run_all(seed: int = 0) -> dict[str, float]:
    """Every check in one table; the end-to-end entry aggregates all paths."""
    errors = primitive_checks(seed)
    errors.update(block_checks(seed))
    end_max, _ = end_to_end_check(seed)
    errors["end_to_end"] = end_max
    return errors
