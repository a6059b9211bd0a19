"""Two-branch interactive feature fusion network.

Each branch lifts its 1-channel T x F feature to C channels (Up-conv), runs
B residual attention blocks with cross-branch interaction after each one,
and projects back to one channel (Dn-conv). A merge module stacks the two
branch outputs with the two raw inputs, predicts a gate mask M in (0,1) and
emits the fused feature  X_F = x_e_in * M + x_n_in * (1 - M).

All learnable tensors live in :class:`IffNetParams`, addressable by a dotted
path string ("enh.ra0.res1.conv0.w", ...). Batch-norm running statistics are
kept alongside under the matching ".bn" prefixes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import iffio
from .tensor import (
    BatchNormState,
    Tensor,
    add,
    affine_combine,
    batch_norm,
    concat_channels,
    conv2d,
    matmul,
    mul,
    prelu,
    reshape,
    reshape_axis,
    reshape_axis_inv,
    scale,
    sigmoid,
    softmax_rows,
    stack_samples,
    take_sample,
    transpose2,
)

MERGE_CHANNELS = 4  # fixed stack: [x_e_in, x_n_in, x_e, x_n]
BRANCHES = ("enh", "noisy")


def _check_odd(name, kernel):
    kt, kf = kernel
    if kt % 2 == 0 or kf % 2 == 0 or kt < 1 or kf < 1:
        raise ValueError(f"{name} kernel must have odd positive extents, got {kernel}")


@dataclass(frozen=True)
class IffArchConfig:
    """Architecture hyperparameters; defaults follow the full-size setup."""

    num_ra_blocks: int = 4
    ra_filters: int = 64
    ra_kernel: tuple[int, int] = (3, 3)
    upconv_kernel: tuple[int, int] = (1, 1)
    # (1,1) keeps the total parameter count inside the expected budget;
    # larger mask kernels remain selectable.
    interaction_kernel: tuple[int, int] = (1, 1)
    merge_kernel: tuple[int, int] = (3, 3)
    num_interactions: int | None = None  # None = one after every RA block

    def __post_init__(self):
        if self.num_ra_blocks < 1:
            raise ValueError(f"num_ra_blocks must be >= 1, got {self.num_ra_blocks}")
        if self.ra_filters < 1:
            raise ValueError(f"ra_filters must be >= 1, got {self.ra_filters}")
        for name, k in (
            ("ra", self.ra_kernel),
            ("upconv", self.upconv_kernel),
            ("interaction", self.interaction_kernel),
            ("merge", self.merge_kernel),
        ):
            _check_odd(name, k)
        if self.num_interactions is not None and not 0 <= self.num_interactions <= self.num_ra_blocks:
            raise ValueError(
                f"num_interactions must be in [0, {self.num_ra_blocks}], got {self.num_interactions}"
            )

    @property
    def interactions(self) -> int:
        return self.num_ra_blocks if self.num_interactions is None else self.num_interactions


def desk_arch() -> IffArchConfig:
    """Small configuration that trains in minutes on one CPU core."""
    return IffArchConfig(num_ra_blocks=2, ra_filters=16)


class IffNetParams:
    """All learnable tensors plus batch-norm running state, keyed by path."""

    def __init__(self, cfg: IffArchConfig):
        self.cfg = cfg
        self.tensors: dict[str, Tensor] = {}
        self.bn_states: dict[str, BatchNormState] = {}

    def __getitem__(self, path: str) -> Tensor:
        try:
            return self.tensors[path]
        except KeyError:
            raise KeyError(f"no parameter at path {path!r}") from None

    def paths(self) -> list[str]:
        return list(self.tensors)

    def zero_grads(self):
        for t in self.tensors.values():
            t.grad = None

    def astype(self, dtype) -> "IffNetParams":
        clone = IffNetParams(self.cfg)
        for path, t in self.tensors.items():
            clone.tensors[path] = Tensor(t.data.astype(dtype), requires_grad=True)
        for path, st in self.bn_states.items():
            fresh = BatchNormState(st.channels, momentum=st.momentum, dtype=dtype)
            fresh.running_mean = st.running_mean.astype(dtype)
            fresh.running_var = st.running_var.astype(dtype)
            clone.bn_states[path] = fresh
        return clone


def param_count(params: IffNetParams, prefix: str = "") -> int:
    """Number of learnable scalars under a path prefix ('' counts everything)."""
    return sum(t.size for path, t in params.tensors.items() if path.startswith(prefix))


def init_params(cfg: IffArchConfig, seed: int = 0, dtype=np.float32) -> IffNetParams:
    """Deterministic initialization: Kaiming-uniform convs, unit BN, 0.25 slopes."""
    rng = np.random.default_rng(seed)
    params = IffNetParams(cfg)
    C = cfg.ra_filters

    def conv(prefix, cout, cin, kernel):
        fan_in = cin * kernel[0] * kernel[1]
        bound = math.sqrt(6.0 / fan_in)
        w = rng.uniform(-bound, bound, size=(cout, cin, kernel[0], kernel[1]))
        params.tensors[f"{prefix}.w"] = Tensor(w.astype(dtype), requires_grad=True)
        params.tensors[f"{prefix}.b"] = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)

    def bn(prefix, channels):
        params.tensors[f"{prefix}.gamma"] = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        params.tensors[f"{prefix}.beta"] = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        params.bn_states[prefix] = BatchNormState(channels, dtype=dtype)

    def slope(prefix, channels):
        params.tensors[f"{prefix}.slope"] = Tensor(
            np.full(channels, 0.25, dtype=dtype), requires_grad=True
        )

    for branch in BRANCHES:
        conv(f"{branch}.up.conv", C, 1, cfg.upconv_kernel)
        bn(f"{branch}.up.bn", C)
        slope(f"{branch}.up.prelu", C)
        for i in range(cfg.num_ra_blocks):
            for j in range(2):
                base = f"{branch}.ra{i}.res{j}"
                conv(f"{base}.conv0", C, C, cfg.ra_kernel)
                bn(f"{base}.bn0", C)
                slope(f"{base}.prelu0", C)
                conv(f"{base}.conv1", C, C, cfg.ra_kernel)
                bn(f"{base}.bn1", C)
                slope(f"{base}.prelu1", C)
            conv(f"{branch}.ra{i}.mix", C, 3 * C, (1, 1))
        conv(f"{branch}.dn.conv", 1, C, cfg.upconv_kernel)
        bn(f"{branch}.dn.bn", 1)
        slope(f"{branch}.dn.prelu", 1)

    for i in range(cfg.interactions):
        for direction in ("n2e", "e2n"):
            conv(f"inter{i}.{direction}.conv", C, 2 * C, cfg.interaction_kernel)
            bn(f"inter{i}.{direction}.bn", C)

    conv("merge.conv0", MERGE_CHANNELS, MERGE_CHANNELS, cfg.merge_kernel)
    conv("merge.conv1", 1, MERGE_CHANNELS, cfg.merge_kernel)
    return params


# ---------------------------------------------------------------------------
# forward blocks
# ---------------------------------------------------------------------------


def _conv(x, params, prefix):
    return conv2d(x, params[f"{prefix}.w"], params[f"{prefix}.b"])


def _bn(x, params, prefix, training):
    return batch_norm(
        x, params[f"{prefix}.gamma"], params[f"{prefix}.beta"], params.bn_states[prefix], training
    )


def _conv_bn_act(x, params, prefix, training):
    h = _conv(x, params, f"{prefix}.conv")
    h = _bn(h, params, f"{prefix}.bn", training)
    return prelu(h, params[f"{prefix}.prelu.slope"])


def up_conv(x: Tensor, params: IffNetParams, branch: str = "enh", training: bool = False) -> Tensor:
    """1 x T x F -> C x T x F channel lift: conv(1x1) -> BN -> PReLU."""
    return _conv_bn_act(x, params, f"{branch}.up", training)


def dn_conv(x: Tensor, params: IffNetParams, branch: str = "enh", training: bool = False) -> Tensor:
    """C x T x F -> 1 x T x F channel restore, mirror of the Up block."""
    return _conv_bn_act(x, params, f"{branch}.dn", training)


def residual_block(x: Tensor, params: IffNetParams, prefix: str, training: bool = False) -> Tensor:
    """conv3x3 -> BN -> PReLU -> conv3x3 -> BN, add skip, PReLU."""
    h = _conv(x, params, f"{prefix}.conv0")
    h = _bn(h, params, f"{prefix}.bn0", training)
    h = prelu(h, params[f"{prefix}.prelu0.slope"])
    h = _conv(h, params, f"{prefix}.conv1")
    h = _bn(h, params, f"{prefix}.bn1", training)
    return prelu(add(h, x), params[f"{prefix}.prelu1.slope"])


def separable_self_attention(x: Tensor, axis: str) -> Tensor:
    """Parameter-free axis-wise self-attention with a residual connection.

    Per sample, q = k = v is the axis reshape of the C x T x F feature; the
    scores q k^T are scaled by 1/sqrt(row width) and softmax-normalized, and
    the mixed values are folded back and added to the input.
    """
    if x.ndim != 4:
        raise ValueError(f"separable_self_attention: expected rank-4 input, got {tuple(x.shape)}")
    n = x.shape[0]
    sample_shape = x.shape[1:]
    mixed = []
    for i in range(n):
        q = reshape_axis(take_sample(x, i), axis)
        scores = scale(matmul(q, transpose2(q)), 1.0 / math.sqrt(q.shape[1]))
        weights = softmax_rows(scores)
        mixed.append(reshape_axis_inv(matmul(weights, q), sample_shape, axis))
    return add(x, stack_samples(mixed))


def attention_row_sums(x: Tensor, axis: str) -> np.ndarray:
    """Row sums of the attention weights for each sample, for diagnostics."""
    sums = []
    for i in range(x.shape[0]):
        q = reshape_axis(take_sample(x, i), axis)
        scores = scale(matmul(q, transpose2(q)), 1.0 / math.sqrt(q.shape[1]))
        sums.append(softmax_rows(scores).data.sum(axis=1))
    return np.stack(sums)


def ra_block(x: Tensor, params: IffNetParams, prefix: str, training: bool = False):
    """Two residual blocks, parallel temporal/frequency attention, 1x1 remix.

    Returns (x_ra, x_res, x_temp, x_freq) so callers can expose the
    intermediates.
    """
    x_res = residual_block(x, params, f"{prefix}.res0", training)
    x_res = residual_block(x_res, params, f"{prefix}.res1", training)
    x_temp = separable_self_attention(x_res, "temporal")
    x_freq = separable_self_attention(x_res, "frequency")
    merged = concat_channels([x_temp, x_freq, x_res])
    x_ra = _conv(merged, params, f"{prefix}.mix")
    return x_ra, x_res, x_temp, x_freq


def interaction(
    x_e: Tensor, x_n: Tensor, params: IffNetParams, prefix: str, training: bool = False
) -> tuple[Tensor, Tensor]:
    """Exchange residual information between the branches.

    n2e: M_N = sigmoid(BN(conv([x_e; x_n])));  x_e' = x_e + M_N * x_n
    e2n: M_E = sigmoid(BN(conv([x_n; x_e])));  x_n' = x_n + M_E * x_e

    Both masks are computed from the original inputs, not sequentially.
    """
    if x_e.shape != x_n.shape:
        raise ValueError(f"interaction: branch shapes {tuple(x_e.shape)} and {tuple(x_n.shape)} differ")
    m_n = sigmoid(_bn(_conv(concat_channels([x_e, x_n]), params, f"{prefix}.n2e.conv"),
                      params, f"{prefix}.n2e.bn", training))
    m_e = sigmoid(_bn(_conv(concat_channels([x_n, x_e]), params, f"{prefix}.e2n.conv"),
                      params, f"{prefix}.e2n.bn", training))
    x_e_out = add(x_e, mul(m_n, x_n))
    x_n_out = add(x_n, mul(m_e, x_e))
    return x_e_out, x_n_out


def merge(
    x_e_in: Tensor,
    x_n_in: Tensor,
    x_e: Tensor,
    x_n: Tensor,
    params: IffNetParams,
    training: bool = False,
) -> tuple[Tensor, Tensor]:
    """Gate the two branch outputs into the fused feature.

    The 4-channel stack [x_e_in, x_n_in, x_e, x_n] passes conv3x3, temporal
    self-attention and conv3x3 into a sigmoid mask M; the fused output is
    x_e_in * M + x_n_in * (1 - M), elementwise convex for M in [0, 1].
    """
    for name, t in (("x_n_in", x_n_in), ("x_e", x_e), ("x_n", x_n)):
        if t.shape != x_e_in.shape:
            raise ValueError(f"merge: {name} shape {tuple(t.shape)} differs from {tuple(x_e_in.shape)}")
    stacked = concat_channels([x_e_in, x_n_in, x_e, x_n])
    h = _conv(stacked, params, "merge.conv0")
    h = separable_self_attention(h, "temporal")
    mask = sigmoid(_conv(h, params, "merge.conv1"))
    fused = affine_combine(x_e_in, x_n_in, mask)
    return mask, fused


@dataclass
class RaBlockState:
    x_res: Tensor
    x_temp: Tensor
    x_freq: Tensor
    x_ra: Tensor
    x_im: Tensor


@dataclass
class BranchState:
    x_up: Tensor
    blocks: list[RaBlockState] = field(default_factory=list)
    x_in: Tensor | None = None


@dataclass
class MergeState:
    stacked: Tensor
    mask: Tensor
    fused: Tensor


@dataclass
class IffDiagnostics:
    enhanced: BranchState
    noisy: BranchState
    merge: MergeState


def _as_batch(x) -> tuple[Tensor, tuple[int, ...]]:
    t = x if isinstance(x, Tensor) else Tensor(np.asarray(x))
    orig = tuple(t.shape)
    if t.ndim == 2:
        return reshape(t, (1, 1) + orig), orig
    if t.ndim == 3:
        return reshape(t, (orig[0], 1, orig[1], orig[2])), orig
    if t.ndim == 4 and t.shape[1] == 1:
        return t, orig
    raise ValueError(f"expected T x F, N x T x F or N x 1 x T x F input, got shape {orig}")


def iffnet_forward(x_e, x_n, params: IffNetParams, training: bool = False):
    """Full two-branch forward pass.

    Accepts T x F, N x T x F or N x 1 x T x F inputs (both alike) and returns
    (X_F, diagnostics) with X_F shaped like the inputs. Diagnostics carry
    every intermediate per branch plus the merge state.
    """
    xe, orig = _as_batch(x_e)
    xn, orig_n = _as_batch(x_n)
    if xe.shape != xn.shape:
        raise ValueError(f"branch inputs differ: {orig} vs {orig_n}")

    cfg = params.cfg
    h_e = up_conv(xe, params, "enh", training)
    h_n = up_conv(xn, params, "noisy", training)
    enh_state = BranchState(x_up=h_e)
    noisy_state = BranchState(x_up=h_n)

    for i in range(cfg.num_ra_blocks):
        ra_e, res_e, temp_e, freq_e = ra_block(h_e, params, f"enh.ra{i}", training)
        ra_n, res_n, temp_n, freq_n = ra_block(h_n, params, f"noisy.ra{i}", training)
        if i < cfg.interactions:
            h_e, h_n = interaction(ra_e, ra_n, params, f"inter{i}", training)
        else:
            h_e, h_n = ra_e, ra_n
        enh_state.blocks.append(RaBlockState(res_e, temp_e, freq_e, ra_e, h_e))
        noisy_state.blocks.append(RaBlockState(res_n, temp_n, freq_n, ra_n, h_n))

    x_e_in = dn_conv(h_e, params, "enh", training)
    x_n_in = dn_conv(h_n, params, "noisy", training)
    enh_state.x_in = x_e_in
    noisy_state.x_in = x_n_in

    mask, fused = merge(x_e_in, x_n_in, xe, xn, params, training)
    merge_state = MergeState(
        stacked=concat_channels([x_e_in, x_n_in, xe, xn]), mask=mask, fused=fused
    )
    out = reshape(fused, orig)
    return out, IffDiagnostics(enhanced=enh_state, noisy=noisy_state, merge=merge_state)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_VERSION = 1


def _fmt_kernel(k) -> str:
    return f"{k[0]},{k[1]}"


def _parse_kernel(s: str) -> tuple[int, int]:
    a, b = s.split(",")
    return int(a), int(b)


def save_checkpoint(params: IffNetParams, out_dir):
    """Write one IFT1 file per parameter path plus running stats and a manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = params.cfg
    for path in sorted(params.tensors):
        iffio.save_tensor(params.tensors[path], out / f"{path}.ift")
    for path in sorted(params.bn_states):
        st = params.bn_states[path]
        iffio.save_tensor(st.running_mean, out / f"{path}.running_mean.ift")
        iffio.save_tensor(st.running_var, out / f"{path}.running_var.ift")
    iffio.write_manifest(
        out / "manifest.txt",
        {
            "version": CHECKPOINT_VERSION,
            "num_ra_blocks": cfg.num_ra_blocks,
            "ra_filters": cfg.ra_filters,
            "ra_kernel": _fmt_kernel(cfg.ra_kernel),
            "upconv_kernel": _fmt_kernel(cfg.upconv_kernel),
            "interaction_kernel": _fmt_kernel(cfg.interaction_kernel),
            "merge_kernel": _fmt_kernel(cfg.merge_kernel),
            "num_interactions": cfg.interactions,
            "param_count": param_count(params),
        },
    )


def load_checkpoint(ckpt_dir) -> IffNetParams:
    root = Path(ckpt_dir)
    entries = iffio.read_manifest(root / "manifest.txt")
    if int(entries["version"]) != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {entries['version']} in {root}")
    cfg = IffArchConfig(
        num_ra_blocks=int(entries["num_ra_blocks"]),
        ra_filters=int(entries["ra_filters"]),
        ra_kernel=_parse_kernel(entries["ra_kernel"]),
        upconv_kernel=_parse_kernel(entries["upconv_kernel"]),
        interaction_kernel=_parse_kernel(entries["interaction_kernel"]),
        merge_kernel=_parse_kernel(entries["merge_kernel"]),
        num_interactions=int(entries["num_interactions"]),
    )
    params = init_params(cfg, seed=0)
    for path, t in params.tensors.items():
        stored = iffio.load_tensor(root / f"{path}.ift")
        if stored.shape != t.shape:
            raise ValueError(
                f"checkpoint tensor {path} has shape {tuple(stored.shape)}, expected {tuple(t.shape)}"
            )
        t.data = stored.data
    for path, st in params.bn_states.items():
        st.running_mean = iffio.load_tensor(root / f"{path}.running_mean.ift").data
        st.running_var = iffio.load_tensor(root / f"{path}.running_var.ift").data
    return params
