"""Multi-scale causal fusion with learnable graph propagation and residual.

The block runs "temporal first, spatial second": the (B, C, S, D) input is
viewed as (B*C, D, S) for the causal branches (D are conv channels, S is
time), then as (B, C, D*S) for channel mixing, where C are graph nodes. The
two views are bijective reshapes of the same buffer, so the residual sum is
well defined, and the post-residual batch norm treats C as its channel axis.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import ConfigError, DimensionError, ValidationError
from .layers import BatchNorm1d, CausalBranch, Dropout, check_mode
from .tensor import Tensor, absolute, as_tensor, clamp_min, elu, matmul, reduce_sum


class AdjacencyParams:
    """Unconstrained learnable C x C matrix plus the degree clamp floor."""

    def __init__(self, channels: int, eps_deg: float = 1e-6,
                 rng: np.random.Generator | None = None, init_scale: float = 0.05):
        self.channels = channels
        self.eps_deg = eps_deg
        # Small random init (zeros, i.e. an identity graph, when no rng is
        # given) so structure can grow away from the ELU kink.
        if rng is None or init_scale == 0.0:
            values = np.zeros((channels, channels))
        else:
            values = rng.normal(0.0, init_scale, (channels, channels))
        self.A = Tensor(values, requires_grad=True)

    def named_parameters(self, prefix: str = ""):
        return [(prefix + "A", self.A)]


def normalize_adjacency(params: AdjacencyParams) -> Tensor:
    """ELU + self-loops + symmetric degree normalization.

    Degrees use absolute row sums clamped below by eps_deg: ELU makes
    off-diagonal entries of the self-looped matrix lie in (-1, inf), so raw
    row sums can be nonpositive and the inverse square root would otherwise
    be undefined. The normalized matrix therefore keeps signed entries; the
    alternative repair (clamping the self-looped matrix to be nonnegative)
    would forbid inhibitory mixing and is deliberately not used.
    """
    a = params.A
    if not np.isfinite(a.data).all():
        raise ValidationError("adjacency parameters contain non-finite values")
    c = params.channels
    tilde = elu(a) + Tensor(np.eye(c))
    deg = clamp_min(reduce_sum(absolute(tilde), [1]), params.eps_deg)
    inv_sqrt = deg ** -0.5
    return inv_sqrt.reshape(c, 1) * tilde * inv_sqrt.reshape(1, c)


def graph_propagate(o: Tensor, a_hat: Tensor) -> Tensor:
    """Apply the normalized adjacency to every batch element: Z[b] = A_hat @ o[b]."""
    o, a_hat = as_tensor(o), as_tensor(a_hat)
    if o.ndim != 3:
        raise DimensionError(f"graph_propagate expects (B, C, F), got {o.shape}")
    if a_hat.shape != (o.shape[1], o.shape[1]):
        raise DimensionError(f"adjacency {a_hat.shape} does not match channel count {o.shape[1]}")
    return matmul(a_hat, o)


def multiscale_fuse(x: Tensor, branches: Sequence[CausalBranch], mode: str) -> Tensor:
    """Sum of all causal-branch outputs (same shape as the input)."""
    check_mode(mode)
    if not branches:
        raise ConfigError("multiscale_fuse requires at least one branch")
    out = branches[0](x, mode)
    for branch in branches[1:]:
        y = branch(x, mode)
        if y.shape != out.shape:
            raise DimensionError(f"branch output shapes differ: {out.shape} vs {y.shape}")
        out = out + y
    return out


def residual_postnorm(z: Tensor, x: Tensor, bn: BatchNorm1d, dropout: Dropout, mode: str) -> Tensor:
    """H = Dropout(ELU(BN(Z + x)))."""
    z, x = as_tensor(z), as_tensor(x)
    if z.shape != x.shape:
        raise DimensionError(f"residual shapes differ: {z.shape} vs {x.shape}")
    return dropout(elu(bn(z + x, mode)), mode)


class MCRBlock:
    """Multi-scale causal branches, graph propagation, residual post-norm."""

    def __init__(self, channels: int, feat_dim: int, kernels: Sequence[int] = (3, 5),
                 dropout_rate: float = 0.1, rng: np.random.Generator | None = None,
                 dropout_rng: np.random.Generator | None = None,
                 bn_momentum: float = 0.1, bn_eps: float = 1e-5, eps_deg: float = 1e-6):
        if not kernels:
            raise ConfigError("kernel set must be nonempty")
        if any(k < 1 for k in kernels):
            raise ConfigError(f"all kernel sizes must be >= 1, got {list(kernels)}")
        rng = rng if rng is not None else np.random.default_rng()
        self.channels = channels
        self.feat_dim = feat_dim
        self.kernel_sizes = tuple(int(k) for k in kernels)
        self.branches = [
            CausalBranch(feat_dim, k, dropout_rate, rng, dropout_rng=dropout_rng,
                         bn_momentum=bn_momentum, bn_eps=bn_eps)
            for k in self.kernel_sizes
        ]
        self.adjacency = AdjacencyParams(channels, eps_deg=eps_deg, rng=rng)
        self.post_bn = BatchNorm1d(channels, momentum=bn_momentum, eps=bn_eps)
        self.post_dropout = Dropout(dropout_rate, dropout_rng if dropout_rng is not None else rng)

    def temporal_path(self, f: Tensor, mode: str) -> Tensor:
        """Multi-scale fusion on the (B*C, D, S) view; exposed for causality checks."""
        f = as_tensor(f)
        b, c, s, d = self._check_shape(f)
        t_view = f.transpose((0, 1, 3, 2)).reshape(b * c, d, s)
        return multiscale_fuse(t_view, self.branches, mode)

    def __call__(self, f: Tensor, mode: str) -> Tensor:
        check_mode(mode)
        f = as_tensor(f)
        b, c, s, d = self._check_shape(f)
        t_view = f.transpose((0, 1, 3, 2)).reshape(b * c, d, s)
        fused = multiscale_fuse(t_view, self.branches, mode)
        o_sp = fused.reshape(b, c, d * s)
        x_sp = t_view.reshape(b, c, d * s)
        a_hat = normalize_adjacency(self.adjacency)
        z = graph_propagate(o_sp, a_hat)
        h_sp = residual_postnorm(z, x_sp, self.post_bn, self.post_dropout, mode)
        return h_sp.reshape(b, c, d, s).transpose((0, 1, 3, 2))

    def _check_shape(self, f: Tensor):
        if f.ndim != 4:
            raise DimensionError(f"block expects (B, C, S, D), got {f.shape}")
        b, c, s, d = f.shape
        if c != self.channels:
            raise DimensionError(f"block configured for C={self.channels}, got C={c}")
        if d != self.feat_dim:
            raise DimensionError(f"block configured for D={self.feat_dim}, got D={d}")
        return b, c, s, d

    def named_parameters(self, prefix: str = ""):
        named = []
        for i, branch in enumerate(self.branches):
            named.extend(branch.named_parameters(f"{prefix}branches.{i}."))
        named.extend(self.adjacency.named_parameters(prefix + "adjacency."))
        named.extend(self.post_bn.named_parameters(prefix + "post_bn."))
        return named

    def named_buffers(self, prefix: str = ""):
        named = []
        for i, branch in enumerate(self.branches):
            named.extend(branch.named_buffers(f"{prefix}branches.{i}."))
        named.extend(self.post_bn.named_buffers(prefix + "post_bn."))
        return named
