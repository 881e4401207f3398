"""Selective state-space scan over permuted spatiotemporal sequences.

The scan is the diagonal input-dependent recurrence

    h_l = exp(dt_l * A) * h_{l-1} + dt_l * B_l * x_l,   y_l = <C_l, h_l> + D * x_l

with dt, B, C projected from the input at every step. A = -exp(a_log) stays
strictly negative, and dt = softplus(...) strictly positive, so the decay
factors sit in (0, 1) and the state cannot blow up on bounded input.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import nd, sfc
from .nd import Tensor
from .sfc import ScanOrder


@dataclass
class SsmParams:
    """Parameters of one selective scan over D channels."""

    a_log: Tensor    # [D, S]; A = -exp(a_log)
    d_skip: Tensor   # [D]
    w_delta: Tensor  # [D, 1]
    b_delta: Tensor  # [1]
    w_b: Tensor      # [D, S]
    w_c: Tensor      # [D, S]

    @property
    def state_size(self) -> int:
        return self.a_log.shape[1]

    def tensors(self, prefix: str = "ssm"):
        for name in ("a_log", "d_skip", "w_delta", "b_delta", "w_b", "w_c"):
            yield f"{prefix}.{name}", getattr(self, name)


def init_ssm_params(rng: np.random.Generator, d: int, state_size: int = 8) -> SsmParams:
    scale = 1.0 / math.sqrt(d)
    a_log = np.tile(np.log(np.arange(1, state_size + 1, dtype=np.float32)), (d, 1))
    return SsmParams(
        a_log=nd.param(a_log),
        d_skip=nd.param(np.ones(d, dtype=np.float32)),
        w_delta=nd.param(rng.standard_normal((d, 1)).astype(np.float32) * scale),
        # softplus(b_delta) == 0.1 at init
        b_delta=nd.param(np.full(1, math.log(math.expm1(0.1)), dtype=np.float32)),
        w_b=nd.param(rng.standard_normal((d, state_size)).astype(np.float32) * scale),
        w_c=nd.param(rng.standard_normal((d, state_size)).astype(np.float32) * scale),
    )


def selective_scan(x: Tensor, p: SsmParams, direction: str = "forward") -> Tensor:
    """Scan x[L, D] through the recurrence; 'backward' processes the reversed
    sequence and re-reverses the output."""
    length, d = x.shape
    if length < 1:
        raise ValueError("sequence must have at least one step")
    if direction not in ("forward", "backward"):
        raise ValueError(f"direction must be forward or backward, got {direction!r}")
    if direction == "backward":
        flip = np.arange(length - 1, -1, -1)
        return nd.gather(selective_scan(nd.gather(x, flip), p, "forward"), flip)

    dt = nd.softplus(nd.add(nd.matmul(x, p.w_delta), p.b_delta))      # [L, 1]
    b = nd.matmul(x, p.w_b)                                           # [L, S]
    c = nd.matmul(x, p.w_c)                                           # [L, S]
    a = nd.neg(nd.exp(p.a_log))                                       # [D, S]

    s = p.state_size
    abar = nd.exp(nd.mul(nd.reshape(dt, (length, 1, 1)), nd.reshape(a, (1, d, s))))
    dtb = nd.mul(dt, b)                                               # [L, S]
    bx = nd.mul(nd.reshape(dtb, (length, 1, s)), nd.reshape(x, (length, d, 1)))
    y = nd.ssm_recurrence(abar, bx, c)                                # [L, D]
    return nd.add(y, nd.mul(x, nd.reshape(p.d_skip, (1, d))))


def volume_to_seq(v: Tensor) -> Tensor:
    """[T, C, H, W] -> [T*H*W, C] in raster order."""
    t, c, h, w = v.shape
    return nd.reshape(nd.moveaxis(v, 1, -1), (t * h * w, c))


def seq_to_volume(seq: Tensor, dims: tuple[int, int, int]) -> Tensor:
    """Inverse of :func:`volume_to_seq`."""
    t, h, w = dims
    c = seq.shape[1]
    return nd.moveaxis(nd.reshape(seq, (t, h, w, c)), -1, 1)


def hilbert_ssm(v: Tensor, orders: list[ScanOrder], p: SsmParams) -> list[Tensor]:
    """Scan a [T, C, H, W] volume along each route; one output volume per route.

    Route fusion happens downstream, the outputs are not averaged here.
    """
    if not orders:
        raise ValueError("need at least one scan order")
    t, c, h, w = v.shape
    for o in orders:
        if o.dims != (t, h, w):
            raise ValueError(f"order dims {o.dims} do not match volume {(t, h, w)}")
    flat = volume_to_seq(v)
    outs = []
    for o in orders:
        seq = nd.gather(flat, o.forward)
        y = selective_scan(seq, p)
        outs.append(seq_to_volume(nd.gather(y, o.inverse()), (t, h, w)))
    return outs


@dataclass
class MambaBlockParams:
    """Gated sequence block: LN -> expand -> causal conv -> scan -> gate -> out."""

    ln_gamma: Tensor  # [D]
    ln_beta: Tensor   # [D]
    w_in: Tensor      # [D, 2D]
    b_in: Tensor      # [2D]
    conv_k: Tensor    # [2D, k]
    conv_b: Tensor    # [2D]
    w_gate: Tensor    # [D, 2D]
    b_gate: Tensor    # [2D]
    ssm: SsmParams    # over 2D channels
    w_out: Tensor     # [2D, D]
    b_out: Tensor     # [D]

    def tensors(self, prefix: str = "mamba"):
        for name in ("ln_gamma", "ln_beta", "w_in", "b_in", "conv_k", "conv_b",
                     "w_gate", "b_gate", "w_out", "b_out"):
            yield f"{prefix}.{name}", getattr(self, name)
        yield from self.ssm.tensors(f"{prefix}.ssm")


def init_mamba_params(rng: np.random.Generator, d: int, state_size: int = 8,
                      conv_kernel: int = 3) -> MambaBlockParams:
    d2 = 2 * d

    def lin(din, dout):
        return nd.param(rng.standard_normal((din, dout)).astype(np.float32)
                        / math.sqrt(din))

    return MambaBlockParams(
        ln_gamma=nd.param(np.ones(d, dtype=np.float32)),
        ln_beta=nd.param(np.zeros(d, dtype=np.float32)),
        w_in=lin(d, d2),
        b_in=nd.param(np.zeros(d2, dtype=np.float32)),
        conv_k=nd.param(rng.standard_normal((d2, conv_kernel)).astype(np.float32)
                        / math.sqrt(conv_kernel)),
        conv_b=nd.param(np.zeros(d2, dtype=np.float32)),
        w_gate=lin(d, d2),
        b_gate=nd.param(np.zeros(d2, dtype=np.float32)),
        ssm=init_ssm_params(rng, d2, state_size),
        w_out=lin(d2, d),
        b_out=nd.param(np.zeros(d, dtype=np.float32)),
    )


def mamba_block(x_seq: Tensor, orders: list[ScanOrder],
                p: MambaBlockParams) -> list[Tensor]:
    """Process a raster-ordered [L, D] sequence; returns one [L, D] per route.

    The inner width is twice the input width; the same scan parameters serve
    every route.
    """
    length, d = x_seq.shape
    dims = orders[0].dims
    if dims[0] * dims[1] * dims[2] != length:
        raise ValueError(f"order dims {dims} incompatible with sequence length {length}")

    xn = nd.layernorm(x_seq, p.ln_gamma, p.ln_beta)
    inner = nd.silu(nd.conv1d_depthwise(nd.linear(xn, p.w_in, p.b_in),
                                        p.conv_k, p.conv_b))
    routed = hilbert_ssm(seq_to_volume(inner, dims), orders, p.ssm)
    gate = nd.silu(nd.linear(xn, p.w_gate, p.b_gate))
    outs = []
    for vol in routed:
        gated = nd.mul(volume_to_seq(vol), gate)
        outs.append(nd.linear(gated, p.w_out, p.b_out))
    return outs
