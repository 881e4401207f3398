"""Encoder -> scan/frequency blocks -> decoder pipeline, losses and training.

Frames are encoded by two stride-2 conv blocks, mixed by a stack of blocks
that fuse selective-scan route features with a wavelet high-frequency
feature, decoded by two transposed-conv blocks, refined by depthwise convs,
and mapped to either a deterministic frame or a Gaussian (mu, sigma) pair
per pixel.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import hsa, metrics, nd, sfc, ssm, wavelet
from .data import SampleWindow
from .nd import NumericalError, Tensor

FUSIONS = ("hsa", "sum", "cagate")
HEADS = ("deterministic", "gaussian")


@dataclass(frozen=True)
class ModelConfig:
    in_len: int = 14
    out_len: int = 14
    channels: int = 1
    hidden: int = 32
    n_fssm: int = 3
    n_routes: int = 2
    scan_kind: str = "hilbert_temporal_first"
    lambda_grad: float = 0.1
    head: str = "deterministic"
    wavelet_basis: str = "haar"
    fusion: str = "hsa"
    state_size: int = 8
    leaky_slope: float = 0.01

    def __post_init__(self):
        if self.n_fssm < 1:
            raise ValueError("n_fssm must be >= 1")
        if self.n_routes not in (1, 2, 4):
            raise ValueError("n_routes must be 1, 2 or 4")
        if self.lambda_grad < 0:
            raise ValueError("lambda_grad must be >= 0")
        if self.in_len < 1 or self.out_len < 1:
            raise ValueError("window lengths must be >= 1")
        if self.hidden % 2:
            raise ValueError("hidden width must be even")
        if self.scan_kind not in sfc.KINDS:
            raise ValueError(f"unknown scan kind {self.scan_kind!r}")
        if self.head not in HEADS:
            raise ValueError(f"unknown head {self.head!r}")
        if self.fusion not in FUSIONS:
            raise ValueError(f"unknown fusion {self.fusion!r}")

    @property
    def head_channels(self) -> int:
        return 1 if self.head == "deterministic" else 2

    @property
    def gn_groups(self) -> int:
        return math.gcd(4, self.hidden // 2)


@dataclass
class Forecast:
    """Predicted frames: mean in [0, 1], sigma > 0 when probabilistic."""

    mean: np.ndarray              # [L_o, 1, H, W]
    sigma: np.ndarray | None = None


@dataclass
class FssmParams:
    mamba: ssm.MambaBlockParams
    gains: Tensor                       # [D, 3] detail-band gains
    fuse_hsa: hsa.HsaParams | None
    fuse_cagate: hsa.CaGateParams | None
    dw_k: Tensor                        # [D, 3, 3]
    dw_b: Tensor                        # [D]

    def tensors(self, prefix: str):
        yield from self.mamba.tensors(f"{prefix}.mamba")
        yield f"{prefix}.gains", self.gains
        if self.fuse_hsa is not None:
            yield from self.fuse_hsa.tensors(f"{prefix}.hsa")
        if self.fuse_cagate is not None:
            yield from self.fuse_cagate.tensors(f"{prefix}.cagate")
        yield f"{prefix}.dw_k", self.dw_k
        yield f"{prefix}.dw_b", self.dw_b


@dataclass
class ModelParams:
    enc1_k: Tensor
    enc1_b: Tensor
    enc1_g: Tensor
    enc1_be: Tensor
    enc2_k: Tensor
    enc2_b: Tensor
    enc2_g: Tensor
    enc2_be: Tensor
    blocks: list[FssmParams]
    dec1_k: Tensor
    dec1_b: Tensor
    dec1_g: Tensor
    dec1_be: Tensor
    dec2_k: Tensor
    dec2_b: Tensor
    dec2_g: Tensor
    dec2_be: Tensor
    ref1_k: Tensor
    ref1_b: Tensor
    ref2_k: Tensor
    ref2_b: Tensor
    head_k: Tensor
    head_b: Tensor
    time_w: Tensor | None = None
    time_b: Tensor | None = None

    def named_tensors(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name in ("enc1_k", "enc1_b", "enc1_g", "enc1_be",
                     "enc2_k", "enc2_b", "enc2_g", "enc2_be"):
            out[f"enc.{name}"] = getattr(self, name)
        for i, blk in enumerate(self.blocks):
            out.update(blk.tensors(f"fssm{i}"))
        for name in ("dec1_k", "dec1_b", "dec1_g", "dec1_be",
                     "dec2_k", "dec2_b", "dec2_g", "dec2_be",
                     "ref1_k", "ref1_b", "ref2_k", "ref2_b",
                     "head_k", "head_b"):
            out[f"dec.{name}"] = getattr(self, name)
        if self.time_w is not None:
            out["time.w"] = self.time_w
            out["time.b"] = self.time_b
        return out


def init_params(rng: np.random.Generator, config: ModelConfig) -> ModelParams:
    d = config.hidden
    dh = d // 2

    def conv_k(co, ci, k):
        return nd.param(rng.standard_normal((co, ci, k, k)).astype(np.float32)
                        / math.sqrt(ci * k * k))

    def dw_k(c, k=3):
        return nd.param(rng.standard_normal((c, k, k)).astype(np.float32) / k)

    def zeros(*shape):
        return nd.param(np.zeros(shape, dtype=np.float32))

    def ones(*shape):
        return nd.param(np.ones(shape, dtype=np.float32))

    blocks = []
    for _ in range(config.n_fssm):
        blocks.append(FssmParams(
            mamba=ssm.init_mamba_params(rng, d, config.state_size),
            gains=ones(d, 3),
            fuse_hsa=hsa.init_hsa_params(rng, d) if config.fusion == "hsa" else None,
            fuse_cagate=(hsa.init_ca_gate_params(rng, d)
                         if config.fusion == "cagate" else None),
            dw_k=dw_k(d),
            dw_b=zeros(d),
        ))

    params = ModelParams(
        enc1_k=conv_k(dh, config.channels, 3), enc1_b=zeros(dh),
        enc1_g=ones(dh), enc1_be=zeros(dh),
        enc2_k=conv_k(d, dh, 3), enc2_b=zeros(d),
        enc2_g=ones(d), enc2_be=zeros(d),
        blocks=blocks,
        dec1_k=conv_k(d, dh, 4), dec1_b=zeros(dh),
        dec1_g=ones(dh), dec1_be=zeros(dh),
        dec2_k=conv_k(dh, dh, 4), dec2_b=zeros(dh),
        dec2_g=ones(dh), dec2_be=zeros(dh),
        ref1_k=dw_k(dh), ref1_b=zeros(dh),
        ref2_k=dw_k(dh), ref2_b=zeros(dh),
        head_k=conv_k(config.head_channels, dh, 1), head_b=zeros(config.head_channels),
    )
    if config.out_len != config.in_len:
        params.time_w = nd.param(
            rng.standard_normal((config.in_len, config.out_len)).astype(np.float32)
            / math.sqrt(config.in_len))
        params.time_b = zeros(config.out_len)
    return params


@lru_cache(maxsize=32)
def _cached_routes(kind: str, dims: tuple[int, int, int], n_routes: int):
    return tuple(sfc.routes(sfc.make_order(kind, dims), n_routes))


def _channel_ln(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    c = gamma.shape[0]
    return nd.layernorm(x, nd.reshape(gamma, (1, c, 1, 1)),
                        nd.reshape(beta, (1, c, 1, 1)), axis=1)


def _route_pair(routed: list[Tensor]) -> tuple[Tensor, Tensor]:
    """Reduce per-route outputs to the two sequence features the fuser takes."""
    if len(routed) == 1:
        return routed[0], routed[0]
    if len(routed) == 2:
        return routed[0], routed[1]
    fwd = nd.mul(nd.add(routed[0], routed[2]), 0.5)
    bwd = nd.mul(nd.add(routed[1], routed[3]), 0.5)
    return fwd, bwd


def forward_features(x: Tensor, params: ModelParams, config: ModelConfig) -> Tensor:
    """Raw head output [L_o, head_channels, H, W]; no clamping."""
    l_in, c, h, w = x.shape
    if l_in != config.in_len or c != config.channels:
        raise ValueError(f"input shape {x.shape} does not match config "
                         f"({config.in_len}, {config.channels}, H, W)")
    if h % 4 or w % 4:
        raise ValueError(f"spatial dims ({h}, {w}) must be divisible by 4")
    slope = config.leaky_slope

    z = nd.conv2d(x, params.enc1_k, params.enc1_b, stride=2, padding=1)
    z = nd.leaky_relu(_channel_ln(z, params.enc1_g, params.enc1_be), slope)
    z = nd.conv2d(z, params.enc2_k, params.enc2_b, stride=2, padding=1)
    z = nd.leaky_relu(_channel_ln(z, params.enc2_g, params.enc2_be), slope)

    dims = (l_in, h // 4, w // 4)
    orders = list(_cached_routes(config.scan_kind, dims, config.n_routes))

    for blk in params.blocks:
        seq = ssm.volume_to_seq(z)
        routed = [ssm.seq_to_volume(r, dims)
                  for r in ssm.mamba_block(seq, orders, blk.mamba)]
        x1, x2 = _route_pair(routed)
        xf = wavelet.freq_branch(z, blk.gains, config.wavelet_basis)
        if config.fusion == "hsa":
            fused = hsa.hsa_fuse(x1, x2, xf, blk.fuse_hsa)
        elif config.fusion == "sum":
            fused = hsa.sum_fuse(x1, x2, xf)
        else:
            fused = hsa.ca_gate_fuse(x1, x2, xf, blk.fuse_cagate)
        mixed = nd.leaky_relu(nd.depthwise_conv2d(fused, blk.dw_k, blk.dw_b), slope)
        z = nd.add(z, mixed)

    y = nd.conv_transpose2d(z, params.dec1_k, params.dec1_b, stride=2, padding=1)
    y = nd.leaky_relu(nd.groupnorm(y, config.gn_groups, params.dec1_g, params.dec1_be), slope)
    y = nd.conv_transpose2d(y, params.dec2_k, params.dec2_b, stride=2, padding=1)
    y = nd.leaky_relu(nd.groupnorm(y, config.gn_groups, params.dec2_g, params.dec2_be), slope)

    y = nd.leaky_relu(nd.depthwise_conv2d(y, params.ref1_k, params.ref1_b), slope)
    y = nd.leaky_relu(nd.depthwise_conv2d(y, params.ref2_k, params.ref2_b), slope)
    y = nd.conv2d(y, params.head_k, params.head_b)

    if config.out_len != config.in_len:
        y = nd.moveaxis(nd.linear(nd.moveaxis(y, 0, -1), params.time_w, params.time_b),
                        -1, 0)
    return y


def _split_head(raw: Tensor, config: ModelConfig) -> tuple[Tensor, Tensor | None]:
    if config.head == "deterministic":
        return raw, None
    mu, s = nd.chunk(raw, 2, axis=1)
    # softplus keeps sigma positive; the floor guards float32 underflow
    return mu, nd.add(nd.softplus(s), 1e-6)


def forward(x: Tensor | np.ndarray, params: ModelParams,
            config: ModelConfig) -> Forecast:
    """Inference: clamp the mean into [0, 1] and expose sigma when gaussian."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    raw = forward_features(x, params, config)
    mu, sigma = _split_head(raw, config)
    return Forecast(mean=np.clip(mu.data, 0.0, 1.0),
                    sigma=None if sigma is None else sigma.data.copy())


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def loss_rec(yhat: Tensor, y: Tensor) -> Tensor:
    """Mean absolute difference."""
    if yhat.shape != y.shape:
        raise ValueError(f"shape mismatch {yhat.shape} vs {y.shape}")
    return nd.mean(nd.absolute(nd.sub(yhat, y)))


_DIFF_H = Tensor(np.array([[[0, 0, 0], [0, -1, 0], [0, 1, 0]]], dtype=np.float32))
_DIFF_W = Tensor(np.array([[[0, 0, 0], [0, -1, 1], [0, 0, 0]]], dtype=np.float32))


def _spatial_diffs(x: Tensor) -> tuple[Tensor, Tensor]:
    # forward differences with replicate boundary (last row/column diff is 0)
    c = x.shape[1]
    kh = _DIFF_H if c == 1 else Tensor(np.repeat(_DIFF_H.data, c, axis=0))
    kw = _DIFF_W if c == 1 else Tensor(np.repeat(_DIFF_W.data, c, axis=0))
    return (nd.depthwise_conv2d(x, kh, pad_mode="replicate"),
            nd.depthwise_conv2d(x, kw, pad_mode="replicate"))


def loss_grad(yhat: Tensor, y: Tensor) -> Tensor:
    """Mean absolute difference of forward spatial gradients (H and W)."""
    if yhat.shape != y.shape:
        raise ValueError(f"shape mismatch {yhat.shape} vs {y.shape}")
    dh_p, dw_p = _spatial_diffs(yhat)
    dh_t, dw_t = _spatial_diffs(y)
    return nd.mul(nd.add(nd.mean(nd.absolute(nd.sub(dh_p, dh_t))),
                         nd.mean(nd.absolute(nd.sub(dw_p, dw_t)))), 0.5)


def loss_total(yhat: Tensor, y: Tensor, lam: float) -> Tensor:
    """Reconstruction plus lam-weighted gradient loss."""
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    rec = loss_rec(yhat, y)
    if lam == 0:
        return rec
    return nd.add(rec, nd.mul(loss_grad(yhat, y), float(lam)))


_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


def loss_nll(mu: Tensor, sigma: Tensor, y: Tensor) -> Tensor:
    """Mean Gaussian negative log-likelihood."""
    if mu.shape != y.shape or sigma.shape != y.shape:
        raise ValueError("mu/sigma/y shapes must match")
    if (sigma.data <= 0).any():
        raise ValueError("sigma must be strictly positive")
    z2 = nd.square(nd.sub(y, mu))
    var2 = nd.mul(nd.square(sigma), 2.0)
    return nd.mean(nd.add(nd.add(nd.log(sigma), nd.div(z2, var2)), _HALF_LOG_2PI))


def sample_loss(raw: Tensor, target: Tensor, config: ModelConfig) -> Tensor:
    mu, sigma = _split_head(raw, config)
    if sigma is None:
        return loss_total(mu, target, config.lambda_grad)
    return loss_nll(mu, sigma, target)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


class AdamW:
    """Decoupled-weight-decay Adam over a named parameter dict."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.01):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self._m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self._v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.b1 ** self.t
        bc2 = 1.0 - self.b2 ** self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            m = self._m[k]
            v = self._v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data -= np.float32(self.lr) * update

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    params: ModelParams
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_val_mae: float = math.inf


def worker_count() -> int:
    env = os.environ.get("ICESSM_THREADS")
    if env:
        return max(1, int(env))
    return 1


def validation_mae(val_set: list[SampleWindow], params: ModelParams,
                   config: ModelConfig) -> float:
    total = 0.0
    for swin in val_set:
        pred = forward(Tensor(swin.input), params, config)
        total += metrics.mae(pred.mean, swin.target)
    return total / len(val_set)


def train(train_set: list[SampleWindow], val_set: list[SampleWindow],
          config: ModelConfig, seed: int = 0, max_epochs: int = 50,
          patience: int = 10, batch_size: int = 4, lr: float = 1e-3,
          weight_decay: float = 0.01, max_steps: int | None = None,
          log=None) -> TrainResult:
    """AdamW training with early stopping on validation MAE.

    Deterministic for a fixed seed. Aborts with the offending step index if
    the loss goes non-finite.
    """
    if not train_set or not val_set:
        raise ValueError("train and validation splits must be nonempty")
    rng = np.random.default_rng(seed)
    params = init_params(rng, config)
    named = params.named_tensors()
    opt = AdamW(named, lr=lr, weight_decay=weight_decay)

    result = TrainResult(params=params)
    best_state: dict[str, np.ndarray] | None = None
    bad_epochs = 0
    global_step = 0
    done = False

    for epoch in range(max_epochs):
        order = rng.permutation(len(train_set))
        epoch_loss = 0.0
        n_batches = 0
        for start in range(0, len(order), batch_size):
            batch = [train_set[i] for i in order[start:start + batch_size]]
            opt.zero_grad()
            with nd.Tape() as tape:
                losses = [sample_loss(forward_features(Tensor(s.input), params, config),
                                      Tensor(s.target), config) for s in batch]
                total = losses[0]
                for piece in losses[1:]:
                    total = nd.add(total, piece)
                total = nd.mul(total, 1.0 / len(batch))
                loss_val = float(total.data)
                if not math.isfinite(loss_val):
                    raise NumericalError(f"non-finite loss at step {global_step}")
                tape.backward(total)
            opt.step()
            epoch_loss += loss_val
            n_batches += 1
            global_step += 1
            if max_steps is not None and global_step >= max_steps:
                done = True
                break

        val_mae = validation_mae(val_set, params, config)
        row = {"epoch": epoch, "train_loss": epoch_loss / max(n_batches, 1),
               "val_mae": val_mae, "lr": lr}
        result.history.append(row)
        if log:
            log(row)

        if val_mae < result.best_val_mae:
            result.best_val_mae = val_mae
            result.best_epoch = epoch
            best_state = {k: p.data.copy() for k, p in named.items()}
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= patience:
                done = True
        if done:
            break

    if best_state is not None:
        for k, p in named.items():
            p.data = best_state[k]
    return result


def history_csv(history: list[dict]) -> str:
    lines = ["epoch,train_loss,val_mae,lr"]
    for row in history:
        lines.append(f"{row['epoch']},{row['train_loss']:.6f},"
                     f"{row['val_mae']:.6f},{row['lr']}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# recursive forecasting
# ---------------------------------------------------------------------------


def recursive_forecast(x: np.ndarray, params: ModelParams, config: ModelConfig,
                       steps: int = 1) -> np.ndarray:
    """Chain prediction windows, re-feeding each clamped window as the next
    input; returns [steps * out_len, 1, H, W]."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    stream = np.asarray(x, dtype=np.float32)
    outputs = []
    for _ in range(steps):
        pred = forward(Tensor(stream[-config.in_len:]), params, config).mean
        outputs.append(pred)
        stream = np.concatenate([stream, pred], axis=0)
    return np.concatenate(outputs, axis=0)


# ---------------------------------------------------------------------------
# checkpoint helpers
# ---------------------------------------------------------------------------


def save_checkpoint(path, params: ModelParams) -> None:
    nd.save_params(path, params.named_tensors())


def load_checkpoint(path, config: ModelConfig) -> ModelParams:
    """Rebuild the parameter structure for ``config`` from a checkpoint."""
    stored = nd.load_params(path)
    params = init_params(np.random.default_rng(0), config)
    named = params.named_tensors()
    if set(stored) != set(named):
        missing = set(named) - set(stored)
        extra = set(stored) - set(named)
        raise ValueError(f"checkpoint does not match config "
                         f"(missing={sorted(missing)[:3]}, extra={sorted(extra)[:3]})")
    for k, p in named.items():
        if stored[k].data.shape != p.data.shape:
            raise ValueError(f"checkpoint tensor {k} has shape "
                             f"{stored[k].data.shape}, expected {p.data.shape}")
        p.data = stored[k].data
    return params
