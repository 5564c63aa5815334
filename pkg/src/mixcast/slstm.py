"""Stabilized exponential-gated recurrent cell, blocks, and stacks.

The cell keeps four running states: cell ``c``, normalizer ``n``, hidden
``h``, and stabilizer ``m``.  Input and forget gates are exponential; the
stabilizer is the running max of their pre-activations and is subtracted
inside the exponentials so the hidden output is computed without overflow
while staying mathematically unchanged.

Recurrent weight matrices are block-diagonal over heads: they are stored
densely together with a binary mask, and the optimizer re-applies the mask
after every update so off-block entries stay exactly zero.

State tensors carry a leading batch axis: a state component is ``[B, D]``
where ``B`` independent sequences share the parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

LN_EPS = 1e-5


@dataclass
class BlockConfig:
    """Width and regularization switches of one recurrent block."""

    d_hidden: int
    num_heads: int = 1
    conv_width: int = 0  # 0 disables the causal convolution; else 2 or 4
    dropout_rate: float = 0.0

    def __post_init__(self):
        if self.d_hidden <= 0 or self.num_heads <= 0:
            raise ValueError("d_hidden and num_heads must be positive")
        if self.d_hidden % self.num_heads != 0:
            raise ValueError(
                f"d_hidden {self.d_hidden} not divisible by num_heads {self.num_heads}"
            )
        if self.conv_width not in (0, 2, 4):
            raise ValueError(f"conv_width must be 0, 2, or 4, got {self.conv_width}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must lie in [0,1), got {self.dropout_rate}")


def head_mask(d_hidden: int, num_heads: int) -> np.ndarray:
    """Binary [D,D] mask that is 1 inside each head's diagonal block."""
    width = d_hidden // num_heads
    mask = np.zeros((d_hidden, d_hidden), dtype=np.float64)
    for k in range(num_heads):
        lo, hi = k * width, (k + 1) * width
        mask[lo:hi, lo:hi] = 1.0
    return mask


@dataclass
class SLstmParams:
    """Input weights W_*, block-diagonal recurrent weights R_*, biases b_*."""

    w_z: Tensor
    w_i: Tensor
    w_f: Tensor
    w_o: Tensor
    r_z: Tensor
    r_i: Tensor
    r_f: Tensor
    r_o: Tensor
    b_z: Tensor
    b_i: Tensor
    b_f: Tensor
    b_o: Tensor
    num_heads: int = 1
    mask: np.ndarray = field(default=None, repr=False)

    @property
    def d_hidden(self) -> int:
        return self.w_z.shape[0]

    @property
    def d_in(self) -> int:
        return self.w_z.shape[1]

    def named_parameters(self, prefix: str = ""):
        for name in ("w_z", "w_i", "w_f", "w_o"):
            yield prefix + name, getattr(self, name), None
        for name in ("r_z", "r_i", "r_f", "r_o"):
            yield prefix + name, getattr(self, name), self.mask
        for name in ("b_z", "b_i", "b_f", "b_o"):
            yield prefix + name, getattr(self, name), None


@dataclass
class SLstmState:
    """Recurrent state: each component is [B, D_hidden]."""

    c: Tensor
    n: Tensor
    h: Tensor
    m: Tensor


@dataclass
class GateActivations:
    z: Tensor
    i: Tensor
    f: Tensor
    o: Tensor
    i_tilde: Tensor
    f_tilde: Tensor


def zero_state(batch: int, d_hidden: int, dtype=None) -> SLstmState:
    """Neutral initial state c = n = h = m = 0."""
    def zeros():
        return Tensor(np.zeros((batch, d_hidden)), dtype=dtype)

    return SLstmState(c=zeros(), n=zeros(), h=zeros(), m=zeros())


def init_slstm_params(d_in, d_hidden, num_heads, rng, dtype=None) -> SLstmParams:
    """Uniform +-1/sqrt(fan_in) weights, forget bias +1, other biases 0."""
    mask = head_mask(d_hidden, num_heads)

    def uniform(shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, dtype=dtype)

    block_width = d_hidden // num_heads
    params = {}
    for name in ("w_z", "w_i", "w_f", "w_o"):
        params[name] = uniform((d_hidden, d_in), d_in)
    for name in ("r_z", "r_i", "r_f", "r_o"):
        r = uniform((d_hidden, d_hidden), block_width)
        r.data *= mask.astype(r.data.dtype)
        params[name] = r
    for name in ("b_z", "b_i", "b_o"):
        params[name] = Tensor(np.zeros((1, d_hidden)), requires_grad=True, dtype=dtype)
    params["b_f"] = Tensor(np.ones((1, d_hidden)), requires_grad=True, dtype=dtype)
    return SLstmParams(num_heads=num_heads, mask=mask, **params)


class _TransposedWeights:
    """Per-forward cache of W/R transposes so long sequences reuse them."""

    __slots__ = ("wz", "wi", "wf", "wo", "rz", "ri", "rf", "ro")

    def __init__(self, p: SLstmParams):
        self.wz = T.transpose(p.w_z)
        self.wi = T.transpose(p.w_i)
        self.wf = T.transpose(p.w_f)
        self.wo = T.transpose(p.w_o)
        self.rz = T.transpose(p.r_z)
        self.ri = T.transpose(p.r_i)
        self.rf = T.transpose(p.r_f)
        self.ro = T.transpose(p.r_o)


def _check_finite_pre(name: str, pre: Tensor) -> None:
    if not np.isfinite(pre.data).all():
        raise FloatingPointError(f"non-finite pre-activation in {name} gate")


def _step(p: SLstmParams, tw: _TransposedWeights, x: Tensor, prev: SLstmState,
          x_if: Tensor | None = None):
    """One recurrence step on [B, D_in] input(s); returns (state, gates).

    x feeds the cell-input and output gates; x_if (defaulting to x) feeds the
    exponential input/forget gates, which is where the optional causal
    convolution taps in.
    """
    if x_if is None:
        x_if = x
    h_prev = prev.h

    pre_z = T.matmul(x, tw.wz) + T.matmul(h_prev, tw.rz) + p.b_z
    pre_o = T.matmul(x, tw.wo) + T.matmul(h_prev, tw.ro) + p.b_o
    i_tilde = T.matmul(x_if, tw.wi) + T.matmul(h_prev, tw.ri) + p.b_i
    f_tilde = T.matmul(x_if, tw.wf) + T.matmul(h_prev, tw.rf) + p.b_f
    for name, pre in (("input", i_tilde), ("forget", f_tilde),
                      ("cell-input", pre_z), ("output", pre_o)):
        _check_finite_pre(name, pre)

    m = T.max2(f_tilde + prev.m, i_tilde)
    i = T.exp(i_tilde - m)
    f = T.exp(f_tilde + prev.m - m)
    z = T.tanh(pre_z)
    o = T.sigmoid(pre_o)

    c = f * prev.c + i * z
    n = f * prev.n + i
    h = o * c / n

    state = SLstmState(c=c, n=n, h=h, m=m)
    gates = GateActivations(z=z, i=i, f=f, o=o, i_tilde=i_tilde, f_tilde=f_tilde)
    return state, gates


def cell_step(params: SLstmParams, x, prev: SLstmState, x_if=None):
    """Single recurrence update; x is [B, D_in] (or [D_in], promoted to B=1)."""
    x = T.as_tensor(x)
    if x.data.ndim == 1:
        x = T.reshape(x, (1, x.shape[0]))
    if x.shape[1] != params.d_in:
        raise ShapeError(f"token width {x.shape[1]} != cell input width {params.d_in}")
    if prev.h.shape[1] != params.d_hidden:
        raise ShapeError(
            f"state width {prev.h.shape[1]} != hidden width {params.d_hidden}"
        )
    return _step(params, _TransposedWeights(params), x, prev, x_if)


def _sequence(p: SLstmParams, tokens: list[Tensor], init: SLstmState,
              tokens_if: list[Tensor] | None = None):
    tw = _TransposedWeights(p)
    state = init
    hiddens = []
    for t, x in enumerate(tokens):
        x_if = tokens_if[t] if tokens_if is not None else None
        state, _ = _step(p, tw, x, state, x_if)
        hiddens.append(state.h)
    return hiddens, state


def sequence_forward(params: SLstmParams, tokens, init: SLstmState | None = None) -> Tensor:
    """Fold the cell left-to-right over tokens [L, D_in]; returns [L, D_hidden]."""
    tokens = T.as_tensor(tokens)
    length = tokens.shape[0]
    if length < 1:
        raise ShapeError("sequence_forward needs at least one token")
    if init is None:
        init = zero_state(1, params.d_hidden, dtype=tokens.data.dtype)
    rows = [T.slice_axis(tokens, 0, t, t + 1) for t in range(length)]
    hiddens, _ = _sequence(params, rows, init)
    return T.concat(hiddens, axis=0)


@dataclass
class BlockWeights:
    """One residual block: layer norm, optional causal conv, cell, projection."""

    cell: SLstmParams
    ln_gamma: Tensor
    ln_beta: Tensor
    proj_w: Tensor
    conv_kernel: Tensor | None = None  # [width, D], tap j applies to token t-j

    def named_parameters(self, prefix: str = ""):
        yield from self.cell.named_parameters(prefix + "cell.")
        yield prefix + "ln_gamma", self.ln_gamma, None
        yield prefix + "ln_beta", self.ln_beta, None
        yield prefix + "proj_w", self.proj_w, None
        if self.conv_kernel is not None:
            yield prefix + "conv_kernel", self.conv_kernel, None


def init_block_weights(cfg: BlockConfig, rng, dtype=None) -> BlockWeights:
    d = cfg.d_hidden
    cell = init_slstm_params(d, d, cfg.num_heads, rng, dtype=dtype)
    ln_gamma = Tensor(np.ones((1, d)), requires_grad=True, dtype=dtype)
    ln_beta = Tensor(np.zeros((1, d)), requires_grad=True, dtype=dtype)
    bound = 1.0 / np.sqrt(d)
    proj_w = Tensor(rng.uniform(-bound, bound, size=(d, d)), requires_grad=True, dtype=dtype)
    conv = None
    if cfg.conv_width > 0:
        cbound = 1.0 / np.sqrt(cfg.conv_width)
        conv = Tensor(rng.uniform(-cbound, cbound, size=(cfg.conv_width, d)),
                      requires_grad=True, dtype=dtype)
    return BlockWeights(cell=cell, ln_gamma=ln_gamma, ln_beta=ln_beta,
                        proj_w=proj_w, conv_kernel=conv)


def _layer_norm(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    mu = x.mean(axis=1, keepdims=True)
    var = x.var_pop(axis=1, keepdims=True)
    return gamma * ((x - mu) / T.sqrt(var + LN_EPS)) + beta


def _block_tokens(cfg: BlockConfig, w: BlockWeights, tokens: list[Tensor],
                  training: bool, rng) -> list[Tensor]:
    d = cfg.d_hidden
    if tokens[0].shape[1] != d:
        raise ShapeError(f"token width {tokens[0].shape[1]} != block width {d}")
    if training and cfg.dropout_rate > 0.0 and rng is None:
        raise ValueError("training with dropout needs an rng")
    batch = tokens[0].shape[0]

    normed = [_layer_norm(x, w.ln_gamma, w.ln_beta) for x in tokens]

    tokens_if = None
    if cfg.conv_width > 0 and w.conv_kernel is not None:
        # Causal depthwise taps added on top of the normed token, so a zero
        # kernel reduces exactly to the conv-disabled path.
        taps = [T.slice_axis(w.conv_kernel, 0, j, j + 1) for j in range(cfg.conv_width)]
        tokens_if = []
        for t in range(len(normed)):
            acc = normed[t]
            for j in range(cfg.conv_width):
                if t - j >= 0:
                    acc = acc + taps[j] * normed[t - j]
            tokens_if.append(acc)

    init = zero_state(batch, d, dtype=tokens[0].data.dtype)
    hiddens, _ = _sequence(w.cell, normed, init, tokens_if)

    proj_t = T.transpose(w.proj_w)
    out = []
    for t, h in enumerate(hiddens):
        y = T.matmul(h, proj_t)
        if training and cfg.dropout_rate > 0.0:
            keep = 1.0 - cfg.dropout_rate
            mask = (rng.random(size=y.shape) < keep).astype(y.data.dtype) / keep
            y = y * Tensor(mask, dtype=y.data.dtype)
        out.append(tokens[t] + y)
    return out


def block_forward(cfg: BlockConfig, weights: BlockWeights, tokens,
                  training: bool = False, rng=None) -> Tensor:
    """Residual block over tokens [L, D]: LN, optional conv, cell, projection,
    dropout, skip connection.  Width-preserving."""
    tokens = T.as_tensor(tokens)
    rows = [T.slice_axis(tokens, 0, t, t + 1) for t in range(tokens.shape[0])]
    out = _block_tokens(cfg, weights, rows, training, rng)
    return T.concat(out, axis=0)


def _stack_tokens(cfg: BlockConfig, blocks: list[BlockWeights], tokens: list[Tensor],
                  training: bool, rng) -> list[Tensor]:
    for w in blocks:
        tokens = _block_tokens(cfg, w, tokens, training, rng)
    return tokens


def stack_forward(cfg: BlockConfig, blocks: list[BlockWeights], tokens,
                  training: bool = False, rng=None) -> Tensor:
    """Sequential composition of block_forward; the same stack serves every view."""
    if len(blocks) < 1:
        raise ValueError("stack needs at least one block")
    tokens = T.as_tensor(tokens)
    rows = [T.slice_axis(tokens, 0, t, t + 1) for t in range(tokens.shape[0])]
    out = _stack_tokens(cfg, blocks, rows, training, rng)
    return T.concat(out, axis=0)
