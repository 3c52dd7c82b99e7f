"""Sequence encoders and the classification head.

Three linear-time encoders over the selected instance sequence: bidirectional
LSTM and GRU stacks, and a stack of gated selective state-space blocks. All
of them map a (lambda, d) input to a (lambda, d) output, which then passes
through a residual connection, a shared normalization, global average pooling
and the bag classifier. The same module owns the instance classifier that
produces per-instance logits for selection and for the instance loss term.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import aps as aps_mod
from . import numeric as nc
from .config import EncoderConfig
from .errors import NumericError, ShapeError
from .numeric import Tape, Tensor
from .seeding import INIT, derive_rng

NORM_EPS = 1e-5

# per-channel discretization step range used to seed dt_proj.b
DT_INIT_MIN = 1e-3
DT_INIT_MAX = 1e-1


class ModelParams:
    """Named parameter tensors plus non-trainable buffers.

    Insertion order is the checkpoint manifest order, so construction must
    stay deterministic.
    """

    def __init__(self, d: int, c: int):
        self.d = d
        self.c = c
        self.tensors: dict[str, Tensor] = {}
        self.buffers: dict[str, Tensor] = {}

    def add(self, name: str, data: np.ndarray) -> Tensor:
        t = Tensor(np.asarray(data, dtype=np.float64))
        self.tensors[name] = t
        return t

    def add_buffer(self, name: str, data: np.ndarray) -> Tensor:
        t = Tensor(np.asarray(data, dtype=np.float64))
        self.buffers[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def trainable(self) -> list[Tensor]:
        return list(self.tensors.values())

    def zero_grads(self) -> None:
        for t in self.tensors.values():
            t.zero_grad()

    def n_parameters(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    def copy(self) -> "ModelParams":
        out = ModelParams(self.d, self.c)
        for name, t in self.tensors.items():
            out.add(name, t.data.copy())
        for name, t in self.buffers.items():
            out.add_buffer(name, t.data.copy())
        return out

    def check_finite_grads(self) -> None:
        for name, t in self.tensors.items():
            if not np.all(np.isfinite(t.grad)):
                raise NumericError(f"non-finite gradient in parameter {name!r}")


def _uniform_fan_in(rng, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / math.sqrt(max(1, fan_in))
    return rng.uniform(-bound, bound, size=shape)


def _orthogonal(rng, n: int) -> np.ndarray:
    a = rng.standard_normal((n, n))
    q, r = np.linalg.qr(a)
    return q * np.sign(np.diag(r))


def _orthogonal_gates(rng, h: int, gates: int) -> np.ndarray:
    return np.concatenate([_orthogonal(rng, h) for _ in range(gates)], axis=1)


def dt_rank(d: int) -> int:
    return max(1, math.ceil(d / 16))


def init_params(d: int, c: int, config: EncoderConfig, seed: int) -> ModelParams:
    """Build all parameter tensors for one model, deterministically from seed."""
    config.validate()
    rng = derive_rng(seed, INIT)
    p = ModelParams(d, c)

    p.add("instance.W", _uniform_fan_in(rng, d, (d, c)))
    p.add("instance.b", np.zeros(c))

    if config.kind in ("lstm", "gru"):
        h = config.resolved_hidden(d)
        gates = 4 if config.kind == "lstm" else 3
        for layer in range(config.layers):
            d_in = d if layer == 0 else 2 * h
            for direction in ("fwd", "bwd"):
                base = f"enc.l{layer}.{direction}"
                p.add(f"{base}.W", _uniform_fan_in(rng, d_in, (d_in, gates * h)))
                p.add(f"{base}.U", _orthogonal_gates(rng, h, gates))
                b = np.zeros(gates * h)
                if config.kind == "lstm":
                    b[h:2 * h] = 1.0       # forget gate opens at init
                p.add(f"{base}.b", b)
        if 2 * h != d:
            p.add("enc.proj.W", _uniform_fan_in(rng, 2 * h, (2 * h, d)))
            p.add("enc.proj.b", np.zeros(d))
        p.add("norm.gain", np.ones(d))
        p.add("norm.bias", np.zeros(d))
    else:
        m = config.mamba
        e_d = m.expansion * d
        r = dt_rank(d)
        for j in range(m.depth):
            base = f"enc.blk{j}"
            p.add(f"{base}.norm.gain", np.ones(d))
            p.add(f"{base}.in_proj.W", _uniform_fan_in(rng, d, (d, 2 * e_d)))
            p.add(f"{base}.conv.w", _uniform_fan_in(rng, m.conv_kernel, (m.conv_kernel, e_d)))
            p.add(f"{base}.conv.b", np.zeros(e_d))
            p.add(f"{base}.x_proj.W", _uniform_fan_in(rng, e_d, (e_d, r + 2 * m.state_dim)))
            p.add(f"{base}.dt_proj.W", _uniform_fan_in(rng, r, (r, e_d)))
            # bias chosen so softplus(bias) lands log-uniformly in [DT_INIT_MIN, DT_INIT_MAX]
            dt = np.exp(rng.uniform(math.log(DT_INIT_MIN), math.log(DT_INIT_MAX), size=e_d))
            p.add(f"{base}.dt_proj.b", np.log(np.expm1(dt)))
            # state decay constants span [1, state_dim] per channel
            p.add(f"{base}.a_log", np.tile(np.log(np.arange(1, m.state_dim + 1, dtype=np.float64)),
                                           (e_d, 1)))
            p.add(f"{base}.skip_d", np.ones(e_d))
            p.add(f"{base}.out_proj.W", _uniform_fan_in(rng, e_d, (e_d, d)))
        p.add("norm.gain", np.ones(d))

    p.add("bag.W", _uniform_fan_in(rng, d, (d, c)))
    p.add("bag.b", np.zeros(c))
    return p


def instance_logits(features: Tensor, params: ModelParams, tape: Tape | None = None) -> Tensor:
    """Shared affine map from (N, d) features to (N, C) logits."""
    if features.data.shape[1] != params.d:
        raise ShapeError(
            f"features have dimension {features.data.shape[1]} but model expects {params.d}"
        )
    return nc.affine_rows(features, params["instance.W"], params["instance.b"], tape)


# ---------------------------------------------------------------------------
# recurrent encoders
#
# Each timestep is one fused tape operation with a hand-derived backward, so
# sequence cost stays at a couple of python calls per step. The replayed
# closures implement standard backpropagation through time.


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def gru_cell(xw: Tensor, t: int, h_prev: Tensor, u: Tensor,
             tape: Tape | None = None) -> Tensor:
    """One GRU step. ``xw`` holds precomputed input contributions (x @ W + b).

    Gate layout along the 3h axis: update ``z``, reset ``r``, candidate ``n``;
    the candidate uses the reset-gated recurrent term tanh(x_n + r * (U_n h)).
    """
    h_size = h_prev.data.shape[0]
    xt = xw.data[t]
    uh = h_prev.data @ u.data
    z = _sigmoid(xt[:h_size] + uh[:h_size])
    r = _sigmoid(xt[h_size:2 * h_size] + uh[h_size:2 * h_size])
    uh_n = uh[2 * h_size:]
    n = np.tanh(xt[2 * h_size:] + r * uh_n)
    out = Tensor(z * h_prev.data + (1.0 - z) * n)
    if tape is not None:
        def backward():
            g = out.grad
            dz = g * (h_prev.data - n)
            dn_pre = g * (1.0 - z) * (1.0 - n * n)
            dr = dn_pre * uh_n
            dz_pre = dz * z * (1.0 - z)
            dr_pre = dr * r * (1.0 - r)
            duh = np.concatenate([dz_pre, dr_pre, dn_pre * r])
            dxt = np.concatenate([dz_pre, dr_pre, dn_pre])
            xw.grad[t] += dxt
            u.grad += np.outer(h_prev.data, duh)
            h_prev.grad += g * z + u.data @ duh
        tape.record(backward)
    return out


def lstm_cell(xw: Tensor, t: int, h_prev: Tensor, c_prev: Tensor, u: Tensor,
              tape: Tape | None = None) -> tuple[Tensor, Tensor]:
    """One LSTM step; gate layout along the 4h axis: i, f, g, o."""
    h_size = h_prev.data.shape[0]
    pre = xw.data[t] + h_prev.data @ u.data
    i = _sigmoid(pre[:h_size])
    f = _sigmoid(pre[h_size:2 * h_size])
    g_in = np.tanh(pre[2 * h_size:3 * h_size])
    o = _sigmoid(pre[3 * h_size:])
    c_new = Tensor(f * c_prev.data + i * g_in)
    th = np.tanh(c_new.data)
    h_new = Tensor(o * th)
    if tape is not None:
        def backward():
            gh = h_new.grad
            dc = c_new.grad + gh * o * (1.0 - th * th)
            dpre = np.concatenate([
                dc * g_in * i * (1.0 - i),
                dc * c_prev.data * f * (1.0 - f),
                dc * i * (1.0 - g_in * g_in),
                gh * th * o * (1.0 - o),
            ])
            xw.grad[t] += dpre
            u.grad += np.outer(h_prev.data, dpre)
            h_prev.grad += u.data @ dpre
            c_prev.grad += dc * f
        tape.record(backward)
    return h_new, c_new


def _scan_rnn(x: Tensor, w: Tensor, u: Tensor, b: Tensor, kind: str, reverse: bool,
              tape: Tape | None, label: str) -> list[Tensor]:
    """One directional pass; returns hidden vectors indexed by original position."""
    steps = x.data.shape[0]
    h_size = u.data.shape[0]
    xw = nc.affine_rows(x, w, b, tape)      # input contributions for all steps at once
    h = Tensor(np.zeros(h_size))
    c = Tensor(np.zeros(h_size)) if kind == "lstm" else None
    out: list[Tensor | None] = [None] * steps
    order = range(steps - 1, -1, -1) if reverse else range(steps)
    for t in order:
        if kind == "gru":
            h = gru_cell(xw, t, h, u, tape)
        else:
            h, c = lstm_cell(xw, t, h, c, u, tape)
        if not np.all(np.isfinite(h.data)):
            raise NumericError(f"non-finite hidden state at timestep {t} in {label}")
        out[t] = h
    return out


def _scan_rnn_infer(x: np.ndarray, w: np.ndarray, u: np.ndarray, b: np.ndarray,
                    kind: str, reverse: bool, label: str) -> np.ndarray:
    """Gradient-free directional pass; same arithmetic as the taped cells."""
    steps = x.shape[0]
    h_size = u.shape[0]
    xw = x @ w + b
    h = np.zeros(h_size)
    c = np.zeros(h_size)
    out = np.empty((steps, h_size))
    order = range(steps - 1, -1, -1) if reverse else range(steps)
    for t in order:
        xt = xw[t]
        uh = h @ u
        if kind == "gru":
            z = _sigmoid(xt[:h_size] + uh[:h_size])
            r = _sigmoid(xt[h_size:2 * h_size] + uh[h_size:2 * h_size])
            n = np.tanh(xt[2 * h_size:] + r * uh[2 * h_size:])
            h = z * h + (1.0 - z) * n
        else:
            pre = xt + uh
            i = _sigmoid(pre[:h_size])
            f = _sigmoid(pre[h_size:2 * h_size])
            g_in = np.tanh(pre[2 * h_size:3 * h_size])
            o = _sigmoid(pre[3 * h_size:])
            c = f * c + i * g_in
            h = o * np.tanh(c)
        out[t] = h
    if not np.all(np.isfinite(out)):
        bad = int(np.flatnonzero(~np.isfinite(out).all(axis=1))[0])
        raise NumericError(f"non-finite hidden state at timestep {bad} in {label}")
    return out


def encode_rnn(x: Tensor, params: ModelParams, config: EncoderConfig,
               tape: Tape | None = None, training: bool = False,
               dropout_rng: np.random.Generator | None = None) -> Tensor:
    """Stacked bidirectional LSTM/GRU encoding of a (lambda, d) sequence."""
    stream = x
    for layer in range(config.layers):
        names = (f"enc.l{layer}.fwd", f"enc.l{layer}.bwd")
        if tape is None:
            halves = [_scan_rnn_infer(stream.data, params[f"{n}.W"].data, params[f"{n}.U"].data,
                                      params[f"{n}.b"].data, config.kind, n.endswith("bwd"),
                                      f"{config.kind} layer {layer} {n[-3:]}")
                      for n in names]
            stream = Tensor(np.concatenate(halves, axis=1))
        else:
            fwd = _scan_rnn(stream, params[f"{names[0]}.W"], params[f"{names[0]}.U"],
                            params[f"{names[0]}.b"], config.kind, False, tape,
                            f"{config.kind} layer {layer} fwd")
            bwd = _scan_rnn(stream, params[f"{names[1]}.W"], params[f"{names[1]}.U"],
                            params[f"{names[1]}.b"], config.kind, True, tape,
                            f"{config.kind} layer {layer} bwd")
            rows = [nc.concat_vecs([f, b], tape) for f, b in zip(fwd, bwd)]
            stream = nc.stack_rows(rows, tape)
        if training and config.dropout > 0 and layer + 1 < config.layers:
            stream = nc.dropout(stream, config.dropout, dropout_rng, tape)
    if "enc.proj.W" in params:
        stream = nc.affine_rows(stream, params["enc.proj.W"], params["enc.proj.b"], tape)
    return stream


# ---------------------------------------------------------------------------
# selective state-space encoder


def ssm_step(delta: Tensor, xc: Tensor, b_seq: Tensor, c_seq: Tensor, t: int,
             a: Tensor, h_prev: Tensor, tape: Tape | None = None) -> tuple[Tensor, Tensor]:
    """One diagonal state-space step at time ``t``.

    State update ``h = exp(dt * A) * h_prev + (dt * B_t) * x_t`` with readout
    ``y = <h, C_t> + (skip handled by the caller)``. ``delta``/``xc`` are
    (steps, channels); ``b_seq``/``c_seq`` are (steps, state); ``a`` is the
    (channels, state) decay matrix; ``h_prev`` is (channels, state).
    """
    dt = delta.data[t]
    x_t = xc.data[t]
    b_t = b_seq.data[t]
    c_t = c_seq.data[t]
    decay = np.exp(dt[:, None] * a.data)
    h_new = Tensor(decay * h_prev.data + (dt * x_t)[:, None] * b_t[None, :])
    y = Tensor(h_new.data @ c_t)
    if tape is not None:
        def backward():
            gh = h_new.grad + np.outer(y.grad, c_t)
            c_seq.grad[t] += h_new.data.T @ y.grad
            h_prev.grad += gh * decay
            g_decay = gh * h_prev.data * decay
            a.grad += g_decay * dt[:, None]
            gdtx = gh @ b_t
            b_seq.grad[t] += gh.T @ (dt * x_t)
            delta.grad[t] += (g_decay * a.data).sum(axis=1) + gdtx * x_t
            xc.grad[t] += gdtx * dt
        tape.record(backward)
    return h_new, y


def _ssm_block(stream: Tensor, params: ModelParams, base: str, config: EncoderConfig,
               tape: Tape | None, training: bool,
               dropout_rng: np.random.Generator | None, block_idx: int) -> Tensor:
    m = config.mamba
    d = stream.data.shape[1]
    e_d = m.expansion * d
    s_dim = m.state_dim
    r = dt_rank(d)

    xn = nc.rms_norm_rows(stream, params[f"{base}.norm.gain"], NORM_EPS, tape)
    proj = nc.matmul(xn, params[f"{base}.in_proj.W"], tape)
    xb = nc.slice_cols(proj, 0, e_d, tape)
    zb = nc.slice_cols(proj, e_d, 2 * e_d, tape)
    xc = nc.silu_t(nc.causal_conv1d(xb, params[f"{base}.conv.w"], params[f"{base}.conv.b"], tape),
                   tape)
    xp = nc.matmul(xc, params[f"{base}.x_proj.W"], tape)
    dt_low = nc.slice_cols(xp, 0, r, tape)
    b_seq = nc.slice_cols(xp, r, r + s_dim, tape)
    c_seq = nc.slice_cols(xp, r + s_dim, r + 2 * s_dim, tape)
    delta = nc.softplus_t(
        nc.affine_rows(dt_low, params[f"{base}.dt_proj.W"], params[f"{base}.dt_proj.b"], tape),
        tape)
    a = nc.axpb(nc.exp_t(params[f"{base}.a_log"], tape), -1.0, 0.0, tape)   # always negative

    state = Tensor(np.zeros((e_d, s_dim)))
    ys = []
    for t in range(stream.data.shape[0]):
        state, y_t = ssm_step(delta, xc, b_seq, c_seq, t, a, state, tape)
        if not np.all(np.isfinite(state.data)):
            raise NumericError(f"non-finite state in block {block_idx} at timestep {t}")
        ys.append(y_t)
    y = nc.stack_rows(ys, tape)
    y = nc.add(y, nc.mul_rowvec(xc, params[f"{base}.skip_d"], tape), tape)
    gated = nc.mul(y, nc.silu_t(zb, tape), tape)
    out = nc.matmul(gated, params[f"{base}.out_proj.W"], tape)
    if training and config.dropout > 0:
        out = nc.dropout(out, config.dropout, dropout_rng, tape)
    return nc.add(stream, out, tape)


def encode_ssm(x: Tensor, params: ModelParams, config: EncoderConfig,
               tape: Tape | None = None, training: bool = False,
               dropout_rng: np.random.Generator | None = None) -> Tensor:
    """Causal selective-SSM encoding of a (lambda, d) sequence."""
    stream = x
    for j in range(config.mamba.depth):
        stream = _ssm_block(stream, params, f"enc.blk{j}", config, tape, training,
                            dropout_rng, j)
    return stream


def encode(x: Tensor, params: ModelParams, config: EncoderConfig,
           tape: Tape | None = None, training: bool = False,
           dropout_rng: np.random.Generator | None = None) -> Tensor:
    if config.kind == "mamba":
        return encode_ssm(x, params, config, tape, training, dropout_rng)
    return encode_rnn(x, params, config, tape, training, dropout_rng)


# ---------------------------------------------------------------------------
# head and full forward pass


@dataclass
class ForwardTrace:
    """Everything the loss and the exporters need from one bag's pass."""

    x_sel: Tensor                # (lambda_eff, d) selected features, original order
    h: Tensor                    # (lambda_eff, d) encoder output
    h_res: Tensor                # (lambda_eff, d) normalized residual
    z_bag: Tensor                # (d,) pooled bag representation
    bag_logits: Tensor           # (C,)
    instance_logits: Tensor      # (N, C) over the whole bag
    aps: aps_mod.APSResult
    order: list[int] = field(default_factory=list)   # row i of x_sel is bag instance order[i]


def head(x: Tensor, h: Tensor, params: ModelParams, kind: str,
         tape: Tape | None = None) -> tuple[Tensor, Tensor, Tensor]:
    """Residual + norm + pooling + bag classifier; returns (h_res, z_bag, logits)."""
    if x.data.shape != h.data.shape:
        raise ShapeError(f"head: input {x.data.shape} vs encoded {h.data.shape}")
    res = nc.add(h, x, tape)
    if kind == "mamba":
        h_res = nc.rms_norm_rows(res, params["norm.gain"], NORM_EPS, tape)
    else:
        h_res = nc.layer_norm_rows(res, params["norm.gain"], params["norm.bias"], NORM_EPS, tape)
    z_bag = nc.mean_rows(h_res, tape)
    logits = nc.add(nc.matmul(z_bag, params["bag.W"], tape), params["bag.b"], tape)
    return h_res, z_bag, logits


def apply_feature_scaling(features: np.ndarray, params: ModelParams) -> np.ndarray:
    """Apply the stored per-feature z-scoring buffers, when present."""
    feats = np.asarray(features, dtype=np.float64)
    if "scaler.mean" in params.buffers:
        mean = params.buffers["scaler.mean"].data
        std = params.buffers["scaler.std"].data
        feats = (feats - mean) / std
    return feats


def forward(features: np.ndarray, params: ModelParams, config: EncoderConfig,
            weights: aps_mod.APSWeights, big_lambda: int, strategy: str = "aps",
            tape: Tape | None = None, training: bool = False,
            dropout_rng: np.random.Generator | None = None,
            select_rng: np.random.Generator | None = None) -> ForwardTrace:
    """Full pipeline on one bag: instance logits, selection, encoding, head.

    Selected instances enter the encoder in their original bag order, never
    in score order, so the sequence keeps whatever spatial or storage
    structure the bag came with.
    """
    feats = apply_feature_scaling(features, params)
    x_all = Tensor(feats)
    inst = instance_logits(x_all, params, tape)
    result = aps_mod.select_with_strategy(feats, inst.data, weights, big_lambda,
                                          strategy, select_rng)
    order = sorted(result.selected)
    x_sel = Tensor(feats[order])
    h = encode(x_sel, params, config, tape, training, dropout_rng)
    h_res, z_bag, logits = head(x_sel, h, params, config.kind, tape)
    return ForwardTrace(x_sel=x_sel, h=h, h_res=h_res, z_bag=z_bag, bag_logits=logits,
                        instance_logits=inst, aps=result, order=order)
