"""Batched network building blocks on top of :mod:`ldlmoe.autodiff`.

Every block carries a leading "stack" axis so that all experts of a model run
through one set of numpy calls.  Bidirectional LSTMs put the backward
direction into the same stack axis and use a per-stack reverse flag.
"""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, record

def _runs(flags):
    """Maximal runs of equal flags as (slice, flag)."""
    start = 0
    for i in range(1, len(flags) + 1):
        if i == len(flags) or flags[i] != flags[start]:
            yield slice(start, i), bool(flags[start])
            start = i


def _flip_stacks(a: np.ndarray, reverse: np.ndarray) -> np.ndarray:
    """Contiguous copy of a time-major (T, S, ...) array with the reversed stacks
    flipped in time.  Applying it twice gives back the original order."""
    out = np.empty(a.shape)
    for sl, rev in _runs(reverse):
        out[:, sl] = a[::-1, sl] if rev else a[:, sl]
    return out


def lstm(x: Tensor, W: Tensor, U: Tensor, b: Tensor, reverse: np.ndarray) -> Tensor:
    """Run a stack of LSTMs over time in one fused op.

    x: (S or 1, B, T, I); W: (S, I, 4h); U: (S, h, 4h); b: (S, 4h);
    reverse: bool (S,) -- stacks that consume the sequence back to front.
    Returns hidden states (S, B, T, h) indexed by *input* time.
    Gate layout along the 4h axis is [input, forget, cell, output].
    Internally everything is time-major in processing order.
    """
    xs, Wd, Ud, bd = x.data, W.data, U.data, b.data
    S, I, four_h = Wd.shape
    h = four_h // 4
    if xs.ndim != 4 or xs.shape[-1] != I or xs.shape[0] not in (1, S):
        raise ad.ShapeError(f"lstm: input shape {xs.shape} does not match weights {Wd.shape}")
    if Ud.shape != (S, h, four_h) or bd.shape != (S, four_h):
        raise ad.ShapeError(f"lstm: recurrent/bias shapes {Ud.shape}, {bd.shape} vs {Wd.shape}")
    Sx, B, T, _ = xs.shape
    reverse = np.asarray(reverse, dtype=bool)

    xt = np.moveaxis(xs, 2, 0)  # (T, Sx, B, I)
    if Sx == 1:
        xt = np.broadcast_to(xt, (T, S, B, I))
    xp = _flip_stacks(xt, reverse)
    xw = np.matmul(xp, Wd)
    xw += bd[:, None, :]
    # cell-candidate slot uses tanh(z) = 2 * sigmoid(2z) - 1
    scale = np.ones(four_h)
    scale[2 * h:3 * h] = 2.0

    gates = np.empty((T, S, B, four_h))
    cells = np.zeros((T + 1, S, B, h))
    tcells = np.empty((T, S, B, h))
    hs = np.zeros((T + 1, S, B, h))
    with np.errstate(over="ignore"):
        for s in range(T):
            z = xw[s] + np.matmul(hs[s], Ud)
            z *= -scale
            a = gates[s]
            np.exp(z, out=a)
            a += 1.0
            np.reciprocal(a, out=a)
            a[..., 2 * h:3 * h] *= 2.0
            a[..., 2 * h:3 * h] -= 1.0
            c = cells[s + 1]
            np.multiply(a[..., h:2 * h], cells[s], out=c)
            c += a[..., :h] * a[..., 2 * h:3 * h]
            np.tanh(c, out=tcells[s])
            np.multiply(a[..., 3 * h:], tcells[s], out=hs[s + 1])

    out = np.ascontiguousarray(np.moveaxis(_flip_stacks(hs[1:], reverse), 0, 2))  # (S, B, T, h)

    def pullback(g):
        gt = _flip_stacks(np.moveaxis(g, 2, 0), reverse)  # (T, S, B, h)
        dz_all = np.empty((T, S, B, four_h))
        dh_next = np.zeros((S, B, h))
        dc_next = np.zeros((S, B, h))
        Ut = np.ascontiguousarray(np.swapaxes(Ud, -1, -2))
        for s in range(T - 1, -1, -1):
            a = gates[s]
            gi, gf, gg, go = a[..., :h], a[..., h:2 * h], a[..., 2 * h:3 * h], a[..., 3 * h:]
            tc = tcells[s]
            dh = gt[s] + dh_next
            dc = dh * go
            dc *= 1.0 - tc * tc
            dc += dc_next
            dz = dz_all[s]
            dz[..., :h] = dc * gg * gi * (1.0 - gi)
            dz[..., h:2 * h] = dc * cells[s] * gf * (1.0 - gf)
            dz[..., 2 * h:3 * h] = dc * gi * (1.0 - gg * gg)
            dz[..., 3 * h:] = dh * tc * go * (1.0 - go)
            dc_next = dc * gf
            dh_next = np.matmul(dz, Ut)
        # weight gradients: per-step outer products, summed over time
        dU = np.matmul(np.swapaxes(hs[:T], -1, -2), dz_all).sum(axis=0)
        dW = np.matmul(np.swapaxes(xp, -1, -2), dz_all).sum(axis=0)
        db = dz_all.sum(axis=(0, 2))
        dx = None
        if x.tracked:
            dxt = _flip_stacks(np.matmul(dz_all, np.swapaxes(Wd, -1, -2)), reverse)
            if Sx == 1:
                dxt = dxt.sum(axis=1, keepdims=True)
            dx = np.ascontiguousarray(np.moveaxis(dxt, 0, 2))
        return dx, dW, dU, db

    return record("lstm", out, (x, W, U, b), pullback)


def glorot(rng: np.random.Generator, shape: tuple, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def init_lstm_stack(params: dict, prefix: str, rng: np.random.Generator, S: int,
                    n_in: int, hidden: int, n_layers: int) -> None:
    """Bidirectional multi-layer LSTM weights for ``S`` independent experts."""
    for layer in range(n_layers):
        i_dim = n_in if layer == 0 else 2 * hidden
        W = glorot(rng, (2 * S, i_dim, 4 * hidden), i_dim, hidden)
        U = np.stack([np.linalg.qr(rng.standard_normal((4 * hidden, hidden)))[0].T
                      for _ in range(2 * S)])
        b = np.zeros((2 * S, 4 * hidden))
        b[:, hidden:2 * hidden] = 1.0  # forget-gate bias
        params[f"{prefix}.l{layer}.W"] = Tensor(W, requires_grad=True)
        params[f"{prefix}.l{layer}.U"] = Tensor(U, requires_grad=True)
        params[f"{prefix}.l{layer}.b"] = Tensor(b, requires_grad=True)


def bilstm_forward(params: dict, prefix: str, x: Tensor, S: int, n_layers: int) -> tuple[Tensor, Tensor]:
    """Stacked bidirectional LSTM for ``S`` experts.

    x: (1 or S, B, T, I) -- shared or per-expert inputs.  Returns the top-layer sequence (S, B, T, 2h) and the
    final representation h_T (S, B, 2h): last forward state concatenated with
    the backward state at the first time step.
    """
    reverse = np.repeat([False, True], S)
    inp = x
    for layer in range(n_layers):
        if inp.shape[0] != 1:  # per-expert inputs feed both directions
            inp = ad.concat([inp, inp], axis=0)
        out = lstm(inp, params[f"{prefix}.l{layer}.W"], params[f"{prefix}.l{layer}.U"],
                   params[f"{prefix}.l{layer}.b"], reverse)
        inp = ad.concat([out[:S], out[S:]], axis=-1)
    T = inp.shape[2]
    h = inp.shape[-1] // 2
    final = ad.concat([inp[:, :, T - 1, :h], inp[:, :, 0, h:]], axis=-1)
    return inp, final


def init_mlp(params: dict, prefix: str, rng: np.random.Generator, S: int,
             sizes: list[int]) -> None:
    """Stacked MLP weights: one independent MLP per leading stack index."""
    for k, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        params[f"{prefix}.{k}.W"] = Tensor(glorot(rng, (S, n_in, n_out), n_in, n_out),
                                           requires_grad=True)
        params[f"{prefix}.{k}.b"] = Tensor(np.zeros((S, 1, n_out)), requires_grad=True)


def mlp_forward(params: dict, prefix: str, x: Tensor, n_layers: int) -> Tensor:
    """x: (S or 1, B, n_in) -> (S, B, n_out); tanh between layers."""
    for k in range(n_layers):
        x = ad.matmul(x, params[f"{prefix}.{k}.W"]) + params[f"{prefix}.{k}.b"]
        if k < n_layers - 1:
            x = ad.tanh(x)
    return x
