import numpy as np

from ldlmoe import autodiff as ad
from ldlmoe.layers import _flip_stacks, bilstm_forward, init_lstm_stack, lstm


def reference_lstm(x, W, U, b, reverse):
    """Plain per-sample loop; x (B, T, I) -> (B, T, h) indexed by input time."""
    B, T, _ = x.shape
    h = U.shape[0]
    sig = lambda z: 1 / (1 + np.exp(-z))
    out = np.zeros((B, T, h))
    for n in range(B):
        hs, cs = np.zeros(h), np.zeros(h)
        steps = range(T - 1, -1, -1) if reverse else range(T)
        for t in steps:
            z = x[n, t] @ W + hs @ U + b
            i, f, g, o = sig(z[:h]), sig(z[h:2 * h]), np.tanh(z[2 * h:3 * h]), sig(z[3 * h:])
            cs = f * cs + i * g
            hs = o * np.tanh(cs)
            out[n, t] = hs
    return out


def test_lstm_matches_reference(rng):
    S, B, T, I, h = 3, 2, 5, 3, 4
    x = rng.normal(size=(1, B, T, I))
    W, U = rng.normal(size=(S, I, 4 * h)), rng.normal(size=(S, h, 4 * h))
    b = rng.normal(size=(S, 4 * h))
    rev = np.array([False, True, True])
    out = lstm(ad.Tensor(x), ad.Tensor(W), ad.Tensor(U), ad.Tensor(b), rev).data
    for s in range(S):
        np.testing.assert_allclose(out[s], reference_lstm(x[0], W[s], U[s], b[s], rev[s]), atol=1e-12)


def test_flip_stacks_involution(rng):
    a = rng.normal(size=(6, 4, 2))
    rev = np.array([True, False, True, True])
    np.testing.assert_array_equal(_flip_stacks(_flip_stacks(a, rev), rev), a)


def test_bilstm_shapes_and_determinism(rng):
    def build():
        params = {}
        init_lstm_stack(params, "l", np.random.default_rng(5), 3, 2, 4, 2)
        return params
    x = ad.Tensor(rng.normal(size=(1, 7, 10, 2)))
    seq1, rep1 = bilstm_forward(build(), "l", x, 3, 2)
    seq2, rep2 = bilstm_forward(build(), "l", x, 3, 2)
    assert rep1.shape == (3, 7, 8)
    np.testing.assert_array_equal(rep1.data, rep2.data)


def test_bilstm_order_sensitive(rng):
    params = {}
    init_lstm_stack(params, "l", np.random.default_rng(0), 1, 1, 4, 1)
    x = rng.normal(size=(1, 2, 10, 1))
    _, a = bilstm_forward(params, "l", ad.Tensor(x), 1, 1)
    _, b = bilstm_forward(params, "l", ad.Tensor(x[:, :, ::-1].copy()), 1, 1)
    assert not np.allclose(a.data, b.data)
