"""Central finite-difference checks against the tape's reverse-mode gradients."""
import numpy as np

from ldlmoe import autodiff as ad

H = 1e-5


def tape_grads(fn, arrays):
    params = [ad.Tensor(a.copy(), requires_grad=True) for a in arrays]
    with ad.Tape() as tape:
        loss = fn(*params)
    g = tape.backward(loss)
    return [g.get(p, np.zeros_like(p.data)) for p in params]


def numeric_grads(fn, arrays, h=H):
    out = []
    for i, a in enumerate(arrays):
        g = np.zeros_like(a)
        for idx in np.ndindex(a.shape):
            vals = []
            for sign in (1.0, -1.0):
                shifted = [x.copy() for x in arrays]
                shifted[i][idx] += sign * h
                vals.append(fn(*[ad.Tensor(x) for x in shifted]).item())
            g[idx] = (vals[0] - vals[1]) / (2 * h)
        out.append(g)
    return out


def rel_error(a, b):
    num = np.linalg.norm(np.ravel(a) - np.ravel(b))
    den = max(np.linalg.norm(np.ravel(a)) + np.linalg.norm(np.ravel(b)), 1e-8)
    return num / den


def max_rel_error(fn, arrays, h=H):
    """Largest relative error over all inputs of ``fn`` (a scalar-valued function)."""
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    analytic = tape_grads(fn, arrays)
    numeric = numeric_grads(fn, arrays, h)
    return max(rel_error(a, n) for a, n in zip(analytic, numeric))


# -- case catalogue: name -> builder(rng) -> (scalar fn of Tensors, input arrays) --

def _weighted(t, w):
    """Contract an op's output with fixed random weights so every entry matters."""
    return (t * w).sum()


def _away_from(rng, shape, points, gap=0.05):
    """Random values at least ``gap`` away from the kinks in ``points``."""
    x = rng.normal(size=shape)
    for p in points:
        near = np.abs(x - p) < gap
        x[near] = p + np.where(x[near] >= p, gap, -gap) * 2
    return x


def _unary(op, positive=False):
    def build(rng):
        x = rng.uniform(0.2, 2.0, (3, 4)) if positive else rng.normal(size=(3, 4))
        w = rng.normal(size=(3, 4))
        return (lambda a: _weighted(op(a), w)), [x]
    return build


def _binary(op, positive_b=False):
    def build(rng):
        a = rng.normal(size=(3, 4))
        b = rng.uniform(0.5, 2.0, (1, 4)) if positive_b else rng.normal(size=(1, 4))
        w = rng.normal(size=(3, 4))
        return (lambda x, y: _weighted(op(x, y), w)), [a, b]
    return build


def _matmul(rng):
    a, b, w = rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 5)), rng.normal(size=(2, 3, 5))
    return (lambda x, y: _weighted(ad.matmul(x, y), w)), [a, b]


def _reduction(op):
    def build(rng):
        x, w = rng.normal(size=(3, 4)), rng.normal(size=(4,))
        return (lambda a: _weighted(op(a), w)), [x]
    return build


def _softmax(rng):
    z, w = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    return (lambda a: _weighted(ad.softmax_with_temperature(a, 1.5), w)), [z]


def _cosine(rng):
    a, b, w = rng.normal(size=(3, 5)), rng.normal(size=(3, 5)), rng.normal(size=(3,))
    return (lambda x, y: _weighted(ad.cosine_similarity(x, y), w)), [a, b]


def _concat(rng):
    a, b, w = rng.normal(size=(2, 3)), rng.normal(size=(4, 3)), rng.normal(size=(6, 3))
    return (lambda x, y: _weighted(ad.concat([x, y], axis=0), w)), [a, b]


def _stack(rng):
    a, b, w = rng.normal(size=(2, 3)), rng.normal(size=(2, 3)), rng.normal(size=(2, 2, 3))
    return (lambda x, y: _weighted(ad.stack([x, y], axis=1), w)), [a, b]


def _slice(rng):
    x, w = rng.normal(size=(4, 5)), rng.normal(size=(2, 2))
    return (lambda a: _weighted(ad.slice_(a, (slice(1, 3), slice(0, 4, 2))), w)), [x]


def _reshape(rng):
    x, w = rng.normal(size=(3, 4)), rng.normal(size=(2, 6))
    return (lambda a: _weighted(ad.reshape(a, (2, 6)), w)), [x]


def _swapaxes(rng):
    x, w = rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 3, 2))
    return (lambda a: _weighted(ad.swapaxes(a, 0, 2), w)), [x]


def _lstm(rng):
    from ldlmoe.layers import lstm
    S, B, T, I, h = 2, 2, 4, 3, 2
    x = rng.normal(size=(1, B, T, I))
    W = rng.normal(scale=0.5, size=(S, I, 4 * h))
    U = rng.normal(scale=0.5, size=(S, h, 4 * h))
    b = rng.normal(scale=0.1, size=(S, 4 * h))
    w = rng.normal(size=(S, B, T, h))
    rev = np.array([False, True])
    return (lambda *a: _weighted(lstm(*a, rev), w)), [x, W, U, b]


OP_CASES = {
    "add": _binary(ad.add),
    "sub": _binary(ad.sub),
    "mul": _binary(ad.mul),
    "div": _binary(ad.div, positive_b=True),
    "div_scalar": _unary(lambda a: ad.div_scalar(a, 2.5)),
    "neg": _unary(ad.neg),
    "exp": _unary(ad.exp),
    "log": _unary(ad.log, positive=True),
    "tanh": _unary(ad.tanh),
    "sigmoid": _unary(ad.sigmoid),
    "square": _unary(ad.square),
    "sqrt": _unary(ad.sqrt, positive=True),
    "abs": lambda rng: ((lambda a: _weighted(ad.abs_(a), 1.0)), [_away_from(rng, (3, 4), [0.0])]),
    "clip": lambda rng: ((lambda a: _weighted(ad.clip(a, -0.5, 0.5), 1.0)),
                         [_away_from(rng, (3, 4), [-0.5, 0.5])]),
    "maximum": lambda rng: ((lambda a: _weighted(ad.maximum(a, 0.1), 1.0)),
                            [_away_from(rng, (3, 4), [0.1])]),
    "matmul": _matmul,
    "sum": _reduction(lambda a: ad.sum_(a, axis=0)),
    "mean": _reduction(lambda a: ad.mean(a, axis=0)),
    "variance": _reduction(lambda a: ad.variance(a, axis=0)),
    "softmax_with_temperature": _softmax,
    "cosine_similarity": _cosine,
    "concat": _concat,
    "stack": _stack,
    "slice": _slice,
    "reshape": _reshape,
    "swapaxes": _swapaxes,
    "lstm": _lstm,
}


# -- loss terms --------------------------------------------------------------

def _loss_distance(rng):
    from ldlmoe.experts import mmd2_mixture_gaussian
    B, H, N = 2, 3, 3
    logits = rng.normal(size=(B, N))
    mu = rng.normal(size=(B, H, N))
    logvar = rng.normal(scale=0.5, size=(B, H, N))
    y, s2 = rng.normal(size=(B, H)), rng.uniform(0.1, 1.0, (B, H))

    def fn(z, m, lv):
        g = ad.softmax_with_temperature(z, 1.5)
        return mmd2_mixture_gaussian(g, m, ad.exp(lv), y, s2, 0.8).mean()
    return fn, [logits, mu, logvar]


def _loss_distance_discrete(rng):
    from ldlmoe.experts import BatchOutput, loss_distance
    B, H, K = 2, 3, 5
    t = rng.dirichlet(np.ones(K), size=(B, H))

    def fn(z):
        p = ad.softmax_with_temperature(z, 1.0)
        out = BatchOutput(ad.Tensor(np.ones((B, 1))), ad.Tensor(np.zeros((B, 1))),
                          ad.Tensor(np.zeros((1, B, 1))), mixture_probs=p)
        return loss_distance(out, None, target_probs=t)
    return fn, [rng.normal(size=(B, H, K))]


def _loss_balance(rng):
    from ldlmoe.experts import loss_balance
    return (lambda z: loss_balance(ad.softmax_with_temperature(z, 1.5))), [rng.normal(size=(5, 4))]


def _loss_diversity(rng):
    from ldlmoe.experts import loss_diversity
    return (lambda r: loss_diversity(r)), [rng.normal(size=(3, 4, 5))]


def _reg(name):
    def build(rng):
        from ldlmoe import pattern as pm
        w = pm.RegWeights(smooth=0.3, persist=0.7, period=0.5, sparse=0.2, local=0.4, hetero=0.6, p=3)
        x = rng.normal(size=(2, 8))
        if name == "changepoint":
            x = _away_from(rng, (2, 8), [0.0])
            return (lambda a: pm.reg_changepoint(a, w)), [x]
        if name == "volatility":
            r = rng.uniform(0.1, 1.0, 8)
            return (lambda a: pm.reg_volatility(a, r, w)), [x]
        return (lambda a: getattr(pm, f"reg_{name}")(a, w)), [x]
    return build


LOSS_CASES = {
    "distance": _loss_distance,
    "distance_discrete": _loss_distance_discrete,
    "balance": _loss_balance,
    "diversity": _loss_diversity,
    "reg_trend": _reg("trend"),
    "reg_seasonal": _reg("seasonal"),
    "reg_changepoint": _reg("changepoint"),
    "reg_volatility": _reg("volatility"),
}


def check_case(builder, seed):
    fn, arrays = builder(np.random.default_rng(seed))
    return max_rel_error(fn, arrays)
