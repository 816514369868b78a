"""Dense tensor NN core: forward/backward for every layer the model needs.

No autodiff graph; each op returns (output, cache) and exposes an explicit
backward.  Parameters and activations are float32 in production; reductions
and the gradient checker accumulate in float64.  All ops are pure and safe
for concurrent forward passes over shared read-only parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

LN_EPS = 1e-5


@dataclass
class Parameter:
    """A trainable tensor with its gradient and Adam moment state."""

    name: str
    value: np.ndarray
    grad: np.ndarray = None
    m: np.ndarray = None
    v: np.ndarray = None

    def __post_init__(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.m is None:
            self.m = np.zeros_like(self.value)
        if self.v is None:
            self.v = np.zeros_like(self.value)

    def zero_grad(self):
        self.grad.fill(0.0)


@dataclass
class AdamConfig:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-5
    t: int = 0

    def __post_init__(self):
        assert self.lr > 0 and self.eps > 0
        assert 0 < self.beta1 < 1 and 0 < self.beta2 < 1


def adam_step(params, cfg: AdamConfig) -> None:
    """Classic Adam with bias correction and coupled L2 weight decay."""
    cfg.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    bc1 = 1.0 - b1 ** cfg.t
    bc2 = 1.0 - b2 ** cfg.t
    for p in params:
        g = p.grad
        if cfg.weight_decay:
            g = g + cfg.weight_decay * p.value
        p.m *= b1
        p.m += (1.0 - b1) * g
        p.v *= b2
        p.v += (1.0 - b2) * np.square(g)
        m_hat = p.m / bc1
        v_hat = p.v / bc2
        p.value -= cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps)


# ---------------------------------------------------------------------------
# Initialization


def glorot_uniform(rng, shape, fan_in, fan_out, dtype=np.float32):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


# ---------------------------------------------------------------------------
# Layers


def linear(x, W, b):
    """y = x W^T + b over the last axis; x: (..., in), W: (out, in)."""
    if x.shape[-1] != W.shape[1]:
        raise ValueError(f"linear: input width {x.shape[-1]} != {W.shape[1]}")
    if x.ndim > 2:
        # one flat GEMM instead of a batched matmul over the leading axes
        y = (x.reshape(-1, x.shape[-1]) @ W.T).reshape(*x.shape[:-1], W.shape[0]) + b
    else:
        y = x @ W.T + b
    return y, (x, W)


def linear_backward(dy, cache):
    x, W = cache
    dx = dy @ W
    dy2 = dy.reshape(-1, dy.shape[-1])
    x2 = x.reshape(-1, x.shape[-1])
    dW = dy2.T @ x2
    db = dy2.sum(axis=0, dtype=np.float64).astype(dy.dtype)
    return dx, dW, db


def relu(x):
    y = np.maximum(x, 0.0)
    return y, (x > 0)


def relu_backward(dy, cache):
    return dy * cache


def layer_norm(x, gamma, beta):
    """Per-last-axis normalization (mean 0, var 1, eps=1e-5) plus affine."""
    mu = x.mean(axis=-1, keepdims=True, dtype=np.float64).astype(x.dtype)
    xc = x - mu
    var = np.square(xc).mean(axis=-1, keepdims=True, dtype=np.float64)
    inv = (1.0 / np.sqrt(var + LN_EPS)).astype(x.dtype)
    xhat = xc * inv
    y = gamma * xhat + beta
    return y, (xhat, inv, gamma)


def layer_norm_backward(dy, cache):
    xhat, inv, gamma = cache
    dxhat = dy * gamma
    mean1 = dxhat.mean(axis=-1, keepdims=True, dtype=np.float64)
    mean2 = (dxhat * xhat).mean(axis=-1, keepdims=True, dtype=np.float64)
    dx = (inv * (dxhat - mean1 - xhat * mean2)).astype(dy.dtype)
    axes = tuple(range(dy.ndim - 1))
    dgamma = (dy * xhat).sum(axis=axes, dtype=np.float64).astype(dy.dtype)
    dbeta = dy.sum(axis=axes, dtype=np.float64).astype(dy.dtype)
    return dx, dgamma, dbeta


def _softmax_last(x):
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def multi_head_self_attention(x, heads, Wq, bq, Wk, bk, Wv, bv, Wo, bo):
    """Scaled dot-product self-attention over (N, T, d); no mask, no positions."""
    N, T, d = x.shape
    if d % heads:
        raise ValueError(f"width {d} not divisible by {heads} heads")
    dh = d // heads
    scale = 1.0 / float(np.sqrt(dh))

    q, cq = linear(x, Wq, bq)
    k, ck = linear(x, Wk, bk)
    v, cv = linear(x, Wv, bv)
    # (N, heads, T, dh)
    qh = q.reshape(N, T, heads, dh).transpose(0, 2, 1, 3)
    kh = k.reshape(N, T, heads, dh).transpose(0, 2, 1, 3)
    vh = v.reshape(N, T, heads, dh).transpose(0, 2, 1, 3)
    scores = (qh @ kh.transpose(0, 1, 3, 2)) * scale
    attn = _softmax_last(scores)
    oh = attn @ vh
    o = oh.transpose(0, 2, 1, 3).reshape(N, T, d)
    y, co = linear(o, Wo, bo)
    cache = (cq, ck, cv, co, qh, kh, vh, attn, scale, heads)
    return y, cache


def multi_head_self_attention_backward(dy, cache):
    cq, ck, cv, co, qh, kh, vh, attn, scale, heads = cache
    N, h, T, dh = qh.shape
    d = h * dh

    do, dWo, dbo = linear_backward(dy, co)
    doh = do.reshape(N, T, h, dh).transpose(0, 2, 1, 3)
    dattn = doh @ vh.transpose(0, 1, 3, 2)
    dvh = attn.transpose(0, 1, 3, 2) @ doh
    # softmax backward over the key axis
    dscores = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True))
    dscores *= scale
    dqh = dscores @ kh
    dkh = dscores.transpose(0, 1, 3, 2) @ qh

    dq = dqh.transpose(0, 2, 1, 3).reshape(N, T, d)
    dk = dkh.transpose(0, 2, 1, 3).reshape(N, T, d)
    dv = dvh.transpose(0, 2, 1, 3).reshape(N, T, d)
    dxq, dWq, dbq = linear_backward(dq, cq)
    dxk, dWk, dbk = linear_backward(dk, ck)
    dxv, dWv, dbv = linear_backward(dv, cv)
    dx = dxq + dxk + dxv
    return dx, (dWq, dbq, dWk, dbk, dWv, dbv, dWo, dbo)


def conv3d(x, kernels, bias, stride=1):
    """3x3x3 cross-correlation with zero padding 1; x: (N, D, H, W, Cin).

    kernels: (Cout, 3, 3, 3, Cin).  Output spatial size floor((S+2-3)/s)+1.
    """
    if stride not in (1, 2):
        raise ValueError("stride must be 1 or 2")
    N, D, H, W, Cin = x.shape
    Cout = kernels.shape[0]
    if kernels.shape != (Cout, 3, 3, 3, Cin):
        raise ValueError(f"kernel shape {kernels.shape} incompatible with input {x.shape}")
    s = stride
    Do, Ho, Wo = ((D - 1) // s + 1, (H - 1) // s + 1, (W - 1) // s + 1)
    xp = np.zeros((N, D + 2, H + 2, W + 2, Cin), x.dtype)
    xp[:, 1 : D + 1, 1 : H + 1, 1 : W + 1, :] = x
    y = np.zeros((N, Do, Ho, Wo, Cout), x.dtype)
    y += bias
    for a in range(3):
        for b in range(3):
            for c in range(3):
                sp = xp[:, a : a + s * (Do - 1) + 1 : s,
                        b : b + s * (Ho - 1) + 1 : s,
                        c : c + s * (Wo - 1) + 1 : s, :]
                y += sp @ kernels[:, a, b, c, :].T
    return y, (xp, kernels, stride, x.shape)


def conv3d_backward(dy, cache):
    xp, kernels, s, xshape = cache
    N, D, H, W, Cin = xshape
    Cout = kernels.shape[0]
    _, Do, Ho, Wo, _ = dy.shape
    dxp = np.zeros_like(xp)
    dK = np.zeros_like(kernels)
    dy2 = dy.reshape(-1, Cout)
    for a in range(3):
        for b in range(3):
            for c in range(3):
                sl = (slice(None),
                      slice(a, a + s * (Do - 1) + 1, s),
                      slice(b, b + s * (Ho - 1) + 1, s),
                      slice(c, c + s * (Wo - 1) + 1, s),
                      slice(None))
                dxp[sl] += dy @ kernels[:, a, b, c, :]
                dK[:, a, b, c, :] = dy2.T @ xp[sl].reshape(-1, Cin)
    db = dy2.sum(axis=0, dtype=np.float64).astype(dy.dtype)
    dx = dxp[:, 1 : D + 1, 1 : H + 1, 1 : W + 1, :]
    return dx, dK, db


def softmax_cross_entropy(logits, targets):
    """Mean NLL over rows; returns (loss, backward_grad_for_logits)."""
    N, C = logits.shape
    targets = np.asarray(targets)
    if targets.min(initial=0) < 0 or (targets.size and targets.max() >= C):
        raise ValueError("target out of range")
    z = logits.astype(np.float64)
    z -= z.max(axis=-1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=-1))
    loss = float((logsumexp - z[np.arange(N), targets]).mean())
    probs = np.exp(z - logsumexp[:, None])
    grad = probs
    grad[np.arange(N), targets] -= 1.0
    grad /= N
    return loss, grad.astype(logits.dtype)


# ---------------------------------------------------------------------------
# Finite-difference gradient checking


def grad_check(f, arrays, h=1e-3, rng=None, max_entries=None):
    """Compare f's analytic gradients to central differences in float64.

    f maps a list of float64 arrays to (scalar loss, list of gradient arrays).
    Returns the maximum relative error over all checked entries.
    """
    arrays = [np.asarray(a, np.float64) for a in arrays]
    _, grads = f(arrays)
    worst = 0.0
    for ai, a in enumerate(arrays):
        idxs = list(np.ndindex(a.shape))
        if max_entries is not None and len(idxs) > max_entries:
            rng = rng or np.random.default_rng(0)
            pick = rng.choice(len(idxs), size=max_entries, replace=False)
            idxs = [idxs[i] for i in pick]
        for idx in idxs:
            orig = a[idx]
            a[idx] = orig + h
            lp, _ = f(arrays)
            a[idx] = orig - h
            lm, _ = f(arrays)
            a[idx] = orig
            num = (lp - lm) / (2.0 * h)
            ana = float(grads[ai][idx])
            denom = max(abs(num), abs(ana), 1e-8)
            worst = max(worst, abs(num - ana) / denom)
    return worst
