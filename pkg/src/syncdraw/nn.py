"""LSTM cell and small numerical helpers with hand-written backward passes."""
import numpy as np

INIT_SCALE = 0.08


def sigmoid(x):
    # tanh form avoids overflow warnings for large |x|
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def lstm_init(rng, n_in: int, n_hidden: int, prefix: str, dtype=np.float64):
    """Weights W (n_in + n_hidden, 4 n_hidden) in gate order i, f, o, g."""
    return {
        f"{prefix}_W": rng.uniform(-INIT_SCALE, INIT_SCALE,
                                   (n_in + n_hidden, 4 * n_hidden)).astype(dtype),
        f"{prefix}_b": np.zeros(4 * n_hidden, dtype=dtype),
    }


def lstm_step(x, h, c, W, b):
    """One LSTM update. Returns (h_new, c_new, cache)."""
    H = h.shape[-1]
    xh = np.concatenate([x, h], axis=-1)
    a = xh @ W + b
    i = sigmoid(a[..., :H])
    f = sigmoid(a[..., H:2 * H])
    o = sigmoid(a[..., 2 * H:3 * H])
    g = np.tanh(a[..., 3 * H:])
    c_new = f * c + i * g
    tc = np.tanh(c_new)
    h_new = o * tc
    return h_new, c_new, (xh, c, i, f, o, g, tc)


def lstm_step_backward(dh, dc, cache, W, grads, prefix: str):
    """Accumulates weight gradients into ``grads``; returns (dx, dh_prev, dc_prev)."""
    xh, c, i, f, o, g, tc = cache
    H = dh.shape[-1]
    dc = dc + dh * o * (1 - tc ** 2)
    da = np.concatenate([
        dc * g * i * (1 - i),
        dc * c * f * (1 - f),
        dh * tc * o * (1 - o),
        dc * i * (1 - g ** 2),
    ], axis=-1)
    grads[f"{prefix}_W"] += xh.reshape(-1, xh.shape[-1]).T @ da.reshape(-1, 4 * H)
    grads[f"{prefix}_b"] += da.reshape(-1, 4 * H).sum(axis=0)
    dxh = da @ W.T
    n_in = xh.shape[-1] - H
    return dxh[..., :n_in], dxh[..., n_in:], dc * f


def linear_backward(dy, x, W, grads, prefix: str):
    """y = x W + b; accumulates dW, db and returns dx."""
    grads[f"{prefix}_W"] += x.reshape(-1, x.shape[-1]).T @ dy.reshape(-1, dy.shape[-1])
    grads[f"{prefix}_b"] += dy.reshape(-1, dy.shape[-1]).sum(axis=0)
    return dy @ W.T
