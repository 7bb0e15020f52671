"""Pure numpy implementation of the model kernels.

Used when the compiled extension is unavailable, and as the reference the
compiled kernels are tested against.
"""
import numpy as np

LINEAR = 0
MLP = 1
TANH = 0
RELU = 1


def _unpack(params, kind, d, h, k):
    if kind == LINEAR:
        W = params[: k * d].reshape(k, d)
        b = params[k * d : k * d + k]
        return W, b
    o = 0
    W1 = params[o : o + h * d].reshape(h, d)
    o += h * d
    b1 = params[o : o + h]
    o += h
    W2 = params[o : o + k * h].reshape(k, h)
    o += k * h
    b2 = params[o : o + k]
    return W1, b1, W2, b2


def _hidden(X, W1, b1, act):
    pre = X @ W1.T + b1
    if act == TANH:
        return pre, np.tanh(pre)
    return pre, np.maximum(pre, 0.0)


def logits(X, params, kind, d, h, k, act):
    if kind == LINEAR:
        W, b = _unpack(params, kind, d, h, k)
        return X @ W.T + b
    W1, b1, W2, b2 = _unpack(params, kind, d, h, k)
    _, a = _hidden(X, W1, b1, act)
    return a @ W2.T + b2


def _log_softmax(z):
    zmax = z.max(axis=1, keepdims=True)
    shifted = z - zmax
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def per_example_loss(X, y, params, kind, d, h, k, act):
    logp = _log_softmax(logits(X, params, kind, d, h, k, act))
    return -logp[np.arange(len(y)), y]


def loss_grad(X, y, params, kind, d, h, k, act, want_grad=True):
    """Mean cross-entropy over the batch and, optionally, its gradient."""
    n = X.shape[0]
    rows = np.arange(n)
    if kind == LINEAR:
        W, b = _unpack(params, kind, d, h, k)
        z = X @ W.T + b
    else:
        W1, b1, W2, b2 = _unpack(params, kind, d, h, k)
        pre, a = _hidden(X, W1, b1, act)
        z = a @ W2.T + b2
    logp = _log_softmax(z)
    loss = -logp[rows, y].mean()
    if not want_grad:
        return loss, None

    dz = np.exp(logp)
    dz[rows, y] -= 1.0
    dz /= n
    if kind == LINEAR:
        return loss, np.concatenate([(dz.T @ X).ravel(), dz.sum(axis=0)])
    da = dz @ W2
    if act == TANH:
        dpre = da * (1.0 - a * a)
    else:
        dpre = da * (pre > 0.0)
    return loss, np.concatenate(
        [(dpre.T @ X).ravel(), dpre.sum(axis=0), (dz.T @ a).ravel(), dz.sum(axis=0)]
    )
