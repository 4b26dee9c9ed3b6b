"""One-hidden-layer ReLU lifting network with hand-written gradients and Adam.

Batches are column-major throughout: an input batch is ``(n_in, K)`` and the
lifted batch ``(n_out, K)``, matching the data-matrix layout of the Koopman
loss.
"""

import threading
from dataclasses import dataclass, replace

import numpy as np

from .errors import EmptySegment


@dataclass
class MlpParams:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray

    @property
    def shapes(self):
        return self.W1.shape, self.b1.shape, self.W2.shape, self.b2.shape

    @property
    def size(self) -> int:
        return self.W1.size + self.b1.size + self.W2.size + self.b2.size

    @property
    def n_in(self) -> int:
        return self.W1.shape[1]

    @property
    def hidden(self) -> int:
        return self.W1.shape[0]

    @property
    def n_out(self) -> int:
        return self.W2.shape[0]

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.W1.ravel(), self.b1, self.W2.ravel(), self.b2])

    @classmethod
    def unflatten(cls, vec, n_in: int, hidden: int, n_out: int) -> "MlpParams":
        vec = np.asarray(vec, dtype=float)
        expected = hidden * n_in + hidden + n_out * hidden + n_out
        if vec.shape != (expected,):
            raise ValueError(f"flat parameter vector must have length {expected}, got {vec.shape}")
        i = 0
        W1 = vec[i:i + hidden * n_in].reshape(hidden, n_in).copy()
        i += hidden * n_in
        b1 = vec[i:i + hidden].copy()
        i += hidden
        W2 = vec[i:i + n_out * hidden].reshape(n_out, hidden).copy()
        i += n_out * hidden
        b2 = vec[i:].copy()
        return cls(W1, b1, W2, b2)

    def like(self, vec) -> "MlpParams":
        """Unflatten ``vec`` using this network's layer sizes."""
        return MlpParams.unflatten(vec, self.n_in, self.hidden, self.n_out)


def n_params(n_in: int = 3, hidden: int = 256, n_out: int = 8) -> int:
    return hidden * n_in + hidden + n_out * hidden + n_out


def init_params(seed: int, n_in: int = 3, hidden: int = 256, n_out: int = 8,
                zero_output: bool = False) -> MlpParams:
    """He-uniform weights, zero biases.

    ``zero_output`` zeroes the second layer so the network starts as the
    constant zero map.
    """
    rng = np.random.default_rng(seed)
    lim1 = np.sqrt(6.0 / n_in)
    lim2 = np.sqrt(6.0 / hidden)
    W1 = rng.uniform(-lim1, lim1, size=(hidden, n_in))
    W2 = rng.uniform(-lim2, lim2, size=(n_out, hidden))
    if zero_output:
        W2[:] = 0.0
    return MlpParams(W1, np.zeros(hidden), W2, np.zeros(n_out))


_scratch = threading.local()


def _buffer(name, shape, dtype=float):
    """Per-thread reusable work array.

    Hidden-layer activations are large enough that a fresh allocation per call
    costs more in page faults than the arithmetic itself.
    """
    bufs = _scratch.__dict__.setdefault("bufs", {})
    key = (name, shape, np.dtype(dtype).str)
    buf = bufs.get(key)
    if buf is None:
        if len(bufs) > 64:
            bufs.clear()
        buf = bufs[key] = np.empty(shape, dtype)
    return buf


def _hidden(theta, V):
    Z = _buffer("Z", (theta.hidden, V.shape[1]))
    np.matmul(theta.W1, V, out=Z)
    Z += theta.b1[:, None]
    return Z


def lift_batch(theta: MlpParams, V) -> np.ndarray:
    V = np.asarray(V, dtype=float)
    if V.ndim != 2 or V.shape[0] != theta.n_in:
        raise ValueError(f"batch must have shape ({theta.n_in}, K), got {V.shape}")
    H = np.maximum(_hidden(theta, V), 0.0, out=_buffer("H", (theta.hidden, V.shape[1])))
    out = theta.W2 @ H
    out += theta.b2[:, None]
    return out


def lift_forward(theta: MlpParams, v) -> np.ndarray:
    return lift_batch(theta, np.asarray(v, dtype=float).reshape(-1, 1))[:, 0]


def _forward(theta, V):
    # The returned cache aliases scratch buffers: call _backward before the
    # next forward pass on this thread.
    Z = _hidden(theta, V)
    mask = np.greater(Z, 0.0, out=_buffer("mask", Z.shape, bool))
    H = np.maximum(Z, 0.0, out=Z)
    out = theta.W2 @ H
    out += theta.b2[:, None]
    return out, (V, mask, H)


def _backward(theta, cache, d_out) -> np.ndarray:
    """Flat parameter gradient given the upstream gradient of the output batch.

    The ReLU derivative at exactly zero is taken as 0.
    """
    V, mask, H = cache
    dW2 = d_out @ H.T
    db2 = d_out.sum(axis=1)
    dZ = np.matmul(theta.W2.T, d_out, out=_buffer("dZ", H.shape))
    np.multiply(dZ, mask, out=dZ)
    dW1 = dZ @ V.T
    db1 = dZ.sum(axis=1)
    return np.concatenate([dW1.ravel(), db1, dW2.ravel(), db2])


def _check_segment(X, Xbar, U):
    X, Xbar, U = (np.asarray(a, dtype=float) for a in (X, Xbar, U))
    T = X.shape[1]
    if T == 0:
        raise EmptySegment("segment has no transitions")
    if Xbar.shape[1] != T or U.shape[1] != T:
        raise ValueError("X, Xbar and U must share the same number of columns")
    return X, Xbar, U, T


def koopman_loss_grads(theta: MlpParams, M, C, X, Xbar, U):
    """Koopman loss and its gradients w.r.t. the network, ``M=[A B]`` and ``C``.

    Loss is ``(||Gbar - M [G; U]||_F^2 + ||X - C G||_F^2) / (2 T)`` where
    ``G``/``Gbar`` are the lifted ``X``/``Xbar``. Gradients reach the network
    through both ``G`` and ``Gbar``.

    Returns
    -------
    loss : float
    g_theta : ndarray, flat, same layout as ``MlpParams.flatten``
    g_M : ndarray, shape of ``M``
    g_C : ndarray, shape of ``C``
    """
    X, Xbar, U, T = _check_segment(X, Xbar, U)
    M = np.asarray(M, dtype=float)
    C = np.asarray(C, dtype=float)
    r = theta.n_out
    A, B = M[:, :r], M[:, r:]

    # Consecutive-sample data has Xbar = X shifted by one column; lifting the
    # T+1 distinct states once halves the work.
    shifted = T > 1 and np.array_equal(X[:, 1:], Xbar[:, :-1])
    if shifted:
        out, cache = _forward(theta, np.hstack([X, Xbar[:, -1:]]))
        G, Gbar = out[:, :T], out[:, 1:]
    else:
        out, cache = _forward(theta, np.hstack([X, Xbar]))
        G, Gbar = out[:, :T], out[:, T:]
    R1 = Gbar - A @ G - B @ U
    R2 = X - C @ G
    loss = (np.sum(R1 * R1) + np.sum(R2 * R2)) / (2.0 * T)

    dG = -(A.T @ R1 + C.T @ R2) / T
    dGbar = R1 / T
    if shifted:
        d_out = np.zeros((r, T + 1))
        d_out[:, :T] = dG
        d_out[:, 1:] += dGbar
    else:
        d_out = np.hstack([dG, dGbar])
    g_theta = _backward(theta, cache, d_out)
    g_M = -(R1 @ np.vstack([G, U]).T) / T
    g_C = -(R2 @ G.T) / T
    return float(loss), g_theta, g_M, g_C


def loss_and_grad(theta: MlpParams, M, C, X, Xbar, U):
    """Koopman loss as a function of the network alone, with ``M`` and ``C`` frozen."""
    loss, g_theta, _, _ = koopman_loss_grads(theta, M, C, X, Xbar, U)
    return loss, g_theta


def regression_loss_and_grad(theta: MlpParams, Z, Y):
    """Mean squared prediction error ``(1/T) sum_t ||net(z_t) - y_t||^2`` and its gradient."""
    Z = np.asarray(Z, dtype=float)
    Y = np.asarray(Y, dtype=float)
    T = Z.shape[1]
    if T == 0:
        raise EmptySegment("no training pairs")
    out, cache = _forward(theta, Z)
    R = out - Y
    loss = np.sum(R * R) / T
    return float(loss), _backward(theta, cache, 2.0 * R / T)


@dataclass(frozen=True)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, size: int, lr: float = 1e-4, **kw) -> "AdamState":
        return cls(np.zeros(size), np.zeros(size), 0, lr, **kw)


def adam_direction(state: AdamState, grad):
    """Advance the moment estimates and return the bias-corrected step direction.

    The parameter update is ``theta - state.lr * direction``. Returning the
    direction separately lets the consensus round combine it with neighbour
    averaging.
    """
    grad = np.asarray(grad, dtype=float)
    if grad.shape != state.m.shape:
        raise ValueError("gradient and moment vectors differ in length")
    t = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    direction = m_hat / (np.sqrt(v_hat) + state.eps)
    return replace(state, m=m, v=v, step=t), direction


def adam_step(state: AdamState, theta, grad):
    """One Adam update. ``theta`` may be an ``MlpParams`` or a flat vector."""
    state, direction = adam_direction(state, grad)
    if isinstance(theta, MlpParams):
        return state, theta.like(theta.flatten() - state.lr * direction)
    return state, np.asarray(theta, dtype=float) - state.lr * direction
