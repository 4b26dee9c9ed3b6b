"""Koopman model container, data matrices, local loss and prediction.

Only the body-frame velocity ``v = x[3:6]`` is modelled; pose is handled by
the kinematics in :mod:`distkoop.mpc`.
"""

from dataclasses import dataclass, field

import numpy as np

from . import checkpoint
from .errors import EmptySegment, NonFiniteState
from .lift import MlpParams, lift_batch
from .vessel import VEL


@dataclass
class KoopmanModel:
    """Lifted linear model ``v+ = C (A g(v) + B u)``.

    ``v_shift``/``v_scale`` implement optional per-channel z-scoring: the
    network sees ``(v - v_shift) / v_scale`` and predictions are mapped back.
    """

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    theta: MlpParams
    v_shift: np.ndarray = field(default_factory=lambda: np.zeros(3))
    v_scale: np.ndarray = field(default_factory=lambda: np.ones(3))

    def __post_init__(self):
        r = self.theta.n_out
        n = self.theta.n_in
        if self.A.shape != (r, r) or self.B.shape[0] != r or self.C.shape != (n, r):
            raise ValueError(
                f"inconsistent shapes A{self.A.shape} B{self.B.shape} C{self.C.shape} for r={r}, n={n}"
            )

    @property
    def M(self) -> np.ndarray:
        return np.hstack([self.A, self.B])

    @property
    def dims(self):
        return self.theta.n_in, self.B.shape[1], self.theta.n_out

    @classmethod
    def from_M(cls, M, C, theta, **kw) -> "KoopmanModel":
        r = theta.n_out
        M = np.asarray(M, dtype=float)
        return cls(M[:, :r].copy(), M[:, r:].copy(), np.asarray(C, dtype=float).copy(), theta, **kw)

    def is_normalized(self) -> bool:
        return bool(np.any(self.v_shift != 0.0) or np.any(self.v_scale != 1.0))


@dataclass
class DataMatrices:
    """Column-stacked data of one segment plus its lifted counterparts."""

    X: np.ndarray
    Xbar: np.ndarray
    U: np.ndarray
    G: np.ndarray
    Gbar: np.ndarray

    @property
    def T(self) -> int:
        return self.X.shape[1]

    @property
    def N(self) -> np.ndarray:
        """Stacked regressor ``[G; U]``."""
        return np.vstack([self.G, self.U])


def segment_arrays(seg, v_shift=None, v_scale=None):
    """``(X, Xbar, U)`` for a segment, optionally z-scored."""
    if seg.n_transitions < 1:
        raise EmptySegment(f"segment of agent {seg.agent_id} needs at least 2 data pairs")
    V = seg.states[:, VEL].T
    if v_shift is not None:
        V = (V - np.asarray(v_shift)[:, None]) / np.asarray(v_scale)[:, None]
    return V[:, :-1].copy(), V[:, 1:].copy(), seg.inputs.T.copy()


def build_data_matrices(seg, theta: MlpParams, v_shift=None, v_scale=None) -> DataMatrices:
    X, Xbar, U = segment_arrays(seg, v_shift, v_scale)
    return DataMatrices(X, Xbar, U, lift_batch(theta, X), lift_batch(theta, Xbar))


def local_loss(A, B, C, dm: DataMatrices) -> float:
    R1 = dm.Gbar - A @ dm.G - B @ dm.U
    R2 = dm.X - C @ dm.G
    return float((np.sum(R1 * R1) + np.sum(R2 * R2)) / (2.0 * dm.T))


def predict_batch(model: KoopmanModel, V, U) -> np.ndarray:
    """Next velocities for a batch; ``V`` is ``(3, K)`` and ``U`` is ``(2, K)``."""
    V = np.asarray(V, dtype=float)
    scaled = model.is_normalized()
    if scaled:
        V = (V - model.v_shift[:, None]) / model.v_scale[:, None]
    out = model.C @ (model.A @ lift_batch(model.theta, V) + model.B @ np.asarray(U, dtype=float))
    if scaled:
        out = out * model.v_scale[:, None] + model.v_shift[:, None]
    return out


def predict_next(model: KoopmanModel, v, u) -> np.ndarray:
    return predict_batch(model, np.reshape(v, (-1, 1)), np.reshape(u, (-1, 1)))[:, 0]


def rollout(model: KoopmanModel, v0, inputs) -> list:
    out = []
    v = np.asarray(v0, dtype=float)
    for k, u in enumerate(inputs):
        with np.errstate(over="ignore", invalid="ignore"):
            v = predict_next(model, v, u)
        if not np.all(np.isfinite(v)):
            raise NonFiniteState(f"rollout diverged at step {k}")
        out.append(v)
    return out


def save_model(path, model: KoopmanModel, meta=None):
    n, m, r = model.dims
    arrays = {
        "A": model.A, "B": model.B, "C": model.C,
        "W1": model.theta.W1, "b1": model.theta.b1, "W2": model.theta.W2, "b2": model.theta.b2,
        "v_shift": model.v_shift, "v_scale": model.v_scale,
    }
    checkpoint.write(path, arrays, {"kind": "koopman", "n": n, "m": m, "r": r, **(meta or {})})


def load_model(path) -> KoopmanModel:
    arrays, meta = checkpoint.read(path)
    if meta.get("kind") != "koopman":
        raise ValueError(f"{path} is not a Koopman checkpoint")
    theta = MlpParams(arrays["W1"], arrays["b1"], arrays["W2"], arrays["b2"])
    return KoopmanModel(arrays["A"], arrays["B"], arrays["C"], theta,
                        v_shift=arrays["v_shift"], v_scale=arrays["v_scale"])
