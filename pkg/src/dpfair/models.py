"""Model families, per-sample losses/gradients, Hessian traces, HVPs.

Three families are supported:

* ``linear_l2``      -- linear predictor theta^T x with squared loss (f - y)^2;
                        theta has shape (d,).
* ``softmax_linear`` -- softmax(theta^T x) with cross-entropy; theta is (d, K).
* ``mlp1``           -- one hidden layer: softmax(theta1^T act(theta2^T x));
                        theta2 is (d, H), theta1 is (H, K).

Parameters live in a single flat float64 vector.  Flattening order is fixed:
row-major theta for the linear families, and row-major theta2 followed by
row-major theta1 for ``mlp1``.  Models are immutable value objects; updates
produce new instances via :meth:`Model.with_theta`.

Closed-form curvature:

* squared loss: per-sample Hessian trace is 2 ||x||^2;
* softmax linear: (1 - sum_k f_k^2) ||x||^2;
* mlp1: the exact diagonal of each layer block, summed --
  (1 - sum_k f_k^2) ||o||^2 for the output layer plus ||x||^2 * sum_j Gamma_j
  for the hidden layer, where Gamma_j combines the first and second activation
  derivatives with the output weights (see ``_mlp1_trace_per_sample``).
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .datasets import GroupedDataset

FAMILIES = ("linear_l2", "softmax_linear", "mlp1")
ACTIVATIONS = ("sigmoid", "tanh")

CHECKPOINT_VERSION = "dpfair-model-v1"


class UnsupportedFamilyError(ValueError):
    """Operation not defined for this model family."""


@dataclass(frozen=True)
class Model:
    """A model family tag plus a flat parameter vector and dimensions."""

    family: str
    theta: np.ndarray      # (P,) float64, read-only
    d: int
    K: int = 2
    H: int = 0
    activation: str = "tanh"

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown model family {self.family!r}")
        if self.family == "mlp1":
            if self.H < 1:
                raise ValueError("mlp1 requires hidden width H >= 1")
            if self.activation not in ACTIVATIONS:
                raise ValueError(f"unknown activation {self.activation!r}")
        theta = np.asarray(self.theta, dtype=np.float64)
        if theta.shape != (self.param_count,):
            raise ValueError(
                f"theta has shape {theta.shape}, expected ({self.param_count},)"
            )
        theta.setflags(write=False)
        object.__setattr__(self, "theta", theta)

    @property
    def param_count(self) -> int:
        if self.family == "linear_l2":
            return self.d
        if self.family == "softmax_linear":
            return self.d * self.K
        return self.d * self.H + self.H * self.K

    @property
    def is_classifier(self) -> bool:
        return self.family in ("softmax_linear", "mlp1")

    # Parameter views (zero-copy where contiguity allows).
    @property
    def weights(self) -> np.ndarray:
        if self.family == "linear_l2":
            return self.theta
        if self.family == "softmax_linear":
            return self.theta.reshape(self.d, self.K)
        raise UnsupportedFamilyError("mlp1 exposes hidden_weights / output_weights")

    @property
    def hidden_weights(self) -> np.ndarray:
        if self.family != "mlp1":
            raise UnsupportedFamilyError("hidden_weights only exists for mlp1")
        return self.theta[: self.d * self.H].reshape(self.d, self.H)

    @property
    def output_weights(self) -> np.ndarray:
        if self.family != "mlp1":
            raise UnsupportedFamilyError("output_weights only exists for mlp1")
        return self.theta[self.d * self.H :].reshape(self.H, self.K)

    def with_theta(self, theta: np.ndarray) -> "Model":
        return replace(self, theta=np.asarray(theta, dtype=np.float64))

    @classmethod
    def init(
        cls,
        family: str,
        d: int,
        K: int = 2,
        H: int = 16,
        activation: str = "tanh",
        seed: int | None = None,
        init_scale: float = 0.1,
    ) -> "Model":
        """Fresh model at theta = 0; mlp1 breaks symmetry with a seeded
        Gaussian init of scale ``init_scale`` (zeros would freeze the net)."""
        if family == "mlp1":
            rng = np.random.default_rng(0 if seed is None else seed)
            theta = init_scale * rng.standard_normal(d * H + H * K)
            return cls(family, theta, d=d, K=K, H=H, activation=activation)
        P = d if family == "linear_l2" else d * K
        return cls(family, np.zeros(P), d=d, K=K, H=H, activation=activation)


@dataclass(frozen=True)
class GradSet:
    """Per-sample gradient rows (m, P) plus the source row indices."""

    per_sample: np.ndarray
    indices: np.ndarray

    def mean(self) -> np.ndarray:
        return self.per_sample.mean(axis=0)

    def norms(self) -> np.ndarray:
        return np.linalg.norm(self.per_sample, axis=1)


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _act(name: str, h: np.ndarray):
    """Activation value and its first/second derivatives at h."""
    if name == "sigmoid":
        o = 1.0 / (1.0 + np.exp(-h))
        d1 = o * (1.0 - o)
        d2 = d1 * (1.0 - 2.0 * o)
    else:  # tanh
        o = np.tanh(h)
        d1 = 1.0 - o * o
        d2 = -2.0 * o * d1
    return o, d1, d2


def _check_width(m: Model, X: np.ndarray):
    if X.ndim != 2 or X.shape[1] != m.d:
        raise ValueError(f"input has shape {X.shape}, expected (*, {m.d})")


def _subset(ds: GroupedDataset, subset) -> np.ndarray:
    idx = np.arange(ds.n) if subset is None else np.asarray(subset, dtype=np.int64)
    if idx.size == 0:
        raise ValueError("subset must be non-empty")
    return idx


def _onehot(labels: np.ndarray, K: int) -> np.ndarray:
    Y = np.zeros((labels.size, K))
    Y[np.arange(labels.size), labels] = 1.0
    return Y


def forward(m: Model, X: np.ndarray) -> np.ndarray:
    """Class probabilities (n, K) for classifiers; real predictions (n,) for linear_l2."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    _check_width(m, X)
    if m.family == "linear_l2":
        return X @ m.theta
    if m.family == "softmax_linear":
        return _softmax(X @ m.weights)
    o, _, _ = _act(m.activation, X @ m.hidden_weights)
    return _softmax(o @ m.output_weights)


def per_sample_loss(m: Model, ds: GroupedDataset, subset=None) -> np.ndarray:
    idx = _subset(ds, subset)
    X = ds.features[idx]
    y = ds.labels[idx]
    if m.family == "linear_l2":
        return (X @ m.theta - y) ** 2
    if m.family == "softmax_linear":
        z = X @ m.weights
    else:
        o, _, _ = _act(m.activation, X @ m.hidden_weights)
        z = o @ m.output_weights
    zmax = z.max(axis=1)
    logsumexp = zmax + np.log(np.exp(z - zmax[:, None]).sum(axis=1))
    return logsumexp - z[np.arange(idx.size), y]


def loss_mean(m: Model, ds: GroupedDataset, subset=None) -> float:
    """Mean per-sample loss over the subset (cross-entropy or squared error)."""
    return float(per_sample_loss(m, ds, subset).mean())


def per_sample_grad(m: Model, ds: GroupedDataset, subset=None) -> GradSet:
    """Analytic per-sample gradients, one flattened row per subset element.

    Minimization convention: softmax rows are x (f - y)^T, so gradient norms
    scale with the input norms when the residual is held fixed.
    """
    idx = _subset(ds, subset)
    X = ds.features[idx]
    y = ds.labels[idx]
    n = idx.size
    if m.family == "linear_l2":
        resid = X @ m.theta - y                       # (n,)
        rows = 2.0 * resid[:, None] * X
        return GradSet(rows, idx)
    if m.family == "softmax_linear":
        F = _softmax(X @ m.weights)
        delta = F - _onehot(y, m.K)                   # (n, K)
        rows = np.einsum("ni,nk->nik", X, delta).reshape(n, -1)
        return GradSet(rows, idx)
    # mlp1: backprop through the hidden layer
    h = X @ m.hidden_weights
    o, d1, _ = _act(m.activation, h)
    F = _softmax(o @ m.output_weights)
    delta_out = F - _onehot(y, m.K)                   # (n, K)
    g1 = np.einsum("nj,nk->njk", o, delta_out)        # (n, H, K)
    delta_hid = (delta_out @ m.output_weights.T) * d1  # (n, H)
    g2 = np.einsum("ni,nj->nij", X, delta_hid)        # (n, d, H)
    rows = np.concatenate([g2.reshape(n, -1), g1.reshape(n, -1)], axis=1)
    return GradSet(rows, idx)


def _mlp1_trace_per_sample(m: Model, X: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Exact diagonal Hessian trace of the cross-entropy loss, per sample.

    Output layer block: d2l/d theta1[j,k]^2 = f_k (1 - f_k) o_j^2, summing to
    (1 - sum_k f_k^2) ||o||^2.  Hidden layer block: d2l/d theta2[i,j]^2 =
    x_i^2 Gamma_j with
    Gamma_j = act''(h_j) sum_k theta1[j,k] (f_k - y_k)
            + act'(h_j)^2 (sum_k theta1[j,k]^2 f_k - (sum_k theta1[j,k] f_k)^2).
    """
    h = X @ m.hidden_weights
    o, d1, d2 = _act(m.activation, h)
    F = _softmax(o @ m.output_weights)
    Y = _onehot(y, m.K)
    t1 = (1.0 - (F * F).sum(axis=1)) * (o * o).sum(axis=1)
    W1 = m.output_weights                                 # (H, K)
    resid_term = (F - Y) @ W1.T                           # (n, H): sum_k W1[j,k](f_k - y_k)
    quad_a = F @ (W1 * W1).T                              # (n, H): sum_k W1[j,k]^2 f_k
    quad_b = (F @ W1.T) ** 2                              # (n, H): (sum_k W1[j,k] f_k)^2
    gamma = d2 * resid_term + d1 * d1 * (quad_a - quad_b)  # (n, H)
    t2 = (X * X).sum(axis=1) * gamma.sum(axis=1)
    return t1 + t2


def per_sample_hessian_trace(m: Model, ds: GroupedDataset, subset=None) -> np.ndarray:
    """Closed-form trace of the per-sample loss Hessian at the current parameters."""
    idx = _subset(ds, subset)
    X = ds.features[idx]
    if m.family == "linear_l2":
        return 2.0 * (X * X).sum(axis=1)
    if m.family == "softmax_linear":
        F = _softmax(X @ m.weights)
        return (1.0 - (F * F).sum(axis=1)) * (X * X).sum(axis=1)
    return _mlp1_trace_per_sample(m, X, ds.labels[idx])


def hessian_trace(m: Model, ds: GroupedDataset, subset=None) -> float:
    """Mean per-sample Hessian trace over the subset."""
    return float(per_sample_hessian_trace(m, ds, subset).mean())


def hvp(m: Model, ds: GroupedDataset, subset, v: np.ndarray) -> np.ndarray:
    """Product of the subset-mean loss Hessian with a parameter-shaped vector.

    softmax_linear uses the exact Kronecker-structured product; linear_l2 and
    mlp1 differentiate the mean gradient by central finite differences with a
    scale-aware step.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (m.param_count,):
        raise ValueError(f"vector has shape {v.shape}, expected ({m.param_count},)")
    idx = _subset(ds, subset)
    if m.family == "softmax_linear":
        X = ds.features[idx]
        V = v.reshape(m.d, m.K)
        F = _softmax(X @ m.weights)
        U = X @ V                                      # (n, K)
        # (diag(f) - f f^T) u = f * u - f (f . u)
        W = F * U - F * (F * U).sum(axis=1, keepdims=True)
        return (X.T @ W).reshape(-1) / idx.size
    vnorm = np.linalg.norm(v)
    if vnorm == 0.0:
        return np.zeros_like(v)
    step = 1e-4 * max(1.0, np.linalg.norm(m.theta)) / max(1.0, vnorm)
    g_plus = per_sample_grad(m.with_theta(m.theta + step * v), ds, idx).mean()
    g_minus = per_sample_grad(m.with_theta(m.theta - step * v), ds, idx).mean()
    return (g_plus - g_minus) / (2.0 * step)


def boundary_score(m: Model, ds: GroupedDataset, subset=None) -> tuple[np.ndarray, float]:
    """Per-sample closeness-to-boundary score 1 - sum_k f_k^2, and its mean.

    The score lies in [0, 1 - 1/K]: largest for uniform predictions (on the
    decision boundary), zero for one-hot predictions.
    """
    if not m.is_classifier:
        raise UnsupportedFamilyError("boundary_score requires a classifier family")
    idx = _subset(ds, subset)
    F = forward(m, ds.features[idx])
    s = 1.0 - (F * F).sum(axis=1)
    return s, float(s.mean())


def boundary_score_grad(m: Model, ds: GroupedDataset, subset=None) -> np.ndarray:
    """Exact gradient of the mean boundary score w.r.t. the flat parameters."""
    if not m.is_classifier:
        raise UnsupportedFamilyError("boundary_score requires a classifier family")
    idx = _subset(ds, subset)
    X = ds.features[idx]
    n = idx.size
    if m.family == "softmax_linear":
        F = _softmax(X @ m.weights)
        # ds/dz_k = -2 f_k (f_k - sum_j f_j^2)
        dz = -2.0 * F * (F - (F * F).sum(axis=1, keepdims=True))
        return (X.T @ dz).reshape(-1) / n
    h = X @ m.hidden_weights
    o, d1, _ = _act(m.activation, h)
    F = _softmax(o @ m.output_weights)
    dz = -2.0 * F * (F - (F * F).sum(axis=1, keepdims=True))   # (n, K)
    g1 = np.einsum("nj,nk->njk", o, dz).reshape(n, -1)
    dhid = (dz @ m.output_weights.T) * d1
    g2 = np.einsum("ni,nj->nij", X, dhid).reshape(n, -1)
    return np.concatenate([g2, g1], axis=1).mean(axis=0)


def save_checkpoint(m: Model, path) -> None:
    """Write the model as a one-line header plus one parameter per line."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(
            f"{CHECKPOINT_VERSION} family={m.family} d={m.d} K={m.K} H={m.H} "
            f"activation={m.activation}\n"
        )
        for value in m.theta:
            fh.write(f"{float(value)!r}\n")


def load_checkpoint(path) -> Model:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().split()
        if not header or header[0] != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: not a {CHECKPOINT_VERSION} checkpoint")
        fields = dict(part.split("=", 1) for part in header[1:])
        theta = np.array([float(line) for line in fh if line.strip()])
    return Model(
        family=fields["family"],
        theta=theta,
        d=int(fields["d"]),
        K=int(fields["K"]),
        H=int(fields["H"]),
        activation=fields["activation"],
    )
