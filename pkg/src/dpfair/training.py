"""Training loops: plain SGD, DP-SGD, and the output-perturbation trainer.

All runs are deterministic given (config, dataset, seed).  Three independent
RNG streams are spawned from the seed -- batch sampling, privacy noise, and
decomposition batches -- so a non-private run with the same seed consumes the
identical batch sequence as its private twin, and enabling the per-iteration
risk decomposition never perturbs the trained parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import risk as _risk
from .datasets import GroupedDataset, fixed_batch, poisson_batch
from .models import Model, UnsupportedFamilyError, loss_mean, per_sample_grad
from .privacy import PrivacySpec, RdpAccountant, calibrate_sigma, clip_rows, output_pert_sensitivity


class DivergenceError(RuntimeError):
    """Training loss became non-finite."""


class ConvergenceError(RuntimeError):
    """The deterministic optimizer failed to reach the gradient tolerance."""


@dataclass(frozen=True)
class DecompositionMode:
    """Per-iteration risk decomposition: off, full-batch, or Monte-Carlo batches."""

    kind: str = "off"            # "off" | "full_batch" | "minibatch_mc"
    mc_batches: int = 16

    def __post_init__(self):
        if self.kind not in ("off", "full_batch", "minibatch_mc"):
            raise ValueError(f"unknown decomposition mode {self.kind!r}")
        if self.kind == "minibatch_mc" and self.mc_batches < 1:
            raise ValueError("minibatch_mc requires at least one batch")

    @classmethod
    def parse(cls, text: str) -> "DecompositionMode":
        if text in ("off", "none"):
            return cls("off")
        if text == "full":
            return cls("full_batch")
        if text.startswith("mc:"):
            return cls("minibatch_mc", int(text.split(":", 1)[1]))
        raise ValueError(f"cannot parse decomposition mode {text!r}")


@dataclass
class TrainConfig:
    """Declarative description of one training run."""

    family: str = "softmax_linear"
    d: int = 2
    K: int = 2
    H: int = 16
    activation: str = "tanh"
    lr: float = 1e-4
    iterations: int = 100
    seed: int = 0
    batch_scheme: str = "poisson"    # "poisson" | "fixed"
    q: float = 0.05
    batch_size: int = 32
    privacy: PrivacySpec | None = None
    lam: float = 1.0                 # regularization for output perturbation
    decomposition: DecompositionMode = field(default_factory=DecompositionMode)
    checkpoint_every: int = 0        # 0 disables snapshots

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")
        if self.iterations < 1:
            raise ValueError(f"iteration count must be >= 1, got {self.iterations}")
        if self.batch_scheme not in ("poisson", "fixed"):
            raise ValueError(f"unknown batch scheme {self.batch_scheme!r}")
        if (
            self.privacy is not None
            and self.privacy.mechanism == "output_perturbation"
            and self.lam <= 0
        ):
            raise ValueError("output perturbation requires a positive regularization")


@dataclass
class TraceStep:
    iteration: int
    batch_size: int
    loss_population: float
    epsilon_so_far: float
    skipped: bool = False


@dataclass
class TrainTrace:
    """Per-iteration records of one run; identical seeds give identical traces."""

    steps: list[TraceStep] = field(default_factory=list)
    batches: list[np.ndarray] = field(default_factory=list)
    decomposition: list = field(default_factory=list)
    checkpoints: list[tuple[int, Model]] = field(default_factory=list)

    TRACE_HEADER = ("iter", "batch_size", "loss_population", "epsilon_so_far")

    def rows(self):
        for s in self.steps:
            yield (s.iteration, s.batch_size, s.loss_population, s.epsilon_so_far)


@dataclass
class TrainResult:
    model: Model
    trace: TrainTrace
    accountant: RdpAccountant | None


def _mean_grad(m: Model, ds: GroupedDataset, batch) -> np.ndarray:
    return per_sample_grad(m, ds, batch).per_sample.mean(axis=0)


def sgd_step(m: Model, ds: GroupedDataset, batch, lr: float) -> Model:
    """One plain SGD step on the mean per-sample gradient of the batch."""
    batch = np.asarray(batch)
    if batch.size == 0:
        raise ValueError("sgd_step requires a non-empty batch")
    return m.with_theta(m.theta - lr * _mean_grad(m, ds, batch))


def dpsgd_step(
    m: Model,
    ds: GroupedDataset,
    batch,
    lr: float,
    clip_bound: float,
    sigma: float,
    rng: np.random.Generator,
) -> Model:
    """One DP-SGD step: clip per-sample gradients, add one N(0, I C^2 sigma^2)
    draw to their sum, divide by the realized batch size, descend."""
    batch = np.asarray(batch)
    if batch.size == 0:
        raise ValueError("dpsgd_step requires a non-empty batch")
    if clip_bound <= 0:
        raise ValueError("clip bound must be positive")
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    G = per_sample_grad(m, ds, batch).per_sample
    clipped = clip_rows(G, clip_bound)
    if sigma > 0:
        total = clipped.sum(axis=0) + rng.normal(0.0, clip_bound * sigma, size=m.param_count)
        g_bar = total / batch.size
    else:
        g_bar = clipped.mean(axis=0)
    return m.with_theta(m.theta - lr * g_bar)


def _spawn_rngs(seed: int):
    batch_ss, noise_ss, decomp_ss, init_ss = np.random.SeedSequence(seed).spawn(4)
    return (
        np.random.default_rng(batch_ss),
        np.random.default_rng(noise_ss),
        np.random.default_rng(decomp_ss),
        init_ss.entropy,
    )


def init_model(cfg: TrainConfig) -> Model:
    """theta0 = 0 for the linear families; seeded Gaussian init for mlp1."""
    return Model.init(
        cfg.family, cfg.d, K=cfg.K, H=cfg.H, activation=cfg.activation,
        seed=cfg.seed,
    )


def train(
    cfg: TrainConfig,
    ds: GroupedDataset,
    step_fn: Callable[..., Model] | None = None,
    step_hook: Callable[[int, Model, np.ndarray], None] | None = None,
) -> TrainResult:
    """Run the configured loop and return (model, trace, accountant).

    ``step_fn`` overrides the parameter update (used by the mitigation step);
    it receives (model, ds, batch, lr, clip_bound, sigma, rng) like
    :func:`dpsgd_step`.  ``step_hook`` is called with (iteration, model, batch)
    before each update.
    """
    batch_rng, noise_rng, decomp_rng, _ = _spawn_rngs(cfg.seed)
    model = init_model(cfg)
    privacy = cfg.privacy
    private = privacy is not None and privacy.mechanism == "dpsgd"

    accountant = None
    if private:
        q_acct = cfg.q if cfg.batch_scheme == "poisson" else cfg.batch_size / ds.n
        accountant = RdpAccountant(q_acct, privacy.sigma, privacy.delta)

    trace = TrainTrace()
    for t in range(cfg.iterations):
        if cfg.batch_scheme == "poisson":
            batch = poisson_batch(ds.n, cfg.q, batch_rng)
        else:
            batch = fixed_batch(ds.n, cfg.batch_size, batch_rng)
        trace.batches.append(batch)

        if cfg.decomposition.kind != "off" and private:
            trace.decomposition.extend(
                _risk.decompose_step(
                    model, ds,
                    lr=cfg.lr,
                    clip_bound=privacy.clip_bound,
                    sigma=privacy.sigma,
                    mode=cfg.decomposition,
                    q=cfg.q,
                    rng=decomp_rng,
                    iteration=t,
                    eps_so_far=accountant.epsilon if accountant else math.nan,
                )
            )

        if step_hook is not None:
            step_hook(t, model, batch)

        skipped = batch.size == 0
        if not skipped:
            if private:
                if step_fn is None:
                    model = dpsgd_step(
                        model, ds, batch, cfg.lr, privacy.clip_bound, privacy.sigma, noise_rng
                    )
                else:
                    model = step_fn(
                        model, ds, batch, cfg.lr, privacy.clip_bound, privacy.sigma, noise_rng
                    )
            else:
                model = sgd_step(model, ds, batch, cfg.lr)

        eps = accountant.step() if accountant else math.nan
        loss = loss_mean(model, ds)
        if not math.isfinite(loss):
            raise DivergenceError(f"population loss became non-finite at iteration {t}")
        trace.steps.append(TraceStep(t, int(batch.size), loss, eps, skipped))

        if cfg.checkpoint_every and (t + 1) % cfg.checkpoint_every == 0:
            trace.checkpoints.append((t, model))

    return TrainResult(model, trace, accountant)


def _regularized_minimize(
    m: Model, ds: GroupedDataset, lam: float, grad_tol: float = 1e-8, max_iter: int = 100_000
) -> Model:
    """Deterministic full-batch gradient descent with Armijo backtracking on
    the regularized empirical risk L(theta) + (lam/2) ||theta||^2."""

    def objective(model: Model) -> float:
        return loss_mean(model, ds) + 0.5 * lam * float(model.theta @ model.theta)

    def gradient(model: Model) -> np.ndarray:
        return _mean_grad(model, ds, None) + lam * model.theta

    step = 1.0
    value = objective(m)
    for _ in range(max_iter):
        g = gradient(m)
        gnorm = float(np.linalg.norm(g))
        if gnorm <= grad_tol:
            return m
        step = min(step * 2.0, 1e6)
        while True:
            candidate = m.with_theta(m.theta - step * g)
            cand_value = objective(candidate)
            if cand_value <= value - 1e-4 * step * gnorm * gnorm:
                break
            step *= 0.5
            if step < 1e-18:
                raise ConvergenceError(
                    f"line search stalled at gradient norm {gnorm:.3e}"
                )
        m, value = candidate, cand_value
    gnorm = float(np.linalg.norm(gradient(m)))
    if gnorm <= grad_tol:
        return m
    raise ConvergenceError(f"optimizer stopped at gradient norm {gnorm:.3e}")


def train_output_pert(
    ds: GroupedDataset,
    lam: float,
    epsilon: float,
    delta: float,
    seed: int,
    family: str = "linear_l2",
    K: int = 2,
    sigma: float | None = None,
) -> tuple[Model, Model]:
    """Optimal regularized model plus its Gaussian-perturbed release.

    Returns (theta_star, theta_tilde) where theta_tilde = theta_star + psi,
    psi ~ N(0, I (sensitivity * sigma)^2) with sensitivity 2 / (n lam).  When
    ``sigma`` is not given it is calibrated to (epsilon, delta).
    """
    if family not in ("linear_l2", "softmax_linear"):
        raise UnsupportedFamilyError(
            f"output perturbation requires a convex family, got {family!r}"
        )
    if lam <= 0:
        raise ValueError("regularization parameter must be positive")
    sens = output_pert_sensitivity(ds.n, lam)
    if sigma is None:
        sigma = calibrate_sigma(epsilon, delta, sens)
    m0 = Model.init(family, ds.d, K=K)
    theta_star = _regularized_minimize(m0, ds, lam)
    _, noise_rng, _, _ = _spawn_rngs(seed)
    noise_std = sens * sigma
    if noise_std > 0:
        psi = noise_rng.normal(0.0, noise_std, size=theta_star.param_count)
        theta_tilde = theta_star.with_theta(theta_star.theta + psi)
    else:
        theta_tilde = theta_star
    return theta_star, theta_tilde
