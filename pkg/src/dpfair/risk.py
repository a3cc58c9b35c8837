"""Excessive-risk estimation, its per-iteration decomposition, and analytics.

Excessive risk of a private training mechanism on data Z is

    R(Z) = E[ L(theta_tilde; Z) ] - L(theta_ref; Z)

with the expectation over the mechanism's randomness and theta_ref the
matched non-private parameters.  The per-group fairness gap is
xi_a = | R(D_a) - R(D) |.

``decompose_step`` splits the expected one-step loss change of DP-SGD into a
non-private descent term, a clipping term, and a noise term:

    nonprivate = L_a - lr <g_a, g_D> + (lr^2 / 2) E[g_B^T H_a g_B]
    clip       = lr (<g_a, g_D> - <g_a, gbar_D>)
                 + (lr^2 / 2) (E[gbar_B^T H_a gbar_B] - E[g_B^T H_a g_B])
    noise      = (lr^2 / 2) Tr(H_a) C^2 sigma^2

where g are mean gradients, gbar their clipped counterparts, H_a the mean
loss Hessian of group a, and batch expectations are taken either at the full
dataset (zero batch variance) or over Monte-Carlo Poisson batches.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from .datasets import GroupedDataset, poisson_batch
from .models import (
    Model,
    boundary_score,
    hessian_trace,
    hvp,
    loss_mean,
    per_sample_grad,
    per_sample_hessian_trace,
    per_sample_loss,
)
from .privacy import clip_rows


class TooManyFailuresError(RuntimeError):
    """More than 20% of Monte-Carlo runs produced non-finite losses."""


@dataclass(frozen=True)
class GroupRiskRow:
    group: str
    excess_risk: float
    gap: float
    loss_private_mean: float
    loss_nonprivate: float
    std_error: float


@dataclass(frozen=True)
class RiskReport:
    """Per-group and population excessive risk from Monte-Carlo runs."""

    rows: tuple[GroupRiskRow, ...]
    mc_runs: int
    excluded_runs: int = 0
    degenerate_stderr: bool = False

    RISK_HEADER = ("group", "R", "xi", "mc_runs", "stderr")

    def row(self, group: str) -> GroupRiskRow:
        for r in self.rows:
            if r.group == group:
                return r
        raise KeyError(group)

    def max_gap(self) -> float:
        return max(r.gap for r in self.rows if r.group != "population")

    def csv_rows(self):
        for r in self.rows:
            yield (r.group, r.excess_risk, r.gap, self.mc_runs, r.std_error)


def excess_risk_report(
    ds: GroupedDataset, private_models: Sequence[Model], theta_ref: Model
) -> RiskReport:
    """Risk report from already-trained private models and a reference model."""
    if not private_models:
        raise ValueError("at least one private model is required")
    labels = [("population", None)] + [
        (ds.group_names[g], ds.group_indices(g)) for g in ds.group_ids
    ]
    losses = {name: [] for name, _ in labels}
    excluded = 0
    for m in private_models:
        per_subset = {name: loss_mean(m, ds, idx) for name, idx in labels}
        if not all(math.isfinite(v) for v in per_subset.values()):
            excluded += 1
            continue
        for name, v in per_subset.items():
            losses[name].append(v)
    kept = len(private_models) - excluded
    if excluded > 0.2 * len(private_models):
        raise TooManyFailuresError(
            f"{excluded}/{len(private_models)} runs had non-finite losses"
        )

    ref = {name: loss_mean(theta_ref, ds, idx) for name, idx in labels}
    R = {name: float(np.mean(losses[name])) - ref[name] for name, _ in labels}
    stderr = {
        name: (0.0 if kept < 2 else float(np.std(losses[name], ddof=1)) / math.sqrt(kept))
        for name, _ in labels
    }
    rows = tuple(
        GroupRiskRow(
            group=name,
            excess_risk=R[name],
            gap=abs(R[name] - R["population"]),
            loss_private_mean=float(np.mean(losses[name])),
            loss_nonprivate=ref[name],
            std_error=stderr[name],
        )
        for name, _ in labels
    )
    return RiskReport(rows, mc_runs=kept, excluded_runs=excluded,
                      degenerate_stderr=kept == 1)


def excessive_risk_mc(
    ds: GroupedDataset,
    mechanism: Callable[[int], Model],
    reps: int,
    seed: int,
    theta_ref: Model,
) -> RiskReport:
    """Monte-Carlo excessive risk: run ``mechanism`` with derived seeds.

    ``mechanism`` maps a seed to private model parameters; repetition i uses
    seed + i, so results are independent of execution order.
    """
    if reps < 1:
        raise ValueError(f"repetition count must be >= 1, got {reps}")
    models = [mechanism(seed + i) for i in range(reps)]
    return excess_risk_report(ds, models, theta_ref)


@dataclass(frozen=True)
class DecompositionRow:
    """One group's share of the expected one-step loss change."""

    iteration: int
    group: str
    nonprivate_term: float
    clip_term: float
    noise_term: float
    g_norm_group: float
    g_norm_pop: float
    hessian_trace_group: float
    boundary_mean_group: float
    inner_clean: float        # <g_a, g_D>
    inner_clipped: float      # <g_a, gbar_D>
    quad_clean: float         # E[g_B^T H_a g_B]
    quad_clipped: float       # E[gbar_B^T H_a gbar_B]
    eps_so_far: float = math.nan
    skipped: bool = False

    DECOMP_HEADER = (
        "iter", "group", "nonprivate", "clip", "noise",
        "g_norm_group", "g_norm_pop", "trace", "boundary_mean", "eps_so_far",
    )

    def csv_row(self):
        return (
            self.iteration, self.group, self.nonprivate_term, self.clip_term,
            self.noise_term, self.g_norm_group, self.g_norm_pop,
            self.hessian_trace_group, self.boundary_mean_group, self.eps_so_far,
        )

    def total(self) -> float:
        return self.nonprivate_term + self.clip_term + self.noise_term


def decompose_step(
    m: Model,
    ds: GroupedDataset,
    lr: float,
    clip_bound: float,
    sigma: float,
    mode,
    q: float | None = None,
    rng: np.random.Generator | None = None,
    iteration: int = 0,
    eps_so_far: float = math.nan,
) -> list[DecompositionRow]:
    """Split the expected next-step group losses into the three terms above.

    ``mode.kind == "full_batch"`` evaluates the batch expectations at the full
    dataset (zero batch variance); ``"minibatch_mc"`` averages the quadratic
    forms over ``mode.mc_batches`` fresh Poisson batches of probability q.
    Empty groups are skipped with a flagged row.
    """
    if mode.kind == "off":
        raise ValueError("decomposition mode is off")
    G = per_sample_grad(m, ds).per_sample
    G_clipped = clip_rows(G, clip_bound)
    g_pop = G.mean(axis=0)
    gbar_pop = G_clipped.mean(axis=0)

    # batch-expectation vectors for the quadratic forms
    if mode.kind == "full_batch":
        batch_pairs = [(g_pop, gbar_pop)]
    else:
        if q is None or rng is None:
            raise ValueError("minibatch_mc decomposition needs q and an rng")
        batch_pairs = []
        for _ in range(mode.mc_batches):
            b = poisson_batch(ds.n, q, rng)
            if b.size == 0:
                continue
            batch_pairs.append((G[b].mean(axis=0), G_clipped[b].mean(axis=0)))
        if not batch_pairs:
            batch_pairs = [(g_pop, gbar_pop)]

    rows = []
    for gid in ds.group_ids:
        idx = ds.group_indices(gid)
        name = ds.group_names[gid]
        if idx.size == 0:
            rows.append(DecompositionRow(
                iteration, name, math.nan, math.nan, math.nan, math.nan,
                float(np.linalg.norm(g_pop)), math.nan, math.nan, math.nan,
                math.nan, math.nan, math.nan, eps_so_far, skipped=True,
            ))
            continue
        g_a = G[idx].mean(axis=0)
        loss_a = loss_mean(m, ds, idx)
        trace_a = hessian_trace(m, ds, idx)
        if m.is_classifier:
            _, boundary_a = boundary_score(m, ds, idx)
        else:
            boundary_a = math.nan

        quad_clean = 0.0
        quad_clipped = 0.0
        for g_b, gbar_b in batch_pairs:
            quad_clean += float(g_b @ hvp(m, ds, idx, g_b))
            quad_clipped += float(gbar_b @ hvp(m, ds, idx, gbar_b))
        quad_clean /= len(batch_pairs)
        quad_clipped /= len(batch_pairs)

        inner_clean = float(g_a @ g_pop)
        inner_clipped = float(g_a @ gbar_pop)
        half_lr2 = 0.5 * lr * lr
        nonprivate = loss_a - lr * inner_clean + half_lr2 * quad_clean
        clip_term = lr * (inner_clean - inner_clipped) + half_lr2 * (quad_clipped - quad_clean)
        noise_term = half_lr2 * trace_a * clip_bound * clip_bound * sigma * sigma
        rows.append(DecompositionRow(
            iteration, name, nonprivate, clip_term, noise_term,
            float(np.linalg.norm(g_a)), float(np.linalg.norm(g_pop)),
            trace_a, boundary_a, inner_clean, inner_clipped,
            quad_clean, quad_clipped, eps_so_far,
        ))
    return rows


def check_clip_dominance(
    g_norm_a: float, g_norm_b: float, p_a: float, p_b: float, clip_bound: float
) -> tuple[bool, float]:
    """Sufficient condition for group a's clipping term to exceed group b's.

    Returns (condition holds, margin) where the condition is

        ||g_a|| (p_a - p_a^2/2)  >=  (5/2) C + ||g_b|| (1 + p_b + p_b^2/2)

    and the margin is LHS - RHS.
    """
    if abs(p_a + p_b - 1.0) > 1e-9:
        raise ValueError(f"group fractions must sum to 1, got {p_a} + {p_b}")
    if g_norm_a < 0 or g_norm_b < 0 or clip_bound < 0:
        raise ValueError("norms and clip bound must be non-negative")
    lhs = g_norm_a * (p_a - p_a * p_a / 2.0)
    rhs = 2.5 * clip_bound + g_norm_b * (1.0 + p_b + p_b * p_b / 2.0)
    margin = lhs - rhs
    return margin >= 0.0, margin


def predict_noise_order(trace_a: float, trace_b: float) -> str:
    """Predicted ordering of the per-group noise terms from their Hessian traces."""
    if not (math.isfinite(trace_a) and math.isfinite(trace_b)):
        raise ValueError("traces must be finite")
    if trace_a > trace_b:
        return "a>b"
    if trace_a < trace_b:
        return "a<b"
    return "equal"


@dataclass(frozen=True)
class GapPrediction:
    per_group: dict[str, float]
    population_trace: float
    optimality_warning: bool


def predict_output_pert_gap(
    ds: GroupedDataset, theta_star: Model, sensitivity: float, sigma: float
) -> GapPrediction:
    """Closed-form excessive-risk-gap prediction for output perturbation:

        xi_a ~= (1/2) (sensitivity * sigma)^2 | Tr(H_a) - Tr(H) |

    evaluated at theta_star.  A warning flag is set when the population
    gradient norm exceeds 1e-6, since the second-order expansion assumes the
    trained optimum.
    """
    g_norm = float(np.linalg.norm(per_sample_grad(theta_star, ds).per_sample.mean(axis=0)))
    warn = g_norm > 1e-6
    trace_pop = hessian_trace(theta_star, ds)
    scale = 0.5 * (sensitivity * sigma) ** 2
    per_group = {
        ds.group_names[g]: scale * abs(hessian_trace(theta_star, ds, ds.group_indices(g)) - trace_pop)
        for g in ds.group_ids
    }
    return GapPrediction(per_group, trace_pop, warn)


DEFAULT_PAIRS = (
    ("input_norm", "grad_norm"),
    ("input_norm", "trace"),
    ("boundary", "trace"),
)


def sample_series(m: Model, ds: GroupedDataset, subset=None) -> dict[str, np.ndarray]:
    """Per-sample statistic series used by the correlation table."""
    idx = np.arange(ds.n) if subset is None else np.asarray(subset)
    series = {
        "input_norm": np.linalg.norm(ds.features[idx], axis=1),
        "grad_norm": per_sample_grad(m, ds, idx).norms(),
        "trace": per_sample_hessian_trace(m, ds, idx),
        "loss": per_sample_loss(m, ds, idx),
    }
    if m.is_classifier:
        series["boundary"] = boundary_score(m, ds, idx)[0]
    return series


@dataclass(frozen=True)
class CorrelationRow:
    pair: tuple[str, str]
    group: str            # group name or "pooled"
    pearson: float
    spearman: float
    defined: bool


def correlations(
    ds: GroupedDataset,
    series: dict[str, np.ndarray],
    pairs=DEFAULT_PAIRS,
) -> list[CorrelationRow]:
    """Pearson and Spearman coefficients per requested pair, per group and pooled.

    Zero-variance inputs yield an undefined row (NaN coefficients, flag off).
    Each group needs at least three samples.
    """
    scopes = [("pooled", np.arange(ds.n))] + [
        (ds.group_names[g], ds.group_indices(g)) for g in ds.group_ids
    ]
    rows = []
    for x_name, y_name in pairs:
        if x_name not in series or y_name not in series:
            raise KeyError(f"series for pair ({x_name}, {y_name}) not provided")
        x_all, y_all = series[x_name], series[y_name]
        for scope_name, idx in scopes:
            if idx.size < 3:
                raise ValueError(f"scope {scope_name!r} has fewer than 3 samples")
            x, y = x_all[idx], y_all[idx]
            if np.std(x) == 0.0 or np.std(y) == 0.0:
                rows.append(CorrelationRow((x_name, y_name), scope_name,
                                           math.nan, math.nan, False))
                continue
            pearson = float(stats.pearsonr(x, y).statistic)
            spearman = float(stats.spearmanr(x, y).statistic)
            rows.append(CorrelationRow((x_name, y_name), scope_name,
                                       pearson, spearman, True))
    return rows
