"""Fairness mitigation penalty and the penalized DP-SGD step.

The penalty discourages per-group deviations of the two quantities that drive
disparate excessive risk under DP-SGD:

    sum_a  gamma1 | <g_a - g_D, g_D - gbar_D> |          (clip alignment)
         + gamma2 | sbar(D_a) - sbar(D) |                (boundary surrogate)

where sbar is the mean closeness-to-boundary score 1 - sum_k f_k^2.  The
``trace`` surrogate replaces the second term with |Tr(H_a) - Tr(H)|, kept for
small-model fidelity checks; the boundary surrogate is the default because
exact Hessians are expensive at every step.

Gradient rules: the boundary term is differentiated exactly;  the clip term
freezes c = g_D - gbar_D (no gradient through the clipped average, which is
piecewise) and uses d/dtheta <g_a - g_D, c> = (H_a - H) c via Hessian-vector
products.  At a kink (|.| = 0) the subgradient 0 is used.  The penalty is
computed on the full dataset, not the mini-batch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datasets import GroupedDataset
from .models import (
    Model,
    UnsupportedFamilyError,
    boundary_score,
    boundary_score_grad,
    hessian_trace,
    hvp,
    per_sample_grad,
)
from .privacy import clip_rows
from .training import dpsgd_step

SURROGATES = ("boundary_score", "trace")


@dataclass(frozen=True)
class MitigationConfig:
    gamma1: float = 1.0
    gamma2: float = 1.0
    surrogate: str = "boundary_score"

    def __post_init__(self):
        if self.gamma1 < 0 or self.gamma2 < 0:
            raise ValueError("penalty multipliers must be non-negative")
        if self.surrogate not in SURROGATES:
            raise ValueError(f"unknown surrogate {self.surrogate!r}")

    @property
    def inactive(self) -> bool:
        return self.gamma1 == 0.0 and self.gamma2 == 0.0


@dataclass(frozen=True)
class PenaltyBreakdown:
    total: float
    clip_part: float        # gamma1-weighted sum over groups
    noise_part: float       # gamma2-weighted sum over groups
    per_group: dict[str, tuple[float, float]]
    single_group: bool = False


def _group_stats(m: Model, ds: GroupedDataset, clip_bound: float):
    G = per_sample_grad(m, ds).per_sample
    gbar = clip_rows(G, clip_bound).mean(axis=0)
    g_pop = G.mean(axis=0)
    per_group = {
        gid: G[ds.group_indices(gid)].mean(axis=0) for gid in ds.group_ids
    }
    return g_pop, gbar, per_group


def penalty_value(
    m: Model, ds: GroupedDataset, clip_bound: float, cfg: MitigationConfig
) -> PenaltyBreakdown:
    """Penalty value plus its per-group (clip, surrogate) parts.

    Zero whenever every group's statistics match the population's; a
    single-group dataset yields zero with the ``single_group`` flag set.
    """
    if clip_bound <= 0:
        raise ValueError("clip bound must be positive")
    if len(ds.group_ids) < 2:
        return PenaltyBreakdown(0.0, 0.0, 0.0, {}, single_group=True)
    if cfg.surrogate == "boundary_score" and not m.is_classifier:
        raise UnsupportedFamilyError("boundary surrogate requires a classifier family")

    g_pop, gbar, group_means = _group_stats(m, ds, clip_bound)
    c = g_pop - gbar
    if cfg.surrogate == "boundary_score":
        pop_stat = boundary_score(m, ds)[1]
        group_stat = {gid: boundary_score(m, ds, ds.group_indices(gid))[1]
                      for gid in ds.group_ids}
    else:
        pop_stat = hessian_trace(m, ds)
        group_stat = {gid: hessian_trace(m, ds, ds.group_indices(gid))
                      for gid in ds.group_ids}

    clip_part = 0.0
    noise_part = 0.0
    per_group = {}
    for gid in ds.group_ids:
        align = abs(float((group_means[gid] - g_pop) @ c))
        spread = abs(group_stat[gid] - pop_stat)
        clip_part += cfg.gamma1 * align
        noise_part += cfg.gamma2 * spread
        per_group[ds.group_names[gid]] = (align, spread)
    return PenaltyBreakdown(clip_part + noise_part, clip_part, noise_part, per_group)


def penalty_grad(
    m: Model, ds: GroupedDataset, clip_bound: float, cfg: MitigationConfig
) -> np.ndarray:
    """Subgradient of :func:`penalty_value` with respect to the parameters."""
    if clip_bound <= 0:
        raise ValueError("clip bound must be positive")
    out = np.zeros(m.param_count)
    if cfg.inactive or len(ds.group_ids) < 2:
        return out
    if cfg.surrogate == "trace":
        raise UnsupportedFamilyError(
            "penalty_grad supports only the boundary_score surrogate"
        )
    if not m.is_classifier:
        raise UnsupportedFamilyError("boundary surrogate requires a classifier family")

    g_pop, gbar, group_means = _group_stats(m, ds, clip_bound)
    c = g_pop - gbar

    if cfg.gamma2 > 0:
        pop_stat = boundary_score(m, ds)[1]
        pop_grad = boundary_score_grad(m, ds)
        for gid in ds.group_ids:
            idx = ds.group_indices(gid)
            diff = boundary_score(m, ds, idx)[1] - pop_stat
            if diff == 0.0:
                continue
            sign = 1.0 if diff > 0 else -1.0
            out += cfg.gamma2 * sign * (boundary_score_grad(m, ds, idx) - pop_grad)

    if cfg.gamma1 > 0 and np.any(c != 0.0):
        hc_pop = hvp(m, ds, None, c)
        for gid in ds.group_ids:
            inner = float((group_means[gid] - g_pop) @ c)
            if inner == 0.0:
                continue
            sign = 1.0 if inner > 0 else -1.0
            hc_group = hvp(m, ds, ds.group_indices(gid), c)
            out += cfg.gamma1 * sign * (hc_group - hc_pop)
    return out


def mitigated_dpsgd_step(
    m: Model,
    ds: GroupedDataset,
    batch,
    lr: float,
    clip_bound: float,
    sigma: float,
    rng: np.random.Generator,
    cfg: MitigationConfig = MitigationConfig(),
) -> Model:
    """DP-SGD step plus the penalty subgradient (computed on the full data).

    The penalty gradient is added after the clip-and-noise data term and is
    not privatized; with both multipliers zero this is byte-identical to
    :func:`dpsgd_step`.
    """
    if cfg.inactive:
        return dpsgd_step(m, ds, batch, lr, clip_bound, sigma, rng)
    pg = penalty_grad(m, ds, clip_bound, cfg)
    stepped = dpsgd_step(m, ds, batch, lr, clip_bound, sigma, rng)
    return stepped.with_theta(stepped.theta - lr * pg)


def make_mitigated_step(cfg: MitigationConfig):
    """Adapter with the :func:`dpsgd_step` signature for ``train(step_fn=...)``."""

    def step(m, ds, batch, lr, clip_bound, sigma, rng):
        return mitigated_dpsgd_step(m, ds, batch, lr, clip_bound, sigma, rng, cfg)

    return step
