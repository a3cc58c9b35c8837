"""Config-driven experiment runner: single runs, sweeps, and report joins.

Commands::

    dpfair run   CONFIG [--out DIR] [--seed N] [--decompose {off,full,mc:M}]
    dpfair sweep CONFIG [--out DIR] [--seed N] [--jobs N] [--decompose ...]
    dpfair report DIR [DIR ...] [--out DIR]

Every run directory contains a copy of the resolved config, a manifest
(config hash, dataset hash, seed, package version), the per-group risk CSV,
and the accountant log; the decomposition and correlation CSVs are written
when enabled.  Reruns with the same config and seed produce byte-identical
CSVs.  The environment variable ``DPFAIR_OUT`` sets the default output root.

Exit codes: 0 success, 1 runtime failure, 2 config/usage error.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path

import click
import numpy as np
import yaml

from . import __version__
from .datasets import GroupedDataset, ColumnSchema, load_csv, resample_ratio, standardize, synth_two_group
from .mitigation import MitigationConfig, make_mitigated_step, penalty_value
from .models import Model, save_checkpoint
from .privacy import PrivacySpec, calibrate_sigma, epsilon_for_sigma, output_pert_sensitivity
from .risk import RiskReport, correlations, excess_risk_report, excessive_risk_mc, sample_series
from .training import DecompositionMode, TrainConfig, train, train_output_pert

SWEEP_AXES = ("epsilon", "clip_bound", "gamma")


class ConfigError(ValueError):
    """Invalid experiment configuration; message names the offending field."""


# ---------------------------------------------------------------------------
# configuration


@dataclass
class ExperimentConfig:
    raw: dict
    dataset: dict
    model: dict
    train: dict
    privacy: dict | None
    mitigation: dict | None
    sweep: dict | None
    mc: dict
    output_dir: str | None
    want_correlations: bool
    want_trace: bool = False
    checkpoint_every: int = 0


def _require(block: dict, key: str, where: str):
    if key not in block:
        raise ConfigError(f"missing required field `{where}.{key}`")
    return block[key]


def load_config(path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        raw = yaml.safe_load(fh)
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    return validate_config(raw)


def validate_config(raw: dict) -> ExperimentConfig:
    dataset = _require(raw, "dataset", "")
    sources = [k for k in ("csv", "synthetic") if k in dataset]
    if len(sources) != 1:
        raise ConfigError("`dataset` needs exactly one source: `csv` or `synthetic`")
    if "csv" in dataset:
        block = dataset["csv"]
        for key in ("path", "feature_cols", "label_col", "group_col"):
            _require(block, key, "dataset.csv")
    else:
        block = dataset["synthetic"]
        for key in ("n_a", "n_b", "d"):
            _require(block, key, "dataset.synthetic")
    scope = dataset.get("standardize", "none")
    if scope not in ("none", "global", "per_group"):
        raise ConfigError(f"`dataset.standardize` must be none/global/per_group, got {scope!r}")

    model = raw.get("model", {})
    family = model.get("family", "softmax_linear")
    if family not in ("linear_l2", "softmax_linear", "mlp1"):
        raise ConfigError(f"`model.family` unknown: {family!r}")

    train_block = raw.get("train", {})
    batch = train_block.get("batch", {"scheme": "poisson", "q": 0.05})
    if batch.get("scheme", "poisson") not in ("poisson", "fixed"):
        raise ConfigError(f"`train.batch.scheme` must be poisson or fixed")
    decompose = train_block.get("decompose", "off")
    try:
        DecompositionMode.parse(str(decompose))
    except ValueError as exc:
        raise ConfigError(f"`train.decompose`: {exc}") from None

    privacy = raw.get("privacy")
    if privacy is not None:
        mech = privacy.get("mechanism", "dpsgd")
        if mech not in ("dpsgd", "output_perturbation"):
            raise ConfigError(f"`privacy.mechanism` unknown: {mech!r}")
        delta = _require(privacy, "delta", "privacy")
        if not 0.0 < float(delta) < 1.0:
            raise ConfigError("`privacy.delta` must lie in (0, 1)")
        if privacy.get("sigma") is None and privacy.get("epsilon") is None:
            raise ConfigError("`privacy` needs `sigma` or `epsilon`")
        if mech == "dpsgd" and privacy.get("sigma") is None:
            raise ConfigError("`privacy.sigma` is required for dpsgd")
        if mech == "output_perturbation" and float(privacy.get("lambda", 1.0)) <= 0:
            raise ConfigError("`privacy.lambda` must be positive")

    mitigation = raw.get("mitigation")
    if mitigation is not None:
        try:
            MitigationConfig(
                gamma1=float(mitigation.get("gamma1", 1.0)),
                gamma2=float(mitigation.get("gamma2", 1.0)),
                surrogate=mitigation.get("surrogate", "boundary_score"),
            )
        except ValueError as exc:
            raise ConfigError(f"`mitigation`: {exc}") from None
        if privacy is None or privacy.get("mechanism", "dpsgd") != "dpsgd":
            raise ConfigError("`mitigation` requires the dpsgd mechanism")

    sweep = raw.get("sweep")
    if sweep is not None:
        axis = _require(sweep, "axis", "sweep")
        if axis not in SWEEP_AXES:
            raise ConfigError(f"`sweep.axis` must be one of {SWEEP_AXES}, got {axis!r}")
        values = _require(sweep, "values", "sweep")
        if not isinstance(values, list) or not values:
            raise ConfigError("`sweep.values` must be a non-empty list")
        if axis == "epsilon":
            if privacy is None or privacy.get("mechanism") != "output_perturbation":
                raise ConfigError("`sweep.axis: epsilon` requires the output_perturbation mechanism")
        if axis in ("clip_bound", "gamma"):
            if privacy is None or privacy.get("mechanism", "dpsgd") != "dpsgd":
                raise ConfigError(f"`sweep.axis: {axis}` requires the dpsgd mechanism")
        if axis == "gamma" and mitigation is None:
            raise ConfigError("`sweep.axis: gamma` requires a `mitigation` block")

    mc = raw.get("mc", {})
    reps = int(mc.get("reps", 1))
    if reps < 1:
        raise ConfigError("`mc.reps` must be >= 1")

    return ExperimentConfig(
        raw=raw,
        dataset=dataset,
        model=model,
        train=train_block,
        privacy=privacy,
        mitigation=mitigation,
        sweep=sweep,
        mc={"reps": reps, "base_seed": int(mc.get("base_seed", 0))},
        output_dir=raw.get("output_dir"),
        want_correlations=bool(raw.get("correlations", False)),
        want_trace=bool(raw.get("trace", False)),
        checkpoint_every=int(train_block.get("checkpoint_every", 0)),
    )


def build_dataset(cfg: ExperimentConfig) -> GroupedDataset:
    block = cfg.dataset
    if "csv" in block:
        c = block["csv"]
        schema = ColumnSchema(
            feature_cols=tuple(c["feature_cols"]),
            label_col=c["label_col"],
            group_col=c["group_col"],
            positive_label=c.get("positive_label"),
            label_kind=c.get("label_kind", "categorical"),
        )
        ds = load_csv(c["path"], schema)
    else:
        s = block["synthetic"]
        ds = synth_two_group(
            int(s["n_a"]), int(s["n_b"]), int(s["d"]),
            float(s.get("norm_scale_a", 1.0)), float(s.get("norm_scale_b", 1.0)),
            seed=int(s.get("seed", 0)),
        )
    scope = block.get("standardize", "none")
    if scope != "none":
        ds = standardize(ds, scope)
    if "resample_ratio" in block:
        ds = resample_ratio(ds, float(block["resample_ratio"]),
                            seed=int(block.get("resample_seed", 0)))
    if block.get("project_unit_ball", False):
        X = np.asarray(ds.features)
        norms = np.linalg.norm(X, axis=1)
        scale = np.minimum(1.0, 1.0 / np.maximum(norms, 1e-300))
        ds = GroupedDataset(X * scale[:, None], ds.labels, ds.groups, dict(ds.group_names))
    return ds


def build_train_config(cfg: ExperimentConfig, ds: GroupedDataset, seed: int) -> TrainConfig:
    model, tr = cfg.model, cfg.train
    batch = tr.get("batch", {"scheme": "poisson", "q": 0.05})
    privacy_spec = None
    if cfg.privacy is not None and cfg.privacy.get("mechanism", "dpsgd") == "dpsgd":
        privacy_spec = PrivacySpec(
            delta=float(cfg.privacy["delta"]),
            epsilon=cfg.privacy.get("epsilon"),
            sigma=float(cfg.privacy["sigma"]),
            clip_bound=float(cfg.privacy.get("clip_bound", 0.1)),
            q=float(batch.get("q", 0.0)),
            iterations=int(tr.get("iterations", 100)),
            mechanism="dpsgd",
        )
    K = ds.num_classes() if model.get("family", "softmax_linear") != "linear_l2" else 2
    return TrainConfig(
        family=model.get("family", "softmax_linear"),
        d=ds.d,
        K=K,
        H=int(model.get("hidden", 16)),
        activation=model.get("activation", "tanh"),
        lr=float(tr.get("lr", 1e-4)),
        iterations=int(tr.get("iterations", 100)),
        seed=seed,
        batch_scheme=batch.get("scheme", "poisson"),
        q=float(batch.get("q", 0.05)),
        batch_size=int(batch.get("size", 32)),
        privacy=privacy_spec,
        lam=float(cfg.privacy.get("lambda", 1.0)) if cfg.privacy else 1.0,
        decomposition=DecompositionMode.parse(str(tr.get("decompose", "off"))),
        checkpoint_every=cfg.checkpoint_every,
    )


# ---------------------------------------------------------------------------
# artifact files


def _write_csv(path: Path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def dataset_hash(ds: GroupedDataset) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(ds.features).tobytes())
    h.update(np.ascontiguousarray(ds.labels).tobytes())
    h.update(np.ascontiguousarray(ds.groups).tobytes())
    return h.hexdigest()


def write_manifest(out: Path, cfg_bytes: bytes, ds: GroupedDataset, seed: int, extra=None):
    manifest = {
        "version": __version__,
        "config_sha256": _sha256_bytes(cfg_bytes),
        "dataset_sha256": dataset_hash(ds),
        "seed": seed,
        "n": ds.n,
        "d": ds.d,
        "groups": {str(k): v for k, v in ds.group_names.items()},
        "created_utc": datetime.now(timezone.utc).isoformat(),
    }
    if extra:
        manifest.update(extra)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def verify_manifest(run_dir: Path) -> dict:
    manifest = json.loads((run_dir / "manifest.json").read_text())
    cfg_bytes = (run_dir / "config.yaml").read_bytes()
    if _sha256_bytes(cfg_bytes) != manifest["config_sha256"]:
        raise ConfigError(f"{run_dir}: stored config does not match manifest hash")
    return manifest


# ---------------------------------------------------------------------------
# pipelines


def _risk_csv_rows(report: RiskReport):
    for row in report.csv_rows():
        yield row


def execute_run(cfg: ExperimentConfig, out: Path, seed: int | None = None) -> Path:
    """Train + risk pipeline for one resolved config; returns the run directory."""
    out.mkdir(parents=True, exist_ok=True)
    base_seed = cfg.mc["base_seed"] if seed is None else seed
    reps = cfg.mc["reps"]
    ds = build_dataset(cfg)

    cfg_bytes = yaml.safe_dump(cfg.raw, sort_keys=True).encode()
    (out / "config.yaml").write_bytes(cfg_bytes)

    accountant_rows: list[tuple] = []
    decomposition_rows = []
    penalty_rows: dict[int, tuple] = {}
    extra_manifest = {}

    mechanism = cfg.privacy.get("mechanism", "dpsgd") if cfg.privacy else None
    if mechanism == "output_perturbation":
        lam = float(cfg.privacy.get("lambda", 1.0))
        delta = float(cfg.privacy["delta"])
        sigma = cfg.privacy.get("sigma")
        epsilon = cfg.privacy.get("epsilon")
        sens = output_pert_sensitivity(ds.n, lam)
        if sigma is None:
            sigma = calibrate_sigma(float(epsilon), delta, sens)
        elif epsilon is None:
            epsilon = epsilon_for_sigma(float(sigma), delta)
        family = cfg.model.get("family", "softmax_linear")
        K = ds.num_classes() if family != "linear_l2" else 2
        theta_star, _ = train_output_pert(
            ds, lam, float(epsilon), delta, base_seed, family=family,
            K=K, sigma=float(sigma),
        )
        noise_std = sens * float(sigma)

        def mechanism(s, _star=theta_star, _std=noise_std):
            psi = np.random.default_rng(s).normal(0.0, _std, _star.param_count)
            return _star.with_theta(_star.theta + psi)

        report = excessive_risk_mc(ds, mechanism, reps, base_seed, theta_star)
        models = [mechanism(base_seed)]
        accountant_rows.append((1, 1.0, float(sigma), 0, float(epsilon), delta))
        extra_manifest["mechanism"] = "output_perturbation"
        final_model = models[0]
        ref_model = theta_star
    else:
        tc = build_train_config(cfg, ds, base_seed)
        nonprivate_tc = replace(tc, privacy=None, decomposition=DecompositionMode("off"))
        ref_result = train(nonprivate_tc, ds)
        ref_model = ref_result.model
        trace_result = ref_result
        if cfg.privacy is None:
            report = excess_risk_report(ds, [ref_model], ref_model)
            final_model = ref_model
            extra_manifest["mechanism"] = "none"
        else:
            step_fn = None
            mit_cfg = None
            if cfg.mitigation is not None:
                mit_cfg = MitigationConfig(
                    gamma1=float(cfg.mitigation.get("gamma1", 1.0)),
                    gamma2=float(cfg.mitigation.get("gamma2", 1.0)),
                    surrogate=cfg.mitigation.get("surrogate", "boundary_score"),
                )
                if not mit_cfg.inactive:
                    step_fn = make_mitigated_step(mit_cfg)

            models = []
            for i in range(reps):
                run_tc = replace(tc, seed=base_seed + i)
                if i > 0:
                    run_tc = replace(run_tc, decomposition=DecompositionMode("off"))
                hook = None
                if i == 0 and mit_cfg is not None and tc.decomposition.kind != "off":
                    C = tc.privacy.clip_bound

                    def hook(t, model, batch, _C=C, _cfg=mit_cfg):
                        penalty_rows[t] = penalty_value(model, ds, _C, _cfg)

                result = train(run_tc, ds, step_fn=step_fn, step_hook=hook)
                models.append(result.model)
                if i == 0:
                    accountant_rows = result.accountant.rows if result.accountant else []
                    decomposition_rows = result.trace.decomposition
                    final_result = result
                    trace_result = result
            report = excess_risk_report(ds, models, ref_model)
            final_model = models[0]
            extra_manifest["mechanism"] = "dpsgd"
            if tc.batch_scheme == "fixed":
                extra_manifest["accountant_note"] = (
                    f"fixed batches: q approximated as {tc.batch_size}/{ds.n}"
                )
            if mit_cfg is not None:
                extra_manifest["mitigation"] = {
                    "gamma1": mit_cfg.gamma1, "gamma2": mit_cfg.gamma2,
                    "surrogate": mit_cfg.surrogate,
                    "penalty_gradient_privatized": False,
                }
            if cfg.checkpoint_every:
                for it, snap in final_result.trace.checkpoints:
                    save_checkpoint(snap, out / f"checkpoint_{it:06d}.txt")

    _write_csv(out / "risk.csv", RiskReport.RISK_HEADER, _risk_csv_rows(report))
    _write_csv(
        out / "accountant.csv",
        ("step", "q", "sigma", "alpha_star", "epsilon", "delta"),
        accountant_rows,
    )
    if decomposition_rows:
        if penalty_rows:
            header = (*decomposition_rows[0].DECOMP_HEADER,
                      "penalty_total", "penalty_clip_part", "penalty_noise_part")
            rows = [
                (*r.csv_row(),
                 penalty_rows[r.iteration].total,
                 penalty_rows[r.iteration].clip_part,
                 penalty_rows[r.iteration].noise_part)
                for r in decomposition_rows
            ]
        else:
            header = decomposition_rows[0].DECOMP_HEADER
            rows = [r.csv_row() for r in decomposition_rows]
        _write_csv(out / "decomposition.csv", header, rows)

    if cfg.want_trace and mechanism != "output_perturbation":
        _write_csv(out / "trace.csv", trace_result.trace.TRACE_HEADER,
                   trace_result.trace.rows())

    if cfg.want_correlations:
        series = sample_series(final_model, ds)
        pairs = [(a, b) for a, b in (("input_norm", "grad_norm"),
                                     ("input_norm", "trace"),
                                     ("boundary", "trace"))
                 if a in series and b in series]
        rows = correlations(ds, series, pairs)
        _write_csv(
            out / "correlations.csv",
            ("x", "y", "scope", "pearson", "spearman", "defined"),
            [(r.pair[0], r.pair[1], r.group, r.pearson, r.spearman, int(r.defined)) for r in rows],
        )

    write_manifest(out, cfg_bytes, ds, base_seed, extra_manifest)
    return out


def _apply_sweep_value(raw: dict, axis: str, value) -> dict:
    import copy

    patched = copy.deepcopy(raw)
    if axis == "epsilon":
        patched["privacy"]["epsilon"] = float(value)
        patched["privacy"]["sigma"] = None
    elif axis == "clip_bound":
        patched["privacy"]["clip_bound"] = float(value)
    else:  # gamma: both multipliers move together
        patched.setdefault("mitigation", {})
        patched["mitigation"]["gamma1"] = float(value)
        patched["mitigation"]["gamma2"] = float(value)
    patched.pop("sweep", None)
    return patched


def _run_sweep_point(args):
    raw, axis, value, index, out_dir, base_seed = args
    point_dir = Path(out_dir) / f"point_{index:03d}"
    try:
        cfg = validate_config(_apply_sweep_value(raw, axis, value))
        execute_run(cfg, point_dir, seed=base_seed + index)
        return index, value, "ok", str(point_dir)
    except Exception as exc:  # noqa: BLE001 - point failures are flagged, not fatal
        return index, value, f"failed: {exc}", str(point_dir)


def execute_sweep(cfg: ExperimentConfig, out: Path, jobs: int | None = None) -> int:
    """One run per sweep value with derived seeds; returns the exit code."""
    sweep = cfg.sweep
    if sweep is None:
        raise ConfigError("config has no `sweep` block")
    out.mkdir(parents=True, exist_ok=True)
    axis, values = sweep["axis"], sweep["values"]
    base_seed = cfg.mc["base_seed"]
    tasks = [(cfg.raw, axis, v, i, str(out), base_seed) for i, v in enumerate(values)]
    jobs = jobs or os.cpu_count() or 1
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_sweep_point, tasks))
    else:
        results = [_run_sweep_point(t) for t in tasks]
    results.sort(key=lambda r: r[0])

    combined = []
    failures = 0
    for index, value, status, point_dir in results:
        if status != "ok":
            failures += 1
            combined.append((axis, value, index, status, "", "", "", "", ""))
            continue
        with open(Path(point_dir) / "risk.csv", newline="", encoding="utf-8") as fh:
            for row in list(csv.DictReader(fh)):
                combined.append((axis, value, index, "ok", row["group"],
                                 row["R"], row["xi"], row["stderr"], row["mc_runs"]))
    _write_csv(
        out / "combined.csv",
        ("axis", "value", "point", "status", "group", "R", "xi", "stderr", "mc_runs"),
        combined,
    )
    if failures == len(values):
        return 1
    return 0


def execute_report(run_dirs: list[Path], out: Path) -> int:
    """Join finished runs into tidy long-format tables keyed by run id."""
    if not run_dirs:
        raise ConfigError("report needs at least one run directory")
    manifests = {}
    for d in run_dirs:
        if not (Path(d) / "manifest.json").exists():
            raise ConfigError(f"{d}: missing manifest.json")
        manifests[Path(d)] = verify_manifest(Path(d))
    hashes = {m["dataset_sha256"] for m in manifests.values()}
    if len(hashes) > 1:
        raise ConfigError("refusing to join runs over different datasets")

    out.mkdir(parents=True, exist_ok=True)
    risk_rows, decomp_rows, corr_rows = [], [], []
    for d, manifest in manifests.items():
        run_id = d.name
        with open(d / "risk.csv", newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                for metric in ("R", "xi", "stderr"):
                    risk_rows.append((run_id, row["group"], metric, row[metric]))
        decomp = d / "decomposition.csv"
        if decomp.exists():
            with open(decomp, newline="", encoding="utf-8") as fh:
                for row in csv.DictReader(fh):
                    for metric in ("nonprivate", "clip", "noise", "g_norm_group",
                                   "trace", "boundary_mean"):
                        decomp_rows.append((run_id, row["iter"], row["group"],
                                            metric, row[metric]))
        corr = d / "correlations.csv"
        if corr.exists():
            with open(corr, newline="", encoding="utf-8") as fh:
                for row in csv.DictReader(fh):
                    corr_rows.append((run_id, row["x"], row["y"], row["scope"],
                                      row["pearson"], row["spearman"]))

    _write_csv(out / "report_risk.csv", ("run_id", "group", "metric", "value"), risk_rows)
    if decomp_rows:
        _write_csv(out / "report_decomposition.csv",
                   ("run_id", "iter", "group", "metric", "value"), decomp_rows)
    if corr_rows:
        _write_csv(out / "report_correlations.csv",
                   ("run_id", "x", "y", "scope", "pearson", "spearman"), corr_rows)
    return 0


# ---------------------------------------------------------------------------
# command-line surface


def _default_out(explicit: str | None, cfg_out: str | None, fallback: str) -> Path:
    if explicit:
        return Path(explicit)
    if cfg_out:
        return Path(cfg_out)
    root = os.environ.get("DPFAIR_OUT", ".")
    return Path(root) / fallback


@click.group()
def main():
    """Differentially private training lab with per-group risk accounting."""


@main.command("run")
@click.argument("config_path", type=click.Path(exists=False))
@click.option("--out", "out_dir", default=None, help="Output directory.")
@click.option("--seed", type=int, default=None, help="Override mc.base_seed.")
@click.option("--decompose", default=None, help="Override train.decompose (off, full, mc:M).")
def run_cmd(config_path, out_dir, seed, decompose):
    """Execute a single configured run."""
    try:
        cfg = load_config(config_path)
        if decompose is not None:
            cfg.raw.setdefault("train", {})["decompose"] = decompose
            cfg = validate_config(cfg.raw)
    except (ConfigError, FileNotFoundError, yaml.YAMLError) as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(2)
    out = _default_out(out_dir, cfg.output_dir, "run")
    try:
        execute_run(cfg, out, seed=seed)
    except Exception as exc:  # noqa: BLE001
        click.echo(f"runtime failure: {exc}", err=True)
        sys.exit(1)
    click.echo(f"run complete: {out}")


@main.command("sweep")
@click.argument("config_path", type=click.Path(exists=False))
@click.option("--out", "out_dir", default=None, help="Output directory.")
@click.option("--seed", type=int, default=None, help="Override mc.base_seed.")
@click.option("--jobs", type=int, default=None, help="Worker pool size (default: cores).")
@click.option("--decompose", default=None, help="Override train.decompose.")
def sweep_cmd(config_path, out_dir, seed, jobs, decompose):
    """Execute one run per sweep value and combine the results."""
    try:
        cfg = load_config(config_path)
        if decompose is not None:
            cfg.raw.setdefault("train", {})["decompose"] = decompose
        if seed is not None:
            cfg.raw.setdefault("mc", {})["base_seed"] = seed
        cfg = validate_config(cfg.raw)
        if cfg.sweep is None:
            raise ConfigError("config has no `sweep` block")
    except (ConfigError, FileNotFoundError, yaml.YAMLError) as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(2)
    out = _default_out(out_dir, cfg.output_dir, "sweep")
    try:
        code = execute_sweep(cfg, out, jobs=jobs)
    except Exception as exc:  # noqa: BLE001
        click.echo(f"runtime failure: {exc}", err=True)
        sys.exit(1)
    if code != 0:
        click.echo("sweep failed: every point errored", err=True)
        sys.exit(code)
    click.echo(f"sweep complete: {out}")


@main.command("report")
@click.argument("run_dirs", nargs=-1, type=click.Path())
@click.option("--out", "out_dir", default=None, help="Output directory.")
def report_cmd(run_dirs, out_dir):
    """Join run directories into plot-ready long-format tables."""
    out = _default_out(out_dir, None, "report")
    try:
        code = execute_report([Path(d) for d in run_dirs], out)
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(2)
    except Exception as exc:  # noqa: BLE001
        click.echo(f"runtime failure: {exc}", err=True)
        sys.exit(1)
    sys.exit(code)


if __name__ == "__main__":
    main()
