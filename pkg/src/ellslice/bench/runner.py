"""Executes an experiment's unit grid and writes manifest, CSV and summary files.

A unit is one (dim, kernel, replicate) cell. Its random stream is
``RngStream(seed, stream_id(dim_index, kernel_index, replicate))``, so the
output does not depend on how units are scheduled across workers.
"""

from __future__ import annotations

import csv
import io
import json
import math
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional

import numpy as np

from .. import __version__
from ..diagnostics import (
    DegenerateSeriesError,
    Histogram2D,
    drift_estimate,
    effective_sample_size,
    histogram2d,
    histogram_tv,
    summary_moments,
)
from ..linalg import RngStream
from ..samplers import KernelSpec, run_chain
from ..targets import assumption_bounds, build_target, check_assumption1
from .config import ExperimentConfig

RESULTS_HEADER = [
    "experiment", "target", "dim", "kernel", "replicate", "n0", "n", "ess", "iact",
    "acceptance_rate", "mean_evals_per_step", "wall_time_s", "seed", "stream_id",
]

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2


def stream_id(dim_index: int, kernel_index: int, replicate: int) -> int:
    """Pack the unit coordinates into 64 bits (24 + 20 + 20)."""
    return (dim_index << 40) | (kernel_index << 20) | replicate


@dataclass(frozen=True)
class Unit:
    dim_index: int
    dim: int
    kernel_index: int
    kernel: str
    replicate: int
    stream_id: int

    @property
    def key(self):
        return (self.dim_index, self.kernel_index, self.replicate)


def plan_units(cfg: ExperimentConfig) -> list[Unit]:
    kernels = [k.name for k in cfg.kernels] or ["-"]
    return [
        Unit(i, d, j, k, r, stream_id(i, j, r))
        for i, d in enumerate(cfg.dims)
        for j, k in enumerate(kernels)
        for r in range(cfg.replicates)
    ]


def preflight(cfg: ExperimentConfig) -> list[str]:
    """Problems that only show up once targets are built; reported as config errors."""
    problems = []
    for d in cfg.dims:
        try:
            t = build_target(cfg.target.name, d, cfg.target.params)
        except Exception as exc:  # noqa: BLE001 - surfaced as a diagnostic
            problems.append(f"target {cfg.target.name!r} at dim {d}: {exc}")
            continue
        for k in cfg.kernels:
            if k.name == "slice-radial" and t.radial_profile is None:
                problems.append(f"kernel 'slice-radial' needs a rotationally invariant target; {t.name!r} at dim {d} is not")
            if k.tune and cfg.n0 < 1000:
                problems.append(f"kernel {k.name!r} is tuned during burn-in, which needs n0 >= 1000")
        if cfg.x_init is not None and not t.log_rho(np.array(cfg.x_init, dtype=float)) > -math.inf:
            problems.append(f"x_init has zero density under {t.name!r}")
    return problems


def _kernel_spec(cfg: ExperimentConfig, index: int) -> KernelSpec:
    k = cfg.kernels[index]
    return KernelSpec(k.name, k.param, k.tune, k.target_rate, k.max_shrink)


def _x_init(cfg: ExperimentConfig, dim: int) -> np.ndarray:
    if cfg.x_init is not None:
        return np.array(cfg.x_init, dtype=float)
    if cfg.target.name == "double-banana":
        # rho(0) = 0 for the double banana; (-1, 1) has r = 4 > 1
        return np.array([-1.0, 1.0])
    return np.zeros(dim)


def _conjugate_posterior(prior_cov: np.ndarray, sigma: np.ndarray, x0: np.ndarray):
    s = np.linalg.inv(np.linalg.inv(prior_cov) + np.linalg.inv(sigma))
    return s @ np.linalg.solve(sigma, x0), s


def run_unit(cfg_json: dict, unit: Unit) -> dict:
    """Execute one unit; never raises (failures are reported in the payload)."""
    cfg = ExperimentConfig.model_validate(cfg_json)
    out = {"unit": unit, "status": "ok", "row": None, "extra": {}}
    t0 = time.perf_counter()
    try:
        target = build_target(cfg.target.name, unit.dim, cfg.target.params)
        seed = (cfg.seed, unit.stream_id)
        if cfg.experiment == "assumption-audit":
            _audit_unit(cfg, target, seed, out)
        elif cfg.experiment == "drift-audit":
            _drift_unit(cfg, target, unit, seed, out)
        else:
            _chain_unit(cfg, target, unit, seed, out)
    except Exception as exc:  # noqa: BLE001 - unit failures are data
        out["status"] = "failed"
        out["error"] = f"{type(exc).__name__}: {exc}"
        out["traceback"] = traceback.format_exc()
    out["wall_time"] = time.perf_counter() - t0
    return out


def _chain_unit(cfg, target, unit, seed, out):
    kernel = _kernel_spec(cfg, unit.kernel_index)
    keep_dim = unit.dim if cfg.experiment == "gaussian-validate" else 2
    res = run_chain(
        kernel, target, _x_init(cfg, unit.dim), cfg.n0, cfg.n, seed,
        sample_retention_dim=keep_dim, thin=cfg.thin,
    )
    try:
        rep = effective_sample_size(res.f_series, cfg.max_lag, geyer=cfg.ess_truncation == "geyer")
        ess, iact = rep.ess, rep.iact
    except (DegenerateSeriesError, ValueError):
        ess = iact = math.nan
    out["row"] = {
        "experiment": cfg.experiment,
        "target": target.name,
        "dim": unit.dim,
        "kernel": unit.kernel,
        "replicate": unit.replicate,
        "n0": cfg.n0,
        "n": cfg.n,
        "ess": ess,
        "iact": iact,
        "acceptance_rate": res.acceptance_rate,
        "mean_evals_per_step": res.mean_evals_per_step,
        "wall_time_s": res.wall_time,
        "seed": cfg.seed,
        "stream_id": unit.stream_id,
    }
    out["extra"]["param"] = res.param
    if cfg.experiment == "double-banana":
        h = histogram2d(res.samples, cfg.histogram.bins, cfg.histogram.range)
        out["extra"]["histogram"] = h.counts
        out["extra"]["overflow"] = h.overflow
        if cfg.write_samples:
            out["extra"]["samples"] = res.samples
    elif cfg.experiment == "gaussian-validate":
        m = summary_moments(res.samples)
        prior = np.atleast_2d(target.prior.covariance())
        sigma = np.atleast_2d(target.params["sigma"])
        mean_true, cov_true = _conjugate_posterior(prior, sigma, np.asarray(target.params["x0"]))
        mean_z = np.abs(m.mean - mean_true) / m.mc_standard_errors
        cov_z = np.abs(m.covariance - cov_true) / m.covariance_standard_errors
        out["extra"]["moments"] = {
            "analytic_mean": mean_true.tolist(),
            "estimated_mean": m.mean.tolist(),
            "mean_standard_errors": m.mc_standard_errors.tolist(),
            "analytic_covariance": cov_true.tolist(),
            "estimated_covariance": m.covariance.tolist(),
            "covariance_standard_errors": m.covariance_standard_errors.tolist(),
            "max_mean_z": float(np.max(mean_z)),
            "max_covariance_z": float(np.max(cov_z)),
            "passed": bool(np.all(mean_z <= 3.0) and np.all(cov_z <= 3.0)),
        }


def _audit_unit(cfg, target, seed, out):
    a = cfg.audit
    if a.bounds is not None:
        R, alpha = assumption_bounds(a.bounds.kind, **a.bounds.params)
    else:
        R, alpha = a.R, a.alpha
    rep = check_assumption1(target, R, alpha, RngStream(*seed), a.n_centers, a.n_probes)
    ce = rep.counterexample
    out["extra"]["audit"] = {
        "target": target.name,
        "R": R,
        "alpha": alpha,
        "passed": rep.passed,
        "probes_run": rep.probes_run,
        "counterexample": None if ce is None else {
            "x": ce["x"].tolist(), "y": ce["y"].tolist(),
            "log_rho_x": ce["log_rho_x"], "log_rho_y": ce["log_rho_y"],
        },
    }


def _drift_unit(cfg, target, unit, seed, out):
    kernel = _kernel_spec(cfg, unit.kernel_index)
    d = cfg.drift
    rep = drift_estimate(target, kernel, d.radii, d.reps, RngStream(*seed), d.average_directions)
    out["extra"]["drift"] = {
        "target": target.name,
        "radii": rep.radii.tolist(),
        "m_hat": rep.m_hat.tolist(),
        "m_se": rep.m_se.tolist(),
        "delta_hat": rep.delta_hat,
        "L_hat": rep.L_hat,
        "delta_se": rep.delta_se,
    }


# ---------------------------------------------------------------------------
# output assembly


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def results_csv(rows: list[dict], blank_timing: bool = False) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RESULTS_HEADER)
    for row in rows:
        w.writerow(["" if (blank_timing and k == "wall_time_s") else _fmt(row[k]) for k in RESULTS_HEADER])
    return buf.getvalue()


def histogram_csv(counts: np.ndarray) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["x_bin", "y_bin", "count"])
    for i in range(counts.shape[0]):
        for j in range(counts.shape[1]):
            w.writerow([i, j, int(counts[i, j])])
    return buf.getvalue()


def zero_density_mask(bins, range_, sub: int = 8) -> np.ndarray:
    """Histogram cells in which the double banana vanishes at every point of a sub x sub lattice.

    The density is zero exactly where the Rosenbrock value is at most 1.
    """
    (xlo, xhi), (ylo, yhi) = range_
    bx, by = bins
    xs = np.linspace(xlo, xhi, bx * sub + 1)
    ys = np.linspace(ylo, yhi, by * sub + 1)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    zero = (1.0 - X) ** 2 + 100.0 * (Y - X * X) ** 2 <= 1.0
    mask = np.ones((bx, by), dtype=bool)
    for di in range(sub + 1):
        for dj in range(sub + 1):
            mask &= zero[di:di + bx * sub:sub, dj:dj + by * sub:sub][:bx, :by]
    return mask


def _validations(cfg: ExperimentConfig, payloads: list[dict]) -> list[dict]:
    checks = []
    ok = [p for p in payloads if p["status"] == "ok"]
    if cfg.experiment in ("ess-sweep", "double-banana"):
        for p in ok:
            u, row = p["unit"], p["row"]
            k = cfg.kernels[u.kernel_index]
            if k.tune:
                acc = row["acceptance_rate"]
                lo, hi = k.target_rate - 0.05, k.target_rate + 0.05
                checks.append({
                    "name": f"tuned_acceptance[dim={u.dim},kernel={u.kernel},replicate={u.replicate}]",
                    "passed": lo <= acc <= hi,
                    "detail": f"acceptance {acc:.4f}, required [{lo:.2f}, {hi:.2f}]",
                })
    if cfg.experiment == "double-banana":
        mask = zero_density_mask(cfg.histogram.bins, cfg.histogram.range)
        hists = {}
        for p in ok:
            u = p["unit"]
            counts = p["extra"]["histogram"]
            mass = float(counts[mask].sum()) / cfg.n if cfg.n else 0.0
            hists.setdefault(u.kernel_index, []).append((u.replicate, counts))
            checks.append({
                "name": f"zero_density_mass[kernel={u.kernel},replicate={u.replicate}]",
                "passed": mass < 1e-3,
                "detail": f"mass {mass:.3g} in {int(mask.sum())} zero-density cells",
            })
        for kidx, reps in hists.items():
            reps.sort(key=lambda t: t[0])
            for a in range(len(reps)):
                for b in range(a + 1, len(reps)):
                    ha = Histogram2D(reps[a][1], 0, None, None)
                    hb = Histogram2D(reps[b][1], 0, None, None)
                    tv = histogram_tv(ha, hb)
                    checks.append({
                        "name": f"replicate_tv[kernel={cfg.kernels[kidx].name},{reps[a][0]}vs{reps[b][0]}]",
                        "passed": bool(tv < 0.05),
                        "detail": f"total variation {tv:.4g} (in-range mass {int(reps[a][1].sum())} vs {int(reps[b][1].sum())})",
                    })
    if cfg.experiment == "gaussian-validate":
        for p in ok:
            u, m = p["unit"], p["extra"]["moments"]
            checks.append({
                "name": f"conjugate_moments[dim={u.dim},kernel={u.kernel},replicate={u.replicate}]",
                "passed": m["passed"],
                "detail": f"max |z| mean {m['max_mean_z']:.2f}, covariance {m['max_covariance_z']:.2f} (limit 3)",
            })
    if cfg.experiment == "assumption-audit" and cfg.audit.expect is not None:
        for p in ok:
            u, a = p["unit"], p["extra"]["audit"]
            want = cfg.audit.expect == "pass"
            checks.append({
                "name": f"assumption1[dim={u.dim},replicate={u.replicate}]",
                "passed": a["passed"] == want,
                "detail": f"expected {cfg.audit.expect}, probe {'passed' if a['passed'] else 'failed'} after {a['probes_run']} probes",
            })
    if cfg.experiment == "drift-audit" and cfg.drift.expect_drift is not None:
        for p in ok:
            u, dr = p["unit"], p["extra"]["drift"]
            contracting = dr["delta_hat"] + 3.0 * dr["delta_se"] < 1.0
            checks.append({
                "name": f"drift[dim={u.dim},kernel={u.kernel},replicate={u.replicate}]",
                "passed": contracting == cfg.drift.expect_drift,
                "detail": f"delta_hat {dr['delta_hat']:.4f} +- {dr['delta_se']:.4f}, L_hat {dr['L_hat']:.4f}",
            })
    return checks


@dataclass
class RunOutcome:
    exit_code: int
    output_dir: Path
    summary: dict
    payloads: list


def run_experiment(
    cfg: ExperimentConfig,
    workers: int = 1,
    output_dir: Optional[Path] = None,
    blank_timing: bool = False,
) -> RunOutcome:
    out_dir = Path(output_dir or cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    started = datetime.now(timezone.utc).isoformat()
    units = plan_units(cfg)
    cfg_json = cfg.model_dump(mode="json")

    if workers <= 1:
        payloads = [run_unit(cfg_json, u) for u in units]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            payloads = list(pool.map(run_unit, [cfg_json] * len(units), units))
    payloads.sort(key=lambda p: p["unit"].key)

    manifest = {
        "config": cfg_json,
        "software_version": __version__,
        "started": started,
        "finished": datetime.now(timezone.utc).isoformat(),
        "workers": workers,
        "stream_id_rule": "(dim_index << 40) | (kernel_index << 20) | replicate",
        "units": [
            {"dim": p["unit"].dim, "kernel": p["unit"].kernel, "replicate": p["unit"].replicate,
             "stream_id": p["unit"].stream_id, "status": p["status"]}
            for p in payloads
        ],
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")

    rows = [p["row"] for p in payloads if p["status"] == "ok" and p["row"] is not None]
    if cfg.experiment not in ("assumption-audit", "drift-audit"):
        (out_dir / "results.csv").write_text(results_csv(rows, blank_timing))

    extras = {}
    if cfg.experiment == "double-banana":
        ok = [p for p in payloads if p["status"] == "ok"]
        if ok:
            total = sum(p["extra"]["histogram"] for p in ok)
            (out_dir / "histogram.csv").write_text(histogram_csv(total))
            for p in ok:
                u = p["unit"]
                (out_dir / f"histogram_{u.kernel}_r{u.replicate}.csv").write_text(histogram_csv(p["extra"]["histogram"]))
                if cfg.write_samples:
                    np.savetxt(out_dir / f"samples_{u.kernel}_r{u.replicate}.csv", p["extra"]["samples"],
                               delimiter=",", header="x1,x2", comments="")
    elif cfg.experiment == "gaussian-validate":
        extras["moments"] = [
            {"dim": p["unit"].dim, "kernel": p["unit"].kernel, "replicate": p["unit"].replicate, **p["extra"]["moments"]}
            for p in payloads if p["status"] == "ok"
        ]
    elif cfg.experiment == "assumption-audit":
        extras["audits"] = [
            {"dim": p["unit"].dim, "replicate": p["unit"].replicate, **p["extra"]["audit"]}
            for p in payloads if p["status"] == "ok"
        ]
    elif cfg.experiment == "drift-audit":
        extras["drift"] = [
            {"dim": p["unit"].dim, "kernel": p["unit"].kernel, "replicate": p["unit"].replicate, **p["extra"]["drift"]}
            for p in payloads if p["status"] == "ok"
        ]

    checks = _validations(cfg, payloads)
    failed_units = [
        {"dim": p["unit"].dim, "kernel": p["unit"].kernel, "replicate": p["unit"].replicate, "error": p["error"]}
        for p in payloads if p["status"] != "ok"
    ]
    if failed_units:
        code = EXIT_RUNTIME
    elif not all(c["passed"] for c in checks):
        code = EXIT_VALIDATION
    else:
        code = EXIT_OK
    summary = {
        "experiment": cfg.experiment,
        "target": cfg.target.name,
        "units": len(payloads),
        "failed_units": failed_units,
        "validations": checks,
        "all_passed": code == EXIT_OK,
        "exit_code": code,
        **extras,
    }
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2, default=_json_default) + "\n")
    return RunOutcome(code, out_dir, summary, payloads)


def _json_default(v):
    if isinstance(v, np.generic):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    raise TypeError(f"cannot serialise {type(v).__name__}")
