"""Experiment protocols behind the CLI subcommands.

Every run writes into ``cfg.out_dir``: a config snapshot, trace CSVs, a gain
replay file and the figure rendered from those CSVs.  Independent
``(M, seed)`` runs go to a thread pool; results are merged in submission
order so the files do not depend on the thread count.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import plots
from .config import ExperimentConfig, derive_seed
from .control_core import ConvergenceError, InstabilityError
from .domain import (
    SampleSet,
    boundedness_check,
    draw_samples,
    heterogeneity_check,
    mc_costs,
    sample_avg_cost,
    sample_avg_eval,
)
from .lqr import closed_loop_radii, evaluate_batch
from .optimizer import (
    PgConfig,
    RiskConfig,
    Trace,
    discount_annealing,
    discounted_cost,
    entropic_pg,
    entropic_risk,
    policy_gradient,
    sgd,
    theorem1_budget,
)
from .systems import DimensionError

log = logging.getLogger(__name__)

TRACE_FIELDS = ["run_id", "algo", "n", "gamma", "j_sa", "grad_norm", "k_dist", "wall_ms"]


class RunFailed(RuntimeError):
    """A single ``(M, seed)`` run raised; ``__cause__`` holds the original error."""

    def __init__(self, run_id: str, exc: Exception):
        super().__init__(f"run {run_id}: {exc}")
        self.run_id = run_id


@dataclass
class RunArtifact:
    out_dir: Path
    files: dict[str, Path] = field(default_factory=dict)
    summary: list[dict] = field(default_factory=list)
    extra: dict = field(default_factory=dict)


def fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(bool(x)).lower()
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def write_csv(path, fieldnames, rows) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fieldnames, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: fmt(r[k]) for k in fieldnames})
    return Path(path)


def trace_records(trace: Trace, run_id: str, k_ref=None, record_timing: bool = False) -> list[dict]:
    out = []
    for r in trace.rows:
        out.append({
            "run_id": run_id,
            "algo": trace.algo,
            "n": r.n,
            "gamma": r.gamma,
            "j_sa": r.j_sa,
            "grad_norm": r.grad_norm,
            "k_dist": math.nan if k_ref is None else float(np.linalg.norm(r.k - k_ref)),
            "wall_ms": r.wall_ms if record_timing else 0.0,
        })
    return out


def _map(cfg: ExperimentConfig, fn, jobs):
    def guarded(job):
        try:
            return fn(*job)
        except Exception as exc:
            raise RunFailed(job[0], exc) from exc

    if cfg.threads == 1:
        return [guarded(j) for j in jobs]
    with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
        return list(pool.map(guarded, jobs))


def _prepare(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.dump(out / "config.yaml")
    return out


def _gain_json(k) -> list:
    return np.asarray(k).tolist()


def _safe_mc(k, family, dist, n, seed, cost) -> float:
    try:
        return float(np.mean(mc_costs(k, family, dist, n, seed, cost)))
    except InstabilityError:
        return math.inf


def _final_phase(trace: Trace) -> list:
    last = trace.rows[-1].phase
    return trace.phase_rows(last)


def _budget(trace: Trace, tau_b: float, eps: float) -> tuple[float, int | None]:
    rows = _final_phase(trace)
    sub = Trace(trace.algo, rows)
    l_est = sub.estimate_smoothness()
    if l_est <= 0:
        return l_est, None
    return l_est, theorem1_budget(l_est, rows[0].j_sa, tau_b, eps)


def _quantile_rows(series: dict[str, dict[str, np.ndarray]], metric: str) -> list[dict]:
    """``series[m][run_id]`` indexed by iteration; shorter runs carry their last value."""
    out = []
    for m, runs in series.items():
        length = max(len(v) for v in runs.values())
        padded = np.array([np.concatenate([v, np.full(length - len(v), v[-1])]) for v in runs.values()])
        with np.errstate(invalid="ignore"):
            q25, med, q75 = np.percentile(padded, [25, 50, 75], axis=0)
        for n in range(length):
            out.append({"metric": metric, "m": m, "n": n, "q25": q25[n], "median": med[n], "q75": q75[n]})
    return out


def _per_iteration(trace: Trace, values) -> np.ndarray:
    """Last value recorded for each step count ``n``."""
    last = {}
    for r, v in zip(trace.rows, values):
        last[r.n] = v
    return np.array([last[n] for n in range(max(last) + 1)])


# -- verify --------------------------------------------------------------------

def run_verify(cfg: ExperimentConfig) -> RunArtifact:
    """Discount annealing for every ``(M, seed)``, then Monte-Carlo ``J_DR`` of each result."""
    out = _prepare(cfg)
    family, dist, cost, norm = cfg.problem()
    pgc = cfg.pg_config()
    cert_cfg = PgConfig(cfg.pg.alpha, cfg.verify.certify_max_iters, cfg.verify.certify_grad_tol,
                        cfg.pg.eps, cfg.pg.line_search)
    schedule = cfg.schedule()
    mc_seed = derive_seed(cfg.master_seed, 1)
    seeds = cfg.run_seeds()
    if cfg.verify.save_samples:
        (out / "samples").mkdir(exist_ok=True)

    def job(run_id, m, seed):
        samples = draw_samples(family, dist, m, seed)
        if cfg.verify.save_samples:
            samples.save(out / "samples" / f"{run_id}.json")
        k, trace = discount_annealing(samples, cost, pgc, schedule, cfg.anneal.inner_grad_tol)
        k_star, cert = policy_gradient(k, samples, cost, cert_cfg)
        j_final = sample_avg_cost(k, samples, cost)
        j_star = sample_avg_cost(k_star, samples, cost)
        undiscounted = [r.j_sa if r.gamma == 1.0 else discounted_cost(r.k, samples, cost, 1.0)
                        for r in trace.rows]
        excess = np.array(undiscounted) - j_star
        k_dist = np.array([np.linalg.norm(r.k - k_star) for r in trace.rows])
        l_est, budget = _budget(trace, samples.tau_b, cfg.pg.eps)
        final_rows = _final_phase(trace)
        return {
            "run_id": run_id, "m": m, "seed": seed, "k": k, "k_star": k_star, "trace": trace,
            "excess_series": _per_iteration(trace, excess), "k_dist_series": _per_iteration(trace, k_dist),
            "row": {
                "run_id": run_id, "algo": "anneal", "m": m, "seed": seed,
                "gamma0": trace.gamma_steps[0].gamma if trace.gamma_steps else 1.0,
                "outer_iters": len(trace.gamma_steps), "steps": trace.steps,
                "final_phase_steps": final_rows[-1].n - final_rows[0].n,
                "converged": trace.converged, "j_sa_final": j_final, "j_sa_star": j_star,
                "excess": j_final - j_star, "grad_norm_final": float(np.linalg.norm(sample_avg_eval(k, samples, cost)[1])),
                "grad_norm_star": cert.rows[cert.best_index].grad_norm,
                "jointly_stable": bool(np.all(closed_loop_radii(k, samples.a, samples.b) < 1)),
                "j_dr": _safe_mc(k, family, dist, cfg.n_mc, mc_seed, cost),
                "l_est": l_est, "budget": budget if budget is not None else -1,
            },
        }

    jobs = [(f"M{m}_s{j:03d}", int(m), seed) for m in cfg.verify.m_list for j, seed in enumerate(seeds)]
    results = _map(cfg, job, jobs)

    # reference minimizer of J_DR: a large independent sample, warm-started from the largest-M result
    ref_samples = draw_samples(family, dist, cfg.verify.dr_ref_samples, derive_seed(cfg.master_seed, 2))
    start = max(results, key=lambda r: r["m"])["k"]
    ref_cfg = PgConfig(cfg.pg.alpha, cfg.pg.max_iters, cfg.pg.grad_tol, cfg.pg.eps, cfg.pg.line_search)
    k_ref, _ = policy_gradient(start, ref_samples, cost, ref_cfg)
    j_dr_ref = _safe_mc(k_ref, family, dist, cfg.n_mc, mc_seed, cost)

    trace_rows, summary = [], []
    k_series, x_series = {}, {}
    for r in results:
        trace_rows += trace_records(r["trace"], r["run_id"], r["k_star"], cfg.record_timing)
        row = dict(r["row"], j_dr_ref=j_dr_ref, j_dr_gap=r["row"]["j_dr"] - j_dr_ref)
        summary.append(row)
        k_series.setdefault(r["m"], {})[r["run_id"]] = r["k_dist_series"]
        x_series.setdefault(r["m"], {})[r["run_id"]] = r["excess_series"]
    files = {"traces": write_csv(out / "traces.csv", TRACE_FIELDS, trace_rows)}
    files["summary"] = write_csv(out / "summary.csv", list(summary[0]), summary)
    qrows = _quantile_rows(k_series, "k_dist") + _quantile_rows(x_series, "excess_j_sa")
    files["quantiles"] = write_csv(out / "quantiles_iter.csv", ["metric", "m", "n", "q25", "median", "q75"], qrows)
    gap_rows = []
    for m in cfg.verify.m_list:
        gaps = [s["j_dr_gap"] for s in summary if s["m"] == int(m)]
        q25, med, q75 = np.percentile(gaps, [25, 50, 75])
        gap_rows.append({"m": int(m), "q25": q25, "median": med, "q75": q75, "runs": len(gaps)})
    files["gap"] = write_csv(out / "gap_vs_m.csv", ["m", "q25", "median", "q75", "runs"], gap_rows)
    files["gains"] = _write_gains(out, cfg, norm, results, {"k_dr_ref": k_ref, "j_dr_ref": j_dr_ref})
    files["figure"] = plots.plot_verify(out)
    return RunArtifact(out, files, summary, {"gap_vs_m": gap_rows, "results": results, "k_dr_ref": k_ref})


def _write_gains(out: Path, cfg, norm, results, extra: dict) -> Path:
    runs = {}
    for r in results:
        entry = {"m": r["m"], "seed": r["seed"], "k": _gain_json(r["k"]), "k_raw": _gain_json(norm.gain_to_raw(r["k"]))}
        if "k_star" in r:
            entry["k_star"] = _gain_json(r["k_star"])
        runs[r["run_id"]] = entry
    payload = {"config": cfg.to_dict(), "runs": runs}
    for key, value in extra.items():
        payload[key] = _gain_json(value) if isinstance(value, np.ndarray) else value
    path = out / "gains.json"
    path.write_text(json.dumps(payload, indent=1))
    return path


# -- entropic --------------------------------------------------------------------

def run_entropic(cfg: ExperimentConfig) -> RunArtifact:
    """Anneal to a jointly stabilizing gain, then descend on the entropic risk."""
    out = _prepare(cfg)
    family, dist, cost, norm = cfg.problem()
    pgc = cfg.pg_config()
    t = cfg.entropic.t
    mc_seed = derive_seed(cfg.master_seed, 1)

    def job(run_id, m, seed):
        samples = draw_samples(family, dist, m, seed)
        k_sa, _ = discount_annealing(samples, cost, pgc, cfg.schedule(), cfg.anneal.inner_grad_tol)
        k, trace = entropic_pg(k_sa, samples, cost, RiskConfig(t), pgc)
        costs_sa = evaluate_batch(k_sa, samples.a, samples.b, cost, gradients=False).costs
        costs = evaluate_batch(k, samples.a, samples.b, cost, gradients=False).costs
        return {
            "run_id": run_id, "m": m, "seed": seed, "k": k, "k_sa": k_sa, "trace": trace,
            "row": {
                "run_id": run_id, "algo": "entropic", "m": m, "seed": seed, "t": t, "steps": trace.steps,
                "converged": trace.converged, "grad_norm_final": trace.rows[trace.best_index].grad_norm,
                "j_er_final": entropic_risk(costs, t), "j_sa_final": float(np.mean(costs)),
                "j_max_final": float(np.max(costs)),
                "j_er_at_k_sa": entropic_risk(costs_sa, t), "j_sa_at_k_sa": float(np.mean(costs_sa)),
                "j_max_at_k_sa": float(np.max(costs_sa)),
                "j_dr": _safe_mc(k, family, dist, cfg.n_mc, mc_seed, cost),
            },
        }

    jobs = [(f"M{m}_s{j:03d}", int(m), seed) for m in cfg.entropic.m_list for j, seed in enumerate(cfg.run_seeds())]
    results = _map(cfg, job, jobs)
    trace_rows, er_rows, summary = [], [], []
    for r in results:
        trace_rows += trace_records(r["trace"], r["run_id"], r["k"], cfg.record_timing)
        for row in r["trace"].rows:
            er_rows.append({"run_id": r["run_id"], "n": row.n, "j_er": row.j_er, "j_sa": row.j_sa,
                            "grad_norm": row.grad_norm, "weight_sum": row.weight_sum})
        summary.append(r["row"])
    files = {
        "traces": write_csv(out / "traces.csv", TRACE_FIELDS, trace_rows),
        "entropic": write_csv(out / "entropic.csv", ["run_id", "n", "j_er", "j_sa", "grad_norm", "weight_sum"], er_rows),
        "summary": write_csv(out / "summary.csv", list(summary[0]), summary),
    }
    files["gains"] = _write_gains(out, cfg, norm, results, {})
    files["figure"] = plots.plot_entropic(out)
    return RunArtifact(out, files, summary, {"results": results})


# -- sgd -----------------------------------------------------------------------------

def run_sgd(cfg: ExperimentConfig) -> RunArtifact:
    """Stochastic gradient descent over seeds, with a batch-annealing baseline."""
    out = _prepare(cfg)
    family, dist, cost, norm = cfg.problem()
    s = cfg.sgd
    mc_seed = derive_seed(cfg.master_seed, 1)
    if isinstance(cfg.seeds, (list, tuple)):
        seeds = [int(x) for x in cfg.seeds]
    else:
        seeds = [derive_seed(cfg.master_seed, 3, j) for j in range(int(cfg.seeds))]
    checkpoints = sorted(set(range(0, s.n_iters + 1, s.eval_every)) | {s.n_iters})

    def job(run_id, seed):
        k, trace = sgd(family, dist, cost, s.n_iters, s.alpha, s.gamma0, seed, s.decay)
        evals = [{"run_id": run_id, "seed": seed, "n": n,
                  "j_dr": _safe_mc(trace.rows[n].k, family, dist, s.n_mc_eval, mc_seed, cost)}
                 for n in checkpoints]
        row = {"run_id": run_id, "algo": "sgd", "m": 0, "seed": seed, "steps": trace.steps,
               "j_dr": _safe_mc(k, family, dist, cfg.n_mc, mc_seed, cost)}
        return {"run_id": run_id, "m": 0, "seed": seed, "k": k, "trace": trace, "evals": evals, "row": row}

    results = _map(cfg, job, [(f"sgd_s{j:03d}", seed) for j, seed in enumerate(seeds)])

    base_seed = cfg.run_seeds()[0]
    base_samples = draw_samples(family, dist, s.baseline_m, base_seed)
    k_base, base_trace = discount_annealing(base_samples, cost, cfg.pg_config(), cfg.schedule(),
                                            cfg.anneal.inner_grad_tol)
    base_row = {"run_id": f"M{s.baseline_m}_base", "algo": "anneal", "m": s.baseline_m, "seed": base_seed,
                "steps": base_trace.steps, "j_dr": _safe_mc(k_base, family, dist, cfg.n_mc, mc_seed, cost)}

    trace_rows, eval_rows, summary = [], [], []
    for r in results:
        trace_rows += trace_records(r["trace"], r["run_id"], k_base, cfg.record_timing)
        eval_rows += r["evals"]
        summary.append(r["row"])
    summary.append(base_row)
    agg = []
    for n in checkpoints:
        vals = np.array([e["j_dr"] for e in eval_rows if e["n"] == n])
        with np.errstate(invalid="ignore"):
            std = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
        agg.append({"n": n, "mean_j_dr": float(np.mean(vals)), "std_j_dr": std, "seeds": len(vals)})
    files = {
        "traces": write_csv(out / "traces.csv", TRACE_FIELDS, trace_rows),
        "evals": write_csv(out / "sgd_eval.csv", ["run_id", "seed", "n", "j_dr"], eval_rows),
        "sgd_summary": write_csv(out / "sgd_summary.csv", ["n", "mean_j_dr", "std_j_dr", "seeds"], agg),
        "summary": write_csv(out / "summary.csv", ["run_id", "algo", "m", "seed", "steps", "j_dr"], summary),
    }
    files["gains"] = _write_gains(out, cfg, norm, results, {"k_baseline": k_base})
    files["figure"] = plots.plot_sgd(out)
    finals = np.array([r["row"]["j_dr"] for r in results])
    extra = {"mean_final_j_dr": float(np.mean(finals)), "baseline_j_dr": base_row["j_dr"], "results": results}
    return RunArtifact(out, files, summary, extra)


# -- diagnose / eval ----------------------------------------------------------------

def run_diagnose(cfg: ExperimentConfig) -> tuple[dict, str]:
    """Heterogeneity bound, scenario boundedness and iteration budget for one sample set."""
    out = _prepare(cfg)
    family, dist, cost, _ = cfg.problem()
    d = cfg.diagnose
    seed = cfg.run_seeds()[0]
    samples = draw_samples(family, dist, d.m, seed)
    het = heterogeneity_check(samples, cost)
    report = {"m": d.m, "seed": seed, "het": het.het, "het_bound": het.bound,
              "het_satisfied": het.satisfied, "tau_b": het.tau_b}
    lines = [f"sample set: M = {d.m}, seed = {seed}",
             f"heterogeneity {het.het:.6g} vs bound {het.bound:.6g} (tau_B = {het.tau_b:.6g}): "
             + ("satisfied" if het.satisfied else "VIOLATED (warning only; the optimizer still runs)")]
    try:
        k, trace = discount_annealing(samples, cost, cfg.pg_config(), cfg.schedule(), cfg.anneal.inner_grad_tol)
    except (InstabilityError, ConvergenceError) as exc:
        report["converged"] = False
        lines.append(f"annealing failed: {exc}")
        _write_report(out, report, lines)
        return report, "\n".join(lines)
    final = _final_phase(trace)
    gains = [r.k for r in final]
    strict = boundedness_check(gains, samples, cost, d.b_bound, d.slack)
    loose = boundedness_check(gains, samples, cost, math.inf, float(len(samples)))
    l_est, budget = _budget(trace, samples.tau_b, cfg.pg.eps)
    empirical = final[-1].n - final[0].n
    report.update({
        "converged": trace.converged, "final_grad_norm": final[-1].grad_norm, "j_sa_final": final[-1].j_sa,
        "bounded": strict.satisfied, "b_bound": d.b_bound, "slack": d.slack, "max_ratio": strict.max_ratio,
        "bounded_checked": strict.checked, "bounded_witness": strict.witness,
        "fallback_bounded": loose.satisfied, "fallback_slack": loose.slack,
        "l_est": l_est, "budget": budget, "empirical_iters": empirical,
    })
    lines += [
        f"annealing: {len(trace.gamma_steps)} discount increases, {trace.steps} gradient steps, "
        f"final gradient norm {final[-1].grad_norm:.3e}, J_SA = {final[-1].j_sa:.6g}"
        + ("" if het.satisfied else " (converged despite the heterogeneity warning)" if trace.converged else ""),
        f"scenario boundedness (B = {d.b_bound:g}, nu = {d.slack:g}) over {strict.checked} iterates: "
        + ("satisfied" if strict.satisfied else f"violated, witness {strict.witness}")
        + f"; max J_i / J_SA = {strict.max_ratio:.4g}",
        f"fallback (B = inf, nu = M = {len(samples)}): " + ("satisfied" if loose.satisfied else "violated"),
        f"iteration budget: theoretical {budget} (L ~ {l_est:.4g}) vs empirical {empirical}",
    ]
    _write_report(out, report, lines)
    return report, "\n".join(lines)


def _write_report(out: Path, report: dict, lines: list[str]) -> None:
    (out / "diagnose.json").write_text(json.dumps(report, indent=1, default=fmt))
    (out / "diagnose.txt").write_text("\n".join(lines) + "\n")


def run_eval(cfg: ExperimentConfig, k, m: int | None = None) -> dict:
    """Cost and gradient of one raw-frame gain on the config's first sample set."""
    family, dist, cost, norm = cfg.problem()
    m = m or int(cfg.verify.m_list[0])
    seed = cfg.run_seeds()[0]
    samples = draw_samples(family, dist, m, seed)
    k = np.atleast_2d(np.asarray(k, float))
    if k.shape != (samples.d_u, samples.d_x):
        raise DimensionError(f"gain must be {samples.d_u}x{samples.d_x}, got {k.shape[0]}x{k.shape[1]}")
    k_n = norm.gain_from_raw(k)
    radii = closed_loop_radii(k_n, samples.a, samples.b)
    result = {"m": m, "seed": seed, "max_rho": float(np.max(radii)), "stabilizing": bool(np.all(radii < 1))}
    if result["stabilizing"]:
        ev = evaluate_batch(k_n, samples.a, samples.b, cost)
        result.update({
            "j_sa": norm.cost_to_raw(float(np.mean(ev.costs))),
            # chain rule through K_n = R^{1/2} K S / sqrt(c), cost scaled by c
            "gradient": (math.sqrt(norm.scale) * norm.r_half @ np.mean(ev.gradients, axis=0) @ norm.s).tolist(),
            "costs": [norm.cost_to_raw(float(c)) for c in ev.costs],
        })
    return result


def load_samples(path) -> SampleSet:
    return SampleSet.load(path)
