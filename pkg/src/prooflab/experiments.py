"""Config parsing, seeded multi-trial execution and CSV/JSON reporting."""
from __future__ import annotations

import csv
import datetime as _dt
import io as _io
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import tomli

from . import __version__
from .cutelim import decision_counts, unfold
from .dag import GenParams, make_conditionals, sample_dag, suff_stats
from .errors import ContractError, ParameterError
from .learners import (DecisionDataset, LatentEM, LatentModel, coarsen, depth_conditionals,
                       elbo, erm_fit, estimate_structure, exact_posterior, log_evidence,
                       mixture_kl, posterior_kl, sample_latent_instance, PosteriorFamily)
from .mdp import DagKernel, min_proof_length, optimal_policy, reach_value_exact
from .samplers import (ExactTwist, conditional_path_law, doob_path_law, doob_policy,
                       success_to_go, total_variation, twisted_smc)
from .search import (TopKConfig, backtracking_search, coverage_event, margin_audit,
                     reference_trace)
from .separation import geometric_grid, run_separation, wilson_interval

EXPERIMENTS = ("verify-bounds", "sampler-exactness", "estimate-params",
               "generalization-probe", "separation", "generate", "search")
SUMMARY_SCHEMA = "prooflab-summary/1"
THREADS_ENV = "PROOFLAB_THREADS"

GEN_KEYS = {"D", "b_eff", "r", "alpha", "K0", "term_profile", "M", "beta", "C0", "rho",
            "gap_rank", "random_parents"}
SECTION_KEYS = {
    "gen": GEN_KEYS,
    "search": {"k_dec", "k_sol", "k_flat", "budget"},
    "learn": {"rho", "n", "n_grid", "eval_instances", "delta", "depths", "n_min", "n_max",
              "grid_ratio", "em_iters"},
    "sampler": {"particles", "ess_frac", "horizon_slack", "max_paths"},
}
TOP_KEYS = {"experiment", "seed", "trials", "out"} | set(SECTION_KEYS)

# per-experiment defaults, overridden by the config file and then the CLI
DEFAULTS = {
    "verify-bounds": {"trials": 20, "gen": {"D": 2, "b_eff": 2, "r": 2, "beta": 1.0},
                      "learn": {"n": 30, "rho": 0.01}},
    "sampler-exactness": {"trials": 20, "gen": {"D": 1, "b_eff": 2, "r": 1, "M": 3, "rho": 0.05},
                          "sampler": {"particles": 64, "ess_frac": 0.5, "horizon_slack": 2,
                                      "max_paths": 10_000}},
    "estimate-params": {"trials": 20, "gen": {"D": 4, "b_eff": 2, "r": 2, "alpha": 0.5, "K0": 32.0,
                                              "term_profile": [0.0, 0.3, 0.3, 0.3, 1.0]},
                        "learn": {"n": 1000, "em_iters": 5}},
    "generalization-probe": {"trials": 20, "gen": {"D": 2, "b_eff": 2, "r": 2, "beta": 1.0},
                             "learn": {"n_grid": [8, 16, 32, 64, 128, 256, 512, 1024],
                                       "rho": 0.001}},
    "separation": {"trials": 1, "gen": {"D": 1, "b_eff": 2, "r": 2, "alpha": 0.5, "K0": 2.0,
                                        "beta": 4.0, "C0": 1.0, "rho": 0.02, "M": 4},
                   "search": {"k_dec": 1, "k_sol": 1, "k_flat": 1},
                   "learn": {"depths": [1, 2, 3], "eval_instances": 200, "delta": 0.2,
                             "n_min": 4, "n_max": 2_000_000, "grid_ratio": 1.2, "rho": 0.02}},
    "generate": {"trials": 10, "gen": {"D": 2, "b_eff": 2, "r": 2}},
    "search": {"trials": 50, "gen": {"D": 2, "b_eff": 2, "r": 2, "beta": 4.0, "rho": 0.02},
               "search": {"k_dec": 1, "k_sol": 1, "k_flat": 1}, "learn": {"n": 200, "rho": 0.02}},
}


@dataclass
class ExperimentConfig:
    experiment: str
    seed: int = 0
    trials: int = 1
    out: str = "results"
    gen: dict = field(default_factory=dict)
    search: dict = field(default_factory=dict)
    learn: dict = field(default_factory=dict)
    sampler: dict = field(default_factory=dict)

    def gen_params(self, **override) -> GenParams:
        return GenParams(**{**self.gen, "seed": self.seed, **override})

    def validate(self):
        if self.experiment not in EXPERIMENTS:
            raise ContractError(f"unknown experiment {self.experiment!r}")
        if self.trials < 1:
            raise ParameterError("trials must be >= 1")
        if not 0 <= self.seed < 2 ** 64:
            raise ParameterError("seed must be an unsigned 64-bit integer")
        self.gen_params()
        grid = self.learn.get("n_grid")
        if grid is not None and (not grid or any(b <= a for a, b in zip(grid, grid[1:]))
                                 or grid[0] < 1):
            raise ParameterError("n_grid must be positive and strictly increasing")
        delta = self.learn.get("delta")
        if delta is not None and not 0 < delta < 1:
            raise ParameterError("delta must lie in (0, 1)")
        TopKConfig(**self.search)
        return self


def _check_keys(table: dict, allowed: set, where: str):
    unknown = sorted(set(table) - allowed)
    if unknown:
        raise ContractError(f"unknown key(s) in {where}: {', '.join(unknown)}")


def parse_config(text: str) -> dict:
    """Parse TOML text and reject unknown keys."""
    try:
        raw = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ContractError(f"malformed config: {exc}") from None
    _check_keys(raw, TOP_KEYS, "config")
    for name, allowed in SECTION_KEYS.items():
        if name in raw:
            if not isinstance(raw[name], dict):
                raise ContractError(f"[{name}] must be a table")
            _check_keys(raw[name], allowed, f"[{name}]")
    return raw


def build_config(experiment: str, raw: dict = None, **overrides) -> ExperimentConfig:
    """Merge defaults, parsed config and CLI overrides (None values are ignored)."""
    raw = dict(raw or {})
    named = raw.pop("experiment", experiment)
    if experiment is not None and named != experiment:
        raise ContractError(f"config is for {named!r}, not {experiment!r}")
    if named not in EXPERIMENTS:
        raise ContractError(f"unknown experiment {named!r}")
    base = DEFAULTS[named]
    merged = {"experiment": named}
    for key in ("seed", "trials", "out"):
        if key in base:
            merged[key] = base[key]
        if key in raw:
            merged[key] = raw[key]
        if overrides.get(key) is not None:
            merged[key] = overrides[key]
    for name in SECTION_KEYS:
        merged[name] = {**base.get(name, {}), **raw.get(name, {})}
    return ExperimentConfig(**merged).validate()


def load_config(path, experiment: str = None, **overrides) -> ExperimentConfig:
    text = Path(path).read_text()
    return build_config(experiment, parse_config(text), **overrides)


# ---------------------------------------------------------------------------
# execution helpers

@dataclass
class Report:
    tables: dict  # name -> (header, rows)
    summary: dict
    violations: int = 0


def trial_streams(seed: int, trials: int) -> list:
    return np.random.SeedSequence(seed).spawn(trials)


def thread_count() -> int:
    value = os.environ.get(THREADS_ENV, "1")
    try:
        return max(1, int(value))
    except ValueError:
        raise ContractError(f"{THREADS_ENV} must be an integer") from None


def run_trials(fn, cfg: ExperimentConfig) -> list:
    """Run ``fn(trial, rng)`` for every trial; results come back in trial order."""
    streams = trial_streams(cfg.seed, cfg.trials)
    jobs = [(i, np.random.default_rng(s)) for i, s in enumerate(streams)]
    workers = thread_count()
    if workers == 1:
        return [fn(i, rng) for i, rng in jobs]
    with ThreadPoolExecutor(workers) as pool:
        return list(pool.map(lambda job: fn(*job), jobs))


def _cell(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def csv_text(header, rows) -> str:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_cell(x) for x in row])
    return buf.getvalue()


def write_report(report: Report, cfg: ExperimentConfig) -> list:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, (header, rows) in report.tables.items():
        p = out / f"{name}.csv"
        p.write_text(csv_text(header, rows))
        paths.append(p)
    summary = {
        "schema": SUMMARY_SCHEMA,
        "experiment": cfg.experiment,
        "version": __version__,
        "numpy": np.__version__,
        "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(),
        "config": asdict(cfg),
        "violations": report.violations,
        "metrics": report.summary,
    }
    p = out / f"{cfg.experiment}_summary.json"
    p.write_text(json.dumps(summary, indent=2, sort_keys=True, default=_json_default) + "\n")
    paths.append(p)
    return paths


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o).__name__)


# ---------------------------------------------------------------------------
# experiments

def _instance(cfg: ExperimentConfig, rng, **override):
    params = cfg.gen_params(**override)
    z = sample_dag(params, rng)
    q = make_conditionals(z, params, rng)
    return params, z, q


def _teacher_forced(q, classes: list, n: int, rng) -> DecisionDataset:
    """n demonstrations along the reference proof with labels drawn from q."""
    data = DecisionDataset()
    for key in classes:
        counts = rng.multinomial(n, q.probs(key))
        for a, c in enumerate(counts):
            if c:
                data.add(key, a, key.split(":")[0], 0, float(c))
    return data


def verify_bounds(cfg: ExperimentConfig) -> Report:
    n, rho = cfg.learn.get("n", 30), cfg.learn.get("rho", 0.01)

    def trial(i, rng):
        params, z, q = _instance(cfg, rng)
        rows = []
        # margin chain and Pinsker on a deliberately undertrained policy
        keys = q.keys()
        pol = erm_fit(_teacher_forced(q, keys, n, rng), None, rho, params.M)
        rep = margin_audit(pol, q, keys, params.gap_rank)
        rows.append((i, "margin", len(keys), rep.total_violations))
        # Bellman value equals the product of reference probabilities over unique decisions
        kernel = DagKernel(z, "hier")
        horizon = len(reference_trace(kernel).records)
        v = reach_value_exact(kernel, q, horizon)
        expected = math.prod(q.probs(k)[q.ref[k]] for k in keys)
        rows.append((i, "bellman", 1, int(abs(v - expected) > 1e-12)))
        # trivialization: optimal deterministic value is 1{K <= T}
        K = min_proof_length(kernel)
        bad = 0
        for T in (horizon - 1, horizon, horizon + 1):
            opt = optimal_policy(kernel)
            bad += int(reach_value_exact(kernel, opt, T) != float(K <= T))
        rows.append((i, "trivialization", 3, bad))
        # ELBO gap equals posterior KL on a small latent instance
        model = LatentModel(D=2, tau=0.4, alpha=0.5, K0=4.0,
                            q_dec=depth_conditionals(2, 3, 0.05, 0.4, rng)[0],
                            q_sol=depth_conditionals(2, 3, 0.05, 0.4, rng)[1], b_eff=2)
        _, y, _ = sample_latent_instance(model, rng, 3)
        exact = exact_posterior(model, y)
        w = rng.dirichlet(np.ones(len(exact.support)))
        approx = PosteriorFamily(exact.support, w)
        gap = log_evidence(model, y) - elbo(model, approx, y)
        rows.append((i, "elbo_gap", 1, int(abs(gap - posterior_kl(approx, exact)) > 1e-10)))
        return rows

    rows = [r for part in run_trials(trial, cfg) for r in part]
    total = sum(r[3] for r in rows)
    by_suite = {}
    for _, suite, checks, bad in rows:
        c, b = by_suite.get(suite, (0, 0))
        by_suite[suite] = (c + checks, b + bad)
    summary = {s: {"checks": c, "violations": b} for s, (c, b) in by_suite.items()}
    return Report({"verify-bounds": (("trial", "suite", "checks", "violations"), rows)},
                  summary, total)


def sampler_exactness(cfg: ExperimentConfig) -> Report:
    s = cfg.sampler
    N, frac = s.get("particles", 64), s.get("ess_frac", 0.5)
    slack, max_paths = s.get("horizon_slack", 2), s.get("max_paths", 10_000)

    def trial(i, rng):
        params, z, q = _instance(cfg, rng)
        kernel = DagKernel(z, "hier", stall=True)
        L = len(reference_trace(kernel).records) + slack
        h = success_to_go(q, kernel, L)
        tv = total_variation(doob_path_law(doob_policy(q, h), max_paths=max_paths),
                             conditional_path_law(q, kernel, L, max_paths=max_paths))
        res = twisted_smc(q, kernel, ExactTwist(h), L, N, frac, rng)
        var = max(res.logw_var) if res.logw_var else 0.0
        ok = res.survived and res.trace.success
        log_h = math.log(h(kernel.initial_state(), L))
        return (i, L, tv, var, int(ok), res.log_evidence, log_h)

    rows = run_trials(trial, cfg)
    bad = sum(int(r[2] > 1e-10) + int(r[3] > 1e-12) + int(not r[4]) for r in rows)
    summary = {"max_tv": max(r[2] for r in rows), "max_logw_var": max(r[3] for r in rows),
               "success_rate": float(np.mean([r[4] for r in rows]))}
    header = ("trial", "horizon", "doob_tv", "max_logw_var", "trace_success",
              "log_evidence", "log_h")
    return Report({"sampler-exactness": (header, rows)}, summary, bad)


def estimate_params(cfg: ExperimentConfig) -> Report:
    n = cfg.learn.get("n", 1000)
    em_iters = cfg.learn.get("em_iters", 5)

    def trial(i, rng):
        params = cfg.gen_params()
        stats = [suff_stats(sample_dag(params, rng)) for _ in range(n)]
        est = estimate_structure(stats)
        agg = estimate_structure(stats, aggregated_only=True, min_depth=2, max_depth=params.D - 1)
        # EM on a handful of latent observations
        model = LatentModel(D=2, tau=0.4, alpha=params.alpha, K0=params.K0,
                            q_dec=depth_conditionals(2, 3, 0.05, 0.4, rng)[0],
                            q_sol=depth_conditionals(2, 3, 0.05, 0.4, rng)[1], b_eff=2)
        obs = [sample_latent_instance(model, rng, 3)[1] for _ in range(20)]
        em = LatentEM(K0=params.K0, rho=0.01, n_iter=em_iters).fit(obs)
        flat = [v for pair in em.elbo_history_ for v in pair]
        monotone = all(b >= a - 1e-9 for a, b in zip(flat, flat[1:]))
        return (i, est.b_eff_hat, est.alpha_hat, agg.product_hat, params.b_eff * params.alpha,
                em.model_.alpha, int(monotone))

    rows = run_trials(trial, cfg)
    bad = sum(1 - r[6] for r in rows)
    summary = {"b_eff_median": float(np.median([r[1] for r in rows])),
               "alpha_median": float(np.median([r[2] for r in rows])),
               "product_median": float(np.median([r[3] for r in rows]))}
    header = ("trial", "b_eff_hat", "alpha_hat", "product_hat", "product_true",
              "em_alpha", "em_monotone")
    return Report({"estimate-params": (header, rows)}, summary, bad)


def generalization_probe(cfg: ExperimentConfig) -> Report:
    grid = cfg.learn.get("n_grid", [8, 16, 32, 64])
    rho = cfg.learn.get("rho", 0.001)

    def trial(i, rng):
        params, z, q = _instance(cfg, rng)
        classes = [r.cand_id for r in reference_trace(DagKernel(z, "hier")).records]
        mix = {k: 1.0 for k in classes}
        depth = {n.uid: n.depth for n in z.nodes}
        groups = {k: f"{k.split(':')[0]}{depth[int(k.split(':')[1])]}" for k in classes}
        plateau = mixture_kl(coarsen(q, groups, 0.0, mix), q, mix)
        rows = []
        for n in grid:
            data = _teacher_forced(q, classes, n, rng)
            tab = mixture_kl(erm_fit(data, None, rho, params.M), q, mix)
            relabeled = DecisionDataset()
            for k, c, d, t, w in zip(data.keys, data.choices, data.dtypes, data.trace_ids,
                                     data.weights):
                relabeled.add(groups[k], c, d, t, w)
            shared = erm_fit(relabeled, None, rho, params.M)
            coarse = mixture_kl(_Regroup(shared, groups), q, mix)
            rows.append((i, n, tab, coarse, plateau))
        return rows

    rows = [r for part in run_trials(trial, cfg) for r in part]
    med = [float(np.median([r[2] for r in rows if r[1] == n])) for n in grid]
    slope = float(np.polyfit(np.log(grid), np.log(med), 1)[0]) if len(grid) > 1 else math.nan
    summary = {"median_kl": dict(zip(map(str, grid), med)), "loglog_slope": slope,
               "plateau_median": float(np.median([r[4] for r in rows]))}
    header = ("trial", "n", "tabular_kl", "coarse_kl", "coarse_plateau")
    return Report({"generalization-probe": (header, rows)}, summary, 0)


class _Regroup:
    """View a group-keyed policy through the original decision keys."""

    def __init__(self, policy, groups):
        self.policy = policy
        self.groups = groups

    def probs(self, key):
        return self.policy.probs(self.groups[key])


def separation(cfg: ExperimentConfig) -> Report:
    L = cfg.learn
    grid = L.get("n_grid") or geometric_grid(L.get("n_min", 4), L.get("n_max", 2_000_000),
                                             L.get("grid_ratio", 1.2))
    rep = run_separation(cfg.gen_params(D=1), tuple(L.get("depths", (1, 2, 3))), grid,
                         L.get("eval_instances", 200), L.get("delta", 0.2),
                         cfg.search.get("k_dec", 1), L.get("rho", 0.02), cfg.seed)
    n_eval = L.get("eval_instances", 200)
    main = []
    for r in rep.results:
        n_flat, n_hier = rep.counts[r.D]
        main.append((r.D, r.mode, n_flat if r.mode == "flat" else n_hier, r.n_lo, r.n_star, r.n_hi))
    points = []
    for r in rep.results:
        for n in sorted(r.evaluated):
            lo, hi = wilson_interval(r.evaluated[n], n_eval)
            points.append((r.D, r.mode, n, r.evaluated[n], n_eval, lo, hi))
    ratios = [(D, rep.ratio(D), *rep.ratio_interval(D)) for D in rep.depths]
    ok_inc, ok_sep = rep.strictly_increasing(), rep.interval_separated()
    ok_slope = rep.slope_flat > rep.slope_hier
    summary = {"slope_flat": rep.slope_flat, "slope_hier": rep.slope_hier,
               "ratios": {str(D): r for D, r, _, _ in ratios},
               "strictly_increasing": ok_inc, "interval_separated": ok_sep}
    return Report({
        "separation": (("D", "mode", "decisions", "n_lo", "n_star", "n_hi"), main),
        "separation_points": (("D", "mode", "n", "successes", "instances", "wilson_lo",
                               "wilson_hi"), points),
        "separation_ratios": (("D", "ratio", "ratio_lo", "ratio_hi"), ratios),
    }, summary, int(not ok_inc) + int(not ok_sep) + int(not ok_slope))


def generate(cfg: ExperimentConfig) -> Report:
    from .io import dump_dag

    def trial(i, rng):
        params = cfg.gen_params()
        z = sample_dag(params, rng)
        dc = decision_counts(z, unfold(z))
        st = suff_stats(z)
        rows = [(i, d, int(st.C[d]), int(st.T[d]), int(st.S[d])) for d in range(z.D + 1)]
        return rows, (i, len(z.nodes), len(z.edges), dc.N_dec, dc.N_sol, dc.N_flat), dump_dag(z)

    parts = run_trials(trial, cfg)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, (_, _, text) in enumerate(parts):
        (out / f"dag_{i:04d}.txt").write_text(text)
    stats = [r for p in parts for r in p[0]]
    counts = [p[1] for p in parts]
    return Report({
        "generate_stats": (("trial", "depth", "C", "T", "S"), stats),
        "generate_counts": (("trial", "nodes", "edges", "N_dec", "N_sol", "N_flat"), counts),
    }, {"instances": len(parts)}, 0)


def search_report(cfg: ExperimentConfig) -> Report:
    n, rho = cfg.learn.get("n", 200), cfg.learn.get("rho", 0.02)
    topk = TopKConfig(**cfg.search)
    from .separation import build_instance, fit_from_mixture

    def trial(i, rng):
        params = cfg.gen_params()
        rows = []
        for mode in ("hier", "flat"):
            inst = build_instance(params, mode, rng)
            pol = fit_from_mixture(inst, n, rho, rng)
            pols = {"flat": pol} if mode == "flat" else {"dec": pol, "sol": pol}
            res = backtracking_search(inst.kernel, pols, topk)
            covered = coverage_event(reference_trace(inst.kernel), pols, topk)
            rows.append((i, mode, int(res.success), res.expansions, int(covered),
                         int(res.exhausted)))
        return rows

    rows = [r for part in run_trials(trial, cfg) for r in part]
    summary = {m: float(np.mean([r[2] for r in rows if r[1] == m])) for m in ("hier", "flat")}
    return Report({"search": (("trial", "mode", "success", "expansions", "coverage", "exhausted"), rows)},
                  summary, 0)


RUNNERS = {
    "verify-bounds": verify_bounds,
    "sampler-exactness": sampler_exactness,
    "estimate-params": estimate_params,
    "generalization-probe": generalization_probe,
    "separation": separation,
    "generate": generate,
    "search": search_report,
}


def run_experiment(cfg: ExperimentConfig) -> tuple:
    """Run the configured pipeline and write its files; returns (report, paths)."""
    cfg.validate()
    report = RUNNERS[cfg.experiment](cfg)
    return report, write_report(report, cfg)
