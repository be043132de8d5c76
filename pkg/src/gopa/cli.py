"""Command-line experiment drivers.

Every command writes data files only (CSV with a versioned ``#`` header
line, plus a JSON metadata file) into ``--out``. Column-to-figure mapping:

* ``convergence_trace.csv``: ``t`` vs ``rel_error_mean`` (+/- ``rel_error_std``),
  one curve per ``sigma_delta2``: relative error against iterations.
* ``convergence_iters.csv``: ``sigma_delta2`` (log axis) vs ``iters_mean``:
  iterations needed to reach the target error.
* ``privacy.csv``: ``sigma_delta2`` (log axis) vs ``rho_mean`` (+/- ``rho_std``),
  one curve per ``(n, k)``, one panel per ``f``.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from typing import Callable, List, Optional, Sequence

import numpy as np

from . import graph as gr
from . import privacy as pv
from . import protocol as pr
from . import verification as vf
from .baselines import LdpConfig, central_paillier_average, ldp_empirical_rmse, ldp_gossip, ldp_rmse_formula
from .errors import GopaError, NumericalError, ParameterError

SCHEMA_VERSION = 1
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3


@dataclass
class ExperimentConfig:
    """Parameters shared by all commands; list fields accept comma-separated values."""

    n: List[int] = field(default_factory=lambda: [1000])
    k: List[int] = field(default_factory=lambda: [10])
    f: List[float] = field(default_factory=lambda: [0.0])
    sigma_x: float = 1.0
    sigma_delta: List[float] = field(default_factory=lambda: [1.0])
    noise_var: Optional[List[float]] = None
    tau: float = 0.01
    beta: List[float] = field(default_factory=lambda: [0.5])
    cheats: List[int] = field(default_factory=lambda: [1])
    trials: int = 10
    seed: int = 0
    mode: str = "float"
    out: str = "."
    max_iters: int = 100000
    record_every: int = 500
    target: float = 1e-2
    max_users: int = 200
    epsilon: float = 0.1
    bound: float = 0.5
    prime_bits: int = 128
    scale_bits: int = 32
    jobs: int = 1
    ldp_gossip: bool = False

    def noise_variances(self) -> List[float]:
        if self.noise_var is not None:
            return list(self.noise_var)
        return [s * s for s in self.sigma_delta]

    def validate(self) -> None:
        if any(n < 3 for n in self.n):
            raise ParameterError("n must be at least 3")
        if any(not 1 <= k < n for k in self.k for n in self.n):
            raise ParameterError("k must satisfy 1 <= k < n")
        if any(not 0 <= f < 1 for f in self.f):
            raise ParameterError("f must lie in [0, 1)")
        if self.sigma_x <= 0:
            raise ParameterError("sigma_x must be positive")
        if any(v < 0 for v in self.noise_variances()):
            raise ParameterError("noise variance must be non-negative")
        if not 0 < self.tau < 1:
            raise ParameterError("tau must lie in (0, 1)")
        if any(not 0 <= b <= 1 for b in self.beta):
            raise ParameterError("beta must lie in [0, 1]")
        if any(c < 0 for c in self.cheats):
            raise ParameterError("cheat counts must be non-negative")
        if self.trials < 1 or self.max_iters < 0 or self.record_every < 1 or self.jobs < 1:
            raise ParameterError("trials, record_every and jobs must be positive; max_iters non-negative")
        if self.mode not in pr.MODES:
            raise ParameterError(f"mode must be one of {pr.MODES}")
        if not 0 < self.target < 1:
            raise ParameterError("target must lie in (0, 1)")

    # -- key = value text form --
    def to_text(self) -> str:
        lines = []
        for fd in fields(self):
            v = getattr(self, fd.name)
            if v is None:
                continue
            if isinstance(v, list):
                v = ",".join(repr(x) for x in v)
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{fd.name} = {v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, base: Optional["ExperimentConfig"] = None) -> "ExperimentConfig":
        cfg = dataclasses.replace(base) if base is not None else cls()
        for ln in text.splitlines():
            ln = ln.split("#", 1)[0].strip()
            if not ln:
                continue
            if "=" not in ln:
                raise ParameterError(f"config line without '=': {ln!r}")
            key, val = (s.strip() for s in ln.split("=", 1))
            cfg.set(key.replace("-", "_"), val)
        return cfg

    def set(self, name: str, raw) -> None:
        kinds = _FIELD_KINDS
        if name not in kinds:
            raise ParameterError(f"unknown config key {name!r}")
        setattr(self, name, _convert(kinds[name], raw))


_FIELD_KINDS = {
    "n": (list, int), "k": (list, int), "f": (list, float), "sigma_x": float,
    "sigma_delta": (list, float), "noise_var": (list, float), "tau": float,
    "beta": (list, float), "cheats": (list, int), "trials": int, "seed": int, "mode": str,
    "out": str, "max_iters": int, "record_every": int, "target": float, "max_users": int,
    "epsilon": float, "bound": float, "prime_bits": int, "scale_bits": int, "jobs": int,
    "ldp_gossip": bool,
}


def _scalar(kind, raw):
    if kind is bool:
        if isinstance(raw, bool):
            return raw
        return str(raw).strip().lower() in ("1", "true", "yes", "on")
    if kind is int:
        return int(float(raw)) if isinstance(raw, str) and ("e" in raw.lower()) else int(raw)
    return kind(raw)


def _convert(kind, raw):
    try:
        if isinstance(kind, tuple):
            inner = kind[1]
            if isinstance(raw, (list, tuple)):
                return [_scalar(inner, r) for r in raw]
            return [_scalar(inner, r) for r in str(raw).split(",") if r.strip()]
        return _scalar(kind, raw)
    except ValueError as exc:
        raise ParameterError(f"bad value {raw!r}: {exc}") from None


# per-command defaults applied below config-file and flag values
COMMAND_DEFAULTS = {
    "convergence": dict(n=[1000], k=[10], noise_var=[0.0, 1.0, 10.0, 100.0, 1000.0, 10000.0], trials=10,
                        max_iters=60000, record_every=500),
    "privacy": dict(n=[100, 1000, 10000], k=[10], f=[0.1, 0.5], noise_var=[0.0, 0.1, 1.0, 10.0, 100.0],
                    trials=10, max_users=200),
    "verify": dict(n=[12], k=[5], beta=[0.25, 0.5, 0.75], cheats=[0, 1, 2, 5], trials=1000),
    "baseline": dict(n=[10000], k=[10], trials=1000, tau=1e-6),
    "graph": dict(n=[1000], k=[10]),
}


# --- output helpers ------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, float) or isinstance(v, np.floating):
        return repr(float(v))
    return str(v)


def _write_csv(path: str, name: str, header: Sequence[str], rows) -> None:
    buf = io.StringIO()
    buf.write(f"# gopa {name} v{SCHEMA_VERSION}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    with open(path, "w", newline="") as fh:
        fh.write(buf.getvalue())


def _write_json(path: str, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_fmt)
        fh.write("\n")


def _meta(cmd: str, cfg: ExperimentConfig, **extra) -> dict:
    d = {"command": cmd, "schema": SCHEMA_VERSION, "config": cfg.to_text()}
    d.update(extra)
    return d


def _seed(*parts) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def _pmap(fn: Callable, items: list, jobs: int) -> list:
    if jobs <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, items))


# --- convergence ---------------------------------------------------------

def convergence_runs(n: int, k: int, variances: Sequence[float], runs: int, seed: int, sigma_x: float,
                     max_iters: int, record_every: int, target: float):
    """Relative-error traces and target-crossing times for a noise grid.

    One k-out graph is drawn. Each run draws private values, standard
    normal edge noise and an edge sequence once and reuses them across the
    grid, so grid points differ only through the noise scale.

    Returns:
        ``(times, errors, hits)`` with ``errors`` shaped ``(runs, T, V)`` and
        ``hits`` shaped ``(runs, V)``.
    """
    g = gr.generate_k_out(n, k, _seed(seed, 0))
    all_err, all_hit, times = [], [], None
    for r in range(runs):
        rng = np.random.default_rng(_seed(seed, 1, r))
        x = rng.normal(0.0, sigma_x, size=n)
        z = rng.normal(0.0, 1.0, size=g.num_edges)
        cols = []
        for var in variances:
            noisy = x.copy()
            d = z * math.sqrt(var)
            np.add.at(noisy, g.edges[:, 0], d)
            np.subtract.at(noisy, g.edges[:, 1], d)
            cols.append(noisy)
        states = np.column_stack(cols)
        ref = np.repeat(x[:, None], len(variances), axis=1)
        res = pr.batched_gossip(states, ref, g, max_iters, threshold=target, record_every=record_every,
                                shared_edges=True, rng_seed=_seed(seed, 2, r))
        times = res.times
        all_err.append(res.errors)
        all_hit.append(res.hits)
    return times, np.array(all_err), np.array(all_hit), g


def cmd_convergence(cfg: ExperimentConfig) -> dict:
    cfg.validate()
    variances = cfg.noise_variances()
    n, k = cfg.n[0], cfg.k[0]
    times, errs, hits = convergence_runs(n, k, variances, cfg.trials, cfg.seed, cfg.sigma_x,
                                         cfg.max_iters, cfg.record_every, cfg.target)[:3]
    os.makedirs(cfg.out, exist_ok=True)
    rows = []
    for j, var in enumerate(variances):
        m, s = errs[:, :, j].mean(axis=0), errs[:, :, j].std(axis=0)
        rows += [(var, int(t), float(mi), float(si)) for t, mi, si in zip(times, m, s)]
    _write_csv(os.path.join(cfg.out, "convergence_trace.csv"), "convergence-trace",
               ["sigma_delta2", "t", "rel_error_mean", "rel_error_std"], rows)
    it_rows = []
    for j, var in enumerate(variances):
        h = hits[:, j]
        finite = np.isfinite(h).all()
        it_rows.append((var, float(h.mean()) if finite else "inf", float(h.std()) if finite else "nan",
                        int(np.isfinite(h).sum())))
    _write_csv(os.path.join(cfg.out, "convergence_iters.csv"), "convergence-iters",
               ["sigma_delta2", "iters_mean", "iters_std", "runs_converged"], it_rows)
    _write_json(os.path.join(cfg.out, "convergence_meta.json"), _meta("convergence", cfg))
    return {"iters": {var: r[1] for var, r in zip(variances, it_rows)}}


# --- privacy -------------------------------------------------------------

def _privacy_cell(args):
    n, k, f, variances, seed, s, sigma_x, max_users = args
    g = gr.generate_k_out(n, k, _seed(seed, n, k, s))
    g = gr.assign_roles(g, f, _seed(seed, n, k, s, 1))
    honest = g.honest_users
    if len(honest) > max_users and len(honest) > pv.DIRECT_SOLVE_LIMIT:
        users = np.sort(np.random.default_rng(_seed(seed, n, k, s, 2)).choice(honest, max_users, replace=False))
    else:
        users = honest
    out = []
    for var in variances:
        rep = pv.privacy_report(g, sigma_x, math.sqrt(var), users=users.tolist(), compute_condition=False)
        rho = np.array([rep.rho[u] for u in rep.rho])
        bnd = np.array([rep.local_bound[u] for u in rep.rho])
        out.append((rho, bnd))
    return out


def privacy_grid(ns, ks, fs, variances, seeds: int, seed: int, sigma_x: float, max_users: int, jobs: int = 1):
    """Per-cell arrays of (rho, local ratio bound) pooled over graph seeds."""
    cells = {}
    for n in ns:
        for k in ks:
            for f in fs:
                args = [(n, k, f, variances, seed, s, sigma_x, max_users) for s in range(seeds)]
                per_seed = _pmap(_privacy_cell, args, jobs)
                for j, var in enumerate(variances):
                    cells[(n, k, f, var)] = [ps[j] for ps in per_seed]
    return cells


def cmd_privacy(cfg: ExperimentConfig) -> dict:
    cfg.validate()
    variances = cfg.noise_variances()
    cells = privacy_grid(cfg.n, cfg.k, cfg.f, variances, cfg.trials, cfg.seed, cfg.sigma_x, cfg.max_users, cfg.jobs)
    rows, summary = [], []
    for (n, k, f, var), per_seed in cells.items():
        rho = np.concatenate([p[0] for p in per_seed])
        bnd = np.concatenate([p[1] for p in per_seed])
        seed_means = [float(p[0].mean()) for p in per_seed]
        row = (n, k, f, var, float(np.mean(seed_means)), float(rho.std()), float(bnd.mean()),
               float((rho - bnd).min()), len(rho), len(per_seed))
        rows.append(row)
        summary.append(dict(zip(["n", "k", "f", "sigma_delta2", "rho_mean", "rho_std", "local_bound_mean",
                                 "min_rho_minus_bound", "users", "seeds"], row)))
    os.makedirs(cfg.out, exist_ok=True)
    _write_csv(os.path.join(cfg.out, "privacy.csv"), "privacy",
               ["n", "k", "f", "sigma_delta2", "rho_mean", "rho_std", "local_bound_mean", "min_rho_minus_bound",
                "users", "seeds"], rows)
    _write_json(os.path.join(cfg.out, "privacy_meta.json"),
                _meta("privacy", cfg, n_grid_note="n grid chosen by default, not taken from a published table",
                      cells=summary))
    return {"rows": summary}


# --- verification --------------------------------------------------------

def _verify_chunk(args):
    n, k, seed, prime_bits, scale_bits, sigma_x, sigma_delta, beta, C, start, count = args
    g, cheater = verify_topology(n, k, seed, max(C, 1))
    keys = vf.generate_keys(g.n, prime_bits, _seed(seed, 7))
    script = vf.single_cheater_script(g, cheater, C) if C else vf.CheatScript()
    detected = accused = exact = 0
    for t in range(start, start + count):
        res = vf.run_verified_protocol(vf.VerifiedConfig(
            sigma_x=sigma_x, sigma_delta=sigma_delta, beta=beta, scale_bits=scale_bits,
            seed=_seed(seed, 8, int(beta * 1e6), C, t), script=script, graph=g, keys=keys,
            compute_privacy=False))
        users = res.cheaters.users
        if users & script.cheaters:
            detected += 1
        if not script.cheaters and users:
            accused += 1
        if res.average_fraction == res.exact_fraction:
            exact += 1
    return detected, accused, exact


def verify_topology(n: int, k: int, seed: int, min_degree: int):
    """k-out graph whose highest-degree user is the single malicious cheater."""
    g = gr.generate_k_out(n, k, _seed(seed, 6))
    cheater = int(np.argmax(g.degrees))
    if g.degrees[cheater] < min_degree:
        raise ParameterError(f"no user has {min_degree} neighbours; increase k")
    return gr.assign_roles(g, 0.0, malicious=[cheater]), cheater


def cmd_verify(cfg: ExperimentConfig) -> dict:
    cfg.validate()
    n, k = cfg.n[0], cfg.k[0]
    rows, out = [], []
    for beta in cfg.beta:
        for C in cfg.cheats:
            per = max(1, math.ceil(cfg.trials / cfg.jobs))
            chunks = [(n, k, cfg.seed, cfg.prime_bits, cfg.scale_bits, cfg.sigma_x, cfg.sigma_delta[0],
                       beta, C, s, min(per, cfg.trials - s)) for s in range(0, cfg.trials, per)]
            parts = _pmap(_verify_chunk, chunks, cfg.jobs)
            detected = sum(p[0] for p in parts)
            accused = sum(p[1] for p in parts)
            exact = sum(p[2] for p in parts)
            st = vf.DetectionStats(beta, C, cfg.trials, detected, accused, vf.detection_probability(beta, C))
            ok = st.rate >= st.bound - st.margin
            row = (beta, C, cfg.trials, detected, st.rate, st.bound, st.margin, int(ok), accused, exact)
            rows.append(row)
            out.append(dict(zip(["beta", "C", "trials", "detected", "rate", "bound", "margin", "meets_bound",
                                 "honest_accused", "exact_runs"], row)))
    os.makedirs(cfg.out, exist_ok=True)
    _write_csv(os.path.join(cfg.out, "verify.csv"), "verify",
               ["beta", "C", "trials", "detected", "rate", "bound", "margin", "meets_bound",
                "honest_accused", "exact_runs"], rows)
    _write_json(os.path.join(cfg.out, "verify_meta.json"), _meta("verify", cfg, rows=out))
    return {"rows": out}


# --- baselines -----------------------------------------------------------

def cmd_baseline(cfg: ExperimentConfig) -> dict:
    cfg.validate()
    n, k = cfg.n[0], cfg.k[0]
    ldp = LdpConfig(cfg.epsilon, cfg.bound)
    rng = np.random.default_rng(_seed(cfg.seed, 0))
    x = pr.PrivateValues(rng.uniform(-cfg.bound, cfg.bound, size=n), cfg.bound)
    formula = ldp_rmse_formula(ldp, n)
    empirical = ldp_empirical_rmse(x, ldp, cfg.trials, _seed(cfg.seed, 1))

    g = gr.generate_k_out(n, k, _seed(cfg.seed, 2))
    sigma_delta = cfg.sigma_delta[0]
    state, _ = pr.randomization_phase(g, x, sigma_delta, _seed(cfg.seed, 3), mode=cfg.mode,
                                      scale_bits=cfg.scale_bits)
    bound = pr.tau_averaging_time_bound(g, cfg.tau, cfg.bound, pr.NOISE_BOUND_SIGMAS * max(sigma_delta, 1e-12))
    iters = int(math.ceil(bound.iterations))
    final = pr.run_averaging(state, g, iters, _seed(cfg.seed, 4), record_every=max(1, iters // 100))
    gopa_err = final.relative_error()
    gopa_rmse = float(np.sqrt(np.mean((final.real_values() - x.average) ** 2)))

    central = central_paillier_average(x, cfg.scale_bits, _seed(cfg.seed, 5), cfg.prime_bits)
    q = x.quantised(cfg.scale_bits)
    central_exact = int(q.sum()) / 2 ** cfg.scale_bits / n
    rows = [
        ("ldp", n, "rmse_average", empirical, formula),
        ("gopa", n, "rel_error_at_bound", gopa_err, cfg.tau),
        ("gopa", n, "rmse_at_bound", gopa_rmse, ""),
        ("central", n, "abs_error_vs_fixed_point", abs(central - central_exact), 0.0),
        ("central", n, "abs_error_vs_real", abs(central - x.average), n * 2.0 ** -cfg.scale_bits),
    ]
    os.makedirs(cfg.out, exist_ok=True)
    _write_csv(os.path.join(cfg.out, "baseline.csv"), "baseline", ["method", "n", "metric", "value", "reference"], rows)
    trace_rows = [(t, e, d, "gopa") for t, e, d in final.trace]
    if cfg.ldp_gossip:
        lstate, _ = ldp_gossip(x, ldp, g, iters, _seed(cfg.seed, 6), record_every=max(1, iters // 100))
        avg = x.average
        xn = np.linalg.norm(x.values)
        # error of the LDP run is measured against the true average
        for t, _, d in lstate.trace:
            trace_rows.append((t, "", d, "ldp"))
        trace_rows.append((lstate.t, float(np.linalg.norm(lstate.real_values() - avg) / xn), "", "ldp-final"))
    _write_csv(os.path.join(cfg.out, "baseline_trace.csv"), "baseline-trace",
               ["t", "rel_error", "sum_drift", "method"], trace_rows)
    _write_json(os.path.join(cfg.out, "baseline_meta.json"),
                _meta("baseline", cfg, bound_iterations=bound.iterations, degenerate=bound.degenerate))
    return {"ldp_rmse": empirical, "ldp_formula": formula, "gopa_rel_error": gopa_err,
            "central_error": abs(central - central_exact), "iterations": iters}


# --- graph ---------------------------------------------------------------

def cmd_graph(cfg: ExperimentConfig) -> dict:
    cfg.validate()
    n, k, f = cfg.n[0], cfg.k[0], cfg.f[0]
    g = gr.assign_roles(gr.generate_k_out(n, k, cfg.seed), f, _seed(cfg.seed, 1))
    gh = gr.honest_subgraph(g)
    comp = gh.components()
    sizes = np.bincount(comp) if gh.n else np.zeros(0, dtype=int)
    stats = {
        "n": n, "k": k, "f": f, "seed": cfg.seed, "edges": g.num_edges,
        "min_degree": int(g.degrees.min()), "max_degree": int(g.degrees.max()),
        "mean_degree": float(g.degrees.mean()), "connected": gr.is_connected(g),
        "lambda2": gr.lambda2(gr.laplacian(g)), "honest_users": int(gh.n),
        "honest_components": int(len(sizes)), "largest_honest_component": int(sizes.max()) if len(sizes) else 0,
        "mean_honest_neighbors": float(g.honest_neighbor_counts()[g.honest_users].mean()) if gh.n else 0.0,
    }
    os.makedirs(cfg.out, exist_ok=True)
    gr.write_edgelist(g, os.path.join(cfg.out, "graph.txt"))
    with open(os.path.join(cfg.out, "degrees.csv"), "w") as fh:
        fh.write(f"# gopa degrees v{SCHEMA_VERSION}\n")
        fh.write(gr.degree_distribution_csv(g))
    _write_json(os.path.join(cfg.out, "graph_meta.json"), _meta("graph", cfg, stats=stats))
    return stats


COMMANDS = {"convergence": cmd_convergence, "privacy": cmd_privacy, "verify": cmd_verify,
            "baseline": cmd_baseline, "graph": cmd_graph}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gopa", description="Private gossip averaging experiments.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value file; flags override it")
    for name, kind in _FIELD_KINDS.items():
        flag = "--" + name.replace("_", "-")
        if kind is bool:
            common.add_argument(flag, action="store_const", const=True, default=None)
        else:
            common.add_argument(flag, default=None,
                                help="comma-separated list" if isinstance(kind, tuple) else None)
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=COMMANDS[name].__name__.replace("cmd_", "") + " experiment")
    return ap


def config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    cfg = ExperimentConfig()
    for key, val in COMMAND_DEFAULTS.get(args.command, {}).items():
        setattr(cfg, key, val)
    if args.config:
        with open(args.config) as fh:
            cfg = ExperimentConfig.from_text(fh.read(), base=cfg)
    for name in _FIELD_KINDS:
        val = getattr(args, name, None)
        if val is not None:
            cfg.set(name, val)
    return cfg


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = config_from_args(args)
        result = COMMANDS[args.command](cfg)
    except (ParameterError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, np.linalg.LinAlgError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except GopaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(json.dumps(result, sort_keys=True, default=_fmt))
    return 0


if __name__ == "__main__":
    sys.exit(main())
