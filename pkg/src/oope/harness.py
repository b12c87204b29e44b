"""Experiment configuration, execution, persistence and summaries."""
from __future__ import annotations

import copy
import csv
import io
import json
import logging
import math
import os
import platform
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .driver import RunHistory, meta_learning_rate, meta_regret_bound, run as run_driver, step_size_pool
from .env_model import (MixtureMDP, ObliviousAdversary, TargetedAdversary, build_random_mixture_mdp,
                        make_comparators, make_reward_sequence, path_length)
from .oracle import Decomposition, dynamic_regret, exact_values, regret_decomposition
from .projection import ProjectionConfig
from .rng import stream

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
OUT_ENV_VAR = "OOPE_OUT_DIR"
ALGORITHMS = ("oope", "single_omd", "oracle_eta_omd", "uniform_policy")


class ConfigError(ValueError):
    pass


DEFAULTS = {
    "env": {"S": 3, "A": 2, "H": 3, "d": 4, "seed": None, "p_floor": 1e-3, "file": None},
    "K": 300,
    "s1": 0,
    "seed": 0,
    "adversary": {"kind": "piecewise", "switches": 0, "seed": None, "drift_budget": 0.0},
    "comparator": {"kind": "fixed_best", "L": 1},
    "algorithm": {"kind": "oope", "eta": None, "etas": None},
    "delta": 0.1,
    "lam": 1.0,
    "projection": {"tol": 1e-7, "max_outer_iters": 500, "inner_solver_tol": 1e-10},
    "out": "runs/default",
    "verbosity": "WARNING",
    "full_logging": False,
}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for key, val in over.items():
        if key not in base:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(base[key], dict) and isinstance(val, dict):
            for sub in val:
                if sub not in base[key]:
                    raise ConfigError(f"unknown config key {key}.{sub}")
            out[key].update(val)
        else:
            out[key] = val
    return out


@dataclass
class ExperimentConfig:
    doc: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS))
    base_dir: Path = field(default_factory=Path.cwd)

    @classmethod
    def from_dict(cls, doc: dict, base_dir: Path | str | None = None) -> "ExperimentConfig":
        cfg = cls(_merge(DEFAULTS, doc), Path(base_dir) if base_dir else Path.cwd())
        cfg.check()
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(doc, path.parent)

    def __getitem__(self, key):
        return self.doc[key]

    def with_overrides(self, **kw) -> "ExperimentConfig":
        doc = copy.deepcopy(self.doc)
        doc.update(kw)
        return ExperimentConfig.from_dict(doc, self.base_dir)

    def check(self) -> None:
        d = self.doc
        env = d["env"]
        if env["file"] is None:
            for key, low in (("S", 2), ("A", 2), ("H", 1), ("d", 1)):
                if not isinstance(env[key], int) or env[key] < low:
                    raise ConfigError(f"env.{key} must be an integer >= {low}")
        if not isinstance(d["K"], int) or d["K"] < 1:
            raise ConfigError("K must be a positive integer")
        if not 0 < d["delta"] < 1:
            raise ConfigError("delta must lie in (0, 1)")
        if d["lam"] <= 0:
            raise ConfigError("lam must be positive")
        alg = d["algorithm"]
        if alg["kind"] not in ALGORITHMS:
            raise ConfigError(f"algorithm.kind must be one of {ALGORITHMS}")
        if alg["kind"] == "single_omd" and (alg["eta"] is None or alg["eta"] < 0):
            raise ConfigError("single_omd needs a nonnegative algorithm.eta")
        if d["adversary"]["kind"] not in ("piecewise", "drift", "targeted"):
            raise ConfigError("adversary.kind must be piecewise, drift or targeted")
        if d["comparator"]["kind"] not in ("fixed_best", "per_episode_best", "piecewise_best"):
            raise ConfigError("comparator.kind must be fixed_best, per_episode_best or piecewise_best")
        ProjectionConfig(**d["projection"])

    def out_dir(self) -> Path:
        override = os.environ.get(OUT_ENV_VAR)
        return Path(override) if override else Path(self.doc["out"])


def build_env(cfg: ExperimentConfig) -> MixtureMDP:
    env = cfg["env"]
    if env["file"]:
        path = Path(env["file"])
        if not path.is_absolute():
            path = cfg.base_dir / path
        return MixtureMDP.from_json(path.read_text())
    seed = cfg["seed"] if env["seed"] is None else env["seed"]
    return build_random_mixture_mdp(seed, env["S"], env["A"], env["H"], env["d"], env["p_floor"])


@dataclass
class RunResult:
    config: ExperimentConfig
    mdp: MixtureMDP
    history: RunHistory
    comparators: list
    regret: float
    regret_series: np.ndarray
    decomposition: Decomposition
    policy_values: np.ndarray
    comparator_values: np.ndarray
    meta_bound: float
    path_lengths: tuple[float, float]
    wall_clock: float
    sweep: list[tuple[float, float]] | None = None


def _simulate(cfg: ExperimentConfig, mdp: MixtureMDP, etas, policy_override=None):
    K = cfg["K"]
    seed = cfg["seed"]
    adv_cfg = cfg["adversary"]
    adv_seed = seed if adv_cfg["seed"] is None else adv_cfg["seed"]
    shape = (mdp.H, mdp.S, mdp.A)
    if adv_cfg["kind"] == "targeted":
        adversary = TargetedAdversary(shape, adv_seed)
    else:
        rewards = make_reward_sequence(adv_cfg["kind"], K, adv_cfg["switches"], adv_seed, shape,
                                       drift_budget=adv_cfg["drift_budget"])
        adversary = ObliviousAdversary(rewards)
    history = run_driver(
        mdp, adversary, K, stream(seed, "trajectory"), etas=etas, s1=cfg["s1"], lam=cfg["lam"],
        delta=cfg["delta"], cfg=ProjectionConfig(**cfg["projection"]),
        full_logging=cfg["full_logging"], policy_override=policy_override,
    )
    rewards = list(history.rewards)
    comp_cfg = cfg["comparator"]
    comparators = make_comparators(comp_cfg["kind"], rewards, mdp, comp_cfg["L"])
    regret, series = dynamic_regret(history.policies, comparators, mdp, rewards, cfg["s1"])
    return history, comparators, regret, series


def run(cfg: ExperimentConfig, write: bool = True) -> RunResult:
    logging.getLogger("oope").setLevel(cfg["verbosity"])
    start = time.perf_counter()
    mdp = build_env(cfg)
    mdp.validate()
    K, H, S, A = cfg["K"], mdp.H, mdp.S, mdp.A
    alg = cfg["algorithm"]
    sweep = None
    override = None
    if alg["kind"] == "oope":
        etas = alg["etas"] or step_size_pool(K, H, S, A)
    elif alg["kind"] == "single_omd":
        etas = [alg["eta"]]
    elif alg["kind"] == "uniform_policy":
        etas = [0.0]
        override = np.full((H, S, A), 1.0 / A)
    else:
        etas = None
    if etas is not None:
        history, comparators, regret, series = _simulate(cfg, mdp, etas, override)
    else:
        # best single step size in hindsight over the pool
        best = None
        sweep = []
        for eta in alg["etas"] or step_size_pool(K, H, S, A):
            out = _simulate(cfg, mdp, [eta])
            sweep.append((eta, out[2]))
            if best is None or out[2] < best[2]:
                best = out
        history, comparators, regret, series = best
    rewards = list(history.rewards)
    decomposition = regret_decomposition(history, comparators, mdp, rewards, s1=cfg["s1"])
    N = len(history.etas)
    result = RunResult(
        config=cfg, mdp=mdp, history=history, comparators=comparators, regret=regret,
        regret_series=series, decomposition=decomposition,
        policy_values=exact_values(mdp, history.policies, rewards, cfg["s1"]),
        comparator_values=exact_values(mdp, comparators, rewards, cfg["s1"]),
        meta_bound=meta_regret_bound(K, H, N, meta_learning_rate(K, H, N)),
        path_lengths=path_length(comparators, mdp, cfg["s1"]),
        wall_clock=time.perf_counter() - start, sweep=sweep,
    )
    if write:
        write_outputs(result, cfg.out_dir())
    return result


RESULT_COLUMNS = [
    "schema_version", "k", "payoffs", "meta_weights", "v_hat", "v_optimistic", "v_policy",
    "v_comparator", "cumulative_regret", "realized_return", "proj_iters", "proj_flow_violation",
    "proj_c2_violation", "proj_failures", "coverage", "beta_hat", "min_eig_sigma",
]


def _fmt(x: float) -> str:
    return repr(float(x))


def results_csv(res: RunResult) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RESULT_COLUMNS)
    for i, rec in enumerate(res.history.records):
        w.writerow([
            SCHEMA_VERSION, rec.k, ";".join(_fmt(v) for v in rec.payoffs),
            ";".join(_fmt(v) for v in rec.meta_weights), _fmt(rec.combined_payoff),
            _fmt(rec.v_optimistic), _fmt(res.policy_values[i]), _fmt(res.comparator_values[i]),
            _fmt(res.regret_series[i]), _fmt(rec.realized_return), rec.proj_iters,
            _fmt(rec.proj_flow_violation), _fmt(rec.proj_c2_violation), rec.proj_failures,
            int(rec.coverage), _fmt(rec.beta_hat), _fmt(rec.min_eig_sigma),
        ])
    return buf.getvalue()


def write_outputs(res: RunResult, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "results.csv").write_text(results_csv(res))
    (out / "decomposition.csv").write_text(res.decomposition.to_csv())
    (out / "config.json").write_text(json.dumps(res.config.doc, indent=2, sort_keys=True) + "\n")
    (out / "env.json").write_text(res.mdp.to_json())
    meta = {
        "schema_version": SCHEMA_VERSION,
        "fingerprint": res.mdp.fingerprint(),
        "wall_clock_seconds": res.wall_clock,
        "final_regret": res.regret,
        "decomposition": dict(zip(("base", "meta", "gap", "estimation"), res.decomposition.totals())),
        "meta_regret_bound": res.meta_bound,
        "path_length": {"P_K": res.path_lengths[0], "Pbar_K": res.path_lengths[1]},
        "etas": [float(e) for e in res.history.etas],
        "eps": res.history.eps,
        "package_version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
    }
    if res.sweep is not None:
        meta["eta_sweep"] = [{"eta": e, "regret": r} for e, r in res.sweep]
    (out / "metadata.json").write_text(json.dumps(meta, indent=2) + "\n")


# --- summaries ---------------------------------------------------------------------

def loglog_slope(Ks, values) -> float:
    Ks = np.asarray(Ks, dtype=float)
    values = np.asarray(values, dtype=float)
    if len(Ks) < 2 or np.any(values <= 0):
        raise ValueError("need at least two positive points for a log-log fit")
    return float(np.polyfit(np.log(Ks), np.log(values), 1)[0])


def read_results(path: Path) -> dict:
    """Final-row summary of one run directory."""
    with open(path / "results.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{path}/results.csv has no episodes")
    cfg = json.loads((path / "config.json").read_text())
    return {"dir": str(path), "K": len(rows), "seed": cfg.get("seed"),
            "algorithm": cfg["algorithm"]["kind"],
            "final_regret": float(rows[-1]["cumulative_regret"]),
            "series": np.array([float(r["cumulative_regret"]) for r in rows])}


def summarize(runs: list[dict]) -> list[dict]:
    """Mean and std of final regret per (algorithm, K), plus the log-log slope over K."""
    if not runs:
        raise ValueError("nothing to summarize")
    groups: dict[tuple[str, int], list[float]] = {}
    for r in runs:
        groups.setdefault((r["algorithm"], r["K"]), []).append(r["final_regret"])
    rows = []
    for (alg, K), vals in sorted(groups.items()):
        rows.append({"algorithm": alg, "K": K, "n": len(vals), "mean_regret": float(np.mean(vals)),
                     "std_regret": float(np.std(vals))})
    for alg in sorted({r["algorithm"] for r in rows}):
        sub = [r for r in rows if r["algorithm"] == alg]
        slope = math.nan
        if len(sub) >= 2 and all(r["mean_regret"] > 0 for r in sub):
            slope = loglog_slope([r["K"] for r in sub], [r["mean_regret"] for r in sub])
        for r in sub:
            r["loglog_slope"] = slope
    return rows


def summary_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    cols = ["schema_version", "algorithm", "K", "n", "mean_regret", "std_regret", "loglog_slope"]
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in rows:
        w.writerow([SCHEMA_VERSION] + [r[c] for c in cols[1:]])
    return buf.getvalue()
