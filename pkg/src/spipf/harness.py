"""Monte-Carlo experiment orchestration: configs, seeded trials, metrics and CSV output.

Every trial simulates one ground truth from its own seed stream and feeds the
identical measurement path to each selected algorithm.  Trials run in worker
processes; results are reduced serially in (sweep value, trial) order so the
written files do not depend on the worker count.
"""

from __future__ import annotations

import configparser
import csv
import hashlib
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .baselines import GaussianBelief, run_sir, run_skf, spipf_zero_control
from .errors import (
    ConfigError,
    DegenerateEnsembleError,
    ExperimentError,
    FilterFailureError,
    HybridError,
    ModeMismatchError,
    SolverStalledError,
)
from .filter import EstimateRecord, FilterConfig, GaussianPrior, records_to_csv, run
from .hybrid import HybridState, HybridSystem
from .ilqr import ILQRSettings
from .systems import (
    BouncingBallParams,
    SlipParams,
    TruthTrajectory,
    bouncing_ball,
    linear_1d,
    simulate_truth,
    slip,
)

log = logging.getLogger(__name__)

ALGORITHMS = ("spipf", "spipf0", "sir", "skf")
SWEEPABLE = ("K", "H", "dt")
TRUTH_STREAM = 7
FILTER_STREAM = 8
MODE_BAND = 0.2  # seconds; offsets inside this band count as a correct transition estimate
CENSORED = float("inf")

# numerical failures that mark a single trial as failed instead of aborting the sweep
TRIAL_FAILURES = (HybridError, FilterFailureError, DegenerateEnsembleError, SolverStalledError,
                  FloatingPointError, np.linalg.LinAlgError)

_SYSTEM_KEYS = {
    "bouncing_ball": {"m", "g", "e"},
    "slip": {"m", "k", "r0", "g", "coriolis"},
    "linear": {"a", "sigma"},
}
_FILTER_KEYS = {"K", "H", "dt", "epsilon", "gamma_thres", "resampling_enabled", "seed",
                "resample_weights", "threads", "ilqr_max_iters", "jump_jacobian"}
_EXPERIMENT_KEYS = {"sweep", "n_trials", "mse_threshold", "algorithms", "output_dir", "mse_window",
                    "workers"}
_DIST_KEYS = {"mode", "mean", "cov"}


# ---------------------------------------------------------------------------
# configuration

@dataclass(frozen=True)
class ExperimentConfig:
    """Everything needed to reproduce one sweep.

    ``truth`` is the distribution of the true initial state (a point mass when
    its covariance is zero) and ``filter.prior`` the filters' belief over it.
    """

    system: str
    system_params: dict
    sigma_B: float
    filter: FilterConfig
    truth: GaussianPrior
    T: float
    sweep: tuple = ("K", (50,))
    n_trials: int = 50
    mse_threshold: Optional[float] = None
    algorithms: tuple = ALGORITHMS
    output_dir: str = "results"
    mse_window: str = "post_transition"
    workers: int = 1

    def __post_init__(self):
        if self.system not in _SYSTEM_KEYS:
            raise ConfigError(f"unknown system {self.system!r}")
        name, values = self.sweep
        if name not in SWEEPABLE:
            raise ConfigError(f"sweep parameter must be one of {SWEEPABLE}, got {name!r}")
        if len(values) == 0:
            raise ConfigError("sweep list must not be empty")
        if self.n_trials < 1:
            raise ConfigError("n_trials must be at least 1")
        if not self.algorithms or any(a not in ALGORITHMS for a in self.algorithms):
            raise ConfigError(f"algorithms must be a non-empty subset of {ALGORITHMS}")
        if self.mse_window not in ("post_transition", "full"):
            raise ConfigError("mse_window must be 'post_transition' or 'full'")
        if self.T <= 0 or self.sigma_B <= 0:
            raise ConfigError("T and sigma_B must be positive")
        if self.workers < 1:
            raise ConfigError("workers must be at least 1")

    @property
    def sweep_name(self) -> str:
        return self.sweep[0]

    @property
    def sweep_values(self) -> tuple:
        return self.sweep[1]

    def filter_for(self, value) -> FilterConfig:
        return replace(self.filter, **{self.sweep_name: value})


def _floats(text: str, key: str) -> list:
    try:
        return [float(v) for v in text.replace(",", " ").split()]
    except ValueError as exc:
        raise ConfigError(f"{key}: expected numbers, got {text!r}") from exc


def _scalar(sec, key, kind, default=None):
    if key not in sec:
        return default
    raw = sec[key].strip()
    try:
        if kind is bool:
            return sec.getboolean(key)
        if kind is int:
            return int(raw)
        return kind(raw)
    except ValueError as exc:
        raise ConfigError(f"[{sec.name}] {key}: cannot parse {raw!r}") from exc


def _check_keys(sec, allowed):
    extra = set(sec.keys()) - allowed
    if extra:
        raise ConfigError(f"[{sec.name}] unknown keys: {', '.join(sorted(extra))}")


def _distribution(sec, extra_keys=frozenset()) -> GaussianPrior:
    _check_keys(sec, _DIST_KEYS | extra_keys)
    if "mean" not in sec:
        raise ConfigError(f"[{sec.name}] needs a mean")
    mean = np.array(_floats(sec["mean"], "mean"))
    n = mean.size
    cov = np.zeros((n, n))
    if "cov" in sec:
        c = np.array(_floats(sec["cov"], "cov"))
        if c.size == n:
            cov = np.diag(c)
        elif c.size == n * n:
            cov = c.reshape(n, n)
        else:
            raise ConfigError(f"[{sec.name}] cov needs {n} diagonal or {n * n} full entries")
    return GaussianPrior.single(_scalar(sec, "mode", int, 0), mean, cov)


def _parse_sweep(text: str) -> tuple:
    if ":" not in text:
        raise ConfigError(f"sweep must look like 'K: 10, 50', got {text!r}")
    name, vals = (s.strip() for s in text.split(":", 1))
    if name not in SWEEPABLE:
        raise ConfigError(f"sweep parameter must be one of {SWEEPABLE}, got {name!r}")
    nums = _floats(vals, "sweep")
    if not nums:
        raise ConfigError("sweep list must not be empty")
    if name in ("K", "H"):
        if any(v != int(v) for v in nums):
            raise ConfigError(f"sweep over {name} needs integers")
        nums = [int(v) for v in nums]
    return name, tuple(nums)


def parse_config(text: str, base_dir=None) -> ExperimentConfig:
    """Build an :class:`ExperimentConfig` from INI text.

    Sections: ``[system]`` (``name``, ``sigma_B`` and model parameters),
    ``[truth]`` (``T``, ``mode``, ``mean``, ``cov``), ``[prior]`` (``mode``,
    ``mean``, ``cov``; defaults to the truth distribution), ``[filter]``
    (FilterConfig fields) and ``[experiment]`` (``sweep``, ``n_trials``,
    ``mse_threshold``, ``algorithms``, ``output_dir``, ``mse_window``,
    ``workers``).  A relative ``output_dir`` is resolved against ``base_dir``.
    """
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    unknown = set(cp.sections()) - {"system", "truth", "prior", "filter", "experiment"}
    if unknown:
        raise ConfigError(f"unknown sections: {', '.join(sorted(unknown))}")
    for name in ("system", "truth"):
        if name not in cp:
            raise ConfigError(f"missing [{name}] section")

    sys_sec = cp["system"]
    sname = sys_sec.get("name", "").strip()
    if sname not in _SYSTEM_KEYS:
        raise ConfigError(f"[system] name must be one of {sorted(_SYSTEM_KEYS)}")
    _check_keys(sys_sec, _SYSTEM_KEYS[sname] | {"name", "sigma_B"})
    params = {k: _scalar(sys_sec, k, float) for k in sorted(_SYSTEM_KEYS[sname]) if k in sys_sec}
    sigma_B = _scalar(sys_sec, "sigma_B", float, 0.1)

    tr_sec = cp["truth"]
    T = _scalar(tr_sec, "T", float)
    if T is None:
        raise ConfigError("[truth] needs T")
    truth = _distribution(tr_sec, {"T"})
    prior = _distribution(cp["prior"]) if "prior" in cp else truth

    for name in ("filter", "experiment"):
        if name not in cp:
            cp.add_section(name)
    f_sec = cp["filter"]
    _check_keys(f_sec, _FILTER_KEYS)
    try:
        ilqr = ILQRSettings(max_iters=_scalar(f_sec, "ilqr_max_iters", int, ILQRSettings.max_iters),
                            jump_jacobian=_scalar(f_sec, "jump_jacobian", str, "saltation"))
        fcfg = FilterConfig(
            K=_scalar(f_sec, "K", int, 50),
            H=_scalar(f_sec, "H", int, 10),
            dt=_scalar(f_sec, "dt", float, 0.01),
            epsilon=_scalar(f_sec, "epsilon", float, 0.1),
            gamma_thres=_scalar(f_sec, "gamma_thres", float, 0.5),
            resampling_enabled=_scalar(f_sec, "resampling_enabled", bool, True),
            prior=prior,
            seed=_scalar(f_sec, "seed", int, 0),
            resample_weights=_scalar(f_sec, "resample_weights", str, "full_window"),
            ilqr=ilqr,
            threads=_scalar(f_sec, "threads", int, 1),
        )
    except ValueError as exc:
        raise ConfigError(f"[filter] {exc}") from exc

    ex = cp["experiment"]
    _check_keys(ex, _EXPERIMENT_KEYS)
    sweep = _parse_sweep(ex["sweep"]) if "sweep" in ex else ("K", (fcfg.K,))
    algorithms = tuple(ex.get("algorithms", " ".join(ALGORITHMS)).replace(",", " ").split())
    thr = ex.get("mse_threshold", "").strip()
    out = Path(ex.get("output_dir", "results").strip())
    if base_dir is not None and not out.is_absolute():
        out = Path(base_dir) / out
    try:
        n_trials = int(ex.get("n_trials", "50"))
        workers = int(ex.get("workers", "1"))
        mse_threshold = float(thr) if thr else None
    except ValueError as exc:
        raise ConfigError(f"[experiment] {exc}") from exc
    return ExperimentConfig(
        system=sname, system_params=params, sigma_B=sigma_B, filter=fcfg, truth=truth, T=T,
        sweep=sweep, n_trials=n_trials, mse_threshold=mse_threshold, algorithms=algorithms,
        output_dir=str(out), mse_window=ex.get("mse_window", "post_transition").strip(),
        workers=workers,
    )


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    return parse_config(text)


def build_system(cfg: ExperimentConfig, epsilon: Optional[float] = None) -> HybridSystem:
    eps = cfg.filter.epsilon if epsilon is None else epsilon
    p = cfg.system_params
    try:
        if cfg.system == "bouncing_ball":
            return bouncing_ball(BouncingBallParams(**p), noise_scale=eps, sigma_B=cfg.sigma_B)
        if cfg.system == "slip":
            return slip(SlipParams(**p), noise_scale=eps, sigma_B=cfg.sigma_B)
        return linear_1d(**p, noise_scale=eps, sigma_B=cfg.sigma_B)
    except ValueError as exc:
        raise ConfigError(f"[system] {exc}") from exc


# ---------------------------------------------------------------------------
# metrics

def _to_mode(system: HybridSystem, x, mode: int, aux, target: int, t: float) -> np.ndarray:
    if mode == target:
        return np.asarray(x, dtype=float)
    tr = system.transition_between(mode, target)
    if tr is None:
        raise ModeMismatchError(f"no reset maps mode {mode} into mode {target}")
    return np.asarray(tr.reset(t, np.asarray(x, dtype=float), aux), dtype=float)


def squared_errors(estimates, truth, system: Optional[HybridSystem] = None) -> np.ndarray:
    """Per-step ``|x - x_hat|^2`` with mismatched-mode estimates mapped into the truth's mode.

    ``estimates`` is either an ``(N, n)`` array or a list of
    :class:`EstimateRecord`; ``truth`` an ``(N, n)`` array or a
    :class:`TruthTrajectory`, whose first state (``t_0``, never estimated) is
    skipped so that record ``j`` lines up with ``t_{j+1}``.
    """
    if isinstance(truth, TruthTrajectory):
        t_states, t_modes, times = truth.states[1:], truth.modes[1:], truth.times[1:]
    else:
        t_states = np.atleast_2d(np.asarray(truth, dtype=float))
        if t_states.ndim == 2 and np.ndim(truth) == 1:
            t_states = t_states.T
        t_modes, times = None, None
    if len(estimates) != len(t_states):
        raise ValueError(f"estimate grid ({len(estimates)}) and truth grid ({len(t_states)}) differ")
    out = np.empty(len(t_states))
    for j, x in enumerate(t_states):
        est = estimates[j]
        if isinstance(est, EstimateRecord):
            xh = est.x_hat
            if t_modes is not None and est.mode_hat != t_modes[j]:
                if system is None:
                    raise ValueError("a system is needed to map mismatched modes")
                xh = _to_mode(system, xh, est.mode_hat, est.aux_hat, int(t_modes[j]), float(times[j]))
        else:
            xh = np.atleast_1d(np.asarray(est, dtype=float))
        x = np.atleast_1d(np.asarray(x, dtype=float))
        if xh.shape != x.shape:
            raise ValueError(f"state shapes differ at step {j}: {xh.shape} vs {x.shape}")
        out[j] = float(np.sum((x - xh) ** 2))
    return out


def mean_mse(estimates, truth, system: Optional[HybridSystem] = None, start: int = 0) -> float:
    """Time-averaged squared error ``(1/N) sum |x - x_hat|^2`` over steps ``start ..``."""
    err = squared_errors(estimates, truth, system)[start:]
    if err.size == 0:
        raise ValueError("empty averaging window")
    return float(np.mean(err))


def estimated_transition_time(records, initial_mode: int) -> float:
    """Time of the first record whose voted mode leaves ``initial_mode``; ``inf`` if none."""
    for r in records:
        if r.mode_hat != initial_mode:
            return float(r.t)
    return CENSORED


def transition_offset(records, truth: TruthTrajectory) -> float:
    """Estimated minus true first-transition time (``inf`` when never estimated, ``nan`` if no truth jump)."""
    t_true = truth.first_transition_time
    if not np.isfinite(t_true):
        return float("nan")
    t_est = estimated_transition_time(records, int(truth.modes[0]))
    return t_est - t_true if np.isfinite(t_est) else CENSORED


def offset_histogram(offsets, dt: float):
    """Counts of finite offsets in ``dt``-wide bins centred on multiples of ``dt``.

    Returns ``(centres, counts, n_censored)``.
    """
    off = np.asarray(offsets, dtype=float)
    off = off[~np.isnan(off)]
    finite = off[np.isfinite(off)]
    n_cens = int(np.sum(~np.isfinite(off)))
    if finite.size == 0:
        return np.zeros(0), np.zeros(0, dtype=int), n_cens
    idx = np.rint(finite / dt).astype(int)
    lo, hi = idx.min(), idx.max()
    counts = np.bincount(idx - lo, minlength=hi - lo + 1)
    return np.arange(lo, hi + 1) * dt, counts, n_cens


def mode_metrics(estimates, truths, dt: Optional[float] = None):
    """Trial-averaged mode accuracy series plus transition-offset histogram.

    ``estimates`` and ``truths`` are parallel lists (one record list and one
    :class:`TruthTrajectory` per trial) on a common grid.  Returns
    ``(accuracy, offsets, (centres, counts, n_censored))``; offsets of trials
    whose estimate never transitions are the sentinel ``inf``.
    """
    if len(estimates) != len(truths) or not truths:
        raise ValueError("need one truth per estimate list")
    correct = []
    for recs, tr in zip(estimates, truths):
        modes = np.array([r.mode_hat for r in recs])
        if modes.size != tr.modes.size - 1:
            raise ValueError("estimates and truth are on different grids")
        correct.append(modes == tr.modes[1:])
    lengths = {c.size for c in correct}
    if len(lengths) != 1:
        raise ValueError("trials do not share a time grid")
    offsets = np.array([transition_offset(r, t) for r, t in zip(estimates, truths)])
    if dt is None:
        dt = float(truths[0].times[1] - truths[0].times[0])
    return np.mean(correct, axis=0), offsets, offset_histogram(offsets, dt)


# ---------------------------------------------------------------------------
# trials

@dataclass
class AlgorithmResult:
    status: str  # ok | failed
    mse_post: float = float("nan")
    mse_full: float = float("nan")
    offset: float = float("nan")
    sq_err: Optional[np.ndarray] = None
    esse: Optional[np.ndarray] = None
    mode_correct: Optional[np.ndarray] = None
    records: Optional[list] = None
    message: str = ""


@dataclass
class TrialResult:
    value: object
    trial: int
    truth_ok: bool
    transition_time: float = float("nan")
    truth_hash: str = ""
    results: dict = field(default_factory=dict)
    message: str = ""


def _seed(cfg: ExperimentConfig, stream: int, trial: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([cfg.filter.seed, stream, trial])


def truth_hash(truth: TruthTrajectory) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(truth.times).tobytes())
    for x in truth.states:
        h.update(np.ascontiguousarray(x).tobytes())
    h.update(np.ascontiguousarray(truth.modes).tobytes())
    h.update(np.ascontiguousarray(truth.measurements.dY).tobytes())
    return h.hexdigest()


def simulate_trial(cfg: ExperimentConfig, trial: int, dt: Optional[float] = None) -> TruthTrajectory:
    """Ground truth for ``trial``; the same seed stream serves every sweep value."""
    dt = cfg.filter.dt if dt is None else dt
    system = build_system(cfg)
    rng = np.random.default_rng(_seed(cfg, TRUTH_STREAM, trial))
    X, modes = cfg.truth.sample(rng, 1, cfg.truth.means[0].size)
    x0 = HybridState(int(modes[0]), X[0][: system.modes[int(modes[0])].state_dim])
    return simulate_truth(system, x0, cfg.T, dt, rng)


def _belief(fcfg: FilterConfig) -> GaussianBelief:
    prior = fcfg.prior
    c = int(np.argmax(prior.weights))
    return GaussianBelief(prior.means[c], prior.covs[c], int(prior.modes[c]))


def run_algorithm(name: str, system: HybridSystem, truth: TruthTrajectory, fcfg: FilterConfig) -> list:
    meas = truth.measurements
    if name == "spipf":
        return run(system, meas, fcfg)
    if name == "spipf0":
        return spipf_zero_control(system, meas, fcfg)
    if name == "sir":
        return run_sir(system, meas, fcfg)
    if name == "skf":
        return run_skf(system, meas, _belief(fcfg), epsilon=fcfg.epsilon)
    raise ConfigError(f"unknown algorithm {name!r}")


def _evaluate(system, truth, records) -> AlgorithmResult:
    sq = squared_errors(records, truth, system)
    s = truth.transition_steps[0][0] if truth.transition_steps else None
    post = float(np.mean(sq[s - 1:])) if s is not None else float("nan")
    return AlgorithmResult(
        "ok", mse_post=post, mse_full=float(np.mean(sq)), offset=transition_offset(records, truth),
        sq_err=sq, esse=np.array([r.esse for r in records]),
        mode_correct=np.array([r.mode_hat for r in records]) == truth.modes[1:], records=records,
    )


def run_trial(cfg: ExperimentConfig, value, trial: int) -> TrialResult:
    """Simulate one truth and run every configured algorithm on it."""
    fcfg = replace(cfg.filter_for(value), seed=int(_seed(cfg, FILTER_STREAM, trial).generate_state(1)[0]))
    try:
        truth = simulate_trial(cfg, trial, dt=fcfg.dt)
    except TRIAL_FAILURES as exc:
        return TrialResult(value, trial, False, message=f"truth: {type(exc).__name__}: {exc}")
    digest = truth_hash(truth)
    out = TrialResult(value, trial, True, truth.first_transition_time, digest)
    system = build_system(cfg)
    for name in cfg.algorithms:
        if truth_hash(truth) != digest:
            raise RuntimeError("truth trajectory was modified by an algorithm")
        try:
            records = run_algorithm(name, system, truth, fcfg)
            out.results[name] = _evaluate(system, truth, records)
        except TRIAL_FAILURES as exc:
            log.debug("trial %d %s failed: %s", trial, name, exc)
            out.results[name] = AlgorithmResult("failed", message=f"{type(exc).__name__}: {exc}")
    return out


# ---------------------------------------------------------------------------
# aggregation

@dataclass
class MetricsSummary:
    """Aggregates keyed by ``(sweep value, algorithm)``.

    ``rows`` mirrors summary.csv, ``series`` holds trial-averaged curves on
    the shared grid ``times[value]`` and ``offsets`` the per-trial transition
    offsets (``inf`` when censored).
    """

    sweep_name: str
    rows: list
    trials: list
    times: dict
    series: dict
    offsets: dict

    def row(self, value, algorithm: str) -> dict:
        for r in self.rows:
            if r["sweep_value"] == value and r["algorithm"] == algorithm:
                return r
        raise KeyError((value, algorithm))


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _write_csv(path: Path, header, rows) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(r[h]) for h in header])


TRIAL_COLUMNS = ["sweep_name", "sweep_value", "trial", "algorithm", "status", "mse", "mse_post",
                 "mse_full", "transition_offset", "true_transition_time", "truth_hash", "message"]
SUMMARY_COLUMNS = ["sweep_name", "sweep_value", "algorithm", "n_trials", "failed_trials",
                   "dropped_trials", "retained_trials", "mean_mse", "mse_covariance",
                   "mode_within_band", "min_mean_esse"]
SERIES_COLUMNS = ["t", "esse_mean", "mode_accuracy", "mse_mean", "mse_std"]


def _reduce(cfg: ExperimentConfig, results: list) -> MetricsSummary:
    trials, rows, series, offsets, times = [], [], {}, {}, {}
    for value in cfg.sweep_values:
        dt = cfg.filter_for(value).dt
        L = int(round(cfg.T / dt))
        times[value] = dt * np.arange(1, L + 1)
        by_trial = [r for r in results if r.value == value]
        for name in cfg.algorithms:
            mses, kept, offs = [], [], []
            n_failed = n_dropped = 0
            for tr in by_trial:
                row = {"sweep_name": cfg.sweep_name, "sweep_value": value, "trial": tr.trial,
                       "algorithm": name, "status": "failed", "mse": float("nan"),
                       "mse_post": float("nan"), "mse_full": float("nan"),
                       "transition_offset": float("nan"), "true_transition_time": tr.transition_time,
                       "truth_hash": tr.truth_hash, "message": tr.message}
                res = tr.results.get(name)
                if res is None or res.status != "ok":
                    n_failed += 1
                    if res is not None:
                        row["message"] = res.message
                    trials.append(row)
                    continue
                mse = res.mse_post if cfg.mse_window == "post_transition" else res.mse_full
                row.update(mse=mse, mse_post=res.mse_post, mse_full=res.mse_full,
                           transition_offset=res.offset)
                if not np.isfinite(mse):
                    row["status"] = "no_transition"
                elif cfg.mse_threshold is not None and mse > cfg.mse_threshold:
                    row["status"] = "dropped"
                    n_dropped += 1
                else:
                    row["status"] = "ok"
                    mses.append(mse)
                    kept.append(res)
                    offs.append(res.offset)
                trials.append(row)
            n = len(by_trial)
            m = np.array(mses)
            off = np.array(offs)
            judged = off[~np.isnan(off)]
            within = float(np.mean(np.abs(judged) <= MODE_BAND + 1e-9)) if judged.size else float("nan")
            if kept:
                esse = np.mean([k.esse for k in kept], axis=0)
                acc = np.mean([k.mode_correct for k in kept], axis=0)
                sq = np.array([k.sq_err for k in kept])
                series[(value, name)] = {"t": times[value], "esse_mean": esse, "mode_accuracy": acc,
                                         "mse_mean": sq.mean(axis=0), "mse_std": sq.std(axis=0)}
            offsets[(value, name)] = off
            rows.append({
                "sweep_name": cfg.sweep_name, "sweep_value": value, "algorithm": name, "n_trials": n,
                "failed_trials": n_failed, "dropped_trials": n_dropped, "retained_trials": m.size,
                "mean_mse": float(m.mean()) if m.size else float("nan"),
                "mse_covariance": float(m.var()) if m.size else float("nan"),
                "mode_within_band": within,
                "min_mean_esse": float(series[(value, name)]["esse_mean"].min()) if kept else float("nan"),
            })
    return MetricsSummary(cfg.sweep_name, rows, trials, times, series, offsets)


def _tag(name: str, value) -> str:
    return f"{name}{value:g}"


def write_outputs(cfg: ExperimentConfig, summary: MetricsSummary, results: list) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "trials.csv", TRIAL_COLUMNS, summary.trials)
    _write_csv(out / "summary.csv", SUMMARY_COLUMNS, summary.rows)
    for (value, name), s in summary.series.items():
        n = s["t"].size
        _write_csv(out / f"series_{_tag(cfg.sweep_name, value)}_{name}.csv", SERIES_COLUMNS,
                   [{k: float(s[k][i]) for k in SERIES_COLUMNS} for i in range(n)])
    for (value, name), off in summary.offsets.items():
        centres, counts, n_cens = offset_histogram(off, cfg.filter_for(value).dt)
        rows = [{"offset": float(c), "count": int(k)} for c, k in zip(centres, counts)]
        rows.append({"offset": CENSORED, "count": n_cens})
        _write_csv(out / f"histogram_{_tag(cfg.sweep_name, value)}_{name}.csv", ["offset", "count"], rows)
    for tr in results:
        d = out / "estimates" / _tag(cfg.sweep_name, tr.value)
        for name, res in tr.results.items():
            if res.records is not None:
                d.mkdir(parents=True, exist_ok=True)
                records_to_csv(res.records, d / f"{name}_trial{tr.trial:03d}.csv")
    return out


def run_experiment(cfg: ExperimentConfig, workers: Optional[int] = None, write: bool = True) -> MetricsSummary:
    """Run every (sweep value, trial) pair, reduce, and write CSVs to ``cfg.output_dir``.

    Raises :class:`ExperimentError` (after writing) when more than half of the
    trials of any algorithm failed.
    """
    workers = cfg.workers if workers is None else workers
    jobs = [(v, k) for v in cfg.sweep_values for k in range(cfg.n_trials)]
    if workers == 1:
        results = [run_trial(cfg, v, k) for v, k in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_trial, [cfg] * len(jobs), *zip(*jobs)))
    summary = _reduce(cfg, results)
    if write:
        write_outputs(cfg, summary, results)
    bad = [f"{r['algorithm']}@{_tag(cfg.sweep_name, r['sweep_value'])}: {r['failed_trials']}/{r['n_trials']}"
           for r in summary.rows if r["failed_trials"] > 0.5 * r["n_trials"]]
    if bad:
        raise ExperimentError("more than half of the trials failed for " + ", ".join(bad))
    return summary
