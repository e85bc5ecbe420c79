"""Monte-Carlo experiment runner, suites and report emission."""

import configparser
import csv
import io
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from .attacks import AttackKind, AttackParams, PayloadAttack, orthogonal_attack
from .errors import ByzFedError, ConfigInvalid, UnknownSuite
from .estimators import (
    EstimatorConfig,
    federated_power_method_baseline,
    federated_subspace_median,
    res_pow_meth,
    subspace_mom,
    svd_res_cov_est,
)
from .fed import FederationConfig, spread_byzantine_ids
from .linalg import sd_2, sd_F, topr_eig
from .pca import estimate_pca_params, generate_pca_model, node_covariance, node_operators, sample_shards

CSV_COLUMNS = (
    "experiment", "estimator", "attack", "n", "r", "q", "L", "L_byz", "L_tilde",
    "T_pow", "T_gm", "max_sdf", "mean_sdf", "mean_time_s", "runs", "seed",
)

PCA_ESTIMATORS = ("subsmed", "respowmeth", "subsmom", "svd_rescov", "baseline")
LRCS_ESTIMATORS = ("init_median", "init_mom", "altgdmin_median", "altgdmin_mom", "altgdmin_baseline")

WORKERS_ENV = "BYZFED_WORKERS"


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str = "pca"  # pca | lrcs
    label: str = ""  # value of the CSV ``experiment`` column; defaults to ``experiment``
    estimators: Tuple[str, ...] = ("subsmed",)
    attack: str = "none"
    n: int = 200
    r: int = 10
    q: int = 360
    L: int = 3
    L_byz: int = 0
    L_tilde: Optional[int] = None
    T_pow: int = 10
    T_gm: int = 10
    spectrum: str = "low_rank_15"
    # lrcs only
    m: int = 198
    gd_iterations: int = 400
    eta: str = "oracle"  # oracle: 0.5 / sigma*_max^2, estimated: 0.5 / sigma_hat_max^2
    rev_multiplier: float = 10.0
    eps: Optional[float] = 1e-12
    sample_splitting: bool = False
    # harness
    runs: int = 100
    seed: int = 0
    timing: str = "off"  # off: time columns are 0 so reports are byte-reproducible
    output: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "estimators", tuple(self.estimators))
        if self.experiment not in ("pca", "lrcs"):
            raise ConfigInvalid(f"experiment must be pca or lrcs, got {self.experiment!r}")
        known = PCA_ESTIMATORS if self.experiment == "pca" else LRCS_ESTIMATORS
        bad = [e for e in self.estimators if e not in known]
        if bad or not self.estimators:
            raise ConfigInvalid(f"unknown estimators {bad} for {self.experiment}; choose from {known}")
        try:
            AttackKind.parse(self.attack)
        except ValueError as exc:
            raise ConfigInvalid(str(exc)) from None
        if self.runs < 1:
            raise ConfigInvalid("runs must be >= 1")
        if self.timing not in ("off", "wall"):
            raise ConfigInvalid("timing must be off or wall")
        if self.eta not in ("oracle", "estimated"):
            raise ConfigInvalid("eta must be oracle or estimated")
        if min(self.n, self.r, self.q, self.L, self.T_pow, self.T_gm) < 1 or self.L_byz < 0:
            raise ConfigInvalid("dimensions and iteration counts must be positive")
        FederationConfig(self.L, spread_byzantine_ids(self.L, self.L_byz), self.L_tilde)
        divisor = self.m if self.experiment == "lrcs" else self.q
        if divisor % self.L:
            raise ConfigInvalid(f"L={self.L} must divide {'m' if self.experiment == 'lrcs' else 'q'}={divisor}")

    @property
    def attack_kind(self) -> AttackKind:
        return AttackKind.parse(self.attack)

    def federation(self, minibatches=None) -> FederationConfig:
        return FederationConfig(self.L, spread_byzantine_ids(self.L, self.L_byz), minibatches)


# |  config files  |

_BOOL = {"true": True, "false": False, "yes": True, "no": False, "1": True, "0": False}


def _coerce(name: str, raw: str):
    raw = raw.strip()
    if name == "estimators":
        return tuple(s.strip() for s in raw.replace(";", ",").split(",") if s.strip())
    kinds = {f.name: f.type for f in fields(ExperimentConfig)}
    kind = str(kinds[name])
    if raw.lower() in ("", "none", "null") and "Optional" in kind:
        return None
    try:
        if "bool" in kind:
            return _BOOL[raw.lower()]
        if "int" in kind:
            return int(raw)
        if "float" in kind:
            return float(raw)
    except (KeyError, ValueError):
        raise ConfigInvalid(f"bad value {raw!r} for {name}") from None
    return raw


def parse_config(text: str) -> ExperimentConfig:
    """Parse a ``key = value`` document (an optional ``[experiment]`` header is allowed)."""
    if not text.lstrip().startswith("["):
        text = "[experiment]\n" + text
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigInvalid(f"unreadable config: {exc}") from None
    if "experiment" not in parser:
        raise ConfigInvalid("missing [experiment] section")
    known = {f.name for f in fields(ExperimentConfig)}
    values = {}
    for key, raw in parser["experiment"].items():
        if key not in known:
            raise ConfigInvalid(f"unknown key {key!r}")
        values[key] = _coerce(key, raw)
    try:
        return ExperimentConfig(**values)
    except TypeError as exc:
        raise ConfigInvalid(str(exc)) from None


def load_config(path) -> ExperimentConfig:
    return parse_config(Path(path).read_text())


def format_config(cfg: ExperimentConfig) -> str:
    lines = ["[experiment]"]
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = ", ".join(v)
        lines.append(f"{f.name} = {'none' if v is None else v}")
    return "\n".join(lines) + "\n"


# |  records  |


@dataclass
class EstimatorRecord:
    estimator: str
    sdf: List[float] = field(default_factory=list)
    sd2: List[float] = field(default_factory=list)
    time_s: List[float] = field(default_factory=list)
    traces: List[List[float]] = field(default_factory=list)  # lrcs Error per iteration
    failures: List[dict] = field(default_factory=list)

    @property
    def max_sdf(self) -> float:
        return max(self.sdf) if self.sdf else math.nan

    @property
    def mean_sdf(self) -> float:
        return float(np.mean(self.sdf)) if self.sdf else math.nan

    @property
    def mean_time_s(self) -> float:
        return float(np.mean(self.time_s)) if self.time_s else math.nan


@dataclass
class ExperimentRecord:
    config: ExperimentConfig
    estimators: Dict[str, EstimatorRecord]

    def rows(self) -> List[dict]:
        c = self.config
        out = []
        for name in c.estimators:
            rec = self.estimators[name]
            mom = name in ("subsmom", "init_mom", "altgdmin_mom")
            out.append({
                "experiment": c.label or c.experiment,
                "estimator": name,
                "attack": "none" if name in ("baseline", "altgdmin_baseline") else c.attack_kind.value,
                "n": c.n, "r": c.r, "q": c.q, "L": c.L,
                "L_byz": 0 if name in ("baseline", "altgdmin_baseline") else c.L_byz,
                "L_tilde": (c.L_tilde or c.L) if mom else c.L,
                "T_pow": c.T_pow, "T_gm": c.T_gm,
                "max_sdf": rec.max_sdf, "mean_sdf": rec.mean_sdf, "mean_time_s": rec.mean_time_s,
                "runs": len(rec.sdf), "seed": c.seed,
            })
        return out


# |  single runs  |


def run_seed(base_seed: int, run: int) -> np.random.SeedSequence:
    """Per-run seed; independent of how many runs are requested."""
    return np.random.SeedSequence([int(base_seed), int(run)])


def _seed_int(ss: np.random.SeedSequence, salt: int = 0) -> int:
    return int(np.random.SeedSequence(ss.entropy, spawn_key=(salt,)).generate_state(1)[0])


def _pca_run(cfg: ExperimentConfig, run: int):
    ss = run_seed(cfg.seed, run)
    model = generate_pca_model(cfg.n, cfg.r, cfg.spectrum, seed=cfg.seed)
    shards = sample_shards(model, cfg.q, cfg.L, np.random.default_rng(_seed_int(ss, 1)))
    ops = node_operators(shards)
    u_rand = np.random.default_rng(_seed_int(ss, 2)).standard_normal((cfg.n, cfg.r))
    est = estimate_pca_params(shards, cfg.r)
    omega_pm = 1.1 * est.sigma_1_hat * math.sqrt(cfg.r)
    omega_med = math.sqrt(cfg.r)
    kind = cfg.attack_kind
    out = {}
    for name in cfg.estimators:
        ecfg = EstimatorConfig(cfg.r, t_pow=cfg.T_pow, t_gm=cfg.T_gm, omega=omega_pm, minibatches=cfg.L_tilde)
        seed = _seed_int(ss, 3)
        if name == "baseline":
            call = lambda: federated_power_method_baseline(ops, cfg.n, ecfg, u_rand, seed)
        elif name == "svd_rescov":
            mats = [node_covariance(D) for D in shards.shards]
            adv_mats = _attack_matrices(mats, cfg.federation(), kind, cfg.r)
            call = lambda: svd_res_cov_est(adv_mats, ecfg, seed)
        else:
            omega = omega_med if name == "subsmed" else omega_pm
            adv = None
            if kind is not AttackKind.NONE and cfg.L_byz:
                adv = PayloadAttack(kind, AttackParams.for_budget(omega, cfg.n, cfg.r, cfg.rev_multiplier))
            if name == "subsmed":
                fed = cfg.federation()
                call = lambda: federated_subspace_median(ops, cfg.n, ecfg, fed, adv, u_rand, seed)
            elif name == "respowmeth":
                fed = cfg.federation()
                call = lambda: res_pow_meth(ops, cfg.n, ecfg, fed, adv, u_rand, seed)
            else:
                fed = cfg.federation(cfg.L_tilde or cfg.L)
                call = lambda: subspace_mom(ops, cfg.n, ecfg, fed, adv, u_rand, seed)
        out[name] = _timed(call, lambda e: (sd_F(model.u_star, e.basis), sd_2(model.u_star, e.basis), None))
    return out


def _attack_matrices(mats, fed, kind, r):
    """Byzantine replacements for the covariance-sharing estimator.

    The budget is 0.9 times the largest honest Frobenius norm; the
    orthogonal variant is a scaled projector onto r directions orthogonal
    to the honest sum's top-r eigenspace.
    """
    if kind is AttackKind.NONE or not fed.byzantine_ids:
        return mats
    n = mats[0].shape[0]
    honest = [M for i, M in enumerate(mats) if i not in fed.byzantine_ids]
    budget = 0.9 * max(np.linalg.norm(M) for M in honest)
    if kind is AttackKind.ORTHOGONAL:
        U = orthogonal_attack(topr_eig(sum(honest), r), 1.0) * math.sqrt(r)
        bad = U @ U.T
    elif kind is AttackKind.ALTERNATING:
        i = np.arange(n)
        bad = np.where((i[:, None] + i[None, :]) % 2 == 0, 1.0, -1.0)
    else:
        bad = -np.ones((n, n))
    bad = budget * bad / np.linalg.norm(bad)
    return [bad if i in fed.byzantine_ids else M for i, M in enumerate(mats)]


def _lrcs_run(cfg: ExperimentConfig, run: int):
    from .lrcs import (
        GdConfig,
        InitConfig,
        altgdmin_plain,
        byz_altgdmin,
        default_omega,
        generate_lrcs_instance,
        generate_lrcs_truth,
        spectral_init_median,
        spectral_init_mom,
    )

    ss = run_seed(cfg.seed, run)
    truth = generate_lrcs_truth(cfg.n, cfg.q, cfg.r, cfg.seed)
    inst = generate_lrcs_instance(cfg.n, cfg.q, cfg.r, cfg.m, cfg.L, _seed_int(ss, 1), truth)
    kind = cfg.attack_kind
    adv = None
    if kind is not AttackKind.NONE and cfg.L_byz:
        adv = PayloadAttack(kind, AttackParams(1.0, 1.0, cfg.rev_multiplier))
    seed = _seed_int(ss, 3)
    out = {}
    for name in cfg.estimators:
        mom = name.endswith("_mom")
        nb = (cfg.L_tilde or cfg.L) if mom else None
        icfg = InitConfig(cfg.r, t_pow=cfg.T_pow, t_gm=cfg.T_gm, minibatches=nb)
        if name.startswith("init_"):
            fn = spectral_init_mom if mom else spectral_init_median
            fed = cfg.federation(nb)
            call = lambda: fn(inst, icfg, fed, adv, seed)
            metric = lambda res: (sd_F(inst.u_star, res.estimate.basis), None, None)
        else:
            gcfg = GdConfig(
                eta=1.0, iterations=cfg.gd_iterations, t_gm=cfg.T_gm, minibatches=nb,
                sample_splitting=cfg.sample_splitting, eps=cfg.eps,
            )

            def tune(init, g, nb=nb):
                # eta and omega from the initialization's node estimates
                sigma = inst.sigma_max if cfg.eta == "oracle" else init.sigma_hat
                rho = cfg.L // nb if nb else 1
                omega = default_omega(inst.m_tilde, cfg.r, init.kappa_hat, init.sigma_hat, rho)
                return replace(g, eta=0.5 / sigma**2, omega=omega)

            if name == "altgdmin_baseline":
                call = lambda icfg=icfg, gcfg=gcfg, tune=tune: altgdmin_plain(inst, icfg, gcfg, seed, tune)
            else:
                call = lambda icfg=icfg, gcfg=gcfg, tune=tune: byz_altgdmin(
                    inst, icfg, gcfg, cfg.federation(), adv, adv, seed, tune
                )
            metric = lambda res: (sd_F(inst.u_star, res.state.u), None, [float(x) for x in res.trace])
        out[name] = _timed(call, metric)
    return out


def _timed(call, metric):
    try:
        t0 = time.perf_counter()
        res = call()
        dt = time.perf_counter() - t0
    except ByzFedError as exc:
        return {"error": f"{type(exc).__name__}: {exc}"}
    sdf, s2, trace = metric(res)
    return {"sdf": float(sdf), "sd2": None if s2 is None else float(s2), "time": dt, "trace": trace}


def run_single(cfg: ExperimentConfig, run: int) -> dict:
    return (_pca_run if cfg.experiment == "pca" else _lrcs_run)(cfg, run)


def _worker(args):
    cfg, run = args
    return run_single(cfg, run)


def workers_from_env() -> int:
    raw = os.environ.get(WORKERS_ENV, "1").strip()
    try:
        w = int(raw)
    except ValueError:
        raise ConfigInvalid(f"{WORKERS_ENV} must be an integer, got {raw!r}") from None
    return max(1, w)


def run_experiment(cfg: ExperimentConfig, workers: Optional[int] = None, progress=None) -> ExperimentRecord:
    """Run ``cfg.runs`` Monte-Carlo repetitions and aggregate per estimator.

    Run ``i`` draws everything from ``SeedSequence([seed, i])``, so results
    do not depend on the run count or on the number of worker processes.
    Failures of a single estimator in a single run are recorded and
    skipped in the aggregates.
    """
    workers = workers or workers_from_env()
    jobs = [(cfg, i) for i in range(cfg.runs)]
    if workers > 1 and cfg.runs > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_worker, jobs))
    else:
        results = []
        for job in jobs:
            results.append(_worker(job))
            if progress:
                progress(job[1] + 1, cfg.runs)
    recs = {name: EstimatorRecord(name) for name in cfg.estimators}
    for i, res in enumerate(results):
        for name, r in res.items():
            rec = recs[name]
            if "error" in r:
                rec.failures.append({"run": i, "error": r["error"]})
                continue
            rec.sdf.append(r["sdf"])
            if r["sd2"] is not None:
                rec.sd2.append(r["sd2"])
            rec.time_s.append(r["time"] if cfg.timing == "wall" else 0.0)
            if r["trace"] is not None:
                rec.traces.append(r["trace"])
    record = ExperimentRecord(cfg, recs)
    if cfg.output:
        emit_report(record, cfg.output, "csv")
        emit_report(record, str(Path(cfg.output).with_suffix(".json")), "json")
    return record


# |  reports  |


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v) if math.isfinite(v) else "nan"
    return str(v)


def records_to_csv(records) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for rec in records:
        for row in rec.rows():
            w.writerow([_fmt(row[c]) for c in CSV_COLUMNS])
    return buf.getvalue()


def record_to_json(record: ExperimentRecord) -> dict:
    cfg = asdict(record.config)
    cfg["estimators"] = list(record.config.estimators)
    out = {"config": cfg, "time_units": "seconds, estimator call only" if record.config.timing == "wall" else "off", "results": []}
    for row in record.rows():
        rec = record.estimators[row["estimator"]]
        entry = dict(row)
        entry["per_run"] = {"sdf": rec.sdf, "time_s": rec.time_s}
        if rec.sd2:
            entry["per_run"]["sd2"] = rec.sd2
        if rec.traces:
            entry["trace"] = rec.traces
        if rec.failures:
            entry["failures"] = rec.failures
        out["results"].append(entry)
    return out


def record_from_json(doc: dict) -> ExperimentRecord:
    cfg = dict(doc["config"])
    cfg["estimators"] = tuple(cfg["estimators"])
    config = ExperimentConfig(**cfg)
    recs = {}
    for entry in doc["results"]:
        pr = entry["per_run"]
        recs[entry["estimator"]] = EstimatorRecord(
            entry["estimator"], list(pr["sdf"]), list(pr.get("sd2", [])), list(pr["time_s"]),
            entry.get("trace", []), entry.get("failures", []),
        )
    return ExperimentRecord(config, recs)


def emit_report(record, path, fmt: str = "csv") -> Path:
    """Write one record (or a list of records, csv only) as CSV or JSON."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if fmt == "csv":
        records = record if isinstance(record, list) else [record]
        path.write_text(records_to_csv(records))
    elif fmt == "json":
        path.write_text(json.dumps(record_to_json(record), indent=1, allow_nan=True) + "\n")
    else:
        raise ConfigInvalid(f"unknown report format {fmt!r}")
    return path


# |  suites  |

PCA_ATTACKS = ("alternating", "ones", "orthogonal")


def _desk_q(q: int, n: int, L: int, desk_n: int = 200) -> int:
    qd = max(L, int(round(q * desk_n / n)))
    return qd - qd % L


def table_suite(name: str, scale: str = "desk", runs: Optional[int] = None, seed: int = 0) -> List[ExperimentConfig]:
    """Parameter grids of the PCA tables and the LRCS figure.

    ``full`` keeps the published dimensions (100 runs); ``desk`` uses
    n=200, r=min(r, 10) and q scaled by 200/n (50 runs).
    """
    if scale not in ("full", "desk"):
        raise ConfigInvalid(f"scale must be full or desk, got {scale!r}")
    runs = runs or (100 if scale == "full" else 50)

    def pca(label, n, r, q, L, L_byz, spectrum="low_rank_15", T_pow=10, L_tilde=None, with_mom=False):
        if scale == "desk":
            q = _desk_q(q, n, L)
            n, r = 200, min(r, 10)
        ests = ("subsmom", "subsmed", "respowmeth") if with_mom else ("subsmed", "respowmeth")
        out = [
            ExperimentConfig("pca", label, ests, atk, n, r, q, L, L_byz, L_tilde, T_pow, 10, spectrum,
                             runs=runs, seed=seed)
            for atk in PCA_ATTACKS
        ]
        out.append(ExperimentConfig("pca", label, ("baseline",), "none", n, r, q, L, 0, None, T_pow, 10,
                                    spectrum, runs=runs, seed=seed))
        return out

    if name == "exp1":
        cfgs = pca("exp1", 1000, 60, 1800, 3, 1, "full_rank_15")
        for tp in (10, 1):
            cfgs += pca("exp1", 1000, 60, 1800, 3, 1, "low_rank_15", T_pow=tp)
        return cfgs
    if name == "exp2":
        cfgs = []
        for r, q, L, Lb in ((2, 360, 3, 1), (2, 720, 6, 2), (60, 3600, 6, 2)):
            for tp in (10, 1):
                cfgs += pca("exp2", 1000, r, q, L, Lb, T_pow=tp)
        return cfgs
    if name == "mom1":
        cfgs = []
        for Lb in (2, 4):
            cfgs += pca("mom1", 1000, 60, 3600, 18, Lb, L_tilde=6, with_mom=True)
        return cfgs
    if name == "lrcs_fig":
        n, q, r, m = (600, 600, 4, 198) if scale == "full" else (200, 200, 4, 198)
        ests = ("init_median", "init_mom", "altgdmin_median", "altgdmin_mom")
        cfgs = [
            ExperimentConfig("lrcs", "lrcs_fig", ests, "reverse_gradient", n, r, q, 18, Lb, 6, 10, 10,
                             m=m, runs=runs, seed=seed)
            for Lb in (1, 2)
        ]
        cfgs.append(ExperimentConfig("lrcs", "lrcs_fig", ("altgdmin_baseline",), "none", n, r, q, 18, 0, None,
                                     10, 10, m=m, runs=runs, seed=seed))
        return cfgs
    raise UnknownSuite(f"unknown suite {name!r}; choose exp1, exp2, mom1 or lrcs_fig")
