"""Monte Carlo coverage studies over simulated twin datasets."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import partial
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, TwinAceError
from .estimators import Estimator, FitOptions, fit, fit_with_variance_covariates
from .moments import CorrLink, VarianceLink
from .simulate import ScenarioConfig, level_profiles, simulate, truth

log = logging.getLogger(__name__)

COVARIATE_SCENARIOS = {
    "sex_normal": (["sex"], []),
    "age_falconer": (["age"], ["age"]),
}


@dataclass(frozen=True)
class ContrastSpec:
    """Wald test of quantity(level_a) - quantity(level_b) = 0 at ``level``."""

    level_a: str
    level_b: str
    quantity: str = "h2"
    alpha: float = 0.05


@dataclass(frozen=True)
class StudyConfig:
    scenario: ScenarioConfig
    estimators: tuple[str, ...] = ("NACE", "GEE2-NACE", "Falconer", "GEE2-Falconer")
    replicates: int = 1000
    parallelism: int = 1
    centering: str | None = "per_zygosity"
    var_link: str = "identity"
    corr_link: str = "identity"
    falconer_se_n: str = "group"
    truth: tuple[float, float] | None = None
    contrast: ContrastSpec | None = None

    def __post_init__(self):
        if self.replicates < 1:
            raise ConfigError("replicates must be >= 1")
        if self.parallelism < 1:
            raise ConfigError("parallelism must be >= 1")
        ests = tuple(Estimator.parse(e).value for e in self.estimators)
        object.__setattr__(self, "estimators", ests)
        if self.scenario.scenario in COVARIATE_SCENARIOS:
            bad = [e for e in ests if e not in ("GEE2-NACE", "GEE2-Falconer")]
            if bad:
                raise ConfigError(f"estimators {bad} cannot model variance covariates in {self.scenario.scenario}")
        if self.truth is not None:
            if len(self.truth) != 2 or not all(math.isfinite(v) for v in self.truth):
                raise ConfigError("truth must be two finite proportions (h2, c2)")
        if self.contrast is not None:
            labels = level_profiles(self.scenario)
            for lab in (self.contrast.level_a, self.contrast.level_b):
                if lab not in labels:
                    raise ConfigError(f"contrast level {lab!r} not among {list(labels)}")

    @property
    def options(self) -> FitOptions:
        return FitOptions(
            VarianceLink(self.var_link), CorrLink(self.corr_link), self.centering, falconer_se_n=self.falconer_se_n
        )

    @classmethod
    def from_dict(cls, d: dict) -> "StudyConfig":
        d = dict(d)
        scenario = d.pop("scenario")
        if isinstance(scenario, str):
            scenario = {"scenario": scenario}
        scenario = dict(scenario)
        for key in ("n_mz", "n_dz", "seed", "df", "lam", "lambda"):
            if key in d:
                scenario[key] = d.pop(key)
        d["scenario"] = ScenarioConfig.from_dict(scenario)
        if "estimators" in d:
            d["estimators"] = tuple(d["estimators"])
        if d.get("truth") is not None:
            d["truth"] = tuple(d["truth"])
        if d.get("contrast") is not None:
            d["contrast"] = ContrastSpec(**d["contrast"])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown study keys {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "StudyConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class SummaryRow:
    estimator: str
    level: str
    true_h2: float
    true_c2: float
    mean_h2: float
    mean_c2: float
    true_se_h2: float | None
    true_se_c2: float | None
    mean_se_h2: float
    mean_se_c2: float
    coverage_h2: float
    coverage_c2: float
    sem_h2: float | None
    sem_c2: float | None
    n_ok: int
    n_failed: int


@dataclass
class ContrastSummary:
    estimator: str
    quantity: str
    level_a: str
    level_b: str
    mean_estimate: float
    mean_se: float
    rejection_rate: float
    n_ok: int


@dataclass
class StudySummary:
    rows: list[SummaryRow]
    replicates: int
    records: list[dict] = field(default_factory=list)
    contrasts: list[ContrastSummary] = field(default_factory=list)
    contrast_records: list[dict] = field(default_factory=list)

    def row(self, estimator: str, level: str = "all") -> SummaryRow:
        estimator = Estimator.parse(estimator).value
        for r in self.rows:
            if r.estimator == estimator and r.level == level:
                return r
        raise KeyError((estimator, level))

    def to_csv(self) -> str:
        return _csv(SUMMARY_COLUMNS, [_row_dict(r) for r in self.rows])

    def records_csv(self) -> str:
        return _csv(RECORD_COLUMNS, self.records)

    def contrasts_csv(self) -> str:
        cols = list(ContrastSummary.__dataclass_fields__)
        return _csv(cols, [c.__dict__ for c in self.contrasts])

    def age_profile_csv(self) -> str:
        """Mean h2, c2, e2 with mean 95% CI bounds per level, for profile plots."""
        rows = []
        for r in self.rows:
            sub = [x for x in self.records if x["estimator"] == r.estimator and x["level"] == r.level and x["converged"]]
            for q in ("h2", "c2", "e2"):
                if not sub:
                    continue
                est = np.mean([x[q] for x in sub])
                se = np.mean([x[f"se_{q}"] for x in sub])
                rows.append(
                    {"estimator": r.estimator, "level": r.level, "quantity": q, "estimate": est,
                     "ci_lower": est - 1.96 * se, "ci_upper": est + 1.96 * se}
                )
        return _csv(["estimator", "level", "quantity", "estimate", "ci_lower", "ci_upper"], rows)

    def to_markdown(self) -> str:
        head = "| Model | Level | mean h2 (SE, mean SE) | mean c2 (SE, mean SE) | Coverage (h2, c2) | failed |"
        lines = [head, "|---|---|---|---|---|---|"]
        for r in self.rows:
            lines.append(
                f"| {r.estimator} | {r.level} | {r.mean_h2:.2f} ({_f2(r.true_se_h2)}, {r.mean_se_h2:.2f}) "
                f"| {r.mean_c2:.2f} ({_f2(r.true_se_c2)}, {r.mean_se_c2:.2f}) "
                f"| ({r.coverage_h2:.2f}, {r.coverage_c2:.2f}) | {r.n_failed} |"
            )
        for c in self.contrasts:
            lines.append("")
            lines.append(
                f"Wald contrast {c.estimator} {c.quantity}[{c.level_a}] - {c.quantity}[{c.level_b}]: "
                f"mean {c.mean_estimate:.4f}, mean SE {c.mean_se:.4f}, rejection rate {c.rejection_rate:.3f} "
                f"({c.n_ok} fits)"
            )
        return "\n".join(lines) + "\n"


SUMMARY_COLUMNS = list(SummaryRow.__dataclass_fields__)
RECORD_COLUMNS = [
    "replicate", "estimator", "level", "h2", "c2", "e2", "se_h2", "se_c2", "se_e2",
    "cover_h2", "cover_c2", "converged",
]


def _f2(x):
    return "NA" if x is None else f"{x:.2f}"


def _fmt(v):
    if v is None:
        return "NA"
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return "NA" if not math.isfinite(v) else f"{float(v):.6g}"
    return str(v)


def _csv(columns, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r.get(c)) for c in columns])
    return buf.getvalue()


def _row_dict(r: SummaryRow) -> dict:
    return dict(r.__dict__)


def covers(truth_value: float, estimate: float, se: float) -> bool:
    return estimate - 1.96 * se <= truth_value <= estimate + 1.96 * se


def run_replicate(config: StudyConfig, replicate: int) -> tuple[list[dict], list[dict]]:
    """Simulate one dataset and fit every estimator on it."""
    data = simulate(config.scenario, replicate)
    truths = truth(config.scenario, data)
    if config.truth is not None and list(truths) == ["all"]:
        truths = {"all": tuple(config.truth)}
    profiles = level_profiles(config.scenario)
    records, contrasts = [], []
    options = config.options
    cov_spec = COVARIATE_SCENARIOS.get(config.scenario.scenario)

    for name in config.estimators:
        est = Estimator.parse(name)
        try:
            if cov_spec is None:
                res = fit(data, est, options)
                ok = res.converged
                levels = {"all": res}
            else:
                covs, quad = cov_spec
                res = fit_with_variance_covariates(
                    data, est, covs, options, quadratic=quad, levels=list(profiles.values())
                )
                ok = res.converged
                levels = {lab: res.at(prof) for lab, prof in profiles.items()}
        except (TwinAceError, np.linalg.LinAlgError, FloatingPointError) as exc:
            log.debug("replicate %d %s failed: %s", replicate, name, exc)
            ok, levels, res = False, {lab: None for lab in truths}, None

        for lab, lv in levels.items():
            h2_true, c2_true = truths[lab]
            if lv is None or not ok:
                records.append({"replicate": replicate, "estimator": est.value, "level": lab, "converged": False})
                continue
            p = lv.proportions
            records.append(
                {
                    "replicate": replicate, "estimator": est.value, "level": lab,
                    "h2": p.h2, "c2": p.c2, "e2": p.e2,
                    "se_h2": lv.se_h2, "se_c2": lv.se_c2, "se_e2": lv.se_e2,
                    "cover_h2": covers(h2_true, p.h2, lv.se_h2),
                    "cover_c2": covers(c2_true, p.c2, lv.se_c2),
                    "converged": True,
                }
            )
        if config.contrast is not None and cov_spec is not None:
            c = config.contrast
            rec = {"replicate": replicate, "estimator": est.value, "converged": bool(ok)}
            if ok:
                w = res.contrast(c.quantity, profiles[c.level_a], profiles[c.level_b])
                rec.update(estimate=w.estimate, se=w.se, z=w.z, p=w.p, reject=w.p < c.alpha)
            contrasts.append(rec)
    return records, contrasts


def _summarize(config: StudyConfig, records: list[dict]) -> list[SummaryRow]:
    labels = list(level_profiles(config.scenario))
    rows = []
    for est in config.estimators:
        for lab in labels:
            sub = [r for r in records if r["estimator"] == est and r["level"] == lab]
            ok = [r for r in sub if r["converged"]]
            n_ok = len(ok)
            h2 = np.array([r["h2"] for r in ok])
            c2 = np.array([r["c2"] for r in ok])
            sd_h2 = float(np.std(h2, ddof=1)) if n_ok > 1 else None
            sd_c2 = float(np.std(c2, ddof=1)) if n_ok > 1 else None
            t_h2, t_c2 = _level_truth(config, lab)
            rows.append(
                SummaryRow(
                    estimator=est, level=lab, true_h2=t_h2, true_c2=t_c2,
                    mean_h2=float(h2.mean()) if n_ok else math.nan,
                    mean_c2=float(c2.mean()) if n_ok else math.nan,
                    true_se_h2=sd_h2, true_se_c2=sd_c2,
                    mean_se_h2=float(np.mean([r["se_h2"] for r in ok])) if n_ok else math.nan,
                    mean_se_c2=float(np.mean([r["se_c2"] for r in ok])) if n_ok else math.nan,
                    coverage_h2=float(np.mean([r["cover_h2"] for r in ok])) if n_ok else math.nan,
                    coverage_c2=float(np.mean([r["cover_c2"] for r in ok])) if n_ok else math.nan,
                    sem_h2=None if sd_h2 is None else sd_h2 / math.sqrt(n_ok),
                    sem_c2=None if sd_c2 is None else sd_c2 / math.sqrt(n_ok),
                    n_ok=n_ok, n_failed=len(sub) - n_ok,
                )
            )
    return rows


def _level_truth(config: StudyConfig, label: str) -> tuple[float, float]:
    if config.truth is not None and label == "all":
        return tuple(config.truth)
    # age truths depend on the sampled ages only through the centering mean
    return truth(config.scenario)[label]


def run_study(config: StudyConfig, progress=None) -> StudySummary:
    """Run every replicate and aggregate in replicate order."""
    worker = partial(run_replicate, config)
    idx = range(config.replicates)
    if config.parallelism > 1:
        with ProcessPoolExecutor(max_workers=config.parallelism) as pool:
            results = list(pool.map(worker, idx, chunksize=max(1, config.replicates // (8 * config.parallelism))))
    else:
        results = []
        for r in idx:
            results.append(worker(r))
            if progress:
                progress(r + 1, config.replicates)
    records = [rec for recs, _ in results for rec in recs]
    contrast_records = [rec for _, recs in results for rec in recs]
    summary = StudySummary(_summarize(config, records), config.replicates, records, [], contrast_records)
    if config.contrast is not None:
        c = config.contrast
        for est in config.estimators:
            ok = [r for r in contrast_records if r["estimator"] == est and r["converged"]]
            if not ok:
                continue
            summary.contrasts.append(
                ContrastSummary(
                    est, c.quantity, c.level_a, c.level_b,
                    float(np.mean([r["estimate"] for r in ok])),
                    float(np.mean([r["se"] for r in ok])),
                    float(np.mean([r["reject"] for r in ok])),
                    len(ok),
                )
            )
    return summary


def write_outputs(summary: StudySummary, outdir, prefix: str = "study", per_replicate: bool = True,
                  age_profile: bool = False) -> dict[str, Path]:
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    paths = {
        "markdown": outdir / f"{prefix}_summary.md",
        "csv": outdir / f"{prefix}_summary.csv",
    }
    paths["markdown"].write_text(summary.to_markdown())
    paths["csv"].write_text(summary.to_csv())
    if per_replicate:
        paths["replicates"] = outdir / f"{prefix}_replicates.csv"
        paths["replicates"].write_text(summary.records_csv())
    if summary.contrasts:
        paths["contrasts"] = outdir / f"{prefix}_contrasts.csv"
        paths["contrasts"].write_text(summary.contrasts_csv())
    if age_profile:
        paths["age_profile"] = outdir / f"{prefix}_profile.csv"
        paths["age_profile"].write_text(summary.age_profile_csv())
    return paths


# canned configurations for the four published simulation tables and the size check
PRESETS: dict[str, dict] = {
    "table1": {"scenario": {"scenario": "mvt", "df": 4.5}, "falconer_se_n": "total"},
    "table2": {"scenario": {"scenario": "blgp", "lam": 0.35}, "falconer_se_n": "total"},
    "table3": {"scenario": {"scenario": "unequal_var_normal"}, "estimators": ["NACE", "Falconer"]},
    "table4": {"scenario": {"scenario": "sex_normal", "n_mz": 450, "n_dz": 450},
               "estimators": ["GEE2-NACE", "GEE2-Falconer"]},
    "age_size": {"scenario": {"scenario": "age_falconer"}, "estimators": ["GEE2-Falconer"],
                 "contrast": {"level_a": "age=29", "level_b": "age=17", "quantity": "h2"}},
}


def preset(name: str, **overrides) -> StudyConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    d = json.loads(json.dumps(PRESETS[name]))
    scen = overrides.pop("scenario_overrides", {})
    d["scenario"].update(scen)
    d.update(overrides)
    return StudyConfig.from_dict(d)
