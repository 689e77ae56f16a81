"""Monte Carlo studies: simulate, fit every estimator, summarise.

Each replicate ``r`` draws its series from child stream ``r`` of the design
seed, so replicates can run in any order or process and the ledger
(``replicates.csv``) is the same.  Summaries are computed from the ledger
rows only, after they have been written and read back.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from pdcount.core import LEVELS, marginal_mean
from pdcount.errors import ConvergenceError, CovarianceError, DataError, DomainError, StudyError
from pdcount.estimators import MODELS, fmm_fit, glm_fit, hmm_fit
from pdcount.inference import ddw_moment_se, white_covariance
from pdcount.simulation import (
    AR1Family,
    CalibrationTarget,
    Covariate,
    FixedTransitionHMM,
    SimConfig,
    calibrate,
    design_matrix,
    simulate,
)

__all__ = [
    "SE_METHODS",
    "StudyDesign",
    "StudySummary",
    "PRESETS",
    "preset",
    "run_replicate",
    "run_study",
    "summarize",
    "read_ledger",
    "merge_ledgers",
    "ledger_text",
]

SE_METHODS = ("white", "ddw")
FULL_REPLICATES = 4000
MIN_CONVERGENCE = 0.5
_BASE = ("replicate", "estimator", "status", "loglik", "gradient_norm", "flags", "message")


@dataclass(frozen=True, eq=False)
class StudyDesign:
    """Truth, replicate count, estimators and SE methods of one study.

    ``reference`` is the numerator of every SV ratio.  ``level`` is a label
    carried into ``ratios.csv``.
    """

    name: str
    config: SimConfig
    R: int = 500
    estimators: tuple[str, ...] = MODELS
    se_methods: tuple[str, ...] = ("white",)
    ell: int = 1
    seed: int = 0
    starts: int = 10
    reference: str = "HMM2"
    level: str = ""
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.R < 2:
            raise DomainError("a study needs R >= 2 replicates")
        est = tuple(self.estimators)
        bad = [e for e in est if e not in MODELS]
        if bad or not est:
            raise DomainError(f"estimators must be a non-empty subset of {MODELS}, got {est}")
        object.__setattr__(self, "estimators", tuple(m for m in MODELS if m in est))
        se = tuple(self.se_methods)
        if any(s not in SE_METHODS for s in se):
            raise DomainError(f"se_methods must be a subset of {SE_METHODS}, got {se}")
        object.__setattr__(self, "se_methods", se)
        if self.reference not in self.estimators:
            raise DomainError(f"reference {self.reference!r} is not among the estimators")
        if self.config.seed != self.seed:
            object.__setattr__(self, "config", dataclasses.replace(self.config, seed=self.seed))

    @property
    def labels(self) -> tuple[str, ...]:
        return design_matrix(self.config.covariates, 2, self.seed)[1]

    @property
    def columns(self) -> tuple[str, ...]:
        cols = list(_BASE)
        cols += [f"b_{lab}" for lab in self.labels]
        for m in self.se_methods:
            cols += [f"se_{m}_{lab}" for lab in self.labels]
        return tuple(cols)

    def with_replicates(self, R: int) -> "StudyDesign":
        return dataclasses.replace(self, R=int(R))

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "config": self.config.to_dict(),
            "R": self.R,
            "estimators": list(self.estimators),
            "se_methods": list(self.se_methods),
            "ell": self.ell,
            "seed": self.seed,
            "starts": self.starts,
            "reference": self.reference,
            "level": self.level,
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StudyDesign":
        kw = dict(d)
        kw["config"] = SimConfig.from_dict(d["config"])
        for k in ("estimators", "se_methods"):
            if k in kw:
                kw[k] = tuple(kw[k])
        return cls(**kw)


# -- one replicate ---------------------------------------------------------------


def _fmt(x) -> str:
    if x is None:
        return ""
    x = float(x)
    return "" if not np.isfinite(x) else repr(x)


def _row(design, r, model, status, fit=None, ses=None, message=""):
    row = dict.fromkeys(design.columns, "")
    row.update(replicate=str(r), estimator=model, status=status, message=message.replace("\n", " "))
    if fit is not None:
        row["loglik"] = _fmt(fit.loglik)
        row["gradient_norm"] = _fmt(fit.gradient_norm)
        row["flags"] = ";".join(fit.flags)
        for lab, b in zip(design.labels, fit.beta):
            row[f"b_{lab}"] = _fmt(b)
    for m, se in (ses or {}).items():
        for lab, s in zip(design.labels, se):
            row[f"se_{m}_{lab}"] = _fmt(s)
    return row


def _ses(design, fit, data):
    out, notes = {}, []
    for m in design.se_methods:
        if m == "ddw" and fit.model != "GLM":
            continue
        try:
            cov = white_covariance(fit, data, design.ell) if m == "white" else ddw_moment_se(fit, data)
            out[m] = cov.se
        except (CovarianceError, DomainError) as exc:
            notes.append(f"{m}: {exc}")
    return out, "; ".join(notes)


def run_replicate(design: StudyDesign, r: int) -> list[dict]:
    """Ledger rows (one per estimator) for replicate ``r``."""
    data, _ = simulate(design.config, r)
    fits, rows = {}, []
    need_fmm = "FMM2" in design.estimators
    for model in design.estimators:
        try:
            if model == "GLM" or "GLM" not in fits:
                glm = fits.get("GLM") or glm_fit(data)
                fits["GLM"] = glm
            if model == "GLM":
                fit = fits["GLM"]
            elif model == "FMM2":
                fit = fmm_fit(data, starts=design.starts, seed=r, glm=fits["GLM"])
            else:
                fmm = fits.get("FMM2") if need_fmm else None
                fit = hmm_fit(data, starts=design.starts, seed=r, glm=fits["GLM"], fmm=fmm)
        except (ConvergenceError, DataError, DomainError) as exc:
            rows.append(_row(design, r, model, "failed", message=str(exc)))
            continue
        fits[model] = fit
        if not fit.converged:
            rows.append(_row(design, r, model, "not_converged", fit, message="gradient above tolerance"))
            continue
        ses, note = _ses(design, fit, data)
        rows.append(_row(design, r, model, "ok", fit, ses, note))
    return rows


# -- ledger ----------------------------------------------------------------------


def ledger_text(design: StudyDesign, rows, header: bool = True) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=design.columns, lineterminator="\n")
    if header:
        w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


def read_ledger(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _sorted(design, rows):
    order = {m: i for i, m in enumerate(design.estimators)}
    return sorted(rows, key=lambda row: (int(row["replicate"]), order[row["estimator"]]))


def merge_ledgers(design: StudyDesign, paths, out) -> Path:
    """Union of several ledgers of the same design, sorted by replicate.

    A (replicate, estimator) pair present in more than one ledger must carry
    identical values.
    """
    seen: dict = {}
    for p in paths:
        for row in read_ledger(p):
            key = (row["replicate"], row["estimator"])
            if key in seen and seen[key] != row:
                raise StudyError(f"ledgers disagree on replicate {key[0]} ({key[1]})")
            seen[key] = row
    out = Path(out)
    out.write_text(ledger_text(design, _sorted(design, seen.values())))
    return out


# -- summary ---------------------------------------------------------------------


def _num(s: str) -> float:
    return float(s) if s != "" else np.nan


@dataclass(frozen=True)
class StudySummary:
    """Moments of the persisted estimates.

    ``estimators[model][coef]`` holds mean, bias, SV, SSD and mean SE per
    method; ``ratios`` lists ``SV(numerator) / SV(denominator)`` over
    replicates where both converged.
    """

    name: str
    R: int
    level: str
    truth: dict
    estimators: dict
    convergence: dict
    failed: dict
    ratios: list
    metadata: dict

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def ratio(self, numerator: str, denominator: str, coef: str) -> float:
        for r in self.ratios:
            if (r["numerator"], r["denominator"], r["coefficient"]) == (numerator, denominator, coef):
                return r["ratio"]
        raise KeyError((numerator, denominator, coef))


def _moments(x, truth):
    n = x.size
    mean = float(np.mean(x)) if n else np.nan
    sv = float(np.var(x, ddof=1)) if n > 1 else np.nan
    return {
        "n": int(n),
        "mean": mean,
        "bias": mean - truth,
        "sv": sv,
        "ssd": float(np.sqrt(sv)),
    }


def summarize(design: StudyDesign, rows) -> StudySummary:
    """Fold the ledger rows into a :class:`StudySummary`."""
    rows = _sorted(design, rows)
    labels = design.labels
    truth = dict(zip(labels, design.config.beta))
    by_model = {m: {} for m in design.estimators}
    for row in rows:
        by_model[row["estimator"]][int(row["replicate"])] = row
    est, conv, failed, ok_sets = {}, {}, {}, {}
    for m, reps in by_model.items():
        ok = sorted(r for r, row in reps.items() if row["status"] == "ok")
        ok_sets[m] = ok
        conv[m] = len(ok) / len(reps) if reps else 0.0
        failed[m] = sorted(r for r, row in reps.items() if row["status"] != "ok")
        est[m] = {}
        for lab in labels:
            x = np.array([_num(reps[r][f"b_{lab}"]) for r in ok])
            entry = _moments(x, truth[lab])
            for s in design.se_methods:
                se = np.array([_num(reps[r][f"se_{s}_{lab}"]) for r in ok]) if ok else np.array([])
                se = se[np.isfinite(se)]
                entry[f"se_{s}"] = float(np.mean(se)) if se.size else None
                entry[f"se_{s}_n"] = int(se.size)
            est[m][lab] = entry
    ratios = []
    ref = design.reference
    for other in design.estimators:
        if other == ref:
            continue
        both = sorted(set(ok_sets[ref]) & set(ok_sets[other]))
        for lab in labels:
            a = np.array([_num(by_model[ref][r][f"b_{lab}"]) for r in both])
            b = np.array([_num(by_model[other][r][f"b_{lab}"]) for r in both])
            val = float(np.var(a, ddof=1) / np.var(b, ddof=1)) if len(both) > 1 else np.nan
            ratios.append(
                {
                    "level": design.level,
                    "numerator": ref,
                    "denominator": other,
                    "coefficient": lab,
                    "ratio": val,
                    "n_pairs": len(both),
                }
            )
    n_reps = len({int(r["replicate"]) for r in rows})
    meta = dict(design.metadata)
    meta.update(
        replicates_in_ledger=n_reps,
        full_scale_replicates=FULL_REPLICATES,
        noise_inflation=float(np.sqrt(FULL_REPLICATES / max(n_reps, 1))),
    )
    return StudySummary(
        name=design.name,
        R=n_reps,
        level=design.level,
        truth=truth,
        estimators=est,
        convergence=conv,
        failed=failed,
        ratios=ratios,
        metadata=meta,
    )


def _ratios_csv(summary: StudySummary) -> str:
    buf = io.StringIO()
    cols = ["study", "level", "numerator", "denominator", "coefficient", "ratio", "n_pairs"]
    w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
    w.writeheader()
    for r in summary.ratios:
        w.writerow({"study": summary.name, **r, "ratio": _fmt(r["ratio"])})
    return buf.getvalue()


def _check_convergence(summary: StudySummary):
    low = {m: c for m, c in summary.convergence.items() if c < MIN_CONVERGENCE}
    if low:
        detail = ", ".join(f"{m} {c:.0%}" for m, c in low.items())
        raise StudyError(f"study {summary.name!r}: convergence below {MIN_CONVERGENCE:.0%} ({detail})")


def _compute(design, todo, n_jobs):
    if n_jobs > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            chunks = pool.map(run_replicate, [design] * len(todo), todo)
            return [row for chunk in chunks for row in chunk]
    return [row for r in todo for row in run_replicate(design, r)]


def run_study(design: StudyDesign, out=None, n_jobs: int = 1, replicates=None) -> StudySummary:
    """Run replicates ``0..R-1`` (or ``replicates``) and summarise.

    With ``out`` the rows are appended to ``out/replicates.csv``; replicates
    already in that ledger are not rerun, and the summary covers the whole
    ledger.  ``summary.json``, ``ratios.csv`` and ``design.json`` are
    rewritten.  Raises :class:`StudyError` when an estimator converges in
    fewer than half the replicates.
    """
    reps = list(range(design.R)) if replicates is None else sorted(int(r) for r in replicates)
    if out is None:
        rows = _compute(design, reps, n_jobs)
        summary = summarize(design, list(csv.DictReader(io.StringIO(ledger_text(design, rows)))))
        _check_convergence(summary)
        return summary

    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    spec_path = out / "design.json"
    stored = design.to_dict()
    stored.pop("R")
    if spec_path.exists():
        previous = json.loads(spec_path.read_text())
        previous.pop("R", None)
        if previous != json.loads(json.dumps(stored)):
            raise StudyError(f"{out} holds a ledger of a different design")
    ledger = out / "replicates.csv"
    done = set()
    if ledger.exists():
        done = {int(r["replicate"]) for r in read_ledger(ledger)}
    todo = [r for r in reps if r not in done]
    rows = _compute(design, todo, n_jobs)
    fresh = not ledger.exists()
    with open(ledger, "a", newline="") as fh:
        fh.write(ledger_text(design, rows, header=fresh))
    all_rows = read_ledger(ledger)
    spec_path.write_text(json.dumps({**stored, "R": len({r["replicate"] for r in all_rows})}, indent=2))
    summary = summarize(design, all_rows)
    (out / "summary.json").write_text(json.dumps(summary.to_dict(), indent=2))
    (out / "ratios.csv").write_text(_ratios_csv(summary))
    _check_convergence(summary)
    return summary


# -- presets ---------------------------------------------------------------------

N_DEFAULT = 1000
BETA_DEFAULT = (0.5, 1.0)
# With p_ii = 0.9 fixed, OD, AC1 and SP all reach their high level only at
# larger counts; the HMM standard-error presets use S_1 set by OD.
BETA_SE_HMM = (3.0, 1.0)
BETA_SE_GLMM = (0.5, 1.0)
# Mean adjacent SP of 3- and 4-state truths peaks below 0.7 at small counts.
BETA_STUDY2_HMM = (1.5, 1.0)


def _level(name: str) -> str:
    lvl = {"med": "medium"}.get(name, name)
    if lvl not in LEVELS:
        raise DomainError(f"unknown level {name!r}")
    return lvl


def _scale_note():
    return {"trend_coding": "t/n", "full_scale_replicates": FULL_REPLICATES}


def _hmm_design(name, K, level, covariate, beta, n, R, seed, reference, estimators, se_methods, on="sp"):
    cov = [covariate]
    X, _ = design_matrix(cov, n, seed)
    target = CalibrationTarget(**{on: level})
    spec = calibrate(target, FixedTransitionHMM(K, 0.9), marginal_mean(beta, X))
    config = SimConfig(n, beta, cov, spec, seed)
    return StudyDesign(
        name=name,
        config=config,
        R=R,
        estimators=estimators,
        se_methods=se_methods,
        seed=seed,
        reference=reference,
        level=level,
        metadata={"truth": f"{K}-state HMM, p_ii=0.9", "calibrated_on": on, "profile": config.profile().to_dict(),
                  **_scale_note()},
    )


def _glmm_design(name, level, covariate, beta, n, R, seed, reference, estimators, se_methods):
    cov = [covariate]
    X, _ = design_matrix(cov, n, seed)
    spec = calibrate(CalibrationTarget(od=level, ac1=level), AR1Family(), marginal_mean(beta, X))
    config = SimConfig(n, beta, cov, spec, seed)
    return StudyDesign(
        name=name,
        config=config,
        R=R,
        estimators=estimators,
        se_methods=se_methods,
        seed=seed,
        reference=reference,
        level=level,
        metadata={"truth": "Poisson GLMM, Gaussian AR(1) latent", "calibrated_on": "od,ac1",
                  "profile": config.profile().to_dict(), **_scale_note()},
    )


def _covariate(kind):
    return {"binary": Covariate("binary"), "trend": Covariate("trend"),
            "seasonal": Covariate("seasonal")}[kind]


def _beta(kind, beta):
    if kind == "seasonal" and len(beta) == 2:
        return (beta[0], beta[1], beta[1])
    return beta


PRESETS = (
    [f"study1-{lvl}" for lvl in LEVELS]
    + [f"study2-hmm{K}-{lvl}" for K in (3, 4) for lvl in LEVELS]
    + [f"study2-glmm-{lvl}" for lvl in LEVELS]
    + [f"study2-glmm-binary-{lvl}" for lvl in LEVELS]
    + [f"se-table2-{row}" for row in ("hmm-binary", "hmm-trend", "glmm-binary", "glmm-trend")]
)


def preset(name: str, R: int = 500, n: int = N_DEFAULT, seed: int = 20240901) -> StudyDesign:
    """Study design by name; see :data:`PRESETS`.

    ``study1-*`` use a 2-state HMM truth (``p_11 = p_22 = 0.9``) with ``S_1``
    set by the SP level and a binary covariate.  ``study2-hmm{3,4}-*`` use
    K-state truths with ``p_ii = 0.9``, ``study2-glmm-*`` an AR(1) latent
    with OD and AC1 at the level (trend covariate unless ``-binary``).
    ``se-table2-*`` are high-level designs comparing White and DDW SEs.
    """
    parts = name.split("-")
    full = ("GLM", "FMM2", "HMM2")
    if parts[0] == "study1" and len(parts) == 2:
        lvl = _level(parts[1])
        return _hmm_design(name, 2, lvl, _covariate("binary"), BETA_DEFAULT, n, R, seed, "HMM2", full, ("white",))
    if parts[0] == "study2" and len(parts) == 3 and parts[1] in ("hmm3", "hmm4"):
        lvl = _level(parts[2])
        return _hmm_design(name, int(parts[1][-1]), lvl, _covariate("binary"), BETA_STUDY2_HMM, n, R, seed, "GLM",
                           full, ("white",))
    if parts[0] == "study2" and parts[1] == "glmm" and len(parts) in (3, 4):
        kind = "trend" if len(parts) == 3 else parts[2]
        if kind not in ("binary", "trend", "seasonal"):
            raise DomainError(f"unknown preset {name!r}")
        lvl = _level(parts[-1])
        return _glmm_design(name, lvl, _covariate(kind), _beta(kind, BETA_DEFAULT), n, R, seed, "GLM", full,
                            ("white",))
    if name.startswith("se-table2-") and len(parts) == 4:
        truth, kind = parts[2], parts[3]
        if truth not in ("hmm", "glmm") or kind not in ("binary", "trend"):
            raise DomainError(f"unknown preset {name!r}")
        est = ("GLM", "HMM2")
        se = ("white", "ddw")
        if truth == "hmm":
            return _hmm_design(name, 2, "high", _covariate(kind), BETA_SE_HMM, n, R, seed, "HMM2", est, se, on="od")
        return _glmm_design(name, "high", _covariate(kind), BETA_SE_GLMM, n, R, seed, "HMM2", est, se)
    raise DomainError(f"unknown preset {name!r}; known: {', '.join(PRESETS)}")
