"""Command-line interface: ``twinace fit | simulate | study``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .data import read_csv, residualize, write_csv
from .errors import TwinAceError
from .estimators import Estimator, FitOptions, fit, fit_with_variance_covariates
from .moments import AceParams, CorrLink, VarianceLink
from .simulate import SCENARIOS, ScenarioConfig, simulate
from .solver import SolverConfig
from .study import PRESETS, StudyConfig, preset, run_study, write_outputs

log = logging.getLogger("twinace")

EXIT_OK, EXIT_INPUT, EXIT_NONCONVERGED = 0, 1, 2


def _kv(text: str) -> tuple[str, str]:
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected NAME=VALUE, got {text!r}")
    k, v = text.split("=", 1)
    return k.strip(), v.strip()


def _profile(text: str) -> dict[str, float]:
    out = {}
    for part in text.split(","):
        k, v = _kv(part)
        try:
            out[k] = float(v)
        except ValueError:
            raise argparse.ArgumentTypeError(f"non-numeric covariate value in {text!r}") from None
    return out


def _add_fit(sub):
    p = sub.add_parser("fit", help="fit ACE estimators to a twin CSV file")
    p.add_argument("csv", type=Path)
    p.add_argument("--traits", nargs=2, default=["y1", "y2"], metavar=("TWIN1", "TWIN2"))
    p.add_argument("--zygosity", default="zygosity", help="zygosity column (tokens MZ/DZ)")
    p.add_argument("--covariates", nargs="*", default=[], help="pair-level covariate columns to load")
    p.add_argument("--binary", action="append", type=_kv, default=[], metavar="COL=LABEL",
                   help="code covariate COL as 1 where the cell equals LABEL, else 0 (e.g. sex=M)")
    p.add_argument("--no-residualize", action="store_true",
                   help="skip regressing the trait on the loaded covariates before fitting")
    p.add_argument("--estimator", default="GEE2-Falconer",
                   help="NACE, GEE2-NACE, Falconer, GEE2-Falconer or all")
    p.add_argument("--vary-by", action="append", default=[], metavar="COL",
                   help="let the variance parameters depend on this covariate (GEE2 estimators)")
    p.add_argument("--quadratic", action="append", default=[], metavar="COL",
                   help="add a centered square of a --vary-by covariate")
    p.add_argument("--at", action="append", type=_profile, default=None, metavar="COL=V[,COL=V]",
                   help="covariate profile to report (repeatable)")
    p.add_argument("--contrast", action="append", default=[], metavar="Q:PROFILE_A:PROFILE_B",
                   help="Wald test, e.g. h2:age=29:age=17")
    p.add_argument("--var-link", choices=[v.value for v in VarianceLink], default="identity")
    p.add_argument("--corr-link", choices=[c.value for c in CorrLink], default="identity")
    p.add_argument("--centering", choices=["per_zygosity", "global", "none"], default="per_zygosity")
    p.add_argument("--pooled-corr", action="store_true",
                   help="classical Falconer uses cross-product / pooled variance instead of Pearson r")
    p.add_argument("--falconer-se-n", choices=["group", "total"], default="group")
    p.add_argument("--ridge", action="store_true", help="add a 1e-10 * trace ridge to the scoring matrix")
    p.add_argument("--max-iter", type=int, default=100)
    p.add_argument("--tol", type=float, default=1e-8)
    p.add_argument("--json", type=Path, help="write the fit result(s) as JSON")
    p.add_argument("--profile-csv", type=Path, help="write per-profile h2/c2/e2 with 95%% CIs")
    p.set_defaults(func=cmd_fit)


def _add_simulate(sub):
    p = sub.add_parser("simulate", help="write a simulated twin dataset")
    p.add_argument("--scenario", choices=SCENARIOS, required=True)
    p.add_argument("--n-mz", type=int, default=700)
    p.add_argument("--n-dz", type=int, default=700)
    p.add_argument("--alpha", nargs=3, type=float, metavar=("A", "C", "E"), default=None)
    p.add_argument("--df", type=float, default=4.5)
    p.add_argument("--lambda", dest="lam", type=float, default=0.35)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--replicate", type=int, default=None, help="derive the stream from (seed, replicate)")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_simulate)


def _add_study(sub):
    p = sub.add_parser("study", help="run a Monte Carlo coverage study")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--config", type=Path, help="study configuration (JSON)")
    src.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--replicates", type=int)
    p.add_argument("--parallelism", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--outdir", type=Path, default=Path("study_out"))
    p.add_argument("--prefix", default=None)
    p.add_argument("--no-replicate-log", action="store_true")
    p.add_argument("--age-profile", action="store_true", help="write per-level h2/c2/e2 profile CSV")
    p.set_defaults(func=cmd_study)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="twinace", description="Twin ACE heritability estimation")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    _add_fit(sub)
    _add_simulate(sub)
    _add_study(sub)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: file not found: {exc.filename}", file=sys.stderr)
        return EXIT_INPUT
    except (TwinAceError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


# ---------------------------------------------------------------------------
# fit


def _fmt_row(name, p, se_h2, se_c2, ci_h2, ci_c2):
    return (f"{name:<16} {p.h2:8.4f} {se_h2:8.4f} [{ci_h2[0]:7.4f},{ci_h2[1]:7.4f}]  "
            f"{p.c2:8.4f} {se_c2:8.4f} [{ci_c2[0]:7.4f},{ci_c2[1]:7.4f}]  {p.e2:8.4f}")


HEADER = f"{'model':<16} {'h2':>8} {'se':>8} {'95% CI':>17}  {'c2':>8} {'se':>8} {'95% CI':>17}  {'e2':>8}"


def cmd_fit(args) -> int:
    if not args.csv.exists():
        print(f"error: file not found: {args.csv}", file=sys.stderr)
        return EXIT_INPUT
    binary = dict(args.binary)
    data = read_csv(args.csv, args.traits, args.zygosity, args.covariates, binary)
    if not args.no_residualize and data.covariate_names:
        data, resid = residualize(data)
        log.info("residualized on %s (coefficients %s), using only the loaded rows",
                 resid.covariate_names, resid.coefficients)
    options = FitOptions(
        VarianceLink(args.var_link), CorrLink(args.corr_link),
        None if args.centering == "none" else args.centering,
        pooled_corr=args.pooled_corr, falconer_se_n=args.falconer_se_n,
        solver=SolverConfig(max_iter=args.max_iter, tol=args.tol, ridge=1e-10 if args.ridge else 0.0),
    )
    print(f"pairs: {data.n_mz} MZ, {data.n_dz} DZ; MZ/DZ variance ratio {data.variance_ratio():.3f}")

    if args.vary_by:
        return _fit_covariates(args, data, options)

    names = list(Estimator) if args.estimator.lower() == "all" else [Estimator.parse(args.estimator)]
    results = [fit(data, e, options) for e in names]
    print(HEADER)
    for r in results:
        print(_fmt_row(r.estimator.value, r.proportions, r.se_h2, r.se_c2, r.ci_h2, r.ci_c2))
    for r in results:
        d = r.diagnostics
        if "converged" in d:
            print(f"{r.estimator.value}: converged={d['converged']} iterations={d['iterations']} "
                  f"max update={d['final_update_norm']:.3g} relative={d['relative_change']:.3g}")
        if d.get("out_of_range"):
            print(f"{r.estimator.value}: warning: proportions outside [0, 1]")
    if args.json:
        payload = results[0].to_dict() if len(results) == 1 else [r.to_dict() for r in results]
        args.json.write_text(json.dumps(payload, indent=2))
    return EXIT_OK if all(r.converged for r in results) else EXIT_NONCONVERGED


def _fit_covariates(args, data, options) -> int:
    est = Estimator.parse(args.estimator)
    res = fit_with_variance_covariates(data, est, args.vary_by, options, quadratic=args.quadratic, levels=args.at)
    print(f"{est.value} with variance covariates {args.vary_by}"
          + (f" (quadratic: {args.quadratic})" if args.quadratic else ""))
    print(HEADER.replace("model", "profile"))
    for label, lv in res.levels.items():
        print(_fmt_row(label, lv.proportions, lv.se_h2, lv.se_c2, lv.ci_h2, lv.ci_c2))
    contrasts = []
    for spec in args.contrast:
        try:
            q, a, b = spec.split(":")
            pa, pb = _profile(a), _profile(b)
        except (ValueError, argparse.ArgumentTypeError):
            print(f"error: bad contrast {spec!r}; expected Q:PROFILE_A:PROFILE_B", file=sys.stderr)
            return EXIT_INPUT
        w = res.contrast(q, pa, pb)
        contrasts.append({"quantity": q, "a": pa, "b": pb, "estimate": w.estimate, "se": w.se, "z": w.z, "p": w.p})
        print(f"Wald {q}[{a}] - {q}[{b}] = {w.estimate:.4f} (se {w.se:.4f}), z = {w.z:.3f}, p = {w.p:.4g}")
    print(f"converged={res.outcome.converged} iterations={res.outcome.iterations}")
    if args.json:
        payload = res.to_dict()
        payload["contrasts"] = contrasts
        args.json.write_text(json.dumps(payload, indent=2))
    if args.profile_csv:
        lines = ["profile,quantity,estimate,se,ci_lower,ci_upper"]
        for label, lv in res.levels.items():
            for q in ("h2", "c2", "e2"):
                est_ = getattr(lv.proportions, q)
                se = getattr(lv, f"se_{q}")
                lo, hi = getattr(lv, f"ci_{q}")
                lines.append(f'"{label}",{q},{est_:.6g},{se:.6g},{lo:.6g},{hi:.6g}')
        args.profile_csv.write_text("\n".join(lines) + "\n")
    return EXIT_OK if res.converged else EXIT_NONCONVERGED


# ---------------------------------------------------------------------------
# simulate


def cmd_simulate(args) -> int:
    kwargs = dict(scenario=args.scenario, n_mz=args.n_mz, n_dz=args.n_dz, df=args.df, lam=args.lam, seed=args.seed)
    if args.alpha is not None:
        kwargs["alpha"] = AceParams(*args.alpha)
    config = ScenarioConfig(**kwargs)
    data = simulate(config, args.replicate)
    write_csv(data, args.out)
    print(f"wrote {len(data)} pairs ({data.n_mz} MZ, {data.n_dz} DZ) to {args.out}")
    for label, grp in (("MZ", data.mz), ("DZ", ~data.mz)):
        y = data.y[grp]
        if len(y) > 1:
            print(f"{label}: mean {y.mean():.4f}  variance {y.var():.4f}  "
                  f"within-pair correlation {np.corrcoef(y[:, 0], y[:, 1])[0, 1]:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# study


def cmd_study(args) -> int:
    if args.config:
        config = StudyConfig.from_json(args.config)
        prefix = args.prefix or args.config.stem
    else:
        config = preset(args.preset)
        prefix = args.prefix or args.preset
    if args.replicates is not None:
        config = replace(config, replicates=args.replicates)
    if args.parallelism is not None:
        config = replace(config, parallelism=args.parallelism)
    if args.seed is not None:
        config = replace(config, scenario=replace(config.scenario, seed=args.seed))
    summary = run_study(config)
    paths = write_outputs(summary, args.outdir, prefix, per_replicate=not args.no_replicate_log,
                          age_profile=args.age_profile)
    print(summary.to_markdown(), end="")
    for kind, path in paths.items():
        print(f"{kind}: {path}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
