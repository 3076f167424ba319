"""``coxmeta`` command line: simulate, fit, summarize, diff, ppc.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import diagnostics, pointgen, summaries
from .errors import ConfigError, CoxMetaError, DataError, NumericError
from .io import (atomic_write, assemble_studyset, format_covariates_csv, format_foci_csv,
                 grid_from_config, load_config, load_draws, parse_covariates_csv,
                 parse_foci_csv, region_from_spec, save_draws, write_csv, write_grid,
                 write_volume)
from .model import LGCPModel
from .sampler import run_chain

log = logging.getLogger("coxmeta")

COVARIATE_SAMPLERS = {
    "setup1": pointgen.setup1_covariates,
    "setup2": pointgen.setup2_covariates,
    "none": lambda rng, n: {},
}


def _rng(seed) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed))))


# -- simulate --------------------------------------------------------------------

def cmd_simulate(args) -> int:
    cfg = load_config(args.config, args.seed)
    raw = cfg.raw
    grid = grid_from_config(cfg)
    out = cfg.path("output")
    rng = _rng(raw.get("seed", 0))
    n = int(raw.get("n_studies", 200))
    sampler = COVARIATE_SAMPLERS.get(raw.get("covariates", "none"))
    if sampler is None:
        raise ConfigError(f"unknown covariate sampler {raw.get('covariates')!r}")
    mode = raw.get("mode", "lgcp")
    record = {"mode": mode, "seed": raw.get("seed", 0), "n_studies": n}
    if mode == "lgcp":
        t = raw.get("truth")
        if t is None:
            raise ConfigError("lgcp simulation needs 'truth'")
        try:
            truth = pointgen.LGCPTruth(t["mu"], t["sigma"], t["rho_scaled"],
                                       t.get("beta_global", []))
        except KeyError as exc:
            raise ConfigError(f"truth is missing {exc}") from exc
        try:
            studies, rec = pointgen.simulate_lgcp_dataset(
                truth, sampler, n, grid, rng, cfg.spatial, cfg.global_, cfg.delta)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        record["truth"] = rec["truth"]
        record["expected_counts"] = rec["expected_counts"].tolist()
        for k, name in enumerate(studies.names[:studies.n_spatial]):
            write_volume(out / f"truth_effect_{name}.raw", grid, rec["effects"][k])
    elif mode == "mixture":
        types = []
        for t in raw.get("types", []):
            types.append([(region_from_spec(r["region"], grid, cfg), float(r["p"])) for r in t])
        spec = pointgen.RegionMixtureSpec(
            types=types, count_intercept=float(raw.get("count_intercept", 5.0)),
            count_coef=dict(raw.get("count_coef", {"z3": 2.0, "z4": 2.0})),
            dispersion=float(raw.get("dispersion", 20.0)))
        studies = pointgen.simulate_region_mixture(spec, sampler, n, grid, rng)
    else:
        raise ConfigError(f"unknown simulation mode {mode!r}")
    atomic_write(out / "foci.csv", format_foci_csv(studies))
    atomic_write(out / "covariates.csv", format_covariates_csv(studies))
    write_grid(out / "grid.json", out / "mask.raw", grid)
    record["names"] = studies.names
    atomic_write(out / "truth.json", json.dumps(record, indent=2, sort_keys=True) + "\n")
    log.info("wrote %d studies (%d foci) to %s", n, int(studies.counts.sum()), out)
    return 0


# -- fit -------------------------------------------------------------------------

def load_studies(cfg, grid):
    try:
        foci = parse_foci_csv(cfg.path("foci").read_text())
        cov = parse_covariates_csv(cfg.path("covariates").read_text())
    except OSError as exc:
        raise DataError(str(exc)) from exc
    return assemble_studyset(foci, cov, grid, cfg.spatial, cfg.global_,
                             bool(cfg.raw.get("drop_outside_mask", False)), log)


def cmd_fit(args) -> int:
    cfg = load_config(args.config, args.seed)
    if args.drop_outside_mask:
        cfg.raw["drop_outside_mask"] = True
    grid = grid_from_config(cfg)
    studies = load_studies(cfg, grid)
    threads = args.threads if args.threads is not None else cfg.threads
    model = LGCPModel(grid, studies, cfg.priors, delta=cfg.delta, threads=threads)
    every = max(1, cfg.hmc.n_iter // 20)

    def progress(t, logp, accepted, eps):
        if t % every == 0:
            log.info("iter %d/%d  logpost %.3f  eps %.3g", t, cfg.hmc.n_iter, logp, eps)

    try:
        draws = run_chain(model, cfg.hmc, progress=progress)
    finally:
        model.close()
    save_draws(cfg.path("output"), draws, studies)
    log.info("acceptance after burn-in %.3f", draws.acceptance_rate(cfg.hmc.n_burnin))
    return 0


# -- summaries ---------------------------------------------------------------------

def parse_row(text: str | None, names: list) -> np.ndarray:
    """``"name=value,..."`` (unlisted covariates 0, intercept 1) or a full numeric list."""
    row = np.zeros(len(names))
    row[0] = 1.0
    if not text:
        return row
    parts = [p.strip() for p in text.split(",") if p.strip()]
    if all("=" not in p for p in parts):
        try:
            vals = [float(p) for p in parts]
        except ValueError as exc:
            raise ConfigError(f"cannot parse covariate row {text!r}") from exc
        if len(vals) != len(names):
            raise ConfigError(f"covariate row needs {len(names)} values ({', '.join(names)})")
        return np.array(vals)
    for p in parts:
        k, _, v = p.partition("=")
        if k.strip() not in names:
            raise ConfigError(f"unknown covariate {k.strip()!r}")
        row[names.index(k.strip())] = float(v)
    return row


def parse_effect(text: str, names: list, n_spatial: int):
    """Spatial effect by index or name, or a covariate row with ``=`` pairs."""
    if "=" in text or "," in text:
        return parse_row(text, names)
    if text.lstrip("-").isdigit():
        return int(text)
    if text in names[:n_spatial]:
        return names.index(text)
    raise ConfigError(f"{text!r} is not a spatial effect ({', '.join(names[:n_spatial])})")


def load_regions(path, grid) -> dict:
    if path is None:
        return {}
    p = Path(path)
    try:
        spec = json.loads(p.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read ROI file {p}: {exc}") from exc
    spec = spec.get("rois", spec)
    out = {}
    for name, s in spec.items():
        if isinstance(s, list):
            s = {"indices": s}
        elif isinstance(s, str):
            s = {"mask": s}
        if "mask" in s and not Path(s["mask"]).is_absolute():
            s = dict(s, mask=str(p.parent / s["mask"]))
        out[name] = region_from_spec(s, grid)
    return out


QUANTILE_KEYS = {"median": 0.5, "p025": 0.025, "p975": 0.975}


def cmd_summarize(args) -> int:
    draws, studies = load_draws(args.draws)
    grid = draws.grid
    out = Path(args.out) if args.out else Path(args.draws) / "summaries"
    z = parse_row(args.z, draws.names)
    what = [w.strip() for w in args.what.split(",") if w.strip()]
    qs = [w for w in what if w in QUANTILE_KEYS]
    if qs:
        vals = summaries.posterior_intensity_quantiles(draws, z, [QUANTILE_KEYS[w] for w in qs])
        for w, v in zip(qs, vals):
            write_volume(out / f"intensity_{w}.raw", grid, v)
    if "count" in what:
        lam = summaries.intensity_draws(draws, z)
        total = summaries.expected_count(lam, grid.mask_index, grid)
        p50, lo, hi = summaries.interval(total)
        emp = float("nan")
        if studies is not None:
            rows = summaries.matching_studies(studies, z)
            emp = float(studies.counts[rows].mean()) if rows.size else float("nan")
        write_csv(out / "count.csv", ["region", "p50", "p025", "p975", "empirical"],
                  [["brain", float(p50), float(lo), float(hi), emp]])
    if "roi" in what:
        regions = load_regions(args.rois, grid)
        if not regions:
            raise ConfigError("'roi' summary needs --rois")
        rows = summaries.roi_report(draws, regions, z, studies)
        write_csv(out / "roi.csv", ["roi", "p50", "p025", "p975", "empirical"],
                  [[r["roi"], r["p50"], r["p025"], r["p975"], r["empirical"]] for r in rows])
    unknown = set(what) - set(QUANTILE_KEYS) - {"count", "roi"}
    if unknown:
        raise ConfigError(f"unknown summaries: {', '.join(sorted(unknown))}")
    return 0


def cmd_diff(args) -> int:
    draws, _ = load_draws(args.draws)
    grid = draws.grid
    out = Path(args.out) if args.out else Path(args.draws) / "summaries"
    k1 = parse_effect(args.k1, draws.names, draws.n_spatial)
    k2 = parse_effect(args.k2, draws.names, draws.n_spatial)
    val, degenerate = summaries.standardized_difference(draws, k1, k2)
    write_volume(out / "stddiff.raw", grid, val)
    write_volume(out / "stddiff_degenerate.raw", grid, degenerate.astype(float))
    if args.epsilon is not None:
        write_volume(out / "exceedance.raw", grid,
                     summaries.exceedance_prob(draws, k1, k2, args.epsilon))
    return 0


def parse_distances(text: str) -> np.ndarray:
    try:
        if ":" in text:
            a, b, s = (float(x) for x in text.split(":"))
            return np.arange(a, b + 0.5 * s, s)
        return np.array([float(x) for x in text.split(",")])
    except ValueError as exc:
        raise ConfigError(f"cannot parse distances {text!r}") from exc


def cmd_ppc(args) -> int:
    draws, studies = load_draws(args.draws)
    if studies is None:
        raise DataError("chain output has no studies.json")
    out = Path(args.out) if args.out else Path(args.draws) / "ppc"
    rng = _rng(args.seed)
    what = [w.strip() for w in args.what.split(",") if w.strip()]
    if "counts" in what:
        regions = load_regions(args.rois, draws.grid)
        cov = diagnostics.ppc_counts(draws, regions, studies, rng)
        write_csv(out / "counts_regions.csv", ["region", "coverage"],
                  [[r, c] for r, c in cov.region_coverage.items()])
        write_csv(out / "counts_studies.csv",
                  ["study_id", "region", "observed", "lower", "upper", "covered"],
                  [[sid, r, float(cov.observed[i, k]), float(cov.lower[i, k]),
                    float(cov.upper[i, k]), int(cov.covered[i, k])]
                   for i, sid in enumerate(studies.ids) for k, r in enumerate(cov.regions)])
        log.info("whole-brain count coverage %.3f", cov.region_coverage["brain"])
    if "lfunction" in what:
        d = parse_distances(args.distances)
        rep = diagnostics.l_diff_report(studies, draws, d, rng)
        groups = {"all": None}
        if studies.k_star > 0:
            rows, inv = np.unique(studies.z[:, :studies.n_spatial], axis=0, return_inverse=True)
            for u in range(len(rows)):
                groups["type:" + "|".join(repr(float(x)) for x in rows[u])] = np.flatnonzero(
                    inv.ravel() == u)
        curve_rows = []
        for g, sel in groups.items():
            c = rep.curves(sel)
            for j in range(d.size):
                curve_rows.append([g, float(d[j]), float(c["median_lo"][j]),
                                   float(c["median_hi"][j]), float(c["prop_zero"][j])])
        write_csv(out / "lfunction_curves.csv", ["group", "d", "median_lo", "median_hi",
                                                 "prop_zero"], curve_rows)
        write_csv(out / "lfunction_studies.csv", ["study_id", "d", "lower", "upper",
                                                  "contains_zero"],
                  [[sid, float(d[j]), float(rep.lower[i, j]), float(rep.upper[i, j]),
                    int(rep.contains_zero[i, j])]
                   for i, sid in enumerate(studies.ids) for j in range(d.size)])
    unknown = set(what) - {"counts", "lfunction"}
    if unknown:
        raise ConfigError(f"unknown checks: {', '.join(sorted(unknown))}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="coxmeta", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="generate a synthetic dataset")
    s.add_argument("--config", required=True)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("fit", help="run the HMC sampler")
    s.add_argument("--config", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--threads", type=int)
    s.add_argument("--drop-outside-mask", action="store_true")
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("summarize", help="posterior intensity maps and ROI summaries")
    s.add_argument("--draws", required=True)
    s.add_argument("--what", default="median,p025,p975,count")
    s.add_argument("--z", help="covariate row, e.g. 'type2=1,z3=0.5'")
    s.add_argument("--rois", help="JSON file mapping ROI names to voxel lists or masks")
    s.add_argument("--out")
    s.set_defaults(func=cmd_summarize)

    s = sub.add_parser("diff", help="standardised difference and exceedance maps")
    s.add_argument("--draws", required=True)
    s.add_argument("--k1", required=True)
    s.add_argument("--k2", required=True)
    s.add_argument("--epsilon", type=float)
    s.add_argument("--out")
    s.set_defaults(func=cmd_diff)

    s = sub.add_parser("ppc", help="posterior predictive checks")
    s.add_argument("--draws", required=True)
    s.add_argument("--what", default="counts,lfunction")
    s.add_argument("--rois")
    s.add_argument("--distances", default="0:200:2")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(func=cmd_ppc)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CoxMetaError as exc:
        log.error("%s", exc)
        return getattr(exc, "exit_code", 1)
    except (FloatingPointError, OverflowError) as exc:
        log.error("numeric failure: %s", exc)
        return NumericError.exit_code


if __name__ == "__main__":
    sys.exit(main())
