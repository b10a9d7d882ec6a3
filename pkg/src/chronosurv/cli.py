"""Command-line driver: ``chronosurv <command> [options]``.

Commands write files only.  Exit codes: 0 ok, 2 bad config, 3 training
aborted, 4 missing artifacts, 5 unknown patient reference.
"""

from __future__ import annotations

import argparse
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import baselines as B
from . import cohort as C
from . import model as M
from . import plotting as P
from . import storage
from . import stratify as ST
from . import survstats as S
from . import training as T
from .config import RunConfig, apply_overrides, config_to_text, load_config, parse_config_text
from .errors import AbortEpochError, InvalidConfigError, UndefinedMetricError
from .projection import build_collage, projected_tumor_mask
from .sampling import evaluation_grid

log = logging.getLogger("chronosurv")

EXIT_OK, EXIT_CONFIG, EXIT_TRAIN, EXIT_MISSING, EXIT_REF = 0, 2, 3, 4, 5


class MissingArtifact(Exception):
    pass


class BadReference(Exception):
    pass


# ----------------------------------------------------------------- helpers

def resolve_config(path=None, overrides=(), seed=None) -> RunConfig:
    cfg = load_config(path)
    pairs = {}
    for item in overrides:
        if "=" not in item:
            raise InvalidConfigError(f"override must look like key=value: {item!r}", item)
        key, value = item.split("=", 1)
        pairs[key.strip()] = value.strip()
    if seed is not None:
        pairs["seed"] = str(seed)
    return apply_overrides(cfg, pairs) if pairs else cfg


def _load_data(data_dir):
    if not (Path(data_dir) / "manifest.json").exists():
        raise MissingArtifact(f"no manifest.json in {data_dir}")
    return C.load_cohort(data_dir)


def _load_run(run_dir):
    models = T.load_models(run_dir)
    if not models:
        raise MissingArtifact(f"no fold*/checkpoint.bin under {run_dir}")
    return models


def _run_config(run_dir) -> RunConfig:
    path = Path(run_dir) / "config.resolved"
    if not path.exists():
        raise MissingArtifact(f"missing {path}")
    return apply_overrides(RunConfig(), parse_config_text(path.read_text()))


def _write(path, text) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return path


def predict_cohort(models, cohort, run_dir=None, grid=None):
    """Monotonized survival curve per patient.

    When ``cohort`` is the cohort the run was trained on, each patient is
    scored by the fold model that held it out; otherwise the fold models are
    averaged.
    """
    grid = evaluation_grid() if grid is None else grid
    trained_on = None
    if run_dir is not None and (Path(run_dir) / "data.sha256").exists():
        trained_on = (Path(run_dir) / "data.sha256").read_text().strip()
    same = trained_on == C.manifest_hash(cohort.patients)
    if same:
        t_norm = np.minimum(grid, 1825) / 1825.0
        raw = {}
        for params in models:
            inputs = T.model_inputs(params, cohort)
            for pid in params.meta.get("val_ids", []):
                raw[pid] = M.predict_probs(params, inputs[pid], t_norm)
        missing = [p.id for p in cohort.patients if p.id not in raw]
        if missing:
            raise MissingArtifact(f"no held-out model for {missing[:3]}")
    else:
        raw = T.ensemble_probs(models, cohort, grid)
    return {pid: M.SurvivalCurve(np.asarray(grid), M.monotonize(v), True) for pid, v in raw.items()}


def curves_csv(curves, patients) -> str:
    buf = io.StringIO()
    buf.write("id,time,event,auspc,predicted_death_day\n")
    for p in patients:
        c = curves[p.id]
        death = S.predicted_death_time(c)
        buf.write(f"{p.id},{p.time},{int(p.event)},{S.auspc(c):.6g},"
                  f"{'' if death is None else format(death, '.6g')}\n")
    return buf.getvalue()


def _group_arrays(patients, ids):
    chosen = [p for p in patients if p.id in set(ids)]
    return [p.time for p in chosen], [p.event for p in chosen]


# ---------------------------------------------------------------- commands

def cmd_synth(config: RunConfig, out_dir) -> Path:
    cohort = C.generate_cohort(config.cohort, config.seed)
    manifest = C.save_cohort(cohort, out_dir)
    _write(Path(out_dir) / "config.resolved", config_to_text(config))
    return manifest


def cmd_project(data_dir, out_dir=None) -> list:
    cohort = _load_data(data_dir)
    root = Path(out_dir or data_dir)
    return [storage.write_collage(root, p.id, build_collage(cohort.volumes[p.id].load()))
            for p in cohort.patients]


def cmd_train(config: RunConfig, data_dir, run_dir):
    cohort = _load_data(data_dir)
    run = Path(run_dir)
    run.mkdir(parents=True, exist_ok=True)
    _write(run / "data.sha256", C.manifest_hash(cohort.patients) + "\n")
    return T.train_cv(cohort, config.train.k_folds, config, config.seed, run_dir=run)


def cmd_evaluate(run_dir, data_dir, out_dir=None):
    models = _load_run(run_dir)
    cohort = _load_data(data_dir)
    out = Path(out_dir or Path(run_dir) / "eval")
    patients = cohort.patients
    curves = predict_cohort(models, cohort, run_dir)
    report = S.evaluate_curves(curves, patients)
    _write(out / "report.csv", report.to_csv())
    _write(out / "report.json", report.to_json())
    _write(out / "curves.csv", curves_csv(curves, patients))

    times, events = C.survival_arrays(patients)
    mean_curve = np.mean([curves[p.id].probs for p in patients], axis=0)
    P.km_plot({"observed": (times, events)}, out / "km_gt_vs_pred.svg", "Observed vs predicted",
              predicted={"predicted mean": (curves[patients[0].id].grid_days, mean_curve)})

    risk = ST.assign_risk(report.auspc_per_patient)
    groups = {f"{g} risk": _group_arrays(patients, risk.members(g)) for g in (ST.HIGH, ST.LOW)}
    P.km_plot(groups, out / "km_risk.svg", "Predicted risk groups")
    overall = [_overall(risk, patients)]
    _write(out / "stratification.csv", ST.stratification_csv(overall))
    _write(out / "stratification.json", ST.stratification_json(overall))

    median = float(np.median([p.tmtv for p in patients]))
    low = [p.id for p in patients if p.tmtv <= median]
    high = [p.id for p in patients if p.tmtv > median]
    P.km_plot({"low TMTV": _group_arrays(patients, low), "high TMTV": _group_arrays(patients, high)},
              out / "km_tmtv.svg", f"TMTV split at median {median:.4g} ml")
    by_sex = {sex: _group_arrays(patients, [p.id for p in patients if p.sex == sex])
              for sex in ("female", "male") if any(p.sex == sex for p in patients)}
    P.km_plot(by_sex, out / "km_sex.svg", "Sex")
    P.curves_plot({pid: curves[pid] for pid in sorted(curves)[:10]}, out / "curves.svg",
                  "Predicted survival curves")
    return report


def _overall(risk, patients):
    try:
        test = ST.risk_logrank(risk, patients)
    except UndefinedMetricError:
        test = None
    return ST.SubgroupResult("all", "all", len(patients), risk, test)


def cmd_stratify(run_dir, data_dir, out_dir=None, by="t_stage"):
    models = _load_run(run_dir)
    cohort = _load_data(data_dir)
    out = Path(out_dir or Path(run_dir) / "stratify")
    curves = predict_cohort(models, cohort, run_dir)
    areas = {pid: S.auspc(c) for pid, c in curves.items()}
    results = [_overall(ST.assign_risk(areas), cohort.patients)]
    results += ST.subgroup_stratify(cohort.patients, areas, by=by)
    _write(out / "stratification.csv", ST.stratification_csv(results))
    _write(out / "stratification.json", ST.stratification_json(results))
    for r in results:
        if r.assignment is None:
            continue
        members = [p for p in cohort.patients if p.id in r.assignment.group_of]
        groups = {f"{g} risk": _group_arrays(members, r.assignment.members(g)) for g in (ST.HIGH, ST.LOW)}
        P.km_plot(groups, out / f"km_{r.category}_{r.value}.svg", f"{r.category} = {r.value}")
    return results


def cmd_baseline(config: RunConfig, data_dir, run_dir, test_dir=None):
    """Train the comparison arms on ``data_dir`` and score them on ``test_dir``."""
    cohort = _load_data(data_dir)
    test = _load_data(test_dir) if test_dir else cohort
    run = Path(run_dir)
    bank = B.train_horizon_bank(cohort, config, config.seed, run_dir=run)

    tab_cfg = B.tabular_config(config)
    tab_models, _ = T.train_cv(cohort, config.train.k_folds, tab_cfg, config.seed,
                               run_dir=run / "tabular")
    stats = C.compute_cohort_stats(cohort.patients)
    times, events = C.survival_arrays(cohort.patients)
    cox = B.cox_tabular(C.feature_matrix(cohort.patients, stats), times, events, config.train, config.seed)

    grid = evaluation_grid()
    tab_curves = predict_cohort(tab_models, test, None, grid)
    arms = {"horizon_bank": S.horizon_report(B.bank_probs(bank, test), test.patients),
            "tabular": S.evaluate_curves(tab_curves, test.patients)}
    x_test = C.feature_matrix(test.patients, stats)
    cox_probs = {y: list(cox.survival(x_test, S.years_to_days(y))) for y in S.HORIZONS_YEARS}
    arms["cox"] = S.horizon_report(cox_probs, test.patients)
    arms["cox"].c_index = S.c_index(cox.risk(x_test), *C.survival_arrays(test.patients))
    img_models = T.load_models(run)
    if img_models:
        img_curves = predict_cohort(img_models, test, None, grid)
        arms["imaging"] = S.evaluate_curves(img_curves, test.patients)
        ens = {pid: M.SurvivalCurve(grid, B.ensemble(img_curves[pid].probs, tab_curves[pid].probs), True)
               for pid in img_curves}
        arms["ensemble"] = S.evaluate_curves(ens, test.patients)
    _write(run / "baseline" / "report.csv", arms_csv(arms))
    _write(run / "baseline" / "eligible.json",
           json.dumps({str(y): list(v) for y, v in bank.eligible.items()}, indent=1) + "\n")
    return arms


def arms_csv(arms: dict) -> str:
    names = list(arms)
    buf = io.StringIO()
    buf.write("years," + ",".join(names) + "\n")
    for years in S.HORIZONS_YEARS:
        vals = [arms[n].auc_by_horizon.get(years) for n in names]
        buf.write(f"{years:.6g}," + ",".join("" if v is None else f"{v:.6g}" for v in vals) + "\n")
    buf.write("Mean," + ",".join("" if arms[n].mean_auc is None else f"{arms[n].mean_auc:.6g}"
                                 for n in names) + "\n")
    buf.write("C-index," + ",".join("" if arms[n].c_index is None else f"{arms[n].c_index:.6g}"
                                    for n in names) + "\n")
    return buf.getvalue()


def cmd_saliency(run_dir, data_dir, patient_id, t_years, out_dir=None, fold=0):
    models = _load_run(run_dir)
    cohort = _load_data(data_dir)
    by_id = cohort.by_id()
    if patient_id not in by_id:
        raise BadReference(f"unknown patient id {patient_id!r}")
    params = models[fold]
    vs = cohort.volumes[patient_id].load()
    collage = build_collage(vs)
    x = M.normalize_collage(collage)
    t_norm = min(S.years_to_days(t_years), 1825) / 1825.0
    heat = M.saliency(params, x, t_norm)
    out = Path(out_dir or Path(run_dir) / "saliency")
    stem = f"{patient_id}_{t_years:g}y"
    P.write_pgm(out / f"{stem}.pgm", heat)
    P.saliency_plot(heat, collage.channels[0], out / f"{stem}.svg", f"{patient_id} at {t_years:g} years")
    tumor = projected_tumor_mask(vs.tumor_mask)
    np.save(out / f"{stem}_tumor.npy", tumor)
    overlap = M.saliency_overlap(heat, tumor)
    summary = {"patient": patient_id, "years": t_years, "fold": fold,
               "top_decile_in_tumor": None if np.isnan(overlap) else float(f"{overlap:.6g}")}
    _write(out / f"{stem}.json", json.dumps(summary, indent=1) + "\n")
    return heat


# --------------------------------------------------------------------- main

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="chronosurv", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=False, data=False, run=False, out=False):
        if config:
            p.add_argument("--config", help="key = value config file")
            p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                           help="override a config key (repeatable)")
            p.add_argument("--seed", type=int)
        if data:
            p.add_argument("--data", required=True, help="cohort directory")
        if run:
            p.add_argument("--run", required=True, help="run directory")
        if out:
            p.add_argument("--out", help="output directory")
        return p

    common(sub.add_parser("synth", help="generate a synthetic cohort"), config=True)
    sub.choices["synth"].add_argument("--out", required=True)
    common(sub.add_parser("project", help="cache projection collages"), data=True, out=True)
    common(sub.add_parser("train", help="cross-validated training"), config=True, data=True, run=True)
    common(sub.add_parser("evaluate", help="metrics, reports and plots"), data=True, run=True, out=True)
    p = common(sub.add_parser("baseline", help="train and score comparison arms"), config=True, data=True, run=True)
    p.add_argument("--test", help="cohort to score on (default: --data)")
    p = common(sub.add_parser("stratify", help="risk groups and subgroup log-rank"), data=True, run=True, out=True)
    p.add_argument("--by", default="t_stage")
    p = common(sub.add_parser("saliency", help="input-gradient heat map"), data=True, run=True, out=True)
    p.add_argument("--patient", required=True)
    p.add_argument("--years", type=float, default=1.0)
    p.add_argument("--fold", type=int, default=0)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command in ("synth", "train", "baseline"):
            cfg = resolve_config(args.config, args.set, args.seed)
        if args.command == "synth":
            cmd_synth(cfg, args.out)
        elif args.command == "project":
            cmd_project(args.data, args.out)
        elif args.command == "train":
            cmd_train(cfg, args.data, args.run)
        elif args.command == "evaluate":
            report = cmd_evaluate(args.run, args.data, args.out)
            print(report.to_csv(), end="")
        elif args.command == "baseline":
            arms = cmd_baseline(cfg, args.data, args.run, args.test)
            print(arms_csv(arms), end="")
        elif args.command == "stratify":
            print(ST.stratification_json(cmd_stratify(args.run, args.data, args.out, args.by)), end="")
        elif args.command == "saliency":
            cmd_saliency(args.run, args.data, args.patient, args.years, args.out, args.fold)
    except InvalidConfigError as exc:
        print(f"config error: {exc} (key: {exc.key})", file=sys.stderr)
        return EXIT_CONFIG
    except AbortEpochError as exc:
        print(f"training aborted: {exc} {exc.diagnostics}", file=sys.stderr)
        return EXIT_TRAIN
    except MissingArtifact as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except BadReference as exc:
        print(f"bad reference: {exc}", file=sys.stderr)
        return EXIT_REF
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 1
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
