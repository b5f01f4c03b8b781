"""Command-line front end.

Every command reads a JSON config (validated against a strict schema), writes
tidy CSV / JSON outputs under ``--out`` and reports failures as a JSON object
on stderr.  Exit codes: 0 success, 2 config error, 3 data error, 4 total fit
failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import jsonschema
import numpy as np
import pandas as pd

from . import model as mdl
from .basis import bspline_basis, eval_basis
from .datamodel import DataError, ObservationKey, load_dataset, normalize_long_time, split_test, write_exclusion_report
from .lmm import CovSpec, RemlOptions, build_design, residual_diagnostics
from .longitudinal import longitudinal_from_config
from .mvfpca import project_scores
from .sim import (
    GeneratorParams,
    ScenarioConfig,
    default_params,
    ispe,
    recovery_study,
    run_scenario,
    variant_setup,
)

logger = logging.getLogger("mvlfmm")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_FIT = 0, 2, 3, 4
FLOAT = "%.17g"


class ConfigError(Exception):
    pass


class FitFailure(Exception):
    pass


# -- schemas ----------------------------------------------------------------------------
_LEVEL = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "structure": {"enum": ["unstructured", "diagonal"]},
        "columns": {"type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 1},
    },
}
_REML = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "n_restarts": {"type": "integer", "minimum": 0},
        "tol": {"type": "number", "exclusiveMinimum": 0},
        "max_iter": {"type": "integer", "minimum": 1},
    },
}
_DATA_PROPS = {
    "curves": {"type": "string"},
    "covariates": {"type": "string"},
    "covariate_names": {"type": "array", "items": {"type": "string"}},
    "dim_names": {"type": "array", "items": {"type": "string"}, "minItems": 1},
    "normalize_T": {"type": "boolean"},
    "holdout_per_side": {"type": "integer", "minimum": 0},
}
_MODEL_PROPS = {
    "model": {"enum": ["naive", "spline", "polynomial", "mlfpca", "custom"]},
    "functional_basis": {
        "type": "object",
        "additionalProperties": False,
        "properties": {
            "kind": {"enum": ["bspline"]},
            "n_basis": {"type": "integer", "minimum": 4},
            "order": {"type": "integer", "minimum": 1},
        },
    },
    "truncation": {
        "type": "object",
        "additionalProperties": False,
        "properties": {"pve": {"type": "number", "exclusiveMinimum": 0, "maximum": 1}, "k": {"type": "integer", "minimum": 1}},
        "minProperties": 1,
        "maxProperties": 1,
    },
    "longitudinal_basis": {
        "type": "object",
        "additionalProperties": False,
        "properties": {
            "kind": {"enum": ["constant", "natural_cubic", "ortho_poly"]},
            "n_basis": {"type": "integer", "minimum": 1},
            "degree": {"type": "integer", "minimum": 1},
            "grid_size": {"type": "integer", "minimum": 2},
        },
        "required": ["kind"],
    },
    "covspec": {
        "type": "object",
        "additionalProperties": False,
        "properties": {"subject": _LEVEL, "side": {"oneOf": [_LEVEL, {"type": "null"}]}},
        "required": ["subject"],
    },
    "mlfpca_pve": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
    "reml": _REML,
}

SCHEMAS = {
    "fit": {
        "type": "object",
        "additionalProperties": False,
        "properties": {**_DATA_PROPS, **_MODEL_PROPS, "max_lag": {"type": "integer", "minimum": 0}, "level": {"type": "number"}},
        "required": ["curves", "covariates"],
    },
    "bootstrap": {
        "type": "object",
        "additionalProperties": False,
        "properties": {
            **_DATA_PROPS,
            **_MODEL_PROPS,
            "B": {"type": "integer", "minimum": 1},
            "level": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        },
        "required": ["curves", "covariates", "B"],
    },
    "diagnose": {
        "type": "object",
        "additionalProperties": False,
        "properties": {
            "bundle": {"type": "string"},
            **_DATA_PROPS,
            "max_lag": {"type": "integer", "minimum": 0},
        },
        "required": ["bundle", "curves", "covariates"],
    },
    "predict": {
        "type": "object",
        "additionalProperties": False,
        "properties": {"bundle": {"type": "string"}, "query": {"type": "string"}},
        "required": ["bundle", "query"],
    },
    "evaluate": {
        "type": "object",
        "additionalProperties": False,
        "properties": {
            "observed": {"type": "string"},
            "predictions": {"type": "object", "additionalProperties": {"type": "string"}, "minProperties": 1},
            "reference": {"type": "string"},
        },
        "required": ["observed", "predictions"],
    },
    "simulate": {
        "type": "object",
        "additionalProperties": False,
        "properties": {
            "study": {"enum": ["scenario", "recovery"]},
            "params": {"type": "string"},
            "scenario": {
                "type": "object",
                "additionalProperties": False,
                "properties": {
                    "name": {"type": "string"},
                    "n_subjects": {"type": "integer", "minimum": 1},
                    "n_per_side": {"type": "integer", "minimum": 1},
                    "missing_prop": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                    "strength": {"type": "number", "minimum": 1},
                    "models": {"type": "array", "items": {"enum": ["polynomial", "naive", "spline", "mlfpca"]}, "minItems": 1},
                    "pve": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                    "replicates": {"type": "integer", "minimum": 1},
                    "test_per_side": {"type": "integer", "minimum": 0},
                    "n_restarts": {"type": "integer", "minimum": 0},
                    "reml_tol": {"type": "number", "exclusiveMinimum": 0},
                    "record_timing": {"type": "boolean"},
                },
            },
            "mode": {"enum": ["zero_fixed", "with_fixed"]},
            "n_replicates": {"type": "integer", "minimum": 2},
            "n_mc": {"type": "integer", "minimum": 1000},
        },
    },
}


def load_config(path, command: str) -> dict:
    if path is None:
        cfg = {}
    else:
        try:
            cfg = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON in config: {exc}") from exc
    validate(cfg, command)
    return cfg


def validate(cfg: dict, command: str) -> None:
    try:
        jsonschema.validate(cfg, SCHEMAS[command])
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"{where}: {exc.message}") from None


# -- shared pieces --------------------------------------------------------------------------------
def _prepare(cfg: dict, seed: int) -> tuple:
    """Load, optionally normalise T and split; returns ``(train, test, exclusions)``."""
    ds = load_dataset(cfg["curves"], cfg["covariates"], cfg.get("dim_names"))
    if cfg.get("normalize_T", True):
        ds = normalize_long_time(ds)
    if float(ds.long_time.min()) < 0 or float(ds.long_time.max()) > 1:
        raise DataError("longitudinal time outside [0, 1]; enable normalize_T")
    holdout = int(cfg.get("holdout_per_side", 0))
    if holdout:
        train, test = split_test(ds, holdout, seed)
        return train, test, list(train.exclusions)
    return ds, None, list(ds.exclusions)


def _model_setup(cfg: dict) -> tuple:
    name = cfg.get("model", "spline")
    if name == "custom":
        if "longitudinal_basis" not in cfg or "covspec" not in cfg:
            raise ConfigError("model 'custom' needs longitudinal_basis and covspec")
        lb = longitudinal_from_config(cfg["longitudinal_basis"])
        return lb, CovSpec.from_dict(cfg["covspec"]), False
    lb, cs, ml = variant_setup(name)
    if "longitudinal_basis" in cfg:
        lb = longitudinal_from_config(cfg["longitudinal_basis"])
    if "covspec" in cfg and not ml:
        cs = CovSpec.from_dict(cfg["covspec"])
    return lb, cs, ml


def _reml_opts(cfg: dict, seed: int) -> RemlOptions:
    r = cfg.get("reml", {})
    return RemlOptions(
        tol=float(r.get("tol", 1e-8)), max_iter=int(r.get("max_iter", 10_000)), n_restarts=int(r.get("n_restarts", 3)), seed=seed
    )


def _fit_from_config(cfg: dict, seed: int, workers: int) -> tuple:
    train, test, exclusions = _prepare(cfg, seed)
    names = cfg.get("covariate_names") or list(train.covariates.names)
    fb = cfg.get("functional_basis", {})
    lo, hi = float(train.grid[0]), float(train.grid[-1])
    basis = bspline_basis(int(fb.get("n_basis", 20)), int(fb.get("order", 4)), (lo, hi))
    lb, cs, ml = _model_setup(cfg)
    meta = {
        "model": cfg.get("model", "spline"),
        "seed": seed,
        "normalize_T": bool(cfg.get("normalize_T", True)),
        "holdout_per_side": int(cfg.get("holdout_per_side", 0)),
        "bootstrap_basis": "full-data mv-FPCA",
    }
    fit = mdl.fit_model(
        train,
        names,
        lb,
        cs,
        cfg.get("truncation", {"pve": 0.995}),
        basis=basis,
        opts=_reml_opts(cfg, seed),
        mlfpca=ml,
        mlfpca_pve=float(cfg.get("mlfpca_pve", 0.995)),
        workers=workers,
        metadata=meta,
    )
    if all(not np.isfinite(f.reml_deviance) for f in fit.fits):
        raise FitFailure("every score model failed")
    return fit, train, test, exclusions


def _curve_frame(fit, rows: list) -> pd.DataFrame:
    return pd.DataFrame(rows)


def fixed_effect_frame(fit, level: float = 0.95, bands: dict | None = None) -> pd.DataFrame:
    """Tidy fixed-effect curves: ``covariate,dimension,t,estimate,lower_pw,upper_pw,lower_sim,upper_sim``."""
    frames = []
    for a, name in enumerate(fit.covariate_names):
        est, var = mdl.fixed_effect_curve(fit, a)
        if bands is not None:
            pw, sim = bands[name]["pointwise"], bands[name]["simultaneous"]
            lo_pw, hi_pw, lo_s, hi_s = pw["lower"], pw["upper"], sim["lower"], sim["upper"]
        else:
            lo_pw, hi_pw = mdl.model_pointwise_band(est, var, level)
            lo_s = hi_s = np.full_like(est, np.nan)
        for p, dim in enumerate(fit.fpca.dim_names):
            frames.append(
                pd.DataFrame(
                    {
                        "covariate": name,
                        "dimension": dim,
                        "t": fit.grid,
                        "estimate": est[p],
                        "lower_pw": lo_pw[p],
                        "upper_pw": hi_pw[p],
                        "lower_sim": lo_s[p],
                        "upper_sim": hi_s[p],
                    }
                )
            )
    return pd.concat(frames, ignore_index=True)


def _designs(fit, data) -> list:
    scores = project_scores(data, fit.fpca)
    cov = data.covariate_matrix(list(fit.covariate_names))
    out = []
    for k in range(fit.K):
        d = build_design(
            scores.scores[:, k], scores.subject_ids, scores.sides, scores.long_time, cov, fit.long_basis,
            fit.covspecs[k], k, fit.covariate_names,
        )
        out.append(d)
    return out


def write_diagnostics(fit, data, out: Path, max_lag: int) -> dict:
    """Residual ACF, Q-Q data, score trajectories with fits and change metrics."""
    acf_rows, qq_rows, traj = [], [], []
    for k, d in enumerate(_designs(fit, data)):
        f = fit.fits[k]
        # re-index stored BLUPs to this design's groups
        f_local = _reindex(f, d)
        diag = residual_diagnostics(f_local, d, max_lag)
        for h, (r, n) in enumerate(zip(diag["acf"], diag["n_pairs"])):
            acf_rows.append({"k": k + 1, "lag": h, "acf": r, "n_pairs": int(n)})
        for theo, obs in diag["resid_quantiles"]:
            qq_rows.append({"k": k + 1, "kind": "residual", "column": 0, "theoretical": theo, "sample": obs})
        for lvl in ("subject", "side"):
            for c, arr in enumerate(diag["blup_quantiles"][lvl]):
                for theo, obs in arr:
                    qq_rows.append({"k": k + 1, "kind": f"blup_{lvl}", "column": c, "theoretical": theo, "sample": obs})
        fitted = d.response - _resid(f_local, d)
        traj.append(pd.DataFrame({
            "subject_id": [d.subject_labels[i] for i in d.subject_index],
            "side": [d.group_labels[g][1] for g in d.group_index],
            "T": d.long_time, "k": k + 1, "observed": d.response, "fitted": fitted,
        }))
    pd.DataFrame(acf_rows).to_csv(out / "diagnostics_acf.csv", index=False, float_format=FLOAT)
    pd.DataFrame(qq_rows).to_csv(out / "diagnostics_qq.csv", index=False, float_format=FLOAT)
    pd.concat(traj, ignore_index=True).to_csv(out / "score_trajectories.csv", index=False, float_format=FLOAT)
    change = []
    for sid, side in data.groups:
        m = mdl.change_metrics(fit, sid, side)
        change.append({"subject_id": sid, "side": side, **m})
    pd.DataFrame(change).to_csv(out / "change_metrics.csv", index=False, float_format=FLOAT)
    return {"max_lag": max_lag}


def _reindex(f, d):
    from dataclasses import replace as dc_replace

    u = np.array([f.blup_u(s) if f.blup_u(s) is not None else np.zeros(f.blups_u.shape[1]) for s in d.subject_labels])
    v = np.array(
        [f.blup_v(*g) if f.blup_v(*g) is not None else np.zeros(f.blups_v.shape[1]) for g in d.group_labels]
    ).reshape(len(d.group_labels), -1)
    return dc_replace(f, blups_u=u.reshape(len(d.subject_labels), -1), blups_v=v,
                      subject_labels=list(d.subject_labels), group_labels=list(d.group_labels))


def _resid(f, d):
    from .lmm import conditional_residuals

    return conditional_residuals(f, d)


def _summary(fit) -> dict:
    return {
        "K": fit.K,
        "pve": float(fit.fpca.pve[-1]),
        "eigenvalues": fit.fpca.eigenvalues.tolist(),
        "covariates": list(fit.covariate_names),
        "singular_count": int(sum(fit.singular_flags)),
        "singular": [bool(s) for s in fit.singular_flags],
        "converged": [bool(f.converged) for f in fit.fits],
    }


def _write_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


# -- commands ---------------------------------------------------------------------------------
def cmd_fit(cfg: dict, seed: int, workers: int, out: Path) -> int:
    fit, train, test, exclusions = _fit_from_config(cfg, seed, workers)
    out.mkdir(parents=True, exist_ok=True)
    mdl.save_bundle(fit, out / "bundle")
    fixed_effect_frame(fit, float(cfg.get("level", 0.95))).to_csv(out / "fixed_effects.csv", index=False, float_format=FLOAT)
    write_diagnostics(fit, train, out, int(cfg.get("max_lag", 10)))
    _write_json({"singular": [{"k": k + 1, "singular": bool(f.singular)} for k, f in enumerate(fit.fits)],
                 "count": int(sum(fit.singular_flags))}, out / "singular_report.json")
    write_exclusion_report(out / "exclusions.json", exclusions)
    summary = _summary(fit)
    if test is not None:
        pred, seen = mdl.predict_dataset(fit, test)
        errs = ispe(pred, test.values, test.grid)
        pd.DataFrame({
            "subject_id": test.subject_ids, "side": test.sides, "stride": test.strides, "T": test.long_time,
            "ispe": np.atleast_1d(errs), "population": ~seen,
        }).to_csv(out / "test_ispe.csv", index=False, float_format=FLOAT)
        summary["test_mean_ispe"] = float(np.mean(errs))
    _write_json(summary, out / "summary.json")
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_bootstrap(cfg: dict, seed: int, workers: int, out: Path) -> int:
    fit, train, _, _ = _fit_from_config(cfg, seed, workers)
    level = float(cfg.get("level", 0.95))
    boot = mdl.bootstrap_fixed_effects(train, fit, int(cfg["B"]), seed, _reml_opts(cfg, seed), workers)
    if boot["curves"].shape[1] == 0:
        raise FitFailure("every bootstrap replicate failed")
    bands = {}
    for a, name in enumerate(fit.covariate_names):
        est, _ = mdl.fixed_effect_curve(fit, a)
        bands[name] = {
            "pointwise": mdl.pointwise_band(est, boot["curves"][a], level),
            "simultaneous": mdl.simultaneous_band(est, boot["curves"][a], level),
        }
    out.mkdir(parents=True, exist_ok=True)
    fixed_effect_frame(fit, level, bands).to_csv(out / "bands.csv", index=False, float_format=FLOAT)
    summary = {"B": int(cfg["B"]), "failures": int(boot["failures"]), "level": level, "basis": boot["basis"],
               "q_sim": {n: bands[n]["simultaneous"]["q"] for n in fit.covariate_names}}
    _write_json(summary, out / "bootstrap_summary.json")
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_diagnose(cfg: dict, seed: int, workers: int, out: Path) -> int:
    fit = mdl.load_bundle(cfg["bundle"])
    prep = dict(cfg)
    prep.setdefault("normalize_T", fit.metadata.get("normalize_T", True))
    prep.setdefault("holdout_per_side", fit.metadata.get("holdout_per_side", 0))
    train, _, _ = _prepare(prep, int(fit.metadata.get("seed", seed)))
    out.mkdir(parents=True, exist_ok=True)
    write_diagnostics(fit, train, out, int(cfg.get("max_lag", 10)))
    return EXIT_OK


def cmd_predict(cfg: dict, seed: int, workers: int, out: Path) -> int:
    fit = mdl.load_bundle(cfg["bundle"])
    try:
        query = pd.read_csv(cfg["query"], dtype={"subject_id": str, "side": str}, float_precision="round_trip")
    except (OSError, pd.errors.ParserError) as exc:
        raise DataError(f"cannot read query file: {exc}") from exc
    except pd.errors.EmptyDataError:
        query = pd.DataFrame(columns=["subject_id", "side", "T", *fit.covariate_names])
    needed = ["subject_id", "side", "T", *fit.covariate_names]
    missing = [c for c in needed if c not in query.columns]
    if missing:
        raise DataError(f"query file lacks columns {missing}")
    bad = []
    for i, row in query.iterrows():
        line = i + 2
        try:
            T = float(row["T"])
            vals = [float(row[c]) for c in fit.covariate_names]
        except (TypeError, ValueError):
            bad.append(line)
            continue
        if not (0.0 <= T <= 1.0) or not np.all(np.isfinite(vals)) or row["side"] not in ("left", "right"):
            bad.append(line)
    if bad:
        raise DataError(f"malformed query rows at lines {bad}")
    frames = []
    for i, row in query.iterrows():
        stride = int(row["stride"]) if "stride" in query.columns and pd.notna(row.get("stride")) else i + 1
        key = ObservationKey(str(row["subject_id"]), str(row["side"]), stride, float(row["T"]))
        x = np.array([float(row[c]) for c in fit.covariate_names])
        scores, seen = mdl.predicted_scores(fit, key, x)
        values = fit.fpca.mean.values + np.einsum("k,kpg->pg", scores, fit.fpca.psi_grid)
        for p, dim in enumerate(fit.fpca.dim_names):
            frames.append(pd.DataFrame({
                "row": i + 1, "subject_id": key.subject_id, "side": key.side, "stride": stride, "T": key.long_time,
                "population": not seen, "dimension": dim, "t": fit.grid, "value": values[p],
            }))
    cols = ["row", "subject_id", "side", "stride", "T", "population", "dimension", "t", "value"]
    frame = pd.concat(frames, ignore_index=True) if frames else pd.DataFrame(columns=cols)
    out.mkdir(parents=True, exist_ok=True)
    frame[cols].to_csv(out / "predictions.csv", index=False, float_format=FLOAT)
    return EXIT_OK


def _wide(frame: pd.DataFrame, keys: list) -> tuple:
    frame = frame.sort_values(keys + ["dimension", "t"], kind="stable")
    dims = list(dict.fromkeys(frame["dimension"]))
    grid = np.sort(frame["t"].unique())
    groups = frame.groupby(keys, sort=True)
    idx, vals = [], []
    for key, g in groups:
        if len(g) != len(dims) * grid.size:
            raise DataError(f"curve {key} is not on the common grid")
        idx.append(key)
        vals.append(g.pivot(index="dimension", columns="t", values="value").loc[dims].to_numpy())
    return idx, np.array(vals), grid


def cmd_evaluate(cfg: dict, seed: int, workers: int, out: Path) -> int:
    keys = ["subject_id", "side", "stride"]
    try:
        obs = pd.read_csv(cfg["observed"], dtype={"subject_id": str, "side": str}, float_precision="round_trip")
        preds = {n: pd.read_csv(p, dtype={"subject_id": str, "side": str}, float_precision="round_trip") for n, p in cfg["predictions"].items()}
    except (OSError, pd.errors.ParserError) as exc:
        raise DataError(f"cannot read evaluation inputs: {exc}") from exc
    o_idx, o_vals, grid = _wide(obs, keys)
    lookup = {k: i for i, k in enumerate(o_idx)}
    rows = []
    for name, frame in preds.items():
        p_idx, p_vals, p_grid = _wide(frame, keys)
        if p_grid.size != grid.size or np.max(np.abs(p_grid - grid)) > 1e-9:
            raise DataError(f"grid mismatch between observed curves and predictions '{name}'")
        for key, v in zip(p_idx, p_vals):
            if key not in lookup:
                raise DataError(f"prediction {key} has no observed curve")
            rows.append({"model": name, "subject_id": key[0], "side": key[1], "stride": key[2],
                         "ispe": ispe(v, o_vals[lookup[key]], grid)})
    per_stride = pd.DataFrame(rows)
    per_subject = per_stride.groupby(["model", "subject_id"], sort=True)["ispe"].mean().reset_index(name="mean_ispe")
    ref = cfg.get("reference")
    if ref is not None:
        if ref not in preds:
            raise ConfigError(f"reference model '{ref}' is not among the predictions")
        base = per_subject[per_subject["model"] == ref].set_index("subject_id")["mean_ispe"]
        per_subject["ratio"] = per_subject["mean_ispe"].to_numpy() / base.loc[per_subject["subject_id"]].to_numpy()
    out.mkdir(parents=True, exist_ok=True)
    per_stride.to_csv(out / "ispe_per_stride.csv", index=False, float_format=FLOAT)
    per_subject.to_csv(out / "ispe_per_subject.csv", index=False, float_format=FLOAT)
    summary = per_stride.groupby("model")["ispe"].mean().to_dict()
    _write_json({"mean_ispe": summary}, out / "evaluate_summary.json")
    print(json.dumps({"mean_ispe": summary}, sort_keys=True))
    return EXIT_OK


def cmd_simulate(cfg: dict, seed: int, workers: int, out: Path, overrides: dict | None = None) -> int:
    overrides = overrides or {}
    study = overrides.get("study") or cfg.get("study", "scenario")
    params = GeneratorParams.load(cfg["params"]) if "params" in cfg else default_params()
    scen = dict(cfg.get("scenario", {}))
    if overrides.get("strength") is not None:
        scen["strength"] = overrides["strength"]
    scenario = ScenarioConfig(seed=seed, **scen)
    out.mkdir(parents=True, exist_ok=True)
    if study == "recovery":
        mode = overrides.get("mode") or cfg.get("mode", "zero_fixed")
        res = recovery_study(params, mode, int(cfg.get("n_replicates", 100)), scenario, seed, int(cfg.get("n_mc", 100_000)))
        B = eval_basis(res["basis"], res["grid"])
        P = res["n_dims"]
        frames = []
        for label in ("mean_estimated_fpcs", "generating_basis", "rotated_basis"):
            curves = res[label].reshape(res[label].shape[0], P, -1) @ B.T
            for k in range(curves.shape[0]):
                for p in range(P):
                    frames.append(pd.DataFrame({"curve": label, "k": k + 1, "dimension": params.dim_names[p],
                                                "t": res["grid"], "value": curves[k, p]}))
        pd.concat(frames, ignore_index=True).to_csv(out / "recovery_curves.csv", index=False, float_format=FLOAT)
        summary = {"mode": mode, "l2_raw": res["l2_errors"]["raw"].tolist(), "l2_rotated": res["l2_errors"]["rotated"].tolist(),
                   "mean_l2_raw": float(res["l2_errors"]["raw"].mean()),
                   "total_l2_raw": float(res["l2_errors"]["raw"].sum()),
                   "total_l2_rotated": float(res["l2_errors"]["rotated"].sum())}
        _write_json(summary, out / "recovery_summary.json")
        print(json.dumps(summary, sort_keys=True))
        return EXIT_OK
    metrics = run_scenario(params, scenario, workers)
    metrics.to_csv(out / "metrics.csv", index=False, float_format=FLOAT)
    if metrics["ise_beta0"].isna().all():
        raise FitFailure("every replicate failed")
    agg = metrics.groupby("model", sort=True)[["ise_beta0", "ise_beta1", "ise_beta2", "mean_ispe", "singular_count"]].mean()
    summary = {"scenario": scenario.to_dict(), "means": agg.to_dict(orient="index")}
    _write_json(summary, out / "simulate_summary.json")
    print(json.dumps({"rows": int(len(metrics))}))
    return EXIT_OK


COMMANDS = {
    "fit": cmd_fit,
    "bootstrap": cmd_bootstrap,
    "diagnose": cmd_diagnose,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "simulate": cmd_simulate,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--workers", type=int, default=None, help="worker processes (default: available cores)")
    common.add_argument("--out", default="out", help="output directory")
    parser = argparse.ArgumentParser(prog="mvlfmm", description=__doc__.splitlines()[0], parents=[common])
    sub = parser.add_subparsers(dest="command", required=True)
    p_fit = sub.add_parser("fit", parents=[common], help="fit the model and export curves and diagnostics")
    p_fit.add_argument("--model", choices=["naive", "spline", "polynomial", "mlfpca", "custom"])
    p_sim = sub.add_parser("simulate", parents=[common], help="run a simulation scenario or the recovery study")
    p_sim.add_argument("--study", choices=["scenario", "recovery"])
    p_sim.add_argument("--mode", choices=["zero_fixed", "with_fixed"])
    p_sim.add_argument("--strength", type=float)
    sub.add_parser("predict", parents=[common], help="predict curves for query rows")
    sub.add_parser("evaluate", parents=[common], help="ISPE of prediction files against observed curves")
    p_boot = sub.add_parser("bootstrap", parents=[common], help="subject bootstrap bands for covariate effects")
    p_boot.add_argument("--model", choices=["naive", "spline", "polynomial", "mlfpca", "custom"])
    sub.add_parser("diagnose", parents=[common], help="residual diagnostics for a fitted bundle")
    return parser


def _error(kind: str, message: str, code: int) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": message}) + "\n")
    return code


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    workers = args.workers if args.workers is not None else mdl.default_workers()
    try:
        cfg = load_config(args.config, args.command)
        if getattr(args, "model", None):
            cfg["model"] = args.model
            validate(cfg, args.command)
        out = Path(args.out)
        if args.command == "simulate":
            return cmd_simulate(cfg, args.seed, workers, out,
                                {"study": args.study, "mode": args.mode, "strength": args.strength})
        return COMMANDS[args.command](cfg, args.seed, workers, out)
    except ConfigError as exc:
        return _error("config", str(exc), EXIT_CONFIG)
    except (DataError, FileNotFoundError) as exc:
        return _error("data", str(exc), EXIT_DATA)
    except FitFailure as exc:
        return _error("fit", str(exc), EXIT_FIT)


if __name__ == "__main__":
    sys.exit(main())
