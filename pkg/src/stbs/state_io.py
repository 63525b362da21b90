"""Versioned on-disk containers: model state, ground truth, reports, and
run configuration.  Everything is JSON with sorted keys so identical runs
produce byte-identical files."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields

import numpy as np

from .corpus import Covariate, CovariateTable, DesignMatrix
from .errors import ConfigError, SchemaError
from .inference import ADAM_PARAM_NAMES, FitConfig, Hyperparams, VariationalState
from .synth import GroundTruth

STATE_SCHEMA = "stbs_state_v1"
TRUTH_SCHEMA = "stbs_truth_v1"
REPORT_SCHEMA = "stbs_report_v1"

_STATE_BLOCKS = (
    "theta_shp", "theta_rte", "b_theta_shp", "b_theta_rte",
    "beta_shp", "beta_rte", "b_beta_shp", "b_beta_rte",
    "eta_loc", "eta_uvar", "rho2_shp", "rho2_rte", "b_rho_shp", "b_rho_rte",
    "ideal_loc", "ideal_uvar", "iprec_shp", "iprec_rte",
    "iota_loc", "iota_chol", "iota_center_loc", "iota_center_var",
    "omega2_shp", "omega2_rte", "b_omega_shp", "b_omega_rte",
)


def _encode_array(arr: np.ndarray) -> dict:
    arr = np.asarray(arr)
    return {"shape": list(arr.shape), "data": [float(x) for x in arr.ravel()]}


def _decode_array(obj: dict) -> np.ndarray:
    return np.asarray(obj["data"], dtype=np.float64).reshape(obj["shape"])


def _dump(path, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")


def _load(path, schema: str) -> dict:
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    found = payload.get("schema")
    if found != schema:
        raise SchemaError(f"{path}: expected schema {schema!r}, found {found!r}")
    return payload


# ---------------------------------------------------------------------------
# run configuration


def config_to_dict(hyper: Hyperparams, cfg: FitConfig) -> dict:
    out = dict(asdict(hyper))
    out.update(asdict(cfg))
    return out


def config_from_dict(data: dict) -> tuple[Hyperparams, FitConfig]:
    hyper_names = {f.name for f in fields(Hyperparams)}
    cfg_names = {f.name for f in fields(FitConfig)}
    unknown = set(data) - hyper_names - cfg_names
    if unknown:
        raise ConfigError(f"unknown run-config keys: {sorted(unknown)}")
    hyper = Hyperparams(**{k: v for k, v in data.items() if k in hyper_names})
    cfg = FitConfig(**{k: v for k, v in data.items() if k in cfg_names})
    return hyper, cfg


def load_run_config(path) -> tuple[Hyperparams, FitConfig]:
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: run config must be a JSON object")
    return config_from_dict(data)


# ---------------------------------------------------------------------------
# model state


@dataclass
class StateBundle:
    state: VariationalState
    hyper: Hyperparams
    cfg: FitConfig
    design: DesignMatrix | None
    covariates: CovariateTable | None
    doc_author: np.ndarray | None
    vocab: list[str] | None
    rng_state: dict | None


def _design_to_json(design: DesignMatrix) -> dict:
    return {
        "matrix": _encode_array(design.matrix),
        "column_names": list(design.column_names),
        "term_groups": {k: list(v) for k, v in design.term_groups.items()},
    }


def _design_from_json(obj: dict) -> DesignMatrix:
    return DesignMatrix(_decode_array(obj["matrix"]), tuple(obj["column_names"]),
                        {k: tuple(v) for k, v in obj["term_groups"].items()})


def _covariates_to_json(table: CovariateTable) -> dict:
    return {
        "num_authors": table.num_authors,
        "columns": [{"name": c.name, "labels": list(c.labels), "baseline": c.baseline}
                    for c in table.columns],
    }


def _covariates_from_json(obj: dict) -> CovariateTable:
    cols = tuple(Covariate(c["name"], tuple(c["labels"]), c["baseline"])
                 for c in obj["columns"])
    return CovariateTable(obj["num_authors"], cols)


def save_state(path, state: VariationalState, hyper: Hyperparams, cfg: FitConfig,
               design: DesignMatrix | None = None,
               covariates: CovariateTable | None = None,
               doc_author=None, vocab=None, rng_state: dict | None = None) -> None:
    payload = {
        "schema": STATE_SCHEMA,
        "t": state.t,
        "position_mode": state.position_mode,
        "config": config_to_dict(hyper, cfg),
        "blocks": {name: _encode_array(getattr(state, name)) for name in _STATE_BLOCKS},
        "adam_m": {k: _encode_array(v) for k, v in state.adam_m.items()},
        "adam_v": {k: _encode_array(v) for k, v in state.adam_v.items()},
    }
    if design is not None:
        payload["design"] = _design_to_json(design)
    if covariates is not None:
        payload["covariates"] = _covariates_to_json(covariates)
    if doc_author is not None:
        payload["doc_author"] = [int(a) for a in doc_author]
    if vocab is not None:
        payload["vocab"] = list(vocab)
    if rng_state is not None:
        payload["rng_state"] = rng_state
    _dump(path, payload)


def load_state(path) -> StateBundle:
    payload = _load(path, STATE_SCHEMA)
    hyper, cfg = config_from_dict(payload["config"])
    blocks = {name: _decode_array(payload["blocks"][name]) for name in _STATE_BLOCKS}
    state = VariationalState(**blocks, t=int(payload["t"]),
                             position_mode=payload["position_mode"])
    state.adam_m = {k: _decode_array(v) for k, v in payload["adam_m"].items()}
    state.adam_v = {k: _decode_array(v) for k, v in payload["adam_v"].items()}
    missing = set(ADAM_PARAM_NAMES) - set(state.adam_m)
    if missing:
        raise SchemaError(f"{path}: missing Adam moments for {sorted(missing)}")
    design = _design_from_json(payload["design"]) if "design" in payload else None
    covariates = _covariates_from_json(payload["covariates"]) if "covariates" in payload else None
    doc_author = np.asarray(payload["doc_author"], dtype=np.int64) if "doc_author" in payload else None
    vocab = payload.get("vocab")
    rng_state = payload.get("rng_state")
    return StateBundle(state, hyper, cfg, design, covariates, doc_author, vocab, rng_state)


# ---------------------------------------------------------------------------
# ground truth


def save_truth(path, truth: GroundTruth) -> None:
    payload = {"schema": TRUTH_SCHEMA, "seed": int(truth.seed),
               "doc_author": [int(a) for a in truth.doc_author]}
    for f in fields(GroundTruth):
        if f.name in ("seed", "doc_author"):
            continue
        payload[f.name] = _encode_array(getattr(truth, f.name))
    _dump(path, payload)


def load_truth(path) -> GroundTruth:
    payload = _load(path, TRUTH_SCHEMA)
    kw = {"seed": int(payload["seed"]),
          "doc_author": np.asarray(payload["doc_author"], dtype=np.int64)}
    for f in fields(GroundTruth):
        if f.name in ("seed", "doc_author"):
            continue
        kw[f.name] = _decode_array(payload[f.name])
    return GroundTruth(**kw)


# ---------------------------------------------------------------------------
# reports


def save_report(path, sections: dict) -> None:
    payload = {"schema": REPORT_SCHEMA}
    payload.update(sections)
    _dump(path, payload)


def load_report(path) -> dict:
    return _load(path, REPORT_SCHEMA)
