"""Versioned JSON documents for fitted models, plus atomic file writes."""

import json
import os
import tempfile

import numpy as np

from .models.types import FittedModel, LoadingMatrix, OptimizerState, SubjectFactors

MODEL_SCHEMA = 1


class SchemaError(ValueError):
    pass


def model_to_dict(model):
    """Plain-JSON form of a :class:`FittedModel`.

    Floats go through ``repr`` round-tripping in :mod:`json`, which is exact
    for IEEE doubles.
    """
    W = model.loading.values
    state = model.optimizer_state
    subjects = {}
    for sid, f in model.factors.items():
        noise = f.noise if np.ndim(f.noise) == 0 else [float(x) for x in f.noise]
        subjects[sid] = {
            "activities": [float(x) for x in f.activities],
            "noise": noise,
            "n_obs": int(model.n_obs.get(sid, 0)),
        }
    return {
        "schema_version": MODEL_SCHEMA,
        "kind": "fitted_model",
        "regime": model.loading.regime,
        "k": int(model.k),
        "p": int(W.shape[0]),
        "loading": [float(x) for x in W.ravel(order="C")],
        "subjects": subjects,
        "optimizer": {
            "iterations": int(state.iteration),
            "converged": bool(state.converged),
            "final_objective": state.objective_trace[-1] if state.objective_trace else None,
            "constraint_violation": float(state.constraint_violation),
            "penalty_weight": float(state.penalty_weight),
            "step_size": float(state.step_size),
            "lagrange_multipliers": [float(x) for x in np.asarray(state.lagrange_multipliers).ravel()],
        },
        "metadata": _jsonable(model.metadata),
    }


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def model_from_dict(doc):
    if doc.get("kind") != "fitted_model":
        raise SchemaError(f"not a fitted model document (kind={doc.get('kind')!r})")
    if doc.get("schema_version") != MODEL_SCHEMA:
        raise SchemaError(f"unsupported model schema_version {doc.get('schema_version')!r}; expected {MODEL_SCHEMA}")
    p, k = int(doc["p"]), int(doc["k"])
    W = np.array(doc["loading"], dtype=float).reshape(p, k)
    factors, n_obs = {}, {}
    for sid, entry in doc["subjects"].items():
        noise = entry["noise"]
        noise = float(noise) if np.ndim(noise) == 0 else np.array(noise, dtype=float)
        factors[sid] = SubjectFactors(np.array(entry["activities"], dtype=float), noise)
        n_obs[sid] = int(entry["n_obs"])
    opt = doc["optimizer"]
    trace = [] if opt["final_objective"] is None else [float(opt["final_objective"])]
    state = OptimizerState(
        np.array(opt["lagrange_multipliers"], dtype=float).reshape(k, k),
        float(opt["penalty_weight"]),
        float(opt["step_size"]),
        int(opt["iterations"]),
        trace,
        bool(opt["converged"]),
        float(opt["constraint_violation"]),
    )
    return FittedModel(LoadingMatrix(W, doc["regime"]), factors, k, state, n_obs, dict(doc.get("metadata", {})))


def dumps(doc):
    return json.dumps(doc, indent=2, sort_keys=True, allow_nan=False) + "\n"


def atomic_write_text(path, text):
    """Write via a temporary file in the same directory, then rename."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_json(path, doc):
    atomic_write_text(path, dumps(doc))


def load_json(path):
    with open(path) as fh:
        return json.load(fh)


def save_model(path, model):
    save_json(path, model_to_dict(model))


def load_model(path):
    return model_from_dict(load_json(path))
