"""JSON corpus/graph files, fit exports and deterministic CSV writing.

Files use 1-based word, topic and group indices; the library is 0-based.
"""

from __future__ import annotations

import csv
import hashlib
import json
from pathlib import Path

import numpy as np

from . import __version__
from .lda import LdaParams, LdaState, check_corpus
from .mmsb import FfState, MmsbParams, PgState, check_graph, pair_index

FLOAT_FMT = "{:.12g}"


def fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return FLOAT_FMT.format(float(x))
    return str(x)


def _round(obj):
    """Nested lists with floats rounded through the fixed format (stable JSON)."""
    if isinstance(obj, np.ndarray):
        obj = obj.tolist()
    if isinstance(obj, (list, tuple)):
        return [_round(v) for v in obj]
    if isinstance(obj, (float, np.floating)):
        return float(FLOAT_FMT.format(float(obj)))
    if isinstance(obj, (np.integer,)):
        return int(obj)
    return obj


def dump_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=False) + "\n")


def config_hash(config) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def write_csv(path, header, rows, config=None, seeds=()) -> None:
    """CSV with a provenance comment line, a header, and fixed float formatting."""
    with open(path, "w", newline="") as fh:
        fh.write(f"# config={config_hash(config or {})} seeds={','.join(str(s) for s in seeds)} "
                 f"version=mflatent-{__version__}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])


def read_csv(path):
    """Rows of a CSV written by :func:`write_csv` as dicts (comment line skipped)."""
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


# --- corpus ---------------------------------------------------------------

def corpus_to_json(params: LdaParams, words) -> dict:
    words = check_corpus(params, words)
    return {
        "D": params.D, "K": params.K, "V": params.V,
        "n_d": list(params.n_d),
        "alpha": _round(params.alpha),
        "eta": _round(params.eta),
        "words": [[int(w) + 1 for w in doc] for doc in words],
    }


def corpus_from_json(obj):
    params = LdaParams(obj["alpha"], obj["eta"], obj["n_d"])
    if (obj.get("D", params.D), obj.get("K", params.K), obj.get("V", params.V)) != (params.D, params.K, params.V):
        raise ValueError("declared D/K/V disagree with alpha, eta and n_d")
    words = [np.asarray(doc, dtype=np.int64) - 1 for doc in obj["words"]]
    return params, check_corpus(params, words)


def load_corpus(path):
    return corpus_from_json(json.loads(Path(path).read_text()))


def lda_fit_to_json(state: LdaState, trace) -> dict:
    return {"phi": [_round(p) for p in state.phi], "gamma": _round(state.gamma), "elbo_trace": _round(trace)}


# --- graph ----------------------------------------------------------------

def graph_to_json(params: MmsbParams, X) -> dict:
    X = check_graph(params, X)
    rows = [[None if i == j else int(X[i, j]) for j in range(params.n)] for i in range(params.n)]
    return {"n": params.n, "K": params.K, "alpha": _round(params.alpha), "B": _round(params.B), "X": rows}


def graph_from_json(obj):
    params = MmsbParams(obj["n"], obj["alpha"], obj["B"])
    if obj.get("K", params.K) != params.K:
        raise ValueError("declared K disagrees with alpha")
    X = np.zeros((params.n, params.n), dtype=np.int8)
    for i, row in enumerate(obj["X"]):
        for j, v in enumerate(row):
            if i != j:
                X[i, j] = int(v)
    return params, check_graph(params, X)


def load_graph(path):
    return graph_from_json(json.loads(Path(path).read_text()))


def mmsb_fit_to_json(params: MmsbParams, state, trace) -> dict:
    i, j = pair_index(params.n)
    pairs = [[int(a) + 1, int(b) + 1] for a, b in zip(i, j)]
    out = {"pairs": pairs, "gamma": _round(state.gamma), "elbo_trace": _round(trace)}
    if isinstance(state, PgState):
        out["method"] = "pg"
        out["y"] = _round(state.y.reshape(state.y.shape[0], -1))
    elif isinstance(state, FfState):
        out["method"] = "ff"
        out["y_out"] = _round(state.y_out)
        out["y_in"] = _round(state.y_in)
    else:
        raise TypeError("unknown MMSB state")
    return out
