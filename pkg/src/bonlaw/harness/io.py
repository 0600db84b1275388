"""CSV and JSON emitters/readers with byte-stable formatting.

Floats are written with ``repr`` (shortest round-trip form), files use UTF-8
and LF line endings, JSON is pretty-printed with sorted keys.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import re
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from ..core import CandidatePool, ScalingCurve, UserDataset

CURVE_COLUMNS = ("label", "n", "utility", "trials")
SCORE_COLUMNS = ("user_id", "query_id", "candidate_id", "true_score")
_FEATURE_RE = re.compile(r"^f(\d+)$")


class IngestError(ValueError):
    """Malformed input file; the message names the offending row or column."""


def fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def _csv_bytes(header: Sequence[str], rows: Iterable[Sequence]) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fmt(v) for v in row])
    return buf.getvalue().encode("utf-8")


def curves_csv(curves: Sequence[ScalingCurve]) -> bytes:
    rows = [(c.label, p.n, p.utility, p.trials) for c in curves for p in c.points]
    return _csv_bytes(CURVE_COLUMNS, rows)


def read_curves_csv(path) -> list[ScalingCurve]:
    text = Path(path).read_text(encoding="utf-8")
    reader = csv.DictReader(io.StringIO(text))
    if tuple(reader.fieldnames or ()) != CURVE_COLUMNS:
        raise IngestError(f"{path}: expected header {','.join(CURVE_COLUMNS)}")
    grouped: dict[str, list] = {}
    for row in reader:
        grouped.setdefault(row["label"], []).append(
            (int(row["n"]), float(row["utility"]), int(row["trials"]))
        )
    out = []
    for label, pts in grouped.items():
        ns, us, ts = zip(*pts)
        out.append(ScalingCurve.from_arrays(list(ns), list(us), ts[0], label))
    return out


def table_csv(header: Sequence[str], rows: Iterable[Sequence]) -> bytes:
    return _csv_bytes(header, rows)


def _clean(obj):
    """Make ``obj`` JSON-serialisable; non-finite floats become strings."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_clean(v) for v in obj.tolist()]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        if math.isfinite(v):
            return v
        return "nan" if math.isnan(v) else ("inf" if v > 0 else "-inf")
    return obj


def json_bytes(obj) -> bytes:
    return (json.dumps(_clean(obj), indent=2, sort_keys=True, ensure_ascii=False) + "\n").encode("utf-8")


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


# --- candidate score files ---------------------------------------------------


def scores_csv(datasets: Sequence[UserDataset]) -> bytes:
    """Serialise pools in the ingest schema; optional columns only when every pool has them."""
    pools = [p for d in datasets for p in d.pools]
    with_mean = bool(pools) and all(p.pred_mean is not None for p in pools)
    with_var = with_mean and all(p.pred_var is not None for p in pools)
    dims = {p.features.shape[1] for p in pools if p.features is not None}
    with_feats = bool(pools) and all(p.features is not None for p in pools) and len(dims) == 1
    d = dims.pop() if with_feats else 0
    header = list(SCORE_COLUMNS)
    if with_mean:
        header.append("pred_mean")
    if with_var:
        header.append("pred_var")
    header += [f"f{j}" for j in range(d)]

    def rows():
        for p in pools:
            for i in range(len(p)):
                row = [p.user_id, p.query_id, f"c{i:04d}", float(p.true_scores[i])]
                if with_mean:
                    row.append(float(p.pred_mean[i]))
                if with_var:
                    row.append(float(p.pred_var[i]))
                if d:
                    row += [float(v) for v in p.features[i]]
                yield row

    return _csv_bytes(header, rows())


def _number(text: str, column: str, line: int) -> float:
    try:
        v = float(text)
    except ValueError:
        raise IngestError(f"row {line}: column {column!r} is not a number: {text!r}") from None
    if not math.isfinite(v):
        raise IngestError(f"row {line}: column {column!r} is not finite: {text!r}")
    return v


def ingest_scores_csv(path) -> list[UserDataset]:
    """Read a candidate score file into per-user datasets.

    Required columns: user_id, query_id, candidate_id, true_score. Optional:
    pred_mean, pred_var (needs pred_mean) and feature columns f0..f{d-1}.
    Rows are grouped into pools by (user_id, query_id); users and queries keep
    their first-appearance order and rows keep file order within a pool. Row
    numbers in errors are file line numbers (the header is line 1).
    """
    path = Path(path)
    if not path.is_file():
        raise IngestError(f"{path}: no such file")
    with path.open("r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise IngestError(f"{path}: empty file (header row required)") from None
        missing = [c for c in SCORE_COLUMNS if c not in header]
        if missing:
            raise IngestError(f"{path}: missing required column(s) {', '.join(missing)}")
        if len(set(header)) != len(header):
            raise IngestError(f"{path}: duplicate column names in header")
        col = {name: i for i, name in enumerate(header)}
        if "pred_var" in col and "pred_mean" not in col:
            raise IngestError(f"{path}: pred_var given without pred_mean")
        feat_idx = sorted(int(m.group(1)) for h in header if (m := _FEATURE_RE.match(h)))
        if feat_idx != list(range(len(feat_idx))):
            raise IngestError(f"{path}: feature columns must be f0..f{{d-1}} without gaps")
        feat_cols = [col[f"f{j}"] for j in feat_idx]

        users: dict[str, dict[str, list]] = {}
        seen: set[tuple[str, str, str]] = set()
        for line, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise IngestError(f"row {line}: expected {len(header)} fields, got {len(row)}")
            uid, qid, cid = (row[col[c]].strip() for c in SCORE_COLUMNS[:3])
            if not uid or not qid or not cid:
                raise IngestError(f"row {line}: empty user_id, query_id or candidate_id")
            if (uid, qid, cid) in seen:
                raise IngestError(f"row {line}: duplicate candidate {uid}/{qid}/{cid}")
            seen.add((uid, qid, cid))
            true = _number(row[col["true_score"]], "true_score", line)
            if not 0.0 <= true <= 1.0:
                raise IngestError(f"row {line}: true_score {true!r} outside [0, 1]")
            mean = _number(row[col["pred_mean"]], "pred_mean", line) if "pred_mean" in col else None
            var = _number(row[col["pred_var"]], "pred_var", line) if "pred_var" in col else None
            if var is not None and var < 0:
                raise IngestError(f"row {line}: pred_var {var!r} is negative")
            feats = [_number(row[i], header[i], line) for i in feat_cols]
            users.setdefault(uid, {}).setdefault(qid, []).append((true, mean, var, feats))

    if not users:
        raise IngestError(f"{path}: no data rows")
    out = []
    for uid, queries in users.items():
        pools = []
        for qid, rows in queries.items():
            true = [r[0] for r in rows]
            mean = [r[1] for r in rows] if "pred_mean" in col else None
            var = [r[2] for r in rows] if "pred_var" in col else None
            feats = np.array([r[3] for r in rows]) if feat_cols else None
            pools.append(CandidatePool(uid, qid, true, mean, var, feats))
        out.append(UserDataset(uid, tuple(pools)))
    return out
