"""CSV/JSON readers and writers for cohorts and results."""

from __future__ import annotations

import csv
import json
import logging

import numpy as np

from .dataset import MultiViewDataset

logger = logging.getLogger(__name__)


def _fmt(v: float) -> str:
    return "NA" if np.isnan(v) else repr(float(v))


def read_table(path):
    """Return ``(header, subject_ids, rows)`` for a ``subject_id,...`` CSV."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or not rows[0] or rows[0][0] != "subject_id":
        raise ValueError(f"{path}: first header cell must be subject_id")
    header = rows[0]
    ids, body = [], []
    for line_no, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise ValueError(f"{path}:{line_no}: expected {len(header)} cells, got {len(row)}")
        ids.append(row[0])
        try:
            body.append([np.nan if c == "NA" else float(c) for c in row[1:]])
        except ValueError:
            raise ValueError(f"{path}:{line_no}: non-numeric cell") from None
    if len(set(ids)) != len(ids):
        raise ValueError(f"{path}: duplicate subject ids")
    return header, ids, np.array(body, dtype=np.float64).reshape(len(ids), len(header) - 1)


def write_table(path, header, subject_ids, matrix) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for sid, row in zip(subject_ids, np.atleast_2d(matrix)):
            w.writerow([sid, *(_fmt(v) for v in row)])


def write_view_csv(path, x, subject_ids, feature_names=None) -> None:
    x = np.asarray(x, dtype=np.float64)
    names = feature_names or [f"f{j + 1}" for j in range(x.shape[1])]
    write_table(path, ["subject_id", *names], subject_ids, x)


def write_phenotype_csv(path, values, subject_ids) -> None:
    write_table(path, ["subject_id", "value"], subject_ids, np.asarray(values)[:, None])


def read_phenotype_csv(path) -> dict:
    header, ids, body = read_table(path)
    if body.shape[1] != 1:
        raise ValueError(f"{path}: phenotype file must have exactly one value column")
    return {sid: v for sid, v in zip(ids, body[:, 0]) if not np.isnan(v)}


def load_dataset(view_files: dict, phenotype_file) -> MultiViewDataset:
    """Join view CSVs onto the phenotype file by subject id.

    Subjects are ordered by id. A subject missing from a view file, or
    whose row is entirely ``NA``, has that view marked absent; partially
    missing rows are rejected. Subjects with no view at all are dropped.
    """
    pheno = read_phenotype_csv(phenotype_file)
    tables = {}
    for name, path in view_files.items():
        _, ids, body = read_table(path)
        tables[name] = (dict(zip(ids, range(len(ids)))), body)
    overlap = set()
    for index, _ in tables.values():
        overlap |= index.keys() & pheno.keys()
    if not overlap:
        raise ValueError("no subjects shared between the phenotype file and the view files")
    subjects = sorted(overlap)
    views, presence = {}, np.zeros((len(subjects), len(tables)), dtype=bool)
    for m, (name, (index, body)) in enumerate(tables.items()):
        x = np.full((len(subjects), body.shape[1]), np.nan)
        for i, sid in enumerate(subjects):
            j = index.get(sid)
            if j is None:
                continue
            row = body[j]
            holes = np.isnan(row)
            if holes.all():
                continue
            if holes.any():
                raise ValueError(f"view {name!r}, subject {sid}: partially missing row")
            x[i] = row
            presence[i, m] = True
        views[name] = x
    dropped = len(pheno) - len(subjects)
    if dropped:
        logger.info("subjects_without_views=%d", dropped)
    return MultiViewDataset(views, presence, [pheno[s] for s in subjects], subjects)


def write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_json(path):
    with open(path) as fh:
        return json.load(fh)
