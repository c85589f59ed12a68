"""Reading and writing the within/between CSV inputs and numeric output files."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .data import BetweenData, RepeatedData
from .errors import DataError


def fmt(x) -> str:
    """Render a value for delimited output; floats use 17 significant digits."""
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (float, np.floating)):
        return format(float(x), ".17g")
    if isinstance(x, (np.integer,)):
        return str(int(x))
    return str(x)


def write_rows(path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([fmt(v) for v in r])


@dataclass(frozen=True)
class Table:
    header: tuple
    rows: list  # (line number, cells)


def read_table(path, what: str) -> Table:
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot open {what} file: {exc.strerror}", path=str(path)) from None
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{what} file is empty", path=str(path)) from None
        header = tuple(h.strip() for h in header)
        if len(set(header)) != len(header):
            raise DataError(f"{what} file has duplicate column names", header=",".join(header))
        rows = []
        for cells in reader:
            if not cells or all(not c.strip() for c in cells):
                continue
            if len(cells) != len(header):
                raise DataError(f"{what} row has {len(cells)} fields, expected {len(header)}",
                                row=reader.line_num, path=str(path))
            rows.append((reader.line_num, [c.strip() for c in cells]))
    return Table(header, rows)


def _number(text: str, what: str, column: str, line: int) -> float:
    try:
        v = float(text)
    except ValueError:
        raise DataError(f"unparseable number {text!r} in {what} column {column!r}",
                        row=line) from None
    if not math.isfinite(v):
        raise DataError(f"non-finite number {text!r} in {what} column {column!r}", row=line)
    return v


def _pick(header, wanted, fixed, what):
    if wanted is None:
        return [c for c in header[fixed:]]
    missing = [c for c in wanted if c not in header]
    if missing:
        raise DataError(f"{what} file lacks requested columns", columns=",".join(missing))
    return list(wanted)


@dataclass(frozen=True)
class Dataset:
    repeated: RepeatedData
    between: BetweenData
    labels: dict  # column names for value / outcome / mediator


def ingest(within_path, between_path, mediation: bool = False, within_covariates=None,
           between_covariates=None) -> Dataset:
    """Parse the two input files into linked data objects.

    The first column of each file is the subject id. The within file's
    second column is the repeated measure; the between file's second column
    is the outcome and, for mediation designs, the third is the mediator.
    Remaining columns are covariates unless an explicit list is given.
    Subjects are indexed in the between file's row order.
    """
    wt = read_table(within_path, "within")
    bt = read_table(between_path, "between")
    if len(wt.header) < 2:
        raise DataError("within file needs columns id,value[,covariate...]")
    need = 3 if mediation else 2
    if len(bt.header) < need:
        raise DataError("between file needs columns id,outcome"
                        + (",mediator" if mediation else "") + "[,covariate...]")
    w_cov = _pick(wt.header, within_covariates, 2, "within")
    b_cov = _pick(bt.header, between_covariates, need, "between")

    index: dict = {}
    for line, cells in bt.rows:
        sid = cells[0]
        if sid in index:
            raise DataError(f"duplicated subject id {sid!r} in between file", row=line)
        index[sid] = len(index)
    if not index:
        raise DataError("between file has no rows")
    n = len(index)
    outcome = np.empty(n)
    mediator = np.empty(n) if mediation else None
    bcols = [bt.header.index(c) for c in b_cov]
    bx = np.empty((n, len(bcols)))
    for line, cells in bt.rows:
        j = index[cells[0]]
        outcome[j] = _number(cells[1], "between", bt.header[1], line)
        if mediation:
            mediator[j] = _number(cells[2], "between", bt.header[2], line)
        for c, col in enumerate(bcols):
            bx[j, c] = _number(cells[col], "between", bt.header[col], line)

    subject, value, orphans = [], [], []
    wcols = [wt.header.index(c) for c in w_cov]
    wx = []
    for line, cells in wt.rows:
        j = index.get(cells[0])
        if j is None:
            orphans.append(cells[0])
            continue
        subject.append(j)
        value.append(_number(cells[1], "within", wt.header[1], line))
        wx.append([_number(cells[col], "within", wt.header[col], line) for col in wcols])
    if orphans:
        uniq = list(dict.fromkeys(orphans))
        raise DataError("within file has subjects without a between row: " + ", ".join(uniq[:20])
                        + ("" if len(uniq) <= 20 else f" (+{len(uniq) - 20} more)"),
                        n_subjects=len(uniq))
    seen = np.zeros(n, dtype=bool)
    seen[subject] = True
    if not seen.all():
        labels = list(index)
        absent = [labels[j] for j in np.flatnonzero(~seen)]
        raise DataError("between file has subjects without within rows: " + ", ".join(absent[:20])
                        + ("" if len(absent) <= 20 else f" (+{len(absent) - 20} more)"),
                        n_subjects=len(absent))
    labels = tuple(index)
    repeated = RepeatedData(
        np.asarray(subject, dtype=np.int64), np.asarray(value),
        np.asarray(wx).reshape(len(value), len(wcols)) if wcols else None,
        covariate_names=tuple(w_cov), subject_labels=labels,
    )
    between = BetweenData(outcome, mediator, bx if bcols else None, covariate_names=tuple(b_cov))
    names = {"value": wt.header[1], "outcome": bt.header[1]}
    if mediation:
        names["mediator"] = bt.header[2]
    return Dataset(repeated, between, names)


def write_dataset(within_path, between_path, data: Dataset) -> None:
    """Serialize a dataset in the layout :func:`ingest` reads."""
    rep, bet = data.repeated, data.between
    labels = [str(s) for s in rep.subject_labels]
    write_rows(
        within_path,
        ["id", data.labels.get("value", "value"), *rep.covariate_names],
        ([labels[j], rep.value[i], *rep.covariates[i]] for i, j in enumerate(rep.subject)),
    )
    head = ["id", data.labels.get("outcome", "outcome")]
    if bet.mediator is not None:
        head.append(data.labels.get("mediator", "mediator"))
    head += list(bet.covariate_names)
    rows = []
    for j in range(bet.n_subjects):
        r = [labels[j], bet.outcome[j]]
        if bet.mediator is not None:
            r.append(bet.mediator[j])
        r += list(bet.covariates[j])
        rows.append(r)
    write_rows(between_path, head, rows)
