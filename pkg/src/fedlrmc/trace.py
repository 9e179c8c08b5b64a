"""Per-iteration diagnostics shared by every solver, with a fixed CSV schema."""
import csv
import math

import numpy as np

CSV_FIELDS = ("iter", "se_f", "se_2", "rel_frob_err", "b_minus_g", "sigma_min_B", "sigma_max_B",
              "max_row_u", "max_col_b", "grad_frob", "wall_s", "undercols")
# Fields that are wall-clock dependent and excluded from determinism checks.
TIMING_FIELDS = ("wall_s",)
INT_FIELDS = ("iter", "undercols")


class IterationTrace:
    """Columnar store of diagnostic rows; row 0 is the post-initialization state.

    Ground-truth dependent fields are NaN when no ground truth was supplied;
    a missing ``undercols`` count is 0.
    """

    def __init__(self, algorithm="altgdmin", meta=None):
        self.algorithm = algorithm
        self.meta = dict(meta or {})
        self._cols = {f: [] for f in CSV_FIELDS}
        self.iterates = []  # optional U snapshots (kept only on request)

    def append(self, **row):
        row.setdefault("iter", len(self))
        unknown = set(row) - set(CSV_FIELDS)
        if unknown:
            raise KeyError(f"unknown trace fields {sorted(unknown)}")
        for f in CSV_FIELDS:
            self._cols[f].append(row.get(f, 0 if f in INT_FIELDS else math.nan))

    def __len__(self):
        return len(self._cols["iter"])

    def __getitem__(self, name):
        dtype = int if name in INT_FIELDS else float
        return np.asarray(self._cols[name], dtype=dtype)

    def __getattr__(self, name):
        if name.startswith("_") or name not in CSV_FIELDS:
            raise AttributeError(name)
        return self[name]

    def row(self, t):
        return {f: self._cols[f][t] for f in CSV_FIELDS}

    def numeric_rows(self):
        """Rows without timing fields (used for determinism comparisons)."""
        return [tuple(self._cols[f][t] for f in CSV_FIELDS if f not in TIMING_FIELDS) for t in range(len(self))]

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_FIELDS)
            for t in range(len(self)):
                w.writerow([_fmt(self._cols[f][t]) for f in CSV_FIELDS])

    @classmethod
    def read_csv(cls, path, algorithm="unknown"):
        tr = cls(algorithm)
        with open(path, newline="") as fh:
            rd = csv.reader(fh)
            header = tuple(next(rd))
            if header != CSV_FIELDS:
                raise ValueError(f"unexpected trace header {header}")
            for rec in rd:
                tr.append(**{f: (int(v) if f in INT_FIELDS else float(v)) for f, v in zip(header, rec)})
        return tr


def _fmt(v):
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))
