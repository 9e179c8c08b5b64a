"""Write a :class:`RunRecord` to disk: CSV tables, ledgers, JSON metadata, plot script, figures.

Layout of ``<out>/<config-hash>/``:

``trace_<algorithm>_<setting>_t<trial>.csv``
    one per successful trial, columns :data:`fedlrmc.trace.CSV_FIELDS`.
``aggregate_<table>.csv``
    one per aggregate table (columns as in the record).
``ledger_<tag>.csv`` and ``ledger.csv``
    federated message ledgers (``round,direction,node,kind,scalars``);
    ``ledger.csv`` repeats the first one.  Only written for federated runs.
``summary.json``
    config, config hash, master seed, build info, record digest, trial
    statuses, ledger summaries and the list of emitted files.
``plot.script``
    a standalone Python/matplotlib script that reads the aggregate CSVs next
    to it and writes the ``fig_*.png`` panels.  The PNGs shipped in the
    directory are produced by running exactly this script.
"""
import csv
import json
import math
import os
import platform
from importlib import metadata

import numpy as np

from .experiments import ledger_tag

_RENDERER = '''\
import csv
import os

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt

BASE = os.path.dirname(os.path.abspath(__file__)) if "__file__" in globals() else "."


def read_table(name):
    with open(os.path.join(BASE, name), newline="") as fh:
        rows = list(csv.DictReader(fh))
    return rows


def as_float(v):
    try:
        return float(v)
    except ValueError:
        return float("nan")


def draw(ax, panel):
    rows = read_table(panel["csv"])
    groups = []
    for row in rows:
        key = row[panel["group"]]
        if key not in groups:
            groups.append(key)
    for key in groups:
        sel = [row for row in rows if row[panel["group"]] == key]
        x = [as_float(row[panel["x"]]) for row in sel]
        for col in panel["y"]:
            label = key if len(panel["y"]) == 1 else key + " " + col
            ax.plot(x, [as_float(row[col]) for row in sel], marker=panel.get("marker", ""), label=label)
    ax.set_xscale(panel.get("xscale", "linear"))
    ax.set_yscale(panel.get("yscale", "linear"))
    ax.set_xlabel(panel["xlabel"])
    ax.set_ylabel(panel["ylabel"])
    ax.set_title(panel.get("title", ""))
    ax.grid(True, which="both", alpha=0.3)
    ax.legend(fontsize=8)


def render(figures):
    for fig_def in figures:
        axes_defs = fig_def["axes"]
        fig, axes = plt.subplots(1, len(axes_defs), figsize=(5 * len(axes_defs), 4), squeeze=False)
        for ax, panel in zip(axes[0], axes_defs):
            draw(ax, panel)
        fig.tight_layout()
        fig.savefig(os.path.join(BASE, fig_def["png"]), dpi=120)
        plt.close(fig)
'''


def figure_specs(kind):
    """Figures for an experiment kind as plain data (consumed by the plot script)."""
    if kind in ("convergence", "timing"):
        common = dict(csv="aggregate_curve.csv", group="algorithm", y=["median_se_f"], yscale="log",
                      ylabel="median SE_F")
        return [{"png": "fig_error.png", "axes": [
            dict(common, x="mean_wall_s", xlabel="time (s)", title="error vs time"),
            dict(common, x="iter", xlabel="iteration", title="error vs iteration")]}]
    if kind == "noisy_floor":
        return [{"png": "fig_noisy_floor.png", "axes": [
            dict(csv="aggregate_noisy_floor.csv", group="algorithm", x="eps_noise", y=["plateau_median", "bound"],
                 xscale="log", yscale="log", marker="o", xlabel="eps_noise", ylabel="plateau SE_F",
                 title="noise floor")]}]
    if kind == "phase_transition":
        return [{"png": "fig_phase.png", "axes": [
            dict(csv="aggregate_phase.csv", group="algorithm", x="p", y=["success_prob"], xscale="log",
                 marker="o", xlabel="p", ylabel="P(SE_F <= threshold)", title="phase transition")]}]
    if kind == "fed_equivalence":
        return [{"png": "fig_fed.png", "axes": [
            dict(csv="aggregate_fed.csv", group="algorithm", x="gamma", y=["up_scalars"], marker="o",
                 xlabel="nodes", ylabel="upstream scalars", title="communication"),
            dict(csv="aggregate_fed.csv", group="algorithm", x="gamma", y=["max_iterate_dev"], marker="o",
                 yscale="symlog", xlabel="nodes", ylabel="max |U_fed - U_cent|", title="deviation")]}]
    raise ValueError(f"unknown kind {kind!r}")


def plot_script(kind):
    figs = json.dumps(figure_specs(kind), indent=1)
    return f"{_RENDERER}\n\nFIGURES = {figs}\n\nif __name__ == \"__main__\":\n    render(FIGURES)\n"


def referenced_files(script):
    """CSV/PNG names a plot script reads or writes (its FIGURES block)."""
    figs = json.loads(script.split("FIGURES = ", 1)[1].split("\n\nif __name__", 1)[0])
    csvs = sorted({ax["csv"] for f in figs for ax in f["axes"]})
    return csvs, [f["png"] for f in figs]


# --- CSV tables ---------------------------------------------------------------

def _cell(v):
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _parse_cell(s):
    for conv in (int, float):
        try:
            return conv(s)
        except ValueError:
            pass
    return s


def write_table(path, table):
    cols = list(table)
    lengths = {len(table[c]) for c in cols}
    if len(lengths) > 1:
        raise ValueError(f"ragged table for {path}")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for row in zip(*(table[c] for c in cols)):
            w.writerow([_cell(v) for v in row])


def read_table(path):
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        cols = next(rd)
        table = {c: [] for c in cols}
        for rec in rd:
            for c, v in zip(cols, rec):
                table[c].append(_parse_cell(v))
    return table


def tables_equal(a, b):
    """Equality of aggregate tables with NaN == NaN."""
    if list(a) != list(b):
        return False
    for c in a:
        if len(a[c]) != len(b[c]):
            return False
        for x, y in zip(a[c], b[c]):
            if isinstance(x, float) and isinstance(y, float) and math.isnan(x) and math.isnan(y):
                continue
            if x != y:
                return False
    return True


# --- report -------------------------------------------------------------------

def build_info():
    try:
        version = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        version = "unknown"
    return {"package": "fedlrmc", "version": version, "python": platform.python_version(),
            "numpy": np.__version__}


def _setting_label(x):
    return "all" if math.isnan(x) else f"{x:g}"


def trace_name(t):
    return f"trace_{t.algorithm.replace('@', '_')}_{_setting_label(t.setting)}_t{t.trial}.csv"


def emit_report(record, out_root, formats=("csv", "json", "plotscript", "png")):
    """Write the record under ``<out_root>/<config_hash>/`` and return that directory."""
    out = os.path.join(out_root, record.config_hash)
    try:
        os.makedirs(out, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    files = []

    def path(name):
        files.append(name)
        return os.path.join(out, name)

    if "csv" in formats:
        for t in record.trials:
            if t.trace is not None:
                t.trace.write_csv(path(trace_name(t)))
        for name, table in record.aggregates.items():
            write_table(path(f"aggregate_{name}.csv"), table)
        ledgers = record.ledgers
        for i, (tag, led) in enumerate(ledgers.items()):
            led.write_csv(path(f"ledger_{tag}.csv"))
            if i == 0:
                led.write_csv(path("ledger.csv"))
    if "plotscript" in formats or "png" in formats:
        script = plot_script(record.config.kind)
        if "plotscript" in formats:
            with open(path("plot.script"), "w") as fh:
                fh.write(script)
        if "png" in formats and "csv" in formats:
            ns = {"__name__": "fedlrmc_plot", "__file__": os.path.join(out, "plot.script")}
            exec(compile(script, os.path.join(out, "plot.script"), "exec"), ns)
            ns["render"](ns["FIGURES"])
            files.extend(f["png"] for f in ns["FIGURES"])
    if "json" in formats:
        meta = {
            "config": record.config.to_dict(),
            "config_hash": record.config_hash,
            "master_seed": record.config.master_seed,
            "build": build_info(),
            "digest": record.digest(),
            "trials": [{"algorithm": t.algorithm, "setting": _setting_label(t.setting), "trial": t.trial,
                        "status": t.status, "error": t.error} for t in record.trials],
            "ledgers": {tag: led.summary() for tag, led in record.ledgers.items()},
            "files": sorted(files + ["summary.json"]),
        }
        with open(os.path.join(out, "summary.json"), "w") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True)
    return out
