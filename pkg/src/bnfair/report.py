"""Table and figure rendering for regime comparisons.

Figures are written as SVG with matplotlib; the hash salt and metadata are
pinned so re-running a config reproduces them byte for byte.
"""
import csv
import io
from dataclasses import dataclass, field

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .finetune import TuningPolicy  # noqa: E402
from .metrics import FairnessReport, PairMetrics  # noqa: E402

DISPLAY_NAMES = {
    TuningPolicy.FROZEN: "SSL (Frozen)",
    TuningPolicy.BN_STATS: "SSL (BN Stats)",
    TuningPolicy.BN_STATS_AFFINE: "SSL (BN Stats+Affine)",
    TuningPolicy.BN_STATS_SKIP: "SSL (BN Stats+Skip)",
    TuningPolicy.FULL_FT: "SSL (Full FT)",
    TuningPolicy.SUPERVISED_SCRATCH: "Supervised",
}

_SVG_RC = {"svg.hashsalt": "bnfair", "svg.fonttype": "path", "font.size": 9,
           "axes.spines.top": False, "axes.spines.right": False}


@dataclass
class RegimeComparison:
    reports: dict
    accounting: dict = field(default_factory=dict)
    counters: dict = field(default_factory=dict)
    timing: dict = field(default_factory=dict)

    def ordered_policies(self):
        return [p for p in TuningPolicy if p in self.reports]


def fmt(value):
    """Two decimals, round-half-even on the stored double; blank for missing."""
    if value is None or (isinstance(value, float) and np.isnan(value)):
        return ""
    return f"{value:.2f}"


def column_order(rhos):
    """Attribute indices sorted by ascending rho, ties kept in input order."""
    return sorted(range(len(rhos)), key=lambda i: (rhos[i], i))


def render_table_csv(comparison):
    policies = comparison.ordered_policies()
    first = comparison.reports[policies[0]]
    order = column_order(list(first.rho_by_c))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["block", "procedure"] + [first.names[i] for i in order] + ["all"])
    w.writerow(["rho(c)", ""] + [fmt(first.rho_by_c[i]) for i in order] + [""])
    for block, attr, summary in (("Gap", "gap_by_c", "median_gap"),
                                 ("Worst", "worst_by_c", "median_worst")):
        for p in policies:
            rep = comparison.reports[p]
            vals = getattr(rep, attr)
            w.writerow([block, DISPLAY_NAMES[p]] + [fmt(vals[i]) for i in order]
                       + [fmt(getattr(rep, summary))])
    return buf.getvalue()


def quartiles(values):
    """(min, q1, median, q3, max) with linear interpolation between order statistics."""
    v = np.sort(np.asarray(values, dtype=float))
    return tuple(float(x) for x in np.percentile(v, [0, 25, 50, 75, 100]))


def distribution_csvs(comparison):
    """(per-cell values CSV, per-regime summary CSV) for the F1-worst distribution."""
    vals, summ = io.StringIO(), io.StringIO()
    wv = csv.writer(vals, lineterminator="\n")
    ws = csv.writer(summ, lineterminator="\n")
    wv.writerow(["policy", "t", "c", "f1_worst"])
    ws.writerow(["policy", "cells", "min", "q1", "median", "q3", "max"])
    for p in comparison.ordered_policies():
        rep = comparison.reports[p]
        pairs = rep.pairs
        for t, c in pairs.cells():
            if pairs.valid[t, c]:
                wv.writerow([p.value, rep.names[t], rep.names[c], repr(float(pairs.worst[t, c]))])
        values = rep.worst_values()
        stats = quartiles(values) if values.size else (float("nan"),) * 5
        ws.writerow([p.value, values.size] + [repr(s) for s in stats])
    return vals.getvalue(), summ.getvalue()


def _save_svg(fig, path):
    fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)


def render_distribution(comparison, svg_path):
    """Box plot of per-cell F1-worst per regime; returns the two CSV texts."""
    policies = comparison.ordered_policies()
    data = [comparison.reports[p].worst_values() for p in policies]
    with plt.rc_context(_SVG_RC):
        fig, ax = plt.subplots(figsize=(7, 3.2))
        ax.boxplot([d if d.size else [np.nan] for d in data], whis=(0, 100),
                   tick_labels=[DISPLAY_NAMES[p] for p in policies])
        ax.set_ylabel(r"$F_1^{\mathrm{worst}}$ over valid (t, c)")
        ax.set_ylim(0, 1)
        ax.tick_params(axis="x", labelrotation=20)
        fig.tight_layout()
        _save_svg(fig, svg_path)
    return distribution_csvs(comparison)


def render_params_figure(comparison, svg_path):
    policies = [p for p in comparison.ordered_policies() if p in comparison.accounting]
    rows = [comparison.accounting[p] for p in policies]
    with plt.rc_context(_SVG_RC):
        fig, ax = plt.subplots(figsize=(7, 2.8))
        x = np.arange(len(rows))
        ax.bar(x - 0.2, [r.trainable for r in rows], 0.4, label="parameters")
        ax.bar(x + 0.2, [max(r.buffers, 0) for r in rows], 0.4, label="BN buffers")
        ax.set_yscale("symlog")
        ax.set_xticks(x, [DISPLAY_NAMES[p] for p in policies], rotation=20)
        ax.set_ylabel("tensors updated")
        ax.legend(frameon=False)
        fig.tight_layout()
        _save_svg(fig, svg_path)


def _rel(a, b):
    out = {"a": a, "b": b}
    for key, denom in (("relative_to_a", a), ("relative_to_b", b)):
        if denom is None or denom == 0 or np.isnan(denom):
            out[key], out[key + "_undefined"] = None, True
        else:
            out[key], out[key + "_undefined"] = (b - a) / denom, False
    return out


def relative_improvement(a, b):
    """Change from report ``a`` to ``b`` under both denominator conventions.

    ``relative_to_a = (b - a) / a`` and ``relative_to_b = (b - a) / b`` for the
    median F1-worst and for the mean F1-gap over all valid cells.
    """
    if list(a.names) != list(b.names):
        raise ValueError("reports cover different attribute sets")
    return {"median_worst": _rel(a.median_worst, b.median_worst),
            "mean_gap": _rel(a.mean_gap, b.mean_gap)}


def report_from_dict(d):
    """Rebuild a FairnessReport from its JSON form."""
    names = d["attributes"]
    k = len(names)
    index = {n: i for i, n in enumerate(names)}
    arrays = {key: np.full((k, k), np.nan) for key in ("f1_given_c", "f1_given_not_c", "gap",
                                                       "worst")}
    valid = np.zeros((k, k), dtype=bool)
    for cell in d["cells"]:
        t, c = index[cell["t"]], index[cell["c"]]
        for key in arrays:
            if cell[key] is not None:
                arrays[key][t, c] = cell[key]
        valid[t, c] = cell["valid"]
    pairs = PairMetrics(list(names), arrays["f1_given_c"], arrays["f1_given_not_c"],
                        arrays["gap"], arrays["worst"], valid)

    def arr(key):
        return np.array([np.nan if v is None else v for v in d[key]], dtype=float)

    def num(key):
        return float("nan") if d[key] is None else d[key]

    return FairnessReport(list(names), pairs, arr("gap_by_c"), arr("worst_by_c"),
                          np.array(d["valid_cells_by_c"]), arr("rho"), num("median_gap"),
                          num("median_worst"), num("mean_gap"), d["invalid_cells"])
