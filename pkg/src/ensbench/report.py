"""MetricReport: per-variable, per-lead score tables with CSV and JSON serialisation.

CSV layout (one row per variable x lead x metric)::

    # config_hash=<hex> seed=<int>
    variable,lead,metric,value

JSON layout::

    {"meta": {...}, "scores": {variable: {lead: {metric: value}}}}
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

from .metrics import MetricAccumulator, normalized_diff

NORMALIZED_KIND = {"rmse": "rmse_like", "crps": "crps_like", "acc": "acc_like"}


@dataclass
class MetricReport:
    scores: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def set(self, variable, lead, metric, value):
        self.scores.setdefault(str(variable), {}).setdefault(int(lead), {})[str(metric)] = float(value)

    def get(self, variable, lead, metric):
        return self.scores[str(variable)][int(lead)][str(metric)]

    def rows(self):
        for var in sorted(self.scores):
            for lead in sorted(self.scores[var]):
                for metric in sorted(self.scores[var][lead]):
                    yield var, lead, metric, self.scores[var][lead][metric]

    @classmethod
    def from_accumulator(cls, acc: MetricAccumulator, meta=None) -> "MetricReport":
        """Case means of every score, then SSR from the averaged spread and RMSE."""
        rep = cls(meta=dict(meta or {}))
        for (var, lead, metric), value in acc.means().items():
            rep.set(var, lead, metric, value)
        for var, leads in rep.scores.items():
            for lead, row in leads.items():
                if "spread" in row and "rmse" in row and row["rmse"] > 0:
                    row["ssr"] = row["spread"] / row["rmse"]
        return rep

    def add_normalized(self, baseline: "MetricReport", name="baseline"):
        """Add ``nd_<metric>`` rows comparing this report against ``baseline``."""
        for var, lead, metric, value in list(self.rows()):
            kind = NORMALIZED_KIND.get(metric)
            if kind is None:
                continue
            try:
                b = baseline.get(var, lead, metric)
            except KeyError:
                continue
            if (kind == "acc_like" and b == 1.0) or (kind != "acc_like" and b <= 0):
                nd = 0.0 if value == b else math.nan
            else:
                nd = normalized_diff(value, b, kind)
            self.set(var, lead, f"nd_{metric}", nd)
        self.meta["baseline"] = name
        return self

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            fh.write("# " + " ".join(f"{k}={self.meta[k]}" for k in sorted(self.meta)) + "\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["variable", "lead", "metric", "value"])
            for var, lead, metric, value in self.rows():
                w.writerow([var, lead, metric, repr(value)])

    def to_json(self, path):
        doc = {"meta": self.meta,
               "scores": {v: {str(l): dict(sorted(m.items())) for l, m in sorted(ls.items())}
                          for v, ls in sorted(self.scores.items())}}
        with open(path, "w") as fh:
            json.dump(doc, fh, indent=1, sort_keys=True, allow_nan=True)

    @classmethod
    def from_json(cls, path) -> "MetricReport":
        with open(path) as fh:
            doc = json.load(fh)
        rep = cls(meta=doc.get("meta", {}))
        for var, leads in doc["scores"].items():
            for lead, metrics in leads.items():
                for metric, value in metrics.items():
                    rep.set(var, int(lead), metric, value)
        return rep
