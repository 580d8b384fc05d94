"""Posterior draw storage, CSV persistence and printed summaries."""

from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .diagnostics import ConstantParameterWarning, ess, split_rhat

STAT_NAMES = ("lp__", "accept_stat__", "treedepth__", "n_leapfrog__", "divergent__")


@dataclass
class Draws:
    names: list[str]
    values: np.ndarray  # chains x draws x params (constrained scale)
    stats: dict = field(default_factory=dict)  # name -> chains x draws
    step_sizes: list = field(default_factory=list)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self._index = {n: i for i, n in enumerate(self.names)}

    @property
    def n_chains(self) -> int:
        return self.values.shape[0]

    @property
    def n_draws(self) -> int:
        return self.values.shape[1]

    def __contains__(self, name):
        return name in self._index

    def column(self, name: str) -> np.ndarray:
        return self.values[:, :, self._index[name]]

    def flat(self, name: str) -> np.ndarray:
        return self.column(name).reshape(-1)

    def matrix(self) -> np.ndarray:
        return self.values.reshape(-1, len(self.names))

    @property
    def divergences(self) -> int:
        d = self.stats.get("divergent__")
        return int(np.sum(d)) if d is not None else 0

    def to_csv(self, dest=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        stats = [s for s in STAT_NAMES if s in self.stats]
        w.writerow(["chain", "iteration", *self.names, *stats])
        for c in range(self.n_chains):
            for i in range(self.n_draws):
                row = [str(c + 1), str(i + 1)]
                row += [repr(float(v)) for v in self.values[c, i]]
                row += [repr(float(self.stats[s][c, i])) for s in stats]
                w.writerow(row)
        text = buf.getvalue()
        if dest is not None:
            with open(dest, "w", encoding="utf-8", newline="") as fh:
                fh.write(text)
        return text

    @classmethod
    def from_csv(cls, source) -> "Draws":
        with open(source, encoding="utf-8", newline="") as fh:
            rows = list(csv.reader(fh))
        header = rows[0]
        body = np.array([[float(x) for x in r] for r in rows[1:]]) if len(rows) > 1 else np.zeros((0, len(header)))
        chains = body[:, 0].astype(int)
        nc = int(chains.max()) if len(chains) else 0
        nd = len(body) // max(nc, 1)
        stat_cols = [i for i, h in enumerate(header) if h in STAT_NAMES]
        par_cols = [i for i in range(2, len(header)) if i not in stat_cols]
        vals = body[:, par_cols].reshape(nc, nd, len(par_cols))
        stats = {header[i]: body[:, i].reshape(nc, nd) for i in stat_cols}
        return cls([header[i] for i in par_cols], vals, stats)


# --------------------------------------------------------------------------
# summaries


@dataclass(frozen=True)
class SummaryRow:
    label: str
    estimate: float
    est_error: float
    l95: float
    u95: float
    eff_sample: float
    rhat: float


@dataclass
class SummaryTable:
    header: list[str]
    sections: list  # (title, [(subtitle or None, [SummaryRow])])
    footer: list[str]

    def rows(self) -> dict[str, SummaryRow]:
        out = {}
        for title, groups in self.sections:
            for sub, rows in groups:
                for r in rows:
                    key = r.label if sub is None else f"{sub}::{r.label}"
                    out[key] = r
        return out

    def find(self, label: str) -> SummaryRow:
        for key, r in self.rows().items():
            if r.label == label or key == label:
                return r
        raise KeyError(label)

    def render(self) -> str:
        lines = list(self.header)
        for title, groups in self.sections:
            lines.append(f"{title}: ")
            for sub, rows in groups:
                if sub is not None:
                    lines.append(sub + " ")
                lines.extend(_render_rows(rows))
            lines.append("")
        lines.extend(self.footer)
        return "\n".join(lines) + "\n"


def _fmt2(v: float) -> str:
    if math.isnan(v):
        return "NA"
    if math.isinf(v):
        return "Inf" if v > 0 else "-Inf"
    return f"{v:.2f}"


def _render_rows(rows) -> list[str]:
    cols = ["Estimate", "Est.Error", "l-95% CI", "u-95% CI", "Eff.Sample", "Rhat"]
    cells = []
    for r in rows:
        eff = "NA" if not math.isfinite(r.eff_sample) else str(int(round(r.eff_sample)))
        cells.append([r.label, _fmt2(r.estimate), _fmt2(r.est_error), _fmt2(r.l95), _fmt2(r.u95), eff, _fmt2(r.rhat)])
    lw = max(len(c[0]) for c in cells)
    widths = [max(len(h), *(len(c[i + 1]) for c in cells)) for i, h in enumerate(cols)]
    out = [" " * lw + " " + " ".join(h.rjust(w) for h, w in zip(cols, widths))]
    for c in cells:
        out.append(c[0].ljust(lw) + " " + " ".join(v.rjust(w) for v, w in zip(c[1:], widths)))
    return out


def summarize_column(x: np.ndarray, label: str) -> SummaryRow:
    """x is chains x draws."""
    flat = x.reshape(-1)
    est = float(flat.mean())
    err = float(flat.std(ddof=1)) if flat.size > 1 else 0.0
    lo, hi = np.quantile(flat, [0.025, 0.975])  # type 7 interpolation
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConstantParameterWarning)
        if np.ptp(flat) == 0:
            rh, es = math.nan, math.nan
        else:
            rh = split_rhat(x) if x.shape[1] >= 4 else math.nan
            es = ess(x) if x.shape[1] >= 8 else math.nan
    return SummaryRow(label, est, err, float(lo), float(hi), es, rh)


def _parse_group_name(name: str):
    body = name.split("_", 1)[1]
    return body.split("__")


def summarize(draws: Draws, header: list[str] | None = None) -> SummaryTable:
    """Group constrained parameters into smooth, group-level, population-level and family sections."""
    smooth, pop, fam = [], [], []
    groups: dict[str, list] = {}
    nlevels: dict[str, set] = {}
    for n in draws.names:
        if n.startswith("r_"):
            lab, rest = n[2:].split("[", 1)
            nlevels.setdefault(lab, set()).add(rest.rsplit(",", 1)[0])
    for n in draws.names:
        col = draws.column(n)
        if n.startswith("sds_"):
            smooth.append(summarize_column(col, f"sds({n[4:]})"))
        elif n.startswith("sd_"):
            lab, coef = _parse_group_name(n)
            groups.setdefault(lab, []).append(summarize_column(col, f"sd({coef})"))
        elif n.startswith("cor_"):
            lab, a, b = _parse_group_name(n)
            groups.setdefault(lab, []).append(summarize_column(col, f"cor({a},{b})"))
        elif n.startswith("bs_"):
            pop.append(summarize_column(col, n[3:]))
        elif n.startswith("b_"):
            pop.append(summarize_column(col, n[2:]))
        elif n in ("sigma", "zi"):
            fam.append(summarize_column(col, n))
    # sd rows first within a group, then correlations
    sections = []
    if smooth:
        sections.append(("Smooth Terms", [(None, smooth)]))
    if groups:
        sub = []
        for lab, rows in groups.items():
            rows = [r for r in rows if r.label.startswith("sd(")] + [r for r in rows if r.label.startswith("cor(")]
            sub.append((f"~{lab} (Number of levels: {len(nlevels.get(lab, ()))})", rows))
        sections.append(("Group-Level Effects", sub))
    if pop:
        sections.append(("Population-Level Effects", [(None, pop)]))
    if fam:
        sections.append(("Family Specific Parameters", [(None, fam)]))
    footer = [
        "Draws from NUTS. Eff.Sample is the effective sample size of the split",
        "chains (Geyer initial positive sequence); Rhat is the split-chain",
        "potential scale reduction factor (1 at convergence).",
    ]
    return SummaryTable(list(header or []), sections, footer)
