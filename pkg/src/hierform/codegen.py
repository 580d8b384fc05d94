"""Render a compiled model as probabilistic-program text.

The output follows the block layout of common probabilistic programming
languages (data, parameters, transformed parameters, model). It documents
the math the sampler evaluates; it is never compiled or executed here.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

from . import formula as F
from .density import Model, ParamSpace
from .design import DesignSet
from .modelspec import MU, CheckedSpec, PriorDist

INDENT = "  "


@dataclass(frozen=True)
class ProgramText:
    data: tuple[str, ...]
    parameters: tuple[str, ...]
    transformed: tuple[str, ...]
    model: tuple[str, ...]
    preamble: tuple[str, ...] = ()

    @property
    def rendered(self) -> str:
        out = list(self.preamble)
        for title, body in (
            ("data", self.data),
            ("parameters", self.parameters),
            ("transformed parameters", self.transformed),
            ("model", self.model),
        ):
            out.append(title + " {")
            out.extend(INDENT + l if l else "" for l in body)
            out.append("}")
        return "\n".join(out) + "\n"

    def __str__(self):
        return self.rendered


def _sfx(owner: str) -> str:
    return "" if owner == MU else f"_{owner}"


def _ident(name: str) -> str:
    """Program-safe identifier for a smooth or variable name."""
    return "".join(ch if ch.isalnum() or ch == "_" else "_" for ch in name)


def segment_variable(key: str, space: ParamSpace) -> str:
    """Program variable declared for one parameter segment."""
    kind, _, rest = key.partition(":")
    if kind == "b":
        return "b" + _sfx(rest)
    if kind in ("bs", "zs"):
        return f"{kind}_{_ident(rest)}"
    if kind == "logsds":
        return f"sds_{_ident(rest)}"
    if kind == "logsd":
        return f"sd_{int(rest) + 1}"
    if kind == "cor":
        return f"L_{int(rest) + 1}"
    if kind == "z":
        return f"z_{int(rest) + 1}"
    return key  # sigma, zi


def program_parameter_names(space: ParamSpace) -> set[str]:
    """Names the emitted parameters and transformed parameters blocks must declare."""
    names = {segment_variable(s.key, space) for s in space.segments}
    names |= {f"r_{k + 1}" for k in range(len(space.design.random))}
    names |= {f"s_{_ident(sm.name)}" for ss in space.design.smooths.values() for sm in ss}
    return names


def _num(v: float) -> str:
    return F._fmt_num(float(v))


def _prior_statement(target: str, d: PriorDist | None, positive: bool = False) -> str | None:
    if d is None:
        return None
    args = ", ".join(_num(v) for v in d.params)
    fam = "student_t" if d.family == "half_student_t" else d.family
    if fam == "lkj":
        return f"target += lkj_corr_cholesky_lpdf({target} | {args});"
    s = f"target += {fam}_lpdf({target} | {args})"
    if (positive or d.family == "half_student_t") and fam != "beta":
        s += f" - {fam}_lccdf(0 | {args})"
    return s + ";"


def _nl_program(e) -> str:
    """Same layout as the formula text so the expression reads verbatim."""
    return F.format_nl(e)


_INV_LINK = {"identity": None, "log": "exp", "logit": "inv_logit"}


def emit_program(checked: CheckedSpec, design: DesignSet) -> ProgramText:
    spec = checked.spec
    fam = spec.family
    model = Model(design)
    space = model.space
    priors = model.priors
    ds = design

    pre = ["// generated by hierform", f"// family: {fam.label}"]
    pre += [f"// {l}" for l in spec.formula_lines()]

    data = ["int<lower=1> N;  // number of observations"]
    if fam.count_response:
        data.append("array[N] int<lower=0> Y;  // response")
    else:
        data.append("vector[N] Y;  // response")
    if ds.weights is not None:
        data.append("vector<lower=0>[N] weights;  // observation weights")
    params, trans, mdl = [], [], []

    # population-level and smooth terms per owner
    for owner, fb in ds.fixed.items():
        sfx = _sfx(owner)
        data.append(f"int<lower=0> K{sfx};  // population-level columns of {owner}")
        data.append(f"matrix[N, K{sfx}] X{sfx};  // {', '.join(fb.column_names) or 'no columns'}")
        params.append(f"vector[K{sfx}] b{sfx};  // population-level effects of {owner}")
        for sm in ds.smooths[owner]:
            nm = _ident(sm.name)
            data.append(f"// smooth s({sm.covariate}) of {owner}")
            data.append(f"int<lower=1> Ks_{nm};  // unpenalized columns")
            data.append(f"matrix[N, Ks_{nm}] Xs_{nm};")
            data.append(f"int<lower=1> nb_{nm};  // penalized columns")
            data.append(f"matrix[N, nb_{nm}] Zs_{nm};")
            params.append(f"vector[Ks_{nm}] bs_{nm};")
            params.append(f"real<lower=0> sds_{nm};  // smoothing standard deviation")
            params.append(f"vector[nb_{nm}] zs_{nm};  // standardized smooth coefficients")
            trans.append(f"vector[nb_{nm}] s_{nm} = sds_{nm} * zs_{nm};")

    if spec.is_nonlinear:
        for v in spec.nl_covariates():
            data.append(f"vector[N] C_{v};  // covariate {v}")

    # group-level blocks
    for k, b in enumerate(ds.random):
        j = k + 1
        g = b.spec.grouping
        data.append(f"// group-level block {j}: ~{b.label} ({', '.join(o + ':' + c for o, c in b.coefs)})")
        data.append(f"int<lower=1> N_{j};  // number of levels")
        data.append(f"int<lower=1> M_{j};  // coefficients per level")
        if g.kind == "mm":
            for m in range(len(g.factors)):
                data.append(f"array[N] int<lower=1> J_{j}_{m + 1};  // level of member {m + 1}")
            for m in range(len(g.factors)):
                data.append(f"vector[N] W_{j}_{m + 1};  // weight of member {m + 1}")
        else:
            data.append(f"array[N] int<lower=1> J_{j};  // level index")
        for c in range(b.q):
            data.append(f"vector[N] Z_{j}_{c + 1};")
        params.append(f"vector<lower=0>[M_{j}] sd_{j};  // group-level standard deviations")
        if b.correlated:
            params.append(f"cholesky_factor_corr[M_{j}] L_{j};  // factor of the correlation matrix")
            scale = f"diag_pre_multiply(sd_{j}, L_{j})"
        else:
            scale = f"diag_matrix(sd_{j})"
        params.append(f"matrix[M_{j}, N_{j}] z_{j};  // standardized group-level effects")
        trans.append(f"matrix[N_{j}, M_{j}] r_{j} = ({scale} * z_{j})';")

    # family parameters without their own predictor
    if "sigma" in space:
        params.append("real<lower=0> sigma;  // residual standard deviation")
    if "zi" in space:
        params.append("real<lower=0, upper=1> zi;  // zero-inflation probability")

    # model block: linear predictors
    for owner, fb in ds.fixed.items():
        name = _pred_name(owner, spec)
        parts = [f"X{_sfx(owner)} * b{_sfx(owner)}"]
        for sm in ds.smooths[owner]:
            nm = _ident(sm.name)
            parts.append(f"Xs_{nm} * bs_{nm}")
            parts.append(f"Zs_{nm} * s_{nm}")
        mdl.append(f"vector[N] {name} = {' + '.join(parts)};")
    if ds.random:
        mdl.append("for (n in 1:N) {")
        for k, b in enumerate(ds.random):
            j = k + 1
            g = b.spec.grouping
            for c, (owner, _) in enumerate(b.coefs):
                name = _pred_name(owner, spec)
                z = f"Z_{j}_{c + 1}[n]"
                if g.kind == "mm":
                    terms = [f"W_{j}_{m + 1}[n] * r_{j}[J_{j}_{m + 1}[n], {c + 1}]" for m in range(len(g.factors))]
                    mdl.append(f"{INDENT}{name}[n] += ({' + '.join(terms)}) * {z};")
                else:
                    mdl.append(f"{INDENT}{name}[n] += r_{j}[J_{j}[n], {c + 1}] * {z};")
        mdl.append("}")
    if spec.is_nonlinear:
        mdl.append("vector[N] mu;")
        mdl.append("for (n in 1:N) {")
        for o in spec.nlpar_formulas:
            mdl.append(f"{INDENT}real {o} = nlp_{o}[n];")
        for v in spec.nl_covariates():
            mdl.append(f"{INDENT}real {v} = C_{v}[n];")
        mdl.append(f"{INDENT}mu[n] = {_nl_program(spec.main_formula.rhs)};")
        mdl.append("}")
    for dp in fam.dpars:
        if dp != MU and dp not in spec.dpar_formulas:
            continue
        inv = _INV_LINK[fam.link(dp)]
        keep_log = dp == MU and fam.name != "gaussian" and fam.link(dp) == "log"
        if inv and not keep_log:
            mdl.append(f"{dp} = {inv}({dp});")

    # likelihood
    mdl.append("// likelihood")
    mdl.extend(_likelihood(fam, ds.weights is not None, spec))

    # priors
    mdl.append("// priors")
    for seg in space.segments:
        var = segment_variable(seg.key, space)
        dists = priors.get(seg.key)
        if seg.key.startswith("b:"):
            for i, d in enumerate(dists):
                st = _prior_statement(f"{var}[{i + 1}]", d)
                if st:
                    mdl.append(st)
        elif seg.key.startswith("bs:"):
            st = _prior_statement(var, dists[0])
            if st:
                mdl.append(st)
        elif seg.key.startswith(("logsd:", "logsds:")) or seg.key == "sigma":
            many = seg.key.startswith("logsd:")
            for i, d in enumerate(dists):
                mdl.append(_prior_statement(f"{var}[{i + 1}]" if many else var, d, positive=True))
        elif seg.key.startswith("cor:"):
            mdl.append(_prior_statement(var, dists[0]))
        elif seg.key == "zi":
            st = _prior_statement(var, dists[0])
            mdl.append(st or "// zi ~ uniform(0, 1)")
        elif seg.key.startswith("z:"):
            mdl.append(f"target += std_normal_lpdf(to_vector({var}));")
        elif seg.key.startswith("zs:"):
            mdl.append(f"target += std_normal_lpdf({var});")

    return ProgramText(tuple(data), tuple(params), tuple(trans), tuple(mdl), tuple(pre))


def _pred_name(owner: str, spec) -> str:
    if owner in spec.nlpar_formulas:
        return f"nlp_{owner}"
    return owner


def _likelihood(fam, weighted: bool, spec) -> list[str]:
    mu_log = fam.link("mu") == "log"
    sig = "sigma[n]" if "sigma" in spec.dpar_formulas else "sigma"
    zi = "zi[n]" if "zi" in spec.dpar_formulas else "zi"
    w = "weights[n] * " if weighted else ""
    if fam.name == "gaussian":
        if not weighted:
            return ["target += normal_lpdf(Y | mu, sigma);"]
        return ["for (n in 1:N) {", f"{INDENT}target += {w}normal_lpdf(Y[n] | mu[n], {sig});", "}"]
    pois = "poisson_log_lpmf" if mu_log else "poisson_lpmf"
    if fam.name == "poisson":
        if not weighted:
            return [f"target += {pois}(Y | mu);"]
        return ["for (n in 1:N) {", f"{INDENT}target += {w}{pois}(Y[n] | mu[n]);", "}"]
    return [
        "for (n in 1:N) {",
        f"{INDENT}if (Y[n] == 0) {{",
        f"{INDENT * 2}target += {w}log_sum_exp(bernoulli_lpmf(1 | {zi}),",
        f"{INDENT * 2}    bernoulli_lpmf(0 | {zi}) + {pois}(0 | mu[n]));",
        f"{INDENT}}} else {{",
        f"{INDENT * 2}target += {w}(bernoulli_lpmf(0 | {zi}) + {pois}(Y[n] | mu[n]));",
        f"{INDENT}}}",
        "}",
    ]


def declared_names(program: ProgramText) -> list[str]:
    """Variables declared in the parameters and transformed parameters blocks."""
    out = []
    for line in program.parameters + program.transformed:
        decl = re.sub(r"<[^>]*>", "", line.split("//")[0]).split("=")[0].strip().rstrip(";")
        if decl:
            out.append(decl.split()[-1])
    return out
