"""Command-line interface.

Exit codes: 0 success, 1 input/output or data error, 2 formula syntax
error, 3 validation error, 4 sampler failure, 5 fit finished but some
R-hat exceeds 1.1 (suppressed by ``--allow-nonconverged``).
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import re
import sys
import tempfile
import time

import numpy as np

from . import __version__
from . import formula as F
from .codegen import emit_program
from .density import Model
from .design import DesignError, assemble, design_tables
from .modelspec import SpecError, bf, resolve_blocks, validate
from .tabular import DataError, Dataset, read_csv, simulate_multi_membership, write_csv

EXIT_OK, EXIT_IO, EXIT_PARSE, EXIT_VALIDATION, EXIT_SAMPLER, EXIT_NONCONVERGED = 0, 1, 2, 3, 4, 5
RHAT_LIMIT = 1.1

log = logging.getLogger("hierform")


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_IO):
        super().__init__(message)
        self.code = code


# --------------------------------------------------------------------------
# file helpers


def write_atomic(path: str, text: str) -> None:
    """Write-temp-then-rename so readers never see a partial file."""
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _emit(text: str, out: str | None) -> None:
    if out:
        write_atomic(out, text)
    else:
        sys.stdout.write(text)


def _read_data(path: str) -> Dataset:
    try:
        return read_csv(path)
    except OSError as exc:
        raise CliError(f"cannot read data file {path!r}: {exc.strerror or exc}") from None


# --------------------------------------------------------------------------
# model arguments

_EXTRA_ASSIGN = re.compile(r"^\s*([A-Za-z_][A-Za-z0-9_.]*)\s*=(?!=)(.*)$", re.S)
_MODEL_LINE = re.compile(r"^\s*([A-Za-z_][A-Za-z0-9_.]*)\s*:\s*(.+)$")


def extra_formula(text: str) -> str:
    """``name=rhs`` becomes ``name ~ rhs``; full formulas pass through."""
    m = _EXTRA_ASSIGN.match(text)
    if m and "~" not in text:
        return f"{m.group(1)} ~ {m.group(2).strip()}"
    return text


def read_model_file(path: str) -> tuple[str, list[str]]:
    """One formula per line: the main formula first, then ``name: formula`` extras."""
    with open(path, encoding="utf-8") as fh:
        lines = [l.strip() for l in fh if l.strip() and not l.lstrip().startswith("#")]
    main, extra = None, []
    for line in lines:
        m = _MODEL_LINE.match(line)
        if m and "~" not in line.split(":", 1)[0]:
            name, body = m.group(1), m.group(2).strip()
            if name in ("formula", "main"):
                main = body
            elif "~" in body:
                extra.append(body)
            else:
                extra.append(f"{name} ~ {body}")
        elif main is None:
            main = line
        else:
            extra.append(line)
    if main is None:
        raise CliError(f"model file {path!r} has no main formula")
    return main, extra


def add_model_args(p: argparse.ArgumentParser, data: bool = True) -> None:
    p.add_argument("--formula", "-f", help="main formula, e.g. 'y ~ x + (1|g)'")
    p.add_argument("--model", help="model file: main formula, then 'name: formula' lines")
    p.add_argument("--extra", "-e", action="append", default=[], help="'name=rhs' or 'name ~ rhs' (repeatable)")
    p.add_argument("--nl", action="store_true", help="main formula is a literal non-linear expression")
    p.add_argument("--family", default="gaussian", help="gaussian, poisson, zero_inflated_poisson; link as name(link)")
    p.add_argument("--prior", action="append", default=[], help="e.g. 'normal(5000, 1000), nlpar = ult' (repeatable)")
    if data:
        p.add_argument("--data", required=True, help="CSV data file")


def model_source(args) -> dict:
    if args.model:
        main, extra = read_model_file(args.model)
        extra = extra + [extra_formula(e) for e in args.extra]
    elif args.formula:
        main, extra = args.formula, [extra_formula(e) for e in args.extra]
    else:
        raise CliError("give --formula or --model", EXIT_PARSE)
    return {"formula": main, "extra": extra, "nonlinear": bool(args.nl), "family": args.family, "priors": list(args.prior)}


def spec_from_source(src: dict):
    try:
        return bf(src["formula"], *src["extra"], family=src["family"], nl=src["nonlinear"], priors=src["priors"])
    except F.FormulaSyntaxError as exc:
        raise CliError(f"syntax error: {exc}", EXIT_PARSE) from None
    except ValueError as exc:
        # unknown families and malformed priors are specification problems
        raise CliError(str(exc), EXIT_VALIDATION) from None


def checked_model(src: dict, data: Dataset):
    spec = spec_from_source(src)
    try:
        checked = validate(spec, data)
        design = assemble(checked, data)
    except (SpecError, DesignError, DataError) as exc:
        raise CliError(str(exc), EXIT_VALIDATION) from None
    return checked, design


# --------------------------------------------------------------------------
# commands


def cmd_parse(args) -> int:
    src = model_source(args)
    if "~" not in src["formula"] and not args.nl:
        return _parse_rhs_only(src, args.resolve)
    if not args.resolve and not src["extra"]:
        mode = "nonlinear" if args.nl else "standard"
        try:
            ast = F.parse_formula(src["formula"], mode)
        except F.FormulaSyntaxError as exc:
            raise CliError(f"syntax error: {exc}", EXIT_PARSE) from None
        _emit(F.dump_json(F.ast_to_dict(ast)), None)
        return EXIT_OK
    spec = spec_from_source(src)
    out = spec.to_dict()
    if args.resolve:
        try:
            out["blocks"] = [b.to_dict() for b in resolve_blocks(spec)]
        except SpecError as exc:
            raise CliError(str(exc), EXIT_VALIDATION) from None
    _emit(F.dump_json(out), None)
    return EXIT_OK


def _parse_rhs_only(src: dict, resolve: bool) -> int:
    """A bare right-hand side such as ``(1|g1/g2)``."""
    try:
        rhs = F.parse_rhs(src["formula"])
    except F.FormulaSyntaxError as exc:
        raise CliError(f"syntax error: {exc}", EXIT_PARSE) from None
    out = {"rhs": F.rhs_to_dict(rhs)}
    if resolve:
        # a placeholder response makes the text a complete formula
        spec = spec_from_source(dict(src, formula=".response ~ " + src["formula"]))
        try:
            out["blocks"] = [b.to_dict() for b in resolve_blocks(spec)]
        except SpecError as exc:
            raise CliError(str(exc), EXIT_VALIDATION) from None
    _emit(F.dump_json(out), None)
    return EXIT_OK


def cmd_design_dump(args) -> int:
    data = _read_data(args.data)
    checked, design = checked_model(model_source(args), data)
    tables = design_tables(design)
    if not args.out_dir:
        summary = {name: {"columns": cols, "shape": list(m.shape)} for name, (cols, m) in tables.items()}
        summary["checked"] = checked.to_dict()
        _emit(F.dump_json(summary), None)
        return EXIT_OK
    os.makedirs(args.out_dir, exist_ok=True)
    for name, (cols, m) in tables.items():
        lines = [",".join(cols)] + [",".join(repr(float(v)) for v in row) for row in m]
        write_atomic(os.path.join(args.out_dir, f"{name}.csv"), "\n".join(lines) + "\n")
    write_atomic(os.path.join(args.out_dir, "checked.json"), F.dump_json(checked.to_dict()))
    print(f"wrote {len(tables)} tables to {args.out_dir}")
    return EXIT_OK


def _seed(args) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get("HIERFORM_SEED")
    if env:
        try:
            return int(env)
        except ValueError:
            raise CliError(f"HIERFORM_SEED must be an integer, got {env!r}") from None
    return 0


def _config(args):
    from .infer import SamplerConfig

    try:
        return SamplerConfig(
            chains=args.chains, iter=args.iter, warmup=args.warmup if args.warmup is not None else args.iter // 2,
            adapt_delta=args.adapt_delta, max_treedepth=args.max_treedepth, seed=_seed(args),
            thin=args.thin, cores=args.cores,
        )
    except ValueError as exc:
        raise CliError(str(exc)) from None


def _loglik_csv(ll: np.ndarray) -> str:
    head = ",".join(f"log_lik[{i + 1}]" for i in range(ll.shape[1]))
    rows = [",".join(repr(float(v)) for v in r) for r in ll]
    return head + "\n" + "\n".join(rows) + "\n"


def _read_loglik(path: str) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)


def cmd_fit(args) -> int:
    from .infer import SamplerError, fit_model

    data = _read_data(args.data)
    src = model_source(args)
    checked, _ = checked_model(src, data)
    config = _config(args)
    data_name = args.data_name or os.path.splitext(os.path.basename(args.data))[0]
    try:
        fit = fit_model(checked, data, config, data_name=data_name)
    except SamplerError as exc:
        raise CliError(f"sampler failure: {exc}", EXIT_SAMPLER) from None
    summary = fit.summary()
    text = summary.render()
    ll = fit.loglik()
    out = args.out
    os.makedirs(out, exist_ok=True)
    meta = dict(fit.meta)
    meta.update({
        "hierform_version": __version__,
        "numpy_version": np.__version__,
        "data_path": os.path.abspath(args.data),
        "created": time.strftime("%Y-%m-%dT%H:%M:%S"),
    })
    write_atomic(os.path.join(out, "spec.json"), F.dump_json({"source": src, "spec": checked.spec.to_dict(), "checked": checked.to_dict()}))
    write_atomic(os.path.join(out, "config.json"), F.dump_json(config.to_dict()))
    write_atomic(os.path.join(out, "draws.csv"), fit.draws.to_csv())
    write_atomic(os.path.join(out, "loglik.csv"), _loglik_csv(ll))
    write_atomic(os.path.join(out, "meta.json"), F.dump_json(meta))
    write_atomic(os.path.join(out, "summary.txt"), text)
    sys.stdout.write(text)
    rhats = [r.rhat for r in summary.rows().values() if not math.isnan(r.rhat)]
    if rhats and max(rhats) > RHAT_LIMIT and not args.allow_nonconverged:
        print(f"error: R-hat up to {max(rhats):.2f} exceeds {RHAT_LIMIT}; rerun with more iterations", file=sys.stderr)
        return EXIT_NONCONVERGED
    return EXIT_OK


# -- bundles -----------------------------------------------------------------


def _load_json(path: str) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as exc:
        raise CliError(f"cannot read {path!r}: {exc.strerror or exc}") from None


def bundle_summary(bundle: str) -> str:
    """Summary text rebuilt from the stored draws (no data needed)."""
    from .infer import Draws, SamplerConfig, summarize, summary_header

    src = _load_json(os.path.join(bundle, "spec.json"))["source"]
    config = SamplerConfig(**_load_json(os.path.join(bundle, "config.json")))
    meta = _load_json(os.path.join(bundle, "meta.json"))
    draws = Draws.from_csv(os.path.join(bundle, "draws.csv"))
    header = summary_header(spec_from_source(src), config, meta["n"], meta["data_name"], draws.divergences)
    return summarize(draws, header).render()


def load_fit(bundle: str, data_path: str | None = None):
    """Rebuild a :class:`Fit` from a bundle and the data it was fit to."""
    from .infer import Draws, Fit, SamplerConfig, raw_from_draws

    src = _load_json(os.path.join(bundle, "spec.json"))["source"]
    config = SamplerConfig(**_load_json(os.path.join(bundle, "config.json")))
    meta = _load_json(os.path.join(bundle, "meta.json"))
    data = _read_data(data_path or meta["data_path"])
    checked, design = checked_model(src, data)
    if design.n != meta["n"]:
        raise CliError(f"data has {design.n} rows but the bundle was fit to {meta['n']}")
    model = Model(design)
    draws = Draws.from_csv(os.path.join(bundle, "draws.csv"))
    raw = raw_from_draws(model, draws)
    return Fit(checked, data, design, model, config, draws, raw, meta["data_name"], meta)


def cmd_summary(args) -> int:
    sys.stdout.write(bundle_summary(args.bundle))
    return EXIT_OK


def cmd_compare(args) -> int:
    from .infer import ic_compare

    lls = []
    for b in args.bundles:
        path = os.path.join(b, "loglik.csv")
        if os.path.exists(path):
            lls.append(_read_loglik(path))
        else:
            lls.append(load_fit(b, args.data).loglik())
    names = args.names.split(",") if args.names else [os.path.basename(os.path.normpath(b)) for b in args.bundles]
    if len(names) != len(lls):
        raise CliError("--names needs one name per bundle")
    try:
        comp = ic_compare(lls, names, args.method)
    except ValueError as exc:
        raise CliError(str(exc)) from None
    sys.stdout.write(comp.render())
    return EXIT_OK


def cmd_effects(args) -> int:
    from .infer import effects_grid

    fit = load_fit(args.bundle, args.data)
    cond = _read_data(args.conditions) if args.conditions else None
    try:
        grid = effects_grid(
            fit, args.focal, cond, resolution=args.resolution, smooth_only=args.smooth_only,
            kind="predictive" if args.predictive else "expected", include_groups=args.include_groups,
        )
    except (KeyError, ValueError, DataError) as exc:
        raise CliError(str(exc).strip("'\""), EXIT_VALIDATION) from None
    _emit(grid.to_csv(), args.out)
    return EXIT_OK


def cmd_predict(args) -> int:
    from .infer import posterior_predict

    fit = load_fit(args.bundle, args.data)
    newdata = _read_data(args.newdata) if args.newdata else None
    try:
        pred = posterior_predict(
            fit, newdata, include_groups=not args.no_groups,
            kind="predictive" if args.predictive else "expected",
        )
    except (SpecError, DesignError, DataError, ValueError) as exc:
        raise CliError(str(exc), EXIT_VALIDATION) from None
    lo, hi = np.quantile(pred, [0.025, 0.975], axis=0)
    lines = ["row,estimate,est_error,lower95,upper95"]
    for i in range(pred.shape[1]):
        col = pred[:, i]
        lines.append(f"{i + 1},{float(col.mean())!r},{float(col.std(ddof=1))!r},{float(lo[i])!r},{float(hi[i])!r}")
    _emit("\n".join(lines) + "\n", args.out)
    return EXIT_OK


def cmd_codegen(args) -> int:
    data = _read_data(args.data)
    checked, design = checked_model(model_source(args), data)
    _emit(emit_program(checked, design).rendered, args.out)
    return EXIT_OK


def cmd_simulate_mm(args) -> int:
    sim = simulate_multi_membership(args.nschools, args.nstudents, args.change, seed=args.seed)
    _emit(write_csv(sim.data), args.out)
    return EXIT_OK


def cmd_logdensity(args) -> int:
    data = _read_data(args.data)
    _, design = checked_model(model_source(args), data)
    model = Model(design)
    if args.theta:
        theta = np.array([float(v) for v in args.theta.split(",")])
    else:
        theta = np.zeros(model.dim)
    if theta.shape != (model.dim,):
        raise CliError(f"--theta needs {model.dim} values, got {theta.size}")
    lp, grad = model.log_density_grad(theta)
    out = {
        "dim": model.dim,
        "names": model.space.unconstrained_names(),
        "log_density": lp if math.isfinite(lp) else None,
        "gradient": [float(g) for g in grad],
    }
    _emit(F.dump_json(out), None)
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hierform", description="Bayesian hierarchical regression from formulas.")
    p.add_argument("--version", action="version", version=f"hierform {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("parse", help="print the parsed formula (and resolved group blocks) as JSON")
    add_model_args(s, data=False)
    s.add_argument("--resolve", action="store_true", help="merge group terms into blocks")
    s.set_defaults(func=cmd_parse)

    s = sub.add_parser("design-dump", help="build and print or write the design matrices")
    add_model_args(s)
    s.add_argument("--out-dir", help="write one CSV per block here")
    s.set_defaults(func=cmd_design_dump)

    s = sub.add_parser("fit", help="sample the posterior and write a fit bundle")
    add_model_args(s)
    s.add_argument("--out", required=True, help="bundle directory")
    s.add_argument("--data-name", help="data label for the summary (default: file stem)")
    s.add_argument("--chains", type=int, default=4)
    s.add_argument("--iter", type=int, default=2000)
    s.add_argument("--warmup", type=int, default=None, help="default: iter / 2")
    s.add_argument("--adapt-delta", type=float, default=0.8)
    s.add_argument("--max-treedepth", type=int, default=10)
    s.add_argument("--thin", type=int, default=1)
    s.add_argument("--seed", type=int, default=None, help="default: $HIERFORM_SEED or 0")
    s.add_argument("--cores", type=int, default=1, help="parallel chain processes")
    s.add_argument("--allow-nonconverged", action="store_true", help="exit 0 even if some R-hat > 1.1")
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("summary", help="print the summary of a fit bundle")
    s.add_argument("bundle")
    s.set_defaults(func=cmd_summary)

    s = sub.add_parser("compare", help="compare bundles by LOO or WAIC")
    s.add_argument("bundles", nargs="+")
    s.add_argument("--method", choices=["loo", "waic"], default="loo")
    s.add_argument("--names", help="comma-separated model names")
    s.add_argument("--data", help="data file when a bundle lacks loglik.csv")
    s.set_defaults(func=cmd_compare)

    s = sub.add_parser("effects", help="write an effects grid CSV for one focal predictor")
    s.add_argument("bundle")
    s.add_argument("--focal", required=True)
    s.add_argument("--conditions", help="CSV with one row per condition")
    s.add_argument("--resolution", type=int, default=100)
    s.add_argument("--smooth-only", action="store_true", help="centered smooth term only")
    s.add_argument("--predictive", action="store_true", help="posterior predictive instead of expected values")
    s.add_argument("--include-groups", action="store_true", help="add group-level effects")
    s.add_argument("--data", help="data file (default: path recorded in the bundle)")
    s.add_argument("--out")
    s.set_defaults(func=cmd_effects)

    s = sub.add_parser("predict", help="posterior predictions for new (or the training) data")
    s.add_argument("bundle")
    s.add_argument("--newdata")
    s.add_argument("--predictive", action="store_true")
    s.add_argument("--no-groups", action="store_true", help="drop group-level effects")
    s.add_argument("--data", help="training data file (default: path recorded in the bundle)")
    s.add_argument("--out")
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("codegen", help="print the model as probabilistic-program text")
    add_model_args(s)
    s.add_argument("--out")
    s.set_defaults(func=cmd_codegen)

    s = sub.add_parser("simulate-mm", help="simulate multi-membership data")
    s.add_argument("--nschools", type=int, default=10)
    s.add_argument("--nstudents", type=int, default=1000)
    s.add_argument("--change", type=float, default=0.1)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(func=cmd_simulate_mm)

    s = sub.add_parser("logdensity", help="log posterior and gradient at an unconstrained point")
    add_model_args(s)
    s.add_argument("--theta", help="comma-separated unconstrained values (default: zeros)")
    s.set_defaults(func=cmd_logdensity)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
