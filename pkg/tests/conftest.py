import importlib.resources as ir
import os
import warnings

import numpy as np
import pytest

from hierform.tabular import factor, from_columns, numeric, read_csv

HERE = os.path.dirname(__file__)
GOLDEN = os.path.join(HERE, "golden")

# acceptance outcomes: criterion number -> (passed or None for skipped, detail)
ACCEPTANCE: dict = {}


def loss_path() -> str:
    return str(ir.files("hierform") / "data" / "loss.csv")


def _find(env: str, names: list[str]) -> str | None:
    p = os.environ.get(env)
    if p and os.path.exists(p):
        return p
    for base in (os.path.join(HERE, "data"), str(ir.files("hierform") / "data")):
        for n in names:
            cand = os.path.join(base, n)
            if os.path.exists(cand):
                return cand
    return None


def fish_path() -> str | None:
    return _find("HIERFORM_FISH_CSV", ["fish.csv"])


def read_fish(path: str):
    """Fish data with ``camper`` as a no/yes factor ("no" is the reference)."""
    d = read_csv(path)
    cam = d["camper"]
    labels = cam.labels if cam.kind == "factor" else ["yes" if v else "no" for v in cam.values]
    labels = [{"0": "no", "1": "yes"}.get(l, l) for l in labels]
    return d.with_column("camper", factor(labels, levels=["no", "yes"]))


def rent_path() -> str | None:
    return _find("HIERFORM_RENT_CSV", ["rent99.csv", "rent.csv"])


@pytest.fixture(scope="session")
def loss_data():
    return read_csv(loss_path())


@pytest.fixture(scope="session")
def mixed_data():
    """Small random data set with every column type the models need."""
    rng = np.random.default_rng(0)
    n = 40
    d = from_columns(
        {
            "y": rng.normal(size=n),
            "c": rng.poisson(2, size=n),
            "x": rng.normal(size=n),
            "x2": rng.uniform(0, 3, size=n),
            "g": rng.choice(["a", "b", "c", "d"], n),
            "h": rng.choice(["u", "v"], n),
            "yp": rng.uniform(1, 5, size=n),
            "w": rng.uniform(0.5, 2, size=n),
            "s1": rng.choice(list("pqrs"), n),
            "s2": rng.choice(list("pqrs"), n),
            "w1": rng.uniform(size=n),
        },
        factors=["g", "h", "s1", "s2"],
    )
    return d.with_column("w2", numeric(1 - d["w1"].as_float()))


def pytest_configure(config):
    warnings.filterwarnings("ignore", message="grouping variable")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        status = "SKIP" if ok is None else ("PASS" if ok else "FAIL")
        tr.write_line(f"criterion {k:2d}: {status}  {detail}")


def fish_schema_standin():
    """Small synthetic data set with the column types of the fish data."""
    rng = np.random.default_rng(0)
    n = 20
    d = from_columns(
        {"count": rng.poisson(1, n), "persons": rng.integers(1, 5, n), "child": rng.integers(0, 3, n)}
    )
    return d.with_column("camper", factor(list(rng.choice(["no", "yes"], n)), levels=["no", "yes"]))


LOSS_PRIORS = ["normal(5000, 1000), nlpar = ult", "normal(1, 2), nlpar = omega", "normal(45, 10), nlpar = theta"]
LOSS_NL = "cum ~ ult * (1 - exp(-(dev / theta)^omega))"


def codegen_cases():
    """name -> (checked spec, design) for the snapshot programs."""
    from hierform import assemble, bf, sim_multi_mem, validate

    fish = fish_schema_standin()
    loss = read_csv(loss_path())
    mm = sim_multi_mem(seed=1)
    specs = {
        "fish_zinb2": (bf("count ~ persons + child + camper", "zi ~ child", family="zero_inflated_poisson"), fish),
        "loss1": (bf(LOSS_NL, "ult ~ 1 + (1|AY)", "omega ~ 1", "theta ~ 1", nl=True, priors=LOSS_PRIORS), loss),
        "mm": (bf("y ~ 1 + (1|mm(s1, s2))"), mm),
        "intercept_only": (bf("y ~ 1"), mm),
    }
    out = {}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for name, (spec, d) in specs.items():
            c = validate(spec, d)
            out[name] = (c, assemble(c, d))
    return out
