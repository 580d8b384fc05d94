"""Response families and link functions."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

LINKS = ("identity", "log", "logit")


def link_inverse(link: str, eta):
    """Map a linear predictor to the parameter scale."""
    eta = np.asarray(eta, dtype=float)
    if link == "identity":
        return eta
    if link == "log":
        return np.exp(eta)
    if link == "logit":
        return expit(eta)
    raise ValueError(f"unknown link {link!r}")


def link_forward(link: str, theta):
    theta = np.asarray(theta, dtype=float)
    if link == "identity":
        return theta
    if link == "log":
        return np.log(theta)
    if link == "logit":
        return np.log(theta) - np.log1p(-theta)
    raise ValueError(f"unknown link {link!r}")


@dataclass(frozen=True)
class Family:
    name: str
    dpars: tuple[str, ...]
    links: tuple[tuple[str, str], ...]

    def link(self, dpar: str) -> str:
        return dict(self.links)[dpar]

    @property
    def count_response(self) -> bool:
        return self.name in ("poisson", "zero_inflated_poisson")

    @property
    def label(self) -> str:
        return f"{self.name} ({self.link('mu')})"

    def to_dict(self) -> dict:
        return {"name": self.name, "links": dict(self.links)}


_DEFAULT_LINKS = {
    "gaussian": (("mu", "identity"), ("sigma", "log")),
    "poisson": (("mu", "log"),),
    "zero_inflated_poisson": (("mu", "log"), ("zi", "logit")),
}

_MU_LINKS = {
    "gaussian": ("identity", "log"),
    "poisson": ("log", "identity"),
    "zero_inflated_poisson": ("log",),
}

FAMILY_NAMES = tuple(_DEFAULT_LINKS)


def get_family(name: str | Family, link: str | None = None) -> Family:
    """Look up a family by name, e.g. ``"zero_inflated_poisson"`` or ``"gaussian(log)"``."""
    if isinstance(name, Family):
        return name
    name = name.strip()
    if name.endswith(")") and "(" in name:
        name, _, arg = name[:-1].partition("(")
        arg = arg.strip().strip("\"'")
        if arg:
            link = arg
        name = name.strip()
    if name not in _DEFAULT_LINKS:
        raise ValueError(f"unsupported family {name!r}; available: {', '.join(FAMILY_NAMES)}")
    links = dict(_DEFAULT_LINKS[name])
    if link is not None:
        if link not in _MU_LINKS[name]:
            raise ValueError(f"link {link!r} is not available for family {name}")
        links["mu"] = link
    return Family(name, tuple(links), tuple(links.items()))
