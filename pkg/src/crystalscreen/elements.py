"""Static element property table (Z = 1..100)."""

import json
from functools import lru_cache
from importlib import resources

MAX_Z = 100


@lru_cache(maxsize=None)
def _table():
    with resources.files("crystalscreen.data").joinpath("elements.json").open() as fh:
        rows = json.load(fh)["elements"]
    return {row["Z"]: row for row in rows}


@lru_cache(maxsize=None)
def _by_symbol():
    return {row["symbol"]: z for z, row in _table().items()}


def element(z):
    return _table()[int(z)]


def symbol(z):
    return _table()[int(z)]["symbol"]


def atomic_number(sym):
    try:
        return _by_symbol()[sym]
    except KeyError:
        raise KeyError(f"unknown element symbol {sym!r}") from None


def electronegativity(z):
    """Pauling electronegativity, or None for the noble gases lacking one."""
    return _table()[int(z)]["electronegativity"]


def oxidation_states(z):
    return tuple(_table()[int(z)]["oxidation_states"])


def row(z):
    return _table()[int(z)]["row"]


def group(z):
    return _table()[int(z)]["group"]


@lru_cache(maxsize=None)
def property_range(name):
    """(min, max) of a numeric property over the table, ignoring missing values."""
    vals = [r[name] if name != "Z" else r["Z"] for r in _table().values()]
    vals = [v for v in vals if v is not None]
    return float(min(vals)), float(max(vals))
