"""Bundled example inputs: study archives, strata configs, a fitted prior."""

from importlib.resources import files
from pathlib import Path

_NAMES = (
    "drug_os_archive.csv",
    "pfs_archive.csv",
    "drug_strata.cfg",
    "star_strata.cfg",
    "star_prior.json",
)


def bundled_path(name: str) -> Path:
    """Absolute path of a bundled data file by name."""
    if name not in _NAMES:
        raise KeyError(f"unknown bundled file {name!r}; have {sorted(_NAMES)}")
    return Path(str(files(__package__) / name))
