"""Bundled example data."""
from importlib import resources


def dentist_path():
    """Path of the 3869 x 5 binary dentist-agreement table (Handelman's x-ray data)."""
    return resources.files(__name__) / "dentist.csv"
