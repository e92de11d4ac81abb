"""gridflow: three-phase distribution power flow and neural surrogates."""

from importlib import resources

__version__ = "0.1.0"


def asset_path(name: str):
    """Path to a bundled asset file (circuit, config, loadshape)."""
    return resources.files(__package__) / "assets" / name
