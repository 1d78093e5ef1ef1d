"""JSON or TOML configuration files with one section per component."""

import json
from pathlib import Path

SECTIONS = ("scene", "train", "refine", "localize", "benchmark")


def load_config(path):
    """Read a config file; the format follows the extension (``.toml`` or JSON otherwise)."""
    if path is None:
        return {}
    p = Path(path)
    text = p.read_text()
    if p.suffix.lower() == ".toml":
        try:
            import tomllib
        except ImportError:  # Python < 3.11
            import tomli as tomllib
        data = tomllib.loads(text)
    else:
        data = json.loads(text)
    if not isinstance(data, dict):
        raise ValueError(f"{path}: top level must be a table/object")
    bad = sorted(set(data) - set(SECTIONS))
    if bad:
        raise ValueError(f"{path}: unknown section(s) {', '.join(bad)}; expected {', '.join(SECTIONS)}")
    return data
