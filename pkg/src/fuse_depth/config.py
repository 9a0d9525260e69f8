"""Line-based ``key = value`` configuration files."""

from __future__ import annotations

import os


class ConfigError(ValueError):
    pass


def parse_config(path: str | os.PathLike) -> dict[str, str]:
    """Read ``key = value`` lines; ``#`` starts a comment, blank lines are skipped.

    Keys are normalised to use underscores, so ``batch-size`` and
    ``batch_size`` name the same setting. Repeated keys are an error.
    """
    out: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw.strip()!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            key = key.replace("-", "_")
            if not key:
                raise ConfigError(f"{path}:{lineno}: empty key")
            if key in out:
                raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
            out[key] = value
    return out


def check_keys(config: dict, known) -> None:
    unknown = sorted(set(config) - set(known))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}; known: {', '.join(sorted(known))}")


def format_config(config: dict) -> str:
    """Inverse of :func:`parse_config` for flat scalar settings."""
    return "".join(f"{k} = {v}\n" for k, v in sorted(config.items()))
