"""Bundled measured-run fixtures and their loader.

Each fixture is a flat JSON record with three blocks: ``source``
(:class:`~uplinkqkd.keyrate.SourceConfig` fields), ``security``
(:class:`~uplinkqkd.keyrate.SecurityParams` fields) and ``stats``
(:class:`~uplinkqkd.keyrate.ChannelStatistics` fields).  The ``q``
values are the measured sifted/raw ratios of the corresponding runs.
"""

from __future__ import annotations

import json
from importlib import resources
from pathlib import Path

from .keyrate import ChannelStatistics, SecurityParams, SourceConfig

FIXTURE_NAMES = (
    "loss_28.8dB",
    "loss_34.9dB",
    "loss_40.1dB",
    "loss_45.6dB",
    "loss_50.3dB",
    "loss_52.1dB",
    "loss_56.5dB",
    "pass_best",
    "pass_upper_quartile",
    "pass_median",
)


def load_fixture(name_or_path: str) -> tuple[SourceConfig, ChannelStatistics, SecurityParams]:
    """Load a bundled fixture by name, or any fixture-format JSON by path."""
    if name_or_path in FIXTURE_NAMES:
        text = (resources.files("uplinkqkd") / "fixtures" / f"{name_or_path}.json").read_text()
    else:
        text = Path(name_or_path).read_text()
    record = json.loads(text)
    cfg = SourceConfig(**record["source"])
    sec = SecurityParams(**record.get("security", {}))
    stats = ChannelStatistics.from_dict(record["stats"])
    return cfg, stats, sec
