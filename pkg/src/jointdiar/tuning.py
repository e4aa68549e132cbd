"""Exhaustive grid search over VBx hyperparameters by development-set DER."""

from __future__ import annotations

import itertools
import json
import os
from dataclasses import asdict, dataclass, replace

from .archive import ExtractionArchive
from .config import ConfigError
from .metrics import Annotation, DERBreakdown, aggregate, compute_der
from .pipeline import BinarizeConfig, run_diarization
from .plda import PLDAModel
from .vbx import VBxConfig

GRID_KEYS = ("fa", "fb", "ploop", "ahc_threshold")


@dataclass
class DevRecording:
    name: str
    archive: ExtractionArchive
    reference: Annotation


def _config_key(cfg: VBxConfig) -> str:
    return json.dumps(asdict(cfg), sort_keys=True)


class ResultCache:
    """DER breakdowns keyed by (recording, config); optionally backed by a
    JSON file so reruns reuse identical numbers."""

    def __init__(self, path=None):
        self.path = path
        self.entries: dict[str, dict] = {}
        if path and os.path.exists(path):
            with open(path) as fh:
                self.entries = json.load(fh)

    def get(self, name: str, cfg: VBxConfig) -> DERBreakdown | None:
        hit = self.entries.get(name + "|" + _config_key(cfg))
        return DERBreakdown(**hit) if hit else None

    def put(self, name: str, cfg: VBxConfig, der: DERBreakdown) -> None:
        self.entries[name + "|" + _config_key(cfg)] = asdict(der)

    def save(self) -> None:
        if self.path:
            tmp = self.path + ".tmp"
            with open(tmp, "w") as fh:
                json.dump(self.entries, fh, sort_keys=True, indent=0)
            os.replace(tmp, self.path)


def expand_grid(grid: dict, base: VBxConfig = VBxConfig()) -> list[VBxConfig]:
    unknown = set(grid) - set(GRID_KEYS)
    if unknown:
        raise ConfigError(f"unknown grid keys: {sorted(unknown)}")
    keys = [k for k in GRID_KEYS if k in grid]
    values = [list(grid[k]) if isinstance(grid[k], (list, tuple)) else [grid[k]] for k in keys]
    if any(len(v) == 0 for v in values):
        raise ConfigError("empty grid")
    return [replace(base, **dict(zip(keys, combo))) for combo in itertools.product(*values)]


def grid_search_hyperparams(dev_recordings, grid, plda: PLDAModel, base: VBxConfig = VBxConfig(),
                            bin_cfg: BinarizeConfig = BinarizeConfig(), cache: ResultCache | None = None):
    """Return ``(best_config, table)`` where ``table`` lists
    ``(config, corpus DERBreakdown)`` for every candidate.

    Lowest corpus DER wins; ties prefer smaller Ploop, then smaller Fa.
    """
    candidates = grid if isinstance(grid, list) else expand_grid(grid, base)
    if not candidates:
        raise ConfigError("empty grid")
    if not dev_recordings:
        raise ConfigError("no development recordings")
    cache = cache or ResultCache()
    table = []
    for cfg in candidates:
        parts = []
        for rec in dev_recordings:
            der = cache.get(rec.name, cfg)
            if der is None:
                der = compute_der(rec.reference, run_diarization(rec.archive, plda, cfg, bin_cfg))
                cache.put(rec.name, cfg, der)
            parts.append(der)
        table.append((cfg, aggregate(parts)))
    cache.save()
    best = min(table, key=lambda row: (round(row[1].der_pct, 9), row[0].ploop, row[0].fa))
    return best[0], table
