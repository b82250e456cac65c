"""Synthetic inputs for end-to-end CLI runs."""

from __future__ import annotations

import json
from pathlib import Path

from liqguard.ingestion import write_transactions
from liqguard.synthetic import MarketSpec, generate_market

SMALL = MarketSpec(n_users=16, days=60, seed=0)


def write_inputs(root: Path, spec: MarketSpec = SMALL, **overrides) -> Path:
    """Write tx.csv, reserves.json and cfg.json under ``root``; return the config path."""
    records, configs, _ = generate_market(spec)
    write_transactions(records, root / "tx.csv")
    (root / "reserves.json").write_text(
        json.dumps([c.to_dict() for c in configs.values()], indent=1))
    cfg = {"paths": {"transactions": "tx.csv", "reserves": "reserves.json",
                     "output_dir": "out"},
           "sampling": {"per_pair": 4}, "sensitivity": {"trials": 5}}
    for key, value in overrides.items():
        cfg.setdefault(key, {}).update(value)
    path = root / "cfg.json"
    path.write_text(json.dumps(cfg))
    return path
