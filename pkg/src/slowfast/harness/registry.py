"""Run records: what was run, with which config and seeds, and what it produced."""
from __future__ import annotations

import json
import math
import uuid
from dataclasses import asdict, dataclass, field
from pathlib import Path


def _encode(v):
    if isinstance(v, float) and not math.isfinite(v):
        return {"__float__": repr(v)}
    if isinstance(v, dict):
        return {k: _encode(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_encode(x) for x in v]
    return v


def _decode(v):
    if isinstance(v, dict):
        if set(v) == {"__float__"}:
            return float(v["__float__"])
        return {k: _decode(x) for k, x in v.items()}
    if isinstance(v, list):
        return [_decode(x) for x in v]
    return v


@dataclass
class RunRecord:
    run_id: str
    config: dict
    config_hash: str
    seed_family: int
    kind: str
    manifest: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)
    status: str = "pending"
    results: dict = field(default_factory=dict)

    @classmethod
    def new(cls, config: dict, config_hash: str, seed_family: int, kind: str,
            deterministic: bool = False) -> "RunRecord":
        run_id = f"{kind}-{config_hash[:12]}" if deterministic else \
            f"{kind}-{config_hash[:8]}-{uuid.uuid4().hex[:8]}"
        return cls(run_id, config, config_hash, int(seed_family), kind)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(_encode(asdict(self)), indent=2, sort_keys=True))

    @classmethod
    def load(cls, path) -> "RunRecord":
        return cls(**_decode(json.loads(Path(path).read_text())))
