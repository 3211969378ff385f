"""Run configuration: TOML file + flag overrides + seed environment hook.

Every output sidecar records config_hash(), the sha256 of the resolved
science parameters (canonical frame, SLIC, surrogate, oracle and model
set). Output/input locations are excluded from the hash so the same
experiment written to two directories hashes identically.

The XFG_SEED environment variable, when set, overrides the master seed
from both file and flags.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .expressions import EXPRESSIONS
from .oracle import (
    ConstantClassOracle,
    ExternalOracle,
    RegionSoftmaxOracle,
    UniformOracle,
)

_ID_RE = re.compile(r"^[A-Za-z0-9._-]+$")
SYNTHETIC_KINDS = ("region-softmax", "uniform", "constant-class")


class UsageError(Exception):
    """Bad invocation or configuration; maps to exit code 2."""


@dataclass
class ModelSpec:
    """One classifier under analysis: an external command or a synthetic."""

    id: str
    fold: str = "f0"
    cmd: str | None = None
    synthetic: str | None = None
    temperature: float = 1.0
    boxes: list | None = None
    class_index: int = 0

    def validate(self):
        for name, val in (("model id", self.id), ("fold", self.fold)):
            if not _ID_RE.match(val):
                raise UsageError(f"{name} {val!r} must match [A-Za-z0-9._-]+")
        if (self.cmd is None) == (self.synthetic is None):
            raise UsageError(f"model {self.id}: exactly one of cmd/synthetic required")
        if self.synthetic is not None:
            if self.synthetic not in SYNTHETIC_KINDS:
                raise UsageError(
                    f"model {self.id}: synthetic must be one of {SYNTHETIC_KINDS}"
                )
            if self.synthetic == "region-softmax":
                boxes = np.asarray(self.boxes if self.boxes is not None else [])
                if boxes.shape != (len(EXPRESSIONS), 4):
                    raise UsageError(
                        f"model {self.id}: region-softmax needs 6 [x0,y0,x1,y1] boxes"
                    )
            if self.synthetic == "constant-class" and not 0 <= self.class_index < 6:
                raise UsageError(f"model {self.id}: class_index out of range")

    def build_oracle(self, timeout: float):
        """Fresh oracle handle (external models spawn a new child)."""
        if self.cmd is not None:
            return ExternalOracle(self.cmd, identity=self.id, timeout=timeout)
        if self.synthetic == "region-softmax":
            return RegionSoftmaxOracle(self.id, np.asarray(self.boxes), self.temperature)
        if self.synthetic == "uniform":
            return UniformOracle(self.id)
        return ConstantClassOracle(self.id, self.class_index)


@dataclass
class RunConfig:
    width: int = 112
    height: int = 112
    layout: str = "default"
    slic_k: int = 30
    slic_compactness: float = 10.0
    slic_iterations: int = 10
    n_samples: int = 1000
    sigma: float = 0.25
    ridge: float = 1.0
    batch: int = 128
    master_seed: int = 0
    quota: int = 0  # per-class positive cap in explain; 0 = unlimited
    jobs: int = 1
    oracle_pool: int = 1
    oracle_timeout: float = 30.0
    au_table: str = "default"
    au_regions: str = "default"
    level: str = "per_model"  # heatmap level feeding compare/cluster
    linkage: str = "average"
    models: list[ModelSpec] = field(default_factory=list)

    def validate(self):
        checks = [
            (self.width >= 8 and self.height >= 8, "canonical resolution too small"),
            (self.slic_k >= 1, "slic k must be >= 1"),
            (self.slic_compactness > 0, "slic compactness must be positive"),
            (self.slic_iterations >= 1, "slic iterations must be >= 1"),
            (self.n_samples >= 1, "lime n_samples must be >= 1"),
            (self.sigma > 0, "lime sigma must be positive"),
            (self.ridge >= 0, "lime ridge must be non-negative"),
            (self.batch >= 1, "lime batch must be >= 1"),
            (self.quota >= 0, "quota must be >= 0"),
            (self.jobs >= 1, "jobs must be >= 1"),
            (self.oracle_pool >= 1, "oracle pool must be >= 1"),
            (self.oracle_timeout > 0, "oracle timeout must be positive"),
            (self.level in ("per_fold", "per_model", "global"), "bad heatmap level"),
            (self.linkage in ("average", "single", "complete"), "bad linkage"),
        ]
        for ok, msg in checks:
            if not ok:
                raise UsageError(msg)
        ids = [(m.id, m.fold) for m in self.models]
        if len(set(ids)) != len(ids):
            raise UsageError("duplicate (model id, fold) pairs")
        for m in self.models:
            m.validate()

    def config_hash(self) -> str:
        payload = {
            "canonical": [self.width, self.height, self.layout],
            "slic": [self.slic_k, self.slic_compactness, self.slic_iterations],
            "lime": [self.n_samples, self.sigma, self.ridge],
            "seed": self.master_seed,
            "quota": self.quota,
            "masks": [self.au_table, self.au_regions],
            "level": self.level,
            "linkage": self.linkage,
            "models": [
                [m.id, m.fold, m.cmd, m.synthetic, m.temperature,
                 np.asarray(m.boxes).tolist() if m.boxes is not None else None,
                 m.class_index]
                for m in self.models
            ],
        }
        blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def load_config(path) -> RunConfig:
    try:
        raw = tomllib.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, tomllib.TOMLDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    cfg = RunConfig()
    canonical = raw.get("canonical", {})
    cfg.width = int(canonical.get("width", cfg.width))
    cfg.height = int(canonical.get("height", cfg.height))
    cfg.layout = str(canonical.get("layout", cfg.layout))
    slic = raw.get("slic", {})
    cfg.slic_k = int(slic.get("k", cfg.slic_k))
    cfg.slic_compactness = float(slic.get("compactness", cfg.slic_compactness))
    cfg.slic_iterations = int(slic.get("iterations", cfg.slic_iterations))
    lime = raw.get("lime", {})
    cfg.n_samples = int(lime.get("n_samples", cfg.n_samples))
    cfg.sigma = float(lime.get("sigma", cfg.sigma))
    cfg.ridge = float(lime.get("ridge", cfg.ridge))
    cfg.batch = int(lime.get("batch", cfg.batch))
    run = raw.get("run", {})
    cfg.master_seed = int(run.get("master_seed", cfg.master_seed))
    cfg.quota = int(run.get("quota", cfg.quota))
    cfg.jobs = int(run.get("jobs", cfg.jobs))
    oracle = raw.get("oracle", {})
    cfg.oracle_pool = int(oracle.get("pool", cfg.oracle_pool))
    cfg.oracle_timeout = float(oracle.get("timeout", cfg.oracle_timeout))
    masks = raw.get("masks", {})
    cfg.au_table = str(masks.get("au_table", cfg.au_table))
    cfg.au_regions = str(masks.get("au_regions", cfg.au_regions))
    grouping = raw.get("grouping", {})
    cfg.level = str(grouping.get("level", cfg.level))
    cfg.linkage = str(grouping.get("linkage", cfg.linkage))
    for m in raw.get("models", []):
        cfg.models.append(
            ModelSpec(
                id=str(m.get("id", "")),
                fold=str(m.get("fold", "f0")),
                cmd=m.get("cmd"),
                synthetic=m.get("synthetic"),
                temperature=float(m.get("temperature", 1.0)),
                boxes=m.get("boxes"),
                class_index=int(m.get("class_index", 0)),
            )
        )
    return cfg


def apply_env_seed(cfg: RunConfig) -> RunConfig:
    raw = os.environ.get("XFG_SEED")
    if raw is not None:
        try:
            cfg.master_seed = int(raw)
        except ValueError as exc:
            raise UsageError(f"XFG_SEED={raw!r} is not an integer") from exc
    return cfg
