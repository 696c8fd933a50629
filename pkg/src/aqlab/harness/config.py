"""Sweep configuration files.

A sweep is one YAML mapping::

    name: chain_noise
    kind: tabular            # or continuous
    master_seed: 0
    seeds: [0, 1, 2]         # or {start: 0, count: 20}
    total_steps: 100000
    log_every: 100
    workers: 1
    out: results/chain_noise # optional, the CLI flag wins
    base: {...}              # sub-config shared by every cell
    variants:                # optional named overrides, one cell group each
      sarsa: {rule.variant: sarsa}
    grid:                    # optional cross product of dotted-key values
      noise.sigma: [0.0, 0.3]
    analysis: {...}          # optional summary settings

Tabular ``base`` keys: ``mdp`` (chain parameters, or ``{file: path}``),
``rule``, ``noise``, ``agent``. Continuous ``base`` keys: ``env``,
``agent``, ``probes``. Overrides use dotted paths into ``base``; a mapping
value replaces the whole subtree. Unknown keys anywhere are errors.
"""

from __future__ import annotations

import copy
import hashlib
import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from ..continuous.envs import ToyEnvConfig
from ..continuous.train import AgentConfig
from ..expectile import TauSchedule
from ..mdp import ChainMdpParams, TabularMdp, build_chain_mdp, load_mdp
from ..tabular import NoiseSpec, TargetRule

KINDS = ("tabular", "continuous")
_TOP_KEYS = {"name", "kind", "master_seed", "seeds", "total_steps", "log_every", "workers", "out", "base", "variants", "grid", "analysis"}
_BASE_KEYS = {"tabular": {"mdp", "rule", "noise", "agent"}, "continuous": {"env", "agent", "probes"}}
_TABULAR_AGENT_KEYS = {"step_size", "epsilon", "max_episode_len"}
ANALYSIS_DEFAULTS = {
    "band_fraction": 0.05,  # tabular: band = fraction * |Q*(s0, a0)|
    "late_fraction": 0.1,  # tabular: late phase = last fraction of logged rows
    "n_resamples": 10_000,
    "level": 0.95,
    "bootstrap_seed": 0,
}


class ConfigError(ValueError):
    """Invalid sweep configuration; the message starts with the offending key path."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path
        self.message = message


@dataclass(frozen=True)
class Cell:
    cell_id: str
    config: dict  # resolved sub-config (plain data)


@dataclass
class RunConfig:
    name: str
    kind: str
    seeds: list[int]
    total_steps: int
    log_every: int
    base: dict
    master_seed: int = 0
    workers: int = 1
    out: str | None = None
    variants: dict = field(default_factory=dict)
    grid: dict = field(default_factory=dict)
    analysis: dict = field(default_factory=lambda: dict(ANALYSIS_DEFAULTS))
    base_dir: str | None = None  # relative file references resolve against this

    def cells(self) -> list[Cell]:
        """Every (variant x grid point) combination, in declaration order."""
        variants = list(self.variants.items()) or [(None, {})]
        keys = list(self.grid)
        out = []
        for vname, overrides in variants:
            for combo in itertools.product(*(self.grid[k] for k in keys)):
                cfg = copy.deepcopy(self.base)
                for k, v in overrides.items():
                    set_dotted(cfg, k, v)
                for k, v in zip(keys, combo):
                    set_dotted(cfg, k, v)
                parts = ([vname] if vname is not None else []) + [f"{k}={_label(v)}" for k, v in zip(keys, combo)]
                out.append(Cell("__".join(parts) or "base", cfg))
        ids = [c.cell_id for c in out]
        if len(set(ids)) != len(ids):
            raise ConfigError("grid", "cell ids collide; use distinct variant names and grid values")
        return out

    def fingerprint(self, cell: Cell) -> str:
        """Hash of everything that determines the runs of ``cell`` apart from the seed."""
        blob = json.dumps(
            {"kind": self.kind, "cell": cell.cell_id, "config": cell.config, "total_steps": self.total_steps,
             "log_every": self.log_every, "master_seed": self.master_seed},
            sort_keys=True,
        )
        return hashlib.sha256(blob.encode()).hexdigest()

    def to_dict(self) -> dict:
        return {
            "name": self.name, "kind": self.kind, "master_seed": self.master_seed, "seeds": list(self.seeds),
            "total_steps": self.total_steps, "log_every": self.log_every, "workers": self.workers, "out": self.out,
            "base": self.base, "variants": self.variants, "grid": self.grid, "analysis": self.analysis,
        }


def _label(v) -> str:
    if isinstance(v, (dict, list)):
        return hashlib.sha256(json.dumps(v, sort_keys=True).encode()).hexdigest()[:8]
    return str(v)


def set_dotted(cfg: dict, key: str, value) -> None:
    parts = key.split(".")
    node = cfg
    for p in parts[:-1]:
        nxt = node.get(p)
        if nxt is None:
            nxt = node[p] = {}
        if not isinstance(nxt, dict):
            raise ConfigError(key, f"{p!r} is not a mapping")
        node = nxt
    node[parts[-1]] = copy.deepcopy(value)


def run_seed_sequence(master_seed: int, cell_id: str, seed: int) -> np.random.SeedSequence:
    """Random stream of one run.

    The cell id is hashed with SHA-256 and its first 16 bytes become four
    32-bit words; together with the seed they form the spawn key under the
    master seed, so streams of different cells or seeds never share a key.
    """
    words = np.frombuffer(hashlib.sha256(cell_id.encode()).digest()[:16], dtype="<u4")
    return np.random.SeedSequence(entropy=int(master_seed), spawn_key=(*(int(w) for w in words), int(seed)))


def _int(value, path: str, minimum: int) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(path, f"expected an integer, got {value!r}")
    if value < minimum:
        raise ConfigError(path, f"must be at least {minimum}")
    return value


def _mapping(value, path: str) -> dict:
    if not isinstance(value, dict):
        raise ConfigError(path, f"expected a mapping, got {type(value).__name__}")
    return value


def _seeds(value) -> list[int]:
    if isinstance(value, dict):
        unknown = set(value) - {"start", "count"}
        if unknown:
            raise ConfigError("seeds", f"unknown keys {sorted(unknown)}")
        start = _int(value.get("start", 0), "seeds.start", 0)
        count = _int(value.get("count", 0), "seeds.count", 1)
        return list(range(start, start + count))
    if not isinstance(value, list) or not value:
        raise ConfigError("seeds", "must be a non-empty list of distinct integers")
    seeds = [_int(s, f"seeds[{i}]", 0) for i, s in enumerate(value)]
    if len(set(seeds)) != len(seeds):
        raise ConfigError("seeds", "seeds must be distinct")
    return seeds


def parse_config(raw: dict, source: str | Path | None = None) -> RunConfig:
    """Validate a config mapping; every cell is built once so errors surface before any run."""
    raw = _mapping(raw, "")
    unknown = set(raw) - _TOP_KEYS
    if unknown:
        raise ConfigError(sorted(unknown)[0], "unknown key")
    for key in ("kind", "seeds", "total_steps", "base"):
        if key not in raw:
            raise ConfigError(key, "missing required key")
    kind = raw["kind"]
    if kind not in KINDS:
        raise ConfigError("kind", f"expected one of {KINDS}, got {kind!r}")
    total_steps = _int(raw["total_steps"], "total_steps", 1)
    log_every = _int(raw.get("log_every", max(1, total_steps // 100)), "log_every", 1)
    base = _mapping(raw["base"], "base")
    unknown = set(base) - _BASE_KEYS[kind]
    if unknown:
        raise ConfigError(f"base.{sorted(unknown)[0]}", f"unknown key for a {kind} sweep")
    variants = _mapping(raw.get("variants") or {}, "variants")
    for vname, ov in variants.items():
        _mapping(ov, f"variants.{vname}")
    grid = _mapping(raw.get("grid") or {}, "grid")
    for k, vals in grid.items():
        if not isinstance(vals, list) or not vals:
            raise ConfigError(f"grid.{k}", "expected a non-empty list of values")
    analysis = dict(ANALYSIS_DEFAULTS)
    given = _mapping(raw.get("analysis") or {}, "analysis")
    unknown = set(given) - set(ANALYSIS_DEFAULTS)
    if unknown:
        raise ConfigError(f"analysis.{sorted(unknown)[0]}", "unknown key")
    analysis.update(given)
    if not 0 < analysis["band_fraction"]:
        raise ConfigError("analysis.band_fraction", "must be positive")
    if not 0 < analysis["late_fraction"] <= 1:
        raise ConfigError("analysis.late_fraction", "must lie in (0, 1]")
    if not 0 < analysis["level"] < 1:
        raise ConfigError("analysis.level", "must lie in (0, 1)")
    _int(analysis["n_resamples"], "analysis.n_resamples", 1000)

    out = raw.get("out")
    if out is not None and source is not None and not Path(out).is_absolute():
        out = str(Path(source).parent / out)
    cfg = RunConfig(
        name=str(raw.get("name", Path(source).stem if source else "sweep")),
        kind=kind,
        seeds=_seeds(raw["seeds"]),
        total_steps=total_steps,
        log_every=log_every,
        base=base,
        master_seed=_int(raw.get("master_seed", 0), "master_seed", 0),
        workers=_int(raw.get("workers", 1), "workers", 1),
        out=out,
        variants=variants,
        grid=grid,
        analysis=analysis,
        base_dir=str(Path(source).parent) if source else None,
    )
    for cell in cfg.cells():
        build_cell(cfg, cell)
    return cfg


def load_config(path: str | Path) -> RunConfig:
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh)
    except yaml.YAMLError as exc:
        raise ConfigError("", f"{path} is not valid YAML: {exc}") from exc
    except OSError as exc:
        raise ConfigError("", f"cannot read {path}: {exc.strerror}") from exc
    return parse_config(raw, source=path)


@dataclass
class TabularCell:
    mdp: TabularMdp
    rule: TargetRule
    noise: NoiseSpec
    agent: dict


@dataclass
class ContinuousCell:
    env: ToyEnvConfig
    agent: AgentConfig
    probes: bool


def _build(path: str, fn, value):
    try:
        return fn(value)
    except ConfigError as exc:
        raise ConfigError(f"{path}.{exc.path}" if exc.path else path, exc.message) from exc
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(path, str(exc)) from exc


def _rule(d: dict) -> TargetRule:
    d = dict(_mapping(d, ""))
    unknown = set(d) - {"variant", "schedule"}
    if unknown:
        raise ValueError(f"unknown keys {sorted(unknown)}")
    if d.get("schedule") is not None:
        d["schedule"] = TauSchedule.from_dict(d["schedule"])
    return TargetRule(**d)


def _noise(d: dict) -> NoiseSpec:
    d = _mapping(d, "")
    unknown = set(d) - {"sigma", "enabled"}
    if unknown:
        raise ValueError(f"unknown keys {sorted(unknown)}")
    return NoiseSpec(**d)


def _mdp(d: dict, base_dir: Path | None) -> TabularMdp:
    d = _mapping(d, "")
    if "file" in d:
        if set(d) != {"file"}:
            raise ValueError("an mdp given by file takes no other keys")
        p = Path(d["file"])
        return load_mdp(p if p.is_absolute() or base_dir is None else base_dir / p)
    unknown = set(d) - set(ChainMdpParams.__dataclass_fields__)
    if unknown:
        raise ValueError(f"unknown keys {sorted(unknown)}")
    return build_chain_mdp(ChainMdpParams(**d))


def _tabular_agent(d: dict) -> dict:
    d = _mapping(d, "")
    unknown = set(d) - _TABULAR_AGENT_KEYS
    if unknown:
        raise ValueError(f"unknown keys {sorted(unknown)}")
    if not 0 < d.get("step_size", 1e-3):
        raise ValueError("step_size must be positive")
    if not 0 <= d.get("epsilon", 0.1) <= 1:
        raise ValueError("epsilon must lie in [0, 1]")
    return dict(d)


def build_cell(cfg: RunConfig, cell: Cell):
    """Turn a resolved cell config into domain objects, with key paths in errors."""
    where = f"cell {cell.cell_id!r}: "
    base_dir = Path(cfg.base_dir) if cfg.base_dir else None
    c = cell.config
    try:
        if cfg.kind == "tabular":
            built = TabularCell(
                mdp=_build("mdp", lambda v: _mdp(v, base_dir), c.get("mdp", {})),
                rule=_build("rule", _rule, c.get("rule", {})),
                noise=_build("noise", _noise, c.get("noise", {})),
                agent=_build("agent", _tabular_agent, c.get("agent", {})),
            )
            sched = built.rule.schedule
        else:
            probes = c.get("probes", True)
            if not isinstance(probes, bool):
                raise ConfigError("probes", "expected true or false")
            built = ContinuousCell(
                env=_build("env", lambda v: ToyEnvConfig.from_dict(_mapping(v, "")), c.get("env", {})),
                agent=_build("agent", lambda v: AgentConfig.from_dict(_mapping(v, "")), c.get("agent", {})),
                probes=probes,
            )
            sched = built.agent.tau_schedule
    except ConfigError as exc:
        raise ConfigError(where + exc.path, exc.message) from exc
    if sched is not None and cfg.total_steps < sched.horizon:
        raise ConfigError(where + "total_steps", f"{cfg.total_steps} is shorter than the schedule horizon {sched.horizon}")
    return built
