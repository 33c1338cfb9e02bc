"""Run configuration: a TOML file with [data], [federation] and [run] tables.

Every key is optional; unknown keys are rejected. ``--set section.key=value``
overrides are parsed as TOML values, falling back to a bare string, so
``--set data.masks=["uniform_1d:5","random_2d:3"]`` and
``--set federation.measure=l2`` both work.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from typing import Any, Sequence

import tomli

from .data import MASK_KINDS, MODALITY_TABLE, MaskSpec
from .federation import FederationConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    size: int = 64
    train_patients: int = 60
    test_patients: int = 20
    slices: int = 8
    beta: float = 0.1
    center_fraction: float = 0.08
    modalities: list[int] = field(default_factory=lambda: [0, 1])
    masks: list[str] = field(default_factory=lambda: ["uniform_1d:5", "random_2d:3"])
    seed: int = 0

    @property
    def num_clients(self) -> int:
        return len(self.modalities)

    def mask_specs(self) -> list[MaskSpec]:
        return [MaskSpec.parse(m) for m in self.masks]


@dataclass
class RunSection:
    seed: int = 0
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    out: str = "runs"
    dataset: str = "data"
    method: str = "fedcrfd"
    parallel_trials: int = 1


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    federation: FederationConfig = field(default_factory=FederationConfig)
    run: RunSection = field(default_factory=RunSection)

    def federation_for(self, seed: int | None = None, **changes) -> FederationConfig:
        cfg = dataclasses.replace(
            self.federation,
            num_clients=self.data.num_clients,
            beta=self.data.beta,
            seed=self.run.seed if seed is None else seed,
            arch=dataclasses.replace(self.federation.arch, num_modalities=max(2, max(self.data.modalities) + 1)),
        )
        return dataclasses.replace(cfg, **changes) if changes else cfg


# federation keys accepted in the file; arch fields are flattened in
_ARCH_KEYS = {"channels", "classifier_hidden", "residual"}
_FED_KEYS = {f.name for f in dataclasses.fields(FederationConfig)} - {"arch", "num_clients", "beta", "seed"}


def _check_type(section: str, key: str, value: Any, default: Any) -> Any:
    where = f"{section}.{key}"
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be a boolean")
    elif isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where} must be an integer")
    elif isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} must be a number")
        value = float(value)
    elif isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where} must be a string")
    elif isinstance(default, (list, tuple)):
        if not isinstance(value, list):
            raise ConfigError(f"{where} must be an array")
    return value


def _apply(section: str, obj, table: dict, allowed: set[str]):
    unknown = set(table) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(sorted(unknown))}")
    changes = {k: _check_type(section, k, v, getattr(obj, k)) for k, v in table.items()}
    return dataclasses.replace(obj, **changes)


def _validate(rc: RunConfig) -> RunConfig:
    d = rc.data
    if d.size < 32 or d.size % 8:
        raise ConfigError("data.size must be >= 32 and divisible by 8")
    if not d.modalities:
        raise ConfigError("data.modalities must list one modality per client")
    if any(not 0 <= m < len(MODALITY_TABLE) for m in d.modalities):
        raise ConfigError(f"data.modalities entries must be in [0, {len(MODALITY_TABLE)})")
    if len(d.masks) != len(d.modalities):
        raise ConfigError("data.masks needs one mask spec per client")
    try:
        specs = d.mask_specs()
    except ValueError as exc:
        raise ConfigError(f"bad mask spec: {exc}") from None
    for s in specs:
        if s.kind not in MASK_KINDS or s.acceleration < 1:
            raise ConfigError(f"bad mask spec {s}")
    if not 0.0 <= d.beta <= 0.5:
        raise ConfigError("data.beta must be in [0, 0.5]")
    if d.train_patients < 1 or d.test_patients < 1 or d.slices < 1:
        raise ConfigError("patient and slice counts must be positive")
    if not rc.run.seeds:
        raise ConfigError("run.seeds must not be empty")
    if len(set(rc.run.seeds)) != len(rc.run.seeds):
        raise ConfigError("run.seeds must be distinct")
    if rc.run.parallel_trials < 1:
        raise ConfigError("run.parallel_trials must be >= 1")
    try:
        rc.federation_for().validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return rc


def _parse_value(text: str) -> Any:
    try:
        return tomli.loads(f"v = {text}")["v"]
    except tomli.TOMLDecodeError:
        return text


def parse_overrides(pairs: Sequence[str]) -> dict:
    tables: dict[str, dict] = {}
    for pair in pairs:
        key, sep, value = pair.partition("=")
        section, dot, name = key.strip().partition(".")
        if not sep or not dot or not name:
            raise ConfigError(f"override {pair!r} must look like section.key=value")
        tables.setdefault(section, {})[name] = _parse_value(value.strip())
    return tables


def from_tables(tables: dict) -> RunConfig:
    unknown = set(tables) - {"data", "federation", "run"}
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(sorted(unknown))}")
    for name, t in tables.items():
        if not isinstance(t, dict):
            raise ConfigError(f"[{name}] must be a table")
    rc = RunConfig()
    data = _apply("data", rc.data, tables.get("data", {}), {f.name for f in dataclasses.fields(DataConfig)})
    fed_table = dict(tables.get("federation", {}))
    arch_table = {k: fed_table.pop(k) for k in list(fed_table) if k in _ARCH_KEYS}
    unknown = set(fed_table) - _FED_KEYS
    if unknown:
        raise ConfigError(f"unknown key(s) in [federation]: {', '.join(sorted(unknown))}")
    fed = _apply("federation", rc.federation, fed_table, _FED_KEYS)
    arch = rc.federation.arch
    if "channels" in arch_table:
        ch = _check_type("federation", "channels", arch_table.pop("channels"), [])
        if not ch or any(isinstance(c, bool) or not isinstance(c, int) or c < 1 for c in ch):
            raise ConfigError("federation.channels must be positive integers")
        arch = dataclasses.replace(arch, channels=tuple(ch))
    arch = _apply("federation", arch, arch_table, _ARCH_KEYS - {"channels"})
    fed = dataclasses.replace(fed, arch=arch)
    run = _apply("run", rc.run, tables.get("run", {}), {f.name for f in dataclasses.fields(RunSection)})
    return _validate(RunConfig(data, fed, run))


def _merge(base: dict, extra: dict) -> dict:
    out = {k: dict(v) if isinstance(v, dict) else v for k, v in base.items()}
    for section, table in extra.items():
        out.setdefault(section, {})
        if not isinstance(out[section], dict):
            raise ConfigError(f"[{section}] must be a table")
        out[section].update(table)
    return out


def load_config(path: str | os.PathLike | None = None, overrides: Sequence[str] = ()) -> RunConfig:
    tables: dict = {}
    if path is not None:
        try:
            with open(path, "rb") as fh:
                tables = tomli.load(fh)
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from None
    return from_tables(_merge(tables, parse_overrides(overrides)))


def _toml_value(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise TypeError(f"cannot write {type(v).__name__} as TOML")


def dump_config(rc: RunConfig) -> str:
    """Canonical TOML text of a config (reloads to an equal config)."""
    fed = {f.name: getattr(rc.federation, f.name) for f in dataclasses.fields(FederationConfig) if f.name in _FED_KEYS}
    fed["channels"] = list(rc.federation.arch.channels)
    fed["classifier_hidden"] = rc.federation.arch.classifier_hidden
    fed["residual"] = rc.federation.arch.residual
    sections = {
        "data": dataclasses.asdict(rc.data),
        "federation": fed,
        "run": dataclasses.asdict(rc.run),
    }
    lines = []
    for name, table in sections.items():
        lines.append(f"[{name}]")
        lines += [f"{k} = {_toml_value(v)}" for k, v in sorted(table.items())]
        lines.append("")
    return "\n".join(lines)
