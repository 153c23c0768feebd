"""Scenario configuration.

File format: one ``key = value`` per line, ``#`` starts a comment. Values
are Python literals (``12``, ``0.03``, ``"path"``, ``{7: 500}``) or bare
words; ``true``/``false`` are accepted for booleans. Missing keys keep their
defaults, unknown keys are an error.
"""

from __future__ import annotations

import ast
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Iterable, Mapping

from .model import ConfigError, fragment_wire_size

ARRIVALS = ("poisson", "periodic")
DISTRIBUTIONS = ("constant", "exponential")


@dataclass(frozen=True)
class ScenarioConfig:
    seed: int = 1
    duration_virtual_s: float = 1.0
    strict: bool = True
    max_same_time_actions: int = 1_000_000

    # topology
    n_links: int = 48
    grouping_g: int = 12
    fragment_words: int = 230
    link_words: tuple[tuple[int, int], ...] = ()
    n_sv: int = 1
    n_l2pu: int = 4
    n_sfi: int = 2
    n_ef: int = 4

    # trigger cascade
    l1_rate_hz: float = 5000.0
    arrival: str = "poisson"
    roi_fraction: float = 0.02
    l2_accept_prob: float = 0.03
    l2_proc_time_us: int = 10_000
    l2_proc_dist: str = "constant"
    l2_result_bytes: int = 1024
    ef_enabled: bool = True
    ef_accept_prob: float = 0.10
    ef_proc_time_us: int = 10_000
    ef_proc_dist: str = "constant"
    sfo_path: str = ""

    # protocol
    roi_timeout_us: int = 10_000
    l2sv_timeout_us: int = 1_000_000
    clear_batch_max: int = 300
    clear_flush_timeout_us: int = 100_000
    build_timeout_us: int = 1_000_000
    max_credits: int = 8
    frag_timeout_us: int = 10_000
    sfi_hold_us: int = 0
    rob_capacity_bytes: int = 2_621_440

    # network and host costs
    link_bandwidth: int = 125_000_000
    prop_latency_us: int = 5
    loss_prob: float = 0.0
    slink_bandwidth: int = 160_000_000
    bus_bandwidth: int = 264_000_000
    bus_transfer_cost_us: int = 1
    ros_rx_cost_us: int = 27
    ros_tx_cost_us: int = 10
    l2sv_rx_cost_us: int = 8
    l2sv_tx_cost_us: int = 8
    sv_capacity_hz: float = 30_000.0
    l2pu_rx_cost_us: int = 27
    l2pu_tx_cost_us: int = 10
    pros_rx_cost_us: int = 5
    pros_tx_cost_us: int = 5
    dfm_rx_cost_us: int = 5
    dfm_tx_cost_us: int = 2
    sfi_rx_cost_us: int = 8
    sfi_tx_cost_us: int = 4
    sfi_bandwidth: int = 95_000_000
    sfi_shared_io: bool = True
    ef_rx_cost_us: int = 0
    ef_tx_cost_us: int = 0

    def __post_init__(self):
        validate(self)

    @property
    def n_units(self) -> int:
        return -(-self.n_links // self.grouping_g)

    @property
    def duration_us(self) -> int:
        return int(round(self.duration_virtual_s * 1_000_000))

    def words_of(self, source_id: int) -> int:
        return self._link_words_map.get(source_id, self.fragment_words)

    @property
    def _link_words_map(self) -> dict[int, int]:
        return dict(self.link_words)

    def fragment_bytes(self) -> dict[int, int]:
        m = self._link_words_map
        return {s: fragment_wire_size(m.get(s, self.fragment_words)) for s in range(self.n_links)}

    def replace(self, **changes: Any) -> ScenarioConfig:
        return with_overrides(self, changes)

    def as_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["link_words"] = {int(k): int(v) for k, v in self.link_words}
        return d

    def to_text(self) -> str:
        return "".join(f"{k} = {v!r}\n" for k, v in self.as_dict().items())

    def digest(self) -> str:
        blob = json.dumps(self.as_dict(), sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


_FIELDS = {f.name: f for f in fields(ScenarioConfig)}
_PROBS = ("roi_fraction", "l2_accept_prob", "ef_accept_prob", "loss_prob")
_POSITIVE = (
    "n_links", "grouping_g", "n_sv", "n_l2pu", "n_sfi", "l1_rate_hz", "link_bandwidth",
    "slink_bandwidth", "bus_bandwidth", "sfi_bandwidth", "clear_batch_max", "max_credits",
    "rob_capacity_bytes", "max_same_time_actions", "sv_capacity_hz",
)


def validate(cfg: ScenarioConfig) -> None:
    for name in _PROBS:
        v = getattr(cfg, name)
        if not 0.0 <= v <= 1.0:
            raise ConfigError(f"{name}: {v} is not a probability in [0, 1]")
    for name in _POSITIVE:
        if not getattr(cfg, name) > 0:
            raise ConfigError(f"{name}: must be positive")
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if f.type in ("int", "float") and v < 0:
            raise ConfigError(f"{f.name}: must be non-negative")
    if cfg.grouping_g > cfg.n_links:
        raise ConfigError(f"grouping_g: {cfg.grouping_g} exceeds n_links {cfg.n_links}")
    if cfg.arrival not in ARRIVALS:
        raise ConfigError(f"arrival: expected one of {ARRIVALS}")
    for name in ("l2_proc_dist", "ef_proc_dist"):
        if getattr(cfg, name) not in DISTRIBUTIONS:
            raise ConfigError(f"{name}: expected one of {DISTRIBUTIONS}")
    if cfg.ef_enabled and cfg.n_ef < cfg.n_sfi:
        # each EF node pulls from one SFI; an SFI without one never drains
        raise ConfigError(f"n_ef: {cfg.n_ef} EF nodes cannot serve {cfg.n_sfi} SFIs when ef_enabled")
    for src, words in cfg.link_words:
        if not 0 <= src < cfg.n_links or words < 0:
            raise ConfigError(f"link_words: bad entry {src}: {words}")


def _coerce(name: str, raw: Any) -> Any:
    f = _FIELDS[name]
    try:
        if f.type == "bool":
            if isinstance(raw, str):
                if raw.lower() in ("true", "yes", "on", "1"):
                    return True
                if raw.lower() in ("false", "no", "off", "0"):
                    return False
                raise ValueError(raw)
            return bool(raw)
        if f.type == "int":
            if isinstance(raw, float) and not raw.is_integer():
                raise ValueError(raw)
            return int(raw)
        if f.type == "float":
            return float(raw)
        if f.type == "str":
            return str(raw)
        if name == "link_words":
            items = raw.items() if isinstance(raw, Mapping) else raw
            return tuple(sorted((int(k), int(v)) for k, v in items))
    except (TypeError, ValueError):
        raise ConfigError(f"{name}: invalid value {raw!r}") from None
    raise ConfigError(f"{name}: unsupported field type")


def _parse_value(text: str) -> Any:
    text = text.strip()
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def with_overrides(base: ScenarioConfig, overrides: Mapping[str, Any]) -> ScenarioConfig:
    changes = {}
    for key, raw in overrides.items():
        if key not in _FIELDS:
            raise ConfigError(f"unknown key {key!r}")
        changes[key] = _coerce(key, raw)
    return dataclasses.replace(base, **changes)


def parse_assignments(lines: Iterable[str], source: str = "<config>") -> dict[str, Any]:
    out: dict[str, Any] = {}
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value")
        key, value = line.split("=", 1)
        key = key.strip()
        if key not in _FIELDS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        out[key] = _parse_value(value)
    return out


def load_config(path: str | Path, base: ScenarioConfig | None = None) -> ScenarioConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read {path}: {e}") from e
    return with_overrides(base or ScenarioConfig(), parse_assignments(text.splitlines(), str(path)))


def parse_set_options(items: Iterable[str]) -> dict[str, Any]:
    return parse_assignments(items, "--set")


def capacity_warnings(cfg: ScenarioConfig) -> list[str]:
    """Sizing checks that do not make a config invalid but predict overload."""
    out = []
    per_sv = cfg.l1_rate_hz / cfg.n_sv
    if per_sv > cfg.sv_capacity_hz:
        out.append(f"per-supervisor rate {per_sv:.0f} Hz exceeds capacity {cfg.sv_capacity_hz:.0f} Hz")
    return out
