"""YAML system and scenario configuration.

Errors raised while interpreting a file carry the line of the offending key.
DG indices in scenario files are 1-based (``DG1`` .. ``DGN``).
"""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field

import yaml

from .consensus import design_consensus_gain, enumerate_topologies, min_consensus_gain
from .defense import AgentConfig, StaticDetectorConfig
from .dynamics import (LINE_TYPE_I, LINE_TYPE_II, ConfigError, ControlGains, DgParams,
                       Microgrid, NetworkModel, default_network)
from .game import GameConfig
from .threat import CHANNELS, AttackSchedule, AttackStage

DEFAULT_PINNING_GAIN = 3.0
DEFAULT_GAIN_MARGIN = 4.0


def radial_network(n, load_R=12.0, load_L=3e-3) -> NetworkModel:
    """Radial feeder of ``n`` buses, one DG per bus, loads on every other bus."""
    if n == 4:
        return default_network(load_R, load_L)
    types = (LINE_TYPE_I, LINE_TYPE_II)
    lines = tuple((b, b + 1, *types[b % 2]) for b in range(n - 1))
    loads = tuple((b, load_R, load_L) for b in range(0, n, 2))
    return NetworkModel(n_bus=n, lines=lines, loads=loads, dg_bus=tuple(range(n)))


@dataclass(frozen=True)
class SystemConfig:
    """Physical system plus secondary-control design choices.

    ``consensus_gain=None`` sizes ``K1 = K2`` as ``gain_margin`` times the
    largest lower bound over the topology set.
    """

    n_dg: int = 4
    params: DgParams = DgParams()
    gains: ControlGains = ControlGains()
    pinning_gain: float = DEFAULT_PINNING_GAIN
    pinned_dg: int = 0
    gain_margin: float = DEFAULT_GAIN_MARGIN
    consensus_gain: float | None = None
    network: NetworkModel | None = None
    load_R: float = 12.0
    load_L: float = 3e-3
    dt: float = 1e-4
    omega_c: float = 31.4

    def __post_init__(self):
        if not 2 <= self.n_dg <= 8:
            raise ConfigError(f"n_dg must be in [2, 8], got {self.n_dg}")
        if not 0 <= self.pinned_dg < self.n_dg:
            raise ConfigError("pinned DG index out of range")
        if not self.pinning_gain > 0:
            raise ConfigError("pinning gain must be positive")

    def pinning(self):
        g = [0.0] * self.n_dg
        g[self.pinned_dg] = float(self.pinning_gain)
        return g

    def build(self):
        """``(Microgrid, topologies)`` with the consensus gain applied."""
        topologies = enumerate_topologies(self.n_dg, self.pinning())
        bound = max(min_consensus_gain(t) for t in topologies)
        if self.consensus_gain is None:
            K = design_consensus_gain(topologies, self.gain_margin)
        else:
            K = float(self.consensus_gain)
            if K < bound:
                raise ConfigError(f"consensus gain {K} is below the bound {bound:.6g} "
                                  "required by some topology")
        gains = dataclasses.replace(self.gains, K1=K, K2=K)
        net = self.network or radial_network(self.n_dg, self.load_R, self.load_L)
        grid = Microgrid([self.params] * self.n_dg, gains, net, self.pinning(),
                         omega_c=self.omega_c, dt=self.dt)
        return grid, topologies


# -- scenario files ----------------------------------------------------------


class _Doc:
    """Parsed YAML plus a way to report the line of a key path."""

    def __init__(self, text, source):
        self.source = source
        try:
            self.node = yaml.compose(text)
            self.data = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            mark = getattr(exc, "problem_mark", None)
            where = f"{source}:{mark.line + 1}:{mark.column + 1}" if mark else source
            raise ConfigError(f"{where}: YAML parse error: {getattr(exc, 'problem', exc)}") from exc
        if self.data is None:
            self.data = {}
        if not isinstance(self.data, dict):
            raise ConfigError(f"{source}:1: top level must be a mapping")

    def line(self, path):
        node = self.node
        line = node.start_mark.line + 1 if node is not None else 1
        for key in path:
            if isinstance(node, yaml.MappingNode):
                nxt = None
                for k, v in node.value:
                    if k.value == str(key):
                        line, nxt = k.start_mark.line + 1, v
                        break
                node = nxt
            elif isinstance(node, yaml.SequenceNode) and isinstance(key, int) and key < len(node.value):
                node = node.value[key]
                line = node.start_mark.line + 1
            else:
                break
            if node is None:
                break
        return line

    def error(self, path, msg):
        dotted = ".".join(str(p) for p in path)
        return ConfigError(f"{self.source}:{self.line(path)}: {dotted}: {msg}")


def _build_dataclass(doc, path, cls, mapping, converters=None):
    if mapping is None:
        return cls()
    if not isinstance(mapping, dict):
        raise doc.error(path, f"expected a mapping for {cls.__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for k, v in mapping.items():
        if k not in names:
            raise doc.error(path + [k], f"unknown key for {cls.__name__}")
        if converters and k in converters:
            v = converters[k](v)
        elif isinstance(v, list):
            v = tuple(v)
        kwargs[k] = v
    try:
        return cls(**kwargs)
    except (ConfigError, TypeError, ValueError) as exc:
        raise doc.error(path, str(exc)) from exc


def _network(doc, path, d):
    if not isinstance(d, dict):
        raise doc.error(path, "expected a mapping")
    try:
        return NetworkModel(
            n_bus=int(d["n_bus"]),
            lines=tuple(tuple(x) for x in d["lines"]),
            loads=tuple(tuple(x) for x in d["loads"]),
            dg_bus=tuple(int(b) - 1 for b in d.get("dg_bus", range(1, int(d["n_bus"]) + 1))),
        )
    except KeyError as exc:
        raise doc.error(path, f"missing key {exc}") from exc
    except (ConfigError, TypeError, ValueError) as exc:
        raise doc.error(path, str(exc)) from exc


def _system(doc, path, d) -> SystemConfig:
    if d is None:
        return SystemConfig()
    if not isinstance(d, dict):
        raise doc.error(path, "expected a mapping")
    d = dict(d)
    kwargs = {}
    if "params" in d:
        kwargs["params"] = _build_dataclass(doc, path + ["params"], DgParams, d.pop("params"))
    if "gains" in d:
        kwargs["gains"] = _build_dataclass(doc, path + ["gains"], ControlGains, d.pop("gains"))
    if "network" in d:
        kwargs["network"] = _network(doc, path + ["network"], d.pop("network"))
    if "pinned_dg" in d:
        kwargs["pinned_dg"] = int(d.pop("pinned_dg")) - 1
    names = {f.name for f in dataclasses.fields(SystemConfig)}
    for k, v in d.items():
        if k not in names:
            raise doc.error(path + [k], "unknown system key")
        kwargs[k] = v
    try:
        return SystemConfig(**kwargs)
    except (ConfigError, TypeError) as exc:
        raise doc.error(path, str(exc)) from exc


def _schedule(doc, path, d, n_dg):
    """Stages with offsets kept as fractions of the channel nominals."""
    if d is None:
        return AttackSchedule()
    if not isinstance(d, dict):
        raise doc.error(path, "expected a mapping")
    raw = d.get("stages", [])
    if not isinstance(raw, list):
        raise doc.error(path + ["stages"], "expected a list")
    stages = []
    for i, st in enumerate(raw):
        p = path + ["stages", i]
        if not isinstance(st, dict):
            raise doc.error(p, "stage must be a mapping")
        unknown = set(st) - {"time", "dgs", "offsets", "trigger"}
        if unknown:
            raise doc.error(p + [sorted(unknown)[0]], "unknown stage key")
        dgs = st.get("dgs")
        if not isinstance(dgs, list) or not dgs:
            raise doc.error(p + ["dgs"], "needs a non-empty list of DG numbers")
        for g in dgs:
            if not isinstance(g, int) or not 1 <= g <= n_dg:
                raise doc.error(p + ["dgs"], f"DG number {g!r} outside 1..{n_dg}")
        off = st.get("offsets", {})
        if not isinstance(off, dict) or set(off) - set(CHANNELS):
            raise doc.error(p + ["offsets"], f"offsets must map a subset of {list(CHANNELS)}")
        fracs = tuple(float(off.get(c, 0.0)) for c in CHANNELS)
        trigger = st.get("trigger", "time")
        if trigger == "time" and "time" not in st:
            raise doc.error(p, "timed stage needs a 'time'")
        try:
            stages.append(AttackStage(dgs=tuple(g - 1 for g in dgs), offsets=fracs,
                                      time=float(st.get("time", 0.0)), trigger=trigger))
        except ConfigError as exc:
            raise doc.error(p, str(exc)) from exc
    try:
        sched = AttackSchedule(stages=tuple(stages), hold=float(d.get("hold", 0.5)))
    except ConfigError as exc:
        raise doc.error(path, str(exc)) from exc
    return sched


@dataclass(frozen=True)
class ScenarioSpec:
    """Everything needed to run one scenario.

    ``schedule`` stage offsets are fractions of each channel's nominal
    magnitude; :meth:`absolute_schedule` converts them.
    """

    name: str = "scenario"
    system: SystemConfig = SystemConfig()
    schedule: AttackSchedule = AttackSchedule()
    defender: str = "static"
    duration: float = 12.0
    seed: int = 0
    out: str | None = None
    initial_topology: int = 0
    game: GameConfig = GameConfig()
    detector: StaticDetectorConfig = StaticDetectorConfig()
    agent: AgentConfig = AgentConfig()
    checkpoint: str | None = None
    pretrain: dict = field(default_factory=dict)
    source: str | None = None

    def __post_init__(self):
        if not self.duration > 0:
            raise ConfigError("duration must be positive")
        if self.defender not in ("static", "dqn"):
            raise ConfigError(f"defender must be 'static' or 'dqn', got {self.defender!r}")

    def absolute_schedule(self, comm_nominal) -> AttackSchedule:
        stages = tuple(dataclasses.replace(
            st, offsets=tuple(f * float(c) for f, c in zip(st.offsets, comm_nominal)))
            for st in self.schedule.stages)
        return dataclasses.replace(self.schedule, stages=stages)


_TOP_KEYS = {"name", "description", "system", "attack", "defender", "duration", "seed",
             "initial_topology", "game", "detector", "agent", "checkpoint", "pretrain"}


def parse_scenario(text, source="<scenario>") -> ScenarioSpec:
    doc = _Doc(text, source)
    d = doc.data
    for k in d:
        if k not in _TOP_KEYS:
            raise doc.error([k], "unknown top-level key")
    system = _system(doc, ["system"], d.get("system"))
    schedule = _schedule(doc, ["attack"], d.get("attack"), system.n_dg)
    game = _build_dataclass(doc, ["game"], GameConfig, d.get("game"))
    detector = _build_dataclass(doc, ["detector"], StaticDetectorConfig, d.get("detector"))
    agent = _build_dataclass(doc, ["agent"], AgentConfig, d.get("agent"))
    checkpoint = d.get("checkpoint")
    if checkpoint is not None and source and not os.path.isabs(checkpoint):
        checkpoint = os.path.join(os.path.dirname(os.path.abspath(source)), checkpoint)
    pre = d.get("pretrain") or {}
    if not isinstance(pre, dict):
        raise doc.error(["pretrain"], "expected a mapping")
    kwargs = dict(name=str(d.get("name", os.path.splitext(os.path.basename(source))[0])),
                  system=system, schedule=schedule, game=game, detector=detector, agent=agent,
                  checkpoint=checkpoint, pretrain=pre, source=source)
    for key, conv in (("defender", str), ("duration", float), ("seed", int),
                      ("initial_topology", int)):
        if key in d:
            try:
                kwargs[key] = conv(d[key])
            except (TypeError, ValueError) as exc:
                raise doc.error([key], str(exc)) from exc
    try:
        spec = ScenarioSpec(**kwargs)
    except ConfigError as exc:
        raise doc.error([], str(exc)) from exc
    return spec


def load_scenario(path) -> ScenarioSpec:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read scenario {path}: {exc.strerror}") from exc
    return parse_scenario(text, source=str(path))


def shipped_scenario(name) -> str:
    """Path of a scenario file bundled with the package."""
    here = os.path.join(os.path.dirname(__file__), "data", f"{name}.yaml")
    if not os.path.exists(here):
        raise ConfigError(f"no bundled scenario named {name!r}")
    return here
