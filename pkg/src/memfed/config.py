"""Experiment configuration: YAML files validated against a strict schema.

Unknown keys are rejected. Every problem is reported together with the
line of the YAML document it came from.
"""
from __future__ import annotations

from pathlib import Path
from typing import Any, Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .ledger import Role, VoterFilter
from .provenance import Objective
from .simnet.evaluate import MetricsConfig
from .simnet.node import NodeStrategy, ToyConfig
from .simnet.scheduler import NodeSpec, Scenario
from .simnet.world import WorldConfig

FORMAT_VERSION = 1
# cohort schedule: nodes -> epochs per submission
COHORT_EPOCHS = {2: 50, 4: 75, 6: 75, 8: 100}


class ConfigError(ValueError):
    """Raised with a list of ``(line, message)`` diagnostics."""

    def __init__(self, path: str, problems: list[tuple[int | None, str]]):
        self.path = path
        self.problems = problems
        super().__init__("\n".join(self.lines()))

    def lines(self) -> list[str]:
        out = []
        for line, msg in self.problems:
            where = f"{self.path}:{line}" if line is not None else self.path
            out.append(f"{where}: {msg}")
        return out


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class WorldSection(_Strict):
    classes: int = Field(10, ge=2)
    per_class: int = Field(400, ge=4)
    latent_dim: int = Field(32, ge=2)
    center_scale: float = Field(1.0, gt=0)
    spread: float = Field(0.5, gt=0)
    duplicate_rate: float = Field(0.05, ge=0, lt=1)


class ModelSection(_Strict):
    prototypes_per_class: int = Field(200, ge=1)
    noise_sigma: float = Field(0.05, ge=0)
    eta: float = Field(0.004, gt=0, le=1)
    init_scale: float = Field(0.5, ge=0)


class StrategySection(_Strict):
    role: Role = Role.TRAINER
    epochs_per_round: int | None = Field(None, ge=0)
    samples_per_eval: int = Field(1000, ge=1)
    objective: Objective = Objective.QN
    vote_blend_alpha: float = Field(1.0, ge=0, le=1)
    vote_source_filter: VoterFilter = VoterFilter.ALL
    wake_interval: float = Field(100.0, gt=0)
    candidate_pool: Literal["latest", "all"] = "latest"


class NodeOverride(_Strict):
    id: str
    role: Role | None = None
    epochs_per_round: int | None = Field(None, ge=0)
    samples_per_eval: int | None = Field(None, ge=1)
    objective: Objective | None = None
    vote_blend_alpha: float | None = Field(None, ge=0, le=1)
    vote_source_filter: VoterFilter | None = None
    wake_interval: float | None = Field(None, gt=0)
    candidate_pool: Literal["latest", "all"] | None = None
    join_at: float = Field(0.0, ge=0)
    leave_at: float | None = None


class NodesSection(_Strict):
    count: int = Field(..., ge=1)
    defaults: StrategySection = StrategySection()
    overrides: list[NodeOverride] = []

    @model_validator(mode="after")
    def _known_ids(self):
        ids = {f"n{i}" for i in range(self.count)}
        seen = set()
        for o in self.overrides:
            if o.id not in ids:
                raise ValueError(f"override for unknown node {o.id!r} (nodes are n0..n{self.count - 1})")
            if o.id in seen:
                raise ValueError(f"node {o.id!r} overridden twice")
            seen.add(o.id)
        return self


class ProtocolSection(_Strict):
    confirmation_delay: float = Field(2.0, ge=0)
    reward_pool: int = Field(0, ge=0)
    max_submissions: int = Field(20, ge=1)
    max_time: float = Field(1e9, gt=0)


class MetricsSection(_Strict):
    knn_k: int = Field(5, ge=1)
    confirm_threshold: float = Field(0.8, gt=0, lt=1)
    percentile: float = Field(95.0, gt=0, lt=100)
    k_cells: int | None = Field(None, ge=1)
    bandwidth: float | None = Field(None, gt=0)
    baselines: bool = True
    global_eval: bool = True
    global_eval_samples: int = Field(1000, ge=1)


class OutputSection(_Strict):
    dir: str | None = None


class ExperimentConfig(_Strict):
    format_version: Literal[1] = FORMAT_VERSION
    name: str = "experiment"
    seed: int = 0
    world: WorldSection = WorldSection()
    model: ModelSection = ModelSection()
    nodes: NodesSection
    protocol: ProtocolSection = ProtocolSection()
    metrics: MetricsSection = MetricsSection()
    output: OutputSection = OutputSection()

    def default_epochs(self) -> int:
        """Cohort schedule: 2 nodes 50, 4 or 6 nodes 75, 8 nodes 100 epochs."""
        n = sum(1 for s in self._strategies() if s[1].get("role", Role.TRAINER) is Role.TRAINER) or 1
        for size in sorted(COHORT_EPOCHS):
            if n <= size:
                return COHORT_EPOCHS[size]
        return COHORT_EPOCHS[max(COHORT_EPOCHS)]

    def _strategies(self) -> list[tuple[NodeOverride | None, dict[str, Any]]]:
        base = self.nodes.defaults.model_dump()
        by_id = {o.id: o for o in self.nodes.overrides}
        out = []
        for i in range(self.nodes.count):
            o = by_id.get(f"n{i}")
            fields = dict(base)
            if o is not None:
                fields.update({k: v for k, v in o.model_dump(exclude={"id", "join_at", "leave_at"}).items()
                               if v is not None})
            out.append((o, fields))
        return out

    def scenario(self) -> Scenario:
        epochs = self.default_epochs()
        specs = []
        for i, (o, fields) in enumerate(self._strategies()):
            if fields["epochs_per_round"] is None:
                fields["epochs_per_round"] = epochs if fields["role"] is Role.TRAINER else 0
            specs.append(NodeSpec(f"n{i}", NodeStrategy(**fields),
                                  o.join_at if o else 0.0, o.leave_at if o else None))
        m = self.metrics
        p = self.protocol
        return Scenario(
            world=WorldConfig(**self.world.model_dump()),
            nodes=tuple(specs),
            toy=ToyConfig(**self.model.model_dump()),
            metrics=MetricsConfig(m.knn_k, m.confirm_threshold, m.percentile, m.k_cells, m.bandwidth, m.baselines),
            confirmation_delay=p.confirmation_delay,
            reward_pool=p.reward_pool,
            max_submissions=p.max_submissions,
            max_time=p.max_time,
            global_eval=m.global_eval,
            global_eval_samples=m.global_eval_samples,
        )


def _line_of(node: yaml.Node | None, loc: tuple) -> int | None:
    """1-based line of the deepest YAML node reachable along ``loc``."""
    line = None
    for key in loc:
        if node is None:
            break
        line = node.start_mark.line + 1
        if isinstance(node, yaml.MappingNode):
            nxt = None
            for k, v in node.value:
                if k.value == key:
                    nxt = v
                    line = k.start_mark.line + 1
                    break
            node = nxt
        elif isinstance(node, yaml.SequenceNode) and isinstance(key, int) and key < len(node.value):
            node = node.value[key]
        else:
            node = None
    if node is not None:
        line = node.start_mark.line + 1
    return line


def parse_config(text: str, path: str = "<config>") -> ExperimentConfig:
    try:
        root = yaml.compose(text, Loader=yaml.SafeLoader)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(path, [(mark.line + 1 if mark else None, f"invalid YAML: {exc}")]) from None
    if not isinstance(data, dict):
        raise ConfigError(path, [(1, "top level must be a mapping")])
    try:
        cfg = ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        problems = []
        for err in exc.errors():
            loc = tuple(err["loc"])
            # model validators report at the section, not at a field
            field = ".".join(str(x) for x in loc) or "(top level)"
            problems.append((_line_of(root, loc), f"{field}: {err['msg']}"))
        raise ConfigError(path, problems) from None
    try:
        scenario = cfg.scenario()
    except ValueError as exc:
        raise ConfigError(path, [(_line_of(root, ("nodes",)), str(exc))]) from None
    problems = scenario.check()
    if problems:
        raise ConfigError(path, [(_line_of(root, ("nodes",)), p) for p in problems])
    return cfg


def load_config(path: str | Path) -> ExperimentConfig:
    p = Path(path)
    return parse_config(p.read_text(), str(p))


def bundled_configs() -> dict[str, Path]:
    """Example configs shipped with the package, keyed by file stem."""
    root = Path(__file__).parent / "configs"
    return {p.stem: p for p in sorted(root.glob("*.yaml"))}
