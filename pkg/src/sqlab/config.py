"""Experiment configuration: a sectioned ``key = value`` text format.

Grammar::

    file     := (blank | comment | header | pair)*
    comment  := '#' anything
    header   := '[' name ']'
    pair     := key '=' value        # inline '#' starts a comment

Sections and their keys:

``[experiment]``
    ``id``, ``n``, ``trials``, ``seed``, ``output``, ``C``, ``notes``,
    ``workers``, ``mc_trials``, ``checks`` (comma-separated check names).
``[population]``
    ``kind`` = ``uniform`` (``size``), ``bernoulli`` (``biases``, comma
    separated), ``gaussian`` (``d``) or ``tabulated`` (``weights``).
``[mechanism]``
    any :class:`~sqlab.mechanisms.OracleConfig` field.
``[strategy]``
    ``kind`` = ``non_adaptive`` (``m``, ``binary``), ``sign_aggregation``
    (``d``, ``bound``), ``reconstruction_probe`` (``m_probe``,
    ``quantile``, ``strict``) or ``round_structured`` (``r``, ``per_round``).

Everything is validated when the file is loaded, before any trial runs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from sqlab.analysts import NonAdaptiveRandom, ReconstructionProbe, RoundStructured, SignAggregation, Strategy
from sqlab.core import Population, Universe
from sqlab.errors import ConfigError, ValidationError
from sqlab.mechanisms import OracleConfig
from sqlab.privacy import DEFAULT_C

SECTIONS = ("experiment", "population", "mechanism", "strategy")
CHECKS = ("sign_aggregation_mean", "transfer_rate", "final_gap_rate")


def parse_sections(text: str) -> dict:
    """Split config text into ``{section: {key: raw value}}``."""
    out = {}
    current = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError(f"line {lineno}", "unterminated section header")
            current = line[1:-1].strip().lower()
            if current not in SECTIONS:
                raise ConfigError(f"line {lineno}", f"unknown section [{current}]; expected one of {SECTIONS}")
            if current in out:
                raise ConfigError(f"line {lineno}", f"section [{current}] repeated")
            out[current] = {}
            continue
        if current is None:
            raise ConfigError(f"line {lineno}", "key outside of any section")
        if "=" not in line:
            raise ConfigError(f"line {lineno}", "expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in out[current]:
            raise ConfigError(f"{current}.{key}", "duplicate key")
        out[current][key] = value
    return out


class _Fields:
    """Typed reader over one section that reports unknown and malformed keys."""

    def __init__(self, section: str, values: dict):
        self.section, self.values, self.used = section, dict(values), set()

    def _name(self, key):
        return f"{self.section}.{key}"

    def get(self, key, cast, default=None, required=False):
        self.used.add(key)
        if key not in self.values or self.values[key] == "":
            if required:
                raise ConfigError(self._name(key), "missing")
            return default
        raw = self.values[key]
        try:
            return cast(raw)
        except (ValueError, TypeError):
            raise ConfigError(self._name(key), f"cannot parse {raw!r}") from None

    def finish(self, allowed=None):
        extra = set(self.values) - self.used - set(allowed or ())
        if extra:
            raise ConfigError(self._name(sorted(extra)[0]), "unknown key")


def _bool(raw: str) -> bool:
    low = raw.lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise ValueError(raw)


def _floats(raw: str) -> list:
    return [float(x) for x in raw.split(",") if x.strip()]


@dataclass(frozen=True)
class PopulationSpec:
    kind: str
    size: Optional[int] = None
    d: Optional[int] = None
    biases: tuple = ()
    weights: tuple = ()

    def build(self) -> Population:
        if self.kind == "uniform":
            return Population.uniform(Universe.indexed(self.size))
        if self.kind == "bernoulli":
            return Population.bernoulli_product(list(self.biases))
        if self.kind == "gaussian":
            return Population.gaussian_product(self.d)
        return Population.tabulated(list(self.weights))

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        for k in ("size", "d"):
            if getattr(self, k) is not None:
                d[k] = getattr(self, k)
        if self.biases:
            d["biases"] = list(self.biases)
        if self.weights:
            d["weights"] = list(self.weights)
        return d


def _population(values: dict) -> PopulationSpec:
    f = _Fields("population", values)
    kind = f.get("kind", str, required=True)
    if kind == "uniform":
        spec = PopulationSpec(kind, size=f.get("size", int, required=True))
    elif kind == "bernoulli":
        spec = PopulationSpec(kind, biases=tuple(f.get("biases", _floats, required=True)))
    elif kind == "gaussian":
        spec = PopulationSpec(kind, d=f.get("d", int, required=True))
    elif kind == "tabulated":
        spec = PopulationSpec(kind, weights=tuple(f.get("weights", _floats, required=True)))
    else:
        raise ConfigError("population.kind", "must be uniform, bernoulli, gaussian or tabulated")
    f.finish()
    try:
        spec.build()
    except ValidationError as exc:
        raise ConfigError("population", str(exc)) from None
    return spec


STRATEGY_KINDS = ("non_adaptive", "sign_aggregation", "reconstruction_probe", "round_structured")


def _strategy(values: dict) -> Strategy:
    f = _Fields("strategy", values)
    kind = f.get("kind", str, required=True)
    if kind == "non_adaptive":
        s = NonAdaptiveRandom(f.get("m", int, required=True), f.get("binary", _bool, True))
    elif kind == "sign_aggregation":
        s = SignAggregation(f.get("d", int, required=True), f.get("bound", float))
    elif kind == "reconstruction_probe":
        s = ReconstructionProbe(f.get("m_probe", int, required=True), f.get("quantile", float, 0.5),
                                f.get("strict", _bool, True))
    elif kind == "round_structured":
        s = RoundStructured(f.get("r", int, required=True), f.get("per_round", int, required=True))
    else:
        raise ConfigError("strategy.kind", f"must be one of {', '.join(STRATEGY_KINDS)}")
    f.finish()
    for name in ("m", "d", "m_probe", "r", "per_round"):
        v = getattr(s, name, None)
        if v is not None and v < (0 if name in ("m_probe", "r") else 1):
            raise ConfigError(f"strategy.{name}", "out of range")
    if isinstance(s, ReconstructionProbe) and not 0.0 <= s.quantile < 1.0:
        raise ConfigError("strategy.quantile", "must lie in [0, 1)")
    return s


def strategy_to_dict(s: Strategy) -> dict:
    kinds = {NonAdaptiveRandom: "non_adaptive", SignAggregation: "sign_aggregation",
             ReconstructionProbe: "reconstruction_probe", RoundStructured: "round_structured"}
    return {"kind": kinds[type(s)], **{k: v for k, v in vars(s).items()}}


@dataclass(frozen=True)
class ExperimentConfig:
    id: str
    n: int
    population: PopulationSpec
    mechanism: OracleConfig
    strategy: Strategy
    trials: int = 1
    seed: int = 0
    output: Optional[str] = None
    C: float = DEFAULT_C
    notes: str = ""
    workers: int = 1
    mc_trials: int = 1000
    checks: tuple = field(default_factory=tuple)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not self.id:
            raise ConfigError("experiment.id", "missing")
        if self.n < 1:
            raise ConfigError("experiment.n", "must be >= 1")
        if self.trials < 0:
            raise ConfigError("experiment.trials", "must be >= 0")
        if self.seed < 0:
            raise ConfigError("experiment.seed", "must be >= 0")
        if self.workers < 1:
            raise ConfigError("experiment.workers", "must be >= 1")
        if self.mc_trials < 100:
            raise ConfigError("experiment.mc_trials", "must be >= 100")
        if not (self.C > 0 and math.isfinite(self.C)):
            raise ConfigError("experiment.C", "must be positive")
        for c in self.checks:
            if c not in CHECKS:
                raise ConfigError("experiment.checks", f"unknown check {c!r}; choose from {CHECKS}")
        pop = self.population.build()
        if self.strategy.query_count > self.mechanism.m:
            raise ConfigError("mechanism.m", f"strategy issues {self.strategy.query_count} queries, m = "
                              f"{self.mechanism.m}")
        if isinstance(self.strategy, SignAggregation):
            if pop.kind != "gaussian" or pop.universe.dim != self.strategy.d:
                raise ConfigError("strategy.d", "sign_aggregation needs a gaussian population of the same d")
        if isinstance(self.strategy, (ReconstructionProbe, RoundStructured)) and not pop.universe.tabulatable:
            raise ConfigError("population", "strategy needs a tabulatable universe")
        if isinstance(self.strategy, ReconstructionProbe) and self.strategy.strict:
            if pop.universe.size < 2 * self.n:
                raise ConfigError("strategy.strict", f"|X| = {pop.universe.size} < 2n = {2 * self.n}")
        if "sign_aggregation_mean" in self.checks and not isinstance(self.strategy, SignAggregation):
            raise ConfigError("experiment.checks", "sign_aggregation_mean needs the sign_aggregation strategy")
        if self.mechanism.mechanism in ("pmw",) and not pop.universe.tabulatable:
            raise ConfigError("mechanism.mechanism", "pmw needs a tabulatable universe")

    def replace(self, **changes) -> "ExperimentConfig":
        import dataclasses

        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        import dataclasses

        return {
            "id": self.id, "n": self.n, "trials": self.trials, "seed": self.seed, "output": self.output,
            "C": self.C, "notes": self.notes, "workers": self.workers, "mc_trials": self.mc_trials,
            "checks": list(self.checks), "population": self.population.to_dict(),
            "mechanism": {f.name: getattr(self.mechanism, f.name) for f in dataclasses.fields(self.mechanism)},
            "strategy": strategy_to_dict(self.strategy),
        }


def parse_experiment(text: str) -> ExperimentConfig:
    sections = parse_sections(text)
    for name in SECTIONS:
        if name not in sections:
            raise ConfigError(name, "section missing")
    f = _Fields("experiment", sections["experiment"])
    C = f.get("C", float, DEFAULT_C)
    kwargs = dict(
        id=f.get("id", str, required=True),
        n=f.get("n", int, required=True),
        trials=f.get("trials", int, 1),
        seed=f.get("seed", int, 0),
        output=f.get("output", str),
        C=C,
        notes=f.get("notes", str, ""),
        workers=f.get("workers", int, 1),
        mc_trials=f.get("mc_trials", int, 1000),
        checks=tuple(c.strip() for c in f.get("checks", str, "").split(",") if c.strip()),
    )
    f.finish()
    mech_values = dict(sections["mechanism"])
    mech_values.setdefault("C", str(C))
    try:
        mechanism = OracleConfig.from_mapping(mech_values)
    except ConfigError as exc:
        raise ConfigError(f"mechanism.{exc.field}", str(exc).split(": ", 1)[-1]) from None
    return ExperimentConfig(population=_population(sections["population"]), mechanism=mechanism,
                            strategy=_strategy(sections["strategy"]), **kwargs)


def load_experiment(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError("config", f"cannot read {path}: {exc.strerror}") from None
    return parse_experiment(text)


def sign_aggregation_preset(d: int = 10000, n: int = 100, trials: int = 20, seed: int = 0,
                      mc_trials: int = 1000) -> ExperimentConfig:
    """Sign-aggregation attack on a naive oracle over N(0, 1)^d."""
    return ExperimentConfig(
        id="sign-aggregation", n=n, population=PopulationSpec("gaussian", d=d),
        mechanism=OracleConfig("naive", m=d + 1), strategy=SignAggregation(d),
        trials=trials, seed=seed, mc_trials=mc_trials, checks=("sign_aggregation_mean",))
