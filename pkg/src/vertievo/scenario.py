"""Vertiport world model: requests, pads, weather-modulated pad weights.

All times are integer seconds. A scenario is a plain value; generation is a
pure function of the :class:`GenerationSpec` (seed included).
"""
from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass
from importlib import resources
from pathlib import Path
from typing import Any, Sequence

import jsonschema
import numpy as np

PRIORITY_TAGS = ("normal", "medical", "cargo")
DEFAULT_WEATHER = "clear"


class ConfigurationError(ValueError):
    """Generation parameters that cannot describe a scenario."""


class ScenarioValidationError(ValueError):
    """A scenario document or value violates a schema rule or an invariant."""

    def __init__(self, message: str, field: str | None = None, line: int | None = None):
        self.field = field
        self.line = line
        where = ""
        if field is not None:
            where += f" [field {field}"
            where += f", line {line}]" if line is not None else "]"
        super().__init__(message + where)


@dataclass(frozen=True)
class UavRequest:
    id: int
    class_id: int
    release_time: int
    service_demand: int = 30
    priority_tag: str = "normal"


@dataclass(frozen=True)
class PadConfig:
    class_id: int
    pad_count: int = 1
    separation: int = 0


@dataclass(frozen=True)
class ClassSpec:
    """Per-class arrival and service parameters used by generation."""

    class_id: int
    rate: float
    pad_count: int = 1
    separation: int = 0
    service_demand: int = 30
    base_weight: float = 1.0


@dataclass(frozen=True)
class WeatherRegime:
    start: int
    end: int
    weight_multiplier: float = 1.0
    separation_multiplier: float = 1.0
    label: str = "adverse"


@dataclass(frozen=True)
class GenerationSpec:
    horizon: int
    classes: tuple[ClassSpec, ...]
    seed: int = 0
    weather: tuple[WeatherRegime, ...] = ()
    bin_width: int = 60
    priority_probs: tuple[float, float, float] = (0.8, 0.1, 0.1)


@dataclass(frozen=True)
class PadWeightProfile:
    bin_width: int
    class_ids: tuple[int, ...]
    weights: np.ndarray  # (n_classes, n_bins)
    separations: np.ndarray  # (n_classes, n_bins) integer seconds

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, PadWeightProfile):
            return NotImplemented
        return (
            self.bin_width == other.bin_width
            and self.class_ids == other.class_ids
            and np.array_equal(self.weights, other.weights)
            and np.array_equal(self.separations, other.separations)
        )

    @property
    def n_bins(self) -> int:
        return self.weights.shape[1]


@dataclass(frozen=True)
class Scenario:
    horizon: int
    requests: tuple[UavRequest, ...]
    pads: tuple[PadConfig, ...]
    pad_weights: PadWeightProfile
    seed: int = 0
    condition_labels: tuple[tuple[int, str], ...] = ()
    classes: tuple[ClassSpec, ...] = ()
    weather: tuple[WeatherRegime, ...] = ()

    def __post_init__(self) -> None:
        validate_scenario(self)

    @property
    def n(self) -> int:
        return len(self.requests)

    @property
    def class_ids(self) -> tuple[int, ...]:
        return tuple(p.class_id for p in self.pads)

    def pad_config(self, class_id: int) -> PadConfig:
        for p in self.pads:
            if p.class_id == class_id:
                return p
        raise KeyError(class_id)

    def arrays(self) -> "ScenarioArrays":
        return ScenarioArrays.from_scenario(self)


@dataclass(frozen=True)
class ScenarioArrays:
    """Flat integer arrays consumed by the scheduling kernels.

    ``class_index`` is the row of the request's class in ``pad_weights``;
    pads of class row ``c`` occupy global indices
    ``pad_offset[c] : pad_offset[c + 1]``.
    """

    release: np.ndarray
    demand: np.ndarray
    class_index: np.ndarray
    pad_offset: np.ndarray
    separations: np.ndarray
    weights: np.ndarray
    bin_width: int

    @classmethod
    def from_scenario(cls, sc: Scenario) -> "ScenarioArrays":
        row = {cid: i for i, cid in enumerate(sc.pad_weights.class_ids)}
        counts = [sc.pad_config(cid).pad_count for cid in sc.pad_weights.class_ids]
        return cls(
            release=np.array([r.release_time for r in sc.requests], dtype=np.int64),
            demand=np.array([r.service_demand for r in sc.requests], dtype=np.int64),
            class_index=np.array([row[r.class_id] for r in sc.requests], dtype=np.int64),
            pad_offset=np.concatenate([[0], np.cumsum(counts)]).astype(np.int64),
            separations=np.ascontiguousarray(sc.pad_weights.separations, dtype=np.int64),
            weights=np.ascontiguousarray(sc.pad_weights.weights, dtype=np.float64),
            bin_width=sc.pad_weights.bin_width,
        )


def validate_scenario(sc: Scenario) -> None:
    if sc.horizon <= 0:
        raise ScenarioValidationError("horizon must be positive", "horizon")
    classes = set()
    for i, p in enumerate(sc.pads):
        if p.pad_count < 1:
            raise ScenarioValidationError("pad_count must be >= 1", f"classes[{i}].pad_count")
        if p.separation < 0:
            raise ScenarioValidationError("separation must be >= 0", f"classes[{i}].separation")
        classes.add(p.class_id)
    if len(classes) != len(sc.pads):
        raise ScenarioValidationError("duplicate class in pad configuration", "classes")
    if tuple(sorted(classes)) != sc.pad_weights.class_ids:
        raise ScenarioValidationError("pad weight rows must match classes", "pad_weights")
    w = sc.pad_weights.weights
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ScenarioValidationError("pad weights must be finite and >= 0", "pad_weights")
    if sc.pad_weights.n_bins * sc.pad_weights.bin_width < sc.horizon + 1:
        raise ScenarioValidationError("pad weights must cover the horizon", "pad_weights")
    seen = set()
    for i, r in enumerate(sc.requests):
        f = f"requests[{i}]"
        if r.id in seen:
            raise ScenarioValidationError(f"duplicate request id {r.id}", f + ".id")
        seen.add(r.id)
        if r.class_id not in classes:
            raise ScenarioValidationError(f"no pad configuration for class {r.class_id}", f + ".class_id")
        if not 0 <= r.release_time <= sc.horizon:
            raise ScenarioValidationError("release_time must lie in [0, horizon]", f + ".release_time")
        if r.service_demand <= 0:
            raise ScenarioValidationError("service_demand must be > 0", f + ".service_demand")
        if r.priority_tag not in PRIORITY_TAGS:
            raise ScenarioValidationError(f"unknown priority_tag {r.priority_tag!r}", f + ".priority_tag")
    if sc.condition_labels and len(sc.condition_labels) != len(sc.requests):
        raise ScenarioValidationError("one condition label per request required", "condition_labels")


def regime_at(weather: Sequence[WeatherRegime], t: int) -> WeatherRegime | None:
    """Regime active at ``t``; the first listed regime wins on overlap."""
    for reg in weather:
        if reg.start <= t < reg.end:
            return reg
    return None


def build_pad_profile(
    horizon: int,
    classes: Sequence[ClassSpec],
    weather: Sequence[WeatherRegime],
    bin_width: int,
) -> PadWeightProfile:
    classes = sorted(classes, key=lambda c: c.class_id)
    n_bins = horizon // bin_width + 1
    weights = np.empty((len(classes), n_bins))
    seps = np.empty((len(classes), n_bins), dtype=np.int64)
    for b in range(n_bins):
        reg = regime_at(weather, b * bin_width)
        wm = reg.weight_multiplier if reg else 1.0
        sm = reg.separation_multiplier if reg else 1.0
        for row, c in enumerate(classes):
            weights[row, b] = c.base_weight * wm
            seps[row, b] = int(round(c.separation * sm))
    return PadWeightProfile(bin_width, tuple(c.class_id for c in classes), weights, seps)


def _labels(requests: Sequence[UavRequest], weather: Sequence[WeatherRegime]) -> tuple[tuple[int, str], ...]:
    out = []
    for r in requests:
        reg = regime_at(weather, r.release_time)
        out.append((r.class_id, reg.label if reg else DEFAULT_WEATHER))
    return tuple(out)


def _check_generation(spec: GenerationSpec) -> None:
    if spec.horizon <= 0:
        raise ConfigurationError("horizon must be positive")
    if not spec.classes:
        raise ConfigurationError("at least one UAV class is required")
    if spec.bin_width <= 0:
        raise ConfigurationError("bin_width must be positive")
    for c in spec.classes:
        if c.rate < 0:
            raise ConfigurationError(f"negative arrival rate for class {c.class_id}")
    for w in spec.weather:
        if w.end <= w.start or w.weight_multiplier < 0 or w.separation_multiplier < 0:
            raise ConfigurationError(f"invalid weather regime {w}")
        if w.label == DEFAULT_WEATHER:
            raise ConfigurationError(f"regime label {DEFAULT_WEATHER!r} is reserved")


def assemble(
    spec: GenerationSpec, requests: Sequence[UavRequest]
) -> Scenario:
    _check_generation(spec)
    classes = tuple(sorted(spec.classes, key=lambda c: c.class_id))
    return Scenario(
        horizon=spec.horizon,
        requests=tuple(requests),
        pads=tuple(PadConfig(c.class_id, c.pad_count, c.separation) for c in classes),
        pad_weights=build_pad_profile(spec.horizon, classes, spec.weather, spec.bin_width),
        seed=spec.seed,
        condition_labels=_labels(requests, spec.weather),
        classes=classes,
        weather=tuple(spec.weather),
    )


def generate_scenario(spec: GenerationSpec) -> Scenario:
    """Draw independent per-class Poisson arrivals on ``[0, horizon)``."""
    _check_generation(spec)
    rng = np.random.default_rng(spec.seed)
    raw: list[tuple[int, int, int, str]] = []
    for c in sorted(spec.classes, key=lambda c: c.class_id):
        count = rng.poisson(c.rate * spec.horizon)
        times = np.floor(rng.uniform(0.0, spec.horizon, size=count)).astype(np.int64)
        tags = rng.choice(len(PRIORITY_TAGS), size=count, p=spec.priority_probs)
        raw.extend((int(t), c.class_id, c.service_demand, PRIORITY_TAGS[g]) for t, g in zip(times, tags))
    raw.sort(key=lambda x: (x[0], x[1]))
    requests = [UavRequest(i, cid, t, d, tag) for i, (t, cid, d, tag) in enumerate(raw)]
    return assemble(spec, requests)


def pad_weight(scenario: Scenario, class_id: int, t: float) -> float:
    if t < 0 or t > scenario.horizon:
        raise ValueError(f"t={t} outside [0, {scenario.horizon}]")
    prof = scenario.pad_weights
    return float(prof.weights[prof.class_ids.index(class_id), int(t // prof.bin_width)])


# --------------------------------------------------------------------------
# structured-text documents

_SCHEMA: dict[str, Any] | None = None


def scenario_schema() -> dict[str, Any]:
    global _SCHEMA
    if _SCHEMA is None:
        text = resources.files("vertievo").joinpath("schemas/scenario.schema.json").read_text()
        _SCHEMA = json.loads(text)
    return _SCHEMA


def _locate(text: str, path: Sequence[Any]) -> int | None:
    """Best-effort line number of a JSON path inside ``text``."""
    keys = [p for p in path if isinstance(p, str)]
    if not keys:
        return 1
    # index of array element steps the search forward to the nth object
    pos = 0
    for step in path:
        if isinstance(step, str):
            m = re.compile(r'"%s"\s*:' % re.escape(step)).search(text, pos)
            if m is None:
                return None
            pos = m.end()
        else:
            for _ in range(step + 1):
                nxt = text.find("{", pos + 1)
                if nxt < 0:
                    return None
                pos = nxt
    return text.count("\n", 0, pos) + 1


def spec_from_document(doc: dict[str, Any]) -> GenerationSpec:
    classes = tuple(
        ClassSpec(
            class_id=int(c.get("class_id", i + 1)),
            rate=float(c.get("rate", 0.0)),
            pad_count=int(c.get("pad_count", 1)),
            separation=int(c.get("separation", 0)),
            service_demand=int(c.get("service_demand", 30)),
            base_weight=float(c.get("base_weight", 1.0)),
        )
        for i, c in enumerate(doc["classes"])
    )
    weather = tuple(
        WeatherRegime(
            start=int(w["start"]),
            end=int(w["end"]),
            weight_multiplier=float(w.get("weight_multiplier", 1.0)),
            separation_multiplier=float(w.get("separation_multiplier", 1.0)),
            label=str(w.get("label", "adverse")),
        )
        for w in doc.get("weather", [])
    )
    return GenerationSpec(
        horizon=int(doc["horizon"]),
        classes=classes,
        seed=int(doc.get("seed", 0)),
        weather=weather,
        bin_width=int(doc.get("bin_width", 60)),
    )


def parse_scenario(text: str) -> Scenario:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioValidationError(f"malformed document: {exc.msg}", "<document>", exc.lineno) from exc
    try:
        jsonschema.validate(doc, scenario_schema())
    except jsonschema.ValidationError as exc:
        path = list(exc.absolute_path)
        name = ".".join(f"[{p}]" if isinstance(p, int) else str(p) for p in path).replace(".[", "[")
        raise ScenarioValidationError(exc.message, name or "<root>", _locate(text, path)) from exc
    spec = spec_from_document(doc)
    try:
        if "requests" in doc:
            reqs = [
                UavRequest(
                    id=int(r["id"]),
                    class_id=int(r["class_id"]),
                    release_time=int(r["release_time"]),
                    service_demand=int(r.get("service_demand", 30)),
                    priority_tag=str(r.get("priority_tag", "normal")),
                )
                for r in doc["requests"]
            ]
            reqs.sort(key=lambda r: (r.release_time, r.id))
            return assemble(spec, reqs)
        return generate_scenario(spec)
    except ConfigurationError as exc:
        raise ScenarioValidationError(str(exc), "<document>") from exc
    except ScenarioValidationError as exc:
        if exc.field and exc.field.startswith("requests["):
            m = re.match(r"requests\[(\d+)\]\.(\w+)", exc.field)
            if m:
                exc.line = _locate(text, ["requests", int(m.group(1)), m.group(2)])
        raise


def scenario_to_document(sc: Scenario) -> dict[str, Any]:
    classes = sc.classes or tuple(
        ClassSpec(p.class_id, 0.0, p.pad_count, p.separation) for p in sc.pads
    )
    return {
        "horizon": sc.horizon,
        "seed": sc.seed,
        "bin_width": sc.pad_weights.bin_width,
        "classes": [asdict(c) for c in classes],
        "weather": [asdict(w) for w in sc.weather],
        "requests": [asdict(r) for r in sc.requests],
    }


def dump_scenario(sc: Scenario) -> str:
    return json.dumps(scenario_to_document(sc), indent=1, sort_keys=True) + "\n"


def save_scenario(sc: Scenario, path: str | Path) -> None:
    Path(path).write_text(dump_scenario(sc))


def load_scenario(path: str | Path) -> Scenario:
    return parse_scenario(Path(path).read_text())


# --------------------------------------------------------------------------
# reference desk scenario

def reference_generation_spec(seed: int = 2025) -> GenerationSpec:
    """Desk-scale vertiport: ~500 requests in one hour, three classes,
    an adverse-weather block in the middle third."""
    return GenerationSpec(
        horizon=3600,
        seed=seed,
        bin_width=60,
        classes=(
            ClassSpec(1, rate=0.070, pad_count=5, separation=10, service_demand=30, base_weight=1.0),
            ClassSpec(2, rate=0.045, pad_count=3, separation=10, service_demand=30, base_weight=0.6),
            ClassSpec(3, rate=0.025, pad_count=2, separation=10, service_demand=30, base_weight=0.4),
        ),
        weather=(WeatherRegime(1200, 2400, weight_multiplier=2.0, separation_multiplier=1.5, label="storm"),),
    )


def reference_scenario(seed: int = 2025) -> Scenario:
    return generate_scenario(reference_generation_spec(seed))


def strata(sc: Scenario) -> list[tuple[int, str]]:
    """Distinct (class, weather) labels present, sorted."""
    return sorted(set(sc.condition_labels))


__all__ = [
    "ClassSpec",
    "ConfigurationError",
    "GenerationSpec",
    "PadConfig",
    "PadWeightProfile",
    "Scenario",
    "ScenarioArrays",
    "ScenarioValidationError",
    "UavRequest",
    "WeatherRegime",
    "assemble",
    "dump_scenario",
    "generate_scenario",
    "load_scenario",
    "pad_weight",
    "parse_scenario",
    "reference_generation_spec",
    "reference_scenario",
    "save_scenario",
    "strata",
]
