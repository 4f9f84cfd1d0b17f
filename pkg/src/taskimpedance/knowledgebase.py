"""The impedance and gripper JSON databases.

Both files carry ``"schema_version": 1`` and are validated strictly on load:
unknown fields, wrong counts or out-of-range values are rejected, never
repaired.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass
from pathlib import Path

from .errors import ParseError, UnknownTask, ValidationError
from .impedance import ArmId, ImpedanceParams

SCHEMA_VERSION = 1
EXPECTED_SCENARIOS = 9
EXPECTED_GRIPPERS = 9

SCENARIO_FIELDS = {"task_id", "description", "arm", "stiffness", "damping", "provenance",
                   "object_classes"}
SCENARIO_REQUIRED = SCENARIO_FIELDS - {"object_classes"}
GRIPPER_FIELDS = {"object_class", "description", "fragility", "angle_open", "angle_close"}


class Provenance(str, enum.Enum):
    PAPER = "paper"
    PLACEHOLDER = "placeholder"


class Fragility(str, enum.Enum):
    RIGID = "rigid"
    SOFT = "soft"
    DEFORMABLE = "deformable"
    FRAGILE = "fragile"


@dataclass(frozen=True)
class ScenarioEntry:
    task_id: str
    description: str
    stiffness: tuple
    damping: tuple
    arm: ArmId = ArmId.RIGHT
    provenance: Provenance = Provenance.PAPER
    object_classes: tuple = ()

    @property
    def stiffness_z(self):
        return self.stiffness[2]

    @property
    def damping_z(self):
        return self.damping[2]

    def impedance_params(self, mass=(1.0, 1.0, 1.0)):
        return ImpedanceParams.from_gains(self.stiffness, self.damping, mass)

    def to_dict(self):
        return {"task_id": self.task_id, "description": self.description,
                "arm": self.arm.value, "stiffness": list(self.stiffness),
                "damping": list(self.damping), "provenance": self.provenance.value,
                "object_classes": list(self.object_classes)}


@dataclass(frozen=True)
class GripperEntry:
    object_class: str
    description: str
    fragility: Fragility
    angle_open: float
    angle_close: float

    def angle_for(self, action):
        return self.angle_close if action == "close" else self.angle_open

    def to_dict(self):
        return {"object_class": self.object_class, "description": self.description,
                "fragility": self.fragility.value, "angle_open": self.angle_open,
                "angle_close": self.angle_close}


@dataclass(frozen=True)
class KnowledgeBase:
    scenarios: tuple
    grippers: tuple

    def __post_init__(self):
        _validate_kb(self)

    @property
    def task_ids(self):
        return tuple(s.task_id for s in self.scenarios)

    def gripper(self, object_class):
        for g in self.grippers:
            if g.object_class == object_class:
                return g
        raise KeyError(object_class)

    def impedance_dict(self):
        return {"schema_version": SCHEMA_VERSION,
                "scenarios": [s.to_dict() for s in self.scenarios]}

    def gripper_dict(self):
        return {"schema_version": SCHEMA_VERSION,
                "grippers": [g.to_dict() for g in self.grippers]}


def _read_json(path):
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, location=f"{path}:{exc.lineno}:{exc.colno}") from exc


def _check_fields(raw, allowed, required, entry):
    if not isinstance(raw, dict):
        raise ValidationError("entry must be a JSON object", entry=entry, rule="type")
    unknown = set(raw) - allowed
    if unknown:
        raise ValidationError(f"unknown fields {sorted(unknown)}", entry=entry, rule="unknown field")
    missing = required - set(raw)
    if missing:
        raise ValidationError(f"missing fields {sorted(missing)}", entry=entry, rule="missing field")


def _positive_triple(values, name, entry):
    if not isinstance(values, list) or len(values) != 3:
        raise ValidationError(f"{name} must be a list of 3 numbers", entry=entry, rule=name)
    out = []
    for v in values:
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ValidationError(f"{name} must contain numbers", entry=entry, rule=name)
        if not math.isfinite(v) or v <= 0:
            raise ValidationError(f"{name} must be strictly positive", entry=entry, rule=name)
        out.append(float(v))
    return tuple(out)


def _enum(cls, value, name, entry):
    try:
        return cls(value)
    except ValueError:
        allowed = ", ".join(m.value for m in cls)
        raise ValidationError(f"{name} must be one of {allowed}", entry=entry, rule=name) from None


def _text(raw, name, entry):
    value = raw.get(name)
    if not isinstance(value, str) or not value.strip():
        raise ValidationError(f"{name} must be a non-empty string", entry=entry, rule=name)
    return value


def parse_scenario(raw, entry="scenario"):
    _check_fields(raw, SCENARIO_FIELDS, SCENARIO_REQUIRED, entry)
    task_id = _text(raw, "task_id", entry)
    entry = f"scenario {task_id!r}"
    try:
        arm = ArmId.parse(raw["arm"])
    except ValidationError as exc:
        raise ValidationError(str(exc), entry=entry, rule="arm") from None
    objects = raw.get("object_classes", [])
    if not isinstance(objects, list) or not all(isinstance(o, str) and o for o in objects):
        raise ValidationError("object_classes must be a list of names", entry=entry,
                              rule="object_classes")
    return ScenarioEntry(
        task_id=task_id,
        description=_text(raw, "description", entry),
        stiffness=_positive_triple(raw["stiffness"], "stiffness", entry),
        damping=_positive_triple(raw["damping"], "damping", entry),
        arm=arm,
        provenance=_enum(Provenance, raw["provenance"], "provenance", entry),
        object_classes=tuple(objects),
    )


def parse_gripper(raw, entry="gripper"):
    _check_fields(raw, GRIPPER_FIELDS, GRIPPER_FIELDS, entry)
    object_class = _text(raw, "object_class", entry)
    entry = f"gripper {object_class!r}"
    angles = []
    for name in ("angle_open", "angle_close"):
        v = raw[name]
        if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
            raise ValidationError(f"{name} must be a finite number", entry=entry, rule=name)
        angles.append(float(v))
    angle_open, angle_close = angles
    if not angle_open > angle_close >= 0.0:
        raise ValidationError("angles must satisfy angle_open > angle_close >= 0",
                              entry=entry, rule="angle order")
    return GripperEntry(object_class=object_class,
                        description=_text(raw, "description", entry),
                        fragility=_enum(Fragility, raw["fragility"], "fragility", entry),
                        angle_open=angle_open, angle_close=angle_close)


def _validate_kb(kb):
    if len(kb.scenarios) != EXPECTED_SCENARIOS:
        raise ValidationError(f"expected {EXPECTED_SCENARIOS} scenarios, got {len(kb.scenarios)}",
                              rule="scenario count")
    if len(kb.grippers) != EXPECTED_GRIPPERS:
        raise ValidationError(f"expected {EXPECTED_GRIPPERS} grippers, got {len(kb.grippers)}",
                              rule="gripper count")
    seen = set()
    for s in kb.scenarios:
        if s.task_id in seen:
            raise ValidationError("duplicate task_id", entry=f"scenario {s.task_id!r}",
                                  rule="unique task_id")
        seen.add(s.task_id)
    classes = set()
    for g in kb.grippers:
        if g.object_class in classes:
            raise ValidationError("duplicate object_class", entry=f"gripper {g.object_class!r}",
                                  rule="unique object_class")
        classes.add(g.object_class)
    descriptions = [s.description for s in kb.scenarios]
    if len(set(descriptions)) != len(descriptions):
        raise ValidationError("scenario descriptions must be pairwise distinct",
                              rule="distinct descriptions")
    for s in kb.scenarios:
        for obj in s.object_classes:
            if obj not in classes:
                raise ValidationError(f"object class {obj!r} missing from gripper table",
                                      entry=f"scenario {s.task_id!r}", rule="cross reference")


def _entries(data, key, path):
    if not isinstance(data, dict):
        raise ValidationError("top level must be a JSON object", entry=str(path), rule="type")
    unknown = set(data) - {"schema_version", key}
    if unknown:
        raise ValidationError(f"unknown fields {sorted(unknown)}", entry=str(path),
                              rule="unknown field")
    if data.get("schema_version") != SCHEMA_VERSION:
        raise ValidationError(f"schema_version must be {SCHEMA_VERSION}", entry=str(path),
                              rule="schema_version")
    entries = data.get(key)
    if not isinstance(entries, list):
        raise ValidationError(f"'{key}' must be a list", entry=str(path), rule="type")
    return entries


def knowledge_base_from_dicts(impedance_data, gripper_data, impedance_src="impedance",
                              gripper_src="gripper"):
    scen_raw = _entries(impedance_data, "scenarios", impedance_src)
    grip_raw = _entries(gripper_data, "grippers", gripper_src)
    if len(scen_raw) != EXPECTED_SCENARIOS:
        raise ValidationError(f"expected {EXPECTED_SCENARIOS} scenarios, got {len(scen_raw)}",
                              entry=str(impedance_src), rule="scenario count")
    if len(grip_raw) != EXPECTED_GRIPPERS:
        raise ValidationError(f"expected {EXPECTED_GRIPPERS} grippers, got {len(grip_raw)}",
                              entry=str(gripper_src), rule="gripper count")
    scenarios = tuple(parse_scenario(r, f"{impedance_src}[{i}]") for i, r in enumerate(scen_raw))
    grippers = tuple(parse_gripper(r, f"{gripper_src}[{i}]") for i, r in enumerate(grip_raw))
    return KnowledgeBase(scenarios=scenarios, grippers=grippers)


def load_knowledge_base(impedance_path, gripper_path):
    return knowledge_base_from_dicts(_read_json(impedance_path), _read_json(gripper_path),
                                     Path(impedance_path).name, Path(gripper_path).name)


def dumps_database(data):
    return json.dumps(data, indent=2) + "\n"


def lookup_scenario(kb, task_id):
    for s in kb.scenarios:
        if s.task_id == task_id:
            return s
    raise UnknownTask(f"unknown task {task_id!r}")
