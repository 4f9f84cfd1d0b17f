"""Two-stage retrieval of control parameters.

Stage one embeds the task label and looks up the impedance scenario.  Stage
two embeds ``scenario.description + " " + label`` and looks up the gripper
entry, which separates tasks that look alike but differ in the object held.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field

from .errors import EmptyIndex, PipelineError, TaskImpedanceError
from .impedance import ArmId, ImpedanceParams
from .knowledgebase import lookup_scenario
from .perception import ImageRef, TaskLabel, infer_task
from .vecindex import FlatIndex, embed_text

log = logging.getLogger(__name__)

REPORT_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class RetrievalConfig:
    """Knobs that the databases do not carry.

    ``gripper_actions`` maps task id to ``open``/``close`` (default ``close``);
    ``bimanual_groups`` lists task ids executed together, one per arm.
    """

    k: int = 1
    min_score: float = 0.2
    mass: tuple = (1.0, 1.0, 1.0)
    gripper_actions: dict = field(default_factory=dict, hash=False)
    bimanual_groups: tuple = ()

    def action_for(self, task_id):
        action = self.gripper_actions.get(task_id, "close")
        if action not in ("open", "close"):
            raise ValueError(f"gripper action for {task_id!r} must be open or close")
        return action

    def companions(self, task_id):
        for group in self.bimanual_groups:
            if task_id in group:
                return [t for t in group if t != task_id]
        return []


@dataclass(frozen=True)
class ControlParameters:
    impedance: ImpedanceParams
    scenario: object
    gripper: object
    gripper_action: str
    scores: tuple
    label: TaskLabel | None = None

    @property
    def arm(self) -> ArmId:
        return self.scenario.arm

    @property
    def gripper_angle(self):
        return self.gripper.angle_for(self.gripper_action)

    def to_dict(self):
        return {
            "task_id": self.scenario.task_id,
            "arm": self.arm.value,
            "stiffness": self.impedance.stiffness.tolist(),
            "damping": self.impedance.damping.tolist(),
            "mass": self.impedance.mass.tolist(),
            "provenance": self.scenario.provenance.value,
            "gripper": {
                "object_class": self.gripper.object_class,
                "fragility": self.gripper.fragility.value,
                "action": self.gripper_action,
                "angle": self.gripper_angle,
            },
            "scores": {"scenario": self.scores[0], "gripper": self.scores[1]},
            "label": None if self.label is None else self.label.text,
        }


def build_indexes(kb, provider):
    scenario_index = FlatIndex(provider.dimension)
    for s in kb.scenarios:
        scenario_index.add(s.task_id, embed_text(provider, s.description))
    gripper_index = FlatIndex(provider.dimension)
    for g in kb.grippers:
        gripper_index.add(g.object_class, embed_text(provider, g.description))
    return scenario_index, gripper_index


def _top(index, text, provider, k):
    if len(index) == 0:
        raise EmptyIndex("index is empty")
    return index.search(embed_text(provider, text), k)


def retrieve_impedance(label, scenario_index, kb, provider, k=1):
    hits = _top(scenario_index, label.text, provider, k)
    return lookup_scenario(kb, hits[0].id), hits[0].score


def gripper_query(scenario, label):
    return f"{scenario.description} {label.text}"


def retrieve_gripper(scenario, label, gripper_index, kb, provider, k=1):
    hits = _top(gripper_index, gripper_query(scenario, label), provider, k)
    return kb.gripper(hits[0].id), hits[0].score


def _stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except TaskImpedanceError as exc:
        raise PipelineError(name, exc) from exc


class Retriever:
    """Knowledge base, embedder and both indexes assembled once."""

    def __init__(self, kb, provider, tree, config=None, indexes=None):
        self.kb = kb
        self.provider = provider
        self.tree = tree
        self.config = config or RetrievalConfig()
        self.scenario_index, self.gripper_index = indexes or build_indexes(kb, provider)

    def parameters_for(self, label):
        cfg = self.config
        scenario, s1 = _stage("retrieval.impedance", retrieve_impedance, label,
                              self.scenario_index, self.kb, self.provider, cfg.k)
        gripper, s2 = _stage("retrieval.gripper", retrieve_gripper, scenario, label,
                             self.gripper_index, self.kb, self.provider, cfg.k)
        for stage, score in (("scenario", s1), ("gripper", s2)):
            if score < cfg.min_score:
                log.warning("low-confidence %s match for %r: score %.3f < %.2f",
                            stage, label.text, score, cfg.min_score)
        return ControlParameters(
            impedance=scenario.impedance_params(cfg.mass),
            scenario=scenario,
            gripper=gripper,
            gripper_action=cfg.action_for(scenario.task_id),
            scores=(s1, s2),
            label=label,
        )

    def run(self, image, client):
        """Image to control parameters; two entries (one per arm) for bimanual tasks."""
        if isinstance(image, str):
            image = ImageRef(image)
        label = _stage("perception", infer_task, client, image, self.tree)
        primary = self.parameters_for(label)
        out = [primary]
        for task_id in self.config.companions(primary.scenario.task_id):
            leaf = self.tree.leaf(task_id)
            out.append(self.parameters_for(TaskLabel(task_id, leaf.label, label.query_trace)))
        return out


def run_pipeline(image, client, tree, kb, indexes, provider, config=None):
    return Retriever(kb, provider, tree, config, indexes).run(image, client)


@dataclass(frozen=True)
class FixtureResult:
    image_uri: str
    inferred_task: str | None
    retrieved_scenario: str | None
    retrieved_gripper: str | None
    expected_task: str | None
    expected_object_class: str | None
    correct: bool
    error: str | None = None

    def to_dict(self):
        return dict(self.__dict__)


@dataclass(frozen=True)
class RetrievalReport:
    records: tuple

    @property
    def total(self):
        return len(self.records)

    @property
    def correct_count(self):
        return sum(r.correct for r in self.records)

    @property
    def accuracy(self):
        return self.correct_count / self.total if self.records else 0.0

    def to_dict(self):
        return {"schema_version": REPORT_SCHEMA_VERSION, "accuracy": self.accuracy,
                "correct": self.correct_count, "total": self.total,
                "records": [r.to_dict() for r in self.records]}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_csv(self):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["category", "count"])
        writer.writerow(["correct", self.correct_count])
        writer.writerow(["incorrect", self.total - self.correct_count])
        return buf.getvalue()


def is_correct(fixture, inferred, scenario, gripper):
    """All three must hold: task classified, scenario retrieved, gripper retrieved."""
    return (inferred is not None and inferred == fixture.expected_task_id
            and scenario == fixture.expected_task_id
            and gripper is not None and gripper == fixture.expected_object_class)


def evaluate_retrieval(fixtures, retriever, client):
    records = []
    for fx in sorted(fixtures, key=lambda f: f.image_uri):
        try:
            params = retriever.run(ImageRef(fx.image_uri), client)[0]
        except PipelineError as exc:
            records.append(FixtureResult(fx.image_uri, None, None, None, fx.expected_task_id,
                                         fx.expected_object_class, False, str(exc)))
            continue
        inferred = params.label.task_id
        scenario = params.scenario.task_id
        gripper = params.gripper.object_class
        records.append(FixtureResult(fx.image_uri, inferred, scenario, gripper,
                                     fx.expected_task_id, fx.expected_object_class,
                                     is_correct(fx, inferred, scenario, gripper)))
    return RetrievalReport(tuple(records))
