"""Task inference by a tree of yes/no questions put to a vision-language model.

The model sits behind :class:`VlmClient`; a scripted client replays recorded
answers from a fixture file so the whole pipeline runs without a model.
"""

from __future__ import annotations

import base64
import enum
import itertools
import json
import logging
import re
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

from .errors import FixtureNotFound, ParseError, UnsureAnswer, ValidationError

log = logging.getLogger(__name__)

MAX_DEPTH = 5
EXPECTED_LEAVES = 9


class Answer(str, enum.Enum):
    YES = "yes"
    NO = "no"
    UNSURE = "unsure"


@dataclass(frozen=True)
class ImageRef:
    uri: str

    def __post_init__(self):
        if not self.uri or not self.uri.strip():
            raise ValueError("image uri must be non-empty")


@dataclass(frozen=True)
class Leaf:
    task_id: str
    label: str


@dataclass(frozen=True)
class Node:
    question: str
    yes: "Node | Leaf"
    no: "Node | Leaf"


@dataclass(frozen=True)
class TaskLabel:
    task_id: str
    text: str
    query_trace: tuple = ()


class VlmClient(Protocol):
    def ask(self, image: ImageRef, question: str) -> Answer: ...


def _parse_node(raw, path):
    if not isinstance(raw, dict):
        raise ParseError("tree node must be an object", location=path)
    if "task_id" in raw:
        extra = set(raw) - {"task_id", "label"}
        if extra:
            raise ParseError(f"unknown leaf fields {sorted(extra)}", location=path)
        task_id = raw["task_id"]
        if not isinstance(task_id, str) or not task_id:
            raise ParseError("leaf task_id must be a non-empty string", location=path)
        return Leaf(task_id, raw.get("label") or task_id.replace("_", " "))
    extra = set(raw) - {"question", "yes", "no"}
    if extra or not {"question", "yes", "no"} <= set(raw):
        raise ParseError("internal node needs exactly question/yes/no", location=path)
    if not isinstance(raw["question"], str) or not raw["question"].strip():
        raise ParseError("question must be a non-empty string", location=path)
    return Node(raw["question"], _parse_node(raw["yes"], path + ".yes"),
                _parse_node(raw["no"], path + ".no"))


def _node_to_dict(node):
    if isinstance(node, Leaf):
        return {"task_id": node.task_id, "label": node.label}
    return {"question": node.question, "yes": _node_to_dict(node.yes),
            "no": _node_to_dict(node.no)}


@dataclass(frozen=True)
class DecisionTree:
    root: "Node | Leaf"

    def leaves(self):
        """``(leaf, answer_path)`` pairs in depth-first yes-before-no order."""
        out = []

        def walk(node, path):
            if isinstance(node, Leaf):
                out.append((node, tuple(path)))
                return
            walk(node.yes, path + [Answer.YES])
            walk(node.no, path + [Answer.NO])

        walk(self.root, [])
        return out

    def leaf(self, task_id):
        for lf, _ in self.leaves():
            if lf.task_id == task_id:
                return lf
        raise KeyError(task_id)

    def questions(self):
        out = []

        def walk(node):
            if isinstance(node, Node):
                out.append(node.question)
                walk(node.yes)
                walk(node.no)

        walk(self.root)
        return out

    def depth(self):
        return max(len(path) for _, path in self.leaves())

    def validate(self, task_ids=None):
        leaves = self.leaves()
        if len(leaves) != EXPECTED_LEAVES:
            raise ValidationError(f"decision tree must have {EXPECTED_LEAVES} leaves, "
                                  f"got {len(leaves)}", rule="leaf count")
        ids = [lf.task_id for lf, _ in leaves]
        if len(set(ids)) != len(ids):
            raise ValidationError("decision tree leaves repeat a task_id", rule="bijection")
        if self.depth() > MAX_DEPTH:
            raise ValidationError(f"decision tree deeper than {MAX_DEPTH} questions",
                                  rule="depth")
        if task_ids is not None and set(ids) != set(task_ids):
            missing = sorted(set(task_ids) - set(ids))
            extra = sorted(set(ids) - set(task_ids))
            raise ValidationError(f"tree leaves do not match knowledge base ids "
                                  f"(missing {missing}, unexpected {extra})", rule="bijection")
        return self

    def to_dict(self):
        return _node_to_dict(self.root)


def decision_tree_from_dict(data):
    return DecisionTree(_parse_node(data, "$"))


def load_decision_tree(path, task_ids=None):
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, location=f"{path}:{exc.lineno}:{exc.colno}") from exc
    return decision_tree_from_dict(data).validate(task_ids)


def infer_task(client, image, tree):
    node = tree.root
    trace = []
    while isinstance(node, Node):
        answer = Answer(client.ask(image, node.question))
        trace.append((node.question, answer))
        if answer is Answer.UNSURE:
            raise UnsureAnswer(node.question)
        node = node.yes if answer is Answer.YES else node.no
    return TaskLabel(node.task_id, node.label, tuple(trace))


def reachable_leaves(tree):
    """Task ids reached by enumerating every yes/no assignment to the tree's questions."""
    questions = tree.questions()
    if len(questions) > 16:
        raise ValueError("too many questions to enumerate")
    found = set()
    for combo in itertools.product((Answer.YES, Answer.NO), repeat=len(questions)):
        answers = dict(zip(questions, combo))
        found.add(infer_task(MappingVlm(answers), ImageRef("enumeration"), tree).task_id)
    return found


class MappingVlm:
    """Answers every image from one fixed question -> answer map."""

    def __init__(self, answers):
        self.answers = {q: Answer(a) for q, a in answers.items()}

    def ask(self, image, question):
        return self.answers.get(question, Answer.UNSURE)


@dataclass(frozen=True)
class Fixture:
    image_uri: str
    answers: dict = field(hash=False)
    expected_task_id: str | None = None
    expected_object_class: str | None = None


def parse_fixtures(data, source="fixtures"):
    if not isinstance(data, dict) or not isinstance(data.get("fixtures"), list):
        raise ParseError("expected an object with a 'fixtures' list", location=source)
    if not data["fixtures"]:
        raise ParseError("no fixtures", location=source)
    out = []
    seen = set()
    for i, raw in enumerate(data["fixtures"]):
        loc = f"{source}:fixtures[{i}]"
        if not isinstance(raw, dict) or not isinstance(raw.get("image_uri"), str):
            raise ParseError("fixture needs an image_uri string", location=loc)
        extra = set(raw) - {"image_uri", "answers", "expected_task_id", "expected_object_class"}
        if extra:
            raise ParseError(f"unknown fixture fields {sorted(extra)}", location=loc)
        answers = raw.get("answers", {})
        if not isinstance(answers, dict):
            raise ParseError("answers must be an object", location=loc)
        try:
            answers = {str(q): Answer(a) for q, a in answers.items()}
        except ValueError as exc:
            raise ParseError(f"bad answer: {exc}", location=loc) from None
        if raw["image_uri"] in seen:
            raise ParseError(f"duplicate image_uri {raw['image_uri']!r}", location=loc)
        seen.add(raw["image_uri"])
        out.append(Fixture(raw["image_uri"], answers, raw.get("expected_task_id"),
                           raw.get("expected_object_class")))
    return out


def load_fixtures(path):
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, location=f"{path}:{exc.lineno}:{exc.colno}") from exc
    return parse_fixtures(data, str(path))


class ScriptedVlm:
    """Replays per-image answers; unmapped questions come back ``unsure``."""

    def __init__(self, fixtures):
        self.fixtures = {f.image_uri: f for f in fixtures}

    def ask(self, image, question):
        try:
            fixture = self.fixtures[image.uri]
        except KeyError:
            raise FixtureNotFound(f"fixture not found for image {image.uri!r}") from None
        return fixture.answers.get(question, Answer.UNSURE)


def scripted_vlm_from_fixture(fixture_path):
    return ScriptedVlm(load_fixtures(fixture_path))


class HttpVlmClient:
    """Adapter for a VLM served over HTTP.

    ``POST url`` with ``{"image_b64": ..., "question": ...}``; expects
    ``{"answer": "yes" | "no" | "unsure"}``.  Any other reply text is mapped
    to ``unsure``.
    """

    def __init__(self, url, timeout=30.0):
        if not re.match(r"^https?://[^/\s]+", url):
            raise ValueError(f"malformed VLM endpoint url: {url!r}")
        self.url = url
        self.timeout = timeout
        self._images = {}

    def _encode(self, image):
        if image.uri not in self._images:
            self._images[image.uri] = base64.b64encode(Path(image.uri).read_bytes()).decode()
        return self._images[image.uri]

    def ask(self, image, question):
        body = json.dumps({"image_b64": self._encode(image), "question": question}).encode()
        req = urllib.request.Request(self.url, data=body, method="POST",
                                     headers={"Content-Type": "application/json"})
        with urllib.request.urlopen(req, timeout=self.timeout) as resp:
            reply = json.loads(resp.read().decode("utf-8"))
        text = str(reply.get("answer", "")).strip().lower()
        try:
            return Answer(text)
        except ValueError:
            log.warning("VLM reply %r is not yes/no; treating as unsure", text)
            return Answer.UNSURE
