"""Run configuration shared by the CLI commands.

File paths inside a config file are resolved relative to that file;
``output_dir`` is resolved relative to the working directory.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from fractions import Fraction
from importlib import resources
from pathlib import Path

from .errors import ParseError, ValidationError
from .impedance import ArmId
from .retrieval import RetrievalConfig
from .simulation import SimConfig
from .vecindex import DEFAULT_DIMENSION, HashingEmbedder, HttpEmbedder

CONFIG_SCHEMA_VERSION = 1
TOP_LEVEL_KEYS = {"schema_version", "knowledge_base", "decision_tree", "fixtures", "chains",
                  "heightfield", "environment", "simulation", "embedding", "vlm", "retrieval",
                  "accuracy_threshold", "gain_override", "output_dir"}


def data_path(name=""):
    return Path(str(resources.files("taskimpedance") / "data")) / name


def default_config_path():
    return data_path("default_config.json")


def _merge(base, override):
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def _threshold(value):
    try:
        return float(Fraction(str(value)))
    except (ValueError, ZeroDivisionError):
        raise ValidationError(f"accuracy_threshold {value!r} is not a number or fraction",
                              rule="accuracy_threshold") from None


@dataclass(frozen=True)
class RunConfig:
    impedance_db: Path
    gripper_db: Path
    decision_tree: Path
    fixtures: Path
    chains: dict
    heightfield: Path | None
    environment: dict
    simulation: SimConfig
    embedding: dict
    vlm: dict
    retrieval: RetrievalConfig
    accuracy_threshold: float
    gain_override: dict | None
    output_dir: Path
    raw: dict

    @property
    def config_hash(self):
        blob = json.dumps(self.raw, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def embedding_provider(self):
        dim = int(self.embedding.get("dimension", DEFAULT_DIMENSION))
        kind = self.embedding.get("provider", "fallback")
        if kind == "fallback":
            return HashingEmbedder(dim)
        return HttpEmbedder(self.embedding["url"], dim,
                            timeout=float(self.embedding.get("timeout", 5.0)),
                            retries=int(self.embedding.get("retries", 2)))


def load_run_config(path=None, overrides=None):
    """Read the shipped defaults, layer the user file and ``overrides`` on top, validate."""
    default_path = default_config_path()
    base = json.loads(default_path.read_text(encoding="utf-8"))
    base_dir = default_path.parent
    raw = copy.deepcopy(base)
    # paths in the defaults are relative to the package data directory
    _absolutize(raw, base_dir)
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        try:
            user = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ParseError(exc.msg, location=f"{path}:{exc.lineno}:{exc.colno}") from exc
        if not isinstance(user, dict):
            raise ValidationError("config must be a JSON object", entry=str(path), rule="type")
        user = copy.deepcopy(user)
        _absolutize(user, path.parent)
        raw = _merge(raw, user)
    if overrides:
        raw = _merge(raw, overrides)
    return _build(raw)


def _absolutize(raw, base_dir):
    def fix(p):
        return None if p is None else str((base_dir / p).resolve())

    kb = raw.get("knowledge_base")
    if isinstance(kb, dict):
        for key in ("impedance", "gripper"):
            if key in kb:
                kb[key] = fix(kb[key])
    for key in ("decision_tree", "fixtures", "heightfield"):
        if key in raw:
            raw[key] = fix(raw[key])
    if isinstance(raw.get("chains"), dict):
        raw["chains"] = {arm: fix(p) for arm, p in raw["chains"].items()}


def _existing(p, what):
    path = Path(p)
    if not path.is_file():
        raise FileNotFoundError(f"{what} not found: {path}")
    return path


def _build(raw):
    unknown = set(raw) - TOP_LEVEL_KEYS
    if unknown:
        raise ValidationError(f"unknown config keys {sorted(unknown)}", rule="unknown field")
    if raw.get("schema_version") != CONFIG_SCHEMA_VERSION:
        raise ValidationError(f"config schema_version must be {CONFIG_SCHEMA_VERSION}",
                              rule="schema_version")
    kb = raw["knowledge_base"]
    chains = {ArmId.parse(arm): _existing(p, f"{arm} chain file")
              for arm, p in raw["chains"].items()}
    embedding = dict(raw.get("embedding") or {})
    if embedding.get("provider", "fallback") not in ("fallback", "external"):
        raise ValidationError("embedding.provider must be 'fallback' or 'external'",
                              rule="embedding")
    if embedding.get("provider") == "external":
        url = embedding.get("url") or ""
        if not url.startswith(("http://", "https://")):
            raise ValidationError(f"embedding url {url!r} is not a well-formed http(s) url",
                                  rule="embedding")
    vlm = dict(raw.get("vlm") or {"mode": "scripted"})
    if vlm.get("mode", "scripted") not in ("scripted", "http"):
        raise ValidationError("vlm.mode must be 'scripted' or 'http'", rule="vlm")
    r = dict(raw.get("retrieval") or {})
    retrieval = RetrievalConfig(
        k=int(r.get("k", 1)),
        min_score=float(r.get("min_score", 0.2)),
        mass=tuple(r.get("mass", (1.0, 1.0, 1.0))),
        gripper_actions=dict(r.get("gripper_actions", {})),
        bimanual_groups=tuple(tuple(g) for g in r.get("bimanual_groups", ())),
    )
    sim = SimConfig.from_dict(raw.get("simulation") or {})
    override = raw.get("gain_override")
    if override is not None and not (isinstance(override, dict)
                                      and set(override) <= {"stiffness", "damping"}):
        raise ValidationError("gain_override must hold stiffness and/or damping",
                              rule="gain_override")
    return RunConfig(
        impedance_db=_existing(kb["impedance"], "impedance database"),
        gripper_db=_existing(kb["gripper"], "gripper database"),
        decision_tree=_existing(raw["decision_tree"], "decision tree"),
        fixtures=_existing(raw["fixtures"], "fixture file"),
        chains=chains,
        heightfield=_existing(raw["heightfield"], "heightfield") if raw.get("heightfield") else None,
        environment=dict(raw.get("environment") or {}),
        simulation=sim,
        embedding=embedding,
        vlm=vlm,
        retrieval=retrieval,
        accuracy_threshold=_threshold(raw.get("accuracy_threshold", "13/14")),
        gain_override=override,
        output_dir=Path(raw.get("output_dir") or "taskimpedance-out"),
        raw=raw,
    )
