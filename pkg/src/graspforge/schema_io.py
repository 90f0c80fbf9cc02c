"""Versioned JSON documents: schema lookup, validation and file IO."""

from __future__ import annotations

import json
from functools import lru_cache
from importlib import resources
from pathlib import Path

import jsonschema

from .errors import IoError, SchemaError, VersionError


@lru_cache(maxsize=None)
def load_schema(name):
    """Schema document ``schemas/<name>.json``, e.g. ``load_schema("scenario.v1")``."""
    return json.loads(resources.files("graspforge.schemas").joinpath(f"{name}.json").read_text())


def validate(doc, name):
    """Check the version tag first, then the full schema.

    Raises VersionError when ``doc["schema"]`` names another version and
    SchemaError (with the offending path and field) for any other violation.
    """
    expected = f"graspforge.{name}"
    if not isinstance(doc, dict):
        raise SchemaError(f"{expected}: document must be a JSON object")
    tag = doc.get("schema")
    if tag is None:
        raise SchemaError(f"{expected}: missing required field 'schema'")
    if tag != expected:
        raise VersionError(f"expected schema {expected!r}, got {tag!r}")
    validator = jsonschema.Draft202012Validator(load_schema(name))
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        e = errors[0]
        where = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise SchemaError(f"{expected}: at {where}: {e.message}")
    return doc


def read_json(path):
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise IoError(f"cannot read {p}: {exc.strerror or exc}") from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{p}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc


def dumps(doc):
    """Canonical serialization used for every artifact (stable key order, trailing newline)."""
    return json.dumps(doc, indent=1, sort_keys=True) + "\n"


def write_json(doc, path):
    p = Path(path)
    try:
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(dumps(doc))
    except OSError as exc:
        raise IoError(f"cannot write {p}: {exc.strerror or exc}") from exc
    return p
