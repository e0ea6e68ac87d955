"""Run configuration: loading, schema validation, path resolution."""

from __future__ import annotations

import hashlib
import json
from importlib import resources
from pathlib import Path

import jsonschema
import yaml

from ..errors import SchemaError

BUILTIN = {"builtin:bcg": "bcg.csv"}


def _schema(name):
    return json.loads(resources.files("metakit.cli").joinpath(name).read_text(encoding="utf-8"))


def config_schema():
    return _schema("config.schema.json")


def bundle_schema():
    return _schema("resultbundle.schema.json")


class RunConfig(dict):
    """Validated configuration document plus its origin."""

    def __init__(self, doc, path=None, raw=b""):
        super().__init__(doc)
        self.path = Path(path) if path is not None else None
        self.sha256 = hashlib.sha256(raw).hexdigest()

    @property
    def base_dir(self):
        return self.path.parent if self.path is not None else Path.cwd()

    def resolve(self, p):
        if p in BUILTIN:
            return resources.files("metakit.datasets").joinpath(BUILTIN[p])
        q = Path(p)
        return q if q.is_absolute() else self.base_dir / q

    @property
    def model(self):
        return self.get("model", {})

    @property
    def is_multilevel(self):
        m = self.model
        return m.get("type", "multilevel" if "random" in m else "univariate") == "multilevel"


def validate(doc):
    """Schema check plus the cross-field rules the schema cannot express."""
    try:
        jsonschema.validate(doc, config_schema())
    except jsonschema.ValidationError as e:
        where = "/".join(str(x) for x in e.absolute_path) or "<root>"
        raise SchemaError(f"config invalid at {where}: {e.message}") from None
    m = doc.get("model", {})
    es = doc["effect_size"]
    if "columns" in es and not ({"vi", "sei"} & set(es["columns"])):
        raise SchemaError("effect_size.columns needs vi or sei")
    ml = m.get("type", "multilevel" if "random" in m else "univariate") == "multilevel"
    if ml:
        if "random" not in m:
            raise SchemaError("multilevel model needs model.random")
        for key in ("scale", "subgroup", "pooled_2x2"):
            if key in m:
                raise SchemaError(f"model.{key} is not available for multilevel models")
        if m.get("method", "REML") not in ("REML", "ML"):
            raise SchemaError("multilevel models are fitted by REML or ML")
        if "vcalc" in m and "V_file" in m:
            raise SchemaError("give either model.vcalc or model.V_file, not both")
    else:
        for key in ("random", "vcalc", "V_file", "save_V"):
            if key in m:
                raise SchemaError(f"model.{key} requires a multilevel model")
        if m.get("test") == "t":
            raise SchemaError("test 't' is for multilevel models; use knapp_hartung or wald_z")
        if m.get("scale") and m.get("subgroup"):
            raise SchemaError("subgroup analysis with a scale model is not supported")
    if m.get("pooled_2x2"):
        steps = es.get("compute", [])
        if not steps or steps[0]["measure"] not in ("logRR", "logOR", "RD"):
            raise SchemaError("model.pooled_2x2 needs a 2x2 effect-size computation as the first step")
    return doc


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise SchemaError(f"cannot read config {path}: {e.strerror}") from None
    try:
        doc = yaml.safe_load(raw.decode("utf-8"))
    except (yaml.YAMLError, UnicodeDecodeError) as e:
        raise SchemaError(f"config {path} is not valid YAML/JSON: {e}") from None
    if not isinstance(doc, dict):
        raise SchemaError("config must be a mapping")
    return RunConfig(validate(doc), path, raw)
