"""Run configuration: one JSON document describing the schema, objects,
observables, toy generators, training and evaluation settings.

All cross-references are validated up front so a bad config fails before
any output path is touched.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from . import evaluation as ev
from . import losses as ls
from . import training as tr
from .dataset import FeatureSchema, ToyConfig
from .observables import ObjectSpec, ObservableSpec


class ConfigError(Exception):
    pass


def _object_to_dict(o: ObjectSpec) -> dict:
    return {"name": o.name, "pt": o.pt, "eta": o.eta, "phi": o.phi, "optional": o.optional}


def _observable_to_dict(spec: ObservableSpec) -> dict:
    return {
        "name": spec.name,
        "kind": spec.kind,
        "objects": [o.name for o in spec.objects],
        "histogram": spec.histogram.to_dict() if spec.histogram is not None else None,
    }


@dataclass
class RunConfig:
    schema: FeatureSchema
    seed: int = 0
    objects: tuple = ()
    observables: tuple = ()
    toy_source: ToyConfig = None
    toy_target: ToyConfig = None
    toy_n: int = 10_000
    train: tr.TrainConfig = field(default_factory=tr.TrainConfig)
    classifier: ev.ClassifierSpec = field(default_factory=ev.ClassifierSpec)
    paths: dict = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    def validate(self):
        by_name = {}
        for obj in self.objects:
            if obj.name in by_name:
                raise ConfigError(f"duplicate object name {obj.name!r}")
            try:
                obj.validate(self.schema)
            except Exception as exc:
                raise ConfigError(str(exc))
            by_name[obj.name] = obj
        for spec in self.observables:
            for obj in spec.objects:
                if obj.name not in by_name:
                    raise ConfigError(
                        f"observable {spec.name!r} references unknown object {obj.name!r}"
                    )
        for toy in (self.toy_source, self.toy_target):
            if toy is None:
                continue
            if toy.d != self.schema.d:
                raise ConfigError(
                    f"toy generator has {toy.d} marginals, schema has {self.schema.d} features"
                )
        if self.toy_n <= 0:
            raise ConfigError("toy_n must be positive")

    def to_dict(self) -> dict:
        doc = {
            "seed": self.seed,
            "schema": self.schema.to_dict(),
            "objects": [_object_to_dict(o) for o in self.objects],
            "observables": [_observable_to_dict(s) for s in self.observables],
            "train": self.train.to_dict(),
            "classifier": self.classifier.to_dict(),
            "paths": dict(self.paths),
            "toy_n": self.toy_n,
        }
        if self.toy_source is not None:
            doc["toy_source"] = self.toy_source.to_dict()
        if self.toy_target is not None:
            doc["toy_target"] = self.toy_target.to_dict()
        return doc

    @staticmethod
    def from_dict(doc: dict) -> "RunConfig":
        try:
            schema = FeatureSchema.from_dict(doc["schema"])
        except KeyError:
            raise ConfigError("config is missing the schema definition")
        try:
            objects = tuple(
                ObjectSpec(
                    name=o["name"], pt=o["pt"], eta=o["eta"], phi=o["phi"],
                    optional=o.get("optional", False),
                )
                for o in doc.get("objects", [])
            )
        except Exception as exc:
            raise ConfigError(str(exc))
        by_name = {o.name: o for o in objects}
        observables = []
        for s in doc.get("observables", []):
            refs = []
            for name in s["objects"]:
                if name not in by_name:
                    raise ConfigError(
                        f"observable {s['name']!r} references unknown object {name!r}"
                    )
                refs.append(by_name[name])
            hist = ls.HistogramSpec.from_dict(s["histogram"]) if s.get("histogram") else None
            observables.append(
                ObservableSpec(name=s["name"], kind=s["kind"], objects=tuple(refs), histogram=hist)
            )
        train = tr.TrainConfig.from_dict(doc["train"]) if "train" in doc else tr.TrainConfig()
        classifier = (
            ev.ClassifierSpec.from_dict(doc["classifier"])
            if "classifier" in doc
            else ev.ClassifierSpec()
        )
        toy_source = ToyConfig.from_dict(doc["toy_source"]) if "toy_source" in doc else None
        toy_target = ToyConfig.from_dict(doc["toy_target"]) if "toy_target" in doc else None
        return RunConfig(
            schema=schema,
            seed=int(doc.get("seed", 0)),
            objects=objects,
            observables=tuple(observables),
            toy_source=toy_source,
            toy_target=toy_target,
            toy_n=int(doc.get("toy_n", 10_000)),
            train=train,
            classifier=classifier,
            paths=dict(doc.get("paths", {})),
        )

    @staticmethod
    def load(path) -> "RunConfig":
        try:
            with open(path, "r", encoding="utf-8") as fh:
                doc = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}")
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}")
        return RunConfig.from_dict(doc)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2)
