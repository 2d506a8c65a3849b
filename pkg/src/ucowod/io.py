"""On-disk formats.

Ground truth is one JSON object::

    {"known_count": C, "unknown_slots": U,
     "annotations": [{"image_id": 0, "class_id": 3, "bbox": [cx, cy, w, h]}, ...]}

``class_id`` below ``known_count`` is a known class; at or above it is a
true unknown class id, which only the evaluator ever sees. Detections are
JSON Lines, one object per line::

    {"image_id": 0, "class_id": 4, "bbox": [cx, cy, w, h], "score": 0.9}

where a ``class_id`` in ``[known_count, known_count + unknown_slots)`` is a
predicted unknown slot. Reports and the synthetic dataset/model bundles are
plain JSON. All writers emit sorted keys so identical runs produce
byte-identical files; report floats are rounded to 6 decimal places.
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .core import Box, ClassLabel, Detection, GroundTruthObject, Proposal, label_for_class_id
from .harness import RunConfig, SyntheticDataset, SyntheticScene, ToyHead
from .losses import LossWeights
from .metrics import EvalReport
from .pseudo_label import UlpConfig

PathLike = Union[str, Path]


class SchemaError(ValueError):
    """A record failed validation; the message names the first offender."""


def _require(condition: bool, where: str, message: str) -> None:
    if not condition:
        raise SchemaError(f"{where}: {message}")


def _parse_bbox(raw: object, where: str) -> Box:
    _require(
        isinstance(raw, list) and len(raw) == 4 and all(isinstance(v, (int, float)) for v in raw),
        where,
        f"bbox must be a list of 4 numbers, got {raw!r}",
    )
    cx, cy, w, h = (float(v) for v in raw)
    _require(w > 0 and h > 0, where, f"bbox sides must be positive, got w={w}, h={h}")
    return Box(cx, cy, w, h)


def _parse_int(record: dict, key: str, where: str) -> int:
    _require(key in record, where, f"missing key {key!r}")
    value = record[key]
    _require(isinstance(value, int) and not isinstance(value, bool), where, f"{key} must be an integer, got {value!r}")
    return value


def load_ground_truth(path: PathLike) -> tuple[list[GroundTruthObject], int, int]:
    """Read a ground-truth file; returns (objects, known_count, unknown_slots)."""
    path = Path(path)
    with open(path) as handle:
        try:
            payload = json.load(handle)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{path}: not valid JSON ({exc})") from exc
    where = str(path)
    _require(isinstance(payload, dict), where, "top level must be a JSON object")
    known_count = _parse_int(payload, "known_count", where)
    unknown_slots = _parse_int(payload, "unknown_slots", where)
    _require(known_count >= 0 and unknown_slots >= 0, where, "class counts must be non-negative")
    _require(isinstance(payload.get("annotations"), list), where, "annotations must be a list")
    objects = []
    for index, record in enumerate(payload["annotations"]):
        record_where = f"{path}: annotations[{index}]"
        _require(isinstance(record, dict), record_where, f"record must be an object, got {record!r}")
        image_id = _parse_int(record, "image_id", record_where)
        class_id = _parse_int(record, "class_id", record_where)
        _require(class_id >= 0, record_where, f"class_id must be non-negative, got {class_id}")
        box = _parse_bbox(record.get("bbox"), record_where)
        objects.append(GroundTruthObject(image_id, label_for_class_id(class_id, known_count), box))
    return objects, known_count, unknown_slots


def save_ground_truth(
    path: PathLike, gts: Sequence[GroundTruthObject], known_count: int, unknown_slots: int
) -> None:
    payload = {
        "known_count": known_count,
        "unknown_slots": unknown_slots,
        "annotations": [
            {
                "image_id": g.image_id,
                "class_id": g.label.class_id,
                "bbox": [round(v, 6) for v in (g.box.cx, g.box.cy, g.box.w, g.box.h)],
            }
            for g in gts
        ],
    }
    _dump_json(path, payload)


def load_detections(path: PathLike, known_count: int, unknown_slots: int) -> list[Detection]:
    """Read a JSON Lines detection file. Predicted class ids must fit inside
    the known range plus the unknown slots."""
    path = Path(path)
    detections = []
    with open(path) as handle:
        for line_no, line in enumerate(handle, start=1):
            line = line.strip()
            if not line:
                continue
            where = f"{path}: line {line_no}"
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"{where}: not valid JSON ({exc})") from exc
            _require(isinstance(record, dict), where, f"record must be an object, got {record!r}")
            image_id = _parse_int(record, "image_id", where)
            class_id = _parse_int(record, "class_id", where)
            _require(
                0 <= class_id < known_count + unknown_slots,
                where,
                f"class_id must lie in [0, {known_count + unknown_slots}), got {class_id}",
            )
            box = _parse_bbox(record.get("bbox"), where)
            _require("score" in record, where, "missing key 'score'")
            score = record["score"]
            _require(isinstance(score, (int, float)) and not isinstance(score, bool), where, f"score must be a number, got {score!r}")
            _require(0.0 <= score <= 1.0, where, f"score must lie in [0, 1], got {score}")
            detections.append(
                Detection(image_id, label_for_class_id(class_id, known_count), box, float(score))
            )
    return detections


def save_detections(path: PathLike, detections: Sequence[Detection]) -> None:
    with open(path, "w") as handle:
        for det in detections:
            record = {
                "image_id": det.image_id,
                "class_id": det.label.class_id,
                "bbox": [round(v, 6) for v in (det.box.cx, det.box.cy, det.box.w, det.box.h)],
                "score": round(det.score, 6),
            }
            handle.write(json.dumps(record, sort_keys=True) + "\n")


def report_to_dict(report: EvalReport, config_echo: dict) -> dict:
    payload = {
        "map_known": round(report.map_known, 6),
        "wi": round(report.wi, 6),
        "a_ose": report.a_ose,
        "uc_map": round(report.uc_map, 6),
        "uc_recall": round(report.uc_recall, 6),
        "permutation": {str(pred): true for pred, true in sorted(report.permutation.items())},
        "config_echo": config_echo,
    }
    if report.warnings:
        payload["warnings"] = list(report.warnings)
    return payload


def save_report(path: PathLike, report: EvalReport, config_echo: dict) -> None:
    _dump_json(path, report_to_dict(report, config_echo))


def _dump_json(path: PathLike, payload: dict) -> None:
    with open(path, "w") as handle:
        json.dump(payload, handle, indent=2, sort_keys=True)
        handle.write("\n")


def _config_to_dict(config: RunConfig) -> dict:
    return dataclasses.asdict(config)


def config_from_dict(payload: dict, base: Optional[RunConfig] = None) -> RunConfig:
    """Build a RunConfig from a (possibly partial) dictionary of overrides."""
    base = base or RunConfig()
    payload = dict(payload)
    known_fields = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = sorted(set(payload) - known_fields)
    if unknown:
        raise SchemaError(f"unknown config keys: {unknown}")
    if "ulp" in payload:
        payload["ulp"] = UlpConfig(**payload["ulp"])
    if "weights" in payload:
        payload["weights"] = LossWeights(**payload["weights"])
    return dataclasses.replace(base, **payload)


def load_config(path: PathLike, base: Optional[RunConfig] = None) -> RunConfig:
    with open(path) as handle:
        try:
            payload = json.load(handle)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(payload, dict):
        raise SchemaError(f"{path}: config must be a JSON object")
    return config_from_dict(payload, base)


def _scene_to_dict(scene: SyntheticScene) -> dict:
    return {
        "image_id": scene.image_id,
        "proposals": [
            {
                "bbox": [p.box.cx, p.box.cy, p.box.w, p.box.h],
                "objectness": p.objectness,
            }
            for p in scene.proposals
        ],
        "gts": [
            {
                "image_id": g.image_id,
                "class_id": g.label.class_id,
                "bbox": [g.box.cx, g.box.cy, g.box.w, g.box.h],
                "is_pseudo": g.is_pseudo,
            }
            for g in scene.gts
        ],
        "features": scene.features.tolist(),
    }


def _scene_from_dict(payload: dict, known_count: int) -> SyntheticScene:
    image_id = payload["image_id"]
    proposals = [
        Proposal(image_id, Box(*record["bbox"]), record["objectness"])
        for record in payload["proposals"]
    ]
    gts = []
    for record in payload["gts"]:
        label = label_for_class_id(record["class_id"], known_count)
        gts.append(GroundTruthObject(record["image_id"], label, Box(*record["bbox"]), record["is_pseudo"]))
    features = np.array(payload["features"], dtype=float)
    if features.size == 0:
        features = features.reshape(0, 0)
    return SyntheticScene(image_id, proposals, gts, features)


def save_dataset(path: PathLike, dataset: SyntheticDataset) -> None:
    payload = {
        "config": _config_to_dict(dataset.config),
        "train": [_scene_to_dict(s) for s in dataset.train],
        "test": [_scene_to_dict(s) for s in dataset.test],
    }
    _dump_json(path, payload)


def load_dataset(path: PathLike) -> SyntheticDataset:
    with open(path) as handle:
        payload = json.load(handle)
    config = config_from_dict(payload["config"])
    return SyntheticDataset(
        train=[_scene_from_dict(s, config.known_classes) for s in payload["train"]],
        test=[_scene_from_dict(s, config.known_classes) for s in payload["test"]],
        config=config,
    )


def save_head(path: PathLike, head: ToyHead) -> None:
    _dump_json(path, head.to_dict())


def load_head(path: PathLike) -> ToyHead:
    with open(path) as handle:
        return ToyHead.from_dict(json.load(handle))
