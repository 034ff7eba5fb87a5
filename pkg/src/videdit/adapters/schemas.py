"""Request/response schemas for every capability.

These wire contracts are our own; the hosted models they stand in for publish
no compatible API. Media never travels inline: clips and images are referenced
by artifact-store keys (sha256 hex), and single images are one-frame clips.
Every request may carry a ``request_id`` which responses echo back.
"""
from __future__ import annotations

KEY = {"type": "string", "pattern": "^[0-9a-f]{64}$"}
TEXT = {"type": "string", "minLength": 1}
BOX = {"anyOf": [{"type": "null"}, {"type": "array", "items": {"type": "integer"}, "minItems": 4, "maxItems": 4}]}
SHOT = {
    "type": "object",
    "required": ["start", "end", "shot_type"],
    "properties": {
        "start": {"type": "integer", "minimum": 0},
        "end": {"type": "integer", "minimum": 1},
        "shot_type": {"enum": ["close", "medium", "wide", "unknown"]},
    },
}


def _obj(required: dict, optional: dict | None = None) -> dict:
    props = {"request_id": {"type": "string"}, **required, **(optional or {})}
    return {"type": "object", "required": sorted(required), "properties": props, "additionalProperties": False}


REQUESTS = {
    "caption": _obj({"clip": KEY}, {"seed": {"type": "integer"}}),
    "detect_segment": _obj({"clip": KEY}, {"queries": {"type": "array", "items": TEXT}}),
    "local_describe": _obj({"clip": KEY, "mask": KEY, "name": TEXT}),
    "depth": _obj({"clip": KEY}),
    "image_edit": _obj({"image": KEY, "instruction": TEXT}),
    "controlled_video": _obj({"control": KEY, "first_frame": KEY}, {"prompt": {"type": "string"}}),
    "i2v": _obj({"image": KEY, "prompt": {"type": "string"}, "num_frames": {"type": "integer", "minimum": 1}},
                {"seed": {"type": "integer"}}),
    "inpaint": _obj({"clip": KEY, "mask": KEY}),
    "multi_shot_generate": _obj({"image": KEY, "prompt": {"type": "string"}, "frames_per_shot": {"type": "integer", "minimum": 1}},
                                {"seed": {"type": "integer"}}),
    "instruction_generate": _obj({"category": TEXT, "hints": {"type": "object"}}),
    "judge": _obj({"source": KEY, "edited": KEY, "prompt": TEXT}),
    "edit_model_under_test": _obj({"source": KEY, "instruction": TEXT}),
}

OBJECT = {
    "type": "object",
    "required": ["name", "mask", "boxes"],
    "properties": {"name": TEXT, "mask": KEY, "boxes": {"type": "array", "items": BOX}},
}

RESPONSES = {
    "caption": _obj({"caption": TEXT}),
    "detect_segment": _obj({"objects": {"type": "array", "items": OBJECT}}),
    "local_describe": _obj({"caption": TEXT}),
    "depth": _obj({"depth": KEY}),
    "image_edit": _obj({"image": KEY}),
    "controlled_video": _obj({"video": KEY}),
    "i2v": _obj({"video": KEY}),
    "inpaint": _obj({"video": KEY}),
    "multi_shot_generate": _obj({"video": KEY, "shots": {"type": "array", "items": SHOT, "minItems": 1}}),
    "instruction_generate": _obj({"instruction": TEXT}, {"backward_instruction": {"type": ["string", "null"]}}),
    # judge text is free-form: unparseable replies are passed through for the filter to reject
    "judge": _obj({"text": {"type": "string"}}),
    "edit_model_under_test": _obj({"video": KEY}),
}
