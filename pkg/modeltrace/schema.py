import json
from typing import Any, Dict

from jsonschema import Draft202012Validator
from jsonschema.exceptions import ValidationError

from . import config

_HEX16 = {"type": "string", "pattern": "^[0-9a-f]{16}$"}
_HEX64 = {"type": "string", "pattern": "^[0-9a-f]{64}$"}
_B64 = {"type": "string", "pattern": "^[A-Za-z0-9+/]*={0,2}$"}

INFER_REQUEST_SCHEMA = {
    "type": "object",
    "required": ["request_id", "credential", "key_image", "query_image"],
    "properties": {
        "request_id": {"type": "string"},
        "credential": {"type": "string", "minLength": config.CREDENTIAL_LEN,
                       "maxLength": config.CREDENTIAL_LEN},
        "key_image": _B64,
        "query_image": _B64,
    },
    "additionalProperties": False,
}

INFER_RESPONSE_SCHEMA = {
    "type": "object",
    "required": ["request_id", "class"],
    "properties": {
        "request_id": {"type": "string"},
        "class": {"type": "integer", "minimum": 0},
    },
    "additionalProperties": False,
}

ERROR_SCHEMA = {
    "type": "object",
    "required": ["error_code"],
    "properties": {
        "request_id": {"type": "string"},
        "error_code": {"type": "string", "enum": ["bad_request", "protocol_error", "internal"]},
    },
    "additionalProperties": False,
}

LEDGER_RECORD_SCHEMA = {
    "type": "object",
    "required": ["seq", "timestamp", "owner_id", "p_hex", "prev_digest", "note"],
    "properties": {
        "seq": {"type": "integer", "minimum": 1},
        "timestamp": {"type": "string", "pattern": r"^\d{4}-\d{2}-\d{2}T\d{2}:\d{2}:\d{2}Z$"},
        "owner_id": {"type": "string"},
        "p_hex": _HEX16,
        "prev_digest": _HEX64,
        "note": {"type": "string"},
    },
    "additionalProperties": False,
}

IDENTITY_ENTRY_SCHEMA = {
    "type": "object",
    "required": ["user_id", "i_hex"],
    "properties": {
        "user_id": {"type": "string"},
        "i_hex": _HEX16,
    },
    "additionalProperties": False,
}

MANIFEST_SCHEMA = {
    "type": "object",
    "properties": {
        "seed": {"type": "integer"},
        "theta1": {"type": "number", "minimum": 0, "maximum": 1},
        "theta2": {"type": "number", "minimum": 0, "maximum": 1},
        "fraction": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
        "epochs": {"type": "integer", "minimum": 1},
        "num_classes": {"type": "integer", "minimum": 1},
        "paths": {
            "type": "object",
            "properties": {
                "train_images": {"type": "string"},
                "train_labels": {"type": "string"},
                "test_images": {"type": "string"},
                "test_labels": {"type": "string"},
                "base_model": {"type": "string"},
                "models": {"type": "object", "additionalProperties": {"type": "string"}},
                "triggers": {"type": "object", "additionalProperties": {"type": "string"}},
                "ledger": {"type": "string"},
                "identity_base": {"type": "string"},
                "bundles": {"type": "object", "additionalProperties": {"type": "string"}},
            },
            "additionalProperties": False,
        },
    },
    "additionalProperties": False,
}

_VALIDATORS: Dict[int, Draft202012Validator] = {}


def validator(schema: dict) -> Draft202012Validator:
    v = _VALIDATORS.get(id(schema))
    if v is None:
        v = _VALIDATORS[id(schema)] = Draft202012Validator(schema)
    return v


def is_valid(obj: Any, schema: dict) -> bool:
    return validator(schema).is_valid(obj)


def decode_and_validate(text, schema: dict) -> dict:
    """Strip, parse, validate. Raises json.JSONDecodeError or jsonschema ValidationError."""
    if isinstance(text, (bytes, bytearray)):
        text = text.decode("utf-8")
    obj = json.loads(text.strip())
    validator(schema).validate(obj)
    return obj


def encode_line(obj: dict) -> bytes:
    return (json.dumps(obj, separators=(",", ":"), ensure_ascii=False) + "\n").encode("utf-8")


__all__ = [
    "INFER_REQUEST_SCHEMA", "INFER_RESPONSE_SCHEMA", "ERROR_SCHEMA", "LEDGER_RECORD_SCHEMA",
    "IDENTITY_ENTRY_SCHEMA", "MANIFEST_SCHEMA", "ValidationError",
    "decode_and_validate", "encode_line", "is_valid", "validator",
]
