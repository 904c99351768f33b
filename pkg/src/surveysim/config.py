"""Run configuration: one JSON file per run with sections
{data, splits, prompting, backend, train, eval}. Flags only override keys;
the resolved config is captured into run metadata for reproducibility.
"""

import hashlib
import json
from pathlib import Path

import jsonschema

CONFIG_SCHEMA = {
    "type": "object",
    "properties": {
        "data": {
            "type": "object",
            "properties": {
                "kind": {"enum": ["respondent_csv", "aggregated_json"]},
                "csv": {"type": "string"},
                "codebook": {"type": "string"},
                "json": {"type": "string"},
                "min_respondents": {"type": "integer", "minimum": 0},
                "invalid_options": {"type": "array", "items": {"type": "string"}},
                "dataset_path": {"type": "string"},
            },
            "required": ["kind"],
        },
        "splits": {
            "type": "object",
            "properties": {
                "country_sets": {"type": "object"},
                "question_sets": {"type": "object"},
            },
            "required": ["country_sets", "question_sets"],
        },
        "prompting": {
            "type": "object",
            "properties": {"template_file": {"type": "string"}},
        },
        "backend": {
            "type": "object",
            "properties": {
                "kind": {"enum": ["mock", "toy_table", "toy_embedding", "real_lm"]},
                "identifier": {"type": "string"},
                "embed_dim": {"type": "integer", "minimum": 1},
                "seed": {"type": "integer"},
                "fixture": {"type": "string"},
                "device": {"type": "string"},
                "dtype": {"type": "string"},
                "target_modules": {"type": "array", "items": {"type": "string"}},
            },
            "required": ["kind"],
        },
        "train": {
            "type": "object",
            "properties": {
                "loss": {"enum": ["KL", "JS", "WA", "CE"]},
                "learning_rate": {"type": "number", "exclusiveMinimum": 0},
                "batch_size": {"type": "integer", "minimum": 1},
                "adapter_rank": {"type": "integer", "minimum": 1},
                "adapter_alpha": {"type": "number"},
                "adapter_dropout": {"type": "number", "minimum": 0, "maximum": 1},
                "max_epochs": {"type": "integer", "minimum": 1},
                "early_stop_metric": {"enum": ["valid_one_minus_jsd", "train_loss"]},
                "patience": {"type": "integer", "minimum": 1},
                "weight_decay": {"type": "number", "minimum": 0},
                "seed": {"type": "integer"},
            },
        },
        "eval": {
            "type": "object",
            "properties": {
                "subsets": {"type": "array", "items": {"type": "string"}},
                "variants": {"type": "array",
                             "items": {"enum": ["normal", "ctrl", "shuffled"]}},
                "seed": {"type": "integer"},
                "out_dir": {"type": "string"},
                "adapter": {"type": "string"},
                "max_new_tokens": {"type": "integer", "minimum": 1},
            },
        },
    },
}


class ConfigError(ValueError):
    pass


def load_config(path, overrides=None) -> dict:
    """Load, override and validate a run config; raise ConfigError with the
    offending field path on schema violations."""
    try:
        config = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    for dotted, value in (overrides or {}).items():
        section, _, key = dotted.partition(".")
        if not key:
            raise ConfigError(f"override {dotted!r} must look like section.key")
        config.setdefault(section, {})[key] = value
    try:
        jsonschema.validate(config, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = ".".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config field {where}: {exc.message}") from exc
    return config


def config_hash(config: dict) -> str:
    return hashlib.sha256(
        json.dumps(config, sort_keys=True).encode("utf-8")).hexdigest()
