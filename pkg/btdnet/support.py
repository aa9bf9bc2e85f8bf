#!/usr/bin/python
# -*- coding: utf-8 -*-
# Copyright (c) 2023, BTDNet contributors
#
# Permission to use, copy, modify, and/or distribute this software for any purpose
# with or without fee is hereby granted, provided that the above copyright notice
# and this permission notice appear in all copies.
#
# THE SOFTWARE IS PROVIDED "AS IS" AND THE AUTHOR DISCLAIMS ALL WARRANTIES WITH
# REGARD TO THIS SOFTWARE INCLUDING ALL IMPLIED WARRANTIES OF MERCHANTABILITY AND
# FITNESS. IN NO EVENT SHALL THE AUTHOR BE LIABLE FOR ANY SPECIAL, DIRECT, INDIRECT,
# OR CONSEQUENTIAL DAMAGES OR ANY DAMAGES WHATSOEVER RESULTING FROM LOSS OF USE,
# DATA OR PROFITS, WHETHER IN AN ACTION OF CONTRACT, NEGLIGENCE OR OTHER TORTIOUS
# ACTION, ARISING OUT OF OR IN CONNECTION WITH THE USE OR PERFORMANCE OF THIS
# SOFTWARE.

from copy import deepcopy
from typing import Any, Dict, Iterable, List, Optional, Union

import hashlib
import json
import os

CONFIG_PATH = "./config.json"


class BTDNetError(ValueError):
    """Base class of every error raised by the package."""


class MissingModality(BTDNetError):
    pass


class CorruptSlice(BTDNetError):
    pass


class ManifestMismatch(BTDNetError):
    pass


class EmptyVolume(BTDNetError):
    pass


class DegenerateRegion(BTDNetError):
    pass


class VolumeTooLong(BTDNetError):
    pass


class InvalidParameter(BTDNetError):
    pass


class ShapeMismatch(BTDNetError):
    pass


class InvalidLength(BTDNetError):
    pass


class NonFiniteInput(BTDNetError):
    pass


class InsufficientClass(BTDNetError):
    pass


class EmptyFold(BTDNetError):
    pass


class CheckpointMismatch(BTDNetError):
    pass


class EmptyInput(BTDNetError):
    pass


class ConfigError(BTDNetError):
    pass


class IoError(BTDNetError, OSError):
    pass


DEFAULT_CONFIG: Dict[str, Dict[str, Any]] = {
    "data": {
        "min_area_frac": 0.02,
        "size": 224,
        "lengths": {"FLAIR": 250, "T1w": 200, "T1wCE": 200, "T2": 250},
        "strict_length": True,
        "length_mode": "pad"
    },
    "augment": {
        "rotation_deg": 15.0,
        "hflip_prob": 0.5,
        "mix_alpha": 0.2,
        "tta_seed": 0,
        "per_slice": True,
        "use_geometric": True,
        "use_mix": True,
        "use_tta": True
    },
    "network": {
        "backbone": "tiny_cnn",
        "weights": None,
        "rnn_kind": "lstm",
        "rnn_units": 128,
        "routing_units": 64,
        "fusion_units": 128,
        "share_routing": True,
        "use_mask": True,
        "use_routing": True,
        "freeze_backbone_bn": True
    },
    "loss": {
        "kind": "focal",
        "alpha": 0.25,
        "gamma": 2.0,
        "literal_eq2": False,
        "reduction": "sum"
    },
    "train": {
        "batch_size": 4,
        "lr_phase1": 1e-4,
        "lr_phase2": 1e-5,
        "momentum": 0.9,
        "sam_rho": 0.05,
        "epochs_phase1": 30,
        "epochs_phase2": 20,
        "patience": 7,
        "folds": 5,
        "seed": 0,
        "workers": 0,
        "phase2_from_scratch": False,
        "device": "cpu",
        "dtype": "float32"
    },
    "synth": {
        "num_scans": 200,
        "image_size": 64,
        "counts": {"FLAIR": [16, 32], "T1w": [12, 28], "T1wCE": [12, 28], "T2": [16, 32]},
        "separability": 1.0,
        "balance": 0.5,
        "seed": 0
    }
}

# Keys whose value is a free-form mapping keyed by modality.
_MAPPING_KEYS = {"data.lengths", "synth.counts"}


class FileManager:
    """
    Convenient class for file management.

    :param path: The path to a file.
    :type path: str.
    """
    def __init__(self, path:Union[str, os.PathLike]):
        self.path = path

    def import_json(self) -> Any:
        """
        Import a JSON file as a dictionary.

        :returns: dict -- A dictionary representing the imported JSON file.
        """
        try:
            with open(self.path, encoding="utf8") as json_file:
                return json.load(json_file)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{self.path} is not valid JSON: {e}") from e

    def dump_json(self, json_data:Any, beautiful:bool=False) -> None:
        try:
            with open(self.path, 'w', encoding="utf8") as outfile:
                print(f"[FileManager: INFO] Writing json to path {self.path}")
                if beautiful:
                    json.dump(json_data, outfile, sort_keys=True, indent=4)
                else:
                    json.dump(json_data, outfile)
        except OSError as e:
            raise IoError(f"Could not write {self.path}: {e}") from e

    def append_jsonl(self, record:Dict[str, Any]) -> None:
        """
        Append one record to a newline-delimited JSON file, creating it if needed.

        :param record: A JSON-serializable dictionary.
        :type record: dict.
        """
        with open(self.path, 'a', encoding="utf8") as outfile:
            outfile.write(json.dumps(record, sort_keys=True) + "\n")

    def dump_jsonl(self, records:Iterable[Dict[str, Any]]) -> None:
        with open(self.path, 'w', encoding="utf8") as outfile:
            print(f"[FileManager: INFO] Writing json lines to path {self.path}")
            for record in records:
                outfile.write(json.dumps(record, sort_keys=True) + "\n")

    def import_jsonl(self) -> List[Dict[str, Any]]:
        with open(self.path, encoding="utf8") as infile:
            return [json.loads(line) for line in infile if line.strip()]

    def sha256(self) -> str:
        digest = hashlib.sha256()
        with open(self.path, "rb") as infile:
            for chunk in iter(lambda: infile.read(1 << 20), b""):
                digest.update(chunk)
        return digest.hexdigest()


def _merge(defaults:Dict[str, Any], overrides:Dict[str, Any], prefix:str) -> Dict[str, Any]:
    merged = deepcopy(defaults)
    for key, value in overrides.items():
        dotted = f"{prefix}{key}"
        if key not in defaults:
            raise ConfigError(f"Unknown configuration key '{dotted}'.")
        default = defaults[key]
        if dotted in _MAPPING_KEYS:
            if not isinstance(value, dict):
                raise ConfigError(f"'{dotted}' must be an object keyed by modality.")
            unknown = set(value).difference(default)
            if unknown:
                raise ConfigError(f"Unknown modality in '{dotted}': {sorted(unknown)}.")
            merged[key] = {**default, **value}
        elif isinstance(default, dict):
            if not isinstance(value, dict):
                raise ConfigError(f"'{dotted}' must be an object.")
            merged[key] = _merge(default, value, dotted + ".")
        else:
            merged[key] = _check_type(dotted, default, value)
    return merged


def _check_type(dotted:str, default:Any, value:Any) -> Any:
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"'{dotted}' must be a boolean, got {value!r}.")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"'{dotted}' must be a number, got {value!r}.")
        return float(value)
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"'{dotted}' must be an integer, got {value!r}.")
        return value
    if not isinstance(value, type(default)):
        raise ConfigError(f"'{dotted}' must be of type {type(default).__name__}, got {value!r}.")
    return value


def load_config(config_path:Optional[str]=None, overrides:Optional[Dict[str, Any]]=None) -> Dict[str, Any]:
    """
    Load a configuration file and merge it onto the defaults.
    The file must be in JSON format and may only contain keys that also appear
    in ``DEFAULT_CONFIG``. Here is an example of a configuration file content: ::

        {
            "data": {"lengths": {"FLAIR": 32, "T1w": 32, "T1wCE": 32, "T2": 32}},
            "loss": {"gamma": 2.0},
            "train": {"lr_phase1": 0.01}
        }

    :param config_path: The path to the configuration file. If None, the defaults are returned.
    :type config_path: str.
    :param overrides: Dotted keys (e.g. ``"train.seed"``) overriding both the defaults and the file.
    :type overrides: dict.
    :returns: dict -- The complete configuration.
    """
    file_config = FileManager(config_path).import_json() if config_path else dict()
    if not isinstance(file_config, dict):
        raise ConfigError(f"{config_path} must contain a JSON object.")
    config = _merge(DEFAULT_CONFIG, file_config, "")
    for dotted, value in (overrides or dict()).items():
        section, _, key = dotted.partition(".")
        config = _merge(config, {section: {key: value}}, "")
    return config


def config_digest(config:Dict[str, Any]) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode("utf8")).hexdigest()[:16]
