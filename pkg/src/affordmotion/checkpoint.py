"""Versioned model checkpoints: schedule config + model config + parameters."""
from __future__ import annotations

import json
from pathlib import Path

import torch

from .diffusion import DiffusionSchedule, schedule_from_config

FORMAT_NAME = "affordmotion-checkpoint"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


class Checkpoint:
    """A trained denoiser. ``model`` is rebuilt lazily by the owning module when loaded from disk."""

    def __init__(self, kind: str, model_config: dict, schedule: DiffusionSchedule, model=None,
                 extra: dict | None = None, state_dict: dict | None = None):
        self.kind = kind
        self.model_config = dict(model_config)
        self.schedule = schedule
        self.model = model
        self.extra = dict(extra or {})
        self._state_dict = state_dict

    @property
    def state_dict(self) -> dict:
        if self.model is not None:
            return self.model.state_dict()
        if self._state_dict is None:
            raise CheckpointError("checkpoint has no parameters")
        return self._state_dict

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        blob = {
            "format": FORMAT_NAME,
            "format_version": FORMAT_VERSION,
            "kind": self.kind,
            "model_config": json.dumps(self.model_config),
            "schedule": json.dumps(self.schedule.to_config()),
            "extra": json.dumps(self.extra),
            "state_dict": {k: v.detach().clone() for k, v in self.state_dict.items()},
        }
        torch.save(blob, path)
        return path


def load_checkpoint(path, kind: str | None = None) -> Checkpoint:
    try:
        blob = torch.load(Path(path), map_location="cpu", weights_only=True)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from exc
    if not isinstance(blob, dict) or blob.get("format") != FORMAT_NAME:
        raise CheckpointError(f"{path} is not a model checkpoint")
    if blob.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {blob.get('format_version')!r}")
    if kind is not None and blob["kind"] != kind:
        raise CheckpointError(f"expected a {kind} checkpoint, found {blob['kind']}")
    schedule = schedule_from_config(json.loads(blob["schedule"]))
    return Checkpoint(blob["kind"], json.loads(blob["model_config"]), schedule,
                      extra=json.loads(blob["extra"]), state_dict=blob["state_dict"])
