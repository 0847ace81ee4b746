"""Model checkpoints: HWMP parameter files plus JSON sidecars carrying lineage."""

import hashlib
import json
import logging
import os
from typing import Dict, Iterable, Optional

import pandas as pd
import torch

from utils import ndcompute as nd
from utils.config import ModelConfig, TrainHighConfig, TrainLowConfig
from utils.errors import LineageError, MissingFileError
from utils.models import WorldModelParams, attach_high_level, build_world_model

logger = logging.getLogger(__name__)

LOW_SECTIONS = ("encoder", "low", "proprio_head", "prober")
HIGH_SECTIONS = ("action_encoder", "high")


def encoder_hash(params: WorldModelParams) -> str:
    """SHA-256 over the encoder's parameter names, shapes and float32 bytes"""
    sha = hashlib.sha256()
    for name, tensor in sorted(params.named_parameters(("encoder",)).items()):
        data = tensor.detach().cpu().to(torch.float32).contiguous().numpy()
        sha.update(name.encode("utf-8"))
        sha.update(repr(tuple(data.shape)).encode("utf-8"))
        sha.update(data.astype("<f4").tobytes())
    return sha.hexdigest()


class CheckpointManager:
    """Reads and writes the low/high checkpoint pair in one model directory"""

    def __init__(self, model_dir="models"):
        self.model_dir = model_dir

    def ensure_model_directory(self):
        os.makedirs(self.model_dir, exist_ok=True)

    def path(self, filename):
        return os.path.join(self.model_dir, filename)

    def has_high(self) -> bool:
        return os.path.exists(self.path("high.hwmp")) and os.path.exists(self.path("high.json"))

    def _write_sidecar(self, filename, document):
        with open(self.path(filename), "w") as f:
            json.dump(document, f, indent=2, sort_keys=True)
            f.write("\n")

    def _read_sidecar(self, filename) -> dict:
        path = self.path(filename)
        if not os.path.exists(path):
            raise MissingFileError(f"checkpoint sidecar not found: {path}")
        with open(path, "r") as f:
            return json.load(f)

    def save_low(self, params: WorldModelParams, config_hash: str, train_layout_ids: Iterable[str],
                 dataset_digest: str = "", resolution: int = 64, log: Optional[pd.DataFrame] = None,
                 prober_metrics: Optional[Dict[str, float]] = None) -> str:
        """Write low.hwmp, low.json and the training log; returns the encoder hash"""
        self.ensure_model_directory()
        nd.save_parameters(self.path("low.hwmp"), params.named_parameters(LOW_SECTIONS))
        lineage = encoder_hash(params)
        self._write_sidecar("low.json", {
            "level": "low",
            "format": "HWMP",
            "format_version": nd.PARAM_VERSION,
            "config_hash": config_hash,
            "encoder_hash": lineage,
            "dataset_digest": dataset_digest,
            "train_layout_ids": sorted(train_layout_ids),
            "resolution": resolution,
            "model": params.model_config.model_dump(mode="json"),
            "train_low": params.train_low.model_dump(mode="json"),
            "prober": prober_metrics or {},
        })
        if log is not None:
            frame = log.copy()
            frame["config_hash"] = config_hash
            frame.to_csv(self.path("low_log.csv"), index=False)
        logger.info("Saved low-level checkpoint to %s (encoder %s)", self.model_dir, lineage[:12])
        return lineage

    def save_high(self, params: WorldModelParams, config_hash: str, dataset_digest: str = "",
                  log: Optional[pd.DataFrame] = None) -> None:
        self.ensure_model_directory()
        nd.save_parameters(self.path("high.hwmp"), params.named_parameters(HIGH_SECTIONS))
        self._write_sidecar("high.json", {
            "level": "high",
            "format": "HWMP",
            "format_version": nd.PARAM_VERSION,
            "config_hash": config_hash,
            "encoder_hash": encoder_hash(params),
            "dataset_digest": dataset_digest,
            "d_l": params.d_l,
            "latent_action_std": params.latent_action_std,
            "train_high": params.train_high.model_dump(mode="json"),
        })
        if log is not None:
            frame = log.copy()
            frame["config_hash"] = config_hash
            frame.to_csv(self.path("high_log.csv"), index=False)
        logger.info("Saved high-level checkpoint to %s", self.model_dir)

    def read_low_sidecar(self) -> dict:
        return self._read_sidecar("low.json")

    def read_high_sidecar(self) -> dict:
        return self._read_sidecar("high.json")

    def load(self, require_high: bool = False, include_high: bool = True) -> WorldModelParams:
        """Rebuild the modules from sidecars, load weights, and verify encoder lineage"""
        low_meta = self.read_low_sidecar()
        params = build_world_model(
            ModelConfig.model_validate(low_meta["model"]),
            resolution=int(low_meta.get("resolution", 64)),
            train_low=TrainLowConfig.model_validate(low_meta["train_low"]),
        )
        _load_sections(params, nd.load_parameters(self.path("low.hwmp")), LOW_SECTIONS)
        actual = encoder_hash(params)
        if actual != low_meta.get("encoder_hash"):
            raise LineageError(
                f"{self.path('low.hwmp')} encoder hash {actual[:12]} does not match its sidecar "
                f"{str(low_meta.get('encoder_hash'))[:12]}"
            )

        if include_high and self.has_high():
            high_meta = self.read_high_sidecar()
            if high_meta.get("encoder_hash") != actual:
                raise LineageError(
                    f"high-level model was trained on encoder {str(high_meta.get('encoder_hash'))[:12]}, "
                    f"supplied low-level encoder is {actual[:12]}"
                )
            attach_high_level(params, d_l=int(high_meta["d_l"]))
            params.train_high = TrainHighConfig.model_validate(high_meta["train_high"])
            _load_sections(params, nd.load_parameters(self.path("high.hwmp")), HIGH_SECTIONS)
            params.latent_action_std = high_meta.get("latent_action_std")
        elif require_high:
            raise MissingFileError(f"no high-level checkpoint in {self.model_dir}")
        params.eval()
        return params

    def train_layout_ids(self):
        return set(self.read_low_sidecar().get("train_layout_ids", []))


def _load_sections(params: WorldModelParams, tensors, sections):
    modules = params.modules()
    for section in sections:
        prefix = f"{section}."
        state = {name[len(prefix):]: value for name, value in tensors.items() if name.startswith(prefix)}
        modules[section].load_state_dict(state, strict=True)
