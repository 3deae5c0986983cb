"""Helpers shared by the experiment scripts and the acceptance suite."""
from pathlib import Path

import yaml

from mose.data import DatasetSpec, generate
from mose.train import TrainConfig, load_config_text

ROOT = Path(__file__).resolve().parent.parent
PRESET = ROOT / "configs" / "flip_preset.yaml"


def load_preset(path=PRESET, dataset=None, **train_overrides):
    """Return (dataset, TrainConfig) for a combined dataset/train/model YAML file.

    ``dataset`` overrides spec fields; keyword arguments override train fields
    (a ``model`` dict is merged into the model section).
    """
    text = Path(path).read_text()
    doc = yaml.safe_load(text)
    spec = DatasetSpec.from_dict({**doc.get("dataset", {}), **(dataset or {})}).validate()
    cfg = load_config_text(text)
    if train_overrides:
        model = {**cfg.model, **train_overrides.pop("model", {})}
        cfg = TrainConfig.from_dict({**cfg.to_dict(), **train_overrides, "model": model}).validate()
    return generate(spec), cfg
