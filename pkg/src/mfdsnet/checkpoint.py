"""Checkpoint container: named tensors plus a JSON metadata record.

The file is a safetensors archive.  Model parameters and buffers are stored
under their dotted ``state_dict`` names; optional optimizer moments live
under ``optimizer.<index>.<slot>``.  The string metadata entry ``mfdsnet``
holds the JSON record (model config, supervision config, epoch, best F1,
whether the model is folded).
"""
import json
from dataclasses import asdict, fields

import torch
from safetensors import safe_open
from safetensors.torch import save_file

from .losses import SupervisionConfig
from .network import MFDSNet, ModelConfig, fold_model

META_KEY = "mfdsnet"
FORMAT_VERSION = 1


def _plain(t):
    t = t.detach().cpu()
    if t.is_floating_point():
        t = t.to(torch.float32)
    return t.contiguous()


def model_config_from_dict(d) -> ModelConfig:
    known = {f.name for f in fields(ModelConfig)}
    d = {k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items() if k in known}
    return ModelConfig(**d)


def save_checkpoint(path, model: MFDSNet, supervision: SupervisionConfig = None, epoch=0,
                    best_f1=None, optimizer=None, extra=None):
    tensors = {k: _plain(v) for k, v in model.state_dict().items()}
    meta = {
        "format_version": FORMAT_VERSION,
        "model_config": asdict(model.config),
        "supervision": asdict(supervision) if supervision is not None else None,
        "epoch": epoch,
        "best_f1": best_f1,
        "folded": bool(model.folded),
        "optimizer_steps": None,
    }
    if optimizer is not None:
        state = optimizer.state_dict()
        steps = {}
        for idx, slot in state["state"].items():
            for name, value in slot.items():
                if name == "step":
                    steps[str(idx)] = float(value)
                else:
                    tensors[f"optimizer.{idx}.{name}"] = _plain(value)
        meta["optimizer_steps"] = steps
    if extra:
        meta.update(extra)
    save_file(tensors, str(path), metadata={META_KEY: json.dumps(meta, sort_keys=True)})


def read_checkpoint(path):
    """Return (tensors, metadata) without building a model."""
    tensors = {}
    with safe_open(str(path), framework="pt") as fh:
        meta = json.loads(fh.metadata()[META_KEY])
        for k in fh.keys():
            tensors[k] = fh.get_tensor(k)
    return tensors, meta


def load_checkpoint(path, optimizer_factory=None):
    """Rebuild the model (folded if the checkpoint was folded).

    Returns ``(model, meta, optimizer)``; the optimizer is only rebuilt when
    ``optimizer_factory`` is given and the file carries optimizer state.
    """
    tensors, meta = read_checkpoint(path)
    model = MFDSNet(model_config_from_dict(meta["model_config"]))
    if meta.get("folded"):
        fold_model(model)
    model_state = {k: v for k, v in tensors.items() if not k.startswith("optimizer.")}
    model.load_state_dict(model_state, strict=True)
    optimizer = None
    if optimizer_factory is not None:
        optimizer = optimizer_factory(model.parameters())
        steps = meta.get("optimizer_steps")
        if steps:
            state = optimizer.state_dict()
            for idx, step in steps.items():
                slot = {"step": torch.tensor(step)}
                prefix = f"optimizer.{idx}."
                for k, v in tensors.items():
                    if k.startswith(prefix):
                        slot[k[len(prefix):]] = v.clone()
                state["state"][int(idx)] = slot
            optimizer.load_state_dict(state)
    return model, meta, optimizer


def supervision_from_meta(meta) -> SupervisionConfig:
    d = meta.get("supervision")
    return SupervisionConfig(**d) if d else SupervisionConfig()
