"""MaxViT classifier: configuration, layers, network and checkpoints."""

from .checkpoint import load_state, read_checkpoint, save_checkpoint
from .config import PRESETS, ModelConfig, preset
from .maxvit import ForwardOutput, MaxViT, backward, build_model, forward, parameter_count


def network_from_config(doc: dict):
    """Build a network from a serialized config (MaxViT or the baseline CNN)."""
    arch = doc.get("arch", "maxvit")
    if arch == "baseline_cnn":
        from ..evaluation.baseline import BaselineConfig, BaselineCNN
        return BaselineCNN(BaselineConfig.from_dict(doc))
    return MaxViT(ModelConfig.from_dict(doc))


def load_network(path):
    """Rebuild a network from a checkpoint file; returns ``(model, header)``."""
    header, tensors = read_checkpoint(path)
    model = network_from_config(header["config"])
    load_state(model, tensors)
    model.eval()
    return model, header


__all__ = [
    "ForwardOutput", "MaxViT", "ModelConfig", "PRESETS", "backward", "build_model", "forward",
    "load_network", "load_state", "network_from_config", "parameter_count", "preset",
    "read_checkpoint", "save_checkpoint",
]
