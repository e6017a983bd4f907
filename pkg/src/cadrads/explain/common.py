import torch


def scores(model, x: torch.Tensor) -> torch.Tensor:
    """Logits from a network returning ``ForwardOutput`` or a plain tensor."""
    dtype = next(model.parameters()).dtype
    out = model(x.to(dtype))
    return out.logits if hasattr(out, "logits") else out
