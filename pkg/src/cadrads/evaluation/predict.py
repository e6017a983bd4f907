from __future__ import annotations

import numpy as np
import torch

from ..dataset import num_classes
from ..errors import ShapeMismatch
from .metrics import PredictionSet


def predict(model, samples, task: str, batch: int = 64) -> PredictionSet:
    """Eval-mode softmax probabilities for stacked samples."""
    from ..training import predict_logits, stack_samples

    x, y = stack_samples(samples, task)
    logits, _ = predict_logits(model, x, batch)
    k = num_classes(task)
    if len(samples) and logits.shape[1] != k:
        raise ShapeMismatch(f"model head has {logits.shape[1]} outputs but the {task} task needs {k}",
                            stage="evaluation")
    probs = torch.softmax(logits.double(), dim=1).numpy() if len(samples) else np.zeros((0, k))
    return PredictionSet([s.patient_id for s in samples], [s.view for s in samples], probs, y, task)
