"""Shared oracle helpers for the unit and acceptance suites."""

import copy

import numpy as np
import torch

from tabtarget.model import make_batch
from tabtarget.nn import make_optimizer
from tabtarget.train import accumulate_gradients

GOLDEN_AGE_EDGES = [18, 23, 27, 31, 35, 40, 45, 51, 58, 67, 87]

# (value, full, name + bin, name only) for each rendering of the Age example
GOLDEN_AGE = [
    (17, "Age: Lower than 18 (Quantile 0%)", "Age: Lower than 18", "Age: Numeric"),
    (20, "Age: 18–23 (Quantile 0–10%)", "Age: 18–23", "Age: Numeric"),
    (25, "Age: 23–27 (Quantile 10–20%)", "Age: 23–27", "Age: Numeric"),
    (29, "Age: 27–31 (Quantile 20–30%)", "Age: 27–31", "Age: Numeric"),
    (33, "Age: 31–35 (Quantile 30–40%)", "Age: 31–35", "Age: Numeric"),
    (38, "Age: 35–40 (Quantile 40–50%)", "Age: 35–40", "Age: Numeric"),
    (42, "Age: 40–45 (Quantile 50–60%)", "Age: 40–45", "Age: Numeric"),
    (48, "Age: 45–51 (Quantile 60–70%)", "Age: 45–51", "Age: Numeric"),
    (55, "Age: 51–58 (Quantile 70–80%)", "Age: 51–58", "Age: Numeric"),
    (63, "Age: 58–67 (Quantile 80–90%)", "Age: 58–67", "Age: Numeric"),
    (83, "Age: 67–87 (Quantile 90–100%)", "Age: 67–87", "Age: Numeric"),
    (93, "Age: Higher than 87 (Quantile 100%)", "Age: Higher than 87", "Age: Numeric"),
    (None, "Age: Unknown Value", "Age: Unknown Value", "Age: Unknown Value"),
]


def _double_batch(table, rows):
    b = make_batch(table, rows)
    b.numeric = b.numeric.double()
    return b


def accumulation_gap(model, table, rows, chunks: int, lr: float = 1e-3) -> tuple[float, float]:
    """Gradient and AdamW-update gaps between ``chunks`` accumulated mini-batches and one full batch.

    Both copies run in double precision and eval mode (no dropout). Each gap is the
    largest absolute difference over all parameters divided by the largest magnitude,
    so tensors whose true gradient is zero (key biases under softmax shift
    invariance) contribute round-off on the scale of the whole update.
    """
    rows = np.asarray(rows)
    if len(rows) % chunks:
        raise ValueError("rows must split into equal chunks")
    size = len(rows) // chunks
    grads, deltas = [], []
    for groups in (
        [_double_batch(table, rows[i : i + size]) for i in range(0, len(rows), size)],
        [_double_batch(table, rows)],
    ):
        m = copy.deepcopy(model).double().eval()
        m.use_cache = False
        params = [p for p in m.parameters() if p.requires_grad]
        before = [p.detach().clone() for p in params]
        opt = make_optimizer(params, lr, 0.001)
        opt.zero_grad(set_to_none=True)
        accumulate_gradients(m, groups)
        grads.append(torch.cat([(torch.zeros_like(p) if p.grad is None else p.grad).flatten() for p in params]))
        opt.step()
        deltas.append(torch.cat([(p.detach() - b).flatten() for p, b in zip(params, before)]))

    def gap(a, b):
        return (a - b).abs().max().item() / b.abs().max().item()

    return gap(*grads), gap(*deltas)
