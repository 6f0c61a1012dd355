"""AdamW with decoupled weight decay, warmup-cosine schedule, layer-decayed
learning-rate scales.

Parameters live in ordered dicts of name -> Tensor; the optimizer walks them
in insertion order, so updates are deterministic.
"""

import math
import re

import numpy as np

from g2sd.tensor import Tensor


class AdamW:
    """Adam with bias-corrected moments and decoupled weight decay.

    One instance owns the moment state for one parameter set; ``step``
    applies updates in place of each tensor's ``data`` (the only sanctioned
    mutation of a Tensor). Parameters without an accumulated gradient are
    skipped.
    """

    def __init__(self, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        if not (0.0 <= betas[0] < 1.0 and 0.0 <= betas[1] < 1.0):
            raise ValueError(f"betas must lie in [0, 1), got {betas}")
        self.betas = (float(betas[0]), float(betas[1]))
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.t = 0
        self.state = {}

    def step(self, params: dict, lr: float, lr_scales: dict | None = None):
        if lr < 0:
            raise ValueError(f"lr must be non-negative, got {lr}")
        b1, b2 = self.betas
        self.t += 1
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in params.items():
            if not p.requires_grad or p.grad is None:
                continue
            g = p.grad
            m, v = self.state.get(name, (None, None))
            if m is None:
                m = np.zeros_like(p.data)
                v = np.zeros_like(p.data)
            m = b1 * m + (1.0 - b1) * g
            v = b2 * v + (1.0 - b2) * (g * g)
            self.state[name] = (m, v)
            step_lr = lr if lr_scales is None else lr * lr_scales.get(name, 1.0)
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data = p.data - step_lr * update


def cosine_schedule(step, total_steps, base_lr, warmup_steps=0, min_lr=0.0):
    """Linear warmup to ``base_lr`` then cosine decay to ``min_lr``.

    Warmup ramps over the first ``warmup_steps`` steps as (step+1)/warmup;
    past ``total_steps`` the schedule stays at ``min_lr``.
    """
    if total_steps < 1:
        raise ValueError("total_steps must be >= 1")
    if step < warmup_steps:
        return base_lr * (step + 1) / warmup_steps
    span = max(1, total_steps - warmup_steps)
    frac = min(1.0, (step - warmup_steps) / span)
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + math.cos(math.pi * frac))


_BLOCK_RE = re.compile(r"\.blocks\.(\d+)\.")
_INPUT_KEYS = ("patch_embed", "cls_token", "distill_token")


def parameter_depths(names, n_blocks):
    """Depth group per parameter name: patch embedding and input tokens at 0,
    encoder block i at i+1, everything downstream (final norm, heads) at
    n_blocks + 1."""
    depths = {}
    for name in names:
        m = _BLOCK_RE.search(name)
        if m is not None:
            depths[name] = int(m.group(1)) + 1
        elif any(key in name for key in _INPUT_KEYS):
            depths[name] = 0
        else:
            depths[name] = n_blocks + 1
    return depths


def layer_decay_scales(names, n_blocks, decay):
    """Per-parameter lr multipliers decay**(D+1-depth) with D = n_blocks.

    decay = 1 gives uniform scales; smaller values shrink learning rates
    geometrically toward the input end of the network.
    """
    if not 0.0 < decay <= 1.0:
        raise ValueError(f"layer decay must lie in (0, 1], got {decay}")
    top = n_blocks + 1
    return {name: decay ** (top - d) for name, d in parameter_depths(names, n_blocks).items()}
