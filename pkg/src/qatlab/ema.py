"""Exponential-moving-average shadows for latent weights and scales.

Shadows trail every trainable parameter, including quantizer step sizes.
The decay is held at zero for a short warmup (shadow = live copy), then
constant, so early noisy iterates never pollute the average.  Batch-norm
running statistics keep their own momentum averaging and are not shadowed
here.
"""

from dataclasses import dataclass, field

import numpy as np


@dataclass
class EMAState:
    alpha: float
    warmup_iters: int = 0
    iter: int = 0
    shadows: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.alpha < 1.0:
            raise ValueError(f"decay must be in [0, 1), got {self.alpha}")
        if self.warmup_iters < 0:
            raise ValueError("warmup_iters must be >= 0")

    @property
    def effective_alpha(self) -> float:
        return 0.0 if self.iter < self.warmup_iters else self.alpha


def ema_update(state: EMAState, live: dict) -> EMAState:
    """Fold one iteration's live parameters into the shadows.

    Call after every optimizer step.  The first call initializes the shadow
    set; later calls must present the same parameter names and shapes.
    During warmup the shadow is a plain copy, so it tracks live bit for bit.
    """
    a = state.effective_alpha
    for name, p in live.items():
        p = np.asarray(p)
        sh = state.shadows.get(name)
        if sh is None:
            if state.iter > 0:
                raise RuntimeError(f"parameter {name!r} appeared mid-run")
            state.shadows[name] = p.copy()
            continue
        if sh.shape != p.shape:
            raise RuntimeError(
                f"shadow shape {sh.shape} does not match live {p.shape} for {name!r}"
            )
        if a == 0.0:
            state.shadows[name] = p.copy()
        else:
            state.shadows[name] = a * sh + (1.0 - a) * p
    state.iter += 1
    return state


def materialize_ema(net, state: EMAState):
    """Return a copy of `net` with every parameter replaced by its shadow.

    `net` must expose copy() and parameters() -> name->array views.  The live
    network is left untouched.
    """
    out = net.copy()
    params = out.parameters()
    for name in params:
        if name not in state.shadows:
            raise RuntimeError(f"no shadow recorded for parameter {name!r}")
    for name, view in params.items():
        view[...] = state.shadows[name]
    return out
