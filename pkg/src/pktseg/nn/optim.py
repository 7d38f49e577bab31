from __future__ import annotations

from dataclasses import dataclass

from ..errors import ValidationError


@dataclass
class OptimizerConfig:
    learning_rate: float = 0.02
    momentum: float = 0.9
    batch_size: int = 16
    epochs: int = 200

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValidationError("learning_rate must be > 0")
        if not 0 <= self.momentum < 1:
            raise ValidationError("momentum must lie in [0, 1)")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValidationError("batch_size must be >= 1 and epochs >= 0")


def sgd_momentum_step(params, cfg: OptimizerConfig) -> None:
    """Classic momentum: v <- mu*v + g; theta <- theta - lr*v. Clears gradients.

    ``params`` is one LayerParams or an iterable of them.
    """
    groups = [params] if hasattr(params, "velocity") else list(params)
    lr, mu = cfg.learning_rate, cfg.momentum
    for lp in groups:
        for name, t in lp.params.items():
            v = lp.velocity[name]
            v *= mu
            if t._grad is not None:
                v += t._grad
            t.values -= lr * v
            t.zero_grad()
