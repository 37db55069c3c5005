"""Max-norm bounded attacks on batches of ``[0, 1]`` images.

All attacks return arrays with ``|x_adv - x| <= eps`` elementwise and values
in ``[0, 1]``. ``sign(0) = 0``, so pixels with zero gradient do not move.
Random streams are per image, seeded from ``(seed, image index)``, so a
result does not depend on batch composition or order.
"""

from dataclasses import asdict, dataclass

import numpy as np

from .validation import check_images

__all__ = [
    "ATTACK_KINDS",
    "AttackConfig",
    "fgsm",
    "pgd",
    "momentum_attack",
    "random_sign_perturbation",
    "run_attack",
]

ATTACK_KINDS = ("fgsm", "pgd", "momentum", "random_sign")
DEFAULT_STEPS = 10
DEFAULT_MU = 1.0


def _check_eps(eps, allow_zero=False):
    if not ((0 <= eps if allow_zero else 0 < eps) and eps <= 1):
        raise ValueError(f"eps must lie in {'[0' if allow_zero else '(0'}, 1], got {eps}")


def _check_steps(steps):
    if int(steps) != steps or steps < 1:
        raise ValueError(f"steps must be a positive integer, got {steps}")
    return int(steps)


def _project(x, x0, eps):
    return np.clip(np.clip(x, x0 - eps, x0 + eps), 0.0, 1.0)


def _rng(seed, index):
    return np.random.default_rng([int(seed), int(index)])


def fgsm(model, X, y, eps, steps=DEFAULT_STEPS):
    """Iterative fast gradient sign method with step ``eps / steps``."""
    _check_eps(eps)
    steps = _check_steps(steps)
    x0 = check_images(X)
    x = x0.copy()
    for _ in range(steps):
        g = model.input_gradient(x, y)
        x = _project(x + (eps / steps) * np.sign(g), x0, eps)
    return x


def pgd(model, X, y, eps, steps=DEFAULT_STEPS, step_size=None, seed=0, random_start=True):
    """Projected sign-gradient ascent from a random start in the ``eps`` ball.

    ``step_size`` defaults to ``eps / 4``.
    """
    _check_eps(eps)
    steps = _check_steps(steps)
    step_size = eps / 4 if step_size is None else step_size
    if not 0 < step_size <= eps:
        raise ValueError(f"step_size must lie in (0, eps], got {step_size}")
    x0 = check_images(X)
    if random_start:
        noise = np.stack([_rng(seed, i).uniform(-eps, eps, x0.shape[1:]) for i in range(len(x0))])
        x = _project(x0 + noise, x0, eps)
    else:
        x = x0.copy()
    for _ in range(steps):
        g = model.input_gradient(x, y)
        x = _project(x + step_size * np.sign(g), x0, eps)
    return x


def momentum_attack(model, X, y, eps, steps=DEFAULT_STEPS, mu=DEFAULT_MU):
    """Momentum iterative sign attack.

    The accumulator is ``g <- mu g + grad / ||grad||_1`` per image; an image
    whose gradient has zero L1 norm adds nothing that step.
    """
    _check_eps(eps)
    steps = _check_steps(steps)
    if mu < 0:
        raise ValueError(f"mu must be nonnegative, got {mu}")
    x0 = check_images(X)
    x = x0.copy()
    acc = np.zeros_like(x0)
    axes = tuple(range(1, x0.ndim))
    for _ in range(steps):
        grad = model.input_gradient(x, y)
        l1 = np.sum(np.abs(grad), axis=axes, keepdims=True)
        with np.errstate(invalid="ignore", divide="ignore"):
            step = np.where(l1 > 0, grad / l1, 0.0)
        acc = mu * acc + step
        x = _project(x + (eps / steps) * np.sign(acc), x0, eps)
    return x


def random_sign_perturbation(X, eps, seed=0):
    """Shift each pixel by ``+eps`` or ``-eps`` at random, then clip to ``[0, 1]``."""
    _check_eps(eps, allow_zero=True)
    x0 = check_images(X)
    signs = np.stack([_rng(seed, i).choice([-1.0, 1.0], x0.shape[1:]) for i in range(len(x0))])
    return np.clip(x0 + eps * signs, 0.0, 1.0)


@dataclass(frozen=True)
class AttackConfig:
    """Resolved attack settings; ``step_size=None`` means ``eps / 4`` for PGD."""

    kind: str
    epsilon: float
    steps: int = DEFAULT_STEPS
    step_size: float = None
    mu: float = DEFAULT_MU
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}; choose from {ATTACK_KINDS}")
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        _check_steps(self.steps)

    def resolved(self):
        """Settings as recorded in run metadata, defaults filled in."""
        d = asdict(self)
        if self.kind == "pgd" and self.step_size is None:
            d["step_size"] = self.epsilon / 4
        return d


def run_attack(model, X, y, config):
    """Dispatch on ``config.kind``. ``model`` and ``y`` are unused for random_sign."""
    c = config
    if c.kind == "fgsm":
        return fgsm(model, X, y, c.epsilon, c.steps)
    if c.kind == "pgd":
        return pgd(model, X, y, c.epsilon, c.steps, c.step_size, c.seed)
    if c.kind == "momentum":
        return momentum_attack(model, X, y, c.epsilon, c.steps, c.mu)
    return random_sign_perturbation(X, c.epsilon, c.seed)
