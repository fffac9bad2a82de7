"""Test-time evasion attacks under an L-infinity budget.

All three attacks share one iterative engine: optionally start from a
random point inside the epsilon ball, then repeatedly step along the
sign of the input gradient of the loss, projecting back onto the ball
and into the valid pixel range after every step.  The single-step
attack is the engine with one iteration, step size epsilon and no
random start; the iterative variants differ only in iteration count,
step size and whether the start point is randomized.

Attacks are untargeted: they ascend the loss of the true label.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .model import ModelArchitecture, ModelWeights, input_gradient

ATTACK_KINDS = ("fgsm", "bim", "pgd")


@dataclass(frozen=True)
class AttackConfig:
    """Resolved attack settings.

    Construction normalizes the fields per attack kind: fgsm forces a
    single iteration with step size epsilon and no random start; bim
    defaults to 10 iterations with no random start; pgd defaults to 10
    iterations with a random start inside the budget ball.  A step size
    left unset defaults to epsilon / iterations (or 1 when epsilon is
    0, where any step collapses under the zero-radius projection).
    """

    kind: str
    epsilon: float
    alpha: Optional[float] = None
    iterations: Optional[int] = None
    random_init: Optional[bool] = None
    pixel_min: float = 0.0
    pixel_max: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ValueError(
                f"unknown attack kind {self.kind!r}, expected one of {ATTACK_KINDS}"
            )
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be non-negative, got {self.epsilon}")
        if not self.pixel_min < self.pixel_max:
            raise ValueError(
                f"pixel_min must be below pixel_max, got "
                f"[{self.pixel_min}, {self.pixel_max}]"
            )
        set_field = object.__setattr__
        if self.kind == "fgsm":
            if self.iterations not in (None, 1):
                raise ValueError("fgsm takes exactly one iteration")
            set_field(self, "iterations", 1)
            set_field(self, "alpha", self.epsilon)
            set_field(self, "random_init", False)
        else:
            if self.iterations is None:
                set_field(self, "iterations", 10)
            if self.iterations < 1:
                raise ValueError(f"iterations must be positive, got {self.iterations}")
            if self.alpha is None:
                set_field(self, "alpha",
                          self.epsilon / self.iterations if self.epsilon > 0 else 1.0)
            if self.alpha <= 0:
                raise ValueError(
                    f"alpha must be positive for {self.kind}, got {self.alpha}"
                )
            if self.kind == "bim":
                set_field(self, "random_init", False)
            elif self.random_init is None:
                set_field(self, "random_init", True)


@dataclass
class AdversarialBatch:
    """Clean/perturbed sample pairs produced by one attack run.

    ``sample_ids`` identify samples across evaluations of the same
    batch on different models.  ``wall_time_s`` covers the perturbation
    loop only, not the later metric evaluations.
    """

    clean: np.ndarray
    perturbed: np.ndarray
    labels: np.ndarray
    config: AttackConfig
    wall_time_s: float
    sample_ids: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.sample_ids is None:
            self.sample_ids = np.arange(self.clean.shape[0])
        if self.perturbed.shape != self.clean.shape:
            raise ValueError("perturbed batch shape differs from clean batch")
        if self.labels.shape != (self.clean.shape[0],):
            raise ValueError("labels do not match batch size")

    def __len__(self) -> int:
        return self.clean.shape[0]

    def max_deviation(self) -> float:
        if len(self) == 0:
            return 0.0
        return float(np.abs(self.perturbed - self.clean).max())


class BudgetViolationError(RuntimeError):
    """An attack produced a perturbation outside its stated budget."""


def project_linf(x: np.ndarray, anchor: np.ndarray,
                 epsilon: float) -> np.ndarray:
    """Project x onto the L-infinity ball of radius epsilon around anchor."""
    if epsilon < 0:
        raise ValueError(f"epsilon must be non-negative, got {epsilon}")
    return np.clip(x, anchor - epsilon, anchor + epsilon)


def _check_budget(batch: AdversarialBatch) -> None:
    # Defensive invariant: every emitted batch satisfies its own budget.
    slack = 1e-9
    if batch.max_deviation() > batch.config.epsilon + slack:
        raise BudgetViolationError(
            f"max deviation {batch.max_deviation()} exceeds epsilon "
            f"{batch.config.epsilon}"
        )
    lo, hi = batch.config.pixel_min, batch.config.pixel_max
    if len(batch) and (batch.perturbed.min() < lo - slack
                       or batch.perturbed.max() > hi + slack):
        raise BudgetViolationError(f"perturbed pixels leave [{lo}, {hi}]")


def run_attack(
    arch: ModelArchitecture,
    weights: ModelWeights,
    images,
    labels,
    config: AttackConfig,
    sample_ids: Optional[np.ndarray] = None,
) -> AdversarialBatch:
    """Perturb a batch against one model under the configured budget.

    The input arrays are never modified.  The run is deterministic in
    (weights, images, labels, config): randomized starts draw from a
    generator seeded by ``config.seed`` alone.
    """
    clean = np.array(images, dtype=np.float64, copy=True)
    y = np.asarray(labels)
    lo, hi = config.pixel_min, config.pixel_max
    start = time.perf_counter()
    x = clean.copy()
    if config.random_init and config.epsilon > 0:
        rng = np.random.default_rng(config.seed)
        x = x + rng.uniform(-config.epsilon, config.epsilon, size=x.shape)
        x = np.clip(x, lo, hi)
    for _ in range(config.iterations):
        grad = input_gradient(arch, weights, x, y)
        x = x + config.alpha * np.sign(grad)
        x = project_linf(x, clean, config.epsilon)
        x = np.clip(x, lo, hi)
    wall = time.perf_counter() - start
    batch = AdversarialBatch(
        clean=clean, perturbed=x, labels=y, config=config, wall_time_s=wall,
        sample_ids=(np.asarray(sample_ids) if sample_ids is not None else None),
    )
    _check_budget(batch)
    return batch


def fgsm(arch, weights, images, labels, epsilon: float,
         **config_kwargs) -> AdversarialBatch:
    """Single step of size epsilon along the gradient sign."""
    config = AttackConfig(kind="fgsm", epsilon=epsilon, **config_kwargs)
    return run_attack(arch, weights, images, labels, config)


def bim(arch, weights, images, labels, epsilon: float,
        alpha: Optional[float] = None, iterations: Optional[int] = None,
        **config_kwargs) -> AdversarialBatch:
    """Iterated sign steps starting from the clean input."""
    config = AttackConfig(kind="bim", epsilon=epsilon, alpha=alpha,
                          iterations=iterations, **config_kwargs)
    return run_attack(arch, weights, images, labels, config)


def pgd(arch, weights, images, labels, epsilon: float,
        alpha: Optional[float] = None, iterations: Optional[int] = None,
        random_init: bool = True, seed: int = 0,
        **config_kwargs) -> AdversarialBatch:
    """Iterated sign steps from a random point inside the budget ball."""
    config = AttackConfig(kind="pgd", epsilon=epsilon, alpha=alpha,
                          iterations=iterations, random_init=random_init,
                          seed=seed, **config_kwargs)
    return run_attack(arch, weights, images, labels, config)
