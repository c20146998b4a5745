"""Saliency-based adversarial training.

Each training input is pushed by ``epsilon0`` along a direction ``delta``
drawn per element: with probability ``alpha**t`` a random sign, otherwise the
negated (signed) saliency of the ground-truth class. Early in training the
perturbation is noise; it anneals towards the saliency direction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .attacks import AttackSpec, parse_epsilon, run_attack
from .data import Dataset
from .errors import ConfigError, MissingArtifactError
from .saliency import SaliencyMap, binarize
from .training import Step, TrainConfig, fit

DEFAULT_ALPHA = 0.6 ** (1 / 10)
DEFAULT_EPSILON0 = 8 / 255


@dataclass
class SatSchedule:
    alpha: float = DEFAULT_ALPHA
    epsilon0: float = DEFAULT_EPSILON0
    time_unit: str = "epoch"
    current_t: int = 0

    def __post_init__(self):
        self.epsilon0 = parse_epsilon(self.epsilon0)
        if not 0 < self.alpha < 1:
            raise ConfigError("alpha must lie in (0, 1)")
        if self.epsilon0 < 0:
            raise ConfigError("epsilon0 must be >= 0")
        if self.time_unit not in ("epoch", "step"):
            raise ConfigError("time_unit must be 'epoch' or 'step'")
        if self.current_t < 0:
            raise ConfigError("current_t must be >= 0")

    @classmethod
    def from_alpha10(cls, alpha10: float, **kwargs) -> SatSchedule:
        """Build from ``alpha**10``, the parameterisation used for sweeps."""
        return cls(alpha=float(alpha10) ** 0.1, **kwargs)

    def random_probability(self, t: int | None = None) -> float:
        return self.alpha ** (self.current_t if t is None else t)


@dataclass
class SatDelta:
    delta: torch.Tensor  # entries in {-1, 0, +1}
    mask: torch.Tensor  # True where the entry came from the random branch


@dataclass
class HybridPolicy:
    partner: str = "pgd"
    sat_probability: float = 0.5
    granularity: str = "per_batch"

    def __post_init__(self):
        if self.partner not in ("pgd", "trades"):
            raise ConfigError("hybrid partner must be 'pgd' or 'trades'")
        if not 0 <= self.sat_probability <= 1:
            raise ConfigError("sat_probability must lie in [0, 1]")
        if self.granularity != "per_batch":
            raise ConfigError("only per_batch mixing is supported")


def _signed_values(saliency) -> torch.Tensor:
    if isinstance(saliency, SaliencyMap):
        if saliency.kind != "signed":
            raise ValueError("sat_delta needs a signed saliency map; binarize it first")
        return torch.from_numpy(saliency.values)
    s = torch.as_tensor(saliency)
    if not ((s == 1) | (s == 0) | (s == -1)).all():
        raise ValueError("sat_delta needs saliency values in {-1, 0, +1}")
    return s


def _mix(s: torch.Tensor, p: float, gen: torch.Generator) -> SatDelta:
    mask = torch.rand(s.shape, generator=gen, dtype=torch.float64) < p
    z = torch.randint(0, 2, s.shape, generator=gen, dtype=torch.int8).to(s.dtype) * 2 - 1
    return SatDelta(torch.where(mask, z, -s), mask)


def sat_delta(saliency, schedule: SatSchedule, rng=0, t: int | None = None) -> SatDelta:
    """Per-element mixture of random signs and the negated saliency.

    ``rng`` is a seed or a ``torch.Generator``; ``t`` defaults to
    ``schedule.current_t``.
    """
    s = _signed_values(saliency)
    gen = rng if isinstance(rng, torch.Generator) else torch.Generator().manual_seed(int(rng))
    return _mix(s, schedule.random_probability(t), gen)


def sat_perturb(x: torch.Tensor, delta, epsilon0: float) -> torch.Tensor:
    d = delta.delta if isinstance(delta, SatDelta) else torch.as_tensor(delta)
    if d.shape != x.shape:
        raise ValueError(f"delta shape {tuple(d.shape)} != input shape {tuple(x.shape)}")
    return torch.clamp(x + epsilon0 * d.to(x.dtype), 0.0, 1.0)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def _load_saliency(store, dataset: Dataset, saliency_mode: str) -> torch.Tensor:
    """Read every map once; returns a [N, C, H, W] tensor aligned with the dataset."""
    missing = [sid for sid in dataset.sample_ids if not _has(store, sid)]
    if missing:
        raise MissingArtifactError(
            f"saliency store lacks {len(missing)} of {len(dataset)} samples (e.g. {missing[0]!r})")
    maps = [store.get(sid) for sid in dataset.sample_ids]
    values = torch.from_numpy(np.stack([m.values for m in maps]).astype(np.float32))
    if saliency_mode == "sign":
        if not all(m.kind == "signed" for m in maps):
            values = binarize(values, "sign")
    elif saliency_mode == "raw":
        # scale each map into [-1, 1] so the step stays within epsilon0
        scale = values.flatten(1).abs().amax(1).clamp_min(1e-12)
        values = values / scale.view(-1, 1, 1, 1)
    else:
        raise ConfigError(f"saliency_mode must be 'sign' or 'raw', got {saliency_mode!r}")
    return values


def _has(store, sid):
    if hasattr(store, "choice"):
        return store.covers([sid])
    return sid in store


def _sat_step(dataset, store, schedule: SatSchedule, saliency_mode: str):
    values = _load_saliency(store, dataset, saliency_mode)

    def step(model, x, y, ids, ctx):
        idx = torch.tensor([dataset.index_of(sid) for sid in ids])
        s = values[idx]
        t = schedule.current_t + (ctx["epoch"] if schedule.time_unit == "epoch" else ctx["global_step"])
        d = _mix(s, schedule.random_probability(t), ctx["sat"])
        x_in = sat_perturb(x, d.delta.to(x.dtype), schedule.epsilon0)
        return Step(x_in, "sat", random_count=int(d.mask.sum()), element_count=d.mask.numel())
    return step


def sat_train(model, dataset: Dataset, store, schedule: SatSchedule, config: TrainConfig,
              saliency_mode: str = "sign"):
    """Train with SAT perturbations built from ``store`` (a SaliencyStore or
    EnsembleSelector). ``config.mode`` is ignored."""
    return fit(model, dataset, config, _sat_step(dataset, store, schedule, saliency_mode))


def hybrid_train(model, dataset: Dataset, store, schedule: SatSchedule, policy: HybridPolicy,
                 attack_spec: AttackSpec, config: TrainConfig, saliency_mode: str = "sign"):
    """Per batch, a Bernoulli(sat_probability) coin picks the SAT perturbation
    or the partner attack (PGD with cross-entropy, or TRADES with its hybrid loss)."""
    if attack_spec.family != policy.partner:
        raise ConfigError(f"partner {policy.partner} needs a {policy.partner} attack spec")
    sat = _sat_step(dataset, store, schedule, saliency_mode)

    def step(model, x, y, ids, ctx):
        if torch.rand((), generator=ctx["coin"]).item() < policy.sat_probability:
            return sat(model, x, y, ids, ctx)
        res = run_attack(model, x, y, attack_spec, generator=ctx["noise"])
        if attack_spec.family == "trades":
            return Step(x, "trades", trades_adv=res.x_adv)
        return Step(res.x_adv, attack_spec.family)

    return fit(model, dataset, config, step)
