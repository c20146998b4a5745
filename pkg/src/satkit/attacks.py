"""l-infinity perturbation generators: FGSM, PGD, uniform noise, TRADES and
the negative-saliency attack."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from fractions import Fraction

import torch
import torch.nn.functional as F

from .errors import ConfigError, NumericalError
from .models import forward, input_gradient

FAMILIES = ("fgsm", "pgd", "uniform", "trades", "saliency")
TRADES_START_NOISE = 1e-3


def parse_epsilon(value) -> float:
    """Accept floats or strings such as ``"8/255"``."""
    if isinstance(value, str):
        return float(Fraction(value.strip()))
    return float(value)


@dataclass
class AttackSpec:
    family: str
    epsilon: float
    steps: int = 1
    step_size: float | None = None
    trades_beta: float = 6.0
    seed: int = 0

    def __post_init__(self):
        self.epsilon = parse_epsilon(self.epsilon)
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown attack family {self.family!r}")
        if self.epsilon < 0:
            raise ConfigError("epsilon must be >= 0")
        if self.family in ("pgd", "trades"):
            if self.steps < 1:
                raise ConfigError(f"{self.family} needs steps >= 1")
            if self.step_size is None:
                self.step_size = self.epsilon / 4
            else:
                self.step_size = parse_epsilon(self.step_size)
                if self.step_size <= 0 and self.epsilon > 0:
                    raise ConfigError("step_size must be > 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> AttackSpec:
        return cls(**d)

    def label(self) -> str:
        return f"{self.family}-{self.steps}" if self.family in ("pgd", "trades") else self.family


@dataclass
class AttackResult:
    x_adv: torch.Tensor
    delta: torch.Tensor
    per_step_loss: list[float] = field(default_factory=list)


def _result(x, x_adv, losses=None):
    x_adv = x_adv.detach()
    return AttackResult(x_adv, x_adv - x, losses or [])


def project_linf(x_adv, x, epsilon):
    """Project onto the epsilon box around ``x`` intersected with [0, 1]."""
    return torch.clamp(torch.min(torch.max(x_adv, x - epsilon), x + epsilon), 0.0, 1.0)


def _require(spec, family):
    if spec.family != family:
        raise ConfigError(f"expected a {family} spec, got {spec.family}")


def fgsm(model, x, y, spec: AttackSpec) -> AttackResult:
    _require(spec, "fgsm")
    grad = input_gradient(model, x, labels=y)
    # torch.sign maps 0 to 0, so flat coordinates stay put
    return _result(x, torch.clamp(x + spec.epsilon * grad.sign(), 0.0, 1.0))


def pgd(model, x, y, spec: AttackSpec, x_init: torch.Tensor | None = None) -> AttackResult:
    """Iterated sign-gradient ascent on cross-entropy with projection after each step.

    Starts at ``x`` unless a warm start ``x_init`` (already inside the box) is given.
    """
    _require(spec, "pgd")
    x = x.detach()
    x_adv = x.clone() if x_init is None else project_linf(x_init.detach(), x, spec.epsilon)
    losses = []
    for _ in range(spec.steps):
        x_adv = x_adv.requires_grad_(True)
        with torch.enable_grad():
            logits = forward(model, x_adv)
            loss = F.cross_entropy(logits, y, reduction="sum")
            (grad,) = torch.autograd.grad(loss, x_adv)
        if not torch.isfinite(grad).all():
            raise NumericalError("non-finite gradient during PGD")
        losses.append(loss.item() / len(x))
        x_adv = project_linf(x_adv.detach() + spec.step_size * grad.sign(), x, spec.epsilon)
    return _result(x, x_adv, losses)


def _unit_noise(x, spec, generator, unit_noise):
    """U[-1, 1] noise shaped like ``x``, from ``unit_noise`` if supplied."""
    if unit_noise is not None:
        return unit_noise.to(x.dtype)
    if generator is None:
        generator = torch.Generator().manual_seed(spec.seed)
    return torch.rand(x.shape, generator=generator, dtype=x.dtype) * 2 - 1


def uniform_noise(x, spec: AttackSpec, generator: torch.Generator | None = None,
                  unit_noise: torch.Tensor | None = None) -> AttackResult:
    _require(spec, "uniform")
    u = _unit_noise(x, spec, generator, unit_noise)
    return _result(x, torch.clamp(x + spec.epsilon * u, 0.0, 1.0))


def saliency_attack(x, spec: AttackSpec, *, saliency=None, model=None, labels=None,
                    method: str = "gradient") -> AttackResult:
    """Step against the true-class saliency: ``clip(x - eps * sign(s))``.

    ``saliency`` may be a tensor/array/SaliencyMap batch aligned with ``x``;
    otherwise ``s`` is computed from ``model`` for ``labels`` (or the predicted
    class when no labels are given) with the named saliency ``method``.
    """
    _require(spec, "saliency")
    if saliency is None:
        if model is None:
            raise ValueError("saliency_attack needs a saliency map or a model")
        if labels is None:
            with torch.no_grad():
                labels = forward(model, x).argmax(1)
        from .saliency import compute_saliency
        s = compute_saliency(method, model, x, labels)
    else:
        values = saliency if isinstance(saliency, torch.Tensor) else getattr(saliency, "values", saliency)
        s = torch.as_tensor(values, dtype=x.dtype)
        if s.shape != x.shape:
            s = s.reshape(x.shape)
    return _result(x, torch.clamp(x - spec.epsilon * s.sign(), 0.0, 1.0))


def kl_divergence(p_logits, q_logits) -> torch.Tensor:
    """Per-sample KL(softmax(p) || softmax(q)) in nats."""
    log_p = F.log_softmax(p_logits, dim=1)
    log_q = F.log_softmax(q_logits, dim=1)
    return (log_p.exp() * (log_p - log_q)).sum(1)


def trades_perturbation(model, x, spec: AttackSpec, generator: torch.Generator | None = None,
                        unit_noise: torch.Tensor | None = None) -> AttackResult:
    """Sign-gradient ascent on KL(f(x) || f(x_adv)) from a slightly noisy start."""
    _require(spec, "trades")
    x = x.detach()
    with torch.no_grad():
        p_logits = forward(model, x)
    noise = _unit_noise(x, spec, generator, unit_noise) * TRADES_START_NOISE
    x_adv = project_linf(x + noise, x, spec.epsilon)
    losses = []
    for _ in range(spec.steps):
        x_adv = x_adv.requires_grad_(True)
        with torch.enable_grad():
            kl = kl_divergence(p_logits, forward(model, x_adv)).sum()
            (grad,) = torch.autograd.grad(kl, x_adv)
        if not torch.isfinite(kl) or not torch.isfinite(grad).all():
            raise NumericalError("non-finite KL during TRADES perturbation")
        losses.append(kl.item() / len(x))
        x_adv = project_linf(x_adv.detach() + spec.step_size * grad.sign(), x, spec.epsilon)
    return _result(x, x_adv, losses)


def run_attack(model, x, y, spec: AttackSpec, generator=None, x_init=None,
               unit_noise=None) -> AttackResult:
    """Dispatch on ``spec.family``."""
    if spec.family == "fgsm":
        return fgsm(model, x, y, spec)
    if spec.family == "pgd":
        return pgd(model, x, y, spec, x_init=x_init)
    if spec.family == "uniform":
        return uniform_noise(x, spec, generator, unit_noise)
    if spec.family == "trades":
        return trades_perturbation(model, x, spec, generator, unit_noise)
    return saliency_attack(x, spec, model=model, labels=y)
