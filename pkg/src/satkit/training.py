"""Baseline training loops (standard, noise, PGD-AT, TRADES-AT and noise hybrids)
and the shared optimisation scaffolding that SAT reuses."""

from __future__ import annotations

import copy
import hashlib
import json
import time
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F

from .attacks import AttackSpec, kl_divergence, parse_epsilon, run_attack, uniform_noise
from .data import Dataset, batches
from .errors import ConfigError, NumericalError
from .models import Checkpoint, build_model, forward

MODES = ("standard", "uniform_noise", "pgd_at", "trades_at", "pgd_at_uniform", "trades_at_uniform")
ADVERSARIAL_MODES = MODES[2:]
DEFAULT_EPSILON = 8 / 255


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    learning_rate: float = 1e-3
    seed: int = 0
    mode: str = "standard"
    attack: AttackSpec | None = None
    trades_beta: float = 6.0
    noise_epsilon: float = DEFAULT_EPSILON
    track_accuracy: bool = True

    def __post_init__(self):
        if isinstance(self.attack, dict):
            self.attack = AttackSpec.from_dict(self.attack)
        self.noise_epsilon = parse_epsilon(self.noise_epsilon)
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")
        if self.mode not in MODES:
            raise ConfigError(f"unknown training mode {self.mode!r}; known: {MODES}")
        if self.mode in ADVERSARIAL_MODES:
            if self.attack is None:
                raise ConfigError(f"mode {self.mode} needs an attack spec")
            want = "trades" if self.mode.startswith("trades") else "pgd"
            if self.attack.family != want:
                raise ConfigError(f"mode {self.mode} needs a {want} attack, got {self.attack.family}")

    @property
    def loss(self) -> str:
        return "trades_hybrid" if self.mode.startswith("trades") else "cross_entropy"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["attack"] = self.attack.to_dict() if self.attack else None
        return d


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    clean_acc: float | None
    seconds: float
    steps: int
    branches: dict = field(default_factory=dict)
    random_fraction: float | None = None


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)
    branch_log: list[str] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)

    @property
    def losses(self) -> list[float]:
        return [r.loss for r in self.records]

    def to_jsonl(self, extra: dict | None = None) -> str:
        lines = []
        for r in self.records:
            row = asdict(r)
            if extra:
                row.update(extra)
            lines.append(json.dumps(row, sort_keys=True))
        return "\n".join(lines) + "\n"


def default_pgd(epsilon: float = DEFAULT_EPSILON, steps: int = 5) -> AttackSpec:
    return AttackSpec("pgd", epsilon, steps=steps)


def default_trades(epsilon: float = DEFAULT_EPSILON, steps: int = 5, beta: float = 6.0) -> AttackSpec:
    return AttackSpec("trades", epsilon, steps=steps, trades_beta=beta)


# ---------------------------------------------------------------------------
# Shared loop
# ---------------------------------------------------------------------------


def stream(seed: int, name: str) -> torch.Generator:
    """Independent, named random stream derived from the run seed."""
    digest = hashlib.sha256(f"{seed}/{name}".encode()).digest()
    return torch.Generator().manual_seed(int.from_bytes(digest[:8], "little") & (2**63 - 1))


@dataclass
class Step:
    """What a perturbation policy hands back for one batch."""

    inputs: torch.Tensor
    branch: str
    trades_adv: torch.Tensor | None = None  # set => TRADES hybrid loss
    random_count: int = 0
    element_count: int = 0


PerturbFn = Callable[[torch.nn.Module, torch.Tensor, torch.Tensor, list, dict], Step]


@torch.no_grad()
def accuracy(model, dataset: Dataset, batch_size: int = 512) -> float:
    correct = 0
    for x, y, _ in batches(dataset, batch_size, shuffle_seed=None):
        correct += (forward(model, x.to(_dtype(model))).argmax(1) == y).sum().item()
    return correct / len(dataset)


def _dtype(model):
    return next(model.parameters()).dtype


def fit(model, dataset: Dataset, config: TrainConfig, perturb: PerturbFn,
        on_epoch_start: Callable[[int, dict], None] | None = None) -> tuple:
    """Adam on the mean batch loss, one pass over ``dataset`` per epoch.

    ``perturb`` turns a clean batch into the training inputs; it receives a
    context dict holding the named random streams and the step counter.
    """
    if model.num_classes != dataset.num_classes:
        raise ConfigError(f"model head has {model.num_classes} classes, "
                          f"dataset has {dataset.num_classes}")
    dtype = _dtype(model)
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    ctx = {
        "coin": stream(config.seed, "coin"),
        "noise": stream(config.seed, "noise"),
        "sat": stream(config.seed, "sat"),
        "global_step": 0,
        "epoch": 0,
    }
    history = TrainHistory()
    for epoch in range(config.epochs):
        ctx["epoch"] = epoch
        if on_epoch_start is not None:
            on_epoch_start(epoch, ctx)
        total, n_seen, steps = 0.0, 0, 0
        branches: dict[str, int] = {}
        rand_count = elem_count = 0
        t0 = time.perf_counter()
        for x, y, ids in batches(dataset, config.batch_size, config.seed, epoch):
            x = x.to(dtype)
            step = perturb(model, x, y, ids, ctx)
            logits = model(step.inputs)
            if step.trades_adv is not None:
                loss = F.cross_entropy(logits, y) + config.trades_beta * kl_divergence(
                    logits, model(step.trades_adv)).mean()
            else:
                loss = F.cross_entropy(logits, y)
            if not torch.isfinite(loss):
                raise NumericalError(f"non-finite loss at epoch {epoch}, step {steps}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            total += loss.item() * len(y)
            n_seen += len(y)
            steps += 1
            ctx["global_step"] += 1
            branches[step.branch] = branches.get(step.branch, 0) + 1
            history.branch_log.append(step.branch)
            history.step_losses.append(loss.item())
            rand_count += step.random_count
            elem_count += step.element_count
        seconds = time.perf_counter() - t0
        acc = accuracy(model, dataset) if config.track_accuracy else None
        history.records.append(EpochRecord(
            epoch, total / n_seen, acc, seconds, steps, branches,
            rand_count / elem_count if elem_count else None))
    return model, history


# ---------------------------------------------------------------------------
# Baseline policies
# ---------------------------------------------------------------------------


def _noise_step(config):
    spec = AttackSpec("uniform", config.noise_epsilon)

    def step(model, x, y, ids, ctx):
        return Step(uniform_noise(x, spec, ctx["noise"]).x_adv, "uniform")
    return step


def _adversarial_step(config):
    spec = config.attack

    def step(model, x, y, ids, ctx):
        res = run_attack(model, x, y, spec, generator=ctx["noise"])
        if spec.family == "trades":
            return Step(x, "trades", trades_adv=res.x_adv)
        return Step(res.x_adv, spec.family)
    return step


def baseline_policy(config: TrainConfig) -> PerturbFn:
    mode = config.mode
    if mode == "standard":
        return lambda model, x, y, ids, ctx: Step(x, "clean")
    if mode == "uniform_noise":
        return _noise_step(config)
    adv = _adversarial_step(config)
    if mode in ("pgd_at", "trades_at"):
        return adv
    noise = _noise_step(config)

    def mixed(model, x, y, ids, ctx):
        # fair coin per batch between the adversarial example and uniform noise
        if torch.rand((), generator=ctx["coin"]).item() < 0.5:
            return adv(model, x, y, ids, ctx)
        return noise(model, x, y, ids, ctx)
    return mixed


def train(model, dataset: Dataset, config: TrainConfig):
    """Train ``model`` in place with one of the baseline modes."""
    return fit(model, dataset, config, baseline_policy(config))


def make_teacher(dataset: Dataset, arch: str = "mini_resnet", training: str = "std",
                 seed: int = 0, epochs: int = 30, batch_size: int = 64,
                 epsilon: float = DEFAULT_EPSILON, learning_rate: float = 1e-3,
                 arch_config: dict | None = None, **metadata) -> Checkpoint:
    """Train a saliency teacher: ``std`` = standard, ``adv`` = 5-step PGD-AT."""
    if training not in ("std", "adv"):
        raise ConfigError(f"teacher training must be 'std' or 'adv', got {training!r}")
    model = build_model(arch, dataset.image_shape, dataset.num_classes, seed=seed,
                        **(arch_config or {}))
    if training == "std":
        cfg = TrainConfig(epochs, batch_size, learning_rate, seed, "standard")
    else:
        cfg = TrainConfig(epochs, batch_size, learning_rate, seed, "pgd_at",
                          attack=default_pgd(epsilon))
    model, history = train(model, dataset, cfg)
    return Checkpoint.from_model(model, training, epochs=epochs, seed=seed,
                                 dataset=dataset.name, final_loss=history.losses[-1],
                                 **metadata)
