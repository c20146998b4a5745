"""Robust-accuracy grids, the linearized-robustness probe and epoch timing."""

from __future__ import annotations

import copy
import csv
import io
import json
import statistics
from dataclasses import dataclass, field

import numpy as np
import torch

from .attacks import AttackSpec, run_attack
from .data import Dataset
from .models import forward, input_gradient
from .training import MODES, TrainConfig, _dtype, accuracy


def _sample_generator(seed: int, index: int) -> torch.Generator:
    return torch.Generator().manual_seed(seed * 1_000_003 + index)


def _attack_batch(model, x, y, spec: AttackSpec, indices, x_init=None):
    """Run ``spec`` on a batch; seeded families draw per-sample so that the
    result for a sample does not depend on how the data was batched."""
    noise = None
    if spec.family in ("uniform", "trades"):
        noise = torch.stack([
            torch.rand(x.shape[1:], generator=_sample_generator(spec.seed, int(i)), dtype=x.dtype) * 2 - 1
            for i in indices])
    return run_attack(model, x, y, spec, x_init=x_init, unit_noise=noise).x_adv


def _iterate(dataset: Dataset, batch_size: int, dtype):
    images, labels = dataset.tensors()
    for start in range(0, len(dataset), batch_size):
        sl = slice(start, start + batch_size)
        yield np.arange(start, min(start + batch_size, len(dataset))), images[sl].to(dtype), labels[sl]


def robust_accuracy(model, dataset: Dataset, spec: AttackSpec, batch_size: int = 256) -> float:
    """Fraction of samples still classified correctly after ``spec``."""
    dtype = _dtype(model)
    correct = 0
    for idx, x, y in _iterate(dataset, batch_size, dtype):
        x_adv = _attack_batch(model, x, y, spec, idx)
        with torch.no_grad():
            correct += (forward(model, x_adv).argmax(1) == y).sum().item()
    return correct / len(dataset)


def _nested_accuracies(model, dataset, specs, batch_size):
    """Accuracies for specs sharing a family/steps, in increasing epsilon.

    A sample counts as broken at budget eps if any attack at a budget <= eps
    broke it (those examples are admissible at eps too); PGD additionally
    warm-starts from the previous budget's example. The curve is therefore
    non-increasing in eps.
    """
    dtype = _dtype(model)
    order = sorted(range(len(specs)), key=lambda i: specs[i].epsilon)
    results = [0.0] * len(specs)
    still = None
    prev_adv = None
    for i in order:
        spec = specs[i]
        survived, advs = [], []
        for b, (idx, x, y) in enumerate(_iterate(dataset, batch_size, dtype)):
            init = prev_adv[b] if (prev_adv is not None and spec.family == "pgd") else None
            x_adv = _attack_batch(model, x, y, spec, idx, x_init=init)
            advs.append(x_adv)
            with torch.no_grad():
                survived.append(forward(model, x_adv).argmax(1) == y)
        ok = torch.cat(survived)
        still = ok if still is None else (still & ok)
        prev_adv = advs
        results[i] = still.float().mean().item()
    return results


@dataclass
class EvalReport:
    model_id: str
    clean_accuracy: float
    grid: dict = field(default_factory=dict)  # (family, epsilon, steps) -> accuracy
    timing: dict = field(default_factory=dict)
    n_eval: int = 0
    seed: int = 0
    metadata: dict = field(default_factory=dict)

    def rows(self) -> list[dict]:
        return [{"attack": fam, "steps": steps, "epsilon": eps, "accuracy": acc}
                for (fam, eps, steps), acc in sorted(self.grid.items())]

    def to_json(self) -> str:
        return json.dumps({
            "model_id": self.model_id,
            "clean_accuracy": self.clean_accuracy,
            "grid": self.rows(),
            "timing": self.timing,
            "n_eval": self.n_eval,
            "seed": self.seed,
            "metadata": self.metadata,
        }, indent=1, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=["attack", "steps", "epsilon", "accuracy"],
                                lineterminator="\n")
        writer.writeheader()
        writer.writerow({"attack": "clean", "steps": 0, "epsilon": 0.0, "accuracy": self.clean_accuracy})
        for row in self.rows():
            writer.writerow(row)
        return buf.getvalue()

    def accuracy(self, family: str, epsilon: float, steps: int | None = None) -> float:
        for (fam, eps, st), acc in self.grid.items():
            if fam == family and abs(eps - epsilon) < 1e-12 and (steps is None or st == steps):
                return acc
        raise KeyError((family, epsilon, steps))


def default_grid(seed: int = 0) -> list[AttackSpec]:
    specs = [AttackSpec("pgd", e / 255, steps=5, seed=seed) for e in (1, 2, 3, 4)]
    specs += [AttackSpec("saliency", e / 255, seed=seed) for e in (2, 4, 8, 16)]
    specs += [AttackSpec("uniform", e / 255, seed=seed) for e in (4, 8, 16, 32)]
    specs += [AttackSpec("trades", e / 255, steps=5, seed=seed) for e in (1, 2, 3, 4)]
    return specs


def eval_grid(model, dataset: Dataset, specs, model_id: str = "model", seed: int = 0,
              batch_size: int = 256, nested: bool = True) -> EvalReport:
    """Clean accuracy plus robust accuracy for every spec.

    With ``nested`` (default) specs that share family, steps and step-size rule
    are evaluated as one increasing-epsilon sweep (see ``_nested_accuracies``).
    """
    report = EvalReport(model_id, accuracy(model, dataset), n_eval=len(dataset), seed=seed)
    groups: dict[tuple, list[AttackSpec]] = {}
    for spec in specs:
        key = (spec.family, spec.steps if spec.family in ("pgd", "trades") else 1)
        groups.setdefault(key, []).append(spec)
    for (family, steps), group in groups.items():
        if nested:
            accs = _nested_accuracies(model, dataset, group, batch_size)
        else:
            accs = [robust_accuracy(model, dataset, s, batch_size) for s in group]
        for spec, acc in zip(group, accs):
            report.grid[(family, spec.epsilon, steps)] = acc
    return report


# ---------------------------------------------------------------------------
# Linearized robustness
# ---------------------------------------------------------------------------


@dataclass
class RobustnessProbe:
    rho: torch.Tensor  # [B]
    j_star: torch.Tensor  # [B]
    i_star: torch.Tensor  # [B]
    degenerate: torch.Tensor  # [B] bool, True where every rival had a zero gradient gap


def linearized_robustness(model, x: torch.Tensor) -> RobustnessProbe:
    """rho(x) = min_{j != i*} (f_i* - f_j) / ||grad_x (f_i* - f_j)||_2 with i* = argmax."""
    with torch.no_grad():
        logits = forward(model, x)
    i_star = logits.argmax(1)
    k = logits.shape[1]
    grads = torch.stack([input_gradient(model, x, class_index=c) for c in range(k)], 1)
    b = len(x)
    arange = torch.arange(b)
    gap = logits[arange, i_star][:, None] - logits  # [B, k]
    gdiff = grads[arange, i_star][:, None] - grads
    norms = gdiff.flatten(2).norm(dim=2)  # [B, k]
    ratio = torch.where(norms > 0, gap / norms.clamp_min(torch.finfo(norms.dtype).tiny),
                        torch.full_like(gap, float("inf")))
    ratio[arange, i_star] = float("inf")
    rho, j_star = ratio.min(1)
    degenerate = torch.isinf(rho)
    if degenerate.any():
        # no finite candidate: still report a rival class
        fallback = torch.where(i_star == 0, 1, 0)
        j_star = torch.where(degenerate, fallback, j_star)
    return RobustnessProbe(rho, j_star, i_star, degenerate)


# ---------------------------------------------------------------------------
# Timing
# ---------------------------------------------------------------------------


@dataclass
class Timing:
    median: float
    variance: float
    trials: list[float]


def epoch_timer(mode: str, model, dataset: Dataset, config: TrainConfig, *, store=None,
                schedule=None, attack_spec: AttackSpec | None = None,
                sat_probability: float = 0.5, trials: int = 3) -> Timing:
    """Median wall-clock of one training epoch after a discarded warm-up epoch.

    ``mode`` is a baseline training mode or one of ``sat``, ``pgd_sat``,
    ``trades_sat``. Training runs on a deep copy; ``model`` is untouched.
    """
    from . import sat as sat_mod
    from .training import train

    if trials < 3:
        raise ValueError("need at least 3 timed trials")
    times = []
    work = copy.deepcopy(model)
    for trial in range(trials + 1):
        attack = config.attack
        if mode in ("pgd_at", "pgd_at_uniform") and (attack is None or attack.family != "pgd"):
            attack = AttackSpec("pgd", 8 / 255, steps=5)
        if mode in ("trades_at", "trades_at_uniform") and (attack is None or attack.family != "trades"):
            attack = AttackSpec("trades", 8 / 255, steps=5)
        cfg = TrainConfig(1, config.batch_size, config.learning_rate, config.seed + trial,
                          mode if mode in MODES else "standard", attack,
                          config.trades_beta, config.noise_epsilon, track_accuracy=False)
        if mode == "sat":
            _, hist = sat_mod.sat_train(work, dataset, store, schedule, cfg)
        elif mode in ("pgd_sat", "trades_sat"):
            partner = mode.split("_")[0]
            spec = attack_spec or AttackSpec(partner, 8 / 255, steps=5)
            policy = sat_mod.HybridPolicy(partner, sat_probability)
            _, hist = sat_mod.hybrid_train(work, dataset, store, schedule, policy, spec, cfg)
        else:
            _, hist = train(work, dataset, cfg)
        if trial > 0:
            times.append(hist.records[0].seconds)
    return Timing(statistics.median(times), statistics.pvariance(times), times)
