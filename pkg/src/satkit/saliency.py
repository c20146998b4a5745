"""Saliency-map generators.

All generators take a batch ``x`` of shape [B, C, H, W] plus a class index per
sample (int or tensor) and return a tensor shaped like ``x``. ``SaliencyMap``
is the per-sample record that goes into a :class:`~satkit.data.SaliencyStore`.
"""

from __future__ import annotations

import contextlib
import hashlib
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .models import feature_tap, forward, input_gradient

METHODS = ("gradient", "guided_backprop", "smoothgrad", "integrated_gradients",
           "gradcam", "gradcam_pp", "guided_gradcam_pp", "bbox")


@dataclass
class SaliencyMap:
    values: np.ndarray  # [C, H, W]
    kind: str  # "raw" | "signed"
    method: str
    teacher_id: str
    class_index: int

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.kind not in ("raw", "signed"):
            raise ValueError(f"unknown saliency kind {self.kind!r}")
        if self.kind == "signed" and not is_signed(self.values):
            raise ValueError("signed saliency must take values in {-1, 0, +1}")
        if self.kind == "raw" and not np.isfinite(self.values).all():
            raise ValueError("raw saliency must be finite")


def is_signed(values) -> bool:
    v = np.asarray(values)
    return bool(np.isin(v, (-1.0, 0.0, 1.0)).all())


def vanilla_gradient(model, x, class_index) -> torch.Tensor:
    return input_gradient(model, x, class_index=class_index)


# --- guided backprop --------------------------------------------------------


class _GuidedReLU(torch.autograd.Function):
    @staticmethod
    def forward(ctx, inp):
        ctx.save_for_backward(inp)
        return inp.clamp(min=0)

    @staticmethod
    def backward(ctx, grad_out):
        (inp,) = ctx.saved_tensors
        # gate on the forward pre-activation AND on the sign of the incoming signal
        return grad_out * (inp > 0).to(grad_out.dtype) * (grad_out > 0).to(grad_out.dtype)


_NON_RELU = (nn.Sigmoid, nn.Tanh, nn.GELU, nn.ELU, nn.SiLU, nn.Softplus, nn.LeakyReLU,
             nn.PReLU, nn.SELU, nn.CELU, nn.Hardtanh, nn.Softmax)


@contextlib.contextmanager
def guided_relus(model: nn.Module):
    """Temporarily switch every ``nn.ReLU`` of ``model`` to the guided backward rule."""
    for m in model.modules():
        if isinstance(m, _NON_RELU) and not (isinstance(m, nn.LeakyReLU) and m.negative_slope == 0):
            raise ValueError(f"guided backprop needs pure ReLU networks, found {type(m).__name__}")
    relus = [m for m in model.modules() if isinstance(m, nn.ReLU)]
    for m in relus:
        m.forward = _GuidedReLU.apply
    try:
        yield model
    finally:
        for m in relus:
            del m.forward


def guided_backprop(model, x, class_index) -> torch.Tensor:
    with guided_relus(model):
        return input_gradient(model, x, class_index=class_index)


# --- path / noise averaged gradients ---------------------------------------


def smoothgrad(model, x, class_index, n: int = 25, sigma: float = 0.1, seed: int = 0) -> torch.Tensor:
    if n < 1:
        raise ValueError("smoothgrad needs n >= 1")
    gen = torch.Generator().manual_seed(seed)
    total = torch.zeros_like(x)
    for _ in range(n):
        noise = torch.randn(x.shape, generator=gen, dtype=x.dtype) * sigma
        total += input_gradient(model, x + noise, class_index=class_index)
    return total / n


def integrated_gradients(model, x, class_index, baseline=None, m_steps: int = 50,
                         chunk: int = 256) -> torch.Tensor:
    """Right Riemann sum of the gradient along the straight path from ``baseline``."""
    if m_steps < 1:
        raise ValueError("integrated_gradients needs m_steps >= 1")
    baseline = torch.zeros_like(x) if baseline is None else torch.as_tensor(baseline, dtype=x.dtype).expand_as(x)
    diff = x - baseline
    b = len(x)
    if isinstance(class_index, int):
        cls = torch.full((b,), class_index, dtype=torch.long)
    else:
        cls = torch.as_tensor(class_index).long().view(-1)
    total = torch.zeros_like(x)
    alphas = torch.arange(1, m_steps + 1, dtype=x.dtype) / m_steps
    per = max(1, chunk // b)
    for start in range(0, m_steps, per):
        a = alphas[start:start + per]
        path = baseline[None] + a.view(-1, 1, 1, 1, 1) * diff[None]
        grads = input_gradient(model, path.reshape(-1, *x.shape[1:]),
                               class_index=cls.repeat(len(a)))
        total += grads.view(len(a), *x.shape).sum(0)
    return diff * total / m_steps


# --- CAM family ------------------------------------------------------------


def grad_cam(model, x, class_index, variant: str = "gradcam", guided: bool = False) -> torch.Tensor:
    """Grad-CAM / Grad-CAM++ map, upsampled bilinearly and repeated over channels.

    Grad-CAM++ weights use the closed form obtained by exponentiating the class
    score; for piecewise-linear networks the higher derivatives reduce to powers
    of the first-order gradient ``g``::

        alpha = g^2 / (2 g^2 + sum_ab(A_ab) g^3)
        w_k   = sum_ij alpha_ij relu(g_ij)
    """
    A, g = feature_tap(model, x, class_index)
    if variant == "gradcam":
        weights = g.mean(dim=(2, 3))
    elif variant == "gradcam_pp":
        g2, g3 = g.pow(2), g.pow(3)
        denom = 2 * g2 + A.sum(dim=(2, 3), keepdim=True) * g3
        denom = torch.where(denom != 0, denom, torch.ones_like(denom))
        alpha = g2 / denom
        weights = (alpha * F.relu(g)).sum(dim=(2, 3))
    else:
        raise ValueError(f"unknown CAM variant {variant!r}")
    cam = F.relu((weights[:, :, None, None] * A).sum(1, keepdim=True))
    cam = F.interpolate(cam, size=x.shape[2:], mode="bilinear", align_corners=False)
    cam = cam.expand(-1, x.shape[1], -1, -1).contiguous()
    if guided:
        cam = cam * guided_backprop(model, x, class_index)
    return cam


# --- annotation-derived and post-processing ---------------------------------


def weak_saliency_from_annotation(annotation, image_shape, teacher_id: str = "annotation",
                                  class_index: int = -1) -> SaliencyMap:
    """+1 inside the annotated object, -1 elsewhere, repeated over channels."""
    c, h, w = image_shape
    mask = annotation.to_mask(h, w)
    values = np.where(mask, 1.0, -1.0).astype(np.float32)
    return SaliencyMap(np.broadcast_to(values, (c, h, w)).copy(), "signed", "bbox",
                       teacher_id, class_index)


def binarize(values, rule: str = "sign", q: float | None = None):
    """Map raw saliency to {-1, 0, +1}.

    ``sign``: elementwise sign. ``topq``: per sample, the ``q`` fraction of
    entries with the largest magnitude keep their sign, all others become -1.
    Accepts tensors (batched, first axis = sample) or a SaliencyMap.
    """
    if isinstance(values, SaliencyMap):
        out = binarize(torch.from_numpy(values.values[None].astype(np.float64)), rule, q)[0]
        return SaliencyMap(out.numpy().astype(np.float32), "signed", values.method,
                           values.teacher_id, values.class_index)
    values = torch.as_tensor(values)
    if rule == "sign":
        return values.sign()
    if rule != "topq":
        raise ValueError(f"unknown binarize rule {rule!r}")
    if q is None or not 0 < q <= 1:
        raise ValueError("topq needs q in (0, 1]")
    flat = values.reshape(len(values), -1)
    n = flat.shape[1]
    k = min(n, max(1, math.ceil(q * n)))
    order = flat.abs().argsort(dim=1, descending=True, stable=True)
    keep = torch.zeros_like(flat, dtype=torch.bool)
    keep.scatter_(1, order[:, :k], True)
    out = torch.where(keep, flat.sign(), -torch.ones_like(flat))
    return out.view_as(values)


def compute_saliency(method: str, model, x, class_index, **kwargs) -> torch.Tensor:
    """Dispatch to a generator by its stable method id."""
    if method == "gradient":
        return vanilla_gradient(model, x, class_index)
    if method == "guided_backprop":
        return guided_backprop(model, x, class_index)
    if method == "smoothgrad":
        return smoothgrad(model, x, class_index, **kwargs)
    if method == "integrated_gradients":
        return integrated_gradients(model, x, class_index, **kwargs)
    if method == "gradcam":
        return grad_cam(model, x, class_index, "gradcam")
    if method == "gradcam_pp":
        return grad_cam(model, x, class_index, "gradcam_pp")
    if method == "guided_gradcam_pp":
        return grad_cam(model, x, class_index, "gradcam_pp", guided=True)
    raise ValueError(f"unknown saliency method {method!r}; known: {METHODS}")


# --- ensembles ---------------------------------------------------------------


class EnsembleSelector:
    """Picks, per sample, one of several stores uniformly at random.

    The choice is a pure function of ``(selection_seed, sample_id)``.
    """

    def __init__(self, members, selection_seed: int = 0):
        members = list(members)
        if len(members) < 2:
            raise ValueError("an ensemble needs at least two member stores")
        self.members = members
        self.selection_seed = int(selection_seed)

    def choice(self, sample_id: str) -> int:
        digest = hashlib.sha256(f"{self.selection_seed}:{sample_id}".encode()).digest()
        return int.from_bytes(digest[:8], "little") % len(self.members)

    def get(self, sample_id: str) -> SaliencyMap:
        return self.members[self.choice(sample_id)].get(sample_id)

    def get_many(self, sample_ids) -> np.ndarray:
        return np.stack([self.get(sid).values for sid in sample_ids])

    def covers(self, sample_ids) -> bool:
        return all(sid in self.members[self.choice(sid)] for sid in sample_ids)


def select_ensemble(selector: EnsembleSelector, sample_id: str) -> SaliencyMap:
    return selector.get(sample_id)
