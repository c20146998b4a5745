"""ReLU classifier zoo, gradient helpers and checkpoint archives."""

from __future__ import annotations

import hashlib
import io
import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import MissingArtifactError, NumericalError

# ---------------------------------------------------------------------------
# Architectures
# ---------------------------------------------------------------------------

# Every model keeps its ReLUs as distinct nn.ReLU modules: guided backprop swaps
# their backward rule in place, and CAM methods tap ``feature_layer``.


class Classifier(nn.Module):
    architecture_id = "base"
    tap_name: str | None = None

    def __init__(self, input_shape, num_classes, **config):
        super().__init__()
        self.input_shape = tuple(int(s) for s in input_shape)
        self.num_classes = int(num_classes)
        self.config = config

    @property
    def feature_layer(self) -> nn.Module | None:
        return None if self.tap_name is None else self.get_submodule(self.tap_name)

    @property
    def has_feature_tap(self) -> bool:
        return self.tap_name is not None


class MLP(Classifier):
    architecture_id = "mlp"

    def __init__(self, input_shape, num_classes, hidden=32, bias=True):
        super().__init__(input_shape, num_classes, hidden=hidden, bias=bias)
        d = int(np.prod(input_shape))
        self.fc1 = nn.Linear(d, hidden, bias=bias)
        self.relu = nn.ReLU()
        self.fc2 = nn.Linear(hidden, num_classes, bias=bias)

    def forward(self, x):
        return self.fc2(self.relu(self.fc1(x.flatten(1))))


class Linear(Classifier):
    """Affine classifier; used as an analytic oracle in tests."""

    architecture_id = "linear"

    def __init__(self, input_shape, num_classes, bias=True):
        super().__init__(input_shape, num_classes, bias=bias)
        self.fc = nn.Linear(int(np.prod(input_shape)), num_classes, bias=bias)

    def forward(self, x):
        return self.fc(x.flatten(1))


class ConvReLU(nn.Sequential):
    def __init__(self, cin, cout, stride=1, bias=True):
        super().__init__(nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=bias), nn.ReLU())


class SmallCNN(Classifier):
    """Four 3x3 conv layers (two of them strided), global average pool, linear head."""

    architecture_id = "small_cnn"

    def __init__(self, input_shape, num_classes, channels=(32, 32, 64, 64), bias=True):
        channels = tuple(int(c) for c in channels)
        super().__init__(input_shape, num_classes, channels=list(channels), bias=bias)
        c0 = self.input_shape[0]
        c1, c2, c3, c4 = channels
        self.features = nn.Sequential(
            ConvReLU(c0, c1, bias=bias),
            ConvReLU(c1, c2, stride=2, bias=bias),
            ConvReLU(c2, c3, bias=bias),
            ConvReLU(c3, c4, stride=2, bias=bias),
        )
        self.head = nn.Linear(c4, num_classes, bias=bias)
        self.tap_name = f"features.{len(self.features) - 1}"

    def forward(self, x):
        a = self.features(x)
        return self.head(a.mean(dim=(2, 3)))


class ResidualBlock(nn.Module):
    def __init__(self, cin, cout, stride=1, bias=True):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=bias)
        self.relu1 = nn.ReLU()
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1, bias=bias)
        self.relu2 = nn.ReLU()
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = nn.Conv2d(cin, cout, 1, stride=stride, bias=bias)

    def forward(self, x):
        out = self.conv2(self.relu1(self.conv1(x)))
        skip = x if self.shortcut is None else self.shortcut(x)
        return self.relu2(out + skip)


class MiniResNet(Classifier):
    """Stem conv + eight residual blocks in four stages; no normalisation layers."""

    architecture_id = "mini_resnet"

    def __init__(self, input_shape, num_classes, width=16, bias=True):
        super().__init__(input_shape, num_classes, width=width, bias=bias)
        w = int(width)
        self.stem = ConvReLU(self.input_shape[0], w, bias=bias)
        widths = [w, w, 2 * w, 2 * w, 4 * w, 4 * w, 4 * w, 4 * w]
        strides = [1, 1, 2, 1, 2, 1, 1, 1]
        blocks, cin = [], w
        for cout, s in zip(widths, strides):
            blocks.append(ResidualBlock(cin, cout, s, bias=bias))
            cin = cout
        self.blocks = nn.Sequential(*blocks)
        self.head = nn.Linear(cin, num_classes, bias=bias)
        self.tap_name = f"blocks.{len(self.blocks) - 1}"
        # damp the residual branches so the un-normalised stack trains stably
        for block in self.blocks:
            nn.init.zeros_(block.conv2.weight)

    def forward(self, x):
        a = self.blocks(self.stem(x))
        return self.head(a.mean(dim=(2, 3)))


ARCHITECTURES = {cls.architecture_id: cls for cls in (Linear, MLP, SmallCNN, MiniResNet)}


def build_model(architecture_id: str, input_shape, num_classes: int, seed: int | None = None,
                dtype=torch.float32, **config) -> Classifier:
    try:
        cls = ARCHITECTURES[architecture_id]
    except KeyError:
        raise ValueError(f"unknown architecture {architecture_id!r}; "
                         f"known: {sorted(ARCHITECTURES)}") from None
    if seed is not None:
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            model = cls(input_shape, num_classes, **config)
    else:
        model = cls(input_shape, num_classes, **config)
    return model.to(dtype)


# ---------------------------------------------------------------------------
# Forward / gradients
# ---------------------------------------------------------------------------


def _check_input(model: Classifier, x: torch.Tensor):
    if tuple(x.shape[1:]) != model.input_shape:
        raise ValueError(f"input shape {tuple(x.shape[1:])} does not match "
                         f"{model.architecture_id} input {model.input_shape}")


def forward(model: Classifier, x: torch.Tensor) -> torch.Tensor:
    _check_input(model, x)
    logits = model(x)
    if not torch.isfinite(logits).all():
        raise NumericalError("non-finite logits")
    return logits


def _select(logits, class_index):
    if isinstance(class_index, int):
        return logits[:, class_index]
    idx = torch.as_tensor(class_index, device=logits.device).long().view(-1, 1)
    return logits.gather(1, idx).squeeze(1)


def input_gradient(model: Classifier, x: torch.Tensor, class_index=None,
                   labels: torch.Tensor | None = None) -> torch.Tensor:
    """Gradient w.r.t. ``x`` of a per-sample scalar.

    With ``class_index`` (int or per-sample tensor) the scalar is that logit;
    with ``labels`` it is the cross-entropy loss. Per-sample terms are summed,
    so each sample's gradient is independent of the rest of the batch.
    """
    if (class_index is None) == (labels is None):
        raise ValueError("pass exactly one of class_index or labels")
    x = x.detach().clone().requires_grad_(True)
    with torch.enable_grad():
        logits = forward(model, x)
        if labels is not None:
            objective = F.cross_entropy(logits, labels, reduction="sum")
        else:
            if isinstance(class_index, int) and not 0 <= class_index < model.num_classes:
                raise ValueError(f"class index {class_index} out of range")
            objective = _select(logits, class_index).sum()
        (grad,) = torch.autograd.grad(objective, x)
    if not torch.isfinite(grad).all():
        raise NumericalError("non-finite input gradient")
    return grad


def feature_tap(model: Classifier, x: torch.Tensor, class_index):
    """Activations of ``model.feature_layer`` and d(logit)/d(activations)."""
    if not getattr(model, "has_feature_tap", False):
        raise ValueError(f"{getattr(model, 'architecture_id', type(model).__name__)} "
                         "has no convolutional feature tap")
    captured = {}

    def hook(_module, _inp, out):
        captured["A"] = out

    handle = model.feature_layer.register_forward_hook(hook)
    try:
        with torch.enable_grad():
            x = x.detach().requires_grad_(True)
            logits = forward(model, x)
            A = captured["A"]
            (grad,) = torch.autograd.grad(_select(logits, class_index).sum(), A)
    finally:
        handle.remove()
    return A.detach(), grad.detach()


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    architecture_id: str
    input_shape: tuple
    num_classes: int
    config: dict
    parameters: dict[str, np.ndarray]
    training_mode_tag: str = "std"
    metadata: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: Classifier, tag: str = "std", **metadata) -> Checkpoint:
        params = {k: v.detach().cpu().numpy().copy() for k, v in model.state_dict().items()}
        return cls(model.architecture_id, model.input_shape, model.num_classes,
                   dict(model.config), params, tag, dict(metadata))

    def build(self) -> Classifier:
        dtypes = {v.dtype for v in self.parameters.values()}
        dtype = torch.float64 if np.dtype("float64") in dtypes else torch.float32
        model = build_model(self.architecture_id, self.input_shape, self.num_classes,
                            dtype=dtype, **self.config)
        model.load_state_dict({k: torch.from_numpy(np.array(v)) for k, v in self.parameters.items()})
        return model

    def parameter_hash(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.parameters):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.parameters[name]).tobytes())
        return h.hexdigest()


_RAW_DTYPES = {"float32": ("<f4", ".f32"), "float64": ("<f8", ".f64")}


def _entry(name: str) -> zipfile.ZipInfo:
    # fixed timestamp so identical checkpoints are byte-identical files
    return zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    """Write a zip archive: ``manifest.json`` plus one raw array per parameter."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest = {
        "architecture_id": ckpt.architecture_id,
        "input_shape": list(ckpt.input_shape),
        "num_classes": ckpt.num_classes,
        "config": ckpt.config,
        "training_mode_tag": ckpt.training_mode_tag,
        "metadata": ckpt.metadata,
        "parameters": {},
    }
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, arr in ckpt.parameters.items():
            code, ext = _RAW_DTYPES[str(arr.dtype)]
            payload = np.ascontiguousarray(arr, dtype=code).tobytes()
            member = f"params/{name}{ext}"
            zf.writestr(_entry(member), payload)
            manifest["parameters"][name] = {"file": member, "dtype": code, "shape": list(arr.shape),
                                            "sha256": hashlib.sha256(payload).hexdigest()}
        zf.writestr(_entry("manifest.json"), json.dumps(manifest, indent=1, sort_keys=True))
    return path


def load_checkpoint(path) -> Checkpoint:
    from .errors import ChecksumError

    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"no checkpoint at {path}")
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
        params = {}
        for name, entry in manifest["parameters"].items():
            payload = zf.read(entry["file"])
            if hashlib.sha256(payload).hexdigest() != entry["sha256"]:
                raise ChecksumError(f"checksum mismatch for parameter {name} in {path}")
            arr = np.frombuffer(payload, dtype=entry["dtype"]).reshape(entry["shape"])
            params[name] = arr.astype(arr.dtype.newbyteorder("="))
    return Checkpoint(manifest["architecture_id"], tuple(manifest["input_shape"]),
                      manifest["num_classes"], manifest["config"], params,
                      manifest["training_mode_tag"], manifest["metadata"])
