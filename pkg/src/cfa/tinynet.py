"""Compact conv classifier with named feature hooks and a guided-backprop mode.

Each block is conv(k x k, same padding) -> activation -> 2x2 max-pool; the head
flattens the last block and maps it to class logits.  Hooks record every
block's post-activation output (before pooling).
"""

from __future__ import annotations

import contextlib
import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Literal

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, Field, model_validator
from torch import nn
from torch.nn import functional as F

CKPT_MAGIC = b"CFAM"
CKPT_VERSION = 1
STAGES = ("baseline", "cfa")


class CheckpointFormatError(ValueError):
    pass


def configure_threads() -> None:
    """Cap torch intra-op threads at CFA_THREADS (0 or unset leaves torch's default)."""
    n = int(os.environ.get("CFA_THREADS", "0") or 0)
    if n > 0:
        torch.set_num_threads(n)


class ArchSpec(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    in_size: int = Field(64, ge=1)
    n_classes: int = Field(4, ge=2)
    channels: tuple[int, ...] = (16, 32, 64, 64)
    kernel: int = Field(3, ge=1)
    pool: bool = True
    activation: Literal["relu", "identity"] = "relu"
    min_blocks: int = Field(2, ge=1)

    @model_validator(mode="after")
    def _check(self):
        if len(self.channels) < self.min_blocks:
            raise ValueError(f"need at least {self.min_blocks} conv blocks, got {len(self.channels)}")
        if any(c < 1 for c in self.channels):
            raise ValueError("channel counts must be positive")
        if self.kernel % 2 == 0:
            raise ValueError("kernel size must be odd for same padding")
        if self.pool and self.in_size % (2 ** len(self.channels)):
            raise ValueError(f"in_size {self.in_size} not divisible by 2^{len(self.channels)}")
        return self

    @property
    def hook_names(self) -> tuple[str, ...]:
        return tuple(f"block{i + 1}" for i in range(len(self.channels)))

    @property
    def feature_size(self) -> int:
        return self.in_size // (2 ** len(self.channels)) if self.pool else self.in_size

    def param_count(self) -> int:
        total, c_in = 0, 1
        for c in self.channels:
            total += c_in * c * self.kernel**2 + c
            c_in = c
        return total + c_in * self.feature_size**2 * self.n_classes + self.n_classes


class _GuidedReLU(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x):
        out = x.clamp(min=0)
        ctx.save_for_backward(out)
        return out

    @staticmethod
    def backward(ctx, grad):
        (out,) = ctx.saved_tensors
        return grad * (out > 0) * (grad > 0)


@dataclass
class FeatureStack:
    logits: torch.Tensor
    features: dict[str, torch.Tensor]

    def softmax(self) -> torch.Tensor:
        return torch.softmax(self.logits, dim=1)


class TinyNet(nn.Module):
    def __init__(self, arch: ArchSpec):
        super().__init__()
        self.arch = arch
        self.convs = nn.ModuleList()
        c_in = 1
        for c in arch.channels:
            self.convs.append(nn.Conv2d(c_in, c, arch.kernel, padding=arch.kernel // 2))
            c_in = c
        self.fc = nn.Linear(c_in * arch.feature_size**2, arch.n_classes)
        self.guided = False
        self.init_seed: int | None = None
        self.stage = "baseline"

    def _act(self, x):
        if self.arch.activation == "identity":
            return x
        return _GuidedReLU.apply(x) if self.guided else F.relu(x)

    def forward(self, x: torch.Tensor) -> FeatureStack:
        if x.dim() == 3:
            x = x.unsqueeze(1)
        feats = {}
        for name, conv in zip(self.arch.hook_names, self.convs):
            x = self._act(conv(x))
            feats[name] = x
            if self.arch.pool:
                x = F.max_pool2d(x, 2)
        return FeatureStack(self.fc(x.flatten(1)), feats)

    @property
    def dtype(self) -> torch.dtype:
        return self.fc.weight.dtype


def init_model(arch: ArchSpec, seed: int, dtype: torch.dtype = torch.float32) -> TinyNet:
    """Fan-in scaled normal weights (He for ReLU layers), zero biases."""
    model = TinyNet(arch)
    gen = torch.Generator().manual_seed(int(seed))
    gain = 2.0 if arch.activation == "relu" else 1.0
    with torch.no_grad():
        for conv in model.convs:
            fan_in = conv.in_channels * arch.kernel**2
            conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen, dtype=torch.float64) * np.sqrt(gain / fan_in))
            conv.bias.zero_()
        fan_in = model.fc.in_features
        model.fc.weight.copy_(torch.randn(model.fc.weight.shape, generator=gen, dtype=torch.float64) * np.sqrt(1.0 / fan_in))
        model.fc.bias.zero_()
    model.init_seed = int(seed)
    return model.to(dtype)


def as_batch(images, model: TinyNet) -> torch.Tensor:
    x = torch.as_tensor(np.asarray(images) if not isinstance(images, torch.Tensor) else images, dtype=model.dtype)
    if x.dim() == 2:
        x = x.unsqueeze(0)
    return x


def forward(model: TinyNet, batch) -> FeatureStack:
    x = as_batch(batch, model)
    size = model.arch.in_size
    if x.dim() not in (3, 4) or tuple(x.shape[-2:]) != (size, size):
        raise ValueError(f"expected b x {size} x {size} input, got {tuple(x.shape)}")
    if not torch.isfinite(x).all():
        raise ValueError("non-finite input")
    return model(x)


def backward(loss: torch.Tensor, model: TinyNet, inputs: torch.Tensor | None = None) -> dict[str, torch.Tensor]:
    """Reverse-mode gradients of a scalar objective over the parameters (and ``inputs``).

    Guided behaviour is whatever mode the forward pass ran in; see :func:`guided_mode`.
    """
    if not isinstance(loss, torch.Tensor) or loss.dim() != 0:
        raise ValueError("objective must be a scalar tensor")
    if loss.grad_fn is None:
        raise RuntimeError("objective has no graph; run forward first")
    names = [n for n, _ in model.named_parameters()]
    targets = [p for _, p in model.named_parameters()]
    if inputs is not None:
        names.append("input")
        targets.append(inputs)
    grads = torch.autograd.grad(loss, targets, allow_unused=True)
    return {n: (torch.zeros_like(t) if g is None else g) for n, t, g in zip(names, targets, grads)}


@contextlib.contextmanager
def guided_mode(model: TinyNet):
    prev = model.guided
    model.guided = True
    try:
        yield model
    finally:
        model.guided = prev


def input_gradient(model: TinyNet, image, objective, guided: bool = False) -> np.ndarray:
    """Gradient of ``objective(FeatureStack)`` w.r.t. a batch of inputs."""
    x = as_batch(image, model).clone().requires_grad_(True)
    with guided_mode(model) if guided else contextlib.nullcontext():
        loss = objective(forward(model, x))
        return backward(loss, model, x)["input"].detach().cpu().numpy()


def predict(model: TinyNet, chip) -> tuple[int, np.ndarray]:
    image = chip.image if hasattr(chip, "image") else chip
    with torch.no_grad():
        logits = forward(model, image).logits[0].double()
    probs = torch.softmax(logits, 0).numpy()
    return int(np.argmax(logits.numpy())), probs


def predict_batch(model: TinyNet, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    out = []
    with torch.no_grad():
        for i in range(0, len(images), batch_size):
            out.append(forward(model, images[i : i + batch_size]).logits.double().numpy())
    return np.concatenate(out) if out else np.zeros((0, model.arch.n_classes))


# ---------------------------------------------------------------- checkpoints


def save_model(model: TinyNet, path) -> None:
    arch_json = model.arch.model_dump_json().encode()
    parts = [
        CKPT_MAGIC,
        struct.pack("<HBq", CKPT_VERSION, STAGES.index(model.stage), -1 if model.init_seed is None else model.init_seed),
        struct.pack("<I", len(arch_json)),
        arch_json,
    ]
    params = list(model.state_dict().items())
    parts.append(struct.pack("<H", len(params)))
    for name, t in params:
        raw = name.encode()
        arr = t.detach().cpu().numpy().astype("<f4")
        parts.append(struct.pack("<HB", len(raw), arr.ndim) + raw)
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(parts))
    os.replace(tmp, path)


def load_model(path, dtype: torch.dtype = torch.float32) -> TinyNet:
    data = Path(path).read_bytes()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointFormatError("truncated checkpoint")
        pos += n
        return data[pos - n : pos]

    if take(4) != CKPT_MAGIC:
        raise CheckpointFormatError("bad magic number, not a CFAM checkpoint")
    version, stage, seed = struct.unpack("<HBq", take(11))
    if version != CKPT_VERSION or stage >= len(STAGES):
        raise CheckpointFormatError(f"unsupported checkpoint version {version} / stage {stage}")
    (alen,) = struct.unpack("<I", take(4))
    arch = ArchSpec.model_validate_json(take(alen))
    model = TinyNet(arch)
    expected = model.state_dict()
    (n,) = struct.unpack("<H", take(2))
    state = {}
    for _ in range(n):
        nlen, ndim = struct.unpack("<HB", take(3))
        name = take(nlen).decode()
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(take(4 * count), dtype="<f4").reshape(shape)
        if name not in expected or tuple(expected[name].shape) != tuple(shape):
            raise CheckpointFormatError(f"parameter {name} does not match the architecture")
        state[name] = torch.from_numpy(arr.copy())
    if set(state) != set(expected) or pos != len(data):
        raise CheckpointFormatError("checkpoint parameters incomplete or trailing data")
    model.load_state_dict(state)
    model.init_seed = None if seed < 0 else seed
    model.stage = STAGES[stage]
    return model.to(dtype)
