"""
Neural layers: convolution, the two normalization variants, and the
view-indexed normalization banks.

A normalization layer either owns one shared NormAffine or, with view-specific
parameterization enabled, a ViewBank of six. Views inside one batch may
differ, so the per-image (γ, β) rows are gathered into [N, C] tensors before
the affine step; gradients only reach the banks that were gathered.
"""

from __future__ import annotations

import logging
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from .config import BN_MOMENTUM, NORM_EPS, NUM_VIEWS
from .errors import ShapeError, ViewError
from .tensor import Tensor, channel_affine, conv2d, stack, standardize

logger = logging.getLogger(__name__)


def check_view(view: int) -> int:
    if isinstance(view, bool) or not isinstance(view, (int, np.integer)) or not 1 <= view <= NUM_VIEWS:
        raise ViewError(view)
    return int(view)


@dataclass
class NormAffine:
    """Per-channel scale γ and shift β; shapes [C], or [N, C] once gathered per image."""

    gamma: Tensor
    beta: Tensor

    @classmethod
    def identity(cls, channels: int, prefix: str = "") -> NormAffine:
        return cls(
            gamma=Tensor(np.ones(channels), requires_grad=True, name=f"{prefix}gamma"),
            beta=Tensor(np.zeros(channels), requires_grad=True, name=f"{prefix}beta"),
        )

    @property
    def channels(self) -> int:
        return self.gamma.shape[-1]


class ViewBank:
    """Exactly six NormAffine sets for one normalization layer, indexed by view id 1..6."""

    def __init__(self, channels: int, prefix: str = "") -> None:
        self.banks = [NormAffine.identity(channels, f"{prefix}view{v}.") for v in range(1, NUM_VIEWS + 1)]

    @property
    def channels(self) -> int:
        return self.banks[0].channels


def vsp_select(bank: ViewBank, view: int) -> NormAffine:
    """Return the stored (γ, β) of ``view``; nothing else in the layer is touched."""
    return bank.banks[check_view(view) - 1]


def instance_norm_forward(x: Tensor, affine: NormAffine, eps: float = NORM_EPS) -> Tensor:
    """Per-sample, per-channel standardization followed by γ·(·) + β."""
    if x.ndim != 4:
        raise ShapeError("instance_norm", "input.ndim", 4, x.ndim)
    return channel_affine(standardize(x, (2, 3), eps), affine.gamma, affine.beta)


class BatchNormState:
    """Running statistics of one batch-norm layer (single state, shared by all views)."""

    def __init__(self, channels: int, momentum: float = BN_MOMENTUM) -> None:
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.momentum = momentum

    def update(self, batch_mean: np.ndarray, batch_var: np.ndarray) -> None:
        m = self.momentum
        self.running_mean = (1.0 - m) * self.running_mean + m * batch_mean
        self.running_var = (1.0 - m) * self.running_var + m * batch_var


def batch_norm_forward(
    x: Tensor,
    affine: NormAffine,
    state: BatchNormState,
    training: bool,
    eps: float = NORM_EPS,
) -> Tensor:
    """
    Training: normalize with statistics over (N, H, W) and update the running
    state. Inference: normalize with the running state.
    """
    if x.ndim != 4:
        raise ShapeError("batch_norm", "input.ndim", 4, x.ndim)
    n, _, h, w = x.shape
    if training:
        if n * h * w < 2:
            raise ShapeError("batch_norm", "N·H·W", "≥ 2 in training mode", n * h * w)
        normalized = standardize(x, (0, 2, 3), eps)
        state.update(x.data.mean(axis=(0, 2, 3)), x.data.var(axis=(0, 2, 3)))
    else:
        inv_std = 1.0 / np.sqrt(state.running_var + eps)
        normalized = channel_affine(x, Tensor(inv_std), Tensor(-state.running_mean * inv_std))
    return channel_affine(normalized, affine.gamma, affine.beta)


# ─── Layers ─────────────────────────────────────────────────────────────────

class Conv2d:
    def __init__(self, c_in: int, c_out: int, kernel: int, stride: int, rng: np.random.Generator, prefix: str = "") -> None:
        fan_in = c_in * kernel * kernel
        self.weight = Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(c_out, c_in, kernel, kernel)),
                             requires_grad=True, name=f"{prefix}weight")
        self.bias = Tensor(np.zeros(c_out), requires_grad=True, name=f"{prefix}bias")
        self.stride = stride
        self.padding = kernel // 2

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return [("weight", self.weight), ("bias", self.bias)]


class _ViewNorm:
    """Holds the affine parameters (shared or view-specific) of a normalization layer."""

    kind = ""

    def __init__(self, channels: int, vsp: bool, eps: float = NORM_EPS) -> None:
        if eps <= 0:
            raise ValueError(f"normalization eps must be positive, got {eps}")
        self.channels = channels
        self.eps = eps
        self.vsp = vsp
        self.bank: ViewBank | None = ViewBank(channels) if vsp else None
        self.shared: NormAffine | None = None if vsp else NormAffine.identity(channels, "shared.")

    def affine_for(self, views: Sequence[int]) -> NormAffine:
        """Gather the (γ, β) each image of the batch should use."""
        for v in views:
            check_view(v)
        if self.bank is None:
            assert self.shared is not None
            return self.shared
        if len(set(views)) == 1:
            return vsp_select(self.bank, views[0])
        selected = [vsp_select(self.bank, v) for v in views]
        return NormAffine(stack([a.gamma for a in selected]), stack([a.beta for a in selected]))

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        if self.bank is None:
            assert self.shared is not None
            return [("shared.gamma", self.shared.gamma), ("shared.beta", self.shared.beta)]
        named: list[tuple[str, Tensor]] = []
        for v, affine in enumerate(self.bank.banks, start=1):
            named += [(f"view{v}.gamma", affine.gamma), (f"view{v}.beta", affine.beta)]
        return named

    def buffers(self) -> dict[str, np.ndarray]:
        return {}

    def load_buffers(self, buffers: dict[str, np.ndarray]) -> None:
        pass


class InstanceNorm2d(_ViewNorm):
    kind = "instance"

    def __call__(self, x: Tensor, views: Sequence[int], training: bool = False) -> Tensor:
        if len(views) != x.shape[0]:
            raise ShapeError("instance_norm", "N", x.shape[0], len(views))
        return instance_norm_forward(x, self.affine_for(views), self.eps)


class BatchNorm2d(_ViewNorm):
    kind = "batch"

    def __init__(self, channels: int, vsp: bool, eps: float = NORM_EPS, momentum: float = BN_MOMENTUM) -> None:
        super().__init__(channels, vsp, eps)
        self.state = BatchNormState(channels, momentum)

    def __call__(self, x: Tensor, views: Sequence[int], training: bool = False) -> Tensor:
        if len(views) != x.shape[0]:
            raise ShapeError("batch_norm", "N", x.shape[0], len(views))
        return batch_norm_forward(x, self.affine_for(views), self.state, training, self.eps)

    def buffers(self) -> dict[str, np.ndarray]:
        return {"running_mean": self.state.running_mean.copy(), "running_var": self.state.running_var.copy()}

    def load_buffers(self, buffers: dict[str, np.ndarray]) -> None:
        self.state.running_mean = buffers["running_mean"].copy()
        self.state.running_var = buffers["running_var"].copy()


def make_norm(kind: str, channels: int, vsp: bool) -> InstanceNorm2d | BatchNorm2d:
    if kind == "instance":
        return InstanceNorm2d(channels, vsp)
    if kind == "batch":
        return BatchNorm2d(channels, vsp)
    raise ValueError(f"unknown norm kind {kind!r}")
