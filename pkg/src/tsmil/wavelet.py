"""Learnable wavelet positional encoding.

Each bank holds per-basis, per-channel scale/translation parameters. A basis
kernel is the Mexican hat mother wavelet scaled by ``a`` and shifted by ``b``,
sampled at integer tap offsets; the encoding is the sum over bases of the
depthwise convolution of the input with those kernels. Scales stay positive
through a softplus parameterization, so no projection step is ever needed.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor

A_MIN = 1e-2
MEXICAN_HAT_PEAK = 2.0 / (math.sqrt(3.0) * math.pi**0.25)


def mexican_hat(t: float) -> float:
    """Mother wavelet: L2-normalized second derivative of a Gaussian."""
    return MEXICAN_HAT_PEAK * (1.0 - t * t) * math.exp(-0.5 * t * t)


def _mexican_hat_tensor(u: Tensor) -> Tensor:
    u2 = ag.square(u)
    bump = ag.sub(ag.Tensor(np.ones(1, dtype=u.dtype)), u2)
    return ag.scale(ag.mul(bump, ag.exp(ag.scale(u2, -0.5))), MEXICAN_HAT_PEAK)


def discretize_kernel(a: Tensor, b: Tensor, taps: int) -> Tensor:
    """Sample (1/sqrt(a)) * psi((t - b)/a) at integer offsets centered on 0.

    ``a`` and ``b`` are same-shape tensors of per-channel parameters (or
    scalars); the result appends a length-``taps`` axis. Differentiable in
    both parameters.
    """
    if taps % 2 == 0:
        raise ag.ConfigurationError(f"kernel taps must be odd, got {taps}")
    if np.any(a.data < A_MIN - 1e-9):
        raise ag.UsageError(f"scales must be >= {A_MIN}")
    half = (taps - 1) // 2
    grid = np.arange(-half, half + 1, dtype=a.dtype)

    scalar = a.ndim == 0
    col = (1, 1) if scalar else (*a.shape, 1)
    a_col = ag.reshape(a, col)
    b_col = ag.reshape(b, col)
    t_row = ag.Tensor(grid.reshape((1,) * len(col[:-1]) + (taps,)))
    u = ag.div(ag.sub(t_row, b_col), a_col)
    kern = ag.mul(_mexican_hat_tensor(u), ag.powc(a_col, -0.5))
    return ag.reshape(kern, (taps,)) if scalar else kern


@dataclass
class WaveletBank:
    """Scale/translation parameters for n_bases wavelets over ``channels``.

    ``theta`` parameterizes scales as a = softplus(theta) + A_MIN. With
    ``shared`` set, one (a, b) pair per basis is broadcast across channels.
    ``gate`` is a constant {0,1} configuration switch, not a parameter.
    """

    n_bases: int
    channels: int
    taps: int = 15
    shared: bool = False
    gate: float = 1.0
    theta: list[Tensor] = field(default_factory=list)
    b: list[Tensor] = field(default_factory=list)

    @classmethod
    def create(
        cls,
        channels: int,
        n_bases: int = 3,
        taps: int = 15,
        shared: bool = False,
        gate: float = 1.0,
        dtype=np.float32,
    ) -> "WaveletBank":
        if taps % 2 == 0:
            raise ag.ConfigurationError(f"kernel taps must be odd, got {taps}")
        bank = cls(n_bases=n_bases, channels=channels, taps=taps, shared=shared, gate=gate)
        width = 1 if shared else channels
        # multi-resolution start: scales log-spaced over [0.5, 4]
        targets = np.geomspace(0.5, 4.0, n_bases) if n_bases > 1 else np.array([1.0])
        for a0 in targets:
            theta0 = math.log(math.expm1(a0 - A_MIN))
            bank.theta.append(Tensor(np.full(width, theta0, dtype=dtype), requires_grad=True))
            bank.b.append(Tensor(np.zeros(width, dtype=dtype), requires_grad=True))
        return bank

    def scales(self) -> list[Tensor]:
        return [
            ag.add(ag.softplus(th), ag.Tensor(np.full(1, A_MIN, dtype=th.dtype)))
            for th in self.theta
        ]

    def kernels(self, taps: int | None = None) -> list[Tensor]:
        """One (channels, taps) kernel tensor per basis."""
        out = []
        for a, b in zip(self.scales(), self.b):
            kern = discretize_kernel(a, b, self.taps if taps is None else taps)
            if self.shared:
                kern = ag.concat([kern] * self.channels, axis=0)
            out.append(kern)
        return out

    def parameters(self):
        for j, (th, b) in enumerate(zip(self.theta, self.b)):
            yield f"theta{j}", th
            yield f"b{j}", b


def wpe_forward(bank: WaveletBank, x: Tensor) -> Tensor:
    """Sum of depthwise wavelet convolutions; input and output are (T, channels)."""
    if x.shape[-1] != bank.channels:
        raise ag.DimensionError(
            f"input has {x.shape[-1]} channels, bank expects {bank.channels}"
        )
    if bank.gate == 0.0:
        return ag.Tensor(np.zeros_like(x.data))
    xt = ag.transpose(x)
    # taps past +-(T-1) only ever multiply zero padding; clipping them keeps
    # the result exact while satisfying the conv width precondition
    eff_taps = min(bank.taps, 2 * x.shape[0] - 1)
    total = None
    for kern in bank.kernels(taps=eff_taps):
        conv = ag.conv1d_same(xt, kern)
        total = conv if total is None else ag.add(total, conv)
    out = ag.transpose(total)
    return out if bank.gate == 1.0 else ag.scale(out, bank.gate)


def export_wavelet_csv(bank: WaveletBank, path) -> None:
    """Write learned (basis, channel, a, b) rows for kernel-shape plots."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["basis", "channel", "a", "b"])
        for j, (a, b) in enumerate(zip(bank.scales(), bank.b)):
            a_vals = np.broadcast_to(a.data, (bank.channels,))
            b_vals = np.broadcast_to(b.data, (bank.channels,))
            for ch in range(bank.channels):
                writer.writerow([j, ch, repr(float(a_vals[ch])), repr(float(b_vals[ch]))])
