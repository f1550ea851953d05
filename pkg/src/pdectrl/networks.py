"""Convolutional encoder/decoder networks for the surrogates.

Widths follow ``channels = (c1, c2, c3, c4)``: the encoder's four conv
layers output c1..c4 channels (the first two downsample by 2), decoders
mirror them with two nearest-neighbour upsamplings. In 2D a linear layer
maps the encoder features to an ``(n/4) x (n/4)`` latent image; in 1D the
last conv output (c4 channels at n/4 points) is the latent.
"""
from __future__ import annotations

import math

import torch
from torch import nn

from . import tensor as T


def _activation(name: str):
    if name == "tanh":
        return torch.tanh
    if name == "relu":
        return torch.relu
    raise ValueError(f"unknown activation {name!r}")


class Conv(nn.Module):
    """One conv layer with parameters drawn like torch's default init."""

    def __init__(self, ndim, c_in, c_out, kernel_size, stride=1, generator=None):
        super().__init__()
        self.ndim, self.stride, self.pad = ndim, stride, kernel_size // 2
        shape = (c_out, c_in) + (kernel_size,) * ndim
        bound = 1.0 / math.sqrt(c_in * kernel_size ** ndim)
        self.weight = nn.Parameter(_uniform(shape, bound, generator))
        self.bias = nn.Parameter(_uniform((c_out,), bound, generator))

    def forward(self, x):
        op = T.conv2d if self.ndim == 2 else T.conv1d
        return op(x, self.weight, self.bias, stride=self.stride, padding=self.pad)


class Linear(nn.Module):
    def __init__(self, n_in, n_out, generator=None):
        super().__init__()
        bound = 1.0 / math.sqrt(n_in)
        self.weight = nn.Parameter(_uniform((n_out, n_in), bound, generator))
        self.bias = nn.Parameter(_uniform((n_out,), bound, generator))

    def forward(self, x):
        return T.linear(x, self.weight, self.bias)


def _uniform(shape, bound, generator):
    return (torch.rand(shape, generator=generator, dtype=T.DTYPE) * 2 - 1) * bound


class Encoder(nn.Module):
    def __init__(self, ndim, n, channels, kernel_size, activation, generator=None, latent_channels=1):
        super().__init__()
        if n % 4:
            raise ValueError(f"grid extent {n} must be divisible by 4")
        c1, c2, c3, c4 = channels
        self.ndim, self.side, self.c_lat = ndim, n // 4, latent_channels
        self.act = _activation(activation)
        if ndim == 2:
            strides = (2, 2, 1, 1)
        else:
            strides = (1, 2, 2, 1)
        widths = (1, c1, c2, c3, c4)
        self.convs = nn.ModuleList(
            Conv(ndim, widths[i], widths[i + 1], kernel_size, strides[i], generator) for i in range(4)
        )
        self.head = None
        if ndim == 2:
            self.head = Linear(c4 * self.side ** 2, latent_channels * self.side ** 2, generator)

    def forward(self, x):
        lead = x.shape[:-self.ndim]
        h = x.reshape((-1, 1) + x.shape[-self.ndim:])
        for i, conv in enumerate(self.convs):
            h = conv(h)
            if self.head is not None or i < 3:
                h = self.act(h)
        if self.head is not None:
            h = self.head(h.flatten(1)).reshape(-1, self.c_lat, self.side, self.side)
        return h.reshape(lead + h.shape[1:])


class Decoder(nn.Module):
    def __init__(self, ndim, channels, kernel_size, activation, generator=None, latent_channels=1):
        super().__init__()
        c1, c2, c3, c4 = channels
        self.ndim = ndim
        self.act = _activation(activation)
        widths = (latent_channels, c4, c3, c2, 1) if ndim == 2 else (c4, c3, c2, c1, 1)
        self.convs = nn.ModuleList(
            Conv(ndim, widths[i], widths[i + 1], kernel_size, 1, generator) for i in range(4)
        )

    def forward(self, z):
        lead = z.shape[:-self.ndim - 1]
        h = z.reshape((-1,) + z.shape[-self.ndim - 1:])
        for i, conv in enumerate(self.convs):
            h = conv(h)
            if i < 3:
                h = self.act(h)
            if i < 2:
                h = T.upsample2x(h, self.ndim)
        return h.reshape(lead + h.shape[2:])


class SteadyNetwork(nn.Module):
    """Shared encoder with solution and reconstruction decoders."""

    def __init__(self, ndim, n, channels, kernel_size, activation="tanh",
                 mask=None, seed=0, latent_channels=1):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        self.encoder = Encoder(ndim, n, channels, kernel_size, activation, g, latent_channels)
        self.sol = Decoder(ndim, channels, kernel_size, activation, g, latent_channels)
        self.rec = Decoder(ndim, channels, kernel_size, activation, g, latent_channels)
        self.register_buffer("mask", None if mask is None else T.as_tensor(mask))

    def encode(self, m):
        return self.encoder(m)

    def solve(self, m):
        u = self.sol(self.encoder(m))
        if self.mask is not None:
            u = u * self.mask
        return u

    def reconstruct(self, m):
        return self.rec(self.encoder(m))

    def forward(self, m):
        z = self.encoder(m)
        u = self.sol(z)
        if self.mask is not None:
            u = u * self.mask
        return u, self.rec(z)


class TimeNetwork(nn.Module):
    """State and control autoencoders with a one-layer latent transition."""

    def __init__(self, n, channels, kernel_size, activation="tanh", seed=0):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        c_lat = channels[3]
        self.state_enc = Encoder(1, n, channels, kernel_size, activation, g)
        self.state_rec = Decoder(1, channels, kernel_size, activation, g)
        self.control_enc = Encoder(1, n, channels, kernel_size, activation, g)
        self.control_rec = Decoder(1, channels, kernel_size, activation, g)
        self.transition = Conv(1, 2 * c_lat, c_lat, kernel_size, 1, g)

    def step_latent(self, v, g):
        lead = v.shape[:-2]
        h = torch.cat([v, g], dim=-2)
        h = self.transition(h.reshape((-1,) + h.shape[-2:]))
        return h.reshape(lead + h.shape[-2:])

    def step(self, u, m):
        """One-step prediction of the next state from true ``u``."""
        return self.state_rec(self.step_latent(self.state_enc(u), self.control_enc(m)))

    def rollout(self, u0, controls):
        """Carry the latent through ``controls`` (time on axis -2); returns states 1..n."""
        v = self.state_enc(u0)
        g = self.control_enc(controls)
        out = []
        for j in range(controls.shape[-2]):
            v = self.step_latent(v, g[..., j, :, :])
            out.append(self.state_rec(v))
        return torch.stack(out, dim=-2)
