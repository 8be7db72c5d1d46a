"""Learned compression model: analysis/synthesis transforms and a factorized entropy model."""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .layers import LEAK, Conv2d, ConvTranspose2d, Module


class PaddingRequiredError(ValueError):
    """Input spatial dims are not multiples of the codec's downsample factor."""


class ModelMismatchError(ValueError):
    pass


@dataclass
class CodecConfig:
    channels: tuple[int, int] = (32, 64)
    latent_channels: int = 32
    support: int = 64
    init_scale: float = 8.0
    likelihood_floor: float = 1e-9
    seed: int = 0

    def __post_init__(self):
        self.channels = tuple(self.channels)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d


def _np_sigmoid(v: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * v))


def logistic_likelihood_np(v: np.ndarray, mu: np.ndarray, log_scale: np.ndarray,
                           support: int, floor: float) -> np.ndarray:
    """Float64 reference evaluation of the discretized logistic PMF.

    ``v`` is ``[..., C, h, w]`` (or ``[C, K]`` with ``mu`` broadcast over the
    last axis when ``v`` is 2-d).  Tail mass beyond the support is folded into
    the two endpoint symbols.
    """
    v = np.asarray(v, dtype=np.float64)
    shape = (-1, 1, 1) if v.ndim >= 3 else (-1, 1)
    mu = np.asarray(mu, np.float64).reshape(shape)
    inv_s = np.exp(-np.asarray(log_scale, np.float64)).reshape(shape)
    d = v - mu
    k = np.where(d > 0, -1.0, 1.0)
    top = v + 0.5 > support
    bot = v - 0.5 < -support
    upper = np.where(top, (k > 0).astype(np.float64), _np_sigmoid(k * (d + 0.5) * inv_s))
    lower = np.where(bot, (k < 0).astype(np.float64), _np_sigmoid(k * (d - 0.5) * inv_s))
    return np.maximum(k * (upper - lower), floor)


class FactorizedEntropyModel(Module):
    """Per-channel discretized logistic with learned location and log-scale."""

    def __init__(self, channels: int, support: int = 64, init_scale: float = 8.0, floor: float = 1e-9):
        self.channels = channels
        self.support = support
        self.floor = floor
        self.mu = Parameter(np.zeros(channels, np.float32), group="entropy_model")
        self.log_scale = Parameter(np.full(channels, math.log(init_scale), np.float32), group="entropy_model")

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scale.data.astype(np.float64))

    def likelihood(self, v: Tensor) -> Tensor:
        """Differentiable probability of each latent value; ``v`` is ``[N, C, h, w]``."""
        v = ad.as_tensor(v)
        if v.shape[-3] != self.channels:
            raise ad.ShapeError(f"latent has {v.shape[-3]} channels, entropy model has {self.channels}")
        c = self.channels
        mu = ad.reshape(self.mu, (c, 1, 1))
        inv_s = ad.reshape(ad.exp(ad.scale(self.log_scale, -1.0)), (c, 1, 1))
        d = v - mu
        dt = v.dtype.type
        k = np.where(d.data > 0, dt(-1), dt(1))
        top = (v.data + 0.5 > self.support).astype(v.dtype)
        bot = (v.data - 0.5 < -self.support).astype(v.dtype)
        upper = ad.sigmoid(ad.mul((d + 0.5) * inv_s, k)) * (1 - top) + top * (k > 0)
        lower = ad.sigmoid(ad.mul((d - 0.5) * inv_s, k)) * (1 - bot) + bot * (k < 0)
        return ad.clamp_min((upper - lower) * k, self.floor)

    def pmf_table(self) -> np.ndarray:
        """``[C, 2L+1]`` float64 PMF over the integer support."""
        sym = np.arange(-self.support, self.support + 1, dtype=np.float64)
        grid = np.broadcast_to(sym, (self.channels, sym.size))
        pmf = logistic_likelihood_np(grid, self.mu.data, self.log_scale.data, self.support, 0.0)
        return pmf

    def symbol_bits(self, values: np.ndarray) -> np.ndarray:
        """Float64 code length ``-log2 p`` of each integer latent value."""
        p = logistic_likelihood_np(values, self.mu.data, self.log_scale.data, self.support, self.floor)
        return -np.log2(p)

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.mu.data, dtype="<f4").tobytes())
        h.update(np.ascontiguousarray(self.log_scale.data, dtype="<f4").tobytes())
        h.update(int(self.support).to_bytes(4, "little"))
        return h.hexdigest()[:16]


@dataclass
class LatentCode:
    values: np.ndarray  # int32 [C, h, w]
    model_digest: str

    @property
    def shape(self) -> tuple:
        return self.values.shape


def to_latent_code(y, entropy: FactorizedEntropyModel) -> LatentCode:
    """Round and clamp one latent ``[C, h, w]`` into the entropy model's support."""
    arr = y.data if isinstance(y, Tensor) else np.asarray(y)
    if arr.ndim == 4:
        if arr.shape[0] != 1:
            raise ad.ShapeError("to_latent_code takes a single latent")
        arr = arr[0]
    vals = np.clip(np.round(arr), -entropy.support, entropy.support).astype(np.int32)
    return LatentCode(vals, entropy.digest())


def quantize(y: Tensor, mode: str, rng: np.random.Generator | None = None) -> Tensor:
    """``noise``: add U(-0.5, 0.5); ``round``: nearest integer (no gradient); ``ste``: straight-through."""
    if mode == "noise":
        if rng is None:
            raise ValueError("noise quantization needs a seeded rng")
        u = rng.uniform(-0.5, 0.5, size=y.shape).astype(y.dtype)
        return y + Tensor(u)
    if mode == "round":
        return Tensor(np.round(y.data))
    if mode == "ste":
        return ad.ste_round(y)
    raise ValueError(f"unknown quantization mode {mode!r}")


def rate_estimate(y_hat: Tensor, entropy: FactorizedEntropyModel) -> Tensor:
    """Estimated code length in bits, ``-sum log2 p(y_hat)``."""
    return ad.scale(ad.sum_log2(entropy.likelihood(y_hat)), -1.0)


def bit_allocation_map(code: LatentCode, entropy: FactorizedEntropyModel) -> np.ndarray:
    """Per-location bits ``[h, w]``, summed over channels."""
    if code.model_digest != entropy.digest():
        raise ModelMismatchError("latent code was produced under a different entropy model")
    return entropy.symbol_bits(code.values).sum(axis=0)


def bit_map_diff(map_a: np.ndarray, map_b: np.ndarray) -> np.ndarray:
    a, b = np.asarray(map_a, np.float64), np.asarray(map_b, np.float64)
    if a.shape != b.shape:
        raise ad.ShapeError(f"bit maps differ in shape: {a.shape} vs {b.shape}")
    return a - b


class CodecModel(Module):
    """Three stride-2 conv encoder, mirrored transposed-conv decoder, factorized prior."""

    downsample_factor = 8

    def __init__(self, cfg: CodecConfig | None = None):
        cfg = cfg or CodecConfig()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        c1, c2 = cfg.channels
        c = cfg.latent_channels
        self.enc = [
            Conv2d(3, c1, 3, rng, "encoder", stride=2),
            Conv2d(c1, c2, 3, rng, "encoder", stride=2),
            Conv2d(c2, c, 3, rng, "encoder", stride=2),
        ]
        self.dec = [
            ConvTranspose2d(c, c2, rng, "decoder"),
            ConvTranspose2d(c2, c1, rng, "decoder"),
            ConvTranspose2d(c1, 3, rng, "decoder"),
        ]
        self.entropy = FactorizedEntropyModel(c, cfg.support, cfg.init_scale, cfg.likelihood_floor)

    @property
    def latent_channels(self) -> int:
        return self.cfg.latent_channels

    @property
    def penultimate_channels(self) -> int:
        return self.cfg.channels[0]

    def encode(self, x: Tensor) -> Tensor:
        x = ad.as_tensor(x)
        f = self.downsample_factor
        if x.ndim != 4 or x.shape[1] != 3:
            raise ad.ShapeError(f"encode expects [N, 3, H, W], got {x.shape}")
        if x.shape[2] % f or x.shape[3] % f:
            raise PaddingRequiredError(f"H, W = {x.shape[2:]} must be multiples of {f}; pad the input")
        h = ad.leaky_relu(self.enc[0](x), LEAK)
        h = ad.leaky_relu(self.enc[1](h), LEAK)
        return self.enc[2](h)

    def decode(self, y_hat: Tensor, with_tap: bool = False):
        """Reconstruct images in [0, 1]; ``with_tap`` also returns the input of the final layer."""
        y_hat = ad.as_tensor(y_hat)
        if y_hat.ndim != 4 or y_hat.shape[1] != self.latent_channels:
            raise ad.ShapeError(f"decode expects [N, {self.latent_channels}, h, w], got {y_hat.shape}")
        h = ad.leaky_relu(self.dec[0](y_hat), LEAK)
        tap = ad.leaky_relu(self.dec[1](h), LEAK)
        out = ad.sigmoid(self.dec[2](tap))
        return (out, tap) if with_tap else out

    def quantize_latent(self, y: Tensor, mode: str, rng=None) -> Tensor:
        return quantize(y, mode, rng)


class BypassCodec(Module):
    """Degenerate reference codec whose latent is the image itself.

    The latent is ``x * 2L - L`` at full resolution (3 channels, factor 1).
    With ``exact=True`` quantization is skipped, so reconstruction is perfect;
    otherwise rounding leaves a 1/(2L) step.
    """

    downsample_factor = 1

    def __init__(self, support: int = 64, exact: bool = True, init_scale: float = 16.0):
        self.exact = exact
        self.support = support
        self.entropy = FactorizedEntropyModel(3, support, init_scale)
        self.enc: list = []
        self.dec: list = []

    latent_channels = 3
    penultimate_channels = 3

    def encode(self, x: Tensor) -> Tensor:
        return ad.scale(ad.as_tensor(x), 2 * self.support) - float(self.support)

    def decode(self, y_hat: Tensor, with_tap: bool = False):
        out = ad.scale(ad.as_tensor(y_hat) + float(self.support), 1.0 / (2 * self.support))
        return (out, out) if with_tap else out

    def quantize_latent(self, y: Tensor, mode: str, rng=None) -> Tensor:
        if self.exact:
            return y
        return quantize(y, mode, rng)
