"""Invertible flow layers and the multi-scale model.

Every layer implements:

* ``forward(x) -> (y, logdet_total, cache)`` where logdet_total is the
  log |det J| summed over the batch,
* ``inverse(y) -> x``,
* ``backward(grad_y, grad_logdet, cache) -> grad_x`` which accumulates
  parameter gradients.  ``grad_logdet`` is dLoss/d(logdet_total), a
  scalar (-1/N for the mean negative log likelihood).

Gradients are analytic; no autodiff framework is involved.  The finite
difference suite in the tests is the correctness oracle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import (
    MissingCache,
    OddChannels,
    OddSpatialDims,
    ShapeMismatch,
    SingularWeight,
    ZeroScale,
)
from .invconv import (
    FincFlowUnit,
    MaskedKernel,
    PaddedConvBlock,
    UNIT_ORIENTATIONS,
    random_masked_kernel,
    identity_kernel,
    unit_backward,
    unit_forward,
    unit_invert,
)
from .tensor import require_nchw

LOG_2PI = math.log(2.0 * math.pi)


class Param:
    """A learnable array with its gradient accumulator."""

    __slots__ = ("value", "grad")

    def __init__(self, value: np.ndarray):
        self.value = np.asarray(value)
        self.grad = np.zeros_like(self.value)

    def zero_grad(self):
        self.grad[...] = 0.0


def _need(cache):
    if cache is None:
        raise MissingCache("backward called without a forward cache")
    return cache


def gaussian_logp(z, mean, log_sd):
    """Elementwise log N(z; mean, exp(log_sd)^2)."""
    inv_var = np.exp(-2.0 * log_sd)
    return -0.5 * LOG_2PI - log_sd - 0.5 * (z - mean) ** 2 * inv_var


def gaussian_logp_grads(z, mean, log_sd):
    """(dlogp/dz, dlogp/dmean, dlogp/dlog_sd), elementwise."""
    inv_var = np.exp(-2.0 * log_sd)
    diff = (z - mean) * inv_var
    return -diff * 1.0, diff, -1.0 + (z - mean) ** 2 * inv_var


# ---------------------------------------------------------------------------
# plumbing convolutions for the coupling and prior nets


class Conv2d:
    """Same-padded stride-1 cross-correlation with bias (k odd)."""

    def __init__(self, c_in, c_out, k, rng=None, dtype=np.float64, zero_init=False):
        if zero_init:
            w = np.zeros((c_out, c_in, k, k), dtype=dtype)
        else:
            w = (rng.normal(scale=0.05, size=(c_out, c_in, k, k))).astype(dtype)
        self.w = Param(w)
        self.b = Param(np.zeros(c_out, dtype=dtype))
        self.k = k

    def named_params(self, prefix):
        yield f"{prefix}.w", self.w
        yield f"{prefix}.b", self.b

    def _padded(self, x):
        p = self.k // 2
        if p == 0:
            return x
        return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))

    def forward(self, x):
        k = self.k
        h, w = x.shape[2], x.shape[3]
        xp = self._padded(x)
        kw = self.w.value
        y = np.zeros((x.shape[0], kw.shape[0], h, w), dtype=x.dtype)
        for p in range(k):
            for q in range(k):
                y += np.einsum("oc,nchw->nohw", kw[:, :, p, q], xp[:, :, p : p + h, q : q + w])
        return y + self.b.value[None, :, None, None]

    def backward(self, gy, x):
        k = self.k
        h, w = x.shape[2], x.shape[3]
        xp = self._padded(x)
        for p in range(k):
            for q in range(k):
                self.w.grad[:, :, p, q] += np.einsum(
                    "nohw,nchw->oc", gy, xp[:, :, p : p + h, q : q + w]
                )
        self.b.grad += gy.sum(axis=(0, 2, 3))
        # input gradient: same-padded correlation with the channel-transposed,
        # spatially flipped kernel
        kt = np.ascontiguousarray(self.w.value.swapaxes(0, 1)[:, :, ::-1, ::-1])
        gp = self._padded(gy)
        gx = np.zeros_like(x)
        for p in range(k):
            for q in range(k):
                gx += np.einsum("oc,nchw->nohw", kt[:, :, p, q], gp[:, :, p : p + h, q : q + w])
        return gx


class CouplingNet:
    """3x3 conv, rectifier, 1x1 conv, rectifier, zero-initialized 3x3 conv."""

    def __init__(self, c_in, c_out, hidden, rng, dtype):
        self.conv1 = Conv2d(c_in, hidden, 3, rng, dtype)
        self.conv2 = Conv2d(hidden, hidden, 1, rng, dtype)
        self.conv3 = Conv2d(hidden, c_out, 3, dtype=dtype, zero_init=True)

    def named_params(self, prefix):
        yield from self.conv1.named_params(f"{prefix}.conv1")
        yield from self.conv2.named_params(f"{prefix}.conv2")
        yield from self.conv3.named_params(f"{prefix}.conv3")

    def forward(self, x):
        h1 = self.conv1.forward(x)
        a1 = np.maximum(h1, 0.0)
        h2 = self.conv2.forward(a1)
        a2 = np.maximum(h2, 0.0)
        out = self.conv3.forward(a2)
        return out, (x, h1, a1, h2, a2)

    def backward(self, gout, cache):
        x, h1, a1, h2, a2 = cache
        ga2 = self.conv3.backward(gout, a2)
        gh2 = ga2 * (h2 > 0)
        ga1 = self.conv2.backward(gh2, a1)
        gh1 = ga1 * (h1 > 0)
        return self.conv1.backward(gh1, x)


# ---------------------------------------------------------------------------
# flow layers


class ActNorm:
    """Per-channel affine y = scale * x + bias with data-dependent init."""

    def __init__(self, c, dtype=np.float64, data_init=True):
        self.scale = Param(np.ones(c, dtype=dtype))
        self.bias = Param(np.zeros(c, dtype=dtype))
        self.pending_init = data_init

    def named_params(self, prefix):
        yield f"{prefix}.scale", self.scale
        yield f"{prefix}.bias", self.bias

    def _init_from(self, x):
        mean = x.mean(axis=(0, 2, 3))
        std = x.std(axis=(0, 2, 3)) + np.asarray(1e-6, dtype=x.dtype)
        self.scale.value = (1.0 / std).astype(x.dtype)
        self.bias.value = (-mean / std).astype(x.dtype)
        self.scale.grad = np.zeros_like(self.scale.value)
        self.bias.grad = np.zeros_like(self.bias.value)
        self.pending_init = False

    def _check_scale(self):
        if np.any(self.scale.value == 0.0):
            raise ZeroScale("actnorm scale has a zero entry")

    def forward(self, x):
        if self.pending_init:
            self._init_from(x)
        self._check_scale()
        n, _, h, w = x.shape
        s = self.scale.value[None, :, None, None]
        y = s * x + self.bias.value[None, :, None, None]
        logdet = n * h * w * float(np.log(np.abs(self.scale.value)).sum())
        return y, logdet, (x, x.shape)

    def inverse(self, y):
        if self.pending_init:
            raise ZeroScale("actnorm not initialized; run a forward pass first")
        self._check_scale()
        s = self.scale.value[None, :, None, None]
        return (y - self.bias.value[None, :, None, None]) / s

    def backward(self, gy, gld, cache):
        x, (n, _, h, w) = _need(cache)
        gx = gy * self.scale.value[None, :, None, None]
        self.scale.grad += (gy * x).sum(axis=(0, 2, 3)) + gld * n * h * w / self.scale.value
        self.bias.grad += gy.sum(axis=(0, 2, 3))
        return gx


class Inv1x1:
    """Per-pixel channel mix by a dense C x C matrix."""

    DET_FLOOR = 1e-12

    def __init__(self, c, rng=None, dtype=np.float64, identity_init=False):
        if identity_init or rng is None:
            w = np.eye(c, dtype=dtype)
        else:
            q, _ = np.linalg.qr(rng.normal(size=(c, c)))
            w = q.astype(dtype)
        self.w = Param(w)

    def named_params(self, prefix):
        yield f"{prefix}.w", self.w

    def _logabsdet(self):
        sign, logabs = np.linalg.slogdet(self.w.value.astype(np.float64))
        if sign == 0.0 or logabs < math.log(self.DET_FLOOR):
            raise SingularWeight("1x1 weight matrix is numerically singular")
        return float(logabs)

    def forward(self, x):
        n, _, h, w = x.shape
        logdet = n * h * w * self._logabsdet()
        y = np.einsum("oc,nchw->nohw", self.w.value, x)
        return y, logdet, (x, x.shape)

    def inverse(self, y):
        self._logabsdet()
        n, c, h, w = y.shape
        flat = y.transpose(1, 0, 2, 3).reshape(c, -1)
        x = np.linalg.solve(self.w.value.astype(np.float64), flat.astype(np.float64))
        return x.reshape(c, n, h, w).transpose(1, 0, 2, 3).astype(y.dtype)

    def backward(self, gy, gld, cache):
        x, (n, _, h, w) = _need(cache)
        gx = np.einsum("oc,nohw->nchw", self.w.value, gy)
        self.w.grad += np.einsum("nohw,nchw->oc", gy, x)
        winv_t = np.linalg.inv(self.w.value.astype(np.float64)).T
        self.w.grad += gld * n * h * w * winv_t.astype(self.w.grad.dtype)
        return gx


class Coupling:
    """First channel half passes through and parameterizes an affine map
    of the second half.  Scale is 2*sigmoid(raw), in (0, 2) and exactly 1
    under the zero-initialized final convolution."""

    def __init__(self, c, hidden, rng, dtype=np.float64):
        if c % 2:
            raise OddChannels(f"coupling needs even C, got {c}")
        self.c_half = c // 2
        self.net = CouplingNet(self.c_half, c, hidden, rng, dtype)

    def named_params(self, prefix):
        yield from self.net.named_params(f"{prefix}.net")

    def _scale_shift(self, x1):
        out, net_cache = self.net.forward(x1)
        t = out[:, : self.c_half]
        raw = out[:, self.c_half :]
        s = 2.0 / (1.0 + np.exp(-raw))
        return s, t, net_cache

    def forward(self, x):
        x1 = x[:, : self.c_half]
        x2 = x[:, self.c_half :]
        s, t, net_cache = self._scale_shift(x1)
        y2 = x2 * s + t
        logdet = float(np.log(s).sum())
        y = np.concatenate([x1, y2], axis=1)
        return y, logdet, (x2, s, net_cache)

    def inverse(self, y):
        y1 = y[:, : self.c_half]
        y2 = y[:, self.c_half :]
        s, t, _ = self._scale_shift(y1)
        return np.concatenate([y1, (y2 - t) / s], axis=1)

    def backward(self, gy, gld, cache):
        x2, s, net_cache = _need(cache)
        gy1 = gy[:, : self.c_half]
        gy2 = gy[:, self.c_half :]
        gx2 = gy2 * s
        gs = gy2 * x2 + gld / s
        graw = gs * s * (1.0 - 0.5 * s)
        gout = np.concatenate([gy2, graw], axis=1)
        gx1 = self.net.backward(gout, net_cache)
        return np.concatenate([gy1 + gx1, gx2], axis=1)


class Squeeze:
    """2x2 spatial-to-channel rearrangement; exact, volume preserving."""

    @staticmethod
    def forward(x):
        n, c, h, w = x.shape
        if h % 2 or w % 2:
            raise OddSpatialDims(f"squeeze needs even H, W, got {h}x{w}")
        z = x.reshape(n, c, h // 2, 2, w // 2, 2)
        z = z.transpose(0, 1, 3, 5, 2, 4)
        return np.ascontiguousarray(z.reshape(n, 4 * c, h // 2, w // 2))

    @staticmethod
    def inverse(y):
        n, c4, h, w = y.shape
        if c4 % 4:
            raise OddChannels(f"unsqueeze needs C divisible by 4, got {c4}")
        c = c4 // 4
        z = y.reshape(n, c, 2, 2, h, w)
        z = z.transpose(0, 1, 4, 2, 5, 3)
        return np.ascontiguousarray(z.reshape(n, c, 2 * h, 2 * w))

    @staticmethod
    def backward(gy):
        return Squeeze.inverse(gy)


class Split:
    """Drops the second channel half as a Gaussian latent whose prior
    parameters come from a zero-initialized conv over the retained half."""

    def __init__(self, c, rng, dtype=np.float64):
        if c % 2:
            raise OddChannels(f"split needs even C, got {c}")
        self.c_half = c // 2
        self.prior = Conv2d(self.c_half, c, 3, dtype=dtype, zero_init=True)

    def named_params(self, prefix):
        yield from self.prior.named_params(f"{prefix}.prior")

    def _prior_params(self, x1):
        out = self.prior.forward(x1)
        return out[:, : self.c_half], out[:, self.c_half :]

    def forward(self, x):
        x1 = x[:, : self.c_half]
        z = x[:, self.c_half :]
        mean, log_sd = self._prior_params(x1)
        logp = float(gaussian_logp(z, mean, log_sd).sum())
        return x1, z, logp, (x1, z, mean, log_sd)

    def inverse(self, x1, z):
        return np.concatenate([x1, z], axis=1)

    def sample_z(self, x1, temperature, rng):
        mean, log_sd = self._prior_params(x1)
        if temperature == 0.0:
            return mean.astype(x1.dtype)
        eps = rng.standard_normal(mean.shape).astype(x1.dtype)
        return (mean + np.exp(log_sd) * temperature * eps).astype(x1.dtype)

    def backward(self, g_x1, g_logp, cache):
        x1, z, mean, log_sd = _need(cache)
        dz, dmean, dlog_sd = gaussian_logp_grads(z, mean, log_sd)
        gz = g_logp * dz
        gout = np.concatenate([g_logp * dmean, g_logp * dlog_sd], axis=1)
        g_x1_prior = self.prior.backward(gout, x1)
        return np.concatenate([g_x1 + g_x1_prior, gz], axis=1)


class UnitLayer:
    """Four masked padded-convolution blocks on channel quarters."""

    def __init__(self, c, k, rng=None, dtype=np.float64, identity_init=False):
        self.c = c
        self.k = k
        if identity_init or rng is None:
            kernels = [identity_kernel(c // 4, k, o, dtype) for o in UNIT_ORIENTATIONS]
        else:
            kernels = [
                random_masked_kernel(c // 4, k, o, rng, dtype) for o in UNIT_ORIENTATIONS
            ]
        self.kernels = [Param(kern.weights) for kern in kernels]

    def named_params(self, prefix):
        for i, p in enumerate(self.kernels):
            yield f"{prefix}.k{i}", p

    def unit(self) -> FincFlowUnit:
        return FincFlowUnit(
            [
                PaddedConvBlock(MaskedKernel(p.value, o))
                for p, o in zip(self.kernels, UNIT_ORIENTATIONS)
            ]
        )

    def forward(self, x):
        y, logdet = unit_forward(x, self.unit())
        return y, logdet, (x,)

    def inverse(self, y, workers=1):
        return unit_invert(y, self.unit(), workers=workers)

    def backward(self, gy, gld, cache):
        (x,) = _need(cache)
        gx, gws = unit_backward(gy, x, self.unit())
        for p, gw in zip(self.kernels, gws):
            p.grad += gw
        return gx


class FlowStep:
    """Unit, actnorm, 1x1 convolution, coupling, in that order."""

    def __init__(self, c, k, hidden, rng, dtype, identity_init=False, data_init=True):
        self.unit = UnitLayer(c, k, rng, dtype, identity_init)
        self.actnorm = ActNorm(c, dtype, data_init=data_init and not identity_init)
        self.inv1x1 = Inv1x1(c, rng, dtype, identity_init=identity_init)
        self.coupling = Coupling(c, hidden, rng, dtype)

    def named_params(self, prefix):
        yield from self.unit.named_params(f"{prefix}.unit")
        yield from self.actnorm.named_params(f"{prefix}.actnorm")
        yield from self.inv1x1.named_params(f"{prefix}.inv1x1")
        yield from self.coupling.named_params(f"{prefix}.coupling")

    def forward(self, x):
        total = 0.0
        caches = []
        for layer in (self.unit, self.actnorm, self.inv1x1, self.coupling):
            x, ld, cache = layer.forward(x)
            total += ld
            caches.append(cache)
        return x, total, caches

    def inverse(self, y, workers=1):
        y = self.coupling.inverse(y)
        y = self.inv1x1.inverse(y)
        y = self.actnorm.inverse(y)
        return self.unit.inverse(y, workers=workers)

    def backward(self, gy, gld, caches):
        caches = _need(caches)
        for layer, cache in zip(
            (self.coupling, self.inv1x1, self.actnorm, self.unit), reversed(caches)
        ):
            gy = layer.backward(gy, gld, cache)
        return gy


@dataclass
class ModelConfig:
    channels: int
    height: int
    width: int
    levels: int
    steps: int
    kernel_size: int = 3
    hidden: int = 64
    dtype: str = "f32"

    def numpy_dtype(self):
        return np.float32 if self.dtype == "f32" else np.float64

    def validate(self):
        div = 2**self.levels
        if self.height % div or self.width % div:
            raise ShapeMismatch(
                f"H={self.height}, W={self.width} must be divisible by 2^L={div}"
            )
        if self.levels < 1 or self.steps < 1:
            raise ShapeMismatch("levels and steps must be >= 1")


class FlowModel:
    """Multi-scale stack: (squeeze, K steps, split) x (L-1), then squeeze
    and K steps; the final activation and every split half are Gaussian
    latents."""

    def __init__(self, config: ModelConfig, rng=None, identity_init=False, data_init=True):
        config.validate()
        self.config = config
        dtype = config.numpy_dtype()
        self.dtype = dtype
        if rng is None:
            rng = np.random.default_rng(0)
        c = config.channels
        self.levels = []
        for lvl in range(config.levels):
            c *= 4
            steps = [
                FlowStep(
                    c,
                    config.kernel_size,
                    config.hidden,
                    rng,
                    dtype,
                    identity_init=identity_init,
                    data_init=data_init,
                )
                for _ in range(config.steps)
            ]
            split = None
            if lvl < config.levels - 1:
                split = Split(c, rng, dtype)
                c //= 2
            self.levels.append((steps, split))
        self.final_c = c
        self.prior_mean = Param(np.zeros(c, dtype=dtype))
        self.prior_log_sd = Param(np.zeros(c, dtype=dtype))
        self._cache = None

    # -- parameters ---------------------------------------------------------

    def named_params(self):
        for li, (steps, split) in enumerate(self.levels):
            for si, step in enumerate(steps):
                yield from step.named_params(f"level{li}.step{si}")
            if split is not None:
                yield from split.named_params(f"level{li}.split")
        yield "prior.mean", self.prior_mean
        yield "prior.log_sd", self.prior_log_sd

    def zero_grad(self):
        for _, p in self.named_params():
            p.zero_grad()

    def unit_params(self):
        """(param, orientation) pairs for every masked kernel."""
        for steps, _ in self.levels:
            for step in steps:
                yield from zip(step.unit.kernels, UNIT_ORIENTATIONS)

    # -- forward / inverse --------------------------------------------------

    def _check_input(self, x):
        x = require_nchw(x)
        cfg = self.config
        if x.shape[1:] != (cfg.channels, cfg.height, cfg.width):
            raise ShapeMismatch(
                f"input {x.shape[1:]} does not match model {cfg.channels, cfg.height, cfg.width}"
            )
        if x.dtype != self.dtype:
            raise ShapeMismatch(f"input dtype {x.dtype} != model dtype {self.dtype}")
        return x

    def forward(self, x):
        """Returns (latents, logdet_total, logp_total) and stores the
        backward cache.  Totals are summed over the batch, in nats."""
        x = self._check_input(x)
        h = x
        logdet = 0.0
        logp = 0.0
        latents = []
        caches = []
        for steps, split in self.levels:
            h = Squeeze.forward(h)
            step_caches = []
            for step in steps:
                h, ld, cache = step.forward(h)
                logdet += ld
                step_caches.append(cache)
            split_cache = None
            if split is not None:
                h, z, lp, split_cache = split.forward(h)
                logp += lp
                latents.append(z)
            caches.append((step_caches, split_cache))
        mean = self.prior_mean.value[None, :, None, None]
        log_sd = self.prior_log_sd.value[None, :, None, None]
        logp += float(gaussian_logp(h, mean, log_sd).sum())
        latents.append(h)
        self._cache = (caches, h)
        return latents, logdet, logp

    def latent_shapes(self, n):
        shapes = []
        c = self.config.channels
        h, w = self.config.height, self.config.width
        for lvl in range(self.config.levels):
            c *= 4
            h //= 2
            w //= 2
            if lvl < self.config.levels - 1:
                shapes.append((n, c // 2, h, w))
                c //= 2
        shapes.append((n, c, h, w))
        return shapes

    def inverse(self, latents, workers=1):
        """Reconstruct the input from a latent stack."""
        shapes = self.latent_shapes(latents[-1].shape[0])
        if len(latents) != len(shapes):
            raise ShapeMismatch(f"expected {len(shapes)} latents, got {len(latents)}")
        for z, want in zip(latents, shapes):
            if tuple(z.shape) != want:
                raise ShapeMismatch(f"latent shape {z.shape}, expected {want}")
        h = latents[-1].astype(self.dtype, copy=False)
        zi = len(latents) - 2
        for steps, split in reversed(self.levels):
            if split is not None:
                h = split.inverse(h, latents[zi].astype(self.dtype, copy=False))
                zi -= 1
            for step in reversed(steps):
                h = step.inverse(h, workers=workers)
            h = Squeeze.inverse(h)
        return h

    def sample(self, n, temperature=1.0, rng=None, workers=1):
        """Draw latents from the priors (std scaled by temperature) and
        run the inverse flow."""
        if temperature < 0.0:
            raise ShapeMismatch(f"temperature must be >= 0, got {temperature}")
        if rng is None:
            rng = np.random.default_rng(0)
        shape = self.latent_shapes(n)[-1]
        mean = np.broadcast_to(self.prior_mean.value[None, :, None, None], shape)
        sd = np.exp(self.prior_log_sd.value)[None, :, None, None]
        if temperature == 0.0:
            h = np.ascontiguousarray(mean, dtype=self.dtype)
        else:
            eps = rng.standard_normal(shape).astype(self.dtype)
            h = (mean + sd * temperature * eps).astype(self.dtype)
        for steps, split in reversed(self.levels):
            if split is not None:
                z = split.sample_z(h, temperature, rng)
                h = split.inverse(h, z)
            for step in reversed(steps):
                h = step.inverse(h, workers=workers)
            h = Squeeze.inverse(h)
        return h

    # -- backward -----------------------------------------------------------

    def backward(self, n_samples=None):
        """Accumulate gradients of mean-per-sample NLL = -(logp+logdet)/N
        into every parameter; returns the input gradient."""
        if self._cache is None:
            raise MissingCache("model backward requires a prior forward call")
        caches, h_final = self._cache
        n = n_samples if n_samples is not None else h_final.shape[0]
        gld = -1.0 / n
        mean = self.prior_mean.value[None, :, None, None]
        log_sd = self.prior_log_sd.value[None, :, None, None]
        dz, dmean, dlog_sd = gaussian_logp_grads(h_final, mean, log_sd)
        g = gld * dz
        self.prior_mean.grad += gld * dmean.sum(axis=(0, 2, 3))
        self.prior_log_sd.grad += gld * dlog_sd.sum(axis=(0, 2, 3))
        for (steps, split), (step_caches, split_cache) in zip(
            reversed(self.levels), reversed(caches)
        ):
            if split is not None:
                g = split.backward(g, gld, split_cache)
            for step, cache in zip(reversed(steps), reversed(step_caches)):
                g = step.backward(g, gld, cache)
            g = Squeeze.backward(g)
        return g
