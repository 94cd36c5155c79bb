"""Neural augmentation: per-pixel colour transform followed by a residual affine warp.

The colour model maps every pixel (plus a per-image noise/context vector) to a
scale and shift, folds the result back into [0, 1] with a triangle wave, and
the geometric model emits a residual 2x3 affine matrix. Each transform is
mixed with the identity through a relaxed-Bernoulli gate whose probability is
learned as a logit.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError
from .numerics import MLP3, Module, Tensor, ops


@dataclass
class ImageBatch:
    """Pixels [B, H, W, 3] in [0, 1] plus optional one-hot labels [B, K]."""

    pixels: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        if self.pixels.ndim != 4 or self.pixels.shape[-1] != 3:
            raise DimensionError(f"pixels must be [B, H, W, 3], got {self.pixels.shape}")
        if self.labels is not None and self.labels.shape[0] != self.pixels.shape[0]:
            raise DimensionError("labels and pixels disagree on batch size")

    def __len__(self) -> int:
        return self.pixels.shape[0]

    def validate(self) -> None:
        if self.pixels.size and (self.pixels.min() < 0 or self.pixels.max() > 1):
            raise ValueError("pixel values must lie in [0, 1]")


class ColorModel(Module):
    """Two perceptrons: per-pixel RGB -> (alpha, beta) in R^{3x2} and
    per-image noise/context -> scalar (alpha, beta) added to every channel."""

    def __init__(self, rng: np.random.Generator, noise_dim: int = 128, context_dim: int = 0,
                 rgb_hidden: int = 128, noise_hidden: int = 512, drop_ratio: float = 0.8,
                 scale: float = 0.8, dtype=np.float64):
        self.rgb_path = MLP3(3, rgb_hidden, 6, rng, drop_ratio=drop_ratio, dtype=dtype)
        self.noise_path = MLP3(noise_dim + context_dim, noise_hidden, 2, rng,
                               drop_ratio=drop_ratio, dtype=dtype)
        self.scale = scale


class GeoModel(Module):
    """Perceptron from noise/context to the unnormalized 2x3 residual."""

    def __init__(self, rng: np.random.Generator, noise_dim: int = 128, context_dim: int = 0,
                 hidden: int = 512, drop_ratio: float = 0.8, scale: float = 0.5,
                 dtype=np.float64):
        self.mlp = MLP3(noise_dim + context_dim, hidden, 6, rng, drop_ratio=drop_ratio, dtype=dtype)
        self.scale = scale


class AugmentationPolicy(Module):
    """Colour model, geometric model and the two gate logits."""

    def __init__(self, rng: np.random.Generator, context_dim: int = 0, noise_dim: int = 128,
                 temperature: float = 0.05, c_scale: float = 0.8, g_scale: float = 0.5,
                 drop_ratio: float = 0.8, rgb_hidden: int = 128, noise_hidden: int = 512,
                 geo_hidden: int = 512, dtype=np.float64):
        self.color = ColorModel(rng, noise_dim, context_dim, rgb_hidden, noise_hidden,
                                drop_ratio, c_scale, dtype)
        self.geo = GeoModel(rng, noise_dim, context_dim, geo_hidden, drop_ratio, g_scale, dtype)
        self.gate_logit_c = Tensor(np.zeros((), dtype=dtype), requires_grad=True)
        self.gate_logit_g = Tensor(np.zeros((), dtype=dtype), requires_grad=True)
        self.temperature = temperature
        self.noise_dim = noise_dim
        self.context_dim = context_dim

    @property
    def dtype(self):
        return self.gate_logit_c.dtype

    def gate_probabilities(self) -> tuple[float, float]:
        sig = lambda v: float(1.0 / (1.0 + np.exp(-float(v))))  # noqa: E731
        return sig(self.gate_logit_c.data), sig(self.gate_logit_g.data)


@dataclass
class AugTrace:
    """Everything sampled or produced by one ``augment`` call."""

    z: np.ndarray
    w_c: Tensor
    w_g: Tensor
    alpha: Tensor
    beta: Tensor
    residual: Tensor
    color_out: Tensor          # colour-augmented, pre-geometric batch

    def summary(self) -> dict[str, float]:
        return {
            "mean_abs_A": float(np.mean(np.abs(self.residual.data))),
            "mean_abs_alpha_minus_1": float(np.mean(np.abs(self.alpha.data - 1.0))),
            "mean_abs_beta": float(np.mean(np.abs(self.beta.data))),
        }


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------
def triangle_wave(x: Tensor) -> Tensor:
    return ops.triangle_wave(x)


def _context(z, c, dtype) -> Tensor:
    z = z if isinstance(z, Tensor) else Tensor(np.asarray(z, dtype=dtype))
    if c is None:
        return z
    c = c if isinstance(c, Tensor) else Tensor(np.asarray(c, dtype=dtype))
    if c.shape[0] != z.shape[0]:
        raise DimensionError(f"noise {z.shape} and context {c.shape} batch sizes differ")
    return ops.concat([z, c], axis=-1)


# keeps the normalized ranges strictly open once sigmoid saturates in floating point
SIGMOID_MARGIN = 1e-6


def _bounded(u: Tensor, scale: float) -> Tensor:
    """scale * (sigmoid(u) - 0.5), with sigmoid held inside [m, 1 - m]."""
    return (ops.clip(ops.sigmoid(u), SIGMOID_MARGIN, 1.0 - SIGMOID_MARGIN) - 0.5) * scale


def color_params(policy: AugmentationPolicy, x, z, c=None,
                 rng: np.random.Generator | None = None) -> tuple[Tensor, Tensor]:
    """Per-pixel scale alpha in (1 - s/2, 1 + s/2) and shift beta in (-s/2, s/2)."""
    pixels = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=policy.dtype))
    if pixels.ndim != 4 or pixels.shape[-1] != 3:
        raise DimensionError(f"expected [B, H, W, 3] pixels, got {pixels.shape}")
    b, h, w, _ = pixels.shape
    model = policy.color
    ctx = _context(z, c, policy.dtype)
    if ctx.shape[-1] != model.noise_path.fc1.weight.shape[1]:
        raise DimensionError(
            f"noise path expects {model.noise_path.fc1.weight.shape[1]} inputs, got {ctx.shape[-1]}")
    rgb = model.rgb_path(ops.reshape(pixels, (b * h * w, 3)), rng)
    rgb = ops.reshape(rgb, (b, h, w, 6))
    glob = ops.reshape(model.noise_path(ctx, rng), (b, 1, 1, 2))
    alpha_un = rgb[..., :3] + glob[..., 0:1]
    beta_un = rgb[..., 3:] + glob[..., 1:2]
    alpha = _bounded(alpha_un, model.scale) + 1.0
    beta = _bounded(beta_un, model.scale)
    return alpha, beta


def apply_color(x, alpha: Tensor, beta: Tensor) -> Tensor:
    pixels = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=alpha.dtype))
    if alpha.shape != pixels.shape or beta.shape != pixels.shape:
        raise DimensionError("alpha/beta must match the pixel tensor shape")
    return ops.triangle_wave(alpha * pixels + beta)


def geo_params(policy: AugmentationPolicy, z, c=None,
               rng: np.random.Generator | None = None) -> Tensor:
    """Residual affine parameters A in (-s/2, s/2)^{2x3}."""
    ctx = _context(z, c, policy.dtype)
    raw = policy.geo.mlp(ctx, rng)
    resid = _bounded(raw, policy.geo.scale)
    return ops.reshape(resid, (ctx.shape[0], 2, 3))


def apply_affine(x, residual: Tensor) -> Tensor:
    pixels = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=residual.dtype))
    return ops.affine_resample(pixels, residual)


def sample_gate(p_logit: Tensor, temperature: float, rng: np.random.Generator | None = None,
                size: int | tuple = (), u: np.ndarray | None = None) -> Tensor:
    """Relaxed-Bernoulli weight sigmoid((L + log p) / tau), L ~ Logistic(0, 1).

    ``log p`` enters as written (not the log-odds), so for small tau the gate
    opens with probability p / (1 + p).
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    if u is None:
        u = rng.random(size)
    u = np.clip(np.asarray(u, dtype=np.float64), 1e-12, 1 - 1e-12)
    logistic = (np.log(u) - np.log1p(-u)).astype(p_logit.dtype)
    return ops.sigmoid((ops.log_sigmoid(p_logit) + logistic) * (1.0 / temperature))


def blend_gate(w_c: Tensor, alpha: Tensor, beta: Tensor, w_g: Tensor,
               residual: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    """Convex blend toward identity parameters (alpha=1, beta=0, A=0).

    Written as 1 + w (alpha - 1) so that alpha == 1 stays exactly 1.
    """
    wc = ops.reshape(w_c, w_c.shape + (1,) * (alpha.ndim - w_c.ndim))
    wg = ops.reshape(w_g, w_g.shape + (1,) * (residual.ndim - w_g.ndim))
    return (alpha - 1.0) * wc + 1.0, beta * wc, residual * wg


def augment(policy: AugmentationPolicy, x: ImageBatch, rng: np.random.Generator,
            force_gates: bool = False) -> tuple[Tensor, AugTrace]:
    """Apply colour then geometric augmentation to a batch.

    One z ~ N(0, I) per image is shared by both models; when the policy has a
    context input, the batch labels are concatenated to z. ``force_gates``
    fixes both gate weights at 1 (always apply). Returns the augmented pixels
    as a tensor (differentiable w.r.t. the policy) and the trace.
    """
    b = len(x)
    dtype = policy.dtype
    pixels = Tensor(x.pixels.astype(dtype, copy=False))
    z = rng.standard_normal((b, policy.noise_dim)).astype(dtype)
    c = None
    if policy.context_dim:
        if x.labels is None:
            raise DimensionError("policy expects a context vector but the batch has no labels")
        c = x.labels.astype(dtype, copy=False)

    alpha, beta = color_params(policy, pixels, z, c, rng)
    if force_gates:
        w_c = Tensor(np.ones(b, dtype=dtype))
    else:
        w_c = sample_gate(policy.gate_logit_c, policy.temperature, rng, size=b)
    resid = geo_params(policy, z, c, rng)
    if force_gates:
        w_g = Tensor(np.ones(b, dtype=dtype))
    else:
        w_g = sample_gate(policy.gate_logit_g, policy.temperature, rng, size=b)
    alpha_hat, beta_hat, resid_hat = blend_gate(w_c, alpha, beta, w_g, resid)
    colored = apply_color(pixels, alpha_hat, beta_hat)
    out = apply_affine(colored, resid_hat)
    trace = AugTrace(z=z, w_c=w_c, w_g=w_g, alpha=alpha, beta=beta, residual=resid,
                     color_out=colored)
    return out, trace
