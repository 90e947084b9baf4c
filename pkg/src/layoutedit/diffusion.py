"""Toy denoising diffusion backbone with named blocks and the
dual-branch conditioning injection.

Images live at 32x32; the latent is an exact space-to-depth repack to a
16x16 grid of 12-channel tokens (no learned autoencoder). The denoiser
is a U-shaped stack of token blocks (down1..down4, mid, up1..up4), each
with a residual MLP, self attention, and dual-branch cross attention.
Only the adapter-branch weights at the configured injection sites train.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .adapter import ConditionBundle, DualBranchAttention, dual_branch_attention
from .attention import SelfAttention, _proj
from .config import RunConfig
from .rng import Rng
from .tensor import (NumericsError, Param, Tensor, add, linear, mul, silu)

BLOCK_NAMES = ("down1", "down2", "down3", "down4", "mid",
               "up1", "up2", "up3", "up4")


# ----------------------------------------------------------------------
class NoiseSchedule:
    """Linear-beta DDPM schedule with cached cumulative products."""

    def __init__(self, t_train: int = 1000, beta_start: float = 1e-4,
                 beta_end: float = 2e-2):
        self.t_train = t_train
        self.betas = np.linspace(beta_start, beta_end, t_train)
        if not ((self.betas > 0).all() and (self.betas < 1).all()):
            raise ValueError("betas must lie in (0, 1)")
        self.alpha_bars = np.cumprod(1.0 - self.betas)

    def alpha_bar(self, t: int) -> float:
        if not 0 <= t < self.t_train:
            raise ValueError(f"timestep {t} outside [0, {self.t_train})")
        return float(self.alpha_bars[t])


def forward_noise(x0, t: int, eps, schedule: NoiseSchedule):
    """Closed-form q-sample: sqrt(a_bar)*x0 + sqrt(1-a_bar)*eps."""
    ab = schedule.alpha_bar(t)
    if isinstance(x0, Tensor) or isinstance(eps, Tensor):
        x0 = x0 if isinstance(x0, Tensor) else Tensor(x0)
        eps = eps if isinstance(eps, Tensor) else Tensor(eps)
        if x0.shape != eps.shape:
            raise ValueError(f"eps shape {eps.shape} != x0 shape {x0.shape}")
        return add(mul(x0, np.sqrt(ab)), mul(eps, np.sqrt(1.0 - ab)))
    if x0.shape != eps.shape:
        raise ValueError(f"eps shape {eps.shape} != x0 shape {x0.shape}")
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


# ----------------------------------------------------------------------
def image_to_latent(image: np.ndarray, factor: int = 2) -> np.ndarray:
    """[3, H, W] -> [h*w, 3*factor^2] exact space-to-depth repack."""
    c, hh, ww = image.shape
    h, w = hh // factor, ww // factor
    return (image.reshape(c, h, factor, w, factor)
            .transpose(1, 3, 0, 2, 4)
            .reshape(h * w, c * factor * factor))


def latent_to_image(latent: np.ndarray, image_size: int, factor: int = 2) -> np.ndarray:
    h = w = image_size // factor
    c = latent.shape[1] // (factor * factor)
    return (latent.reshape(h, w, c, factor, factor)
            .transpose(2, 0, 3, 1, 4)
            .reshape(c, image_size, image_size))


def timestep_embedding(t: int, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    ang = t * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)])


# ----------------------------------------------------------------------
class DenoiserBlock:
    """Residual MLP + self attention + dual-branch cross attention."""

    def __init__(self, name: str, d_model: int, d_t: int, d_i: int,
                 heads: int, rng: Rng):
        r = rng.spawn(name)
        self.name = name
        self.w1 = _proj(f"{name}.w1", r, d_model, d_model)
        self.b1 = Param(f"{name}.b1", np.zeros(d_model))
        self.w2 = _proj(f"{name}.w2", r, d_model, d_model, std=0.1 / np.sqrt(d_model))
        self.attn = SelfAttention(f"{name}.attn", r, d_model, d_model, heads)
        self.cross = DualBranchAttention(f"{name}.cross", d_model, d_t, d_i, heads, r)
        # damp the frozen residual branches so activations stay O(1)
        # across the nine-block stack
        self.attn.w_o.tensor.data *= 0.2
        self.cross.w_ot.tensor.data *= 0.2

    def backbone_params(self):
        return ([self.w1, self.b1, self.w2] + self.attn.params()
                + self.cross.frozen_params())

    def forward(self, x: Tensor, bundle: ConditionBundle, lam: float,
                weights_out: dict | None = None) -> Tensor:
        x = add(x, linear(silu(linear(x, self.w1.tensor, self.b1.tensor)),
                          self.w2.tensor))
        x = add(x, self.attn(x))
        return add(x, dual_branch_attention(self.cross, x, bundle.f_t, bundle.f,
                                            lam, weights_out=weights_out))


class DenoiserState:
    """Block parameters keyed by name plus the injection configuration."""

    def __init__(self, config: RunConfig, rng: Rng):
        self.config = config
        self.schedule = NoiseSchedule(config.t_train)
        self.factor = 2
        grid = config.image_size // self.factor
        self.n_tokens = grid * grid
        self.d_latent = 3 * self.factor * self.factor
        d = config.d_model
        r = rng.spawn("denoiser")
        self.w_in = _proj("den.w_in", r, self.d_latent, d)
        self.pos = Param("den.pos", r.spawn("pos").normal((self.n_tokens, d), std=0.1))
        self.w_time = _proj("den.w_time", r, d, d)
        self.b_time = Param("den.b_time", np.zeros(d))
        self.blocks = {name: DenoiserBlock(f"den.{name}", d, config.d_t,
                                           config.d_i, config.heads, r)
                       for name in BLOCK_NAMES}
        self.w_out = _proj("den.w_out", r, d, self.d_latent, std=0.3 / np.sqrt(d))
        # Deliberate output bias: a fresh model predicts noise with a fixed
        # offset of magnitude 3 that the adapter branch can learn to cancel.
        signs = np.where(np.arange(self.d_latent) % 2 == 0, 1.0, -1.0)
        self.b_out = Param("den.b_out",
                           3.0 * signs
                           + r.spawn("b_out").normal((self.d_latent,), std=0.3))

    # ------------------------------------------------------------------
    def active_sites(self) -> tuple:
        pos = self.config.injection.position
        return BLOCK_NAMES if pos == "all" else (pos,)

    def site_scale(self, name: str) -> float:
        # In the "all" ablation only down4 uses the configured scale;
        # other sites keep scale 1.
        if self.config.injection.position == "all" and name != "down4":
            return 1.0
        return self.config.injection.ip_scale

    def backbone_params(self):
        ps = [self.w_in, self.pos, self.w_time, self.b_time,
              self.w_out, self.b_out]
        for name in BLOCK_NAMES:
            ps += self.blocks[name].backbone_params()
        return ps

    def ip_params(self, sites=None):
        sites = self.active_sites() if sites is None else sites
        ps = []
        for name in sites:
            ps += self.blocks[name].cross.ip_params()
        return ps

    def all_params(self):
        return self.backbone_params() + self.ip_params(BLOCK_NAMES)

    def set_trainable(self):
        """Freeze everything except the adapter branch at active sites."""
        for p in self.all_params():
            p.tensor.requires_grad = False
        for p in self.ip_params():
            p.tensor.requires_grad = True
        return self.ip_params()

    def set_dtype(self, dtype):
        for p in self.all_params():
            p.set_dtype(dtype)

    # ------------------------------------------------------------------
    def forward(self, z, t: int, bundle: ConditionBundle | None,
                weights_out: dict | None = None) -> Tensor:
        """Predict noise for latent tokens z at timestep t.

        bundle=None is the fully unconditional pass (empty adapter token
        and zeroed text tokens).
        """
        z = z if isinstance(z, Tensor) else Tensor(z)
        if bundle is None:
            bundle = self.null_bundle()
        dt = self.w_in.data.dtype
        temb = silu(linear(
            Tensor(timestep_embedding(t, self.config.d_model)[None, :].astype(dt)),
            self.w_time.tensor, self.b_time.tensor))
        x = add(add(linear(z, self.w_in.tensor), self.pos.tensor), temb)
        active = set(self.active_sites())
        for name in BLOCK_NAMES:
            lam = bundle.lam * self.site_scale(name) if name in active else 0.0
            wo = None
            if weights_out is not None and name in weights_out:
                wo = weights_out[name]
            x = self.blocks[name].forward(x, bundle, lam, weights_out=wo)
        return linear(x, self.w_out.tensor, self.b_out.tensor)

    def null_bundle(self) -> ConditionBundle:
        dt = self.w_in.data.dtype
        return ConditionBundle(
            f_t=Tensor(np.zeros((1, self.config.d_t), dtype=dt)),
            f=Tensor(np.zeros((1, self.config.d_i), dtype=dt)),
            lam=self.config.lam)

    def drop_image_condition(self, bundle: ConditionBundle) -> ConditionBundle:
        """Replace the adapter token by a zero token (condition dropout)."""
        return ConditionBundle(f_t=bundle.f_t,
                               f=Tensor(np.zeros_like(bundle.f.data)),
                               lam=bundle.lam)


# ----------------------------------------------------------------------
@dataclass
class TrainStepResult:
    loss: float
    dropped: list        # per-sample condition-dropout flags


def training_step(state: DenoiserState, batch, bundle, rng: Rng,
                  eps_model=None) -> TrainStepResult:
    """One objective evaluation: sample t and noise, form x_t, drop the
    image condition at the configured rate, and backpropagate the mean
    squared noise-prediction error.

    `batch` is a list of clean latents [n_tokens, d_latent]; `bundle` is
    one ConditionBundle or a list matching the batch. `eps_model`
    overrides the denoiser (test hook).
    """
    bundles = bundle if isinstance(bundle, (list, tuple)) else [bundle] * len(batch)
    if len(bundles) != len(batch):
        raise ValueError(f"{len(bundles)} bundles for {len(batch)} samples")
    model = eps_model or state.forward
    total = None
    dropped = []
    for x0, b in zip(batch, bundles):
        x0 = np.asarray(x0)
        t = rng.randint(state.schedule.t_train)
        eps = rng.normal(x0.shape).astype(x0.dtype)
        drop = rng.uniform() < state.config.dropout_rate
        dropped.append(bool(drop))
        x_t = forward_noise(x0, t, eps, state.schedule)
        cond = state.drop_image_condition(b) if drop else b
        pred = model(x_t, t, cond)
        err = pred - Tensor(eps)
        term = (err * err).mean()
        total = term if total is None else total + term
    loss = total * (1.0 / len(batch))
    value = loss.item()
    if not np.isfinite(value):
        raise NumericsError(f"non-finite loss {value} (last t={t}, "
                            f"batch={len(batch)})")
    loss.backward()
    return TrainStepResult(loss=value, dropped=dropped)


# ----------------------------------------------------------------------
def guided_eps(state: DenoiserState, x_t, t: int, bundle: ConditionBundle,
               w: float) -> np.ndarray:
    """w * conditional prediction + (1 - w) * unconditional prediction."""
    cond = state.forward(x_t, t, bundle).data
    uncond = state.forward(x_t, t, state.drop_image_condition(bundle)).data
    return w * cond + (1.0 - w) * uncond


def sample(state: DenoiserState, bundle: ConditionBundle, w: float,
           steps: int, rng: Rng, trace: list | None = None) -> np.ndarray:
    """Deterministic DDIM loop over an evenly spaced timestep subset.

    Returns the final clean latent [n_tokens, d_latent]. When `trace` is
    given, (t, x_t) pairs are appended before each update.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    dt = state.w_in.data.dtype
    taus = np.linspace(state.schedule.t_train - 1, 0, steps).round().astype(int)
    x = rng.normal((state.n_tokens, state.d_latent)).astype(dt)
    for i, t in enumerate(taus):
        if trace is not None:
            trace.append((int(t), x.copy()))
        eps_hat = guided_eps(state, x, int(t), bundle, w)
        ab_t = state.schedule.alpha_bar(int(t))
        ab_prev = state.schedule.alpha_bar(int(taus[i + 1])) if i + 1 < steps else 1.0
        x0_pred = (x - np.sqrt(1.0 - ab_t) * eps_hat) / np.sqrt(ab_t)
        x = (np.sqrt(ab_prev) * x0_pred
             + np.sqrt(1.0 - ab_prev) * eps_hat).astype(dt)
    return x
