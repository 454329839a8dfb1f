"""Training objective: reconstruction, multi-step latent consistency,
multi-step pixel prediction, and the variational inducing regularizer.

Monte-Carlo expectations use a single reparameterized draw each. Every loss
takes an explicit torch.Generator; the draw order inside each op is fixed and
documented so a fixed seed makes any of them bit-reproducible:

  recon_loss:          one (B, |z|) draw for the decoded latent.
  reg_loss_multistep:  one (B, H, |z|) draw for the encoder history samples,
                       then one (B, |z|) draw after each of the first T-1
                       steps (the step-T belief is scored but not propagated).
  recon_next_multistep: one (B, H, |z|) history draw, then one (B, |z|) draw
                       per step (every step's sample is decoded).

`total_loss` derives one child seed per stochastic component from its
generator (order: recon, reg, recon_next) and then calls the standalone ops,
so each component can be recomputed independently from the same parent seed
and recombined exactly. The weighted total is accumulated in float64, making
the recombination identity exact at the 1e-10 level regardless of the model
dtype. `deterministic=True` replaces every draw with the belief mean (no
generator draws are consumed), which also makes the losses exactly invariant
to batch-order permutation up to the symmetric mean reduction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import Tensor

from .data import WindowBatch
from .errors import ValidationError
from .gp import diag_gaussian_kl_terms
from .models import LatentBelief, ModelBundle, sample_latent


@dataclass(frozen=True)
class LossWeights:
    """Scale of the consistency regularizer (w_reg), scale of the inducing
    regularizer (w_var), and the multi-step horizon T."""

    w_reg: float = 1.0
    w_var: float = 1e-2
    horizon: int = 3

    def __post_init__(self):
        if self.w_reg < 0 or self.w_var < 0:
            raise ValidationError("loss weights must be non-negative")
        if self.horizon < 1:
            raise ValidationError("horizon must be at least 1")


@dataclass(frozen=True)
class LossBreakdown:
    """Component losses plus their weighted float64 total.

    total == recon + w_reg * reg + recon_next + w_var * vi, accumulated in
    float64 from the component tensors; `recombine` repeats exactly that
    arithmetic so the identity holds bitwise.
    """

    recon: Tensor
    reg: Tensor
    recon_next: Tensor
    vi: Tensor
    total: Tensor

    def recombine(self, weights: LossWeights) -> Tensor:
        return _combine(self.recon, self.reg, self.recon_next, self.vi, weights)

    def to_floats(self) -> dict[str, float]:
        return {
            "recon": float(self.recon.detach()),
            "reg": float(self.reg.detach()),
            "recon_next": float(self.recon_next.detach()),
            "vi": float(self.vi.detach()),
            "total": float(self.total.detach()),
        }

    def all_finite(self) -> bool:
        return all(math.isfinite(v) for v in self.to_floats().values())


def _combine(recon: Tensor, reg: Tensor, recon_next: Tensor, vi: Tensor,
             weights: LossWeights) -> Tensor:
    return (
        recon.double()
        + weights.w_reg * reg.double()
        + recon_next.double()
        + weights.w_var * vi.double()
    )


def component_generators(rng: torch.Generator) -> tuple[torch.Generator, torch.Generator, torch.Generator]:
    """Three child generators derived from one parent (seed draw order:
    recon, reg, recon_next)."""
    seeds = torch.randint(0, 2**62, (3,), generator=rng)
    gens = []
    for s in seeds.tolist():
        g = torch.Generator()
        g.manual_seed(int(s))
        gens.append(g)
    return gens[0], gens[1], gens[2]


def _check_window(bundle: ModelBundle, window: WindowBatch, weights: LossWeights) -> tuple[int, int]:
    cfg = bundle.config
    h, t = cfg.history_len, weights.horizon
    x = window.x
    if x.ndim != 2 + len(cfg.frame_shape) or tuple(x.shape[2:]) != cfg.frame_shape:
        raise ValidationError(
            f"window frames must be (B, L, {', '.join(map(str, cfg.frame_shape))}), "
            f"got {tuple(x.shape)}"
        )
    if x.shape[1] < h + t:
        raise ValidationError(
            f"window length {x.shape[1]} is shorter than history + horizon = {h + t}"
        )
    if window.u.shape[:2] != (x.shape[0], x.shape[1] - 1) or window.u.shape[2] != cfg.control_dim:
        raise ValidationError("window controls do not match frames/control_dim")
    if window.p.shape != (x.shape[0], cfg.param_dim):
        raise ValidationError("window params do not match param_dim")
    return h, t


def _encode_sequence(bundle: ModelBundle, x_seq: Tensor) -> tuple[Tensor, Tensor]:
    """Encode (B, L, *frame) in one batched pass -> mean/var (B, L, |z|)."""
    b, l = x_seq.shape[:2]
    belief = bundle.encoder.encode(x_seq.reshape(b * l, *x_seq.shape[2:]))
    z = bundle.latent_dim
    return belief.mean.reshape(b, l, z), belief.variance.reshape(b, l, z)


def _draw(mean: Tensor, var: Tensor, rng: torch.Generator | None, deterministic: bool) -> Tensor:
    if deterministic:
        return mean
    eps = torch.randn(mean.shape, generator=rng, dtype=mean.dtype)
    return mean + torch.sqrt(var) * eps


def recon_loss(
    bundle: ModelBundle,
    x_batch: Tensor,
    rng: torch.Generator | None = None,
    deterministic: bool = False,
) -> Tensor:
    """Gaussian negative log-likelihood of reconstructing x from one encoded
    latent draw (unit observation variance):

        mean_B [ 0.5 ||x - decode(z)||^2 + (n_pix / 2) log(2 pi) ]

    A perfect autoencoder attains exactly (n_pix / 2) log(2 pi).
    """
    cfg = bundle.config
    if x_batch.ndim != 1 + len(cfg.frame_shape) or tuple(x_batch.shape[1:]) != cfg.frame_shape:
        raise ValidationError(f"x_batch must be (B, *frame_shape), got {tuple(x_batch.shape)}")
    belief = bundle.encoder.encode(x_batch)
    z = _draw(belief.mean, belief.variance, rng, deterministic)
    decoded = bundle.decoder.decode(z)
    sq = (x_batch - decoded).flatten(1).pow(2).sum(-1)
    n_pix = decoded.shape[1:].numel()
    const = 0.5 * n_pix * math.log(2.0 * math.pi)
    return (0.5 * sq + const).mean()


def reg_loss_multistep(
    bundle: ModelBundle,
    window: WindowBatch,
    weights: LossWeights,
    rng: torch.Generator | None = None,
    deterministic: bool = False,
) -> Tensor:
    """Latent consistency: mean over T steps of
    KL[ encoder belief at the target frame || dynamics belief ], batch-mean.

    The dynamics history starts from sampled encoder latents of the H history
    frames and autoregressively appends the dynamics model's own samples, so
    later steps are scored on model-propagated histories. With T = 1 this is
    a single KL between the encoder belief at frame H and the one-step
    dynamics prediction. Always >= 0.
    """
    h, t = _check_window(bundle, window, weights)
    enc_mean, enc_var = _encode_sequence(bundle, window.x[:, : h + t])
    zs = _draw(enc_mean[:, :h], enc_var[:, :h], rng, deterministic)
    total = None
    for i in range(1, t + 1):
        z_win = zs[:, i - 1 : h + i - 1]
        u_win = window.u[:, i - 1 : h + i - 1]
        belief = bundle.dynamics.predict_next(z_win, u_win, window.p)
        kl = diag_gaussian_kl_terms(
            enc_mean[:, h + i - 1], enc_var[:, h + i - 1], belief.mean, belief.variance
        ).sum(-1).clamp_min(0.0).mean()
        total = kl if total is None else total + kl
        if i < t:
            z_next = _draw(belief.mean, belief.variance, rng, deterministic)
            zs = torch.cat([zs, z_next.unsqueeze(1)], dim=1)
    return total / t


def recon_next_multistep(
    bundle: ModelBundle,
    window: WindowBatch,
    weights: LossWeights,
    rng: torch.Generator | None = None,
    deterministic: bool = False,
) -> Tensor:
    """Pixel prediction: mean over T steps of ||x_target - decode(z_step)||^2
    (sum over pixels, batch-mean), where z_step is a draw from the
    autoregressive dynamics belief."""
    h, t = _check_window(bundle, window, weights)
    enc_mean, enc_var = _encode_sequence(bundle, window.x[:, :h])
    zs = _draw(enc_mean, enc_var, rng, deterministic)
    total = None
    for i in range(1, t + 1):
        z_win = zs[:, i - 1 : h + i - 1]
        u_win = window.u[:, i - 1 : h + i - 1]
        belief = bundle.dynamics.predict_next(z_win, u_win, window.p)
        z_next = _draw(belief.mean, belief.variance, rng, deterministic)
        decoded = bundle.decoder.decode(z_next)
        target = window.x[:, h + i - 1]
        err = (target - decoded).flatten(1).pow(2).sum(-1).mean()
        total = err if total is None else total + err
        zs = torch.cat([zs, z_next.unsqueeze(1)], dim=1)
    return total / t


def vi_loss(bundle: ModelBundle) -> Tensor:
    """Sum of inducing-point KL[q(u) || p(u)] over every GP head in the
    encoder and dynamics models (float64 scalar, >= 0)."""
    return bundle.encoder.heads.kl_sum() + bundle.dynamics.heads.kl_sum()


def total_loss(
    bundle: ModelBundle,
    window: WindowBatch,
    weights: LossWeights,
    rng: torch.Generator | None = None,
    deterministic: bool = False,
) -> LossBreakdown:
    """Joint objective on one window batch.

    recon scores the window's anchor frame (index H-1, the newest history
    frame); reg and recon_next run the multi-step horizon; vi is
    draw-independent. See the module docstring for the rng contract.
    """
    h, _ = _check_window(bundle, window, weights)
    if rng is None:
        rng = torch.default_generator
    g_recon, g_reg, g_next = component_generators(rng)
    recon = recon_loss(bundle, window.x[:, h - 1], g_recon, deterministic)
    reg = reg_loss_multistep(bundle, window, weights, g_reg, deterministic)
    recon_next = recon_next_multistep(bundle, window, weights, g_next, deterministic)
    vi = vi_loss(bundle)
    return LossBreakdown(
        recon=recon,
        reg=reg,
        recon_next=recon_next,
        vi=vi,
        total=_combine(recon, reg, recon_next, vi, weights),
    )
