"""Model stack: deep-kernel variational encoder, convolutional decoder, and
recurrent deep-kernel latent dynamics.

The encoder maps frames through a convolutional trunk to a low-dimensional
feature space; each latent dimension then gets its own single-output sparse
variational GP head (squared-exponential kernel over the shared features,
shared inducing locations, per-head hyperparameters and variational state).
The resulting latent belief is diagonal Gaussian with an additive observation
noise floor. The dynamics model runs an LSTM over (latent, control, parameter)
histories, projects the final hidden state into its own feature space, and
applies the same kind of GP head bank plus a process noise floor. The decoder
is a mirrored transposed-convolution stack with a sigmoid output, so decoded
frames live in [0, 1] like the measurements.

GP head math runs internally in float64 for numerical headroom regardless of
the module parameter dtype; results are cast back, so models remain fully
checkpointable in float32.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass

import torch
from torch import Tensor, nn

from .errors import ConfigurationError, ValidationError
from .gp import KernelParams, InducingState, _inducing_kl_math, _svgp_marginals, chol_with_jitter

_CONV_CHANNELS = (32, 64, 128, 256, 256)
_MIN_SPATIAL = 6  # stop halving once the map is this small
_NOISE_FLOOR_INIT = 1e-2
_VAR_MEAN_INIT_STD = 0.5


@dataclass(frozen=True)
class ModelConfig:
    """Structural hyperparameters; two bundles with equal configs have
    identical tensor shapes (the basis of the checkpoint fingerprint)."""

    frame_shape: tuple[int, ...]
    latent_dim: int = 20
    control_dim: int = 0
    param_dim: int = 0
    feature_dim: int = 20
    n_inducing: int = 100
    history_len: int = 20
    lstm_hidden: int = 256

    def __post_init__(self):
        if len(self.frame_shape) != 3:
            raise ConfigurationError(f"frame_shape must be (H, W, C), got {self.frame_shape}")
        object.__setattr__(self, "frame_shape", tuple(int(s) for s in self.frame_shape))
        h, w, c = self.frame_shape
        if h < 8 or w < 8 or c < 1:
            raise ConfigurationError("frames must be at least 8x8 with one channel")
        for name in ("latent_dim", "feature_dim", "n_inducing", "history_len", "lstm_hidden"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive")
        for name in ("control_dim", "param_dim"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["frame_shape"] = list(self.frame_shape)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["frame_shape"] = tuple(d["frame_shape"])
        return cls(**d)

    def fingerprint(self) -> str:
        return hashlib.sha256(
            json.dumps(self.to_dict(), sort_keys=True).encode()
        ).hexdigest()


@dataclass(frozen=True)
class LatentBelief:
    """Diagonal Gaussian over latent codes: mean and variance, both (B, |z|)."""

    mean: Tensor
    variance: Tensor

    def __post_init__(self):
        if self.mean.shape != self.variance.shape or self.mean.ndim != 2:
            raise ValidationError(
                f"belief tensors must share shape (B, z): {tuple(self.mean.shape)} vs "
                f"{tuple(self.variance.shape)}"
            )
        if not torch.isfinite(self.mean).all() or not torch.isfinite(self.variance).all():
            raise ValidationError("belief contains non-finite values")
        if (self.variance <= 0).any():
            raise ValidationError("belief variances must be positive")


def sample_latent(belief: LatentBelief, generator: torch.Generator | None = None) -> Tensor:
    """One reparameterized draw: mean + sqrt(var) * eps. Differentiable
    through mean and variance; collapses to the mean as variance -> 0."""
    eps = torch.randn(
        belief.mean.shape, generator=generator, dtype=belief.mean.dtype, device=belief.mean.device
    )
    return belief.mean + torch.sqrt(belief.variance) * eps


def _conv_plan(h: int, w: int, in_channels: int):
    """Stride-2 conv pyramid: halve (ceil) until the map is small, max 5 stages."""
    sizes = [(h, w)]
    channels = [in_channels]
    for out_ch in _CONV_CHANNELS:
        ch, cw = sizes[-1]
        if min(ch, cw) <= _MIN_SPATIAL:
            break
        sizes.append(((ch + 1) // 2, (cw + 1) // 2))
        channels.append(out_ch)
    return sizes, channels


class FeatureNorm(nn.Module):
    """Standardize features per dimension before they reach a GP head bank.

    Fresh conv/recurrent trunks emit features whose spread across inputs is
    tiny next to the drift a few optimizer steps cause, so a length scale
    calibrated at init is soon orders of magnitude smaller than the distance
    between live features and the inducing locations; the kernel then
    vanishes and the variational means stop receiving gradient. Keeping the
    feature cloud at zero mean and unit variance pins the kernel's working
    range to the data throughout training.

    Train mode standardizes with batch statistics and tracks running values;
    eval mode applies the tracked values. Buffers stay float tensors so
    checkpoints remain single-dtype.
    """

    def __init__(self, dim: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.register_buffer("running_mean", torch.zeros(dim))
        self.register_buffer("running_var", torch.ones(dim))

    def forward(self, x: Tensor) -> Tensor:
        if self.training and x.shape[0] > 1:
            mu = x.mean(dim=0)
            var = x.var(dim=0, unbiased=False)
            with torch.no_grad():
                m = self.momentum
                self.running_mean.mul_(1.0 - m).add_(m * mu.to(self.running_mean.dtype))
                self.running_var.mul_(1.0 - m).add_(m * var.to(self.running_var.dtype))
        else:
            mu = self.running_mean.to(x.dtype)
            var = self.running_var.to(x.dtype)
        return (x - mu) / torch.sqrt(var + self.eps)


class ConvFeatureNet(nn.Module):
    """Frames (B, H, W, C) -> features (B, feature_dim)."""

    def __init__(self, frame_shape: tuple[int, ...], feature_dim: int):
        super().__init__()
        h, w, c = frame_shape
        self.frame_shape = tuple(frame_shape)
        sizes, channels = _conv_plan(h, w, c)
        convs = []
        for i in range(1, len(channels)):
            convs.append(nn.Conv2d(channels[i - 1], channels[i], 3, stride=2, padding=1))
        self.convs = nn.ModuleList(convs)
        fh, fw = sizes[-1]
        self.flat_dim = channels[-1] * fh * fw
        self.out = nn.Linear(self.flat_dim, feature_dim)
        self.norm = FeatureNorm(feature_dim)

    def forward(self, x: Tensor) -> Tensor:
        z = x.permute(0, 3, 1, 2)
        for conv in self.convs:
            z = torch.nn.functional.elu(conv(z))
        return self.norm(self.out(z.flatten(1)))


class ConvDecoderNet(nn.Module):
    """Latents (B, |z|) -> frames (B, H, W, C) in [0, 1], mirroring the
    encoder pyramid with transposed convolutions."""

    def __init__(self, frame_shape: tuple[int, ...], latent_dim: int):
        super().__init__()
        h, w, c = frame_shape
        self.frame_shape = tuple(frame_shape)
        sizes, channels = _conv_plan(h, w, c)
        fh, fw = sizes[-1]
        self.start_shape = (channels[-1], fh, fw)
        self.inp = nn.Linear(latent_dim, channels[-1] * fh * fw)
        deconvs = []
        out_pads = []
        for i in range(len(channels) - 1, 0, -1):
            tin, tout = sizes[i], sizes[i - 1]
            op = (tout[0] - (2 * tin[0] - 1), tout[1] - (2 * tin[1] - 1))
            deconvs.append(
                nn.ConvTranspose2d(channels[i], channels[i - 1], 3, stride=2, padding=1,
                                   output_padding=op)
            )
            out_pads.append(op)
        self.deconvs = nn.ModuleList(deconvs)

    def forward(self, z: Tensor) -> Tensor:
        y = torch.nn.functional.elu(self.inp(z))
        y = y.reshape(-1, *self.start_shape)
        for i, deconv in enumerate(self.deconvs):
            y = deconv(y)
            if i < len(self.deconvs) - 1:
                y = torch.nn.functional.elu(y)
        return torch.sigmoid(y).permute(0, 2, 3, 1)


class SvgpHeads(nn.Module):
    """A bank of independent single-output sparse variational GP heads over a
    shared feature space with shared inducing locations.

    Per head: SE kernel (signal variance, length scale stored as logs), zero
    prior mean, variational posterior N(m, L L^T) with L stored as strict
    lower triangle plus log-diagonal in one square tensor.
    """

    def __init__(self, n_heads: int, feature_dim: int, n_inducing: int):
        super().__init__()
        self.n_heads = n_heads
        self.feature_dim = feature_dim
        self.n_inducing = n_inducing
        self.locations = nn.Parameter(torch.randn(n_inducing, feature_dim))
        self.raw_signal = nn.Parameter(torch.zeros(n_heads))
        self.raw_length = nn.Parameter(torch.zeros(n_heads))
        self.raw_var_mean = nn.Parameter(torch.zeros(n_heads, n_inducing))
        self.raw_var_chol = nn.Parameter(torch.zeros(n_heads, n_inducing, n_inducing))
        self.reset_variational_to_prior()

    def _hyper64(self):
        sf2 = torch.exp(self.raw_signal).double()
        ls = torch.exp(self.raw_length).double()
        return sf2, ls

    def _chol64(self) -> Tensor:
        raw = self.raw_var_chol.double()
        lower = torch.tril(raw, diagonal=-1)
        diag = torch.exp(torch.diagonal(raw, dim1=-2, dim2=-1))
        return lower + torch.diag_embed(diag)

    def _prior_kuu64(self) -> Tensor:
        loc = self.locations.double()
        sq = (loc.unsqueeze(1) - loc.unsqueeze(0)).pow(2).sum(-1)
        sf2, ls = self._hyper64()
        return sf2.unsqueeze(-1).unsqueeze(-1) * torch.exp(
            -0.5 * sq / (ls * ls).unsqueeze(-1).unsqueeze(-1)
        )

    def predict(self, features: Tensor) -> tuple[Tensor, Tensor]:
        """Features (B, f) -> per-head marginals, each (B, n_heads)."""
        if features.ndim != 2 or features.shape[1] != self.feature_dim:
            raise ValidationError(
                f"features must be (B, {self.feature_dim}), got {tuple(features.shape)}"
            )
        sf2, ls = self._hyper64()
        zero = torch.zeros(self.n_heads, dtype=torch.float64)
        mean, var = _svgp_marginals(
            features.double(),
            self.locations.double(),
            sf2,
            ls,
            zero,
            self.raw_var_mean.double(),
            self._chol64(),
        )
        return mean.transpose(0, 1).to(features.dtype), var.transpose(0, 1).to(features.dtype)

    def kl_sum(self) -> Tensor:
        """Sum over heads of KL[q(u) || p(u)], float64 scalar."""
        sf2, ls = self._hyper64()
        zero = torch.zeros(self.n_heads, dtype=torch.float64)
        kls = _inducing_kl_math(
            self.locations.double(), sf2, ls, zero, self.raw_var_mean.double(), self._chol64()
        )
        return kls.sum()

    def head_state(self, i: int) -> tuple[KernelParams, InducingState]:
        """Detached snapshot of one head in the gp module's value types."""
        sf2, ls = self._hyper64()
        L = self._chol64()
        params = KernelParams(sf2[i].detach(), ls[i].detach())
        state = InducingState(
            locations=self.locations.double().detach(),
            var_mean=self.raw_var_mean[i].double().detach(),
            var_cov_factor=L[i].detach(),
        )
        return params, state

    @torch.no_grad()
    def reset_variational_to_prior(self) -> None:
        """Set q(u) = N(0, K_uu) per head (KL becomes zero up to storage
        precision)."""
        L = chol_with_jitter(self._prior_kuu64())
        raw = torch.tril(L, diagonal=-1) + torch.diag_embed(
            torch.log(torch.diagonal(L, dim1=-2, dim2=-1))
        )
        self.raw_var_chol.copy_(raw.to(self.raw_var_chol.dtype))
        self.raw_var_mean.zero_()

    @torch.no_grad()
    def init_from_features(self, features: Tensor) -> None:
        """Place inducing locations on real feature rows, set the length
        scale to the median pairwise distance, reset q(u) covariance to the
        prior, and seed the variational means with small random values.

        A zero variational mean makes every head's predictive mean exactly
        constant across inputs, so the decoder can fit a single average frame
        before the encoder carries any signal and joint training stalls
        there. Random means are the GP-layer analog of random weight init:
        they break that symmetry at a small, optimizable KL cost.
        """
        if features.ndim != 2 or features.shape[1] != self.feature_dim:
            raise ValidationError("features must be (n, feature_dim)")
        if features.shape[0] < self.n_inducing:
            raise ValidationError(
                f"need at least {self.n_inducing} feature rows, got {features.shape[0]}"
            )
        rows = features[: self.n_inducing].to(self.locations.dtype)
        self.locations.copy_(rows)
        dists = torch.pdist(rows.double())
        med = float(dists.median()) if dists.numel() else 1.0
        if not math.isfinite(med) or med <= 0:
            med = 1.0
        self.raw_length.fill_(math.log(med))
        self.raw_signal.zero_()
        self.reset_variational_to_prior()
        self.raw_var_mean.normal_(0.0, _VAR_MEAN_INIT_STD)


class EncoderModel(nn.Module):
    """Frames -> diagonal Gaussian latent belief with an observation noise
    floor (belief variance is never below the floor)."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.net = ConvFeatureNet(config.frame_shape, config.feature_dim)
        self.heads = SvgpHeads(config.latent_dim, config.feature_dim, config.n_inducing)
        self.raw_obs_noise = nn.Parameter(torch.tensor(math.log(_NOISE_FLOOR_INIT)))

    def encode(self, x: Tensor) -> LatentBelief:
        if x.ndim != 4 or tuple(x.shape[1:]) != self.config.frame_shape:
            raise ValidationError(
                f"expected (B, {', '.join(map(str, self.config.frame_shape))}), "
                f"got {tuple(x.shape)}"
            )
        if not torch.isfinite(x).all():
            raise ValidationError("measurements contain non-finite values")
        feats = self.net(x)
        mean, var = self.heads.predict(feats)
        return LatentBelief(mean, var + torch.exp(self.raw_obs_noise))

    def features(self, x: Tensor) -> Tensor:
        return self.net(x)


class DecoderModel(nn.Module):
    """Latent codes -> frames in [0, 1]."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.net = ConvDecoderNet(config.frame_shape, config.latent_dim)

    def decode(self, z: Tensor) -> Tensor:
        if z.ndim != 2 or z.shape[1] != self.config.latent_dim:
            raise ValidationError(
                f"expected (B, {self.config.latent_dim}) latents, got {tuple(z.shape)}"
            )
        return self.net(z)


class DynamicsModel(nn.Module):
    """Latent/control/parameter history -> belief over the next latent.

    The LSTM consumes windows of length `history_len`; shorter histories are
    left-padded by repeating the oldest entry. The final hidden state is
    projected into the dynamics feature space and pushed through the GP head
    bank; a process noise floor is added to the predictive variance.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        in_dim = config.latent_dim + config.control_dim + config.param_dim
        self.lstm = nn.LSTM(in_dim, config.lstm_hidden, batch_first=True)
        self.proj = nn.Linear(config.lstm_hidden, config.feature_dim)
        self.norm = FeatureNorm(config.feature_dim)
        self.heads = SvgpHeads(config.latent_dim, config.feature_dim, config.n_inducing)
        self.raw_proc_noise = nn.Parameter(torch.tensor(math.log(_NOISE_FLOOR_INIT)))

    def predict_next(self, z_hist: Tensor, u_hist: Tensor, p: Tensor) -> LatentBelief:
        cfg = self.config
        if z_hist.ndim != 3 or z_hist.shape[2] != cfg.latent_dim:
            raise ValidationError(f"z_hist must be (B, h, {cfg.latent_dim})")
        b, h = z_hist.shape[:2]
        if not 1 <= h <= cfg.history_len:
            raise ValidationError(f"history length {h} not in [1, {cfg.history_len}]")
        if u_hist.shape != (b, h, cfg.control_dim):
            raise ValidationError(
                f"u_hist must be ({b}, {h}, {cfg.control_dim}), got {tuple(u_hist.shape)}"
            )
        if p.shape != (b, cfg.param_dim):
            raise ValidationError(f"p must be ({b}, {cfg.param_dim}), got {tuple(p.shape)}")
        feats = self.features(z_hist, u_hist, p)
        mean, var = self.heads.predict(feats)
        return LatentBelief(mean, var + torch.exp(self.raw_proc_noise))

    def features(self, z_hist: Tensor, u_hist: Tensor, p: Tensor) -> Tensor:
        cfg = self.config
        h = z_hist.shape[1]
        if h < cfg.history_len:
            pad = cfg.history_len - h
            z_hist = torch.cat([z_hist[:, :1].expand(-1, pad, -1), z_hist], dim=1)
            u_hist = torch.cat([u_hist[:, :1].expand(-1, pad, -1), u_hist], dim=1)
        seq = torch.cat(
            [z_hist, u_hist, p.unsqueeze(1).expand(-1, cfg.history_len, -1)], dim=-1
        )
        out, _ = self.lstm(seq)
        return self.norm(self.proj(out[:, -1]))


@dataclass
class ModelBundle:
    """The three jointly trained models plus their structural config."""

    encoder: EncoderModel
    decoder: DecoderModel
    dynamics: DynamicsModel
    config: ModelConfig

    @property
    def latent_dim(self) -> int:
        return self.config.latent_dim

    def modules(self) -> dict[str, nn.Module]:
        return {"encoder": self.encoder, "decoder": self.decoder, "dynamics": self.dynamics}

    def nn_parameters(self):
        """Network-trunk parameters (conv/deconv/LSTM/projection)."""
        for module in (self.encoder.net, self.decoder.net, self.dynamics.lstm, self.dynamics.proj):
            yield from module.parameters()

    def gp_parameters(self):
        """GP-side parameters: kernels, inducing locations, variational state,
        and the observation/process noise floors."""
        yield from self.encoder.heads.parameters()
        yield from self.dynamics.heads.parameters()
        yield self.encoder.raw_obs_noise
        yield self.dynamics.raw_proc_noise

    def parameters(self):
        yield from self.nn_parameters()
        yield from self.gp_parameters()

    def train(self) -> None:
        for m in self.modules().values():
            m.train()

    def eval(self) -> None:
        for m in self.modules().values():
            m.eval()

    def to_dtype(self, dtype: torch.dtype) -> "ModelBundle":
        for m in self.modules().values():
            m.to(dtype)
        return self

    def fingerprint(self) -> str:
        return self.config.fingerprint()


def build_bundle(config: ModelConfig, dtype: torch.dtype = torch.float32) -> ModelBundle:
    """Construct a fresh bundle; parameter initialization consumes torch's
    global rng, so seed beforehand for reproducible builds."""
    bundle = ModelBundle(
        encoder=EncoderModel(config),
        decoder=DecoderModel(config),
        dynamics=DynamicsModel(config),
        config=config,
    )
    return bundle.to_dtype(dtype)


def reset_variational_to_prior(bundle: ModelBundle) -> None:
    bundle.encoder.heads.reset_variational_to_prior()
    bundle.dynamics.heads.reset_variational_to_prior()


@torch.no_grad()
def init_inducing_from_data(bundle: ModelBundle, x_frames: Tensor, z_hist: Tensor,
                            u_hist: Tensor, p: Tensor) -> None:
    """Data-dependent initialization: encoder heads from encoded frame
    features, dynamics heads from trunk features of real history windows."""
    enc_feats = bundle.encoder.features(x_frames)
    bundle.encoder.heads.init_from_features(enc_feats)
    dyn_feats = bundle.dynamics.features(z_hist, u_hist, p)
    bundle.dynamics.heads.init_from_features(dyn_feats)


@dataclass(frozen=True)
class RolloutResult:
    """Sampled latent rollout paths and their decodings.

    latent_mean/latent_var: (S, K, |z|) per-step predictive beliefs
    samples: (S, K, |z|) latent draws actually propagated
    frames: (S, K, H, W, C) decoded frames
    """

    latent_mean: Tensor
    latent_var: Tensor
    samples: Tensor
    frames: Tensor


def rollout(
    bundle: ModelBundle,
    x_init_hist: Tensor,
    controls: Tensor,
    p: Tensor,
    n_samples: int = 1,
    rng: torch.Generator | None = None,
    u_init_hist: Tensor | None = None,
    deterministic: bool = False,
) -> RolloutResult:
    """Autoregressive latent rollout from an encoded measurement history.

    x_init_hist: (H, *frame_shape) measurements ending at the anchor step.
    controls: (K, u_dim), controls[k] drives prediction step k -> k+1.
    u_init_hist: (H-1, u_dim) controls inside the history (zeros if omitted).
    p: (param_dim,) trajectory parameters.

    Each of the `n_samples` paths gets its own derived rng stream, so a call
    with a freshly seeded generator is reproducible regardless of path count.
    `deterministic=True` propagates belief means and ignores rng entirely
    (all paths coincide).
    """
    cfg = bundle.config
    hist = cfg.history_len
    if x_init_hist.ndim != 4 or x_init_hist.shape[0] != hist or tuple(x_init_hist.shape[1:]) != cfg.frame_shape:
        raise ValidationError(
            f"x_init_hist must be ({hist}, {', '.join(map(str, cfg.frame_shape))}), "
            f"got {tuple(x_init_hist.shape)}"
        )
    if controls.ndim != 2 or controls.shape[1] != cfg.control_dim:
        raise ValidationError(f"controls must be (K, {cfg.control_dim})")
    if p.shape != (cfg.param_dim,):
        raise ValidationError(f"p must be ({cfg.param_dim},)")
    k_steps = controls.shape[0]
    dtype = x_init_hist.dtype
    if u_init_hist is None:
        u_init_hist = torch.zeros(hist - 1, cfg.control_dim, dtype=dtype)
    if u_init_hist.shape != (hist - 1, cfg.control_dim):
        raise ValidationError(f"u_init_hist must be ({hist - 1}, {cfg.control_dim})")
    if n_samples < 1:
        raise ValidationError("n_samples must be positive")

    # deterministic paths are all identical; computing one and replicating it
    # keeps them bitwise equal (batched kernels may tile rows differently)
    s = 1 if deterministic else n_samples
    if deterministic:
        path_gens = None
    else:
        seeds = torch.randint(0, 2**62, (s,), generator=rng)
        path_gens = []
        for seed in seeds.tolist():
            g = torch.Generator()
            g.manual_seed(int(seed))
            path_gens.append(g)

    def draw(mean: Tensor, var: Tensor) -> Tensor:
        # mean/var (S, z); one draw per path from its own stream
        if deterministic:
            return mean
        eps = torch.stack(
            [torch.randn(mean.shape[-1], generator=g, dtype=mean.dtype) for g in path_gens]
        )
        return mean + torch.sqrt(var) * eps

    enc = bundle.encoder.encode(x_init_hist)
    # initial latent history: per-path draws for each of the H frames
    means = enc.mean.unsqueeze(0).expand(s, hist, cfg.latent_dim)
    vars_ = enc.variance.unsqueeze(0).expand(s, hist, cfg.latent_dim)
    if deterministic:
        z_win = means.clone()
    else:
        eps = torch.stack(
            [
                torch.randn((hist, cfg.latent_dim), generator=g, dtype=dtype)
                for g in path_gens
            ]
        )
        z_win = means + torch.sqrt(vars_) * eps

    if k_steps == 0:
        empty = torch.zeros(n_samples, 0, cfg.latent_dim, dtype=dtype)
        return RolloutResult(
            latent_mean=empty,
            latent_var=torch.ones_like(empty),
            samples=empty,
            frames=torch.zeros((n_samples, 0) + cfg.frame_shape, dtype=dtype),
        )

    u_win = torch.cat([u_init_hist, controls[:1]], dim=0).unsqueeze(0).expand(s, hist, cfg.control_dim).clone()
    p_b = p.unsqueeze(0).expand(s, cfg.param_dim)

    step_means, step_vars, step_samples, step_frames = [], [], [], []
    for k in range(k_steps):
        belief = bundle.dynamics.predict_next(z_win, u_win, p_b)
        z_next = draw(belief.mean, belief.variance)
        frames = bundle.decoder.decode(z_next)
        step_means.append(belief.mean)
        step_vars.append(belief.variance)
        step_samples.append(z_next)
        step_frames.append(frames)
        if k + 1 < k_steps:
            z_win = torch.cat([z_win[:, 1:], z_next.unsqueeze(1)], dim=1)
            u_win = torch.cat([u_win[:, 1:], controls[k + 1].expand(s, 1, cfg.control_dim)], dim=1)

    result = RolloutResult(
        latent_mean=torch.stack(step_means, dim=1),
        latent_var=torch.stack(step_vars, dim=1),
        samples=torch.stack(step_samples, dim=1),
        frames=torch.stack(step_frames, dim=1),
    )
    if deterministic and n_samples > 1:
        result = RolloutResult(
            latent_mean=result.latent_mean.expand(n_samples, -1, -1).clone(),
            latent_var=result.latent_var.expand(n_samples, -1, -1).clone(),
            samples=result.samples.expand(n_samples, -1, -1).clone(),
            frames=result.frames.expand((n_samples,) + result.frames.shape[1:]).clone(),
        )
    return result
