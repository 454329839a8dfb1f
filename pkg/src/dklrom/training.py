"""Joint training loop, checkpoint serialization, and weight grid search.

Training draws fresh window batches from a trajectory dataset, evaluates the
joint objective, and updates network and GP parameters with separate Adam
learning rates. Checkpoints are plain directories: a json manifest plus one
binary file per named tensor, written in the same self-describing array
format the datasets use, so round trips are bit-exact.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .data import (
    TrajectoryDataset,
    WindowBatch,
    read_array,
    sample_windows,
    split_dataset,
    write_array,
)
from .errors import CheckpointError, ConfigurationError, NumericalError, ValidationError
from .losses import LossWeights, total_loss
from .models import ModelBundle, ModelConfig, build_bundle, init_inducing_from_data

_MANIFEST_NAME = "manifest.json"
_CHECKPOINT_VERSION = 1
_LOG_KEYS = ("recon", "reg", "recon_next", "vi", "total")


@dataclass(frozen=True)
class TrainConfig:
    """Everything a training run needs besides the dataset itself.

    Model-shape fields (latent_dim, history_len, feature_dim, n_inducing,
    lstm_hidden) are combined with the dataset's frame/control/param shapes
    to form the ModelConfig; the rest drive the optimization loop.
    """

    latent_dim: int = 20
    history_len: int = 20
    feature_dim: int = 20
    n_inducing: int = 100
    lstm_hidden: int = 256
    weights: LossWeights = field(default_factory=LossWeights)
    batch_size: int = 32
    lr_net: float = 3e-4
    lr_gp: float = 1e-2
    max_steps: int = 2000
    noise_sigma2: float = 0.0
    grad_clip: float = 10.0
    eval_interval: int = 200
    seed: int = 0
    deterministic: bool = False

    def __post_init__(self):
        for name in ("latent_dim", "history_len", "feature_dim", "n_inducing",
                     "lstm_hidden", "batch_size", "max_steps", "eval_interval"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise ConfigurationError(f"{name} must be a positive integer, got {value!r}")
        if not isinstance(self.weights, LossWeights):
            raise ConfigurationError("weights must be a LossWeights instance")
        for name in ("lr_net", "lr_gp", "noise_sigma2"):
            value = float(getattr(self, name))
            if not value >= 0.0:
                raise ConfigurationError(f"{name} must be >= 0, got {value}")
        if not float(self.grad_clip) > 0.0:
            raise ConfigurationError(f"grad_clip must be > 0, got {self.grad_clip}")
        if not isinstance(self.seed, int):
            raise ConfigurationError("seed must be an integer")

    def model_config(self, dataset: TrajectoryDataset) -> ModelConfig:
        """Model shape implied by this config on a concrete dataset."""
        return ModelConfig(
            frame_shape=dataset.frame_shape,
            latent_dim=self.latent_dim,
            control_dim=dataset.control_dim,
            param_dim=dataset.param_dim,
            feature_dim=self.feature_dim,
            n_inducing=self.n_inducing,
            history_len=self.history_len,
            lstm_hidden=self.lstm_hidden,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigurationError(f"unknown training config keys: {unknown}")
        if isinstance(d.get("weights"), dict):
            try:
                d["weights"] = LossWeights(**d["weights"])
            except TypeError as exc:
                raise ConfigurationError(f"bad loss weights: {exc}") from exc
        return cls(**d)


@dataclass
class TrainLog:
    """Per-step component losses plus periodic mean snapshots."""

    steps: list = field(default_factory=list)
    snapshots: list = field(default_factory=list)
    wall_clock_s: float = 0.0

    def append_step(self, step: int, values: dict) -> None:
        self.steps.append({"step": step, **{k: values[k] for k in _LOG_KEYS}})

    def snapshot(self, step: int, window: int, elapsed_s: float) -> dict:
        recent = self.steps[-window:]
        snap = {"step": step, "elapsed_s": round(elapsed_s, 3)}
        for key in _LOG_KEYS:
            snap[f"mean_{key}"] = float(np.mean([r[key] for r in recent]))
        self.snapshots.append(snap)
        return snap

    def to_json(self) -> str:
        return json.dumps(
            {"steps": self.steps, "snapshots": self.snapshots,
             "wall_clock_s": self.wall_clock_s},
        )

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())


def train(
    config: TrainConfig,
    dataset: TrajectoryDataset,
    checkpoint_dir=None,
    progress: Callable[[dict], None] | None = None,
) -> tuple[ModelBundle, TrainLog]:
    """Train a fresh model bundle on the dataset.

    Seeding: torch's global rng (module init) and the loss draw generator are
    both seeded with config.seed, and window sampling uses an independent
    numpy generator with the same seed, so the whole run is a function of
    (config, dataset). Inducing points are initialized from encoded data
    before the first step. Aborts with NumericalError if the loss goes
    non-finite. With checkpoint_dir set, writes a rolling "latest" checkpoint
    every eval_interval steps and a "final" one at the end.
    """
    window_len = config.history_len + config.weights.horizon
    if dataset.n_frames < window_len:
        raise ValidationError(
            f"dataset has {dataset.n_frames} frames per trajectory but windows "
            f"need history_len + horizon = {window_len}"
        )
    prev_threads = torch.get_num_threads()
    prev_det = torch.are_deterministic_algorithms_enabled()
    if config.deterministic:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)
    try:
        return _train_inner(config, dataset, checkpoint_dir, progress)
    finally:
        if config.deterministic:
            torch.set_num_threads(prev_threads)
            torch.use_deterministic_algorithms(prev_det)


def _train_inner(config, dataset, checkpoint_dir, progress):
    torch.manual_seed(config.seed)
    bundle = build_bundle(config.model_config(dataset))
    np_rng = np.random.default_rng(config.seed)
    loss_rng = torch.Generator()
    loss_rng.manual_seed(config.seed)

    _init_heads_from_data(bundle, config, dataset, np_rng)

    nn_params = list(bundle.nn_parameters())
    gp_params = list(bundle.gp_parameters())
    optimizer = torch.optim.Adam([
        {"params": nn_params, "lr": config.lr_net},
        {"params": gp_params, "lr": config.lr_gp},
    ])
    all_params = nn_params + gp_params

    log = TrainLog()
    bundle.train()
    start = time.monotonic()
    for step in range(config.max_steps):
        window = sample_windows(
            dataset, config.batch_size, config.history_len,
            config.weights.horizon, np_rng, noise_sigma2=config.noise_sigma2,
        )
        breakdown = total_loss(bundle, window, config.weights, loss_rng)
        values = breakdown.to_floats()
        if not breakdown.all_finite():
            raise NumericalError(f"non-finite loss at step {step}: {values}")
        optimizer.zero_grad(set_to_none=True)
        breakdown.total.backward()
        torch.nn.utils.clip_grad_norm_(all_params, config.grad_clip)
        optimizer.step()
        log.append_step(step, values)

        done = step + 1 == config.max_steps
        if (step + 1) % config.eval_interval == 0 or done:
            snap = log.snapshot(step + 1, config.eval_interval,
                                time.monotonic() - start)
            if progress is not None:
                progress(snap)
            if checkpoint_dir is not None and not done:
                save_checkpoint(bundle, Path(checkpoint_dir) / "latest",
                                weights=config.weights, extra={"step": step + 1})
    log.wall_clock_s = time.monotonic() - start
    bundle.eval()
    if checkpoint_dir is not None:
        save_checkpoint(bundle, Path(checkpoint_dir) / "final",
                        weights=config.weights, extra={"step": config.max_steps})
    return bundle, log


def _init_heads_from_data(bundle, config, dataset, np_rng):
    # needs >= n_inducing rows for both head banks: frames give B*(H+T),
    # dynamics windows give B, so B must cover n_inducing on its own
    n_init = max(config.n_inducing, config.batch_size)
    batch = sample_windows(
        dataset, n_init, config.history_len, config.weights.horizon,
        np_rng, noise_sigma2=config.noise_sigma2,
    )
    h = config.history_len
    frame_shape = bundle.config.frame_shape
    frames = batch.x.reshape(-1, *frame_shape)
    with torch.no_grad():
        hist = batch.x[:, :h].reshape(-1, *frame_shape)
        z_hist = bundle.encoder.encode(hist).mean.reshape(n_init, h, -1)
    init_inducing_from_data(bundle, frames, z_hist, batch.u[:, :h], batch.p)


def _named_tensors(bundle: ModelBundle) -> dict[str, torch.Tensor]:
    out = {}
    for mod_name, module in bundle.modules().items():
        state = module.state_dict()
        for key in sorted(state):
            out[f"{mod_name}.{key}"] = state[key]
    return out


def save_checkpoint(bundle: ModelBundle, path, weights: LossWeights | None = None,
                    extra: dict | None = None) -> Path:
    """Write the bundle to a checkpoint directory (created if needed).

    Layout: manifest.json (format version, model config, config fingerprint,
    tensor index, optional loss weights and extra metadata) plus one
    "<name>.bin" array file per named tensor. Only float32 bundles are
    accepted so reloads are bit-exact.
    """
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    index = {}
    for name, tensor in _named_tensors(bundle).items():
        if tensor.dtype != torch.float32:
            raise CheckpointError(
                f"checkpoints store float32 tensors only, {name} is {tensor.dtype}"
            )
        file_name = name + ".bin"
        write_array(path / file_name, tensor.detach().cpu().numpy())
        index[name] = {"shape": list(tensor.shape), "dtype": "float32",
                       "file": file_name}
    manifest = {
        "format_version": _CHECKPOINT_VERSION,
        "model_config": bundle.config.to_dict(),
        "fingerprint": bundle.fingerprint(),
        "tensors": index,
    }
    if weights is not None:
        manifest["loss_weights"] = asdict(weights)
    if extra:
        manifest["extra"] = dict(extra)
    (path / _MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def load_checkpoint(path, expected_config: ModelConfig | None = None,
                    ) -> tuple[ModelBundle, dict]:
    """Rebuild a bundle from a checkpoint directory.

    Verifies the manifest fingerprint against the stored model config, and
    against expected_config when given; raises CheckpointError on any
    mismatch, missing tensor, or shape disagreement. Returns the bundle in
    eval mode plus the parsed manifest.
    """
    path = Path(path)
    manifest_path = path / _MANIFEST_NAME
    if not manifest_path.is_file():
        raise CheckpointError(f"no checkpoint manifest at {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"unreadable checkpoint manifest: {exc}") from exc
    if manifest.get("format_version") != _CHECKPOINT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint format_version {manifest.get('format_version')!r}"
        )
    try:
        config = ModelConfig.from_dict(manifest["model_config"])
    except (KeyError, TypeError, ValidationError) as exc:
        raise CheckpointError(f"bad model config in checkpoint: {exc}") from exc
    if config.fingerprint() != manifest.get("fingerprint"):
        raise CheckpointError("manifest fingerprint does not match its stored config")
    if expected_config is not None and expected_config.fingerprint() != config.fingerprint():
        raise CheckpointError(
            "checkpoint model configuration does not match the expected one"
        )
    with torch.random.fork_rng():
        bundle = build_bundle(config)
    tensors = _named_tensors(bundle)
    stored = manifest.get("tensors", {})
    missing = sorted(set(tensors) - set(stored))
    unexpected = sorted(set(stored) - set(tensors))
    if missing or unexpected:
        raise CheckpointError(
            f"checkpoint tensor index mismatch: missing {missing}, unexpected {unexpected}"
        )
    with torch.no_grad():
        for name, tensor in tensors.items():
            arr = read_array(path / stored[name]["file"])
            if list(arr.shape) != list(tensor.shape):
                raise CheckpointError(
                    f"tensor {name}: stored shape {list(arr.shape)} != expected "
                    f"{list(tensor.shape)}"
                )
            tensor.copy_(torch.from_numpy(arr))
    bundle.eval()
    return bundle, manifest


def grid_search_weights(
    config: TrainConfig,
    dataset: TrajectoryDataset,
    w_reg_values: Sequence[float],
    w_var_values: Sequence[float],
    test_fraction: float = 0.2,
    n_val_batches: int = 8,
    progress: Callable[[dict], None] | None = None,
) -> tuple[LossWeights, list[dict]]:
    """Train one model per (w_reg, w_var) pair and score each on validation.

    All combinations share a single train/validation split and the exact same
    pre-sampled validation windows, and every training run starts from the
    same seed, so scores differ only through the weights. Selection uses
    val_score = val_recon + val_recon_next (unweighted data terms), since the
    weighted total is not comparable across weight settings.
    """
    if not w_reg_values or not w_var_values:
        raise ConfigurationError("grid search needs at least one value per axis")
    split_rng = np.random.default_rng(config.seed)
    train_ds, val_ds = split_dataset(dataset, test_fraction, split_rng)
    val_rng = np.random.default_rng(config.seed + 1)
    horizon = config.weights.horizon
    val_batches: list[WindowBatch] = [
        sample_windows(val_ds, config.batch_size, config.history_len, horizon,
                       val_rng, noise_sigma2=config.noise_sigma2)
        for _ in range(n_val_batches)
    ]

    rows: list[dict] = []
    best_row = None
    best_weights = None
    for w_reg in w_reg_values:
        for w_var in w_var_values:
            weights = LossWeights(w_reg=float(w_reg), w_var=float(w_var),
                                  horizon=horizon)
            bundle, _ = train(replace(config, weights=weights), train_ds)
            row = {"w_reg": float(w_reg), "w_var": float(w_var)}
            row.update(_validation_means(bundle, val_batches, weights, config.seed))
            row["val_score"] = row["val_recon"] + row["val_recon_next"]
            rows.append(row)
            if progress is not None:
                progress(row)
            if best_row is None or row["val_score"] < best_row["val_score"]:
                best_row = row
                best_weights = weights
    return best_weights, rows


def _validation_means(bundle, val_batches, weights, seed) -> dict:
    gen = torch.Generator()
    gen.manual_seed(seed)
    sums = {key: 0.0 for key in _LOG_KEYS}
    bundle.eval()
    with torch.no_grad():
        for batch in val_batches:
            values = total_loss(bundle, batch, weights, gen).to_floats()
            for key in _LOG_KEYS:
                sums[key] += values[key]
    return {f"val_{key}": sums[key] / len(val_batches) for key in _LOG_KEYS}
