"""Evaluation suite: denoising metric tables, autoregressive prediction
comparison, rollout-ensemble uncertainty maps, and 2-D latent projections.

All metrics compare against CLEAN reference frames; noise enters only through
the model inputs. Plots are written as PNG files (headless backend), metric
tables as CSV, and run-level results as a summary.json.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import torch

from .data import TrajectoryDataset, gather_windows, sample_window_indices
from .errors import ValidationError
from .models import ModelBundle, rollout
from .simulators import add_noise

CSV_COLUMNS = ("system", "H", "T", "noise", "target", "psnr_db", "l1")


def psnr(x_clean, x_hat, literal_sum: bool = False) -> float:
    """Peak signal-to-noise ratio in dB for [0, 1] images.

    Default: 10 log10(1 / MSE), peak fixed at 1.0. literal_sum=True instead
    divides the squared peak of the clean signal by the sum of squared
    errors. Returns math.inf when the inputs agree exactly.
    """
    a = np.asarray(x_clean, dtype=np.float64)
    b = np.asarray(x_hat, dtype=np.float64)
    if a.shape != b.shape:
        raise ValidationError(f"shape mismatch: {a.shape} vs {b.shape}")
    err = a - b
    if literal_sum:
        denom = float(np.sum(err * err))
        peak = float(np.max(a * a)) if a.size else 1.0
    else:
        denom = float(np.mean(err * err))
        peak = 1.0
    if denom == 0.0:
        return math.inf
    return 10.0 * math.log10(peak / denom)


def l1_metric(x_clean, x_hat) -> float:
    """Sum (not mean) of absolute entrywise differences."""
    a = np.asarray(x_clean, dtype=np.float64)
    b = np.asarray(x_hat, dtype=np.float64)
    if a.shape != b.shape:
        raise ValidationError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.sum(np.abs(a - b)))


@dataclass(frozen=True)
class MetricRow:
    """One table cell: metrics for one (history length, noise level, target)."""

    system: str
    history_len: int
    horizon: int
    noise_sigma2: float
    target: str
    psnr_db: float
    l1: float

    def csv_values(self) -> list:
        return [self.system, self.history_len, self.horizon, self.noise_sigma2,
                self.target, self.psnr_db, self.l1]


def evaluate_reconstruction(
    bundle: ModelBundle,
    test_ds: TrajectoryDataset,
    history_lens: Sequence[int],
    noise_levels: Sequence[float],
    rng: np.random.Generator,
    n_windows: int = 50,
    horizon: int = 0,
    literal_sum: bool = False,
) -> list[MetricRow]:
    """Denoising/prediction metric table over held-out windows.

    For each (history length h, noise level): draw n_windows windows of
    length h+1, add noise to a copy, and score two targets against the clean
    frames using belief means (no sampling):
      current - encode the noisy frame at step h-1, decode.
      next    - encode the noisy h-frame history, predict one step, decode.
    Each row averages per-window PSNR and L1.
    """
    if n_windows < 1:
        raise ValidationError("n_windows must be positive")
    system = str(test_ds.meta.get("system", "unknown"))
    frame_shape = bundle.config.frame_shape
    rows: list[MetricRow] = []
    bundle.eval()
    for h in history_lens:
        if not 1 <= h <= bundle.config.history_len:
            raise ValidationError(
                f"history length {h} not in [1, {bundle.config.history_len}]"
            )
        for sigma2 in noise_levels:
            indices = sample_window_indices(test_ds, n_windows, h + 1, rng)
            clean = gather_windows(test_ds, indices, h + 1)
            noisy = gather_windows(test_ds, indices, h + 1,
                                   noise_sigma2=float(sigma2), rng=rng)
            with torch.no_grad():
                cur_belief = bundle.encoder.encode(noisy.x[:, h - 1])
                x_cur = bundle.decoder.decode(cur_belief.mean)
                flat = noisy.x[:, :h].reshape(-1, *frame_shape)
                z_hist = bundle.encoder.encode(flat).mean.reshape(
                    n_windows, h, bundle.config.latent_dim)
                nxt_belief = bundle.dynamics.predict_next(
                    z_hist, noisy.u[:, :h], noisy.p)
                x_nxt = bundle.decoder.decode(nxt_belief.mean)
            for target, recon, truth in (
                ("current", x_cur, clean.x[:, h - 1]),
                ("next", x_nxt, clean.x[:, h]),
            ):
                recon_np = recon.numpy()
                truth_np = truth.numpy()
                psnrs = [psnr(truth_np[i], recon_np[i], literal_sum=literal_sum)
                         for i in range(n_windows)]
                l1s = [l1_metric(truth_np[i], recon_np[i]) for i in range(n_windows)]
                rows.append(MetricRow(
                    system=system, history_len=int(h), horizon=int(horizon),
                    noise_sigma2=float(sigma2), target=target,
                    psnr_db=float(np.mean(psnrs)), l1=float(np.mean(l1s)),
                ))
    return rows


def write_metrics_csv(rows: Sequence[MetricRow], path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for row in rows:
            writer.writerow(row.csv_values())
    return path


def write_summary(path, payload: dict) -> Path:
    path = Path(path)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=float))
    return path


def _torch_seed_from(rng: np.random.Generator) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(int(rng.integers(0, 2**62)))
    return gen


def _show_frame(ax, frame: np.ndarray) -> None:
    frame = np.clip(frame, 0.0, 1.0)
    if frame.shape[-1] == 1:
        ax.imshow(frame[..., 0], cmap="gray", vmin=0.0, vmax=1.0)
    else:
        ax.imshow(frame)
    ax.set_xticks([])
    ax.set_yticks([])


def _strip_columns(n_steps: int, max_cols: int) -> list[int]:
    if n_steps <= max_cols:
        return list(range(n_steps))
    return sorted({int(round(i)) for i in np.linspace(0, n_steps - 1, max_cols)})


@dataclass
class RolloutComparison:
    """Per-step rollout metrics vs clean truth, plus an optional frame strip."""

    noise_sigma2: float
    l1: np.ndarray
    psnr_db: np.ndarray
    predicted: np.ndarray
    truth: np.ndarray
    png_path: str | None = None


def rollout_compare(
    bundle: ModelBundle,
    test_ds: TrajectoryDataset,
    rng: np.random.Generator,
    traj_index: int = 0,
    n_steps: int = 60,
    noise_sigma2: float = 0.0,
    out_path=None,
    max_strip_cols: int = 8,
) -> RolloutComparison:
    """Autoregressive rollout from the first H noisy frames of one test
    trajectory, scored per step against the clean truth.

    Emits a three-row frame strip (noisy input tail / predicted / true) when
    out_path is given.
    """
    cfg = bundle.config
    h = cfg.history_len
    if not 0 <= traj_index < test_ds.n_traj:
        raise ValidationError(f"traj_index {traj_index} out of range")
    if test_ds.n_frames < h + n_steps:
        raise ValidationError(
            f"trajectory has {test_ds.n_frames} frames, rollout needs {h + n_steps}"
        )
    meas = test_ds.measurements[traj_index]
    controls = test_ds.controls[traj_index]
    clean_hist = meas[:h]
    noisy_hist = add_noise(clean_hist, float(noise_sigma2), rng)
    u_init = torch.from_numpy(controls[: h - 1].copy())
    u_roll = torch.from_numpy(controls[h - 1: h - 1 + n_steps].copy())
    p = torch.from_numpy(test_ds.params[traj_index].copy())
    with torch.no_grad():
        result = rollout(
            bundle, torch.from_numpy(noisy_hist), u_roll, p,
            n_samples=1, rng=_torch_seed_from(rng), u_init_hist=u_init,
        )
    predicted = result.frames[0].numpy()
    truth = meas[h: h + n_steps]
    l1_curve = np.array([l1_metric(truth[k], predicted[k]) for k in range(n_steps)])
    psnr_curve = np.array([psnr(truth[k], predicted[k]) for k in range(n_steps)])
    comparison = RolloutComparison(
        noise_sigma2=float(noise_sigma2), l1=l1_curve, psnr_db=psnr_curve,
        predicted=predicted, truth=truth,
    )
    if out_path is not None:
        comparison.png_path = str(_render_strip(
            noisy_hist, predicted, truth, max_strip_cols, out_path))
    return comparison


def _render_strip(noisy_hist, predicted, truth, max_cols, out_path) -> Path:
    n_steps = predicted.shape[0]
    cols = _strip_columns(n_steps, max_cols)
    hist_cols = _strip_columns(noisy_hist.shape[0], max_cols)
    n_rows = 3 if n_steps else 1
    width = max(len(cols), len(hist_cols), 1)
    fig, axes = plt.subplots(n_rows, width, squeeze=False,
                             figsize=(1.4 * width, 1.5 * n_rows))
    for ax in axes.ravel():
        ax.set_visible(False)
    for j, k in enumerate(hist_cols):
        ax = axes[0][j]
        ax.set_visible(True)
        _show_frame(ax, noisy_hist[k])
        ax.set_title(f"in {k - noisy_hist.shape[0]}", fontsize=7)
    if n_steps:
        for j, k in enumerate(cols):
            for row, frames, label in ((1, predicted, "pred"), (2, truth, "true")):
                ax = axes[row][j]
                ax.set_visible(True)
                _show_frame(ax, frames[k])
                ax.set_title(f"{label} +{k + 1}", fontsize=7)
    fig.tight_layout()
    out_path = Path(out_path)
    fig.savefig(out_path, dpi=110)
    plt.close(fig)
    return out_path


@dataclass
class UncertaintyMap:
    """Pixelwise rollout-ensemble standard deviations for one noise level."""

    noise_sigma2: float
    std: np.ndarray
    mean_std: float
    png_path: str | None = None


def uncertainty_heatmaps(
    bundle: ModelBundle,
    test_ds: TrajectoryDataset,
    noise_levels: Sequence[float],
    rng: np.random.Generator,
    traj_index: int = 0,
    n_rollouts: int = 30,
    n_steps: int = 60,
    out_dir=None,
    max_strip_cols: int = 8,
    deterministic: bool = False,
) -> list[UncertaintyMap]:
    """Ensemble rollout uncertainty per noise level.

    For each level: corrupt the initial history, roll out n_rollouts sampled
    paths, and take the pixelwise std over paths (channel-averaged, so std
    has shape (K, height, width)). All emitted heatmaps share one color
    scale so levels are visually comparable.
    """
    if n_rollouts < 2:
        raise ValidationError("n_rollouts must be at least 2")
    if n_steps < 1:
        raise ValidationError("n_steps must be positive")
    cfg = bundle.config
    h = cfg.history_len
    if not 0 <= traj_index < test_ds.n_traj:
        raise ValidationError(f"traj_index {traj_index} out of range")
    if test_ds.n_frames < h + n_steps:
        raise ValidationError(
            f"trajectory has {test_ds.n_frames} frames, rollout needs {h + n_steps}"
        )
    meas = test_ds.measurements[traj_index]
    controls = test_ds.controls[traj_index]
    u_init = torch.from_numpy(controls[: h - 1].copy())
    u_roll = torch.from_numpy(controls[h - 1: h - 1 + n_steps].copy())
    p = torch.from_numpy(test_ds.params[traj_index].copy())

    maps: list[UncertaintyMap] = []
    for sigma2 in noise_levels:
        noisy_hist = add_noise(meas[:h], float(sigma2), rng)
        with torch.no_grad():
            result = rollout(
                bundle, torch.from_numpy(noisy_hist), u_roll, p,
                n_samples=n_rollouts, rng=_torch_seed_from(rng),
                u_init_hist=u_init, deterministic=deterministic,
            )
        frames = result.frames.numpy()
        std = frames.std(axis=0, dtype=np.float64)
        # identical paths must give exactly 0, not mean-rounding residue
        std[(frames.max(axis=0) - frames.min(axis=0)) == 0.0] = 0.0
        std = std.mean(axis=-1)
        maps.append(UncertaintyMap(
            noise_sigma2=float(sigma2), std=std, mean_std=float(std.mean()),
        ))
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        vmax = max(float(m.std.max()) for m in maps)
        vmax = vmax if vmax > 0 else 1e-8
        cols = _strip_columns(n_steps, max_strip_cols)
        for i, m in enumerate(maps):
            fig, axes = plt.subplots(1, len(cols), squeeze=False,
                                     figsize=(1.6 * len(cols), 2.0))
            for j, k in enumerate(cols):
                ax = axes[0][j]
                im = ax.imshow(m.std[k], vmin=0.0, vmax=vmax, cmap="viridis")
                ax.set_xticks([])
                ax.set_yticks([])
                ax.set_title(f"+{k + 1}", fontsize=7)
            fig.colorbar(im, ax=axes.ravel().tolist(), shrink=0.8)
            path = out_dir / f"uncertainty_noise{i}.png"
            fig.savefig(path, dpi=110)
            plt.close(fig)
            m.png_path = str(path)
    return maps


@dataclass
class LatentProjection:
    """2-D embedding of encoded latent means with per-point colors."""

    embedding: np.ndarray
    colors: np.ndarray
    color_label: str
    png_path: str | None = None


def _wrap_angle(a: np.ndarray) -> np.ndarray:
    return np.arctan2(np.sin(a), np.cos(a))


def latent_projection(
    bundle: ModelBundle,
    test_ds: TrajectoryDataset,
    rng: np.random.Generator,
    color_by: str = "auto",
    max_points: int = 1000,
    perplexity: float = 30.0,
    seed: int = 0,
    theta1_band: tuple = (-0.4, 0.4),
    out_path=None,
) -> LatentProjection:
    """t-SNE projection of encoded latent means.

    color_by: "angle" selects frames whose first state angle lies inside
    theta1_band and colors them by the second angle (needs stored simulator
    states); "timestep" colors by frame index; "auto" picks "angle" when
    states are available, else "timestep". Needs at least 50 points.
    """
    from sklearn.manifold import TSNE  # heavy import, keep it local

    if color_by == "auto":
        color_by = "angle" if test_ds.states is not None else "timestep"
    if color_by not in ("angle", "timestep"):
        raise ValidationError(f"unknown color_by {color_by!r}")

    m, n = test_ds.n_traj, test_ds.n_frames
    traj_idx, frame_idx = np.meshgrid(np.arange(m), np.arange(n), indexing="ij")
    traj_idx = traj_idx.ravel()
    frame_idx = frame_idx.ravel()
    if color_by == "angle":
        if test_ds.states is None:
            raise ValidationError("angle coloring needs simulator states")
        theta1 = _wrap_angle(test_ds.states[traj_idx, frame_idx, 0])
        keep = (theta1 >= theta1_band[0]) & (theta1 <= theta1_band[1])
        traj_idx, frame_idx = traj_idx[keep], frame_idx[keep]
        colors = _wrap_angle(test_ds.states[traj_idx, frame_idx, 1])
        color_label = "theta2"
    else:
        colors = frame_idx.astype(np.float64)
        color_label = "timestep"

    n_points = traj_idx.shape[0]
    if n_points < 50:
        raise ValidationError(f"need at least 50 encoded states, got {n_points}")
    if n_points > max_points:
        pick = np.sort(rng.choice(n_points, size=max_points, replace=False))
        traj_idx, frame_idx, colors = traj_idx[pick], frame_idx[pick], colors[pick]
        n_points = max_points

    frames = torch.from_numpy(test_ds.measurements[traj_idx, frame_idx])
    with torch.no_grad():
        latents = bundle.encoder.encode(frames).mean.numpy().astype(np.float64)

    effective_perplexity = min(float(perplexity), (n_points - 1) / 3.0)
    tsne = TSNE(n_components=2, perplexity=effective_perplexity,
                init="pca", random_state=seed)
    embedding = tsne.fit_transform(latents)

    projection = LatentProjection(
        embedding=embedding, colors=np.asarray(colors, dtype=np.float64),
        color_label=color_label,
    )
    if out_path is not None:
        fig, ax = plt.subplots(figsize=(5, 4))
        scatter = ax.scatter(embedding[:, 0], embedding[:, 1],
                             c=projection.colors, s=8, cmap="twilight")
        fig.colorbar(scatter, ax=ax, label=color_label)
        ax.set_xlabel("tsne-1")
        ax.set_ylabel("tsne-2")
        fig.tight_layout()
        out_path = Path(out_path)
        fig.savefig(out_path, dpi=110)
        plt.close(fig)
        projection.png_path = str(out_path)
    return projection
