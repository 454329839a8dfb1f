"""Dataset container, binary round trips, window sampling, generation."""

import hashlib

import numpy as np
import pytest
import torch

from dklrom.data import (
    TrajectoryDataset,
    WindowBatch,
    gather_windows,
    load_dataset,
    read_array,
    sample_window_indices,
    sample_windows,
    save_dataset,
    split_dataset,
    write_array,
)
from dklrom.errors import FormatError, ValidationError
from dklrom.simulators import GenerateConfig, PendulumParams, RDParams, generate_dataset
from dklrom.simulators.generate import field_to_measurement, measurement_to_field


def _toy_dataset(m=4, n=12, frame=(6, 6, 3), u_dim=1, p_dim=0, seed=0, states=True):
    rng = np.random.default_rng(seed)
    return TrajectoryDataset(
        measurements=rng.uniform(0, 1, size=(m, n) + frame).astype(np.float32),
        controls=rng.normal(size=(m, n - 1, u_dim)).astype(np.float32),
        params=rng.normal(size=(m, p_dim)).astype(np.float32),
        meta={"system": "toy", "n_traj": m, "n_frames": n},
        states=rng.normal(size=(m, n, 4)).astype(np.float32) if states else None,
    )


def _digest(ds):
    h = hashlib.sha256()
    for arr in (ds.measurements, ds.controls, ds.params):
        h.update(arr.tobytes())
    return h.hexdigest()


class TestBinaryArrays:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(1)
        for shape in [(), (3,), (4, 5), (2, 3, 4, 5)]:
            arr = rng.normal(size=shape).astype(np.float32)
            p = tmp_path / "a.bin"
            write_array(p, arr)
            back = read_array(p)
            assert back.dtype == np.float32
            assert back.shape == arr.shape
            assert np.array_equal(back, arr)
            assert back.tobytes() == arr.tobytes()

    def test_bad_magic_rejected(self, tmp_path):
        p = tmp_path / "bad.bin"
        p.write_bytes(b"NOTMAGIC" + b"\x00" * 32)
        with pytest.raises(FormatError):
            read_array(p)

    def test_truncated_payload_rejected(self, tmp_path):
        p = tmp_path / "t.bin"
        write_array(p, np.zeros((4, 4), dtype=np.float32))
        raw = p.read_bytes()
        p.write_bytes(raw[:-8])
        with pytest.raises(FormatError):
            read_array(p)


class TestDatasetIO:
    def test_save_load_round_trip(self, tmp_path):
        ds = _toy_dataset()
        save_dataset(ds, tmp_path / "ds")
        back = load_dataset(tmp_path / "ds")
        assert np.array_equal(back.measurements, ds.measurements)
        assert np.array_equal(back.controls, ds.controls)
        assert np.array_equal(back.params, ds.params)
        assert np.array_equal(back.states, ds.states)
        assert back.meta["system"] == "toy"

    def test_optional_states_absent(self, tmp_path):
        ds = _toy_dataset(states=False)
        save_dataset(ds, tmp_path / "ds")
        assert load_dataset(tmp_path / "ds").states is None

    def test_missing_meta_rejected(self, tmp_path):
        with pytest.raises(FormatError):
            load_dataset(tmp_path)

    def test_shape_mismatch_vs_meta_rejected(self, tmp_path):
        ds = _toy_dataset()
        save_dataset(ds, tmp_path / "ds")
        write_array(tmp_path / "ds" / "controls.bin", np.zeros((1, 2, 1), dtype=np.float32))
        with pytest.raises(FormatError):
            load_dataset(tmp_path / "ds")

    def test_container_validation(self):
        with pytest.raises(ValidationError):
            _toy_dataset(n=1)
        ds = _toy_dataset()
        with pytest.raises(ValidationError):
            TrajectoryDataset(
                measurements=ds.measurements.astype(np.float64),
                controls=ds.controls,
                params=ds.params,
                meta={},
            )
        bad = ds.measurements.copy()
        bad[0, 0, 0, 0, 0] = np.nan
        with pytest.raises(ValidationError):
            TrajectoryDataset(bad, ds.controls, ds.params, {})


class TestSplit:
    def test_trajectory_granularity_and_sizes(self):
        ds = _toy_dataset(m=10)
        train, test = split_dataset(ds, 0.2, np.random.default_rng(0))
        assert train.n_traj == 8 and test.n_traj == 2
        # every test trajectory is absent from train (compare raw bytes)
        train_rows = {t.tobytes() for t in train.measurements}
        for row in test.measurements:
            assert row.tobytes() not in train_rows

    def test_each_side_nonempty_at_extremes(self):
        ds = _toy_dataset(m=3)
        train, test = split_dataset(ds, 0.01, np.random.default_rng(1))
        assert test.n_traj == 1 and train.n_traj == 2
        train, test = split_dataset(ds, 0.99, np.random.default_rng(1))
        assert train.n_traj == 1 and test.n_traj == 2


class TestWindows:
    def test_windows_never_cross_boundaries(self):
        ds = _toy_dataset(m=3, n=9)
        rng = np.random.default_rng(2)
        for _ in range(20):
            h, t = int(rng.integers(1, 5)), int(rng.integers(1, 4))
            if h + t > ds.n_frames:
                continue
            batch = sample_windows(ds, 16, h, t, rng)
            assert batch.x.shape == (16, h + t) + ds.frame_shape
            assert batch.u.shape == (16, h + t - 1, ds.control_dim)
            for traj, off in batch.sources:
                assert 0 <= off and off + h + t <= ds.n_frames
                assert 0 <= traj < ds.n_traj

    def test_gather_matches_direct_slices(self):
        ds = _toy_dataset(m=3, n=9)
        idx = np.array([[0, 0], [2, 5], [1, 3]])
        batch = gather_windows(ds, idx, length=4)
        for b, (t, o) in enumerate(idx):
            assert np.array_equal(batch.x[b].numpy(), ds.measurements[t, o : o + 4])
            assert np.array_equal(batch.u[b].numpy(), ds.controls[t, o : o + 3])

    def test_noise_resampled_but_dataset_untouched(self):
        ds = _toy_dataset()
        before = _digest(ds)
        rng = np.random.default_rng(3)
        idx = sample_window_indices(ds, 8, 4, rng)
        a = gather_windows(ds, idx, 4, noise_sigma2=0.25**2, rng=rng)
        b = gather_windows(ds, idx, 4, noise_sigma2=0.25**2, rng=rng)
        assert not torch.equal(a.x, b.x)
        assert torch.equal(a.u, b.u)
        assert _digest(ds) == before
        assert a.x.min() >= 0.0 and a.x.max() <= 1.0

    def test_window_length_validation(self):
        ds = _toy_dataset(n=6)
        rng = np.random.default_rng(4)
        with pytest.raises(ValidationError):
            sample_windows(ds, 4, 5, 2, rng)
        with pytest.raises(ValidationError):
            sample_windows(ds, 4, 0, 2, rng)

    def test_noise_requires_rng(self):
        ds = _toy_dataset()
        idx = np.array([[0, 0]])
        with pytest.raises(ValidationError):
            gather_windows(ds, idx, 4, noise_sigma2=0.1, rng=None)


class TestGeneratePendulum:
    def test_shapes_meta_and_determinism(self):
        cfg = GenerateConfig(
            system="pendulum", n_traj=3, n_frames=8, seed=11, render_size=32,
            steps_per_frame=4, pendulum=PendulumParams(dt=5e-3),
        )
        ds1 = generate_dataset(cfg)
        ds2 = generate_dataset(cfg)
        assert ds1.measurements.shape == (3, 8, 32, 32, 3)
        assert ds1.controls.shape == (3, 7, 1)
        assert ds1.states.shape == (3, 8, 4)
        assert ds1.param_dim == 0
        assert np.array_equal(ds1.measurements, ds2.measurements)
        assert np.array_equal(ds1.states, ds2.states)
        assert abs(ds1.meta["frame_dt"] - 0.02) < 1e-12
        assert np.abs(ds1.controls).max() <= cfg.pendulum.torque_max

    def test_frames_match_states(self):
        from dklrom.simulators import PendulumState, render_pendulum

        cfg = GenerateConfig(system="pendulum", n_traj=2, n_frames=5, seed=7, render_size=32)
        ds = generate_dataset(cfg)
        for i in (0, 1):
            for k in (0, 4):
                re_rendered = render_pendulum(
                    PendulumState.from_array(ds.states[i, k].astype(np.float64)),
                    cfg.pendulum,
                    32,
                )
                assert np.abs(re_rendered - ds.measurements[i, k]).max() < 1e-5

    def test_distinct_seeds_differ(self):
        a = generate_dataset(GenerateConfig(system="pendulum", n_traj=1, n_frames=4, seed=0, render_size=32))
        b = generate_dataset(GenerateConfig(system="pendulum", n_traj=1, n_frames=4, seed=1, render_size=32))
        assert not np.array_equal(a.measurements, b.measurements)


class TestGenerateRd:
    def test_shapes_params_and_determinism(self):
        cfg = GenerateConfig(
            system="reaction_diffusion", n_traj=2, n_frames=5, seed=3,
            save_every=2, rd=RDParams(grid_n=32, domain_half=10.0, dt=0.02),
            beta_range=(0.8, 1.2),
        )
        ds1 = generate_dataset(cfg)
        ds2 = generate_dataset(cfg)
        assert ds1.measurements.shape == (2, 5, 32, 32, 2)
        assert ds1.control_dim == 0
        assert ds1.params.shape == (2, 1)
        assert (ds1.params >= 0.8).all() and (ds1.params <= 1.2).all()
        assert np.array_equal(ds1.measurements, ds2.measurements)
        assert ds1.states is None
        assert ds1.measurements.min() >= 0.0 and ds1.measurements.max() <= 1.0

    def test_field_mapping_round_trip(self):
        f = np.linspace(-1.2, 1.2, 50)
        assert np.abs(measurement_to_field(field_to_measurement(f)) - f).max() < 1e-12

    def test_bad_config_rejected(self):
        from dklrom.errors import ConfigurationError

        with pytest.raises(ConfigurationError):
            GenerateConfig(system="lorenz")
        with pytest.raises(ConfigurationError):
            GenerateConfig(beta_range=(1.5, 0.5))
