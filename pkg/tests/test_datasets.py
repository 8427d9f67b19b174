import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from agdiff.datasets import (
    Episode,
    aggregate_eval,
    append_episode,
    average_jerk,
    load_episodes,
    save_episodes,
)


def make_episode(seed=0, steps=10, env="pusht-static"):
    rng = np.random.default_rng(seed)
    return Episode(
        env=env,
        dt=0.1,
        observations=rng.standard_normal((steps, 4)),
        actions=rng.standard_normal((steps, 2)),
        meta={"seed": seed, "source": "scripted", "variant": "static",
              "coverages": rng.uniform(0, 1, steps).tolist(),
              "ee_path": rng.uniform(0, 500, (steps, 2)).tolist()},
    )


class TestPersistence:
    def test_empty_roundtrip(self, tmp_path):
        path = tmp_path / "empty.jsonl"
        save_episodes(path, [])
        assert path.read_text() == ""
        assert load_episodes(path) == []

    def test_roundtrip_300_steps_bit_exact(self, tmp_path):
        path = tmp_path / "eps.jsonl"
        ep = make_episode(seed=3, steps=300)
        save_episodes(path, [ep])
        loaded = load_episodes(path)
        assert len(loaded) == 1
        assert loaded[0].equals(ep)
        assert loaded[0].observations.tobytes() == ep.observations.tobytes()

    def test_multiple_episodes_order(self, tmp_path):
        path = tmp_path / "multi.jsonl"
        eps = [make_episode(seed=s) for s in range(5)]
        save_episodes(path, eps)
        loaded = load_episodes(path)
        assert all(a.equals(b) for a, b in zip(loaded, eps))

    def test_truncated_file_names_offset(self, tmp_path):
        path = tmp_path / "trunc.jsonl"
        save_episodes(path, [make_episode(0), make_episode(1)])
        blob = path.read_bytes()
        cut = path.read_bytes().index(b"\n") + 20
        path.write_bytes(blob[:cut])
        with pytest.raises(ValueError, match="byte offset"):
            load_episodes(path)

    def test_version_mismatch(self, tmp_path):
        path = tmp_path / "old.jsonl"
        path.write_text('{"format_version": 99, "env": "x", "dt": 0.1, '
                        '"observations": [], "actions": [], "meta": {}}\n')
        with pytest.raises(ValueError, match="format_version"):
            load_episodes(path)

    def test_append_matches_save(self, tmp_path):
        p1, p2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        eps = [make_episode(seed=s) for s in range(3)]
        save_episodes(p1, eps)
        for ep in eps:
            append_episode(p2, ep)
        assert p1.read_bytes() == p2.read_bytes()

    def test_mismatched_lengths_rejected(self):
        with pytest.raises(ValueError, match="actions"):
            Episode(env="x", dt=0.1, observations=np.zeros((5, 2)), actions=np.zeros((2, 2)))


class TestAverageJerk:
    def test_constant_velocity_zero(self):
        t = np.arange(10.0)
        traj = np.stack([2 * t + 1, -3 * t], axis=1)
        assert average_jerk(traj, dt=0.1) == 0.0

    def test_cubic_exact_six(self):
        for dt in (0.01, 0.1, 1.0, 2.5):
            t = np.arange(8) * dt
            traj = t**3
            assert average_jerk(traj, dt) == pytest.approx(6.0, abs=1e-9)

    def test_quadratic_zero(self):
        t = np.arange(12) * 0.3
        traj = np.stack([t**2, 5 * t**2 - t + 2], axis=1)
        assert average_jerk(traj, 0.3) == pytest.approx(0.0, abs=1e-9)

    def test_too_few_points(self):
        with pytest.raises(ValueError, match="4 points"):
            average_jerk(np.zeros((3, 2)), 0.1)

    @settings(max_examples=40, deadline=None)
    @given(c3=st.floats(-5, 5), c2=st.floats(-5, 5), c1=st.floats(-5, 5),
           dt=st.floats(0.01, 2.0), n=st.integers(4, 20))
    def test_cubic_leading_coefficient(self, c3, c2, c1, dt, n):
        t = np.arange(n) * dt
        traj = c3 * t**3 + c2 * t**2 + c1 * t
        assert average_jerk(traj, dt) == pytest.approx(6 * abs(c3), rel=1e-9, abs=1e-7)


class TestAggregate:
    def ep_with_coverage(self, coverages, dt=0.1):
        n = len(coverages)
        return Episode(env="pusht-static", dt=dt,
                       observations=np.zeros((n, 2)), actions=np.zeros((n, 2)),
                       meta={"coverages": list(coverages)})

    def test_all_success(self):
        eps = [self.ep_with_coverage([0.5, 0.96]) for _ in range(3)]
        out = aggregate_eval(eps)
        assert out["success_rate"] == 1.0
        assert out["time_to_complete_mean"] == pytest.approx(0.1)

    def test_single_episode_zero_std(self):
        out = aggregate_eval([self.ep_with_coverage([0.4])])
        assert out["coverage_std"] == 0.0

    def test_two_episode_arithmetic(self):
        eps = [self.ep_with_coverage([0.9]), self.ep_with_coverage([1.0])]
        out = aggregate_eval(eps)
        assert out["coverage_mean"] == pytest.approx(0.95)
        assert out["success_rate"] == 0.5

    def test_no_success_time_nan(self):
        out = aggregate_eval([self.ep_with_coverage([0.1, 0.2])])
        assert np.isnan(out["time_to_complete_mean"])

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            aggregate_eval([])
