import numpy as np
import pytest
from scipy import integrate

from gpfplume.config import PlumeConfig
from gpfplume.plume import plume_reset, plume_step, wind_step, WindState, filament_radius, filament_kernel, \
    concentration_at, concentration_field, plume_snapshot, simulate
from gpfplume.util import ConfigError


def _with_filaments(cfg, positions, ages, seed=0):
    s = plume_reset(cfg, seed)
    s.positions = np.array(positions, dtype=float).reshape(-1, 2)
    s.ages = np.array(ages, dtype=float)
    s.ids = np.arange(len(ages), dtype=np.int64)
    s.next_id = len(ages)
    return(s)


def test_filament_radius():
    cfg = PlumeConfig()
    assert filament_radius(0.0, cfg) == pytest.approx(0.01)
    assert filament_radius(1.0, cfg) == pytest.approx(0.31639, abs=1e-5)
    assert filament_radius(30.0, cfg) == pytest.approx(1.73208, abs=1e-5)
    taus = np.linspace(0, 30, 50)
    assert np.all(np.diff(filament_radius(taus, cfg)) > 0)
    with pytest.raises(ValueError):
        filament_radius(-0.1, cfg)


def test_kernel_mass_by_quadrature():
    """
    the unclamped kernel of one filament integrates to its mass
    """
    sigma2 = filament_radius(1.0, PlumeConfig()) ** 2
    half = 10.0 * np.sqrt(sigma2)
    mass, _ = integrate.dblquad(lambda y, x: filament_kernel(x * x + y * y, sigma2, 0.1),
                                -half, half, -half, half)
    assert mass == pytest.approx(0.1, rel=0.01)


def test_concentration_single_filament():
    cfg = PlumeConfig()
    # age giving sigma = 0.2
    tau = (0.04 - cfg.init_radius ** 2) / (2 * cfg.diffusion_rate)
    s = _with_filaments(cfg, [[10.0, 10.0]], [tau])
    c = concentration_at(s, [10.0, 10.0], cfg, noisy=False)
    assert c == pytest.approx(0.1 / (2 * np.pi * 0.04), rel=1e-6)
    assert c == pytest.approx(0.39789, abs=1e-5)
    # just past the 3 sigma cutoff
    assert concentration_at(s, [10.0 + 0.6 + 1e-6, 10.0], cfg, noisy=False) == 0.0


def test_concentration_empty_and_clamped():
    cfg = PlumeConfig()
    s = plume_reset(cfg, 1)
    assert concentration_at(s, [5.0, 5.0], cfg, noisy=False) == 0.0
    for _ in range(100):
        c = concentration_at(s, [5.0, 5.0], cfg)
        assert 0.0 <= c <= 1.0
    # a fresh filament is far above the clamp
    s = _with_filaments(cfg, [[5.0, 5.0]], [0.0])
    assert concentration_at(s, [5.0, 5.0], cfg) == 1.0
    with pytest.raises(ValueError):
        concentration_at(s, [-0.1, 5.0], cfg)
    with pytest.raises(ValueError):
        concentration_at(s, [5.0, 20.5], cfg)


def test_concentration_field_matches_point_queries():
    cfg = PlumeConfig()
    s = simulate_state(cfg, seed=3, steps=200)
    pts = np.array([[x, 10.0] for x in np.linspace(1, 19, 10)])
    field = concentration_field(s, pts, cfg)
    for p, c in zip(pts, field):
        assert concentration_at(s, p, cfg, noisy=False) == pytest.approx(min(c, 1.0))


def simulate_state(cfg, seed, steps):
    s = plume_reset(cfg, seed)
    for _ in range(steps):
        plume_step(s, cfg)
    return(s)


def test_reset_places_source_upwind():
    cfg = PlumeConfig()
    s = plume_reset(cfg, 42)
    # wind blows toward +x, so the upwind half is x < 10
    assert s.source[0] < 10.0
    assert s.num_filaments() == 0
    assert s.wind.speed == cfg.wind_speed_mean
    assert s.wind.direction == 0.0

    xs = np.array([plume_reset(cfg, seed).source for seed in range(1000)])
    np.testing.assert_allclose(xs.mean(axis=0), [5.0, 10.0], atol=0.3)
    assert xs[:, 0].min() >= 2.0 and xs[:, 0].max() <= 8.0
    assert xs[:, 1].min() >= 7.0 and xs[:, 1].max() <= 13.0


def test_reset_is_deterministic():
    cfg = PlumeConfig()
    a = simulate_state(cfg, 7, 300)
    b = simulate_state(cfg, 7, 300)
    np.testing.assert_array_equal(a.positions, b.positions)
    np.testing.assert_array_equal(a.ages, b.ages)
    assert a.wind == b.wind


def test_invalid_config_rejected():
    with pytest.raises(ConfigError, match='plume.dt'):
        plume_reset(PlumeConfig(dt=5.0), 0)
    with pytest.raises(ConfigError, match='diffusion_rate'):
        plume_reset(PlumeConfig(diffusion_rate=0.0), 0)
    with pytest.raises(ConfigError, match='noise_std'):
        plume_reset(PlumeConfig(noise_std=0.01), 0)


class _ZeroNoise:

    def standard_normal(self, n):
        return(np.zeros(n))


def test_wind_step_drift():
    cfg = PlumeConfig()
    w = wind_step(WindState(cfg.wind_speed_mean, cfg.wind_dir_mean), cfg, _ZeroNoise())
    assert w == WindState(cfg.wind_speed_mean, cfg.wind_dir_mean)
    w = wind_step(WindState(2.0, 0.0), cfg, _ZeroNoise())
    assert w.speed == pytest.approx(1.95)
    w = wind_step(WindState(0.0, 0.0), PlumeConfig(wind_speed_mean=0.0, wind_speed_min=0.1), _ZeroNoise())
    assert w.speed == 0.1


def test_wind_stationary_variance():
    cfg = PlumeConfig()
    rng = np.random.default_rng(11)
    w = WindState(cfg.wind_speed_mean, cfg.wind_dir_mean)
    speeds = np.empty(100_000)
    for i in range(len(speeds)):
        w = wind_step(w, cfg, rng)
        speeds[i] = w.speed
    expected = cfg.wind_speed_std ** 2 * 2.0 / (2.0 - cfg.alpha)
    assert np.var(speeds[1000:]) == pytest.approx(expected, rel=0.1)


def test_emission_rate():
    cfg = PlumeConfig()
    n = 100_000
    s = simulate_state(cfg, 5, n)
    # Poisson(0.5) per tick, 3 sigma band
    assert abs(s.emitted / n - 0.5) < 3 * np.sqrt(0.5 / n)


def test_population_without_boundaries():
    cfg = PlumeConfig(boundary_removal=False)
    s = plume_reset(cfg, 9)
    counts = []
    for t in range(20_000):
        plume_step(s, cfg)
        if t >= 400:
            counts.append(s.num_filaments())
    assert np.mean(counts) == pytest.approx(cfg.emission_rate * cfg.decay_time, rel=0.05)


def test_expired_filament_removed():
    cfg = PlumeConfig(emission_rate=1e-9)
    s = _with_filaments(cfg, [[10.0, 10.0], [10.0, 12.0]], [29.95, 1.0])
    plume_step(s, cfg)
    assert list(s.ids) == [1]


def test_pure_advection():
    cfg = PlumeConfig(wind_speed_std=0.0, wind_dir_std_deg=0.0, emission_rate=1e-9)
    s = _with_filaments(cfg, [[1.0, 10.0]], [0.0])
    for k in range(1, 11):
        plume_step(s, cfg)
        np.testing.assert_allclose(s.positions[0], [1.0 + k * cfg.wind_speed_mean * cfg.dt, 10.0], atol=1e-12)


def test_snapshot_table():
    cfg = PlumeConfig()
    s = simulate_state(cfg, 2, 100)
    df = plume_snapshot(s)
    assert list(df.columns) == ['time', 'filament_id', 'x', 'y', 'age']
    assert len(df) == s.num_filaments()
    assert df['filament_id'].is_monotonic_increasing
    frames = simulate(cfg, 2, 100, every=10)
    times = set(frames["time"].round(6))
    assert times <= {round(0.1 * k, 6) for k in range(10, 101, 10)}
    assert 10.0 in times
