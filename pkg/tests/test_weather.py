import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from v2xdg.errors import InvalidParams
from v2xdg.pointcloud import PointCloud, SceneFrame
from v2xdg.weather import (
    MIN_SCATTER_RANGE,
    FogParams,
    RainParams,
    SnowParams,
    WeatherConfig,
    attenuate,
    corrupt_scene,
    derive_seed,
    fog_extinction,
    power_law_extinction,
    simulate,
    simulate_fog,
    simulate_rain,
    simulate_snow,
)

from conftest import random_cloud

# frozen closed forms
EXP_MINUS_2 = 0.1353352832366127
RAIN_ALPHA_10MMH = 0.03981071705534972   # 0.01 * 10 ** 0.6


def uniform_cloud(seed, m=10_000, extent=100.0):
    rng = np.random.default_rng(seed)
    xyz = rng.uniform(-extent, extent, size=(m, 3))
    xyz[:, 2] *= 0.05
    return PointCloud(np.hstack([xyz, rng.uniform(0.05, 1.0, size=(m, 1))]))


class TestFog:
    def test_zero_extinction_identity(self, rng):
        pc = random_cloud(rng, 500)
        p = FogParams.from_extinction(0.0, scatter_prob=0.0)
        assert simulate_fog(pc, p, seed=3) == pc

    def test_single_point_attenuation(self):
        pc = PointCloud([[50.0, 0.0, 0.0, 1.0]])
        out = simulate_fog(pc, FogParams.from_extinction(0.02), seed=0)
        assert len(out) == 1
        assert abs(out.intensity[0] - EXP_MINUS_2) < 1e-12

    def test_koschmieder(self):
        assert fog_extinction(3912.0) == pytest.approx(1e-3, rel=1e-15)
        assert FogParams(visibility=100.0).extinction == pytest.approx(0.03912)

    def test_bad_visibility(self):
        with pytest.raises(InvalidParams):
            FogParams(visibility=0.0)
        with pytest.raises(InvalidParams):
            fog_extinction(-1.0)

    def test_lower_visibility_retains_fewer(self):
        pc = uniform_cloud(0)
        for seed in range(5):
            n60 = len(simulate_fog(pc, FogParams(visibility=60.0), seed))
            n200 = len(simulate_fog(pc, FogParams(visibility=200.0), seed))
            assert n60 <= n200

    def test_scatter_points_on_ray_and_in_band(self):
        pc = uniform_cloud(1, m=3000)
        p = FogParams(visibility=30.0, scatter_prob=1.0, scatter_range_max=25.0)
        out = simulate_fog(pc, p, seed=9)
        scat = out.intensity == p.detection_threshold
        assert scat.any()
        r = out.ranges()[scat]
        assert (r >= MIN_SCATTER_RANGE).all() and (r < p.scatter_range_max).all()

    def test_scatter_keeps_direction(self):
        pc = PointCloud([[300.0, 400.0, 0.0, 0.2]])
        out = simulate_fog(pc, FogParams(visibility=50.0, scatter_prob=1.0), seed=1)
        assert len(out) == 1
        u = out.xyz[0] / np.linalg.norm(out.xyz[0])
        np.testing.assert_allclose(u, [0.6, 0.8, 0.0], atol=1e-12)

    def test_attenuation_never_increases_intensity(self):
        pc = uniform_cloud(2, m=2000)
        out = simulate_fog(pc, FogParams(visibility=80.0, scatter_prob=0.0), seed=0)
        # scatter off: survivors keep input order, so compare against the kept subset
        att = attenuate(pc.intensity, pc.ranges(), FogParams(visibility=80.0).extinction)
        kept = ~((att < 0.05) & (att < pc.intensity))
        np.testing.assert_array_equal(out.intensity, att[kept])
        assert (out.intensity <= pc.intensity[kept]).all()


class TestRain:
    def test_power_law(self):
        assert abs(power_law_extinction(10.0, 0.01, 0.6) - RAIN_ALPHA_10MMH) < 1e-15
        assert RainParams().extinction == pytest.approx(RAIN_ALPHA_10MMH, rel=1e-15)

    def test_zero_rate_identity(self, rng):
        pc = random_cloud(rng, 400)
        assert simulate_rain(pc, RainParams(rain_rate=0.0), seed=5) == pc

    def test_zero_jitter_keeps_positions(self, rng):
        pc = random_cloud(rng, 400)
        p = RainParams(rain_rate=10.0, range_jitter_sigma_per_rate=0.0)
        out = simulate_rain(pc, p, seed=5)
        att = attenuate(pc.intensity, pc.ranges(), p.extinction)
        kept = ~((att < p.detection_threshold) & (att < pc.intensity))
        np.testing.assert_array_equal(out.xyz, pc.xyz[kept])

    def test_jitter_is_radial(self, rng):
        pc = random_cloud(rng, 200)
        p = RainParams(rain_rate=1.0, extinction_coeff_a=0.0, range_jitter_sigma_per_rate=5.0)
        out = simulate_rain(pc, p, seed=1)
        assert len(out) == len(pc)
        u0 = pc.xyz / np.linalg.norm(pc.xyz, axis=1, keepdims=True)
        nz = np.linalg.norm(out.xyz, axis=1) > 0
        u1 = out.xyz[nz] / np.linalg.norm(out.xyz[nz], axis=1, keepdims=True)
        np.testing.assert_allclose(u1, u0[nz], atol=1e-9)

    def test_count_never_grows(self):
        pc = uniform_cloud(3, m=2000)
        assert len(simulate_rain(pc, RainParams(rain_rate=50.0), 0)) <= len(pc)


class TestSnow:
    def test_identity(self, rng):
        pc = random_cloud(rng, 300)
        assert simulate_snow(pc, SnowParams(snowfall_rate=0.0, clutter_rate=0.0), seed=2) == pc

    def test_clutter_poisson_mean(self):
        pc = PointCloud(np.tile([[1.0, 0.0, 0.0, 1.0]], (100, 1)))
        p = SnowParams(snowfall_rate=0.0, clutter_rate=1000.0)
        counts = [len(simulate_snow(pc, p, seed)) - 100 for seed in range(200)]
        assert abs(np.mean(counts) - 100.0) <= 10.0

    def test_clutter_inside_radius(self):
        pc = PointCloud(np.tile([[1.0, 0.0, 0.0, 1.0]], (500, 1)))
        p = SnowParams(snowfall_rate=0.0, clutter_rate=2000.0, clutter_radius=7.5)
        out = simulate_snow(pc, p, seed=4)
        clutter = out.points[500:]
        assert len(clutter) > 0
        assert (np.linalg.norm(clutter[:, :3], axis=1) < 7.5).all()
        assert (clutter[:, 3] == p.detection_threshold).all()

    def test_count_bound(self):
        pc = uniform_cloud(5, m=2000)
        out = simulate_snow(pc, SnowParams(clutter_rate=0.0), seed=0)
        assert len(out) <= len(pc)


@pytest.mark.parametrize("make", [
    lambda a: FogParams.from_extinction(a, scatter_prob=0.0),
    lambda a: RainParams(rain_rate=1.0, extinction_coeff_a=a, extinction_exp_b=1.0),
    lambda a: SnowParams(snowfall_rate=1.0, extinction_coeff_a=a, extinction_exp_b=1.0, clutter_rate=0.0),
])
def test_retained_fraction_monotone_in_extinction(make):
    pc = uniform_cloud(11, m=2000)
    fn = {FogParams: simulate_fog, RainParams: simulate_rain, SnowParams: simulate_snow}
    means = []
    for alpha in (0.005, 0.01, 0.02, 0.04):
        p = make(alpha)
        means.append(np.mean([len(fn[type(p)](pc, p, s)) / len(pc) for s in range(50)]))
    assert all(b <= a for a, b in zip(means, means[1:]))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**63 - 1), st.floats(0.001, 0.2))
def test_fog_deterministic(seed, alpha):
    pc = uniform_cloud(0, m=300)
    p = FogParams.from_extinction(alpha)
    assert simulate_fog(pc, p, seed) == simulate_fog(pc, p, seed)


class TestConfig:
    def test_round_trip(self):
        cfg = WeatherConfig.from_dict({"condition": "rain", "params": {"rain_rate": 25.0}})
        assert cfg.params.rain_rate == 25.0
        assert WeatherConfig.from_dict(cfg.to_dict()) == cfg

    def test_unknown_field(self):
        with pytest.raises(InvalidParams):
            WeatherConfig.from_dict({"condition": "fog", "params": {"visibilty": 10}})

    def test_mismatched_params(self):
        with pytest.raises(InvalidParams):
            WeatherConfig("fog", RainParams())

    def test_clean_without_params(self):
        with pytest.raises(InvalidParams):
            WeatherConfig.from_dict({"condition": "clean", "params": {"visibility": 5}})

    def test_simulate_dispatch(self, rng):
        pc = random_cloud(rng, 100)
        assert simulate(pc, WeatherConfig("clean"), 0) is pc
        assert simulate(pc, WeatherConfig("fog"), 3) == simulate_fog(pc, FogParams(), 3)


class TestCorruptScene:
    def test_clean_identity(self, two_agent_scene):
        assert corrupt_scene(two_agent_scene, WeatherConfig("clean"), 1) is two_agent_scene

    def test_deterministic(self, two_agent_scene):
        cfg = WeatherConfig("snow")
        a = corrupt_scene(two_agent_scene, cfg, 42)
        b = corrupt_scene(two_agent_scene, cfg, 42)
        for x, y in zip(a.agents, b.agents):
            assert x.cloud == y.cloud

    def test_agent_order_independent(self, two_agent_scene):
        cfg = WeatherConfig("fog", FogParams(visibility=40.0))
        flipped = SceneFrame(two_agent_scene.frame_id, two_agent_scene.agents[::-1])
        a = corrupt_scene(two_agent_scene, cfg, 7)
        b = corrupt_scene(flipped, cfg, 7)
        for ag in a.agents:
            assert ag.cloud == b.agent(ag.agent_id).cloud

    def test_metadata_unchanged(self, two_agent_scene):
        out = corrupt_scene(two_agent_scene, WeatherConfig("rain"), 3)
        assert [a.pose for a in out.agents] == [a.pose for a in two_agent_scene.agents]
        assert out.gt_boxes == two_agent_scene.gt_boxes

    def test_sub_seeds_differ(self):
        s = {derive_seed(0, "f", a) for a in ("ego", "cav1", "cav2")}
        assert len(s) == 3
        assert derive_seed(0, "f", "ego") == derive_seed(0, "f", "ego")
