import math

import numpy as np
import pytest

from demandcast.errors import ConfigurationError
from demandcast.hexgrid import count_demand
from demandcast.synth import (
    SYNTH_EPOCH,
    RegionStyle,
    SynthConfig,
    draw_counts,
    generate_region,
    oracle_expected_demand,
    rate_matrix,
    region_grid,
)


def small_config(**overrides):
    defaults = dict(n_regions=3, grid_diameter_cells=6, days=2, seed=21)
    defaults.update(overrides)
    return SynthConfig(**defaults)


class TestConfigValidation:
    def test_profile_length_must_match_slots(self):
        with pytest.raises(ConfigurationError):
            SynthConfig(interval_min=30, shared_daily_profile=tuple([1.0] * 24))

    def test_interval_must_divide_day(self):
        with pytest.raises(ConfigurationError):
            SynthConfig(interval_min=7)

    def test_default_profile_mean_one(self):
        cfg = SynthConfig()
        assert np.mean(cfg.shared_daily_profile) == pytest.approx(1.0)
        assert len(cfg.shared_daily_profile) == 48


class TestRates:
    def test_zero_base_intensity_zero_trips(self):
        cfg = small_config(base_intensity=0.0)
        region = generate_region(cfg, 0)
        assert region.trips == []

    def test_flat_profile_no_hotspots_is_constant(self):
        style = RegionStyle(hotspot_centers=(), intensity_scale=1.0, phase_shift_slots=0)
        cfg = small_config(
            base_intensity=2.0,
            kernel_floor=1.0,
            shared_daily_profile=tuple([1.0] * 48),
            region_styles=(style, style, style),
        )
        rates = rate_matrix(cfg, 0)
        assert np.allclose(rates, 2.0)

    def test_phase_shift_rotates_profile(self):
        base = RegionStyle(hotspot_centers=((0.5, 0.5),), phase_shift_slots=0)
        shifted = RegionStyle(hotspot_centers=((0.5, 0.5),), phase_shift_slots=5)
        cfg = small_config(n_regions=2, region_styles=(base, shifted))
        r0 = rate_matrix(cfg, 0)
        r1 = rate_matrix(cfg, 1)
        spd = cfg.slots_per_day
        # lambda_shifted(k) = lambda_base(k + s) within one day
        for k in range(spd - 5):
            assert r1[:, k] == pytest.approx(r0[:, k + 5])

    def test_oracle_matches_independent_reimplementation(self):
        cfg = small_config()
        grid = region_grid(cfg, 1)
        style = cfg.region_styles[1]
        xy = grid.centroids_xy
        xmin, ymin = xy.min(axis=0)
        xmax, ymax = xy.max(axis=0)
        rng = np.random.default_rng(3)
        for _ in range(25):
            cell = int(rng.integers(grid.n_cells))
            slot = int(rng.integers(cfg.n_slots))
            kernel = cfg.kernel_floor
            for cx_rel, cy_rel in style.hotspot_centers:
                cx = xmin + cx_rel * (xmax - xmin)
                cy = ymin + cy_rel * (ymax - ymin)
                d2 = (xy[cell, 0] - cx) ** 2 + (xy[cell, 1] - cy) ** 2
                kernel += cfg.hotspot_gain * math.exp(
                    -d2 / (2 * style.hotspot_sigma_km**2)
                )
            profile = cfg.shared_daily_profile[
                (slot + style.phase_shift_slots) % cfg.slots_per_day
            ]
            expected = cfg.base_intensity * style.intensity_scale * profile * kernel
            assert oracle_expected_demand(cfg, 1, cell, slot) == pytest.approx(
                expected, rel=1e-12
            )

    def test_region_index_out_of_range(self):
        with pytest.raises(ConfigurationError):
            rate_matrix(small_config(), 5)


class TestGenerateRegion:
    def test_deterministic_across_calls(self):
        cfg = small_config()
        a = generate_region(cfg, 1)
        b = generate_region(cfg, 1)
        assert a.trips == b.trips
        assert a.region_id == b.region_id == "R1"

    def test_counts_round_trip_exactly(self):
        cfg = small_config()
        for idx in range(cfg.n_regions):
            grid, counts = draw_counts(cfg, idx)
            region = generate_region(cfg, idx)
            assert len(region.trips) == counts.sum()
            tensor, report = count_demand(
                region, grid, cfg.interval_min, SYNTH_EPOCH, cfg.n_slots
            )
            assert report["out_of_grid"] == 0
            assert report["out_of_window"] == 0
            assert np.array_equal(tensor.values, counts)

    def test_trips_inside_bounding_polygon(self):
        from demandcast.trips import clip_to_region

        cfg = small_config()
        region = generate_region(cfg, 0)
        clipped = clip_to_region(region.trips, region.bounding_polygon)
        assert len(clipped.trips) == len(region.trips)

    def test_poisson_mean_within_3_sigma(self):
        # empirical per-cell mean over many slots approaches lambda (CLT)
        style = RegionStyle(hotspot_centers=(), intensity_scale=1.0, phase_shift_slots=0)
        cfg = SynthConfig(
            n_regions=1, grid_diameter_cells=4, days=9, interval_min=10,
            base_intensity=2.0, kernel_floor=1.0,
            shared_daily_profile=tuple([1.0] * 144),
            region_styles=(style,), seed=17,
        )
        grid, counts = draw_counts(cfg, 0)
        k = cfg.n_slots
        assert k >= 1000
        lam = 2.0
        sigma = math.sqrt(lam / k)
        means = counts.mean(axis=1)
        inside = np.abs(means - lam) <= 3.0 * sigma
        # a few 3-sigma misses are expected across many cells; demand the bulk
        assert inside.mean() > 0.95

    def test_shared_profile_correlation(self):
        cfg = SynthConfig()  # default desk-scale config
        profile = np.array(cfg.shared_daily_profile)
        spd = cfg.slots_per_day
        for idx in range(cfg.n_regions):
            _, counts = draw_counts(cfg, idx)
            phase = cfg.region_styles[idx].phase_shift_slots
            by_slot = counts.sum(axis=0).reshape(cfg.days, spd).sum(axis=0)
            # rates use profile[(k + phase) % spd]; rolling by +phase undoes it
            unshifted = np.roll(by_slot, phase)
            corr = np.corrcoef(profile, unshifted)[0, 1]
            assert corr >= 0.9
