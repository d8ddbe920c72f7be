import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xrfield.geometry import GridSpec, Ray, ViewGeometry, pixel_origins
from xrfield.phantom import (ALUMINIUM_18KEV, Cylinder, EllipsoidSpec, Material, PhantomSpec,
                             analytic_line_integrals, analytic_line_integrals_batch,
                             chord_lengths, generate_dataset, generate_phantom, rng_for,
                             wavenumber)

# CODATA exact SI values, written out independently of scipy
H_PLANCK = 6.62607015e-34
C_LIGHT = 299792458.0
E_CHARGE = 1.602176634e-19
S = 3.2e-6


def k_oracle(kev):
    return 2 * math.pi * kev * 1e3 * E_CHARGE / (H_PLANCK * C_LIGHT)


class TestConstants:
    def test_wavenumber_18kev(self):
        assert wavenumber(18.0) == pytest.approx(k_oracle(18.0), rel=1e-12)
        assert wavenumber(18.0) == pytest.approx(9.12192e10, rel=1e-5)

    def test_aluminium_values(self):
        assert ALUMINIUM_18KEV.delta == 1.6741e-7
        assert ALUMINIUM_18KEV.beta == 6.4088e-9
        assert ALUMINIUM_18KEV.energy == 18.0

    def test_slab_attenuation_arithmetic(self):
        # 320 um of aluminium at 18 keV
        assert k_oracle(18.0) * 6.4088e-9 * 320e-6 == pytest.approx(9.12e10 * 6.4088e-9 * 3.2e-4, rel=1e-3)

    def test_bad_energy(self):
        with pytest.raises(ValueError):
            wavenumber(0.0)

    def test_negative_material_rejected(self):
        with pytest.raises(ValueError):
            Material(-1e-7, 1e-9)


def small_spec(**kw):
    base = PhantomSpec.scaled(24, 5.0)
    return replace(base, **kw)


class TestGeneratePhantom:
    def test_uniform_cylinder(self):
        spec = replace(PhantomSpec(), ellipsoid_count_range=(0, 0))
        vol, ell = generate_phantom(spec)
        assert ell == []
        centre = vol.delta[32, 31:33, 31:33]
        assert np.all(centre == 1.6741e-7)
        assert set(np.unique(vol.delta)) == {0.0, 1.6741e-7}

    def test_two_levels_only(self):
        vol, _ = generate_phantom(PhantomSpec(seed=3))
        assert set(np.unique(vol.delta)) <= {0.0, ALUMINIUM_18KEV.delta}
        assert set(np.unique(vol.beta)) <= {0.0, ALUMINIUM_18KEV.beta}

    def test_void_at_ellipsoid_centre(self):
        vol, ell = generate_phantom(PhantomSpec(seed=5))
        for e in ell:
            x, y, z = (int(round(c)) for c in e.center)
            if 0 <= z < 64:
                assert vol.delta[z, y, x] == 0.0 and vol.beta[z, y, x] == 0.0

    def test_nothing_outside_cylinder(self):
        spec = PhantomSpec(seed=1)
        vol, _ = generate_phantom(spec)
        yy, xx = np.mgrid[0:64, 0:64]
        outside = np.hypot(xx - 31.5, yy - 31.5) > spec.cylinder_radius
        assert np.all(vol.delta[:, outside] == 0)

    def test_deterministic(self):
        a, ea = generate_phantom(PhantomSpec(seed=11))
        b, eb = generate_phantom(PhantomSpec(seed=11))
        assert ea == eb
        assert np.array_equal(a.delta, b.delta) and np.array_equal(a.beta, b.beta)

    def test_seeds_differ(self):
        _, ea = generate_phantom(PhantomSpec(seed=1))
        _, eb = generate_phantom(PhantomSpec(seed=2))
        assert ea != eb

    def test_ellipsoid_ranges(self):
        for seed in range(10):
            spec = PhantomSpec(seed=seed)
            _, ell = generate_phantom(spec)
            assert 5 <= len(ell) <= 10
            for e in ell:
                assert all(5.0 <= a <= 20.0 for a in e.semi_axes)
                cx, cy = e.center[:2]
                assert math.hypot(cx - 31.5, cy - 31.5) <= spec.cylinder_radius

    def test_paper_scale_spec(self):
        spec = PhantomSpec.paper_scale()
        assert spec.grid.dims == (256, 256, 256)
        assert 2 * spec.cylinder_radius == 100
        assert spec.cylinder_height == 256
        assert spec.semi_axis_range == (20.0, 80.0)
        assert spec.ellipsoid_count_range == (5, 10)
        spec.validate()

    def test_desk_default_spec(self):
        spec = PhantomSpec()
        assert spec.grid.dims == (64, 64, 64) and spec.grid.voxel_size == S
        assert 2 * spec.cylinder_radius == 25

    def test_cylinder_too_large(self):
        with pytest.raises(ValueError):
            generate_phantom(small_spec(cylinder_radius=13.0))

    def test_void_fraction_positive(self):
        for seed in range(5):
            spec = PhantomSpec(seed=seed)
            vol, _ = generate_phantom(spec)
            full, _ = generate_phantom(replace(spec, ellipsoid_count_range=(0, 0)))
            inside = full.delta > 0
            assert np.mean(vol.delta[inside] == 0) > 0


class TestDataset:
    def test_repeatable(self):
        a = [e for _, e in generate_dataset(2, small_spec(), 7)]
        b = [e for _, e in generate_dataset(2, small_spec(), 7)]
        assert a == b

    def test_desk_dataset_distinct(self):
        lists = [e for _, e in generate_dataset(20, PhantomSpec(), 0)]
        assert len(lists) == 20
        assert all(5 <= len(e) <= 10 for e in lists)
        assert len({tuple(e) for e in lists}) == 20

    def test_streams_are_independent(self):
        a = rng_for(5, 0).random(4)
        b = rng_for(5, 1).random(4)
        assert not np.allclose(a, b)

    def test_is_lazy(self):
        gen = generate_dataset(1000, PhantomSpec.paper_scale(), 0)
        assert iter(gen) is gen

    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            list(generate_dataset(0, small_spec(), 0))


GRID = GridSpec.centered((64, 64, 64), S)
CYL = PhantomSpec().cylinder()


class TestAnalyticIntegrals:
    def _central_ray(self, dz=0.0):
        return Ray(np.array([0.0, -1e-3, dz]), np.array([0.0, 1.0, 0.0]))

    def test_central_chord(self):
        d, b = analytic_line_integrals([], CYL, ALUMINIUM_18KEV, self._central_ray(), GRID)
        assert b == pytest.approx(6.4088e-9 * 2 * 12.5 * S, rel=1e-12)
        assert d == pytest.approx(1.6741e-7 * 2 * 12.5 * S, rel=1e-12)

    def test_miss(self):
        ray = Ray(np.array([5e-5, -1e-3, 0.0]), np.array([0.0, 1.0, 0.0]))
        assert analytic_line_integrals([], CYL, ALUMINIUM_18KEV, ray, GRID) == (0.0, 0.0)

    def test_above_cylinder_misses(self):
        ray = Ray(np.array([0.0, -1e-3, 1.2e-4]), np.array([0.0, 1.0, 0.0]))
        assert analytic_line_integrals([], CYL, ALUMINIUM_18KEV, ray, GRID) == (0.0, 0.0)

    def test_centred_void_sphere(self):
        c = (31.5, 31.5, 31.5)
        sphere = EllipsoidSpec(c, (4.0, 4.0, 4.0))
        _, b = analytic_line_integrals([sphere], CYL, ALUMINIUM_18KEV, self._central_ray(), GRID)
        assert b == pytest.approx(6.4088e-9 * (25.0 - 8.0) * S, rel=1e-12)

    def test_overlapping_voids_counted_once(self):
        c = (31.5, 31.5, 31.5)
        a = EllipsoidSpec(c, (4.0, 4.0, 4.0))
        b_ = EllipsoidSpec((31.5, 33.5, 31.5), (4.0, 4.0, 4.0))
        _, b = analytic_line_integrals([a, b_], CYL, ALUMINIUM_18KEV, self._central_ray(), GRID)
        # union along y: [-4, 6] around the centre
        assert b == pytest.approx(6.4088e-9 * (25.0 - 10.0) * S, rel=1e-12)

    def test_void_protruding_past_wall(self):
        e = EllipsoidSpec((31.5, 31.5 - 12.5, 31.5), (3.0, 3.0, 3.0))
        length = chord_lengths([e], CYL, [[31.5, -100.0, 31.5]], [0.0, 1.0, 0.0])
        assert length[0] == pytest.approx(25.0 - 3.0)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2 ** 32), st.floats(0, 2 * math.pi), st.floats(-0.4, 0.4),
           st.floats(-0.4, 0.4))
    def test_matches_brute_force_membership(self, seed, a, s, h):
        # exact interval union vs fine point sampling of the analytic shape
        spec = PhantomSpec(seed=seed)
        _, ell = generate_phantom(replace(spec, grid=GridSpec.centered((64, 64, 64), S)))
        v = ViewGeometry(a, (64, 64), S)
        o_idx = GRID.world_to_index(pixel_origins(v, GRID.aabb())[32 + int(h * 64), 32 + int(s * 64)])
        d = v.direction
        t = np.linspace(0, 200, 200001)
        pts = o_idx + t[:, None] * d
        x, y, z = pts.T
        inside = ((x - 31.5) ** 2 + (y - 31.5) ** 2 <= 12.5 ** 2) & (z >= CYL.z_min) & (z <= CYL.z_max)
        for e in ell:
            q = sum(((p - c) / r) ** 2 for p, c, r in zip((x, y, z), e.center, e.semi_axes))
            inside &= q > 1
        brute = inside.sum() * (t[1] - t[0])
        exact = chord_lengths(ell, CYL, o_idx[None], d)[0]
        assert exact == pytest.approx(brute, abs=0.03)

    def test_batch_matches_single(self):
        _, ell = generate_phantom(PhantomSpec(seed=4))
        v = ViewGeometry(0.3, (64, 64), S)
        o = pixel_origins(v, GRID.aabb())[::9, ::7].reshape(-1, 3)
        db, bb = analytic_line_integrals_batch(ell, CYL, ALUMINIUM_18KEV, GRID, o, v.direction)
        for i in range(len(o)):
            d1, b1 = analytic_line_integrals(ell, CYL, ALUMINIUM_18KEV, Ray(o[i], v.direction), GRID)
            assert d1 == pytest.approx(db[i], rel=1e-12) and b1 == pytest.approx(bb[i], rel=1e-12)


class TestVoxelisationBound:
    """Analytic integral vs a dense Riemann sum over the voxelised phantom."""

    def test_riemann_sum_within_two_percent(self):
        rng = np.random.default_rng(0)
        worst = []
        for seed in range(4):
            spec = PhantomSpec(seed=seed)
            vol, ell = generate_phantom(spec)
            for _ in range(25):
                v = ViewGeometry(rng.uniform(0, 2 * math.pi), (64, 64), S)
                i, j = rng.integers(8, 56, size=2)
                o = pixel_origins(v, GRID.aabb())[i, j]
                ray = Ray(o, v.direction)
                _, exact = analytic_line_integrals(ell, CYL, ALUMINIUM_18KEV, ray, GRID)
                # 10^4 uniform samples across the bounding box, nearest-voxel lookup
                t0 = np.linalg.norm(o) - 0.5 * 64 * math.sqrt(3) * S
                t = t0 + (np.arange(10000) + 0.5) * (64 * math.sqrt(3) * S / 10000)
                idx = np.rint(GRID.world_to_index(ray.at(t))).astype(int)
                ok = np.all((idx >= 0) & (idx < 64), axis=1)
                vals = np.zeros(len(t))
                vals[ok] = vol.beta[idx[ok, 2], idx[ok, 1], idx[ok, 0]]
                riemann = vals.sum() * (t[1] - t[0])
                if exact > 0.01 * ALUMINIUM_18KEV.beta * 25 * S:
                    worst.append(abs(riemann - exact) / exact)
        worst = np.array(worst)
        assert np.all(worst <= 0.02), (
            f"{np.mean(worst > 0.02):.0%} of rays exceed 2%; max relative error {worst.max():.3f}")
