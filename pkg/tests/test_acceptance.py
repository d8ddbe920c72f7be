"""Acceptance criteria 1-8, each at its stated tolerance.

Every test prints one ``[criterion N] PASS|FAIL`` line with the measured
numbers before asserting; the lines are repeated in the terminal summary.
"""
import csv
import math
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest
from conftest import ACCEPTANCE_LINES

from xrfield import cli
from xrfield.field import FieldConfig, FieldModel
from xrfield.geometry import GridSpec, ViewGeometry, pixel_origins
from xrfield.metrics import RingMask, combination_study, evaluate
from xrfield.phantom import (ALUMINIUM_18KEV, PhantomSpec, RefractiveVolume,
                             analytic_line_integrals_batch, generate_dataset, generate_phantom,
                             wavenumber)
from xrfield.projector import (equally_spaced, forward_project_volume, parse_angle_spec,
                               project_dataset)
from xrfield.sart import SartConfig, sart_reconstruct, sart_reconstruct_stack
from xrfield.trainer import TrainConfig, infer, iterations_per_epoch, learning_rate, train

S = 3.2e-6
K18 = wavenumber(18.0)
TESTS = Path(__file__).parent


def report(n, ok, detail):
    line = f"[criterion {n}] {'PASS' if ok else 'FAIL'} {detail}"
    ACCEPTANCE_LINES.append(line)
    print("\n" + line)


def rel_l2(a, b):
    return float(np.linalg.norm(a - b) / np.linalg.norm(b))


def test_criterion_1_projector_vs_analytic():
    t0 = time.perf_counter()
    rng = np.random.default_rng(11)
    worst, frac_bad, n_pix = 0.0, [], 0
    for vol, ellipsoids in generate_dataset(20, PhantomSpec(), seed=1):
        spec = PhantomSpec()
        view = ViewGeometry(float(rng.uniform(0, np.pi)), (64, 64), S)
        im = forward_project_volume(vol, view, 256)
        box = vol.grid.aabb()
        o = pixel_origins(view, box).reshape(-1, 3)
        _, beta = analytic_line_integrals_batch(ellipsoids, spec.cylinder(), spec.material,
                                                vol.grid, o, view.direction)
        exact = (K18 * beta).reshape(64, 64)
        sel = exact > 0.01 * exact.max()
        err = np.abs(im.attenuation[sel] - exact[sel]) / exact[sel]
        worst = max(worst, float(err.max()))
        frac_bad.append(float(np.mean(err > 0.02)))
        n_pix += int(sel.sum())
    elapsed = time.perf_counter() - t0
    ok = worst <= 0.02 and elapsed <= 120
    report(1, ok, f"max per-pixel rel err {worst:.4f} (tol 0.02), mean fraction of pixels over "
                  f"tol {np.mean(frac_bad):.3f} over {n_pix} pixels, {elapsed:.1f}s")
    assert elapsed <= 120
    assert worst <= 0.02


def test_criterion_2_slab():
    T = 320e-6
    k = 2 * math.pi * 18e3 * 1.602176634e-19 / (6.62607015e-34 * 299792458.0)
    expected = k * ALUMINIUM_18KEV.beta * T
    g = GridSpec.centered((8, 100, 8), S)
    vol = RefractiveVolume(g, np.full(g.shape, ALUMINIUM_18KEV.delta),
                           np.full(g.shape, ALUMINIUM_18KEV.beta))
    im = forward_project_volume(vol, ViewGeometry(0.0, (8, 8), S), 256)
    # interior pixels: the beam crosses the full 100-voxel thickness
    inner = im.attenuation[2:-2, 2:-2]
    err = float(np.max(np.abs(inner / expected - 1)))
    ok = abs(K18 / k - 1) < 1e-12 and err <= 1e-3
    report(2, ok, f"k={K18:.6e} 1/m, expected {expected:.6e}, max rel err {err:.2e} (tol 1e-3)")
    assert K18 == pytest.approx(9.12192e10, rel=1e-5)
    assert err <= 1e-3


def test_criterion_3_gradients():
    t0 = time.perf_counter()
    worst, rows = cli.gradcheck_suite(0, 100)
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-4 and len(rows) == 100 and elapsed <= 60
    report(3, ok, f"max rel err {worst:.2e} over {len(rows)} parameters (tol 1e-4), {elapsed:.1f}s")
    assert len(rows) == 100 and worst <= 1e-4 and elapsed <= 60


# frozen from the first verified run; see the decisions ledger
SART_64_BOUND = 0.15  # first verified run measured 0.1424


@pytest.mark.slow
def test_criterion_4_sart():
    t0 = time.perf_counter()
    vol, _ = generate_phantom(PhantomSpec())
    stack = project_dataset(vol, equally_spaced(64, 0.0, 180.0), 256)
    x = sart_reconstruct(stack, "attenuation", SartConfig(grid=vol.grid, iterations=20,
                                                         relaxation_factor=0.5))
    err = rel_l2(x, K18 * vol.beta)
    sparse = project_dataset(vol, parse_angle_spec("8x0:140"), 256)
    hist = []
    sart_reconstruct(sparse, "attenuation", SartConfig(grid=vol.grid, iterations=50), history=hist)
    elapsed = time.perf_counter() - t0
    ok = err < SART_64_BOUND and hist[-1] <= 0.10 and elapsed <= 300
    report(4, ok, f"64-view rel L2 {err:.5f} (bound {SART_64_BOUND}), 8-view residual "
                  f"{hist[-1]:.4f} (tol 0.10), {elapsed:.1f}s")
    assert err < SART_64_BOUND
    assert hist[-1] <= 0.10
    assert elapsed <= 300


C5_OBJECTS = 20
C5_ITERATIONS = 2500
C5_RAYS = 128
C5_DEPTHS = 16
C5_CONSTRAINTS = (0, 2, 5, 7)


@pytest.fixture(scope="module")
def trained():
    t0 = time.perf_counter()
    spec = PhantomSpec.scaled(32, 6.25)
    vols = [v for v, _ in generate_dataset(C5_OBJECTS, spec, seed=0)]
    angles = parse_angle_spec("8x0:140")
    stacks = [project_dataset(v, angles, 64) for v in vols]
    model = FieldModel.create(FieldConfig(mlp_width=64), vols[0].grid, seed=1)
    cfg = TrainConfig(rays_per_iter=C5_RAYS, depth_samples=C5_DEPTHS, batch_objects=2,
                      constraint_count=4, max_iterations=C5_ITERATIONS, epochs=10 ** 6)
    model, hist = train(stacks, cfg, model, grid=vols[0].grid)
    return vols, stacks, model, hist, time.perf_counter() - t0


@pytest.mark.slow
class TestCriterion5:
    def test_a_loss_reduction(self, trained):
        *_, hist, elapsed = trained
        loss = hist.as_array()
        initial, final = float(loss[:10].mean()), float(loss[-50:].mean())
        ratio = final / initial
        ok = ratio <= 0.1 and elapsed <= 1800
        report("5a", ok, f"loss first-10 mean {initial:.4e}, last-50 mean {final:.4e}, ratio "
                         f"{ratio:.3f} (tol 0.1), {len(loss)} iterations in {elapsed:.0f}s")
        assert ratio <= 0.1
        assert elapsed <= 1800

    def test_b_beats_sart_on_dssim(self, trained):
        vols, stacks, model, _, _ = trained
        vol, stack = vols[0], stacks[0]
        mask = RingMask(0.0, 6.25)
        onix = evaluate(infer(model, stack, C5_CONSTRAINTS, vol.grid), vol, mask)
        sart = evaluate(sart_reconstruct_stack(stack, SartConfig(grid=vol.grid)), vol, mask)
        ok = onix.dssim < sart.dssim
        report("5b", ok, f"object 0: field DSSIM {onix.dssim:.4f} (L2 {onix.l2:.4f}, views "
                         f"{list(C5_CONSTRAINTS)}) vs 8-view SART DSSIM {sart.dssim:.4f} "
                         f"(L2 {sart.l2:.4f})")
        assert onix.dssim < sart.dssim


@pytest.mark.slow
def test_criterion_6_invariant_suite():
    t0 = time.perf_counter()
    files = sorted(str(p) for p in TESTS.glob("test_*.py") if p.name != "test_acceptance.py")
    out = subprocess.run([sys.executable, "-m", "pytest", "-q", "-rf", "-p", "no:cacheprovider",
                          *files], capture_output=True, text=True, cwd=TESTS.parent)
    elapsed = time.perf_counter() - t0
    failed = [ln.split(" ")[1] for ln in out.stdout.splitlines() if ln.startswith("FAILED ")]
    summary = out.stdout.strip().splitlines()[-1] if out.stdout.strip() else out.stderr[-200:]
    ok = out.returncode == 0 and elapsed <= 600
    report(6, ok, f"{summary} in {elapsed:.0f}s (limit 600s); failing: {failed or 'none'}")
    assert out.returncode == 0, "\n".join(failed)
    assert elapsed <= 600


@pytest.fixture(scope="module")
def small_model():
    spec = PhantomSpec.scaled(16, 4.0, seed=3, ellipsoid_count_range=(2, 4))
    vol, _ = generate_phantom(spec)
    stack = project_dataset(vol, parse_angle_spec("8x0:140"), 32)
    fc = FieldConfig(mlp_width=16, latent_dim=8, stage_widths=(2, 2, 4), shared_blocks=1,
                     head_blocks=1, encoding_levels=4)
    return vol, stack, FieldModel.create(fc, vol.grid, seed=3)


@pytest.mark.parametrize("k, count", [(4, 70), (6, 28)])
def test_criterion_7_combinations(small_model, tmp_path, k, count):
    vol, stack, model = small_model
    study = combination_study(model, stack, k, vol, RingMask(0.0, 4.0))
    study.write_csv(tmp_path / "c.csv")
    study.write_summary_csv(tmp_path / "s.csv")
    rows = list(csv.reader(open(tmp_path / "c.csv")))
    summary = list(csv.reader(open(tmp_path / "s.csv")))
    finite = all(math.isfinite(r.l2) and math.isfinite(r.dssim) for _, r in study.entries)
    subsets = {tuple(int(i) for i in r[0].split()) for r in rows[1:]}
    ok = (len(study) == count and len(rows) == count + 1 and len(subsets) == count and finite
          and summary[0] == ["metric", "mean", "std", "min", "max"] and len(summary) == 3)
    report(7, ok, f"K=8 k={k}: {len(study)} entries (expected {count}), finite={finite}, "
                  f"summary rows {[r[0] for r in summary[1:]]}")
    assert len(study) == count and len(rows) == count + 1 and len(subsets) == count
    assert finite
    assert summary[0] == ["metric", "mean", "std", "min", "max"]
    assert [r[0] for r in summary[1:]] == ["l2", "dssim"]
    assert all(math.isfinite(float(x)) for r in summary[1:] for x in r[1:])


def test_criterion_8_protocol_accounting():
    cfg = TrainConfig(batch_objects=2, epochs=1500, lr=0.005, lr_drop_epoch=1000,
                      lr_drop_factor=0.1)
    ipe = iterations_per_epoch(1000, cfg.batch_objects)
    before, at = learning_rate(cfg, 999), learning_rate(cfg, 1000)
    off = TrainConfig(lr=0.005, lr_drop_epoch=None)
    ok = ipe == 500 and before == 0.005 and at == pytest.approx(0.0005, rel=1e-15) \
        and learning_rate(off, 1000) == 0.005
    report(8, ok, f"iterations/epoch {ipe} (expected 500), lr epoch 999 {before}, epoch 1000 {at}")
    assert ipe == 500
    assert before == 0.005 and at == pytest.approx(0.0005, rel=1e-15)
    assert learning_rate(off, 1000) == 0.005
