import numpy as np
import pytest
from scipy import stats

from xrfield.field import FieldConfig, FieldModel
from xrfield.formats import read_checkpoint
from xrfield.geometry import ViewGeometry
from xrfield.phantom import PhantomSpec, generate_dataset
from xrfield.projector import ContrastImage, ProjectionStack, parse_angle_spec, project_dataset
from xrfield.trainer import (RaySampler, TrainConfig, TrainingError, gradient_magnitude, infer,
                             iterations_per_epoch, learning_rate, loss, sample_depths, sample_rays,
                             select_constraints, stratified_depths, train)

TINY = dict(mlp_width=16, latent_dim=8, stage_widths=(2, 2, 4), shared_blocks=1, head_blocks=1,
            encoding_levels=4)


@pytest.fixture(scope="module")
def data():
    spec = PhantomSpec.scaled(16, 3.0)
    vols = [v for v, _ in generate_dataset(3, spec, 0)]
    stacks = [project_dataset(v, parse_angle_spec("5x0:144"), 32) for v in vols]
    return vols, stacks


def tiny_model(grid, seed=1):
    return FieldModel.create(FieldConfig(**TINY), grid, seed=seed)


def quick(**kw):
    base = dict(rays_per_iter=32, depth_samples=8, batch_objects=2, constraint_count=2,
                epochs=1000, max_iterations=6, seed=3)
    base.update(kw)
    return TrainConfig(**base)


def stack_of(images, H=8, W=8):
    ims = [ContrastImage(a, a.copy(), ViewGeometry(0.1 * k, (H, W), 3.2e-6)) for k, a in enumerate(images)]
    return ProjectionStack(ims, 18.0)


class TestSchedule:
    def test_paper_protocol_iterations_per_epoch(self):
        assert iterations_per_epoch(1000, 2) == 500
        assert iterations_per_epoch(5, 2) == 3

    def test_lr_drop(self):
        cfg = TrainConfig(lr_drop_epoch=1000)
        assert learning_rate(cfg, 999) == 0.005
        assert learning_rate(cfg, 1000) == pytest.approx(0.0005)
        assert learning_rate(TrainConfig(lr_drop_epoch=None), 10 ** 6) == 0.005

    def test_presets(self):
        assert TrainConfig.simulated().rays_per_iter == 1024
        e = TrainConfig.experimental()
        assert (e.rays_per_iter, e.depth_samples, e.constraint_count, e.epochs) == (3096, 64, 6, 1500)

    @pytest.mark.parametrize("kw", [dict(rays_per_iter=0), dict(depth_samples=1), dict(lr=0.0),
                                    dict(pdf_floor=-1.0), dict(max_iterations=0)])
    def test_rejects(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)


class TestConstraintSelection:
    def test_each_view_chosen_half_the_time(self):
        rng = np.random.default_rng(0)
        counts = np.zeros(8)
        for _ in range(10_000):
            counts[select_constraints(8, 4, rng)] += 1
        assert np.all(np.abs(counts / 10_000 - 0.5) <= 0.02)

    def test_sorted_distinct(self):
        s = select_constraints(10, 6, np.random.default_rng(1))
        assert len(set(s)) == 6 and np.all(np.diff(s) > 0)

    @pytest.mark.parametrize("K,M", [(4, 5), (4, 0)])
    def test_rejects(self, K, M):
        with pytest.raises(ValueError):
            select_constraints(K, M, np.random.default_rng(0))


class TestRaySampler:
    def test_gradient_magnitude_of_ramp(self):
        img = np.tile(np.arange(6.0), (4, 1))
        g = gradient_magnitude(img)
        assert np.allclose(g[:, 1:-1], 1.0)
        assert np.allclose(g[:, 0], 0.5)

    def test_constant_image_is_uniform(self):
        s = RaySampler.from_stack(stack_of([np.full((8, 8), 2.0)] * 2))
        assert np.allclose(s.tables, 1.0 / 64)

    def test_edge_pdf_chi_square(self):
        img = np.zeros((8, 8))
        img[:, 4:] = 1.0
        s = RaySampler.from_stack(stack_of([img]), floor=1e-3)
        view, row, col = s.sample(20_000, np.random.default_rng(5))
        observed = np.bincount(row * 8 + col, minlength=64)
        expected = s.tables[0] * 20_000
        big = expected >= 5
        obs = np.append(observed[big], observed[~big].sum())
        exp = np.append(expected[big], expected[~big].sum())
        assert stats.chisquare(obs, exp).pvalue > 1e-3
        # edge columns take nearly all the mass
        assert observed.reshape(8, 8)[:, 3:5].sum() > 0.99 * 20_000

    def test_views_equally_likely(self):
        a = np.zeros((8, 8))
        a[2, 2] = 100.0
        s = RaySampler.from_stack(stack_of([a, np.full((8, 8), 1.0)]))
        view, _, _ = s.sample(10_000, np.random.default_rng(2))
        assert abs(view.mean() - 0.5) < 0.02

    def test_rays_carry_measurements(self, data):
        _, stacks = data
        st_ = stacks[0]
        s = RaySampler.from_stack(st_)
        rays = sample_rays(st_, s, 50, np.random.default_rng(0))
        for r in range(len(rays)):
            k, (i, j), meas = rays[r]
            assert meas == (st_.images[k].attenuation[i, j], st_.images[k].phase[i, j])


class TestDepths:
    def test_one_sample_per_stratum(self):
        t = stratified_depths([1.0, 2.0], [3.0, 2.5], 16, np.random.default_rng(0))
        for row, (a, b) in zip(t, [(1.0, 3.0), (2.0, 2.5)]):
            idx = np.floor((row - a) / (b - a) * 16)
            assert np.array_equal(idx, np.arange(16))

    def test_deltas_cover_interval(self):
        d = sample_depths(0.2, 1.7, 256, np.random.default_rng(3))
        assert d.deltas.sum() == pytest.approx(1.5, rel=0.01)
        assert np.all(d.deltas > 0)

    def test_rejects(self):
        with pytest.raises(ValueError):
            stratified_depths([1.0], [1.0], 8, np.random.default_rng(0))
        with pytest.raises(ValueError):
            stratified_depths([0.0], [1.0], 1, np.random.default_rng(0))


class TestLoss:
    def test_examples(self):
        assert loss([[1.0, 2.0]], [[1.0, 2.0]]) == 0.0
        assert loss([[1.0, 2.0], [0.0, 0.0]], [[0.0, 0.0], [0.0, 1.0]]) == pytest.approx(3.0)
        assert loss([[1.0, 5.0]], [[0.0, None]]) == 1.0
        assert loss([[1.0, 5.0]], [[0.0, np.nan]]) == 1.0

    def test_brute_force(self):
        r = np.random.default_rng(0)
        p, m = r.normal(size=(37, 2)), r.normal(size=(37, 2))
        ref = sum(sum((p[i, c] - m[i, c]) ** 2 for c in range(2)) for i in range(37)) / 37
        assert loss(p, m) == pytest.approx(ref, rel=1e-12)

    def test_rejects(self):
        with pytest.raises(ValueError):
            loss([[1.0, 2.0]], [])
        with pytest.raises(ValueError):
            loss(np.zeros((2, 2)), np.zeros((3, 2)))


class TestTrain:
    def test_deterministic_single_worker(self, data):
        vols, stacks = data
        _, a = train(stacks, quick(), tiny_model(vols[0].grid))
        _, b = train(stacks, quick(), tiny_model(vols[0].grid))
        assert a.loss == b.loss

    def test_workers_match_single_worker(self, data):
        vols, stacks = data
        m1, a = train(stacks, quick(max_iterations=3), tiny_model(vols[0].grid))
        m2, b = train(stacks, quick(max_iterations=3, workers=2), tiny_model(vols[0].grid))
        assert a.loss == b.loss
        for k in m1.params.params:
            assert np.array_equal(m1.params.params[k], m2.params.params[k])

    def test_bookkeeping_and_outputs(self, data, tmp_path):
        vols, stacks = data
        cfg = quick(max_iterations=None, epochs=3, checkpoint_every=2, lr_drop_epoch=1)
        log = tmp_path / "train.csv"
        _, h = train(stacks, cfg, tiny_model(vols[0].grid), log_path=log, checkpoint_dir=tmp_path / "ck")
        assert h.iterations_per_epoch == 2
        assert h.epoch == [0, 0, 1, 1, 2, 2]
        assert h.lr == [0.005, 0.005] + [0.0005] * 4
        lines = log.read_text().splitlines()
        assert lines[0] == "iteration,epoch,loss" and len(lines) == 7
        names = sorted(p.name for p in (tmp_path / "ck").iterdir())
        assert names == ["best.ckpt", "epoch00002.ckpt", "final.ckpt"]
        model, extra = read_checkpoint(tmp_path / "ck" / "final.ckpt")
        assert extra["iteration"] == 6

    def test_rays_outside_constraints_are_used(self, data):
        vols, stacks = data
        _, h = train(stacks, quick(max_iterations=10), tiny_model(vols[0].grid))
        assert sum(h.off_constraint_rays) > 0
        assert all(0 <= n <= 32 for n in h.off_constraint_rays)

    @pytest.mark.filterwarnings("ignore:invalid value:RuntimeWarning")
    def test_non_finite_loss_raises(self, data):
        vols, stacks = data
        m = tiny_model(vols[0].grid)
        m.params.params["mlp.out.b"][:] = np.nan
        with pytest.raises(TrainingError, match="non-finite"):
            train(stacks, quick(), m)

    def test_dataset_checks(self, data):
        vols, stacks = data
        with pytest.raises(ValueError):
            train([], quick(), tiny_model(vols[0].grid))
        with pytest.raises(ValueError):
            train(stacks, quick(constraint_count=5), tiny_model(vols[0].grid))

    def test_smoke_loss_decreases(self, data):
        vols, stacks = data
        _, h = train(stacks, quick(max_iterations=150, rays_per_iter=64, lr=0.01), tiny_model(vols[0].grid))
        L = np.asarray(h.loss)
        assert L[-20:].mean() < 0.5 * L[:5].mean()


class TestInfer:
    def test_validation(self, data):
        vols, stacks = data
        m = tiny_model(vols[0].grid)
        with pytest.raises(ValueError):
            infer(m, stacks[0], [], vols[0].grid)
        with pytest.raises(ValueError):
            infer(m, stacks[0], [1, 1], vols[0].grid)
        with pytest.raises(IndexError):
            infer(m, stacks[0], [0, 5], vols[0].grid)

    def test_repeatable_and_leaves_parameters(self, data):
        vols, stacks = data
        m = tiny_model(vols[0].grid)
        before = {k: v.copy() for k, v in m.params.params.items()}
        a = infer(m, stacks[0], [0, 2], vols[0].grid)
        b = infer(m, stacks[0], [0, 2], vols[0].grid)
        assert np.array_equal(a.beta, b.beta) and np.array_equal(a.delta, b.delta)
        assert all(np.array_equal(before[k], m.params.params[k]) for k in before)
        assert a.grid == vols[0].grid
