import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lccal.errors import CascadeError, ConfigError
from lccal.geometry import (Transform, euler_rpy_to_rotmat, rotmat_to_quat, se3_compose,
                            se3_inverse)
from lccal.io.synthetic import scene_dataset
from lccal.model import ModelConfig, build_model
from lccal.perturb import CASCADE_RANGES, RangeSpec, derive_seed, make_initial_extrinsic, sample_deviation
from lccal.pipeline import (COLUMNS, CalibrationEstimate, CascadeConfig, CascadeStage, FixedStage, OracleStage,
                            TrainOptions, evaluate, evaluate_batch_loss, refine_cascade, sliding_filter,
                            temporal_filter, train_range, write_error_csv)
from lccal.pipeline.metrics import aggregate, read_error_csv
from lccal.projection import CameraIntrinsics
from oracles import random_rotation

K = CameraIntrinsics(50.0, 50.0, 16.0, 8.0, 32, 16)


def _rand_T(rng, scale=1.0):
    return Transform(random_rotation(rng), scale * rng.standard_normal(3))


def _cloud(rng, n=200):
    return rng.uniform([-5, -5, -1], [15, 5, 3], (n, 3))


def _max_diff(a, b):
    return float(np.max(np.abs(a.as_matrix() - b.as_matrix())))


class TestCascade:
    def test_sequential_equals_closed_form(self, rng):
        cloud, rgb = _cloud(rng), np.zeros((16, 32, 3), np.uint8)
        for _ in range(50):
            stages = [_rand_T(rng, 0.3) for _ in range(5)]
            est = refine_cascade(rgb, cloud, _rand_T(rng), [FixedStage(s) for s in stages], K)
            assert _max_diff(est.closed_form(), est.T_LC_hat) < 1e-12
            assert est.check(1e-12)

    def test_oracle_recovers_ground_truth(self, rng):
        cloud, rgb = _cloud(rng), np.zeros((16, 32, 3), np.uint8)
        for i in range(50):
            gt = _rand_T(rng)
            T_init = make_initial_extrinsic(gt, sample_deviation(CASCADE_RANGES[0], i).delta)
            est = refine_cascade(rgb, cloud, T_init, [OracleStage(gt)] * 5, K)
            assert _max_diff(est.T_LC_hat, gt) < 1e-9
            assert len(est.stages) == 5 and len(est.fill_ratios) == 5

    def test_identity_stages(self, rng):
        T_init = _rand_T(rng)
        est = refine_cascade(np.zeros((16, 32, 3)), _cloud(rng), T_init, [FixedStage(Transform())] * 3, K)
        np.testing.assert_array_equal(est.T_LC_hat.as_matrix(), T_init.as_matrix())

    def test_non_finite_stage_reports_index(self, rng):
        bad = Transform(np.eye(3), [np.nan, 0, 0], validate=False)
        with pytest.raises(CascadeError) as info:
            refine_cascade(np.zeros((16, 32, 3)), _cloud(rng), Transform(),
                           [FixedStage(Transform()), FixedStage(bad)], K)
        assert info.value.stage == 1

    def test_missing_checkpoint(self, tmp_path):
        cfg = CascadeConfig([CascadeStage(CASCADE_RANGES[0], str(tmp_path / "nope.ckpt"))])
        with pytest.raises(CascadeError):
            cfg.predictors()

    def test_config_validation_and_json(self, tmp_path):
        with pytest.raises(ConfigError):
            CascadeConfig([])
        with pytest.raises(ConfigError):
            CascadeConfig([CascadeStage(CASCADE_RANGES[1], "a"), CascadeStage(CASCADE_RANGES[0], "b")])
        cfg = CascadeConfig.default_ranges([f"m{i}.ckpt" for i in range(5)])
        (tmp_path / "c.json").write_text(cfg.to_json())
        back = CascadeConfig.load(tmp_path / "c.json")
        assert [s.checkpoint for s in back.stages] == [str(tmp_path / f"m{i}.ckpt") for i in range(5)]
        for a, b in zip(cfg.stages, back.stages):
            assert a.range.max_translation == b.range.max_translation
            assert a.range.max_rotation == pytest.approx(b.range.max_rotation, abs=1e-15)

    def test_estimate_round_trip(self, rng):
        est = refine_cascade(np.zeros((16, 32, 3)), _cloud(rng), _rand_T(rng),
                             [FixedStage(_rand_T(rng, 0.1)) for _ in range(2)], K)
        back = CalibrationEstimate.from_dict(est.to_dict())
        assert _max_diff(back.T_LC_hat, est.T_LC_hat) < 1e-15
        assert back.fill_ratios == est.fill_ratios

    def test_model_stage_runs(self, rng, tmp_path):
        cfg = ModelConfig(height=16, width=32, widths=(3, 4), head_hidden=8, branch_hidden=5)
        build_model(cfg).save(tmp_path / "m.ckpt")
        stages = CascadeConfig([CascadeStage(CASCADE_RANGES[0], str(tmp_path / "m.ckpt"))])
        est = refine_cascade(np.zeros((16, 32, 3), np.uint8), _cloud(rng), _rand_T(rng), stages, K)
        assert est.check()


def _chordal_mean(Rs):
    U, _, Vt = np.linalg.svd(np.mean(Rs, axis=0))
    R = U @ Vt
    if np.linalg.det(R) < 0:
        R = U @ np.diag([1.0, 1.0, -1.0]) @ Vt
    return R


def _sort_median(values):
    s = sorted(values)
    n = len(s)
    return s[n // 2] if n % 2 else 0.5 * (s[n // 2 - 1] + s[n // 2])


def _rpy(R):
    """ZYX Euler angles (roll about x, pitch about y, yaw about z)."""
    return math.atan2(R[2, 1], R[2, 2]), math.asin(-R[2, 0]), math.atan2(R[1, 0], R[0, 0])


class TestFilter:
    def _noisy(self, rng, base, n, sigma_t=0.02, sigma_r=0.01):
        return [Transform(euler_rpy_to_rotmat(*rng.normal(0, sigma_r, 3)) @ base.rotation,
                          base.translation + rng.normal(0, sigma_t, 3)) for _ in range(n)]

    def test_single(self, rng):
        T0 = _rand_T(rng)
        assert temporal_filter([T0]) is T0

    def test_sort_median_oracle(self, rng):
        for n in (7, 8):
            est = self._noisy(rng, _rand_T(rng), n)
            ref = _chordal_mean([e.rotation for e in est])
            t = [_sort_median([e.translation[a] for e in est]) for a in range(3)]
            angles = [_rpy(e.rotation @ ref.T) for e in est]
            rpy = [_sort_median([a[i] for a in angles]) for i in range(3)]
            out = temporal_filter(est)
            np.testing.assert_allclose(out.translation, t, atol=1e-15)
            np.testing.assert_allclose(out.rotation, euler_rpy_to_rotmat(*rpy) @ ref, atol=1e-12)

    def test_rejects_outlier(self, rng):
        base = _rand_T(rng)
        est = self._noisy(rng, base, 6, 1e-3, 1e-3)
        est.append(Transform(euler_rpy_to_rotmat(0.5, -0.4, 0.3) @ base.rotation, base.translation + 2.0))
        out = evaluate(temporal_filter(est), base)
        assert out.E_t < 1.0 and out.E_R < 0.5

    @settings(max_examples=25)
    @given(st.integers(0, 2 ** 32 - 1))
    def test_permutation_invariant(self, seed):
        rng = np.random.default_rng(seed)
        est = self._noisy(rng, _rand_T(rng), 9)
        a = temporal_filter(est)
        b = temporal_filter([est[i] for i in rng.permutation(9)])
        assert _max_diff(a, b) < 1e-12

    def test_idempotent_on_constant(self, rng):
        T0 = _rand_T(rng)
        assert _max_diff(temporal_filter([T0] * 5), T0) < 1e-12

    def test_sliding(self, rng):
        est = self._noisy(rng, _rand_T(rng), 6)
        out = sliding_filter(est, 3)
        assert len(out) == 6 and out[0] is est[0]
        assert _max_diff(out[5], temporal_filter(est[3:6])) == 0.0
        with pytest.raises(ValueError):
            sliding_filter(est, 0)

    def test_accepts_estimates(self, rng):
        Ts = self._noisy(rng, _rand_T(rng), 3)
        ests = [CalibrationEstimate(Transform(), t) for t in Ts]
        assert _max_diff(temporal_filter(ests), temporal_filter(Ts)) == 0.0


class TestMetrics:
    def test_perfect(self, rng):
        T0 = _rand_T(rng)
        assert evaluate(T0, T0).as_row() == pytest.approx([0.0] * 8, abs=1e-6)

    def test_one_centimeter(self):
        r = evaluate(Transform(None, [0.01, 0, 0]), Transform())
        assert r.E_t == pytest.approx(1.0, abs=1e-12) and r.X == pytest.approx(1.0, abs=1e-12)
        assert r.Y == r.Z == r.E_R == 0.0

    def test_oracles(self, rng):
        for _ in range(200):
            a, b = _rand_T(rng), _rand_T(rng)
            r = evaluate(a, b)
            d = a.translation - b.translation
            assert r.E_t == pytest.approx(100 * math.sqrt(sum(x * x for x in d)), abs=1e-12)
            assert [r.X, r.Y, r.Z] == pytest.approx([100 * abs(x) for x in d], abs=1e-12)
            qa, qb = rotmat_to_quat(a.rotation).as_array(), rotmat_to_quat(b.rotation).as_array()
            dot = min(1.0, abs(float(sum(x * y for x, y in zip(qa, qb)))))
            assert r.E_R == pytest.approx(math.degrees(2 * math.acos(dot)), abs=1e-6)

    def test_residual_angles(self):
        gt = Transform(euler_rpy_to_rotmat(0.3, 0.2, -0.1))
        pred = Transform(euler_rpy_to_rotmat(0.01, -0.02, 0.03) @ gt.rotation)
        r = evaluate(pred, gt)
        assert [r.Roll, r.Pitch, r.Yaw] == pytest.approx([0.01 * 180 / math.pi, 0.02 * 180 / math.pi,
                                                          0.03 * 180 / math.pi], abs=1e-10)

    def test_csv(self, tmp_path, rng):
        reports = [evaluate(_rand_T(rng), _rand_T(rng)) for _ in range(5)]
        write_error_csv(tmp_path / "e.csv", reports, {"seed": 3}, per_frame=True)
        lines = (tmp_path / "e.csv").read_text().splitlines()
        assert lines[0] == "# seed=3"
        assert next(csv.reader([lines[1]])) == ["Stat", *COLUMNS]
        assert list(COLUMNS) == ["E_t", "X", "Y", "Z", "E_R", "Roll", "Pitch", "Yaw"]
        back = read_error_csv(tmp_path / "e.csv")
        agg = aggregate(reports)
        for s in ("Mean", "Median", "Std"):
            assert back[s] == pytest.approx(agg[s], abs=1e-6)
        assert back["frame4"]["E_t"] == pytest.approx(reports[4].E_t, abs=1e-6)


TINY = ModelConfig(height=16, width=32, widths=(4, 8), head_hidden=16, branch_hidden=8, seed=3)


@pytest.fixture(scope="module")
def tiny_data():
    k = CameraIntrinsics(25.0, 25.0, 16.0, 8.0, 32, 16)
    return scene_dataset(2, seed=5, intrinsics=k, n_points=(800, 1000))


class TestTraining:
    def test_overfit_single_sample(self, tiny_data):
        opts = TrainOptions(steps=300, batch_size=1, lr=3e-3, fixed_deviation=True, seed=1, log_every=0)
        res = train_range(tiny_data[:1], RangeSpec.from_degrees(0.5, 5), build_model(TINY), opts)
        first, last = res.losses[0]["L"], res.losses[-1]["L"]
        assert last <= 0.1 * first, (first, last)

    def test_zero_lr_keeps_parameters(self, tiny_data):
        m = build_model(TINY)
        before = {k: v.copy() for k, v in m.state_dict().items()}
        train_range(tiny_data, CASCADE_RANGES[2], m, TrainOptions(steps=3, batch_size=2, lr=0.0, log_every=0))
        after = m.state_dict()
        assert all(before[k].tobytes() == after[k].tobytes() for k in before)

    def test_warm_start_and_artifacts(self, tiny_data, tmp_path):
        donor = build_model(TINY)
        opts = TrainOptions(steps=5, batch_size=2, lr=1e-3, out_dir=str(tmp_path / "a"), log_every=0)
        res = train_range(tiny_data, CASCADE_RANGES[1], donor, opts)
        for name in ("model.ckpt", "model.json", "loss.csv", "run.json"):
            assert (tmp_path / "a" / name).exists()
        assert len(list(csv.reader(open(tmp_path / "a" / "loss.csv")))) == 6

        opts2 = TrainOptions(steps=1, batch_size=2, seed=9, init_checkpoint=res.checkpoint, log_every=0)
        expected = evaluate_batch_loss(res.model, tiny_data, CASCADE_RANGES[2], opts2)
        fresh = build_model(ModelConfig(**{**TINY.__dict__, "seed": 99}))
        res2 = train_range(tiny_data, CASCADE_RANGES[2], fresh, opts2)
        assert res2.losses[0]["L"] == expected["L"]

    def test_deterministic(self, tiny_data):
        opts = TrainOptions(steps=3, batch_size=2, seed=4, log_every=0)
        a = train_range(tiny_data, CASCADE_RANGES[2], build_model(TINY), opts).losses
        b = train_range(tiny_data, CASCADE_RANGES[2], build_model(TINY), opts).losses
        assert a == b

    def test_deviation_seeds_are_derived(self, tiny_data):
        from lccal.pipeline.training import make_batch
        b = make_batch(tiny_data, CASCADE_RANGES[0], build_model(TINY), seed=2, step=0, batch_size=2)
        assert sorted(b.frames) == [0, 1]
        for i, s in zip(b.frames, b.seeds):
            assert s == derive_seed(2, 0, i)
            d = sample_deviation(CASCADE_RANGES[0], s).delta
            assert _max_diff(se3_compose(se3_inverse(d), b.T_inits[b.frames.index(i)]), tiny_data[i].T_LC) < 1e-12
