import dataclasses
import math

import numpy as np
import pytest

from phase_surrogate import autodiff as ad
from phase_surrogate import pipeline, training
from phase_surrogate.autodiff import Tensor
from phase_surrogate.errors import (ConfigurationError, ContractError,
                                    DivergenceError, RangeError, ShapeError)
from phase_surrogate.training import Adam, TrainConfig

from conftest import build_toy_dataset, toy_model_config


def t64(rng, *shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True)


def flux_preds(rng, n, consistent=True):
    gpp = Tensor(rng.uniform(0.4, 0.9, n), requires_grad=True)
    ar = Tensor(gpp.data * 0.7, requires_grad=True)
    npp = gpp.data - ar.data if consistent else rng.uniform(0, 1, n)
    return {"gpp": gpp, "ar": ar, "npp": Tensor(npp.copy(), requires_grad=True)}


class TestTrainConfig:
    def test_round_trip(self):
        cfg = TrainConfig(task_weights={"gpp": 2.0}, phys_weight=0.5, lr=3e-4,
                          batch_size=32, max_epochs=7, patience=2, seed=9)
        again = TrainConfig.from_dict(cfg.to_dict())
        assert again == cfg

    def test_unknown_key_named(self):
        with pytest.raises(ConfigurationError, match="momentum"):
            TrainConfig.from_dict({"momentum": 0.9})

    @pytest.mark.parametrize("kwargs", [
        {"phys_weight": -0.1},
        {"lr": 0.0},
        {"batch_size": 0},
        {"max_epochs": 0},
        {"patience": 0},
        {"width": "float16"},
        {"task_weights": {"carbon": 1.0}},
        {"task_weights": {"gpp": -1.0}},
        {"task_weights": {"gpp": 0.0, "ar": 0.0}},
    ])
    def test_rejects_bad_values(self, kwargs):
        with pytest.raises(ConfigurationError):
            TrainConfig(**kwargs)

    def test_weight_lookup(self):
        assert TrainConfig().weight("soil3c") == 1.0
        cfg = TrainConfig(task_weights={"gpp": 2.0})
        assert cfg.weight("gpp") == 2.0
        assert cfg.weight("soil3c") == 0.0

    def test_width_dtype(self):
        assert TrainConfig().dtype == np.float32
        assert TrainConfig(width="float64").dtype == np.float64


class TestTaskLoss:
    def test_perfect_prediction_is_zero(self):
        vals = np.random.default_rng(0).uniform(0, 1, (6, 4))
        assert training.task_loss(Tensor(vals), vals).data.item() == 0.0

    def test_matches_two_pass_oracle(self):
        rng = np.random.default_rng(1)
        pred = rng.standard_normal((50, 3))
        target = rng.standard_normal((50, 3))
        got = training.task_loss(Tensor(pred), target).data.item()
        want = math.fsum((pred - target).ravel() ** 2) / pred.size
        assert got == pytest.approx(want, rel=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            training.task_loss(Tensor(np.zeros((4, 2))), np.zeros((4, 3)))

    def test_gradcheck(self):
        rng = np.random.default_rng(2)
        pred = t64(rng, 5, 3)
        target = rng.standard_normal((5, 3))
        ad.gradcheck(lambda p: training.task_loss(p, target), [pred])


class TestPhysLoss:
    def test_consistent_fluxes_give_zero(self):
        preds = flux_preds(np.random.default_rng(3), 40)
        loss = training.phys_loss(preds["npp"], preds["gpp"], preds["ar"])
        assert loss.data.item() == 0.0

    def test_constant_offset_squares(self):
        preds = flux_preds(np.random.default_rng(4), 25)
        shifted = Tensor(preds["npp"].data + 3.0)
        loss = training.phys_loss(shifted, preds["gpp"], preds["ar"])
        assert loss.data.item() == pytest.approx(9.0, rel=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            training.phys_loss(Tensor(np.zeros(3)), Tensor(np.zeros(4)),
                               Tensor(np.zeros(4)))

    def test_gradcheck(self):
        rng = np.random.default_rng(5)
        npp, gpp, ar = t64(rng, 8), t64(rng, 8), t64(rng, 8)
        ad.gradcheck(training.phys_loss, [npp, gpp, ar])


class TestPinnDeltaLoss:
    def test_perfect_prediction_is_zero(self):
        rng = np.random.default_rng(6)
        target = rng.uniform(0, 1, (7, 5))
        initial = rng.uniform(0, 1, (7, 5))
        loss = training.pinn_delta_loss(Tensor(target.copy()),
                                        Tensor(target - initial),
                                        initial, target)
        assert loss.data.item() == pytest.approx(0.0, abs=1e-15)

    def test_sums_both_error_terms(self):
        target = np.zeros((4, 2))
        initial = np.zeros((4, 2))
        loss = training.pinn_delta_loss(Tensor(np.full((4, 2), 2.0)),
                                        Tensor(np.full((4, 2), 3.0)),
                                        initial, target)
        assert loss.data.item() == pytest.approx(4.0 + 9.0, rel=1e-12)

    def test_missing_initial_state(self):
        with pytest.raises(ContractError):
            training.pinn_delta_loss(Tensor(np.zeros(3)), Tensor(np.zeros(3)),
                                     None, np.zeros(3))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            training.pinn_delta_loss(Tensor(np.zeros(3)), Tensor(np.zeros(3)),
                                     np.zeros(4), np.zeros(3))

    def test_gradcheck(self):
        rng = np.random.default_rng(7)
        final, delta = t64(rng, 6, 2), t64(rng, 6, 2)
        initial = rng.standard_normal((6, 2))
        target = rng.standard_normal((6, 2))
        ad.gradcheck(lambda f, d: training.pinn_delta_loss(f, d, initial,
                                                           target),
                     [final, delta])


def random_preds(rng, n):
    preds = {}
    for task in pipeline.SLOW_TASKS:
        width = 5 if task in ("deadcrootc", "deadstemc", "tlai") else 9
        preds[task] = Tensor(rng.uniform(0, 1, (n, width)))
    preds.update(flux_preds(rng, n, consistent=False))
    return preds


class TestTotalLoss:
    def test_composes_weighted_terms(self):
        rng = np.random.default_rng(8)
        preds = random_preds(rng, 10)
        targets = {t: rng.uniform(0, 1, preds[t].data.shape)
                   for t in pipeline.TASKS}
        cfg = TrainConfig(task_weights={"gpp": 2.0, "soil3c": 0.5},
                          phys_weight=3.0)
        total, comps = training.total_loss(preds, targets, cfg)
        want = (2.0 * comps["gpp"] + 0.5 * comps["soil3c"]
                + 3.0 * comps["phys"])
        assert total.data.item() == pytest.approx(want, rel=1e-6)
        assert comps["total"] == pytest.approx(want, rel=1e-6)

    def test_all_components_reported(self):
        rng = np.random.default_rng(9)
        preds = random_preds(rng, 6)
        targets = {t: preds[t].data.copy() for t in pipeline.TASKS}
        _, comps = training.total_loss(preds, targets, TrainConfig())
        assert set(comps) == set(pipeline.TASKS) | {"phys", "total"}

    def test_perfect_and_consistent_is_zero(self):
        rng = np.random.default_rng(10)
        preds = random_preds(rng, 6)
        preds.update(flux_preds(rng, 6, consistent=True))
        targets = {t: preds[t].data.copy() for t in pipeline.TASKS}
        total, _ = training.total_loss(preds, targets, TrainConfig())
        assert total.data.item() == 0.0

    def test_lambda_zero_drops_physics_term(self):
        rng = np.random.default_rng(11)
        preds = random_preds(rng, 6)
        targets = {t: rng.uniform(0, 1, preds[t].data.shape)
                   for t in pipeline.TASKS}
        total, comps = training.total_loss(preds, targets,
                                           TrainConfig(phys_weight=0.0))
        want = math.fsum(comps[t] for t in pipeline.TASKS)
        assert total.data.item() == pytest.approx(want, rel=1e-6)
        assert comps["phys"] > 0.0

    def test_zero_weights_rejected(self):
        rng = np.random.default_rng(12)
        preds = random_preds(rng, 4)
        targets = {t: preds[t].data.copy() for t in pipeline.TASKS}
        cfg = TrainConfig(phys_weight=1.0)
        cfg.task_weights = {t: 0.0 for t in pipeline.TASKS}
        with pytest.raises(ConfigurationError):
            training.total_loss(preds, targets, cfg)

    def test_delta_route_requires_initials(self):
        rng = np.random.default_rng(13)
        preds = random_preds(rng, 4)
        targets = {t: preds[t].data.copy() for t in pipeline.TASKS}
        deltas = {t: Tensor(np.zeros_like(preds[t].data))
                  for t in pipeline.SLOW_TASKS}
        with pytest.raises(ContractError, match="deadcrootc"):
            training.total_loss(preds, targets, TrainConfig(), deltas, {})


class TestPinnInitialStates:
    def test_rescales_between_spaces(self):
        rng = np.random.default_rng(14)
        groups = {"g4": rng.uniform(0, 1, (6, 5, 5)).astype(np.float32),
                  "g5": rng.uniform(0, 1, (6, 9, 3)).astype(np.float32)}
        feature_stats = {name: (0.0, 2.0) for name, _, _ in
                         pipeline.FEATURE_CHANNELS}
        target_stats = {t: (0.0, 4.0) for t in pipeline.TASKS}
        out = training.pinn_initial_states(groups, feature_stats, target_stats)
        assert set(out) == set(pipeline.SLOW_TASKS)
        np.testing.assert_allclose(out["soil3c"], groups["g5"][..., 1] / 2.0,
                                   rtol=1e-6)
        np.testing.assert_allclose(out["tlai"], groups["g4"][..., 4] / 2.0,
                                   rtol=1e-6)

    def test_missing_stats(self):
        with pytest.raises(ContractError):
            training.pinn_initial_states({}, None, {})


class TestAdam:
    def test_first_step_size_is_lr(self):
        w = Tensor(np.array([0.5, -0.2]), requires_grad=True)
        w.grad = np.array([2.0, -0.3])
        opt = Adam({"w": w}, lr=1e-3)
        before = w.data.copy()
        opt.step()
        np.testing.assert_allclose(np.abs(before - w.data), 1e-3, rtol=1e-6)
        assert np.all(np.sign(before - w.data) == np.sign(w.grad))

    def test_minimizes_quadratic(self):
        target = np.array([1.0, -2.0, 0.5])
        w = Tensor(np.zeros(3), requires_grad=True)
        opt = Adam({"w": w}, lr=0.05)
        for _ in range(400):
            w.grad = 2.0 * (w.data - target)
            opt.step()
        np.testing.assert_allclose(w.data, target, atol=1e-3)

    def test_skips_missing_grad(self):
        w = Tensor(np.ones(2), requires_grad=True)
        frozen = Tensor(np.ones(2), requires_grad=True)
        w.grad = np.ones(2)
        opt = Adam({"w": w, "frozen": frozen})
        opt.step()
        np.testing.assert_array_equal(frozen.data, np.ones(2))
        assert not np.array_equal(w.data, np.ones(2))

    def test_zero_grad_clears(self):
        w = Tensor(np.ones(2), requires_grad=True)
        w.grad = np.ones(2)
        Adam({"w": w}).zero_grad()
        assert w.grad is None

    def test_preserves_float32_params(self):
        w = Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
        w.grad = np.full(3, 0.5, dtype=np.float32)
        opt = Adam({"w": w}, lr=1e-3)
        opt.step()
        assert w.data.dtype == np.float32


class TestSplitIndices:
    def test_partition(self):
        tr, val = training._split_indices(50, seed=0)
        assert len(val) == 5 and len(tr) == 45
        merged = np.sort(np.concatenate([tr, val]))
        np.testing.assert_array_equal(merged, np.arange(50))

    def test_small_n_keeps_one(self):
        tr, val = training._split_indices(5, seed=0)
        assert len(val) == 1 and len(tr) == 4

    def test_seed_controls_split(self):
        a = training._split_indices(40, seed=1)
        b = training._split_indices(40, seed=1)
        c = training._split_indices(40, seed=2)
        np.testing.assert_array_equal(a[1], b[1])
        assert not np.array_equal(a[1], c[1])

    def test_too_few_samples(self):
        with pytest.raises(ContractError):
            training._split_indices(1, seed=0)


def quick_config(**overrides):
    base = dict(seed=0, max_epochs=4, batch_size=16)
    base.update(overrides)
    return TrainConfig(**base)


class TestTrainLoop:
    def test_loss_decreases(self, toy_dataset):
        model = training.train(quick_config(), toy_dataset,
                               model_config=toy_model_config())
        hist = model.history
        assert len(hist) == 4
        assert hist[-1][1] < hist[0][1]

    def test_deterministic_runs_match(self, toy_dataset, tmp_path):
        paths = []
        hists = []
        for run in range(2):
            model = training.train(quick_config(seed=3), toy_dataset,
                                   model_config=toy_model_config())
            path = tmp_path / f"run{run}.phm"
            model.save(str(path))
            paths.append(path)
            hists.append(model.history)
        assert hists[0] == hists[1]
        assert paths[0].read_bytes() == paths[1].read_bytes()

    def test_history_file_round_trips(self, toy_dataset, tmp_path):
        log = tmp_path / "loss_log.csv"
        model = training.train(quick_config(), toy_dataset,
                               model_config=toy_model_config(),
                               history_path=str(log))
        rows = np.genfromtxt(log, delimiter=",", names=True)
        assert rows.shape[0] == len(model.history)
        np.testing.assert_array_equal(rows["val_loss"],
                                      [h[2] for h in model.history])

    def test_restores_best_validation_state(self, toy_dataset):
        cfg = quick_config(max_epochs=8)
        model = training.train(cfg, toy_dataset,
                               model_config=toy_model_config())
        _, val_idx = training._split_indices(toy_dataset.train.n, cfg.seed)
        val_arrays = training._subset_arrays(toy_dataset.train, val_idx)
        batches = training._make_batches(val_arrays, cfg.batch_size)
        val_loss, _ = training._eval_loss(model, batches, cfg)
        assert val_loss == pytest.approx(min(h[2] for h in model.history),
                                         rel=1e-6)

    def test_early_stop_on_stalled_validation(self, toy_dataset):
        cfg = quick_config(lr=1e-12, patience=1, max_epochs=30)
        model = training.train(cfg, toy_dataset,
                               model_config=toy_model_config())
        assert len(model.history) == 2

    def test_nan_target_diverges(self):
        ds = build_toy_dataset(n=24, months=4, seed=5)
        ds.train.targets["gpp"][0] = np.nan
        with pytest.raises(DivergenceError, match="epoch 0"):
            training.train(quick_config(), ds,
                           model_config=toy_model_config(window_months=4))

    def test_empty_dataset_rejected(self, toy_dataset):
        src = toy_dataset.test
        bare = dataclasses.replace(
            src, cell_id=src.cell_id[:0], lat=src.lat[:0], lon=src.lon[:0],
            groups={g: a[:0] for g, a in src.groups.items()},
            targets={t: a[:0] for t, a in src.targets.items()})
        empty = dataclasses.replace(toy_dataset, train=bare)
        with pytest.raises(ContractError):
            training.train(quick_config(), empty,
                           model_config=toy_model_config())

    def test_pinn_variant_trains(self, toy_dataset):
        model = training.train(quick_config(max_epochs=2), toy_dataset,
                               model_config=toy_model_config(
                                   variant="baseline_pinn"))
        assert model.delta_heads is not None
        assert len(model.history) == 2


class TestFineTune:
    def test_fraction_bounds(self, toy_model, toy_dataset):
        for bad in (0.0, -0.1, 1.2):
            with pytest.raises(RangeError):
                training.fine_tune(toy_model, toy_dataset, bad, quick_config())

    def test_leaves_source_model_untouched(self, toy_model, toy_dataset):
        before = toy_model.named_params()["heads.gpp.w1"].data.copy()
        tuned = training.fine_tune(toy_model, toy_dataset, 0.5,
                                   quick_config(max_epochs=2))
        np.testing.assert_array_equal(
            toy_model.named_params()["heads.gpp.w1"].data, before)
        assert tuned is not toy_model
        assert len(tuned.history) == 2

    def test_subsample_is_deterministic(self, toy_model, toy_dataset):
        runs = [training.fine_tune(toy_model, toy_dataset, 0.4,
                                   quick_config(max_epochs=2))
                for _ in range(2)]
        assert runs[0].history == runs[1].history

    def test_tiny_fraction_keeps_two_samples(self, toy_model, toy_dataset):
        tuned = training.fine_tune(toy_model, toy_dataset, 1e-9,
                                   quick_config(max_epochs=1, batch_size=2))
        assert len(tuned.history) == 1


class TestRenormSplit:
    def test_rescales_to_model_stats(self, toy_model, toy_dataset):
        model = toy_model.clone()
        model.feature_stats = dict(toy_model.feature_stats)
        model.target_stats = dict(toy_model.target_stats)
        model.feature_stats["g2.alpha"] = (0.0, 2.0)
        model.target_stats["gpp"] = (0.0, 3.0)
        arrays = training._renorm_split(toy_dataset.train, toy_dataset, model)
        np.testing.assert_allclose(arrays["g2"][:, 3],
                                   toy_dataset.train.groups["g2"][:, 3] / 2.0,
                                   rtol=1e-6)
        np.testing.assert_allclose(arrays["y_gpp"],
                                   toy_dataset.train.targets["gpp"] / 3.0,
                                   rtol=1e-6)
        np.testing.assert_allclose(arrays["g1"],
                                   toy_dataset.train.groups["g1"], rtol=1e-6)

    def test_requires_model_stats(self, toy_model, toy_dataset):
        bare = toy_model.clone()
        bare.feature_stats = None
        with pytest.raises(ContractError):
            training._renorm_split(toy_dataset.train, toy_dataset, bare)
