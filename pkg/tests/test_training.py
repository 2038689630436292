import math

import numpy as np
import pytest

from gctaf import tensor as T
from gctaf.data import SynthSpec, consolidate, generate_synthetic, split_validation
from gctaf.data.dataset import BinaryDataset
from gctaf.errors import ConfigError, ContractError, NumericAbort
from gctaf.model import ModelConfig, forward, init_params
from gctaf.pipeline import prepare
from gctaf.data.partitions import ChronoPair
from gctaf.tensor import Tensor
from gctaf.training import (REPORT_COLUMNS, Adam, TrainConfig, TrainReport, VltConfig, adam_step,
                            cross_entropy_loss, evaluate, train, vlt_baseline)

from tests.gradcheck import numeric_grad, rel_error

SMALL = ModelConfig(tau=10, n_features=4, global_tokens=2, num_blocks=1, heads=2, head_size=4,
                    ff_dim=4, mlp_units=(8,), dropout=0.1)


def random_set(n, cfg=SMALL, seed=0, flare_fraction=0.3):
    rng = np.random.default_rng(seed)
    y = (rng.random(n) < flare_fraction).astype(int)
    x = rng.normal(size=(n, cfg.tau, cfg.n_features))
    x[y == 1, :, 0] += 1.5
    return BinaryDataset(x=x, y=y)


class TestCrossEntropy:
    def test_uniform_logits(self):
        assert cross_entropy_loss(Tensor(np.zeros((5, 2))), [0, 1, 1, 0, 1]).item() == \
            pytest.approx(math.log(2), abs=1e-15)
        assert cross_entropy_loss(Tensor(np.zeros((3, 4))), [0, 1, 3]).item() == \
            pytest.approx(math.log(4), abs=1e-15)

    def test_confident_margin(self):
        loss = cross_entropy_loss(Tensor([[50.0, -50.0], [-50.0, 50.0]]), [0, 1]).item()
        assert 0.0 <= loss < 1e-40

    def test_stable_for_huge_logits(self):
        loss = cross_entropy_loss(Tensor([[1e4, -1e4]]), [1]).item()
        assert loss == pytest.approx(2e4)

    def test_out_of_range_label(self):
        with pytest.raises(ContractError):
            cross_entropy_loss(Tensor(np.zeros((2, 2))), [0, 2])
        with pytest.raises(ContractError):
            cross_entropy_loss(Tensor(np.zeros((2, 2))), [-1, 0])

    @pytest.mark.parametrize("seed", range(5))
    def test_gradient(self, seed):
        rng = np.random.default_rng(seed)
        logits, labels = rng.normal(size=(4, 2)), rng.integers(0, 2, 4)
        t = Tensor(logits, requires_grad=True)
        T.backward(cross_entropy_loss(t, labels))
        fd = numeric_grad(lambda a: cross_entropy_loss(Tensor(a), labels).item(), [logits.copy()], 0)
        assert rel_error(t.grad, fd) < 1e-6

    def test_non_negative(self):
        rng = np.random.default_rng(9)
        for _ in range(20):
            assert cross_entropy_loss(Tensor(rng.normal(size=(6, 3)) * 5), rng.integers(0, 3, 6)).item() >= 0


class TestAdam:
    def test_zero_gradient_keeps_params(self):
        p = {"w": np.array([1.0, -2.0])}
        new, _ = adam_step(p, {"w": np.zeros(2)}, {}, 1, 0.1)
        np.testing.assert_array_equal(new["w"], p["w"])

    def test_first_step_magnitude_is_lr(self):
        p = {"w": np.array([0.5, 0.5, 0.5])}
        g = {"w": np.array([3.0, -0.02, 700.0])}
        new, state = adam_step(p, g, {}, 1, 1e-3)
        np.testing.assert_allclose(new["w"] - p["w"], -1e-3 * np.sign(g["w"]), rtol=1e-4)
        assert p["w"][0] == 0.5  # inputs untouched
        m, v = state["w"]
        np.testing.assert_allclose(m, 0.1 * g["w"])

    def test_counter_starts_at_one(self):
        with pytest.raises(ContractError):
            adam_step({"w": np.zeros(1)}, {"w": np.zeros(1)}, {}, 0, 0.1)

    def test_quadratic_convergence(self):
        a = np.array([[3.0, 0.5], [0.5, 1.0]])
        opt_at = np.array([1.0, -2.0])
        w = Tensor(np.array([4.0, 3.0]), requires_grad=True)
        opt = Adam([("w", w)], lr=0.3)
        target = Tensor(opt_at)
        for _ in range(100):
            diff = w - target
            loss = (T.matmul(diff.reshape(1, 2), T.matmul(Tensor(a), diff.reshape(2, 1)))).sum() * 0.5
            opt.zero_grad()
            T.backward(loss)
            opt.step()
        d = w.data - opt_at
        assert 0.5 * d @ a @ d < 1e-3

    def test_step_depends_only_on_gradient_values(self):
        cfg = ModelConfig(tau=5, n_features=3, global_tokens=2, num_blocks=1, heads=1, head_size=2,
                          ff_dim=3, mlp_units=(4,), dropout=0.0)
        params = init_params(cfg, 1)
        rng = np.random.default_rng(1)
        x, y = rng.normal(size=(3, 5, 3)), np.array([0, 1, 1])

        def loss():
            return cross_entropy_loss(forward(params, cfg, Tensor(x)), y)

        params.zero_grad()
        T.backward(loss())
        names = [n for n, _ in params.named_parameters()]
        tensors = dict(params.named_parameters())
        analytic = {n: tensors[n].grad.copy() for n in names}
        numeric = {}
        for n in names:
            t = tensors[n]
            data = t.data.copy()

            def f(arr, t=t):
                t.data = arr
                return loss().item()

            numeric[n] = numeric_grad(f, [data], 0)
            t.data = data
        current = {n: tensors[n].data for n in names}
        a_step, _ = adam_step(current, analytic, {}, 1, 1e-3)
        n_step, _ = adam_step(current, numeric, {}, 1, 1e-3)
        for n in names:
            da, dn = a_step[n] - current[n], n_step[n] - current[n]
            # skip entries whose gradient is pure round-off (key biases)
            mask = np.abs(analytic[n]) > 1e-8
            if mask.any():
                assert rel_error(da[mask], dn[mask]) < 1e-4, n


class TestTrainConfig:
    def test_defaults(self):
        cfg = TrainConfig()
        assert (cfg.learning_rate, cfg.epochs, cfg.batch_size, cfg.selection_metric) == (1e-4, 20, 32, "tss")

    @pytest.mark.parametrize("bad", [dict(epochs=0), dict(batch_size=0), dict(learning_rate=-1.0),
                                     dict(learning_rate=float("nan")), dict(selection_metric="auc"),
                                     dict(beta1=1.0)])
    def test_invalid(self, bad):
        with pytest.raises(ConfigError):
            TrainConfig(**bad)


class TestTrain:
    def test_single_epoch(self):
        params, rep = train(SMALL, TrainConfig(epochs=1, learning_rate=1e-3), random_set(40),
                            random_set(20, seed=1))
        assert len(rep.epochs) == 1 and rep.selected_epoch == 1
        csv_lines = rep.to_csv().splitlines()
        assert csv_lines[0] == ",".join(REPORT_COLUMNS) and len(csv_lines) == 2

    def test_zero_learning_rate_is_identity(self):
        before = init_params(SMALL).state()
        params, rep = train(SMALL, TrainConfig(epochs=3, learning_rate=0.0), random_set(40),
                            random_set(20, seed=1))
        after = params.state()
        assert all(before[k].tobytes() == after[k].tobytes() for k in before)
        assert len({(r.val_loss, r.val_tss) for r in rep.epochs}) == 1

    def test_deterministic(self):
        runs = [train(SMALL, TrainConfig(epochs=3, learning_rate=1e-3, seed=5), random_set(50),
                      random_set(20, seed=1)) for _ in range(2)]
        assert runs[0][1] == runs[1][1]
        assert runs[0][1].to_csv() == runs[1][1].to_csv()
        s0, s1 = runs[0][0].state(), runs[1][0].state()
        assert all(s0[k].tobytes() == s1[k].tobytes() for k in s0)

    def test_selected_epoch_reproduces_reported_metric(self):
        val = random_set(40, seed=2)
        params, rep = train(SMALL, TrainConfig(epochs=4, learning_rate=3e-3, seed=1), random_set(80), val)
        keys = [r.val_tss if r.val_tss is not None else -math.inf for r in rep.epochs]
        assert rep.selected_epoch == 1 + keys.index(max(keys))
        loss, metrics = evaluate(params, SMALL, val.x, val.y)
        best = rep.best()
        assert loss == best.val_loss and metrics["tss"] == best.val_tss

    def test_ties_pick_earliest(self):
        _, rep = train(SMALL, TrainConfig(epochs=3, learning_rate=0.0), random_set(30), random_set(20, seed=1))
        assert rep.selected_epoch == 1

    def test_loss_selection(self):
        _, rep = train(SMALL, TrainConfig(epochs=3, learning_rate=1e-3, selection_metric="loss"),
                       random_set(40), random_set(20, seed=1))
        assert rep.best().val_loss == min(r.val_loss for r in rep.epochs)

    def test_nan_guard(self):
        bad = random_set(10)
        bad.x[:, 2, 1] = np.nan
        with pytest.raises(NumericAbort) as exc:
            train(SMALL, TrainConfig(epochs=1, batch_size=4), bad)
        assert (exc.value.epoch, exc.value.batch) == (1, 1)
        assert "epoch 1, batch 1" in str(exc.value)

    def test_empty_training_set(self):
        with pytest.raises(ContractError):
            train(SMALL, TrainConfig(epochs=1), BinaryDataset(x=np.zeros((0, 10, 4)), y=np.zeros(0)))

    def test_report_csv_none_cells(self):
        _, rep = train(SMALL, TrainConfig(epochs=1), random_set(10))
        row = rep.to_csv().splitlines()[1].split(",")
        assert row[0] == "1" and row[2:] == [""] * 5

    @pytest.mark.slow
    def test_noise_free_synthetic_separates(self):
        spec = dict(tau=20, n_features=6, imbalance=0.1, m=3, noise=0.0, signal_features=2)
        tr, _ = generate_synthetic(SynthSpec(n_instances=500, **spec), 0)
        va, _ = generate_synthetic(SynthSpec(n_instances=200, partition_index=1, **spec), 0)
        prepared = prepare(ChronoPair(tr.with_split("train"), va.with_split("val"), va.with_split("test")))
        cfg = ModelConfig(tau=20, n_features=6, global_tokens=4, num_blocks=1, heads=2, head_size=8,
                          ff_dim=4, mlp_units=(16,), dropout=0.1)
        _, rep = train(cfg, TrainConfig(epochs=6, learning_rate=1e-3), prepared.train, prepared.val)
        losses = [r.train_loss for r in rep.epochs[:5]]
        assert all(b < a for a, b in zip(losses, losses[1:])), losses
        assert rep.epochs[-1].val_tss == 1.0


class TestVlt:
    def separable_last_step(self, seed, noise=0.0):
        spec = dict(tau=12, n_features=5, m=2, noise=noise, signal_features=2, last_step_signal=True)
        tr, _ = generate_synthetic(SynthSpec(n_instances=300, **spec), seed)
        te, _ = generate_synthetic(SynthSpec(n_instances=200, partition_index=1, **spec), seed)
        p = prepare(ChronoPair(tr.with_split("train"), tr.derive([], split="val"), te.with_split("test")))
        return p

    def test_noise_free_last_step_signal(self):
        p = self.separable_last_step(0)
        assert vlt_baseline(p.train, p.test)["tss"] == 1.0

    def test_permuted_labels_have_no_skill(self):
        for seed in range(5):
            p = self.separable_last_step(seed, noise=1.0)
            shuffled = BinaryDataset(x=p.train.x, y=np.random.default_rng(seed).permutation(p.train.y))
            rep = vlt_baseline(shuffled, p.test, VltConfig(seed=seed))
            assert rep["tss"] is not None and abs(rep["tss"]) < 0.15

    def test_constant_features_majority_class(self):
        y = np.array([0] * 90 + [1] * 10)
        x = np.zeros((100, 6, 3))
        rep = vlt_baseline(BinaryDataset(x=x, y=y), BinaryDataset(x=x, y=y))
        assert rep["tss"] == 0.0 and rep["counts"]["tp"] == 0 and rep["counts"]["fp"] == 0

    def test_deterministic(self):
        p = self.separable_last_step(1, noise=1.0)
        assert vlt_baseline(p.train, p.test) == vlt_baseline(p.train, p.test)
