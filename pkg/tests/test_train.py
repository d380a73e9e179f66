from dataclasses import replace

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import brute_convergence, central_difference_check

from annoclean.datagen import build_dataset, load_sample, write_phantoms
from annoclean.exceptions import ConfigurationError, NonFiniteLossError
from annoclean.model import ModelSpec, build_model, load_checkpoint
from annoclean.train import (
    ArraySource,
    LossCurve,
    LossSpec,
    TrainConfig,
    convergence_step,
    fit_source,
    is_degenerate,
    last_checkpoint,
    make_loss,
    train,
)

TINY = ModelSpec(depth=2, base_channels=4)


def t(v):
    return torch.tensor([v], dtype=torch.float64)


@pytest.fixture(scope="module")
def manifest(tmp_path_factory):
    clean = tmp_path_factory.mktemp("clean")
    write_phantoms(clean, 4, (32, 32), seed=1)
    return build_dataset(clean, "radial_line", 16, 2, tmp_path_factory.mktemp("ds") / "d",
                         fractions={"train": 0.5, "val": 0.25, "test": 0.25})


class TestLosses:
    def test_examples(self):
        p, y = t(0.5), t(0.0)
        assert float(make_loss("l1")(p, y)) == 0.5
        assert float(make_loss("mse")(p, y)) == 0.25
        assert float(make_loss("huber")(p, y)) == 0.125  # 0.5 * 0.5**2 on the quadratic branch
        assert float(make_loss("l1+mse")(p, y)) == 0.75

    def test_all_is_four_terms(self):
        spec = LossSpec.parse("all")
        assert spec.terms == ("l1", "huber", "smooth_l1", "mse") and spec.weights == (1.0,) * 4
        assert float(make_loss("all")(t(0.5), t(0.0))) == 0.5 + 0.125 + 0.125 + 0.25

    def test_branch_values(self):
        p, y = t(3.0), t(0.0)
        assert float(make_loss("huber")(p, y)) == 1.0 * (3.0 - 0.5)
        assert float(make_loss(LossSpec(("smooth_l1",), smooth_l1_beta=2.0))(p, y)) == 3.0 - 1.0
        assert float(make_loss(LossSpec(("huber",), huber_delta=0.5))(p, y)) == 0.5 * (3.0 - 0.25)

    def test_errors(self):
        with pytest.raises(ConfigurationError):
            LossSpec(())
        with pytest.raises(ConfigurationError):
            LossSpec.parse("l1+ssim")
        with pytest.raises(ConfigurationError):
            LossSpec(("l1", "mse"), weights=(1.0,))

    @pytest.mark.parametrize("name", ["l1", "mse", "huber", "smooth_l1"])
    def test_finite_differences(self, name):
        rng = np.random.default_rng(["l1", "mse", "huber", "smooth_l1"].index(name))
        assert central_difference_check(make_loss(name), name, rng) < 1e-4

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.sampled_from(["l1", "mse", "huber", "smooth_l1", "l1+mse", "all"]),
           st.floats(0.1, 10))
    def test_identities(self, seed, name, c):
        rng = np.random.default_rng(seed)
        x = torch.tensor(rng.normal(size=(2, 3, 4, 4)))
        y = torch.tensor(rng.normal(size=(2, 3, 4, 4)))
        loss = make_loss(name)
        assert float(loss(x, x)) == 0.0
        assert float(loss(x, y)) >= 0.0
        assert float(loss(x, y)) == pytest.approx(float(loss(y, x)), rel=1e-12)
        spec = LossSpec.parse(name)
        scaled = LossSpec(spec.terms, tuple(c * w for w in spec.weights))
        assert float(make_loss(scaled)(x, y)) == pytest.approx(c * float(loss(x, y)), rel=1e-12)


class TestConvergence:
    def test_constant(self):
        assert convergence_step([0.3] * 120) == 0

    def test_step_drop(self):
        values = [1.0] * 100 + [0.1] * 200
        assert convergence_step(values) == brute_convergence(values) == 100

    def test_increasing_is_degenerate(self):
        # successive windows differ by 10%, so no earlier window is within 5% of the last one
        values = 1.1 ** np.arange(200)
        assert convergence_step(values) == brute_convergence(values.tolist()) == 150
        assert is_degenerate(values)
        # a slow ramp reaches the 5% band before the last window and is not flagged
        ramp = np.arange(1, 201, dtype=float)
        assert convergence_step(ramp) == brute_convergence(ramp.tolist()) == 142
        assert not is_degenerate([1.0] * 100 + [0.1] * 200)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            values = (np.exp(-np.arange(300) / rng.uniform(5, 80)) + 0.05 * rng.random(300)).tolist()
            assert convergence_step(values) == brute_convergence(values)

    def test_global_steps_returned(self):
        curve = LossCurve()
        for i, v in enumerate([1.0] * 100 + [0.1] * 200):
            curve.append(1000 + i, v)
        assert convergence_step(curve) == 1100

    def test_too_short(self):
        with pytest.raises(ConfigurationError):
            convergence_step([1.0] * 50)

    def test_curve_invariants(self, tmp_path):
        curve = LossCurve()
        curve.append(0, 1.5)
        curve.append(3, 0.25)
        with pytest.raises(ValueError):
            curve.append(3, 0.1)
        path = curve.save(tmp_path / "loss.csv")
        assert path.read_text().splitlines()[0] == "step,loss"
        assert LossCurve.load(path).steps == curve.steps


class TestLoop:
    def test_scheme_separation(self, manifest):
        fed = {}
        for scheme in ("n2n", "n2c"):
            seen = []
            cfg = TrainConfig(scheme, batch_size=4, epochs=1, seed=3)
            train(build_model(TINY, 0), manifest, cfg, on_batch=lambda s, x, y: seen.append((x.clone(), y.clone())))
            fed[scheme] = seen
        assert len(fed["n2n"]) == len(fed["n2c"]) == 2
        order = np.random.default_rng([3, 0]).permutation(len(manifest.splits["train"]))
        records = manifest.split_records("train")
        samples = [load_sample(manifest, records[i].record_id) for i in order]
        noisy_b = np.stack([s.noisy_b for s in samples]).transpose(0, 3, 1, 2)
        clean = np.stack([s.clean for s in samples]).transpose(0, 3, 1, 2)
        for k, ((xa, ya), (xc, yc)) in enumerate(zip(fed["n2n"], fed["n2c"])):
            assert torch.equal(xa, xc)  # identical inputs
            sl = slice(4 * k, 4 * k + 4)
            np.testing.assert_allclose(ya.numpy(), noisy_b[sl], atol=1e-7)
            np.testing.assert_allclose(yc.numpy(), clean[sl], atol=1e-7)

    def test_deterministic(self, manifest):
        cfg = TrainConfig("n2n", batch_size=4, epochs=2, learning_rate=1e-4, seed=5)
        a = train(build_model(TINY, 1), manifest, cfg)
        b = train(build_model(TINY, 1), manifest, cfg)
        assert a[1].steps == b[1].steps
        for k, v in a[0].parameters.items():
            assert np.array_equal(v, b[0].parameters[k])

    def test_checkpoints_and_resume(self, manifest, tmp_path):
        cfg = TrainConfig("n2c", batch_size=4, epochs=3, learning_rate=1e-4, seed=5)
        full, curve = train(build_model(TINY, 1), manifest, cfg, run_dir=tmp_path / "full")
        assert sorted(p.name for p in (tmp_path / "full").glob("*.ckpt")) == [f"epoch_{i}.ckpt" for i in (1, 2, 3)]
        assert LossCurve.load(tmp_path / "full" / "loss.csv").steps == curve.steps

        short = TrainConfig("n2c", batch_size=4, epochs=1, learning_rate=1e-4, seed=5)
        train(build_model(TINY, 1), manifest, short, run_dir=tmp_path / "part")
        resumed, rcurve = train(build_model(TINY, 1), manifest, cfg, run_dir=tmp_path / "part",
                                resume_from=last_checkpoint(tmp_path / "part"))
        assert rcurve.steps == curve.steps
        for k, v in full.parameters.items():
            assert np.array_equal(v, resumed.parameters[k]), k
        meta = load_checkpoint(tmp_path / "full" / "epoch_3.ckpt").training_meta
        assert meta["scheme"] == "n2c" and meta["epochs_completed"] == 3 and meta["loss"] == "l1"

    def test_non_finite_aborts_with_step(self):
        x = np.full((4, 8, 8, 3), 0.5, np.float32)
        x[2, 0, 0, 0] = np.nan
        cfg = TrainConfig("n2n", batch_size=1, epochs=1, seed=0)
        with pytest.raises(NonFiniteLossError) as info:
            fit_source(build_model(TINY, 0), ArraySource(x, np.zeros_like(x)), cfg)
        order = np.random.default_rng([0, 0]).permutation(4).tolist()
        assert info.value.step == order.index(2)

    def test_empty_split(self, manifest):
        empty = replace(manifest, splits={**manifest.splits, "train": []})
        with pytest.raises(ConfigurationError, match="empty"):
            train(build_model(TINY, 0), empty, TrainConfig("n2n", batch_size=2, epochs=1))

    def test_bias_model_reaches_constant(self):
        c = 0.37
        x = np.random.default_rng(0).random((64, 4, 4, 3)).astype(np.float32)
        y = np.full_like(x, c)
        cfg = TrainConfig("n2c", batch_size=64, epochs=400, loss="mse", learning_rate=1e-3)
        model, _ = fit_source(build_model(ModelSpec(architecture="global_bias"), 0), ArraySource(x, y), cfg)
        assert abs(float(model.network.bias.detach()) - c) < 1e-3

    def test_config_validation(self):
        with pytest.raises(ConfigurationError):
            TrainConfig("n3n", batch_size=1, epochs=1)
        with pytest.raises(ConfigurationError):
            TrainConfig("n2n", batch_size=0, epochs=1)
        cfg = TrainConfig("N2N", batch_size=2, epochs=1, loss="l2")
        assert (cfg.scheme, cfg.loss, cfg.learning_rate, cfg.momentum, cfg.weight_decay) == ("n2n", "mse", 1e-5, 0.9, 1e-8)
        with pytest.raises(ConfigurationError):
            TrainConfig("n2n", batch_size=1, epochs=1, huber_delta=0.0)

    def test_thresholds_reach_loss(self):
        cfg = TrainConfig("n2n", batch_size=1, epochs=1, loss="huber+smooth_l1", huber_delta=0.25, smooth_l1_beta=0.5)
        # |e| = 1 sits on the linear branch of both terms
        assert float(make_loss(cfg.loss_spec)(t(1.0), t(0.0))) == 0.25 * (1.0 - 0.125) + (1.0 - 0.25)

    def test_loss_scale(self):
        # errors in grey levels: 2/255 becomes 2, past the Huber threshold
        cfg = TrainConfig("n2n", batch_size=1, epochs=1, loss="huber+mse", loss_scale=255.0)
        assert float(make_loss(cfg.loss_spec)(t(2 / 255), t(0.0))) == pytest.approx(1.5 + 4.0, rel=1e-12)
        with pytest.raises(ConfigurationError):
            TrainConfig("n2n", batch_size=1, epochs=1, loss_scale=0.0)
