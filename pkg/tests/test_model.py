import json
import zipfile

import numpy as np
import pytest
import torch

from oracles import enumerate_parameters

from annoclean.exceptions import CheckpointError, ConfigurationError, RegistryError, ShapeError
from annoclean.model import (
    CustomUNet,
    ModelSpec,
    available_architectures,
    build_model,
    forward,
    load_checkpoint,
    lookup,
    register_architecture,
    save_checkpoint,
    unregister_architecture,
)

# frozen after being computed once by the layer enumeration oracle
PARAMS_DEPTH4_BASE48 = 13_321_347
SMALL = ModelSpec(depth=2, base_channels=4)


class TestSpec:
    def test_parameter_count_regression(self):
        assert enumerate_parameters(4, 48) == PARAMS_DEPTH4_BASE48
        assert build_model(ModelSpec(), 0).parameter_count() == PARAMS_DEPTH4_BASE48

    @pytest.mark.parametrize("depth,base", [(1, 8), (2, 4), (3, 24), (3, 16)])
    def test_parameter_count_is_pure(self, depth, base):
        spec = ModelSpec(depth=depth, base_channels=base)
        assert build_model(spec, 0).parameter_count() == enumerate_parameters(depth, base)
        assert build_model(spec, 5).parameter_count() == build_model(spec, 9).parameter_count()

    def test_defaults(self):
        spec = ModelSpec()
        assert (spec.depth, spec.base_channels, spec.negative_slope) == (4, 48, 0.1)
        assert spec.level_channels() == [48, 96, 192, 384]
        assert spec.divisor == 16

    def test_invalid_depth(self):
        with pytest.raises(ConfigurationError):
            ModelSpec(depth=0)

    def test_parameter_shapes_match_spec(self):
        model = build_model(SMALL, 0)
        params = model.parameters
        assert params["encoders.0.0.weight"].shape == (4, 3, 3, 3)
        assert params["downs.1.0.weight"].shape == (8, 8, 3, 3)
        assert params["ups.0.weight"].shape == (8, 8, 2, 2)
        assert params["head.weight"].shape == (3, 4, 1, 1)


class TestForward:
    @pytest.mark.parametrize("size", [64, 128, 192, 256])
    def test_shape_preservation(self, size):
        model = build_model(ModelSpec(depth=4, base_channels=4), 0)
        x = np.random.default_rng(0).random((1, 3, size, size), dtype=np.float32)
        assert forward(model, x, "strict").shape == x.shape

    def test_batch_of_two(self):
        model = build_model(ModelSpec(depth=4, base_channels=4), 0)
        assert forward(model, np.zeros((2, 3, 64, 64), np.float32)).shape == (2, 3, 64, 64)

    def test_reflect_pad_round_trip(self):
        model = build_model(ModelSpec(depth=4, base_channels=4), 0)
        x = np.random.default_rng(1).random((1, 3, 100, 100), dtype=np.float32)
        assert forward(model, x, "reflect").shape == (1, 3, 100, 100)

    def test_strict_rejects(self):
        model = build_model(ModelSpec(depth=4, base_channels=4), 0)
        with pytest.raises(ShapeError, match="dims must be divisible by 16"):
            forward(model, np.zeros((1, 3, 100, 100), np.float32), "strict")

    def test_clamping(self):
        model = build_model(SMALL, 0)
        x = torch.full((1, 3, 8, 8), 5.0)
        model.network.eval()
        assert float(forward(model, x).max()) <= 1.0
        assert float(forward(model, x, clamp=False).max()) > 1.0
        model.network.train()
        assert float(forward(model, x).detach().max()) > 1.0

    def test_determinism(self):
        x = np.random.default_rng(2).random((2, 3, 32, 32), dtype=np.float32)
        a = forward(build_model(SMALL, 7), x)
        b = forward(build_model(SMALL, 7), x)
        assert np.array_equal(a, b)
        c = forward(build_model(SMALL, 8), x)
        assert not np.array_equal(a, c)

    def test_gradient_liveness(self):
        model = build_model(ModelSpec(depth=3, base_channels=8), 0)
        model.network.train()
        gen = torch.Generator().manual_seed(0)
        x = torch.rand((2, 3, 32, 32), generator=gen)
        y = torch.rand((2, 3, 32, 32), generator=gen)
        torch.nn.functional.mse_loss(forward(model, x), y).backward()
        for name, p in model.network.named_parameters():
            assert p.grad is not None and bool((p.grad != 0).any()), name

    def test_skip_check(self):
        net = CustomUNet(SMALL)
        net.decoders[0][0] = torch.nn.Conv2d(5, 8, 3, padding=1)
        with pytest.raises(ShapeError, match="level"):
            net._check_skips()


class TestRegistry:
    def test_lookup(self):
        assert lookup("custom_unet") is CustomUNet
        assert "custom_unet" in available_architectures()

    def test_unknown_lists_names(self):
        with pytest.raises(RegistryError, match=r"custom_unet"):
            lookup("deeplabv3")

    def test_duplicate(self):
        with pytest.raises(RegistryError):
            register_architecture("custom_unet", CustomUNet)

    def test_register_custom(self):
        register_architecture("tiny", lambda spec: torch.nn.Conv2d(3, 3, 1))
        try:
            assert build_model(ModelSpec(architecture="tiny"), 0).parameter_count() == 12
        finally:
            unregister_architecture("tiny")


class TestCheckpoint:
    def test_round_trip_bitwise(self, tmp_path):
        model = build_model(SMALL, 3)
        model.training_meta.update({"scheme": "n2n", "loss": "l1"})
        path = save_checkpoint(model, tmp_path / "m.ckpt")
        loaded = load_checkpoint(path)
        x = np.random.default_rng(4).random((2, 3, 16, 16), dtype=np.float32)
        assert np.array_equal(forward(model, x), forward(loaded, x))
        for k, v in model.parameters.items():
            assert np.array_equal(v, loaded.parameters[k])
        assert loaded.training_meta == model.training_meta
        assert loaded.spec == model.spec

    def test_bytes_reproducible(self, tmp_path):
        a = save_checkpoint(build_model(SMALL, 3), tmp_path / "a.ckpt")
        b = save_checkpoint(build_model(SMALL, 3), tmp_path / "b.ckpt")
        assert a.read_bytes() == b.read_bytes()

    def test_edited_channel_count(self, tmp_path):
        path = save_checkpoint(build_model(SMALL, 3), tmp_path / "m.ckpt")
        with zipfile.ZipFile(path) as zf:
            entries = {i.filename: zf.read(i) for i in zf.infolist()}
        header = json.loads(entries["header.json"])
        header["spec"]["base_channels"] = 6
        entries["header.json"] = json.dumps(header).encode()
        edited = tmp_path / "edited.ckpt"
        with zipfile.ZipFile(edited, "w") as zf:
            for name, data in entries.items():
                zf.writestr(name, data)
        with pytest.raises(CheckpointError, match=r"shape mismatch for layer 'encoders\.0\.0\.weight'"):
            load_checkpoint(edited)

    def test_unknown_architecture(self, tmp_path):
        register_architecture("ephemeral", lambda spec: torch.nn.Conv2d(3, 3, 1))
        path = save_checkpoint(build_model(ModelSpec(architecture="ephemeral"), 0), tmp_path / "e.ckpt")
        unregister_architecture("ephemeral")
        with pytest.raises(RegistryError, match="custom_unet"):
            load_checkpoint(path)

    def test_corrupt(self, tmp_path):
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"not a zip")
        with pytest.raises(CheckpointError):
            load_checkpoint(bad)
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "missing.ckpt")
