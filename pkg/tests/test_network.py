import numpy as np
import pytest
import torch
from torch import nn

import support
from derainkit.errors import (CheckpointError, InvalidParameterError,
                              NonDivisibleInputError, ShapeInconsistencyError,
                              WrongInputSizeError)
from derainkit.network import (DISCRIMINATOR_INPUT, DOWNSCALE, DerainModel,
                               NetworkConfig, batch_to_tensor, image_to_tensor,
                               init_weights, load_model, load_payload,
                               parameter_counts, save_model, tensor_to_image,
                               zero_weights)


@pytest.fixture()
def tiny_model():
    model = DerainModel(support.tiny_net())
    init_weights(model, seed=0)
    model.eval()
    return model


class TestConfig:

    def test_defaults_valid(self):
        NetworkConfig().validate()

    @pytest.mark.parametrize("kwargs", [
        {"patch": 0}, {"patch": 33},
        {"encoder_channels": (64, 128)},
        {"encoder_channels": (64, 0, 64, 64, 64)},
        {"dilation_rate": 0},
        {"dilated_layers": "everywhere"},
        {"composition_channels": ()},
        {"discriminator_channels": (64,)},
        {"upsample_mode": "bicubic"},
        {"head_activation": "tanh"},
        {"image_channels": 0},
    ])
    def test_invalid_rejected(self, kwargs):
        with pytest.raises(InvalidParameterError):
            NetworkConfig(**kwargs).validate()


class TestEncoder:

    def test_pyramid_sizes_default_widths(self):
        model = DerainModel(NetworkConfig())
        model.eval()
        with torch.no_grad():
            feats = model.encode(torch.rand(1, 3, 224, 224))
        sizes = [f.shape[-1] for f in feats]
        assert sizes == [112, 56, 28, 14, 7]
        widths = [f.shape[1] for f in feats]
        assert widths == [64, 128, 256, 512, 512]

    def test_pyramid_halves_any_divisible_size(self, tiny_model):
        for h, w in ((32, 64), (96, 32), (64, 64)):
            with torch.no_grad():
                feats = tiny_model.encode(torch.rand(1, 3, h, w))
            assert [f.shape[-2] for f in feats] == [h // 2 ** k
                                                   for k in range(1, 6)]
            assert [f.shape[-1] for f in feats] == [w // 2 ** k
                                                   for k in range(1, 6)]

    def test_non_divisible_rejected(self, tiny_model):
        with pytest.raises(NonDivisibleInputError):
            tiny_model.encode(torch.rand(1, 3, 225, 225))

    def test_dilated_first_module(self):
        model = DerainModel(NetworkConfig(dilated_layers="module1"))
        blocks = list(model.encoder.blocks)
        first = [c for c in blocks[0].modules() if isinstance(c, nn.Conv2d)
                 and c.kernel_size == (3, 3)]
        assert all(c.dilation == (2, 2) for c in first)
        second = [c for c in blocks[1].modules() if isinstance(c, nn.Conv2d)
                  and c.kernel_size == (3, 3)]
        assert all(c.dilation == (1, 1) for c in second)

    def test_dilated_first_two_modules(self):
        model = DerainModel(NetworkConfig(dilated_layers="modules12"))
        dilations = []
        for block in list(model.encoder.blocks)[:2]:
            convs = [c for c in block.modules() if isinstance(c, nn.Conv2d)
                     and c.kernel_size == (3, 3)]
            dilations.append([c.dilation for c in convs])
        assert dilations[0][0] == (2, 2)
        assert dilations[1][0] == (2, 2)


class TestDecoders:

    def test_forward_full_shapes_and_range(self, tiny_model):
        x = torch.rand(2, 3, 32, 32)
        with torch.no_grad():
            b, r, o = tiny_model.forward_full(x)
        for out in (b, r, o):
            assert out.shape == (2, 3, 32, 32)
            assert out.min() > 0.0 and out.max() < 1.0

    def test_rain_decoder_concatenates_background_taps(self):
        model = DerainModel(NetworkConfig())
        ins = [c.in_channels for c in model.rain_decoder.modules()
               if isinstance(c, nn.Conv2d)]
        assert ins == [1024, 768, 384, 192, 128, 64]

    def test_composition_input_width(self):
        model = DerainModel(NetworkConfig())
        ins = [c.in_channels for c in model.composer.modules()
               if isinstance(c, nn.Conv2d)]
        assert ins == [6, 64, 64]

    def test_zero_weights_give_half(self, tiny_model):
        zero_weights(tiny_model)
        x = torch.rand(1, 3, 32, 32)
        with torch.no_grad():
            b, r, o = tiny_model.forward_full(x)
            d = tiny_model.discriminate(torch.rand(1, 3, 224, 224))
        for out in (b, r, o, d):
            np.testing.assert_array_equal(out.numpy(), 0.5)

    def test_rain_decoder_needs_five_taps(self, tiny_model):
        with torch.no_grad():
            feats = tiny_model.encode(torch.rand(1, 3, 32, 32))
            _, taps = tiny_model.decode_background(feats)
            with pytest.raises(ShapeInconsistencyError):
                tiny_model.decode_rain(feats, taps[:3])


class TestDiscriminator:

    def test_layer_sizes(self):
        model = DerainModel(NetworkConfig())
        model.eval()
        sizes = []

        def hook(_m, _i, out):
            sizes.append(out.shape[-1])

        handles = [c.register_forward_hook(hook)
                   for c in model.discriminator.modules()
                   if isinstance(c, nn.Conv2d)]
        with torch.no_grad():
            score = model.discriminate(torch.rand(1, 3, 224, 224))
        for h in handles:
            h.remove()
        assert sizes == [112, 56, 28, 27, 26]
        assert score.shape[-2:] == (26, 26)
        assert score.min() > 0.0 and score.max() < 1.0

    def test_wrong_input_size_rejected(self, tiny_model):
        with pytest.raises(WrongInputSizeError):
            tiny_model.discriminate(torch.rand(1, 3, 223, 223))

    def test_conv_geometry(self):
        model = DerainModel(NetworkConfig())
        convs = [c for c in model.discriminator.modules()
                 if isinstance(c, nn.Conv2d)]
        assert [c.out_channels for c in convs] == [64, 128, 256, 512, 1]
        assert [c.stride for c in convs] == [(2, 2)] * 3 + [(1, 1)] * 2
        assert all(c.kernel_size == (4, 4) for c in convs)
        assert all(c.padding == (1, 1) for c in convs)


class TestDerain:

    def test_matches_forward_full_background(self, tiny_model):
        x = torch.rand(1, 3, 64, 64)
        with torch.no_grad():
            full_b = tiny_model.forward_full(x)[0]
            only_b = tiny_model.derain(x)
        np.testing.assert_array_equal(only_b.numpy(), full_b.numpy())

    def test_touches_only_background_path(self, tiny_model):
        tiny_model.reset_counters()
        with torch.no_grad():
            tiny_model.derain(torch.rand(1, 3, 32, 32))
        assert tiny_model.counters == {
            "encoder": 1, "background_decoder": 1, "rain_decoder": 0,
            "composition": 0, "discriminator": 0,
        }

    def test_pads_odd_sizes_back_to_input(self, tiny_model):
        for h, w in ((250, 250), (33, 97), (224, 250)):
            with torch.no_grad():
                out = tiny_model.derain(torch.rand(1, 3, h, w))
            assert out.shape == (1, 3, h, w)

    def test_image_round_trip(self, tiny_model):
        img = support.make_backgrounds(1, 40, 52, seed=3)[0]
        with torch.no_grad():
            out = tensor_to_image(tiny_model.derain(image_to_tensor(img)))
        assert out.shape == (40, 52, 3)
        assert out.dtype == np.float32
        assert out.min() >= 0.0 and out.max() <= 1.0


class TestInitAndCounts:

    def test_seeded_init_reproducible(self):
        a = init_weights(DerainModel(support.tiny_net()), seed=3)
        b = init_weights(DerainModel(support.tiny_net()), seed=3)
        for (ka, va), (kb, vb) in zip(a.state_dict().items(),
                                      b.state_dict().items()):
            assert ka == kb
            np.testing.assert_array_equal(va.numpy(), vb.numpy())

    def test_different_seeds_differ(self):
        a = init_weights(DerainModel(support.tiny_net()), seed=3)
        b = init_weights(DerainModel(support.tiny_net()), seed=4)
        diffs = [not torch.equal(va, vb)
                 for (_, va), (_, vb) in zip(a.state_dict().items(),
                                             b.state_dict().items())
                 if va.dim() > 1]
        assert any(diffs)

    def test_biases_start_at_zero(self, tiny_model):
        for name, p in tiny_model.named_parameters():
            if name.endswith("bias"):
                np.testing.assert_array_equal(p.detach().numpy(), 0.0)

    def test_parameter_counts(self, tiny_model):
        counts = parameter_counts(tiny_model)
        assert set(counts) == {"encoder", "background_decoder", "rain_decoder",
                               "composition", "discriminator", "total"}
        assert all(v > 0 for v in counts.values())
        assert counts["total"] == sum(v for k, v in counts.items()
                                      if k != "total")
        assert counts["total"] == sum(p.numel()
                                      for p in tiny_model.parameters())


class TestTensorConversion:

    def test_image_tensor_round_trip(self):
        img = support.make_backgrounds(1, 24, 28, seed=1)[0]
        t = image_to_tensor(img)
        assert t.shape == (1, 3, 24, 28)
        np.testing.assert_allclose(tensor_to_image(t), img, rtol=0, atol=1e-7)

    def test_batch_tensor_layout(self):
        batch = np.stack(support.make_backgrounds(2, 16, 16, seed=2))
        t = batch_to_tensor(batch)
        assert t.shape == (2, 3, 16, 16)
        np.testing.assert_allclose(t[1, 2].numpy(), batch[1, :, :, 2],
                                   rtol=0, atol=1e-7)


class TestCheckpoints:

    def test_round_trip(self, tiny_model, tmp_path):
        path = tmp_path / "model.pt"
        save_model(path, tiny_model)
        loaded = load_model(path)
        assert loaded.config == tiny_model.config
        for (_, va), (_, vb) in zip(tiny_model.state_dict().items(),
                                    loaded.state_dict().items()):
            np.testing.assert_array_equal(va.numpy(), vb.numpy())

    def test_config_mismatch_rejected(self, tiny_model, tmp_path):
        path = tmp_path / "model.pt"
        save_model(path, tiny_model)
        with pytest.raises(CheckpointError):
            load_model(path, expected_config=NetworkConfig())

    def test_unknown_version_rejected(self, tiny_model, tmp_path):
        path = tmp_path / "model.pt"
        save_model(path, tiny_model)
        payload = load_payload(path)
        payload["format_version"] = 999
        torch.save(payload, path)
        with pytest.raises(CheckpointError):
            load_model(path)

    def test_unreadable_file_rejected(self, tmp_path):
        path = tmp_path / "junk.pt"
        path.write_bytes(b"not a checkpoint")
        with pytest.raises(CheckpointError):
            load_model(path)
