import numpy as np
import pytest
import torch
from torch import nn

from agemorph.agecode import AgeCodeConfig
from agemorph.critic import PatchCritic
from agemorph.image import Image
from agemorph.nets import (
    AgeInjector,
    AgeTransformer,
    ConditionalNorm,
    Encoder,
    Generator,
    IdentityExtractor,
    MappingNetwork,
    NetworkConfig,
    transform_image,
)


def rand_batch(rng, shape):
    return torch.from_numpy(rng.random(shape, dtype=np.float32))


def wake_up(model: AgeTransformer, rng) -> None:
    """Give the zero-initialised paths non-trivial weights so ages matter."""
    gen = torch.Generator().manual_seed(int(rng.integers(2**31)))
    with torch.no_grad():
        for module in model.age_injector.modules():
            if isinstance(module, ConditionalNorm):
                module.scale.weight.normal_(0.0, 0.2, generator=gen)
                module.shift.weight.normal_(0.0, 0.2, generator=gen)
        model.generator.final.weight.normal_(0.0, 0.1, generator=gen)


class TestNetworkConfig:
    def test_defaults(self):
        cfg = NetworkConfig()
        assert cfg.channels == (16, 32, 64, 128)
        assert cfg.n_levels == 4
        assert cfg.scale == 8

    def test_scale_tracks_levels(self):
        assert NetworkConfig(channels=(4, 8)).scale == 2
        assert NetworkConfig(channels=(4, 8, 8)).scale == 4

    def test_validation(self):
        with pytest.raises(ValueError):
            NetworkConfig(dimensionality=4)
        with pytest.raises(ValueError):
            NetworkConfig(channels=(8,))
        with pytest.raises(ValueError):
            NetworkConfig(channels=(8, 0))
        with pytest.raises(ValueError):
            NetworkConfig(age_embed_dim=0)


class TestEncoder:
    def test_pyramid_shapes(self, small_net_cfg, age_cfg, rng):
        enc = Encoder(small_net_cfg, age_cfg)
        feats = enc(rand_batch(rng, (2, 1, 32, 32)))
        shapes = [tuple(f.shape) for f in feats.levels]
        assert shapes == [(2, 4, 32, 32), (2, 8, 16, 16), (2, 8, 8, 8)]
        assert feats.bottleneck.shape == (2, 8, 8, 8)
        assert feats.age_logits.shape == (2, age_cfg.n_bins)

    def test_age_probs_normalised(self, small_net_cfg, age_cfg, rng):
        enc = Encoder(small_net_cfg, age_cfg)
        feats = enc(rand_batch(rng, (2, 1, 32, 32)))
        sums = feats.age_probs().sum(dim=-1)
        torch.testing.assert_close(sums, torch.ones(2))


class TestIdentityExtractor:
    def test_preserves_shapes(self, small_net_cfg, rng):
        iem = IdentityExtractor(small_net_cfg)
        feats = [
            rand_batch(rng, (2, 4, 16, 16)),
            rand_batch(rng, (2, 8, 8, 8)),
            rand_batch(rng, (2, 8, 4, 4)),
        ]
        out = iem(feats)
        assert [tuple(f.shape) for f in out] == [tuple(f.shape) for f in feats]

    def test_level_count_checked(self, small_net_cfg, rng):
        iem = IdentityExtractor(small_net_cfg)
        with pytest.raises(ValueError):
            iem([rand_batch(rng, (1, 4, 8, 8))])


class TestMappingNetwork:
    def test_output_shape(self):
        net = MappingNetwork(embed_dim=8, n_layers=3)
        out = net(torch.tensor([0.0, 0.5, 1.0]))
        assert out.shape == (3, 8)

    def test_distinct_inputs_distinct_embeddings(self):
        torch.manual_seed(0)
        net = MappingNetwork(embed_dim=8, n_layers=3)
        with torch.no_grad():
            out = net(torch.tensor([0.0, 1.0]))
        assert float((out[0] - out[1]).abs().max()) > 1e-4

    def test_layer_count(self):
        net = MappingNetwork(embed_dim=4, n_layers=5)
        assert sum(1 for m in net.net if isinstance(m, nn.Linear)) == 5


class TestConditionalNorm:
    def test_starts_as_plain_batchnorm(self, rng):
        torch.manual_seed(0)
        cbn = ConditionalNorm(2, 4, embed_dim=8)
        bn = nn.BatchNorm2d(4, affine=False)
        h = rand_batch(rng, (3, 4, 6, 6))
        emb = rand_batch(rng, (3, 8))
        torch.testing.assert_close(cbn(h, emb), bn(h))

    def test_embedding_ignored_at_init(self, rng):
        cbn = ConditionalNorm(2, 4, embed_dim=8)
        h = rand_batch(rng, (3, 4, 6, 6))
        a = cbn(h, rand_batch(rng, (3, 8)))
        b = cbn(h, rand_batch(rng, (3, 8)) * 5.0)
        torch.testing.assert_close(a, b)

    def test_heads_steer_after_init(self, rng):
        cbn = ConditionalNorm(2, 4, embed_dim=8)
        with torch.no_grad():
            cbn.scale.weight.normal_(0, 0.5)
        h = rand_batch(rng, (3, 4, 6, 6))
        with torch.no_grad():
            a = cbn(h, torch.zeros(3, 8))
            b = cbn(h, torch.ones(3, 8))
        assert float((a - b).abs().max()) > 1e-4


class TestAgeInjector:
    def test_preserves_shapes(self, small_net_cfg, rng):
        aim = AgeInjector(small_net_cfg)
        feats = [
            rand_batch(rng, (2, 4, 16, 16)),
            rand_batch(rng, (2, 8, 8, 8)),
            rand_batch(rng, (2, 8, 4, 4)),
        ]
        emb = rand_batch(rng, (2, small_net_cfg.age_embed_dim))
        out = aim(feats, emb)
        assert [tuple(f.shape) for f in out] == [tuple(f.shape) for f in feats]

    def test_level_count_checked(self, small_net_cfg, rng):
        aim = AgeInjector(small_net_cfg)
        with pytest.raises(ValueError):
            aim([rand_batch(rng, (1, 4, 8, 8))], rand_batch(rng, (1, 8)))


class TestGenerator:
    def test_residual_shape_and_zero_init(self, small_net_cfg, rng):
        gen = Generator(small_net_cfg)
        feats = [
            rand_batch(rng, (2, 4, 16, 16)),
            rand_batch(rng, (2, 8, 8, 8)),
            rand_batch(rng, (2, 8, 4, 4)),
        ]
        out = gen(feats)
        assert out.shape == (2, 1, 16, 16)
        np.testing.assert_array_equal(out.detach().numpy(), 0.0)

    def test_level_count_checked(self, small_net_cfg, rng):
        gen = Generator(small_net_cfg)
        with pytest.raises(ValueError):
            gen([rand_batch(rng, (1, 8, 4, 4))])


class TestAgeTransformer:
    def test_identity_at_init_train_and_eval(self, small_net_cfg, age_cfg, rng):
        model = AgeTransformer(small_net_cfg, age_cfg)
        x = rand_batch(rng, (2, 1, 32, 32))
        out = model(x, torch.tensor([55.0, 70.0]))
        np.testing.assert_array_equal(out.detach().numpy(), x.numpy())
        model.eval()
        with torch.no_grad():
            out = model(x, torch.tensor([55.0, 70.0]))
        np.testing.assert_array_equal(out.numpy(), x.numpy())

    def test_identity_at_init_odd_extents(self, small_net_cfg, age_cfg, rng):
        model = AgeTransformer(small_net_cfg, age_cfg)
        x = rand_batch(rng, (1, 1, 57, 63))
        out = model(x, torch.tensor([60.0]))
        assert out.shape == x.shape
        np.testing.assert_array_equal(out.detach().numpy(), x.numpy())

    def test_identity_at_init_three_d(self, age_cfg, rng):
        cfg = NetworkConfig(dimensionality=3, channels=(2, 4), age_embed_dim=4,
                            mapping_layers=2, critic_channels=(2, 4))
        model = AgeTransformer(cfg, age_cfg)
        x = rand_batch(rng, (1, 1, 12, 12, 12))
        out = model(x, torch.tensor([60.0]))
        np.testing.assert_array_equal(out.detach().numpy(), x.numpy())

    def test_output_stays_in_unit_range(self, small_net_cfg, age_cfg, rng):
        model = AgeTransformer(small_net_cfg, age_cfg)
        wake_up(model, rng)
        x = rand_batch(rng, (2, 1, 32, 32))
        with torch.no_grad():
            out = model(x, torch.tensor([48.0, 80.0]))
        assert float(out.min()) >= 0.0
        assert float(out.max()) <= 1.0

    def test_target_age_changes_output(self, small_net_cfg, age_cfg, rng):
        model = AgeTransformer(small_net_cfg, age_cfg)
        wake_up(model, rng)
        model.eval()
        x = rand_batch(rng, (1, 1, 32, 32))
        with torch.no_grad():
            young = model(x, torch.tensor([48.0]))
            old = model(x, torch.tensor([80.0]))
        assert float((young - old).abs().max()) > 1e-5

    def test_single_age_broadcasts(self, small_net_cfg, age_cfg, rng):
        model = AgeTransformer(small_net_cfg, age_cfg)
        x = rand_batch(rng, (3, 1, 16, 16))
        out = model(x, torch.tensor([60.0]))
        assert out.shape == x.shape

    def test_age_count_mismatch(self, small_net_cfg, age_cfg, rng):
        model = AgeTransformer(small_net_cfg, age_cfg)
        x = rand_batch(rng, (3, 1, 16, 16))
        with pytest.raises(ValueError):
            model(x, torch.tensor([60.0, 70.0]))

    def test_age_bounds(self, small_net_cfg, age_cfg, rng):
        model = AgeTransformer(small_net_cfg, age_cfg)
        x = rand_batch(rng, (1, 1, 16, 16))
        with pytest.raises(ValueError):
            model(x, torch.tensor([47.0]))
        with pytest.raises(ValueError):
            model(x, torch.tensor([81.0]))

    def test_input_rank_and_channels_checked(self, small_net_cfg, age_cfg, rng):
        model = AgeTransformer(small_net_cfg, age_cfg)
        with pytest.raises(ValueError):
            model(rand_batch(rng, (1, 16, 16)), torch.tensor([60.0]))
        with pytest.raises(ValueError):
            model(rand_batch(rng, (1, 2, 16, 16)), torch.tensor([60.0]))

    def test_embed_age_accepts_scalar(self, small_net_cfg, age_cfg):
        model = AgeTransformer(small_net_cfg, age_cfg)
        out = model.embed_age(64.0)
        assert out.shape == (1, small_net_cfg.age_embed_dim)

    def test_stagewise_matches_forward(self, small_net_cfg, age_cfg, rng):
        model = AgeTransformer(small_net_cfg, age_cfg)
        wake_up(model, rng)
        model.eval()
        x = rand_batch(rng, (2, 1, 32, 32))
        ages = torch.tensor([50.0, 75.0])
        with torch.no_grad():
            whole = model(x, ages)
            feats = model.encode(x)
            identity = model.extract_identity(feats.levels)
            emb = model.embed_age(ages)
            conditioned = model.inject_age(identity, emb)
            staged = model.generate(conditioned, x)
        torch.testing.assert_close(whole, staged)


class TestTransformImage:
    def test_round_trip_identity_at_init(self, small_net_cfg, age_cfg, fixed_identity):
        from agemorph.phantom import generate_phantom

        model = AgeTransformer(small_net_cfg, age_cfg)
        im = generate_phantom(fixed_identity, 60, (64, 64))
        out = transform_image(model, im, 75.0)
        assert isinstance(out, Image)
        np.testing.assert_array_equal(out.data, im.data)

    def test_mode_restored(self, small_net_cfg, age_cfg, rng):
        model = AgeTransformer(small_net_cfg, age_cfg)
        model.train()
        transform_image(model, rng.random((16, 16), dtype=np.float32), 60.0)
        assert model.training
        model.eval()
        transform_image(model, rng.random((16, 16), dtype=np.float32), 60.0)
        assert not model.training


class TestPatchCritic:
    def test_score_map_shape(self, small_net_cfg, age_cfg, rng):
        critic = PatchCritic(small_net_cfg, age_cfg)
        x = rand_batch(rng, (2, 1, 64, 64))
        scores = critic(x, torch.tensor([60.0, 70.0]))
        assert scores.shape == (2, 1, 4, 4)

    def test_conditional_requires_ages(self, small_net_cfg, age_cfg, rng):
        critic = PatchCritic(small_net_cfg, age_cfg)
        with pytest.raises(ValueError):
            critic(rand_batch(rng, (1, 1, 64, 64)))

    def test_age_bounds(self, small_net_cfg, age_cfg, rng):
        critic = PatchCritic(small_net_cfg, age_cfg)
        with pytest.raises(ValueError):
            critic(rand_batch(rng, (1, 1, 64, 64)), torch.tensor([30.0]))

    def test_unconditional_variant(self, small_net_cfg, age_cfg, rng):
        critic = PatchCritic(small_net_cfg, age_cfg, conditional=False)
        assert critic.mapping is None
        scores = critic(rand_batch(rng, (2, 1, 64, 64)))
        assert scores.shape == (2, 1, 4, 4)

    def test_age_independent_at_init(self, small_net_cfg, age_cfg, rng):
        critic = PatchCritic(small_net_cfg, age_cfg)
        critic.eval()
        x = rand_batch(rng, (1, 1, 64, 64))
        with torch.no_grad():
            a = critic(x, torch.tensor([48.0]))
            b = critic(x, torch.tensor([80.0]))
        torch.testing.assert_close(a, b)

    def test_age_matters_after_waking_heads(self, small_net_cfg, age_cfg, rng):
        critic = PatchCritic(small_net_cfg, age_cfg)
        with torch.no_grad():
            critic.entry_norm.scale.weight.normal_(0, 0.5)
        critic.eval()
        x = rand_batch(rng, (1, 1, 64, 64))
        with torch.no_grad():
            a = critic(x, torch.tensor([48.0]))
            b = critic(x, torch.tensor([80.0]))
        assert float((a - b).abs().max()) > 1e-5

    def test_mapping_receives_gradient(self, small_net_cfg, age_cfg, rng):
        critic = PatchCritic(small_net_cfg, age_cfg)
        with torch.no_grad():
            critic.entry_norm.scale.weight.normal_(0, 0.5)
        scores = critic(rand_batch(rng, (2, 1, 64, 64)), torch.tensor([50.0, 70.0]))
        scores.pow(2).mean().backward()
        grads = [p.grad for p in critic.mapping.parameters()]
        assert all(g is not None for g in grads)
        assert any(float(g.abs().sum()) > 0 for g in grads)

    def test_three_d_scores(self, age_cfg, rng):
        cfg = NetworkConfig(dimensionality=3, channels=(2, 4), age_embed_dim=4,
                            mapping_layers=2, critic_channels=(2, 4))
        critic = PatchCritic(cfg, age_cfg)
        scores = critic(rand_batch(rng, (1, 1, 16, 16, 16)), torch.tensor([60.0]))
        assert scores.shape == (1, 1, 4, 4, 4)
