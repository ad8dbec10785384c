import numpy as np
import pytest
import torch
from torch import nn
from torch.nn import functional as F

from alphalatent.autoencoder import FrozenAutoencoder, identity_loss
from alphalatent.errors import GateFailure
from alphalatent.nets import hwc_to_batch
from alphalatent.pixels import premultiply
from alphalatent.transparency import (
    AdjustedLatentBundle,
    CodecTrainConfig,
    PatchDiscriminator,
    TransparencyDecoder,
    TransparencyEncoder,
    codec_losses,
    decode_transparency,
    disc_generator_loss,
    disc_step,
    encode_adjusted,
    encode_transparency,
    prepare_codec_batch,
    recon_loss,
    roundtrip,
    scale_offset,
    total_vae_loss,
    train_codec,
)


class ConstantDisc(nn.Module):
    """Stub discriminator emitting a constant patch map (with a live graph)."""

    def __init__(self, value):
        super().__init__()
        self.value = value
        self.dummy = nn.Parameter(torch.zeros(1))

    def forward(self, x):
        return torch.full((x.shape[0], 1, 4, 4), self.value) + 0.0 * self.dummy


class TestTransparencyEncoder:
    def test_zero_init_output(self):
        torch.manual_seed(0)
        enc = TransparencyEncoder(base_channels=8)
        rgb = torch.randn(2, 3, 16, 16)
        alpha = torch.rand(2, 1, 16, 16)
        out = encode_transparency(rgb, alpha, enc)
        assert torch.equal(out, torch.zeros(2, 4, 4, 4))

    def test_output_matches_latent_shape(self, tiny_ae):
        enc = TransparencyEncoder(base_channels=8)
        rgb = torch.randn(1, 3, 32, 32)
        alpha = torch.rand(1, 1, 32, 32)
        mean, _ = tiny_ae.encode(rgb)
        out = encode_transparency(rgb, alpha, enc)
        assert out.shape == mean.shape

    def test_spatial_mismatch_rejected(self):
        enc = TransparencyEncoder(base_channels=8)
        with pytest.raises(ValueError):
            encode_transparency(torch.zeros(1, 3, 18, 16), torch.zeros(1, 1, 18, 16), enc)
        with pytest.raises(ValueError):
            encode_transparency(torch.zeros(1, 3, 16, 16), torch.zeros(1, 1, 8, 8), enc)


class TestScaleOffset:
    def test_zero_lambda(self):
        out = scale_offset(torch.ones(1, 4, 2, 2), torch.ones(1, 4, 2, 2), 0.0)
        assert torch.equal(out, torch.zeros(1, 4, 2, 2))

    def test_default_lambda_arithmetic(self):
        out = scale_offset(torch.full((1, 4, 2, 2), 0.01), torch.ones(1, 4, 2, 2))
        assert torch.allclose(out, torch.ones(1, 4, 2, 2))

    def test_linearity(self):
        g = torch.Generator().manual_seed(0)
        x = torch.randn(1, 4, 3, 3, generator=g)
        s = torch.rand(1, 4, 3, 3, generator=g) + 0.1
        assert torch.equal(scale_offset(2 * x, s, 7.0), 2 * scale_offset(x, s, 7.0))

    def test_nonpositive_std_rejected(self):
        with pytest.raises(ValueError):
            scale_offset(torch.ones(1, 4, 2, 2), torch.zeros(1, 4, 2, 2))

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            scale_offset(torch.ones(1, 4, 2, 2), torch.ones(1, 4, 4, 4))


class TestAdjustedLatentBundle:
    def test_exact_sum_invariant(self):
        x = torch.randn(1, 4, 2, 2)
        eps = torch.randn(1, 4, 2, 2)
        bundle = AdjustedLatentBundle(x=x, x_eps=eps, x_a=x + eps)
        assert torch.equal(bundle.x_a - bundle.x, eps + x - x)

    def test_rejects_inconsistent(self):
        x = torch.zeros(1, 4, 2, 2)
        with pytest.raises(ValueError):
            AdjustedLatentBundle(x=x, x_eps=x, x_a=x + 1.0)


class TestTransparencyDecoder:
    def test_output_ranges_random_weights(self):
        torch.manual_seed(1)
        dec = TransparencyDecoder(base_channels=8)
        rgb = 5.0 * torch.randn(2, 3, 16, 16)
        x_a = 5.0 * torch.randn(2, 4, 4, 4)
        rgb_hat, alpha_hat = decode_transparency(rgb, x_a, dec)
        assert rgb_hat.shape == (2, 3, 16, 16)
        assert alpha_hat.shape == (2, 1, 16, 16)
        assert (rgb_hat >= -1).all() and (rgb_hat <= 1).all()
        assert (alpha_hat >= 0).all() and (alpha_hat <= 1).all()

    def test_deterministic(self):
        torch.manual_seed(2)
        dec = TransparencyDecoder(base_channels=8)
        rgb = torch.randn(1, 3, 16, 16)
        x_a = torch.randn(1, 4, 4, 4)
        a = decode_transparency(rgb, x_a, dec)
        b = decode_transparency(rgb, x_a, dec)
        assert torch.equal(a[0], b[0]) and torch.equal(a[1], b[1])

    def test_scale_mismatch_rejected(self):
        dec = TransparencyDecoder(base_channels=8)
        with pytest.raises(ValueError):
            decode_transparency(torch.zeros(1, 3, 16, 16), torch.zeros(1, 4, 8, 8), dec)


class TestReconLoss:
    def test_perfect_reconstruction(self):
        rgb = torch.randn(1, 3, 8, 8)
        alpha = torch.rand(1, 1, 8, 8)
        assert float(recon_loss(rgb, alpha, rgb, alpha)) == 0.0

    def test_constant_alpha_error(self):
        rgb = torch.zeros(1, 3, 8, 8)
        alpha = torch.full((1, 1, 8, 8), 0.5)
        loss = recon_loss(rgb, alpha, rgb, alpha + 0.1)
        assert abs(float(loss) - 0.01) < 1e-6

    def test_matches_independent_recompute(self):
        g = torch.Generator().manual_seed(3)
        t_rgb = torch.randn(2, 3, 8, 8, generator=g)
        t_alpha = torch.rand(2, 1, 8, 8, generator=g)
        p_rgb = torch.randn(2, 3, 8, 8, generator=g)
        p_alpha = torch.rand(2, 1, 8, 8, generator=g)
        loss = float(recon_loss(t_rgb, t_alpha, p_rgb, p_alpha))
        expect = float(((t_rgb - p_rgb) ** 2).mean() + ((t_alpha - p_alpha) ** 2).mean())
        assert abs(loss - expect) <= 1e-6

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            recon_loss(torch.zeros(1, 3, 8, 8), torch.zeros(1, 1, 8, 8),
                       torch.zeros(1, 3, 4, 4), torch.zeros(1, 1, 8, 8))


class TestDiscLosses:
    def test_generator_loss_at_plus_one(self):
        loss = disc_generator_loss(torch.zeros(1, 3, 8, 8), torch.zeros(1, 1, 8, 8), ConstantDisc(1.0))
        assert float(loss.detach()) == 0.0

    def test_generator_loss_at_minus_one(self):
        loss = disc_generator_loss(torch.zeros(1, 3, 8, 8), torch.zeros(1, 1, 8, 8), ConstantDisc(-1.0))
        assert abs(float(loss.detach()) - 2.0) < 1e-6

    def test_generator_loss_clamps_above_one(self):
        loss = disc_generator_loss(torch.zeros(1, 3, 8, 8), torch.zeros(1, 1, 8, 8), ConstantDisc(7.5))
        assert float(loss.detach()) == 0.0

    def test_disc_step_constant_zero(self):
        disc = ConstantDisc(0.0)
        opt = torch.optim.SGD(disc.parameters(), lr=0.0)
        loss = disc_step(torch.zeros(1, 4, 8, 8), torch.zeros(1, 4, 8, 8), disc, opt, step=10, warmup=0)
        assert abs(loss - 2.0) < 1e-6

    def test_disc_step_warmup_noop(self):
        torch.manual_seed(4)
        disc = PatchDiscriminator(base_channels=8)
        before = [p.detach().clone() for p in disc.parameters()]
        opt = torch.optim.AdamW(disc.parameters(), lr=1e-3)
        loss = disc_step(torch.randn(1, 4, 16, 16), torch.randn(1, 4, 16, 16), disc, opt, step=5, warmup=100)
        assert loss == 0.0
        for p, b in zip(disc.parameters(), before):
            assert torch.equal(p, b)

    def test_disc_step_never_touches_generator(self):
        torch.manual_seed(5)
        dec = TransparencyDecoder(base_channels=8)
        disc = PatchDiscriminator(base_channels=8)
        opt_d = torch.optim.AdamW(disc.parameters(), lr=1e-3)
        rgb_hat, alpha_hat = dec(torch.randn(1, 3, 16, 16), torch.randn(1, 4, 4, 4))
        fake = torch.cat([rgb_hat, alpha_hat], dim=1)
        real = torch.randn(1, 4, 16, 16)
        disc_step(real, fake, disc, opt_d, step=10, warmup=0)
        for p in dec.parameters():
            assert p.grad is None

    def test_hinge_saturation(self):
        class SplitDisc(nn.Module):
            def __init__(self):
                super().__init__()
                self.dummy = nn.Parameter(torch.zeros(1))
                self.calls = 0

            def forward(self, x):
                self.calls += 1
                value = 2.0 if self.calls == 1 else -2.0
                return torch.full((x.shape[0], 1, 2, 2), value) + 0.0 * self.dummy

        disc = SplitDisc()
        opt = torch.optim.SGD(disc.parameters(), lr=0.0)
        loss = disc_step(torch.zeros(1, 4, 8, 8), torch.zeros(1, 4, 8, 8), disc, opt, step=1, warmup=0)
        assert loss == 0.0


class TestTotalVaeLoss:
    def test_default_weights_arithmetic(self):
        total = total_vae_loss(torch.tensor(0.3), torch.tensor(0.2), torch.tensor(1.0))
        assert abs(float(total) - 0.51) < 1e-7

    def test_zero_disc_weight(self):
        total = total_vae_loss(torch.tensor(0.3), torch.tensor(0.2), torch.tensor(123.0), lambda_disc=0.0)
        assert abs(float(total) - 0.5) < 1e-7


class TestZeroOffsetIdentity:
    def test_fresh_encoder_matches_frozen_baseline_exactly(self, tiny_ae, tiny_set):
        _, samples = tiny_set
        img = samples[0][0]
        torch.manual_seed(6)
        enc = TransparencyEncoder(base_channels=8)
        bundle = encode_adjusted(img, tiny_ae, enc)
        assert torch.equal(bundle.x_eps, torch.zeros_like(bundle.x_eps))
        assert torch.equal(bundle.x_a, bundle.x)
        premult = hwc_to_batch([premultiply(img).rgb])
        loss_with_offset = identity_loss(premult, bundle.x_eps, tiny_ae)
        mean, _ = tiny_ae.encode(premult)
        baseline = F.mse_loss(premult, tiny_ae.decode(mean))
        assert torch.equal(loss_with_offset, baseline)


class TestTrainCodec:
    def test_rejects_unfrozen_ae(self, tiny_set):
        _, samples = tiny_set
        ae = FrozenAutoencoder(base_channels=8)
        with pytest.raises(ValueError):
            train_codec([samples[0][0]], ae, CodecTrainConfig(steps=1))

    def test_smoke_run_metrics_and_freeze_contract(self, tiny_ae, tiny_set):
        _, samples = tiny_set
        images = [s[0] for s in samples[:12]]
        before = {k: v.clone() for k, v in tiny_ae.state_dict().items()}
        cfg = CodecTrainConfig(steps=60, batch_size=4, base_channels=8, seed=3, disc_warmup=30)
        enc, dec, disc = train_codec(images, tiny_ae, cfg)
        assert len(cfg.metrics) == 60
        assert set(cfg.metrics[0]) >= {"step", "L_recon", "L_identity", "L_disc", "total"}
        assert all(np.isfinite(row["total"]) for row in cfg.metrics)
        assert cfg.metrics[0]["L_disc"] == 0.0  # warm-up: adversarial term off
        after = tiny_ae.state_dict()
        for k in before:
            assert torch.equal(before[k], after[k])

    def test_generator_step_never_touches_disc(self, tiny_ae, tiny_set):
        _, samples = tiny_set
        images = [s[0] for s in samples[:8]]
        torch.manual_seed(7)
        enc = TransparencyEncoder(base_channels=8)
        dec = TransparencyDecoder(base_channels=8)
        disc = PatchDiscriminator(base_channels=8)
        d_before = [p.detach().clone() for p in disc.parameters()]
        batch = prepare_codec_batch(images, tiny_ae)
        opt_g = torch.optim.AdamW(list(enc.parameters()) + list(dec.parameters()), lr=1e-3)
        losses = codec_losses(batch, torch.arange(4), tiny_ae, enc, dec, disc)
        total = total_vae_loss(losses["recon"], losses["identity"], losses["disc"])
        opt_g.zero_grad()
        total.backward()
        opt_g.step()
        for p, b in zip(disc.parameters(), d_before):
            assert torch.equal(p, b)

    def test_offset_dropout_variant_runs(self, tiny_ae, tiny_set):
        _, samples = tiny_set
        images = [s[0] for s in samples[:8]]
        cfg = CodecTrainConfig(
            steps=20, batch_size=4, base_channels=8, seed=4, offset_dropout=0.3, disc_warmup=10
        )
        enc, dec, disc = train_codec(images, tiny_ae, cfg)
        assert len(cfg.metrics) == 20

    def test_resume_matches_uninterrupted(self, tiny_ae, tiny_set):
        _, samples = tiny_set
        images = [s[0] for s in samples[:8]]
        full_cfg = CodecTrainConfig(steps=20, batch_size=4, base_channels=8, seed=9, disc_warmup=10)
        full = train_codec(images, tiny_ae, full_cfg)

        half_cfg = CodecTrainConfig(steps=10, batch_size=4, base_channels=8, seed=9, disc_warmup=10)
        torch.manual_seed(half_cfg.seed)
        models = (
            TransparencyEncoder(base_channels=8),
            TransparencyDecoder(base_channels=8),
            PatchDiscriminator(base_channels=8),
        )
        opt_g = torch.optim.AdamW(
            list(models[0].parameters()) + list(models[1].parameters()), lr=half_cfg.lr
        )
        opt_d = torch.optim.AdamW(models[2].parameters(), lr=half_cfg.disc_lr)
        train_codec(images, tiny_ae, half_cfg, models=models, opts=(opt_g, opt_d), start_step=0)
        resume_cfg = CodecTrainConfig(steps=20, batch_size=4, base_channels=8, seed=9, disc_warmup=10)
        resumed = train_codec(
            images, tiny_ae, resume_cfg,
            models=models,
            opts=(opt_g, opt_d),
            start_step=10,
            identity_baseline=half_cfg.metrics[0]["L_identity"],
        )

        for a, b in zip(full, resumed):
            sd = b.state_dict()
            for key, val in a.state_dict().items():
                assert torch.equal(val, sd[key]), key

    def test_divergence_guard_trips_on_nonfinite_identity(self, tiny_ae, tiny_set):
        _, samples = tiny_set
        images = [s[0] for s in samples[:8]]
        cfg = CodecTrainConfig(steps=50, batch_size=4, base_channels=8, seed=5, lr=1e10, disc_warmup=1000)
        with pytest.raises(GateFailure):
            train_codec(images, tiny_ae, cfg)

    def test_divergence_guard_trips_on_sustained_rise(self, tiny_ae, tiny_set, monkeypatch):
        import alphalatent.transparency as T

        _, samples = tiny_set
        images = [s[0] for s in samples[:8]]
        real_losses = T.codec_losses
        counter = {"step": 0}

        def escalating(batch, idx, ae, enc, dec, disc, lambda_offset=100.0, dropout_mask=None):
            out = dict(real_losses(batch, idx, ae, enc, dec, disc, lambda_offset, dropout_mask))
            boost = torch.tensor(0.01 * counter["step"])
            counter["step"] += 1
            out["identity"] = 0.0 * out["identity"] + boost
            return out

        monkeypatch.setattr(T, "codec_losses", escalating)
        cfg = CodecTrainConfig(steps=400, batch_size=4, base_channels=8, seed=5, disc_warmup=1000)
        with pytest.raises(GateFailure, match="diverged"):
            T.train_codec(images, tiny_ae, cfg)

    def test_roundtrip_type_valid(self, tiny_ae, tiny_set):
        _, samples = tiny_set
        img = samples[1][0]
        torch.manual_seed(8)
        enc = TransparencyEncoder(base_channels=8)
        dec = TransparencyDecoder(base_channels=8)
        out = roundtrip(img, tiny_ae, enc, dec)
        assert out.rgb.shape == img.rgb.shape
        assert out.alpha.shape == img.alpha.shape
        assert out.rgb.min() >= -1.0 and out.rgb.max() <= 1.0
        assert out.alpha.min() >= 0.0 and out.alpha.max() <= 1.0
