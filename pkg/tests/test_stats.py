import numpy as np
import pytest

from tcjepa import autodiff as ad
from tcjepa.masking import MaskingConfig
from tcjepa.predictor import CONDITIONERS, Predictor, PredictorConfig
from tcjepa.stats import (block_params, conditioner_params, encoder_params, model_stats, predictor_params)
from tcjepa.vit import Encoder, EncoderConfig


def n_params(module):
    return sum(p.data.size for p in module.parameters())


class TestParameterCounts:
    def test_depth_zero_encoder(self):
        cfg = EncoderConfig(embed_dim=32, depth=0, heads=2)
        st = model_stats(cfg, PredictorConfig())
        assert st.encoder_params == cfg.patch_dim * 32 + 32
        assert st.positional_constants == 64 * 32 + 64 * PredictorConfig().pred_dim

    def test_depth_doubles_block_params(self):
        a = EncoderConfig(depth=2)
        b = EncoderConfig(depth=4)
        base = encoder_params(EncoderConfig(depth=0))
        assert encoder_params(b) - base == 2 * (encoder_params(a) - base)

    def test_encoder_matches_model(self):
        cfg = EncoderConfig(embed_dim=32, depth=3, heads=4)
        assert encoder_params(cfg) == n_params(Encoder(cfg, np.random.default_rng(0)))

    @pytest.mark.parametrize("kind", CONDITIONERS)
    @pytest.mark.parametrize("fusion", ["max", "attention"])
    def test_predictor_and_conditioner_match_model(self, kind, fusion):
        cfg = PredictorConfig(pred_dim=16, depth=3, heads=2, conditioner=kind, fusion=fusion)
        model = Predictor(cfg, 32, (8, 8), np.random.default_rng(0))
        assert predictor_params(cfg, 32) + conditioner_params(cfg) == n_params(model)

    def test_block_formula(self):
        assert block_params(8, 4.0) == 4 * 8 + (8 * 24 + 24) + (8 * 8 + 8) + (8 * 32 + 32) + (32 * 8 + 8)


class TestFlops:
    @pytest.mark.parametrize("kind", CONDITIONERS)
    def test_counts_match_traced_matmuls(self, kind, f64):
        from tcjepa.data import DataConfig, SyntheticDataset
        from tcjepa.train import TrainConfig, TrainState, compute_losses

        cfg = TrainConfig(encoder=EncoderConfig(embed_dim=16, depth=1, heads=2),
                          predictor=PredictorConfig(pred_dim=16, depth=2, heads=2, conditioner=kind),
                          data=DataConfig(size=4, num_captions=2), dtype="float64")
        state = TrainState(cfg)
        images, captions, _ = SyntheticDataset(cfg.data).batch(np.arange(1), np.float64)
        with ad.count_matmul_flops() as counter:
            _, masks, _, _ = compute_losses(state, images, captions)
        nc, nt = masks.context.shape[1], masks.targets.shape[2]
        st = model_stats(cfg.encoder, cfg.predictor, cfg.masking, 2, cfg.data.caption_length, nc=nc, nt=nt)
        assert counter.flops == st.flops_with_conditioner
        if kind == "none":
            assert st.flops_with_conditioner == st.flops_without_conditioner

    def test_with_conditioner_at_least_without(self):
        for kind in CONDITIONERS:
            st = model_stats(EncoderConfig(), PredictorConfig(conditioner=kind))
            assert st.flops_with_conditioner >= st.flops_without_conditioner

    def test_overhead_shrinks_as_encoder_widens(self):
        pred = PredictorConfig(conditioner="fine", pred_dim=64, heads=4)
        ratios = [model_stats(EncoderConfig(embed_dim=d, heads=4), pred).overhead_ratio
                  for d in (32, 64, 128, 256, 512)]
        assert all(b < a for a, b in zip(ratios, ratios[1:]))

    def test_as_dict_has_ratio(self):
        d = model_stats(EncoderConfig(), PredictorConfig(conditioner="fine"), MaskingConfig()).as_dict()
        assert d["overhead_ratio"] > 0
