from __future__ import annotations

import numpy as np
import pytest

from cmt.config import ConvLayer, DataConfig, ModelConfig
from cmt.encoders import AudioWaveform, TokenSequence, VisualFrame
from cmt.rng import make_rng


def tiny_data_config(**overrides) -> DataConfig:
    """Dataset dims matching ``tiny_config`` (4x4 frames, 12-sample audio,
    8-token vocab); base frequency keeps every class sinusoid under Nyquist."""
    base = dict(
        num_classes=3, train_per_class=8, val_per_class=2, test_per_class=2,
        noise=0.05, coupling="independent", seed=5,
        image_height=4, image_width=4, image_channels=1, patch_size=2,
        audio_samples=12, sample_rate=12.0, base_frequency=1.0,
        vocab_size=8, text_len=3,
    )
    base.update(overrides)
    return DataConfig(**base)


def tiny_config(**overrides) -> ModelConfig:
    """Smallest dims that exercise every code path; full grad sweeps stay fast."""
    base = dict(
        image_height=4, image_width=4, image_channels=1, patch_size=2,
        d_v=4, visual_blocks=1,
        audio_samples=12,
        conv_layers=(ConvLayer(4, 2, 4), ConvLayer(3, 1, 4)),
        d_a=4, audio_blocks=1,
        vocab_size=8, max_text_len=3, d_t=4, text_blocks=1,
        embed_dim=4, num_heads=2, mlp_ratio=2, dropout=0.0,
        num_classes=3, labels=("a", "b", "c"),
    )
    base.update(overrides)
    return ModelConfig(**base)


def random_frame(cfg: ModelConfig, seed: int) -> VisualFrame:
    rng = make_rng(seed, 1)
    return VisualFrame(rng.random((cfg.image_height, cfg.image_width, cfg.image_channels)))


def random_wave(cfg: ModelConfig, seed: int) -> AudioWaveform:
    rng = make_rng(seed, 2)
    return AudioWaveform(rng.uniform(-1, 1, cfg.audio_samples), cfg.sample_rate)


def random_tokens(cfg: ModelConfig, seed: int) -> TokenSequence:
    rng = make_rng(seed, 3)
    ids = [0] + list(rng.integers(3, cfg.vocab_size, cfg.max_text_len - 1))
    return TokenSequence(ids)


@pytest.fixture
def tiny_cfg() -> ModelConfig:
    return tiny_config()


def zero_params(params: dict) -> dict:
    """Copy of a parameter dict with every value zeroed (layer-norm gammas too)."""
    from cmt.tensor import Tensor
    return {name: Tensor(np.zeros_like(t.data)) for name, t in params.items()}


@pytest.fixture(scope="session")
def tiny_checkpoint(tmp_path_factory):
    """(checkpoint path, ModelConfig, CmtModel) for a tiny initialized model."""
    from cmt.checkpoint import save_checkpoint
    from cmt.fusion import CmtModel

    cfg = tiny_config()
    model = CmtModel.init(cfg, seed=0)
    path = str(tmp_path_factory.mktemp("ckpt") / "model.cmtc")
    save_checkpoint(path, {k: p.data for k, p in model.params.items()},
                    {"model": cfg.to_dict()})
    return path, cfg, model


@pytest.fixture(scope="session")
def tiny_dataset():
    from cmt.data import generate_dataset
    return generate_dataset(tiny_data_config())
