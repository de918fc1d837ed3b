"""Synthetic multimodal dataset generation and on-disk format.

Two coupling modes:

* independent: class k plants a class-keyed pattern in every modality — a
  bright P x P block at patch-grid position k mod N, a sinusoid at frequency
  f0 * (k+1), and an elevated frequency of token group k — plus Gaussian
  noise. Each modality alone suffices to classify.
* xor: the label is (visual cue + audio cue) mod C and the text carries only
  the visual cue, so no single modality (and no visual+text pair) determines
  the label. Visual cues cycle within each class, which makes label-given-cue
  exactly uniform for the visual and text streams always, and for the audio
  stream whenever per-class counts are multiples of the class count (choose
  multiples of C for exactly-chance unimodal baselines).

Generation is a pure function of (config, seed). Datasets serialize to a
directory: one JSON manifest plus one binary tensor file per modality per
sample.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import DataConfig
from .encoders import CLS_ID, RESERVED_TOKENS, AudioWaveform, TokenSequence, VisualFrame
from .errors import ConfigError, InputError
from .rng import make_rng
from .tensor_io import decode_tensor, encode_tensor

BLOCK_LEVEL = 0.85      # mean brightness of the planted patch
BACKGROUND_LEVEL = 0.15
AUDIO_AMPLITUDE = 0.7


@dataclass
class MultimodalSample:
    id: int
    label: int
    visual: VisualFrame
    audio: AudioWaveform
    text: TokenSequence


@dataclass
class SyntheticDataset:
    config: DataConfig
    train: list[MultimodalSample]
    val: list[MultimodalSample]
    test: list[MultimodalSample]

    def split(self, name: str) -> list[MultimodalSample]:
        try:
            return {"train": self.train, "val": self.val, "test": self.test}[name]
        except KeyError:
            raise InputError(f"unknown split {name!r}") from None


def text_signal_probability(noise: float) -> float:
    """Probability a content token is drawn from the class's group.

    1.0 at zero noise (text fully deterministic, so template matching is
    exact), decreasing with noise, floored at 0.5.
    """
    return max(0.5, 1.0 - 2.5 * noise)


def token_group(cfg: DataConfig, group: int) -> range:
    """Vocabulary ids belonging to token group ``group``."""
    usable = cfg.vocab_size - len(RESERVED_TOKENS)
    per_group = usable // cfg.num_classes
    if per_group < 1:
        raise ConfigError(
            f"vocab {cfg.vocab_size} too small for {cfg.num_classes} token groups"
        )
    start = len(RESERVED_TOKENS) + group * per_group
    return range(start, start + per_group)


def visual_template(cfg: DataConfig, cue: int) -> np.ndarray:
    """Noise-free frame for cue k: bright block at patch k mod N."""
    p = cfg.patch_size
    gh = cfg.image_height // p
    gw = cfg.image_width // p
    n = gh * gw
    pix = np.full((cfg.image_height, cfg.image_width, cfg.image_channels),
                  BACKGROUND_LEVEL)
    gr, gc = divmod(cue % n, gw)
    pix[gr * p:(gr + 1) * p, gc * p:(gc + 1) * p, :] = BLOCK_LEVEL
    return pix


def audio_template(cfg: DataConfig, cue: int) -> np.ndarray:
    """Noise-free waveform for cue k: sinusoid at f0 * (k+1)."""
    t = np.arange(cfg.audio_samples) / cfg.sample_rate
    freq = cfg.base_frequency * (cue + 1)
    return AUDIO_AMPLITUDE * np.sin(2.0 * math.pi * freq * t)


def _make_visual(cfg: DataConfig, cue: int, rng: np.random.Generator) -> VisualFrame:
    pix = visual_template(cfg, cue)
    if cfg.noise > 0:
        pix = pix + rng.normal(0.0, cfg.noise, pix.shape)
    return VisualFrame(np.clip(pix, 0.0, 1.0))


def _make_audio(cfg: DataConfig, cue: int, rng: np.random.Generator) -> AudioWaveform:
    wave = audio_template(cfg, cue)
    if cfg.noise > 0:
        wave = wave + rng.normal(0.0, cfg.noise, wave.shape)
    return AudioWaveform(np.clip(wave, -1.0, 1.0), cfg.sample_rate)


def _make_text(cfg: DataConfig, cue: int, rng: np.random.Generator) -> TokenSequence:
    group = token_group(cfg, cue)
    p_signal = text_signal_probability(cfg.noise)
    lo = len(RESERVED_TOKENS)
    ids = [CLS_ID]
    for _ in range(cfg.text_len - 1):
        if rng.random() < p_signal:
            ids.append(int(rng.integers(group.start, group.stop)))
        else:
            ids.append(int(rng.integers(lo, cfg.vocab_size)))
    return TokenSequence(ids)


def _generate_split(cfg: DataConfig, per_class: int, split_tag: int,
                    id_start: int) -> list[MultimodalSample]:
    samples: list[MultimodalSample] = []
    next_id = id_start
    for label in range(cfg.num_classes):
        for idx in range(per_class):
            rng = make_rng(cfg.seed, split_tag, label, idx)
            if cfg.coupling == "independent":
                v_cue = a_cue = t_cue = label
            else:
                # visual cue cycles within each class so label given any one
                # cue is uniform (audio exactly so when per_class % C == 0)
                v_cue = idx % cfg.num_classes
                a_cue = (label - v_cue) % cfg.num_classes
                t_cue = v_cue
            samples.append(MultimodalSample(
                id=next_id,
                label=label,
                visual=_make_visual(cfg, v_cue, rng),
                audio=_make_audio(cfg, a_cue, rng),
                text=_make_text(cfg, t_cue, rng),
            ))
            next_id += 1
    return samples


def generate_dataset(cfg: DataConfig) -> SyntheticDataset:
    """Deterministic synthetic dataset per (config, seed)."""
    if cfg.train_per_class < 1:
        raise ConfigError("need at least one training sample per class")
    token_group(cfg, cfg.num_classes - 1)  # validates vocab capacity
    train = _generate_split(cfg, cfg.train_per_class, 0, 0)
    val = _generate_split(cfg, cfg.val_per_class, 1, len(train))
    test = _generate_split(cfg, cfg.test_per_class, 2, len(train) + len(val))
    return SyntheticDataset(cfg, train, val, test)


# ---------------------------------------------------------------------------
# Disk format
# ---------------------------------------------------------------------------


def save_dataset(ds: SyntheticDataset, out_dir: str | Path) -> None:
    out = Path(out_dir)
    tensors = out / "tensors"
    tensors.mkdir(parents=True, exist_ok=True)
    manifest: dict = {"config": ds.config.to_dict(), "splits": {}}
    for split_name in ("train", "val", "test"):
        records = []
        for s in ds.split(split_name):
            vpath = f"tensors/{s.id:06d}_visual.cmtt"
            apath = f"tensors/{s.id:06d}_audio.cmtt"
            (out / vpath).write_bytes(encode_tensor(s.visual.pixels))
            (out / apath).write_bytes(encode_tensor(s.audio.samples))
            records.append({
                "id": s.id,
                "label": s.label,
                "visual": vpath,
                "audio": apath,
                "text": s.text.token_ids,
            })
        manifest["splits"][split_name] = records
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def load_dataset(in_dir: str | Path) -> SyntheticDataset:
    root = Path(in_dir)
    manifest_path = root / "manifest.json"
    if not manifest_path.is_file():
        raise InputError(f"no dataset manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    cfg = DataConfig.from_dict(manifest["config"])
    splits: dict[str, list[MultimodalSample]] = {}
    for split_name in ("train", "val", "test"):
        samples = []
        for rec in manifest["splits"][split_name]:
            pixels = decode_tensor((root / rec["visual"]).read_bytes())
            wave = decode_tensor((root / rec["audio"]).read_bytes())
            samples.append(MultimodalSample(
                id=rec["id"],
                label=rec["label"],
                visual=VisualFrame(pixels),
                audio=AudioWaveform(wave, cfg.sample_rate),
                text=TokenSequence(rec["text"]),
            ))
        splits[split_name] = samples
    return SyntheticDataset(cfg, splits["train"], splits["val"], splits["test"])
