"""Config-driven glue: geometry, synthesis, partitions, training and evaluation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from .array_model import ArrayGeometry, load_geometry, random_geometry
from .config import PipelineConfig
from .nn.train import Checkpoint, train
from .rul import EvalReport, evaluate
from .spectrogram import Spectrogram, augment_many, split_dataset
from .synth import synth_dataset

# independent seed streams derived from the top-level seed
_SPLIT, _AUGMENT = 1, 2


def build_geometry(cfg: PipelineConfig) -> ArrayGeometry:
    g = cfg.geometry
    if g.file:
        return load_geometry(g.file)
    return random_geometry(g.seed, g.num_mics, g.aperture)


def synthesize(cfg: PipelineConfig, workers: int | None = None, progress=None) -> list[Spectrogram]:
    return synth_dataset(cfg.scene.build(), cfg.wear.build(), build_geometry(cfg),
                         cfg.spectrogram.frames_per_run, cfg.seed, cfg.dsp.build(),
                         cfg.spectrogram.per_run_reference, workers, progress)


@dataclass
class Partitions:
    train: list[Spectrogram]
    val: list[Spectrogram]
    test: list[Spectrogram]


def _with_copies(items: Sequence[Spectrogram], cfg: PipelineConfig, stream: int) -> list[Spectrogram]:
    s = cfg.spectrogram
    copies = augment_many(items, s.augment_copies, s.max_shift, s.noise_db_sigma,
                          cfg.derived_seed(stream))
    return list(items) + copies


def partition(items: Sequence[Spectrogram], cfg: PipelineConfig) -> Partitions:
    """Originals plus augmented copies, split 75/10/15.

    With ``split_before_augment`` the runs are split first, so every variant
    of a run stays in one partition; otherwise the pooled variants are split.
    """
    s = cfg.spectrogram
    items = sorted(items, key=lambda x: x.run_label)
    if s.split_before_augment:
        sp = split_dataset(items, cfg.derived_seed(_SPLIT), s.split_fractions)
        parts = [_with_copies([items[i] for i in idx], cfg, _AUGMENT * 10 + k)
                 for k, idx in enumerate((sp.train, sp.val, sp.test))]
        return Partitions(*parts)
    pool = _with_copies(items, cfg, _AUGMENT)
    sp = split_dataset(pool, cfg.derived_seed(_SPLIT), s.split_fractions)
    return Partitions(*[[pool[i] for i in idx] for idx in (sp.train, sp.val, sp.test)])


def run_training(items: Sequence[Spectrogram], cfg: PipelineConfig, on_epoch=None) -> Checkpoint:
    parts = partition(items, cfg)
    return train(parts.train, parts.val, cfg.architecture(), cfg.train_config(), on_epoch)


def run_evaluation(model, items: Sequence[Spectrogram], cfg: PipelineConfig,
                   n_total: int | None = None) -> EvalReport:
    parts = partition(items, cfg)
    return evaluate(model, parts.test, n_total or cfg.scene.n_total, cfg.eval.window, context=items)
