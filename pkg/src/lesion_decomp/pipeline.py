"""End-to-end workflows shared by the CLI and the acceptance suite."""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np

from . import baselines
from .config import ABLATIONS, RunConfig
from .evaluation import (
    EvalReport,
    evaluate_heatmaps,
    evaluate_model,
    plot_pr,
    save_report,
)
from .model import ArchConfig
from .phantom import (
    NORM_STATS_NAME,
    CorpusManifest,
    NormStats,
    PreparedSet,
    compute_norm_stats,
    load_manifest,
    load_samples,
    prepare,
)
from .trainer import TrainConfig, TrainState, load_checkpoint, train

log = logging.getLogger(__name__)


@dataclass
class CorpusSets:
    manifest: CorpusManifest
    stats: NormStats
    train: PreparedSet
    test_lesioned: PreparedSet
    test_normal: PreparedSet


def load_corpus_sets(corpus_dir: Union[str, Path], target_size: int,
                     stats: Optional[NormStats] = None) -> CorpusSets:
    manifest = load_manifest(corpus_dir)
    train_samples = load_samples(manifest, "train")
    if stats is None:
        stats = compute_norm_stats(train_samples)
    test = load_samples(manifest, "test")
    lesioned = [s for s in test if s.label == 1 and s.lesion_mask is not None]
    normal = [s for s in test if s.label == 0]
    return CorpusSets(
        manifest=manifest,
        stats=stats,
        train=prepare(train_samples, stats, target_size),
        test_lesioned=prepare(lesioned, stats, target_size),
        test_normal=prepare(normal, stats, target_size),
    )


def apply_variant(arch: ArchConfig, cfg: TrainConfig, variant: Optional[str]):
    """Architecture and training settings for one ablation tag."""
    if variant in (None, "full"):
        return arch, cfg
    if variant == "no_normal_fidelity":
        return arch, dataclasses.replace(cfg, loss=dataclasses.replace(cfg.loss, alpha3=0.0))
    if variant == "no_lesion_decoder":
        return dataclasses.replace(arch, lesion_decoder=False), cfg
    if variant == "no_discriminator":
        return arch, dataclasses.replace(cfg, loss=dataclasses.replace(cfg.loss, alpha1=0.0),
                                         train_critic=False)
    raise ValueError(f"unknown ablation variant {variant!r}; expected one of {ABLATIONS}")


def train_model(sets: CorpusSets, arch: ArchConfig, cfg: TrainConfig,
                out_dir: Optional[Union[str, Path]] = None) -> TrainState:
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        sets.stats.save(Path(out_dir) / NORM_STATS_NAME)
    return train(sets.train, cfg, arch, out_dir=out_dir)


def evaluate_state(state_or_bundle, sets: CorpusSets, run: RunConfig, metadata=None,
                   method: str = "decomp"):
    bundle = state_or_bundle.bundle if isinstance(state_or_bundle, TrainState) else state_or_bundle
    return evaluate_model(bundle, sets.test_lesioned, sets.test_normal, method=method,
                          n_thresholds=run.eval.n_thresholds, dice_grid=run.eval.dice_grid,
                          metadata=metadata)


def run_ablation(sets: CorpusSets, run: RunConfig, variants: Sequence[str] = ABLATIONS,
                 out_dir: Optional[Union[str, Path]] = None,
                 full_state: Optional[TrainState] = None) -> List[EvalReport]:
    """Train the full model and each ablated variant with identical seed/corpus/steps.

    Returns one report per run, the full model first.  A pre-trained
    ``full_state`` can be passed to skip retraining the full model.
    """
    for v in variants:
        if v not in ABLATIONS:
            raise ValueError(f"unknown ablation variant {v!r}; expected one of {ABLATIONS}")
    cfg = run.train_config()
    reports = []
    for tag in ["full", *variants]:
        arch, vcfg = apply_variant(run.arch, cfg, tag)
        sub = Path(out_dir) / tag if out_dir is not None else None
        if tag == "full" and full_state is not None:
            state = full_state
        else:
            log.info("training variant %s", tag)
            state = train_model(sets, arch, vcfg, sub)
        meta = {"ablation": tag, "seed": run.seed, "steps": vcfg.total_steps,
                "corpus_seed": sets.manifest.generator_seed}
        report, maps = evaluate_state(state, sets, run, metadata=meta)
        if sub is not None:
            save_report(report, sub / "eval", heatmaps=maps if run.eval.save_heatmaps else None,
                        ids=sets.test_lesioned.ids)
        reports.append(report)
    if out_dir is not None:
        plot_pr(reports, Path(out_dir) / "ablation_pr.png")
        summary = [{"ablation": r.metadata["ablation"], "auc": r.auc, "max_dice": r.max_dice}
                   for r in reports]
        (Path(out_dir) / "ablation_summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return reports


def run_baseline(sets: CorpusSets, run: RunConfig, method: str,
                 classifier: Optional[baselines.ClassifierBundle] = None):
    """Evaluate a CAM or Grad-CAM baseline.  Returns ``(report, heatmaps, accuracy)``."""
    accuracy = None
    if classifier is None:
        classifier, accuracy = baselines.train_classifier(sets.train, run.classifier_config())
    maps = baselines.baseline_heatmaps(classifier, sets.test_lesioned.images,
                                       sets.test_lesioned.rois, method)
    normal_maps = None
    if len(sets.test_normal):
        normal_maps = baselines.baseline_heatmaps(classifier, sets.test_normal.images,
                                                  sets.test_normal.rois, method)
    meta = {"seed": run.seed, "classifier_holdout_accuracy": accuracy}
    report = evaluate_heatmaps(maps, sets.test_lesioned.lesion_masks, sets.test_lesioned.rois[:, 0],
                               method=method, n_thresholds=run.eval.n_thresholds,
                               dice_grid=run.eval.dice_grid, normal_heatmaps=normal_maps,
                               normal_rois=sets.test_normal.rois[:, 0] if normal_maps is not None else None,
                               metadata=meta)
    return report, maps, accuracy


def load_trained(checkpoint: Union[str, Path]) -> TrainState:
    return load_checkpoint(checkpoint)


def stats_for_checkpoint(checkpoint: Union[str, Path]) -> Optional[NormStats]:
    path = Path(checkpoint).parent / NORM_STATS_NAME
    return NormStats.load(path) if path.is_file() else None


def heat_gap(report: EvalReport) -> float:
    if report.normal_mean_heat is None or report.lesion_mean_heat is None:
        return float("nan")
    return float(report.lesion_mean_heat - report.normal_mean_heat)


def band_min_dice(report: EvalReport, lo: float = 0.1, hi: float = 0.4) -> float:
    vals = [d for t, d in report.dice_by_threshold.items() if lo - 1e-9 <= t <= hi + 1e-9]
    return float(np.min(vals)) if vals else float("nan")
