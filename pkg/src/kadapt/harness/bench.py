"""Benchmark suite: every (strategy, dataset, seed) cell from one frozen base."""

from __future__ import annotations

import logging
import time
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .. import tensor as T
from ..analysis import enumerate_count, pe_metric, results_csv, timing_csv
from ..peft import AdaptStrategy, adapt_paths, apply_strategy, parse_strategy
from ..vit import ViTConfig, ViTModel
from .data import FewShotSpec, SplitDataset, SynthSpec, few_shot_sample, synth_dataset
from .train import GridFailedError, TrainConfig, grid_search_train, train_run

log = logging.getLogger(__name__)

DEFAULT_STRATEGIES = (
    "full_finetune",
    "linear_probe",
    "transformer_probe",
    "bitfit",
    "layernorm_tune",
    "attention_tune",
    "adapter:bottleneck=8",
    "adapter_drop:bottleneck=8",
    "lora:r=4",
    "lora_fix:r=4",
    "compacter:n=4,bottleneck=8",
    "kadaptation:n=4,r=1",
    "lepe_tune",
    "rpb_tune",
)


def build_surrogate(config: ViTConfig, kind: str = "random", seed: int = 0, pretext_epochs: int = 5, pretext_noise: float = 0.6) -> ViTModel:
    """Stand-in for a pretrained backbone.

    ``random`` is a fixed-seed initialisation; ``pretext`` additionally trains
    every parameter briefly on a synthetic task with its own templates.
    """
    base = ViTModel.build(config, seed=seed)
    if kind == "random":
        return base
    if kind != "pretext":
        raise ValueError(f"unknown surrogate kind {kind!r}")
    spec = SynthSpec(classes=config.num_classes, per_class=100, image_size=config.image_size, channels=config.channels, noise_sigma=pretext_noise, seed=10_000 + seed)
    pre = synth_dataset(spec, "pretext")
    full = adapt_paths(base, list(base.params))
    train_run(full, pre.train, 0.05, 0.0, pretext_epochs, TrainConfig(), seed)
    return ViTModel(config, OrderedDict((p, T.Tensor(full.params[p].data.copy())) for p in base.params))


@dataclass
class RunReport:
    strategy: str
    dataset: str
    seeds: list
    per_seed_accuracy: list
    mean_accuracy: float
    best_cells: list
    head_params: int
    non_head_params: int
    total_params: int
    pe: float
    wall_clock_s: float
    peak_live_bytes: int
    failed_cells: int = 0
    errors: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class BenchResult:
    reports: list
    results_csv: str
    timing_csv: str
    timing_rows: list


def run_cell(base: ViTModel, strategy: AdaptStrategy, data: SplitDataset, seed: int, protocol: str, fewshot: FewShotSpec, cfg: TrainConfig) -> dict:
    """One (strategy, dataset, seed) run; head init and sampling keyed by ``seed``."""
    train = few_shot_sample(data.train, fewshot.shots_per_class, seed) if protocol == "few_shot" else data.train
    model = base.with_head(data.num_classes, seed=seed)
    adapted = apply_strategy(model, strategy, seed=seed)
    counts = enumerate_count(adapted)
    T.memory.reset_peak()
    start_live = T.memory.live
    t0 = time.perf_counter()
    cell_cfg = TrainConfig(**{**cfg.to_dict(), "seed": seed})
    best, grid = grid_search_train(adapted, train, data.val, data.test, cell_cfg)
    wall = time.perf_counter() - t0
    peak = T.memory.peak - start_live
    t1 = time.perf_counter()
    with T.no_grad(), np.errstate(over="ignore", invalid="ignore"):
        best.forward(data.test.images)
    infer_ms = 1000.0 * (time.perf_counter() - t1) / max(len(data.test), 1)
    return {
        "accuracy": grid.test_accuracy,
        "best": grid.best,
        "failed_cells": grid.failed_cells,
        "counts": counts,
        "wall_clock_s": wall,
        "peak_live_bytes": int(peak),
        "inference_ms_per_image": infer_ms,
        "train_ids": train.ids.tolist(),
    }


def benchmark_suite(
    strategies: Sequence,
    datasets: Sequence[SplitDataset],
    base: ViTModel,
    cfg: TrainConfig,
    protocol: str = "few_shot",
    fewshot: FewShotSpec = FewShotSpec(),
    seeds: Optional[Sequence[int]] = None,
    M0: float = 1e8,
) -> BenchResult:
    """Run every cell; failures become marked rows instead of aborting the suite."""
    if protocol not in ("few_shot", "full_shot"):
        raise ValueError(f"unknown protocol {protocol!r}")
    strategies = [parse_strategy(s) if isinstance(s, str) else s for s in strategies]
    seeds = list(seeds if seeds is not None else (fewshot.seeds if protocol == "few_shot" else (cfg.seed,)))
    reports, rows, timing = [], [], []
    for strat in strategies:
        row = {"strategy": strat.label}
        accs_all = []
        failed = 0
        for data in datasets:
            accs, bests, errors = [], [], []
            wall = 0.0
            peak = 0
            counts = None
            for seed in seeds:
                try:
                    cell = run_cell(base, strat, data, seed, protocol, fewshot, cfg)
                except (GridFailedError, ValueError) as exc:
                    log.warning("cell %s/%s/seed %d failed: %s", strat.label, data.name, seed, exc)
                    errors.append(f"seed {seed}: {exc}")
                    continue
                accs.append(cell["accuracy"])
                bests.append(cell["best"])
                failed += cell["failed_cells"]
                counts = cell["counts"]
                wall += cell["wall_clock_s"]
                peak = max(peak, cell["peak_live_bytes"])
                timing.append(
                    {
                        "strategy": strat.label,
                        "dataset": data.name,
                        "seed": seed,
                        "wall_clock_s": cell["wall_clock_s"],
                        "peak_live_bytes": cell["peak_live_bytes"],
                        "inference_ms_per_image": cell["inference_ms_per_image"],
                    }
                )
            mean = float(np.mean(accs)) if accs else float("nan")
            if counts is None:
                counts = enumerate_count(apply_strategy(base.with_head(data.num_classes, 0), strat, 0))
            pe = pe_metric(mean, counts.total, M0).pe if accs else float("nan")
            reports.append(
                RunReport(
                    strategy=strat.label,
                    dataset=data.name,
                    seeds=seeds,
                    per_seed_accuracy=accs,
                    mean_accuracy=mean,
                    best_cells=bests,
                    head_params=counts.head,
                    non_head_params=counts.non_head,
                    total_params=counts.total,
                    pe=pe,
                    wall_clock_s=wall,
                    peak_live_bytes=peak,
                    failed_cells=failed,
                    errors=errors,
                )
            )
            row[f"acc_{data.name}"] = mean if accs else "FAILED"
            accs_all.extend([mean] if accs else [])
            row.update(head_params=counts.head, non_head_params=counts.non_head, total_params=counts.total)
        overall = float(np.mean(accs_all)) if accs_all else float("nan")
        row["mean_accuracy"] = overall if accs_all else "FAILED"
        row["pe"] = pe_metric(overall, row["total_params"], M0).pe if accs_all else "FAILED"
        row["failed_cells"] = failed
        rows.append(row)
    names = [d.name for d in datasets]
    return BenchResult(reports, results_csv(rows, names), timing_csv(timing), timing)
