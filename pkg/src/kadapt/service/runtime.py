"""Turn request settings into core objects and run the work."""

from __future__ import annotations

from dataclasses import asdict, replace

import numpy as np

from .. import analysis
from ..harness.bench import DEFAULT_STRATEGIES, benchmark_suite, build_surrogate
from ..harness.data import DatasetSpec, FewShotSpec, SynthSpec, build_dataset
from ..harness.train import TrainConfig
from ..peft import apply_strategy, load_adapted, merge, parse_strategy, save_adapted
from ..subspace import measure_local_id_live
from ..vit import PRESETS, ViTConfig, save_model
from . import schemas as S


def vit_config(m: S.ModelSettings, num_classes: int = 10) -> ViTConfig:
    if m.preset not in PRESETS:
        raise ValueError(f"unknown model preset {m.preset!r}; choose from {sorted(PRESETS)}")
    overrides = {k: v for k, v in m.model_dump().items() if k in ViTConfig.__dataclass_fields__ and v is not None}
    return replace(PRESETS[m.preset], num_classes=num_classes, **overrides)


def datasets(d: S.DataSettings, cfg: ViTConfig) -> list:
    if d.source == "synthetic":
        specs = [
            DatasetSpec(
                name=f"synth{seed}",
                synth=SynthSpec(d.classes, d.per_class, cfg.image_size, cfg.channels, d.noise_sigma, d.amplitude, seed),
                mean=d.norm_mean,
                std=d.norm_std,
            )
            for seed in d.data_seeds
        ]
    elif d.source == "idx":
        if not d.image_path or not d.label_path:
            raise ValueError("idx source needs image_path and label_path")
        specs = [DatasetSpec(name="idx", source="idx", image_path=d.image_path, label_path=d.label_path, mean=d.norm_mean, std=d.norm_std, seed=d.data_seeds[0] if d.data_seeds else 0)]
    else:
        raise ValueError(f"unknown data source {d.source!r}")
    return [build_dataset(s, cfg.image_size) for s in specs]


def train_config(t: S.TrainSettings, seed: int) -> TrainConfig:
    epochs_grid = None
    if t.protocol == "full_shot":
        epochs_grid = tuple(max(1, e // t.epoch_divisor) for e in t.full_shot_epochs_grid)
    elif t.protocol != "few_shot":
        raise ValueError(f"unknown protocol {t.protocol!r}")
    return TrainConfig(
        optimizer=t.optimizer,
        momentum=t.momentum,
        lr_grid=tuple(t.lr_grid),
        wd_grid=tuple(t.wd_grid),
        epochs=t.epochs,
        epochs_grid=epochs_grid,
        batch_size=t.batch_size,
        eval_every=t.eval_every,
        seed=seed,
    )


def _setup(req):
    cfg0 = vit_config(req.model)
    data = datasets(req.data, cfg0)
    cfg = replace(cfg0, num_classes=data[0].num_classes)
    base = build_surrogate(cfg, req.model.surrogate, req.model.surrogate_seed, req.model.pretext_epochs)
    return cfg, data, base


def _report_model(r) -> S.RunReportModel:
    # JSON has no NaN; a fully failed cell reports null accuracy and PE.
    d = r.to_dict()
    for key in ("mean_accuracy", "pe"):
        if d[key] != d[key]:
            d[key] = None
    return S.RunReportModel(**d)


def run_train(req: S.TrainRequest) -> S.TrainResponse:
    _, data, base = _setup(req)
    tcfg = train_config(req.train, req.seed)
    strat = parse_strategy(req.adapt.strategy)
    seeds = list(req.train.seeds) if req.train.protocol == "few_shot" else [req.seed]
    result = benchmark_suite([strat], data[:1], base, tcfg, req.train.protocol, FewShotSpec(req.train.shots, tuple(seeds)), seeds)
    checkpoint = None
    grid = []
    if req.checkpoint.checkpoint_out:
        # Re-run the first seed's cell to keep its trained weights.
        from ..harness.data import few_shot_sample
        from ..harness.train import grid_search_train

        seed = seeds[0]
        ds = data[0]
        train = few_shot_sample(ds.train, req.train.shots, seed) if req.train.protocol == "few_shot" else ds.train
        adapted = apply_strategy(base.with_head(ds.num_classes, seed), strat, seed)
        best, rep = grid_search_train(adapted, train, ds.val, ds.test, replace(tcfg, seed=seed))
        save_adapted(req.checkpoint.checkpoint_out, best)
        checkpoint = req.checkpoint.checkpoint_out
        grid = rep.cells
    return S.TrainResponse(report=_report_model(result.reports[0]), results_csv=result.results_csv, grid=grid, checkpoint=checkpoint)


def run_bench(req: S.BenchRequest) -> S.BenchResponse:
    _, data, base = _setup(req)
    tcfg = train_config(req.train, req.seed)
    strategies = list(req.adapt.strategies) or list(DEFAULT_STRATEGIES)
    seeds = list(req.train.seeds) if req.train.protocol == "few_shot" else [req.seed]
    result = benchmark_suite(strategies, data, base, tcfg, req.train.protocol, FewShotSpec(req.train.shots, tuple(seeds)), seeds)
    return S.BenchResponse(reports=[_report_model(r) for r in result.reports], results_csv=result.results_csv, timing_csv=result.timing_csv)


def run_measure_id(req: S.MeasureIDRequest) -> S.MeasureIDResponse:
    _, data, base = _setup(req)
    tcfg = train_config(req.train, req.seed)
    ds = data[0]
    if req.train.protocol == "few_shot":
        from ..harness.data import SplitDataset, few_shot_sample

        ds = SplitDataset(ds.name, few_shot_sample(ds.train, req.train.shots, req.seed), ds.val, ds.test)
    model = base.with_head(ds.num_classes, req.seed)
    out = measure_local_id_live(model, req.id.module, list(req.id.layers), list(req.id.grid), tcfg, ds, req.id.projection, req.id.threshold, req.seed)
    return S.MeasureIDResponse(
        module=out["module"],
        layers=out["layers"],
        per_layer={str(k): v.to_dict() for k, v in out["per_layer"].items()},
        mean=out["mean"].to_dict(),
    )


def run_count(req: S.CountRequest) -> S.CountResponse:
    cfg = vit_config(req.model)
    base = build_surrogate(cfg, "random", req.model.surrogate_seed)
    specs = list(req.adapt.strategies) or [req.adapt.strategy]
    rows = []
    for spec in specs:
        adapted = apply_strategy(base, parse_strategy(spec), req.seed)
        enum = analysis.enumerate_count(adapted)
        row = {
            "strategy": adapted.strategy.label,
            "head_params": enum.head,
            "non_head_params": enum.non_head,
            "total_params": enum.total,
            "breakdown": enum.breakdown,
        }
        try:
            rec = analysis.reconcile(None, None, adapted)
            row.update(formula_count=rec["formula_count"], gap=rec["gap"], reconcile=rec)
        except ValueError:
            pass
        rows.append(row)
    formula = None
    c = req.count
    if c.method:
        defaults = analysis.CountInputs()
        inputs = analysis.CountInputs(
            L=c.L or defaults.L,
            k=c.k or defaults.k,
            d=c.d or defaults.d,
            d_model=req.model.d_model or defaults.d_model,
            r=c.r or defaults.r,
            n=c.n or defaults.n,
        )
        formula = {"method": c.method, "inputs": asdict(inputs), "count": analysis.formula_count(c.method, inputs)}
    return S.CountResponse(rows=rows, csv=analysis.count_report_csv(rows), formula=formula)


def run_merge(req: S.MergeRequest) -> S.MergeResponse:
    c = req.checkpoint
    if not c.checkpoint or not c.merged_out:
        raise ValueError("merge needs checkpoint and merged_out")
    adapted = load_adapted(c.checkpoint)
    merged = merge(adapted)
    cfg = adapted.config
    x = np.random.default_rng(0).normal(size=(c.check_inputs, cfg.channels, cfg.image_size, cfg.image_size))
    from .. import tensor as T

    with T.no_grad():
        a = adapted.forward(x).data
        m = merged(x).data
    save_model(c.merged_out, merged, {"merged_from": adapted.strategy.to_dict()})
    return S.MergeResponse(
        output=c.merged_out,
        strategy=adapted.strategy.label,
        sites=adapted.delta_sites(),
        max_abs_logit_deviation=float(np.abs(a - m).max()),
        argmax_agree=bool((a.argmax(1) == m.argmax(1)).all()),
    )
