"""Command-line surface for the long-tailed ensemble pipeline.

One INI config drives every subcommand; artifacts live under the config's
``paths.out_dir``. Outputs are written atomically (temp name, then rename)
and are byte-identical across reruns with the same config and inputs.
Exit codes: 0 success, 2 config error, 3 data error, 4 numeric divergence.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from ._io import atomic_write_text
from .config import ConfigError, FUSION_STRATEGIES, RunConfig, load_config
from .dataset import EmptyFoldError, assign_folds, partition_subsets, save_bundle
from .evaluation import (
    expert_confusion_matrix,
    fourfold_accuracy,
    msp_histogram,
    oracle_evaluate,
    take_one_out_ablation,
)
from .experts import (
    expert_partial_posterior,
    finetune_uniform_classifier,
    load_baseline_checkpoint,
    load_expert_checkpoint,
    save_baseline_checkpoint,
    save_expert_checkpoint,
    select_expert_hyperparams,
    train_baseline,
)
from .fusion import (
    CalibrationParams,
    SelectorModel,
    StackerModel,
    fuse_by_selection,
    fuse_by_stacking,
    fuse_calibrated,
    fuse_kl_min,
    fuse_soft_vote,
    ingest_external_posteriors,
    train_expert_selector,
    train_joint_calibration,
    train_stacker,
    write_partial_posterior_csv,
    write_posterior_csv,
)
from .network import DivergenceError, load_checkpoint, save_checkpoint
from .pipeline import (
    SEED_BASELINE,
    SEED_SELECTOR,
    SEED_STACKER,
    SEED_UNIFORM,
    full_posterior_table,
    prepare_bundle,
    seed_for_expert,
    train_config_from,
)

EXPERT_NAMES = ("manyshot", "mediumshot", "fewshot")
MODEL_NAMES = ("baseline", "uniform", "experts") + EXPERT_NAMES


def _out_dir(cfg: RunConfig) -> Path:
    return Path(cfg.paths.out_dir)


def _ckpt_path(cfg: RunConfig, name: str) -> Path:
    return _out_dir(cfg) / "checkpoints" / f"{name}.ckpt"


def _fusion_path(cfg: RunConfig, strategy: str) -> Path:
    return _out_dir(cfg) / "fusion" / f"{strategy}.params"


def _reports_dir(cfg: RunConfig) -> Path:
    return _out_dir(cfg) / "reports"


def _require_file(path: Path, hint: str) -> Path:
    if not path.is_file():
        raise FileNotFoundError(f"{path} is missing; run `{hint}` first")
    return path


def _load_experts(cfg: RunConfig):
    return [
        load_expert_checkpoint(
            _require_file(_ckpt_path(cfg, f"expert_{name}"), "tailens train-experts")
        )
        for name in EXPERT_NAMES
    ]


def _write_json(path: Path, payload) -> None:
    atomic_write_text(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")


def cmd_gen_data(cfg: RunConfig, args) -> None:
    bundle = prepare_bundle(cfg)
    manifest = save_bundle(bundle, _out_dir(cfg) / "data")
    print(f"wrote bundle to {manifest.parent}")


def cmd_train_baseline(cfg: RunConfig, args) -> None:
    bundle = prepare_bundle(cfg)
    root = cfg.training.seed
    baseline, trace = train_baseline(
        bundle, train_config_from(cfg.training, seed=root + SEED_BASELINE)
    )
    uniform, uniform_trace = finetune_uniform_classifier(
        baseline,
        bundle,
        train_config_from(cfg.training, seed=root + SEED_UNIFORM, stage="uniform"),
    )
    save_baseline_checkpoint(_ckpt_path(cfg, "baseline"), baseline)
    save_baseline_checkpoint(_ckpt_path(cfg, "uniform"), uniform)
    _write_json(
        _out_dir(cfg) / "checkpoints" / "train_traces.json",
        {"baseline": list(trace), "uniform": list(uniform_trace)},
    )
    print(f"baseline final loss {trace[-1]:.6f}")


def cmd_train_experts(cfg: RunConfig, args) -> None:
    bundle = prepare_bundle(cfg)
    baseline = load_baseline_checkpoint(
        _require_file(_ckpt_path(cfg, "baseline"), "tailens train-baseline")
    )
    folds = assign_folds(bundle.train, (cfg.dataset.many_min, cfg.dataset.few_max))
    subsets = partition_subsets(folds, bundle.train)
    root = cfg.training.seed

    def run_selection(subset):
        tc = train_config_from(
            cfg.training, seed=seed_for_expert(root, subset.expert_id), stage="expert"
        )
        return select_expert_hyperparams(
            baseline, subset, bundle, cfg.expert.rho_grid, cfg.expert.frozen_grid, tc
        )

    if args.threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=args.threads) as pool:
            selections = list(pool.map(run_selection, subsets))
    else:
        selections = [run_selection(s) for s in subsets]

    tables = []
    for subset, sel in zip(subsets, selections):
        name = subset.expert_id.label
        save_expert_checkpoint(_ckpt_path(cfg, f"expert_{name}"), sel.expert)
        tables.append(
            {
                "expert": name,
                "rho": sel.rho,
                "frozen_layers": sel.frozen_layers,
                "table": [
                    {
                        "rho": p.rho,
                        "frozen_layers": p.frozen_layers,
                        "val_accuracy": p.val_accuracy,
                    }
                    for p in sel.table
                ],
            }
        )
    _write_json(_out_dir(cfg) / "checkpoints" / "selection_tables.json", tables)
    chosen = ", ".join(f"{t['expert']}: rho={t['rho']}" for t in tables)
    print(f"experts trained ({chosen})")


def cmd_dump_posteriors(cfg: RunConfig, args) -> None:
    bundle = prepare_bundle(cfg)
    split = getattr(bundle, args.split)
    ids = np.arange(split.n)
    out = (
        Path(args.out)
        if args.out
        else _out_dir(cfg) / "dumps" / f"{args.model}_{args.split}.csv"
    )

    if args.model in ("baseline", "uniform"):
        model = load_baseline_checkpoint(
            _require_file(_ckpt_path(cfg, args.model), "tailens train-baseline")
        )
        write_posterior_csv(out, ids, full_posterior_table(model, split.features))
    elif args.model == "experts":
        experts = _load_experts(cfg)
        partials = [expert_partial_posterior(e, split.features) for e in experts]
        fused = fuse_soft_vote(
            partials, [e.subset for e in experts], bundle.class_count
        )
        write_posterior_csv(out, ids, fused)
    else:
        expert = load_expert_checkpoint(
            _require_file(_ckpt_path(cfg, f"expert_{args.model}"), "tailens train-experts")
        )
        partial = expert_partial_posterior(expert, split.features)
        write_partial_posterior_csv(out, ids, partial, expert.subset, rho=expert.rho)
    print(f"wrote {out}")


def cmd_train_fusion(cfg: RunConfig, args) -> None:
    strategy = args.strategy
    path = _fusion_path(cfg, strategy)
    if strategy in ("softvote", "kl"):
        _write_json(path, {"strategy": strategy, "parameters": None})
        print(f"{strategy} needs no learned parameters; wrote marker {path}")
        return

    bundle = prepare_bundle(cfg)
    experts = _load_experts(cfg)
    folds = assign_folds(bundle.train, (cfg.dataset.many_min, cfg.dataset.few_max))
    val_partials = [expert_partial_posterior(e, bundle.val.features) for e in experts]
    subsets = [e.subset for e in experts]
    fs = cfg.fusion
    root = cfg.training.seed

    if strategy == "select":
        selector = train_expert_selector(
            val_partials,
            folds.fold_of_samples(bundle.val.labels),
            seed=root + SEED_SELECTOR,
            epochs=fs.meta_epochs,
            lr0=fs.meta_lr0,
            batch_size=fs.meta_batch_size,
        )
        save_checkpoint(path, selector.params, {"kind": "selector"})
    elif strategy == "stack":
        stacker = train_stacker(
            val_partials,
            bundle.val.labels,
            bundle.class_count,
            seed=root + SEED_STACKER,
            epochs=fs.meta_epochs,
            lr0=fs.meta_lr0,
            batch_size=fs.meta_batch_size,
        )
        save_checkpoint(path, stacker.params, {"kind": "stacker"})
    else:  # calibrate
        calib, trace = train_joint_calibration(
            [p.logits for p in val_partials],
            subsets,
            bundle.val.labels,
            bundle.class_count,
            steps=fs.calibration_steps,
            lr=fs.calibration_lr,
        )
        _write_json(
            path,
            {
                "strategy": "calibrate",
                "scales": [w.tolist() for w in calib.scales],
                "shifts": [b.tolist() for b in calib.shifts],
                "objective_initial": trace[0],
                "objective_final": min(trace),
            },
        )
    print(f"wrote {path}")


def _load_fusion_artifacts(cfg: RunConfig, strategy: str):
    if strategy in ("softvote", "kl"):
        return None
    path = _require_file(
        _fusion_path(cfg, strategy), f"tailens train-fusion --strategy {strategy}"
    )
    if strategy == "calibrate":
        payload = json.loads(path.read_text(encoding="utf-8"))
        return CalibrationParams(
            scales=tuple(np.asarray(w, dtype=np.float64) for w in payload["scales"]),
            shifts=tuple(np.asarray(b, dtype=np.float64) for b in payload["shifts"]),
        )
    params, meta = load_checkpoint(path)
    if strategy == "select":
        if meta.get("kind") != "selector":
            raise ValueError(f"{path} is not a selector parameter file")
        return SelectorModel(params)
    if meta.get("kind") != "stacker":
        raise ValueError(f"{path} is not a stacker parameter file")
    return StackerModel(params)


def _fused_test_posteriors(cfg: RunConfig, strategy: str, bundle, experts):
    partials = [expert_partial_posterior(e, bundle.test.features) for e in experts]
    subsets = [e.subset for e in experts]
    class_count = bundle.class_count
    fs = cfg.fusion
    if strategy == "softvote":
        return fuse_soft_vote(partials, subsets, class_count)
    if strategy == "kl":
        return fuse_kl_min(
            partials,
            subsets,
            class_count,
            steps=fs.kl_steps,
            step_size=fs.kl_step_size,
            tol=fs.kl_tol,
        ).probabilities
    artifacts = _load_fusion_artifacts(cfg, strategy)
    if strategy == "select":
        return fuse_by_selection(partials, artifacts, subsets, class_count)
    if strategy == "stack":
        return fuse_by_stacking(partials, artifacts)
    return fuse_calibrated(
        [p.logits for p in partials], artifacts, subsets, class_count
    )


def cmd_evaluate(cfg: RunConfig, args) -> None:
    bundle = prepare_bundle(cfg)
    experts = _load_experts(cfg)
    folds = assign_folds(bundle.train, (cfg.dataset.many_min, cfg.dataset.few_max))
    fused = _fused_test_posteriors(cfg, args.strategy, bundle, experts)
    report = fourfold_accuracy(np.argmax(fused, axis=1), bundle.test.labels, folds)
    base = _reports_dir(cfg) / f"eval_{args.strategy}"
    _write_json(base.with_suffix(".json"), report.to_json_dict())
    atomic_write_text(base.with_suffix(".txt"), report.to_text())
    print(report.to_text(), end="")


def cmd_oracle(cfg: RunConfig, args) -> None:
    bundle = prepare_bundle(cfg)
    experts = _load_experts(cfg)
    folds = assign_folds(bundle.train, (cfg.dataset.many_min, cfg.dataset.few_max))
    report = oracle_evaluate(experts, bundle.test, folds)
    base = _reports_dir(cfg) / "oracle"
    _write_json(base.with_suffix(".json"), report.to_json_dict())
    atomic_write_text(base.with_suffix(".txt"), report.to_text())
    print(report.to_text(), end="")


def cmd_ablate(cfg: RunConfig, args) -> None:
    bundle = prepare_bundle(cfg)
    folds = assign_folds(bundle.train, (cfg.dataset.many_min, cfg.dataset.few_max))
    n = bundle.test.n
    tables = {}
    for path in args.models:
        table = ingest_external_posteriors(path, bundle.class_count).sorted_by_id()
        if not np.array_equal(table.sample_ids, np.arange(n)):
            raise ValueError(f"{path}: sample ids do not cover the test split")
        tables[table.name] = table.probabilities
    reports = take_one_out_ablation(tables, bundle.test.labels, folds)
    payload = {name: rep.to_json_dict() for name, rep in reports.items()}
    out = _reports_dir(cfg) / "ablation.json"
    _write_json(out, payload)
    for name, rep in reports.items():
        line = ", ".join(
            f"{k}={'n/a' if v is None else f'{100 * v:.1f}'}"
            for k, v in (
                ("many", rep.many),
                ("medium", rep.medium),
                ("few", rep.few),
                ("all", rep.all),
            )
        )
        print(f"{name}: {line}")


def cmd_report(cfg: RunConfig, args) -> None:
    bundle = prepare_bundle(cfg)
    experts = _load_experts(cfg)
    folds = assign_folds(bundle.train, (cfg.dataset.many_min, cfg.dataset.few_max))
    partials = [expert_partial_posterior(e, bundle.test.features) for e in experts]
    subsets = [e.subset for e in experts]
    reports = _reports_dir(cfg)

    confusion = expert_confusion_matrix(partials, subsets, bundle.test.labels, folds)
    atomic_write_text(reports / "confusion_softvote.csv", confusion.to_csv())
    calib_path = _fusion_path(cfg, "calibrate")
    if calib_path.is_file():
        calib = _load_fusion_artifacts(cfg, "calibrate")
        fused = fuse_calibrated(
            [p.logits for p in partials], calib, subsets, bundle.class_count
        )
        calibrated = expert_confusion_matrix(
            partials, subsets, bundle.test.labels, folds, fused_probabilities=fused
        )
        atomic_write_text(reports / "confusion_calibrate.csv", calibrated.to_csv())

    for expert in experts:
        hist = msp_histogram(
            expert,
            bundle.test.features,
            class_count=bundle.class_count,
            population="test",
        )
        name = expert.subset.expert_id.label
        atomic_write_text(reports / f"msp_{name}.csv", hist.to_csv())
    print(f"wrote analysis CSVs to {reports}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tailens",
        description="Class-balanced expert ensembles for long-tailed classification.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("config", help="run configuration (INI)")
        p.add_argument("--threads", type=int, default=1, help="worker threads")
        p.set_defaults(fn=fn)
        return p

    add("gen-data", cmd_gen_data, "write bundle CSVs and manifest")
    add("train-baseline", cmd_train_baseline, "train baseline and uniform finetune")
    add("train-experts", cmd_train_experts, "grid-search and train the three experts")

    p = add("dump-posteriors", cmd_dump_posteriors, "write a posterior dump CSV")
    p.add_argument("--model", required=True, choices=MODEL_NAMES)
    p.add_argument("--split", default="test", choices=("val", "test"))
    p.add_argument("--out", default=None)

    p = add("train-fusion", cmd_train_fusion, "fit fusion parameters on validation")
    p.add_argument("--strategy", required=True, choices=FUSION_STRATEGIES)

    p = add("evaluate", cmd_evaluate, "four-fold accuracy of a fusion strategy")
    p.add_argument("--strategy", required=True, choices=FUSION_STRATEGIES)

    add("oracle", cmd_oracle, "upper bound with ground-truth expert routing")

    p = add("ablate", cmd_ablate, "take-one-out table over posterior dumps")
    p.add_argument("--models", nargs="+", required=True)

    add("report", cmd_report, "expert confusion matrix and MSP histograms")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        args.fn(cfg, args)
    except ConfigError as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return 2
    except DivergenceError as exc:
        print(f"error: divergence: {exc}", file=sys.stderr)
        return 4
    except (EmptyFoldError, ValueError, OSError, KeyError) as exc:
        print(f"error: data: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
