"""End-to-end orchestration: data, models, posteriors, fusion, reports.

Seeds for every training task are derived from one root seed with fixed
offsets, so results are reproducible and independent of any thread-level
parallelism (each task owns its generator). The ``synth60`` preset is the
default desk-scale benchmark used by the test suite and the walkthrough
scripts.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .config import (
    DatasetSection,
    ExpertSection,
    FusionSection,
    PathsSection,
    RunConfig,
    TrainingSection,
)
from .dataset import (
    DatasetBundle,
    Fold,
    FoldAssignment,
    SubsetSpec,
    SyntheticConfig,
    assign_folds,
    generate_longtailed,
    load_bundle,
    partition_subsets,
)
from .experts import (
    BaselineModel,
    ExpertModel,
    HyperparamSelection,
    PartialPosterior,
    expert_partial_posterior,
    finetune_uniform_classifier,
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
    train_expert_selector,
    train_joint_calibration,
    train_stacker,
)
from .network import TrainConfig, forward_logits, softmax

# Fixed seed offsets for the pipeline's training tasks.
SEED_BASELINE = 1
SEED_UNIFORM = 2
SEED_EXPERT_BASE = 100  # expert e uses root + SEED_EXPERT_BASE * (e + 1)
SEED_SELECTOR = 500
SEED_STACKER = 501


def seed_for_expert(root_seed: int, expert: Fold) -> int:
    return root_seed + SEED_EXPERT_BASE * (int(expert) + 1)


def train_config_from(
    section: TrainingSection, *, seed: int, stage: str = "baseline"
) -> TrainConfig:
    """Stage-specific training settings; experts and the uniform finetune may
    run their own epoch budget (0 inherits the baseline budget)."""
    epochs = section.epochs
    if stage == "expert" and section.expert_epochs:
        epochs = section.expert_epochs
    elif stage == "uniform" and section.uniform_epochs:
        epochs = section.uniform_epochs
    return TrainConfig(
        lr0=section.lr0,
        epochs=epochs,
        batch_size=section.batch_size,
        seed=seed,
        weight_decay=section.weight_decay,
        hidden_dims=section.hidden_dims,
    )


def prepare_bundle(cfg: RunConfig) -> DatasetBundle:
    d = cfg.dataset
    if d.source == "load":
        return load_bundle(d.manifest)
    synth = SyntheticConfig(
        class_count=d.class_count,
        feature_dim=d.feature_dim,
        n_max=d.n_max,
        alpha=d.alpha,
        n_val_per_class=d.n_val_per_class,
        n_test_per_class=d.n_test_per_class,
        noise_scale=d.noise_scale,
    )
    return generate_longtailed(synth, cfg.training.seed, (d.many_min, d.few_max))


@dataclass(frozen=True)
class TrainedEnsemble:
    """Everything the fusion and evaluation stages consume."""

    bundle: DatasetBundle
    folds: FoldAssignment
    subsets: tuple[SubsetSpec, SubsetSpec, SubsetSpec]
    baseline: BaselineModel
    baseline_trace: tuple[float, ...]
    uniform: BaselineModel
    experts: tuple[ExpertModel, ExpertModel, ExpertModel]
    selections: tuple[HyperparamSelection, HyperparamSelection, HyperparamSelection]

    def partials(self, split: str) -> list[PartialPosterior]:
        features = getattr(self.bundle, split).features
        return [expert_partial_posterior(e, features) for e in self.experts]

    def subset_list(self) -> list[SubsetSpec]:
        return list(self.subsets)


def train_all(bundle: DatasetBundle, cfg: RunConfig, threads: int = 1) -> TrainedEnsemble:
    """Train baseline, uniform finetune, and the three experts (with grids).

    Thread count only affects wall-clock time: every task derives its own
    seed, so the results are identical for any ``threads`` value.
    """
    folds = assign_folds(bundle.train, (cfg.dataset.many_min, cfg.dataset.few_max))
    subsets = partition_subsets(folds, bundle.train)
    root = cfg.training.seed

    baseline, trace = train_baseline(
        bundle, train_config_from(cfg.training, seed=root + SEED_BASELINE)
    )
    uniform, _ = finetune_uniform_classifier(
        baseline,
        bundle,
        train_config_from(cfg.training, seed=root + SEED_UNIFORM, stage="uniform"),
    )

    def run_selection(subset: SubsetSpec) -> HyperparamSelection:
        tc = train_config_from(
            cfg.training, seed=seed_for_expert(root, subset.expert_id), stage="expert"
        )
        return select_expert_hyperparams(
            baseline, subset, bundle, cfg.expert.rho_grid, cfg.expert.frozen_grid, tc
        )

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            selections = tuple(pool.map(run_selection, subsets))
    else:
        selections = tuple(run_selection(s) for s in subsets)

    return TrainedEnsemble(
        bundle=bundle,
        folds=folds,
        subsets=subsets,
        baseline=baseline,
        baseline_trace=tuple(trace),
        uniform=uniform,
        experts=tuple(sel.expert for sel in selections),
        selections=selections,
    )


def full_posterior_table(model: BaselineModel, features) -> np.ndarray:
    return softmax(forward_logits(model.params, np.atleast_2d(features)))


def model_posterior_tables(ensemble: TrainedEnsemble, split: str) -> dict[str, np.ndarray]:
    """Full-width posteriors for the three ensemble members of the ablation:
    baseline, uniform finetune, and the soft-voted experts."""
    features = getattr(ensemble.bundle, split).features
    partials = ensemble.partials(split)
    return {
        "baseline": full_posterior_table(ensemble.baseline, features),
        "uniform": full_posterior_table(ensemble.uniform, features),
        "experts": fuse_soft_vote(
            partials, ensemble.subset_list(), ensemble.bundle.class_count
        ),
    }


@dataclass(frozen=True)
class FusionArtifacts:
    strategy: str
    selector: SelectorModel | None = None
    stacker: StackerModel | None = None
    calibration: CalibrationParams | None = None


def train_fusion(ensemble: TrainedEnsemble, cfg: RunConfig, strategy: str) -> FusionArtifacts:
    """Fit whatever the strategy needs on the validation split."""
    fs = cfg.fusion
    root = cfg.training.seed
    class_count = ensemble.bundle.class_count
    if strategy in ("softvote", "kl"):
        return FusionArtifacts(strategy=strategy)
    val_partials = ensemble.partials("val")
    if strategy == "select":
        fold_labels = ensemble.folds.fold_of_samples(ensemble.bundle.val.labels)
        selector = train_expert_selector(
            val_partials,
            fold_labels,
            seed=root + SEED_SELECTOR,
            epochs=fs.meta_epochs,
            lr0=fs.meta_lr0,
            batch_size=fs.meta_batch_size,
        )
        return FusionArtifacts(strategy=strategy, selector=selector)
    if strategy == "stack":
        stacker = train_stacker(
            val_partials,
            ensemble.bundle.val.labels,
            class_count,
            seed=root + SEED_STACKER,
            epochs=fs.meta_epochs,
            lr0=fs.meta_lr0,
            batch_size=fs.meta_batch_size,
        )
        return FusionArtifacts(strategy=strategy, stacker=stacker)
    if strategy == "calibrate":
        calib, _ = train_joint_calibration(
            [p.logits for p in val_partials],
            ensemble.subset_list(),
            ensemble.bundle.val.labels,
            class_count,
            steps=fs.calibration_steps,
            lr=fs.calibration_lr,
        )
        return FusionArtifacts(strategy=strategy, calibration=calib)
    raise ValueError(f"unknown fusion strategy {strategy!r}")


def fused_posteriors(
    ensemble: TrainedEnsemble,
    artifacts: FusionArtifacts,
    cfg: RunConfig,
    split: str = "test",
) -> np.ndarray:
    """Apply a trained fusion strategy to one split."""
    partials = ensemble.partials(split)
    subsets = ensemble.subset_list()
    class_count = ensemble.bundle.class_count
    strategy = artifacts.strategy
    if strategy == "softvote":
        return fuse_soft_vote(partials, subsets, class_count)
    if strategy == "kl":
        fs = cfg.fusion
        result = fuse_kl_min(
            partials,
            subsets,
            class_count,
            steps=fs.kl_steps,
            step_size=fs.kl_step_size,
            tol=fs.kl_tol,
        )
        return result.probabilities
    if strategy == "select":
        assert artifacts.selector is not None
        return fuse_by_selection(partials, artifacts.selector, subsets, class_count)
    if strategy == "stack":
        assert artifacts.stacker is not None
        return fuse_by_stacking(partials, artifacts.stacker)
    if strategy == "calibrate":
        assert artifacts.calibration is not None
        return fuse_calibrated(
            [p.logits for p in partials], artifacts.calibration, subsets, class_count
        )
    raise ValueError(f"unknown fusion strategy {strategy!r}")


def synth60_config(seed: int = 0, out_dir: str = "runs/synth60") -> RunConfig:
    """The pinned desk-scale benchmark: 60 power-law classes in 16 dims.

    The noise scale puts the baseline's balanced-test accuracy in the
    0.5..0.8 band while the class blobs stay geometrically separable, so the
    baseline's Fewshot deficit is a relative-imbalance effect rather than an
    information limit. Experts finetune from the baseline on their own,
    longer schedule; the baseline itself stays deliberately short.
    """
    return RunConfig(
        dataset=DatasetSection(
            source="generate",
            class_count=60,
            feature_dim=16,
            n_max=500,
            alpha=1.2,
            n_val_per_class=20,
            n_test_per_class=50,
            noise_scale=0.42,
        ),
        training=TrainingSection(
            lr0=0.2,
            epochs=20,
            batch_size=128,
            weight_decay=1e-4,
            seed=seed,
            hidden_dims=(64,),
            expert_epochs=200,
        ),
        expert=ExpertSection(rho_grid=(1.0, 2.0, 4.0, 8.0), frozen_grid=(0, 1)),
        fusion=FusionSection(),
        paths=PathsSection(out_dir=out_dir),
    )
