"""Walkthrough: long-tailed data, frequency folds, and expert subsets.

Generates a power-law embedding dataset, assigns every class to the
manyshot / mediumshot / fewshot fold, partitions the frequency-sorted class
list into the three contiguous expert subsets, and shows what the reject
relabeling and the three batch samplers do.
"""

import numpy as np

import tailens as t

config = t.SyntheticConfig(
    class_count=24,
    feature_dim=8,
    n_max=200,
    alpha=1.4,
    n_val_per_class=10,
    n_test_per_class=20,
    noise_scale=0.6,
)
bundle = t.generate_longtailed(config, seed=7)

print("per-class training frequency (class index = frequency rank):")
print(" ", bundle.train.class_frequency.tolist())

folds = t.assign_folds(bundle.train)
for fold in t.Fold:
    classes = folds.classes_in(fold)
    total = int(bundle.train.class_frequency[classes].sum())
    print(f"{fold.label:>10}: {len(classes):2d} classes, {total:5d} train samples")

subsets = t.partition_subsets(folds, bundle.train)
print("\ncontiguous subsets over the frequency-sorted class order:")
for subset in subsets:
    print(f"  {subset.expert_id.label:>10}: classes {subset.classes.tolist()}")

# the fewshot expert sees its own classes plus one reject bucket
relabeled = t.relabel_for_expert(bundle.train, subsets[2])
reject_share = relabeled.class_frequency[-1] / relabeled.n
print(
    f"\nfewshot expert training set: {relabeled.class_count} classes "
    f"({subsets[2].size} real + reject), reject share {reject_share:.1%}"
)

# sampling regimes: what fraction of a batch is reject-labeled?
rng = np.random.default_rng(0)
for mode, label in [
    (t.SamplerMode.instance_balanced(), "instance balanced"),
    (t.SamplerMode.reject_undersampled(4.0), "reject undersampled (rho=4)"),
    (t.SamplerMode.uniform_class(), "uniform class"),
]:
    _, labels = t.draw_batch(relabeled, mode, 4000, rng)
    share = np.mean(labels == relabeled.class_count - 1)
    print(f"  {label:<28} -> reject share per batch {share:.1%}")
