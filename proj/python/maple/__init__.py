"""Point cloud video action recognition with masked pseudo-labeling."""

from ._maple import (
    InvalidArgument,
    Model,
    entmin_loss,
    estimate_flops,
    farthest_point_sampling,
    generate_dataset,
    generate_synthetic_action,
    kl_divergence,
    lr_at,
    maple_loss,
    report,
    run_experiment,
    sample_mask,
    split_counts,
    split_dataset,
    vat_loss,
)

__all__ = [
    "InvalidArgument",
    "Model",
    "entmin_loss",
    "estimate_flops",
    "farthest_point_sampling",
    "generate_dataset",
    "generate_synthetic_action",
    "kl_divergence",
    "lr_at",
    "maple_loss",
    "report",
    "run_experiment",
    "sample_mask",
    "split_counts",
    "split_dataset",
    "vat_loss",
]
