"""Raw-count single-cell RNA-seq analysis toolkit.

A probabilistic treatment of raw UMI count matrices: per-cell extraction
efficiencies and per-gene expression levels estimated by plain or
square-root-corrected moments, a dispersion model matching observed zero
counts, efficiency-aware co-expression tables with chi-square testing, a
genome-wide differentiation index, and a counter-based synthetic data
generator for calibration studies.
"""

from .coexpression import (
    CoexResult,
    CoexTable,
    PairBlock,
    classical_expected,
    coex_stats,
    expected_table,
    make_table,
    observed_table,
    pairwise_coex,
)
from .downstream import (
    ConditionPartition,
    DiffExpResult,
    GdiScore,
    diff_expression,
    gdi_scores,
    gdi_threshold_test,
    gdi_transform,
)
from .estimation import (
    EstimatorKind,
    ModelParams,
    estimate_average,
    estimate_sqrt,
    expected_count,
    expected_row,
)
from .matrix import (
    CountMatrix,
    GeneMarginals,
    Marginals,
    MatrixFormatError,
    filter_genes,
    load_counts,
    load_dense_tsv,
    load_matrix_market,
    marginals,
    write_dense_tsv,
    write_matrix_market,
)
from .pipeline import PipelineConfig, parse_config_file, run_pipeline
from .sqrtpoisson import (
    SqrtPoissonEval,
    chi2_cdf,
    chi2_isf,
    chi2_quantile,
    chi2_sf,
    sqrt_mean,
    sqrt_mean_inv,
    sqrt_mean_inv_d2,
    sqrt_var,
)
from .synthetic import (
    ClusterSpec,
    GroundTruth,
    SynthConfig,
    default_cluster_config,
    default_null_config,
    fit_cluster_params,
    generate,
    zero_rate_check,
)
from .zeromodel import (
    DispersionFit,
    RhoMatrix,
    chance_of_expression,
    expected_zeros,
    fit_dispersion,
    neg_log_zero_prob,
    solve_dispersion,
)

__version__ = "0.1.0"
