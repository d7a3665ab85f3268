"""Command-line front-end.

Exit codes: 0 success, 2 usage, 3 input error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .acceptance import run_all
from .coexpression import pairwise_coex, pairwise_subset
from .downstream import (
    ConditionPartition,
    diff_expression,
    gdi_scores,
    gdi_threshold_test,
)
from .estimation import estimate_average, estimate_sqrt
from .matrix import (
    MatrixFormatError,
    filter_genes,
    load_counts,
    marginals,
    write_matrix_market,
)
from .pipeline import (
    ConfigError,
    PipelineConfig,
    StageError,
    apply_overrides,
    parse_config_file,
    read_coex_pvalues,
    read_estimates,
    read_rho,
    run_pipeline,
    tee_index_matrix,
    write_coex_binary,
    write_coex_csv,
    write_coex_matrix,
    write_estimates,
    write_rho,
    write_zerofit,
)
from .plotdata import (
    MAX_ECDF_POINTS,
    PLOT_KINDS,
    emit_estimator_scatter,
    emit_gdi_hist,
    emit_pvalue_ecdf,
)
from .synthetic import default_cluster_config, default_null_config, generate
from .zeromodel import chance_of_expression, fit_dispersion

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_INPUT = 3
EXIT_NUMERIC = 4


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="rawcoex",
        description="Raw-count single-cell analysis: estimation, zero model, "
        "co-expression, differentiation scoring and synthetic benchmarks.",
    )
    p.add_argument("--version", action="version", version=f"rawcoex {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("ingest", help="load, validate and canonicalize a count matrix")
    sp.add_argument("matrix", help="input matrix (.mtx or .tsv)")
    sp.add_argument("--format", choices=("mtx", "tsv"), help="override format detection")
    sp.add_argument("--min-total", type=int, default=1, help="drop genes below this total count")
    sp.add_argument("--out", required=True, help="canonical MatrixMarket output path")

    sp = sub.add_parser("estimate", help="estimate efficiencies and expression levels")
    sp.add_argument("matrix")
    sp.add_argument("--format", choices=("mtx", "tsv"))
    sp.add_argument("--estimator", choices=("average", "sqrt"), default="average")
    sp.add_argument("--out-genes", required=True, help="per-gene CSV (id,value,flag)")
    sp.add_argument("--out-cells", required=True, help="per-cell CSV (id,value,flag)")

    sp = sub.add_parser("fit-zero", help="fit per-gene dispersion from zero counts")
    sp.add_argument("matrix")
    sp.add_argument("--format", choices=("mtx", "tsv"))
    sp.add_argument("--genes", required=True, help="gene estimates CSV from 'estimate'")
    sp.add_argument("--cells", required=True, help="cell estimates CSV from 'estimate'")
    sp.add_argument("--estimator", choices=("average", "sqrt"), default="average")
    sp.add_argument("--out", required=True, help="per-gene fit CSV (id,a,residual,negative)")
    sp.add_argument("--rho-out", help="optional binary chance-of-expression matrix")

    sp = sub.add_parser("coex", help="pairwise co-expression statistics")
    sp.add_argument("matrix")
    sp.add_argument("rho", help="binary rho matrix from 'fit-zero'")
    sp.add_argument("dest", help="output path")
    sp.add_argument("--format", choices=("mtx", "tsv"))
    sp.add_argument("--pairs", default="all", help="'all' or a two-column gene-id list file")
    sp.add_argument("--out", choices=("csv", "binary"), default="csv", help="output format")
    sp.add_argument("--tile", type=int, default=256, help="genes per engine tile")
    sp.add_argument("--threads", type=int, default=1, help="worker threads")
    sp.add_argument(
        "--matrix-out",
        help="also export the dense symmetric index matrix (O(n^2); warns for large n)",
    )

    sp = sub.add_parser("diffexp", help="differential expression across conditions")
    sp.add_argument("matrix")
    sp.add_argument("rho")
    sp.add_argument("--format", choices=("mtx", "tsv"))
    sp.add_argument("--conditions", required=True, help="two-column cell/condition TSV")
    sp.add_argument("--out", required=True, help="per-gene CSV (id,W,dof,p)")

    sp = sub.add_parser("gdi", help="global differentiation scores")
    sp.add_argument("matrix")
    sp.add_argument("rho")
    sp.add_argument("--format", choices=("mtx", "tsv"))
    sp.add_argument("--alpha", type=float, default=1e-3, help="upper-percentile level for the score")
    sp.add_argument("--quantile", type=float, default=1e-4, help="flagging quantile")
    sp.add_argument("--tile", type=int, default=256)
    sp.add_argument("--threads", type=int, default=1)
    sp.add_argument("--out", required=True, help="per-gene CSV (id,s,gdi,flagged)")

    sp = sub.add_parser("simulate", help="generate a synthetic dataset with ground truth")
    sp.add_argument("config", help="key = value config file (see docs)")
    sp.add_argument("--out-dir", required=True)

    sp = sub.add_parser("plot-data", help="emit tidy plot CSVs and figures")
    sp.add_argument("--kind", choices=PLOT_KINDS, required=True)
    sp.add_argument("--coex", help="pair results (csv or binary), for pvalue-ecdf")
    sp.add_argument("--gdi", help="gdi CSV, for gdi-hist")
    sp.add_argument("--truth-genes", help="simulate truth genes CSV, for estimator-scatter")
    sp.add_argument("--truth-cells", help="simulate truth cells CSV, for estimator-scatter")
    sp.add_argument("--genes", help="estimated genes CSV, for estimator-scatter")
    sp.add_argument("--cells", help="estimated cells CSV, for estimator-scatter")
    sp.add_argument("--out", required=True, help="tidy CSV output path")
    sp.add_argument("--max-points", type=int, default=MAX_ECDF_POINTS)
    sp.add_argument("--seed", type=int, default=0, help="subsampling seed")
    sp.add_argument("--no-figure", action="store_true", help="skip the PNG next to the CSV")

    sp = sub.add_parser("validate", help="run the acceptance suite")
    sp.add_argument("--quick", action="store_true", help="only the fast certificate checks")

    sp = sub.add_parser("pipeline", help="run ingest -> estimate -> fit-zero -> coex with caching")
    sp.add_argument("--config", help="key = value pipeline config file")
    sp.add_argument("--matrix")
    sp.add_argument("--out-dir")
    sp.add_argument("--estimator", choices=("average", "sqrt"))
    sp.add_argument("--alpha", type=float)
    sp.add_argument("--gdi-quantile", type=float)
    sp.add_argument("--tile", type=int)
    sp.add_argument("--threads", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--min-total", type=int)
    sp.add_argument("--format", choices=("mtx", "tsv"))
    return p


def _load_matrix(args):
    return load_counts(args.matrix, getattr(args, "format", None) or None)


def cmd_ingest(args) -> int:
    mat = _load_matrix(args)
    mat, kept = filter_genes(mat, args.min_total)
    write_matrix_market(mat, args.out)
    s = marginals(mat)
    print(
        f"{mat.n_genes} genes x {mat.n_cells} cells, {mat.nnz} stored counts "
        f"({mat.nnz / max(mat.n_genes * mat.n_cells, 1):.1%} dense), "
        f"total reads {s.grand_total}, kept {kept.size} genes -> {args.out}"
    )
    return EXIT_OK


def cmd_estimate(args) -> int:
    mat = _load_matrix(args)
    est = estimate_average if args.estimator == "average" else estimate_sqrt
    params = est(mat)
    write_estimates(params, mat.gene_ids, mat.cell_ids, args.out_genes, args.out_cells)
    flagged = int(params.lam_clamped.sum())
    print(f"wrote {args.out_genes} and {args.out_cells} ({flagged} clamped genes)")
    return EXIT_OK


def cmd_fit_zero(args) -> int:
    mat = _load_matrix(args)
    params = read_estimates(args.genes, args.cells, args.estimator)
    fit = fit_dispersion(mat, params)
    write_zerofit(fit, mat.gene_ids, args.out)
    msg = f"wrote {args.out} ({int(fit.negative.sum())} negative-dispersion genes)"
    if args.rho_out:
        rho = chance_of_expression(params, fit)
        write_rho(rho, args.rho_out)
        msg += f", rho matrix -> {args.rho_out}"
    print(msg)
    return EXIT_OK


def _read_pair_list(path, gene_ids):
    index = {g: i for i, g in enumerate(gene_ids)}
    pairs = []
    for ln, line in enumerate(Path(path).read_text().splitlines(), start=1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) != 2:
            raise MatrixFormatError("pair lines need two gene ids", ln)
        try:
            pairs.append((index[parts[0]], index[parts[1]]))
        except KeyError as exc:
            raise MatrixFormatError(f"unknown gene id {exc.args[0]!r}", ln) from None
    return pairs


def cmd_coex(args) -> int:
    mat = _load_matrix(args)
    rho = read_rho(args.rho)
    dest = Path(args.dest)
    # the marker outlives any failure below, flagging partial output
    marker = dest.with_suffix(dest.suffix + ".incomplete")
    marker.touch()
    if args.pairs == "all":
        blocks = pairwise_coex(mat, rho, tile=args.tile, threads=args.threads)
    else:
        blocks = _listed_blocks(mat, rho, _read_pair_list(args.pairs, mat.gene_ids))
    full = None
    if args.matrix_out:
        if args.pairs != "all":
            raise ConfigError("--matrix-out requires --pairs all")
        full = np.zeros((mat.n_genes, mat.n_genes))
        blocks = tee_index_matrix(blocks, mat.n_genes, full)
    if args.out == "csv":
        n = write_coex_csv(blocks, mat.gene_ids, dest)
    else:
        n = write_coex_binary(blocks, dest)
    if full is not None:
        write_coex_matrix(full, mat.gene_ids, args.matrix_out, args.out)
    marker.unlink(missing_ok=True)
    print(f"wrote {n} pair results -> {dest}")
    return EXIT_OK


def _listed_blocks(mat, rho, pairs):
    from .coexpression import PairBlock

    for g1, g2, t, res in pairwise_subset(mat, rho, pairs):
        yield PairBlock(
            g1=np.array([g1], dtype=np.int32),
            g2=np.array([g2], dtype=np.int32),
            o11=np.array([t.o11]), o10=np.array([t.o10]),
            o01=np.array([t.o01]), o00=np.array([t.o00]),
            e11=np.array([t.e11]), e10=np.array([t.e10]),
            e01=np.array([t.e01]), e00=np.array([t.e00]),
            w=np.array([res.w]), r=np.array([res.r]),
            p=np.array([res.p_value]),
        )


def cmd_diffexp(args) -> int:
    mat = _load_matrix(args)
    rho = read_rho(args.rho)
    cell_index = {c: i for i, c in enumerate(mat.cell_ids)}
    labels = [None] * mat.n_cells
    for ln, line in enumerate(Path(args.conditions).read_text().splitlines(), start=1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) != 2:
            raise MatrixFormatError("condition lines need cell id and label", ln)
        if parts[0] not in cell_index:
            raise MatrixFormatError(f"unknown cell id {parts[0]!r}", ln)
        labels[cell_index[parts[0]]] = parts[1]
    if any(l is None for l in labels):
        raise MatrixFormatError("conditions file does not cover every cell")
    part = ConditionPartition.from_labels(labels)
    with Path(args.out).open("w", encoding="utf-8") as fh:
        fh.write("id,W,dof,p\n")
        for g in range(mat.n_genes):
            if not rho.fitted[g]:
                fh.write(f"{mat.gene_ids[g]},nan,{part.k - 1},nan\n")
                continue
            res = diff_expression(mat, rho, part, g)
            fh.write(f"{mat.gene_ids[g]},{res.w:.10g},{res.dof},{res.p_value:.10g}\n")
    print(f"wrote {args.out} ({part.k} conditions)")
    return EXIT_OK


def cmd_gdi(args) -> int:
    mat = _load_matrix(args)
    rho = read_rho(args.rho)
    stream = pairwise_coex(mat, rho, tile=args.tile, threads=args.threads)
    scores = gdi_scores(stream, mat.n_genes, alpha=args.alpha)
    flags = gdi_threshold_test(scores, args.quantile)
    with Path(args.out).open("w", encoding="utf-8") as fh:
        fh.write("id,s,gdi,flagged\n")
        for gid, s, g, f in zip(mat.gene_ids, scores.s, scores.gdi, flags):
            fh.write(f"{gid},{s:.10g},{g:.10g},{int(f)}\n")
    print(f"wrote {args.out} ({int(flags.sum())} flagged genes)")
    return EXIT_OK


_SIM_KEYS = {
    "preset": str,
    "n_genes": int,
    "n_cells": int,
    "n_clusters": int,
    "seed": int,
}


def _parse_simulate_config(path):
    values = {"preset": "null", "n_genes": 2000, "n_cells": 800, "n_clusters": 4, "seed": 0}
    for i, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {i}: expected 'key = value'")
        key, _, raw = line.partition("=")
        key = key.strip().replace("-", "_")
        if key not in _SIM_KEYS:
            raise ConfigError(f"line {i}: unknown key {key!r}")
        try:
            values[key] = _SIM_KEYS[key](raw.strip())
        except ValueError:
            raise ConfigError(f"line {i}: bad value for {key}") from None
    if values["preset"] not in ("null", "clusters"):
        raise ConfigError("preset must be 'null' or 'clusters'")
    return values


def cmd_simulate(args) -> int:
    values = _parse_simulate_config(args.config)
    if values["preset"] == "null":
        cfg = default_null_config(values["n_genes"], values["n_cells"], values["seed"])
    else:
        cfg = default_cluster_config(
            values["n_genes"], values["n_cells"], values["n_clusters"], values["seed"]
        )
    mat, truth = generate(cfg)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_matrix_market(mat, out / "matrix.mtx")
    with (out / "truth_cells.csv").open("w", encoding="utf-8") as fh:
        fh.write("id,nu,cluster\n")
        for cid, nu, cl in zip(mat.cell_ids, truth.nu, truth.cluster_of):
            fh.write(f"{cid},{float(nu)!r},{cl}\n")
    with (out / "truth_genes.csv").open("w", encoding="utf-8") as fh:
        fh.write("id,cluster,lam,disp\n")
        for cl in range(truth.lam.shape[0]):
            for gid, lam, disp in zip(mat.gene_ids, truth.lam[cl], truth.disp[cl]):
                fh.write(f"{gid},{cl},{float(lam)!r},{float(disp)!r}\n")
    print(f"wrote matrix.mtx, truth_cells.csv, truth_genes.csv -> {out}")
    return EXIT_OK


def _read_csv_columns(path, want_header):
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != want_header:
        raise ValueError(f"{path}: expected header {want_header!r}")
    return [line.split(",") for line in lines[1:]]


def cmd_plot_data(args) -> int:
    png = None if args.no_figure else str(Path(args.out).with_suffix(".png"))
    if args.kind == "pvalue-ecdf":
        if not args.coex:
            raise ConfigError("pvalue-ecdf needs --coex")
        p = read_coex_pvalues(args.coex)
        emit_pvalue_ecdf(p, args.out, png, max_points=args.max_points, seed=args.seed)
    elif args.kind == "gdi-hist":
        if not args.gdi:
            raise ConfigError("gdi-hist needs --gdi")
        rows = _read_csv_columns(args.gdi, "id,s,gdi,flagged")
        emit_gdi_hist(np.array([float(r[2]) for r in rows]), args.out, png)
    else:
        needed = (args.truth_genes, args.truth_cells, args.genes, args.cells)
        if any(x is None for x in needed):
            raise ConfigError(
                "estimator-scatter needs --truth-genes, --truth-cells, --genes, --cells"
            )
        truth_g = _read_csv_columns(args.truth_genes, "id,cluster,lam,disp")
        clusters = {r[1] for r in truth_g}
        if len(clusters) > 1:
            raise ConfigError("estimator-scatter requires single-cluster ground truth")
        truth_c = _read_csv_columns(args.truth_cells, "id,nu,cluster")
        est_g = _read_csv_columns(args.genes, "id,value,flag")
        est_c = _read_csv_columns(args.cells, "id,value,flag")
        lam_true = {r[0]: float(r[2]) for r in truth_g}
        nu_true = {r[0]: float(r[1]) for r in truth_c}
        true_vals, est_vals, kinds = [], [], []
        for r in est_g:
            true_vals.append(lam_true[r[0]])
            est_vals.append(float(r[1]))
            kinds.append("lambda")
        for r in est_c:
            true_vals.append(nu_true[r[0]])
            est_vals.append(float(r[1]))
            kinds.append("nu")
        emit_estimator_scatter(true_vals, est_vals, kinds, args.out, png)
    made = args.out if args.no_figure else f"{args.out} and {png}"
    print(f"wrote {made}")
    return EXIT_OK


def cmd_validate(args) -> int:
    results = run_all(quick=args.quick)
    for res in results:
        print(res.line())
    return EXIT_OK if all(r.passed for r in results) else EXIT_NUMERIC


def cmd_pipeline(args) -> int:
    config = parse_config_file(args.config) if args.config else PipelineConfig()
    overrides = {
        "matrix": args.matrix,
        "out_dir": args.out_dir,
        "estimator": args.estimator,
        "alpha": args.alpha,
        "gdi_quantile": args.gdi_quantile,
        "tile": args.tile,
        "threads": args.threads,
        "seed": args.seed,
        "min_total": args.min_total,
        "format": args.format,
    }
    config = apply_overrides(config, overrides)
    manifest = run_pipeline(config)
    for stage, rec in manifest.stages.items():
        print(f"{stage}: {rec['status']}")
    print(f"manifest: {manifest.path}")
    return EXIT_OK


_HANDLERS = {
    "ingest": cmd_ingest,
    "estimate": cmd_estimate,
    "fit-zero": cmd_fit_zero,
    "coex": cmd_coex,
    "diffexp": cmd_diffexp,
    "gdi": cmd_gdi,
    "simulate": cmd_simulate,
    "plot-data": cmd_plot_data,
    "validate": cmd_validate,
    "pipeline": cmd_pipeline,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _HANDLERS[args.command](args)
    except StageError as exc:
        print(exc, file=sys.stderr)
        if isinstance(exc.cause, (MatrixFormatError, ConfigError, OSError)):
            return EXIT_INPUT
        return EXIT_NUMERIC
    except (MatrixFormatError, ConfigError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (ValueError, ArithmeticError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
