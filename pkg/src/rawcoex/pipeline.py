"""Batch pipeline: ingest -> estimate -> fit-zero -> coex, with caching.

Artifacts are flat files under an output directory plus a JSON manifest
recording input and output hashes; a stage is skipped when its recorded
input hashes match the current ones and its outputs are intact.  All
configuration lives in a plain-text ``key = value`` file, every key
overridable by a CLI flag; unknown keys are rejected.
"""

from __future__ import annotations

import hashlib
import json
import struct
import warnings
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .coexpression import pairwise_coex
from .estimation import (
    EstimatorKind,
    ModelParams,
    estimate_average,
    estimate_sqrt,
)
from .matrix import CountMatrix, filter_genes, load_counts, write_matrix_market
from .zeromodel import DispersionFit, RhoMatrix, chance_of_expression, fit_dispersion

__all__ = [
    "PipelineConfig",
    "ConfigError",
    "StageError",
    "parse_config_file",
    "run_pipeline",
    "write_estimates",
    "read_estimates",
    "write_zerofit",
    "write_rho",
    "read_rho",
    "write_coex_csv",
    "write_coex_binary",
    "read_coex_binary",
    "COEX_CSV_HEADER",
]

RHO_MAGIC = b"RHOMTX01"
COEX_MAGIC = b"COEXPR01"
COEX_CSV_HEADER = "g1,g2,O11,O10,O01,O00,e11,e10,e01,e00,W,R,p"
_COEX_DTYPE = np.dtype(
    [
        ("g1", "<u4"), ("g2", "<u4"),
        ("o11", "<i8"), ("o10", "<i8"), ("o01", "<i8"), ("o00", "<i8"),
        ("e11", "<f8"), ("e10", "<f8"), ("e01", "<f8"), ("e00", "<f8"),
        ("w", "<f8"), ("r", "<f8"), ("p", "<f8"),
    ]
)


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    """Stage-tagged failure; the message leads with '<stage>-error'."""

    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        super().__init__(f"{stage}-error: {cause}")


@dataclass(frozen=True)
class PipelineConfig:
    matrix: str = ""
    out_dir: str = "rawcoex-out"
    estimator: str = "average"
    alpha: float = 1e-3
    gdi_quantile: float = 1e-4
    tile: int = 256
    threads: int = 1
    seed: int = 0
    min_total: int = 1
    format: str = ""  # matrix format override: mtx | tsv | "" (by extension)

    def __post_init__(self):
        if self.estimator not in ("average", "sqrt"):
            raise ConfigError(f"estimator must be 'average' or 'sqrt', got {self.estimator!r}")
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError("alpha must be in (0, 1)")
        if not 0.0 < self.gdi_quantile < 1.0:
            raise ConfigError("gdi_quantile must be in (0, 1)")
        if self.tile < 1:
            raise ConfigError("tile must be >= 1")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        if self.min_total < 1:
            raise ConfigError("min_total must be >= 1")
        if self.format not in ("", "mtx", "tsv"):
            raise ConfigError(f"format must be 'mtx' or 'tsv', got {self.format!r}")


_CONFIG_TYPES = {f.name: f.type for f in fields(PipelineConfig)}


def parse_config_file(path) -> PipelineConfig:
    """Parse ``key = value`` lines; '#' starts a comment; unknown keys fail."""
    values = {}
    text = Path(path).read_text(encoding="utf-8")
    for i, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {i}: expected 'key = value'")
        key, _, raw = line.partition("=")
        key = key.strip().replace("-", "_")
        raw = raw.strip()
        if key not in _CONFIG_TYPES:
            raise ConfigError(f"line {i}: unknown key {key!r}")
        values[key] = _coerce(key, raw, i)
    return PipelineConfig(**values)


def _coerce(key, raw, line):
    kind = _CONFIG_TYPES[key]
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"line {line}: bad value for {key}: {raw!r}") from None


def apply_overrides(config: PipelineConfig, overrides: dict) -> PipelineConfig:
    overrides = {k: v for k, v in overrides.items() if v is not None}
    return replace(config, **overrides) if overrides else config


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with path.open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class Manifest:
    path: Path
    stages: dict = field(default_factory=dict)

    @classmethod
    def load_or_new(cls, path: Path) -> "Manifest":
        if path.exists():
            try:
                return cls(path=path, stages=json.loads(path.read_text())["stages"])
            except (json.JSONDecodeError, KeyError):
                pass
        return cls(path=path)

    def save(self):
        self.path.write_text(json.dumps({"stages": self.stages}, indent=2) + "\n")

    def stage_cached(self, stage: str, inputs: dict) -> bool:
        rec = self.stages.get(stage)
        if not rec or rec.get("inputs") != inputs:
            return False
        for art in rec.get("artifacts", {}).values():
            p = Path(art["path"])
            if not p.exists() or _sha256(p) != art["sha256"]:
                return False
        return True

    def record(self, stage: str, inputs: dict, artifacts: dict, status: str):
        self.stages[stage] = {
            "status": status,
            "inputs": inputs,
            "artifacts": {
                name: {"path": str(p), "sha256": _sha256(Path(p))}
                for name, p in artifacts.items()
            },
        }

    def artifact_paths(self) -> dict:
        out = {}
        for rec in self.stages.values():
            for name, art in rec.get("artifacts", {}).items():
                out[name] = art["path"]
        return out


# ---------------------------------------------------------------------------
# artifact writers / readers

def write_estimates(params: ModelParams, gene_ids, cell_ids, genes_path, cells_path):
    with Path(genes_path).open("w", encoding="utf-8") as fh:
        fh.write("id,value,flag\n")
        for gid, value, flag in zip(gene_ids, params.lam, params.lam_clamped):
            fh.write(f"{gid},{float(value)!r},{int(flag)}\n")
    with Path(cells_path).open("w", encoding="utf-8") as fh:
        fh.write("id,value,flag\n")
        for cid, value in zip(cell_ids, params.nu):
            fh.write(f"{cid},{float(value)!r},0\n")


def read_estimates(genes_path, cells_path, kind: str) -> ModelParams:
    def read(path):
        ids, vals, flags = [], [], []
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        for line in lines[1:]:
            i, v, f = line.split(",")
            ids.append(i)
            vals.append(float(v))
            flags.append(bool(int(f)))
        return ids, np.array(vals), np.array(flags, dtype=bool)

    _, lam, clamped = read(genes_path)
    _, nu, _ = read(cells_path)
    return ModelParams(nu=nu, lam=lam, kind=EstimatorKind(kind), lam_clamped=clamped)


def write_zerofit(fit: DispersionFit, gene_ids, path):
    with Path(path).open("w", encoding="utf-8") as fh:
        fh.write("id,a,residual,negative\n")
        for gid, a, res, neg in zip(gene_ids, fit.a, fit.residual, fit.negative):
            fh.write(f"{gid},{float(a)!r},{float(res)!r},{int(neg)}\n")


def write_rho(rho: RhoMatrix, path):
    """Row-major float64 dump behind a 16-byte header (magic, n, m)."""
    n, m = rho.rho.shape
    with Path(path).open("wb") as fh:
        fh.write(RHO_MAGIC)
        fh.write(struct.pack("<II", n, m))
        fh.write(np.ascontiguousarray(rho.rho).tobytes())


def read_rho(path, mu_source: str = "average") -> RhoMatrix:
    raw = Path(path).read_bytes()
    if raw[:8] != RHO_MAGIC:
        raise ValueError(f"{path}: not a rho matrix file")
    n, m = struct.unpack("<II", raw[8:16])
    data = np.frombuffer(raw, dtype="<f8", offset=16)
    if data.size != n * m:
        raise ValueError(f"{path}: truncated rho matrix")
    rho = data.reshape(n, m).copy()
    fitted = rho.sum(axis=1) > 0.0
    return RhoMatrix(rho=rho, fitted=fitted, mu_source=EstimatorKind(mu_source))


def _sorted_blocks(blocks):
    """Concatenate engine blocks and sort by (g1, g2) for stable output."""
    cols = {
        name: np.concatenate([getattr(b, name) for b in blocks])
        for name in ("g1", "g2", "o11", "o10", "o01", "o00",
                     "e11", "e10", "e01", "e00", "w", "r", "p")
    }
    order = np.lexsort((cols["g2"], cols["g1"]))
    return {k: v[order] for k, v in cols.items()}


def write_coex_csv(blocks, gene_ids, path):
    cols = _sorted_blocks(list(blocks))
    n = cols["g1"].size
    with Path(path).open("w", encoding="utf-8") as fh:
        fh.write(COEX_CSV_HEADER + "\n")
        chunk = []
        for i in range(n):
            chunk.append(
                f"{gene_ids[cols['g1'][i]]},{gene_ids[cols['g2'][i]]},"
                f"{cols['o11'][i]},{cols['o10'][i]},{cols['o01'][i]},{cols['o00'][i]},"
                f"{cols['e11'][i]:.10g},{cols['e10'][i]:.10g},"
                f"{cols['e01'][i]:.10g},{cols['e00'][i]:.10g},"
                f"{cols['w'][i]:.10g},{cols['r'][i]:.10g},{cols['p'][i]:.10g}\n"
            )
            if len(chunk) == 65536:
                fh.write("".join(chunk))
                chunk = []
        fh.write("".join(chunk))
    return n


def write_coex_binary(blocks, path):
    """Streamed binary pair records; the count is patched in at close."""
    n_total = 0
    with Path(path).open("wb") as fh:
        fh.write(COEX_MAGIC)
        fh.write(struct.pack("<Q", 0))
        for b in blocks:
            rec = np.empty(b.n_pairs, dtype=_COEX_DTYPE)
            rec["g1"], rec["g2"] = b.g1, b.g2
            rec["o11"], rec["o10"], rec["o01"], rec["o00"] = b.o11, b.o10, b.o01, b.o00
            rec["e11"], rec["e10"], rec["e01"], rec["e00"] = b.e11, b.e10, b.e01, b.e00
            rec["w"], rec["r"], rec["p"] = b.w, b.r, b.p
            fh.write(rec.tobytes())
            n_total += b.n_pairs
        fh.seek(len(COEX_MAGIC))
        fh.write(struct.pack("<Q", n_total))
    return n_total


COEX_MATRIX_MAGIC = b"COEXMAT1"
_FULL_MATRIX_WARN_GENES = 4000


def tee_index_matrix(blocks, n_genes: int, out: np.ndarray):
    """Pass blocks through while filling the symmetric index matrix."""
    for b in blocks:
        out[b.g1, b.g2] = b.r
        out[b.g2, b.g1] = b.r
        yield b


def write_coex_matrix(matrix: np.ndarray, gene_ids, path, fmt: str = "binary"):
    """Dense symmetric co-expression index matrix (diagonal is zero).

    The pairwise stream is the primary output; this O(n^2) export exists
    for tools that want the full matrix and warns at large gene counts.
    """
    n = matrix.shape[0]
    if n > _FULL_MATRIX_WARN_GENES:
        warnings.warn(
            f"full-matrix export holds {n}x{n} values; prefer the pair stream",
            stacklevel=2,
        )
    path = Path(path)
    if fmt == "csv":
        with path.open("w", encoding="utf-8") as fh:
            fh.write("id," + ",".join(gene_ids) + "\n")
            for g in range(n):
                fh.write(gene_ids[g] + "," + ",".join(f"{v:.10g}" for v in matrix[g]) + "\n")
    else:
        with path.open("wb") as fh:
            fh.write(COEX_MATRIX_MAGIC)
            fh.write(struct.pack("<II", n, n))
            fh.write(np.ascontiguousarray(matrix).tobytes())


def read_coex_binary(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:8] != COEX_MAGIC:
        raise ValueError(f"{path}: not a pair-results file")
    (n,) = struct.unpack("<Q", raw[8:16])
    rec = np.frombuffer(raw, dtype=_COEX_DTYPE, offset=16)
    if rec.size != n:
        raise ValueError(f"{path}: truncated pair-results file (marked incomplete?)")
    return rec


def read_coex_pvalues(path) -> np.ndarray:
    """p column from a pair-results file, CSV or binary by magic."""
    path = Path(path)
    with path.open("rb") as fh:
        magic = fh.read(8)
    if magic == COEX_MAGIC:
        return read_coex_binary(path)["p"].astype(np.float64)
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != COEX_CSV_HEADER:
        raise ValueError(f"{path}: not a pair-results CSV")
    return np.array([float(line.rsplit(",", 1)[1]) for line in lines[1:]])


# ---------------------------------------------------------------------------
# the pipeline itself

def _estimator(config: PipelineConfig):
    return estimate_average if config.estimator == "average" else estimate_sqrt


def run_pipeline(config: PipelineConfig) -> Manifest:
    """Run every stage, skipping those whose inputs are unchanged."""
    if not config.matrix:
        raise StageError("ingest", FileNotFoundError("no input matrix configured"))
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = Manifest.load_or_new(out / "manifest.json")

    matrix_in = Path(config.matrix)
    paths = {
        "matrix": out / "matrix.mtx",
        "genes": out / "genes.csv",
        "cells": out / "cells.csv",
        "zerofit": out / "zerofit.csv",
        "rho": out / "rho.bin",
        "coex": out / "coex.csv",
    }

    # ingest ---------------------------------------------------------------
    stage = "ingest"
    try:
        src_hash = _sha256(matrix_in)
    except OSError as exc:
        raise StageError(stage, exc) from exc
    inputs = {"matrix": src_hash, "min_total": config.min_total, "format": config.format}
    if manifest.stage_cached(stage, inputs):
        manifest.stages[stage]["status"] = "cached"
    else:
        try:
            mat = load_counts(matrix_in, config.format or None)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                mat, _ = filter_genes(mat, config.min_total)
            write_matrix_market(mat, paths["matrix"])
        except Exception as exc:
            raise StageError(stage, exc) from exc
        manifest.record(stage, inputs, {"matrix": paths["matrix"]}, "built")
    manifest.save()

    # estimate ---------------------------------------------------------------
    stage = "estimate"
    inputs = {"matrix": _sha256(paths["matrix"]), "estimator": config.estimator}
    mat = None
    if manifest.stage_cached(stage, inputs):
        manifest.stages[stage]["status"] = "cached"
    else:
        try:
            mat = load_counts(paths["matrix"], "mtx")
            params = _estimator(config)(mat)
            write_estimates(params, mat.gene_ids, mat.cell_ids, paths["genes"], paths["cells"])
        except Exception as exc:
            raise StageError(stage, exc) from exc
        manifest.record(
            stage, inputs, {"genes": paths["genes"], "cells": paths["cells"]}, "built"
        )
    manifest.save()

    # fit-zero ---------------------------------------------------------------
    stage = "fit-zero"
    inputs = {
        "genes": _sha256(paths["genes"]),
        "cells": _sha256(paths["cells"]),
        "matrix": _sha256(paths["matrix"]),
    }
    if manifest.stage_cached(stage, inputs):
        manifest.stages[stage]["status"] = "cached"
    else:
        try:
            if mat is None:
                mat = load_counts(paths["matrix"], "mtx")
            params = read_estimates(paths["genes"], paths["cells"], config.estimator)
            fit = fit_dispersion(mat, params)
            rho = chance_of_expression(params, fit)
            write_zerofit(fit, mat.gene_ids, paths["zerofit"])
            write_rho(rho, paths["rho"])
        except Exception as exc:
            raise StageError(stage, exc) from exc
        manifest.record(
            stage, inputs, {"zerofit": paths["zerofit"], "rho": paths["rho"]}, "built"
        )
    manifest.save()

    # coex ---------------------------------------------------------------
    stage = "coex"
    inputs = {
        "rho": _sha256(paths["rho"]),
        "matrix": _sha256(paths["matrix"]),
        "tile": config.tile,
        "threads": config.threads,
    }
    if manifest.stage_cached(stage, inputs):
        manifest.stages[stage]["status"] = "cached"
    else:
        try:
            if mat is None:
                mat = load_counts(paths["matrix"], "mtx")
            rho = read_rho(paths["rho"], config.estimator)
            unfitted = ~rho.fitted
            if unfitted.any():
                warnings.warn(
                    f"{int(unfitted.sum())} genes have no dispersion fit; "
                    "their pairwise results are unreliable"
                )
            blocks = pairwise_coex(mat, rho, tile=config.tile, threads=config.threads)
            write_coex_csv(blocks, mat.gene_ids, paths["coex"])
        except Exception as exc:
            raise StageError(stage, exc) from exc
        manifest.record(stage, inputs, {"coex": paths["coex"]}, "built")
    manifest.save()
    return manifest
