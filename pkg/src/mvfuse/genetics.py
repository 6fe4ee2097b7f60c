"""Genotype QC, stratification PCA and the covariate-adjusted score test.

Genotypes are additive minor-allele counts (0/1/2) with NaN for missing
calls. Association per SNP uses residuals of phenotype and genotype
against the same covariate design; the score statistic is
``T = U^2 / V`` with ``U = sum(y~ g~)`` and
``V = (1/N) sum(y~^2) sum(g~^2)``, referred to chi-square(1).
"""

from __future__ import annotations

import csv
import functools
import math
import re
from dataclasses import dataclass, field

import numpy as np


class DegenerateSnpError(ValueError):
    """Raised when a genotype residual is identically zero."""


class RankDeficiencyError(ValueError):
    def __init__(self, columns):
        super().__init__(f"covariate design is rank deficient; dependent columns: {columns}")
        self.columns = columns


@dataclass
class GenotypeMatrix:
    values: np.ndarray
    snp_ids: list
    chrom: list
    pos: list
    subject_ids: list

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        n, s = self.values.shape
        if len(self.snp_ids) != s or len(self.chrom) != s or len(self.pos) != s:
            raise ValueError("SNP metadata length does not match column count")
        if len(self.subject_ids) != n:
            raise ValueError("subject_ids length does not match row count")
        obs = self.values[~np.isnan(self.values)]
        if not np.isin(obs, (0.0, 1.0, 2.0)).all():
            raise ValueError("genotype entries must be 0, 1, 2 or missing")
        self.snp_ids = [str(s) for s in self.snp_ids]
        self.chrom = [str(c) for c in self.chrom]
        self.pos = [int(p) for p in self.pos]
        self.subject_ids = [str(s) for s in self.subject_ids]

    @property
    def shape(self):
        return self.values.shape

    def take(self, rows=None, cols=None) -> "GenotypeMatrix":
        rows = np.arange(self.shape[0]) if rows is None else np.asarray(rows)
        cols = np.arange(self.shape[1]) if cols is None else np.asarray(cols)
        return GenotypeMatrix(
            self.values[np.ix_(rows, cols)],
            [self.snp_ids[j] for j in cols],
            [self.chrom[j] for j in cols],
            [self.pos[j] for j in cols],
            [self.subject_ids[i] for i in rows],
        )


@dataclass
class QcConfig:
    snp_missing_max: float = 0.05
    indiv_missing_max: float = 0.20
    maf_min: float = 0.01
    hwe_p_min: float = 1e-4

    def __post_init__(self):
        for name in ("snp_missing_max", "indiv_missing_max", "maf_min", "hwe_p_min"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")


@dataclass
class QcReport:
    removed_subjects: list = field(default_factory=list)  # (subject_id, reason)
    removed_snps: list = field(default_factory=list)  # (snp_id, reason)
    pca_excluded: list = field(default_factory=list)  # zero-variance SNPs skipped by PCA

    def counts(self) -> dict:
        out = {}
        for _, reason in self.removed_snps:
            out[reason] = out.get(reason, 0) + 1
        return out


@dataclass
class OlsFit:
    coefficients: np.ndarray
    residuals: np.ndarray
    fitted: np.ndarray


@dataclass
class GwasResult:
    snp_id: str
    chrom: str
    pos: int
    U: float
    V: float
    t_score: float
    p_value: float
    beta_hat: float
    degenerate: bool = False


def minor_allele_frequency(column) -> float:
    g = np.asarray(column, dtype=np.float64)
    g = g[~np.isnan(g)]
    if g.size == 0:
        raise ValueError("cannot compute MAF of an all-missing SNP")
    f = g.sum() / (2.0 * g.size)
    return float(min(f, 1.0 - f))


@functools.lru_cache(maxsize=65536)
def _hwe_pvalues(n: int, rare: int) -> np.ndarray:
    """Exact-test p-value for every heterozygote count at fixed allele totals.

    Index ``h`` holds the p-value for ``h`` heterozygotes; entries with the
    wrong parity are NaN. Probabilities come from the ratio recurrence
    between neighbouring heterozygote counts, anchored at the mode.
    """
    common = 2 * n - rare
    probs = np.zeros(rare + 1)
    mid = rare * common // (2 * n)
    if (mid % 2) != (rare % 2):
        mid += 1
    probs[mid] = 1.0
    hom_r = (rare - mid) // 2
    hom_c = n - mid - hom_r
    h = mid
    while h >= 2:
        probs[h - 2] = probs[h] * h * (h - 1) / (4.0 * (hom_r + 1) * (hom_c + 1))
        h -= 2
        hom_r += 1
        hom_c += 1
    hom_r = (rare - mid) // 2
    hom_c = n - mid - hom_r
    h = mid
    while h <= rare - 2:
        probs[h + 2] = probs[h] * 4.0 * hom_r * hom_c / ((h + 2.0) * (h + 1.0))
        h += 2
        hom_r -= 1
        hom_c -= 1
    valid = np.arange(rare + 1) % 2 == rare % 2
    p = probs[valid] / probs[valid].sum()
    order = np.sort(p)
    cum = np.cumsum(order)
    # tolerance absorbs rounding between tables of equal probability
    at = np.searchsorted(order, p * (1.0 + 1e-9), side="right") - 1
    out = np.full(rare + 1, np.nan)
    out[valid] = np.minimum(cum[at], 1.0)
    return out


def hwe_exact_test(n_AA: int, n_Aa: int, n_aa: int) -> float:
    """Two-sided Hardy-Weinberg exact test."""
    n_AA, n_Aa, n_aa = int(n_AA), int(n_Aa), int(n_aa)
    if min(n_AA, n_Aa, n_aa) < 0:
        raise ValueError("genotype counts must be non-negative")
    n = n_AA + n_Aa + n_aa
    if n < 1:
        raise ValueError("need at least one genotyped subject")
    rare = 2 * min(n_AA, n_aa) + n_Aa
    if rare > n:
        rare = 2 * n - rare
    if rare == 0:
        return 1.0
    return float(_hwe_pvalues(n, rare)[n_Aa])


def qc_filter(G: GenotypeMatrix, cfg: QcConfig = QcConfig()):
    """Drop subjects, then SNPs, failing the QC thresholds; mean-impute the rest.

    Returns ``(filtered, report, kept_rows)`` where ``kept_rows`` indexes
    the retained subjects in the input order.
    """
    report = QcReport()
    miss = np.isnan(G.values)
    subj_rate = miss.mean(axis=1)
    keep_rows = np.flatnonzero(subj_rate <= cfg.indiv_missing_max)
    for i in np.flatnonzero(subj_rate > cfg.indiv_missing_max):
        report.removed_subjects.append((G.subject_ids[i], "indiv_missing_rate"))
    if keep_rows.size == 0:
        raise ValueError("QC removed every subject")
    vals = G.values[keep_rows]

    keep_cols = []
    for j in range(vals.shape[1]):
        col = vals[:, j]
        obs = col[~np.isnan(col)]
        if (col.size - obs.size) / col.size > cfg.snp_missing_max or obs.size == 0:
            report.removed_snps.append((G.snp_ids[j], "missing_rate"))
            continue
        if minor_allele_frequency(obs) < cfg.maf_min:
            report.removed_snps.append((G.snp_ids[j], "maf"))
            continue
        counts = [int(np.sum(obs == k)) for k in (0, 1, 2)]
        if hwe_exact_test(*counts) < cfg.hwe_p_min:
            report.removed_snps.append((G.snp_ids[j], "hwe"))
            continue
        keep_cols.append(j)
    if not keep_cols:
        raise ValueError("QC removed every SNP")
    out = G.take(keep_rows, keep_cols)
    vals = out.values
    col_mean = np.nanmean(vals, axis=0)
    holes = np.isnan(vals)
    vals[holes] = np.take(col_mean, np.nonzero(holes)[1])
    return out, report, keep_rows


def genotype_pca(G: GenotypeMatrix, k: int = 10):
    """Top-``k`` PC scores of the column-standardized genotypes.

    Zero-variance SNPs are left out; their ids are returned alongside the
    ``N x k`` score matrix. Each component's largest-magnitude loading is
    made positive.
    """
    x = G.values
    if np.isnan(x).any():
        raise ValueError("PCA needs imputed genotypes (no missing values)")
    sd = x.std(axis=0)
    const = sd == 0
    excluded = [G.snp_ids[j] for j in np.flatnonzero(const)]
    x = x[:, ~const]
    if k > min(x.shape):
        raise ValueError(f"k={k} exceeds min(N, S)={min(x.shape)}")
    x = (x - x.mean(axis=0)) / sd[~const]
    u, s, vt = np.linalg.svd(x, full_matrices=False)
    u, s, vt = u[:, :k], s[:k], vt[:k]
    flip = np.sign(vt[np.arange(k), np.argmax(np.abs(vt), axis=1)])
    return u * s * flip, excluded


def _design(covariates, n):
    if covariates is None:
        return np.ones((n, 1))
    c = np.asarray(covariates, dtype=np.float64).reshape(n, -1)
    return np.column_stack([np.ones(n), c])


def _orthonormal_basis(covariates, n, rtol=1e-10):
    X = _design(covariates, n)
    if n <= X.shape[1]:
        raise ValueError(f"need N > C + 1 (N={n}, C={X.shape[1] - 1})")
    q, r = np.linalg.qr(X)
    diag = np.abs(np.diag(r))
    bad = np.flatnonzero(diag <= rtol * max(diag.max(), 1.0))
    if bad.size:
        # column 0 is the intercept; report covariate indices
        raise RankDeficiencyError([int(j) - 1 for j in bad])
    return X, q, r


def residualize(response, covariates) -> OlsFit:
    """OLS of ``response`` on an intercept plus ``covariates`` via QR."""
    y = np.asarray(response, dtype=np.float64)
    X, q, r = _orthonormal_basis(covariates, y.shape[0])
    qty = q.T @ y
    fitted = q @ qty
    coef = np.linalg.solve(r, qty)
    return OlsFit(coef, y - fitted, fitted)


def residualize_columns(matrix, covariates) -> np.ndarray:
    """Residuals of every column of ``matrix`` against the same design."""
    a = np.asarray(matrix, dtype=np.float64)
    _, q, _ = _orthonormal_basis(covariates, a.shape[0])
    return a - q @ (q.T @ a)


def chi2_1_sf(t: float) -> float:
    p = math.erfc(math.sqrt(max(t, 0.0) / 2.0))
    return max(p, np.finfo(float).tiny)


def score_test(y_resid, g_resid):
    """Returns ``(U, V, t_score, p_value)``."""
    y = np.asarray(y_resid, dtype=np.float64)
    g = np.asarray(g_resid, dtype=np.float64)
    if y.shape != g.shape:
        raise ValueError("residual vectors differ in length")
    n = y.size
    U = float(y @ g)
    V = float((y @ y) * (g @ g) / n)
    if V <= 0.0:
        raise DegenerateSnpError("degenerate_snp")
    T = U * U / V
    return U, V, T, chi2_1_sf(T)


def _chrom_key(c: str):
    c = re.sub(r"^chr", "", c, flags=re.I)
    return (0, int(c), "") if c.isdigit() else (1, 0, c)


def run_gwas(
    G: GenotypeMatrix,
    phenotype,
    covariates=None,
    cfg: QcConfig = QcConfig(),
    threshold: float = 1e-5,
    n_pcs: int = 10,
):
    """QC, PCA covariates, residualization and per-SNP score tests.

    Returns ``(results, selected_ids, report)``; results are ordered by
    (chromosome, position) and ``selected_ids`` keeps that order.
    """
    y = np.asarray(phenotype, dtype=np.float64)
    if y.shape != (G.shape[0],):
        raise ValueError("phenotype length does not match genotype rows")
    filt, report, rows = qc_filter(G, cfg)
    y = y[rows]
    cov = None if covariates is None else np.asarray(covariates, dtype=np.float64).reshape(G.shape[0], -1)[rows]
    k = min(n_pcs, *filt.shape)
    if k > 0:
        pcs, excluded = genotype_pca(filt, k)
        report.pca_excluded.extend(excluded)
        cov = pcs if cov is None else np.column_stack([cov, pcs])
    y_res = residualize_columns(y[:, None], cov)[:, 0]
    g_res = residualize_columns(filt.values, cov)

    results = []
    for j in range(filt.shape[1]):
        g = g_res[:, j]
        try:
            U, V, T, p = score_test(y_res, g)
            beta = U / float(g @ g)
            degenerate = False
        except DegenerateSnpError:
            U, V, T, p, beta, degenerate = 0.0, 0.0, 0.0, 1.0, 0.0, True
        results.append(GwasResult(filt.snp_ids[j], filt.chrom[j], filt.pos[j], U, V, T, p, beta, degenerate))
    results.sort(key=lambda r: (_chrom_key(r.chrom), r.pos, r.snp_id))
    selected = [r.snp_id for r in results if not r.degenerate and r.p_value < threshold]
    return results, selected, report


def zscore(values) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if v.size < 2:
        raise ValueError("z-score needs at least two values")
    sd = v.std(ddof=1)
    if sd == 0:
        raise ValueError("z-score of a constant vector")
    return (v - v.mean()) / sd


GWAS_HEADER = ["snp_id", "chrom", "pos", "U", "V", "t_score", "p_value", "beta_hat", "selected"]


def write_gwas_csv(path, results, selected) -> None:
    chosen = set(selected)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(GWAS_HEADER)
        for r in results:
            w.writerow([
                r.snp_id, r.chrom, r.pos,
                f"{r.U:.10g}", f"{r.V:.10g}", f"{r.t_score:.10g}",
                f"{r.p_value:.5e}", f"{r.beta_hat:.10g}",
                int(r.snp_id in chosen),
            ])


def read_genotype_csv(path, snp_meta_path=None) -> GenotypeMatrix:
    """Load ``subject_id,<snp>...`` with cells ``0|1|2|NA``.

    Chromosome and position come from an optional ``snp_id,chrom,pos``
    sidecar; otherwise ids of the form ``chrom:pos`` are parsed, and
    anything else gets chromosome ``0`` and its column index.
    """
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][0] != "subject_id":
        raise ValueError(f"{path}: header must start with subject_id")
    snp_ids = rows[0][1:]
    subjects, data = [], []
    for line_no, row in enumerate(rows[1:], start=2):
        if len(row) != len(snp_ids) + 1:
            raise ValueError(f"{path}:{line_no}: expected {len(snp_ids) + 1} cells")
        subjects.append(row[0])
        try:
            data.append([np.nan if c == "NA" else float(c) for c in row[1:]])
        except ValueError as exc:
            raise ValueError(f"{path}:{line_no}: {exc}") from None
    meta = {}
    if snp_meta_path is not None:
        with open(snp_meta_path, newline="") as fh:
            for rec in csv.DictReader(fh):
                meta[rec["snp_id"]] = (rec["chrom"], int(rec["pos"]))
    chrom, pos = [], []
    for j, sid in enumerate(snp_ids):
        if sid in meta:
            c, p = meta[sid]
        elif re.fullmatch(r"[^:]+:\d+.*", sid):
            c, rest = sid.split(":", 1)
            p = int(re.match(r"\d+", rest).group())
        else:
            c, p = "0", j
        chrom.append(c)
        pos.append(p)
    values = np.array(data, dtype=np.float64).reshape(len(subjects), len(snp_ids))
    return GenotypeMatrix(values, snp_ids, chrom, pos, subjects)


def write_genotype_csv(path, G: GenotypeMatrix) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject_id", *G.snp_ids])
        for sid, row in zip(G.subject_ids, G.values):
            w.writerow([sid, *("NA" if np.isnan(v) else str(int(v)) for v in row)])


def write_snp_meta(path, G: GenotypeMatrix) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["snp_id", "chrom", "pos"])
        for row in zip(G.snp_ids, G.chrom, G.pos):
            w.writerow(row)
