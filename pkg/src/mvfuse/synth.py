"""Synthetic multi-view cohort with planted genetic and latent structure.

Latent factors drive the non-genetic views through a fixed random
one-hidden-layer map, each view seeing its own (overlapping) block of
factors. The phenotype mixes all factors, a handful of causal SNPs and
noise, then is mapped to a positive, load-like range.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .dataset import MultiViewDataset
from .genetics import GenotypeMatrix

COVARIATE_NAMES = ("age", "height", "weight")


@dataclass
class SynthSpec:
    n: int = 1000
    view_dims: dict = field(default_factory=lambda: {"dxa": 205, "clinical": 102})
    # fraction of the factors each view observes, in factor order; blocks overlap
    view_coverage: dict = field(default_factory=lambda: {"dxa": (0.0, 0.75), "clinical": (0.5, 1.0)})
    n_factors: int = 8
    n_snps: int = 2000
    n_causal: int = 20
    view_hidden: int = 32
    view_noise: float = 0.3
    factor_share: float = 0.75
    snp_share: float = 0.15
    pheno_noise_share: float = 0.10
    missing_view_rate: float = 0.0
    pheno_mean: float = 4300.0
    pheno_sd: float = 570.0

    def __post_init__(self):
        if self.n < 4 or self.n_factors < 1 or self.n_snps < 1:
            raise ValueError("n >= 4, n_factors >= 1 and n_snps >= 1 required")
        if not 0 <= self.n_causal <= self.n_snps:
            raise ValueError("n_causal must be between 0 and n_snps")
        if set(self.view_dims) != set(self.view_coverage):
            raise ValueError("view_dims and view_coverage must name the same views")
        if min(self.factor_share, self.snp_share, self.pheno_noise_share, self.view_noise) < 0:
            raise ValueError("shares and noise levels must be non-negative")
        if self.factor_share + self.snp_share + self.pheno_noise_share <= 0:
            raise ValueError("phenotype has no variance")
        self.view_coverage = {k: tuple(v) for k, v in self.view_coverage.items()}

    def factor_block(self, view) -> list:
        lo, hi = self.view_coverage[view]
        a = int(round(lo * self.n_factors))
        b = max(int(round(hi * self.n_factors)), a + 1)
        return list(range(a, min(b, self.n_factors)))


@dataclass
class SynthCohort:
    dataset: MultiViewDataset
    genotypes: GenotypeMatrix
    covariates: np.ndarray
    truth: dict


def synth_generate(spec: SynthSpec = SynthSpec(), seed=0) -> SynthCohort:
    root = np.random.SeedSequence(seed)
    r_fac, r_view, r_geno, r_pheno, r_cov, r_miss = (np.random.default_rng(s) for s in root.spawn(6))
    n, k = spec.n, spec.n_factors
    f = r_fac.standard_normal((n, k))

    views, blocks = {}, {}
    for name, d in spec.view_dims.items():
        block = spec.factor_block(name)
        a = r_view.normal(scale=1.0 / np.sqrt(len(block)), size=(len(block), spec.view_hidden))
        c = r_view.normal(scale=0.1, size=spec.view_hidden)
        b = r_view.normal(scale=1.0 / np.sqrt(spec.view_hidden), size=(spec.view_hidden, d))
        signal = np.tanh(f[:, block] @ a * 1.5 + c) @ b
        signal /= signal.std(axis=0, keepdims=True)
        views[name] = signal + spec.view_noise * r_view.standard_normal((n, d))
        blocks[name] = block

    maf = r_geno.uniform(0.05, 0.5, size=spec.n_snps)
    geno = r_geno.binomial(2, maf, size=(n, spec.n_snps)).astype(np.float64)
    causal = np.sort(r_geno.choice(spec.n_snps, size=spec.n_causal, replace=False))
    snp_ids = [f"snp{j + 1:05d}" for j in range(spec.n_snps)]
    chrom = [str(1 + j * 22 // spec.n_snps) for j in range(spec.n_snps)]
    pos = [1000 + 5000 * j for j in range(spec.n_snps)]
    subject_ids = [f"S{i + 1:05d}" for i in range(n)]

    w_f = r_pheno.normal(size=k)
    w_f /= np.linalg.norm(w_f)
    factor_part = f @ w_f
    if spec.n_causal:
        std_g = (geno[:, causal] - 2 * maf[causal]) / np.sqrt(2 * maf[causal] * (1 - maf[causal]))
        w_g = r_pheno.normal(size=spec.n_causal)
        w_g /= np.linalg.norm(w_g)
        snp_part = std_g @ w_g
    else:
        w_g = np.zeros(0)
        snp_part = np.zeros(n)
    noise = r_pheno.standard_normal(n)
    raw = (np.sqrt(spec.factor_share) * factor_part
           + np.sqrt(spec.snp_share) * snp_part
           + np.sqrt(spec.pheno_noise_share) * noise)
    total_share = spec.factor_share + spec.snp_share + spec.pheno_noise_share
    phenotype = spec.pheno_mean + spec.pheno_sd * raw / np.sqrt(total_share)

    covariates = np.column_stack([
        r_cov.uniform(20, 75, n),
        r_cov.normal(175, 7.7, n),
        r_cov.normal(84, 17, n),
    ])

    presence = np.ones((n, len(views)), dtype=bool)
    if spec.missing_view_rate > 0:
        drop = r_miss.uniform(size=presence.shape) < spec.missing_view_rate
        # every subject keeps at least one view
        drop[drop.all(axis=1), 0] = False
        presence &= ~drop
        for m, name in enumerate(views):
            views[name][~presence[:, m]] = np.nan

    # variance share of the phenotype explained by each view's factors
    informativeness = {
        name: float(spec.factor_share * np.sum(w_f[b] ** 2) / total_share) for name, b in blocks.items()
    }
    informativeness["wgs"] = float(spec.snp_share / total_share)
    truth = {
        "seed": seed,
        "spec": {**asdict(spec), "view_coverage": {k: list(v) for k, v in spec.view_coverage.items()}},
        "causal_snps": [snp_ids[j] for j in causal],
        "causal_effects": w_g.tolist(),
        "snp_maf": {snp_ids[j]: float(maf[j]) for j in causal},
        "factor_weights": w_f.tolist(),
        "view_factors": blocks,
        "view_informativeness": informativeness,
    }
    ds = MultiViewDataset(views, presence, phenotype, subject_ids)
    G = GenotypeMatrix(geno, snp_ids, chrom, pos, subject_ids)
    return SynthCohort(ds, G, covariates, truth)
