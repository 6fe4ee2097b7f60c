import math
from fractions import Fraction

import numpy as np
import pytest
from scipy import stats

from mvfuse.genetics import (
    GenotypeMatrix,
    QcConfig,
    RankDeficiencyError,
    DegenerateSnpError,
    chi2_1_sf,
    genotype_pca,
    hwe_exact_test,
    minor_allele_frequency,
    qc_filter,
    read_genotype_csv,
    residualize,
    residualize_columns,
    run_gwas,
    score_test,
    write_genotype_csv,
    write_gwas_csv,
    write_snp_meta,
    zscore,
)


def make_matrix(values, prefix="rs"):
    values = np.asarray(values, dtype=float)
    n, s = values.shape
    return GenotypeMatrix(values, [f"{prefix}{j}" for j in range(s)], ["1"] * s,
                          list(range(100, 100 * (s + 1), 100)), [f"s{i}" for i in range(n)])


def hwe_oracle(n_AA, n_Aa, n_aa):
    """Exact rational enumeration of all tables with the same allele counts."""
    n_AA, n_Aa, n_aa = int(n_AA), int(n_Aa), int(n_aa)
    n = n_AA + n_Aa + n_aa
    n_a = 2 * n_aa + n_Aa
    n_A = 2 * n - n_a

    def prob(het):
        hom_a = (n_a - het) // 2
        hom_A = n - het - hom_a
        return Fraction(math.factorial(n) * 2**het * math.factorial(n_A) * math.factorial(n_a),
                        math.factorial(hom_A) * math.factorial(het) * math.factorial(hom_a)
                        * math.factorial(2 * n))

    tables = [h for h in range(n_a % 2, min(n_a, n_A) + 1, 2)]
    p_obs = prob(n_Aa)
    return float(sum(p for p in map(prob, tables) if p <= p_obs))


def test_maf_examples():
    assert minor_allele_frequency([0, 1, 2, 2]) == pytest.approx(3 / 8)
    assert minor_allele_frequency([2, 2, 2, 1]) == pytest.approx(1 / 8)
    assert minor_allele_frequency([0, np.nan, 1]) == pytest.approx(0.25)
    with pytest.raises(ValueError):
        minor_allele_frequency([np.nan])


def test_hwe_monomorphic_and_known_values():
    assert hwe_exact_test(100, 0, 0) == 1.0
    assert hwe_exact_test(0, 0, 37) == 1.0
    assert hwe_exact_test(57, 14, 50) < 1e-4
    assert hwe_exact_test(25, 50, 25) == pytest.approx(hwe_oracle(25, 50, 25), rel=1e-12)
    with pytest.raises(ValueError):
        hwe_exact_test(-1, 2, 3)


def test_hwe_matches_exact_enumeration():
    rng = np.random.default_rng(0)
    for _ in range(200):
        counts = rng.multinomial(int(rng.integers(1, 80)), rng.dirichlet([1, 1, 1]))
        assert hwe_exact_test(*counts) == pytest.approx(hwe_oracle(*counts), rel=1e-9, abs=1e-300)
        # homozygote labels are interchangeable
        assert hwe_exact_test(*counts) == hwe_exact_test(counts[2], counts[1], counts[0])


def test_qc_filter_reasons_and_order():
    rng = np.random.default_rng(1)
    n = 200
    g = rng.binomial(2, 0.4, size=(n, 20)).astype(float)
    g[:20, 0] = np.nan  # 10% missing
    g[:, 1] = 0.0
    g[0, 1] = 1.0  # MAF 0.0025
    g[:, 2] = 1.0  # all heterozygous
    g[:15, 3] = np.nan  # also heterozygous-free, but missingness wins
    g[:, 3] = np.where(np.isnan(g[:, 3]), np.nan, 1.0)
    G = make_matrix(g)
    G.values[5, :] = np.nan  # one subject missing everything
    out, report, rows = qc_filter(G)
    assert report.removed_subjects == [("s5", "indiv_missing_rate")]
    assert dict(report.removed_snps) == {"rs0": "missing_rate", "rs1": "maf", "rs2": "hwe", "rs3": "missing_rate"}
    assert out.snp_ids == [f"rs{j}" for j in range(4, 20)]
    assert 5 not in rows and rows.size == n - 1
    assert not np.isnan(out.values).any()
    assert report.counts() == {"missing_rate": 2, "maf": 1, "hwe": 1}


def test_qc_mean_imputation():
    rng = np.random.default_rng(12)
    g = rng.binomial(2, 0.4, size=(100, 10)).astype(float)
    g[[3, 40, 77], 0] = np.nan
    out, _, rows = qc_filter(make_matrix(g), QcConfig(hwe_p_min=0.0))
    assert rows.size == 100
    np.testing.assert_array_equal(out.values[[3, 40, 77], 0], np.nanmean(g[:, 0]))
    np.testing.assert_array_equal(np.delete(out.values, [3, 40, 77], axis=0), np.delete(g, [3, 40, 77], axis=0))


def test_qc_thresholds_validated():
    with pytest.raises(ValueError):
        QcConfig(maf_min=1.5)


def test_pca_two_populations():
    rng = np.random.default_rng(2)
    pa, pb = rng.uniform(0.1, 0.9, 150), rng.uniform(0.1, 0.9, 150)
    g = np.vstack([rng.binomial(2, pa, size=(60, 150)), rng.binomial(2, pb, size=(60, 150))]).astype(float)
    g[:, 7] = 1.0
    scores, excluded = genotype_pca(make_matrix(g), 3)
    assert excluded == ["rs7"]
    pop = np.r_[np.zeros(60), np.ones(60)]
    assert abs(np.corrcoef(scores[:, 0], pop)[0, 1]) > 0.95
    gram = scores.T @ scores
    np.testing.assert_allclose(gram - np.diag(np.diag(gram)), 0, atol=1e-8)
    var = np.diag(gram)
    assert var[0] >= var[1] >= var[2]
    again, _ = genotype_pca(make_matrix(g), 3)
    np.testing.assert_array_equal(scores, again)


def test_pca_rejects_missing():
    with pytest.raises(ValueError):
        genotype_pca(make_matrix([[0, 1], [np.nan, 2], [1, 1]]), 1)


def test_residualize_matches_normal_equations():
    rng = np.random.default_rng(3)
    c = rng.normal(size=(50, 3))
    y = rng.normal(size=50)
    fit = residualize(y, c)
    X = np.column_stack([np.ones(50), c])
    beta = np.linalg.solve(X.T @ X, X.T @ y)
    np.testing.assert_allclose(fit.coefficients, beta, rtol=1e-10)
    np.testing.assert_allclose(fit.residuals, y - X @ beta, atol=1e-12)
    assert np.all(np.abs(X.T @ fit.residuals) < 1e-10)
    np.testing.assert_allclose(residualize_columns(y[:, None], c)[:, 0], fit.residuals, atol=1e-12)


def test_residualize_rank_deficiency():
    rng = np.random.default_rng(4)
    c = rng.normal(size=(30, 2))
    with pytest.raises(RankDeficiencyError) as exc:
        residualize(rng.normal(size=30), np.column_stack([c, c[:, 0] * 2]))
    assert exc.value.columns == [2]
    with pytest.raises(ValueError):
        residualize(np.ones(3), np.ones((3, 2)))


def test_score_test_edge_cases():
    with pytest.raises(DegenerateSnpError):
        score_test(np.ones(4), np.zeros(4))
    U, V, T, p = score_test([1.0, -1.0, 0.0, 0.0], [0.0, 0.0, 1.0, -1.0])
    assert U == 0 and p == 1.0
    rng = np.random.default_rng(5)
    y = rng.normal(size=40)
    y -= y.mean()
    assert score_test(y, y)[2] == pytest.approx(40, rel=1e-12)
    g = rng.normal(size=40)
    base = score_test(y, g)[2]
    assert score_test(3.5 * y, -0.2 * g)[2] == pytest.approx(base, rel=1e-12)


def test_chi2_sf_matches_scipy():
    for t in (0.0, 0.5, 3.84, 20.0, 300.0):
        assert chi2_1_sf(t) == pytest.approx(stats.chi2.sf(t, 1), rel=1e-10)
    assert chi2_1_sf(1e5) > 0


def test_score_agrees_with_wald_at_large_n():
    rng = np.random.default_rng(6)
    n = 5000
    g = rng.binomial(2, 0.3, n).astype(float)
    y = 0.05 * g + rng.normal(size=n)
    yr = y - y.mean()
    gr = g - g.mean()
    T = score_test(yr, gr)[2]
    beta = (gr @ yr) / (gr @ gr)
    sigma2 = np.sum((yr - beta * gr) ** 2) / (n - 2)
    wald = beta**2 / (sigma2 / (gr @ gr))
    assert T == pytest.approx(wald, rel=0.01)


def test_score_null_calibration():
    rng = np.random.default_rng(7)
    n = 300
    c = rng.normal(size=(n, 2))
    g_all = rng.binomial(2, 0.3, size=(n, 2000)).astype(float)
    y = rng.normal(size=n)
    yr = residualize(y, c).residuals
    gr = residualize_columns(g_all, c)
    ps = [score_test(yr, gr[:, j])[3] for j in range(gr.shape[1])]
    assert stats.kstest(ps, "uniform").pvalue > 0.01


def synth_gwas_data(n, share, seed, n_snps=60):
    rng = np.random.default_rng(seed)
    g = rng.binomial(2, 0.3, size=(n, n_snps)).astype(float)
    sd = g[:, 10].std()
    beta = math.sqrt(share) / sd
    y = beta * (g[:, 10] - g[:, 10].mean()) + math.sqrt(1 - share) * rng.normal(size=n)
    cov = rng.normal(size=(n, 2))
    return make_matrix(g), y, cov


def test_run_gwas_detects_planted_snp():
    G, y, cov = synth_gwas_data(800, 0.15, 8)
    results, selected, report = run_gwas(G, y, cov, n_pcs=3)
    assert "rs10" in selected
    assert [r.pos for r in results] == sorted(r.pos for r in results)
    hit = next(r for r in results if r.snp_id == "rs10")
    assert hit.p_value < 1e-5 and hit.beta_hat > 0


def test_run_gwas_permuted_phenotype_selects_nothing():
    G, y, cov = synth_gwas_data(800, 0.15, 9)
    y = np.random.default_rng(0).permutation(y)
    _, selected, _ = run_gwas(G, y, cov, n_pcs=3)
    assert selected == []


def test_run_gwas_orders_by_chromosome():
    rng = np.random.default_rng(10)
    g = rng.binomial(2, 0.4, size=(100, 4)).astype(float)
    G = GenotypeMatrix(g, ["a", "b", "c", "d"], ["10", "2", "2", "X"], [5, 300, 100, 1], [f"s{i}" for i in range(100)])
    results, _, _ = run_gwas(G, rng.normal(size=100), n_pcs=0)
    assert [r.snp_id for r in results] == ["c", "b", "a", "d"]


def test_zscore():
    z = zscore([1.0, 2.0, 3.0])
    np.testing.assert_allclose(z, [-1.0, 0.0, 1.0])
    with pytest.raises(ValueError):
        zscore([2.0, 2.0])


def test_gwas_csv_format(tmp_path):
    G, y, cov = synth_gwas_data(200, 0.3, 11, n_snps=12)
    results, selected, _ = run_gwas(G, y, cov, n_pcs=2)
    path = tmp_path / "g.csv"
    write_gwas_csv(path, results, selected)
    lines = path.read_text().splitlines()
    assert lines[0] == "snp_id,chrom,pos,U,V,t_score,p_value,beta_hat,selected"
    assert len(lines) == 13
    p_cell = lines[1].split(",")[6]
    assert "e" in p_cell and len(p_cell.split("e")[0].split(".")[1]) == 5


def test_genotype_csv_roundtrip(tmp_path):
    g = np.array([[0, 1, np.nan], [2, 2, 1]])
    G = GenotypeMatrix(g, ["x1", "x2", "x3"], ["3", "3", "7"], [10, 20, 5], ["a", "b"])
    write_genotype_csv(tmp_path / "g.csv", G)
    write_snp_meta(tmp_path / "m.csv", G)
    back = read_genotype_csv(tmp_path / "g.csv", tmp_path / "m.csv")
    np.testing.assert_array_equal(back.values, g)
    assert back.chrom == G.chrom and back.pos == G.pos and back.subject_ids == ["a", "b"]
    bare = read_genotype_csv(tmp_path / "g.csv")
    assert bare.chrom == ["0", "0", "0"]
    (tmp_path / "bad.csv").write_text("subject_id,x\na,3\n")
    with pytest.raises(ValueError):
        read_genotype_csv(tmp_path / "bad.csv")
