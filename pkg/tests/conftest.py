import pytest

from mvfuse.synth import SynthSpec, synth_generate


@pytest.fixture(scope="session")
def small_spec():
    return SynthSpec(
        n=300,
        view_dims={"dxa": 24, "clinical": 12},
        view_coverage={"dxa": (0.0, 0.75), "clinical": (0.5, 1.0)},
        n_factors=4,
        n_snps=200,
        n_causal=5,
    )


@pytest.fixture(scope="session")
def small_cohort(small_spec):
    """Three-view synthetic cohort (seed 7): two feature views plus a SNP view."""
    from mvfuse.pipeline import add_genotype_view

    c = synth_generate(small_spec, seed=7)
    return add_genotype_view(c.dataset, c.genotypes, c.genotypes.snp_ids[:30])
