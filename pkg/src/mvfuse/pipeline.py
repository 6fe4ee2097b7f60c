"""Scaling, splitting, the linear head, metrics and the grid search."""

from __future__ import annotations

import itertools
import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .dataset import MultiViewDataset
from .genetics import GenotypeMatrix
from .mvvae import MvvaeConfig, MvvaeModel, TrainConfig, extract_latent, init_model, train

logger = logging.getLogger(__name__)

GRID_LAYERS = (2, 3, 4, 5)
GRID_LATENT = (2, 8, 32)
GRID_HIDDEN = (3, 16, 32, 128)

# callables (purpose, subject_ids) invoked whenever phenotype values are read
PHENOTYPE_ACCESS_HOOKS: list = []


def read_phenotype(ds: MultiViewDataset, purpose: str) -> np.ndarray:
    for hook in PHENOTYPE_ACCESS_HOOKS:
        hook(purpose, list(ds.subject_ids))
    return ds.phenotype


@dataclass
class ScaleParams:
    mode: str  # "minmax" or "zscore"
    loc: np.ndarray  # min or mean
    scale: np.ndarray  # max or std

    def to_dict(self):
        return {"mode": self.mode, "loc": self.loc.tolist(), "scale": self.scale.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(d["mode"], np.asarray(d["loc"], dtype=np.float64), np.asarray(d["scale"], dtype=np.float64))


def minmax_scale(x, params: ScaleParams | None = None):
    """Map features to [0, 1] with training-set extrema.

    Fitting happens only when ``params`` is None; otherwise values are
    clipped into range. Constant features go to 0.5. NaN rows pass through.
    """
    x = np.asarray(x, dtype=np.float64)
    if params is None:
        lo, hi = np.nanmin(x, axis=0), np.nanmax(x, axis=0)
        params = ScaleParams("minmax", lo, hi)
    elif params.mode != "minmax":
        raise ValueError(f"expected minmax parameters, got {params.mode}")
    lo, hi = params.loc, params.scale
    span = hi - lo
    const = span == 0
    out = (x - lo) / np.where(const, 1.0, span)
    out = np.where(const, 0.5, np.clip(out, 0.0, 1.0))
    out[np.isnan(x)] = np.nan
    return out, params


def minmax_inverse(x, params: ScaleParams) -> np.ndarray:
    return params.loc + np.asarray(x) * (params.scale - params.loc)


def zscore_scale(x, params: ScaleParams | None = None):
    x = np.asarray(x, dtype=np.float64)
    if params is None:
        mu, sd = np.nanmean(x, axis=0), np.nanstd(x, axis=0, ddof=1)
        params = ScaleParams("zscore", mu, np.where(sd > 0, sd, 1.0))
    return (x - params.loc) / params.scale, params


def scale_views(ds: MultiViewDataset, params: dict | None = None):
    """Min-max scale every view; fit on ``ds`` only when ``params`` is None."""
    fitted = {} if params is None else params
    views = {}
    for name, x in ds.views.items():
        views[name], fitted[name] = minmax_scale(x, None if params is None else params[name])
    return MultiViewDataset(views, ds.presence, ds.phenotype, ds.subject_ids), fitted


def split_indices(n: int, test_fraction: float = 0.2, seed=0):
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must be in (0, 1)")
    n_test = math.ceil(n * test_fraction)
    if n_test >= n:
        raise ValueError(f"split leaves no training subjects (N={n})")
    perm = np.random.default_rng(seed).permutation(n)
    return np.sort(perm[n_test:]), np.sort(perm[:n_test])


def train_test_split(ds: MultiViewDataset, test_fraction: float = 0.2, seed=0):
    train_idx, test_idx = split_indices(ds.n, test_fraction, seed)
    return ds.subset(train_idx), ds.subset(test_idx)


@dataclass
class LinearHead:
    coef: np.ndarray
    intercept: float

    @property
    def weights(self) -> np.ndarray:
        """Intercept first, then one weight per latent coordinate."""
        return np.concatenate([[self.intercept], self.coef])

    def predict(self, Z) -> np.ndarray:
        return np.asarray(Z, dtype=np.float64) @ self.coef + self.intercept


def fit_linear_head(Z, y) -> LinearHead:
    """Least squares with intercept; minimum-norm when the design is singular."""
    Z = np.asarray(Z, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if Z.ndim != 2 or Z.shape[0] != y.shape[0]:
        raise ValueError("latent matrix and phenotype disagree in length")
    if Z.shape[0] <= Z.shape[1] + 1:
        raise ValueError(f"need N > D + 1 (N={Z.shape[0]}, D={Z.shape[1]})")
    zm, ym = Z.mean(axis=0), y.mean()
    coef = np.linalg.lstsq(Z - zm, y - ym, rcond=None)[0]
    return LinearHead(coef, float(ym - zm @ coef))


@dataclass
class MetricsReport:
    mae: float
    mape: float
    rmse: float
    r2: float

    def to_dict(self):
        return asdict(self)


def compute_metrics(y, y_hat) -> MetricsReport:
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y.shape != y_hat.shape or y.size == 0:
        raise ValueError("y and y_hat must be equal-length and nonempty")
    if np.any(y == 0):
        raise ValueError("MAPE undefined: phenotype contains zeros")
    ss_tot = np.sum((y - y.mean()) ** 2)
    if ss_tot == 0:
        raise ValueError("R^2 undefined: phenotype has zero variance")
    err = y - y_hat
    return MetricsReport(
        mae=float(np.mean(np.abs(err))),
        mape=float(np.mean(np.abs(err) / np.abs(y))),
        rmse=float(np.sqrt(np.mean(err**2))),
        r2=float(1.0 - np.sum(err**2) / ss_tot),
    )


def add_genotype_view(ds: MultiViewDataset, G: GenotypeMatrix, snp_ids, name: str = "wgs") -> MultiViewDataset:
    """Prepend the chosen SNP columns as a view, aligned by subject id.

    Subjects absent from ``G`` get the view marked missing; missing calls
    of present subjects are replaced by the SNP mean.
    """
    col = {s: j for j, s in enumerate(G.snp_ids)}
    unknown = [s for s in snp_ids if s not in col]
    if unknown:
        raise KeyError(f"SNPs not in genotype matrix: {unknown[:5]}")
    cols = [col[s] for s in snp_ids]
    sub = G.values[:, cols]
    sub = np.where(np.isnan(sub), np.nanmean(sub, axis=0), sub)
    row = {s: i for i, s in enumerate(G.subject_ids)}
    x = np.full((ds.n, len(cols)), np.nan)
    present = np.zeros(ds.n, dtype=bool)
    for i, sid in enumerate(ds.subject_ids):
        if sid in row:
            x[i] = sub[row[sid]]
            present[i] = True
    views = {name: x, **ds.views}
    return MultiViewDataset(views, np.column_stack([present, ds.presence]), ds.phenotype, ds.subject_ids)


@dataclass
class RunResult:
    model: MvvaeModel
    head: LinearHead
    scale: dict
    history: object
    train_metrics: MetricsReport
    test_metrics: MetricsReport


def predict(model: MvvaeModel, head: LinearHead, ds: MultiViewDataset) -> np.ndarray:
    return head.predict(extract_latent(model, ds.view_arrays(), ds.presence))


def fit_and_evaluate(
    train_ds: MultiViewDataset,
    test_ds: MultiViewDataset,
    model_cfg: MvvaeConfig,
    train_cfg: TrainConfig,
    model_seed=0,
) -> RunResult:
    """Scale on train, fit the VAE and the head on train, score on test.

    The head is fit on the phenotype in its original units.
    """
    train_s, scale = scale_views(train_ds)
    test_s, _ = scale_views(test_ds, scale)
    model = init_model(model_cfg, model_seed)
    model, history = train(model, train_s, train_cfg)
    z_train = extract_latent(model, train_s.view_arrays(), train_s.presence)
    head = fit_linear_head(z_train, read_phenotype(train_s, "fit"))
    return RunResult(
        model,
        head,
        scale,
        history,
        compute_metrics(read_phenotype(train_s, "evaluate"), head.predict(z_train)),
        compute_metrics(read_phenotype(test_s, "evaluate"), predict(model, head, test_s)),
    )


@dataclass
class GridResult:
    n_layers: int
    latent_dim: int
    hidden: int
    views: dict  # view name -> used
    metrics: MetricsReport | None
    seconds: float
    error: str | None = None

    @property
    def r2(self) -> float:
        return self.metrics.r2 if self.metrics is not None else -math.inf

    def to_dict(self):
        return {
            "config": {
                "n_layers": self.n_layers,
                "latent_dim": self.latent_dim,
                "hidden": self.hidden,
                "views": {k: "Y" if v else "N" for k, v in self.views.items()},
            },
            "metrics": None if self.metrics is None else self.metrics.to_dict(),
            "seconds": self.seconds,
            "error": self.error,
        }


def all_view_subsets(names) -> list:
    """Every nonempty subset as a name -> bool mask, largest first."""
    names = list(names)
    out = []
    for r in range(len(names), 0, -1):
        for combo in itertools.combinations(names, r):
            out.append({n: n in combo for n in names})
    return out


def grid_search(
    ds: MultiViewDataset,
    layers=GRID_LAYERS,
    latents=GRID_LATENT,
    hiddens=GRID_HIDDEN,
    view_subsets=None,
    seed=0,
    train_cfg: TrainConfig | None = None,
    test_fraction: float = 0.2,
    model_kw: dict | None = None,
) -> list:
    """Train and score one model per (architecture, view subset).

    One split serves every run. The model seed depends only on the
    architecture, so view subsets are compared at equal initialization
    seeds. Failures are recorded in their row. Sorted by descending R^2.
    """
    train_cfg = train_cfg or TrainConfig(seed=seed)
    if view_subsets is None:
        view_subsets = all_view_subsets(ds.view_names)
    archs = list(itertools.product(layers, latents, hiddens))
    if not archs or not view_subsets:
        raise ValueError("empty grid")
    train_ds, test_ds = train_test_split(ds, test_fraction, seed)
    rows = []
    for a_idx, (n_layers, latent, hidden) in enumerate(archs):
        for subset in view_subsets:
            names = [n for n, use in subset.items() if use]
            t0 = time.perf_counter()
            try:
                tr = _with_any_view(train_ds.select_views(names))
                te = _with_any_view(test_ds.select_views(names))
                cfg = MvvaeConfig.from_grid(tr.view_dims, n_layers, latent, hidden, **(model_kw or {}))
                res = fit_and_evaluate(tr, te, cfg, train_cfg, model_seed=seed ^ a_idx)
                metrics, err = res.test_metrics, None
            except (ValueError, FloatingPointError, RuntimeError, np.linalg.LinAlgError) as exc:
                metrics, err = None, f"{type(exc).__name__}: {exc}"
                logger.warning("grid point failed layers=%d latent=%d hidden=%d views=%s: %s",
                               n_layers, latent, hidden, names, err)
            rows.append(GridResult(n_layers, latent, hidden, dict(subset), metrics,
                                   time.perf_counter() - t0, err))
    return sorted(rows, key=lambda r: -r.r2)


def _with_any_view(ds: MultiViewDataset) -> MultiViewDataset:
    keep = np.flatnonzero(ds.presence.any(axis=1))
    return ds if keep.size == ds.n else ds.subset(keep)
