"""Multi-view cohort container."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class MultiViewDataset:
    """Per-subject feature blocks aligned by ``subject_ids``.

    ``views`` maps view name to an ``N x d_m`` float matrix; rows of an
    absent view (``presence[i, m]`` false) are NaN-filled.
    """

    views: dict
    presence: np.ndarray
    phenotype: np.ndarray
    subject_ids: list

    def __post_init__(self):
        self.views = {k: np.asarray(v, dtype=np.float64) for k, v in self.views.items()}
        self.presence = np.asarray(self.presence, dtype=bool)
        self.phenotype = np.asarray(self.phenotype, dtype=np.float64).reshape(-1)
        self.subject_ids = [str(s) for s in self.subject_ids]
        n = len(self.subject_ids)
        if len(set(self.subject_ids)) != n:
            raise ValueError("duplicate subject ids")
        if self.presence.shape != (n, len(self.views)):
            raise ValueError(f"presence mask must be ({n}, {len(self.views)}), got {self.presence.shape}")
        if self.phenotype.shape != (n,):
            raise ValueError("phenotype length does not match subject count")
        for m, (name, x) in enumerate(self.views.items()):
            if x.ndim != 2 or x.shape[0] != n:
                raise ValueError(f"view {name!r} must have {n} rows, got shape {x.shape}")
            if np.isnan(x[self.presence[:, m]]).any():
                raise ValueError(f"view {name!r} has missing cells in rows marked present")

    @property
    def n(self) -> int:
        return len(self.subject_ids)

    @property
    def view_names(self) -> list:
        return list(self.views)

    @property
    def view_dims(self) -> list:
        return [x.shape[1] for x in self.views.values()]

    def view_arrays(self) -> list:
        return list(self.views.values())

    def subset(self, idx) -> "MultiViewDataset":
        idx = np.asarray(idx)
        return MultiViewDataset(
            {k: v[idx] for k, v in self.views.items()},
            self.presence[idx],
            self.phenotype[idx],
            [self.subject_ids[i] for i in idx],
        )

    def select_views(self, names) -> "MultiViewDataset":
        names = list(names)
        missing = [n for n in names if n not in self.views]
        if missing:
            raise KeyError(f"unknown views: {missing}")
        cols = [self.view_names.index(n) for n in names]
        return MultiViewDataset(
            {n: self.views[n] for n in names},
            self.presence[:, cols],
            self.phenotype,
            self.subject_ids,
        )

    def drop_views(self, names) -> "MultiViewDataset":
        """Same views and shapes, with the named views marked absent for everyone."""
        presence = self.presence.copy()
        views = dict(self.views)
        for name in names:
            if name not in self.views:
                raise KeyError(f"unknown view {name!r}")
            m = self.view_names.index(name)
            presence[:, m] = False
            views[name] = np.full_like(self.views[name], np.nan)
        return MultiViewDataset(views, presence, self.phenotype, self.subject_ids)
