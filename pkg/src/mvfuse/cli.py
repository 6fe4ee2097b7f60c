"""Command-line driver: ``mvfuse <verb> [--config FILE] [--seed N] [--out DIR]``.

Verbs: synth, gwas, train, eval, grid, predict. The config is a JSON
document; every key is optional. Relative data paths resolve against the
output directory, whose default file names line up with what ``synth``
writes, so ``synth -> gwas -> train -> eval`` works with no config at all.

Sub-seeds are ``root_seed XOR crc32(purpose)`` for the purposes
``synth``, ``permute``, ``split``, ``init`` and ``train``.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numerical
failure.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import sys
import zlib
from pathlib import Path

import numpy as np

from . import files
from .genetics import QcConfig, read_genotype_csv, run_gwas, write_genotype_csv, write_gwas_csv, write_snp_meta, zscore
from .mvvae import MvvaeConfig, TrainConfig, TrainingError, dump_model, load_model
from .pipeline import (
    GRID_HIDDEN,
    GRID_LATENT,
    GRID_LAYERS,
    LinearHead,
    ScaleParams,
    add_genotype_view,
    compute_metrics,
    fit_and_evaluate,
    grid_search,
    predict,
    read_phenotype,
    scale_views,
    split_indices,
)
from .synth import COVARIATE_NAMES, SynthSpec, synth_generate

log = logging.getLogger("mvfuse")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

DEFAULTS = {
    "seed": 0,
    "synth": {},
    "data": {
        "views": None,  # name -> path; None means view_<name>.csv for every synth view
        "phenotype": "phenotype.csv",
        "genotypes": "genotypes.csv",
        "snp_meta": "snps.csv",
        "covariates": "covariates.csv",
        "selected_snps": "selected_snps.txt",
        "wgs_view": "wgs",
    },
    "qc": {},
    "gwas": {"threshold": 1e-5, "n_pcs": 10, "top_k": None, "permute_phenotype": False},
    "model": {"n_layers": 2, "latent_dim": 8, "hidden": 32, "kl_weight": 1.0,
              "hidden_activation": "relu", "n_samples": 1},
    "train": {"epochs": 100, "batch_size": 64, "lr": 1e-3, "beta1": 0.9, "beta2": 0.999,
              "eps": 1e-8, "shuffle": True},
    "split": {"test_fraction": 0.2},
    "grid": {"layers": list(GRID_LAYERS), "latent": list(GRID_LATENT), "hidden": list(GRID_HIDDEN),
             "view_subsets": None},
}


class CliError(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


def derive_seed(root: int, purpose: str) -> int:
    return (int(root) ^ zlib.crc32(purpose.encode())) & 0xFFFFFFFF


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(path, seed=None, out=None) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            with open(path) as fh:
                user = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise CliError(EXIT_USAGE, f"cannot read config {path}: {exc}") from None
        if not isinstance(user, dict):
            raise CliError(EXIT_USAGE, "config must be a JSON object")
        unknown = set(user) - set(DEFAULTS) - {"out"}
        if unknown:
            raise CliError(EXIT_USAGE, f"unknown config sections: {sorted(unknown)}")
        cfg = _merge(cfg, user)
    if seed is not None:
        cfg["seed"] = seed
    cfg["out"] = str(out if out is not None else cfg.get("out", "."))
    return cfg


def _path(cfg, p) -> Path:
    p = Path(p)
    return p if p.is_absolute() else Path(cfg["out"]) / p


def _synth_spec(cfg) -> SynthSpec:
    try:
        return SynthSpec(**cfg["synth"])
    except (TypeError, ValueError) as exc:
        raise CliError(EXIT_USAGE, f"bad synth config: {exc}") from None


def _view_files(cfg) -> dict:
    views = cfg["data"]["views"]
    if views is None:
        views = {name: f"view_{name}.csv" for name in _synth_spec(cfg).view_dims}
    return {name: _path(cfg, p) for name, p in views.items()}


def _emit(**kv):
    print(" ".join(f"{k}={v}" for k, v in kv.items()), flush=True)


def _echo_config(cfg, verb):
    files.write_json(_path(cfg, f"config_{verb}.json"), cfg)


# ---- synth -------------------------------------------------------------

def cmd_synth(cfg) -> int:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    cohort = synth_generate(_synth_spec(cfg), derive_seed(cfg["seed"], "synth"))
    ds = cohort.dataset
    for name, x in ds.views.items():
        files.write_view_csv(_path(cfg, f"view_{name}.csv"), x, ds.subject_ids)
    files.write_phenotype_csv(_path(cfg, cfg["data"]["phenotype"]), ds.phenotype, ds.subject_ids)
    files.write_table(_path(cfg, cfg["data"]["covariates"]), ["subject_id", *COVARIATE_NAMES],
                      ds.subject_ids, cohort.covariates)
    write_genotype_csv(_path(cfg, cfg["data"]["genotypes"]), cohort.genotypes)
    write_snp_meta(_path(cfg, cfg["data"]["snp_meta"]), cohort.genotypes)
    files.write_json(_path(cfg, "truth.json"), cohort.truth)
    _echo_config(cfg, "synth")
    _emit(command="synth", subjects=ds.n, views=len(ds.views), snps=cohort.genotypes.shape[1])
    return EXIT_OK


# ---- gwas --------------------------------------------------------------

def _load_genotypes(cfg):
    meta = _path(cfg, cfg["data"]["snp_meta"])
    return read_genotype_csv(_path(cfg, cfg["data"]["genotypes"]), meta if meta.exists() else None)


def cmd_gwas(cfg) -> int:
    G = _load_genotypes(cfg)
    pheno = files.read_phenotype_csv(_path(cfg, cfg["data"]["phenotype"]))
    cov_path = _path(cfg, cfg["data"]["covariates"])
    cov_map = None
    if cov_path.exists():
        _, ids, body = files.read_table(cov_path)
        cov_map = dict(zip(ids, body))
    rows = [i for i, s in enumerate(G.subject_ids) if s in pheno and (cov_map is None or s in cov_map)]
    if len(rows) < 3:
        raise CliError(EXIT_DATA, "fewer than 3 subjects with genotype and phenotype")
    G = G.take(rows)
    y = zscore([pheno[s] for s in G.subject_ids])
    if cfg["gwas"]["permute_phenotype"]:
        y = np.random.default_rng(derive_seed(cfg["seed"], "permute")).permutation(y)
    cov = None if cov_map is None else np.array([cov_map[s] for s in G.subject_ids])
    if cov is not None and np.isnan(cov).any():
        raise CliError(EXIT_DATA, "covariates contain missing values")
    qc = QcConfig(**cfg["qc"])
    try:
        results, selected, report = run_gwas(G, y, cov, qc, cfg["gwas"]["threshold"], cfg["gwas"]["n_pcs"])
    except ValueError as exc:
        raise CliError(EXIT_DATA, str(exc)) from None
    top_k = cfg["gwas"]["top_k"]
    if top_k:
        ranked = sorted((r for r in results if not r.degenerate), key=lambda r: r.p_value)
        chosen = {r.snp_id for r in ranked[:top_k]}
        panel = [r.snp_id for r in results if r.snp_id in chosen]
    else:
        panel = selected
    write_gwas_csv(_path(cfg, "gwas_results.csv"), results, selected)
    with open(_path(cfg, cfg["data"]["selected_snps"]), "w") as fh:
        fh.writelines(s + "\n" for s in panel)
    _echo_config(cfg, "gwas")
    counts = report.counts()
    _emit(command="gwas", tested=len(results), removed_subjects=len(report.removed_subjects),
          removed_missing_rate=counts.get("missing_rate", 0), removed_maf=counts.get("maf", 0),
          removed_hwe=counts.get("hwe", 0), selected=len(selected), panel=len(panel))
    return EXIT_OK


# ---- dataset assembly ---------------------------------------------------

def _assemble(cfg, require_wgs=False):
    try:
        ds = files.load_dataset(_view_files(cfg), _path(cfg, cfg["data"]["phenotype"]))
    except (OSError, ValueError) as exc:
        raise CliError(EXIT_DATA, str(exc)) from None
    sel_path = _path(cfg, cfg["data"]["selected_snps"])
    panel = []
    if sel_path.exists():
        panel = [s.strip() for s in sel_path.read_text().splitlines() if s.strip()]
    if panel:
        try:
            ds = add_genotype_view(ds, _load_genotypes(cfg), panel, cfg["data"]["wgs_view"])
        except (OSError, KeyError, ValueError) as exc:
            raise CliError(EXIT_DATA, f"cannot build genotype view: {exc}") from None
    elif require_wgs:
        raise CliError(EXIT_DATA, "checkpoint expects a genotype view but no SNP panel is available")
    return ds


def _model_config(cfg, view_dims) -> MvvaeConfig:
    m = cfg["model"]
    try:
        return MvvaeConfig.from_grid(
            view_dims, m["n_layers"], m["latent_dim"], m["hidden"],
            kl_weight=m["kl_weight"], hidden_activation=m["hidden_activation"], n_samples=m["n_samples"],
        )
    except (TypeError, ValueError) as exc:
        raise CliError(EXIT_USAGE, f"bad model config: {exc}") from None


def _train_config(cfg) -> TrainConfig:
    try:
        return TrainConfig(seed=derive_seed(cfg["seed"], "train"), **cfg["train"])
    except (TypeError, ValueError) as exc:
        raise CliError(EXIT_USAGE, f"bad train config: {exc}") from None


def _metrics_doc(metrics, split, n, dropped=()):
    return {"split": split, "n": n, "dropped_views": sorted(dropped), "metrics": metrics.to_dict()}


# ---- train -------------------------------------------------------------

def cmd_train(cfg) -> int:
    ds = _assemble(cfg)
    train_idx, test_idx = split_indices(ds.n, cfg["split"]["test_fraction"], derive_seed(cfg["seed"], "split"))
    train_ds, test_ds = ds.subset(train_idx), ds.subset(test_idx)
    try:
        res = fit_and_evaluate(train_ds, test_ds, _model_config(cfg, ds.view_dims), _train_config(cfg),
                               model_seed=derive_seed(cfg["seed"], "init"))
    except TrainingError as exc:
        raise CliError(EXIT_NUMERIC, f"training failed at {exc}") from None
    Path(cfg["out"]).mkdir(parents=True, exist_ok=True)
    _path(cfg, "model.ckpt").write_text(dump_model(res.model))
    files.write_json(_path(cfg, "head.json"),
                     {"intercept": repr(float(res.head.intercept)), "coef": [repr(float(c)) for c in res.head.coef]})
    files.write_json(_path(cfg, "scale.json"),
                     {"views": ds.view_names, "params": {k: v.to_dict() for k, v in res.scale.items()}})
    files.write_json(_path(cfg, "split.json"), {"train": train_ds.subject_ids, "test": test_ds.subject_ids})
    _path(cfg, "history.csv").write_text(res.history.to_csv())
    files.write_json(_path(cfg, "metrics.json"), _metrics_doc(res.test_metrics, "test", test_ds.n))
    _echo_config(cfg, "train")
    _emit(command="train", train=train_ds.n, test=test_ds.n, epochs=len(res.history.total),
          final_loss=f"{res.history.total[-1]:.6g}" if res.history.total else "nan",
          test_r2=f"{res.test_metrics.r2:.6g}", test_mae=f"{res.test_metrics.mae:.6g}")
    return EXIT_OK


# ---- eval / predict ----------------------------------------------------

def _load_trained(cfg, checkpoint):
    ckpt = Path(checkpoint) if checkpoint else _path(cfg, "model.ckpt")
    try:
        model = load_model(ckpt)
        head_doc = files.read_json(_path(cfg, "head.json"))
        scale_doc = files.read_json(_path(cfg, "scale.json"))
    except (OSError, ValueError, KeyError) as exc:
        raise CliError(EXIT_DATA, f"cannot load trained artifacts: {exc}") from None
    head = LinearHead(np.array([float(c) for c in head_doc["coef"]]), float(head_doc["intercept"]))
    scale = {k: ScaleParams.from_dict(v) for k, v in scale_doc["params"].items()}
    ds = _assemble(cfg, require_wgs=cfg["data"]["wgs_view"] in scale_doc["views"])
    if ds.view_names != scale_doc["views"] or ds.view_dims != model.config.view_dims:
        raise CliError(EXIT_DATA, f"data views {dict(zip(ds.view_names, ds.view_dims))} do not match "
                                  f"checkpoint views {dict(zip(scale_doc['views'], model.config.view_dims))}")
    return model, head, scale, ds


def _split_subset(cfg, ds, split):
    if split == "all":
        return ds
    manifest = files.read_json(_path(cfg, "split.json"))
    wanted = set(manifest[split])
    idx = [i for i, s in enumerate(ds.subject_ids) if s in wanted]
    if len(idx) != len(wanted):
        raise CliError(EXIT_DATA, f"{len(wanted) - len(idx)} {split} subjects missing from the data")
    return ds.subset(idx)


def _drop(ds, names):
    try:
        ds = ds.drop_views(names)
    except KeyError as exc:
        raise CliError(EXIT_USAGE, str(exc)) from None
    keep = np.flatnonzero(ds.presence.any(axis=1))
    if keep.size == 0:
        raise CliError(EXIT_DATA, "dropping these views leaves no subject with any view")
    return ds.subset(keep)


def cmd_eval(cfg, checkpoint=None, drop_views=(), split="test") -> int:
    model, head, scale, ds = _load_trained(cfg, checkpoint)
    part = _drop(_split_subset(cfg, ds, split), drop_views)
    scaled, _ = scale_views(part, scale)
    y_hat = predict(model, head, scaled)
    metrics = compute_metrics(read_phenotype(scaled, "evaluate"), y_hat)
    if not all(np.isfinite(list(metrics.to_dict().values()))):
        raise CliError(EXIT_NUMERIC, "non-finite metrics")
    suffix = "".join(f"_drop-{v}" for v in sorted(drop_views))
    files.write_json(_path(cfg, f"eval_{split}{suffix}.json"), _metrics_doc(metrics, split, part.n, drop_views))
    _emit(command="eval", split=split, n=part.n, dropped=",".join(sorted(drop_views)) or "none",
          r2=f"{metrics.r2:.6g}", mae=f"{metrics.mae:.6g}", mape=f"{metrics.mape:.6g}", rmse=f"{metrics.rmse:.6g}")
    return EXIT_OK


def cmd_predict(cfg, checkpoint=None, drop_views=(), split="all") -> int:
    model, head, scale, ds = _load_trained(cfg, checkpoint)
    part = _drop(_split_subset(cfg, ds, split), drop_views)
    scaled, _ = scale_views(part, scale)
    y_hat = predict(model, head, scaled)
    files.write_table(_path(cfg, "predictions.csv"), ["subject_id", "prediction"], part.subject_ids, y_hat[:, None])
    _emit(command="predict", split=split, n=part.n)
    return EXIT_OK


# ---- grid --------------------------------------------------------------

def _grid_rows(rows, names):
    header = [*names, "n_layers", "latent_dim", "hidden", "r2", "mae", "mape", "rmse", "error"]
    out = []
    for r in rows:
        m = r.metrics
        vals = ["" if m is None else repr(getattr(m, k)) for k in ("r2", "mae", "mape", "rmse")]
        out.append([*("Y" if r.views.get(n) else "N" for n in names),
                    r.n_layers, r.latent_dim, r.hidden, *vals, r.error or ""])
    return header, out


def cmd_grid(cfg) -> int:
    ds = _assemble(cfg)
    g = cfg["grid"]
    subsets = None
    if g["view_subsets"] is not None:
        subsets = [{n: n in chosen for n in ds.view_names} for chosen in g["view_subsets"]]
    m = cfg["model"]
    try:
        rows = grid_search(
            ds, g["layers"], g["latent"], g["hidden"], subsets,
            seed=derive_seed(cfg["seed"], "split"), train_cfg=_train_config(cfg),
            test_fraction=cfg["split"]["test_fraction"],
            model_kw={"kl_weight": m["kl_weight"], "hidden_activation": m["hidden_activation"],
                      "n_samples": m["n_samples"]},
        )
    except ValueError as exc:
        raise CliError(EXIT_USAGE, str(exc)) from None
    Path(cfg["out"]).mkdir(parents=True, exist_ok=True)
    header, table = _grid_rows(rows, ds.view_names)
    with open(_path(cfg, "grid.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(table)
    docs = []
    for r in rows:
        d = r.to_dict()
        d.pop("seconds")  # wall time is logged, not written, so reruns are byte-identical
        docs.append(d)
    files.write_json(_path(cfg, "grid.json"), {"runs": docs})
    _echo_config(cfg, "grid")
    for r in rows:
        log.info("grid_point layers=%d latent=%d hidden=%d seconds=%.3f", r.n_layers, r.latent_dim, r.hidden, r.seconds)
    failed = sum(r.metrics is None for r in rows)
    _emit(command="grid", runs=len(rows), failed=failed,
          best_r2=f"{rows[0].r2:.6g}" if rows[0].metrics else "nan")
    return EXIT_NUMERIC if failed == len(rows) else EXIT_OK


# ---- entry point -------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int, help="root seed (overrides config)")
    common.add_argument("--out", help="output directory (overrides config)")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="mvfuse", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="verb", required=True)
    sub.add_parser("synth", parents=[common], help="write a synthetic cohort")
    sub.add_parser("gwas", parents=[common], help="QC + score-test GWAS, writes the SNP panel")
    sub.add_parser("train", parents=[common], help="train model and linear head")
    sub.add_parser("grid", parents=[common], help="hyperparameter and view-subset sweep")
    for verb, default_split in (("eval", "test"), ("predict", "all")):
        p = sub.add_parser(verb, parents=[common])
        p.add_argument("--checkpoint", help="model checkpoint (default <out>/model.ckpt)")
        p.add_argument("--drop-view", action="append", default=[], dest="drop_views",
                       help="treat this view as missing for every subject (repeatable)")
        p.add_argument("--split", choices=("train", "test", "all"), default=default_split)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s %(message)s")
    try:
        cfg = load_config(args.config, args.seed, args.out)
        if args.verb == "synth":
            return cmd_synth(cfg)
        if args.verb == "gwas":
            return cmd_gwas(cfg)
        if args.verb == "train":
            return cmd_train(cfg)
        if args.verb == "grid":
            return cmd_grid(cfg)
        if args.verb == "eval":
            return cmd_eval(cfg, args.checkpoint, args.drop_views, args.split)
        return cmd_predict(cfg, args.checkpoint, args.drop_views, args.split)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (FloatingPointError, TrainingError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
