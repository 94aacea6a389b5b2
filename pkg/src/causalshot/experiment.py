"""Train / evaluate / sweep / ablate / explain runners behind the CLI."""
from __future__ import annotations

import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import backbone, data, explain, metrics
from .config import METHOD_GRID, ConfigError, RunConfig
from .episodes import EpisodeSampler, check_patient_disjoint
from .model import CachedScorer, CausalBDCNet, MetaLearner, evaluate

log = logging.getLogger(__name__)

METRICS = {"2way": ("2-way",), "4way": ("4-way", "4-way*")}
TABLE_ROWS = (
    ("Non causality-driven", "none"),
    ("Causality-driven mulcat", "mulcat"),
    ("Causality-driven mulcatbool", "mulcatbool"),
    ("Ablation mulcat", "ablation-mulcat"),
    ("Ablation mulcatbool", "ablation-mulcatbool"),
)


class DataError(RuntimeError):
    """The dataset is missing, malformed or unusable for the protocol."""


def load_pool(data_dir) -> list:
    if data_dir is None:
        raise DataError("no data directory given")
    try:
        pool = data.load_dataset(data_dir)
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(f"cannot load dataset from {data_dir}: {exc}") from None
    if not pool:
        raise DataError(f"dataset {data_dir} is empty")
    try:
        check_patient_disjoint(pool)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    return pool


def preprocess(images) -> list:
    """Z-score every synthetic patient's scenes as one volume, in place."""
    by_patient: dict = {}
    for im in images:
        by_patient.setdefault(im.patient_id, []).append(im)
    for ims in by_patient.values():
        vol = data.zscore_volume(np.stack([im.pixels for im in ims]))
        for im, sl in zip(ims, vol):
            im.pixels = sl
    return images


def generate(out_dir, spec: data.SyntheticSceneSpec, counts: dict, seed: int) -> dict:
    images = preprocess(data.generate_dataset(spec, counts, seed))
    data.save_dataset(images, out_dir, spec=spec, seed=seed)
    summary = {"count": len(images), "manifest_sha256": data.manifest_hash(out_dir)}
    for subset in ("train", "val", "test"):
        sub = [im for im in images if im.subset == subset]
        summary[subset] = {
            "images": len(sub),
            "patients": len({im.patient_id for im in sub}),
            "isup": {str(c): sum(im.isup_label == c for im in sub) for c in data.ISUP_CLASSES},
        }
    return summary


def _check_protocol(cfg: RunConfig, pool) -> None:
    size = backbone.preset(cfg.preset).input_size
    bad = {im.pixels.shape for im in pool if im.pixels.shape != (size, size)}
    if bad:
        raise DataError(f"preset {cfg.preset!r} expects {size}x{size} images, dataset has {sorted(bad)}")
    for phase in ("train", "val", "test"):
        try:
            EpisodeSampler(pool, cfg.experiment, phase, shot=cfg.shot, queries=cfg.queries)
        except ValueError as exc:
            raise DataError(str(exc)) from None


def build_net(cfg: RunConfig) -> CausalBDCNet:
    return CausalBDCNet(backbone.preset(cfg.preset), cfg.causality, cfg.causality_method, seed=cfg.seed)


def run_dir(cfg: RunConfig) -> Path:
    return Path(cfg.out_dir) / f"{cfg.experiment}-{cfg.label}-s{cfg.seed}"


def train(cfg: RunConfig, pool=None) -> dict:
    """Meta-train, keep the best validation checkpoint, then meta-test."""
    pool = pool if pool is not None else load_pool(cfg.data_dir)
    _check_protocol(cfg, pool)
    out = run_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    net = build_net(cfg)
    t0 = time.perf_counter()
    with open(out / "train_log.jsonl", "w") as logf:
        learner = MetaLearner(net, cfg.experiment, cfg.pesg, tasks_per_epoch=cfg.tasks_per_epoch,
                              val_every=cfg.val_every, val_tasks=cfg.val_tasks, seed=cfg.seed,
                              margin=cfg.margin, log_file=logf)
        learner.fit(pool)
    best_val = None if learner.best is None else {"auroc": learner.best[0], "epoch": learner.best[1]}
    ckpt = out / "model.ckpt"
    net.save(ckpt, config=cfg.to_dict(), best_val=best_val)
    result = evaluate_checkpoint(cfg, ckpt, pool, net=net)
    result["best_val"] = best_val
    result["skipped_train_tasks"] = learner.skipped
    (out / "results.json").write_text(json.dumps(result, indent=1, sort_keys=True))
    log.info("%s trained in %.1fs", cfg.label, time.perf_counter() - t0)
    return result


def evaluate_checkpoint(cfg: RunConfig, checkpoint, pool=None, net=None, manifest=None) -> dict:
    pool = pool if pool is not None else load_pool(cfg.data_dir)
    _check_protocol(cfg, pool)
    if net is None:
        try:
            net, _ = CausalBDCNet.load(checkpoint)
        except (OSError, ValueError, KeyError) as exc:
            raise DataError(f"cannot load checkpoint {checkpoint}: {exc}") from None
    res = evaluate(net, pool, cfg.experiment, "test", cfg.test_tasks, seed=cfg.eval_seed)
    val = evaluate(net, pool, cfg.experiment, "val", max(cfg.val_tasks, 1), seed=cfg.seed + 1)
    key = METRICS[cfg.experiment][0]
    return {
        "setting": cfg.label,
        "config": cfg.to_dict(),
        "checkpoint": str(checkpoint),
        "test": {k: list(v) for k, v in res.items() if isinstance(v, tuple)},
        "test_skipped": res["skipped"],
        "val_auroc": val[key][0],
    }


def sweep_configs(base: RunConfig, include_ablations: bool = True) -> list:
    clean = dict(method=None, p=None)
    rows = [base.with_(causality="none", **clean)]
    for variant in ("mulcat", "mulcatbool"):
        for method, p in METHOD_GRID:
            rows.append(base.with_(causality=variant, method=method, p=p))
    if include_ablations:
        rows += [base.with_(causality=v, **clean) for v in ("ablation-mulcat", "ablation-mulcatbool")]
    return rows


def _safe_train(cfg: RunConfig) -> dict:
    try:
        return train(cfg)
    except (ConfigError, DataError):
        raise
    except Exception as exc:  # a failed row is recorded, the sweep goes on
        log.exception("row %s failed", cfg.label)
        return {"setting": cfg.label, "config": cfg.to_dict(), "error": f"{type(exc).__name__}: {exc}"}


def run_many(configs, jobs: int = 1) -> list:
    if jobs <= 1:
        return [_safe_train(c) for c in configs]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(_safe_train, configs))


def _row_cells(result: dict, experiment: str) -> dict:
    if "error" in result:
        return {"status": result["error"]}
    cells = {m: tuple(result["test"][m]) for m in METRICS[experiment] if m in result["test"]}
    cells["val_auroc"] = f"{result['val_auroc']:.4f}"
    cells["status"] = "ok"
    return cells


def select_best(results: list) -> dict:
    """Per variant, the successful row with the highest validation AUROC."""
    best: dict = {}
    for r in results:
        if "error" in r:
            continue
        v = r["config"]["causality"]
        if v not in best or r["val_auroc"] > best[v]["val_auroc"]:
            best[v] = r
    return best


def write_tables(results: list, experiment: str, out_dir) -> tuple:
    """Write every row (``sweep.csv``) and the per-variant summary of the selected rows (``table.csv``)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cols = METRICS[experiment]
    best = select_best(results)
    rows = []
    for r in results:
        c = r["config"]
        cells = _row_cells(r, experiment)
        cells.update(setting=r["setting"], method=c["method"] or "", p="" if c["p"] is None else f"{c['p']:g}",
                     selected="yes" if best.get(c["causality"]) is r else "")
        rows.append(cells)
    sweep_csv = out_dir / "sweep.csv"
    metrics.write_results_csv(sweep_csv, rows, columns=cols)
    table = []
    for name, variant in TABLE_ROWS:
        row = {"setting": name}
        r = best.get(variant)
        if r is not None:
            row.update({m: tuple(r["test"][m]) for m in cols if m in r["test"]})
            c = r["config"]
            row["best_setting"] = "" if c["method"] is None else (
                "max" if c["method"] == "max" else f"lehmer p={c['p']:g}")
        for m in cols:
            row[f"reference {m}"] = metrics.format_mean_sd(*metrics.REFERENCE_RESULTS[name][m])
        table.append(row)
    table_csv = out_dir / "table.csv"
    metrics.write_results_csv(table_csv, table, columns=cols)
    return sweep_csv, table_csv


def sweep(base: RunConfig, jobs: int = 1, include_ablations: bool = True) -> tuple:
    load_pool(base.data_dir)  # fail fast on a bad dataset
    results = run_many(sweep_configs(base, include_ablations), jobs)
    return results, write_tables(results, base.experiment, Path(base.out_dir))


def ablate(base: RunConfig, jobs: int = 1) -> tuple:
    clean = dict(method=None, p=None)
    cfgs = [base.with_(causality=v, **clean) for v in ("none", "ablation-mulcat", "ablation-mulcatbool")]
    load_pool(base.data_dir)
    results = run_many(cfgs, jobs)
    out = Path(base.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = [dict(setting=r["setting"], **_row_cells(r, base.experiment)) for r in results]
    path = out / "ablation.csv"
    metrics.write_results_csv(path, rows, columns=METRICS[base.experiment])
    return results, path


def explain_cases(checkpoints: dict, pool, experiment: str, out_dir, n_tasks: int = 20,
                  max_cases: int = 10, seed: int = 0) -> dict:
    """Comparison panels for test queries every given model gets right.

    ``checkpoints`` maps ``baseline``/``mulcat``/``mulcatbool`` to checkpoint
    paths (or loaded nets). Returns the written panel paths and the mean
    heatmap mass inside the artifact boxes per variant.
    """
    nets = {}
    for name, ck in checkpoints.items():
        nets[name] = ck if isinstance(ck, CausalBDCNet) else CausalBDCNet.load(ck)[0]
    if not nets:
        raise ConfigError("explain needs at least one checkpoint")
    scorers = {name: CachedScorer(net, pool) for name, net in nets.items()}
    sampler = EpisodeSampler(pool, experiment, "test", seed=seed)
    panels, masses = [], {name: [] for name in nets}
    for t in range(n_tasks):
        ep = sampler.sample(t)
        scores = {name: sc.episode_scores(pool, ep) for name, sc in scorers.items()}
        protos = {}
        for name, sc in scorers.items():
            sup = sc.matrices(ep.support)
            lab = np.asarray(ep.support_labels)
            protos[name] = np.stack([sup[lab == c].mean(axis=0) for c in range(ep.way)])
        for qi, (idx, y) in enumerate(zip(ep.query, ep.query_labels)):
            correct = {name: int(np.argmax(s[qi])) == y for name, s in scores.items()}
            if not all(correct.values()):
                continue
            im = pool[idx]
            heat = {name: explain.grad_cam(net, im, protos[name], y) for name, net in nets.items()}
            for name, hm in heat.items():
                if im.boxes:
                    masses[name].append(explain.box_mass(hm.values, im.boxes))
            if len(panels) < max_cases:
                mask = im.mask if im.mask is not None else np.zeros_like(im.pixels)
                case = f"{t:03d}-{im.image_id}"
                panels.append(str(explain.comparison_panel(out_dir, case, im, mask, heat, correct=correct)))
    summary = {
        "panels": panels,
        "box_mass": {name: (float(np.mean(v)) if v else None) for name, v in masses.items()},
        "cases": len(next(iter(masses.values()))),
    }
    Path(out_dir).mkdir(parents=True, exist_ok=True)
    (Path(out_dir) / "explain.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    return summary


def thread_limit():
    """Context limiting BLAS threads to ``CAUSALSHOT_THREADS`` (no-op when unset)."""
    from threadpoolctl import threadpool_limits

    n = os.environ.get("CAUSALSHOT_THREADS")
    if n is None:
        return threadpool_limits(limits=None)
    try:
        return threadpool_limits(limits=max(1, int(n)))
    except ValueError:
        raise ConfigError(f"CAUSALSHOT_THREADS must be an integer, got {n!r}") from None
