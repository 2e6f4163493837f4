"""Batch pipeline: simulate, trace, train, compensate, evaluate, export.

Output layout under the run directory::

    config.ini, manifest.json
    data/<split>/ep_<seed>.<fmt>
    traces/<split>/<estimator>/ep_<seed>.<fmt>     estimator: inekf, sr, <Variant>-s<seed>
    models/s<seed>/stage1.ckpt, models/s<seed>/<Variant>.ckpt
    curves/s<seed>/stage1.csv, curves/s<seed>/<Variant>.csv
    reports/...

Every artifact header carries the hash of the settings it depends on.
"""

from __future__ import annotations

import csv
import json
import logging
import os
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from attennkf import compensator as C
from attennkf import filter as F
from attennkf.config import PipelineConfig, _digest, config_hash, dump_config, model_hash
from attennkf.eval import harness as H
from attennkf.neural import Autoencoder, NonFinite, load_checkpoint, load_module_state, module_state, save_checkpoint
from attennkf.records import FormatError
from attennkf.sim.episode import ConfigInvalid, generate_episode
from attennkf.sim.io import load_episode, save_episode
from attennkf.sim.scenario import clean_episodes, dataset_configs, slip_episodes
from attennkf.slipsig import correlation_report, state_error_norms
from attennkf.trace import load_trace, run_filter, save_trace

log = logging.getLogger("attennkf")

SPLITS = ("train", "test_slip", "test_clean")
STAGE1_FEATURES = ("slip", "foot_speed", "inekf", "error")
TEST_OFFSET = {"test_slip": 10000, "test_clean": 20000}


class PipelineError(Exception):
    exit_code = 1


class UsageError(PipelineError):
    exit_code = 2


class DataError(PipelineError):
    exit_code = 3


class CheckpointMismatch(DataError):
    pass


class NumericalError(PipelineError):
    exit_code = 4


def data_hash(cfg: PipelineConfig) -> str:
    d = cfg.to_dict()
    keep = {k: d["pipeline"][k] for k in ("seed", "n_train", "n_test")}
    return _digest({"pipeline": keep, **{s: d[s] for s in ("scenario", "episode", "gait", "slip", "noise")}})


def trace_hash(cfg: PipelineConfig) -> str:
    d = cfg.to_dict()
    return _digest({"data": data_hash(cfg), **{s: d[s] for s in ("filter", "sr", "slipsig")}})


def set_determinism(cfg: PipelineConfig, threads: int | None = None) -> None:
    threads = threads or int(os.environ.get("ATTENNKF_THREADS", "1"))
    torch.set_num_threads(max(1, threads))
    if cfg.pipeline.deterministic:
        torch.use_deterministic_algorithms(True)


class Workspace:
    def __init__(self, root, cfg: PipelineConfig):
        self.root = Path(root)
        self.cfg = cfg
        self.ext = "." + cfg.pipeline.format

    def data(self, split: str, seed: int) -> Path:
        return self.root / "data" / split / f"ep_{seed:06d}{self.ext}"

    def trace(self, split: str, name: str, seed: int) -> Path:
        return self.root / "traces" / split / name / f"ep_{seed:06d}{self.ext}"

    def stage1(self, seed: int) -> Path:
        return self.root / "models" / f"s{seed}" / "stage1.ckpt"

    def checkpoint(self, seed: int, variant: str) -> Path:
        return self.root / "models" / f"s{seed}" / f"{variant}.ckpt"

    def curve(self, seed: int, name: str) -> Path:
        return self.root / "curves" / f"s{seed}" / f"{name}.csv"

    def report(self, name: str) -> Path:
        return self.root / "reports" / name

    @property
    def manifest(self) -> Path:
        return self.root / "manifest.json"


def _mkparent(path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def split_configs(cfg: PipelineConfig, split: str) -> list:
    p, sc, base = cfg.pipeline, cfg.scenario, cfg.base_episode()
    if split == "train":
        return dataset_configs(p.n_train, p.seed, sc, base)
    if split == "test_slip":
        return slip_episodes(p.n_test, p.seed + TEST_OFFSET[split], sc, base)
    if split == "test_clean":
        return clean_episodes(p.n_test, p.seed + TEST_OFFSET[split], sc, base)
    raise UsageError(f"unknown split {split!r}")


# ---------------------------------------------------------------------------
# simulate


def simulate(ws: Workspace) -> dict:
    """Generate every split, write the episode files, config echo and manifest."""
    cfg = ws.cfg
    splits = {}
    for split in SPLITS:
        entries = []
        for ec in split_configs(cfg, split):
            path = ws.data(split, ec.seed)
            try:
                save_episode(generate_episode(ec), _mkparent(path))
            except ConfigInvalid as exc:
                raise UsageError(str(exc)) from exc
            entries.append({"file": str(path.relative_to(ws.root)), "seed": ec.seed, "slip": bool(ec.slip.segments)})
            log.info("simulated %s", path)
        splits[split] = entries
    manifest = {
        "config_hash": config_hash(cfg), "data_hash": data_hash(cfg), "model_hash": model_hash(cfg),
        "format": cfg.pipeline.format, "splits": splits,
    }
    _mkparent(ws.manifest).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    # the echo leaves out the output location so two runs in different places compare byte for byte
    echo = replace(cfg, pipeline=replace(cfg.pipeline, out_dir="."))
    (ws.root / "config.ini").write_text(dump_config(echo))
    return manifest


def read_manifest(ws: Workspace) -> dict:
    if not ws.manifest.exists():
        raise DataError(f"missing dataset manifest {ws.manifest}; run simulate first")
    manifest = json.loads(ws.manifest.read_text())
    if manifest.get("data_hash") != data_hash(ws.cfg):
        raise DataError(f"{ws.manifest}: dataset was generated with a different configuration")
    return manifest


def split_seeds(ws: Workspace, split: str) -> list:
    return [e["seed"] for e in read_manifest(ws)["splits"][split]]


def load_split(ws: Workspace, split: str) -> list:
    out = []
    for seed in split_seeds(ws, split):
        path = ws.data(split, seed)
        if not path.exists():
            raise DataError(f"missing episode file {path}")
        try:
            out.append(load_episode(path))
        except (FormatError, ValueError, KeyError) as exc:
            raise DataError(f"{path}: {exc}") from exc
    return out


# ---------------------------------------------------------------------------
# baseline traces


def baseline_traces(ws: Workspace, split: str, estimator: str, episodes=None) -> list:
    """Filter traces for ``inekf`` or ``sr``; cached files with a matching hash are reused."""
    if estimator not in ("inekf", "sr"):
        raise UsageError(f"unknown baseline {estimator!r}")
    cfg = ws.cfg
    h = trace_hash(cfg)
    seeds = split_seeds(ws, split)
    out = []
    for i, seed in enumerate(seeds):
        path = ws.trace(split, estimator, seed)
        if path.exists():
            header, tr = load_trace(path)
            if header.get("trace_hash") == h:
                out.append(tr)
                continue
        if episodes is None:
            episodes = load_split(ws, split)
        try:
            tr = run_filter(episodes[i], cfg.filter, estimator, cfg.sr, cfg.slipsig)
        except F.NumericalFailure as exc:
            raise NumericalError(f"{split} episode {seed}: {exc}") from exc
        save_trace(tr, _mkparent(path), {"estimator": estimator, "split": split, "seed": seed, "trace_hash": h})
        log.info("traced %s", path)
        out.append(tr)
    return out


# ---------------------------------------------------------------------------
# training


def training_windows(ws: Workspace) -> C.Windows:
    episodes = load_split(ws, "train")
    traces = baseline_traces(ws, "train", "inekf", episodes)
    return C.build_dataset(episodes, traces, stride=ws.cfg.training.stride)


def _write_rows(path: Path, header: list, rows) -> None:
    with open(_mkparent(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([row[0], *(repr(float(x)) for x in row[1:])])


def train_stage1(ws: Workspace, seed: int, windows: C.Windows | None = None) -> dict:
    cfg = ws.cfg
    windows = windows or training_windows(ws)
    tc = _seeded(cfg, seed)
    try:
        res = C.train_stage1(windows, tc, STAGE1_FEATURES, log=log.debug)
    except (C.Diverged, NonFinite) as exc:
        raise NumericalError(str(exc)) from exc
    blocks = {**windows.stats.blocks()}
    for name, ae in res.models.items():
        blocks.update(module_state(ae, f"ae.{name}."))
    meta = {"kind": "stage1", "seed": seed, "model_hash": model_hash(cfg),
            "final_mse": {k: list(v) for k, v in res.final.items()}}
    save_checkpoint(_mkparent(ws.stage1(seed)), blocks, meta)
    epochs = [e for e, _ in res.curves[STAGE1_FEATURES[0]]]
    rows = [(e, *(dict(res.curves[f])[e] for f in STAGE1_FEATURES)) for e in epochs]
    _write_rows(ws.curve(seed, "stage1"), ["epoch", *(f"mse_{f}" for f in STAGE1_FEATURES)], rows)
    log.info("stage 1 seed %d: %s", seed, res.final)
    return res.models


def _seeded(cfg: PipelineConfig, seed: int) -> C.TrainingConfig:
    return replace(cfg.training, seed=seed)


def _check_meta(meta: dict, ws: Workspace, path: Path) -> None:
    if meta.get("model_hash") != model_hash(ws.cfg):
        raise CheckpointMismatch(f"{path} was trained with a different configuration")


def load_stage1(ws: Workspace, seed: int) -> dict:
    path = ws.stage1(seed)
    if not path.exists():
        raise C.MissingStage1(f"missing stage-1 checkpoint {path}")
    meta, blocks = load_checkpoint(path)
    _check_meta(meta, ws, path)
    models = {}
    for name in STAGE1_FEATURES:
        ae = Autoencoder.for_feature(name)
        load_module_state(ae, blocks, f"ae.{name}.")
        for p in ae.parameters():
            p.requires_grad_(False)
        models[name] = ae
    return models


def train_stage2(ws: Workspace, seed: int, variant: str, windows: C.Windows | None = None, stage1: dict | None = None) -> C.Compensator:
    cfg = ws.cfg
    if stage1 is None:
        try:
            stage1 = load_stage1(ws, seed)
        except C.MissingStage1:
            if variant != "EndToEnd":
                raise
            stage1 = None
    windows = windows or training_windows(ws)
    try:
        res = C.train_stage2(windows, stage1, _seeded(cfg, seed), variant, log=log.debug)
    except (C.Diverged, NonFinite) as exc:
        raise NumericalError(str(exc)) from exc
    comp = C.Compensator(res.model, res.stats, cfg.inference.clamp_config())
    meta = {**comp.meta(), "kind": "stage2", "seed": seed, "model_hash": model_hash(cfg)}
    save_checkpoint(_mkparent(ws.checkpoint(seed, variant)), comp.blocks(), meta)
    _write_rows(ws.curve(seed, variant), ["epoch", "L_latent", "L_state", "L_total"], res.curve)
    log.info("stage 2 %s seed %d: L_total %.4f -> %.4f", variant, seed, res.curve[0][3], res.curve[-1][3])
    return comp


def train(ws: Workspace, stage: str = "all", seeds=None, variants=None) -> None:
    """Stage ``1``, ``2`` or ``all`` for each training seed and variant."""
    if stage not in ("1", "2", "all"):
        raise UsageError(f"stage must be 1, 2 or all, got {stage!r}")
    seeds = seeds if seeds is not None else ws.cfg.pipeline.train_seeds
    variants = variants if variants is not None else ws.cfg.pipeline.variants
    windows = training_windows(ws)
    for seed in seeds:
        stage1 = train_stage1(ws, seed, windows) if stage in ("1", "all") else None
        if stage in ("2", "all"):
            for v in variants:
                train_stage2(ws, seed, v, windows, stage1)


def load_compensator(ws: Workspace, seed: int, variant: str, clamp: C.ClampConfig | None = None) -> C.Compensator:
    path = ws.checkpoint(seed, variant)
    if not path.exists():
        raise DataError(f"missing checkpoint {path}; run train first")
    meta, blocks = load_checkpoint(path)
    _check_meta(meta, ws, path)
    return C.Compensator.from_blocks(meta, blocks, clamp or ws.cfg.inference.clamp_config())


# ---------------------------------------------------------------------------
# learned traces


def learned_name(variant: str, seed: int) -> str:
    return f"{variant}-s{seed}"


def learned_traces(ws: Workspace, split: str, variant: str, seed: int, clamp: C.ClampConfig | None = None, write: bool = True) -> list:
    """Compensated streams on top of the cached vanilla traces (non-feedback, so exact)."""
    comp = load_compensator(ws, seed, variant, clamp)
    raw = baseline_traces(ws, split, "inekf")
    out = []
    for s, tr in zip(split_seeds(ws, split), raw):
        ct = C.compensate_trace(tr, comp)
        if write:
            path = ws.trace(split, learned_name(variant, seed), s)
            header = {"estimator": "attennkf", "variant": variant, "train_seed": seed, "split": split, "seed": s,
                      "model_hash": model_hash(ws.cfg), "clamp": comp.meta()["clamp"]}
            save_trace(ct, _mkparent(path), header)
        out.append(ct)
    return out


def run(ws: Workspace, split: str, estimator: str, variant: str | None = None, seeds=None) -> None:
    if estimator in ("inekf", "sr"):
        baseline_traces(ws, split, estimator)
        return
    if estimator != "attennkf":
        raise UsageError(f"unknown estimator {estimator!r}")
    if variant is None:
        raise UsageError("estimator attennkf needs --variant")
    for seed in seeds if seeds is not None else ws.cfg.pipeline.train_seeds:
        learned_traces(ws, split, variant, seed)


# ---------------------------------------------------------------------------
# evaluation


def _load_traces(ws: Workspace, split: str, name: str) -> list:
    out = []
    for s in split_seeds(ws, split):
        path = ws.trace(split, name, s)
        if not path.exists():
            raise DataError(f"missing trace {path}")
        out.append(load_trace(path)[1])
    return out


def _stream(traces, compensated: bool):
    def get(i, ep):
        tr = traces[i]
        if len(tr) != len(ep) or not np.array_equal(tr.t, ep.t):
            raise DataError(f"trace {i} is misaligned with its episode")
        return tr.compensated() if compensated else tr.trajectory()

    return get


def estimator_runs(ws: Workspace, split: str, names, seeds=None) -> dict:
    """Row name -> per-seed trajectory callables, from the trace files."""
    seeds = seeds if seeds is not None else ws.cfg.pipeline.train_seeds
    runs = {}
    for name in names:
        if name == "InEKF":
            runs[name] = [_stream(_load_traces(ws, split, "inekf"), False)]
        elif name == "SR":
            runs[name] = [_stream(_load_traces(ws, split, "sr"), False)]
        elif name in C.VARIANTS:
            runs[name] = [_stream(_load_traces(ws, split, learned_name(name, s)), True) for s in seeds]
        else:
            raise UsageError(f"unknown estimator row {name!r}")
    return runs


def write_grid(ws: Workspace, stem: str, result: H.MatrixResult) -> None:
    H.write_table_csv(_mkparent(ws.report(stem + ".csv")), result.rows)
    per_seed = {n: [r.as_dict() for r in rs] for n, rs in result.per_seed.items()}
    H.write_table_json(ws.report(stem + ".json"), result.rows,
                       {"config_hash": config_hash(ws.cfg), "per_seed": per_seed,
                        "mean_re_pos": {n: result.mean_re_pos(n) for n in result.rows}})
    ws.report(stem + ".txt").write_text(H.format_table(result.rows) + "\n")


def evaluate(ws: Workspace, split: str = "test_slip", names=None) -> H.MatrixResult:
    names = names or ("InEKF", "SR")
    episodes = load_split(ws, split)
    try:
        result = H.run_matrix(episodes, estimator_runs(ws, split, names))
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    write_grid(ws, f"re_{split}", result)
    return result


def ablate(ws: Workspace, split: str = "test_slip") -> H.MatrixResult:
    """The full grid: both baselines plus every variant; missing pieces are produced first."""
    cfg = ws.cfg
    for est in ("inekf", "sr"):
        baseline_traces(ws, split, est)
    windows = None
    for seed in cfg.pipeline.train_seeds:
        for v in cfg.pipeline.variants:
            if not ws.checkpoint(seed, v).exists():
                windows = windows or training_windows(ws)
                if not ws.stage1(seed).exists():
                    train_stage1(ws, seed, windows)
                train_stage2(ws, seed, v, windows)
            learned_traces(ws, split, v, seed)
    names = [*H.BASELINES, *cfg.pipeline.variants]
    episodes = load_split(ws, split)
    result = H.run_matrix(episodes, estimator_runs(ws, split, names))
    write_grid(ws, f"ablation_{split}", result)
    return result


def correlation(ws: Workspace, split: str = "train"):
    """Slip level vs normalized state error of the vanilla filter, pooled over the split."""
    episodes = load_split(ws, split)
    traces = baseline_traces(ws, split, "inekf", episodes)
    errs, slip = [], []
    for ep, tr in zip(episodes, traces):
        R, v, p = tr.trajectory()
        errs.append([state_error_norms(R[k], v[k], p[k], ep.R[k], ep.v[k], ep.p[k]) for k in range(len(ep))])
        slip.append(tr.slip.max(axis=1))
    rep = correlation_report(np.vstack(errs), np.concatenate(slip))
    rep.to_csv(_mkparent(ws.report(f"correlation_{split}.csv")))
    return rep


def bench(ws: Workspace, variant: str = "Proposed", seed: int | None = None, block: int | None = None) -> dict:
    """Filter-only and full-pipeline throughput on the first held-out slip episode."""
    cfg = ws.cfg
    seed = cfg.pipeline.train_seeds[0] if seed is None else seed
    block = block or cfg.inference.block
    ep = load_split(ws, "test_slip")[0]
    comp = load_compensator(ws, seed, variant)

    def filter_only(episode, tick):
        run_filter(episode, cfg.filter, "inekf", cfg.sr, cfg.slipsig, on_frame=lambda k, tr: tick())

    def full(episode, tick):
        C.run_attennkf(episode, comp, cfg.filter, cfg.slipsig, block=block, tick=tick)

    full(ep, lambda: None)  # warm start
    out = {"variant": variant, "block": block, "steps": len(ep),
           "filter": H.benchmark_throughput(filter_only, ep).as_dict(),
           "full": H.benchmark_throughput(full, ep).as_dict()}
    _mkparent(ws.report("bench.json")).write_text(json.dumps(out, indent=2, sort_keys=True) + "\n")
    return out


def plot_data(ws: Workspace, split: str = "test_slip", index: int = 0, seed: int | None = None) -> Path:
    """Per-frame export of ground truth and every available estimate for one episode."""
    cfg = ws.cfg
    seed = cfg.pipeline.train_seeds[0] if seed is None else seed
    ep = load_split(ws, split)[index]
    s = split_seeds(ws, split)[index]
    trajs = {"InEKF": baseline_traces(ws, split, "inekf")[index].trajectory()}
    if ws.trace(split, "sr", s).exists():
        trajs["SR"] = load_trace(ws.trace(split, "sr", s))[1].trajectory()
    for v in C.VARIANTS:
        path = ws.trace(split, learned_name(v, seed), s)
        if path.exists():
            trajs[v] = load_trace(path)[1].compensated()
    slip = baseline_traces(ws, split, "inekf")[index].slip
    out = _mkparent(ws.report(f"plot_{split}_ep{s:06d}.csv"))
    H.write_plot_data(out, ep, trajs, slip)
    return out


def repro(ws: Workspace) -> H.MatrixResult:
    """simulate -> train -> run -> eval, with everything regenerated."""
    simulate(ws)
    train(ws, "all")
    for split in ("test_slip", "test_clean"):
        for est in ("inekf", "sr"):
            baseline_traces(ws, split, est)
    correlation(ws)
    result = ablate(ws, "test_slip")
    evaluate(ws, "test_clean", ("InEKF", "SR"))
    return result
