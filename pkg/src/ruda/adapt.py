"""Source pretraining and the adversarial + clustering adaptation loop."""
from __future__ import annotations

import csv
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

from .data import DomainDataset, Minibatch, sample_minibatch, sample_rows
from .evaluation import MetricsReport, evaluate, predict
from .losses import (auxiliary_dist, centroid_predictions, classification_loss,
                     clustering_loss, discriminator_loss, dissimilarity_loss,
                     encoder_loss, soft_assign)
from .nets import (DivergenceError, ModelBundle, classify, discriminate, encode,
                   encode_all, save_checkpoint)

log = logging.getLogger(__name__)

MODES = ("balanced", "imbalanced", "partial")
ABLATIONS = ("full", "no_dis", "adda_only", "adda_mix")
OPTIMIZERS = ("sgd", "adam")
LOSS_NAMES = ("L_adv", "L_enc", "L_dec", "L_dis")
DEFAULT_WARMUP = 100


class ConfigError(ValueError):
    """Invalid configuration value; ``key`` names the offending field."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass
class AdaptationConfig:
    gamma_adv: float = 1e-3
    gamma_enc: float = 1e-5
    gamma_dec: float = 1e-4
    gamma_dis: Optional[float] = None  # resolved to 2 * gamma_dec
    i_adv: Optional[int] = None  # resolved to 0 in partial mode, DEFAULT_WARMUP otherwise
    batch_size: int = 64
    max_iters: int = 2000
    mode: str = "balanced"
    mix_ratio: Optional[float] = None  # resolved to 0.5 in partial mode, 0 otherwise
    ablation: str = "full"
    seed: int = 0
    optimizer: str = "adam"
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    alpha: float = 1.0
    eval_every: int = 100
    early_stop: bool = False
    churn_tol: float = 1e-3
    churn_window: int = 200
    pretrain_epochs: int = 20
    pretrain_lr: float = 1e-3

    def __post_init__(self):
        if self.gamma_dis is None and _is_number(self.gamma_dec):
            self.gamma_dis = 2 * self.gamma_dec
        if self.i_adv is None:
            self.i_adv = 0 if self.mode == "partial" else min(DEFAULT_WARMUP, max(self.max_iters - 1, 0))
        if self.mix_ratio is None:
            self.mix_ratio = 0.5 if self.mode == "partial" else 0.0
        self.validate()

    def validate(self):
        for name in ("gamma_adv", "gamma_enc", "gamma_dec", "gamma_dis", "pretrain_lr", "alpha"):
            v = getattr(self, name)
            if not _is_number(v) or not v > 0 or not math.isfinite(v):
                raise ConfigError(name, f"must be a positive number, got {v!r}")
        for name in ("i_adv", "seed", "pretrain_epochs"):
            v = getattr(self, name)
            if not _is_int(v) or v < 0:
                raise ConfigError(name, f"must be a nonnegative integer, got {v!r}")
        for name in ("batch_size", "max_iters", "eval_every", "churn_window"):
            v = getattr(self, name)
            if not _is_int(v) or v < 1:
                raise ConfigError(name, f"must be a positive integer, got {v!r}")
        if self.i_adv >= self.max_iters:
            raise ConfigError("i_adv", f"must be smaller than max_iters ({self.max_iters})")
        if self.mode not in MODES:
            raise ConfigError("mode", f"must be one of {MODES}, got {self.mode!r}")
        if self.ablation not in ABLATIONS:
            raise ConfigError("ablation", f"must be one of {ABLATIONS}, got {self.ablation!r}")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError("optimizer", f"must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if not _is_number(self.mix_ratio) or not 0 <= self.mix_ratio <= 1:
            raise ConfigError("mix_ratio", f"must lie in [0, 1], got {self.mix_ratio!r}")
        if self.mode == "partial" and self.mix_ratio == 0:
            raise ConfigError("mix_ratio", "partial mode needs a nonzero mix ratio")
        if self.mode != "partial" and self.mix_ratio != 0:
            raise ConfigError("mix_ratio", "source mixing is only used in partial mode")
        if self.ablation == "adda_mix" and self.mode != "partial":
            raise ConfigError("ablation", "adda_mix requires partial mode")
        for name in ("adam_beta1", "adam_beta2", "churn_tol"):
            v = getattr(self, name)
            if not _is_number(v) or not 0 <= v < 1:
                raise ConfigError(name, f"must lie in [0, 1), got {v!r}")
        if not isinstance(self.early_stop, bool):
            raise ConfigError("early_stop", "must be a boolean")

    @property
    def clustering(self) -> bool:
        return self.ablation in ("full", "no_dis")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def _is_number(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


@dataclass
class TrainState:
    bundle: ModelBundle
    centroids: torch.Tensor
    rng: np.random.Generator
    disc_opt: torch.optim.Optimizer
    enc_opt: torch.optim.Optimizer
    iter: int = 0
    loss_traces: dict = field(default_factory=lambda: {k: [] for k in ("iter", *LOSS_NAMES)})
    last_updates: list = field(default_factory=list)
    churn: list = field(default_factory=list)  # (iter, fraction of changed pseudo-labels)
    pseudo_labels: Optional[np.ndarray] = None


def _params(module: torch.nn.Module) -> list:
    return [p for p in module.parameters() if p.requires_grad]


def _finite_or_raise(value: torch.Tensor, name: str, grads=()):
    if not torch.isfinite(value).all():
        raise DivergenceError(f"non-finite {name} at value {value.item()}")
    for g in grads:
        if not torch.isfinite(g).all():
            raise DivergenceError(f"non-finite gradient of {name}")


# -- pretraining & initialization -------------------------------------------

def pretrain_source(bundle: ModelBundle, source: DomainDataset, epochs: int = 20,
                    lr: float = 1e-3, seed: int = 0, batch_size: int = 64) -> ModelBundle:
    """Fit source encoder + classifier by maximizing the mean log-likelihood,
    then freeze both and re-sync the target encoder to the source encoder."""
    if not source.is_labeled:
        raise ValueError("pretraining requires a labeled source dataset")
    bundle = bundle.copy()
    params = list(bundle.source_encoder.parameters()) + list(bundle.classifier.parameters())
    opt = torch.optim.Adam(params, lr=lr)
    rng = np.random.default_rng(seed)
    x_all = torch.from_numpy(np.array(source.instances))
    y_all = torch.from_numpy(np.array(source.labels))
    for epoch in range(epochs):
        order = torch.from_numpy(rng.permutation(len(source)))
        for start in range(0, len(source), batch_size):
            idx = order[start:start + batch_size]
            probs = classify(bundle, encode(bundle, "source", x_all[idx]))
            loss = -classification_loss(probs, y_all[idx])
            if not torch.isfinite(loss):
                raise DivergenceError(f"non-finite L_cla in pretraining epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
    bundle.freeze("source_encoder", "classifier")
    bundle.target_encoder.load_state_dict(bundle.source_encoder.state_dict())
    return bundle


def _jitter(c: int, dim: int) -> torch.Tensor:
    return torch.from_numpy(np.random.default_rng(c).standard_normal(dim) * 1e-3).float()


@torch.no_grad()
def init_centroids(bundle: ModelBundle, target: DomainDataset, source: DomainDataset,
                   mode: str) -> torch.Tensor:
    """One centroid per source class.

    Balanced/imbalanced: mean target feature of instances predicted as c.
    Partial: mean source feature of instances labeled c. Empty classes fall
    back to the source class mean, then to the global mean plus jitter.
    """
    k, fdim = bundle.num_classes, bundle.feature_dim
    src_feats = encode_all(bundle, "source", source.instances)
    src_labels = source.labels
    if mode == "partial":
        if src_labels is None:
            raise ValueError("partial-mode initialization needs a labeled source")
        feats, groups = src_feats, src_labels
    else:
        feats = encode_all(bundle, "target", target.instances)
        groups = classify(bundle, feats).numpy().argmax(axis=1) if len(feats) else np.zeros(0, int)
    pool = torch.cat([feats, src_feats]) if mode != "partial" else src_feats
    global_mean = pool.mean(0) if len(pool) else torch.zeros(fdim)
    centroids = torch.empty(k, fdim)
    for c in range(k):
        members = torch.from_numpy(np.flatnonzero(groups == c))
        if len(members):
            centroids[c] = feats[members].mean(0)
            continue
        src_members = (torch.from_numpy(np.flatnonzero(src_labels == c))
                       if src_labels is not None else torch.zeros(0, dtype=torch.long))
        if len(src_members):
            centroids[c] = src_feats[src_members].mean(0)
        else:
            centroids[c] = global_mean + _jitter(c, fdim)
    return centroids


def make_optimizer(params, lr: float, cfg: AdaptationConfig) -> torch.optim.Optimizer:
    if cfg.optimizer == "adam":
        return torch.optim.Adam(params, lr=lr, betas=(cfg.adam_beta1, cfg.adam_beta2))
    return torch.optim.SGD(params, lr=lr)


def init_state(bundle: ModelBundle, target: DomainDataset, source: DomainDataset,
               cfg: AdaptationConfig) -> TrainState:
    bundle = bundle.copy()
    if not {"source_encoder", "classifier"} <= bundle.frozen:
        bundle.freeze("source_encoder", "classifier")
    centroids = init_centroids(bundle, target, source, cfg.mode)
    return TrainState(
        bundle=bundle,
        centroids=centroids,
        rng=np.random.default_rng(cfg.seed),
        disc_opt=make_optimizer(_params(bundle.discriminator), cfg.gamma_adv, cfg),
        enc_opt=make_optimizer(_params(bundle.target_encoder), cfg.gamma_enc, cfg),
    )


# -- one iteration -------------------------------------------------------------

def adaptation_step(state: TrainState, target_batch: Minibatch, source_batch: Minibatch,
                    cfg: AdaptationConfig) -> TrainState:
    """One iteration: clustering updates (after warmup), then the
    discriminator ascent, then the target-encoder ascent."""
    bundle = state.bundle
    tgt_x = torch.from_numpy(np.asarray(target_batch.inputs))
    src_x = torch.from_numpy(np.asarray(source_batch.inputs))
    enc_params = _params(bundle.target_encoder)
    touched = []
    l_dec = l_dis = float("nan")

    if state.iter > cfg.i_adv and cfg.clustering:
        centroids = state.centroids.detach().requires_grad_(True)
        q = soft_assign(encode(bundle, "target", tgt_x), centroids, cfg.alpha)
        _finite_or_raise(q.Q.detach().sum(), "L_dec")
        loss = clustering_loss(auxiliary_dist(q), q)
        grads = torch.autograd.grad(loss, [*enc_params, centroids])
        _finite_or_raise(loss, "L_dec", grads)
        with torch.no_grad():
            # one gradient evaluation, applied to both groups in turn
            for p, g in zip(enc_params, grads[:-1]):
                p.sub_(cfg.gamma_dec * g)
            touched.append("dec:theta_Et")
            centroids = centroids.detach() - cfg.gamma_dec * grads[-1]
            touched.append("dec:Z_c")
        l_dec = loss.item()

        if cfg.ablation == "full":
            centroids.requires_grad_(True)
            loss = dissimilarity_loss(centroid_predictions(bundle.classifier, centroids))
            (g,) = torch.autograd.grad(loss, centroids)
            _finite_or_raise(loss, "L_dis", (g,))
            centroids = (centroids - cfg.gamma_dis * g).detach()
            touched.append("dis:Z_c")
            l_dis = loss.item()
        state.centroids = centroids.detach()

    with torch.no_grad():
        zs = encode(bundle, "source", src_x)
        zt = encode(bundle, "target", tgt_x)
    loss = discriminator_loss(discriminate(bundle, zs), discriminate(bundle, zt))
    disc_params = _params(bundle.discriminator)
    grads = torch.autograd.grad(-loss, disc_params)
    _finite_or_raise(loss, "L_adv", grads)
    for p, g in zip(disc_params, grads):
        p.grad = g
    state.disc_opt.step()
    touched.append("adv:theta_D")
    l_adv = loss.item()

    loss = encoder_loss(discriminate(bundle, encode(bundle, "target", tgt_x)))
    grads = torch.autograd.grad(-loss, enc_params)
    _finite_or_raise(loss, "L_enc", grads)
    for p, g in zip(enc_params, grads):
        p.grad = g
    state.enc_opt.step()
    touched.append("enc:theta_Et")
    l_enc = loss.item()

    traces = state.loss_traces
    traces["iter"].append(state.iter)
    for name, value in zip(LOSS_NAMES, (l_adv, l_enc, l_dec, l_dis)):
        traces[name].append(value)
    state.last_updates = touched
    state.iter += 1
    return state


# -- full run -------------------------------------------------------------------

def _update_churn(state: TrainState, target: DomainDataset) -> float:
    labels = predict(state.bundle, target.instances)
    prev = state.pseudo_labels
    churn = float(np.mean(labels != prev)) if prev is not None and len(labels) else 1.0
    state.pseudo_labels = labels
    state.churn.append((state.iter, churn))
    return churn


def converged(state: TrainState, cfg: AdaptationConfig) -> bool:
    window = [c for it, c in state.churn if it > state.iter - cfg.churn_window]
    covered = state.churn and state.churn[0][0] <= state.iter - cfg.churn_window
    return bool(covered and window and np.mean(window) < cfg.churn_tol)


def write_loss_traces(path, traces: dict):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iter", *LOSS_NAMES])
        for row in zip(traces["iter"], *(traces[k] for k in LOSS_NAMES)):
            w.writerow([row[0], *(repr(v) for v in row[1:])])


def run_adaptation(bundle: ModelBundle, target: DomainDataset, source: DomainDataset,
                   cfg: AdaptationConfig, output_dir=None,
                   on_eval: Optional[Callable[[dict], None]] = None):
    """Run the adaptation loop; returns ``(state, report)``.

    ``report`` is the final MetricsReport on ``target`` (None when the target
    is unlabeled). Labels of ``target`` are only read for reporting.
    With ``output_dir`` set, writes ``losses.csv``, ``metrics.jsonl``,
    ``metrics.json`` and ``checkpoint.pt`` there.
    """
    cfg.validate()
    if cfg.mode == "partial" and cfg.mix_ratio == 0:
        raise ConfigError("mix_ratio", "partial mode needs a nonzero mix ratio")
    state = init_state(bundle, target, source, cfg)
    train_target = target.unlabeled()
    train_source = source.unlabeled()
    out = Path(output_dir) if output_dir is not None else None
    metrics_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        metrics_fh = open(out / "metrics.jsonl", "w")

    def emit():
        churn = _update_churn(state, target)
        record = {"iter": state.iter, "churn": churn}
        for name in LOSS_NAMES:
            vals = state.loss_traces[name][-cfg.eval_every:]
            vals = [v for v in vals if not math.isnan(v)]
            record[name] = float(np.mean(vals)) if vals else None
        if target.is_labeled:
            report = evaluate(state.bundle, target, state.iter)
            record["overall_acc"] = report.overall_acc
            record["per_class_acc"] = report.per_class_acc
        if metrics_fh is not None:
            metrics_fh.write(json.dumps(record) + "\n")
        if on_eval is not None:
            on_eval(record)
        log.info(json.dumps(record))

    try:
        emit()
        while state.iter < cfg.max_iters:
            tb = sample_minibatch(train_target, train_source, cfg.batch_size, cfg.mix_ratio, state.rng)
            sb = sample_rows(train_source, cfg.batch_size, state.rng)
            if cfg.clustering and cfg.i_adv > 0 and state.iter == cfg.i_adv + 1:
                # warmup is over: seed the clusters from the adversarially warmed encoder
                state.centroids = init_centroids(state.bundle, target, source, cfg.mode)
            adaptation_step(state, tb, sb, cfg)
            if state.iter % cfg.eval_every == 0 or state.iter == cfg.max_iters:
                emit()
                if cfg.early_stop and converged(state, cfg):
                    log.info("pseudo-label churn below %g; stopping at iter %d", cfg.churn_tol, state.iter)
                    break
    finally:
        if metrics_fh is not None:
            metrics_fh.close()

    report = evaluate(state.bundle, target, state.iter) if target.is_labeled else None
    if out is not None:
        write_loss_traces(out / "losses.csv", state.loss_traces)
        save_checkpoint(out / "checkpoint.pt", state.bundle, state.iter, state.centroids)
        if report is not None:
            with open(out / "metrics.json", "w") as fh:
                fh.write(report.to_json())
    return state, report


# -- learning-rate sweep -----------------------------------------------------------

SWEEP_COLUMNS = ("gamma_dec", "gamma_dis", "overall_acc", "status")


def _sweep_cell(args):
    bundle, target, source, cfg, cell_dir = args
    try:
        _, report = run_adaptation(bundle, target, source, cfg, cell_dir)
        acc = report.overall_acc if report is not None else float("nan")
        return {"gamma_dec": cfg.gamma_dec, "gamma_dis": cfg.gamma_dis,
                "overall_acc": acc, "status": "ok"}
    except Exception as exc:  # one failed cell must not abort the sweep
        return {"gamma_dec": cfg.gamma_dec, "gamma_dis": cfg.gamma_dis,
                "overall_acc": float("nan"), "status": f"error: {type(exc).__name__}: {exc}"}


def lr_sweep(bundle: ModelBundle, target: DomainDataset, source: DomainDataset,
             base_cfg: AdaptationConfig, gamma_dec_grid, csv_path=None,
             output_dir=None, workers: int = 1) -> list:
    """One adaptation run per clustering learning rate, with the dissimilarity
    rate tied to twice that value. Returns rows of SWEEP_COLUMNS."""
    grid = [float(g) for g in gamma_dec_grid]
    if not grid:
        raise ValueError("gamma_dec grid is empty")
    if any(not g > 0 for g in grid):
        raise ValueError("gamma_dec grid values must be positive")
    jobs = []
    for i, g in enumerate(grid):
        cfg = replace(base_cfg, gamma_dec=g, gamma_dis=2 * g)
        cell_dir = None if output_dir is None else Path(output_dir) / f"cell{i:02d}_gdec{g:g}"
        jobs.append((bundle, target, source, cfg, cell_dir))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_sweep_cell, jobs))
    else:
        rows = [_sweep_cell(job) for job in jobs]
    if csv_path is not None:
        tmp = f"{os.fspath(csv_path)}.tmp"
        with open(tmp, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS)
            w.writeheader()
            for row in rows:
                w.writerow({**row, "overall_acc": repr(row["overall_acc"])})
        os.replace(tmp, csv_path)
    return rows
