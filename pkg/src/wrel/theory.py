"""Empirical probe of the mixed-supervision risk analysis.

For each grid cell (corruption q, weak count, seed) the probe measures the
embedding approximation error between weak and accurate expressions under a
frozen warm-up encoder, then trains one model on the mixed split and one on
the same images with all expressions accurate (identical init, batching, and
seeds), and reports the held-out accurate-expression risk gap. Aggregates
test the predicted trends: the gap should track the approximation error, and
at q=0 the two runs see byte-identical data so the gap vanishes.

Only the measurable left side of the bound is probed; its constants and the
hypothesis-class complexity term are out of scope by design.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch
from scipy import stats

from .data import (DatasetManifest, ReferringSample, SplitSpec, SyntheticSceneConfig,
                   generate_synthetic, stratified_split)
from .errors import ConfigError, WrelError
from .metrics import evaluate
from .model import RefSegModel, mixed_loss, prepare_item, seg_loss
from .params import param_checksum, rng_for
from .text import TextEncoder, Vocabulary, tokenize
from .train import AdamW, TrainConfig, poly_lr, joint_params, build_models

_EVAL_SEED_OFFSET = 7_777_777


@dataclass
class ProbeConfig:
    corruption_grid: list[float] = field(default_factory=lambda: [0.0, 0.25, 0.5, 0.75, 1.0])
    seeds: list[int] = field(default_factory=lambda: [101, 102, 103, 104, 105])
    n_weak_grid: list[int] = field(default_factory=lambda: [160])
    n_accurate: int = 40
    eval_size: int = 80
    epochs: int = 8
    warmup_epochs: int = 4
    lr: float = 2e-3
    warmup_lr: float = 2e-3
    weight_decay: float = 0.01
    poly_power: float = 0.9
    batch: int = 8
    grid_size: int = 24
    max_instances: int = 3
    token_len: int = 16
    encoder_dim: int = 32
    ref_dim: int = 32
    channels: tuple[int, int] = (8, 16)
    weak_weight: float = 1.0

    def validate(self) -> None:
        if not self.corruption_grid or not self.seeds or not self.n_weak_grid:
            raise ConfigError("probe grids must be nonempty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("probe seeds must be distinct")
        for q in self.corruption_grid:
            if not 0.0 <= q <= 1.0:
                raise ConfigError(f"corruption {q} outside [0,1]")
        if self.n_accurate < 1 or self.eval_size < 1:
            raise ConfigError("n_accurate and eval_size must be >= 1")

    @classmethod
    def from_dict(cls, cfg: dict) -> "ProbeConfig":
        probe = cfg["probe"]
        pc = cls(
            corruption_grid=list(probe["corruption_grid"]),
            seeds=list(probe["seeds"]),
            n_weak_grid=list(probe["n_weak_grid"]),
            n_accurate=probe["n_accurate"],
            eval_size=probe["eval_size"],
            epochs=probe["epochs"],
            warmup_epochs=probe["warmup_epochs"],
            lr=probe["lr"],
            warmup_lr=probe["warmup_lr"],
            weight_decay=probe["weight_decay"],
            poly_power=probe["poly_power"],
            batch=probe["batch"],
            grid_size=probe["grid_size"],
            max_instances=probe["max_instances"],
            token_len=cfg["text"]["token_len"],
            encoder_dim=cfg["text"]["dim"],
            ref_dim=cfg["text"]["ref_dim"],
            channels=tuple(cfg["model"]["channels"]),
            weak_weight=cfg["loss"]["weak_weight"],
        )
        pc.validate()
        return pc


@dataclass
class CellResult:
    q: float
    n_weak: int
    seed: int
    eps_hat: float
    risk_mixed: float
    risk_accurate: float
    gap: float
    miou_mixed: float
    miou_accurate: float


@dataclass
class BoundProbeReport:
    cells: list[dict]
    missing: list[dict]
    aggregates: dict

    def to_json(self) -> str:
        return json.dumps({"cells": self.cells, "missing": self.missing,
                           "aggregates": self.aggregates},
                          sort_keys=True, indent=2) + "\n"

    def to_csv(self) -> str:
        lines = ["q,n_weak,seed,eps_hat,gap"]
        for c in self.cells:
            lines.append(f"{c['q']},{c['n_weak']},{c['seed']},"
                         f"{c['eps_hat']:.10g},{c['gap']:.10g}")
        return "\n".join(lines) + "\n"


def estimate_epsilon(encoder: TextEncoder, pairs: list[tuple[str, str]], vocab: Vocabulary,
                     token_len: int) -> float:
    """Mean squared embedding distance between paired accurate/weak expressions."""
    if not pairs:
        raise ConfigError("estimate_epsilon needs at least one expression pair")
    with torch.no_grad():
        dists = []
        for accurate_text, weak_text in pairs:
            embeddings = []
            for text in (accurate_text, weak_text):
                ids, attn = tokenize(text, vocab, token_len)
                embeddings.append(encoder.encode(encoder.embed(ids, attn)))
            dists.append(float(torch.sum((embeddings[0] - embeddings[1]) ** 2)))
    return float(np.mean(dists))


def _probe_train_config(pc: ProbeConfig, seed: int) -> TrainConfig:
    tc = TrainConfig(seed=seed, token_len=pc.token_len, encoder_dim=pc.encoder_dim,
                     ref_dim=pc.ref_dim, channels=tuple(pc.channels),
                     weak_weight=pc.weak_weight)
    return tc


def _train_mixed(pc: ProbeConfig, items: list[dict], encoder: TextEncoder,
                 model: RefSegModel, seed: int, label: str, epochs: int, lr: float) -> None:
    opt = AdamW(joint_params(encoder, model), lr=lr, weight_decay=pc.weight_decay)
    n_batches = math.ceil(len(items) / pc.batch)
    total = epochs * n_batches
    step = 0
    for epoch in range(epochs):
        order = rng_for(seed, f"probe-order-{label}-{epoch}").permutation(len(items))
        for start in range(0, len(order), pc.batch):
            chunk = [items[i] for i in order[start : start + pc.batch]]
            loss = mixed_loss(chunk, model, encoder, None, pc.weak_weight)
            if not torch.isfinite(loss):
                raise WrelError(f"probe training diverged ({label}, epoch {epoch})")
            opt.lr = poly_lr(lr, step, total, pc.poly_power)
            opt.zero_grad()
            loss.backward()
            opt.step()
            step += 1


def _held_out_risk(encoder: TextEncoder, model: RefSegModel, samples: list[ReferringSample],
                   vocab: Vocabulary, token_len: int) -> float:
    with torch.no_grad():
        losses = []
        for s in samples:
            item = prepare_item(s, vocab, token_len)
            seq = encoder.embed(item["ids"], item["attn"])
            ref = encoder.encode(seq)
            logits = model.forward_batch(item["image"].unsqueeze(0), ref.unsqueeze(0))[0]
            losses.append(float(seg_loss(logits, item["mask"])))
    return float(np.mean(losses))


def _cell_data(pc: ProbeConfig, q: float, n_weak: int, seed: int):
    synth = SyntheticSceneConfig(grid_size=pc.grid_size, max_instances=pc.max_instances,
                                 corruption=q, seed=seed)
    train_manifest = generate_synthetic(synth, pc.n_accurate + n_weak)
    eval_synth = SyntheticSceneConfig(grid_size=pc.grid_size, max_instances=pc.max_instances,
                                      corruption=q, seed=seed + _EVAL_SEED_OFFSET)
    eval_samples = generate_synthetic(eval_synth, pc.eval_size).samples
    ratio = pc.n_accurate / (pc.n_accurate + n_weak)
    split = SplitSpec(accurate_ratio=ratio, seed=seed)
    accurate, weak = stratified_split(train_manifest, split, weak_source="stored")
    texts = [s.expression for s in train_manifest.samples]
    texts += [s.expression for s in weak]
    texts += [s.expression for s in eval_samples]
    vocab = Vocabulary.build(texts, extra_tokens=tuple(synth.classes))
    return train_manifest, accurate, weak, eval_samples, vocab


def run_cell(pc: ProbeConfig, q: float, n_weak: int, seed: int) -> CellResult:
    train_manifest, accurate, weak, eval_samples, vocab = _cell_data(pc, q, n_weak, seed)
    by_id = train_manifest.by_id()
    tc = _probe_train_config(pc, seed)

    mixed_items = [prepare_item(s, vocab, pc.token_len) for s in accurate + weak]
    accurate_twins = [by_id[s.sample_id] for s in weak]
    twin_items = [prepare_item(s, vocab, pc.token_len) for s in accurate]
    for weak_item, twin in zip([prepare_item(s, vocab, pc.token_len) for s in weak],
                               accurate_twins):
        ids, attn = tokenize(twin.expression, vocab, pc.token_len)
        replaced = dict(weak_item)
        replaced["ids"] = ids
        replaced["attn"] = attn
        twin_items.append(replaced)

    # Identical initialization for both runs, asserted by digest.
    enc_mixed, model_mixed = build_models(tc, len(vocab))
    enc_acc, model_acc = build_models(tc, len(vocab))
    if param_checksum(enc_mixed, model_mixed) != param_checksum(enc_acc, model_acc):
        raise WrelError("probe initializations diverged")

    # Frozen warm-up encoder for the approximation-error estimate.
    enc_phi, model_phi = build_models(tc, len(vocab))
    warm_items = [prepare_item(s, vocab, pc.token_len) for s in accurate]
    _train_mixed(pc, warm_items, enc_phi, model_phi, seed, "warmup",
                 pc.warmup_epochs, pc.warmup_lr)
    pairs = [(by_id[s.sample_id].expression, s.expression) for s in weak]
    eps_hat = estimate_epsilon(enc_phi, pairs, vocab, pc.token_len)

    _train_mixed(pc, mixed_items, enc_mixed, model_mixed, seed, "joint", pc.epochs, pc.lr)
    _train_mixed(pc, twin_items, enc_acc, model_acc, seed, "joint", pc.epochs, pc.lr)

    risk_mixed = _held_out_risk(enc_mixed, model_mixed, eval_samples, vocab, pc.token_len)
    risk_acc = _held_out_risk(enc_acc, model_acc, eval_samples, vocab, pc.token_len)
    miou_mixed = evaluate(model_mixed, enc_mixed, eval_samples, vocab, pc.token_len,
                          split="probe").miou
    miou_acc = evaluate(model_acc, enc_acc, eval_samples, vocab, pc.token_len,
                        split="probe").miou
    return CellResult(q=q, n_weak=n_weak, seed=seed, eps_hat=eps_hat,
                      risk_mixed=risk_mixed, risk_accurate=risk_acc,
                      gap=risk_mixed - risk_acc,
                      miou_mixed=miou_mixed, miou_accurate=miou_acc)


def _spearman(xs: list[float], ys: list[float]) -> float | None:
    if len(xs) < 2 or len(set(xs)) < 2 or len(set(ys)) < 2:
        return None
    rho = stats.spearmanr(xs, ys).statistic
    return None if np.isnan(rho) else float(rho)


def sweep(pc: ProbeConfig) -> BoundProbeReport:
    """Run the (q x n_weak x seed) grid and aggregate the trend statistics."""
    pc.validate()
    cells: list[dict] = []
    missing: list[dict] = []
    for q in pc.corruption_grid:
        for n_weak in pc.n_weak_grid:
            for seed in pc.seeds:
                try:
                    cells.append(asdict(run_cell(pc, q, n_weak, seed)))
                except WrelError as exc:
                    missing.append({"q": q, "n_weak": n_weak, "seed": seed,
                                    "error": str(exc)})

    def mean_over_seeds(key: str, q: float, n_weak: int) -> float:
        vals = [c[key] for c in cells if c["q"] == q and c["n_weak"] == n_weak]
        return float(np.mean(vals)) if vals else float("nan")

    by_q: dict[str, dict] = {}
    gap_vs_eps: dict[str, float | None] = {}
    for n_weak in pc.n_weak_grid:
        eps_means = [mean_over_seeds("eps_hat", q, n_weak) for q in pc.corruption_grid]
        gap_means = [mean_over_seeds("gap", q, n_weak) for q in pc.corruption_grid]
        gap_vs_eps[str(n_weak)] = _spearman(eps_means, gap_means)
        for q, e, g in zip(pc.corruption_grid, eps_means, gap_means):
            by_q.setdefault(str(q), {})[str(n_weak)] = {"mean_eps": e, "mean_gap": g}
    gap_vs_n_weak: dict[str, float | None] = {}
    if len(pc.n_weak_grid) > 1:
        for q in pc.corruption_grid:
            gaps = [mean_over_seeds("gap", q, nw) for nw in pc.n_weak_grid]
            gap_vs_n_weak[str(q)] = _spearman([float(nw) for nw in pc.n_weak_grid], gaps)
    degenerate = len(cells) < 2 or len(pc.corruption_grid) < 2
    aggregates = {
        "degenerate": degenerate,
        "gap_vs_eps_spearman": gap_vs_eps if not degenerate else {},
        "gap_vs_n_weak_spearman": gap_vs_n_weak,
        "mean_by_q": by_q,
    }
    return BoundProbeReport(cells=cells, missing=missing, aggregates=aggregates)


def write_report(report: BoundProbeReport, out_dir: Path) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "bound_report.json").write_text(report.to_json(), encoding="utf-8")
    (out_dir / "bound_report.csv").write_text(report.to_csv(), encoding="utf-8")
