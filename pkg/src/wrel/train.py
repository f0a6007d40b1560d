"""Three-stage training: warm-up, bank warm-up, and joint teacher-student.

Stage 1 trains encoder+model on the accurate subset. Stage 2 calibrates the
prompt bank against the frozen stage-1 parameters. Stage 3 runs the joint
loop: per batch, calibrate the bank on the frozen teacher, build mixed
referring embeddings (weak ones detached), take one student step, then
update the teacher as a scheduled EMA of the student.

Batch order for stage s and epoch e is a pure function of (seed, s, e), so
resuming from a checkpoint reproduces the remaining trajectory without
serializing generator state.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError, TrainingError
from .lrb import PromptBank, calibrate, fill
from .metrics import evaluate
from .model import RefSegModel, prepare_item
from .params import named_arrays, param_checksum, rng_for
from .text import TextEncoder


# ---------------------------------------------------------------------------
# Configuration


@dataclass
class Stage1Config:
    epochs: int = 15
    lr: float = 3e-5
    weight_decay: float = 0.01
    poly_power: float = 0.9
    batch: int = 8


@dataclass
class Stage2Config:
    epochs: int = 40
    aux_lr: float = 1e-5  # reserved for unfrozen auxiliaries; the default pipeline trains bank only
    prompt_lr: float = 1e-6
    inner_steps: int = 1
    batch: int = 8


@dataclass
class Stage3Config:
    epochs: int = 40
    lr: float = 3e-5
    weight_decay: float = 0.01
    poly_power: float = 0.9
    batch: int = 8
    prompt_lr: float = 1e-6
    inner_steps: int = 1
    update_freq: int = 1
    alpha_max: float = 0.9995


@dataclass
class TrainConfig:
    stage1: Stage1Config = field(default_factory=Stage1Config)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    stage3: Stage3Config = field(default_factory=Stage3Config)
    weak_weight: float = 1.0
    seed: int = 0
    token_len: int = 16
    encoder_dim: int = 32
    ref_dim: int = 32
    channels: tuple[int, int] = (8, 16)
    prompt_tokens: int = 4
    prompt_init_std: float = 0.02

    def validate(self) -> None:
        for name, lr in (("stage1.lr", self.stage1.lr), ("stage2.prompt_lr", self.stage2.prompt_lr),
                         ("stage3.lr", self.stage3.lr), ("stage3.prompt_lr", self.stage3.prompt_lr)):
            if lr <= 0:
                raise ConfigError(f"{name} must be > 0")
        if self.stage3.inner_steps < 0:
            raise ConfigError("stage3.inner_steps must be >= 0")
        if self.stage3.update_freq < 1:
            raise ConfigError("stage3.update_freq must be >= 1")
        if not 0.0 < self.stage3.alpha_max <= 1.0:
            raise ConfigError("stage3.alpha_max must lie in (0,1]")
        for name, e in (("stage1", self.stage1.epochs), ("stage2", self.stage2.epochs),
                        ("stage3", self.stage3.epochs)):
            if e < 0:
                raise ConfigError(f"{name}.epochs must be >= 0")


# ---------------------------------------------------------------------------
# EMA


@dataclass
class EmaSchedule:
    alpha_max: float = 0.9995
    ramp: object = None  # optional callable t -> alpha, overrides the default

    def __post_init__(self):
        if not 0.0 < self.alpha_max <= 1.0:
            raise ConfigError("alpha_max must lie in (0,1]")


def ema_alpha(t: int, schedule: EmaSchedule) -> float:
    """Momentum at step t: starts at 0, ramps as 1 - 1/(t+1), capped."""
    if t < 0:
        raise ConfigError("t must be >= 0")
    if schedule.ramp is not None:
        return min(schedule.alpha_max, float(schedule.ramp(t)))
    return min(schedule.alpha_max, 1.0 - 1.0 / (t + 1))


def ema_update(teacher: torch.nn.Module, student: torch.nn.Module, alpha: float) -> None:
    """In-place teacher <- alpha * teacher + (1 - alpha) * student."""
    t_params = dict(teacher.named_parameters())
    s_params = dict(student.named_parameters())
    if set(t_params) != set(s_params):
        raise ConfigError("teacher/student parameter name sets differ")
    with torch.no_grad():
        for name, tp in t_params.items():
            tp.mul_(alpha).add_(s_params[name], alpha=1.0 - alpha)


# ---------------------------------------------------------------------------
# Optimizer


class AdamW:
    """Decoupled-weight-decay Adam over named parameters.

    Matches the reference torch.optim.AdamW update order; state is plain
    float64 arrays so checkpoints restore trajectories exactly.
    """

    def __init__(self, named_params: dict[str, torch.nn.Parameter], lr: float,
                 weight_decay: float = 0.0, betas: tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8):
        self.params = dict(named_params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.state = {
            name: {"step": 0, "m": torch.zeros_like(p), "v": torch.zeros_like(p)}
            for name, p in self.params.items()
        }

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    @torch.no_grad()
    def step(self) -> None:
        b1, b2 = self.betas
        for name, p in self.params.items():
            if p.grad is None:
                continue
            st = self.state[name]
            st["step"] += 1
            p.mul_(1.0 - self.lr * self.weight_decay)
            st["m"].mul_(b1).add_(p.grad, alpha=1.0 - b1)
            st["v"].mul_(b2).addcmul_(p.grad, p.grad, value=1.0 - b2)
            bias1 = 1.0 - b1 ** st["step"]
            bias2 = 1.0 - b2 ** st["step"]
            denom = (st["v"] / bias2).sqrt().add_(self.eps)
            p.addcdiv_(st["m"], denom, value=-self.lr / bias1)

    def state_arrays(self) -> tuple[dict[str, np.ndarray], dict[str, int]]:
        arrays = {}
        steps = {}
        for name, st in self.state.items():
            arrays[f"m.{name}"] = st["m"].numpy().copy()
            arrays[f"v.{name}"] = st["v"].numpy().copy()
            steps[name] = st["step"]
        return arrays, steps

    def load_state_arrays(self, arrays: dict[str, np.ndarray], steps: dict[str, int]) -> None:
        for name in self.params:
            self.state[name]["m"] = torch.from_numpy(arrays[f"m.{name}"].astype(np.float64))
            self.state[name]["v"] = torch.from_numpy(arrays[f"v.{name}"].astype(np.float64))
            self.state[name]["step"] = int(steps[name])


def poly_lr(base_lr: float, step: int, total_steps: int, power: float) -> float:
    frac = min(1.0, step / max(1, total_steps))
    return base_lr * (1.0 - frac) ** power


# ---------------------------------------------------------------------------
# Shared helpers


def build_models(cfg: TrainConfig, vocab_size: int) -> tuple[TextEncoder, RefSegModel]:
    encoder = TextEncoder(vocab_size, dim=cfg.encoder_dim, out_dim=cfg.ref_dim,
                          rng=rng_for(cfg.seed, "init-encoder"))
    model = RefSegModel(ref_dim=cfg.ref_dim, channels=tuple(cfg.channels),
                        rng=rng_for(cfg.seed, "init-model"))
    return encoder, model


def joint_params(encoder: torch.nn.Module, model: torch.nn.Module
                 ) -> dict[str, torch.nn.Parameter]:
    out = {f"encoder.{n}": p for n, p in sorted(encoder.named_parameters())}
    out.update({f"model.{n}": p for n, p in sorted(model.named_parameters())})
    return out


def _batches(order: np.ndarray, batch: int):
    for start in range(0, len(order), batch):
        yield order[start : start + batch]


def _encode_items(items: list[dict], encoder: TextEncoder) -> torch.Tensor:
    xs = []
    attns = []
    for it in items:
        seq = encoder.embed(it["ids"], it["attn"])
        xs.append(seq.x)
        attns.append(torch.from_numpy(np.ascontiguousarray(it["attn"], dtype=np.int64)))
    return encoder.encode_batch(torch.stack(xs), torch.stack(attns))


def _enhance_items(items: list[dict], bank: PromptBank, encoder: TextEncoder) -> torch.Tensor:
    xs = []
    attns = []
    for it in items:
        seq = encoder.embed(it["ids"], it["attn"])
        fr = fill(seq, bank.prompts[bank.row_index(it["sample_id"])])
        xs.append(fr.x)
        attns.append(torch.from_numpy(np.ascontiguousarray(fr.attn, dtype=np.int64)))
    return encoder.encode_batch(torch.stack(xs), torch.stack(attns))


def _check_finite(loss: torch.Tensor, where: str) -> None:
    if not torch.isfinite(loss):
        raise TrainingError(f"loss became non-finite during {where}: {loss.item()}")


# ---------------------------------------------------------------------------
# Stage 1


def stage1_warmup(cfg: TrainConfig, accurate_samples: list, vocab,
                  encoder: TextEncoder | None = None, model: RefSegModel | None = None,
                  opt: "AdamW | None" = None, start_epoch: int = 0,
                  on_epoch=None) -> tuple[TextEncoder, RefSegModel, list[dict]]:
    """Warm-up on accurate data; returns the initial parameters for later stages."""
    if not accurate_samples:
        raise ConfigError("stage 1 requires a nonempty accurate split")
    if encoder is None or model is None:
        encoder, model = build_models(cfg, len(vocab))
    items = [prepare_item(s, vocab, cfg.token_len) for s in accurate_samples]
    images = torch.stack([it["image"] for it in items])
    masks = torch.stack([it["mask"] for it in items])
    if opt is None:
        opt = AdamW(joint_params(encoder, model), lr=cfg.stage1.lr,
                    weight_decay=cfg.stage1.weight_decay)
    n_batches = math.ceil(len(items) / cfg.stage1.batch)
    total_steps = cfg.stage1.epochs * n_batches
    history = []
    step = start_epoch * n_batches
    for epoch in range(start_epoch, cfg.stage1.epochs):
        order = rng_for(cfg.seed, f"stage1-order-{epoch}").permutation(len(items))
        epoch_loss = 0.0
        for chunk in _batches(order, cfg.stage1.batch):
            batch_items = [items[i] for i in chunk]
            refs = _encode_items(batch_items, encoder)
            logits = model.forward_batch(images[chunk], refs)
            loss = F.binary_cross_entropy_with_logits(logits, masks[chunk])
            _check_finite(loss, f"stage 1 epoch {epoch}")
            opt.lr = poly_lr(cfg.stage1.lr, step, total_steps, cfg.stage1.poly_power)
            opt.zero_grad()
            loss.backward()
            opt.step()
            step += 1
            epoch_loss += loss.item() * len(chunk)
        record = {"stage": 1, "epoch": epoch, "train_loss": epoch_loss / len(items)}
        history.append(record)
        if on_epoch:
            on_epoch(record, encoder, model)
    return encoder, model, history


# ---------------------------------------------------------------------------
# Stage 2


def stage2_lrb_warmup(cfg: TrainConfig, encoder: TextEncoder, model: RefSegModel,
                      weak_samples: list, vocab, bank: PromptBank | None = None,
                      start_epoch: int = 0, on_epoch=None) -> tuple[PromptBank, list[dict]]:
    """Calibrate the bank over the weak split against frozen warm-up parameters."""
    from .lrb import prepare_weak_item

    if bank is None:
        bank = PromptBank.build(weak_samples, vocab, cfg.token_len, cfg.prompt_tokens,
                                cfg.encoder_dim, cfg.seed, cfg.prompt_init_std)
    items = [prepare_weak_item(s, vocab, cfg.token_len) for s in weak_samples]
    history = []
    for epoch in range(start_epoch, cfg.stage2.epochs):
        order = rng_for(cfg.seed, f"stage2-order-{epoch}").permutation(len(items))
        losses = []
        for chunk in _batches(order, cfg.stage2.batch):
            batch = [items[i] for i in chunk]
            initial = calibrate(bank, batch, model, encoder,
                                steps=cfg.stage2.inner_steps, lr=cfg.stage2.prompt_lr)
            losses.extend(initial.tolist())
        record = {"stage": 2, "epoch": epoch, "weak_loss": float(np.mean(losses))}
        history.append(record)
        if on_epoch:
            on_epoch(record, bank)
    return bank, history


# ---------------------------------------------------------------------------
# Stage 3


@dataclass
class Stage3Trace:
    """Optional per-step instrumentation for contract checks."""

    snapshots: bool = False          # record student parameter copies per step
    measure_bank_grad: bool = False  # measure d(student loss)/d(bank) each step
    checksums: bool = False          # record teacher checksums around (a) and (d)
    records: list = field(default_factory=list)


class Stage3Loop:
    """Joint loop owning mutable state; one call to run_epoch per epoch."""

    def __init__(self, cfg: TrainConfig, student_encoder: TextEncoder,
                 student_model: RefSegModel, teacher_encoder: TextEncoder,
                 teacher_model: RefSegModel, bank: PromptBank | None,
                 samples: list, vocab, t: int = 0, trace: Stage3Trace | None = None):
        cfg.validate()
        self.cfg = cfg
        self.student_encoder = student_encoder
        self.student_model = student_model
        self.teacher_encoder = teacher_encoder
        self.teacher_model = teacher_model
        for p in list(teacher_encoder.parameters()) + list(teacher_model.parameters()):
            p.requires_grad_(False)
        self.bank = bank
        self.use_bank = bank is not None and cfg.stage3.inner_steps > 0
        if not samples:
            raise ConfigError("stage 3 requires a nonempty mixed split")
        self.items = [prepare_item(s, vocab, cfg.token_len) for s in samples]
        self.images = torch.stack([it["image"] for it in self.items])
        self.masks = torch.stack([it["mask"] for it in self.items])
        self.vocab = vocab
        self.t = t
        self.trace = trace
        self.schedule = EmaSchedule(alpha_max=cfg.stage3.alpha_max)
        self.opt = AdamW(joint_params(student_encoder, student_model),
                         lr=cfg.stage3.lr, weight_decay=cfg.stage3.weight_decay)
        self.n_batches = math.ceil(len(self.items) / cfg.stage3.batch)
        self.total_steps = cfg.stage3.epochs * self.n_batches

    def run_epoch(self, epoch: int) -> dict:
        cfg3 = self.cfg.stage3
        order = rng_for(self.cfg.seed, f"stage3-order-{epoch}").permutation(len(self.items))
        epoch_loss = 0.0
        for chunk in _batches(order, cfg3.batch):
            batch_items = [self.items[i] for i in chunk]
            epoch_loss += self._step(batch_items, chunk) * len(chunk)
        return {"stage": 3, "epoch": epoch, "train_loss": epoch_loss / len(self.items)}

    def _step(self, batch_items: list[dict], chunk: np.ndarray) -> float:
        cfg3 = self.cfg.stage3
        rec: dict = {"t": self.t}
        weak_items = [it for it in batch_items if it["weak"]]

        # (a) inner-loop calibration on the frozen teacher
        if self.trace and self.trace.checksums:
            rec["teacher_pre_calibrate"] = param_checksum(self.teacher_encoder,
                                                          self.teacher_model)
        if self.use_bank and weak_items and self.t % cfg3.update_freq == 0:
            calibrate(self.bank,
                      [(it["sample_id"], it["image"], it["mask"], it["ids"], it["attn"])
                       for it in weak_items],
                      self.teacher_model, self.teacher_encoder,
                      steps=cfg3.inner_steps, lr=cfg3.prompt_lr)
        if self.trace and self.trace.checksums:
            rec["teacher_post_calibrate"] = param_checksum(self.teacher_encoder,
                                                           self.teacher_model)

        # (b) mixed referring embeddings: weak side severed from the bank
        measuring = bool(self.trace and self.trace.measure_bank_grad and self.use_bank)
        if measuring:
            self.bank.prompts.requires_grad_(True)
        rows: list[torch.Tensor | None] = [None] * len(batch_items)
        acc_pos = [i for i, it in enumerate(batch_items) if not it["weak"]]
        weak_pos = [i for i, it in enumerate(batch_items) if it["weak"]]
        if acc_pos:
            acc_refs = _encode_items([batch_items[i] for i in acc_pos], self.student_encoder)
            for j, pos in enumerate(acc_pos):
                rows[pos] = acc_refs[j]
        if weak_pos:
            if self.use_bank:
                weak_refs = _enhance_items([batch_items[i] for i in weak_pos],
                                           self.bank, self.teacher_encoder).detach()
            else:
                weak_refs = _encode_items([batch_items[i] for i in weak_pos],
                                          self.student_encoder)
            for j, pos in enumerate(weak_pos):
                rows[pos] = weak_refs[j]
        refs = torch.stack(rows)

        # (c) one student step on the batch mean
        logits = self.student_model.forward_batch(self.images[chunk], refs)
        loss = F.binary_cross_entropy_with_logits(logits, self.masks[chunk])
        _check_finite(loss, f"stage 3 step {self.t}")
        if measuring:
            grad = torch.autograd.grad(loss, self.bank.prompts, retain_graph=True,
                                       allow_unused=True)[0]
            rec["bank_grad_absmax"] = 0.0 if grad is None else float(grad.abs().max())
            self.bank.prompts.requires_grad_(False)
        self.opt.lr = poly_lr(cfg3.lr, self.t, self.total_steps, cfg3.poly_power)
        self.opt.zero_grad()
        loss.backward()
        self.opt.step()
        if self.trace and self.trace.snapshots:
            rec["student"] = {
                **{f"encoder.{n}": a for n, a in named_arrays(self.student_encoder).items()},
                **{f"model.{n}": a for n, a in named_arrays(self.student_model).items()},
            }

        # (d) EMA teacher update
        alpha = ema_alpha(self.t, self.schedule)
        ema_update(self.teacher_encoder, self.student_encoder, alpha)
        ema_update(self.teacher_model, self.student_model, alpha)
        rec["alpha"] = alpha
        rec["loss"] = loss.item()
        if self.trace and self.trace.checksums:
            rec["teacher_post_ema"] = param_checksum(self.teacher_encoder, self.teacher_model)
        if self.trace is not None:
            self.trace.records.append(rec)
        self.t += 1
        return loss.item()


def stage3_joint(cfg: TrainConfig, encoder0: TextEncoder, model0: RefSegModel,
                 bank: PromptBank | None, samples: list, vocab,
                 val_samples: list | None = None, trace: Stage3Trace | None = None,
                 on_epoch=None):
    """Run all stage-3 epochs from theta_0; returns the loop and history."""
    loop = Stage3Loop(cfg, copy.deepcopy(encoder0), copy.deepcopy(model0),
                      copy.deepcopy(encoder0), copy.deepcopy(model0),
                      bank, samples, vocab, trace=trace)
    history = []
    for epoch in range(cfg.stage3.epochs):
        record = loop.run_epoch(epoch)
        if val_samples:
            record["val_student"] = evaluate(loop.student_model, loop.student_encoder,
                                             val_samples, vocab, cfg.token_len,
                                             split="val").as_dict()
            record["val_teacher"] = evaluate(loop.teacher_model, loop.teacher_encoder,
                                             val_samples, vocab, cfg.token_len,
                                             split="val").as_dict()
        history.append(record)
        if on_epoch:
            on_epoch(record, loop)
    return loop, history
