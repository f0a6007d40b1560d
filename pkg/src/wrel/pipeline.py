"""Run orchestration: run directories, checkpoints, resume, and train modes.

A run directory holds the echoed `config.toml`, a `manifest.json` with seeds
and content digests, per-epoch `metrics.jsonl`, and checkpoint directories
`stage{1,2,3}-epoch{k}` plus `stage{n}-final`. Checkpoints are full-precision
so resuming reproduces the remaining trajectory exactly. Staged invocations
(`--stage lrb` or `joint` after `--stage warmup`) append to an existing run
directory and pick up the prerequisite final checkpoints from it.
"""

from __future__ import annotations

import copy
import json
import math
from pathlib import Path

import numpy as np
import torch

from .config import emit_toml, train_config
from .data import load_dataset, load_split, validate_manifest
from .errors import ConfigError, DataError
from .lrb import PromptBank
from .metrics import evaluate
from .model import RefSegModel
from .params import (file_digest, load_blob, named_arrays, param_checksum,
                     save_blob, set_named_arrays, tree_digest)
from .text import TextEncoder, Vocabulary
from .train import (AdamW, Stage3Loop, Stage3Trace, TrainConfig, build_models,
                    joint_params, stage1_warmup, stage2_lrb_warmup)

MODES = ("only-accurate", "wrel", "lrb-wrel")
STAGES = ("warmup", "lrb", "joint", "all")


# ---------------------------------------------------------------------------
# Checkpoints


def _pair_arrays(encoder, model, prefix: str) -> dict[str, np.ndarray]:
    out = {f"{prefix}_encoder.{n}": a for n, a in named_arrays(encoder).items()}
    out.update({f"{prefix}_model.{n}": a for n, a in named_arrays(model).items()})
    return out


def save_checkpoint(run_dir: Path, name: str, *, state: dict, vocab: Vocabulary,
                    student: tuple, teacher: tuple | None = None,
                    bank: PromptBank | None = None, opt: AdamW | None = None) -> Path:
    ckpt = Path(run_dir) / "checkpoints" / name
    ckpt.mkdir(parents=True, exist_ok=True)
    arrays = _pair_arrays(*student, "student")
    if teacher is not None:
        arrays.update(_pair_arrays(*teacher, "teacher"))
    save_blob(ckpt / "params", arrays, dtype="float64")
    if opt is not None:
        opt_arrays, steps = opt.state_arrays()
        save_blob(ckpt / "opt", opt_arrays, dtype="float64", extra={"steps": steps})
    if bank is not None:
        save_blob(ckpt / "bank", {"prompts": bank.prompts.numpy()}, dtype="float64",
                  extra={"index": bank.index})
    vocab.save(ckpt / "vocab.json")
    (ckpt / "state.json").write_text(
        json.dumps(state, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return ckpt


def load_checkpoint(ckpt_dir: Path) -> dict:
    ckpt = Path(ckpt_dir)
    state_path = ckpt / "state.json"
    if not state_path.exists():
        raise ConfigError(f"no checkpoint at {ckpt}")
    out = {"state": json.loads(state_path.read_text(encoding="utf-8"))}
    out["vocab"] = Vocabulary.load(ckpt / "vocab.json")
    arrays, _ = load_blob(ckpt / "params")
    out["params"] = arrays
    if (ckpt / "opt.json").exists():
        opt_arrays, extra = load_blob(ckpt / "opt")
        out["opt"] = (opt_arrays, extra["steps"])
    if (ckpt / "bank.json").exists():
        bank_arrays, extra = load_blob(ckpt / "bank")
        out["bank"] = PromptBank(torch.from_numpy(bank_arrays["prompts"]),
                                 {k: int(v) for k, v in extra["index"].items()})
    return out


def restore_pair(cfg: TrainConfig, vocab_size: int, params: dict, prefix: str
                 ) -> tuple[TextEncoder, RefSegModel]:
    encoder, model = build_models(cfg, vocab_size)
    enc_key = f"{prefix}_encoder."
    mod_key = f"{prefix}_model."
    set_named_arrays(encoder, {n[len(enc_key):]: a for n, a in params.items()
                               if n.startswith(enc_key)})
    set_named_arrays(model, {n[len(mod_key):]: a for n, a in params.items()
                             if n.startswith(mod_key)})
    return encoder, model


# ---------------------------------------------------------------------------
# Run directory


class RunDir:
    def __init__(self, path: Path, resolved_cfg: dict, force: bool = False,
                 append: bool = False):
        self.path = Path(path)
        config_path = self.path / "config.toml"
        if append:
            if not config_path.exists():
                raise ConfigError(f"{self.path} is not an existing run directory")
            if config_path.read_text(encoding="utf-8") != emit_toml(resolved_cfg):
                raise ConfigError("existing run directory was created with a "
                                  "different configuration")
            self.metrics_path = self.path / "metrics.jsonl"
            return
        if self.path.exists() and any(self.path.iterdir()) and not force:
            raise ConfigError(f"run directory {self.path} is not empty (use --force)")
        self.path.mkdir(parents=True, exist_ok=True)
        config_path.write_text(emit_toml(resolved_cfg), encoding="utf-8")
        self.metrics_path = self.path / "metrics.jsonl"
        self.metrics_path.write_text("", encoding="utf-8")

    def append_metrics(self, record: dict) -> None:
        with open(self.metrics_path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(record, sort_keys=True, separators=(",", ":")) + "\n")

    def write_manifest(self, manifest: dict) -> None:
        (self.path / "manifest.json").write_text(
            json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# Training runs


def _load_data(cfg: dict):
    data_cfg = cfg["data"]
    if not data_cfg["train"]:
        raise ConfigError("data.train must point to a dataset directory")
    manifest = load_dataset(Path(data_cfg["train"]))
    violations = validate_manifest(manifest)
    if violations:
        head = "; ".join(f"{v.sample_id}:{v.rule}" for v in violations[:5])
        raise DataError(f"train dataset failed validation ({len(violations)} violations): {head}")
    if not data_cfg["split"]:
        raise ConfigError("data.split must point to a split.json")
    accurate, weak = load_split(Path(data_cfg["split"]), manifest)
    val_samples = None
    if data_cfg["val"]:
        val_samples = load_dataset(Path(data_cfg["val"])).samples
    return manifest, accurate, weak, val_samples


def run_training(cfg: dict, mode: str, stage: str, out_dir: Path, *,
                 resume: Path | None = None, force: bool = False,
                 save_every: int = 0, trace: Stage3Trace | None = None) -> dict:
    """Execute the requested stages for a mode; returns the run summary."""
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}; expected one of {MODES}")
    if stage not in STAGES:
        raise ConfigError(f"unknown stage {stage!r}; expected one of {STAGES}")
    if mode == "only-accurate" and stage in ("lrb", "joint"):
        raise ConfigError("mode only-accurate has no bank or joint stage")
    if mode == "wrel" and stage == "lrb":
        raise ConfigError("mode wrel has no bank stage")

    tc = train_config(cfg)
    if mode == "wrel":
        tc = copy.deepcopy(tc)
        tc.stage3.inner_steps = 0
    use_bank = mode == "lrb-wrel" and tc.stage3.inner_steps > 0

    _, accurate, weak, val_samples = _load_data(cfg)

    resume_data = None
    resume_stage = None
    if resume is not None:
        resume_data = load_checkpoint(resume)
        if resume_data["state"]["config"] != cfg:
            raise ConfigError("resume checkpoint was produced by a different configuration")
        if resume_data["state"]["mode"] != mode:
            raise ConfigError("resume checkpoint was produced by a different mode")
        resume_stage = resume_data["state"]["stage"]

    continuation = stage in ("lrb", "joint") and resume is None
    run = RunDir(out_dir, cfg, force=force, append=continuation)

    if resume_data is not None:
        vocab = resume_data["vocab"]
    else:
        expressions = [s.expression for s in accurate] + [s.expression for s in weak]
        vocab = Vocabulary.build(expressions, extra_tokens=tuple(cfg["synth"]["classes"]))
    if not continuation:
        vocab.save(run.path / "vocab.json")

    digests = {
        "dataset": tree_digest(Path(cfg["data"]["train"])),
        "split": file_digest(Path(cfg["data"]["split"])),
    }
    state_base = {"schema": 1, "mode": mode, "config": cfg, "seed": tc.seed}
    summary: dict = {"mode": mode, "out": str(run.path)}

    def attach_val(record: dict, encoder, model, teacher=None) -> dict:
        if val_samples:
            record["val_student"] = evaluate(model, encoder, val_samples, vocab,
                                             tc.token_len, split="val").as_dict()
            if teacher is not None:
                record["val_teacher"] = evaluate(teacher[1], teacher[0], val_samples,
                                                 vocab, tc.token_len, split="val").as_dict()
        return record

    def finish(last_stage: int, final_record=None) -> dict:
        run.write_manifest({"digests": digests, "seed": tc.seed, "mode": mode,
                            "stages": _stage_plan(tc, mode, len(accurate), len(weak)),
                            "final": final_record})
        summary["final_checkpoint"] = str(
            run.path / "checkpoints" / f"stage{last_stage}-final")
        summary["final"] = final_record
        return summary

    # ----- stage 1: warm-up on accurate data
    encoder = model = None
    last_record = None
    if resume_stage in (None, 1) and stage in ("warmup", "all"):
        start_epoch = 0
        if resume_stage == 1:
            encoder, model = restore_pair(tc, len(vocab), resume_data["params"], "student")
            start_epoch = resume_data["state"]["epochs_done"]
        else:
            encoder, model = build_models(tc, len(vocab))
        opt = AdamW(joint_params(encoder, model), lr=tc.stage1.lr,
                    weight_decay=tc.stage1.weight_decay)
        if resume_stage == 1 and "opt" in resume_data:
            opt.load_state_arrays(*resume_data["opt"])

        def on_epoch1(record, enc, mod):
            nonlocal last_record
            last_record = attach_val(record, enc, mod)
            run.append_metrics(last_record)
            done = record["epoch"] + 1
            if save_every and done % save_every == 0 and done < tc.stage1.epochs:
                save_checkpoint(run.path, f"stage1-epoch{done}",
                                state={**state_base, "stage": 1, "epochs_done": done,
                                       "t": 0},
                                vocab=vocab, student=(enc, mod), opt=opt)

        encoder, model, _ = stage1_warmup(tc, accurate, vocab, encoder=encoder,
                                          model=model, opt=opt, start_epoch=start_epoch,
                                          on_epoch=on_epoch1)
        save_checkpoint(run.path, "stage1-final",
                        state={**state_base, "stage": 1,
                               "epochs_done": tc.stage1.epochs, "t": 0},
                        vocab=vocab, student=(encoder, model))
        digests["theta0"] = param_checksum(encoder, model)
    elif resume_stage in (None, 1):
        # Staged continuation: pick theta_0 up from this run directory.
        ckpt = load_checkpoint(run.path / "checkpoints" / "stage1-final")
        vocab = ckpt["vocab"]
        encoder, model = restore_pair(tc, len(vocab), ckpt["params"], "student")
        digests["theta0"] = param_checksum(encoder, model)
    elif resume_stage == 2:
        encoder, model = restore_pair(tc, len(vocab), resume_data["params"], "student")
        digests["theta0"] = param_checksum(encoder, model)

    if mode == "only-accurate" or stage == "warmup":
        return finish(1, last_record)

    # ----- stage 2: bank warm-up on the frozen stage-1 parameters
    bank = None
    if use_bank:
        if resume_stage in (None, 1, 2) and stage in ("lrb", "all"):
            theta_before = param_checksum(encoder, model)
            start_epoch = 0
            if resume_stage == 2:
                bank = resume_data.get("bank")
                start_epoch = resume_data["state"]["epochs_done"]

            def on_epoch2(record, b):
                run.append_metrics(record)
                done = record["epoch"] + 1
                if save_every and done % save_every == 0 and done < tc.stage2.epochs:
                    save_checkpoint(run.path, f"stage2-epoch{done}",
                                    state={**state_base, "stage": 2,
                                           "epochs_done": done, "t": 0},
                                    vocab=vocab, student=(encoder, model), bank=b)

            bank, _ = stage2_lrb_warmup(tc, encoder, model, weak, vocab, bank=bank,
                                        start_epoch=start_epoch, on_epoch=on_epoch2)
            if param_checksum(encoder, model) != theta_before:
                raise DataError("stage 2 modified the frozen warm-up parameters")
            save_checkpoint(run.path, "stage2-final",
                            state={**state_base, "stage": 2,
                                   "epochs_done": tc.stage2.epochs, "t": 0},
                            vocab=vocab, student=(encoder, model), bank=bank)
        elif resume_stage in (None, 1, 2):
            ckpt_path = run.path / "checkpoints" / "stage2-final"
            if not (ckpt_path / "state.json").exists():
                raise ConfigError("stage joint requires a stage-2 bank checkpoint in "
                                  "lrb-wrel mode; run --stage lrb first")
            ckpt = load_checkpoint(ckpt_path)
            bank = ckpt["bank"]
        if stage == "lrb":
            return finish(2, None)

    # ----- stage 3: joint teacher-student training
    mixed = sorted(accurate + weak, key=lambda s: s.sample_id)
    if resume_stage == 3:
        params = resume_data["params"]
        s_enc, s_model = restore_pair(tc, len(vocab), params, "student")
        t_enc, t_model = restore_pair(tc, len(vocab), params, "teacher")
        loop = Stage3Loop(tc, s_enc, s_model, t_enc, t_model, resume_data.get("bank"),
                          mixed, vocab, t=resume_data["state"]["t"], trace=trace)
        if "opt" in resume_data:
            loop.opt.load_state_arrays(*resume_data["opt"])
        start_epoch = resume_data["state"]["epochs_done"]
    else:
        loop = Stage3Loop(tc, copy.deepcopy(encoder), copy.deepcopy(model),
                          copy.deepcopy(encoder), copy.deepcopy(model),
                          bank, mixed, vocab, trace=trace)
        start_epoch = 0

    final_record = None
    for epoch in range(start_epoch, tc.stage3.epochs):
        record = loop.run_epoch(epoch)
        record = attach_val(record, loop.student_encoder, loop.student_model,
                            teacher=(loop.teacher_encoder, loop.teacher_model))
        run.append_metrics(record)
        final_record = record
        done = epoch + 1
        if save_every and done % save_every == 0 and done < tc.stage3.epochs:
            save_checkpoint(run.path, f"stage3-epoch{done}",
                            state={**state_base, "stage": 3, "epochs_done": done,
                                   "t": loop.t},
                            vocab=vocab,
                            student=(loop.student_encoder, loop.student_model),
                            teacher=(loop.teacher_encoder, loop.teacher_model),
                            bank=loop.bank, opt=loop.opt)
    save_checkpoint(run.path, "stage3-final",
                    state={**state_base, "stage": 3, "epochs_done": tc.stage3.epochs,
                           "t": loop.t},
                    vocab=vocab,
                    student=(loop.student_encoder, loop.student_model),
                    teacher=(loop.teacher_encoder, loop.teacher_model),
                    bank=loop.bank, opt=loop.opt)
    digests["final_student"] = param_checksum(loop.student_encoder, loop.student_model)
    digests["final_teacher"] = param_checksum(loop.teacher_encoder, loop.teacher_model)
    return finish(3, final_record)


def _stage_plan(tc: TrainConfig, mode: str, n_accurate: int, n_weak: int) -> dict:
    n_mixed = n_accurate + n_weak
    plan = {"stage1": {"epochs": tc.stage1.epochs,
                       "steps": tc.stage1.epochs * math.ceil(n_accurate / tc.stage1.batch)}}
    if mode == "lrb-wrel":
        plan["stage2"] = {"epochs": tc.stage2.epochs}
    if mode in ("wrel", "lrb-wrel"):
        plan["stage3"] = {"epochs": tc.stage3.epochs,
                          "steps": tc.stage3.epochs * math.ceil(n_mixed / tc.stage3.batch)}
    return plan
