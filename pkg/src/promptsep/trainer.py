"""Two-stage training with exact freezing contracts.

Stage 1 pretrains the forgery-irrelevant prompt (meta-network and context of
stream B) against the frozen backbone with the symmetric contrastive loss;
everything else stays fixed, enforced by checksums, not convention. Stage 2
unfreezes everything except the base encoder and optimizes the full
objective under the warm-up schedule. Optimizer moments are reset between
stages.

Determinism contract: with a fixed config and seed, training is a pure
function of the step index — batches derive statelessly from (seed, step),
the optimizer is rebuilt identically, and checkpoints carry the optimizer
moments — so resuming from any checkpoint continues bit-exactly.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .config import ConfigBundle, bundle_from_dict
from .data import Batch, DataExhaustedError
from .losses import (LossReport, loss_align_terms, loss_con, loss_dis, loss_div,
                     loss_pre, loss_total)
from .model import (FROZEN_PREFIX, STAGE1_TRAINABLE_PREFIXES, ForgeryDetector,
                    build_toy_detector, parameter_checksum)
from .prompts import encode_stream

log = logging.getLogger(__name__)

STAGE2_LOSSES = ("cls", "dis", "div", "align", "con")


class NonFiniteLossError(RuntimeError):
    """A loss term left the reals; message carries the step diagnostics."""


class FreezeViolationError(RuntimeError):
    """Parameters outside the stage's trainable set moved."""


@dataclass(frozen=True)
class StagePlan:
    stage: int
    trainable_prefixes: tuple[str, ...]
    losses: tuple[str, ...]
    steps: int

    def validate(self) -> None:
        if self.stage not in (1, 2):
            raise ValueError(f"stage must be 1 or 2, got {self.stage}")
        if self.steps < 0:
            raise ValueError(f"steps must be >= 0, got {self.steps}")


@dataclass
class TrainState:
    stage: int
    step: int  # next step to execute
    best_metric: Optional[float] = None
    best_step: Optional[int] = None

    def to_dict(self) -> dict:
        return {"stage": self.stage, "step": self.step,
                "best_metric": self.best_metric, "best_step": self.best_step}


def stage1_plan(bundle: ConfigBundle) -> StagePlan:
    return StagePlan(stage=1, trainable_prefixes=STAGE1_TRAINABLE_PREFIXES,
                     losses=("pre",), steps=bundle.train.stage1_steps)


def stage2_plan(bundle: ConfigBundle, model: ForgeryDetector,
                disabled: Sequence[str] = ()) -> StagePlan:
    unknown = [d for d in disabled if d not in STAGE2_LOSSES[1:]]
    if unknown:
        raise ValueError(f"cannot disable unknown loss term(s) {unknown}")
    losses = tuple(name for name in STAGE2_LOSSES if name not in disabled)
    return StagePlan(stage=2, trainable_prefixes=model.stage2_trainable_prefixes(),
                     losses=losses, steps=bundle.train.stage2_steps)


def _make_optimizer(model: ForgeryDetector, bundle: ConfigBundle) -> torch.optim.Adam:
    params = [p for _, p in model.named_archive_parameters() if p.requires_grad]
    return torch.optim.Adam(params, lr=bundle.train.learning_rate,
                            weight_decay=bundle.train.weight_decay)


def _stage_losses(model: ForgeryDetector, batch: Batch, plan: StagePlan,
                  bundle: ConfigBundle, step: int) -> tuple[torch.Tensor, LossReport]:
    w = bundle.loss
    if plan.stage == 1:
        vision = model.encoder.encode_image(batch.images)
        t_b = encode_stream(vision, model.prompt_b, model.encoder)
        pre = loss_pre(vision.joint, t_b.pooled, w.temperature)
        value = float(pre.detach())
        report = LossReport(stage=1, step=step, pre=value, total=value)
        return pre, report
    feats = model.forward_features(batch.images)
    y = batch.labels
    terms: dict[str, torch.Tensor] = {
        "cls": torch.nn.functional.cross_entropy(model.head(feats.f_a), y)
    }
    if "dis" in plan.losses:
        terms["dis"] = loss_dis(feats.f_a, feats.f_b)
    if "div" in plan.losses:
        terms["div"] = loss_div(feats.t_a.pooled, feats.t_b.pooled)
    if "align" in plan.losses:
        spec, irr = loss_align_terms(
            feats.f_a, feats.f_b,
            model.sigma(feats.t_a.pooled), model.sigma(feats.t_b.pooled), y,
        )
        terms["align_specific"] = spec
        terms["align_irrelevant"] = irr
    if "con" in plan.losses:
        terms["con"] = loss_con(feats.f_a, y, w.temperature)
    return loss_total(terms, w, step, plan.steps)


def _save_state(path: str, model: ForgeryDetector, optimizer: Optional[torch.optim.Adam],
                bundle: ConfigBundle, state: TrainState, extra: Optional[dict] = None) -> str:
    from .backend import ToyDualEncoder

    backend = "toy" if isinstance(model.encoder, ToyDualEncoder) else type(model.encoder).__name__
    meta = {
        "config": bundle.to_dict(),
        "config_hash": bundle.hash(),
        "seed": bundle.train.seed,
        "fusion": model.fusion,
        "backend": backend,
        "state": state.to_dict(),
    }
    if extra:
        meta.update(extra)
    save_checkpoint(path, model, meta, optimizer=optimizer)
    return path


def save_initial_checkpoint(path: str, model: ForgeryDetector, bundle: ConfigBundle,
                            stage: int = 1) -> str:
    """Snapshot an untouched model exactly as a zero-step run would emit it."""
    return _save_state(path, model, None, bundle, TrainState(stage=stage, step=0))


def _run_plan(model: ForgeryDetector, stream, bundle: ConfigBundle, plan: StagePlan,
              out_path: str, log_path: Optional[str] = None,
              resume_path: Optional[str] = None,
              extra_metadata: Optional[dict] = None) -> str:
    """Shared training loop for both stages; returns the checkpoint path."""
    plan.validate()
    bundle.validate()
    model.set_trainable(plan.trainable_prefixes)
    optimizer = _make_optimizer(model, bundle)
    state = TrainState(stage=plan.stage, step=0)
    if resume_path is not None:
        meta = load_checkpoint(resume_path, model, optimizer=optimizer)
        saved = meta.get("state", {})
        if saved.get("stage") != plan.stage:
            raise ValueError(
                f"checkpoint {resume_path} is for stage {saved.get('stage')}, "
                f"cannot resume stage {plan.stage}"
            )
        if meta.get("config_hash") != bundle.hash():
            raise ValueError("checkpoint config does not match the requested config")
        state = TrainState(stage=plan.stage, step=int(saved["step"]),
                           best_metric=saved.get("best_metric"),
                           best_step=saved.get("best_step"))

    frozen_before = parameter_checksum(model, FROZEN_PREFIX)
    fixed_before = parameter_checksum(model, exclude=plan.trainable_prefixes)

    log_fh = None
    if log_path is not None:
        log_fh = open(log_path, "a" if resume_path else "w", encoding="utf-8")
    try:
        for step in range(state.step, plan.steps):
            try:
                batch = stream.batch(step)
            except DataExhaustedError as exc:
                raise DataExhaustedError(
                    f"stage {plan.stage} needs {plan.steps} steps: {exc}") from exc
            total, report = _stage_losses(model, batch, plan, bundle, step)
            if not torch.isfinite(total):
                raise NonFiniteLossError(
                    f"non-finite loss at stage {plan.stage} step {step}: "
                    + report.to_json_line()
                )
            optimizer.zero_grad()
            total.backward()
            torch.nn.utils.clip_grad_norm_(
                [p for g in optimizer.param_groups for p in g["params"]], 1.0)
            optimizer.step()
            loss_value = float(total.detach())
            if state.best_metric is None or loss_value < state.best_metric:
                state.best_metric = loss_value
                state.best_step = step
            state.step = step + 1
            if log_fh is not None:
                log_fh.write(report.to_json_line(lr=bundle.train.learning_rate) + "\n")
    finally:
        if log_fh is not None:
            log_fh.close()

    if parameter_checksum(model, FROZEN_PREFIX) != frozen_before:
        raise FreezeViolationError("frozen base encoder moved during training")
    if parameter_checksum(model, exclude=plan.trainable_prefixes) != fixed_before:
        raise FreezeViolationError(
            f"parameters outside {plan.trainable_prefixes} moved in stage {plan.stage}"
        )
    return _save_state(out_path, model, optimizer, bundle, state, extra_metadata)


def run_stage1(model: ForgeryDetector, stream, bundle: ConfigBundle, out_path: str,
               log_path: Optional[str] = None, resume_path: Optional[str] = None) -> str:
    """Pretrain stream B only; every other parameter is checksum-frozen."""
    return _run_plan(model, stream, bundle, stage1_plan(bundle), out_path,
                     log_path=log_path, resume_path=resume_path)


def run_stage2(model: ForgeryDetector, stream, bundle: ConfigBundle, out_path: str,
               stage1_checkpoint: Optional[str] = None,
               log_path: Optional[str] = None, resume_path: Optional[str] = None,
               disabled: Sequence[str] = ()) -> str:
    """Joint optimization of the full objective over everything but the base.

    ``stage1_checkpoint`` initializes stream B from pretraining; omitting it
    is the skip-pretrain ablation. ``disabled`` switches off individual
    auxiliary terms ("dis", "div", "align", "con").
    """
    if stage1_checkpoint is not None and resume_path is None:
        meta = load_checkpoint(stage1_checkpoint, model)
        if meta.get("config_hash") != bundle.hash():
            raise ValueError("stage-1 checkpoint config does not match")
    plan = stage2_plan(bundle, model, disabled=disabled)
    extra = {"skip_pretrain": stage1_checkpoint is None,
             "disabled_losses": sorted(disabled)}
    return _run_plan(model, stream, bundle, plan, out_path,
                     log_path=log_path, resume_path=resume_path,
                     extra_metadata=extra)


def load_model_for_eval(path: str) -> tuple[ForgeryDetector, dict]:
    """Rebuild the toy-backend model a checkpoint was trained with."""
    from .checkpoint import load_archive

    _, meta = load_archive(path)
    if meta.get("backend") != "toy":
        raise ValueError(
            f"checkpoint backend {meta.get('backend')!r} is not the toy backend; "
            "construct the matching encoder and call checkpoint.load_checkpoint"
        )
    bundle = bundle_from_dict(meta["config"])
    model = build_toy_detector(bundle.model, seed=meta["seed"], fusion=meta["fusion"])
    load_checkpoint(path, model)
    model.eval()
    return model, meta


def predict(checkpoint_path: str, image) -> float:
    """Score one image with the stream-A inference path of a saved model."""
    import numpy as np

    model, _ = load_model_for_eval(checkpoint_path)
    x = torch.from_numpy(np.asarray(image, dtype=float)[None])
    return float(model.predict_scores(x)[0])
