"""Teacher-forced training: loss assembly, AdamW, cosine schedule,
checkpointing with bit-exact resume.

One tape per optimizer step; batch scenarios accumulate into a single
summed NLL (mode-free per Eq-style uniform weighting over all valid
(agent, patch) terms). All randomness (init, data order, dropout) flows
from TrainConfig.seed through named streams keyed by absolute epoch/step
indices, which is what makes resume-from-checkpoint bit-identical to an
uninterrupted run.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import containers, jsonio
from . import rng as rngmod
from .autodiff import Tape, Tensor
from .errors import ConfigError, DataError, NumericalError
from .head import MixtureParams, mixture_nll
from .model import (
    ModelConfig,
    SceneInputs,
    SimulatorModel,
    local_frame_targets,
    prepare_scenario,
)
from .nn import zero_grads
from .scenario import Scenario, aligned_offset

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 4
    lr0: float = 5e-4
    weight_decay: float = 0.1
    grad_clip: float = 0.0  # 0 disables clipping
    seed: int = 0
    checkpoint_every: int = 0  # epochs between periodic checkpoints; 0 = final only

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.lr0 <= 0:
            raise ConfigError("lr0 must be positive")


def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    """Cosine annealing from lr0 at step 0 to exactly 0 at the final step."""
    if total_steps <= 1:
        return lr0
    frac = step / (total_steps - 1)
    return lr0 * 0.5 * (1.0 + np.cos(np.pi * frac))


def build_targets(scenario: Scenario, patch_len: int) -> tuple[np.ndarray, np.ndarray]:
    """Frame-transformed next-patch targets for every context patch.

    Returns targets [A, P-1, ell, 6] (positions, planar velocities, yaw in
    the previous patch's last-state frame) and a validity mask [A, P-1].
    """
    states = np.stack([a.states for a in scenario.agents], axis=0)
    t_total = states.shape[1]
    offset = aligned_offset(t_total, patch_len)
    n_patches = (t_total - offset) // patch_len
    if n_patches < 2:
        raise DataError(f"scenario {scenario.scenario_id}: too short for targets")
    return local_frame_targets(states, offset, n_patches, patch_len)


class AdamW:
    """Adam with decoupled weight decay; moments keyed by parameter name."""

    def __init__(self, param_names, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {name: None for name in sorted(param_names)}
        self.v = {name: None for name in sorted(param_names)}

    def step(self, params: dict[str, Tensor], lr: float, weight_decay: float) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for name in sorted(params):
            p = params[name]
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if self.m[name] is None:
                self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            update = (self.m[name] / b1c) / (np.sqrt(self.v[name] / b2c) + self.eps)
            p.data -= lr * (update + weight_decay * p.data)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name in sorted(self.m):
            if self.m[name] is not None:
                out[f"adam.m/{name}"] = self.m[name]
                out[f"adam.v/{name}"] = self.v[name]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], t: int) -> None:
        self.t = t
        for name in self.m:
            if f"adam.m/{name}" in arrays:
                self.m[name] = arrays[f"adam.m/{name}"].copy()
                self.v[name] = arrays[f"adam.v/{name}"].copy()


def clip_global_norm(params: dict[str, Tensor], max_norm: float) -> None:
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    norm = np.sqrt(total)
    if norm > max_norm > 0:
        scale = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad *= scale


def train_step(
    model: SimulatorModel,
    scenes: list[SceneInputs],
    opt: AdamW,
    cfg: TrainConfig,
    step: int,
    total_steps: int,
) -> tuple[float, int]:
    """One optimizer step over a batch; returns (summed NLL, term count)."""
    params = model.parameters()
    zero_grads(params)
    n_terms = 0
    with Tape() as tape:
        loss = None
        for j, scene in enumerate(scenes):
            drop_rng = rngmod.stream(cfg.seed, "dropout", step, j)
            nll, n = model.loss(scene, training=True, dropout_rng=drop_rng)
            n_terms += n
            loss = nll if loss is None else ad.add(loss, nll)
    if not np.isfinite(loss.data):
        ids = ", ".join(s.scenario_id or "?" for s in scenes)
        raise NumericalError(f"non-finite training loss at step {step} (batch: {ids})")
    tape.backward(loss)
    if cfg.grad_clip > 0:
        clip_global_norm(params, cfg.grad_clip)
    opt.step(params, cosine_lr(step, total_steps, cfg.lr0), cfg.weight_decay)
    return float(loss.data), n_terms


def sequential_nll(model: SimulatorModel, scenario: Scenario) -> tuple[float, int]:
    """Loss computed by feeding ground-truth prefixes one patch at a time.

    Oracle for the teacher-forcing equivalence property: for each context
    length the model sees only patches 1..p and scores patch p+1, so the
    summed NLL must equal the parallel single-pass loss.
    """
    from .model import build_scene_inputs, scenario_arrays
    from .tokenizer import segment_map, segments_to_arrays

    ell = model.cfg.patch_len
    states, kinds, bboxes = scenario_arrays(scenario)
    t_total = states.shape[1]
    offset = aligned_offset(t_total, ell)
    n_patches = (t_total - offset) // ell
    targets, target_valid = local_frame_targets(states, offset, n_patches, ell)
    map_anchors, map_kinds = segments_to_arrays(segment_map(scenario.map))

    total, count = 0.0, 0
    for p in range(1, n_patches):
        prefix = states[:, : offset + p * ell, :]
        scene = build_scene_inputs(
            map_anchors, map_kinds, prefix, kinds, bboxes, model.cfg,
            with_targets=False, scenario_id=scenario.scenario_id,
        )
        mp, rows = model.predict_last_patch(scene)
        keep = [i for i, agent in enumerate(rows) if target_valid[agent, p - 1]]
        if not keep:
            continue
        sub = MixtureParams(
            pi=ad.gather(mp.pi, np.array(keep)),
            mu=ad.gather(mp.mu, np.array(keep)),
            b=ad.gather(mp.b, np.array(keep)),
            kappa=ad.gather(mp.kappa, np.array(keep)),
            log_pi=ad.gather(mp.log_pi, np.array(keep)),
        )
        batch_targets = targets[[int(rows[i]) for i in keep], p - 1]
        total += float(mixture_nll(batch_targets, sub).data)
        count += len(keep)
    return total, count


@dataclass
class FitResult:
    model: SimulatorModel
    history: list[dict] = field(default_factory=list)
    checkpoint_path: Path | None = None


def config_hash(model_cfg: ModelConfig, train_cfg: TrainConfig) -> str:
    doc = {"model": asdict(model_cfg), "train": asdict(train_cfg)}
    return hashlib.sha256(jsonio.dumps(doc).encode()).hexdigest()


def save_checkpoint(
    path,
    model: SimulatorModel,
    opt: AdamW | None,
    step: int,
    epoch: int,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    history: list[dict],
) -> None:
    path = Path(path)
    arrays: dict[str, np.ndarray] = {}
    for name in sorted(model.parameters()):
        arrays[f"param/{name}"] = model.parameters()[name].data
    if opt is not None:
        arrays.update(opt.state_arrays())
    arrays["opt/step"] = np.asarray(float(step))
    arrays["opt/epoch"] = np.asarray(float(epoch))
    containers.save_arrays(path, arrays)
    manifest = {
        "model": asdict(model_cfg),
        "train": asdict(train_cfg),
        "step": int(step),
        "epoch": int(epoch),
        "config_hash": config_hash(model_cfg, train_cfg),
        "history": history,
    }
    jsonio.dump(manifest, path.with_suffix(".json"))


def load_checkpoint(path) -> tuple[SimulatorModel, AdamW, int, int, ModelConfig, TrainConfig, list]:
    path = Path(path)
    manifest = jsonio.load(path.with_suffix(".json"))
    model_cfg = ModelConfig(**manifest["model"])
    train_cfg = TrainConfig(**manifest["train"])
    model = SimulatorModel(model_cfg, rngmod.stream(train_cfg.seed, "init"))
    arrays = containers.load_arrays(path)
    params = model.parameters()
    for name, p in params.items():
        key = f"param/{name}"
        if key not in arrays:
            raise DataError(f"checkpoint {path} missing parameter {name}")
        if arrays[key].shape != p.data.shape:
            raise DataError(f"checkpoint {path}: shape mismatch for {name}")
        p.data[...] = arrays[key]
    step = int(arrays["opt/step"])
    epoch = int(arrays["opt/epoch"])
    opt = AdamW(params.keys())
    opt.load_state_arrays(arrays, step)
    return model, opt, step, epoch, model_cfg, train_cfg, list(manifest.get("history", []))


def fit(
    corpus: list[Scenario],
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    out_dir=None,
    stop_after_epoch: int | None = None,
    resume_from=None,
) -> FitResult:
    """Train on a scenario corpus; deterministic under train_cfg.seed."""
    train_cfg.validate()
    if not corpus:
        raise DataError("training corpus is empty")
    scenes = [prepare_scenario(s, model_cfg, with_targets=True) for s in corpus]

    if resume_from is not None:
        model, opt, step, start_epoch, ck_model_cfg, ck_train_cfg, history = (
            load_checkpoint(resume_from)
        )
        if ck_model_cfg != model_cfg or ck_train_cfg != train_cfg:
            raise ConfigError("resume config does not match checkpoint config")
    else:
        model = SimulatorModel(model_cfg, rngmod.stream(train_cfg.seed, "init"))
        opt = AdamW(model.parameters().keys())
        step, start_epoch, history = 0, 0, []

    n = len(scenes)
    bs = train_cfg.batch_size
    steps_per_epoch = (n + bs - 1) // bs
    total_steps = train_cfg.epochs * steps_per_epoch

    ckpt_path = Path(out_dir) / "checkpoint.bin" if out_dir is not None else None
    for epoch in range(start_epoch, train_cfg.epochs):
        perm = rngmod.stream(train_cfg.seed, "data", epoch).permutation(n)
        nll_sum, terms = 0.0, 0
        for b in range(steps_per_epoch):
            batch = [scenes[i] for i in perm[b * bs : (b + 1) * bs]]
            loss_sum, n_terms = train_step(model, batch, opt, train_cfg, step, total_steps)
            nll_sum += loss_sum
            terms += n_terms
            step += 1
        history.append({"epoch": epoch, "nll_per_term": nll_sum / max(terms, 1)})
        logger.info("epoch %d: nll/term %.4f", epoch, nll_sum / max(terms, 1))
        done = epoch + 1
        periodic = train_cfg.checkpoint_every > 0 and done % train_cfg.checkpoint_every == 0
        if ckpt_path is not None and (periodic or done == train_cfg.epochs):
            save_checkpoint(ckpt_path, model, opt, step, done, model_cfg, train_cfg, history)
        if stop_after_epoch is not None and done >= stop_after_epoch:
            if ckpt_path is not None:
                save_checkpoint(ckpt_path, model, opt, step, done, model_cfg, train_cfg, history)
            break
    return FitResult(model=model, history=history, checkpoint_path=ckpt_path)
