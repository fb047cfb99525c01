"""Alternating critic / decomposition-network optimization.

Each training step runs ``n_critic`` critic updates on the WGAN-GP loss and
then one update of E, G1 and G2 on the weighted generator objective.  The two
parameter groups have separate Adam optimizers and never share an update.

Everything outside the ROI is excluded from modeling: residual losses are
masked to the ROI and the normal estimate handed to the critic keeps the
input's constant fill value outside it.
"""

from __future__ import annotations

import dataclasses
import io
import json
import logging
import time
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple, Union

import numpy as np
import torch

from .errors import ArchMismatchError, CorruptCheckpointError, DivergedError
from .losses import (
    LossConfig,
    adversarial_loss,
    critic_loss,
    generator_objective,
    normal_fidelity_loss,
    reconstruction_loss,
)
from .model import ArchConfig, ModelBundle, build_model, compose_roi
from .phantom import PreparedSet

log = logging.getLogger(__name__)

METRICS_NAME = "metrics.jsonl"


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 2e-4
    batch_size: int = 8
    n_critic: int = 5
    total_steps: int = 2000
    beta1: float = 0.5
    beta2: float = 0.9
    loss: LossConfig = field(default_factory=LossConfig)
    seed: int = 0
    checkpoint_interval: int = 500
    train_critic: bool = True
    deterministic: bool = True

    def __post_init__(self):
        if isinstance(self.loss, dict):
            object.__setattr__(self, "loss", LossConfig(**self.loss))
        for name in ("batch_size", "n_critic", "checkpoint_interval"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.total_steps < 0:
            raise ValueError("total_steps must be >= 0")
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be >= 0")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


class TrainData:
    """Tensor view of a prepared training split."""

    def __init__(self, prepared: PreparedSet):
        self.images = torch.from_numpy(np.ascontiguousarray(prepared.images))
        self.rois = torch.from_numpy(np.ascontiguousarray(prepared.rois))
        self.labels = torch.from_numpy(np.ascontiguousarray(prepared.labels))
        self.all_idx = np.arange(len(prepared))
        self.normal_idx = np.flatnonzero(prepared.labels == 0)
        if len(self.all_idx) == 0:
            raise ValueError("training set is empty")

    def __len__(self):
        return len(self.all_idx)

    def batch(self, idx):
        idx = torch.as_tensor(idx, dtype=torch.long)
        return self.images[idx], self.rois[idx], self.labels[idx]


def _as_data(dataset) -> TrainData:
    return dataset if isinstance(dataset, TrainData) else TrainData(dataset)


def _draw(rng: np.random.Generator, pool: np.ndarray, size: int) -> np.ndarray:
    return rng.choice(pool, size=size, replace=len(pool) < size)


def sample_batches(dataset, batch_size: int, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """Draw index arrays ``(mixed, real_normal)``.

    ``mixed`` comes uniformly from all images, ``real_normal`` independently
    from the normal ones only.  Sampling is without replacement unless the
    pool is smaller than the batch.
    """
    data = _as_data(dataset)
    if len(data.normal_idx) == 0:
        raise ValueError("dataset contains no normal image")
    return _draw(rng, data.all_idx, batch_size), _draw(rng, data.normal_idx, batch_size)


@dataclass
class TrainState:
    bundle: ModelBundle
    config: TrainConfig
    opt_critic: torch.optim.Optimizer
    opt_gen: torch.optim.Optimizer
    rng: np.random.Generator
    gp_generator: torch.Generator
    step: int = 0
    critic_updates: int = 0
    history: List[dict] = field(default_factory=list)


def _make_optimizers(bundle: ModelBundle, cfg: TrainConfig):
    betas = (cfg.beta1, cfg.beta2)
    opt_c = torch.optim.Adam(bundle.critic_parameters(), lr=cfg.learning_rate, betas=betas)
    opt_g = torch.optim.Adam(bundle.generator_parameters(), lr=cfg.learning_rate, betas=betas)
    return opt_c, opt_g


def init_state(arch: ArchConfig, cfg: TrainConfig) -> TrainState:
    if cfg.deterministic:
        torch.use_deterministic_algorithms(True, warn_only=True)
    bundle = build_model(arch, cfg.seed)
    opt_c, opt_g = _make_optimizers(bundle, cfg)
    gen = torch.Generator().manual_seed(cfg.seed)
    return TrainState(bundle=bundle, config=cfg, opt_critic=opt_c, opt_gen=opt_g,
                      rng=np.random.default_rng(cfg.seed), gp_generator=gen)


def _check_finite(name: str, value: torch.Tensor, state: TrainState, **extra) -> None:
    if not torch.isfinite(value).all():
        details = ", ".join(f"{k}={float(v):.6g}" for k, v in extra.items())
        raise DivergedError(f"{name} is not finite at step {state.step} ({details})")


def _normal_view(bundle: ModelBundle, x, roi):
    return compose_roi(bundle.normal_estimate(x), x, roi)


def critic_step(state: TrainState, data: TrainData, mixed_idx, real_idx) -> float:
    """One critic update on the WGAN-GP loss.  Returns the loss value."""
    bundle = state.bundle
    x_mix, roi_mix, _ = data.batch(mixed_idx)
    x_real, _, _ = data.batch(real_idx)
    with torch.no_grad():
        fake = _normal_view(bundle, x_mix, roi_mix)
    total, w, gp = critic_loss(bundle, x_real, fake, state.config.loss.lambda_gp,
                               generator=state.gp_generator, return_parts=True)
    _check_finite("L_c", total, state, wasserstein=w, gp=gp)
    state.opt_critic.zero_grad(set_to_none=True)
    total.backward()
    state.opt_critic.step()
    state.critic_updates += 1
    return float(total.detach())


def generator_losses(bundle: ModelBundle, x, roi, labels, loss_cfg: LossConfig):
    out = bundle.decompose(x)
    L_r = reconstruction_loss(x, out.normal_est, out.lesion_est, loss_cfg.p, mask=roi)
    normal = labels == 0
    L_n = normal_fidelity_loss(x[normal], out.normal_est[normal], loss_cfg.p, mask=roi[normal])
    if loss_cfg.alpha1 > 0:
        L_a = adversarial_loss(bundle.score(compose_roi(out.normal_est, x, roi)))
    else:
        L_a = torch.zeros((), dtype=L_r.dtype)
    L_gen = generator_objective(L_a, L_r, L_n, loss_cfg)
    return L_r, L_n, L_a, L_gen


def generator_step(state: TrainState, data: TrainData, mixed_idx) -> Dict[str, float]:
    """One update of E, G1, G2 with the critic frozen."""
    bundle = state.bundle
    x, roi, labels = data.batch(mixed_idx)
    critic_params = bundle.critic_parameters()
    flags = [p.requires_grad for p in critic_params]
    for p in critic_params:
        p.requires_grad_(False)
    try:
        L_r, L_n, L_a, L_gen = generator_losses(bundle, x, roi, labels, state.config.loss)
        _check_finite("L_gen", L_gen, state, L_r=L_r, L_n=L_n, L_a=L_a)
        state.opt_gen.zero_grad(set_to_none=True)
        L_gen.backward()
        state.opt_gen.step()
    finally:
        for p, f in zip(critic_params, flags):
            p.requires_grad_(f)
    return {k: float(v.detach()) for k, v in (("L_r", L_r), ("L_n", L_n), ("L_a", L_a), ("L_gen", L_gen))}


def train_step(state: TrainState, data: TrainData) -> dict:
    cfg = state.config
    L_c = None
    if cfg.train_critic:
        for _ in range(cfg.n_critic):
            mixed, real = sample_batches(data, cfg.batch_size, state.rng)
            L_c = critic_step(state, data, mixed, real)
    mixed, _ = sample_batches(data, cfg.batch_size, state.rng)
    record = generator_step(state, data, mixed)
    state.step += 1
    record = {"step": state.step, "L_r": record["L_r"], "L_n": record["L_n"], "L_c": L_c,
              "L_a": record["L_a"], "L_gen": record["L_gen"]}
    state.history.append(record)
    return record


def train(dataset, cfg: TrainConfig, arch: Optional[ArchConfig] = None,
          out_dir: Optional[Union[str, Path]] = None, state: Optional[TrainState] = None,
          callback: Optional[Callable[[TrainState, dict], None]] = None) -> TrainState:
    """Run (or resume) training up to ``cfg.total_steps`` generator steps.

    When ``out_dir`` is given, a step-indexed ``metrics.jsonl`` is appended
    to and checkpoints ``checkpoint_{step}.zip`` plus ``checkpoint.zip``
    (latest) are written every ``checkpoint_interval`` steps and at the end.
    """
    data = _as_data(dataset)
    if len(data.normal_idx) == 0:
        raise ValueError("dataset contains no normal image")
    if state is None:
        state = init_state(arch or ArchConfig(), cfg)
    elif cfg.deterministic:
        torch.use_deterministic_algorithms(True, warn_only=True)
    state.config = cfg
    out = Path(out_dir) if out_dir is not None else None
    metrics_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        metrics_fh = open(out / METRICS_NAME, "a" if state.step else "w", encoding="utf-8")
    t0 = time.perf_counter()
    try:
        if out is not None and state.step == 0:
            save_checkpoint(state, out / "checkpoint_0.zip")
        while state.step < cfg.total_steps:
            record = dict(train_step(state, data), wall_time=round(time.perf_counter() - t0, 4))
            if metrics_fh is not None:
                metrics_fh.write(json.dumps(record) + "\n")
            if callback is not None:
                callback(state, record)
            if state.step % 100 == 0:
                log.info("step %d  L_r=%.4f L_n=%.4f L_c=%s L_a=%.4f", state.step, record["L_r"],
                         record["L_n"], record["L_c"], record["L_a"])
            if out is not None and state.step % cfg.checkpoint_interval == 0:
                save_checkpoint(state, out / f"checkpoint_{state.step}.zip")
    finally:
        if metrics_fh is not None:
            metrics_fh.close()
    if out is not None:
        save_checkpoint(state, out / "checkpoint.zip")
    return state


# ---------------------------------------------------------------------------
# checkpoints


def _prefixed_tensors(bundle: ModelBundle) -> Dict[str, torch.Tensor]:
    tensors = {}
    for prefix in ("encoder", "g1", "g2", "critic"):
        module = getattr(bundle, prefix)
        if module is None:
            continue
        for name, t in module.state_dict().items():
            tensors[f"{prefix}/{name}"] = t.detach().clone()
    return tensors


def _load_prefixed(bundle: ModelBundle, tensors: Dict[str, torch.Tensor]) -> None:
    for prefix in ("encoder", "g1", "g2", "critic"):
        module = getattr(bundle, prefix)
        if module is None:
            continue
        sub = {k[len(prefix) + 1:]: v for k, v in tensors.items() if k.startswith(prefix + "/")}
        module.load_state_dict(sub, strict=True)


def save_checkpoint(state: TrainState, path: Union[str, Path]) -> Path:
    """Write a zip archive: ``arch_config.json``, ``train_config.json``, ``state.pt``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "tensors": _prefixed_tensors(state.bundle),
        "opt_critic": state.opt_critic.state_dict(),
        "opt_gen": state.opt_gen.state_dict(),
        "rng": state.rng.bit_generator.state,
        "gp_generator": state.gp_generator.get_state(),
        "step": state.step,
        "critic_updates": state.critic_updates,
        "history": state.history,
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr("arch_config.json", json.dumps(state.bundle.config.to_dict(), indent=2, sort_keys=True))
        zf.writestr("train_config.json", json.dumps(state.config.to_dict(), indent=2, sort_keys=True))
        zf.writestr("state.pt", buf.getvalue())
    tmp.replace(path)
    return path


def read_checkpoint_configs(path: Union[str, Path]) -> Tuple[ArchConfig, TrainConfig]:
    try:
        with zipfile.ZipFile(path) as zf:
            arch = ArchConfig.from_dict(json.loads(zf.read("arch_config.json")))
            cfg = TrainConfig.from_dict(json.loads(zf.read("train_config.json")))
    except FileNotFoundError:
        raise
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError, TypeError) as exc:
        raise CorruptCheckpointError(f"{path}: {exc}") from exc
    return arch, cfg


def load_checkpoint(path: Union[str, Path], arch: Optional[ArchConfig] = None) -> TrainState:
    """Restore a :class:`TrainState` saved by :func:`save_checkpoint`.

    Raises:
        ArchMismatchError: ``arch`` is given and differs from the stored one.
        CorruptCheckpointError: the archive cannot be read.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no checkpoint at {path}")
    stored_arch, cfg = read_checkpoint_configs(path)
    if arch is not None and arch != stored_arch:
        raise ArchMismatchError(f"checkpoint has {stored_arch}, requested {arch}")
    try:
        with zipfile.ZipFile(path) as zf:
            payload = torch.load(io.BytesIO(zf.read("state.pt")), weights_only=False)
        bundle = ModelBundle(stored_arch)
        _load_prefixed(bundle, payload["tensors"])
    except (zipfile.BadZipFile, KeyError, RuntimeError, EOFError) as exc:
        raise CorruptCheckpointError(f"{path}: {exc}") from exc
    opt_c, opt_g = _make_optimizers(bundle, cfg)
    opt_c.load_state_dict(payload["opt_critic"])
    opt_g.load_state_dict(payload["opt_gen"])
    rng = np.random.default_rng()
    rng.bit_generator.state = payload["rng"]
    gen = torch.Generator()
    gen.set_state(payload["gp_generator"])
    return TrainState(bundle=bundle, config=cfg, opt_critic=opt_c, opt_gen=opt_g, rng=rng,
                      gp_generator=gen, step=payload["step"],
                      critic_updates=payload["critic_updates"], history=list(payload["history"]))


def load_bundle(path: Union[str, Path]) -> ModelBundle:
    return load_checkpoint(path).bundle
