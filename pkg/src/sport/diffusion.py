"""DDPM over the movable object's 9-D pose vector.

The diffusion state is ``(s~, a, b)``: the translation normalized by the
workspace half-extents and the first two columns of the rotation matrix.
Only the movable object is noised; every other object token carries its
initial pose. The network predicts the injected noise and is trained with
an L1 objective.
"""
from __future__ import annotations

import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .encoder import Batch, Conditioning, TokenAssembler, build_conditioning, collate, load_text_encoder
from .errors import BadTimestep, ConfigError, DegenerateRotation, NonFiniteLoss, SamplingDegenerate
from .geometry import Pose, rotation_from_vectors
from .nn import LayerNorm, Linear, ParameterStore, TransformerBlock, adam_step, backward, load_checkpoint, save_checkpoint
from .scene import Scene, Workspace

log = logging.getLogger(__name__)

SAMPLE_RETRIES = 5


# --- configuration ------------------------------------------------------------


@dataclass
class DiffusionConfig:
    T: int = 200
    beta_start: float = 1e-4
    beta_end: float = 0.02
    epochs: int = 50
    batch: int = 64
    lr: float = 1e-4
    model_dim: int = 128
    blocks: int = 4
    heads: int = 4
    seed: int = 0
    x_min: float = -0.4
    x_max: float = 0.4
    y_min: float = -0.3
    y_max: float = 0.3
    z_max: float = 0.3
    delta: float = 0.4
    cloud_points: int = 256
    cloud_blocks: int = 2
    max_text_len: int = 48
    text_seed: int = 0
    strict_paper_update: bool = False
    # "constant" or "cosine" (decays to zero over the configured epochs)
    lr_schedule: str = "constant"

    @property
    def workspace(self) -> Workspace:
        return Workspace(self.x_min, self.x_max, self.y_min, self.y_max, self.z_max)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> DiffusionConfig:
        known = {f.name: f for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - set(known))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        kw = {}
        for k, v in d.items():
            kind = type(getattr(cls(), k))
            try:
                if kind is bool and isinstance(v, str):
                    if v.lower() not in ("1", "0", "true", "false", "yes", "no"):
                        raise ValueError(v)
                    kw[k] = v.lower() in ("1", "true", "yes")
                else:
                    kw[k] = kind(float(v)) if kind is int and isinstance(v, str) and "e" in v.lower() else kind(v)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad value for {k}: {v!r}") from exc
        cfg = cls(**kw)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.T < 1 or self.epochs < 0 or self.batch < 1 or self.lr < 0:
            raise ConfigError("T, batch must be >= 1; epochs, lr must be >= 0")
        if not 0 < self.beta_start <= self.beta_end < 1:
            raise ConfigError("need 0 < beta_start <= beta_end < 1")
        if self.model_dim % self.heads:
            raise ConfigError("model_dim must be divisible by heads")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError(f"unknown lr_schedule {self.lr_schedule!r}")
        try:
            self.workspace
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc


def parse_config_pairs(text: str) -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    d = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key = value")
        k, v = (s.strip() for s in line.split("=", 1))
        d[k] = v
    return d


def parse_config_text(text: str) -> DiffusionConfig:
    return DiffusionConfig.from_dict(parse_config_pairs(text))


def load_config(path) -> DiffusionConfig:
    return parse_config_text(Path(path).read_text(encoding="utf-8"))


def dump_config_text(cfg: DiffusionConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in cfg.to_dict().items())


# --- schedule and pose vectors ------------------------------------------------


class NoiseSchedule:
    """Linear beta schedule; arrays are indexed by ``t`` in ``1..T`` (index 0 unused)."""

    def __init__(self, T: int = 200, beta_start: float = 1e-4, beta_end: float = 0.02):
        if T < 1 or not 0 < beta_start <= beta_end < 1:
            raise ValueError("invalid schedule parameters")
        self.T = T
        betas = np.linspace(beta_start, beta_end, T) if T > 1 else np.array([beta_start])
        self.betas = np.concatenate([[0.0], betas])
        self.alphas = 1.0 - self.betas
        self.alpha_bars = np.cumprod(self.alphas)
        self.sigmas = np.sqrt(self.betas)

    @classmethod
    def from_config(cls, cfg: DiffusionConfig) -> NoiseSchedule:
        return cls(cfg.T, cfg.beta_start, cfg.beta_end)

    def check(self, t) -> None:
        t_arr = np.asarray(t)
        if np.any(t_arr < 1) or np.any(t_arr > self.T):
            raise BadTimestep(f"timestep outside 1..{self.T}: {t}")


def forward_noise(x0, t, eps, schedule: NoiseSchedule):
    """``x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`` (numpy or torch, batched over ``t``)."""
    schedule.check(t.cpu().numpy() if isinstance(t, torch.Tensor) else t)
    ab = schedule.alpha_bars[t.cpu().numpy() if isinstance(t, torch.Tensor) else t]
    if isinstance(x0, torch.Tensor):
        ab = torch.as_tensor(ab, dtype=x0.dtype)
        if ab.dim():
            ab = ab[:, None]
        return torch.sqrt(ab) * x0 + torch.sqrt(1 - ab) * eps
    ab = np.asarray(ab)
    if ab.ndim:
        ab = ab[:, None]
    return np.sqrt(ab) * np.asarray(x0) + np.sqrt(1 - ab) * np.asarray(eps)


def reverse_step(x_t, eps_hat, t: int, schedule: NoiseSchedule, z=None, strict_paper_update: bool = False):
    """One ancestral step ``x_t -> x_{t-1}``.

    The default divides the noise term by ``sqrt(1 - abar_t)``; with
    ``strict_paper_update`` the divisor is ``sqrt(1 - alpha_t)``.
    """
    schedule.check(t)
    a, ab = schedule.alphas[t], schedule.alpha_bars[t]
    coef = (1 - a) / math.sqrt(1 - a) if strict_paper_update else (1 - a) / math.sqrt(1 - ab)
    x = (x_t - coef * eps_hat) / math.sqrt(a)
    if t > 1 and z is not None:
        x = x + schedule.sigmas[t] * z
    return x


def pose_to_vector(pose: Pose, workspace: Workspace, clamp_warn: bool = True) -> np.ndarray:
    s = (pose.translation - workspace.center) / workspace.half_extents
    if np.any(np.abs(s) > 1):
        if clamp_warn:
            log.warning("translation %s outside the workspace; clamping", pose.translation)
        s = np.clip(s, -1, 1)
    return np.concatenate([s, pose.rotation[:, 0], pose.rotation[:, 1]])


def vector_to_pose(v, workspace: Workspace) -> Pose:
    v = np.asarray(v, dtype=np.float64).reshape(9)
    R = rotation_from_vectors(v[3:6], v[6:9])
    return Pose(workspace.center + v[:3] * workspace.half_extents, R)


# --- model --------------------------------------------------------------------


class Denoiser(torch.nn.Module):
    """Predicts the pose noise from the token sequence; read out at object tokens."""

    def __init__(self, cfg: DiffusionConfig, dtype=torch.float32):
        super().__init__()
        g = torch.Generator().manual_seed(cfg.seed)
        D = cfg.model_dim
        self.assembler = TokenAssembler(D, cfg.heads, cfg.cloud_blocks, cfg.max_text_len, g, dtype)
        self.blocks = torch.nn.ModuleList([TransformerBlock(D, cfg.heads, g, dtype) for _ in range(cfg.blocks)])
        self.ln_f = LayerNorm(D, dtype)
        self.head = Linear(D, 9, g, dtype)

    @property
    def dtype(self):
        return self.head.weight.dtype

    def hidden(self, ctx, x_t, t):
        seq, mask = self.assembler.tokens(ctx, x_t, t)
        for blk in self.blocks:
            seq = blk(seq, mask)
        return self.ln_f(seq)

    def denoise(self, ctx, x_t, t, all_objects: bool = False) -> torch.Tensor:
        h = self.hidden(ctx, x_t, t)
        n_prefix = ctx.prefix.shape[1]
        if all_objects:
            return self.head(h[:, n_prefix:])
        rows = torch.arange(h.shape[0])
        return self.head(h[rows, n_prefix + ctx.movable])

    def forward(self, batch: Batch, x_t, t, all_objects: bool = False) -> torch.Tensor:
        return self.denoise(self.assembler.context(batch), x_t, t, all_objects)


def training_loss(model, batch: Batch, x0: torch.Tensor, schedule: NoiseSchedule, generator: torch.Generator):
    """Masked L1 noise-prediction loss, averaged over the batch.

    Every object token gets a prediction, but the indicator keeps only the
    movable object's term. Returns ``(loss, details)``.
    """
    B, N = batch.obj_mask.shape
    dtype = x0.dtype
    t = torch.randint(1, schedule.T + 1, (B,), generator=generator)
    eps = torch.randn(B, 9, generator=generator, dtype=torch.float64).to(dtype)
    x_t = forward_noise(x0, t, eps, schedule)
    pred = model(batch, x_t, t, all_objects=True)
    indicator = torch.nn.functional.one_hot(batch.movable, N).to(dtype)
    target = indicator[..., None] * eps[:, None, :]
    per_object = (target - pred).abs().sum(-1)
    loss = (indicator * per_object).sum(-1).mean()
    return loss, {"t": t, "eps": eps, "x_t": x_t, "pred": pred}


@torch.no_grad()
def sample_vectors(
    model: Denoiser,
    batch: Batch,
    schedule: NoiseSchedule,
    generators: Sequence[torch.Generator],
    strict_paper_update: bool = False,
    denoise_fn: Callable | None = None,
) -> np.ndarray:
    """Run the reverse chain from ``x_T ~ N(0, I)`` for every batch element."""
    if len(generators) != batch.size:
        raise ValueError("one generator per batch element required")
    ctx = model.assembler.context(batch) if denoise_fn is None else None
    dtype = torch.float64 if denoise_fn is not None else model.dtype
    x = torch.stack([torch.randn(9, generator=g, dtype=torch.float64) for g in generators]).to(dtype)
    for t in range(schedule.T, 0, -1):
        tt = torch.full((batch.size,), t, dtype=torch.long)
        eps_hat = denoise_fn(x, tt) if denoise_fn is not None else model.denoise(ctx, x, tt)
        z = None
        if t > 1:
            z = torch.stack([torch.randn(9, generator=g, dtype=torch.float64) for g in generators]).to(dtype)
        x = reverse_step(x, eps_hat, t, schedule, z, strict_paper_update)
    return x.to(torch.float64).numpy()


def _generator(seed: int, key: int, attempt: int) -> torch.Generator:
    ss = np.random.SeedSequence([seed, key, attempt])
    return torch.Generator().manual_seed(int(ss.generate_state(1, dtype=np.uint64)[0] >> 1))


def sample_poses(
    model: Denoiser,
    conds: Sequence[Conditioning],
    schedule: NoiseSchedule,
    workspace: Workspace,
    seed: int = 0,
    keys: Sequence[int] | None = None,
    batch_size: int = 64,
    strict_paper_update: bool = False,
) -> list[tuple[Pose | None, np.ndarray]]:
    """Sample one goal pose per conditioning.

    ``keys`` (default: list positions) select each element's noise stream,
    so results do not depend on how the list is batched. A degenerate
    rotation is retried with a fresh stream up to five times; after that
    the pose is ``None``.
    """
    keys = list(range(len(conds))) if keys is None else list(keys)
    out: list = [None] * len(conds)
    pending = list(range(len(conds)))
    for attempt in range(1 + SAMPLE_RETRIES):
        if not pending:
            break
        failed = []
        for lo in range(0, len(pending), batch_size):
            chunk = pending[lo : lo + batch_size]
            batch = collate([conds[i] for i in chunk], model.dtype)
            gens = [_generator(seed, keys[i], attempt) for i in chunk]
            vecs = sample_vectors(model, batch, schedule, gens, strict_paper_update)
            for i, v in zip(chunk, vecs):
                try:
                    out[i] = (vector_to_pose(v, workspace), v)
                except DegenerateRotation:
                    out[i] = (None, v)
                    failed.append(i)
        pending = failed
    return out


def sample(model: Denoiser, cond: Conditioning, schedule: NoiseSchedule, workspace: Workspace, seed: int = 0,
           strict_paper_update: bool = False) -> Pose:
    pose, _ = sample_poses(model, [cond], schedule, workspace, seed, strict_paper_update=strict_paper_update)[0]
    if pose is None:
        raise SamplingDegenerate(f"degenerate rotation after {SAMPLE_RETRIES} retries")
    return pose


def sample_scene(model, scene: Scene, cond: Conditioning, schedule, seed: int = 0, strict_paper_update=False) -> Scene:
    """``scene`` with only the movable object moved to a sampled goal pose."""
    pose = sample(model, cond, schedule, scene.workspace, seed, strict_paper_update)
    return scene.with_pose(cond.movable, pose)


# --- training -----------------------------------------------------------------


@dataclass
class TrainState:
    config: DiffusionConfig
    model: Denoiser
    store: ParameterStore
    epoch: int = 0
    losses: list[float] = field(default_factory=list)
    text_encoder_spec: dict = field(default_factory=lambda: {"kind": "hash", "seed": 0})

    @property
    def step(self) -> int:
        return self.store.step

    def text_encoder(self):
        return load_text_encoder(self.text_encoder_spec, self.config.model_dim)

    def save(self, path) -> None:
        tensors = {}
        for name, p in self.store.params.items():
            tensors[f"param/{name}"] = p.detach().to(torch.float32).numpy()
            tensors[f"adam_m/{name}"] = self.store.m[name].to(torch.float32).numpy()
            tensors[f"adam_v/{name}"] = self.store.v[name].to(torch.float32).numpy()
        header = {
            "format": "SPCK1",
            "config": self.config.to_dict(),
            "seed": self.config.seed,
            "step": self.store.step,
            "epoch": self.epoch,
            "losses": self.losses,
            "text_encoder": self.text_encoder_spec,
        }
        save_checkpoint(path, header, tensors)

    @classmethod
    def load(cls, path, dtype=torch.float32) -> TrainState:
        header, tensors = load_checkpoint(path)
        cfg = DiffusionConfig.from_dict(header["config"])
        model = Denoiser(cfg, dtype)
        store = ParameterStore.from_module(model)
        with torch.no_grad():
            for name, p in store.params.items():
                p.copy_(torch.from_numpy(tensors[f"param/{name}"]))
                store.m[name].copy_(torch.from_numpy(tensors[f"adam_m/{name}"]))
                store.v[name].copy_(torch.from_numpy(tensors[f"adam_v/{name}"]))
        store.step = int(header["step"])
        return cls(cfg, model, store, int(header["epoch"]), list(header.get("losses", [])), header.get("text_encoder", {}))


def learning_rate(config: DiffusionConfig, step: int, total_steps: int) -> float:
    """Learning rate for the update that follows ``step`` completed updates."""
    if config.lr_schedule == "constant" or total_steps <= 0:
        return config.lr
    frac = min(step / total_steps, 1.0)
    return 0.5 * config.lr * (1.0 + math.cos(math.pi * frac))


def new_state(cfg: DiffusionConfig, dtype=torch.float32) -> TrainState:
    model = Denoiser(cfg, dtype)
    return TrainState(cfg, model, ParameterStore.from_module(model), text_encoder_spec={"kind": "hash", "seed": cfg.text_seed})


def instance_conditioning(instance, text_encoder, n_sample: int) -> Conditioning:
    return build_conditioning(instance.initial_scene, instance.clouds, instance.instruction, text_encoder, n_sample, seed=instance.id)


def train(
    instances: Sequence,
    config: DiffusionConfig,
    state: TrainState | None = None,
    dtype=torch.float32,
    on_epoch: Callable[[int, float], None] | None = None,
) -> TrainState:
    """Minibatch Adam on the masked L1 loss until ``config.epochs`` epochs are done.

    Passing a loaded ``state`` resumes it; the step counter keeps counting.
    Shuffles and noise draws are keyed by ``(seed, epoch)`` and
    ``(seed, step)``, so a run is reproducible from dataset, config and seed.
    """
    if not instances:
        raise ValueError("no training instances")
    config.validate()
    state = new_state(config, dtype) if state is None else state
    state.config = config
    schedule = NoiseSchedule.from_config(config)
    ws = config.workspace
    enc = state.text_encoder()
    conds = [instance_conditioning(inst, enc, config.cloud_points) for inst in instances]
    x0_all = np.stack([pose_to_vector(inst.goal_pose, ws) for inst in instances])
    model, store = state.model, state.store
    gen = torch.Generator()
    total_steps = config.epochs * math.ceil(len(instances) / config.batch)
    while state.epoch < config.epochs:
        epoch = state.epoch + 1
        order = np.random.default_rng([config.seed, epoch]).permutation(len(instances))
        total, seen = 0.0, 0
        t0 = time.time()
        for lo in range(0, len(order), config.batch):
            idx = order[lo : lo + config.batch]
            batch = collate([conds[i] for i in idx], dtype)
            x0 = torch.tensor(x0_all[idx], dtype=dtype)
            gen.manual_seed(config.seed * 1_000_003 + store.step)
            loss, _ = training_loss(model, batch, x0, schedule, gen)
            if not torch.isfinite(loss):
                raise NonFiniteLoss(f"loss {loss.item()} at epoch {epoch}, step {store.step}")
            backward(loss, store.values())
            adam_step(store, lr=learning_rate(config, store.step, total_steps))
            total += loss.item() * len(idx)
            seen += len(idx)
        state.epoch = epoch
        state.losses.append(total / seen)
        log.info("epoch %d loss %.4f (%.1fs)", epoch, total / seen, time.time() - t0)
        if on_epoch is not None:
            on_epoch(epoch, total / seen)
    return state
