"""Noise schedule, masked-learning curriculum, training loop and guided sampling."""

from __future__ import annotations

import logging
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .backbone import (
    MODALITIES,
    CHANNELS,
    ModelConfig,
    MultiViewDiT,
    TokenBatch,
    all_finite,
    encode_depth,
    encode_pose,
    encode_rgb,
    loss_terms,
)
from .errors import ConfigError, NothingToGenerateError, NumericError
from .geometry import normalize_cameras

log = logging.getLogger(__name__)

TASKS = ("nvs", "pose", "depth", "random")
DEFAULT_TASK_PROBS = (0.3, 0.3, 0.3, 0.1)


# -- schedule -----------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Schedule:
    T: int
    kind: str
    alpha: np.ndarray
    sigma: np.ndarray


def make_schedule(T: int = 200, kind: str = "cosine", s: float = 0.008) -> Schedule:
    """Variance-preserving schedule indexed by t in [0, T)."""
    if T < 2:
        raise ConfigError("schedule needs T >= 2")
    if kind == "cosine":
        u = (np.arange(T, dtype=np.float64) + 1.0) / T
        phase = 0.5 * np.pi * (u + s) / (1.0 + s)
        alpha, sigma = np.cos(phase), np.sin(phase)
    elif kind == "linear":
        betas = np.linspace(1e-4, 0.02 * 1000.0 / T, T)
        abar = np.cumprod(1.0 - betas)
        alpha, sigma = np.sqrt(abar), np.sqrt(1.0 - abar)
    else:
        raise ConfigError(f"unknown schedule kind {kind!r}")
    alpha.setflags(write=False)
    sigma.setflags(write=False)
    return Schedule(T, kind, alpha, sigma)


def corrupt(x0, alpha, sigma, noise):
    return alpha * x0 + sigma * noise


def v_target(x0, alpha, sigma, noise):
    return alpha * noise - sigma * x0


def x0_from_v(xt, alpha, sigma, v):
    return alpha * xt - sigma * v


def eps_from_v(xt, alpha, sigma, v):
    return sigma * xt + alpha * v


# -- mask plans ---------------------------------------------------------------

CONDITION, TARGET = "condition", "target"


@dataclass
class MaskPlan:
    """Role of every (view, modality) slot; slots not listed are absent."""

    task: str
    n_views: int
    roles: dict  # (view, modality) -> "condition" | "target"
    cond_dropped: bool = False

    def conditions(self) -> list:
        return sorted((k for k, r in self.roles.items() if r == CONDITION), key=_slot_key)

    def targets(self) -> list:
        return sorted((k for k, r in self.roles.items() if r == TARGET), key=_slot_key)

    def drop_conditions(self) -> "MaskPlan":
        roles = {k: r for k, r in self.roles.items() if r == TARGET}
        return MaskPlan(self.task, self.n_views, roles, True)

    def describe(self) -> str:
        tg = ",".join(f"{v}:{m}" for v, m in self.targets())
        return f"task={self.task} views={self.n_views} targets=[{tg}] cond_dropped={self.cond_dropped}"


def _slot_key(k):
    return (k[0], MODALITIES.index(k[1]))


def nvs_plan(n_views: int, cond_views) -> MaskPlan:
    cond_views = set(int(v) for v in cond_views)
    roles = {}
    for v in range(n_views):
        roles[(v, "pose")] = CONDITION
        roles[(v, "rgb")] = CONDITION if v in cond_views else TARGET
    return MaskPlan("nvs", n_views, roles)


def pose_plan(n_views: int, with_depth: bool = False) -> MaskPlan:
    roles = {(v, "rgb"): CONDITION for v in range(n_views)}
    roles[(0, "pose")] = CONDITION
    for v in range(1, n_views):
        roles[(v, "pose")] = TARGET
    if with_depth:
        roles.update({(v, "depth"): CONDITION for v in range(n_views)})
    return MaskPlan("pose", n_views, roles)


def depth_plan(n_views: int) -> MaskPlan:
    roles = {}
    for v in range(n_views):
        roles[(v, "rgb")] = CONDITION
        roles[(v, "pose")] = CONDITION
        roles[(v, "depth")] = TARGET
    return MaskPlan("depth", n_views, roles)


def random_plan(rng: np.random.Generator, n_views: int, modalities) -> MaskPlan:
    slots = [(v, m) for v in range(n_views) for m in MODALITIES if m in modalities]
    flags = rng.random(len(slots)) < 0.5
    if not flags.any():
        flags[int(rng.integers(len(slots)))] = True
    roles = {k: TARGET if f else CONDITION for k, f in zip(slots, flags)}
    return MaskPlan("random", n_views, roles)


def sample_mask_plan(
    rng: np.random.Generator,
    n_views: int,
    modalities_present=MODALITIES,
    task_probs=DEFAULT_TASK_PROBS,
    cond_drop: float = 0.1,
) -> MaskPlan:
    """Draw a task, build its plan, then drop all conditions with probability ``cond_drop``.

    Tasks whose modalities are missing (or that need two views when only one
    is available) fall back to a random plan over the available modalities.
    """
    if n_views < 1:
        raise ValueError("n_views must be >= 1")
    present = set(modalities_present)
    task = TASKS[int(rng.choice(len(TASKS), p=np.asarray(task_probs, dtype=np.float64)))]
    dropped = rng.random() < cond_drop
    needs = {"nvs": {"rgb", "pose"}, "pose": {"rgb", "pose"}, "depth": {"rgb", "pose", "depth"}}
    if task != "random" and (not needs[task] <= present or (task in ("nvs", "pose") and n_views < 2)):
        plan = random_plan(rng, n_views, present)
    elif task == "nvs":
        k = int(rng.integers(1, n_views))
        plan = nvs_plan(n_views, rng.choice(n_views, size=k, replace=False))
    elif task == "pose":
        plan = pose_plan(n_views)
    elif task == "depth":
        plan = depth_plan(n_views)
    else:
        plan = random_plan(rng, n_views, present)
    plan.task = task
    return plan.drop_conditions() if dropped else plan


# -- examples -----------------------------------------------------------------


@dataclass
class EncodedScene:
    """Per-view model-space maps that do not depend on the chosen reference view."""

    rgb: list
    depth: list
    cameras: list
    has_depth: bool


def encode_scene(scene, config: ModelConfig) -> EncodedScene:
    rgb, depth = [], []
    h, w = config.resolutions["rgb"]
    for v in scene.views:
        if v.rgb.shape[:2] != (h, w):
            raise ConfigError(f"scene RGB is {v.rgb.shape[:2]}, model expects {(h, w)}")
        rgb.append(encode_rgb(v.rgb))
        depth.append(encode_depth(v.depth, config) if v.depth is not None else None)
    has_depth = all(d is not None for d in depth)
    return EncodedScene(rgb, depth, [v.camera for v in scene.views], has_depth)


def view_maps(enc: EncodedScene, order, config: ModelConfig) -> dict:
    """Model-space maps for the chosen views, cameras normalized to the first one."""
    cams = normalize_cameras([enc.cameras[i] for i in order])
    maps = {}
    for v, (i, cam) in enumerate(zip(order, cams)):
        maps[(v, "rgb")] = enc.rgb[i]
        maps[(v, "pose")] = encode_pose(cam, config)
        if enc.has_depth:
            maps[(v, "depth")] = enc.depth[i]
    return maps


def plan_slots(plan: MaskPlan, maps: dict) -> tuple[list, list]:
    cond = [(v, m, maps[(v, m)]) for v, m in plan.conditions()]
    tgt = [(v, m, maps[(v, m)]) for v, m in plan.targets()]
    return cond, tgt


# -- training -----------------------------------------------------------------


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 8
    lr: float = 5e-4
    warmup: int = 100
    weight_decay: float = 0.05
    betas: tuple = (0.9, 0.95)
    grad_clip: float = 1.0
    views_per_sample: tuple = (2, 4)
    task_probs: tuple = DEFAULT_TASK_PROBS
    cond_drop: float = 0.1
    seed: int = 0
    log_every: int = 100
    micro_batches: int = 4
    # False keeps each scene's views in stored order (first n), as when overfitting fixed scenes
    shuffle_views: bool = True
    lr_decay: str = "none"  # "none" or "cosine" (to zero at the last step, after warmup)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        d["views_per_sample"] = list(self.views_per_sample)
        d["task_probs"] = list(self.task_probs)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        d = dict(d)
        for k in ("betas", "views_per_sample", "task_probs"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass
class TrainResult:
    losses: list = field(default_factory=list)
    tasks: list = field(default_factory=list)  # per step: list of per-sample (task, loss)

    def task_losses(self) -> list:
        """(step, task, mean loss over that step's samples of the task) rows."""
        rows = []
        for step, items in enumerate(self.tasks):
            by = {}
            for task, value in items:
                by.setdefault(task, []).append(value)
            rows.extend((step, task, float(np.mean(v))) for task, v in sorted(by.items()))
        return rows


def _slot_noise(rng: np.random.Generator, tgts: list) -> list:
    """Unit Gaussian noise per target slot, drawn in sample order so grouping cannot change it."""
    return [[(v, m, rng.standard_normal(np.shape(arr))) for v, m, arr in slots] for slots in tgts]


def draw_batch(rng, encoded: list, config: ModelConfig, tcfg: TrainConfig):
    """Per-sample (condition slots, target slots) and their mask plans."""
    conds, tgts, plans = [], [], []
    lo, hi = tcfg.views_per_sample
    for _ in range(tcfg.batch_size):
        enc = encoded[int(rng.integers(len(encoded)))]
        n_avail = len(enc.rgb)
        n = int(rng.integers(min(lo, n_avail), min(hi, n_avail, config.max_views) + 1))
        order = rng.permutation(n_avail)[:n] if tcfg.shuffle_views else np.arange(n)
        maps = view_maps(enc, order, config)
        present = {m for (_, m) in maps}
        plan = sample_mask_plan(rng, n, present, tcfg.task_probs, tcfg.cond_drop)
        c, t = plan_slots(plan, maps)
        conds.append(c)
        tgts.append(t)
        plans.append(plan)
    return conds, tgts, plans


def size_groups(conds: list, tgts: list, n_groups: int) -> list:
    """Split sample indices into groups of similar slot counts to limit padding."""
    order = sorted(range(len(tgts)), key=lambda i: (len(tgts[i]), len(conds[i]), i))
    n_groups = max(1, min(n_groups, len(order)))
    return [list(g) for g in np.array_split(order, n_groups) if len(g)]


def _lr_at(step: int, tcfg: TrainConfig) -> float:
    if tcfg.warmup > 0 and step < tcfg.warmup:
        return tcfg.lr * (step + 1) / tcfg.warmup
    if tcfg.lr_decay == "cosine":
        span = max(1, tcfg.steps - max(tcfg.warmup, 0))
        frac = (step - max(tcfg.warmup, 0)) / span
        return tcfg.lr * 0.5 * (1.0 + np.cos(np.pi * frac))
    if tcfg.lr_decay != "none":
        raise ConfigError(f"unknown lr_decay {tcfg.lr_decay!r}")
    return tcfg.lr


def train(model: MultiViewDiT, dataset: list, schedule: Schedule, tcfg: TrainConfig, callback=None) -> TrainResult:
    """AdamW on the masked v-prediction loss; deterministic for a fixed seed.

    ``dataset`` is a list of scenes (``SceneData``) rendered at the model's
    resolutions. ``callback(step, loss)`` is invoked after every step. The
    batch is evaluated in size-sorted micro-batches whose squared-error sums
    are pooled, so the objective equals the single-batch one.
    """
    if not dataset:
        raise ConfigError("training dataset is empty")
    cfg = model.config
    encoded = [encode_scene(s, cfg) for s in dataset]
    rng = np.random.default_rng(tcfg.seed)
    opt = torch.optim.AdamW(model.parameters(), lr=tcfg.lr, betas=tuple(tcfg.betas), weight_decay=tcfg.weight_decay)
    result = TrainResult()
    model.train()
    for step in range(tcfg.steps):
        conds, tgts, plans = draw_batch(rng, encoded, cfg, tcfg)
        t_all = rng.integers(0, schedule.T, size=len(plans))
        noise_all = _slot_noise(rng, tgts)
        groups = size_groups(conds, tgts, tcfg.micro_batches)
        batches = []
        for g in groups:
            x0 = TokenBatch.from_slots([tgts[i] for i in g])
            noise = TokenBatch.from_slots([noise_all[i] for i in g]).maps
            batches.append((g, TokenBatch.from_slots([conds[i] for i in g]), x0, noise))
        for pg in opt.param_groups:
            pg["lr"] = _lr_at(step, tcfg)
        opt.zero_grad(set_to_none=True)
        num, den = 0.0, 0.0
        each = np.zeros(len(plans))
        for g, cond, x0, noise in batches:
            n_, d_, e_ = loss_terms(model, cond, x0, torch.from_numpy(t_all[g]), noise, schedule)
            num, den = num + n_, den + d_
            each[g] = e_.numpy()
        value = num / den.clamp_min(1.0)
        if not torch.isfinite(value):
            raise NumericError(f"non-finite loss at step {step}; plans: " + "; ".join(p.describe() for p in plans))
        value.backward()
        if tcfg.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(model.parameters(), tcfg.grad_clip)
        opt.step()
        if __debug__ and not all_finite(model):
            raise NumericError(f"non-finite parameters after step {step}")
        result.losses.append(float(value.detach()))
        result.tasks.append([(p.task, float(e)) for p, e in zip(plans, each)])
        if callback is not None:
            callback(step, result.losses[-1])
        if tcfg.log_every and step % tcfg.log_every == 0:
            log.info("step %d loss %.5f", step, result.losses[-1])
    model.train_info = {"cond_drop": tcfg.cond_drop, "steps": tcfg.steps}
    model.eval()
    return result


# -- sampling -----------------------------------------------------------------


@dataclass
class GuidanceConfig:
    scales: dict = field(default_factory=lambda: {"rgb": 1.5, "pose": 1.5, "depth": 1.0})
    steps: int = 50
    sampler: str = "ddim"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GuidanceConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown guidance config keys: {sorted(unknown)}")
        return cls(**d)

    @property
    def active(self) -> bool:
        return any(float(s) != 1.0 for s in self.scales.values())


def sampling_timesteps(schedule: Schedule, steps: int) -> np.ndarray:
    """Descending strided sub-schedule from T-1 to 0."""
    steps = max(1, min(int(steps), schedule.T))
    ts = np.round(np.linspace(schedule.T - 1, 0, steps)).astype(int)
    return np.unique(ts)[::-1]


@torch.no_grad()
def sample(
    model: MultiViewDiT,
    plan: MaskPlan,
    maps: dict,
    schedule: Schedule,
    guidance: GuidanceConfig | None = None,
    rng: np.random.Generator | int = 0,
) -> dict:
    """Generate every target slot of ``plan`` given condition ``maps``.

    Returns model-space clean estimates keyed by (view, modality). Targets
    start from unit Gaussian noise and follow deterministic DDIM updates; per
    modality, v = v_uncond + s * (v_cond - v_uncond) with s = 1 using the
    conditional prediction as is.
    """
    guidance = guidance or GuidanceConfig(scales={m: 1.0 for m in MODALITIES})
    if guidance.sampler != "ddim":
        raise ConfigError(f"unknown sampler {guidance.sampler!r}")
    targets = plan.targets()
    if not targets:
        raise NothingToGenerateError("plan has no targets")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    if guidance.active and getattr(model, "train_info", {}).get("cond_drop", 0.1) <= 0:
        warnings.warn("classifier-free guidance requested but the model was trained without condition dropout")
    model.eval()
    cfg = model.config
    dtype = next(model.parameters()).dtype
    cond_slots = [(v, m, maps[(v, m)]) for v, m in plan.conditions()]
    cond = TokenBatch.from_slots([cond_slots], dtype)
    uncond = TokenBatch.from_slots([[]], dtype)
    shapes = [(CHANNELS[m], *cfg.resolutions[m]) for _, m in targets]
    x = [rng.standard_normal(s) for s in shapes]
    use_uncond = guidance.active and bool(cond_slots)
    ts = sampling_timesteps(schedule, guidance.steps)
    x0 = x
    for i, t in enumerate(ts):
        tb = TokenBatch.from_slots([[(v, m, xi) for (v, m), xi in zip(targets, x)]], dtype)
        tt = torch.tensor([int(t)])
        out_c = model(cond, tb, tt)
        out_u = model(uncond, tb, tt) if use_uncond else None
        a, s = schedule.alpha[t], schedule.sigma[t]
        counters = {m: 0 for m in MODALITIES}
        new_x, x0 = [], []
        for (v, m), xi in zip(targets, x):
            k = counters[m]
            counters[m] += 1
            vc = out_c[m][k].double().numpy()
            scale = float(guidance.scales.get(m, 1.0))
            if out_u is None or scale == 1.0:
                vhat = vc
            else:
                vu = out_u[m][k].double().numpy()
                vhat = vu + scale * (vc - vu)
            x0_i = x0_from_v(xi, a, s, vhat)
            x0.append(x0_i)
            if i + 1 < len(ts):
                tn = ts[i + 1]
                new_x.append(corrupt(x0_i, schedule.alpha[tn], schedule.sigma[tn], eps_from_v(xi, a, s, vhat)))
        x = new_x
    return {k: xi for k, xi in zip(targets, x0)}
