"""Losses, per-stage parameter routing, optimizer, schedule and the training loop.

Every iteration of the main phase runs four sub-steps in a fixed order:

(a) supervised - each branch minimizes cross-entropy on the labeled pool,
    updating its own encoder and head;
(b) finding    - both heads consume the attention encoder's features on
    unlabeled data; the heads maximize their output discrepancy while the
    supervised terms anchor them, and only the heads move;
(c) conquering - both heads consume the conv encoder's features; only the
    conv encoder moves, descending the discrepancy;
(d) co-training - each branch pseudo-labels weakly augmented unlabeled
    samples above its confidence threshold to supervise the other branch
    on strongly augmented views.

Batches for all sub-steps are drawn in a fixed order from named RNG streams
regardless of which stages are enabled, so toggling a stage (or closing the
pseudo-label gate) leaves every other update bit-identical.
"""

from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import ContractError, NumericError, Parameter, Tensor
from .data import DomainDataset, Sample, aug_strong, aug_weak
from .nn import Branch, ConfigError, Geometry

COTRAIN_MODES = ("both", "vit2cnn", "cnn2vit", "off")
ARCH_PAIRS = ("attn+conv", "conv+conv", "attn+attn")

# Named RNG stream tags: one knob change must not reshuffle the others.
_STREAM_INIT = 0
_STREAM_DATA = 1
_STREAM_AUG_WEAK = 2
_STREAM_AUG_STRONG = 3
_STREAM_PSEUDO_EVAL = 4

STAGES = ("sup_vit", "sup_cnn", "find", "conq", "v2c", "c2v")

CSV_COLUMNS = (
    "iter", "lr_vit", "lr_cnn",
    "loss_sup_vit", "loss_sup_cnn", "loss_find", "loss_conq",
    "loss_v2c", "loss_c2v",
    "pseudo_total_v2c", "pseudo_correct_v2c",
    "pseudo_total_c2v", "pseudo_correct_c2v",
    "acc_target_cnn", "acc_target_vit",
)


@dataclass
class EcbConfig:
    """All hyperparameters of a run in one serializable record."""

    lr_vit: float = 1e-3
    lr_cnn: float = 1e-2
    momentum: float = 0.9
    weight_decay: float = 0.0005
    batch_size: int = 32
    tau_vit: float = 0.6
    tau_cnn: float = 0.9
    warmup_iters: int = 2000
    train_iters: int = 3000
    sched_gamma: float = 1e-4
    sched_power: float = 0.75
    cotrain_mode: str = "both"
    arch_pair: str = "attn+conv"
    ftc: bool = True
    # find/conquer run this much gentler than the supervised stages: the
    # from-scratch desk models need hot supervised rates that would let the
    # adversarial pair saturate the heads if applied unscaled
    ftc_lr_scale: float = 0.1
    feat_dim: int = 32
    head_hidden: int = 32
    log_interval: int = 100
    ckpt_interval: int = 1000
    seed: int = 0

    def validate(self) -> None:
        if not (0.0 <= self.tau_vit <= 1.0 and 0.0 <= self.tau_cnn <= 1.0):
            raise ConfigError("confidence thresholds must lie in [0, 1]")
        if self.lr_vit <= 0 or self.lr_cnn <= 0:
            raise ConfigError("learning rates must be positive")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be at least 2")
        if self.warmup_iters < 0 or self.train_iters < 0:
            raise ConfigError("iteration counts must be nonnegative")
        if self.cotrain_mode not in COTRAIN_MODES:
            raise ConfigError(f"cotrain_mode {self.cotrain_mode!r} not in {COTRAIN_MODES}")
        if self.arch_pair not in ARCH_PAIRS:
            raise ConfigError(f"arch_pair {self.arch_pair!r} not in {ARCH_PAIRS}")
        if self.ftc_lr_scale <= 0:
            raise ConfigError("ftc_lr_scale must be positive")
        if self.log_interval < 1:
            raise ConfigError("log_interval must be positive")


def format_config(cfg: EcbConfig) -> str:
    lines = [f"{f.name} = {getattr(cfg, f.name)}" for f in fields(EcbConfig)]
    return "\n".join(lines) + "\n"


def parse_config(text: str, base: EcbConfig | None = None) -> EcbConfig:
    """Flat key = value document; unknown keys are an error."""
    kinds = {f.name: f.type for f in fields(EcbConfig)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key not in kinds:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        kind = kinds[key]
        try:
            if kind in ("float", float):
                values[key] = float(val)
            elif kind in ("int", int):
                values[key] = int(val)
            elif kind in ("bool", bool):
                if val.lower() not in ("true", "false"):
                    raise ValueError(val)
                values[key] = val.lower() == "true"
            else:
                values[key] = val
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key!r}: {val!r}") from exc
    cfg = replace(base, **values) if base is not None else EcbConfig(**values)
    cfg.validate()
    return cfg


def config_hash(cfg: EcbConfig) -> str:
    return hashlib.sha256(format_config(cfg).encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------------
# state

class _Cursor:
    """Shuffled-epoch index stream over a fixed pool, driven by one rng."""

    def __init__(self, size: int, rng: np.random.Generator):
        self.size = size
        self.rng = rng
        self.order = rng.permutation(size)
        self.pos = 0

    def next(self, count: int) -> list[int]:
        out = []
        while len(out) < count:
            if self.pos == self.size:
                self.order = self.rng.permutation(self.size)
                self.pos = 0
            take = min(count - len(out), self.size - self.pos)
            out.extend(self.order[self.pos:self.pos + take].tolist())
            self.pos += take
        return out


@dataclass
class EcbState:
    """Both branches plus everything that makes a step reproducible."""

    config: EcbConfig
    geometry: Geometry
    data: DomainDataset
    vit_branch: Branch
    cnn_branch: Branch
    rng_weak: np.random.Generator
    rng_strong: np.random.Generator
    labeled_cursor: _Cursor
    unlabeled_cursor: _Cursor
    iter: int = 0

    @property
    def vit_params(self) -> list[Parameter]:
        return self.vit_branch.params

    @property
    def cnn_params(self) -> list[Parameter]:
        return self.cnn_branch.params

    @property
    def head_params(self) -> list[Parameter]:
        return self.vit_branch.head_params + self.cnn_branch.head_params

    @property
    def all_params(self) -> list[Parameter]:
        return self.vit_params + self.cnn_params


def build_geometry(cfg: EcbConfig, ds: DomainDataset) -> Geometry:
    c, h, w = ds.image_shape()
    if h != w:
        raise ConfigError(f"square images required, got {(c, h, w)}")
    return Geometry(image_side=h, channels=c, classes=ds.classes,
                    feat_dim=cfg.feat_dim, head_hidden=cfg.head_hidden)


def init_state(cfg: EcbConfig, ds: DomainDataset) -> EcbState:
    cfg.validate()
    ds.validate()
    if not ds.labeled:
        raise ContractError("no labeled samples to train on")
    geom = build_geometry(cfg, ds)
    arch_vit, arch_cnn = cfg.arch_pair.split("+")
    init_rng = np.random.default_rng([cfg.seed, _STREAM_INIT])
    seeds = init_rng.integers(0, 2 ** 31 - 1, size=2)
    vit = nn.make_branch(arch_vit, geom, int(seeds[0]), enc_prefix="e1", head_prefix="f1")
    cnn = nn.make_branch(arch_cnn, geom, int(seeds[1]), enc_prefix="e2", head_prefix="f2")
    data_rng = np.random.default_rng([cfg.seed, _STREAM_DATA])
    return EcbState(
        config=cfg, geometry=geom, data=ds, vit_branch=vit, cnn_branch=cnn,
        rng_weak=np.random.default_rng([cfg.seed, _STREAM_AUG_WEAK]),
        rng_strong=np.random.default_rng([cfg.seed, _STREAM_AUG_STRONG]),
        labeled_cursor=_Cursor(len(ds.labeled), data_rng),
        unlabeled_cursor=_Cursor(len(ds.target_unlabeled), data_rng),
    )


def stack_images(samples: list[Sample]) -> Tensor:
    return Tensor(np.stack([s.image for s in samples]))


def stack_labels(samples: list[Sample]) -> np.ndarray:
    return np.asarray([s.label for s in samples], dtype=np.int64)


# ---------------------------------------------------------------------------
# losses

def branch_probs(branch: Branch, x: Tensor) -> Tensor:
    return ad.softmax(branch.logits(x))


def loss_sup(branch: Branch, batch: list[Sample]) -> Tensor:
    """Mean cross-entropy of softmax(head(encoder(x))) against ground truth."""
    if not batch:
        raise ContractError("supervised loss needs a nonempty batch")
    return ad.cross_entropy(branch_probs(branch, stack_images(batch)), stack_labels(batch))


def discrepancy(p1: Tensor, p2: Tensor) -> Tensor:
    """Per-class mean absolute difference between two probability outputs.

    Symmetric, zero iff the classifiers agree exactly, bounded in [0, 1].
    """
    if p1.shape != p2.shape:
        raise ad.ShapeError(f"discrepancy: shapes {p1.shape} and {p2.shape} differ")
    for p in (p1, p2):
        if np.any(np.abs(p.data.sum(axis=-1) - 1.0) > 1e-6):
            raise ContractError("discrepancy expects probability rows summing to 1 within 1e-6")
    return ad.abs_mean_diff(p1, p2)


def loss_find(state: EcbState, labeled: list[Sample], unlabeled: list[Sample]) -> tuple[Tensor, dict]:
    """Supervised anchors minus the heads' discrepancy on E1 features.

    Both heads consume the attention encoder's features on the unlabeled
    batch; minimizing this loss maximizes their disagreement there.
    """
    if not unlabeled:
        raise ContractError("finding stage needs a nonempty unlabeled batch")
    sup_vit = loss_sup(state.vit_branch, labeled)
    sup_cnn = loss_sup(state.cnn_branch, labeled)
    feats = state.vit_branch.features(stack_images(unlabeled))
    p1 = ad.softmax(state.vit_branch.head.forward(feats))
    p2 = ad.softmax(state.cnn_branch.head.forward(feats))
    disc = discrepancy(p1, p2)
    loss = ad.sub(ad.add(sup_vit, sup_cnn), disc)
    return loss, {"sup_vit": sup_vit.item(), "sup_cnn": sup_cnn.item(), "disc": disc.item()}


def loss_conq(state: EcbState, unlabeled: list[Sample]) -> Tensor:
    """The heads' discrepancy on E2 features; descending it clusters target
    features inside the boundaries the finding stage spread out."""
    if not unlabeled:
        raise ContractError("conquering stage needs a nonempty unlabeled batch")
    feats = state.cnn_branch.features(stack_images(unlabeled))
    p1 = ad.softmax(state.vit_branch.head.forward(feats))
    p2 = ad.softmax(state.cnn_branch.head.forward(feats))
    return discrepancy(p1, p2)


@dataclass
class CotrainStats:
    total: int
    correct: int


def cotrain_views(batch: list[Sample], rng_weak: np.random.Generator,
                  rng_strong: np.random.Generator) -> tuple[list[Sample], list[Sample]]:
    """Weak view for the teacher, strong view for the student, same samples."""
    weak = [aug_weak(s, rng_weak) for s in batch]
    strong = [aug_strong(s, rng_strong) for s in batch]
    return weak, strong


def loss_cotrain(teacher: Branch, student: Branch, weak: list[Sample],
                 strong: list[Sample], tau: float) -> tuple[Tensor, CotrainStats]:
    """Confidence-gated pseudo-label loss, normalized by the full batch size.

    The teacher predicts on weak views without gradient; samples whose max
    probability reaches tau contribute the cross-entropy of the student's
    prediction on the matching strong view against the argmax pseudo label.
    An empty selection yields the zero scalar (and no update).
    """
    if not (0.0 <= tau <= 1.0):
        raise ConfigError(f"threshold {tau} outside [0, 1]")
    with ad.no_grad():
        q = branch_probs(teacher, stack_images(weak)).data
    conf = q.max(axis=1)
    pseudo = q.argmax(axis=1)
    mask = conf >= tau
    total = int(mask.sum())
    truth = np.asarray([s.eval_label() for s in weak])
    correct = int(np.sum(pseudo[mask] == truth[mask])) if total else 0
    stats = CotrainStats(total=total, correct=correct)
    if total == 0:
        return Tensor(0.0), stats
    picked = [s for s, keep in zip(strong, mask) if keep]
    probs = branch_probs(student, stack_images(picked))
    loss = ad.mul(ad.cross_entropy(probs, pseudo[mask]), total / len(weak))
    return loss, stats


# ---------------------------------------------------------------------------
# optimizer and schedule

def sgd_step(params: list[Parameter], lr: float, momentum: float,
             weight_decay: float) -> None:
    """v <- momentum*v + grad + weight_decay*param; param <- param - lr*v.

    Gradients are zeroed afterwards.  Non-finite gradients abort the run.
    """
    for p in params:
        g = p.tensor.grad
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in parameter {p.name!r}")
        p.momentum *= momentum
        p.momentum += g + weight_decay * p.tensor.data
        p.tensor.data -= lr * p.momentum
        g[...] = 0.0


def lr_schedule(lr0: float, iteration: int, gamma: float = 1e-4,
                power: float = 0.75) -> float:
    """Inverse-decay schedule: lr0 * (1 + gamma*iteration) ** (-power)."""
    if iteration < 0:
        raise ContractError(f"iteration must be nonnegative, got {iteration}")
    return lr0 * (1.0 + gamma * iteration) ** (-power)


def _check_finite(value: float, stage: str, iteration: int) -> float:
    if not np.isfinite(value):
        raise NumericError(f"non-finite loss in stage {stage!r} at iteration {iteration}")
    return float(value)


# ---------------------------------------------------------------------------
# sub-steps (exposed individually so tests can drive them on frozen batches)

def finding_substep(state: EcbState, labeled: list[Sample],
                    unlabeled: list[Sample], lr: float) -> float:
    cfg = state.config
    loss, _ = loss_find(state, labeled, unlabeled)
    val = _check_finite(loss.item(), "find", state.iter)
    ad.backward(loss, state.head_params)
    sgd_step(state.head_params, lr, cfg.momentum, cfg.weight_decay)
    return val


def conquering_substep(state: EcbState, unlabeled: list[Sample], lr: float) -> float:
    cfg = state.config
    loss = loss_conq(state, unlabeled)
    val = _check_finite(loss.item(), "conq", state.iter)
    ad.backward(loss, state.cnn_branch.encoder_params)
    sgd_step(state.cnn_branch.encoder_params, lr, cfg.momentum, cfg.weight_decay)
    return val


def cotrain_substep(state: EcbState, direction: str, weak: list[Sample],
                    strong: list[Sample], lr: float) -> tuple[float, CotrainStats]:
    cfg = state.config
    if direction == "v2c":
        teacher, student, tau = state.vit_branch, state.cnn_branch, cfg.tau_vit
        updated = state.cnn_params
    else:
        teacher, student, tau = state.cnn_branch, state.vit_branch, cfg.tau_cnn
        updated = state.vit_params
    loss, stats = loss_cotrain(teacher, student, weak, strong, tau)
    val = _check_finite(loss.item(), direction, state.iter)
    if stats.total > 0:
        ad.backward(loss, updated)
        sgd_step(updated, lr, cfg.momentum, cfg.weight_decay)
    return val, stats


def _call_hook(hooks, stage: str, when: str, state: EcbState) -> None:
    if hooks is not None:
        hooks(stage, when, state)


def train_step(state: EcbState, cfg: EcbConfig | None = None, *,
               warmup: bool = False, hooks=None) -> dict:
    """One full iteration; returns the stage losses and per-batch gate stats.

    Batches for every sub-step are drawn up front in a fixed order, so
    disabled stages still consume their draws and toggling them cannot
    perturb the remaining updates.
    """
    cfg = cfg or state.config
    bs = cfg.batch_size
    t = state.iter
    lr_v = lr_schedule(cfg.lr_vit, t, cfg.sched_gamma, cfg.sched_power)
    lr_c = lr_schedule(cfg.lr_cnn, t, cfg.sched_gamma, cfg.sched_power)
    labeled = state.data.labeled
    unlabeled = state.data.target_unlabeled
    out = {"iter": t, "lr_vit": lr_v, "lr_cnn": lr_c,
           "loss_sup_vit": 0.0, "loss_sup_cnn": 0.0, "loss_find": 0.0,
           "loss_conq": 0.0, "loss_v2c": 0.0, "loss_c2v": 0.0,
           "batch_pseudo_v2c": CotrainStats(0, 0), "batch_pseudo_c2v": CotrainStats(0, 0)}

    # labeled batches train under the weak augmentation; unlabeled views for
    # the find/conquer stages stay clean
    b_sup = [aug_weak(labeled[i], state.rng_weak) for i in state.labeled_cursor.next(bs)]
    if not warmup:
        b_find_l = [aug_weak(labeled[i], state.rng_weak) for i in state.labeled_cursor.next(bs)]
        b_find_u = [unlabeled[i] for i in state.unlabeled_cursor.next(bs)]
        b_conq_u = [unlabeled[i] for i in state.unlabeled_cursor.next(bs)]
        b_v2c = [unlabeled[i] for i in state.unlabeled_cursor.next(bs)]
        v2c_weak, v2c_strong = cotrain_views(b_v2c, state.rng_weak, state.rng_strong)
        b_c2v = [unlabeled[i] for i in state.unlabeled_cursor.next(bs)]
        c2v_weak, c2v_strong = cotrain_views(b_c2v, state.rng_weak, state.rng_strong)

    _call_hook(hooks, "sup_vit", "before", state)
    # the supervised sub-step updates both branches; split the hook around each
    lv = loss_sup(state.vit_branch, b_sup)
    out["loss_sup_vit"] = _check_finite(lv.item(), "sup_vit", t)
    ad.backward(lv, state.vit_params)
    sgd_step(state.vit_params, lr_v, cfg.momentum, cfg.weight_decay)
    _call_hook(hooks, "sup_vit", "after", state)

    _call_hook(hooks, "sup_cnn", "before", state)
    lc = loss_sup(state.cnn_branch, b_sup)
    out["loss_sup_cnn"] = _check_finite(lc.item(), "sup_cnn", t)
    ad.backward(lc, state.cnn_params)
    sgd_step(state.cnn_params, lr_c, cfg.momentum, cfg.weight_decay)
    _call_hook(hooks, "sup_cnn", "after", state)

    if not warmup:
        if cfg.ftc:
            _call_hook(hooks, "find", "before", state)
            out["loss_find"] = finding_substep(state, b_find_l, b_find_u,
                                               cfg.ftc_lr_scale * lr_v)
            _call_hook(hooks, "find", "after", state)
            _call_hook(hooks, "conq", "before", state)
            out["loss_conq"] = conquering_substep(state, b_conq_u,
                                                  cfg.ftc_lr_scale * lr_c)
            _call_hook(hooks, "conq", "after", state)
        if cfg.cotrain_mode in ("both", "vit2cnn"):
            _call_hook(hooks, "v2c", "before", state)
            out["loss_v2c"], out["batch_pseudo_v2c"] = cotrain_substep(
                state, "v2c", v2c_weak, v2c_strong, lr_c)
            _call_hook(hooks, "v2c", "after", state)
        if cfg.cotrain_mode in ("both", "cnn2vit"):
            _call_hook(hooks, "c2v", "before", state)
            out["loss_c2v"], out["batch_pseudo_c2v"] = cotrain_substep(
                state, "c2v", c2v_weak, c2v_strong, lr_v)
            _call_hook(hooks, "c2v", "after", state)

    state.iter += 1
    return out


# ---------------------------------------------------------------------------
# metrics records and the outer loop

@dataclass
class MetricsRecord:
    iter: int
    lr_vit: float
    lr_cnn: float
    loss_sup_vit: float
    loss_sup_cnn: float
    loss_find: float
    loss_conq: float
    loss_v2c: float
    loss_c2v: float
    pseudo_total_v2c: int
    pseudo_correct_v2c: int
    pseudo_total_c2v: int
    pseudo_correct_c2v: int
    acc_target_cnn: float
    acc_target_vit: float

    def csv_row(self) -> str:
        vals = []
        for col in CSV_COLUMNS:
            v = getattr(self, col)
            vals.append(str(v) if isinstance(v, int) else repr(float(v)))
        return ",".join(vals)


def metrics_to_csv(records: list[MetricsRecord]) -> str:
    lines = [",".join(CSV_COLUMNS)]
    lines.extend(r.csv_row() for r in records)
    return "\n".join(lines) + "\n"


def _measure(state: EcbState, cfg: EcbConfig, step_out: dict) -> MetricsRecord:
    from . import evaluate  # local import: evaluate drives train() for sweeps

    split = state.data.target_unlabeled
    rng = np.random.default_rng([cfg.seed, _STREAM_PSEUDO_EVAL, state.iter])
    tot_v, cor_v = evaluate.pseudo_stats(state.vit_branch, split, cfg.tau_vit, rng)
    tot_c, cor_c = evaluate.pseudo_stats(state.cnn_branch, split, cfg.tau_cnn, rng)
    return MetricsRecord(
        iter=state.iter,
        lr_vit=step_out["lr_vit"], lr_cnn=step_out["lr_cnn"],
        loss_sup_vit=step_out["loss_sup_vit"], loss_sup_cnn=step_out["loss_sup_cnn"],
        loss_find=step_out["loss_find"], loss_conq=step_out["loss_conq"],
        loss_v2c=step_out["loss_v2c"], loss_c2v=step_out["loss_c2v"],
        pseudo_total_v2c=tot_v, pseudo_correct_v2c=cor_v,
        pseudo_total_c2v=tot_c, pseudo_correct_c2v=cor_c,
        acc_target_cnn=evaluate.accuracy(state, split, branch="cnn"),
        acc_target_vit=evaluate.accuracy(state, split, branch="vit"),
    )


def checkpoint_header(state: EcbState, k_shot: int | None = None) -> dict:
    ds = state.data
    if k_shot is None:
        k_shot = len(ds.target_labeled) // ds.classes if ds.classes else 0
    return {
        "geometry": nn.geometry_to_header(state.geometry),
        "arch_pair": state.config.arch_pair,
        "seed": state.config.seed,
        "k_shot": k_shot,
        "iter": state.iter,
    }


def save_state(path, state: EcbState) -> None:
    nn.save_checkpoint(path, state.all_params, checkpoint_header(state))


def train(cfg: EcbConfig, ds: DomainDataset, out_dir=None,
          hooks=None) -> tuple[EcbState, list[MetricsRecord]]:
    """Warmup (supervised only), then the full per-iteration stage schedule.

    Emits a MetricsRecord every ``log_interval`` iterations, at the warmup
    boundary and at the end.  When ``out_dir`` is given, metrics and
    checkpoints are written there as the run progresses.
    """
    state = init_state(cfg, ds)
    history: list[MetricsRecord] = []
    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
    total = cfg.warmup_iters + cfg.train_iters

    def maybe_log(step_out):
        boundary = state.iter in (cfg.warmup_iters, total)
        if state.iter % cfg.log_interval == 0 or boundary:
            history.append(_measure(state, cfg, step_out))
        if out_path is not None and cfg.ckpt_interval and state.iter % cfg.ckpt_interval == 0:
            save_state(out_path / f"ckpt_{state.iter:06d}.ecbk", state)

    for _ in range(cfg.warmup_iters):
        step_out = train_step(state, cfg, warmup=True, hooks=hooks)
        maybe_log(step_out)
    for _ in range(cfg.train_iters):
        step_out = train_step(state, cfg, warmup=False, hooks=hooks)
        maybe_log(step_out)

    if total == 0:
        history.append(_measure(state, cfg, {
            "lr_vit": lr_schedule(cfg.lr_vit, 0, cfg.sched_gamma, cfg.sched_power),
            "lr_cnn": lr_schedule(cfg.lr_cnn, 0, cfg.sched_gamma, cfg.sched_power),
            "loss_sup_vit": 0.0, "loss_sup_cnn": 0.0, "loss_find": 0.0,
            "loss_conq": 0.0, "loss_v2c": 0.0, "loss_c2v": 0.0}))
    if out_path is not None:
        (out_path / "metrics.csv").write_text(metrics_to_csv(history))
        save_state(out_path / "ckpt_final.ecbk", state)
    return state, history


def run_wall_time(fn):
    """Run fn() and return (result, elapsed seconds)."""
    t0 = time.perf_counter()
    result = fn()
    return result, time.perf_counter() - t0
