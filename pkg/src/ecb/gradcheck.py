"""Finite-difference verification of every differentiable operator and loss.

Each check builds random instances, reads the analytic gradient through the
tape and compares it against central differences (h = 1e-5) both on a random
subset of coordinates and along random directions.  The same suite backs the
self-verification command and the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import nn
from . import train as training
from .autodiff import Parameter, Tensor
from .data import Sample, aug_strong, aug_weak
from .nn import Geometry

FD_STEP = 1e-5
REL_TOL = 1e-4
_REL_FLOOR = 1e-6

# Small geometry keeps composite-loss checks fast while exercising every op.
TINY_GEOM = Geometry(image_side=8, channels=1, classes=3, feat_dim=8, patch=4,
                     blocks=1, heads=2, ffn_mult=2, conv_channels=(4,), head_hidden=6)


@dataclass
class CheckResult:
    name: str
    instances: int
    max_rel_err: float
    passed: bool

    def line(self) -> str:
        status = "ok" if self.passed else "FAIL"
        return f"{status:4s} {self.name:<24s} instances={self.instances:<3d} max_rel_err={self.max_rel_err:.3e}"


def rel_err(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), _REL_FLOOR)


def _loss_value(loss_fn: Callable[[], Tensor]) -> float:
    with ad.no_grad():
        return loss_fn().item()


def check_gradients(loss_fn: Callable[[], Tensor], params: list[Parameter],
                    rng: np.random.Generator, h: float = FD_STEP,
                    coords_per_param: int = 6, directions: int = 3) -> float:
    """Max relative error between analytic and central-difference gradients."""
    loss = loss_fn()
    ad.backward(loss, params)
    grads = [p.tensor.grad.copy() for p in params]
    for p in params:
        p.tensor.grad[...] = 0.0

    worst = 0.0
    for p, g in zip(params, grads):
        flat = p.tensor.data.reshape(-1)
        n_coords = min(coords_per_param, flat.size)
        idxs = rng.choice(flat.size, size=n_coords, replace=False)
        for idx in idxs:
            keep = flat[idx]
            flat[idx] = keep + h
            up = _loss_value(loss_fn)
            flat[idx] = keep - h
            down = _loss_value(loss_fn)
            flat[idx] = keep
            worst = max(worst, rel_err(g.reshape(-1)[idx], (up - down) / (2 * h)))

    for _ in range(directions):
        vs = [rng.standard_normal(p.tensor.data.shape) for p in params]
        norm = np.sqrt(sum(float((v * v).sum()) for v in vs))
        vs = [v / norm for v in vs]
        analytic = sum(float((g * v).sum()) for g, v in zip(grads, vs))
        for p, v in zip(params, vs):
            p.tensor.data += h * v
        up = _loss_value(loss_fn)
        for p, v in zip(params, vs):
            p.tensor.data -= 2 * h * v
        down = _loss_value(loss_fn)
        for p, v in zip(params, vs):
            p.tensor.data += h * v
        worst = max(worst, rel_err(analytic, (up - down) / (2 * h)))
    return worst


def _weighted_sum(out: Tensor, w: np.ndarray) -> Tensor:
    return ad.tsum(ad.mul(out, Tensor(w)))


def _away_from_kink(arr: np.ndarray, margin: float = 1e-3) -> np.ndarray:
    """Nudge values off 0 so |.|-style kinks cannot sit inside the FD stencil."""
    small = np.abs(arr) < margin
    return np.where(small, np.where(arr >= 0, arr + margin, arr - margin), arr)


# ---------------------------------------------------------------------------
# instance builders: rng -> (loss_fn, params)

def _b_matmul(rng):
    a = Parameter("a", rng.standard_normal((3, 4)))
    b = Parameter("b", rng.standard_normal((4, 2)))
    w = rng.standard_normal((3, 2))
    return lambda: _weighted_sum(ad.matmul(a.tensor, b.tensor), w), [a, b]


def _b_matmul_batched(rng):
    a = Parameter("a", rng.standard_normal((2, 3, 4)))
    b = Parameter("b", rng.standard_normal((4, 3)))
    w = rng.standard_normal((2, 3, 3))
    return lambda: _weighted_sum(ad.matmul(a.tensor, b.tensor), w), [a, b]


def _b_conv2d(rng):
    x = Parameter("x", rng.standard_normal((2, 2, 5, 5)))
    k = Parameter("k", rng.standard_normal((3, 2, 3, 3)))
    b = Parameter("b", rng.standard_normal(3))
    w = rng.standard_normal((2, 3, 5, 5))
    return lambda: _weighted_sum(ad.conv2d(x.tensor, k.tensor, b.tensor, stride=1, pad=1), w), [x, k, b]


def _b_conv2d_strided(rng):
    x = Parameter("x", rng.standard_normal((2, 2, 5, 5)))
    k = Parameter("k", rng.standard_normal((3, 2, 3, 3)))
    w = rng.standard_normal((2, 3, 2, 2))
    return lambda: _weighted_sum(ad.conv2d(x.tensor, k.tensor, stride=2, pad=0), w), [x, k]


def _b_avg_pool(rng):
    x = Parameter("x", rng.standard_normal((2, 3, 4, 4)))
    w = rng.standard_normal((2, 3, 2, 2))
    return lambda: _weighted_sum(ad.avg_pool2(x.tensor), w), [x]


def _b_softmax(rng):
    x = Parameter("x", 3.0 * rng.standard_normal((3, 4)))
    w = rng.standard_normal((3, 4))
    return lambda: _weighted_sum(ad.softmax(x.tensor), w), [x]


def _b_cross_entropy(rng):
    # checked through softmax: the raw op constrains rows to the simplex,
    # which coordinate-wise perturbation would violate
    x = Parameter("x", 2.0 * rng.standard_normal((4, 5)))
    labels = rng.integers(0, 5, size=4)
    return lambda: ad.cross_entropy(ad.softmax(x.tensor), labels), [x]


def _b_abs_mean_diff(rng):
    a_raw = rng.standard_normal((3, 4))
    b_raw = rng.standard_normal((3, 4))
    b_raw = a_raw + _away_from_kink(b_raw - a_raw)
    a = Parameter("a", a_raw)
    b = Parameter("b", b_raw)
    return lambda: ad.abs_mean_diff(a.tensor, b.tensor), [a, b]


def _b_relu(rng):
    x = Parameter("x", _away_from_kink(rng.standard_normal((3, 5))))
    w = rng.standard_normal((3, 5))
    return lambda: _weighted_sum(ad.relu(x.tensor), w), [x]


def _b_gelu(rng):
    x = Parameter("x", 2.0 * rng.standard_normal((3, 5)))
    w = rng.standard_normal((3, 5))
    return lambda: _weighted_sum(ad.gelu(x.tensor), w), [x]


def _b_log(rng):
    x = Parameter("x", rng.uniform(0.2, 3.0, size=(3, 4)))
    w = rng.standard_normal((3, 4))
    return lambda: _weighted_sum(ad.log(x.tensor), w), [x]


def _b_add_broadcast(rng):
    a = Parameter("a", rng.standard_normal((2, 3, 4)))
    b = Parameter("b", rng.standard_normal(4))
    w = rng.standard_normal((2, 3, 4))
    return lambda: _weighted_sum(ad.add(a.tensor, b.tensor), w), [a, b]


def _b_sub_mul(rng):
    a = Parameter("a", rng.standard_normal((3, 4)))
    b = Parameter("b", rng.standard_normal((3, 4)))
    w = rng.standard_normal((3, 4))
    return lambda: _weighted_sum(ad.mul(ad.sub(a.tensor, b.tensor), a.tensor), w), [a, b]


def _b_mean_axes(rng):
    x = Parameter("x", rng.standard_normal((2, 3, 4)))
    w = rng.standard_normal((2, 4))
    return lambda: _weighted_sum(ad.mean(x.tensor, axis=1), w), [x]


def _b_sum_axes(rng):
    x = Parameter("x", rng.standard_normal((2, 3, 4)))
    w = rng.standard_normal((3,))
    return lambda: _weighted_sum(ad.mean(ad.tsum(x.tensor, axis=2), axis=0), w), [x]


def _b_reshape_transpose(rng):
    x = Parameter("x", rng.standard_normal((2, 3, 4)))
    w = rng.standard_normal((4, 6))
    return lambda: _weighted_sum(
        ad.reshape(ad.transpose(x.tensor, (2, 0, 1)), (4, 6)), w), [x]


def _b_patches(rng):
    x = Parameter("x", rng.standard_normal((2, 1, 8, 8)))
    w = rng.standard_normal((2, 4, 16))
    return lambda: _weighted_sum(ad.patches(x.tensor, 4), w), [x]


def _b_layernorm(rng):
    x = Parameter("x", rng.standard_normal((2, 3, 8)))
    g = Parameter("g", rng.uniform(0.5, 1.5, size=8))
    b = Parameter("b", rng.standard_normal(8))
    w = rng.standard_normal((2, 3, 8))
    return lambda: _weighted_sum(ad.layernorm(x.tensor, g.tensor, b.tensor), w), [x, g, b]


# ---------------------------------------------------------------------------
# composite losses on tiny branches

def _tiny_batch(rng, n, geom: Geometry, visible: bool = True) -> list[Sample]:
    side, c = geom.image_side, geom.channels
    return [Sample(rng.uniform(0.0, 1.0, size=(c, side, side)),
                   int(rng.integers(0, geom.classes)), "source", visible)
            for _ in range(n)]


def _tiny_state(rng) -> training.EcbState:
    from .data import DomainDataset

    geom = TINY_GEOM
    ds = DomainDataset(
        classes=geom.classes,
        source=_tiny_batch(rng, 6, geom),
        target_labeled=[],
        target_unlabeled=_tiny_batch(rng, 6, geom, visible=False),
    )
    cfg = training.EcbConfig(feat_dim=geom.feat_dim, head_hidden=geom.head_hidden,
                             batch_size=2, seed=int(rng.integers(0, 2 ** 31)))
    geom_cfg = replace(geom)  # tiny geometry overrides the config-derived one
    arch_vit, arch_cnn = cfg.arch_pair.split("+")
    init_rng = np.random.default_rng([cfg.seed, 0])
    seeds = init_rng.integers(0, 2 ** 31 - 1, size=2)
    vit = nn.make_branch(arch_vit, geom_cfg, int(seeds[0]), "e1", "f1")
    cnn = nn.make_branch(arch_cnn, geom_cfg, int(seeds[1]), "e2", "f2")
    # push every parameter off its symmetric init point: zero biases meeting
    # exact-zero pixels would park relu kinks inside the FD stencil
    for p in vit.params + cnn.params:
        shape = p.tensor.data.shape
        p.tensor.data += rng.uniform(0.01, 0.05, size=shape) * rng.choice((-1.0, 1.0), size=shape)
    data_rng = np.random.default_rng([cfg.seed, 1])
    return training.EcbState(
        config=cfg, geometry=geom_cfg, data=ds, vit_branch=vit, cnn_branch=cnn,
        rng_weak=np.random.default_rng([cfg.seed, 2]),
        rng_strong=np.random.default_rng([cfg.seed, 3]),
        labeled_cursor=training._Cursor(len(ds.source), data_rng),
        unlabeled_cursor=training._Cursor(len(ds.target_unlabeled), data_rng),
    )


def _b_encoder_attn(rng):
    state = _tiny_state(rng)
    x = np.stack([s.image for s in state.data.source[:2]])
    w = rng.standard_normal((2, TINY_GEOM.feat_dim))
    branch = state.vit_branch
    return lambda: _weighted_sum(branch.features(Tensor(x)), w), branch.encoder_params


def _b_encoder_conv(rng):
    state = _tiny_state(rng)
    x = np.stack([s.image for s in state.data.source[:2]])
    w = rng.standard_normal((2, TINY_GEOM.feat_dim))
    branch = state.cnn_branch
    return lambda: _weighted_sum(branch.features(Tensor(x)), w), branch.encoder_params


def _b_head(rng):
    state = _tiny_state(rng)
    feat = Tensor(rng.standard_normal((3, TINY_GEOM.feat_dim)))
    w = rng.standard_normal((3, TINY_GEOM.classes))
    head = state.vit_branch.head
    return lambda: _weighted_sum(head.forward(feat), w), head.params


def _b_loss_sup_vit(rng):
    state = _tiny_state(rng)
    batch = state.data.source[:3]
    return lambda: training.loss_sup(state.vit_branch, batch), state.vit_params


def _b_loss_sup_cnn(rng):
    state = _tiny_state(rng)
    batch = state.data.source[:3]
    return lambda: training.loss_sup(state.cnn_branch, batch), state.cnn_params


def _b_discrepancy(rng):
    z1 = Parameter("z1", rng.standard_normal((3, 4)))
    z2 = Parameter("z2", rng.standard_normal((3, 4)))
    return (lambda: training.discrepancy(ad.softmax(z1.tensor), ad.softmax(z2.tensor)),
            [z1, z2])


def _b_loss_find(rng):
    state = _tiny_state(rng)
    labeled = state.data.source[:3]
    unlabeled = state.data.target_unlabeled[:3]
    return (lambda: training.loss_find(state, labeled, unlabeled)[0], state.head_params)


def _b_loss_conq(rng):
    state = _tiny_state(rng)
    unlabeled = state.data.target_unlabeled[:3]
    return (lambda: training.loss_conq(state, unlabeled),
            state.cnn_branch.encoder_params)


def _cotrain_builder(direction: str):
    def build(rng):
        # open the gate fully so the selection is nonempty and fixed
        state = _tiny_state(rng)
        batch = state.data.target_unlabeled[:4]
        weak, strong = training.cotrain_views(batch, state.rng_weak, state.rng_strong)
        if direction == "v2c":
            teacher, student = state.vit_branch, state.cnn_branch
            params = state.cnn_params
        else:
            teacher, student = state.cnn_branch, state.vit_branch
            params = state.vit_params
        return (lambda: training.loss_cotrain(teacher, student, weak, strong, 0.0)[0],
                params)
    return build


BUILDERS: dict[str, Callable] = {
    "matmul": _b_matmul,
    "matmul_batched": _b_matmul_batched,
    "conv2d": _b_conv2d,
    "conv2d_strided": _b_conv2d_strided,
    "avg_pool2": _b_avg_pool,
    "softmax": _b_softmax,
    "cross_entropy": _b_cross_entropy,
    "abs_mean_diff": _b_abs_mean_diff,
    "relu": _b_relu,
    "gelu": _b_gelu,
    "log": _b_log,
    "add_broadcast": _b_add_broadcast,
    "sub_mul": _b_sub_mul,
    "mean_axis": _b_mean_axes,
    "sum_axis": _b_sum_axes,
    "reshape_transpose": _b_reshape_transpose,
    "patches": _b_patches,
    "layernorm": _b_layernorm,
    "encoder_attn": _b_encoder_attn,
    "encoder_conv": _b_encoder_conv,
    "classifier_head": _b_head,
    "loss_sup_vit": _b_loss_sup_vit,
    "loss_sup_cnn": _b_loss_sup_cnn,
    "discrepancy": _b_discrepancy,
    "loss_find": _b_loss_find,
    "loss_conq": _b_loss_conq,
    "loss_cotrain_v2c": _cotrain_builder("v2c"),
    "loss_cotrain_c2v": _cotrain_builder("c2v"),
}

# composites get fewer FD coordinates per parameter to stay inside the budget
_LIGHT = {"encoder_attn", "encoder_conv", "loss_sup_vit", "loss_sup_cnn",
          "loss_find", "loss_conq", "loss_cotrain_v2c", "loss_cotrain_c2v"}


def check_named(name: str, instances: int = 20, seed: int = 0,
                tol: float = REL_TOL) -> CheckResult:
    build = BUILDERS[name]
    rng = np.random.default_rng([seed, abs(hash(name)) % (2 ** 31)])
    coords = 2 if name in _LIGHT else 6
    worst = 0.0
    for _ in range(instances):
        loss_fn, params = build(rng)
        worst = max(worst, check_gradients(loss_fn, params, rng,
                                           coords_per_param=coords, directions=3))
    return CheckResult(name=name, instances=instances, max_rel_err=worst,
                       passed=worst < tol)


def run_all(instances: int = 20, seed: int = 0) -> list[CheckResult]:
    return [check_named(name, instances=instances, seed=seed) for name in BUILDERS]
