"""Command-line entry point: data generation, training, evaluation, sweeps,
ablations and self-verification, all reproducible from flags + seed.

Exit codes: 0 success, 1 verification failure, 2 usage/config/data error,
3 numeric abort.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import data as datamod
from . import evaluate
from . import gradcheck
from . import nn
from . import train as training
from .autodiff import ContractError, NumericError
from .data import DataError, ShiftSpec
from .nn import ConfigError

EXIT_OK = 0
EXIT_VERIFY = 1
EXIT_USAGE = 2
EXIT_NUMERIC = 3

OUT_ROOT_ENV = "ECB_OUT_ROOT"


def _out_root() -> Path:
    return Path(os.environ.get(OUT_ROOT_ENV, "runs"))


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def write_manifest(out_dir: Path, cfg: training.EcbConfig, data_path: str,
                   data_header: dict, extra: dict | None = None) -> None:
    manifest = {
        "config": dict(cfg.__dict__),
        "config_hash": training.config_hash(cfg),
        "data_path": str(data_path),
        "data_header": data_header,
        "out_dir": str(out_dir),
        "created": _now(),
    }
    if extra:
        manifest.update(extra)
    with open(out_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_config(args, base: training.EcbConfig | None = None) -> training.EcbConfig:
    cfg = base or training.EcbConfig()
    if getattr(args, "config", None):
        cfg = training.parse_config(Path(args.config).read_text(), base=cfg)
    for flag in ("cotrain_mode", "arch_pair", "seed"):
        value = getattr(args, flag, None)
        if value is not None:
            cfg = replace(cfg, **{flag: value})
    cfg.validate()
    return cfg


def _resolve_shift(preset: str) -> ShiftSpec:
    if preset not in datamod.SHIFT_PRESETS:
        raise DataError(f"unknown shift preset {preset!r}; "
                        f"choose from {sorted(datamod.SHIFT_PRESETS)}")
    return datamod.SHIFT_PRESETS[preset]


# ---------------------------------------------------------------------------
# commands

def cmd_gen_data(args) -> int:
    shift = _resolve_shift(args.shift_preset)
    ds = datamod.generate_pair(args.seed, args.classes, args.n_src, args.n_tgt, shift)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    meta = {"seed": args.seed, "shift": datamod.shift_to_meta(shift),
            "shift_preset": args.shift_preset}
    datamod.save_dataset(out, ds, meta)
    if args.preview_dir:
        pv = Path(args.preview_dir)
        pv.mkdir(parents=True, exist_ok=True)
        for i, s in enumerate(ds.source[:args.classes]):
            datamod.write_pgm(pv / f"source_c{s.label}_{i}.pgm", s.image)
        for i, s in enumerate(ds.target_unlabeled[:args.classes]):
            datamod.write_pgm(pv / f"target_c{s.eval_label()}_{i}.pgm", s.image)
    print(f"wrote {out}: K={ds.classes} n_src={len(ds.source)} "
          f"n_tgt={len(ds.target_unlabeled)} shift={args.shift_preset} seed={args.seed}")
    return EXIT_OK


def _load_split_dataset(data_path: str, k_shot: int) -> tuple[datamod.DomainDataset, dict]:
    ds, header = datamod.load_dataset(data_path)
    target_pool = ds.target_labeled + ds.target_unlabeled
    labeled, unlabeled = datamod.split_kshot(target_pool, k_shot, header["seed"])
    split = datamod.DomainDataset(classes=ds.classes, source=ds.source,
                                  target_labeled=labeled, target_unlabeled=unlabeled)
    split.validate()
    return split, header


def cmd_train(args) -> int:
    cfg = _load_config(args)
    ds, header = _load_split_dataset(args.data, args.k_shot)
    out_dir = Path(args.out) if args.out else _out_root() / f"train_{cfg.seed}_{int(time.time())}"
    out_dir.mkdir(parents=True, exist_ok=True)
    write_manifest(out_dir, cfg, args.data, header, {"k_shot": args.k_shot})
    t0 = time.perf_counter()
    state, history = training.train(cfg, ds, out_dir=out_dir)
    wall = time.perf_counter() - t0
    evaluate.write_summary(out_dir / "summary.json", cfg, history, wall)
    final = history[-1]
    print(f"run complete: iter={final.iter} acc_target_cnn={final.acc_target_cnn:.2f} "
          f"acc_target_vit={final.acc_target_vit:.2f} wall={wall:.0f}s -> {out_dir}")
    return EXIT_OK


def cmd_eval(args) -> int:
    header, tensors = nn.load_checkpoint(args.checkpoint)
    k_shot = args.k_shot if args.k_shot is not None else header.get("k_shot", 0)
    ds, _ = _load_split_dataset(args.data, k_shot)
    geom = nn.geometry_from_header(header["geometry"])
    ds_geom = ds.image_shape()
    if (geom.channels, geom.image_side, geom.image_side) != ds_geom or geom.classes != ds.classes:
        raise ConfigError(f"checkpoint geometry {header['geometry']} does not match "
                          f"dataset images {ds_geom} with K={ds.classes}")
    cfg = training.EcbConfig(arch_pair=header["arch_pair"], seed=header["seed"],
                             feat_dim=geom.feat_dim, head_hidden=geom.head_hidden)
    state = training.init_state(cfg, ds)
    nn.restore_params(state.all_params, tensors)
    acc = evaluate.accuracy(state, ds.target_unlabeled, branch=args.branch)
    result = {"checkpoint": str(args.checkpoint), "branch": args.branch,
              "split": "target_unlabeled", "accuracy": acc}
    print(json.dumps(result, sort_keys=True))
    if args.json_out:
        Path(args.json_out).write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _load_config(args)
    ds, header = _load_split_dataset(args.data, args.k_shot)
    tau_list = [float(t) for t in args.tau_list.split(",") if t]
    out_dir = Path(args.out) if args.out else _out_root() / "sweep"
    out_dir.mkdir(parents=True, exist_ok=True)
    write_manifest(out_dir, cfg, args.data, header,
                   {"k_shot": args.k_shot, "tau_list": tau_list})
    result = evaluate.run_threshold_sweep(
        tau_list, cfg, ds, out_dir,
        on_cell=lambda c: print(f"cell tau_vit={c.tau_vit:g} tau_cnn={c.tau_cnn:g} "
                                f"acc_cnn={c.acc_cnn:.2f} acc_vit={c.acc_vit:.2f}"))
    print(f"sweep complete: {len(result.cells)} cells -> {out_dir}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _load_config(args)
    ds, header = _load_split_dataset(args.data, args.k_shot)
    seeds = [int(s) for s in args.seeds.split(",") if s]
    out_dir = Path(args.out) if args.out else _out_root() / f"ablate_{args.mode}"
    out_dir.mkdir(parents=True, exist_ok=True)
    write_manifest(out_dir, cfg, args.data, header,
                   {"k_shot": args.k_shot, "mode": args.mode, "seeds": seeds})
    rows = evaluate.run_ablation(
        args.mode, cfg, ds, seeds,
        on_run=lambda r: print(f"{r.variant:10s} seed={r.seed} acc_cnn={r.acc_cnn:.2f} "
                               f"acc_vit={r.acc_vit:.2f} {r.error}"))
    (out_dir / "ablation.csv").write_text(evaluate.ablation_csv(rows))
    print(f"ablation complete: {len(rows)} runs -> {out_dir}")
    return EXIT_OK


def cmd_verify(args) -> int:
    failures = []
    print("gradient checks (analytic vs central differences, h=1e-5):")
    for result in gradcheck.run_all(instances=args.instances, seed=args.seed):
        print("  " + result.line())
        if not result.passed:
            failures.append(f"gradient:{result.name}")

    print("discrepancy metric properties (10000 random probability triples):")
    rng = np.random.default_rng(args.seed)
    from . import autodiff as ad
    from .train import discrepancy
    worst_tri = worst_sym = worst_self = 0.0
    in_range = True
    for _ in range(10_000):
        n, k = 2, int(rng.integers(2, 8))
        p, q, r = (rng.dirichlet(np.ones(k), size=n) for _ in range(3))
        with ad.no_grad():
            dpq = discrepancy(ad.Tensor(p), ad.Tensor(q)).item()
            dqp = discrepancy(ad.Tensor(q), ad.Tensor(p)).item()
            dpp = discrepancy(ad.Tensor(p), ad.Tensor(p)).item()
            dpr = discrepancy(ad.Tensor(p), ad.Tensor(r)).item()
            drq = discrepancy(ad.Tensor(r), ad.Tensor(q)).item()
        in_range &= 0.0 <= dpq <= 1.0
        worst_sym = max(worst_sym, abs(dpq - dqp))
        worst_self = max(worst_self, dpp)
        worst_tri = max(worst_tri, dpq - (dpr + drq))
    print(f"  range in [0,1]: {in_range}; symmetry gap: {worst_sym:.2e}; "
          f"d(p,p): {worst_self:.2e}; triangle slack: {worst_tri:.2e}")
    if not in_range or worst_sym > 0 or worst_self > 0 or worst_tri > 1e-12:
        failures.append("discrepancy-metric")

    print("parameter routing (sub-step update sets over live training steps):")
    routing_errors = verify_routing(seed=args.seed)
    if routing_errors:
        failures.append("routing")
        for err in routing_errors:
            print(f"  FAIL {err}")
    else:
        print("  ok   all sub-steps left their complement bitwise unchanged")

    if failures:
        print(f"verification FAILED: {', '.join(failures)}")
        return EXIT_VERIFY
    print("verification passed")
    return EXIT_OK


def verify_routing(seed: int = 0, steps: int = 5) -> list[str]:
    """Run a few live steps asserting bitwise invariance outside update sets."""
    ds = datamod.make_dataset(seed=seed, classes=5, n_src=60, n_tgt=60,
                              shift=datamod.SHIFT_PRESETS["default"], k_shot=1)
    cfg = training.EcbConfig(seed=seed, warmup_iters=0, train_iters=steps,
                             batch_size=8, log_interval=10 ** 9, ckpt_interval=0)
    state = training.init_state(cfg, ds)
    updated = {
        "sup_vit": {p.name for p in state.vit_params},
        "sup_cnn": {p.name for p in state.cnn_params},
        "find": {p.name for p in state.head_params},
        "conq": {p.name for p in state.cnn_branch.encoder_params},
        "v2c": {p.name for p in state.cnn_params},
        "c2v": {p.name for p in state.vit_params},
    }
    errors: list[str] = []
    snapshot: dict[str, np.ndarray] = {}

    def hook(stage, when, st):
        if when == "before":
            snapshot.clear()
            snapshot.update({p.name: (p.tensor.data.copy(), p.momentum.copy())
                             for p in st.all_params})
            return
        for p in st.all_params:
            before_data, before_mom = snapshot[p.name]
            if p.name in updated[stage]:
                continue
            if not np.array_equal(before_data, p.tensor.data, equal_nan=True):
                errors.append(f"{stage}: parameter {p.name} changed outside its update set")
            if not np.array_equal(before_mom, p.momentum, equal_nan=True):
                errors.append(f"{stage}: momentum of {p.name} changed outside its update set")

    for _ in range(steps):
        training.train_step(state, cfg, hooks=hook)
    return errors


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ecb", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="render a two-domain dataset container")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--classes", type=int, default=5)
    g.add_argument("--n-src", type=int, default=500)
    g.add_argument("--n-tgt", type=int, default=500)
    g.add_argument("--shift-preset", default="default")
    g.add_argument("--out", required=True)
    g.add_argument("--preview-dir", default=None,
                   help="also write PGM previews of a few samples")
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="train on a dataset container")
    t.add_argument("--config", default=None, help="key = value config file")
    t.add_argument("--data", required=True)
    t.add_argument("--k-shot", type=int, default=3)
    t.add_argument("--out", default=None)
    t.add_argument("--cotrain-mode", choices=training.COTRAIN_MODES, default=None)
    t.add_argument("--arch-pair", choices=training.ARCH_PAIRS, default=None)
    t.add_argument("--seed", type=int, default=None)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on the unlabeled target split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--branch", choices=("cnn", "vit"), default="cnn")
    e.add_argument("--k-shot", type=int, default=None,
                   help="defaults to the k-shot recorded in the checkpoint")
    e.add_argument("--json-out", default=None)
    e.set_defaults(fn=cmd_eval)

    s = sub.add_parser("sweep", help="threshold grid over (tau_vit, tau_cnn)")
    s.add_argument("--config", default=None)
    s.add_argument("--data", required=True)
    s.add_argument("--k-shot", type=int, default=3)
    s.add_argument("--tau-list", default="0.6,0.7,0.8,0.85,0.9,0.95")
    s.add_argument("--out", default=None)
    s.add_argument("--seed", type=int, default=None)
    s.set_defaults(fn=cmd_sweep)

    a = sub.add_parser("ablate", help="co-training direction or encoder pairing ablation")
    a.add_argument("--config", default=None)
    a.add_argument("--data", required=True)
    a.add_argument("--k-shot", type=int, default=3)
    a.add_argument("--mode", choices=evaluate.ABLATION_MODES, required=True)
    a.add_argument("--seeds", default="1,2,3,4,5")
    a.add_argument("--out", default=None)
    a.set_defaults(fn=cmd_ablate)

    v = sub.add_parser("verify", help="gradient, metric and routing self-checks")
    v.add_argument("--instances", type=int, default=20)
    v.add_argument("--seed", type=int, default=0)
    v.set_defaults(fn=cmd_verify)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    try:
        return args.fn(args)
    except NumericError as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, DataError, ContractError, FileNotFoundError, IsADirectoryError,
            PermissionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


def entrypoint() -> None:  # console-script shim
    raise SystemExit(main())


if __name__ == "__main__":
    raise SystemExit(main())
