"""Command-line entry point: ``vdl <command> [options]``.

Exit codes: 0 success/pass, 1 property or training failure, 2 usage error.
"""
import argparse
import json
import logging
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import checks
from . import data as vdata
from . import losses as L
from . import metrics as M
from . import stage2 as S2
from .errors import ConfigError, RangeError, VdlError
from .numerics import Rng
from .sampler import prop1_bound, prop1_tight_slack, verify_prop1
from .trainer import Trainer, TrainConfig, eval_model, load_model

log = logging.getLogger("vdl")

_BOOL_TRUE = {"1", "true", "yes", "on"}
_BOOL_FALSE = {"0", "false", "no", "off"}


class UsageError(Exception):
    pass


def _coerce(value, default, name):
    if isinstance(default, bool):
        v = str(value).strip().lower()
        if v in _BOOL_TRUE:
            return True
        if v in _BOOL_FALSE:
            return False
        raise ConfigError(f"{name}: expected a boolean, got {value!r}")
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float) or default is None:
        if default is None and str(value).strip().lower() in ("none", ""):
            return None
        return float(value)
    return str(value).strip()


def _config_defaults():
    out = {}
    for f in fields(TrainConfig):
        out[f.name] = ("train", f.default)
    for f in fields(L.LossWeights):
        out[f.name] = ("weights", f.default)
    return out


CONFIG_KEYS = _config_defaults()


def parse_config_file(path):
    """``key = value`` lines; '#' starts a comment; unknown keys are errors."""
    values = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in CONFIG_KEYS:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        values[key] = value
    return values


def build_configs(file_values, overrides):
    train, weights = {}, {}
    merged = dict(file_values)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    for key, value in merged.items():
        if key not in CONFIG_KEYS:
            raise ConfigError(f"unknown key {key!r}")
        group, default = CONFIG_KEYS[key]
        try:
            typed = _coerce(value, default, key)
        except ValueError as exc:
            raise ConfigError(f"{key}: cannot parse {value!r}") from exc
        (train if group == "train" else weights)[key] = typed
    try:
        return TrainConfig(**train), L.LossWeights(**weights)
    except RangeError as exc:
        raise ConfigError(str(exc)) from exc


def _add_config_flags(p):
    g = p.add_argument_group("config keys (override the --config file)")
    for key, (_, default) in CONFIG_KEYS.items():
        if key == "divergence":  # has its own flag with choices
            continue
        g.add_argument("--" + key.replace("_", "-"), dest="cfg_" + key, default=argparse.SUPPRESS,
                       metavar="V", help=f"default: {default}")


def _parse_list(text, kind):
    try:
        return [kind(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise UsageError(f"bad list {text!r}: {exc}") from exc


# commands ---------------------------------------------------------------------

def cmd_gen_data(args):
    if not 0.0 < args.gap_cos <= 1.0:
        raise UsageError(f"--gap-cos must lie in (0, 1], got {args.gap_cos}")
    if args.noise < 0 or not 0.0 <= args.semi_ratio <= 1.0 or args.dim < 2 or args.count < 1:
        raise UsageError("need --noise >= 0, --semi-ratio in [0, 1], --dim >= 2, --count >= 1")
    world, data, pool = vdata.generate(args.seed, args.dim, args.count, args.gap_cos, args.noise,
                                       args.semi_ratio, args.pool_size, args.d_x)
    meta = {"world": world.params(), "count": args.count, "pool_size": args.pool_size,
            "semi_ratio": args.semi_ratio, "labeled": int(data.labeled.sum()),
            "streams": {"train": "train", "prior": "prior", "heldout": "heldout"}}
    vdata.write_dataset(args.out, data, pool, meta)
    print(json.dumps({"status": "ok", "out": str(args.out), "count": args.count,
                      "pool": args.pool_size, "labeled": int(data.labeled.sum())}))
    return 0


def _load_heldout(data_dir, meta, n):
    """Explicit test_*.vdle files if present, else fresh pairs from the world."""
    d = Path(data_dir)
    if (d / "test_img.vdle").exists():
        z_img = vdata.read_embeddings(d / "test_img.vdle")
        z_txt = vdata.read_embeddings(d / "test_txt.vdle")
        return vdata.PairedDataset(z_img, z_txt, np.zeros(len(z_img), dtype=bool))
    return vdata.heldout(vdata.world_from_meta(meta), n)


def cmd_train(args):
    file_values = parse_config_file(args.config) if args.config else {}
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_")}
    if args.divergence:
        overrides["divergence"] = args.divergence
    config, weights = build_configs(file_values, overrides)
    data, pool, meta = vdata.read_dataset(args.data)
    if config.d != data.d:
        if "d" in file_values or overrides.get("d") is not None:
            raise ConfigError(f"config d={config.d} but data has dim {data.d}")
        config = TrainConfig(**{**vars(config), "d": data.d})
    if args.semi and config.semi_ratio == 0:
        config = TrainConfig(**{**vars(config), "semi_ratio": float(meta.get("semi_ratio", 0.0))})
    held = _load_heldout(args.data, meta, config.n_eval)
    use_labels = bool(args.semi)
    start = time.time()
    if args.resume:
        tr = Trainer.load(args.resume, data, pool, held)
        tr.config = TrainConfig(**{**vars(tr.config), "iters": config.iters})
    else:
        tr = Trainer(config, data, pool, weights, held, use_labels)
    try:
        if args.stop_at is not None:
            tr.run(until=min(args.stop_at, tr.config.iters))
        else:
            tr.run()
    except VdlError as exc:
        it = getattr(exc, "iteration", None)
        print(json.dumps({"status": "failed", "error": str(exc), "iteration": it}))
        return 1
    tr.save(args.out)
    report = args.report or str(args.out) + ".history.jsonl"
    echo = tr.state_config()
    echo.pop("history")
    M.write_report(report, tr.history, echo, args.csv)
    last = tr.history[-1] if tr.history else None
    print(json.dumps({"status": "ok", "iterations": tr.iteration, "checkpoint": str(args.out),
                      "report": report, "seconds": round(time.time() - start, 2),
                      "sim_txt": last.sim_txt if last else None,
                      "sim_img": last.sim_img if last else None}))
    return 0


def cmd_check_prop1(args):
    dims = _parse_list(args.dims, int)
    rs = _parse_list(args.rs, float)
    rng = Rng(args.seed).child("prop1")
    rep = verify_prop1(rng, args.trials, dims, rs)
    tight = max(abs(prop1_tight_slack(rng.child("tight"), d, r)) for d in dims for r in rs)
    ok = rep.passed and tight < 1e-6
    print(f"violations: {rep.violations}")
    print(json.dumps({"status": "pass" if ok else "fail", "trials": rep.trials,
                      "violations": rep.violations, "min_slack": rep.min_slack,
                      "worst": rep.worst, "tight_max_abs_slack": tight,
                      "bounds": {str(r): prop1_bound(r) for r in rs}}))
    return 0 if ok else 1


def cmd_gradcheck(args):
    errs = checks.gradient_errors(args.scope, seed=args.seed)
    worst = max(errs, key=errs.get)
    ok = all(e < args.tol for e in errs.values())
    for name, e in errs.items():
        print(f"{name}: max relative error {e:.3e} {'ok' if e < args.tol else 'FAIL'}")
    print(json.dumps({"status": "pass" if ok else "fail", "tolerance": args.tol,
                      "errors": {k: float(v) for k, v in errs.items()}, "worst": worst}))
    return 0 if ok else 1


def cmd_eval(args):
    model, tc, saved = load_model(args.ckpt)
    data, pool, meta = vdata.read_dataset(args.data)
    held = _load_heldout(args.data, meta, tc.n_eval)
    rep = eval_model(model, held, saved.get("iteration", 0), pool[: tc.eval_loss_rows],
                     saved.get("counters"), tc.sim_img_from_sampled, tc.eval_loss_rows)
    out = {"status": "pass", "metrics": rep.to_dict()}
    if args.baselines:
        out["baselines"] = M.compare_baselines(model, held, args.xi, seed=args.seed)
        ordered = out["baselines"]["VDL"] > out["baselines"]["CLIP-GEN"] > out["baselines"]["LAFITE"]
        out["ordering_holds"] = ordered
    if args.report:
        M.write_report(args.report, [rep], {"checkpoint": str(args.ckpt)}, args.csv)
    print(json.dumps(out))
    return 0


def cmd_stage2_train(args):
    model, tc, _ = load_model(args.ckpt)
    data, _, meta = vdata.read_dataset(args.data)
    world = vdata.world_from_meta(meta)
    cfg = S2.Stage2Config(iters=args.iters, batch=args.batch, lr=args.lr, seed=args.seed,
                          noise_dim=args.noise_dim, zero_condition=args.zero_condition)
    gen = S2.make_generator(Rng(args.seed).child("stage2-init"), data.d, world.d_x, cfg)
    data = vdata.PairedDataset(data.z_img, data.z_txt, data.labeled, data.z_img, data.meta)
    gen, losses = S2.train_stage2(model, gen, world, data, cfg)
    held = vdata.heldout(world, tc.n_eval)
    mse = S2.heldout_mse(model, gen, world, held, args.seed)
    S2.save_generator(args.out, gen, cfg)
    print(json.dumps({"status": "ok", "out": str(args.out), "final_train_mse": losses[-1] if losses
                      else None, "heldout_mse": mse}))
    return 0


def cmd_infer(args):
    model, _, _ = load_model(args.ckpt)
    gen, _ = S2.load_generator(args.gen)
    z_txt = vdata.read_embeddings(args.text_emb)
    x, z_img_hat = S2.infer_t2i(model, gen, z_txt, Rng(args.seed).child("infer"),
                                return_latent=True)
    vdata.write_embeddings(args.out, x, {"role": "toy_image", "d_x": int(x.shape[1])})
    cos = np.sum(z_img_hat * z_txt, axis=1)
    bound = prop1_bound(model.r_img)
    ok = bool(np.all(cos >= bound - 1e-9))
    print(json.dumps({"status": "pass" if ok else "fail", "out": str(args.out),
                      "rows": int(x.shape[0]), "d_x": int(x.shape[1]),
                      "min_cos_zimg_hat_ztxt": float(cos.min()), "bound": bound}))
    return 0 if ok else 1


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(2)


def build_parser():
    fmt = argparse.ArgumentDefaultsHelpFormatter
    p = _Parser(prog="vdl", description=__doc__, formatter_class=fmt)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write a synthetic dataset", formatter_class=fmt)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--dim", type=int, default=32)
    g.add_argument("--count", type=int, default=4096)
    g.add_argument("--gap-cos", type=float, default=0.6)
    g.add_argument("--noise", type=float, default=0.0, help="tangent noise scale kappa")
    g.add_argument("--semi-ratio", type=float, default=0.0)
    g.add_argument("--pool-size", type=int, default=4096)
    g.add_argument("--d-x", type=int, default=64, help="toy image size")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="stage-1 training", formatter_class=fmt)
    t.add_argument("--config", help="key = value file")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--divergence", choices=L.DIVERGENCES)
    t.add_argument("--semi", action="store_true", help="use the labeled pairs")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--stop-at", type=int, help="stop (and checkpoint) at this iteration")
    t.add_argument("--report", help="history file (default: <out>.history.jsonl)")
    t.add_argument("--csv", help="also export the history as CSV")
    _add_config_flags(t)
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("check-prop1", help="randomized cone-bound suite", formatter_class=fmt)
    c.add_argument("--trials", type=int, default=10_000)
    c.add_argument("--dims", default="4,16,64")
    c.add_argument("--rs", default="0.1,0.3,0.5,0.7,0.9")
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_check_prop1)

    gc = sub.add_parser("gradcheck", help="finite-difference gradient suite", formatter_class=fmt)
    gc.add_argument("--scope", default="all", choices=("all",) + checks.GRAD_SCOPES)
    gc.add_argument("--tol", type=float, default=1e-4)
    gc.add_argument("--seed", type=int, default=0)
    gc.set_defaults(func=cmd_gradcheck)

    e = sub.add_parser("eval", help="held-out metrics", formatter_class=fmt)
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--report")
    e.add_argument("--csv")
    e.add_argument("--baselines", action="store_true")
    e.add_argument("--xi", type=float, default=0.75, help="LAFITE noise scale")
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("stage2-train", help="train the toy conditional generator",
                       formatter_class=fmt)
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--iters", type=int, default=2000)
    s.add_argument("--batch", type=int, default=64)
    s.add_argument("--lr", type=float, default=1e-3)
    s.add_argument("--noise-dim", type=int, default=8)
    s.add_argument("--zero-condition", action="store_true")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_stage2_train)

    i = sub.add_parser("infer", help="toy images from text embeddings", formatter_class=fmt)
    i.add_argument("--ckpt", required=True)
    i.add_argument("--gen", required=True)
    i.add_argument("--text-emb", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--seed", type=int, default=0)
    i.set_defaults(func=cmd_infer)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"vdl {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (VdlError, OSError) as exc:
        print(json.dumps({"status": "failed", "error": f"{type(exc).__name__}: {exc}"}))
        return 1


if __name__ == "__main__":
    sys.exit(main())
