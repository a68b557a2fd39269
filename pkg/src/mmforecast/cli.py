"""Command-line surface: dataset generation, two-stage training,
evaluation, K ablation and prediction rendering.

    mmforecast gen-data --out DIR [--config FILE] [--seed N] ...
    mmforecast train {oracle,f2f} --data DIR --out DIR [--oracle-dir DIR] ...
    mmforecast eval --checkpoint F --oracle-dir DIR --data DIR --out DIR ...
    mmforecast ablate-k --checkpoint F --oracle-dir DIR --data DIR --out DIR
    mmforecast render --checkpoint F --oracle-dir DIR --data DIR --clip ID --out DIR

Exit codes: 0 success, 2 config error, 3 precondition failure,
4 runtime divergence.
"""

import argparse
import csv
import json
import os
import sys

import numpy as np

from . import data as D
from . import metrics as M
from . import training as T
from .config import ConfigError, load_config
from .core import FeatureMap, argmax_decode, default_class_table
from .model import ForecastModel

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_PRECONDITION = 3
EXIT_DIVERGED = 4


class PreconditionError(RuntimeError):
    pass


def _echo_config(cfg, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    cfg.save(os.path.join(out_dir, "resolved_config.json"))


def _load_run_config(args):
    overrides = {}
    for item in getattr(args, "set", None) or []:
        key, _, raw = item.partition("=")
        if not _:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        overrides[key] = json.loads(raw)
    cfg = load_config(getattr(args, "config", None), overrides)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    if getattr(args, "loss", None):
        tr = cfg.train.to_dict()
        tr["loss_kind"] = {"mr1": "MR1", "mr2": "MR2", "l2": "L2"}[args.loss]
        cfg.train = T.TrainConfig.from_dict(tr)
    return cfg


def cmd_gen_data(args):
    cfg = _load_run_config(args)
    manifest = D.write_dataset(cfg.scenario, args.n_train, args.n_val, args.n_test,
                               args.out, overwrite=args.overwrite)
    _echo_config(cfg, args.out)
    print(f"wrote dataset to {args.out}: {manifest['counts']}")
    return EXIT_OK


def cmd_train(args):
    cfg = _load_run_config(args)
    _echo_config(cfg, args.out)
    if args.stage == "oracle":
        tr = cfg.train.to_dict()
        tr["stage"] = "oracle"
        tcfg = T.TrainConfig.from_dict(tr)
        if args.epochs:
            tcfg.epochs = args.epochs
        model, best, ckpt = T.train_oracle(args.data, cfg.model, tcfg, args.out)
        cache = T.build_cache(args.data, model, os.path.join(args.out, "cache"),
                              encoder_ckpt_hash=T.checkpoint_hash(ckpt))
        print(f"oracle checkpoint {ckpt} (val mIoU {best:.4f}); cache at {cache.root}")
        return EXIT_OK

    # f2f refuses to start without the stage-1 checkpoint and cache
    oracle_dir = args.oracle_dir or args.out
    oracle_ckpt = os.path.join(oracle_dir, "oracle.npz")
    cache_root = os.path.join(oracle_dir, "cache")
    if not os.path.exists(oracle_ckpt):
        raise PreconditionError(f"missing oracle checkpoint {oracle_ckpt}")
    if not os.path.exists(os.path.join(cache_root, "cache_manifest.json")):
        raise PreconditionError(f"missing feature cache at {cache_root}")
    model, _, _, _ = T.load_checkpoint(oracle_ckpt)
    tcfg = cfg.train
    if args.epochs:
        tcfg.epochs = args.epochs
    cache = T.FeatureCache(cache_root)
    model, rows, best_ckpt = T.train_f2f(args.data, cache, model, tcfg, args.out)
    print(f"f2f best checkpoint {best_ckpt}")
    return EXIT_OK


def _load_eval_model(args):
    model, tcfg, _, extra = T.load_checkpoint(args.checkpoint)
    return model, tcfg, extra


def _forward_clips(model, cache, split, data_root, k, table, seed=1234):
    items = []
    for i, clip in enumerate(D.iterate_split(data_root, split, table)):
        past = [FeatureMap(cache.load(split, clip.clip_id, t, verify=False))
                for t in clip.times]
        ss = model.forward_k(past, k, T._derive_seed(seed, i), table)
        oracle_pred = argmax_decode(model.decode(model.encode(clip.target_frame), table))
        items.append((clip, ss, oracle_pred))
    return items


def cmd_eval(args):
    table = default_class_table()
    model, tcfg, _ = _load_eval_model(args)
    cache_root = os.path.join(args.oracle_dir, "cache")
    if not os.path.exists(os.path.join(cache_root, "cache_manifest.json")):
        raise PreconditionError(f"missing feature cache at {cache_root}")
    cache = T.FeatureCache(cache_root)
    os.makedirs(args.out, exist_ok=True)

    k = args.k if args.mode == "metrics" else max(args.k, args.curve_samples)
    items = _forward_clips(model, cache, args.split, args.data, k, table,
                           seed=args.seed if args.seed is not None else 1234)
    if not items:
        raise PreconditionError(f"no clips in split {args.split!r} of {args.data}")

    rows = []
    if args.mode == "curve":
        curve = M.at_least_once_curve([ss for _, ss, _ in items],
                                      [c.target_frame for c, _, _ in items],
                                      [op for _, _, op in items], table)
        for name, vals in curve.values.items():
            if vals is None:
                continue
            for cp, v in zip(curve.checkpoints, vals):
                rows.append({"metric": "at_least_once", "subset": name,
                             "value": v, "K": k, "checkpoint": cp})
        _plot_curve(curve, os.path.join(args.out, "diversity_curve.png"))
    else:
        cm = M.ConfusionMatrix(table.n_classes)
        cm_avg = M.ConfusionMatrix(table.n_classes)
        cm_base = M.ConfusionMatrix(table.n_classes)
        cm_oracle = M.ConfusionMatrix(table.n_classes)
        mses, lpips = [], []
        for clip, ss, op in items:
            gt = clip.target_frame
            for lv in ss.samples:
                M.accumulate_confusion(argmax_decode(lv), gt, table, cm)
            M.accumulate_confusion(argmax_decode(M.averaged_prediction(ss)), gt, table, cm_avg)
            M.accumulate_confusion(M.copy_last_baseline(clip, model), gt, table, cm_base)
            M.accumulate_confusion(op, gt, table, cm_oracle)
            mses.append(M.pairwise_mse(ss))
            lpips.append(M.lpips_proxy(ss, model.encoder))
            if args.dump_predictions:
                M.dump_predictions(os.path.join(args.out, f"pred_{clip.clip_id}.npz"),
                                   clip.clip_id, ss, gt, op)
        for metric, value in [
                ("miou", M.miou(cm)), ("miou_mo", M.miou_mo(cm, table.movable_ids)),
                ("miou_avg", M.miou(cm_avg)),
                ("miou_copy_last", M.miou(cm_base)),
                ("miou_mo_copy_last", M.miou_mo(cm_base, table.movable_ids)),
                ("miou_oracle", M.miou(cm_oracle)),
                ("pairwise_mse", float(np.mean(mses))),
                ("lpips_proxy", float(np.mean(lpips)))]:
            rows.append({"metric": metric, "subset": "all", "value": value,
                         "K": k, "checkpoint": ""})

    with open(os.path.join(args.out, "metrics.csv"), "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["metric", "subset", "value", "K", "checkpoint"])
        w.writeheader()
        w.writerows(rows)
    summary = {f"{r['metric']}/{r['subset']}" + (f"@{r['checkpoint']}" if r["checkpoint"] != "" else ""):
               r["value"] for r in rows}
    with open(os.path.join(args.out, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=1, sort_keys=True)
    for key in sorted(summary):
        print(f"{key}: {summary[key]:.5f}")
    return EXIT_OK


def _plot_curve(curve, path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    fig, ax = plt.subplots(figsize=(6, 4))
    for name, vals in curve.values.items():
        if vals is None:
            continue
        ax.plot(curve.checkpoints, vals, marker="o", label=name)
    ax.set_xscale("log", base=2)
    ax.set_xlabel("number of forecasts")
    ax.set_ylabel("fraction correct at least once")
    ax.set_ylim(0, 1)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def cmd_ablate_k(args):
    table = default_class_table()
    model, tcfg, _ = _load_eval_model(args)
    cache = T.FeatureCache(os.path.join(args.oracle_dir, "cache"))
    os.makedirs(args.out, exist_ok=True)
    k_list = [int(x) for x in args.k_list.split(",")]
    rows = []
    for k in k_list:
        items = _forward_clips(model, cache, args.split, args.data, k, table,
                               seed=args.seed if args.seed is not None else 1234)
        cm = M.ConfusionMatrix(table.n_classes)
        mses = []
        for clip, ss, _ in items:
            for lv in ss.samples:
                M.accumulate_confusion(argmax_decode(lv), clip.target_frame, table, cm)
            mses.append(M.pairwise_mse(ss))
        rows.append({"K": k, "miou": M.miou(cm), "pairwise_mse": float(np.mean(mses))})
    with open(os.path.join(args.out, "ablate_k.csv"), "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["K", "miou", "pairwise_mse"])
        w.writeheader()
        w.writerows(rows)
    for prev, cur in zip(rows, rows[1:]):
        if cur["pairwise_mse"] < prev["pairwise_mse"]:
            print(f"warning: pairwise MSE not non-decreasing at K={cur['K']}",
                  file=sys.stderr)
    for r in rows:
        print(f"K={r['K']}: miou={r['miou']:.4f} pairwise_mse={r['pairwise_mse']:.6f}")
    return EXIT_OK


def cmd_render(args):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    table = default_class_table()
    model, _, _ = _load_eval_model(args)
    cache = T.FeatureCache(os.path.join(args.oracle_dir, "cache"))
    clip_dir = os.path.join(args.data, args.split, f"clip_{args.clip}")
    if not os.path.isdir(clip_dir):
        raise PreconditionError(f"no such clip {clip_dir}")
    clip = D.load_clip(clip_dir, table)
    past = [FeatureMap(cache.load(args.split, clip.clip_id, t, verify=False))
            for t in clip.times]
    ss = model.forward_k(past, args.k, args.seed if args.seed is not None else 1234, table)

    def colorize(seg):
        img = np.zeros(seg.data.shape + (3,), dtype=np.uint8)
        for cid in range(len(table.names)):
            img[seg.data == cid] = table.color(cid)
        return img

    n_cols = 4 + args.k + 2
    fig, axes = plt.subplots(1, n_cols, figsize=(2.2 * n_cols, 2.2))
    panels = [("input t%+d" % clip.times[0], colorize(clip.input_frames[0])),
              ("input t%+d" % clip.times[-1], colorize(clip.input_frames[-1])),
              ("future frame", colorize(clip.target_frame)),
              ("ground truth", colorize(clip.target_frame))]
    for i, lv in enumerate(ss.samples):
        panels.append((f"sample {i + 1}", colorize(argmax_decode(lv))))
    mlv = M.mean_logit_variance(ss) if ss.k >= 2 else np.zeros(clip.target_frame.shape)
    dpv = M.discrete_prediction_variance(ss) if ss.k >= 2 else np.zeros(clip.target_frame.shape)
    panels.append(("mean logit var", mlv))
    panels.append(("discrete pred var", dpv))
    for ax, (title, img) in zip(axes, panels):
        if img.ndim == 2:
            ax.imshow(img, cmap="gray")
        else:
            ax.imshow(img)
        ax.set_title(title, fontsize=7)
        ax.axis("off")
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, f"render_{clip.clip_id}.png")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    print(f"wrote {path}")
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="mmforecast", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", help="flat key-value JSON config file")
            sp.add_argument("--set", action="append", metavar="KEY=JSON",
                            help="override a single config key")
        sp.add_argument("--seed", type=int, default=None)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    common(g)
    g.add_argument("--out", required=True)
    g.add_argument("--n-train", type=int, default=48)
    g.add_argument("--n-val", type=int, default=12)
    g.add_argument("--n-test", type=int, default=24)
    g.add_argument("--overwrite", action="store_true")
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="train a stage")
    t.add_argument("stage", choices=["oracle", "f2f"])
    common(t)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--oracle-dir", help="directory with oracle.npz and cache/ (f2f)")
    t.add_argument("--loss", choices=["mr1", "mr2", "l2"])
    t.add_argument("--epochs", type=int)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    common(e, config=False)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--oracle-dir", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--k", type=int, default=8)
    e.add_argument("--mode", choices=["metrics", "curve"], default="metrics")
    e.add_argument("--curve-samples", type=int, default=128)
    e.add_argument("--dump-predictions", action="store_true")
    e.set_defaults(fn=cmd_eval)

    a = sub.add_parser("ablate-k", help="evaluation-time K ablation table")
    common(a, config=False)
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--oracle-dir", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--split", default="test")
    a.add_argument("--k-list", default="1,2,4,8,16")
    a.set_defaults(fn=cmd_ablate_k)

    r = sub.add_parser("render", help="render sample predictions for one clip")
    common(r, config=False)
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--oracle-dir", required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--clip", required=True)
    r.add_argument("--split", default="test")
    r.add_argument("--k", type=int, default=4)
    r.add_argument("--out", required=True)
    r.set_defaults(fn=cmd_render)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (PreconditionError, D.DatasetError, T.CacheError, FileNotFoundError) as e:
        print(f"precondition failure: {e}", file=sys.stderr)
        return EXIT_PRECONDITION
    except T.DivergenceError as e:
        print(f"training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
