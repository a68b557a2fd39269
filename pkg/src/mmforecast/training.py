"""Two-stage training pipeline.

Stage 1 ("oracle"): encoder + decoder trained jointly with cross-entropy
on single frames; the trained encoder then populates a feature cache so
stage 2 never touches the pixel pipeline.

Stage 2 ("f2f"): the noise-conditioned generator is trained on cached
features with MR (or plain L2) reconstruction plus an adversarial loss
from the patch discriminator, alternating one G update and one D update
per batch, Adam with cosine annealing.

All per-epoch randomness is derived from (seed, epoch, purpose) so a run
is a pure function of its config and checkpoints can resume exactly.
"""

import csv
import hashlib
import json
import math
import os
from dataclasses import dataclass, asdict, field

import numpy as np

from . import losses as L
from .core import SegMap, FeatureMap, one_hot, argmax_decode, default_class_table, LogitVolume
from .data import iterate_split, read_manifest
from .metrics import accumulate_confusion, miou, miou_mo, ConfusionMatrix, pairwise_mse
from .model import ForecastModel, ModelConfig, sample_noise
from .nn import Adam

CHECKPOINT_VERSION = 1


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


class CacheError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    stage: str = "f2f"                 # {oracle, f2f}
    epochs: int = 60                   # published runs used 400
    batch_size: int = 8
    lr0: float = 4e-4
    lr_min: float = 1e-7
    adam_beta1: float = 0.9
    adam_beta2: float = 0.99
    weights: L.LossWeights = field(default_factory=L.LossWeights)
    k_samples: int = 8
    loss_kind: str = "MR1"             # {MR1, MR2, L2}
    mr_space: str = "feature"          # {feature, logit}
    horizon: int = 9
    seed: int = 0
    d_updates_per_g: int = 1
    d_all_k: bool = False
    d_noise0: float = 0.0              # instance-noise std on D's candidate
                                       # input, annealed linearly to 0
    eval_every: int = 1
    eval_k: int = 8
    eval_max_clips: int = 0            # 0 = all val clips
    early_stop_patience: int = 15
    single_thread: bool = True

    def __post_init__(self):
        if self.lr_min >= self.lr0:
            raise ValueError("lr_min must be below lr0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.stage not in ("oracle", "f2f"):
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.loss_kind not in ("MR1", "MR2", "L2"):
            raise ValueError(f"unknown loss_kind {self.loss_kind!r}")
        if self.d_noise0 < 0:
            raise ValueError("d_noise0 must be >= 0")
        if self.mr_space not in ("feature", "logit"):
            raise ValueError(f"unknown mr_space {self.mr_space!r}")

    def to_dict(self):
        d = asdict(self)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if isinstance(d.get("weights"), dict):
            d["weights"] = L.LossWeights(**d["weights"])
        return cls(**d)


def cosine_lr(step, total_steps, lr0, lr_min):
    """Cosine annealing without restart from lr0 (step 0) to lr_min."""
    if not (0 <= step <= total_steps):
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + math.cos(math.pi * step / total_steps))


def _derive_seed(*parts):
    return np.random.SeedSequence(list(parts)).generate_state(1)[0]


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, model: ForecastModel, train_cfg: TrainConfig,
                    optimizers=None, extra=None):
    arrays = {}
    for name, arr in _all_params(model).items():
        arrays["param/" + name] = arr
    opt_meta = {}
    for oname, opt in (optimizers or {}).items():
        st = opt.state()
        opt_meta[oname] = {"t": st["t"], "lr": st["lr"], "beta1": st["beta1"],
                           "beta2": st["beta2"], "eps": st["eps"]}
        for k, v in st["m"].items():
            arrays[f"opt/{oname}/m/{k}"] = v
        for k, v in st["v"].items():
            arrays[f"opt/{oname}/v/{k}"] = v
    meta = {
        "version": CHECKPOINT_VERSION,
        "model_cfg": model.cfg.to_dict(),
        "train_cfg": train_cfg.to_dict() if train_cfg else None,
        "optimizers": opt_meta,
        "extra": extra or {},
    }
    arrays["meta_json"] = np.array(json.dumps(meta, sort_keys=True))
    np.savez(path, **arrays)


def _all_params(model):
    p = {}
    p.update(model.encoder.named_params())
    p.update(model.decoder.named_params())
    p.update(model.generator.named_params())
    p.update(model.discriminator.named_params())
    return p


def load_checkpoint(path):
    """Returns (model, train_cfg, optimizer_states, extra)."""
    z = np.load(path, allow_pickle=False)
    meta = json.loads(str(z["meta_json"]))
    if meta["version"] != CHECKPOINT_VERSION:
        raise ValueError(
            f"checkpoint version {meta['version']} unsupported "
            f"(expected {CHECKPOINT_VERSION})")
    model = ForecastModel(cfg=ModelConfig.from_dict(meta["model_cfg"]))
    params = _all_params(model)
    for key in z.files:
        if key.startswith("param/"):
            params[key[len("param/"):]][...] = z[key]
    opt_states = {}
    for oname, ometa in meta["optimizers"].items():
        m = {}
        v = {}
        for key in z.files:
            if key.startswith(f"opt/{oname}/m/"):
                m[key.split("/", 3)[3]] = z[key]
            elif key.startswith(f"opt/{oname}/v/"):
                v[key.split("/", 3)[3]] = z[key]
        opt_states[oname] = {**ometa, "m": m, "v": v}
    tc = TrainConfig.from_dict(meta["train_cfg"]) if meta["train_cfg"] else None
    return model, tc, opt_states, meta["extra"]


def checkpoint_hash(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()[:16]


# ---------------------------------------------------------------------------
# stage 1: oracle
# ---------------------------------------------------------------------------

def _clip_frames(clip):
    return list(clip.input_frames) + [clip.target_frame]


def oracle_val_miou(model, clips, table):
    cm = ConfusionMatrix(table.n_classes)
    for clip in clips:
        pred = argmax_decode(model.decode(model.encode(clip.target_frame), table))
        accumulate_confusion(pred, clip.target_frame, table, cm)
    return miou(cm)


def train_oracle(dataset_root, model_cfg: ModelConfig, cfg: TrainConfig, out_dir,
                 log_name="oracle_log.csv"):
    """Returns (model, best_val_miou, checkpoint_path)."""
    table = default_class_table()
    os.makedirs(out_dir, exist_ok=True)
    train_clips = list(iterate_split(dataset_root, "train", table))
    val_clips = list(iterate_split(dataset_root, "val", table))
    frames = [f for c in train_clips for f in _clip_frames(c)]
    if not frames:
        raise ValueError("empty train split")

    model = ForecastModel(cfg=model_cfg, init_seed=cfg.seed)
    params = {}
    params.update(model.encoder.named_params())
    params.update(model.decoder.named_params())
    opt = Adam(params, lr=cfg.lr0, beta1=cfg.adam_beta1, beta2=cfg.adam_beta2)

    ckpt_path = os.path.join(out_dir, "oracle.npz")
    best = -1.0
    log_rows = []
    for epoch in range(cfg.epochs):
        lr = cosine_lr(epoch, cfg.epochs, cfg.lr0, cfg.lr_min)
        opt.lr = lr
        order = np.random.default_rng(_derive_seed(cfg.seed, epoch, 1)).permutation(len(frames))
        ep_loss = 0.0
        nb = 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            x = np.stack([one_hot(frames[i]) for i in idx])
            gt = np.stack([frames[i].data for i in idx])
            feats = model.encoder.forward(x, train=True)
            logits = model.decoder.forward(feats, train=True)
            loss, dlogits = L.cross_entropy_value_and_grad(logits, gt, table.void_id)
            if not np.isfinite(loss):
                raise DivergenceError(f"oracle loss became {loss} at epoch {epoch}")
            model.encoder.zero_grad()
            model.decoder.zero_grad()
            dfeat = model.decoder.backward(dlogits)
            model.encoder.backward(dfeat)
            grads = {}
            grads.update(model.encoder.named_grads())
            grads.update(model.decoder.named_grads())
            opt.step(grads)
            ep_loss += loss
            nb += 1
        val = oracle_val_miou(model, val_clips, table) if val_clips else float("nan")
        log_rows.append({"epoch": epoch, "lr": lr, "ce_loss": ep_loss / max(nb, 1),
                         "val_miou": val})
        if not val_clips or val >= best:
            best = val if val_clips else 0.0
            save_checkpoint(ckpt_path, model, cfg, {"oracle": opt},
                            extra={"stage": "oracle", "epoch": epoch,
                                   "val_miou": best})
    _write_log(os.path.join(out_dir, log_name), log_rows)
    model, _, _, _ = load_checkpoint(ckpt_path)
    return model, best, ckpt_path


def _write_log(path, rows):
    if not rows:
        return
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        w.writeheader()
        w.writerows(rows)


# ---------------------------------------------------------------------------
# feature cache
# ---------------------------------------------------------------------------

class FeatureCache:
    """One .npy per (clip, timestep); manifest ties entries to the encoder
    checkpoint hash and stores per-entry checksums."""

    def __init__(self, root):
        self.root = root
        self._manifest = None

    def manifest_path(self):
        return os.path.join(self.root, "cache_manifest.json")

    def manifest(self):
        if self._manifest is None:
            with open(self.manifest_path()) as fh:
                self._manifest = json.load(fh)
        return self._manifest

    def entry_path(self, split, clip_id, t):
        return os.path.join(self.root, split, f"clip_{clip_id}", f"feat_{t}.npy")

    def load(self, split, clip_id, t, verify=True):
        path = self.entry_path(split, clip_id, t)
        try:
            arr = np.load(path)
        except FileNotFoundError:
            raise CacheError(f"missing cache entry {path}")
        if verify:
            key = f"{split}/{clip_id}/{t}"
            want = self.manifest()["checksums"].get(key)
            got = hashlib.sha256(np.ascontiguousarray(arr).tobytes()).hexdigest()
            if want != got:
                raise CacheError(f"checksum mismatch for cache entry {key}")
        return arr


def build_cache(dataset_root, model: ForecastModel, cache_root,
                encoder_ckpt_hash="", splits=("train", "val", "test")):
    table = default_class_table()
    os.makedirs(cache_root, exist_ok=True)
    checksums = {}
    for split in splits:
        for clip in iterate_split(dataset_root, split, table):
            d = os.path.join(cache_root, split, f"clip_{clip.clip_id}")
            os.makedirs(d, exist_ok=True)
            for t, frame in list(zip(clip.times, clip.input_frames)) + \
                    [(clip.target_time, clip.target_frame)]:
                feat = model.encode(frame).data
                np.save(os.path.join(d, f"feat_{t}.npy"), feat)
                key = f"{split}/{clip.clip_id}/{t}"
                checksums[key] = hashlib.sha256(
                    np.ascontiguousarray(feat).tobytes()).hexdigest()
    with open(os.path.join(cache_root, "cache_manifest.json"), "w") as fh:
        json.dump({"encoder_checkpoint_hash": encoder_ckpt_hash,
                   "checksums": checksums}, fh, indent=1, sort_keys=True)
    return FeatureCache(cache_root)


# ---------------------------------------------------------------------------
# stage 2: adversarial F2F training
# ---------------------------------------------------------------------------

def _load_split_features(dataset_root, cache: FeatureCache, split, cfg, table):
    """Returns list of dicts with past (3C,h,w), target feature, gt SegMap."""
    items = []
    for clip in iterate_split(dataset_root, split, table):
        past = np.concatenate(
            [cache.load(split, clip.clip_id, t, verify=False) for t in clip.times], axis=0)
        tgt = cache.load(split, clip.clip_id, clip.target_time, verify=False)
        items.append({"clip": clip, "past": past, "target_feat": tgt,
                      "gt": clip.target_frame})
    return items


def _mr_grad(cfg, target, stack):
    if cfg.loss_kind == "MR1":
        return L.mr1_value_and_grad(target, stack)
    if cfg.loss_kind == "MR2":
        return L.mr2_value_and_grad(target, stack, cfg.weights.variance_floor)
    # plain L2 on the (single) sample, the deterministic baseline
    diff = stack - target
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


def eval_forecaster(model, items, cfg, table, seed=1234, max_clips=0):
    """Mean individual-sample mIoU, mIoU-MO and pairwise MSE on cached val
    features; deterministic in (model, items, seed)."""
    cm = ConfusionMatrix(table.n_classes)
    mses = []
    if max_clips:
        items = items[:max_clips]
    for i, it in enumerate(items):
        past = [FeatureMap(p) for p in np.split(it["past"], 3, axis=0)]
        ss = model.forward_k(past, cfg.eval_k, _derive_seed(seed, i), table)
        for lv in ss.samples:
            accumulate_confusion(argmax_decode(lv), it["gt"], table, cm)
        mses.append(pairwise_mse(ss))
    return {"val_miou": miou(cm),
            "val_miou_mo": miou_mo(cm, table.movable_ids),
            "val_pairwise_mse": float(np.mean(mses))}


def train_f2f(dataset_root, cache: FeatureCache, model: ForecastModel,
              cfg: TrainConfig, out_dir, resume_extra=None, log_name="f2f_log.csv"):
    """Returns (model, log_rows, best_checkpoint_path). The encoder/decoder
    inside `model` stay frozen; only generator and discriminator train."""
    table = default_class_table()
    os.makedirs(out_dir, exist_ok=True)
    train_items = _load_split_features(dataset_root, cache, "train", cfg, table)
    val_items = _load_split_features(dataset_root, cache, "val", cfg, table)
    if not train_items:
        raise ValueError("empty train split")

    k = 1 if cfg.loss_kind == "L2" else cfg.k_samples
    lam_gan = 0.0 if cfg.loss_kind == "L2" else cfg.weights.lambda_gan
    lam_mr = cfg.weights.lambda_mr

    opt_g = Adam(model.generator.named_params(), lr=cfg.lr0,
                 beta1=cfg.adam_beta1, beta2=cfg.adam_beta2)
    opt_d = Adam(model.discriminator.named_params(), lr=cfg.lr0,
                 beta1=cfg.adam_beta1, beta2=cfg.adam_beta2)

    start_epoch = 0
    best = -1.0
    bad_streak = 0
    if resume_extra:
        start_epoch = resume_extra["epoch"] + 1
        best = resume_extra.get("best_val_miou", -1.0)
        bad_streak = resume_extra.get("bad_streak", 0)

    ckpt_best = os.path.join(out_dir, "f2f_best.npz")
    ckpt_last = os.path.join(out_dir, "f2f_last.npz")
    log_rows = []
    noise_c = model.cfg.noise_channels
    hw = train_items[0]["past"].shape[1:]

    for epoch in range(start_epoch, cfg.epochs):
        lr = cosine_lr(epoch, cfg.epochs, cfg.lr0, cfg.lr_min)
        opt_g.lr = lr
        opt_d.lr = lr
        rng = np.random.default_rng(_derive_seed(cfg.seed, epoch, 2))
        model.discriminator.seed_dropout(_derive_seed(cfg.seed, epoch, 3))
        # annealed instance noise keeps real/fake supports overlapping so the
        # discriminator cannot saturate early in training
        d_sigma = cfg.d_noise0 * max(0.0, 1.0 - epoch / max(cfg.epochs - 1, 1))

        def _dn(x):
            if d_sigma == 0.0:
                return x
            return x + d_sigma * rng.standard_normal(x.shape)
        order = rng.permutation(len(train_items))
        ep = {"g_loss": 0.0, "d_loss": 0.0, "mr_loss": 0.0, "nb": 0}

        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            b = len(idx)
            past = np.stack([train_items[i]["past"] for i in idx])
            target = np.stack([train_items[i]["target_feat"] for i in idx])
            past_k = np.repeat(past, k, axis=0)
            z = rng.standard_normal((b * k, noise_c) + hw)

            # --- generator update -------------------------------------
            fake = model.generator.forward(past_k, z, train=True)
            mr_total = 0.0
            if cfg.mr_space == "logit" and cfg.loss_kind != "L2":
                # reconstruction targets are the decoded oracle logits; the
                # (frozen) decoder only routes gradients back to features
                tgt_logits = model.decoder.forward(target)
                fake_logits = model.decoder.forward(fake)
                dflog = np.empty_like(fake_logits)
                for j in range(b):
                    sl = slice(j * k, (j + 1) * k)
                    mr_j, dstack = _mr_grad(cfg, tgt_logits[j], fake_logits[sl])
                    mr_total += mr_j
                    dflog[sl] = dstack / b
                model.decoder.zero_grad()
                dfake = model.decoder.backward(dflog)
            else:
                dfake = np.empty_like(fake)
                for j in range(b):
                    sl = slice(j * k, (j + 1) * k)
                    mr_j, dstack = _mr_grad(cfg, target[j], fake[sl])
                    mr_total += mr_j
                    dfake[sl] = dstack / b
            mr_total /= b

            g_adv = 0.0
            if lam_gan > 0:
                model.discriminator.zero_grad()
                scores = model.discriminator.forward(_dn(fake), past_k, train=True)
                g_adv, dscores = L.gan_loss_g_grads(scores)
                dcand, _ = model.discriminator.backward(dscores * lam_gan)
                dfake = lam_mr * dfake + dcand
            else:
                dfake = lam_mr * dfake

            g_loss = lam_mr * mr_total + lam_gan * g_adv
            if not np.isfinite(g_loss):
                save_checkpoint(ckpt_last, model, cfg, {"g": opt_g, "d": opt_d},
                                extra={"stage": "f2f", "epoch": epoch, "diverged": True})
                raise DivergenceError(
                    f"generator loss became {g_loss} at epoch {epoch}; "
                    f"last-good checkpoint kept at {ckpt_last}")
            model.generator.zero_grad()
            model.generator.backward(dfake)
            opt_g.step(model.generator.named_grads())

            # --- discriminator update ----------------------------------
            d_loss = 0.0
            if lam_gan > 0:
                for _ in range(cfg.d_updates_per_g):
                    if cfg.d_all_k:
                        fake_sel, cond_sel = fake, past_k
                    else:
                        pick = rng.integers(0, k, size=b)
                        rows = np.arange(b) * k + pick
                        fake_sel, cond_sel = fake[rows], past
                    model.discriminator.zero_grad()
                    rs = model.discriminator.forward(_dn(target), past, train=True)
                    loss_r = float(-np.mean(np.log(np.clip(rs, L.SCORE_CLAMP,
                                                           1 - L.SCORE_CLAMP))))
                    _, drs, _ = L.gan_loss_d_grads(rs, np.full_like(rs, 0.5))
                    model.discriminator.backward(drs)
                    fs = model.discriminator.forward(_dn(fake_sel), cond_sel,
                                                     train=True)
                    loss_f = float(-np.mean(np.log(np.clip(1 - fs, L.SCORE_CLAMP,
                                                           1 - L.SCORE_CLAMP))))
                    _, _, dfs = L.gan_loss_d_grads(np.full_like(fs, 0.5), fs)
                    model.discriminator.backward(dfs)
                    opt_d.step(model.discriminator.named_grads())
                    d_loss = loss_r + loss_f
                if not np.isfinite(d_loss):
                    raise DivergenceError(f"discriminator loss became {d_loss}")

            ep["g_loss"] += g_loss
            ep["d_loss"] += d_loss
            ep["mr_loss"] += mr_total
            ep["nb"] += 1

        row = {"epoch": epoch, "lr": lr,
               "g_loss": ep["g_loss"] / ep["nb"],
               "d_loss": ep["d_loss"] / ep["nb"],
               "mr_loss": ep["mr_loss"] / ep["nb"],
               "val_miou": float("nan"), "val_miou_mo": float("nan"),
               "val_pairwise_mse": float("nan")}

        if val_items and (epoch % cfg.eval_every == 0 or epoch == cfg.epochs - 1):
            stats = eval_forecaster(model, val_items, cfg, table,
                                    max_clips=cfg.eval_max_clips)
            row.update(stats)
            if stats["val_miou"] >= best:
                best = stats["val_miou"]
                bad_streak = 0
                save_checkpoint(ckpt_best, model, cfg, {"g": opt_g, "d": opt_d},
                                extra={"stage": "f2f", "epoch": epoch,
                                       "best_val_miou": best, "bad_streak": bad_streak})
            else:
                bad_streak += 1
        log_rows.append(row)
        save_checkpoint(ckpt_last, model, cfg, {"g": opt_g, "d": opt_d},
                        extra={"stage": "f2f", "epoch": epoch,
                               "best_val_miou": best, "bad_streak": bad_streak})
        if cfg.early_stop_patience and bad_streak >= cfg.early_stop_patience:
            break

    _write_log(os.path.join(out_dir, log_name), log_rows)
    if not os.path.exists(ckpt_best):
        save_checkpoint(ckpt_best, model, cfg, {"g": opt_g, "d": opt_d},
                        extra={"stage": "f2f", "epoch": cfg.epochs - 1,
                               "best_val_miou": best, "bad_streak": bad_streak})
    return model, log_rows, ckpt_best
