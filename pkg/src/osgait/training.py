"""Two-stage PCAA optimisation (feature extraction, then adversarial
regularisation) and the checkpoint container."""
from __future__ import annotations

import hashlib
import json
import logging
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import losses
from . import tensorcore as tc
from .dataio import WindowSet
from .model import PCAA, BatchNorm, ModelConfig
from .priors import CentroidPrior, place_centroids
from .seeding import rng_for, sub_seed
from .tensorcore import Tensor

log = logging.getLogger(__name__)

CKPT_MAGIC = b"PCAA"
CKPT_VERSION = 1
HISTORY_COLUMNS = ("epoch", "L_C", "L_R", "L", "L_D", "val_L", "val_accuracy")


class TrainingDiverged(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 32
    epochs: int = 100
    n_critic: int = 5
    gp_weight: float = 15.0
    seed: int = 0
    precision: str = "float32"
    patience: int | None = None
    grad_clip: float | None = 10.0
    phase_mode: str = "alternate"        # or "sequential"
    adversarial: bool = True
    freeze_critic: bool = False
    classification_weight: float = 1.0
    reconstruction_weight: float = 1.0
    encoder_adversarial_weight: float = 1.0
    prior_radius: float = 10.0
    prior_min_separation: float = 10.0
    val_batch_size: int = 256
    recalibrate_bn: bool = True

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.phase_mode not in ("alternate", "sequential"):
            raise ValueError("phase_mode must be 'alternate' or 'sequential'")
        if self.precision not in ("float32", "float64"):
            raise ValueError("precision must be float32 or float64")


class Adam:
    def __init__(self, params, lr=1e-4, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr, self.betas, self.eps = lr, betas, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        self.t += 1
        b1, b2 = self.betas
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        step_size = self.lr / c1
        inv_sqrt_c2 = 1.0 / np.sqrt(c2)
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            denom = np.sqrt(v)
            denom *= inv_sqrt_c2
            denom += self.eps
            upd = m / denom
            upd *= step_size
            p.data -= upd


def clip_grad_norm(params, max_norm: float | None) -> float:
    total = float(np.sqrt(sum(float(np.vdot(p.grad, p.grad)) for p in params)))
    if max_norm is not None and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            p.grad *= scale
    return total


# ---------------------------------------------------------------------------
# Checkpoint
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    model_config: ModelConfig
    train_config: TrainConfig
    prior: CentroidPrior
    epoch: int = 0
    history: list[dict] = field(default_factory=list)

    def build_model(self, dtype: str | None = None) -> PCAA:
        cfg = self.model_config
        if dtype is not None and dtype != cfg.dtype:
            cfg = ModelConfig(**{**cfg.to_dict(), "dtype": dtype})
        model = PCAA(cfg, seed=0)
        load_state(model, self.tensors)
        return model.eval()

    def scoring_prior(self, model: PCAA | None = None) -> CentroidPrior:
        """The prior used for novelty scores (learned centroids under ablation v1)."""
        if self.model_config.learned_centroids:
            model = model or self.build_model()
            with tc.no_grad():
                mu = model.centroids_from_mlp().data
            return self.prior.with_centroids(mu)
        return self.prior


def model_state(model: PCAA) -> dict[str, np.ndarray]:
    state = {name: p.data.astype(np.float64) for name, p in model.named_parameters()}
    for name, buf in model.named_buffers():
        state["buffer:" + name] = buf.astype(np.float64)
    return state


def load_state(model: PCAA, tensors: dict[str, np.ndarray]):
    params = dict(model.named_parameters())
    buffers = dict(model.named_buffers())
    expected = set(params) | {"buffer:" + b for b in buffers}
    given = {k for k in tensors if not k.startswith("prior:")}
    if expected != given:
        missing, extra = sorted(expected - given), sorted(given - expected)
        raise CheckpointError(f"parameter set mismatch; missing {missing[:5]}, unexpected {extra[:5]}")
    for name, p in params.items():
        src = tensors[name]
        if src.shape != p.shape:
            raise CheckpointError(f"shape mismatch for {name}: checkpoint {src.shape}, model {p.shape}")
        p.data = src.astype(p.dtype)
        p.zero_grad()
    for name, buf in buffers.items():
        src = tensors["buffer:" + name]
        if src.shape != buf.shape:
            raise CheckpointError(f"shape mismatch for {name}: checkpoint {src.shape}, model {buf.shape}")
        buf[...] = src


def _prior_meta(prior: CentroidPrior) -> dict:
    return dict(radius=prior.radius, min_separation=prior.min_separation,
                subject_ids=list(prior.subject_ids), seed=prior.seed)


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    meta = dict(model_config=ckpt.model_config.to_dict(), train_config=asdict(ckpt.train_config),
                prior=_prior_meta(ckpt.prior), epoch=ckpt.epoch, history=ckpt.history)
    meta_raw = json.dumps(meta, sort_keys=True).encode()
    tensors = dict(ckpt.tensors)
    tensors["prior:centroids"] = np.asarray(ckpt.prior.centroids, dtype=np.float64)
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(meta_raw)), meta_raw,
             struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f8")
        nb = name.encode()
        parts.append(struct.pack("<I", len(nb)) + nb)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode_checkpoint(raw: bytes) -> Checkpoint:
    if len(raw) < 16 or raw[:4] != CKPT_MAGIC:
        raise CheckpointError("not a PCAA checkpoint (bad magic)")
    version, meta_len = struct.unpack_from("<II", raw, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError("corrupt checkpoint payload (checksum mismatch)")
    try:
        off = 12
        meta = json.loads(body[off:off + meta_len])
        off += meta_len
        (n,) = struct.unpack_from("<I", body, off)
        off += 4
        tensors = {}
        for _ in range(n):
            (ln,) = struct.unpack_from("<I", body, off)
            name = body[off + 4:off + 4 + ln].decode()
            off += 4 + ln
            (ndim,) = struct.unpack_from("<I", body, off)
            shape = struct.unpack_from(f"<{ndim}I", body, off + 4)
            off += 4 + 4 * ndim
            count = int(np.prod(shape)) if ndim else 1
            tensors[name] = np.frombuffer(body, dtype="<f8", count=count, offset=off).reshape(shape).copy()
            off += 8 * count
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint payload: {exc}") from exc
    if off != len(body):
        raise CheckpointError("corrupt checkpoint payload (trailing bytes)")
    pm = meta["prior"]
    prior = CentroidPrior(tensors.pop("prior:centroids"), pm["radius"], pm["min_separation"],
                          tuple(pm["subject_ids"]), pm["seed"])
    mc = meta["model_config"]
    return Checkpoint(tensors, ModelConfig.from_dict(mc), TrainConfig(**meta["train_config"]),
                      prior, meta["epoch"], meta["history"])


def save_checkpoint(path, ckpt: Checkpoint) -> str:
    raw = encode_checkpoint(ckpt)
    Path(path).write_bytes(raw)
    return hashlib.sha256(raw).hexdigest()


def load_checkpoint(path, expected_config: ModelConfig | None = None) -> Checkpoint:
    ckpt = decode_checkpoint(Path(path).read_bytes())
    if expected_config is not None:
        # raises CheckpointError on any shape disagreement
        load_state(PCAA(expected_config, seed=0), ckpt.tensors)
    return ckpt


def config_digest(obj) -> str:
    d = asdict(obj) if hasattr(obj, "__dataclass_fields__") else obj
    return hashlib.sha256(json.dumps(d, sort_keys=True, default=str).encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

def onehot(labels, prior: CentroidPrior, dtype) -> np.ndarray:
    idx = np.array([prior.index_of(s) for s in np.atleast_1d(labels)])
    return np.eye(prior.M, dtype=dtype)[idx]


def evaluate_losses(model: PCAA, ws: WindowSet, prior: CentroidPrior, batch_size: int = 256,
                    weights=(1.0, 1.0)):
    """(L_C, L_R, accuracy) on a window set in eval mode."""
    was_training = model.training
    model.eval()
    dtype = model.cfg.dtype
    n = len(ws)
    lc = lr = correct = 0.0
    with tc.no_grad():
        for i in range(0, n, batch_size):
            x = ws.data[i:i + batch_size].astype(dtype)
            y = onehot(ws.labels[i:i + batch_size], prior, dtype)
            z = model.encode(x)
            p = model.classify(z)
            b = len(x)
            lc += losses.cross_entropy(p, y).item() * b
            if model.cfg.use_decoder:
                lr += losses.chamfer_sequence(x, model.decode(z)).item() * b
            correct += float((p.data.argmax(axis=1) == y.argmax(axis=1)).sum())
    model.train(was_training)
    return weights[0] * lc / n, weights[1] * lr / n, correct / n


def _check_finite(value: float, what: str, batch: int):
    if not np.isfinite(value):
        raise TrainingDiverged(f"non-finite {what} at batch {batch}")


def train(train_set: WindowSet, val_set: WindowSet | None, model_cfg: ModelConfig,
          cfg: TrainConfig, init_model: PCAA | None = None, progress=None) -> Checkpoint:
    """Train PCAA on known-subject windows only and return the final checkpoint."""
    subjects = train_set.subjects
    if len(subjects) < 2:
        raise ValueError("training needs at least 2 known subjects")
    model_cfg = ModelConfig(**{**model_cfg.to_dict(), "M": len(subjects), "dtype": cfg.precision})
    dtype = model_cfg.dtype
    prior = place_centroids(len(subjects), model_cfg.K, cfg.prior_radius, cfg.prior_min_separation,
                            seed=sub_seed(cfg.seed, "prior"), subject_ids=subjects)
    model = init_model if init_model is not None else PCAA(model_cfg, seed=sub_seed(cfg.seed, "init"))
    model.train()

    opt_ae = Adam(model.group("autoencoder"), cfg.learning_rate)
    opt_critic = Adam(model.group("critic"), cfg.learning_rate)
    opt_enc = Adam(model.group("encoder"), cfg.learning_rate)
    opt_cent = Adam(model.group("centroids"), cfg.learning_rate)
    batch_rng = rng_for(cfg.seed, "batching")
    prior_rng = rng_for(cfg.seed, "prior-samples")
    interp_rng = rng_for(cfg.seed, "interpolation")
    w_c, w_r = cfg.classification_weight, cfg.reconstruction_weight

    X_all = train_set.data
    Y_all = onehot(train_set.labels, prior, dtype)
    n = len(train_set)

    def stage1(x, y, step):
        opt_ae.zero_grad()
        z = model.encode(x)
        L_C = losses.cross_entropy(model.classify(z), y)
        total = L_C * w_c
        L_R = 0.0
        if model_cfg.use_decoder:
            lr_t = losses.chamfer_sequence(x, model.decode(z))
            total = total + lr_t * w_r
            L_R = lr_t.item()
        _check_finite(total.item(), "stage-1 loss", step)
        total.backward()
        clip_grad_norm(opt_ae.params, cfg.grad_clip)
        opt_ae.step()
        return L_C.item(), L_R

    def stage2(x, y, step):
        z = model.encode(x)
        labels_idx = y.argmax(axis=1)
        if model_cfg.learned_centroids:
            with tc.no_grad():
                mu = model.centroids_from_mlp().data
        else:
            mu = prior.centroids.astype(dtype)
        L_D = 0.0
        if not cfg.freeze_critic:
            for _ in range(cfg.n_critic):
                opt_critic.zero_grad()
                z_star = mu[labels_idx] + prior_rng.standard_normal(z.shape).astype(dtype)
                loss_d = losses.wgan_gp_discriminator_loss(model.critic, z.data, z_star, y,
                                                           cfg.gp_weight, interp_rng)
                L_D = loss_d.item()
                _check_finite(L_D, "critic loss", step)
                loss_d.backward()
                clip_grad_norm(opt_critic.params, cfg.grad_clip)
                opt_critic.step()
        if cfg.encoder_adversarial_weight > 0:
            opt_enc.zero_grad()
            adv = losses.encoder_adversarial_loss(model.critic, z, y) * cfg.encoder_adversarial_weight
            _check_finite(adv.item(), "encoder adversarial loss", step)
            adv.backward()
            clip_grad_norm(opt_enc.params, cfg.grad_clip)
            opt_enc.step()
        if model_cfg.learned_centroids:
            # pull the learned prior toward the encoder's posterior
            opt_cent.zero_grad()
            mu_t = model.centroids_from_mlp()
            eps = Tensor(prior_rng.standard_normal(z.shape).astype(dtype))
            z_star = tc.getitem(mu_t, labels_idx) + eps
            loss_c = model.critic(tc.concat([z_star, Tensor(y)], axis=-1)).mean()
            loss_c.backward()
            clip_grad_norm(opt_cent.params, cfg.grad_clip)
            opt_cent.step()
        return L_D

    history: list[dict] = []
    best_val, bad_epochs = np.inf, 0
    sequential = cfg.phase_mode == "sequential"
    n_epochs = 2 * cfg.epochs if sequential and cfg.adversarial else cfg.epochs
    step = 0
    for epoch in range(n_epochs):
        run_stage1 = not sequential or epoch < cfg.epochs
        run_stage2 = cfg.adversarial and (not sequential or epoch >= cfg.epochs)
        perm = batch_rng.permutation(n)
        sums = dict(L_C=0.0, L_R=0.0, L_D=0.0)
        n_batches = 0
        for i in range(0, n, cfg.batch_size):
            idx = perm[i:i + cfg.batch_size]
            if len(idx) < 2:
                continue
            x = X_all[idx].astype(dtype, copy=False)
            y = Y_all[idx]
            if run_stage1:
                lc, lr_ = stage1(x, y, step)
                sums["L_C"] += lc
                sums["L_R"] += lr_
            if run_stage2:
                sums["L_D"] += stage2(x, y, step)
            n_batches += 1
            step += 1
        row = {k: v / max(n_batches, 1) for k, v in sums.items()}
        row["L"] = row["L_C"] * w_c + row["L_R"] * w_r
        row["epoch"] = epoch
        if val_set is not None and len(val_set):
            vlc, vlr, vacc = evaluate_losses(model, val_set, prior, cfg.val_batch_size, (w_c, w_r))
            row["val_L"], row["val_accuracy"] = vlc + vlr, vacc
        else:
            row["val_L"], row["val_accuracy"] = float("nan"), float("nan")
        history.append({k: row[k] for k in HISTORY_COLUMNS})
        log.info("epoch %d L_C=%.4f L_R=%.4f L_D=%.4f val_L=%.4f val_acc=%.3f", epoch,
                 row["L_C"], row["L_R"], row["L_D"], row["val_L"], row["val_accuracy"])
        if progress is not None:
            progress(row, model, prior)
        if cfg.patience is not None and np.isfinite(row["val_L"]):
            if row["val_L"] < best_val - 1e-9:
                best_val, bad_epochs = row["val_L"], 0
            else:
                bad_epochs += 1
                if bad_epochs > cfg.patience:
                    break
    if cfg.recalibrate_bn:
        recalibrate_batch_norm(model, X_all, cfg.batch_size, dtype, rng_for(cfg.seed, "bn-recalibration"))
    model.eval()
    return Checkpoint(model_state(model), model_cfg, cfg, prior, len(history), history)


def recalibrate_batch_norm(model: PCAA, data: np.ndarray, batch_size: int, dtype="float32",
                           rng: np.random.Generator | None = None):
    """Replace the running batch-norm statistics by their average over one
    shuffled pass of ``data`` at the final weights (equal weight per batch).
    Shuffling matters: batches must look like training batches."""
    order = (rng or np.random.default_rng(0)).permutation(len(data))
    bns = [m for m in model.modules() if isinstance(m, BatchNorm)]
    for bn in bns:
        bn.running_mean[:] = 0.0
        bn.running_var[:] = 0.0
    model.train()
    with tc.no_grad():
        for i, start in enumerate(range(0, len(data), batch_size)):
            chunk = data[order[start:start + batch_size]]
            if len(chunk) < 2:
                break
            for bn in bns:
                bn.momentum = 1.0 / (i + 1)
            model.encode(chunk.astype(dtype, copy=False))
    for bn in bns:
        bn.momentum = tc.BN_MOMENTUM


def write_history_csv(path, history: list[dict]):
    lines = [",".join(HISTORY_COLUMNS)]
    for row in history:
        lines.append(",".join(repr(float(row[c])) if c != "epoch" else str(row[c]) for c in HISTORY_COLUMNS))
    Path(path).write_text("\n".join(lines) + "\n")
