"""Training loop: cross-entropy + Adam, geometric augmentation, LR decay on
validation plateau, early stopping on validation Dice.

Determinism: every random draw comes from a generator seeded by
(config seed, purpose tag, epoch [, item index]), so an interrupted run
resumed from the last checkpoint replays exactly the batches and
augmentations an uninterrupted run would have seen.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import dihedral as dh
from .errors import ConfigError, DataError, TrainingDiverged
from .evalmetrics import overlap_metrics
from .net import Network, save_checkpoint

_TAG_SHUFFLE = 0x5F1E
_TAG_AUGMENT = 0xA0C3


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 4
    lr0: float = 2e-4
    max_epochs: int = 100
    early_stop_patience: int = 25
    lr_decay: float = 0.5
    lr_patience: int = 10
    seed: int = 0
    augment: str = "on"

    def __post_init__(self):
        if min(self.batch_size, self.max_epochs, self.lr_patience) < 1:
            raise ConfigError("batch_size, max_epochs and lr_patience must be >= 1")
        if self.early_stop_patience < 0:
            raise ConfigError("early_stop_patience must be >= 0")
        if self.lr0 <= 0 or not (0 < self.lr_decay <= 1):
            raise ConfigError("need lr0 > 0 and 0 < lr_decay <= 1")
        if self.augment not in ("on", "off"):
            raise ConfigError("augment must be 'on' or 'off'")


def cross_entropy_loss(logits: np.ndarray, target: np.ndarray):
    """Mean pixel cross entropy and its logit gradient.

    logits: [N,C,H,W] (or [C,H,W]); target: integer labels [N,H,W] (or [H,W]).
    """
    single = logits.ndim == 3
    lg = logits[None] if single else logits
    tg = target[None] if single else target
    n, c, h, w = lg.shape
    if tg.shape != (n, h, w):
        raise DataError(f"target shape {target.shape} does not match logits {logits.shape}")
    if tg.min() < 0 or tg.max() >= c:
        raise DataError(f"target labels outside [0, {c}): {tg.min()}..{tg.max()}")
    shifted = lg - lg.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    softmax = exp / exp.sum(axis=1, keepdims=True)
    count = n * h * w
    ni, hi, wi = np.ogrid[:n, :h, :w]
    picked = shifted[ni, tg, hi, wi] - np.log(exp.sum(axis=1))
    loss = float(-picked.sum() / count)
    grad = softmax.copy()
    grad[ni, tg, hi, wi] -= 1.0
    grad /= grad.dtype.type(count)
    return loss, (grad[0] if single else grad)


class AdamState:
    """First/second moment accumulators mirroring the parameter dict."""

    def __init__(self, params: dict[str, np.ndarray], beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState, lr: float):
    """Standard bias-corrected update, in place on the parameter arrays."""
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for k, p in params.items():
        g = grads[k]
        m, v = state.m[k], state.v[k]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        p -= (lr / c1) * m / (np.sqrt(v / c2) + state.eps)


@dataclass(frozen=True)
class AugmentDraw:
    element: dh.GroupElement
    shift: tuple[int, int]
    scale: float
    aspect: float

    @property
    def is_identity_affine(self) -> bool:
        return self.shift == (0, 0) and self.scale == 1.0 and self.aspect == 1.0


def draw_augment(rng: np.random.Generator, size: int) -> AugmentDraw:
    """Random geometric transform: D4 element, +-10% shift/scale/aspect."""
    element = dh.ELEMENTS[int(rng.integers(0, 8))]
    max_shift = int(round(0.1 * size))
    shift = (int(rng.integers(-max_shift, max_shift + 1)),
             int(rng.integers(-max_shift, max_shift + 1)))
    scale = float(rng.uniform(0.9, 1.1))
    aspect = float(rng.uniform(0.9, 1.1))
    return AugmentDraw(element, shift, scale, aspect)


def _affine_nearest(plane: np.ndarray, draw: AugmentDraw, fill=0):
    h, w = plane.shape[-2], plane.shape[-1]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    sr = draw.scale * draw.aspect
    sc = draw.scale / draw.aspect
    ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    src_r = np.rint((ii - cy - draw.shift[0]) / sr + cy).astype(np.int64)
    src_c = np.rint((jj - cx - draw.shift[1]) / sc + cx).astype(np.int64)
    valid = (src_r >= 0) & (src_r < h) & (src_c >= 0) & (src_c < w)
    out = np.full_like(plane, fill)
    out[..., valid] = plane[..., src_r[valid], src_c[valid]]
    return out


def apply_augment(image: np.ndarray, mask: np.ndarray, draw: AugmentDraw):
    """Same transform on image and mask; mask resampled nearest, zero fill."""
    if image.shape[-2] != image.shape[-1]:
        raise DataError("augmentation expects square inputs")
    img, msk = image, mask
    if not draw.is_identity_affine:
        img = _affine_nearest(img, draw)
        msk = _affine_nearest(msk, draw)
    img = dh.act_on_plane(draw.element, img)
    msk = dh.act_on_plane(draw.element, msk)
    return img, msk


def augment(image: np.ndarray, mask: np.ndarray, rng: np.random.Generator,
            enabled: bool = True):
    if not enabled:
        return image, mask
    return apply_augment(image, mask, draw_augment(rng, image.shape[-1]))


def normalize(image: np.ndarray, lo: float = -1.6, hi: float = 1.6) -> np.ndarray:
    """Affine map of the image's own intensity range onto [lo, hi]."""
    mn, mx = float(image.min()), float(image.max())
    if mx == mn:
        return np.zeros_like(image)
    return lo + (hi - lo) * (image - mn) / (mx - mn)


def predicted_foreground(logits: np.ndarray) -> np.ndarray:
    """Argmax mask collapsed to foreground-vs-background."""
    return logits.argmax(axis=-3) > 0


def validation_dice(net: Network, images: np.ndarray, masks: np.ndarray,
                    batch_size: int) -> float:
    scores = []
    for lo in range(0, len(images), batch_size):
        logits = net.forward(images[lo : lo + batch_size], train=False)
        pred = predicted_foreground(logits)
        for p, m in zip(pred, masks[lo : lo + batch_size]):
            scores.append(overlap_metrics(p, m > 0).dice)
    return float(np.mean(scores))


@dataclass
class FitResult:
    epochs_run: int
    total_steps: int
    best_val_dice: float
    best_epoch: int
    stopped_early: bool
    log: list[dict] = field(default_factory=list)


LOG_FIELDS = ("epoch", "step", "loss", "val_dice", "lr")


def write_log_csv(path, rows: list[dict]):
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=LOG_FIELDS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def _grad_norms(net: Network, top: int = 5) -> dict:
    norms = {k: float(np.linalg.norm(g)) for k, g in net.grads().items()}
    worst = sorted(norms.items(), key=lambda kv: -kv[1])[:top]
    return dict(worst)


def fit(net: Network, train_samples, val_samples, cfg: TrainConfig,
        out_dir=None, resume_state: dict | None = None,
        adam_state: AdamState | None = None) -> FitResult:
    """Optimize `net` on (image, mask) samples; returns the best-Dice state.

    `train_samples` / `val_samples`: lists of objects with `.image` [1,H,W]
    and `.mask` [H,W].  Images are range-normalized once up front.  If
    `out_dir` is given, writes train_log.csv plus best.ckpt / last.ckpt.
    """
    if not train_samples or not val_samples:
        raise DataError("fit needs non-empty train and validation sets")
    dtype = net.dtype
    train_imgs = [normalize(s.image).astype(dtype) for s in train_samples]
    train_masks = [s.mask.astype(np.int64) for s in train_samples]
    val_imgs = np.stack([normalize(s.image).astype(dtype) for s in val_samples])
    val_masks = np.stack([s.mask.astype(np.int64) for s in val_samples])

    params = net.params()
    state = adam_state or AdamState(params)
    lr = cfg.lr0
    best_dice = -1.0
    best_epoch = 0
    best_params = None
    since_improve = 0
    total_steps = 0
    start_epoch = 1
    log_rows: list[dict] = []

    if resume_state is not None:
        lr = resume_state["lr"]
        best_dice = resume_state["best_val_dice"]
        best_epoch = resume_state["best_epoch"]
        since_improve = resume_state["since_improve"]
        total_steps = resume_state["step"]
        start_epoch = resume_state["epoch"] + 1
        state.step_count = resume_state["adam_step"]
        log_rows = list(resume_state.get("log", []))
        for name, arr in resume_state["tensors"].items():
            key, kind = name.rsplit(".", 1)
            (state.m if kind == "m" else state.v)[key][...] = arr

    n = len(train_imgs)
    stopped_early = False
    epoch = start_epoch - 1
    for epoch in range(start_epoch, cfg.max_epochs + 1):
        order = np.random.default_rng([cfg.seed, _TAG_SHUFFLE, epoch]).permutation(n)
        losses = []
        for lo in range(0, n, cfg.batch_size):
            idxs = order[lo : lo + cfg.batch_size]
            xs, ys = [], []
            for i in idxs:
                rng_item = np.random.default_rng([cfg.seed, _TAG_AUGMENT, epoch, int(i)])
                img, msk = augment(train_imgs[i], train_masks[i], rng_item,
                                   enabled=cfg.augment == "on")
                xs.append(img)
                ys.append(msk)
            xb = np.stack(xs)
            yb = np.stack(ys)
            logits = net.forward(xb, train=True)
            loss, dlogits = cross_entropy_loss(logits, yb)
            if not np.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch} step {total_steps}",
                    diagnostics={"epoch": epoch, "step": total_steps, "lr": lr,
                                 "loss": loss, "grad_norms": {}},
                )
            net.backward(dlogits.astype(dtype))
            grads = net.grads()
            if any(not np.all(np.isfinite(g)) for g in grads.values()):
                raise TrainingDiverged(
                    f"non-finite gradients at epoch {epoch} step {total_steps}",
                    diagnostics={"epoch": epoch, "step": total_steps, "lr": lr,
                                 "loss": loss, "grad_norms": _grad_norms(net)},
                )
            adam_step(params, grads, state, lr)
            losses.append(loss)
            total_steps += 1

        val_dice = validation_dice(net, val_imgs, val_masks, cfg.batch_size)
        log_rows.append({"epoch": epoch, "step": total_steps,
                         "loss": float(np.mean(losses)), "val_dice": val_dice, "lr": lr})

        if val_dice > best_dice:
            best_dice = val_dice
            best_epoch = epoch
            since_improve = 0
            best_params = {k: v.copy() for k, v in params.items()}
            best_buffers = {k: v.copy() for k, v in net.buffers().items()}
            if out_dir is not None:
                save_checkpoint(net, f"{out_dir}/best.ckpt")
        else:
            since_improve += 1
            if since_improve % cfg.lr_patience == 0:
                lr *= cfg.lr_decay

        if out_dir is not None:
            tensors = {f"{k}.m": v for k, v in state.m.items()}
            tensors |= {f"{k}.v": v for k, v in state.v.items()}
            save_checkpoint(net, f"{out_dir}/last.ckpt", training_state={
                "epoch": epoch, "step": total_steps, "seed": cfg.seed, "lr": lr,
                "best_val_dice": best_dice, "best_epoch": best_epoch,
                "since_improve": since_improve, "adam_step": state.step_count,
                "log": log_rows, "tensors": tensors,
            })
            write_log_csv(f"{out_dir}/train_log.csv", log_rows)

        if since_improve > cfg.early_stop_patience:
            stopped_early = True
            break

    if best_params is not None:
        # leave the net at its best-validation state (resumed runs that never
        # improve again keep their last state; best.ckpt on disk stays correct)
        for k, v in net.params().items():
            v[...] = best_params[k]
        for k, v in net.buffers().items():
            v[...] = best_buffers[k]
    return FitResult(epochs_run=epoch, total_steps=total_steps, best_val_dice=best_dice,
                     best_epoch=best_epoch, stopped_early=stopped_early, log=log_rows)
