"""Loss, optimizer, LR schedule, augmentation and the training loop.

Everything is deterministic given (seed, epoch, index): sample order comes
from a per-epoch generator and each sample's augmentation draws come from
its own child generator, so prefetching or re-running cannot change
results.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import tensor as T
from .tensor import Tensor

CLAMP = 1e-7


def bce_loss(pred, target):
    """Mean binary cross-entropy over every pixel of the batch.

    Predictions are clamped to [1e-7, 1-1e-7] before the logs; targets must
    be exactly 0/1.
    """
    if pred.shape != target.shape:
        raise T.ShapeError(f"bce_loss: shape mismatch {pred.shape} vs {target.shape}")
    tdata = target.data if isinstance(target, Tensor) else np.asarray(target)
    if not np.all((tdata == 0) | (tdata == 1)):
        raise ValueError("bce_loss: targets must be binary 0/1")
    if not isinstance(target, Tensor):
        target = Tensor(tdata.astype(pred.dtype))
    p = T.clamp(pred, CLAMP, 1.0 - CLAMP)
    return -T.tmean(target * T.tlog(p) + (1.0 - target) * T.tlog(1.0 - p))


def cosine_lr(epoch, epochs_total, base_lr, eta_min=0.0):
    """Half-cosine decay from base_lr (epoch 0) to eta_min (final epoch)."""
    if not 0 <= epoch <= epochs_total:
        raise ValueError(f"cosine_lr: epoch {epoch} outside [0, {epochs_total}]")
    return eta_min + (base_lr - eta_min) * (1.0 + math.cos(math.pi * epoch / epochs_total)) / 2.0


class Adam:
    """Classic Adam with L2-coupled weight decay (decay added to the
    gradient before the moment updates)."""

    def __init__(self, named_params, lr=1e-4, weight_decay=1e-5,
                 beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = dict(named_params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self):
        """Apply one update from the .grad fields populated by backward()."""
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad.data
            if not np.all(np.isfinite(g)):
                raise T.NumericsError(f"adam_step: non-finite gradient for {name!r}")
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            mhat = m / bc1
            vhat = v / bc2
            p.data = p.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)
            p.grad = None


def _rotate_pair(image, mask, angle, fov=None):
    # bilinear for the image, nearest for label maps, reflected borders
    img = np.stack([
        ndimage.rotate(ch, angle, reshape=False, order=1, mode="reflect")
        for ch in image
    ])
    msk = ndimage.rotate(mask, angle, reshape=False, order=0, mode="reflect")
    out_fov = None
    if fov is not None:
        out_fov = ndimage.rotate(fov, angle, reshape=False, order=0, mode="reflect")
    return img, msk, out_fov


def augment(image, mask, rng, fov=None):
    """Random horizontal/vertical flips (p=0.5 each) and a random rotation,
    applied identically to image, mask and optional fov.

    image: [3, H, W] float; mask/fov: [H, W] binary.
    """
    if image.shape[1:] != mask.shape:
        raise ValueError(f"augment: image {image.shape} and mask {mask.shape} disagree")
    if rng.uniform() < 0.5:
        image = image[:, :, ::-1]
        mask = mask[:, ::-1]
        fov = fov[:, ::-1] if fov is not None else None
    if rng.uniform() < 0.5:
        image = image[:, ::-1, :]
        mask = mask[::-1, :]
        fov = fov[::-1, :] if fov is not None else None
    angle = rng.uniform(0.0, 360.0)
    image, mask, fov = _rotate_pair(np.ascontiguousarray(image),
                                    np.ascontiguousarray(mask), angle, fov)
    image = np.clip(image, 0.0, 1.0)
    mask = (mask > 0.5).astype(np.float32)
    if fov is not None:
        fov = (fov > 0.5).astype(np.float32)
    return image, mask, fov


def random_crop(image, mask, size, rng, fov=None):
    """Aligned random crop to (size, size)."""
    _, h, w = image.shape
    if h < size or w < size:
        raise ValueError(f"random_crop: image ({h},{w}) smaller than crop {size}")
    top = int(rng.integers(0, h - size + 1))
    left = int(rng.integers(0, w - size + 1))
    img = image[:, top:top + size, left:left + size]
    msk = mask[top:top + size, left:left + size]
    fv = fov[top:top + size, left:left + size] if fov is not None else None
    return img, msk, fv


@dataclass
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-5
    epochs: int = 40
    batch: int = 4
    seed: int = 42
    crop: int = 64
    threshold: float = 0.5
    eta_min: float = 0.0
    augment: bool = True
    loss_fov: bool = False  # restrict the loss to fov pixels when present


@dataclass
class TrainState:
    """Step/epoch counters plus the scalars a checkpoint needs to carry."""

    step: int = 0
    epoch: int = 0
    base_lr: float = 1e-4
    weight_decay: float = 1e-5
    epochs_total: int = 40
    seed: int = 42
    best_val_loss: float = math.inf
    history: list = field(default_factory=list)  # per-epoch mean training loss


def _sample_rng(seed, epoch, index):
    return np.random.default_rng(np.random.SeedSequence([seed, epoch, index]))


def fit(model, dataset, tc: TrainConfig, val_dataset=None, max_steps=None,
        on_checkpoint=None, log=None):
    """Train `model` on a list of (image [3,H,W], mask [H,W], fov?) arrays.

    Returns the final TrainState; `on_checkpoint(model, state)` fires
    whenever the validation loss improves (or each epoch without a
    validation set).
    """
    if not dataset:
        raise ValueError("fit: dataset is empty")
    opt = Adam(model.named_parameters(), lr=tc.lr, weight_decay=tc.weight_decay)
    state = TrainState(base_lr=tc.lr, weight_decay=tc.weight_decay,
                       epochs_total=tc.epochs, seed=tc.seed)
    model.train(True)
    done = False
    for epoch in range(tc.epochs):
        state.epoch = epoch
        opt.lr = cosine_lr(epoch, tc.epochs, tc.lr, tc.eta_min)
        order = np.random.default_rng(
            np.random.SeedSequence([tc.seed, epoch])).permutation(len(dataset))
        epoch_losses = []
        for start in range(0, len(order), tc.batch):
            idxs = order[start:start + tc.batch]
            imgs, masks = [], []
            for i in idxs:
                image, mask = dataset[i][0], dataset[i][1]
                fov = dataset[i][2] if len(dataset[i]) > 2 else None
                srng = _sample_rng(tc.seed, epoch, int(i))
                if tc.augment:
                    image, mask, fov = augment(image, mask, srng, fov)
                image, mask, fov = random_crop(image, mask, tc.crop, srng, fov)
                imgs.append(image)
                masks.append(mask)
            batch_x = Tensor(np.stack(imgs).astype(model.dtype))
            batch_y = Tensor(np.stack(masks)[:, None].astype(model.dtype))
            T.reset_tape()
            probs = model(batch_x)
            loss = bce_loss(probs, batch_y)
            lval = loss.item()
            if not math.isfinite(lval):
                raise T.NumericsError(
                    f"fit: non-finite loss at epoch {epoch}, batch {start // tc.batch}")
            T.backward(loss)
            opt.step()
            state.step += 1
            epoch_losses.append(lval)
            if max_steps is not None and state.step >= max_steps:
                done = True
                break
        state.history.append(float(np.mean(epoch_losses)))
        if log:
            log(f"epoch {epoch + 1}/{tc.epochs} loss {state.history[-1]:.4f} "
                f"lr {opt.lr:.2e}")
        if val_dataset:
            vloss = validation_loss(model, val_dataset, tc)
            if vloss < state.best_val_loss:
                state.best_val_loss = vloss
                if on_checkpoint:
                    on_checkpoint(model, state)
        elif on_checkpoint:
            on_checkpoint(model, state)
        if done:
            break
    return state


def validation_loss(model, dataset, tc: TrainConfig):
    """Mean BCE over center crops of the validation samples."""
    model.eval()
    losses = []
    with T.no_grad():
        for sample in dataset:
            image, mask = sample[0], sample[1]
            _, h, w = image.shape
            top, left = (h - tc.crop) // 2, (w - tc.crop) // 2
            img = image[:, top:top + tc.crop, left:left + tc.crop]
            msk = mask[top:top + tc.crop, left:left + tc.crop]
            probs = model(Tensor(img[None].astype(model.dtype)))
            losses.append(bce_loss(probs, Tensor(msk[None, None].astype(model.dtype))).item())
    model.train(True)
    return float(np.mean(losses))
