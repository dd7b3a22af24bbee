"""End-to-end segmentation pipeline.

Dual-stream encoders produce appearance and shape latents, each sampled
through the OU diffusion with a Girsanov weight (or by plain Gaussian
reparameterization when that component is off).  The shape latent drives a
small U-shaped segmentation net whose logits are refined by the flow and
discretized with Gumbel-Softmax during training; evaluation runs the
deterministic all-means path.  Closed-form variational updates supply the
KL penalties of the training loss.
"""

import math
import struct
import zlib
from contextlib import contextmanager
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from .data import FormatError, Sample, augment, dice_score
from .diffcore import (NonFiniteError, ShapeError, Tensor, backward, concat,
                       conv2d, zero_grad)
from .flows import FlowStack, flow_push
from .ncvi import (Hyperpriors, gaussian_kl_closed, kl_terms, mc_kl,
                   refresh_state, update_mu_rho)
from .sde import OuParams, sde_girsanov_sample_field
from .spatial import (dice_ce_loss_per_item, grad_sqnorm, gumbel_softmax,
                      total_loss)

# Toggle rows (nf_posterior, ncvi, sde_girsanov) for the five named variants.
VERSION_TOGGLES = {
    "ver1": (False, False, False),
    "ver2": (False, True, True),
    "ver3": (True, False, True),
    "ver4": (True, True, False),
    "ver5": (True, True, True),
}

# Log RN weights are compressed to a per-element mean and clamped to this
# band before exponentiation; raw field-summed weights are numerically
# degenerate (their exponentials collapse onto a single batch item).
RN_LOG_CLAMP = 5.0


@dataclass(frozen=True)
class ModelConfig:
    num_classes: int = 2
    image_size: tuple[int, int] = (64, 64)
    nf_posterior: bool = True
    ncvi: bool = True
    sde_girsanov: bool = True
    channels: int = 8
    flow_layers: int = 2
    flow_hidden: int = 16
    flow_kl_samples: int = 128
    sde_steps: int = 8
    sde_horizon: float = 1.0
    tau: float = 1.0
    lambda_bayes: float = 100.0
    learning_rate: float = 3e-4
    weight_decay: float = 1e-4
    epochs: int = 30
    batch_size: int = 8
    seed: int = 42
    early_stop_dice: float = 0.0
    augment: bool = False

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        h, w = self.image_size
        if h % 4 != 0 or w % 4 != 0:
            raise ValueError(
                f"image_size must be divisible by 4 (two pooling levels), got {(h, w)}")
        if self.sde_steps < 1 or self.sde_horizon <= 0.0:
            raise ValueError("sde_steps must be >= 1 and sde_horizon > 0")
        if self.tau <= 0.0:
            raise ValueError(f"tau must be positive, got {self.tau}")


def config_for_version(cfg: ModelConfig, version: str) -> ModelConfig:
    """The same config with toggles set to one of the five named variants."""
    if version not in VERSION_TOGGLES:
        raise ValueError(
            f"unknown version {version!r}; expected one of {sorted(VERSION_TOGGLES)}")
    nf, ncvi, sde = VERSION_TOGGLES[version]
    return replace(cfg, nf_posterior=nf, ncvi=ncvi, sde_girsanov=sde)


# -- parameterized blocks --------------------------------------------------------

def _bounded_log_var(t: Tensor) -> Tensor:
    # Smooth clamp of the log-variance head to (-10, 10).
    return (t * 0.1).tanh() * 10.0


class Conv:
    """3x3 same-padding convolution with bias."""

    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator,
                 scale: float = 1.0):
        std = scale / math.sqrt(in_ch * 9)
        self.w = Tensor(rng.normal(0.0, std, (out_ch, in_ch, 3, 3)),
                        requires_grad=True)
        self.b = Tensor(np.zeros(out_ch), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.w) + self.b.reshape((1, -1, 1, 1))

    def named_params(self, prefix: str) -> list[tuple[str, Tensor]]:
        return [(f"{prefix}.w", self.w), (f"{prefix}.b", self.b)]


def avg_pool2(x: Tensor) -> Tensor:
    b, c, h, w = x.shape
    if h % 2 != 0 or w % 2 != 0:
        raise ShapeError(f"avg_pool2 needs even spatial dims, got {(h, w)}")
    return x.reshape((b, c, h // 2, 2, w // 2, 2)).mean(axis=(3, 5))


def upsample2(x: Tensor) -> Tensor:
    b, c, h, w = x.shape
    return (x.reshape((b, c, h, 1, w, 1))
            .broadcast((b, c, h, 2, w, 2))
            .reshape((b, c, 2 * h, 2 * w)))


class ResEncoder:
    """Full-resolution encoder: stem, two residual blocks, mean/log-var heads."""

    def __init__(self, in_ch: int, ch: int, out_ch: int, rng: np.random.Generator):
        self.stem = Conv(in_ch, ch, rng)
        self.blocks = [(Conv(ch, ch, rng), Conv(ch, ch, rng)) for _ in range(2)]
        self.head_mu = Conv(ch, out_ch, rng, scale=0.1)
        self.head_lv = Conv(ch, out_ch, rng, scale=0.1)

    def __call__(self, x: Tensor) -> tuple[Tensor, Tensor]:
        h = self.stem(x).tanh()
        for c1, c2 in self.blocks:
            h = (h + c2(c1(h).tanh())).tanh()
        return self.head_mu(h), _bounded_log_var(self.head_lv(h))

    def named_params(self, prefix: str) -> list[tuple[str, Tensor]]:
        out = self.stem.named_params(f"{prefix}.stem")
        for i, (c1, c2) in enumerate(self.blocks):
            out += c1.named_params(f"{prefix}.block{i}a")
            out += c2.named_params(f"{prefix}.block{i}b")
        out += self.head_mu.named_params(f"{prefix}.head_mu")
        out += self.head_lv.named_params(f"{prefix}.head_lv")
        return out


class UNet:
    """3-level U-shaped net with skip connections and per-class heads."""

    def __init__(self, in_ch: int, ch: int, out_ch: int, rng: np.random.Generator):
        self.enc0a = Conv(in_ch, ch, rng)
        self.enc0b = Conv(ch, ch, rng)
        self.enc1a = Conv(ch, 2 * ch, rng)
        self.enc1b = Conv(2 * ch, 2 * ch, rng)
        self.enc2a = Conv(2 * ch, 4 * ch, rng)
        self.enc2b = Conv(4 * ch, 4 * ch, rng)
        self.dec1a = Conv(6 * ch, 2 * ch, rng)
        self.dec1b = Conv(2 * ch, 2 * ch, rng)
        self.dec0a = Conv(3 * ch, ch, rng)
        self.dec0b = Conv(ch, ch, rng)
        self.head_mu = Conv(ch, out_ch, rng, scale=0.1)
        self.head_lv = Conv(ch, out_ch, rng, scale=0.1)

    def __call__(self, x: Tensor) -> tuple[Tensor, Tensor]:
        f0 = self.enc0b(self.enc0a(x).tanh()).tanh()
        f1 = self.enc1b(self.enc1a(avg_pool2(f0)).tanh()).tanh()
        f2 = self.enc2b(self.enc2a(avg_pool2(f1)).tanh()).tanh()
        h = concat([upsample2(f2), f1], axis=1)
        h = self.dec1b(self.dec1a(h).tanh()).tanh()
        h = concat([upsample2(h), f0], axis=1)
        h = self.dec0b(self.dec0a(h).tanh()).tanh()
        return self.head_mu(h), _bounded_log_var(self.head_lv(h))

    def named_params(self, prefix: str) -> list[tuple[str, Tensor]]:
        out: list[tuple[str, Tensor]] = []
        for name in ("enc0a", "enc0b", "enc1a", "enc1b", "enc2a", "enc2b",
                     "dec1a", "dec1b", "dec0a", "dec0b", "head_mu", "head_lv"):
            out += getattr(self, name).named_params(f"{prefix}.{name}")
        return out


class Model:
    """All trainable state plus the config and hyperpriors that shaped it."""

    def __init__(self, cfg: ModelConfig, hp: Hyperpriors | None = None,
                 rng: np.random.Generator | None = None):
        if rng is None:
            rng = np.random.default_rng(cfg.seed)
        self.cfg = cfg
        self.hp = hp if hp is not None else Hyperpriors()
        self.appearance = ResEncoder(1, cfg.channels, 1, rng)
        self.shape_enc = ResEncoder(1, cfg.channels, 1, rng)
        self.seg = UNet(3, cfg.channels, cfg.num_classes, rng)
        self.flow = (FlowStack.create(cfg.num_classes, n_maf=cfg.flow_layers,
                                      hidden=cfg.flow_hidden, rng=rng)
                     if cfg.nf_posterior else None)

    def named_params(self) -> list[tuple[str, Tensor]]:
        out = self.appearance.named_params("appearance")
        out += self.shape_enc.named_params("shape")
        out += self.seg.named_params("seg")
        if self.flow is not None:
            for i, layer in enumerate(self.flow.layers):
                for j, p in enumerate(layer.params()):
                    out.append((f"flow.layer{i}.p{j}", p))
        return out

    def params(self) -> list[Tensor]:
        return [p for _, p in self.named_params()]


# -- forward pass ----------------------------------------------------------------

@dataclass
class PipelineOutputs:
    y_hat: Tensor
    kl_y: Tensor
    kl_z: Tensor
    kl_x: Tensor
    kl_m: Tensor
    mu_rho: np.ndarray | None
    mu_omega: np.ndarray | None
    mu_upsilon: np.ndarray | None
    log_rn_weights: list[float]
    phases: dict[str, bool]
    noise_latent: np.ndarray | None = None


@contextmanager
def _phase(name: str):
    try:
        yield
    except NonFiniteError as exc:
        raise NonFiniteError(f"[phase: {name}] {exc}") from exc


def _sample_latent(mu: Tensor, sigma: Tensor, cfg: ModelConfig,
                   rng: np.random.Generator) -> tuple[Tensor, np.ndarray | None]:
    """Draw one latent field; returns (sample, per-item mean log RN weight)."""
    if cfg.sde_girsanov:
        params = OuParams(mu=mu, sigma=sigma, horizon=cfg.sde_horizon,
                          n_steps=cfg.sde_steps)
        z, weight_field = sde_girsanov_sample_field(params, rng)
        per_item = weight_field.mean(axis=tuple(range(1, weight_field.ndim)))
        return z, per_item
    eps = rng.standard_normal(mu.shape)
    return mu + sigma * Tensor(eps), None


def _as_images(images, cfg: ModelConfig) -> Tensor:
    t = images if isinstance(images, Tensor) else Tensor(np.asarray(images))
    if t.ndim != 4 or t.shape[1] != 1 or t.shape[2:] != tuple(cfg.image_size):
        raise ShapeError(
            f"expected images of shape (B, 1, {cfg.image_size[0]}, "
            f"{cfg.image_size[1]}), got {t.shape}")
    return t


def forward(images, model: Model, mode: str = "train",
            rng: np.random.Generator | None = None) -> PipelineOutputs:
    """One pass of the eight-phase inference procedure.

    Train mode samples every latent and relaxes the prediction with
    Gumbel-Softmax; eval mode is the deterministic all-means path ending in
    softmax(mu_z).
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    train = mode == "train"
    if train and rng is None:
        raise ValueError("train mode requires an rng")
    cfg, hp = model.cfg, model.hp
    images = _as_images(images, cfg)
    b = images.shape[0]
    k = cfg.num_classes

    phases = {
        "sde_sampling": train and cfg.sde_girsanov,
        "gaussian_sampling": train and not cfg.sde_girsanov,
        "noise_latent": train and cfg.ncvi,
        "flow_refinement": train and cfg.nf_posterior,
        "gumbel_softmax": train,
        "eval_mean_path": not train,
        "ncvi_updates": cfg.ncvi,
        "gaussian_kl_fallback": not cfg.ncvi,
    }
    log_w = np.zeros(b)

    with _phase("appearance encoding"):
        mu_m, lv_m = model.appearance(images)
        sigma_m = (lv_m * 0.5).exp()
        if train:
            m, w = _sample_latent(mu_m, sigma_m, cfg, rng)
            if w is not None:
                log_w = log_w + w
        else:
            m = mu_m

    with _phase("shape encoding"):
        mu_x, lv_x = model.shape_enc(images)
        sigma_x = (lv_x * 0.5).exp()
        if train:
            x, w = _sample_latent(mu_x, sigma_x, cfg, rng)
            if w is not None:
                log_w = log_w + w
        else:
            x = mu_x

    mu_rho = None
    noise_latent = None
    with _phase("observation likelihood"):
        r = images - (x + m)
        if cfg.ncvi:
            mu_rho = update_mu_rho(r.data, hp)
            if train:
                # Diagnostic noise latent around m with std sqrt(1 / mu_rho);
                # it does not feed later phases, so it samples detached.
                sigma_n = Tensor(np.sqrt(1.0 / mu_rho))
                n_lat, _ = _sample_latent(m.detach(), sigma_n, cfg, rng)
                noise_latent = n_lat.data

    with _phase("segmentation latent"):
        x_tiled = concat([x, x, x], axis=1)
        mu_z, lv_z = model.seg(x_tiled)
        sigma_z = (lv_z * 0.5).exp()
        if train:
            z, w = _sample_latent(mu_z, sigma_z, cfg, rng)
            if w is not None:
                log_w = log_w + w

    with _phase("prediction"):
        if train:
            logits = z
            if cfg.nf_posterior:
                h, wd = cfg.image_size
                rows = z.transpose((0, 2, 3, 1)).reshape((b * h * wd, k))
                refined, _ = flow_push(model.flow, rows)
                logits = refined.reshape((b, h, wd, k)).transpose((0, 3, 1, 2))
            y_hat = gumbel_softmax(logits, cfg.tau, rng)
        else:
            y_hat = mu_z.softmax(axis=1)

    with _phase("variational updates"):
        if cfg.ncvi:
            # The closed-form updates read mu_z as a class-responsibility
            # field, so the logits pass through a softmax first.
            resp = mu_z.softmax(axis=1)
            gsq_x = grad_sqnorm(mu_x)
            gsq_z = grad_sqnorm(mu_z)
            state = refresh_state(r.data, resp.data, gsq_x.data, gsq_z.data,
                                  sigma_x.data, sigma_z.data, hp)
            kl_y, kl_z, kl_x, kl_m = kl_terms(
                state, r, gsq_x, gsq_z, sigma_x, sigma_z, resp, mu_m, sigma_m, hp)
            mu_omega, mu_upsilon = state.mu_omega, state.mu_upsilon
        else:
            # Plain-Gaussian baseline: the segmentation posterior is the
            # only latent with a prior penalty.  Penalizing the appearance
            # and shape fields too at this loss weight drives their
            # signal-to-noise to zero and the model degenerates into an
            # unconditional shape prior.
            kl_y = Tensor(0.0)
            kl_z = gaussian_kl_closed(mu_z, lv_z)
            kl_x = Tensor(0.0)
            kl_m = Tensor(0.0)
            mu_omega = mu_upsilon = None

    return PipelineOutputs(
        y_hat=y_hat, kl_y=kl_y, kl_z=kl_z, kl_x=kl_x, kl_m=kl_m,
        mu_rho=mu_rho, mu_omega=mu_omega, mu_upsilon=mu_upsilon,
        log_rn_weights=[float(v) for v in log_w], phases=phases,
        noise_latent=noise_latent)


# -- optimizer ---------------------------------------------------------------------

class Adam:
    """Adam with L2 weight decay folded into the gradient."""

    def __init__(self, named_params: list[tuple[str, Tensor]], lr: float,
                 weight_decay: float = 0.0, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.named = list(named_params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.named}
        self.v = {name: np.zeros_like(p.data) for name, p in self.named}

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in self.named:
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            update = (self.m[name] / bc1) / (np.sqrt(self.v[name] / bc2) + self.eps)
            p.assign(p.data - self.lr * update)

    def state(self) -> dict:
        return {"t": self.t,
                "m": {k: v.copy() for k, v in self.m.items()},
                "v": {k: v.copy() for k, v in self.v.items()}}

    def load_state(self, state: dict) -> None:
        self.t = int(state["t"])
        for name, _ in self.named:
            if name in state["m"]:
                self.m[name] = state["m"][name].copy()
                self.v[name] = state["v"][name].copy()


# -- training -----------------------------------------------------------------------

def batch_tensors(samples: list[Sample], num_classes: int) -> tuple[Tensor, Tensor]:
    """Stack samples into (B,1,H,W) images and (B,K,H,W) one-hot targets."""
    images = np.stack([s.image for s in samples])[:, None, :, :]
    masks = np.stack([s.mask for s in samples])
    if masks.max(initial=0) >= num_classes:
        raise ValueError(
            f"mask label {masks.max()} >= num_classes {num_classes}")
    onehot = np.zeros((len(samples), num_classes) + masks.shape[1:])
    for c in range(num_classes):
        onehot[:, c][masks == c] = 1.0
    return Tensor(images), Tensor(onehot)


def rn_weights(log_weights: list[float]) -> np.ndarray:
    """Clamped, batch-self-normalized importance weights (mean exactly 1)."""
    w = np.exp(np.clip(np.asarray(log_weights, dtype=float),
                       -RN_LOG_CLAMP, RN_LOG_CLAMP))
    return w / w.mean()


def train_step(batch: list[Sample], model: Model, opt: Adam,
               rng: np.random.Generator) -> tuple[float, dict]:
    """Forward, loss, backward, one optimizer step; returns (loss, term breakdown)."""
    cfg = model.cfg
    images, targets = batch_tensors(batch, cfg.num_classes)
    b, _, h, w = images.shape
    terms: dict[str, float] = {}
    try:
        out = forward(images, model, "train", rng)
        per_item = dice_ce_loss_per_item(out.y_hat, targets)
        if cfg.sde_girsanov:
            weights = rn_weights(out.log_rn_weights)
            recon = (per_item * Tensor(weights)).mean()
        else:
            recon = per_item.mean()
        terms["recon"] = recon.data.item()
        for key, t in (("kl_y", out.kl_y), ("kl_z", out.kl_z),
                       ("kl_x", out.kl_x), ("kl_m", out.kl_m)):
            terms[key] = t.data.item()
        n_elems = b * h * w
        loss = total_loss(recon, [out.kl_y, out.kl_z, out.kl_x, out.kl_m],
                          cfg.lambda_bayes, n_elems)
        if cfg.nf_posterior and cfg.ncvi:
            # The flow KL is already a per-element quantity, so it enters at
            # the same normalized scale as the summed field KLs.
            flow_kl = mc_kl(model.flow, cfg.flow_kl_samples, rng)
            terms["flow_kl"] = flow_kl.data.item()
            loss = loss + flow_kl * cfg.lambda_bayes
        terms["loss"] = loss.data.item()
        backward(loss)
    except NonFiniteError as exc:
        raise NonFiniteError(
            f"{exc}; terms so far: "
            + ", ".join(f"{k}={v:.6g}" for k, v in terms.items())) from exc
    opt.step()
    zero_grad(model.params())
    return terms["loss"], terms


def predict(image, model: Model) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic labels and per-class confidence for one image."""
    arr = image.image if isinstance(image, Sample) else np.asarray(image)
    if arr.shape != tuple(model.cfg.image_size):
        raise ShapeError(
            f"image shape {arr.shape} does not match the trained size "
            f"{tuple(model.cfg.image_size)}")
    out = forward(arr[None, None, :, :], model, "eval")
    conf = out.y_hat.data[0]
    return conf.argmax(axis=0), conf


def evaluate(samples: list[Sample], model: Model) -> float:
    """Mean Dice over samples, averaged over the non-background classes."""
    if not samples:
        raise ValueError("evaluate needs a nonempty dataset")
    cfg = model.cfg
    scores = []
    bs = max(cfg.batch_size, 1)
    for i in range(0, len(samples), bs):
        chunk = samples[i:i + bs]
        images, _ = batch_tensors(chunk, cfg.num_classes)
        out = forward(images, model, "eval")
        labels = out.y_hat.data.argmax(axis=1)
        for pred, s in zip(labels, chunk):
            per_class = [dice_score(pred, s.mask, k)
                         for k in range(1, cfg.num_classes)]
            scores.append(float(np.mean(per_class)))
    return float(np.mean(scores))


def _epoch_rngs(seed: int, epoch: int) -> tuple[np.random.Generator, ...]:
    children = np.random.SeedSequence(seed, spawn_key=(epoch,)).spawn(3)
    return tuple(np.random.default_rng(c) for c in children)


def fit(train_set: list[Sample], val_set: list[Sample], cfg: ModelConfig,
        out_dir: str | Path | None = None, resume: str | Path | None = None,
        hp: Hyperpriors | None = None, progress=None
        ) -> tuple[Model, list[dict]]:
    """Shuffled minibatch epochs with per-epoch derived RNG streams.

    Checkpoints go to out_dir (ckpt-last every epoch, ckpt-best at the best
    validation Dice); the returned model carries the best parameters.
    Resuming restores parameters, optimizer moments, and epoch numbering,
    reproducing the unbroken trajectory because every stream is re-derived
    from (seed, epoch).
    """
    if not train_set or not val_set:
        raise ValueError("fit needs nonempty train and validation sets")
    start_epoch = 0
    if resume is not None:
        model, opt_state, start_epoch = checkpoint_load(resume)
        # Run length may be extended by the caller; everything that shapes
        # the trajectory (seed, sizes, rates) comes from the checkpoint.
        model.cfg = replace(model.cfg, epochs=cfg.epochs)
        opt = Adam(model.named_params(), model.cfg.learning_rate,
                   model.cfg.weight_decay)
        if opt_state is not None:
            opt.load_state(opt_state)
        cfg = model.cfg
    else:
        model = Model(cfg, hp=hp)
        opt = Adam(model.named_params(), cfg.learning_rate, cfg.weight_decay)

    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)

    decay_at = max(1, int(0.8 * cfg.epochs))
    history: list[dict] = []
    best_dice = -1.0
    best_params: dict[str, np.ndarray] | None = None

    for epoch in range(start_epoch, cfg.epochs):
        shuffle_rng, step_rng, aug_rng = _epoch_rngs(cfg.seed, epoch)
        opt.lr = cfg.learning_rate * (0.1 if epoch >= decay_at else 1.0)
        order = shuffle_rng.permutation(len(train_set))
        sums: dict[str, float] = {}
        n_steps = 0
        for i in range(0, len(order), cfg.batch_size):
            batch = [train_set[j] for j in order[i:i + cfg.batch_size]]
            if cfg.augment:
                batch = [augment(s, aug_rng) for s in batch]
            _, terms = train_step(batch, model, opt, step_rng)
            for key, val in terms.items():
                sums[key] = sums.get(key, 0.0) + val
            n_steps += 1

        val_dice = evaluate(val_set, model)
        row = {"epoch": epoch, "loss": sums["loss"] / n_steps,
               "dice_val": val_dice,
               "kl_y": sums["kl_y"] / n_steps, "kl_z": sums["kl_z"] / n_steps,
               "kl_x": sums["kl_x"] / n_steps, "kl_m": sums["kl_m"] / n_steps}
        history.append(row)
        if out_path is not None:
            checkpoint_save(model, out_path / "ckpt-last.dbfc", opt=opt,
                            epoch=epoch + 1)
        if val_dice > best_dice:
            best_dice = val_dice
            best_params = {name: p.data.copy()
                           for name, p in model.named_params()}
            if out_path is not None:
                checkpoint_save(model, out_path / "ckpt-best.dbfc", opt=opt,
                                epoch=epoch + 1)
        if progress is not None:
            progress(row)
        if cfg.early_stop_dice > 0.0 and val_dice >= cfg.early_stop_dice:
            break

    if best_params is not None:
        for name, p in model.named_params():
            p.assign(best_params[name])
    return model, history


# -- checkpoints ------------------------------------------------------------------------

_CKPT_MAGIC = b"DBFC"
_CKPT_VERSION = 1
_TAG_INT, _TAG_FLOAT, _TAG_BOOL, _TAG_PAIR = 0, 1, 2, 3


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.raw):
            raise FormatError(
                f"truncated checkpoint: wanted {size} bytes at offset "
                f"{self.pos}, have {len(self.raw) - self.pos}")
        vals = struct.unpack_from(fmt, self.raw, self.pos)
        self.pos += size
        return vals if len(vals) > 1 else vals[0]

    def take_bytes(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise FormatError(
                f"truncated checkpoint: wanted {n} bytes at offset "
                f"{self.pos}, have {len(self.raw) - self.pos}")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out


def _config_items(cfg: ModelConfig, hp: Hyperpriors) -> dict:
    items = {f.name: getattr(cfg, f.name) for f in fields(cfg)}
    items.update({f"hp.{f.name}": getattr(hp, f.name) for f in fields(hp)})
    return items


def _pack_config(cfg: ModelConfig, hp: Hyperpriors) -> bytes:
    items = _config_items(cfg, hp)
    buf = bytearray(struct.pack("<H", len(items)))
    for name in sorted(items):
        value = items[name]
        encoded = name.encode("utf-8")
        buf += struct.pack("<H", len(encoded)) + encoded
        if isinstance(value, bool):
            buf += struct.pack("<BB", _TAG_BOOL, int(value))
        elif isinstance(value, int):
            buf += struct.pack("<Bq", _TAG_INT, value)
        elif isinstance(value, float):
            buf += struct.pack("<Bd", _TAG_FLOAT, value)
        elif isinstance(value, tuple) and len(value) == 2:
            buf += struct.pack("<Bqq", _TAG_PAIR, int(value[0]), int(value[1]))
        else:
            raise ValueError(f"cannot serialize config field {name}={value!r}")
    return bytes(buf)


def _unpack_config(reader: _Reader) -> tuple[ModelConfig, Hyperpriors]:
    count = reader.take("<H")
    items = {}
    for _ in range(count):
        name_len = reader.take("<H")
        name = reader.take_bytes(name_len).decode("utf-8")
        tag = reader.take("<B")
        if tag == _TAG_BOOL:
            items[name] = bool(reader.take("<B"))
        elif tag == _TAG_INT:
            items[name] = int(reader.take("<q"))
        elif tag == _TAG_FLOAT:
            items[name] = float(reader.take("<d"))
        elif tag == _TAG_PAIR:
            items[name] = tuple(reader.take("<qq"))
        else:
            raise FormatError(f"unknown config field tag {tag} for {name!r}")
    cfg_kwargs = {k: v for k, v in items.items() if not k.startswith("hp.")}
    hp_kwargs = {k[3:]: v for k, v in items.items() if k.startswith("hp.")}
    try:
        return ModelConfig(**cfg_kwargs), Hyperpriors(**hp_kwargs)
    except TypeError as exc:
        raise FormatError(f"config block does not match this build: {exc}") from exc


def _pack_section(name: str, arr: np.ndarray) -> bytes:
    encoded = name.encode("utf-8")
    arr = np.ascontiguousarray(arr, dtype="<f8")
    buf = struct.pack("<H", len(encoded)) + encoded
    buf += struct.pack("<B", arr.ndim)
    buf += struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b""
    return buf + arr.tobytes()


def _unpack_section(reader: _Reader) -> tuple[str, np.ndarray]:
    name_len = reader.take("<H")
    name = reader.take_bytes(name_len).decode("utf-8")
    ndim = reader.take("<B")
    shape = tuple(struct.unpack("<" + "I" * ndim, reader.take_bytes(4 * ndim)))
    count = int(np.prod(shape)) if shape else 1
    data = np.frombuffer(reader.take_bytes(count * 8), dtype="<f8")
    return name, data.reshape(shape).copy()


def checkpoint_save(model: Model, path: str | Path, opt: Adam | None = None,
                    epoch: int = 0) -> None:
    """Self-describing snapshot: config block, named f64 sections, CRC32."""
    sections: list[tuple[str, np.ndarray]] = list(
        (name, p.data) for name, p in model.named_params())
    if opt is not None:
        for name in sorted(opt.m):
            sections.append((f"opt.m.{name}", opt.m[name]))
            sections.append((f"opt.v.{name}", opt.v[name]))
        sections.append(("opt.t", np.array(float(opt.t))))
    sections.append(("epoch", np.array(float(epoch))))

    buf = bytearray(_CKPT_MAGIC)
    buf += struct.pack("<H", _CKPT_VERSION)
    buf += _pack_config(model.cfg, model.hp)
    buf += struct.pack("<I", len(sections))
    for name, arr in sections:
        buf += _pack_section(name, arr)
    buf += struct.pack("<I", zlib.crc32(bytes(buf)))
    Path(path).write_bytes(bytes(buf))


def checkpoint_load(path: str | Path, expect_num_classes: int | None = None
                    ) -> tuple[Model, dict | None, int]:
    """Rebuild (model, optimizer state, epoch) from a checkpoint file."""
    raw = Path(path).read_bytes()
    if len(raw) < len(_CKPT_MAGIC) + 2 + 4:
        raise FormatError(f"file too short ({len(raw)} bytes): {path}")
    if raw[:4] != _CKPT_MAGIC:
        raise FormatError(
            f"bad magic: expected {_CKPT_MAGIC!r}, found {raw[:4]!r}")
    (stored_crc,) = struct.unpack_from("<I", raw, len(raw) - 4)
    actual_crc = zlib.crc32(raw[:-4])
    if stored_crc != actual_crc:
        raise FormatError(
            f"checksum mismatch: stored {stored_crc:#010x}, "
            f"computed {actual_crc:#010x}")
    reader = _Reader(raw[:-4])
    reader.take_bytes(4)
    version = reader.take("<H")
    if version != _CKPT_VERSION:
        raise FormatError(
            f"unsupported version: expected {_CKPT_VERSION}, found {version}")
    cfg, hp = _unpack_config(reader)
    if expect_num_classes is not None and cfg.num_classes != expect_num_classes:
        raise FormatError(
            f"checkpoint has num_classes={cfg.num_classes}, "
            f"expected {expect_num_classes}")
    n_sections = reader.take("<I")
    arrays: dict[str, np.ndarray] = {}
    for _ in range(n_sections):
        name, arr = _unpack_section(reader)
        arrays[name] = arr
    if reader.pos != len(reader.raw):
        raise FormatError(
            f"{len(reader.raw) - reader.pos} trailing bytes after sections")

    model = Model(cfg, hp=hp)
    names = [name for name, _ in model.named_params()]
    missing = [n for n in names if n not in arrays]
    if missing:
        raise FormatError(f"checkpoint is missing parameters: {missing[:4]}")
    for name, p in model.named_params():
        arr = arrays.pop(name)
        if arr.shape != p.data.shape:
            raise FormatError(
                f"parameter {name}: stored shape {arr.shape} != model shape "
                f"{p.data.shape}")
        p.assign(arr)

    epoch = int(arrays.pop("epoch", np.array(0.0)).item())
    opt_state = None
    if "opt.t" in arrays:
        opt_state = {"t": int(arrays.pop("opt.t").item()),
                     "m": {}, "v": {}}
        for key in list(arrays):
            if key.startswith("opt.m."):
                opt_state["m"][key[6:]] = arrays.pop(key)
            elif key.startswith("opt.v."):
                opt_state["v"][key[6:]] = arrays.pop(key)
    if arrays:
        raise FormatError(f"unrecognized sections: {sorted(arrays)[:4]}")
    return model, opt_state, epoch
