"""Adversarial training: losses, schedules, the Ac-CycleGAN loop, sweeps.

The objective combines the least-squares adversarial terms of both domain
directions, L1 cycle and identity terms over (image, label) pairs, and the
auxiliary classification cross-entropies of both discriminators:

    total = adv_ST + adv_TS + lambda_cyc * cyc + lambda_identity * identity
            + class_DT + class_DS

Batch size is 1: each generator step consumes one source pair and one
labeled target pair; the discriminators are updated on every second step.
One epoch is one step per labeled target-training sample. The discriminator
learning rate decays linearly to zero after ``decay_start_epoch``; the
generator rate stays constant unless ``decay_generator_lr`` is set.
"""

from __future__ import annotations

import csv
import itertools
import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .data import (
    DatasetBundle,
    MaskParams,
    SplitSpec,
    compute_normalization,
    normalize_bundle,
    sample_mask,
    split_holdout,
)
from .errors import NumericalError
from .models import (
    build_baseline_classifier,
    build_discriminator,
    build_generator,
    images_to_tensor,
    save_checkpoint,
)

RUNLOG_NAME = "runlog.csv"
RUNLOG_COLUMNS = [
    "epoch",
    "adv_st",
    "adv_ts",
    "cyc",
    "identity",
    "class_dt",
    "class_ds",
    "total",
    "lr_g",
    "lr_d",
    "acc_source_train",
    "acc_source_test",
    "acc_target_train",
    "acc_target_test",
]

_SAMPLER_STREAM = 101
_AUGMENT_STREAM = 202


@dataclass
class TrainConfig:
    """Hyperparameters of one Ac-CycleGAN run."""

    lambda_cyc: float = 10.0
    lambda_identity: float = 5.0
    lr_initial: float = 0.0002
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    batch_size: int = 1
    epochs: int = 200
    decay_start_epoch: int = 100
    d_update_period: int = 2  # one discriminator step per two generator steps
    labeled_fraction: float = 0.8
    seed: int = 0
    width_mult: float = 1.0
    n_res_blocks: int = 9
    label_tap: str = "image"
    steps_per_epoch: int | None = None  # default: len(target_train)
    augment_mode: str = "disc-real"  # where masking applies: disc-real | disc-both | off
    mask: MaskParams = field(default_factory=MaskParams)
    decay_generator_lr: bool = False
    checkpoint_interval: int = 0  # 0: final epoch only
    eval_interval: int = 1

    def validate(self) -> None:
        if self.lambda_cyc < 0 or self.lambda_identity < 0:
            raise ValueError("loss weights must be >= 0")
        if self.lr_initial <= 0:
            raise ValueError("lr_initial must be positive")
        if self.batch_size != 1:
            raise ValueError("the training procedure is defined for batch size 1")
        if not 0 < self.decay_start_epoch < self.epochs:
            raise ValueError("need 0 < decay_start_epoch < epochs")
        if self.d_update_period != 2:
            raise ValueError("discriminators are updated once per two generator steps")
        if not 0.0 < self.labeled_fraction < 1.0:
            raise ValueError("labeled_fraction must be in (0, 1)")
        if self.augment_mode not in ("disc-real", "disc-both", "off"):
            raise ValueError(f"unknown augment_mode {self.augment_mode!r}")
        if self.steps_per_epoch is not None and self.steps_per_epoch < 1:
            raise ValueError("steps_per_epoch must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if isinstance(d.get("mask"), dict):
            d["mask"] = MaskParams(**d["mask"])
        return cls(**d)


@dataclass
class BaselineConfig:
    """Hyperparameters of the non-adaptation baseline classifier."""

    epochs: int = 60
    batch_size: int = 32
    lr: float = 0.0002
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    seed: int = 0
    width_mult: float = 1.0
    augment: bool = True
    mask: MaskParams = field(default_factory=MaskParams)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "BaselineConfig":
        d = dict(d)
        if isinstance(d.get("mask"), dict):
            d["mask"] = MaskParams(**d["mask"])
        return cls(**d)


@dataclass
class LossReport:
    """Per-step (or per-epoch mean) objective components."""

    adv_st: float
    adv_ts: float
    cyc: float
    identity: float
    class_dt: float
    class_ds: float
    total: float

    def recombined(self, lambda_cyc: float, lambda_identity: float) -> float:
        return (
            self.adv_st
            + self.adv_ts
            + lambda_cyc * self.cyc
            + lambda_identity * self.identity
            + self.class_dt
            + self.class_ds
        )


@dataclass
class EpochRecord:
    epoch: int
    losses: LossReport
    lr_g: float
    lr_d: float
    acc_source_train: float = math.nan
    acc_source_test: float = math.nan
    acc_target_train: float = math.nan
    acc_target_test: float = math.nan


@dataclass
class RunLog:
    rows: list[EpochRecord]
    seed: int
    wall_clock_s: float = 0.0
    g_update_steps: int = 0
    d_update_steps: int = 0

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(RUNLOG_COLUMNS)
            for r in self.rows:
                L = r.losses
                writer.writerow(
                    [r.epoch]
                    + [
                        _fmt(v)
                        for v in (
                            L.adv_st,
                            L.adv_ts,
                            L.cyc,
                            L.identity,
                            L.class_dt,
                            L.class_ds,
                            L.total,
                            r.lr_g,
                            r.lr_d,
                            r.acc_source_train,
                            r.acc_source_test,
                            r.acc_target_train,
                            r.acc_target_test,
                        )
                    ]
                )


def _fmt(v: float) -> str:
    return format(float(v), ".8e")


def adversarial_loss(patch_real: torch.Tensor, patch_fake: torch.Tensor):
    """Least-squares GAN terms.

    d_loss = mean((D(real) - 1)^2) + mean(D(fake)^2) is minimized by the
    discriminator; g_loss = mean((D(fake) - 1)^2) by the generator.
    """
    if patch_real.shape != patch_fake.shape:
        raise ValueError("patch maps must have the same shape")
    d_loss = ((patch_real - 1.0) ** 2).mean() + (patch_fake**2).mean()
    g_loss = ((patch_fake - 1.0) ** 2).mean()
    return d_loss, g_loss


def _pair_l1(image_a, label_a, image_b, label_b) -> torch.Tensor:
    # mean absolute difference over the concatenated (image, label) pair
    diff = torch.cat([(image_a - image_b).flatten(1), (label_a - label_b)], dim=1)
    return diff.abs().mean()


def _require_labels(batch, name: str):
    x, t = batch
    if t is None:
        raise ValueError(f"{name} batch must carry labels")
    return x, t


def cycle_loss(g_st, g_ts, batch_s, batch_t) -> torch.Tensor:
    """L1 reconstruction of both (image, label) pairs through the cycle."""
    x_s, t_s = _require_labels(batch_s, "source")
    x_t, t_t = _require_labels(batch_t, "target")
    fake_t, lab_t = g_st(x_s, t_s)
    rec_s, rec_ts = g_ts(fake_t, lab_t)
    fake_s, lab_s = g_ts(x_t, t_t)
    rec_t, rec_tt = g_st(fake_s, lab_s)
    return _pair_l1(rec_s, rec_ts, x_s, t_s) + _pair_l1(rec_t, rec_tt, x_t, t_t)


def identity_loss(g_st, g_ts, batch_s, batch_t) -> torch.Tensor:
    """L1 deviation of each generator from identity on its own output domain."""
    x_s, t_s = _require_labels(batch_s, "source")
    x_t, t_t = _require_labels(batch_t, "target")
    id_t, id_tt = g_st(x_t, t_t)
    id_s, id_ts = g_ts(x_s, t_s)
    return _pair_l1(id_t, id_tt, x_t, t_t) + _pair_l1(id_s, id_ts, x_s, t_s)


def aux_class_loss(d, real_batch, fake_batch) -> torch.Tensor:
    """Cross-entropy of the label head on real and transformed samples.

    Transformed samples are classified against the labels they carried
    before transformation.
    """
    x_real, t_real = _require_labels(real_batch, "real")
    x_fake, t_fake = _require_labels(fake_batch, "fake")
    real_logits = d.forward_full(x_real).label_logits
    fake_logits = d.forward_full(x_fake).label_logits
    return F.cross_entropy(real_logits, t_real.argmax(dim=1)) + F.cross_entropy(
        fake_logits, t_fake.argmax(dim=1)
    )


def total_objective(components: LossReport | dict, lambda_cyc: float, lambda_identity: float) -> float:
    if isinstance(components, dict):
        components = LossReport(**{**components, "total": 0.0})
    return components.recombined(lambda_cyc, lambda_identity)


def lr_schedule(epoch: int, config: TrainConfig) -> float:
    """Initial rate up to decay_start_epoch, then linear to zero at epochs."""
    if not 1 <= epoch <= config.epochs:
        raise ValueError(f"epoch {epoch} outside 1..{config.epochs}")
    if epoch <= config.decay_start_epoch:
        return config.lr_initial
    span = config.epochs - config.decay_start_epoch
    return config.lr_initial * (config.epochs - epoch) / span


def _check_finite(value: float, name: str, epoch: int, step: int) -> float:
    if not math.isfinite(value):
        raise NumericalError(f"non-finite {name} loss at epoch {epoch}, step {step}")
    return value


def _apply_mask_tensor(x: torch.Tensor, rng: np.random.Generator, params: MaskParams) -> torch.Tensor:
    rect = sample_mask(rng, params)
    if rect is None:
        return x
    r0, h, c0, w = rect
    out = x.clone()
    out[:, :, r0 : r0 + h, c0 : c0 + w] = 0.0
    return out


@torch.no_grad()
def label_accuracy(net, images: np.ndarray, labels: np.ndarray, batch: int = 64) -> float:
    """Fraction of argmax label-head predictions matching ``labels``."""
    was_training = net.training
    net.eval()
    hits = 0
    for k in range(0, len(images), batch):
        x = images_to_tensor(images[k : k + batch])
        if hasattr(net, "forward_full"):
            probs = net.forward_full(x).label_probs
        else:
            probs = net(x)
        hits += int((probs.argmax(dim=1).numpy() == labels[k : k + batch]).sum())
    if was_training:
        net.train()
    return hits / len(images)


def _bundle_arrays(bundle: DatasetBundle):
    return bundle.images(), bundle.one_hot_labels(), bundle.label_indices()


def train(
    source_train: DatasetBundle,
    target_train: DatasetBundle,
    config: TrainConfig,
    *,
    source_test: DatasetBundle | None = None,
    target_test: DatasetBundle | None = None,
    out_dir=None,
    verbose: bool = False,
):
    """Train the Ac-CycleGAN; returns (nets dict, RunLog).

    Both bundles must be normalized and labeled. When ``out_dir`` is given,
    writes ``runlog.csv``, ``train_config.json`` and checkpoints under
    ``ckpt/epoch_<n>.pt``.
    """
    config.validate()
    for b, name in ((source_train, "source"), (target_train, "target")):
        if not all(s.image.normalized for s in b.samples):
            raise ValueError(f"{name} bundle must be normalized before training")
    t_start = time.perf_counter()

    g_st = build_generator(config.width_mult, config.seed, config.label_tap)
    g_ts = build_generator(config.width_mult, config.seed + 1, config.label_tap)
    d_s = build_discriminator(config.width_mult, config.seed + 2)
    d_t = build_discriminator(config.width_mult, config.seed + 3)
    nets = {"g_st": g_st, "g_ts": g_ts, "d_s": d_s, "d_t": d_t}
    for net in nets.values():
        net.train()

    betas = (config.adam_beta1, config.adam_beta2)
    opt_g = torch.optim.Adam(
        itertools.chain(g_st.parameters(), g_ts.parameters()), lr=config.lr_initial, betas=betas
    )
    opt_d = torch.optim.Adam(
        itertools.chain(d_s.parameters(), d_t.parameters()), lr=config.lr_initial, betas=betas
    )

    sampler = np.random.default_rng(np.random.SeedSequence([config.seed, _SAMPLER_STREAM]))
    augment_rng = np.random.default_rng(np.random.SeedSequence([config.seed, _AUGMENT_STREAM]))

    src_images, src_onehot, src_idx = _bundle_arrays(source_train)
    tgt_images, tgt_onehot, tgt_idx = _bundle_arrays(target_train)
    steps_per_epoch = config.steps_per_epoch or len(target_train)

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "train_config.json", "w", encoding="utf-8") as fh:
            json.dump(config.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    arch = {
        "width_mult": config.width_mult,
        "n_res_blocks": config.n_res_blocks,
        "label_tap": config.label_tap,
    }
    rows: list[EpochRecord] = []
    global_step = 0
    d_update_steps = 0
    for epoch in range(1, config.epochs + 1):
        lr_d = lr_schedule(epoch, config)
        lr_g = lr_d if config.decay_generator_lr else config.lr_initial
        for group in opt_g.param_groups:
            group["lr"] = lr_g
        for group in opt_d.param_groups:
            group["lr"] = lr_d

        sums = np.zeros(7, dtype=np.float64)
        for _ in range(steps_per_epoch):
            global_step += 1
            i = int(sampler.integers(len(src_images)))
            j = int(sampler.integers(len(tgt_images)))
            x_s = images_to_tensor(src_images[i])
            t_s = torch.as_tensor(src_onehot[i]).unsqueeze(0)
            x_t = images_to_tensor(tgt_images[j])
            t_t = torch.as_tensor(tgt_onehot[j]).unsqueeze(0)

            # generator update: adversarial + cycle + identity + class terms
            opt_g.zero_grad(set_to_none=True)
            fake_t, fake_t_lab = g_st(x_s, t_s)
            fake_s, fake_s_lab = g_ts(x_t, t_t)
            rec_s, rec_s_lab = g_ts(fake_t, fake_t_lab)
            rec_t, rec_t_lab = g_st(fake_s, fake_s_lab)
            id_t, id_t_lab = g_st(x_t, t_t)
            id_s, id_s_lab = g_ts(x_s, t_s)

            d_t_fake = d_t.forward_full(fake_t)
            d_s_fake = d_s.forward_full(fake_s)
            g_adv = ((d_t_fake.patch - 1.0) ** 2).mean() + ((d_s_fake.patch - 1.0) ** 2).mean()
            cyc = _pair_l1(rec_s, rec_s_lab, x_s, t_s) + _pair_l1(rec_t, rec_t_lab, x_t, t_t)
            ide = _pair_l1(id_t, id_t_lab, x_t, t_t) + _pair_l1(id_s, id_s_lab, x_s, t_s)
            g_cls = F.cross_entropy(d_t_fake.label_logits, t_s.argmax(dim=1)) + F.cross_entropy(
                d_s_fake.label_logits, t_t.argmax(dim=1)
            )
            g_loss = (
                g_adv + config.lambda_cyc * cyc + config.lambda_identity * ide + g_cls
            )
            for name, val in (("adversarial", g_adv), ("cycle", cyc), ("identity", ide), ("class", g_cls)):
                _check_finite(float(val.detach()), name, epoch, global_step)
            g_loss.backward()
            opt_g.step()

            # objective components (full two-sided adversarial + class terms)
            with torch.no_grad():
                d_t_real = d_t.forward_full(x_t)
                d_s_real = d_s.forward_full(x_s)
                adv_st = float(((d_t_real.patch - 1.0) ** 2).mean() + (d_t_fake.patch**2).mean())
                adv_ts = float(((d_s_real.patch - 1.0) ** 2).mean() + (d_s_fake.patch**2).mean())
                class_dt = float(
                    F.cross_entropy(d_t_real.label_logits, t_t.argmax(dim=1))
                    + F.cross_entropy(d_t_fake.label_logits, t_s.argmax(dim=1))
                )
                class_ds = float(
                    F.cross_entropy(d_s_real.label_logits, t_s.argmax(dim=1))
                    + F.cross_entropy(d_s_fake.label_logits, t_t.argmax(dim=1))
                )
            report = LossReport(
                adv_st=adv_st,
                adv_ts=adv_ts,
                cyc=float(cyc.detach()),
                identity=float(ide.detach()),
                class_dt=class_dt,
                class_ds=class_ds,
                total=0.0,
            )
            report.total = report.recombined(config.lambda_cyc, config.lambda_identity)
            _check_finite(report.total, "total", epoch, global_step)
            sums += np.array(
                [report.adv_st, report.adv_ts, report.cyc, report.identity, report.class_dt, report.class_ds, report.total]
            )

            # discriminator update on every second generator step
            if global_step % config.d_update_period == 1:
                x_t_d, x_s_d = x_t, x_s
                fake_t_d, fake_s_d = fake_t.detach(), fake_s.detach()
                if config.augment_mode in ("disc-real", "disc-both"):
                    x_t_d = _apply_mask_tensor(x_t_d, augment_rng, config.mask)
                    x_s_d = _apply_mask_tensor(x_s_d, augment_rng, config.mask)
                if config.augment_mode == "disc-both":
                    fake_t_d = _apply_mask_tensor(fake_t_d, augment_rng, config.mask)
                    fake_s_d = _apply_mask_tensor(fake_s_d, augment_rng, config.mask)
                opt_d.zero_grad(set_to_none=True)
                dt_real = d_t.forward_full(x_t_d)
                dt_fake = d_t.forward_full(fake_t_d)
                ds_real = d_s.forward_full(x_s_d)
                ds_fake = d_s.forward_full(fake_s_d)
                d_adv_t, _ = adversarial_loss(dt_real.patch, dt_fake.patch)
                d_adv_s, _ = adversarial_loss(ds_real.patch, ds_fake.patch)
                d_cls = (
                    F.cross_entropy(dt_real.label_logits, t_t.argmax(dim=1))
                    + F.cross_entropy(dt_fake.label_logits, t_s.argmax(dim=1))
                    + F.cross_entropy(ds_real.label_logits, t_s.argmax(dim=1))
                    + F.cross_entropy(ds_fake.label_logits, t_t.argmax(dim=1))
                )
                d_loss = d_adv_t + d_adv_s + d_cls
                _check_finite(float(d_loss.detach()), "discriminator", epoch, global_step)
                d_loss.backward()
                opt_d.step()
                d_update_steps += 1

        means = sums / steps_per_epoch
        record = EpochRecord(
            epoch=epoch,
            losses=LossReport(*means),
            lr_g=lr_g,
            lr_d=lr_d,
        )
        if config.eval_interval and (epoch % config.eval_interval == 0 or epoch == config.epochs):
            record.acc_source_train = label_accuracy(d_s, src_images, src_idx)
            record.acc_target_train = label_accuracy(d_t, tgt_images, tgt_idx)
            if source_test is not None:
                record.acc_source_test = label_accuracy(d_s, source_test.images(), source_test.label_indices())
            if target_test is not None:
                record.acc_target_test = label_accuracy(d_t, target_test.images(), target_test.label_indices())
        rows.append(record)
        if verbose:
            print(
                f"epoch {epoch:3d} total={record.losses.total:.4f} "
                f"acc_tgt_train={record.acc_target_train:.3f} acc_tgt_test={record.acc_target_test:.3f}"
            )

        if out_dir is not None:
            is_last = epoch == config.epochs
            if is_last or (config.checkpoint_interval and epoch % config.checkpoint_interval == 0):
                save_checkpoint(
                    out_dir / "ckpt" / f"epoch_{epoch}.pt",
                    kind="accyclegan",
                    epoch=epoch,
                    arch=arch,
                    nets=nets,
                    optimizers={"g": opt_g, "d": opt_d},
                    rng_states={
                        "sampler": sampler.bit_generator.state,
                        "augment": augment_rng.bit_generator.state,
                        "torch": torch.get_rng_state(),
                    },
                    train_config=config.to_dict(),
                )

    runlog = RunLog(
        rows=rows,
        seed=config.seed,
        wall_clock_s=time.perf_counter() - t_start,
        g_update_steps=global_step,
        d_update_steps=d_update_steps,
    )
    if out_dir is not None:
        runlog.write_csv(out_dir / RUNLOG_NAME)
    return nets, runlog


def train_baseline(
    train_bundle: DatasetBundle,
    config: BaselineConfig,
    *,
    test_bundle: DatasetBundle | None = None,
    out_dir=None,
    verbose: bool = False,
):
    """Supervised training of the non-adaptation classifier.

    Returns (net, rows) where rows are per-epoch dicts with columns
    epoch, ce, lr, acc_train, acc_test.
    """
    if not all(s.image.normalized for s in train_bundle.samples):
        raise ValueError("bundle must be normalized before training")
    net = build_baseline_classifier(config.width_mult, config.seed)
    net.train()
    opt = torch.optim.Adam(net.parameters(), lr=config.lr, betas=(config.adam_beta1, config.adam_beta2))
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, _SAMPLER_STREAM]))
    augment_rng = np.random.default_rng(np.random.SeedSequence([config.seed, _AUGMENT_STREAM]))
    images, _, labels = _bundle_arrays(train_bundle)

    rows = []
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(images))
        ce_sum, n_batches = 0.0, 0
        for k in range(0, len(order), config.batch_size):
            idx = order[k : k + config.batch_size]
            batch_images = images[idx]
            if config.augment:
                batch_images = batch_images.copy()
                for b in range(len(batch_images)):
                    rect = sample_mask(augment_rng, config.mask)
                    if rect is not None:
                        r0, h, c0, w = rect
                        batch_images[b, r0 : r0 + h, c0 : c0 + w] = 0.0
            x = images_to_tensor(batch_images)
            y = torch.as_tensor(labels[idx])
            opt.zero_grad(set_to_none=True)
            loss = F.cross_entropy(net.forward_logits(x), y)
            ce = _check_finite(float(loss.detach()), "cross-entropy", epoch, k)
            loss.backward()
            opt.step()
            ce_sum += ce
            n_batches += 1
        row = {
            "epoch": epoch,
            "ce": ce_sum / n_batches,
            "lr": config.lr,
            "acc_train": label_accuracy(net, images, labels),
            "acc_test": label_accuracy(net, test_bundle.images(), test_bundle.label_indices())
            if test_bundle is not None
            else math.nan,
        }
        rows.append(row)
        if verbose:
            print(f"baseline epoch {epoch:3d} ce={row['ce']:.4f} acc_train={row['acc_train']:.3f}")

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "train_config.json", "w", encoding="utf-8") as fh:
            json.dump(config.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        with open(out_dir / RUNLOG_NAME, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "ce", "lr", "acc_train", "acc_test"])
            for row in rows:
                writer.writerow(
                    [row["epoch"], _fmt(row["ce"]), _fmt(row["lr"]), _fmt(row["acc_train"]), _fmt(row["acc_test"])]
                )
        net.eval()
        save_checkpoint(
            out_dir / "ckpt" / f"epoch_{config.epochs}.pt",
            kind="baseline",
            epoch=config.epochs,
            arch={"width_mult": config.width_mult},
            nets={"net": net},
            optimizers={"opt": opt},
            rng_states={"sampler": rng.bit_generator.state, "torch": torch.get_rng_state()},
            train_config=config.to_dict(),
        )
    net.eval()
    return net, rows


def prepare_domain_bundles(
    source_raw: DatasetBundle,
    target_raw: DatasetBundle,
    labeled_fraction: float,
    split_seed: int,
    stratified: bool = True,
):
    """Split the target domain and normalize both domains leak-free.

    Source data is all training data; its constants come from the whole
    bundle. Target constants come from the labeled training split only.
    Returns (source_norm, target_train_norm, target_test_norm, split_spec).
    """
    spec = SplitSpec(labeled_fraction=labeled_fraction, seed=split_seed, stratified=stratified)
    tgt_train_raw, tgt_test_raw = split_holdout(target_raw, spec)
    src_lo, src_hi = compute_normalization(source_raw)
    tgt_lo, tgt_hi = compute_normalization(tgt_train_raw)
    source = normalize_bundle(source_raw, src_lo, src_hi)
    tgt_train = normalize_bundle(tgt_train_raw, tgt_lo, tgt_hi)
    tgt_test = normalize_bundle(tgt_test_raw, tgt_lo, tgt_hi)
    return source, tgt_train, tgt_test, spec


def sweep(
    ratios,
    base_config: TrainConfig,
    source_raw: DatasetBundle,
    target_raw: DatasetBundle,
    seeds=(0,),
    out_dir=None,
    verbose: bool = False,
) -> list[dict]:
    """One full train + target-test evaluation per (ratio, seed).

    Returns rows ``{"ratio", "seed", "acc_target_test"}`` (accuracy as a
    fraction) and, when ``out_dir`` is given, writes ``sweep.csv`` plus one
    run subdirectory per combination.
    """
    for r in ratios:
        if not 0.0 < r < 1.0:
            raise ValueError(f"ratio {r} outside (0, 1)")
    out_dir = Path(out_dir) if out_dir is not None else None
    rows = []
    for ratio in ratios:
        for seed in seeds:
            cfg = replace(base_config, labeled_fraction=float(ratio), seed=int(seed))
            source, tgt_train, tgt_test, _ = prepare_domain_bundles(
                source_raw, target_raw, cfg.labeled_fraction, split_seed=cfg.seed
            )
            run_dir = out_dir / f"ratio_{ratio:.2f}_seed_{seed}" if out_dir is not None else None
            nets, runlog = train(
                source, tgt_train, cfg, target_test=tgt_test, out_dir=run_dir, verbose=verbose
            )
            acc = label_accuracy(nets["d_t"], tgt_test.images(), tgt_test.label_indices())
            rows.append({"ratio": float(ratio), "seed": int(seed), "acc_target_test": acc})
            if verbose:
                print(f"sweep ratio={ratio} seed={seed} acc={acc:.3f}")
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "sweep.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["ratio", "seed", "acc_target_test"])
            for row in rows:
                writer.writerow([row["ratio"], row["seed"], _fmt(row["acc_target_test"])])
    return rows
