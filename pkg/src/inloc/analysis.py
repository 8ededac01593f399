"""Evaluation and interpretability: accuracy, t-SNE, Grad-CAM, KDE reports.

``analyze_run`` drives the full post-training pipeline on a run directory:
classification report of the target discriminator, t-SNE embeddings of the
discriminator's hidden features for true and generator-fake data,
per-sample transformation-error/attention records (CSV + 8-bit PGM), and a
bivariate kernel-density grid relating transformation error to attention.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from sklearn.manifold import TSNE

from .data import IMAGE_SHAPE, N_CLASSES, load_bundle, load_split, normalize_bundle, compute_normalization
from .models import images_to_tensor, load_checkpoint, rebuild_networks

EVAL_REPORT_NAME = "eval_report.csv"
TSNE_TRUE_NAME = "tsne_true.csv"
TSNE_FAKE_NAME = "tsne_fake.csv"
KDE_NAME = "kde_grid.csv"
ATTENTION_DIR = "attention"


def accuracy(n_correct: int, n_test: int) -> float:
    """Percentage of correct answers, reported to two decimals."""
    if n_test <= 0:
        raise ValueError("n_test must be positive")
    if not 0 <= n_correct <= n_test:
        raise ValueError(f"need 0 <= n_correct <= n_test, got {n_correct}/{n_test}")
    return round(100.0 * n_correct / n_test, 2)


@dataclass
class EvalReport:
    """Classification summary: accuracy fraction, confusion, per-class recall."""

    accuracy: float
    confusion: np.ndarray  # (8, 8) rows: true, cols: predicted
    per_octant_recall: np.ndarray  # (8,)

    @classmethod
    def from_predictions(cls, true_idx: np.ndarray, pred_idx: np.ndarray) -> "EvalReport":
        confusion = np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64)
        for t, p in zip(true_idx, pred_idx):
            confusion[int(t), int(p)] += 1
        row_sums = confusion.sum(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            recall = np.where(row_sums > 0, np.diag(confusion) / row_sums, np.nan)
        acc = float(np.trace(confusion)) / float(confusion.sum())
        return cls(accuracy=acc, confusion=confusion, per_octant_recall=recall)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["accuracy_fraction", format(self.accuracy, ".8e")])
            writer.writerow(["accuracy_percent", format(round(100 * self.accuracy, 2), ".2f")])
            writer.writerow(["octant_recall"] + [format(r, ".8e") for r in self.per_octant_recall])
            writer.writerow(["confusion_true_row_pred_col"])
            for row in self.confusion:
                writer.writerow([int(v) for v in row])


@torch.no_grad()
def predict_octants(d, images) -> np.ndarray:
    """Argmax of the label head per image; ties break to the lowest index."""
    was_training = getattr(d, "training", False)
    d.eval()
    x = images_to_tensor(np.asarray(images, dtype=np.float32))
    if hasattr(d, "forward_full"):
        probs = d.forward_full(x).label_probs
    else:
        probs = d(x)
    if was_training:
        d.train()
    return probs.numpy().argmax(axis=1)


def evaluate_classifier(d, bundle) -> EvalReport:
    preds = predict_octants(d, bundle.images())
    return EvalReport.from_predictions(bundle.label_indices(), preds)


@torch.no_grad()
def hidden_features(d, images, batch: int = 64) -> np.ndarray:
    """Flattened activation of the feature map feeding both heads: (N, C*450)."""
    was_training = getattr(d, "training", False)
    d.eval()
    arr = np.asarray(images, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[None]
    chunks = []
    for k in range(0, len(arr), batch):
        x = images_to_tensor(arr[k : k + batch])
        chunks.append(d.forward_full(x).features.flatten(1).numpy())
    if was_training:
        d.train()
    return np.concatenate(chunks, axis=0)


def tsne_embed(
    features: np.ndarray,
    out_dims: int = 3,
    perplexity: float = 5.0,
    learning_rate: float = 5.0,
    iterations: int = 5000,
    seed: int = 0,
) -> np.ndarray:
    """Deterministic-given-seed t-SNE embedding to 2 or 3 dimensions."""
    features = np.asarray(features, dtype=np.float64)
    if out_dims not in (2, 3):
        raise ValueError("out_dims must be 2 or 3")
    n = len(features)
    if n < 3 * perplexity + 1:
        raise ValueError(f"need at least {int(3 * perplexity + 1)} samples for perplexity {perplexity}, got {n}")
    tsne = TSNE(
        n_components=out_dims,
        perplexity=perplexity,
        learning_rate=learning_rate,
        max_iter=iterations,
        init="random",
        random_state=seed,
        method="exact" if n < 400 else "barnes_hut",
        n_jobs=1,
    )
    return tsne.fit_transform(features)


def cam_from_activations(activations: np.ndarray, gradients: np.ndarray) -> np.ndarray:
    """Grad-CAM combination: ReLU of gradient-weighted channel sum, max-normalized.

    ``activations``/``gradients`` have shape (C, H, W); channel weights are
    the spatial means of the gradients. An all-nonpositive combination
    yields the all-zero map.
    """
    activations = np.asarray(activations, dtype=np.float64)
    gradients = np.asarray(gradients, dtype=np.float64)
    if activations.shape != gradients.shape or activations.ndim != 3:
        raise ValueError("activations and gradients must both be (C, H, W)")
    weights = gradients.mean(axis=(1, 2))
    cam = np.maximum((weights[:, None, None] * activations).sum(axis=0), 0.0)
    peak = cam.max()
    if peak > 0:
        cam = cam / peak
    return cam


def grad_cam(d, image, octant_index: int, target_layer: str | int = "last") -> np.ndarray:
    """150x3 attention map in [0, 1] for one octant logit of the classifier.

    ``target_layer`` selects the trunk stage whose activation is attributed:
    "last" (the feature map feeding both heads), "prev", or a stage index.
    """
    if not 0 <= int(octant_index) < N_CLASSES:
        raise ValueError("octant_index must be in 0..7")
    was_training = getattr(d, "training", False)
    d.eval()
    x = images_to_tensor(np.asarray(image, dtype=np.float32))
    states = d.trunk_states(x)
    if target_layer == "last":
        layer_idx = len(states) - 1
    elif target_layer == "prev":
        layer_idx = len(states) - 2
    else:
        layer_idx = int(target_layer)
    target = states[layer_idx]
    target.retain_grad()
    logits = d.label_head(states[-1].flatten(1))
    logit = logits[0, int(octant_index)]
    grads = torch.autograd.grad(logit, target)[0]
    if was_training:
        d.train()
    return cam_from_activations(
        target.detach().numpy()[0], grads.detach().numpy()[0]
    ).astype(np.float64)


@torch.no_grad()
def transformation_error(g, image, label_one_hot) -> np.ndarray:
    """Elementwise |G(image, label).image - image| as a 150x3 map."""
    was_training = getattr(g, "training", False)
    g.eval()
    x = images_to_tensor(np.asarray(image, dtype=np.float32))
    t = torch.as_tensor(np.asarray(label_one_hot, dtype=np.float32)).reshape(1, N_CLASSES)
    out, _ = g(x, t)
    if was_training:
        g.train()
    return np.abs(out.numpy()[0, 0] - np.asarray(image, dtype=np.float32))


@torch.no_grad()
def transform_images(g, images, one_hot_labels, batch: int = 64) -> np.ndarray:
    """Generator image outputs for a stack of (image, one-hot label) pairs."""
    was_training = getattr(g, "training", False)
    g.eval()
    arr = np.asarray(images, dtype=np.float32)
    labs = np.asarray(one_hot_labels, dtype=np.float32)
    outs = []
    for k in range(0, len(arr), batch):
        out, _ = g(images_to_tensor(arr[k : k + batch]), torch.as_tensor(labs[k : k + batch]))
        outs.append(out.numpy()[:, 0])
    if was_training:
        g.train()
    return np.concatenate(outs, axis=0)


def scott_bandwidths(x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    """Scott's rule per axis for a bivariate sample: sigma * n^(-1/6)."""
    n = len(x)
    factor = n ** (-1.0 / 6.0)
    hx = float(np.std(x, ddof=1)) * factor
    hy = float(np.std(y, ddof=1)) * factor
    return max(hx, 1e-12), max(hy, 1e-12)


def kde_joint(
    errors,
    attention,
    bandwidth: tuple[float, float] | float | None = None,
    grid: tuple[np.ndarray, np.ndarray] | None = None,
    grid_size: int = 64,
    pad_bandwidths: float = 6.0,
):
    """Parzen estimate of the joint density with a product Gaussian kernel.

    Returns (xs, ys, density) with density[i, j] evaluated at
    (xs[i], ys[j]); the estimate is normalized by the sample count so it
    integrates to one.
    """
    x = np.asarray(errors, dtype=np.float64).ravel()
    y = np.asarray(attention, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ValueError("errors and attention must be paired, equal-length samples")
    if len(x) < 2:
        raise ValueError("need at least 2 paired samples")
    if bandwidth is None:
        hx, hy = scott_bandwidths(x, y)
    elif np.isscalar(bandwidth):
        hx = hy = float(bandwidth)
    else:
        hx, hy = (float(b) for b in bandwidth)
    if hx <= 0 or hy <= 0:
        raise ValueError("bandwidths must be positive")
    if grid is None:
        xs = np.linspace(x.min() - pad_bandwidths * hx, x.max() + pad_bandwidths * hx, grid_size)
        ys = np.linspace(y.min() - pad_bandwidths * hy, y.max() + pad_bandwidths * hy, grid_size)
    else:
        xs, ys = (np.asarray(g, dtype=np.float64) for g in grid)
    ux = (xs[:, None] - x[None, :]) / hx
    uy = (ys[:, None] - y[None, :]) / hy
    kx = np.exp(-0.5 * ux**2) / (hx * math.sqrt(2.0 * math.pi))
    ky = np.exp(-0.5 * uy**2) / (hy * math.sqrt(2.0 * math.pi))
    density = (kx @ ky.T) / len(x)
    return xs, ys, density


@dataclass
class AttentionRecord:
    """Per-sample interpretability record for one transformed observation."""

    transformed: np.ndarray  # (150, 3) generator image output
    error: np.ndarray  # (150, 3) nonnegative |transformed - input|
    heatmap: np.ndarray  # (150, 3) Grad-CAM in [0, 1]
    predicted: int
    true: int

    def validate(self) -> None:
        for name, arr in (("transformed", self.transformed), ("error", self.error), ("heatmap", self.heatmap)):
            if arr.shape != IMAGE_SHAPE:
                raise ValueError(f"{name} must be {IMAGE_SHAPE}")
        if (self.error < 0).any():
            raise ValueError("error map must be nonnegative")
        if self.heatmap.min() < 0 or self.heatmap.max() > 1:
            raise ValueError("heatmap must lie in [0, 1]")


def write_pgm(path, values01: np.ndarray) -> None:
    """Binary (P5) 8-bit PGM of a [0, 1] map scaled to 0..255."""
    arr = np.asarray(values01, dtype=np.float64)
    scaled = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    h, w = scaled.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(scaled.tobytes())


def _write_matrix_csv(path, array: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for row in np.asarray(array):
            writer.writerow([format(float(v), ".8e") for v in row])


def _write_coords_csv(path, coords: np.ndarray, labels: np.ndarray, subset: np.ndarray | None = None) -> None:
    dims = coords.shape[1]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"dim{i}" for i in range(dims)] + ["octant"] + (["subset"] if subset is not None else []))
        for i, row in enumerate(coords):
            out = [format(float(v), ".8e") for v in row] + [int(labels[i])]
            if subset is not None:
                out.append(str(subset[i]))
            writer.writerow(out)


def normalized_by_max(arr: np.ndarray) -> np.ndarray:
    peak = arr.max()
    return arr / peak if peak > 0 else arr


def latest_checkpoint(run_dir) -> Path:
    ckpt_dir = Path(run_dir) / "ckpt"
    if not ckpt_dir.is_dir():
        raise FileNotFoundError(f"no checkpoint directory under {run_dir}")
    candidates = sorted(ckpt_dir.glob("epoch_*.pt"), key=lambda p: int(p.stem.split("_")[1]))
    if not candidates:
        raise FileNotFoundError(f"no checkpoints under {ckpt_dir}")
    return candidates[-1]


def analyze_run(run_dir, out_dir=None, seed: int = 0, max_tsne_samples: int = 512) -> dict:
    """Write the five report kinds for a finished Ac-CycleGAN run.

    Outputs into ``out_dir`` (default ``<run_dir>/analysis``):
      1. ``eval_report.csv``       accuracy/confusion of D_T on target test;
      2. ``tsne_true.csv`` / ``tsne_fake.csv``   3-D t-SNE of D_T hidden
         features for true target data and generator-fake target data;
      3. ``attention/sample_<k>_error.csv`` / ``_cam.csv``   per-sample
         transformation-error and Grad-CAM maps over target-test data
         (plus ``attention/index.csv`` with predicted/true octants);
      4. matching ``.pgm`` renderings scaled to 0..255;
      5. ``kde_grid.csv``          joint density of pooled (error, attention).

    Deterministic given the checkpoint and ``seed``.
    """
    run_dir = Path(run_dir)
    config_path = run_dir / "config.json"
    if not config_path.exists():
        raise FileNotFoundError(f"missing resolved config: {config_path}")
    with open(config_path, encoding="utf-8") as fh:
        cli_config = json.load(fh)

    ckpt = load_checkpoint(latest_checkpoint(run_dir))
    if ckpt["kind"] != "accyclegan":
        raise ValueError(f"analyze_run expects an accyclegan run, found {ckpt['kind']!r}")
    nets = rebuild_networks(ckpt)

    source_raw = load_bundle(cli_config["source_data"])
    target_raw = load_bundle(cli_config["target_data"])
    train_idx, test_idx, _ = load_split(run_dir / "split.json")
    src_lo, src_hi = compute_normalization(source_raw)
    source = normalize_bundle(source_raw, src_lo, src_hi)
    tgt_train_raw = target_raw.subset(train_idx)
    tgt_lo, tgt_hi = compute_normalization(tgt_train_raw)
    target_test = normalize_bundle(target_raw.subset(test_idx), tgt_lo, tgt_hi)

    out_dir = Path(out_dir) if out_dir is not None else run_dir / "analysis"
    out_dir.mkdir(parents=True, exist_ok=True)
    att_dir = out_dir / ATTENTION_DIR
    att_dir.mkdir(exist_ok=True)

    d_t, d_s, g_ts = nets["d_t"], nets["d_s"], nets["g_ts"]

    # 1. classification report of D_T on target test
    report = evaluate_classifier(d_t, target_test)
    report.write_csv(out_dir / EVAL_REPORT_NAME)

    # 2. t-SNE of D_T hidden features: true target data and fake target data
    fake_target = transform_images(
        nets["g_st"], source.images()[:max_tsne_samples], source.one_hot_labels()[:max_tsne_samples]
    )
    fake_labels = source.label_indices()[:max_tsne_samples]
    target_train = normalize_bundle(tgt_train_raw, tgt_lo, tgt_hi)
    true_images = np.concatenate([target_test.images(), target_train.images()])
    true_labels = np.concatenate([target_test.label_indices(), tgt_train_raw.label_indices()])
    true_subset = np.array(["test"] * len(target_test) + ["train"] * len(tgt_train_raw))
    coords_true = tsne_embed(hidden_features(d_t, true_images), 3, seed=seed)
    coords_fake = tsne_embed(hidden_features(d_t, fake_target), 3, seed=seed)
    _write_coords_csv(out_dir / TSNE_TRUE_NAME, coords_true, true_labels, true_subset)
    _write_coords_csv(out_dir / TSNE_FAKE_NAME, coords_fake, fake_labels)

    # 3 + 4. per-sample attention records over target test (to-source direction)
    records = []
    index_rows = []
    pooled_err, pooled_cam = [], []
    for k, sample in enumerate(target_test.samples):
        err = transformation_error(g_ts, sample.image.values, sample.label.one_hot)
        transformed = transform_images(g_ts, sample.image.values[None], sample.label.one_hot[None])[0]
        pred = int(predict_octants(d_s, transformed[None])[0])
        cam = grad_cam(d_s, transformed, pred)
        rec = AttentionRecord(
            transformed=transformed,
            error=err.astype(np.float64),
            heatmap=cam,
            predicted=pred,
            true=sample.label.index,
        )
        rec.validate()
        records.append(rec)
        _write_matrix_csv(att_dir / f"sample_{k:03d}_error.csv", rec.error)
        _write_matrix_csv(att_dir / f"sample_{k:03d}_cam.csv", rec.heatmap)
        write_pgm(att_dir / f"sample_{k:03d}_error.pgm", normalized_by_max(rec.error))
        write_pgm(att_dir / f"sample_{k:03d}_cam.pgm", rec.heatmap)
        index_rows.append([k, rec.predicted, rec.true])
        pooled_err.append(normalized_by_max(rec.error).ravel())
        pooled_cam.append(rec.heatmap.ravel())
    with open(att_dir / "index.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample", "predicted_octant", "true_octant"])
        writer.writerows(index_rows)

    # 5. joint KDE of pooled normalized (error, attention) values
    err_flat = np.concatenate(pooled_err)
    cam_flat = np.concatenate(pooled_cam)
    xs, ys, density = kde_joint(err_flat, cam_flat)
    with open(out_dir / KDE_NAME, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["error_grid"] + [format(v, ".8e") for v in xs])
        writer.writerow(["attention_grid"] + [format(v, ".8e") for v in ys])
        writer.writerow(["density_rows_are_error_axis"])
        for row in density:
            writer.writerow([format(float(v), ".8e") for v in row])

    return {
        "out_dir": out_dir,
        "eval_report": report,
        "n_attention_records": len(records),
        "records": records,
        "pooled_error": err_flat,
        "pooled_attention": cam_flat,
    }
