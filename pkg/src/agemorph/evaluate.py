"""Image-fidelity metrics, age-accuracy metrics, and feature export.

SSIM is computed with Gaussian window weights (sigma 1.5, truncated at 3.5
sigma, so an 11-tap window), population statistics, the standard stability
constants C1 = (0.01 R)^2 and C2 = (0.03 R)^2, and the border (half a
window on every side) excluded from the mean. PSNR uses a dynamic range of
1.0 and caps at a 100 dB sentinel so zero-error pairs aggregate cleanly.
"""
from __future__ import annotations

import base64
import csv
import dataclasses
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage, stats

from .agecode import AgeCodeConfig, expected_age_batch, kl_age_loss, soft_label_batch
from .image import Image
from .losses import feature_cosine
from .nets import AgeTransformer, Encoder, NetworkConfig
from .phantom import DatasetManifest, ventricle_area
from .train import _augment_batch, _epoch_rng, _step_rng, TrainConfig
from .volio import dataset_arrays

PSNR_CAP_DB = 100.0
SSIM_SIGMA = 1.5
SSIM_TRUNCATE = 3.5

AGE_CLUSTERS = ((48, 54), (55, 61), (62, 68), (69, 74), (75, 80))


def _as_float_array(x) -> np.ndarray:
    data = x.data if isinstance(x, Image) else np.asarray(x)
    return np.asarray(data, dtype=np.float64)


def mse(x, y) -> float:
    a, b = _as_float_array(x), _as_float_array(y)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def psnr(x, y) -> float:
    """10 log10(1 / MSE) for unit dynamic range, capped at 100 dB."""
    err = mse(x, y)
    if err <= 0.0:
        return PSNR_CAP_DB
    return float(min(10.0 * math.log10(1.0 / err), PSNR_CAP_DB))


def _gaussian_kernel(sigma: float, radius: int) -> np.ndarray:
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (offsets / sigma) ** 2)
    return k / k.sum()


def ssim(x, y, data_range: float = 1.0) -> float:
    """Mean structural similarity with a Gaussian window."""
    a, b = _as_float_array(x), _as_float_array(y)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    radius = int(SSIM_TRUNCATE * SSIM_SIGMA + 0.5)
    win = 2 * radius + 1
    if min(a.shape) < win:
        raise ValueError(f"every axis must be at least {win} for SSIM")
    kernel = _gaussian_kernel(SSIM_SIGMA, radius)

    def smooth(img):
        out = img
        for axis in range(img.ndim):
            out = ndimage.correlate1d(out, kernel, axis=axis, mode="reflect")
        return out

    ux, uy = smooth(a), smooth(b)
    uxx, uyy, uxy = smooth(a * a), smooth(b * b), smooth(a * b)
    vx = uxx - ux * ux
    vy = uyy - uy * uy
    vxy = uxy - ux * uy

    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    s = ((2 * ux * uy + c1) * (2 * vxy + c2)) / (
        (ux * ux + uy * uy + c1) * (vx + vy + c2)
    )
    crop = tuple(slice(radius, n - radius) for n in s.shape)
    return float(s[crop].mean(dtype=np.float64))


def difference_map(source, transformed) -> np.ndarray:
    """Signed per-voxel change, transformed minus source."""
    a, b = _as_float_array(source), _as_float_array(transformed)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return b - a


def _batched_transform(
    model: AgeTransformer | None, images: np.ndarray, target_ages, batch: int = 32
) -> np.ndarray:
    """Eval-mode transform of a stack of images; model=None is the identity."""
    images = np.asarray(images, dtype=np.float32)
    targets = np.asarray(target_ages, dtype=np.float32)
    if len(targets) != len(images):
        raise ValueError("one target age per image required")
    if model is None:
        return images.copy()
    was_training = model.training
    model.eval()
    out = np.empty_like(images)
    try:
        with torch.no_grad():
            for i in range(0, len(images), batch):
                x = torch.from_numpy(images[i : i + batch]).unsqueeze(1)
                t = torch.from_numpy(targets[i : i + batch])
                out[i : i + batch] = model(x, t).squeeze(1).numpy()
    finally:
        model.train(was_training)
    return out


def _predict_ages(
    regressor: Encoder, images: np.ndarray, age_cfg: AgeCodeConfig, batch: int = 64
) -> np.ndarray:
    was_training = regressor.training
    regressor.eval()
    preds = []
    try:
        with torch.no_grad():
            for i in range(0, len(images), batch):
                x = torch.from_numpy(
                    np.asarray(images[i : i + batch], dtype=np.float32)
                ).unsqueeze(1)
                probs = regressor(x).age_probs()
                preds.append(expected_age_batch(probs, age_cfg))
    finally:
        regressor.train(was_training)
    return np.concatenate(preds)


@dataclass(frozen=True)
class PadReport:
    """Mean absolute gap between intended and perceived age."""

    overall: float
    clusters: dict[str, float]
    n: int

    def as_dict(self) -> dict:
        return {"overall": self.overall, "clusters": dict(self.clusters), "n": self.n}


def pad_metric(
    model: AgeTransformer | None,
    regressor: Encoder,
    images,
    target_ages,
    age_cfg: AgeCodeConfig = AgeCodeConfig(),
) -> PadReport:
    """PAD of transformed images, overall and per target-age cluster.

    ``model=None`` scores the identity baseline (output = input) against the
    same regressor, which is the reference the trained model is judged by.
    """
    images = np.asarray(images, dtype=np.float32)
    targets = np.asarray(target_ages, dtype=np.float64)
    transformed = _batched_transform(model, images, targets)
    preds = _predict_ages(regressor, transformed, age_cfg)
    gaps = np.abs(preds - targets)
    clusters = {}
    for lo, hi in AGE_CLUSTERS:
        mask = (targets >= lo) & (targets <= hi)
        if mask.any():
            clusters[f"{lo}-{hi}"] = float(gaps[mask].mean())
    return PadReport(overall=float(gaps.mean()), clusters=clusters, n=len(gaps))


def aging_trajectory(
    model: AgeTransformer | None,
    sources,
    target_ages=range(48, 81),
) -> list[dict]:
    """Ventricle-size response of each source image across target ages.

    Returns one entry per source with the measured areas and the Spearman
    rank correlation between target age and area (0.0 when the response is
    constant). A model that ages properly scores near +1.
    """
    targets = np.asarray(list(target_ages), dtype=np.float64)
    results = []
    for src in sources:
        data = _as_float_array(src).astype(np.float32)
        stack = np.repeat(data[None], len(targets), axis=0)
        outs = _batched_transform(model, stack, targets)
        areas = np.array([ventricle_area(o) for o in outs], dtype=np.float64)
        if np.ptp(areas) == 0:
            rho = 0.0
        else:
            rho = float(stats.spearmanr(targets, areas).statistic)
            if math.isnan(rho):
                rho = 0.0
        results.append({"areas": areas.tolist(), "rho": rho})
    return results


def export_features(
    model: AgeTransformer,
    images,
    subject_ids,
    ages,
    out_path,
    batch: int = 32,
) -> dict:
    """Write per-image bottleneck feature vectors to CSV.

    Columns: subject_id, age, f_age_b64, f_iden_b64 (little-endian float32,
    base64). Also returns (and is the authority for) the mean absolute
    cosine between the age and identity stacks across the set.
    """
    images = np.asarray(images, dtype=np.float32)
    if not (len(images) == len(subject_ids) == len(ages)):
        raise ValueError("images, subject_ids, and ages must align")
    was_training = model.training
    model.eval()
    cosines = []
    rows = []
    try:
        with torch.no_grad():
            for i in range(0, len(images), batch):
                x = torch.from_numpy(images[i : i + batch]).unsqueeze(1)
                feats = model.encode(x)
                identity = model.extract_identity(feats.levels)
                for j in range(x.shape[0]):
                    age_stack = [lvl[j : j + 1] for lvl in feats.levels]
                    iden_stack = [lvl[j : j + 1] for lvl in identity]
                    cosines.append(float(feature_cosine(age_stack, iden_stack)))
                    f_age = feats.bottleneck[j].flatten().numpy().astype("<f4")
                    f_iden = identity[-1][j].flatten().numpy().astype("<f4")
                    rows.append(
                        (
                            subject_ids[i + j],
                            int(ages[i + j]),
                            base64.b64encode(f_age.tobytes()).decode("ascii"),
                            base64.b64encode(f_iden.tobytes()).decode("ascii"),
                        )
                    )
    finally:
        model.train(was_training)

    with open(out_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["subject_id", "age", "f_age_b64", "f_iden_b64"])
        writer.writerows(rows)
    return {
        "n": len(rows),
        "mean_abs_cosine": float(np.mean(np.abs(cosines))),
        "path": str(out_path),
    }


# -- age regressor ------------------------------------------------------


def train_age_regressor(
    manifest: DatasetManifest,
    net_cfg: NetworkConfig,
    age_cfg: AgeCodeConfig,
    epochs: int = 20,
    batch_size: int = 32,
    lr: float = 1e-3,
    seed: int = 0,
    base_dir=None,
    out_path=None,
) -> Encoder:
    """Train a standalone encoder to predict age from ground-truth images.

    This is the measurement instrument behind PAD; it never shares weights
    with the transformer under evaluation.
    """
    images, ages, _ = dataset_arrays(manifest, base_dir)
    torch.manual_seed(seed)
    enc = Encoder(net_cfg, age_cfg)
    opt = torch.optim.Adam(enc.parameters(), lr=lr, betas=(0.9, 0.999))
    sch = torch.optim.lr_scheduler.StepLR(opt, step_size=30, gamma=0.3)
    aug_cfg = TrainConfig(epochs=max(epochs, 1), batch_size=max(batch_size, 2), seed=seed)
    enc.train()
    for epoch in range(epochs):
        order = _epoch_rng(seed, epoch).permutation(len(images))
        for bi, start in enumerate(range(0, len(order), batch_size)):
            idx = order[start : start + batch_size]
            if len(idx) < 2:
                continue
            rng = _step_rng(seed, epoch, bi)
            x_aug = _augment_batch(images[idx], aug_cfg, rng)
            x = torch.from_numpy(x_aug).unsqueeze(1)
            soft = torch.from_numpy(soft_label_batch(ages[idx], age_cfg)).float()
            loss = kl_age_loss(enc(x).age_probs(), soft)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
        sch.step()
    enc.eval()
    if out_path is not None:
        save_regressor(enc, net_cfg, age_cfg, out_path, epochs=epochs, seed=seed)
    return enc


def save_regressor(enc: Encoder, net_cfg, age_cfg, path, epochs=None, seed=None) -> None:
    torch.save(
        {
            "format_version": 1,
            "kind": "age-regressor",
            "encoder": enc.state_dict(),
            "net_config": dataclasses.asdict(net_cfg),
            "age_config": dataclasses.asdict(age_cfg),
            "epochs": epochs,
            "seed": seed,
        },
        path,
    )


def load_regressor(path) -> tuple[Encoder, AgeCodeConfig]:
    bundle = torch.load(path, map_location="cpu", weights_only=False)
    if bundle.get("kind") != "age-regressor":
        raise ValueError(f"{path}: not an age-regressor checkpoint")
    net_cfg = NetworkConfig(**bundle["net_config"])
    age_cfg = AgeCodeConfig(**bundle["age_config"])
    enc = Encoder(net_cfg, age_cfg)
    enc.load_state_dict(bundle["encoder"])
    enc.eval()
    return enc, age_cfg


# -- paired evaluation ---------------------------------------------------


@dataclass(frozen=True)
class MetricReport:
    """Aggregate fidelity and age-accuracy numbers over an evaluation set."""

    psnr: float
    ssim: float
    mse: float
    n_pairs: int
    pad: float | None = None
    pad_clusters: dict[str, float] | None = None

    def as_dict(self) -> dict:
        d = {
            "psnr": self.psnr,
            "ssim": self.ssim,
            "mse": self.mse,
            "n_pairs": self.n_pairs,
            "pad": self.pad,
        }
        if self.pad_clusters is not None:
            for k, v in self.pad_clusters.items():
                d[f"pad_{k}"] = v
        return d

    def write_json(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.as_dict(), f, indent=1, sort_keys=True)
            f.write("\n")

    def write_csv(self, path) -> None:
        d = self.as_dict()
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(list(d))
            writer.writerow([d[k] for k in d])


def longitudinal_pairs(manifest: DatasetManifest) -> list[tuple]:
    """(younger record, older record) pairs sharing a subject."""
    by_subject: dict[str, list] = {}
    for rec in manifest.records:
        by_subject.setdefault(rec.subject_id, []).append(rec)
    pairs = []
    for recs in by_subject.values():
        recs = sorted(recs, key=lambda r: r.age)
        for i in range(len(recs)):
            for j in range(i + 1, len(recs)):
                if recs[j].age > recs[i].age:
                    pairs.append((recs[i], recs[j]))
    return pairs


def evaluate_pairs(
    model: AgeTransformer | None,
    manifest: DatasetManifest,
    base_dir=None,
    regressor: Encoder | None = None,
    age_cfg: AgeCodeConfig = AgeCodeConfig(),
    pad_age_stride: int = 4,
) -> MetricReport:
    """Transform each younger record to its pair's age and score the result.

    PAD additionally sweeps every source across the age range (with the
    given stride) when a regressor is supplied; without one, PAD is None.
    """
    from .volio import resolve_image

    pairs = longitudinal_pairs(manifest)
    if not pairs:
        raise ValueError("manifest has no longitudinal pairs to evaluate")
    psnrs, ssims, mses = [], [], []
    sources = []
    for young, old in pairs:
        x = resolve_image(manifest, young, base_dir)
        gt = resolve_image(manifest, old, base_dir)
        out = _batched_transform(model, x.data[None], [old.age])[0]
        psnrs.append(psnr(out, gt.data))
        ssims.append(ssim(out, gt.data))
        mses.append(mse(out, gt.data))
        sources.append(x.data)

    pad = None
    clusters = None
    if regressor is not None:
        sweep = np.arange(age_cfg.age_min, age_cfg.age_max + 1, pad_age_stride)
        stack = np.repeat(np.stack(sources), len(sweep), axis=0)
        targets = np.tile(sweep, len(sources))
        report = pad_metric(model, regressor, stack, targets, age_cfg)
        pad = report.overall
        clusters = report.clusters
    return MetricReport(
        psnr=float(np.mean(psnrs)),
        ssim=float(np.mean(ssims)),
        mse=float(np.mean(mses)),
        n_pairs=len(pairs),
        pad=pad,
        pad_clusters=clusters,
    )
