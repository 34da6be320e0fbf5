"""Training loop: alternating transformer and critic updates.

Randomness is decomposed so runs are reproducible and resumable: model init
comes from the torch seed, epoch shuffles and per-step draws (target
sampling, augmentation policy) come from numpy generators keyed by
(seed, epoch, step). Resuming from an epoch-boundary checkpoint therefore
continues the exact same trajectory.
"""
from __future__ import annotations

import csv
import dataclasses
import json
from dataclasses import dataclass, field
from itertools import chain
from pathlib import Path

import numpy as np
import torch

from .agecode import AgeCodeConfig, kl_age_loss, soft_label_batch
from .critic import PatchCritic
from .image import Image, augment
from .losses import (
    LossWeights,
    adv_d_loss,
    adv_g_loss,
    cycle_loss,
    identity_loss,
    rec_loss,
    total_generator_loss,
)
from .nets import AgeTransformer, NetworkConfig
from .phantom import DatasetManifest
from .volio import dataset_arrays

LOG_COLUMNS = (
    "step",
    "epoch",
    "L_advG",
    "L_advD",
    "L_age1",
    "L_age2",
    "L_iden",
    "L_cyc",
    "L_rec",
    "total",
)

CHECKPOINT_GROUPS = (
    "encoder",
    "identity_extractor",
    "mapping",
    "age_injector",
    "generator",
    "critic",
    "critic_mapping",
)


@dataclass(frozen=True)
class AblationConfig:
    """Switches that drop objective pieces or the critic's conditioning."""

    drop_identity_loss: bool = False       # case1: no identity loss at all
    drop_similarity_term: bool = False     # case2: keep only orthogonality
    drop_orthogonality_term: bool = False  # case3: keep only similarity
    unconditional_critic: bool = False     # case4: plain patch critic

    _CASES = {
        "case1": {"drop_identity_loss": True},
        "case2": {"drop_similarity_term": True},
        "case3": {"drop_orthogonality_term": True},
        "case4": {"unconditional_critic": True},
    }

    @classmethod
    def from_case(cls, case: str | None) -> "AblationConfig":
        if case is None or case == "full":
            return cls()
        try:
            return cls(**cls._CASES[case])
        except KeyError:
            raise ValueError(
                f"unknown ablation {case!r}; pick one of {sorted(cls._CASES)}"
            ) from None


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 64
    lr_encoder: float = 1e-3
    lr_generator: float = 5e-4   # decoder, age injector, and the critic
    lr_mapping: float = 1e-5     # mapping network and identity extractor
    scheduler_step: int = 30
    scheduler_gamma: float = 0.3
    seed: int = 0
    flip_prob: float = 0.5
    blur_prob: float = 0.5
    blur_sigma_max: float = 1.0
    checkpoint_every: int = 0    # epochs between checkpoints; 0 = final only
    weights: LossWeights = field(default_factory=LossWeights)
    ablation: AblationConfig = field(default_factory=AblationConfig)

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 2:
            raise ValueError("need epochs >= 1 and batch_size >= 2")
        for name in ("lr_encoder", "lr_generator", "lr_mapping"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0 <= self.flip_prob <= 1 or not 0 <= self.blur_prob <= 1:
            raise ValueError("probabilities must lie in [0, 1]")
        if self.blur_sigma_max < 0:
            raise ValueError("blur_sigma_max must be non-negative")


class FrozenSnapshot:
    """Gradient-isolated view of a module's current weights.

    Calls run against detached parameter views and cloned buffers, so the
    target module gets exactly zero gradient from anything computed through
    the snapshot and its running statistics never move. Because the views
    are rebuilt per call, the snapshot always reflects the latest update.
    """

    def __init__(self, module: torch.nn.Module):
        self._module = module

    def __call__(self, *args, **kwargs):
        overrides = {n: p.detach() for n, p in self._module.named_parameters()}
        overrides.update({n: b.clone() for n, b in self._module.named_buffers()})
        return torch.func.functional_call(self._module, overrides, args, kwargs)


def freeze_snapshot(module: torch.nn.Module) -> FrozenSnapshot:
    return FrozenSnapshot(module)


def sample_targets(batch_ages, images: np.ndarray, ages: np.ndarray, rng):
    """Draw one real record per batch element: its age becomes the target.

    Sampling records (not ages) guarantees every target age has a real
    image for the critic, and is uniform over records.
    """
    n = len(batch_ages)
    idx = rng.integers(0, len(ages), size=n)
    return ages[idx].copy(), images[idx].copy()


def _step_rng(seed: int, epoch: int, step: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(epoch, step)))


def _epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(epoch,)))


class Trainer:
    """Owns the model, critic, their optimizers, and the step logic."""

    def __init__(
        self,
        net_cfg: NetworkConfig,
        age_cfg: AgeCodeConfig,
        train_cfg: TrainConfig,
    ):
        torch.manual_seed(train_cfg.seed)
        self.net_cfg = net_cfg
        self.age_cfg = age_cfg
        self.cfg = train_cfg
        self.model = AgeTransformer(net_cfg, age_cfg)
        self.critic = PatchCritic(
            net_cfg, age_cfg, conditional=not train_cfg.ablation.unconditional_critic
        )
        betas = (0.9, 0.999)
        self.opt_encoder = torch.optim.Adam(
            self.model.encoder.parameters(), lr=train_cfg.lr_encoder, betas=betas
        )
        self.opt_generator = torch.optim.Adam(
            chain(self.model.generator.parameters(), self.model.age_injector.parameters()),
            lr=train_cfg.lr_generator,
            betas=betas,
        )
        self.opt_mapping = torch.optim.Adam(
            chain(self.model.mapping.parameters(), self.model.identity_extractor.parameters()),
            lr=train_cfg.lr_mapping,
            betas=betas,
        )
        self.opt_critic = torch.optim.Adam(
            self.critic.parameters(), lr=train_cfg.lr_generator, betas=betas
        )
        self.optimizers = {
            "encoder": self.opt_encoder,
            "generator": self.opt_generator,
            "mapping": self.opt_mapping,
            "critic": self.opt_critic,
        }
        self.schedulers = {
            name: torch.optim.lr_scheduler.StepLR(
                opt, step_size=train_cfg.scheduler_step, gamma=train_cfg.scheduler_gamma
            )
            for name, opt in self.optimizers.items()
        }
        self.epoch = 0
        self.global_step = 0

    def _to_batch(self, array: np.ndarray) -> torch.Tensor:
        return torch.from_numpy(np.ascontiguousarray(array, dtype=np.float32)).unsqueeze(1)

    def train_step(self, x, x_aug, ages, target_ages, x_real) -> dict:
        """One alternating update; returns the per-term loss report.

        Inputs are numpy arrays: images (batch, *spatial) and integer ages.
        """
        self.model.train()
        self.critic.train()
        ablate = self.cfg.ablation
        x_t = self._to_batch(x)
        x_aug_t = self._to_batch(x_aug)
        x_real_t = self._to_batch(x_real)
        ages_t = torch.as_tensor(ages, dtype=torch.float32)
        targets_t = torch.as_tensor(target_ages, dtype=torch.float32)
        soft_src = torch.from_numpy(soft_label_batch(ages, self.age_cfg)).float()
        soft_tgt = torch.from_numpy(soft_label_batch(target_ages, self.age_cfg)).float()

        # Transformer side. The encoder sees the augmented batch for its own
        # age loss; the transformation path works on clean images.
        feats_aug = self.model.encode(x_aug_t)
        l_age1 = kl_age_loss(feats_aug.age_probs(), soft_src)

        feats = self.model.encode(x_t)
        f_iden = self.model.extract_identity(feats.levels)
        embedding = self.model.embed_age(targets_t)
        conditioned = self.model.inject_age(f_iden, embedding)
        x_hat = self.model.generate(conditioned, x_t)

        # Age of the output, judged by a frozen view of the current encoder.
        e_star = freeze_snapshot(self.model.encoder)
        l_age2 = kl_age_loss(torch.softmax(e_star(x_hat).age_logits, dim=-1), soft_tgt)

        terms = {"age1": l_age1, "age2": l_age2}
        if not ablate.drop_identity_loss:
            feats_hat = self.model.encode(x_hat)
            f_iden_hat = self.model.extract_identity(feats_hat.levels)
            terms["iden"] = identity_loss(
                f_iden,
                f_iden_hat,
                feats.levels,
                include_similarity=not ablate.drop_similarity_term,
                include_orthogonality=not ablate.drop_orthogonality_term,
            )

        x_cyc = self.model(x_hat, ages_t)
        terms["cyc"] = cycle_loss(x_t, x_cyc)
        terms["rec"] = rec_loss(x_t, x_hat, ages_t, targets_t, self.cfg.weights)

        # Adversarial push through a frozen view of the critic, so the critic
        # itself receives exactly zero gradient from the generator update.
        d_star = freeze_snapshot(self.critic)
        fake_scores = (
            d_star(x_hat, targets_t) if self.critic.conditional else d_star(x_hat)
        )
        terms["adv_g"] = adv_g_loss(fake_scores)

        total = total_generator_loss(terms, self.cfg.weights)
        for opt in self.optimizers.values():
            opt.zero_grad(set_to_none=True)
        total.backward()
        self.opt_encoder.step()
        self.opt_generator.step()
        self.opt_mapping.step()

        # Critic side: real records at their own age vs detached fakes.
        if self.critic.conditional:
            real_scores = self.critic(x_real_t, targets_t)
            fake_scores_d = self.critic(x_hat.detach(), targets_t)
        else:
            real_scores = self.critic(x_real_t)
            fake_scores_d = self.critic(x_hat.detach())
        l_adv_d = adv_d_loss(real_scores, fake_scores_d)
        self.opt_critic.zero_grad(set_to_none=True)
        l_adv_d.backward()
        self.opt_critic.step()

        self.global_step += 1

        def scalar(t):
            return float(t.detach()) if isinstance(t, torch.Tensor) else float(t)

        return {
            "L_advG": scalar(terms["adv_g"]),
            "L_advD": scalar(l_adv_d),
            "L_age1": scalar(l_age1),
            "L_age2": scalar(l_age2),
            "L_iden": scalar(terms["iden"]) if "iden" in terms else 0.0,
            "L_cyc": scalar(terms["cyc"]),
            "L_rec": scalar(terms["rec"]),
            "total": scalar(total),
        }

    # -- persistence ---------------------------------------------------

    def _critic_groups(self):
        full = self.critic.state_dict()
        mapping = {k: v for k, v in full.items() if k.startswith("mapping.")}
        rest = {k: v for k, v in full.items() if not k.startswith("mapping.")}
        return rest, mapping

    def save_checkpoint(self, path) -> Path:
        path = Path(path)
        critic_rest, critic_mapping = self._critic_groups()
        bundle = {
            "format_version": 1,
            "groups": {
                "encoder": self.model.encoder.state_dict(),
                "identity_extractor": self.model.identity_extractor.state_dict(),
                "mapping": self.model.mapping.state_dict(),
                "age_injector": self.model.age_injector.state_dict(),
                "generator": self.model.generator.state_dict(),
                "critic": critic_rest,
                "critic_mapping": critic_mapping,
            },
            "optimizers": {n: o.state_dict() for n, o in self.optimizers.items()},
            "schedulers": {n: s.state_dict() for n, s in self.schedulers.items()},
            "epoch": self.epoch,
            "global_step": self.global_step,
            "net_config": dataclasses.asdict(self.net_cfg),
            "age_config": dataclasses.asdict(self.age_cfg),
            "train_config": dataclasses.asdict(self.cfg),
            "torch_rng": torch.get_rng_state(),
        }
        torch.save(bundle, path)
        sidecar = {
            "epoch": self.epoch,
            "global_step": self.global_step,
            "seed": self.cfg.seed,
            "net_config": dataclasses.asdict(self.net_cfg),
            "age_config": dataclasses.asdict(self.age_cfg),
            "train_config": dataclasses.asdict(self.cfg),
        }
        with open(path.with_suffix(path.suffix + ".json"), "w") as f:
            json.dump(sidecar, f, indent=1, sort_keys=True)
            f.write("\n")
        return path

    @classmethod
    def from_checkpoint(cls, path) -> "Trainer":
        bundle = torch.load(path, map_location="cpu", weights_only=False)
        if bundle.get("format_version") != 1:
            raise ValueError(f"{path}: unsupported checkpoint format")
        net_cfg = NetworkConfig(**bundle["net_config"])
        age_cfg = AgeCodeConfig(**bundle["age_config"])
        tc = dict(bundle["train_config"])
        tc["weights"] = LossWeights(**tc["weights"])
        tc["ablation"] = AblationConfig(**tc["ablation"])
        trainer = cls(net_cfg, age_cfg, TrainConfig(**tc))
        groups = bundle["groups"]
        trainer.model.encoder.load_state_dict(groups["encoder"])
        trainer.model.identity_extractor.load_state_dict(groups["identity_extractor"])
        trainer.model.mapping.load_state_dict(groups["mapping"])
        trainer.model.age_injector.load_state_dict(groups["age_injector"])
        trainer.model.generator.load_state_dict(groups["generator"])
        trainer.critic.load_state_dict({**groups["critic"], **groups["critic_mapping"]})
        for name, opt in trainer.optimizers.items():
            opt.load_state_dict(bundle["optimizers"][name])
        for name, sch in trainer.schedulers.items():
            sch.load_state_dict(bundle["schedulers"][name])
        trainer.epoch = bundle["epoch"]
        trainer.global_step = bundle["global_step"]
        torch.set_rng_state(bundle["torch_rng"])
        return trainer


def _augment_batch(x: np.ndarray, cfg: TrainConfig, rng) -> np.ndarray:
    flips = rng.random(len(x)) < cfg.flip_prob
    blurs = rng.random(len(x)) < cfg.blur_prob
    sigmas = rng.uniform(0.0, cfg.blur_sigma_max, size=len(x))
    out = np.empty_like(x)
    for i in range(len(x)):
        sigma = float(sigmas[i]) if blurs[i] else 0.0
        out[i] = augment(Image(x[i]), flip=bool(flips[i]), blur_sigma=sigma).data
    return out


def run_training(
    manifest: DatasetManifest,
    net_cfg: NetworkConfig,
    age_cfg: AgeCodeConfig,
    train_cfg: TrainConfig,
    out_dir,
    base_dir=None,
    resume_from=None,
    log_hook=None,
) -> dict:
    """Train on a manifest and leave a checkpoint plus per-step loss log.

    Returns a summary dict with the checkpoint and log paths. ``log_hook``,
    if given, is called with each report row (used by tests and the CLI).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    images, ages, _ids = dataset_arrays(manifest, base_dir)

    if resume_from is not None:
        # Hyperparameters come from the checkpoint; only the target epoch
        # count is taken from the caller so a run can be extended.
        trainer = Trainer.from_checkpoint(resume_from)
        trainer.cfg = dataclasses.replace(trainer.cfg, epochs=train_cfg.epochs)
    else:
        trainer = Trainer(net_cfg, age_cfg, train_cfg)
    cfg = trainer.cfg

    log_path = out_dir / "loss_log.csv"
    fresh_log = not (resume_from is not None and log_path.exists())
    log_file = open(log_path, "w" if fresh_log else "a", newline="")
    writer = csv.writer(log_file)
    if fresh_log:
        writer.writerow(LOG_COLUMNS)

    checkpoint_path = out_dir / "checkpoint.pt"
    try:
        for epoch in range(trainer.epoch, cfg.epochs):
            order = _epoch_rng(cfg.seed, epoch).permutation(len(images))
            n_batches = 0
            for start in range(0, len(order), cfg.batch_size):
                idx = order[start : start + cfg.batch_size]
                if len(idx) < 2:
                    continue  # train-mode batch norm needs at least two samples
                rng = _step_rng(cfg.seed, epoch, n_batches)
                x = images[idx]
                a = ages[idx]
                t_ages, x_real = sample_targets(a, images, ages, rng)
                x_aug = _augment_batch(x, cfg, rng)
                report = trainer.train_step(x, x_aug, a, t_ages, x_real)
                row = [trainer.global_step, epoch] + [
                    report[c] for c in LOG_COLUMNS[2:]
                ]
                writer.writerow(row)
                if log_hook is not None:
                    log_hook(dict(zip(LOG_COLUMNS, row)))
                n_batches += 1
            for sch in trainer.schedulers.values():
                sch.step()
            trainer.epoch = epoch + 1
            log_file.flush()
            if cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                trainer.save_checkpoint(checkpoint_path)
        trainer.save_checkpoint(checkpoint_path)
    finally:
        log_file.close()

    return {
        "checkpoint": str(checkpoint_path),
        "loss_log": str(log_path),
        "epochs_run": trainer.epoch,
        "global_step": trainer.global_step,
    }


def load_transformer(path) -> tuple[AgeTransformer, PatchCritic, dict]:
    """Load a checkpoint into fresh eval-mode modules (no optimizer state)."""
    trainer = Trainer.from_checkpoint(path)
    trainer.model.eval()
    trainer.critic.eval()
    meta = {
        "epoch": trainer.epoch,
        "global_step": trainer.global_step,
        "net_config": trainer.net_cfg,
        "age_config": trainer.age_cfg,
        "train_config": trainer.cfg,
    }
    return trainer.model, trainer.critic, meta
