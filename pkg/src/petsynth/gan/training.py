"""Conditional-GAN training loop, checkpointing and synthesis."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from ..preprocess import NormalizationParams
from ..tensor import Adam, Tensor, load_checkpoint, no_grad, save_checkpoint
from ..volume import Volume3D
from .losses import lsgan_d_loss, lsgan_g_loss, masked_l1_loss
from .networks import ConfigError, Discriminator, DiscriminatorConfig, Generator, GeneratorConfig

log = logging.getLogger(__name__)


class NumericalError(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 2
    lr_g: float = 2e-4
    lr_d: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    lambda_mask: float = 100.0
    seed: int = 0
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.lambda_mask < 0:
            raise ConfigError("lambda_mask must be >= 0")
        if not (self.lr_g > 0 and self.lr_d > 0):
            raise ConfigError("learning rates must be positive")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")


class TrainingPair(NamedTuple):
    """Normalized MRI, normalized PET and brain mask, each (X, Y, Z)."""

    mri: np.ndarray
    pet: np.ndarray
    mask: np.ndarray


class StepReport(NamedTuple):
    loss_d: float
    loss_g_adv: float
    loss_mask: float


@dataclass
class EpochRecord:
    epoch: int
    loss_d: float
    loss_g_adv: float
    loss_mask: float


@dataclass
class GanModel:
    generator: Generator
    discriminator: Discriminator
    train_config: TrainConfig = field(default_factory=TrainConfig)
    norm_params: NormalizationParams | None = None
    epoch: int = 0
    opt_g: Adam = None
    opt_d: Adam = None

    def __post_init__(self):
        tc = self.train_config
        if self.opt_g is None:
            self.opt_g = Adam(self.generator.parameters(), tc.lr_g, (tc.beta1, tc.beta2))
        if self.opt_d is None:
            self.opt_d = Adam(self.discriminator.parameters(), tc.lr_d, (tc.beta1, tc.beta2))

    @classmethod
    def create(cls, gen_config: GeneratorConfig | None = None, disc_config: DiscriminatorConfig | None = None,
               train_config: TrainConfig | None = None, norm_params: NormalizationParams | None = None
               ) -> GanModel:
        tc = train_config or TrainConfig()
        g = Generator(gen_config, np.random.default_rng([tc.seed, 10]))
        d = Discriminator(disc_config, np.random.default_rng([tc.seed, 11]))
        return cls(g, d, tc, norm_params)


def _stack(pairs: Sequence[TrainingPair]):
    mri = np.stack([p.mri for p in pairs])[:, None].astype(np.float32)
    pet = np.stack([p.pet for p in pairs])[:, None].astype(np.float32)
    mask = np.stack([p.mask for p in pairs])[:, None].astype(np.float32)
    return mri, pet, mask


def _finite(name: str, value: Tensor) -> float:
    v = value.item()
    if not math.isfinite(v):
        raise NumericalError(f"non-finite {name} ({v})")
    return v


def train_step(batch: Sequence[TrainingPair], model: GanModel, config: TrainConfig | None = None) -> StepReport:
    """One discriminator update on detached synthetic pairs, then one
    generator update on ``loss_g_adv + lambda_mask * masked L1``."""
    config = config or model.train_config
    G, D = model.generator.train(), model.discriminator.train()
    mri, pet, mask = (Tensor(a) for a in _stack(batch))

    fake = G(mri)
    fake_detached = fake.detach()
    loss_d = lsgan_d_loss(D(pet, mri), D(fake_detached, mri))
    ld = _finite("discriminator loss", loss_d)
    model.opt_d.zero_grad()
    loss_d.backward()
    model.opt_d.step()

    loss_adv = lsgan_g_loss(D(fake, mri))
    loss_mask = masked_l1_loss(fake, pet, mask.data)
    la = _finite("generator adversarial loss", loss_adv)
    lm = _finite("masked L1 loss", loss_mask)
    loss_g = loss_adv + loss_mask * config.lambda_mask if config.lambda_mask else loss_adv
    model.opt_g.zero_grad()
    loss_g.backward()
    model.opt_g.step()
    # The generator pass also deposits gradients on D; they must not leak
    # into the next discriminator update.
    model.opt_d.zero_grad()
    return StepReport(ld, la, lm)


def batch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, 20, epoch]).permutation(n)


def train(dataset: Sequence[TrainingPair], config: TrainConfig | None = None, model: GanModel | None = None,
          gen_config: GeneratorConfig | None = None, disc_config: DiscriminatorConfig | None = None,
          out_dir=None, norm_params: NormalizationParams | None = None, callback=None
          ) -> tuple[GanModel, list[EpochRecord]]:
    """Train for ``config.epochs`` epochs of seeded-shuffled batches.

    With ``out_dir`` set, writes ``loss_log.csv`` after every epoch and
    checkpoints every ``config.checkpoint_every`` epochs plus at the end.
    """
    if not dataset:
        raise ValueError("training set is empty")
    config = config or TrainConfig()
    if model is None:
        model = GanModel.create(gen_config, disc_config, config, norm_params)
    model.generator.check_dims(dataset[0].mri.shape)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    history: list[EpochRecord] = []
    for _ in range(config.epochs):
        epoch = model.epoch + 1
        order = batch_order(len(dataset), config.seed, epoch)
        reports = []
        for start in range(0, len(order), config.batch_size):
            batch = [dataset[i] for i in order[start:start + config.batch_size]]
            reports.append(train_step(batch, model, config))
        means = np.mean(np.array(reports, dtype=np.float64), axis=0)
        rec = EpochRecord(epoch, *(float(v) for v in means))
        history.append(rec)
        model.epoch = epoch
        log.info("epoch %d: loss_d %.4f loss_g_adv %.4f loss_mask %.5f", epoch, *means)
        if out is not None:
            write_loss_log(history, out / "loss_log.csv")
            if config.checkpoint_every and epoch % config.checkpoint_every == 0:
                save_model(model, out / f"checkpoint_epoch{epoch:04d}.ckpt")
        if callback is not None:
            callback(rec, model)
    if out is not None:
        save_model(model, out / "model.ckpt")
    return model, history


def write_loss_log(history: Sequence[EpochRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss_d", "loss_g_adv", "loss_mask"])
        for r in history:
            w.writerow([r.epoch, f"{r.loss_d:.9g}", f"{r.loss_g_adv:.9g}", f"{r.loss_mask:.9g}"])


def read_loss_log(path) -> list[EpochRecord]:
    with open(path, newline="") as fh:
        return [EpochRecord(int(r["epoch"]), float(r["loss_d"]), float(r["loss_g_adv"]), float(r["loss_mask"]))
                for r in csv.DictReader(fh)]


# checkpoints ---------------------------------------------------------------

def _sidecar(path) -> Path:
    return Path(str(path) + ".json")


def save_model(model: GanModel, path) -> None:
    """Weights, spectral vectors and optimizer moments in the tensor checkpoint
    format, plus a JSON sidecar with configs, epoch and normalization."""
    tensors = {}
    tensors.update({f"G.{k}": v for k, v in model.generator.state_dict().items()})
    tensors.update({f"D.{k}": v for k, v in model.discriminator.state_dict().items()})
    tensors.update(model.opt_g.state_dict("optG."))
    tensors.update(model.opt_d.state_dict("optD."))
    save_checkpoint(path, tensors)
    meta = {
        "format": "petsynth-gan",
        "epoch": model.epoch,
        "generator": model.generator.config.to_dict(),
        "discriminator": model.discriminator.config.to_dict(),
        "train": asdict(model.train_config),
        "normalization": asdict(model.norm_params) if model.norm_params else None,
    }
    _sidecar(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_model(path) -> GanModel:
    meta = json.loads(_sidecar(path).read_text())
    tc = TrainConfig(**meta["train"])
    norm = NormalizationParams(**meta["normalization"]) if meta.get("normalization") else None
    model = GanModel.create(GeneratorConfig(**meta["generator"]), DiscriminatorConfig(**meta["discriminator"]),
                            tc, norm)
    tensors = load_checkpoint(path)
    for prefix, module in (("G.", model.generator), ("D.", model.discriminator)):
        module.load_state_dict({k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)})
    model.opt_g.load_state_dict(tensors, "optG.")
    model.opt_d.load_state_dict(tensors, "optD.")
    model.epoch = int(meta["epoch"])
    return model


# inference -----------------------------------------------------------------

def generate_normalized(model: GanModel, mri: np.ndarray) -> np.ndarray:
    """Generator output in normalized units for one (X, Y, Z) MRI."""
    G = model.generator.eval()
    with no_grad():
        out = G(Tensor(np.asarray(mri, dtype=np.float32)[None, None]))
    G.train()
    return out.data[0, 0]


def synthesize(model: GanModel, mri: Volume3D, norm_params: NormalizationParams | None = None) -> Volume3D:
    """Synthetic PET in SUVR units for a preprocessed (normalized) MRI."""
    params = norm_params or model.norm_params
    if params is None:
        raise ValueError("synthesis needs normalization parameters to return SUVR values")
    return mri.with_data(params.inverse(generate_normalized(model, mri.data)))
