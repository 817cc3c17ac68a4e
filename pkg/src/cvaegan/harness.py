"""Two-stage training orchestration, checkpoints, loss logs and sample grids."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from . import checkpoint as ckpt
from .data import ImageTextDataset, batch_iterator, load_dataset, load_embeddings, to_uint8
from .errors import ConfigurationError, FormatError, NonFiniteLossError
from .metrics import Classifier, MetricReport, evaluate
from .optim import AdamState, Schedule, lr_at
from .stage1 import CvaeConfig, CvaeModel, cvae_train_step
from .stage2 import Discriminator, GanConfig, Generator, cgan_train_step, sample_images

logger = logging.getLogger(__name__)

GRID_SIDE = 8


# -- configuration --------------------------------------------------------------


@dataclass
class TrainConfig:
    stage: int = 1
    epochs: int = 150
    batch_size: int = 64
    lr: Optional[float] = None  # None -> 0.0002 for stage 1, 0.002 for stage 2
    beta1: float = 0.9
    decay_factor: float = 0.2
    decay_every: int = 25
    seed: int = 0
    image_size: int = 64
    cond_dim: int = 128
    latent_dim: int = 100
    lam: float = 1.0
    embedding_dim: int = 0  # 0 -> taken from the embedding file
    base_channels: int = 64
    hidden_dim: int = 2048
    g_base: int = 64
    g_cond_channels: int = 128
    d_base: int = 16
    d_cond_channels: int = 128
    res_blocks: int = 2
    g_objective: str = "non_saturating"
    n_train_classes: int = 0  # 0 -> no class split, train on every record
    split_seed: int = 0
    crop_ratio: float = 0.0
    checkpoint_every: int = 10
    sample_every: int = 10
    data: str = ""
    out: str = "runs"
    stage1: str = ""

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ConfigurationError(f"stage must be 1 or 2, got {self.stage}")
        for name in ("epochs", "batch_size", "image_size", "cond_dim", "latent_dim"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be positive")
        if self.batch_size < 2:
            raise ConfigurationError("batch_size must be at least 2 for batch norm")

    @property
    def learning_rate(self) -> float:
        if self.lr is not None:
            return self.lr
        return 0.0002 if self.stage == 1 else 0.002

    @property
    def schedule(self) -> Schedule:
        return Schedule(self.learning_rate, self.decay_factor, self.decay_every)

    def cvae_config(self) -> CvaeConfig:
        return CvaeConfig(
            image_size=self.image_size,
            embedding_dim=self.embedding_dim,
            latent_dim=self.latent_dim,
            cond_dim=self.cond_dim,
            base_channels=self.base_channels,
            hidden_dim=self.hidden_dim,
        )

    def gan_config(self) -> GanConfig:
        return GanConfig(
            stage1_size=self.image_size,
            embedding_dim=self.embedding_dim,
            cond_dim=self.cond_dim,
            g_base=self.g_base,
            g_cond_channels=self.g_cond_channels,
            num_res_blocks=self.res_blocks,
            d_base=self.d_base,
            d_cond_channels=self.d_cond_channels,
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ConfigurationError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**values)


# "lambda" is a keyword in Python; the config file spells it out
_FILE_ALIASES = {"lambda": "lam"}

PROFILES = {
    "full": {},
    "desk": {
        "image_size": 16,
        "base_channels": 32,
        "g_base": 16,
        "g_cond_channels": 32,
        "d_cond_channels": 32,
        "n_train_classes": 18,
    },
}
# per-stage defaults; the desk GAN needs more, smaller updates and a lower beta1 to avoid collapse
PROFILE_STAGES = {
    "full": {1: {"epochs": 150}, 2: {"epochs": 150}},
    "desk": {
        1: {"epochs": 50},
        2: {"epochs": 30, "batch_size": 16, "lr": 5e-4, "beta1": 0.5},
    },
}


def _coerce(name: str, text: str):
    ftype = {f.name: f.type for f in fields(TrainConfig)}[name]
    text = text.strip()
    if "Optional" in str(ftype):
        return None if text.lower() in ("", "none") else float(text)
    if ftype in (int, "int"):
        return int(text)
    if ftype in (float, "float"):
        return float(text)
    return text


def parse_config(text: str, **overrides) -> TrainConfig:
    """Parse flat ``key=value`` lines; ``#`` starts a comment.

    A ``profile`` key (``full`` or ``desk``) seeds defaults that later keys
    override. Unknown keys are rejected.
    """
    raw = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"config line {lineno}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        raw[_FILE_ALIASES.get(key, key)] = value
    raw.update({k: str(v) for k, v in overrides.items() if v is not None})
    profile = raw.pop("profile", "full")
    if profile not in PROFILES:
        raise ConfigurationError(f"unknown profile {profile!r}")
    known = {f.name for f in fields(TrainConfig)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigurationError(f"unknown config keys: {', '.join(unknown)}")
    values = dict(PROFILES[profile])
    try:
        coerced = {k: _coerce(k, v) for k, v in raw.items()}
    except ValueError as exc:
        raise ConfigurationError(f"bad config value: {exc}") from exc
    values.update(PROFILE_STAGES[profile].get(coerced.get("stage", 1), {}))
    values.update(coerced)
    return TrainConfig.from_dict(values)


def load_config(path, **overrides) -> TrainConfig:
    return parse_config(Path(path).read_text(), **overrides)


def format_config(config: TrainConfig) -> str:
    lines = []
    for key, value in config.to_dict().items():
        key = {v: k for k, v in _FILE_ALIASES.items()}.get(key, key)
        lines.append(f"{key}={'' if value is None else value}")
    return "\n".join(lines) + "\n"


# -- loss log -------------------------------------------------------------------


@dataclass
class LossLog:
    rows: list = field(default_factory=list)  # (epoch, minibatch, name, value)

    def add(self, epoch: int, minibatch: int, name: str, value: float) -> None:
        self.rows.append((int(epoch), int(minibatch), str(name), float(value)))

    def series(self, name: str) -> np.ndarray:
        return np.array([r[3] for r in self.rows if r[2] == name])

    def epoch_means(self, name: str) -> dict:
        out = {}
        for epoch, _, n, value in self.rows:
            if n == name:
                out.setdefault(epoch, []).append(value)
        return {e: float(np.mean(v)) for e, v in out.items()}

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["epoch", "minibatch", "name", "value"])
            for epoch, mb, name, value in self.rows:
                w.writerow([epoch, mb, name, repr(value)])

    @classmethod
    def read_csv(cls, path) -> "LossLog":
        log = cls()
        with open(path, newline="") as f:
            reader = csv.reader(f)
            header = next(reader, None)
            if header != ["epoch", "minibatch", "name", "value"]:
                raise FormatError(f"{path}: unexpected loss-log header {header}")
            for row in reader:
                log.add(int(row[0]), int(row[1]), row[2], float(row[3]))
        return log


# -- checkpoint helpers -----------------------------------------------------------------


def _prefixed(prefix: str, d: dict) -> dict:
    return {f"{prefix}.{k}": v for k, v in d.items()}


def _strip(prefix: str, d: dict) -> dict:
    p = prefix + "."
    return {k[len(p) :]: v for k, v in d.items() if k.startswith(p)}


def _opt_tensors(name: str, state: AdamState) -> dict:
    out = _prefixed(f"opt.{name}.m", state.m)
    out.update(_prefixed(f"opt.{name}.v", state.v))
    return out


def _opt_restore(name: str, tensors: dict, step_count: int) -> AdamState:
    state = AdamState(step_count=step_count)
    state.m = {k: v.copy() for k, v in _strip(f"opt.{name}.m", tensors).items()}
    state.v = {k: v.copy() for k, v in _strip(f"opt.{name}.v", tensors).items()}
    return state


def save_checkpoint(path, models: dict, config: TrainConfig, epoch: int, rng=None, optimizers=None):
    """Write ``models`` (name -> Module) plus optional optimizer state and RNG state."""
    tensors = {}
    for name, model in models.items():
        tensors.update(_prefixed(name, model.state_dict()))
    meta = {"config": config.to_dict(), "epoch": int(epoch), "models": list(models)}
    if optimizers:
        for name, state in optimizers.items():
            tensors.update(_opt_tensors(name, state))
        meta["optimizer_steps"] = {k: s.step_count for k, s in optimizers.items()}
    if rng is not None:
        meta["rng_state"] = rng.bit_generator.state
    return ckpt.write_checkpoint(path, tensors, meta)


def build_models(config: TrainConfig) -> dict:
    if config.stage == 1:
        return {"stage1": CvaeModel(config.cvae_config(), seed=config.seed)}
    gan = config.gan_config()
    return {
        "gen": Generator(gan, seed=config.seed + 1),
        "disc": Discriminator(gan, seed=config.seed + 2),
    }


@dataclass
class LoadedCheckpoint:
    config: TrainConfig
    models: dict
    epoch: int
    meta: dict
    tensors: dict

    def optimizer(self, name: str) -> AdamState:
        steps = self.meta.get("optimizer_steps", {}).get(name, 0)
        return _opt_restore(name, self.tensors, steps)

    def rng(self) -> np.random.Generator:
        rng = np.random.default_rng()
        rng.bit_generator.state = self.meta["rng_state"]
        return rng


def load_checkpoint(path, image_size: Optional[int] = None) -> LoadedCheckpoint:
    """Read a checkpoint and rebuild its models.

    ``image_size`` (the stage-1 resolution), when given, must match the one
    the checkpoint was trained with.
    """
    tensors, meta = ckpt.read_checkpoint(path)
    try:
        config = TrainConfig.from_dict(meta["config"])
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{path}: metadata lacks a usable config") from exc
    if image_size is not None and config.image_size != image_size:
        raise ConfigurationError(
            f"{path}: checkpoint image_size {config.image_size} does not match {image_size}"
        )
    models = build_models(config)
    for name, model in models.items():
        model.load_state_dict(_strip(name, tensors))
    return LoadedCheckpoint(config, models, int(meta.get("epoch", 0)), meta, tensors)


# -- image grids -----------------------------------------------------------------


def image_grid(images, columns: Optional[int] = None) -> np.ndarray:
    """Tile (N, 3, H, W) images in [-1, 1] into one (3, rows*H, cols*W) image."""
    images = np.asarray(images)
    n, c, h, w = images.shape
    columns = columns or math.ceil(math.sqrt(n))
    rows = math.ceil(n / columns)
    grid = -np.ones((c, rows * h, columns * w), dtype=np.float32)
    for i in range(n):
        r, col = divmod(i, columns)
        grid[:, r * h : (r + 1) * h, col * w : (col + 1) * w] = images[i]
    return grid


def write_png(image, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(image), mode="RGB").save(path, format="PNG")
    return path


# -- data --------------------------------------------------------------------------


def prepare_data(config: TrainConfig) -> ImageTextDataset:
    if not config.data:
        raise ConfigurationError("config needs a data directory")
    ds = load_dataset(
        config.data,
        config.image_size,
        n_train_classes=config.n_train_classes or None,
        split_seed=config.split_seed,
        crop_ratio=config.crop_ratio,
    )
    if config.embedding_dim == 0:
        config.embedding_dim = int(ds.embeddings.shape[1])
    elif config.embedding_dim != ds.embeddings.shape[1]:
        raise ConfigurationError(
            f"embedding_dim {config.embedding_dim} does not match data ({ds.embeddings.shape[1]})"
        )
    return ds


def split_part(ds: ImageTextDataset, part: str) -> ImageTextDataset:
    if ds.manifest is None or not ds.manifest.split:
        return ds
    return ds.subset(ds.manifest.indices(part))


# -- stage 1 ---------------------------------------------------------------------


def _resume_log(out: Path, name: str, start_epoch: int) -> LossLog:
    path = out / name
    if start_epoch == 0 or not path.exists():
        return LossLog()
    old = LossLog.read_csv(path)
    return LossLog([r for r in old.rows if r[0] < start_epoch])


def train_stage1(config: TrainConfig, resume=None, dataset: Optional[ImageTextDataset] = None):
    """Train the CVAE; returns the final checkpoint path.

    Writes ``stage1_losses.csv`` and ``stage1_eNNNN.ckpt`` every
    ``checkpoint_every`` epochs plus ``stage1.ckpt`` at the end.
    """
    if config.stage != 1:
        raise ConfigurationError("train_stage1 needs a stage=1 config")
    ds = dataset if dataset is not None else prepare_data(config)
    if config.embedding_dim == 0:
        config.embedding_dim = int(ds.embeddings.shape[1])
    train = split_part(ds, "train")
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)

    if resume:
        loaded = load_checkpoint(resume, image_size=config.image_size)
        model = loaded.models["stage1"]
        state = loaded.optimizer("stage1")
        rng = loaded.rng()
        start = loaded.epoch
    else:
        model = build_models(config)["stage1"]
        state = AdamState()
        rng = np.random.default_rng([config.seed, 1])
        start = 0
    state.beta1 = config.beta1
    log = _resume_log(out, "stage1_losses.csv", start)
    batches = len(train) // config.batch_size
    minibatch = start * batches

    for epoch in range(start, config.epochs):
        lr = lr_at(config.schedule, epoch)
        log.add(epoch, minibatch, "lr", lr)
        for idx in batch_iterator(len(train), config.batch_size, config.seed, epoch):
            batch = (train.images_lo[idx], train.embeddings[idx])
            try:
                losses = cvae_train_step(model, batch, state, lr, rng, config.lam)
            except NonFiniteLossError as exc:
                save_checkpoint(out / "stage1_emergency.ckpt", {"stage1": model}, config, epoch)
                log.write_csv(out / "stage1_losses.csv")
                raise NonFiniteLossError(
                    f"{exc} at epoch {epoch}, minibatch {minibatch}", epoch, minibatch
                ) from exc
            for name, value in losses.items():
                log.add(epoch, minibatch, name, value)
            minibatch += 1
        done = epoch + 1
        log.write_csv(out / "stage1_losses.csv")
        if done % config.checkpoint_every == 0 and done < config.epochs:
            save_checkpoint(
                out / f"stage1_e{done:04d}.ckpt", {"stage1": model}, config, done, rng,
                {"stage1": state},
            )
        logger.info("stage 1 epoch %d: total %.4f", epoch, log.epoch_means("total")[epoch])
    return save_checkpoint(
        out / "stage1.ckpt", {"stage1": model}, config, config.epochs, rng, {"stage1": state}
    )


# -- stage 2 ------------------------------------------------------------------------


def load_stage1(path, config: TrainConfig) -> CvaeModel:
    loaded = load_checkpoint(path, image_size=config.image_size)
    s1 = loaded.config
    if config.embedding_dim and s1.embedding_dim != config.embedding_dim:
        raise ConfigurationError(
            f"stage-1 embedding_dim {s1.embedding_dim} does not match {config.embedding_dim}"
        )
    if s1.cond_dim != config.cond_dim:
        raise ConfigurationError(f"stage-1 cond_dim {s1.cond_dim} does not match {config.cond_dim}")
    model = loaded.models["stage1"]
    model.set_trainable(False)
    return model


def grid_embeddings(embeddings: np.ndarray) -> np.ndarray:
    """Fixed 64-row conditioning set for sample grids: 8 embeddings, 8 draws each."""
    rows = np.arange(GRID_SIDE) % len(embeddings)
    return np.repeat(embeddings[rows], GRID_SIDE, axis=0)


def train_stage2(
    config: TrainConfig, stage1_checkpoint=None, resume=None, dataset=None
):
    """Train the CGAN on top of a frozen stage-1 checkpoint; returns the final path."""
    if config.stage != 2:
        raise ConfigurationError("train_stage2 needs a stage=2 config")
    stage1_checkpoint = stage1_checkpoint or config.stage1
    if not stage1_checkpoint or not Path(stage1_checkpoint).exists():
        raise ConfigurationError(f"stage-1 checkpoint {stage1_checkpoint!r} not found")
    config.stage1 = str(stage1_checkpoint)
    ds = dataset if dataset is not None else prepare_data(config)
    if config.embedding_dim == 0:
        config.embedding_dim = int(ds.embeddings.shape[1])
    stage1 = load_stage1(stage1_checkpoint, config)
    train = split_part(ds, "train")
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)

    if resume:
        loaded = load_checkpoint(resume, image_size=config.image_size)
        gen, disc = loaded.models["gen"], loaded.models["disc"]
        g_state, d_state = loaded.optimizer("gen"), loaded.optimizer("disc")
        rng = loaded.rng()
        start = loaded.epoch
    else:
        models = build_models(config)
        gen, disc = models["gen"], models["disc"]
        g_state, d_state = AdamState(), AdamState()
        rng = np.random.default_rng([config.seed, 2])
        start = 0
    g_state.beta1 = d_state.beta1 = config.beta1
    log = _resume_log(out, "stage2_losses.csv", start)
    batches = len(train) // config.batch_size
    minibatch = start * batches
    grid_emb = grid_embeddings(train.embeddings)

    def snapshot(name, epoch):
        return save_checkpoint(
            out / name, {"gen": gen, "disc": disc}, config, epoch, rng,
            {"gen": g_state, "disc": d_state},
        )

    for epoch in range(start, config.epochs):
        lr = lr_at(config.schedule, epoch)
        log.add(epoch, minibatch, "lr", lr)
        for idx in batch_iterator(len(train), config.batch_size, config.seed, epoch):
            batch = (train.images_hi[idx], train.embeddings[idx])
            try:
                loss_d, loss_g = cgan_train_step(
                    gen, disc, batch, stage1, (g_state, d_state), lr, rng, config.lam,
                    config.g_objective,
                )
            except NonFiniteLossError as exc:
                snapshot("stage2_emergency.ckpt", epoch)
                log.write_csv(out / "stage2_losses.csv")
                raise NonFiniteLossError(
                    f"{exc} at epoch {epoch}, minibatch {minibatch}", epoch, minibatch
                ) from exc
            log.add(epoch, minibatch, "L_D", loss_d)
            log.add(epoch, minibatch, "L_G", loss_g)
            minibatch += 1
        done = epoch + 1
        log.write_csv(out / "stage2_losses.csv")
        if done % config.sample_every == 0 or done == config.epochs:
            images = sample_images(gen, stage1, grid_emb, np.random.default_rng([config.seed, 3]))
            write_png(image_grid(images, GRID_SIDE), out / f"samples_e{done:04d}.png")
        if done % config.checkpoint_every == 0 and done < config.epochs:
            snapshot(f"stage2_e{done:04d}.ckpt", done)
        logger.info("stage 2 epoch %d done", epoch)
    return snapshot("stage2.ckpt", config.epochs)


# -- generation and evaluation ----------------------------------------------------------


def load_pipeline(stage1_ckpt, stage2_ckpt):
    s2 = load_checkpoint(stage2_ckpt)
    stage1 = load_stage1(stage1_ckpt, s2.config)
    return stage1, s2.models["gen"], s2.config


def generate_cmd(stage1_ckpt, stage2_ckpt, embeddings, n: int, seed: int, out_dir) -> list:
    """Write ``n`` stage-2 samples as PNGs plus ``grid.png``; returns the paths.

    Sample ``i`` is conditioned on embedding row ``i mod count``.
    """
    if not Path(embeddings).exists():
        raise FormatError(f"embedding file {embeddings} not found")
    table = load_embeddings(embeddings)
    if len(table) == 0:
        raise FormatError(f"embedding file {embeddings} is empty")
    stage1, gen, _ = load_pipeline(stage1_ckpt, stage2_ckpt)
    rng = np.random.default_rng(seed)
    rows = table[np.arange(n) % len(table)]
    images = []
    for start in range(0, n, 64):
        images.append(sample_images(gen, stage1, rows[start : start + 64], rng))
    images = np.concatenate(images) if images else np.zeros((0, 3, 1, 1))
    out = Path(out_dir)
    paths = [write_png(im, out / f"sample_{i:04d}.png") for i, im in enumerate(images)]
    paths.append(write_png(image_grid(images), out / "grid.png"))
    return paths


def save_classifier(path, model: Classifier, accuracy: float) -> Path:
    meta = {
        "kind": "classifier",
        "image_size": model.image_size,
        "num_classes": model.num_classes,
        "accuracy": accuracy,
    }
    return ckpt.write_checkpoint(path, model.state_dict(), meta)


def load_classifier(path) -> Classifier:
    tensors, meta = ckpt.read_checkpoint(path)
    if meta.get("kind") != "classifier":
        raise FormatError(f"{path} is not a classifier checkpoint")
    model = Classifier(meta["image_size"], meta["num_classes"])
    model.load_state_dict(tensors)
    model.accuracy = meta.get("accuracy")
    return model


def evaluate_cmd(stage1_ckpt, stage2_ckpt, data_dir, classifier_ckpt, n: int, seed: int = 0):
    """Score the pipeline on the test split; writes ``metrics.json`` beside stage 2."""
    stage1, gen, config = load_pipeline(stage1_ckpt, stage2_ckpt)
    config.data = str(data_dir)
    ds = split_part(prepare_data(config), "test")
    classifier = load_classifier(classifier_ckpt)

    def sample_fn(emb, rng):
        return sample_images(gen, stage1, emb, rng)

    report = evaluate(sample_fn, ds.images_hi, ds.embeddings, classifier, n, seed)
    Path(stage2_ckpt).with_name("metrics.json").write_text(report.to_json() + "\n")
    return report
