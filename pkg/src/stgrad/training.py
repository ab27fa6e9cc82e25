"""Training loop: epochs, checkpoints, metrics rows, bit-exact resume.

All randomness is keyed by (seed, purpose, epoch, step), so a run resumed
from a checkpoint continues exactly as the uninterrupted run would have.
"""

from __future__ import annotations

import os
import time
from dataclasses import dataclass

from . import rng as rngmod
from .config import RunConfig
from .data import Dataset, MetricsWriter, batches, save_checkpoint, synth_dataset
from .errors import ConfigError
from .rng import stream
from .vae import VaeModel, build_vae, evaluate, train_step
from .nn import init_optimizer


def checkpoint_path(out_dir, epoch: int) -> str:
    return os.path.join(out_dir, f"ckpt-epoch-{epoch:04d}.bin")


def default_checkpoint_epochs(epochs: int, every: int) -> list[int]:
    """Epoch 0, every ``every`` epochs, and the final epoch."""
    eps = sorted(set(range(0, epochs + 1, every)) | {0, epochs})
    return eps


def load_datasets(cfg: RunConfig):
    """Datasets named by the config: IDX files or the synthetic generator."""
    from .data import load_idx

    if cfg.synth:
        train = synth_dataset(cfg.seed, cfg.synth_n, cfg.synth_pattern, split="train")
        test = synth_dataset(
            cfg.seed, max(cfg.batch, cfg.synth_n // 5), cfg.synth_pattern, split="test"
        )
        return train, test
    if not cfg.train_images:
        raise ConfigError("no data: set synth=1 or provide train_images")
    train = load_idx(cfg.train_images, split="train")
    test = load_idx(cfg.test_images, split="test") if cfg.test_images else None
    return train, test


@dataclass
class TrainResult:
    model: VaeModel
    opt_state: object
    history: list  # (epoch, train_neg_elbo) pairs
    checkpoints: list


def run_training(
    cfg: RunConfig,
    train_data: Dataset,
    test_data: Dataset | None = None,
    out_dir: str | None = None,
    checkpoint_epochs: list[int] | None = None,
    metrics: MetricsWriter | None = None,
    start: tuple | None = None,
    timing: bool = False,
) -> TrainResult:
    """Train per the config.

    ``start`` resumes from (model, opt_state, completed_epochs). Checkpoints
    are written at the scheduled epochs (including 0 and the final epoch)
    when ``out_dir`` is given.
    """
    est = cfg.estimator_config()
    if start is None:
        model = build_vae(
            cfg.seed, cfg.n, cfg.l,
            image_dim=train_data.images.shape[1],
            enc_hidden=cfg.hidden_dims("enc"),
            dec_hidden=cfg.hidden_dims("dec"),
        )
        opt = init_optimizer(cfg.optimizer, cfg.lr, model.param_arrays())
        done = 0
    else:
        model, opt, done = start
    if checkpoint_epochs is None:
        checkpoint_epochs = default_checkpoint_epochs(cfg.epochs, cfg.checkpoint_every)
    schedule = set(checkpoint_epochs)
    run_id = cfg.effective_run_id()
    written = []

    def emit(epoch, step, train_metric, test_metric, wall_ms):
        if metrics is None:
            return
        metrics.write_row(
            {
                "run_id": run_id,
                "epoch": epoch,
                "step": step,
                "estimator": cfg.estimator,
                "tau": cfg.tau,
                "eta": cfg.eta,
                "beta": cfg.beta,
                "K": cfg.k,
                "seed": cfg.seed,
                "train_neg_elbo": train_metric,
                "test_neg_elbo": test_metric,
                "wall_ms": wall_ms,
            }
        )

    def checkpoint(epoch):
        if out_dir is not None and epoch in schedule:
            path = checkpoint_path(out_dir, epoch)
            save_checkpoint(path, model, opt, cfg.seed, epoch)
            written.append(path)

    def test_metric_at(epoch):
        if test_data is None or epoch not in schedule:
            return None
        return evaluate(model, test_data.images, cfg.seed).neg_elbo

    history = []
    if done == 0:
        checkpoint(0)
    global_step = done * -(-train_data.size // cfg.batch)
    for epoch in range(done + 1, cfg.epochs + 1):
        t0 = time.perf_counter()
        running = 0.0
        count = 0
        for step, batch in enumerate(batches(train_data, cfg.batch, cfg.seed, epoch)):
            r = stream(cfg.seed, rngmod.LATENT, epoch, step)
            breakdown = train_step(model, batch, est, opt, r)
            running += breakdown.neg_elbo * batch.shape[0]
            count += batch.shape[0]
            global_step += 1
        train_metric = running / count
        history.append((epoch, train_metric))
        wall = int((time.perf_counter() - t0) * 1000) if timing else None
        checkpoint(epoch)
        emit(epoch, global_step, train_metric, test_metric_at(epoch), wall)
    return TrainResult(model=model, opt_state=opt, history=history, checkpoints=written)
