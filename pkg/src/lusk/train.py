"""SSIM-gated pair sampling, autoencoder pretraining and the main
transporter training loop.

The whole run is deterministic given the config seed: parameter init,
pair sampling and batch order all draw from one seeded generator.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import fusion, model
from .tensor import (Adam, Tensor, conv2d, instance_norm, mse,
                     upsample_nearest2x)


class PairSamplingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 60
    batch_size: int = 32
    lr0: float = 0.001
    lr_decay: float = 0.95
    lr_interval: int = 6
    ssim_threshold: float = 0.85
    max_pair_gap: int = 10
    seed: int = 0
    use_tga: bool = True
    use_ssim_gate: bool = True
    use_cbam: bool = False
    input_mode: str = "fused"   # or "norm_stack"
    pair_retry_factor: int = 50
    pretrain_epochs: int = 10
    checkpoint_every: int = 10

    def validate(self):
        if not 0.0 < self.ssim_threshold <= 1.0:
            raise ValueError(f"ssim_threshold must be in (0,1], got {self.ssim_threshold}")
        if self.lr0 <= 0:
            raise ValueError(f"lr0 must be > 0, got {self.lr0}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.input_mode not in ("fused", "norm_stack"):
            raise ValueError(f"unknown input_mode {self.input_mode!r}")
        if self.max_pair_gap < 1:
            raise ValueError(f"max_pair_gap must be >= 1, got {self.max_pair_gap}")
        return self


@dataclass
class PairSample:
    video: int
    source: int
    target: int
    ssim: float


@dataclass
class TrainResult:
    params: dict
    losses: list          # mean loss per epoch
    lrs: list             # lr per epoch
    trace: list           # pipeline stages active for this run


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Step-decayed learning rate: lr0 * decay^floor(epoch / interval)."""
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    return cfg.lr0 * cfg.lr_decay ** (epoch // cfg.lr_interval)


def pipeline_trace(cfg: TrainConfig) -> list[str]:
    """Ordered list of pipeline stages enabled by the config switches."""
    stages = ["resize"]
    if cfg.use_tga:
        stages.append("tga")
    stages.append("fuse" if cfg.input_mode == "fused" else "norm_stack")
    if cfg.use_ssim_gate:
        stages.append("ssim_gate")
    stages.append("encode")
    if cfg.use_cbam:
        stages.append("cbam")
    stages += ["keynet", "transport", "refine"]
    return stages


def sample_pairs(videos, cfg: TrainConfig, count: int,
                 rng: np.random.Generator | None = None) -> list[PairSample]:
    """Uniformly sample same-video frame pairs with |i-j| <= max_pair_gap.

    With the SSIM gate on, pairs below the threshold are rejected and
    resampled; runs out of retries with a diagnostic acceptance rate.
    """
    cfg.validate()
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    for v, frames in enumerate(videos):
        if len(frames) < 2:
            raise ValueError(f"video {v} has fewer than 2 frames")
    pairs: list[PairSample] = []
    attempts = 0
    budget = cfg.pair_retry_factor * count
    while len(pairs) < count:
        if attempts >= budget:
            rate = len(pairs) / attempts if attempts else 0.0
            raise PairSamplingError(
                f"could not sample {count} pairs within {budget} attempts "
                f"(acceptance rate {rate:.3f}, ssim_threshold {cfg.ssim_threshold})")
        attempts += 1
        v = int(rng.integers(len(videos)))
        n = len(videos[v])
        i = int(rng.integers(n))
        lo = max(0, i - cfg.max_pair_gap)
        hi = min(n - 1, i + cfg.max_pair_gap)
        j = int(rng.integers(lo, hi + 1))
        if j == i:
            continue
        s = fusion.ssim(videos[v][i], videos[v][j])
        if cfg.use_ssim_gate and s < cfg.ssim_threshold:
            continue
        pairs.append(PairSample(video=v, source=i, target=j, ssim=s))
    return pairs


def compute_stacks(videos, model_cfg: model.ModelConfig,
                   fusion_cfg: fusion.FusionConfig, cfg: TrainConfig):
    """Per-frame feature stacks for every video, computed once and cached."""
    stacks = []
    for frames in videos:
        stacks.append(np.stack([
            model.preprocess_frame(f, model_cfg, fusion_cfg,
                                   use_tga=cfg.use_tga, input_mode=cfg.input_mode)
            for f in frames]))
    return stacks


# -- autoencoder pretraining ----------------------------------------------------


def _init_decoder_params(model_cfg: model.ModelConfig, rng) -> dict[str, Tensor]:
    c1, c2 = model_cfg.base_channels, model_cfg.feature_channels
    params: dict[str, Tensor] = {}
    model._conv_param(rng, params, "decoder.conv1", c1, c2, 3)
    model._conv_param(rng, params, "decoder.conv2", model_cfg.input_channels, c1, 3)
    return params


def _decode_mirror(phi: Tensor, params, model_cfg) -> Tensor:
    h = upsample_nearest2x(phi)
    h = conv2d(h, params["decoder.conv1.w"], params["decoder.conv1.b"], padding=1)
    if model_cfg.normalize:
        h = instance_norm(h)
    h = h.relu()
    h = upsample_nearest2x(h)
    h = conv2d(h, params["decoder.conv2.w"], params["decoder.conv2.b"], padding=1)
    return h.sigmoid()


def pretrain_encoder(stacks: np.ndarray, model_cfg: model.ModelConfig,
                     cfg: TrainConfig, params: dict[str, Tensor] | None = None,
                     epochs: int | None = None) -> tuple[dict[str, Tensor], list]:
    """Train encoder + throwaway mirror decoder on stack reconstruction.

    Returns (encoder parameters only, per-epoch losses); the decoder is
    discarded.
    """
    cfg.validate()
    stacks = np.asarray(stacks, dtype=np.float32)
    if stacks.ndim != 4 or stacks.shape[0] < 1:
        raise ValueError(f"expected (N, C, H, W) stacks, got {stacks.shape}")
    epochs = cfg.pretrain_epochs if epochs is None else epochs
    rng = np.random.default_rng(cfg.seed)
    if params is None:
        params = model.init_params(model_cfg, rng)
    enc_params = {k: v for k, v in params.items() if k.startswith("encoder.")}
    dec_params = _init_decoder_params(model_cfg, rng)
    opt = Adam({**enc_params, **dec_params}, lr=cfg.lr0)
    n = stacks.shape[0]
    losses = []
    for epoch in range(epochs):
        order = rng.permutation(n)
        epoch_losses = []
        for start in range(0, n, cfg.batch_size):
            batch = Tensor(stacks[order[start:start + cfg.batch_size]])
            recon = _decode_mirror(model.encode(batch, params, model_cfg),
                                   dec_params, model_cfg)
            loss = mse(recon, batch)
            value = loss.item()
            if not np.isfinite(value):
                raise FloatingPointError(
                    f"non-finite pretraining loss at epoch {epoch}, batch {start // cfg.batch_size}")
            loss.backward()
            opt.step(lr_at(epoch, cfg))
            epoch_losses.append(value)
        losses.append(float(np.mean(epoch_losses)))
    return enc_params, losses


# -- main training loop -----------------------------------------------------------


def train(videos, model_cfg: model.ModelConfig, fusion_cfg: fusion.FusionConfig,
          cfg: TrainConfig, pair_count: int,
          init: dict[str, Tensor] | None = None,
          checkpoint_path=None) -> TrainResult:
    """Main transporter training.

    Per step: batch of sampled pairs, encode + keynet both frames,
    transport, refine, MSE against the target stack, Adam update at the
    epoch's learning rate. Deterministic given cfg.seed.
    """
    cfg.validate()
    model_cfg.validate()
    if cfg.use_cbam != model_cfg.cbam_enabled:
        model_cfg.cbam_enabled = cfg.use_cbam
    rng = np.random.default_rng(cfg.seed)
    params = model.init_params(model_cfg, rng)
    if init is not None:
        for name, tensor in init.items():
            if name in params:
                params[name] = Tensor(tensor.data.astype(np.float32), requires_grad=True)
    pairs = sample_pairs(videos, cfg, pair_count, rng)
    stacks = compute_stacks(videos, model_cfg, fusion_cfg, cfg)
    opt = Adam(params, lr=cfg.lr0)
    losses, lrs = [], []
    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg)
        order = rng.permutation(len(pairs))
        epoch_losses = []
        for start in range(0, len(pairs), cfg.batch_size):
            batch = [pairs[i] for i in order[start:start + cfg.batch_size]]
            src = Tensor(np.stack([stacks[p.video][p.source] for p in batch]))
            tgt = Tensor(np.stack([stacks[p.video][p.target] for p in batch]))
            recon = model.reconstruct(src, tgt, params, model_cfg)
            loss = mse(recon, tgt)
            value = loss.item()
            if not np.isfinite(value):
                raise FloatingPointError(
                    f"non-finite loss at epoch {epoch}, batch {start // cfg.batch_size}")
            loss.backward()
            opt.step(lr)
            epoch_losses.append(value)
        losses.append(float(np.mean(epoch_losses)))
        lrs.append(lr)
        if checkpoint_path and (epoch + 1) % cfg.checkpoint_every == 0:
            model.save_model(checkpoint_path, params, model_cfg)
    if checkpoint_path:
        model.save_model(checkpoint_path, params, model_cfg)
    return TrainResult(params=params, losses=losses, lrs=lrs,
                       trace=pipeline_trace(cfg))


def write_loss_csv(path, losses, lrs):
    with open(path, "w", encoding="utf-8") as f:
        f.write("epoch,mean_loss,lr\n")
        for epoch, (loss, lr) in enumerate(zip(losses, lrs)):
            f.write(f"{epoch},{loss!r},{lr!r}\n")
