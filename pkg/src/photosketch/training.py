"""Training loops for the two phases, checkpoints and run directories."""
from __future__ import annotations

import json
import logging
import math
import platform
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from . import __version__
from .augment import AugmentConfig, augment, augment_image, random_spatial_field, to_tensor
from .config import RunConfig, config_hash, dump_config, load_config, to_dict
from .dataset import Corpus, ImagePair, load_corpus, sample_epoch_pairs
from .encoder import (STAGE_STRIDES, ContrastiveState, EncoderConfig, MomentumContrast, ResNetEncoder,
                      contrastive_step, encode)
from .estimator import EstimatorConfig, WarpEstimator
from .losses import total_loss
from .warpcore import concat_pyramid, resize_flow, warp

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class CheckpointVersionError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# run directories


@dataclass
class RunRecord:
    """A run directory: immutable config, JSON-lines log, checkpoints and metadata."""

    root: Path
    config: RunConfig
    log_path: Path = field(init=False)

    def __post_init__(self):
        self.root = Path(self.root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.log_path = self.root / "log.jsonl"
        cfg_path = self.root / "config.yaml"
        if cfg_path.exists():
            existing = load_config(cfg_path)
            if config_hash(existing) != config_hash(self.config):
                raise RuntimeError(f"run directory {self.root} already holds a different configuration")
        else:
            dump_config(self.config, cfg_path)
        meta = self.root / "metadata.json"
        if not meta.exists():
            meta.write_text(json.dumps({
                "created": time.strftime("%Y-%m-%dT%H:%M:%S"),
                "config_hash": config_hash(self.config),
                "package_version": __version__,
                "torch": torch.__version__,
                "python": platform.python_version(),
                "host": platform.node(),
            }, indent=2))

    @classmethod
    def create(cls, config: RunConfig, run_id: Optional[str] = None) -> "RunRecord":
        run_id = run_id or f"{config.name}-{time.strftime('%Y%m%d-%H%M%S')}"
        return cls(config.resolved_run_root() / run_id, config)

    def log(self, **entry) -> None:
        with self.log_path.open("a") as fh:
            fh.write(json.dumps(entry) + "\n")

    def read_log(self) -> list[dict]:
        if not self.log_path.exists():
            return []
        return [json.loads(ln) for ln in self.log_path.read_text().splitlines() if ln.strip()]

    def checkpoint_path(self, kind: str, epoch: int) -> Path:
        return self.root / "checkpoints" / f"{kind}-epoch{epoch:05d}.pt"


def save_checkpoint(path, kind: str, config: RunConfig, epoch: int, **state) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "version": CHECKPOINT_VERSION,
        "kind": kind,
        "epoch": epoch,
        "config": to_dict(config),
        "config_hash": config_hash(config),
        "encoder_hash": config_hash(config.encoder),
        **state,
    }
    tmp = path.with_suffix(".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    latest = path.parent / f"{kind}-latest.pt"
    latest.unlink(missing_ok=True)
    try:
        latest.symlink_to(path.name)
    except OSError:
        torch.save(payload, latest)
    return path


def load_checkpoint(path, kind: Optional[str] = None) -> dict:
    ckpt = torch.load(Path(path), map_location="cpu", weights_only=False)
    version = ckpt.get("version") if isinstance(ckpt, dict) else None
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"{path}: checkpoint version {version!r}, expected {CHECKPOINT_VERSION}")
    if kind is not None and ckpt.get("kind") != kind:
        raise CheckpointVersionError(f"{path}: expected a {kind} checkpoint, found {ckpt.get('kind')!r}")
    return ckpt


def cosine_lr(base: float, epoch: int, total: int, enabled: bool = True) -> float:
    if not enabled or total <= 0:
        return base
    return base * 0.5 * (1.0 + math.cos(math.pi * epoch / total))


def make_optimizer(params, lr: float, config: RunConfig) -> torch.optim.Optimizer:
    o = config.optim
    if o.optimizer == "adam":
        return torch.optim.Adam(params, lr=lr, weight_decay=o.weight_decay)
    return torch.optim.SGD(params, lr=lr, momentum=o.momentum, weight_decay=o.weight_decay)


def _set_lr(optimizer, lr):
    for g in optimizer.param_groups:
        g["lr"] = lr


def _batches(items: Sequence, batch_size: int, rng: np.random.Generator) -> list[list]:
    order = rng.permutation(len(items))
    if len(items) < batch_size:
        return [[items[i] for i in order]] if len(items) else []
    n = len(items) // batch_size  # drop the incomplete tail, as a fixed-size queue expects
    return [[items[i] for i in order[k * batch_size:(k + 1) * batch_size]] for k in range(n)]


def _view_seed(seed: int, epoch: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, epoch, index]).generate_state(1)[0])


def prepare_corpus(config: RunConfig, split: str = "train") -> Corpus:
    data = config.data
    if data.corpus_root is None:
        raise ValueError("data.corpus_root is not set")
    corpus = load_corpus(data.corpus_root, split, data.exclude)
    cats = corpus.categories
    if data.categories:
        cats = [c for c in cats if c in set(data.categories)]
    if data.holdout_n:
        from .evaluation import holdout_split
        _, held = holdout_split(corpus.categories, data.holdout_n, data.holdout_seed)
        cats = [c for c in cats if c not in set(held)]
    corpus = corpus.restrict(cats)
    if data.max_photos:
        keep = sorted(corpus.photos)[: data.max_photos]
        keep_set = set(keep)
        corpus = Corpus([p for p in corpus.pairs if p.photo_id in keep_set],
                        {k: corpus.photos[k] for k in keep})
    return corpus


# ---------------------------------------------------------------------------
# phase 1: encoder


def _positive_views(pairs: list[ImagePair], corpus: Corpus, scheme: str, aug: AugmentConfig,
                    seed: int, epoch: int, offset: int) -> list[tuple]:
    views = []
    by_cat: dict[str, list[ImagePair]] = {}
    if scheme == "class":
        for p in corpus.pairs:
            by_cat.setdefault(p.category, []).append(p)
    for i, pair in enumerate(pairs):
        s = _view_seed(seed, epoch, offset + i)
        rng = np.random.default_rng(s)
        if scheme == "pair":
            a, b = augment(pair, aug, s)
        elif scheme == "image":
            src, dom = (pair.photo, "photo") if rng.random() < 0.5 else (pair.sketch, "sketch")
            a = augment_image(src, dom, aug, np.random.default_rng([s, 0]))
            b = augment_image(src, dom, aug, np.random.default_rng([s, 1]))
        elif scheme == "class":
            pool = by_cat[pair.category]
            other = pool[int(rng.integers(len(pool)))]
            a, _ = augment(pair, aug, s)
            _, b = augment(other, aug, s + 1)
        else:
            raise ValueError(f"no positives for scheme {scheme!r}")
        views.append(((a.image, a.domain_tag), (b.image, b.domain_tag)))
    return views


def build_contrast(config: RunConfig) -> MomentumContrast:
    torch.manual_seed(config.seed)
    return MomentumContrast(config.encoder)


def pretrain_encoder(config: RunConfig, run: RunRecord, corpus: Optional[Corpus] = None,
                     resume: Optional[str | Path] = None, max_steps: Optional[int] = None,
                     init_weights: Optional[str | Path] = None) -> MomentumContrast:
    """Phase 1. Returns the trained model; checkpoints land in ``run``.

    ``init_weights`` is an optional torchvision-style backbone state dict used to
    initialise both the online and the momentum encoder.
    """
    config.validate()
    enc_cfg = config.encoder
    model = build_contrast(config)
    if init_weights is not None and resume is None:
        state = torch.load(init_weights, map_location="cpu", weights_only=True)
        state = state.get("state_dict", state)
        unused = model.encoder_q.load_torchvision_state(state)
        if unused:
            log.warning("initial weights: %d tensors had no destination", len(unused))
        model.encoder_k.load_state_dict(model.encoder_q.state_dict())
    optimizer = make_optimizer(model.query_parameters(), enc_cfg.learning_rate, config)
    state = ContrastiveState(model, optimizer)
    start = 0
    if resume is not None:
        ckpt = load_checkpoint(resume, "encoder")
        model.load_state_dict(ckpt["model"])
        model.queue.load_state_dict(ckpt["queue"])
        optimizer.load_state_dict(ckpt["optimizer"])
        state.step = ckpt["step"]
        start = ckpt["epoch"] + 1
    epochs = config.schedule.encoder_epochs
    if enc_cfg.positive_scheme == "none" or epochs == 0:
        log.info("encoder pre-training skipped (scheme=%s, epochs=%d)", enc_cfg.positive_scheme, epochs)
        save_checkpoint(run.checkpoint_path("encoder", start), "encoder", config, start - 1,
                        model=model.state_dict(), queue=model.queue.state_dict(),
                        optimizer=optimizer.state_dict(), step=state.step)
        return model
    corpus = corpus if corpus is not None else prepare_corpus(config)
    bs = config.optim.batch_size
    for epoch in range(start, epochs):
        lr = cosine_lr(enc_cfg.learning_rate, epoch, epochs, config.optim.cosine)
        _set_lr(optimizer, lr)
        pairs = sample_epoch_pairs(corpus, config.seed, epoch)
        rng = np.random.default_rng([config.seed, epoch, 1])
        for b, batch in enumerate(_batches(pairs, bs, rng)):
            views = _positive_views(batch, corpus, enc_cfg.positive_scheme, config.augment, config.seed,
                                    epoch, b * bs)
            loss = contrastive_step(views, state, np.random.default_rng([config.seed, epoch, 2, b]))
            run.log(phase="encoder", epoch=epoch, step=state.step, loss=loss, lr=lr)
            if max_steps is not None and state.step >= max_steps:
                break
        last = epoch == epochs - 1 or (max_steps is not None and state.step >= max_steps)
        if last or (epoch + 1) % config.schedule.checkpoint_every == 0:
            save_checkpoint(run.checkpoint_path("encoder", epoch), "encoder", config, epoch,
                            model=model.state_dict(), queue=model.queue.state_dict(),
                            optimizer=optimizer.state_dict(), step=state.step)
        if max_steps is not None and state.step >= max_steps:
            break
    return model


def encoder_from_checkpoint(path, config: Optional[RunConfig] = None) -> ResNetEncoder:
    """Online encoder from an encoder or estimator checkpoint."""
    ckpt = load_checkpoint(path)
    saved = _enc_config(ckpt)
    if config is not None and config_hash(config.encoder) != ckpt.get("encoder_hash"):
        warnings.warn(f"encoder configuration differs from the one stored in {path}", stacklevel=2)
    enc = ResNetEncoder(saved.backbone_depth, saved.width, saved.conditional_norm)
    if ckpt["kind"] == "encoder":
        prefix = "encoder_q."
        enc.load_state_dict({k[len(prefix):]: v for k, v in ckpt["model"].items() if k.startswith(prefix)})
    else:
        enc.load_state_dict(ckpt["encoder"])
    return enc


def _enc_config(ckpt) -> EncoderConfig:
    from .config import from_dict
    return from_dict(EncoderConfig, ckpt["config"]["encoder"])


# ---------------------------------------------------------------------------
# phase 2: estimator


def estimator_config_for(config: RunConfig) -> EstimatorConfig:
    est = config.estimator
    side = est.output_side // STAGE_STRIDES[min(est.stages)]
    if side != est.feature_side:
        est = EstimatorConfig(est.stages, side, est.block_sides, est.hidden, est.output_side)
    return est


def predict_flow(encoder: ResNetEncoder, estimator: WarpEstimator, source: torch.Tensor, target: torch.Tensor,
                 source_domain: str, target_domain: str, return_all: bool = False):
    """Field on the target grid (at the estimator's last block resolution)."""
    stages = estimator.config.stages
    ps = encode(encoder, source, source_domain, stages)
    pt = encode(encoder, target, target_domain, stages)
    out = estimator(concat_pyramid(ps.select(stages)), concat_pyramid(pt.select(stages)), return_all=return_all)
    return out, ps, pt


def supervised_flow_loss(fields: list[torch.Tensor], gt: torch.Tensor) -> torch.Tensor:
    """Endpoint error summed over blocks, each in full-resolution pixels."""
    side = gt.shape[1]
    loss = gt.new_zeros(())
    for f in fields:
        s = f.shape[1]
        loss = loss + (f - resize_flow(gt, (s, s))).norm(dim=-1).mean() * (side / s)
    return loss


def synthetic_warp_batch(images: torch.Tensor, rng: np.random.Generator, aug: AugmentConfig):
    """Warp each (3, H, W) image by a random spatial field; returns (source, target, field)."""
    side = images.shape[-1]
    gt = torch.stack([random_spatial_field(rng, aug, side) for _ in range(len(images))])
    return images, warp(images, gt), gt


@torch.no_grad()
def synthetic_endpoint_error(encoder: ResNetEncoder, estimator: WarpEstimator, images: torch.Tensor,
                             aug: AugmentConfig, seed: int, batch_size: int = 8) -> tuple[float, float]:
    """Mean endpoint error on fresh random warps of ``images``: (predicted field, zero field)."""
    encoder.eval()
    estimator.eval()
    rng = np.random.default_rng(seed)
    errs, base = [], []
    for i in range(0, len(images), batch_size):
        src, tgt, gt = synthetic_warp_batch(images[i:i + batch_size], rng, aug)
        flow, _, _ = predict_flow(encoder, estimator, src, tgt, "photo", "photo")
        errs.append((resize_flow(flow, gt.shape[1:3]) - gt).norm(dim=-1).mean(dim=(1, 2)))
        base.append(gt.norm(dim=-1).mean(dim=(1, 2)))
    return float(torch.cat(errs).mean()), float(torch.cat(base).mean())


@dataclass
class EstimatorRun:
    encoder: ResNetEncoder
    estimator: WarpEstimator
    optimizer: torch.optim.Optimizer
    step: int = 0


def build_estimator_run(config: RunConfig, encoder: ResNetEncoder) -> EstimatorRun:
    torch.manual_seed(config.seed + 1)
    estimator = WarpEstimator(estimator_config_for(config))
    train_encoder = config.schedule.joint or not config.schedule.freeze_encoder
    for p in encoder.parameters():
        p.requires_grad_(train_encoder)
    params = list(estimator.parameters()) + (list(encoder.parameters()) if train_encoder else [])
    optimizer = make_optimizer(params, config.schedule.estimator_lr, config)
    return EstimatorRun(encoder, estimator, optimizer)


def estimator_step(run_state: EstimatorRun, config: RunConfig, source: torch.Tensor, target: torch.Tensor,
                   gt: Optional[torch.Tensor] = None, source_domain: str = "photo",
                   target_domain: str = "sketch") -> dict:
    """One optimisation step; supervised when ``gt`` (source->target field) is given."""
    enc, est = run_state.encoder, run_state.estimator
    train_encoder = any(p.requires_grad for p in enc.parameters())
    enc.train(train_encoder)
    est.train()
    if gt is not None:
        (flow, fields), _, _ = predict_flow(enc, est, source, target, source_domain, target_domain, True)
        loss = supervised_flow_loss(fields, gt)
        out = {"total": float(loss.detach()), "epe": float(
            (resize_flow(flow.detach(), gt.shape[1:3]) - gt).norm(dim=-1).mean())}
    else:
        flow_st, ps, pt = predict_flow(enc, est, source, target, source_domain, target_domain)
        flow_ts, _, _ = predict_flow(enc, est, target, source, target_domain, source_domain)
        enc_fn = lambda img, dom: encode(enc, img, dom, config.loss.loss_stages)  # noqa: E731
        br = total_loss(source, target, flow_st, flow_ts, enc_fn, config.loss, source_domain, target_domain,
                        ps, pt)
        loss = br.total
        out = br.as_dict()
    run_state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    if config.optim.grad_clip is not None:
        params = [p for g in run_state.optimizer.param_groups for p in g["params"]]
        out["grad_norm"] = float(torch.nn.utils.clip_grad_norm_(params, config.optim.grad_clip))
    run_state.optimizer.step()
    run_state.step += 1
    return out


def train_estimator(config: RunConfig, run: RunRecord, encoder_checkpoint=None, corpus: Optional[Corpus] = None,
                    resume=None, max_steps: Optional[int] = None,
                    synthetic_images: Optional[torch.Tensor] = None) -> EstimatorRun:
    """Phase 2 on photo/sketch pairs, or synthetic-warp supervision when configured."""
    config.validate()
    if resume is not None:
        ckpt = load_checkpoint(resume, "estimator")
        encoder = ResNetEncoder(config.encoder.backbone_depth, config.encoder.width, config.encoder.conditional_norm)
        encoder.load_state_dict(ckpt["encoder"])
    elif encoder_checkpoint is not None:
        encoder = encoder_from_checkpoint(encoder_checkpoint, config)
    else:
        torch.manual_seed(config.seed)
        encoder = ResNetEncoder(config.encoder.backbone_depth, config.encoder.width, config.encoder.conditional_norm)
    state = build_estimator_run(config, encoder)
    start = 0
    if resume is not None:
        state.estimator.load_state_dict(ckpt["estimator"])
        state.optimizer.load_state_dict(ckpt["optimizer"])
        state.step = ckpt["step"]
        start = ckpt["epoch"] + 1

    epochs = config.schedule.estimator_epochs
    bs = config.optim.batch_size
    synthetic = config.schedule.synthetic_supervision
    if synthetic and synthetic_images is None:
        corpus = corpus if corpus is not None else prepare_corpus(config)
        synthetic_images = torch.stack([to_tensor(p.photo) for p in sample_epoch_pairs(corpus, config.seed, 0)])
    elif not synthetic and epochs > start:
        corpus = corpus if corpus is not None else prepare_corpus(config)

    def save(epoch):
        save_checkpoint(run.checkpoint_path("estimator", max(epoch, 0)), "estimator", config, epoch,
                        encoder=state.encoder.state_dict(), estimator=state.estimator.state_dict(),
                        optimizer=state.optimizer.state_dict(), step=state.step)

    if epochs <= start:
        save(start - 1)
        return state
    for epoch in range(start, epochs):
        lr = cosine_lr(config.schedule.estimator_lr, epoch, epochs, config.optim.cosine)
        _set_lr(state.optimizer, lr)
        rng = np.random.default_rng([config.seed, epoch, 3])
        items = list(range(len(synthetic_images))) if synthetic else sample_epoch_pairs(corpus, config.seed, epoch)
        for b, batch in enumerate(_batches(items, bs, rng)):
            if synthetic:
                src, tgt, gt = synthetic_warp_batch(synthetic_images[batch], rng, config.augment)
                out = estimator_step(state, config, src, tgt, gt, "photo", "photo")
            else:
                views = [augment(p, config.augment, _view_seed(config.seed, epoch, b * bs + i))
                         for i, p in enumerate(batch)]
                src = torch.stack([v[0].image for v in views])
                tgt = torch.stack([v[1].image for v in views])
                out = estimator_step(state, config, src, tgt)
            run.log(phase="estimator", epoch=epoch, step=state.step, lr=lr, **out)
            if max_steps is not None and state.step >= max_steps:
                break
        stop = max_steps is not None and state.step >= max_steps
        if stop or epoch == epochs - 1 or (epoch + 1) % config.schedule.checkpoint_every == 0:
            save(epoch)
        if stop:
            break
    return state


def load_model(path) -> tuple[ResNetEncoder, WarpEstimator, dict]:
    """Encoder and estimator (in eval mode) from an estimator checkpoint."""
    ckpt = load_checkpoint(path, "estimator")
    from .config import from_dict
    cfg = from_dict(RunConfig, ckpt["config"])
    enc = ResNetEncoder(cfg.encoder.backbone_depth, cfg.encoder.width, cfg.encoder.conditional_norm)
    enc.load_state_dict(ckpt["encoder"])
    est = WarpEstimator(estimator_config_for(cfg))
    est.load_state_dict(ckpt["estimator"])
    return enc.eval(), est.eval(), ckpt
