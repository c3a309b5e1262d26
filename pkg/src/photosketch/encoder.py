"""Shared photo/sketch encoder trained with pair-level momentum contrast."""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

DOMAINS = ("photo", "sketch")
STAGE_STRIDES = {1: 4, 2: 8, 3: 16, 4: 32}


def domain_index(tag: str) -> int:
    try:
        return DOMAINS.index(tag)
    except ValueError:
        raise ValueError(f"unknown domain tag {tag!r}; expected one of {DOMAINS}") from None


@dataclass
class EncoderConfig:
    embedding_dim: int = 128
    momentum: float = 0.999
    temperature: float = 0.07
    queue_size: int = 8192
    learning_rate: float = 0.03
    backbone_depth: str = "small"  # small: 18-layer basic blocks, large: 101-layer bottlenecks
    width: int = 64
    conditional_norm: bool = True
    # pair | image | class | none
    positive_scheme: str = "pair"

    def validate(self, batch_size: int | None = None) -> None:
        if not 0.0 <= self.momentum <= 1.0:
            raise ValueError(f"momentum must lie in [0, 1], got {self.momentum}")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.backbone_depth not in ("small", "large"):
            raise ValueError(f"unknown backbone_depth {self.backbone_depth!r}")
        if self.positive_scheme not in ("pair", "image", "class", "none"):
            raise ValueError(f"unknown positive_scheme {self.positive_scheme!r}")
        if batch_size is not None and self.queue_size % batch_size != 0:
            raise ValueError(f"queue_size {self.queue_size} is not a multiple of batch size {batch_size}")


@dataclass
class FeaturePyramid:
    """Stage outputs of the backbone; ``levels`` maps stage index to (B, C, H, W)."""

    levels: dict[int, torch.Tensor]
    strides: dict[int, int] = field(default_factory=lambda: dict(STAGE_STRIDES))

    def select(self, stages: Sequence[int]) -> list[torch.Tensor]:
        missing = [s for s in stages if s not in self.levels]
        if missing:
            raise KeyError(f"pyramid has no stage(s) {missing}")
        return [self.levels[s] for s in stages]

    @property
    def final(self) -> torch.Tensor:
        return self.levels[max(self.levels)]


class CondBatchNorm2d(nn.Module):
    """Batch norm with one parameter/statistics set per input domain."""

    def __init__(self, num_features: int, conditional: bool = True):
        super().__init__()
        self.branches = nn.ModuleList(nn.BatchNorm2d(num_features) for _ in range(2 if conditional else 1))
        self.domain = 0

    def forward(self, x):
        return self.branches[self.domain if len(self.branches) > 1 else 0](x)


def conv3x3(cin, cout, stride=1):
    return nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False)


class BasicBlock(nn.Module):
    expansion = 1

    def __init__(self, cin, planes, stride, norm):
        super().__init__()
        self.conv1 = conv3x3(cin, planes, stride)
        self.bn1 = norm(planes)
        self.conv2 = conv3x3(planes, planes)
        self.bn2 = norm(planes)
        self.downsample = None
        if stride != 1 or cin != planes:
            self.downsample = nn.Sequential(nn.Conv2d(cin, planes, 1, stride=stride, bias=False), norm(planes))

    def forward(self, x):
        idt = x if self.downsample is None else self.downsample(x)
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + idt)


class Bottleneck(nn.Module):
    expansion = 4

    def __init__(self, cin, planes, stride, norm):
        super().__init__()
        out = planes * self.expansion
        self.conv1 = nn.Conv2d(cin, planes, 1, bias=False)
        self.bn1 = norm(planes)
        self.conv2 = conv3x3(planes, planes, stride)
        self.bn2 = norm(planes)
        self.conv3 = nn.Conv2d(planes, out, 1, bias=False)
        self.bn3 = norm(out)
        self.downsample = None
        if stride != 1 or cin != out:
            self.downsample = nn.Sequential(nn.Conv2d(cin, out, 1, stride=stride, bias=False), norm(out))

    def forward(self, x):
        idt = x if self.downsample is None else self.downsample(x)
        out = F.relu(self.bn1(self.conv1(x)))
        out = F.relu(self.bn2(self.conv2(out)))
        out = self.bn3(self.conv3(out))
        return F.relu(out + idt)


_ARCH = {
    "small": (BasicBlock, (2, 2, 2, 2)),
    "large": (Bottleneck, (3, 4, 23, 3)),
}


class ResNetEncoder(nn.Module):
    """Four-stage residual network (strides 4, 8, 16, 32) with domain-conditional BN.

    Parameter names follow the torchvision ResNet layout, except that every
    normalisation layer holds its per-domain copies under ``branches``.
    """

    def __init__(self, depth: str = "small", width: int = 64, conditional: bool = True):
        super().__init__()
        block, layers = _ARCH[depth]
        norm = lambda c: CondBatchNorm2d(c, conditional)  # noqa: E731
        self.conv1 = nn.Conv2d(3, width, 7, stride=2, padding=3, bias=False)
        self.bn1 = norm(width)
        self.maxpool = nn.MaxPool2d(3, stride=2, padding=1)
        cin = width
        for i, n in enumerate(layers):
            planes = width * 2**i
            stride = 1 if i == 0 else 2
            blocks = []
            for j in range(n):
                blocks.append(block(cin, planes, stride if j == 0 else 1, norm))
                cin = planes * block.expansion
            setattr(self, f"layer{i + 1}", nn.Sequential(*blocks))
        self.out_channels = {i + 1: width * 2**i * block.expansion for i in range(4)}
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")

    def set_domain(self, tag: str) -> None:
        idx = domain_index(tag)
        for m in self.modules():
            if isinstance(m, CondBatchNorm2d):
                m.domain = idx

    def forward(self, image: torch.Tensor, domain: str, stages: Iterable[int] = (1, 2, 3, 4)) -> FeaturePyramid:
        self.set_domain(domain)
        stages = set(stages)
        x = self.maxpool(F.relu(self.bn1(self.conv1(image))))
        levels = {}
        last = max(stages)
        for i in range(1, last + 1):
            x = getattr(self, f"layer{i}")(x)
            if i in stages:
                levels[i] = x
        return FeaturePyramid(levels)

    def load_torchvision_state(self, state: dict[str, torch.Tensor]) -> list[str]:
        """Copy a plain torchvision-style ResNet state dict; BN tensors fill every branch.

        Returns the keys of ``state`` that had no destination.
        """
        own = self.state_dict()
        unused = []
        for key, value in state.items():
            key = key.removeprefix("module.").removeprefix("encoder_q.")
            if key in own and own[key].shape == value.shape:
                own[key].copy_(value)
                continue
            head, _, leaf = key.rpartition(".")
            hits = [k for k in own if k.startswith(head + ".branches.") and k.endswith("." + leaf)]
            if hits and all(own[k].shape == value.shape for k in hits):
                for k in hits:
                    own[k].copy_(value)
            else:
                unused.append(key)
        self.load_state_dict(own)
        return unused


def encode(encoder: ResNetEncoder, image: torch.Tensor, domain_tag: str, stages=(1, 2, 3, 4)) -> FeaturePyramid:
    """Encode a (B, 3, H, W) or (3, H, W) image batch from a single domain."""
    if image.dim() == 3:
        image = image.unsqueeze(0)
    return encoder(image, domain_tag, stages)


def encode_mixed(encoder, images: torch.Tensor, domains: Sequence[str], stages=(1, 2, 3, 4)) -> FeaturePyramid:
    """Encode a batch whose items come from different domains, preserving order."""
    order = {}
    for i, d in enumerate(domains):
        order.setdefault(d, []).append(i)
    levels: dict[int, torch.Tensor] = {}
    for d, idx in order.items():
        pyr = encoder(images[idx], d, stages)
        for s, t in pyr.levels.items():
            if s not in levels:
                levels[s] = t.new_empty((len(domains),) + t.shape[1:])
            levels[s] = levels[s].index_copy(0, torch.tensor(idx), t)
    return FeaturePyramid(levels)


class ProjectionHead(nn.Module):
    """Global pool of the last stage, then a two-layer MLP and L2 normalisation."""

    def __init__(self, in_dim: int, dim: int = 128):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, in_dim)
        self.fc2 = nn.Linear(in_dim, dim)

    def forward(self, pyramid: FeaturePyramid | torch.Tensor) -> torch.Tensor:
        x = pyramid.final if isinstance(pyramid, FeaturePyramid) else pyramid
        x = x.mean(dim=(-2, -1))
        x = self.fc2(F.relu(self.fc1(x)))
        return F.normalize(x, dim=-1)


def project(head: ProjectionHead, pyramid: FeaturePyramid) -> torch.Tensor:
    return head(pyramid)


class NegativeQueue:
    """Fixed-capacity FIFO of key embeddings."""

    def __init__(self, capacity: int, dim: int, dtype=torch.float32):
        self.capacity = capacity
        self.buffer = torch.zeros(capacity, dim, dtype=dtype)
        self.cursor = 0
        self.count = 0

    def __len__(self):
        return min(self.count, self.capacity)

    @torch.no_grad()
    def enqueue(self, keys: torch.Tensor) -> None:
        keys = keys.detach().to(self.buffer.dtype)
        for k in keys[-self.capacity:]:
            self.buffer[self.cursor] = k
            self.cursor = (self.cursor + 1) % self.capacity
        self.count += len(keys)

    def entries(self) -> torch.Tensor:
        """Current contents, oldest first."""
        n = len(self)
        if n < self.capacity:
            return self.buffer[:n]
        return torch.cat([self.buffer[self.cursor:], self.buffer[: self.cursor]])

    def state_dict(self):
        return {"buffer": self.buffer.clone(), "cursor": self.cursor, "count": self.count}

    def load_state_dict(self, state):
        self.buffer = state["buffer"].clone()
        self.capacity = self.buffer.shape[0]
        self.cursor = int(state["cursor"])
        self.count = int(state["count"])


def infonce_loss(q: torch.Tensor, k_pos: torch.Tensor, negatives, temperature: float) -> torch.Tensor:
    """Mean InfoNCE over a batch of (query, positive key) rows.

    ``negatives`` is a :class:`NegativeQueue` or an (N, D) tensor; N may be 0.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    if isinstance(negatives, NegativeQueue):
        negatives = negatives.entries()
    if q.dim() == 1:
        q, k_pos = q.unsqueeze(0), k_pos.unsqueeze(0)
    negatives = negatives.to(q.dtype)
    pos = (q * k_pos).sum(-1, keepdim=True)
    logits = torch.cat([pos, q @ negatives.T], dim=1) / temperature
    return (torch.logsumexp(logits, dim=1) - logits[:, 0]).mean()


class MomentumContrast(nn.Module):
    """Online encoder + head, their momentum copies and the negative queue."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        self.encoder_q = ResNetEncoder(config.backbone_depth, config.width, config.conditional_norm)
        self.head_q = ProjectionHead(self.encoder_q.out_channels[4], config.embedding_dim)
        self.encoder_k = copy.deepcopy(self.encoder_q)
        self.head_k = copy.deepcopy(self.head_q)
        for p in self.key_parameters():
            p.requires_grad_(False)
        self.queue = NegativeQueue(config.queue_size, config.embedding_dim)

    def query_parameters(self):
        return list(self.encoder_q.parameters()) + list(self.head_q.parameters())

    def key_parameters(self):
        return list(self.encoder_k.parameters()) + list(self.head_k.parameters())

    @torch.no_grad()
    def momentum_update(self, m: float | None = None) -> None:
        m = self.config.momentum if m is None else m
        for pk, pq in zip(self.key_parameters(), self.query_parameters()):
            pk.copy_(pk * m + pq.detach() * (1.0 - m))

    def embed(self, images, domains, key: bool = False) -> torch.Tensor:
        enc, head = (self.encoder_k, self.head_k) if key else (self.encoder_q, self.head_q)
        return head(encode_mixed(enc, images, domains, stages=(4,)))


@dataclass
class ContrastiveState:
    model: MomentumContrast
    optimizer: torch.optim.Optimizer
    step: int = 0


def contrastive_step(views: Sequence[tuple], state: ContrastiveState, rng: np.random.Generator) -> float:
    """One momentum-contrast update on a batch of positive view pairs.

    ``views`` holds ``((image_a, domain_a), (image_b, domain_b))`` per pair, each
    image a (3, H, W) tensor. A coin flip per pair decides which view is the query.
    """
    model = state.model
    flips = rng.random(len(views)) < 0.5
    q_img, q_dom, k_img, k_dom = [], [], [], []
    for (a, b), flip in zip(views, flips):
        qv, kv = (b, a) if flip else (a, b)
        q_img.append(qv[0])
        q_dom.append(qv[1])
        k_img.append(kv[0])
        k_dom.append(kv[1])
    q_img = torch.stack(q_img)
    k_img = torch.stack(k_img)

    model.train()
    q = model.embed(q_img, q_dom)
    with torch.no_grad():
        k = model.embed(k_img, k_dom, key=True)
    loss = infonce_loss(q, k, model.queue, model.config.temperature)
    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    state.optimizer.step()
    model.momentum_update()
    model.queue.enqueue(k)
    state.step += 1
    return float(loss.detach())
