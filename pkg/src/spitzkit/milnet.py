"""Bag-level Vision Transformer classifier over tile features.

A learnable aggregation token is prepended to the projected tiles; after the
encoder blocks its normalized representation feeds a linear head. There are
no positional embeddings, so predictions do not depend on tile order.
"""

from __future__ import annotations

import copy
import csv
import io
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import ConfigError, SpitzkitError
from .bags import FeatureBag, pool_bags


@dataclass
class MilConfig:
    input_dim: int
    n_classes: int
    embed_dim: int = 192
    depth: int = 2
    heads: int = 4
    mlp_ratio: int = 4
    attention_dropout_p: float = 0.5
    feature_dropout_p: float = 0.5
    feature_cap: int = 25_000

    def __post_init__(self):
        if self.embed_dim % self.heads:
            raise ConfigError("embed_dim must be divisible by heads", "heads")
        for name in ("attention_dropout_p", "feature_dropout_p"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ConfigError(f"{name} must lie in [0, 1)", name)
        if self.n_classes < 2:
            raise ConfigError("n_classes must be >= 2", "n_classes")
        if self.input_dim < 1 or self.depth < 1 or self.feature_cap < 1:
            raise ConfigError("input_dim, depth and feature_cap must be positive")

    @classmethod
    def preset(cls, profile: str, input_dim: int, n_classes: int, **overrides) -> MilConfig:
        base = {"paper": {}, "desk": {"embed_dim": 32}}
        if profile not in base:
            raise ConfigError(f"unknown profile {profile!r}", "profile")
        return cls(input_dim=input_dim, n_classes=n_classes, **{**base[profile], **overrides})


@dataclass
class TrainConfig:
    total_iterations: int = 32_000
    grad_accum: int = 32
    lr0: float = 5e-5
    lr_halving_period: int = 6_400
    validation_period: int = 320
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.01
    class_weights: list[float] | None = None
    seed: int = 0

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.lr0 <= 0:
            raise ConfigError("lr0 must be > 0", "lr0")
        for name in ("grad_accum", "lr_halving_period", "validation_period"):
            period = getattr(self, name)
            if period < 1 or self.total_iterations % period:
                raise ConfigError(f"{name} must divide total_iterations", name)
        if self.class_weights is not None and any(w <= 0 for w in self.class_weights):
            raise ConfigError("class_weights must be positive", "class_weights")

    @classmethod
    def preset(cls, profile: str, **overrides) -> TrainConfig:
        base = {
            "paper": {},
            "desk": {
                "total_iterations": 2_000, "grad_accum": 4, "lr0": 1e-3,
                "lr_halving_period": 500, "validation_period": 100,
            },
        }
        if profile not in base:
            raise ConfigError(f"unknown profile {profile!r}", "profile")
        return cls(**{**base[profile], **overrides})


def learning_rate(iteration: int, config: TrainConfig) -> float:
    """Step schedule: halve every ``lr_halving_period`` iterations."""
    return config.lr0 * 2.0 ** -(iteration // config.lr_halving_period)


# --------------------------------------------------------------------------
# Model


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int, dropout_p: float):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.scale = self.head_dim**-0.5
        self.dropout_p = dropout_p
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, generator: torch.Generator | None = None):
        n, dim = x.shape
        q, k, v = self.qkv(x).reshape(n, 3, self.heads, self.head_dim).permute(1, 2, 0, 3)
        if not (self.training and self.dropout_p > 0):
            # fused kernel never materializes the n x n matrix; only the
            # token row is needed for attention maps
            out = F.scaled_dot_product_attention(q[None], k[None], v[None])[0]
            attn = torch.softmax((q[:, :1] @ k.transpose(-2, -1)) * self.scale, dim=-1)
            return self.proj(out.transpose(0, 1).reshape(n, dim)), attn
        attn = torch.softmax((q @ k.transpose(-2, -1)) * self.scale, dim=-1)
        keep = torch.rand(attn.shape, generator=generator, dtype=attn.dtype) >= self.dropout_p
        used = attn * keep / (1.0 - self.dropout_p)
        out = (used @ v).transpose(0, 1).reshape(n, dim)
        return self.proj(out), attn


class Block(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: int, dropout_p: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads, dropout_p)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, mlp_ratio * dim), nn.GELU(), nn.Linear(mlp_ratio * dim, dim)
        )

    def forward(self, x, generator=None):
        h, attn = self.attn(self.norm1(x), generator)
        x = x + h
        x = x + self.mlp(self.norm2(x))
        return x, attn


class MilModel(nn.Module):
    def __init__(self, config: MilConfig):
        super().__init__()
        self.config = config
        d = config.embed_dim
        self.embed = nn.Linear(config.input_dim, d)
        self.token = nn.Parameter(torch.zeros(1, d))
        self.blocks = nn.ModuleList(
            Block(d, config.heads, config.mlp_ratio, config.attention_dropout_p)
            for _ in range(config.depth)
        )
        self.norm = nn.LayerNorm(d)
        self.head = nn.Linear(d, config.n_classes)
        self.reset_parameters()

    def reset_parameters(self) -> None:
        for m in self.modules():
            if isinstance(m, nn.Linear):
                nn.init.trunc_normal_(m.weight, std=0.02)
                nn.init.zeros_(m.bias)
            elif isinstance(m, nn.LayerNorm):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)
        nn.init.trunc_normal_(self.token, std=0.02)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, tiles: torch.Tensor, generator: torch.Generator | None = None):
        """Return (logits, token attention over tiles, penultimate representation)."""
        x = torch.cat([self.token, self.embed(tiles)], dim=0)
        attn = None
        for block in self.blocks:
            x, attn = block(x, generator)
        rep = self.norm(x[0])
        # token row of the last block, head-averaged, renormalized over tiles
        weights = attn[:, 0, 1:].mean(dim=0)
        weights = weights / weights.sum()
        return self.head(rep), weights, rep


def build_model(config: MilConfig, seed: int = 0, dtype=torch.float32) -> MilModel:
    torch.manual_seed(seed)
    return MilModel(config).to(dtype)


def n_parameters(model: MilModel) -> int:
    return sum(p.numel() for p in model.parameters())


# --------------------------------------------------------------------------
# Inference pieces


def _tiles(bag) -> np.ndarray:
    if isinstance(bag, FeatureBag):
        return bag.vectors
    return np.asarray(bag)


def feature_dropout(tiles: np.ndarray, p: float, rng: np.random.Generator) -> np.ndarray:
    """Drop each tile with probability ``p``; never returns an empty bag."""
    tiles = _tiles(tiles)
    if p <= 0:
        return tiles
    keep = rng.random(len(tiles)) >= p
    if not keep.any():
        keep[rng.integers(len(tiles))] = True
    return tiles[keep]


def cap_tiles(tiles: np.ndarray, cap: int, rng: np.random.Generator) -> np.ndarray:
    if len(tiles) <= cap:
        return tiles
    return tiles[np.sort(rng.choice(len(tiles), size=cap, replace=False))]


def _torch_generator(rng: np.random.Generator) -> torch.Generator:
    return torch.Generator().manual_seed(int(rng.integers(0, 2**63 - 1)))


def _as_tensor(tiles: np.ndarray, model: MilModel) -> torch.Tensor:
    dtype = next(model.parameters()).dtype
    return torch.tensor(np.asarray(tiles), dtype=dtype)


def forward(model: MilModel, bag, mode: str = "eval", rng: np.random.Generator | None = None):
    """Single forward pass returning numpy (probs, attention_weights, penultimate).

    In train mode feature dropout, the tile cap and attention dropout are
    active and ``rng`` is required; eval mode is deterministic. Bags larger
    than the cap in eval mode must be subsampled by the caller.
    """
    tiles = _tiles(bag)
    if tiles.ndim != 2 or len(tiles) == 0:
        raise ConfigError("empty bag")
    if tiles.shape[1] != model.config.input_dim:
        raise ConfigError(
            f"bag dim {tiles.shape[1]} does not match model input_dim {model.config.input_dim}", "dim"
        )
    if mode == "train":
        if rng is None:
            raise ConfigError("train mode needs an rng")
        tiles = feature_dropout(tiles, model.config.feature_dropout_p, rng)
        tiles = cap_tiles(tiles, model.config.feature_cap, rng)
        model.train()
        gen = _torch_generator(rng)
        logits, weights, rep = model(_as_tensor(tiles, model), gen)
    elif mode == "eval":
        model.eval()
        with torch.no_grad():
            logits, weights, rep = model(_as_tensor(tiles, model))
    else:
        raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}", "mode")
    probs = torch.softmax(logits.detach(), dim=-1)
    return (
        probs.double().numpy(),
        weights.detach().double().numpy(),
        rep.detach().double().numpy(),
    )


def attention_map(model: MilModel, bag) -> np.ndarray:
    """Per-tile attention of the aggregation token in the final block (eval mode)."""
    return forward(model, bag, "eval")[1]


@dataclass
class Prediction:
    case_id: str
    probs: np.ndarray
    penultimate: np.ndarray
    n_passes: int = 1


def predict_case(
    models: MilModel | Sequence[MilModel],
    bags: Sequence[FeatureBag] | np.ndarray,
    cap: int | None = None,
    n_subsets: int = 10,
    rng: np.random.Generator | None = None,
    case_id: str = "",
) -> Prediction:
    """Ensemble prediction for one case.

    Tiles of all given bags are pooled. Above ``cap`` tiles each model
    averages ``n_subsets`` random cap-sized subsets (the same subsets for
    every model). Ensemble output is the mean of model outputs.
    """
    if isinstance(models, MilModel):
        models = [models]
    if not models:
        raise ConfigError("no models for prediction")
    if isinstance(bags, np.ndarray):
        tiles = bags
    else:
        bags = list(bags)
        if not bags:
            raise ConfigError(f"case {case_id}: empty tile pool")
        tiles = pool_bags(bags)
        case_id = case_id or bags[0].case_id
    if len(tiles) == 0:
        raise ConfigError(f"case {case_id}: empty tile pool")
    cap = cap or models[0].config.feature_cap
    if len(tiles) <= cap:
        subsets = [tiles]
    else:
        rng = rng if rng is not None else np.random.default_rng(0)
        subsets = [cap_tiles(tiles, cap, rng) for _ in range(n_subsets)]

    probs, reps = [], []
    for m in models:
        outs = [forward(m, s, "eval") for s in subsets]
        probs.append(np.mean([o[0] for o in outs], axis=0))
        reps.append(np.mean([o[2] for o in outs], axis=0))
    return Prediction(case_id, np.mean(probs, axis=0), np.mean(reps, axis=0), len(subsets))


def tune_threshold(scores, labels) -> float:
    """Threshold on the positive-class probability maximizing accuracy.

    Candidates are midpoints between consecutive distinct scores plus 0.5;
    a case is positive when its score is >= the threshold. Ties go to the
    candidate nearest 0.5 (then the lower one).
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if labels.all() or not labels.any():
        raise ConfigError("threshold tuning needs both classes in the validation set")
    u = np.unique(scores)
    candidates = np.unique(np.r_[(u[:-1] + u[1:]) / 2, 0.5])
    acc = np.array([np.mean((scores >= c) == labels) for c in candidates])
    best = np.flatnonzero(acc == acc.max())
    dist = np.abs(candidates[best] - 0.5)
    return float(candidates[best[np.argmin(dist)]])


# --------------------------------------------------------------------------
# Training


@dataclass
class Example:
    case_id: str
    tiles: np.ndarray
    label: int


@dataclass
class LogRow:
    iteration: int
    train_loss: float
    val_loss: float
    lr: float


@dataclass
class TrainingLog:
    rows: list[LogRow] = field(default_factory=list)
    best_iteration: int = 0
    best_val_loss: float = math.inf

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iteration", "train_loss", "val_loss", "lr"])
        for r in self.rows:
            train = "" if math.isnan(r.train_loss) else repr(r.train_loss)
            w.writerow([r.iteration, train, repr(r.val_loss), repr(r.lr)])
        return buf.getvalue()


def _param_groups(model: MilModel, weight_decay: float):
    decay, no_decay = [], []
    for name, p in model.named_parameters():
        if p.ndim < 2 or name == "token" or "norm" in name:
            no_decay.append(p)
        else:
            decay.append(p)
    return [
        {"params": decay, "weight_decay": weight_decay},
        {"params": no_decay, "weight_decay": 0.0},
    ]


def _case_loss(logits: torch.Tensor, label: int, weights: torch.Tensor | None) -> torch.Tensor:
    loss = F.cross_entropy(logits[None], torch.tensor([label]))
    if weights is not None:
        loss = loss * weights[label]
    return loss


def validation_loss(
    model: MilModel, examples: Sequence[Example], class_weights=None, seed: int = 0
) -> float:
    """Class-weighted mean cross-entropy in eval mode."""
    rng = np.random.default_rng(seed)
    model.eval()
    total, norm = 0.0, 0.0
    with torch.no_grad():
        for ex in examples:
            tiles = cap_tiles(ex.tiles, model.config.feature_cap, rng)
            logits, _, _ = model(_as_tensor(tiles, model))
            w = 1.0 if class_weights is None else float(class_weights[ex.label])
            total += w * float(F.cross_entropy(logits[None], torch.tensor([ex.label])))
            norm += w
    return total / norm


def train(
    model: MilModel,
    folds: Sequence[Sequence[Example]],
    fold_index: int,
    config: TrainConfig,
) -> tuple[MilModel, TrainingLog]:
    """Train on all folds but ``fold_index`` and keep the best validation checkpoint.

    One case per iteration. Gradients are averaged over ``grad_accum``
    iterations before each AdamW step; validation loss is evaluated before
    training and after every ``validation_period`` iterations.
    """
    if not 0 <= fold_index < len(folds):
        raise ConfigError(f"fold_index {fold_index} outside [0, {len(folds)})", "fold")
    if any(len(f) == 0 for f in folds):
        raise ConfigError("empty fold", "fold")
    train_set = [ex for k, f in enumerate(folds) if k != fold_index for ex in f]
    val_set = list(folds[fold_index])
    n_classes = model.config.n_classes
    weights = None
    if config.class_weights is not None:
        if len(config.class_weights) != n_classes:
            raise ConfigError("class_weights length must equal n_classes", "class_weights")
        weights = torch.tensor(config.class_weights, dtype=next(model.parameters()).dtype)

    rng = np.random.default_rng(config.seed)
    optimizer = torch.optim.AdamW(
        _param_groups(model, config.weight_decay), lr=config.lr0, betas=config.betas
    )
    val_seed = config.seed + 1

    log = TrainingLog()
    best_state = copy.deepcopy(model.state_dict())
    val = validation_loss(model, val_set, config.class_weights, val_seed)
    log.rows.append(LogRow(0, math.nan, val, learning_rate(0, config)))
    log.best_val_loss, log.best_iteration = val, 0

    order = rng.permutation(len(train_set))
    cursor = 0
    window = []
    optimizer.zero_grad()
    for t in range(config.total_iterations):
        if cursor == len(order):
            order = rng.permutation(len(train_set))
            cursor = 0
        ex = train_set[order[cursor]]
        cursor += 1

        tiles = feature_dropout(ex.tiles, model.config.feature_dropout_p, rng)
        tiles = cap_tiles(tiles, model.config.feature_cap, rng)
        model.train()
        logits, _, _ = model(_as_tensor(tiles, model), _torch_generator(rng))
        loss = _case_loss(logits, ex.label, weights)
        if not torch.isfinite(loss):
            raise FloatingPointError(f"non-finite loss at iteration {t}")
        (loss / config.grad_accum).backward()
        window.append(float(loss.detach()))

        if (t + 1) % config.grad_accum == 0:
            lr = learning_rate(t, config)
            for g in optimizer.param_groups:
                g["lr"] = lr
            optimizer.step()
            optimizer.zero_grad()

        if (t + 1) % config.validation_period == 0:
            val = validation_loss(model, val_set, config.class_weights, val_seed)
            log.rows.append(LogRow(t + 1, float(np.mean(window)), val, learning_rate(t, config)))
            window = []
            if val < log.best_val_loss:
                log.best_val_loss, log.best_iteration = val, t + 1
                best_state = copy.deepcopy(model.state_dict())

    best = MilModel(model.config).to(next(model.parameters()).dtype)
    best.load_state_dict(best_state)
    best.eval()
    return best, log


# --------------------------------------------------------------------------
# Checkpoints: b"SPZM", u32 version, u32 config length, config JSON,
# u32 tensor count, then per tensor: u16 name length, name, u8 ndim,
# u64 dims, float64 little-endian values.

CKPT_MAGIC = b"SPZM"
CKPT_VERSION = 1


class CheckpointError(SpitzkitError, ValueError):
    pass


def save_checkpoint(model: MilModel) -> bytes:
    cfg = json.dumps(asdict(model.config), sort_keys=True).encode()
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(cfg)), cfg]
    state = model.state_dict()
    parts.append(struct.pack("<I", len(state)))
    for name, t in state.items():
        raw = name.encode()
        arr = t.detach().cpu().double().numpy()
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.astype("<f8").tobytes())
    return b"".join(parts)


def load_checkpoint(data: bytes, dtype=torch.float32) -> MilModel:
    view = memoryview(data)
    try:
        if bytes(view[:4]) != CKPT_MAGIC:
            raise CheckpointError("bad checkpoint magic")
        version, n_cfg = struct.unpack_from("<II", view, 4)
        if version != CKPT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        pos = 12
        config = MilConfig(**json.loads(bytes(view[pos:pos + n_cfg])))
        pos += n_cfg
        (count,) = struct.unpack_from("<I", view, pos)
        pos += 4
        state = {}
        for _ in range(count):
            (n_name,) = struct.unpack_from("<H", view, pos)
            pos += 2
            name = bytes(view[pos:pos + n_name]).decode()
            pos += n_name
            (ndim,) = struct.unpack_from("<B", view, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}Q", view, pos)
            pos += 8 * ndim
            size = int(np.prod(shape)) if ndim else 1
            if pos + 8 * size > len(view):
                raise CheckpointError("truncated checkpoint")
            arr = np.frombuffer(view, dtype="<f8", count=size, offset=pos).reshape(shape)
            pos += 8 * size
            state[name] = torch.from_numpy(arr.copy())
    except struct.error as e:
        raise CheckpointError(f"truncated checkpoint: {e}") from None
    model = MilModel(config)
    model.load_state_dict(state)
    model.eval()
    return model.to(dtype)
