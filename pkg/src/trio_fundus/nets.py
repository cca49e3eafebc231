"""The three feature networks, their losses, training loops and on-disk bundles.

Component 1 is a backbone with a two-layer head on RGB input; component 2 is the
same structure on the 10-channel filter stack; component 3 is a weight-shared
Siamese embedding trained with a contrastive loss.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn

log = logging.getLogger(__name__)

EPS = 1e-7
BACKBONES = ("large_backbone", "small_backbone", "tiny_backbone")
TINY_WIDTHS = (16, 32, 64, 128)
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class AssetError(Exception):
    pass


class TrainingDivergedError(Exception):
    pass


class SchemaError(Exception):
    pass


# --------------------------------------------------------------------------- losses


def bce_loss(y, y_hat, eps: float = EPS) -> float:
    """Mean binary cross-entropy with natural log; predictions clamped to [eps, 1 - eps]."""
    y = np.asarray(y, dtype=np.float64)
    p = np.clip(np.asarray(y_hat, dtype=np.float64), eps, 1.0 - eps)
    if y.shape != p.shape or y.size == 0:
        raise ValueError("y and y_hat must be nonempty and equally shaped")
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log1p(-p)))


def bce_loss_grad(y, y_hat, eps: float = EPS) -> np.ndarray:
    """d bce_loss / d y_hat (zero where clamping is active)."""
    y = np.asarray(y, dtype=np.float64)
    raw = np.asarray(y_hat, dtype=np.float64)
    p = np.clip(raw, eps, 1.0 - eps)
    g = -(y / p - (1.0 - y) / (1.0 - p)) / y.size
    return np.where((raw > eps) & (raw < 1.0 - eps), g, 0.0)


def contrastive_loss(d: float, same: bool, margin: float = 1.0) -> float:
    if d < 0 or margin <= 0:
        raise ValueError("distance must be >= 0 and margin > 0")
    return float(d * d) if same else float(max(0.0, margin - d) ** 2)


def contrastive_loss_grad(d: float, same: bool, margin: float = 1.0) -> float:
    return 2.0 * d if same else -2.0 * max(0.0, margin - d)


def torch_bce(p: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    p = p.clamp(EPS, 1.0 - EPS)
    return -(y * torch.log(p) + (1 - y) * torch.log1p(-p)).mean()


def torch_contrastive(d: torch.Tensor, same: torch.Tensor, margin: float) -> torch.Tensor:
    return torch.where(same > 0, d.pow(2), (margin - d).clamp(min=0).pow(2)).mean()


# --------------------------------------------------------------------------- architectures


@dataclass
class HeadConfig:
    component: int = 1
    backbone_id: str = "tiny_backbone"
    head_dims: tuple[int, int] = (256, 128)
    input_size: int = 300
    seed: int = 0
    dropout: float = 0.3
    activation: str = "relu"
    weights_path: str = ""
    embedding_dim: int = 32
    margin: float = 1.0

    @property
    def in_channels(self) -> int:
        return 10 if self.component == 2 else 3

    def __post_init__(self):
        self.head_dims = tuple(int(x) for x in self.head_dims)
        if self.backbone_id not in BACKBONES:
            raise ValueError(f"backbone_id must be one of {BACKBONES}, got {self.backbone_id!r}")
        if len(self.head_dims) != 2 or min(self.head_dims) < 1:
            raise ValueError(f"head_dims needs two positive widths, got {self.head_dims}")


class TinyBackbone(nn.Module):
    """Four stride-2 conv blocks and global average pooling."""

    def __init__(self, in_channels: int = 3, widths: Sequence[int] = TINY_WIDTHS):
        super().__init__()
        layers, c = [], in_channels
        for w in widths:
            layers += [nn.Conv2d(c, w, 3, stride=2, padding=1), nn.ReLU(inplace=True)]
            c = w
        self.blocks = nn.Sequential(*layers)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.out_dim = c

    def forward(self, x):
        return self.pool(self.blocks(x)).flatten(1)


class PretrainedBackbone(nn.Module):
    """torchvision EfficientNet feature trunk with weights from a local file."""

    def __init__(self, arch: str, weights_path: str, load: bool = True):
        super().__init__()
        import torchvision

        path = Path(weights_path) if weights_path else None
        if load and (path is None or not path.is_file()):
            raise AssetError(
                f"pretrained weights for {arch} not found at {weights_path!r}. Fetch them once with\n"
                f"  python -c \"import torch, torchvision; torch.save(torchvision.models.{arch}("
                f"weights='DEFAULT').state_dict(), '{arch}.pth')\"\n"
                f"and point nets.componentN.weights_path at the file.")
        net = getattr(torchvision.models, arch)(weights=None)
        if load:
            net.load_state_dict(torch.load(path, map_location="cpu", weights_only=True))
        self.features = net.features
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.out_dim = net.classifier[-1].in_features
        self.register_buffer("mean", torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(IMAGENET_STD).view(1, 3, 1, 1))

    def forward(self, x):
        return self.pool(self.features((x - self.mean) / self.std)).flatten(1)


def _make_backbone(cfg: HeadConfig, load_pretrained: bool) -> tuple[nn.Module, nn.Module | None]:
    if cfg.backbone_id == "tiny_backbone":
        return TinyBackbone(cfg.in_channels), None
    arch = "efficientnet_b3" if cfg.backbone_id == "large_backbone" else "efficientnet_b0"
    backbone = PretrainedBackbone(arch, cfg.weights_path, load=load_pretrained)
    proj = nn.Conv2d(cfg.in_channels, 3, 1) if cfg.in_channels != 3 else None
    return backbone, proj


class ComponentHead(nn.Module):
    """Backbone, two dense layers and a sigmoid output; features tap the second dense layer."""

    def __init__(self, cfg: HeadConfig, load_pretrained: bool = True):
        super().__init__()
        self.cfg = cfg
        torch.manual_seed(cfg.seed)
        self.backbone, self.proj = _make_backbone(cfg, load_pretrained)
        d1, d2 = cfg.head_dims
        self.head = nn.Sequential(
            nn.Linear(self.backbone.out_dim, d1), nn.ReLU(), nn.Dropout(cfg.dropout),
            nn.Linear(d1, d2), nn.ReLU(), nn.Dropout(cfg.dropout),
        )
        self.out = nn.Linear(d2, 1)
        self.pretrained = cfg.backbone_id != "tiny_backbone"

    @property
    def feature_dim(self) -> int:
        return self.cfg.head_dims[1]

    def features(self, x: torch.Tensor) -> torch.Tensor:
        if self.proj is not None:
            x = self.proj(x)
        return self.head(self.backbone(x))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.out(self.features(x))).squeeze(1)


class SiameseModel(nn.Module):
    """Shared-weight twin mapping images to embeddings; distance is Euclidean."""

    def __init__(self, cfg: HeadConfig, load_pretrained: bool = True):
        super().__init__()
        self.cfg = cfg
        torch.manual_seed(cfg.seed)
        self.backbone, self.proj = _make_backbone(cfg, load_pretrained)
        d1, _ = cfg.head_dims
        self.twin_head = nn.Sequential(
            nn.Linear(self.backbone.out_dim, d1), nn.ReLU(), nn.Linear(d1, cfg.embedding_dim))
        self.margin = cfg.margin
        self.register_buffer("prototypes", torch.zeros(2, cfg.embedding_dim))
        self.pretrained = cfg.backbone_id != "tiny_backbone"

    @property
    def feature_dim(self) -> int:
        return self.cfg.embedding_dim + 2

    def embed(self, x: torch.Tensor) -> torch.Tensor:
        if self.proj is not None:
            x = self.proj(x)
        return self.twin_head(self.backbone(x))

    @staticmethod
    def pair_distance(ea: torch.Tensor, eb: torch.Tensor) -> torch.Tensor:
        return (ea - eb).pow(2).sum(dim=1).sqrt()

    def forward(self, xa: torch.Tensor, xb: torch.Tensor) -> torch.Tensor:
        return self.pair_distance(self.embed(xa), self.embed(xb))

    def features(self, x: torch.Tensor) -> torch.Tensor:
        e = self.embed(x)
        d_pos = (e - self.prototypes[1]).pow(2).sum(dim=1, keepdim=True).sqrt()
        d_neg = (e - self.prototypes[0]).pow(2).sum(dim=1, keepdim=True).sqrt()
        return torch.cat([e, d_pos, d_neg], dim=1)


def build_component1(cfg: HeadConfig) -> ComponentHead:
    cfg.component = 1
    return ComponentHead(cfg)


def build_component2(cfg: HeadConfig) -> ComponentHead:
    cfg.component = 2
    return ComponentHead(cfg)


def build_siamese(cfg: HeadConfig) -> SiameseModel:
    cfg.component = 3
    return SiameseModel(cfg)


def to_tensor(images: np.ndarray) -> torch.Tensor:
    """uint8 NHWC -> float32 NCHW in [0, 1]."""
    a = np.asarray(images)
    if a.ndim == 3:
        a = a[None]
    return torch.from_numpy(np.ascontiguousarray(a.transpose(0, 3, 1, 2))).float().div_(255.0)


# --------------------------------------------------------------------------- training


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 16
    learning_rate: float = 1e-4
    early_stop_patience: int = 5
    seed: int = 0
    optimizer_name: str = "adam"
    unfreeze_epoch: int = 3
    unfreeze_fraction: float = 0.3
    backbone_lr_scale: float = 0.1

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate <= 0 or self.early_stop_patience < 1:
            raise ValueError(f"invalid training config {self}")
        if self.optimizer_name not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer_name!r}")


@dataclass
class History:
    epochs: list[dict] = field(default_factory=list)

    def append(self, epoch: int, train_loss: float, val_loss: float | None) -> None:
        self.epochs.append({"epoch": epoch, "train_loss": train_loss,
                            "val_loss": float("nan") if val_loss is None else val_loss})

    @property
    def train_loss(self) -> list[float]:
        return [e["train_loss"] for e in self.epochs]

    @property
    def val_loss(self) -> list[float]:
        return [e["val_loss"] for e in self.epochs]

    def __len__(self):
        return len(self.epochs)


def _backbone_blocks(backbone: nn.Module) -> list[nn.Module]:
    if isinstance(backbone, TinyBackbone):
        return [m for m in backbone.blocks if isinstance(m, nn.Conv2d)]
    return list(backbone.features)


def _make_optimizer(model: nn.Module, cfg: TrainConfig, phase: str):
    """Frozen phase trains everything but the backbone; thawed phase adds the
    top ``unfreeze_fraction`` of backbone blocks at a reduced rate."""
    bb = model.backbone
    if not model.pretrained:
        params = [{"params": list(model.parameters()), "lr": cfg.learning_rate}]
    else:
        for p in bb.parameters():
            p.requires_grad_(False)
        head = [p for n, p in model.named_parameters() if not n.startswith("backbone.")]
        params = [{"params": head, "lr": cfg.learning_rate}]
        if phase == "thawed":
            blocks = _backbone_blocks(bb)
            top = blocks[len(blocks) - math.ceil(cfg.unfreeze_fraction * len(blocks)):]
            thawed = [p for b in top for p in b.parameters()]
            for p in thawed:
                p.requires_grad_(True)
            params.append({"params": thawed, "lr": cfg.learning_rate * cfg.backbone_lr_scale})
    if cfg.optimizer_name == "sgd":
        return torch.optim.SGD(params, lr=cfg.learning_rate, momentum=0.9)
    return torch.optim.Adam(params, lr=cfg.learning_rate)


TrainData = tuple  # (inputs, targets[, ...]) arrays
DataSource = Callable[[int], TrainData]


def _fit(model: nn.Module, train: TrainData | DataSource, val: TrainData | None,
         cfg: TrainConfig, step: Callable, val_loss_fn: Callable) -> History:
    history = History()
    if cfg.epochs == 0:
        return history
    torch.manual_seed(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    phase = "frozen" if model.pretrained and cfg.unfreeze_epoch > 0 else "thawed"
    opt = _make_optimizer(model, cfg, phase)
    best, best_state, stale, blowups, first = math.inf, None, 0, 0, None
    for epoch in range(cfg.epochs):
        if phase == "frozen" and epoch >= cfg.unfreeze_epoch:
            phase = "thawed"
            opt = _make_optimizer(model, cfg, phase)
        data = train(epoch) if callable(train) else train
        n = len(data[0])
        order = torch.randperm(n, generator=gen).numpy()
        model.train()
        total = 0.0
        for s in range(0, n, cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            loss = step(model, tuple(d[idx] for d in data))
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(idx)
        train_loss = total / n
        if not math.isfinite(train_loss):
            raise TrainingDivergedError(f"non-finite training loss at epoch {epoch}")
        first = train_loss if first is None else first
        blowups = blowups + 1 if train_loss > 10 * first else 0
        if blowups >= 3:
            raise TrainingDivergedError(
                f"training loss above 10x its initial value for 3 epochs (epoch {epoch})")
        vloss = None
        if val is not None:
            model.eval()
            with torch.no_grad():
                vloss = float(val_loss_fn(model, val))
        history.append(epoch, train_loss, vloss)
        log.debug("epoch %d train %.5f val %s", epoch, train_loss, vloss)
        if vloss is not None:
            if vloss < best:
                best, stale = vloss, 0
                best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
            else:
                stale += 1
                if stale >= cfg.early_stop_patience:
                    break
    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return history


def _batched(model_fn, x: torch.Tensor, batch: int = 64) -> torch.Tensor:
    return torch.cat([model_fn(x[i:i + batch]) for i in range(0, len(x), batch)])


def train_binary_head(model: ComponentHead, train: TrainData | DataSource,
                      val: TrainData | None, cfg: TrainConfig) -> tuple[ComponentHead, History]:
    """Fit a component head with binary cross-entropy.

    ``train`` is ``(images, labels)`` (uint8 NHWC, 0/1) or a callable mapping
    the epoch index to such a pair, which is how per-epoch augmentation is fed
    in. Early stopping monitors validation loss and restores the best weights.
    """
    def step(m, batch):
        x, y = batch
        return torch_bce(m(to_tensor(x)), torch.as_tensor(y, dtype=torch.float32))

    def vloss(m, data):
        x, y = data
        p = _batched(m, to_tensor(x))
        return torch_bce(p, torch.as_tensor(y, dtype=torch.float32))

    history = _fit(model, train, val, cfg, step, vloss)
    return model, history


def train_siamese(model: SiameseModel, pairs: TrainData, val_pairs: TrainData | None,
                  cfg: TrainConfig) -> tuple[SiameseModel, History]:
    """Fit the twin with the contrastive loss on ``(images_a, images_b, same)`` arrays."""
    def step(m, batch):
        xa, xb, same = batch
        # offset keeps the sqrt differentiable at zero distance
        d = ((m.embed(to_tensor(xa)) - m.embed(to_tensor(xb))).pow(2).sum(dim=1) + 1e-12).sqrt()
        return torch_contrastive(d, torch.as_tensor(same, dtype=torch.float32), m.margin)

    def vloss(m, data):
        xa, xb, same = data
        d = torch.cat([m(to_tensor(xa[i:i + 64]), to_tensor(xb[i:i + 64]))
                       for i in range(0, len(xa), 64)])
        return torch_contrastive(d, torch.as_tensor(same, dtype=torch.float32), m.margin)

    history = _fit(model, pairs, val_pairs, cfg, step, vloss)
    return model, history


def set_prototypes(model: SiameseModel, images: np.ndarray, labels: np.ndarray) -> None:
    """Store the mean training embedding of each class (row 0 negative, row 1 positive)."""
    labels = np.asarray(labels)
    if not (labels == 1).any() or not (labels == 0).any():
        raise ValueError("prototypes need both classes")
    model.eval()
    with torch.no_grad():
        e = _batched(model.embed, to_tensor(images)).double()
        for c in (0, 1):
            model.prototypes[c] = e[torch.from_numpy(labels == c)].mean(dim=0).float()


def extract_features(model: ComponentHead | SiameseModel, images: np.ndarray,
                     expected_dim: int | None = None) -> np.ndarray:
    """Inference-mode feature rows (float64) for a uint8 NHWC batch."""
    model.eval()
    with torch.no_grad():
        f = _batched(model.features, to_tensor(images)).double().numpy()
    if expected_dim is not None and f.shape[1] != expected_dim:
        raise SchemaError(f"feature width {f.shape[1]} does not match schema width {expected_dim}")
    return f


def predict_proba(model: ComponentHead, images: np.ndarray) -> np.ndarray:
    model.eval()
    with torch.no_grad():
        return _batched(model, to_tensor(images)).double().numpy()


# --------------------------------------------------------------------------- persistence


def save_component(model: ComponentHead | SiameseModel, history: History, directory: str | Path) -> None:
    from safetensors.torch import save_file

    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    state = {k: v.detach().contiguous() for k, v in model.state_dict().items()}
    tmp = d / "weights.safetensors.tmp"
    save_file(state, str(tmp))
    tmp.replace(d / "weights.safetensors")
    manifest = asdict(model.cfg)
    manifest.update(feature_dim=model.feature_dim, in_channels=model.cfg.in_channels,
                    kind="siamese" if isinstance(model, SiameseModel) else "head")
    (d / "arch.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    with (d / "history.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss"])
        for e in history.epochs:
            w.writerow([e["epoch"], repr(e["train_loss"]), repr(e["val_loss"])])


def load_component(directory: str | Path) -> ComponentHead | SiameseModel:
    from safetensors.torch import load_file

    d = Path(directory)
    manifest = json.loads((d / "arch.json").read_text())
    kind = manifest.pop("kind")
    for k in ("feature_dim", "in_channels"):
        manifest.pop(k, None)
    cfg = HeadConfig(**manifest)
    cls = SiameseModel if kind == "siamese" else ComponentHead
    model = cls(cfg, load_pretrained=False)
    model.load_state_dict(load_file(str(d / "weights.safetensors")))
    model.eval()
    return model


def load_history(directory: str | Path) -> History:
    h = History()
    with (Path(directory) / "history.csv").open(newline="") as fh:
        for row in csv.DictReader(fh):
            h.append(int(row["epoch"]), float(row["train_loss"]), float(row["val_loss"]))
    return h
