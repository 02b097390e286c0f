"""Membership classifiers: a dilated causal TCN for single pairs and a 2-D ResNet for stacks."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from rlmia.checkpoints import load_archive, save_archive
from rlmia.dataset import COLLECTIVE, INDIVIDUAL, AttackDataset, CollectiveSample, PairedSample
from rlmia.nets import load_numpy_state, state_dict_to_numpy, torch_seed

logger = logging.getLogger(__name__)


class ClassifierError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TcnConfig:
    levels: int = 4
    channels: int = 32
    kernel_size: int = 3
    dropout: float = 0.5
    # "mean": average over time; "last": the final step, which sees the whole window when rf >= L
    pooling: str = "mean"
    # decorrelate the input channels with statistics of the training split
    whiten: bool = False

    arch = "tcn"

    def __post_init__(self):
        if self.pooling not in ("mean", "last"):
            raise ValueError(f"unknown pooling {self.pooling!r}")

    def receptive_field(self) -> int:
        return 1 + 2 * (self.kernel_size - 1) * (2**self.levels - 1)


@dataclass
class ResNetConfig:
    stages: int = 3
    blocks_per_stage: int = 2
    base_channels: int = 16
    weight_decay: float = 1.0
    # dropout between the two convolutions of each residual block
    dropout: float = 0.0
    whiten: bool = False

    arch = "resnet"


@dataclass
class TrainSpec:
    lr: float = 1e-3
    batch_size: int = 32
    epochs: int = 50
    patience: int = 10

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")


class ChannelWhitening(nn.Module):
    """Fixed affine map ``W (x - mean)`` over the channel axis; identity until fitted.

    ``fit`` sets ``W`` to the symmetric inverse square root of the channel
    covariance, pooled over samples and positions.
    """

    def __init__(self, channels: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.register_buffer("mean", torch.zeros(channels))
        self.register_buffer("matrix", torch.eye(channels))

    @torch.no_grad()
    def fit(self, x: np.ndarray) -> "ChannelWhitening":
        c = x.shape[1]
        flat = np.moveaxis(np.asarray(x, dtype=np.float64), 1, -1).reshape(-1, c)
        mean = flat.mean(axis=0)
        cov = np.atleast_2d(np.cov(flat, rowvar=False))
        vals, vecs = np.linalg.eigh(cov)
        w = vecs @ np.diag(1.0 / np.sqrt(np.maximum(vals, 0.0) + self.eps)) @ vecs.T
        self.mean.copy_(torch.as_tensor(mean))
        self.matrix.copy_(torch.as_tensor(w))
        return self

    def forward(self, x):
        shape = (1, -1) + (1,) * (x.dim() - 2)
        return torch.einsum("ij,nj...->ni...", self.matrix, x - self.mean.view(shape))


class CausalConv1d(nn.Conv1d):
    """Conv1d that left-pads by ``(k - 1) * dilation`` so output t sees inputs <= t only."""

    def __init__(self, c_in, c_out, kernel_size, dilation):
        super().__init__(c_in, c_out, kernel_size, dilation=dilation)
        self.left_pad = (kernel_size - 1) * dilation

    def forward(self, x):
        return super().forward(F.pad(x, (self.left_pad, 0)))


class TemporalBlock(nn.Module):
    def __init__(self, c_in, c_out, kernel_size, dilation, dropout):
        super().__init__()
        self.conv1 = CausalConv1d(c_in, c_out, kernel_size, dilation)
        self.conv2 = CausalConv1d(c_out, c_out, kernel_size, dilation)
        self.drop = nn.Dropout(dropout)
        self.downsample = nn.Conv1d(c_in, c_out, 1) if c_in != c_out else None

    def forward(self, x):
        out = self.drop(F.relu(self.conv1(x)))
        out = self.drop(F.relu(self.conv2(out)))
        res = x if self.downsample is None else self.downsample(x)
        return F.relu(out + res)


class TCNClassifier(nn.Module):
    def __init__(self, in_channels: int, config: TcnConfig):
        super().__init__()
        blocks = []
        c = in_channels
        for i in range(config.levels):
            blocks.append(TemporalBlock(c, config.channels, config.kernel_size, 2**i, config.dropout))
            c = config.channels
        self.blocks = nn.Sequential(*blocks)
        self.head = nn.Linear(c, 1)
        self.pooling = config.pooling
        self.whiten = ChannelWhitening(in_channels) if config.whiten else None

    def forward(self, x):  # (N, 2 d_A, L) -> (N,)
        if self.whiten is not None:
            x = self.whiten(x)
        h = self.blocks(x)
        pooled = h[..., -1] if self.pooling == "last" else h.mean(dim=-1)
        return self.head(pooled).squeeze(-1)


class BasicBlock(nn.Module):
    def __init__(self, c_in, c_out, stride, dropout=0.0):
        super().__init__()
        self.drop = nn.Dropout(dropout)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(c_out)
        self.shortcut = None
        if stride != 1 or c_in != c_out:
            self.shortcut = nn.Sequential(nn.Conv2d(c_in, c_out, 1, stride=stride, bias=False),
                                          nn.BatchNorm2d(c_out))

    def forward(self, x):
        out = self.drop(F.relu(self.bn1(self.conv1(x))))
        out = self.bn2(self.conv2(out))
        res = x if self.shortcut is None else self.shortcut(x)
        return F.relu(out + res)


class ResNetClassifier(nn.Module):
    """Convolves over the (L x m) plane with the 2 d_A action rows as channels."""

    def __init__(self, in_channels: int, config: ResNetConfig):
        super().__init__()
        c = config.base_channels
        self.stem = nn.Sequential(nn.Conv2d(in_channels, c, 3, padding=1, bias=False),
                                  nn.BatchNorm2d(c), nn.ReLU())
        layers = []
        for s in range(config.stages):
            c_out = config.base_channels * 2**s
            for b in range(config.blocks_per_stage):
                layers.append(BasicBlock(c, c_out, 2 if (b == 0 and s > 0) else 1, config.dropout))
                c = c_out
        self.layers = nn.Sequential(*layers)
        self.head = nn.Linear(c, 1)
        self.whiten = ChannelWhitening(in_channels) if config.whiten else None

    def forward(self, x):  # (N, 2 d_A, L, m) -> (N,)
        if self.whiten is not None:
            x = self.whiten(x)
        h = self.layers(self.stem(x))
        return self.head(h.mean(dim=(-2, -1))).squeeze(-1)


def build_network(config: TcnConfig | ResNetConfig, sample_shape: tuple[int, ...]) -> nn.Module:
    if isinstance(config, TcnConfig):
        if len(sample_shape) != 2:
            raise ClassifierError(f"TCN expects (2 d_A, L) samples, got {sample_shape}")
        rf = config.receptive_field()
        if rf < sample_shape[1]:
            raise ClassifierError(f"TCN receptive field {rf} does not cover L={sample_shape[1]}; "
                                  "add levels or widen the kernel")
        return TCNClassifier(sample_shape[0], config)
    if isinstance(config, ResNetConfig):
        if len(sample_shape) != 3:
            raise ClassifierError(f"ResNet expects (2 d_A, L, m) samples, got {sample_shape}")
        return ResNetClassifier(sample_shape[0], config)
    raise ClassifierError(f"unknown classifier config {type(config).__name__}")


_MODE_OF = {"tcn": INDIVIDUAL, "resnet": COLLECTIVE}
_CONFIG_OF = {"tcn": TcnConfig, "resnet": ResNetConfig}


@dataclass
class AttackClassifier:
    network: nn.Module
    config: TcnConfig | ResNetConfig
    sample_shape: tuple[int, ...]
    metadata: dict = field(default_factory=dict)

    @property
    def arch(self) -> str:
        return self.config.arch

    @torch.no_grad()
    def logits(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x)
        if x.shape[1:] != tuple(self.sample_shape):
            raise ClassifierError(f"sample shape {x.shape[1:]} != trained shape {tuple(self.sample_shape)}")
        self.network.eval()
        dtype = next(self.network.parameters()).dtype
        out = [self.network(torch.as_tensor(x[i:i + 256], dtype=dtype)) for i in range(0, len(x), 256)]
        return torch.cat(out).double().numpy()

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        return _sigmoid(self.logits(x))

    def save(self, path, dataset_hash: str | None = None):
        meta = {"config": asdict(self.config), "arch": self.arch, "sample_shape": list(self.sample_shape),
                "metadata": self.metadata, "dataset_manifest_hash": dataset_hash}
        return save_archive(path, f"attack-{self.arch}", state_dict_to_numpy(self.network, "net"), meta)

    @classmethod
    def load(cls, path, arch: str) -> "AttackClassifier":
        meta, arrays = load_archive(path, f"attack-{arch}")
        config = _CONFIG_OF[arch](**meta["config"])
        shape = tuple(meta["sample_shape"])
        net = build_network(config, shape)
        load_numpy_state(net, arrays, "net")
        return cls(net.eval(), config, shape, meta.get("metadata", {}))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    # keep the output strictly inside (0, 1) even for saturated logits
    return np.clip(out, np.nextafter(0.0, 1.0), np.nextafter(1.0, 0.0))


def predict_membership(classifier: AttackClassifier, sample: PairedSample | CollectiveSample | np.ndarray) -> float:
    x = sample.matrix if isinstance(sample, PairedSample) else (
        sample.tensor if isinstance(sample, CollectiveSample) else np.asarray(sample))
    return float(classifier.predict_proba(x[None])[0])


def train_attack(dataset: AttackDataset, config: TcnConfig | ResNetConfig, spec: TrainSpec | None = None,
                 seed: int = 0) -> AttackClassifier:
    """Minimise mean binary cross-entropy on the train split; keep the best-validation weights.

    Falls back to the training loss for model selection when the dataset has
    no validation split.
    """
    spec = spec or TrainSpec()
    if _MODE_OF[config.arch] != dataset.mode:
        raise ClassifierError(f"{config.arch} classifier cannot train on a {dataset.mode} dataset")
    train = dataset.subset("train")
    val = dataset.subset("val")
    counts = train.label_counts()
    if counts[0] == 0 or counts[1] == 0:
        raise ClassifierError(f"training split needs both labels, has {counts}")

    rng = np.random.default_rng(seed)
    with torch_seed(seed):
        net = build_network(config, dataset.sample_shape)
        if net.whiten is not None:
            net.whiten.fit(train.x)
        if isinstance(config, ResNetConfig) and config.weight_decay:
            opt = torch.optim.AdamW(net.parameters(), lr=spec.lr, weight_decay=config.weight_decay)
        else:
            opt = torch.optim.Adam(net.parameters(), lr=spec.lr)
        xt = torch.as_tensor(train.x, dtype=torch.float32)
        yt = torch.as_tensor(train.y, dtype=torch.float32)
        sel_x = torch.as_tensor(val.x if len(val) else train.x, dtype=torch.float32)
        sel_y = torch.as_tensor(val.y if len(val) else train.y, dtype=torch.float32)

        def selection_loss():
            net.eval()
            with torch.no_grad():
                logits = net(sel_x)
                loss = F.binary_cross_entropy_with_logits(logits, sel_y).item()
                acc = float(((logits >= 0).float() == sel_y).float().mean())
            return loss, acc

        init_loss, _ = selection_loss()
        with torch.no_grad():
            net.eval()
            init_train_loss = F.binary_cross_entropy_with_logits(net(xt), yt).item()
        history = {"train_loss": [], "val_loss": [], "val_acc": []}
        best = (math.inf, -1, None)
        stale = 0
        for epoch in range(spec.epochs):
            net.train()
            perm = rng.permutation(len(train))
            total = 0.0
            for i in range(0, len(perm), spec.batch_size):
                idx = perm[i:i + spec.batch_size]
                if len(idx) < 2 and any(isinstance(m, nn.BatchNorm2d) for m in net.modules()):
                    continue
                loss = F.binary_cross_entropy_with_logits(net(xt[idx]), yt[idx])
                if not torch.isfinite(loss):
                    raise TrainingDivergedError(f"attack loss became {loss.item()} in epoch {epoch}")
                opt.zero_grad()
                loss.backward()
                opt.step()
                total += loss.item() * len(idx)
            vloss, vacc = selection_loss()
            history["train_loss"].append(total / len(perm))
            history["val_loss"].append(vloss)
            history["val_acc"].append(vacc)
            if vloss < best[0]:
                best = (vloss, epoch, {k: v.detach().clone() for k, v in net.state_dict().items()})
                stale = 0
            else:
                stale += 1
                if stale >= spec.patience:
                    break
        net.load_state_dict(best[2])
        net.eval()

    meta = {"seed": int(seed), "epochs_run": len(history["train_loss"]), "best_epoch": best[1],
            "best_val_loss": best[0], "initial_val_loss": init_loss, "initial_train_loss": init_train_loss,
            "history": history,
            "selection_split": "val" if len(val) else "train"}
    logger.debug("trained %s: best val loss %.4f at epoch %d", config.arch, best[0], best[1])
    return AttackClassifier(net, config, dataset.sample_shape, meta)


def gradient_check(config: TcnConfig | ResNetConfig, probe_x: np.ndarray, probe_y: np.ndarray,
                   n_params: int = 100, step: float = 1e-5, seed: int = 0,
                   network: nn.Module | None = None) -> float:
    """Largest relative gap between autograd and central-difference gradients of the BCE loss.

    Runs in float64 with dropout disabled. Relative error is
    ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-6)`` over ``n_params``
    randomly chosen scalar parameters (all of them if the network is smaller).
    """
    x = torch.as_tensor(np.asarray(probe_x), dtype=torch.float64)
    y = torch.as_tensor(np.asarray(probe_y), dtype=torch.float64)
    with torch_seed(seed):
        net = network if network is not None else build_network(config, tuple(x.shape[1:]))
    net = net.double().eval()

    def loss_fn():
        return F.binary_cross_entropy_with_logits(net(x), y)

    net.zero_grad()
    loss_fn().backward()
    params = [p for p in net.parameters() if p.requires_grad]
    coords = [(pi, j) for pi, p in enumerate(params) for j in range(p.numel())]
    rng = np.random.default_rng(seed)
    if len(coords) > n_params:
        chosen = [coords[i] for i in rng.choice(len(coords), size=n_params, replace=False)]
    else:
        chosen = coords
    worst = 0.0
    with torch.no_grad():
        for pi, j in chosen:
            p = params[pi].view(-1)
            analytic = params[pi].grad.view(-1)[j].item()
            orig = p[j].item()
            p[j] = orig + step
            up = loss_fn().item()
            p[j] = orig - step
            down = loss_fn().item()
            p[j] = orig
            numeric = (up - down) / (2 * step)
            rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-6)
            worst = max(worst, rel)
    return worst


def count_parameters(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters())
