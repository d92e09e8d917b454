"""VAE and CNN models, their losses, training loops, and checkpoint persistence.

The VAE is trained on the normal class only and provides reconstructions whose
per-pixel error drives detection. The CNN is a binary normal-vs-known-anomaly
classifier whose last-layer feature maps and pre-squashing score feed the
region-of-interest computation.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .dataset import DatasetSplit

CHECKPOINT_SCHEMA_VERSION = 1


class CheckpointError(RuntimeError):
    """Raised when a checkpoint directory is missing, tampered, or incompatible."""


@dataclass(frozen=True)
class VaeConfig:
    input_size: int = 84
    channels: tuple[int, ...] = (32, 64, 128, 256)
    latent_dim: int = 128
    kernel: int = 4


@dataclass(frozen=True)
class CnnConfig:
    input_size: int = 84
    channels: tuple[int, ...] = (32, 64, 128)
    kernel: int = 3
    head: str = "one_logit"  # or "two_logit" (softmax pair, normal class = index 1)


@dataclass(frozen=True)
class TrainConfig:
    minibatch_size: int = 64
    learning_rate: float = 1e-3
    max_epochs: int = 50
    convergence_patience: int = 5
    seed: int = 0
    holdout_fraction: float = 0.1

    def __post_init__(self):
        if self.minibatch_size < 1:
            raise ValueError("minibatch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")


def _init_uniform(tensor: torch.Tensor, fan_in: int, generator: torch.Generator) -> None:
    bound = 1.0 / math.sqrt(fan_in)
    with torch.no_grad():
        tensor.uniform_(-bound, bound, generator=generator)


class VaeModel(nn.Module):
    """Convolutional VAE: stride-2 encoder to a Gaussian latent, mirrored
    transposed-convolution decoder with a sigmoid output in [0, 1]."""

    def __init__(self, config: VaeConfig | None = None):
        super().__init__()
        self.config = config or VaeConfig()
        cfg = self.config
        k = cfg.kernel
        sizes = [cfg.input_size]
        enc = []
        in_ch = 1
        for ch in cfg.channels:
            enc.append(nn.Conv2d(in_ch, ch, kernel_size=k, stride=2, padding=1))
            enc.append(nn.ReLU(inplace=True))
            sizes.append((sizes[-1] + 2 - k) // 2 + 1)
            in_ch = ch
        if sizes[-1] < 1:
            raise ValueError(f"input size {cfg.input_size} too small for {len(cfg.channels)} stride-2 layers")
        self.encoder = nn.Sequential(*enc)
        self._sizes = sizes
        flat = cfg.channels[-1] * sizes[-1] * sizes[-1]
        self.fc_mu = nn.Linear(flat, cfg.latent_dim)
        self.fc_logvar = nn.Linear(flat, cfg.latent_dim)
        self.fc_decode = nn.Linear(cfg.latent_dim, flat)
        dec = []
        rev = list(cfg.channels[::-1]) + [1]
        for i in range(len(rev) - 1):
            # output_padding recovers odd sizes lost to the stride-2 floor.
            target = sizes[len(sizes) - 2 - i]
            dec.append(
                nn.ConvTranspose2d(
                    rev[i], rev[i + 1], kernel_size=k, stride=2, padding=1, output_padding=target % 2
                )
            )
            if i < len(rev) - 2:
                dec.append(nn.ReLU(inplace=True))
        dec.append(nn.Sigmoid())
        self.decoder = nn.Sequential(*dec)
        self.loss_history: list[dict] = []
        self.trained_epochs: int = 0
        self.train_seed: int | None = None

    def reset_parameters(self, generator: torch.Generator) -> None:
        """Re-initialize from a local generator (uniform +-1/sqrt(fan_in)),
        so concurrent training runs never race on the global RNG."""
        for module in self.modules():
            if isinstance(module, (nn.Conv2d, nn.ConvTranspose2d)):
                fan_in = module.in_channels * module.kernel_size[0] * module.kernel_size[1]
                _init_uniform(module.weight, fan_in, generator)
                _init_uniform(module.bias, fan_in, generator)
            elif isinstance(module, nn.Linear):
                _init_uniform(module.weight, module.in_features, generator)
                _init_uniform(module.bias, module.in_features, generator)

    def encode(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        h = self.encoder(x).flatten(1)
        return self.fc_mu(h), self.fc_logvar(h)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        s = self._sizes[-1]
        h = self.fc_decode(z).view(-1, self.config.channels[-1], s, s)
        return self.decoder(h)

    def forward(self, x: torch.Tensor, eps: torch.Tensor | None = None):
        mu, logvar = self.encode(x)
        z = mu if eps is None else mu + torch.exp(0.5 * logvar) * eps
        return self.decode(z), mu, logvar


class CnnModel(nn.Module):
    """Stride-2 CNN ending in global average pooling and a linear score head.

    ``features`` returns the post-activation last-layer maps A (the tensor the
    region-of-interest gradients are taken against); ``head`` maps A to the
    pre-squashing normal-class score y.
    """

    def __init__(self, config: CnnConfig | None = None):
        super().__init__()
        self.config = config or CnnConfig()
        cfg = self.config
        if cfg.head not in ("one_logit", "two_logit"):
            raise ValueError(f"unknown head {cfg.head!r}")
        k = cfg.kernel
        layers = []
        in_ch = 1
        size = cfg.input_size
        for ch in cfg.channels:
            layers.append(nn.Conv2d(in_ch, ch, kernel_size=k, stride=2, padding=1))
            layers.append(nn.ReLU(inplace=True))
            size = (size + 2 - k) // 2 + 1
            in_ch = ch
        if size < 1:
            raise ValueError(f"input size {cfg.input_size} too small for {len(cfg.channels)} stride-2 layers")
        self.convs = nn.Sequential(*layers)
        self.feature_size = size
        self.fc = nn.Linear(cfg.channels[-1], 1 if cfg.head == "one_logit" else 2)
        self.loss_history: list[dict] = []
        self.trained_epochs: int = 0
        self.train_seed: int | None = None
        self.holdout_accuracy: float | None = None

    def reset_parameters(self, generator: torch.Generator) -> None:
        for module in self.modules():
            if isinstance(module, nn.Conv2d):
                fan_in = module.in_channels * module.kernel_size[0] * module.kernel_size[1]
                _init_uniform(module.weight, fan_in, generator)
                _init_uniform(module.bias, fan_in, generator)
            elif isinstance(module, nn.Linear):
                _init_uniform(module.weight, module.in_features, generator)
                _init_uniform(module.bias, module.in_features, generator)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return self.convs(x)

    def head(self, a: torch.Tensor) -> torch.Tensor:
        pooled = a.mean(dim=(2, 3))
        out = self.fc(pooled)
        # y is the pre-squashing score of the normal class.
        return out[:, 0] if self.config.head == "one_logit" else out[:, 1]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x))

    def prob_normal(self, x: torch.Tensor) -> torch.Tensor:
        if self.config.head == "one_logit":
            return torch.sigmoid(self.forward(x))
        pooled = self.features(x).mean(dim=(2, 3))
        return torch.softmax(self.fc(pooled), dim=1)[:, 1]


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def kl_to_standard_normal(mu: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """Per-sample KL( N(mu, diag(exp(logvar))) || N(0, I) ); always >= 0."""
    return 0.5 * torch.sum(mu.pow(2) + torch.exp(logvar) - 1.0 - logvar, dim=1)


def vae_loss_terms(
    x: torch.Tensor, recon: torch.Tensor, mu: torch.Tensor, logvar: torch.Tensor
) -> torch.Tensor:
    """Batch-mean of KL plus per-sample sum-of-squares reconstruction error."""
    sse = torch.sum((x - recon) ** 2, dim=(1, 2, 3))
    return torch.mean(kl_to_standard_normal(mu, logvar) + sse)


def vae_loss(model: VaeModel, x: torch.Tensor, eps: torch.Tensor | None = None) -> torch.Tensor:
    """Training objective for a batch in [0, 1].

    ``eps`` is the reparameterization draw; None uses the posterior mean
    (the deterministic variant used for held-out monitoring).
    """
    if x.min() < 0 or x.max() > 1:
        raise ValueError("vae_loss expects pixels scaled to [0, 1]")
    recon, mu, logvar = model(x, eps)
    loss = vae_loss_terms(x, recon, mu, logvar)
    if not torch.isfinite(loss):
        raise FloatingPointError(f"non-finite VAE loss ({loss.item()}); aborting")
    return loss


def cnn_loss(model: CnnModel, x: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
    """Mean squared error between the post-squashing output and 0/1 labels."""
    t = t.to(dtype=x.dtype)
    if not torch.all((t == 0) | (t == 1)):
        raise ValueError("labels must be 0 (known anomaly) or 1 (normal)")
    f = model.prob_normal(x)
    loss = torch.mean((t - f) ** 2)
    if not torch.isfinite(loss):
        raise FloatingPointError(f"non-finite CNN loss ({loss.item()}); aborting")
    return loss


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def _stack_images(samples) -> torch.Tensor:
    arr = np.stack([s.pixels for s in samples]).astype(np.float32) / 255.0
    return torch.from_numpy(arr).unsqueeze(1)


def _holdout_split(n: int, fraction: float, generator: torch.Generator):
    perm = torch.randperm(n, generator=generator)
    n_val = int(round(fraction * n))
    if n_val == 0 or n_val == n:
        return perm, perm  # corpus too small for a separate holdout
    return perm[n_val:], perm[:n_val]


def train_vae(
    split: DatasetSplit,
    config: TrainConfig | None = None,
    arch: VaeConfig | None = None,
    verbose: bool = True,
) -> VaeModel:
    """Train the VAE on the normal class only, with patience-based early stop
    on the held-out-normal loss (posterior-mean variant)."""
    config = config or TrainConfig()
    if not split.train_normal:
        raise ValueError("train_vae needs a non-empty normal training set")
    torch.manual_seed(config.seed)
    g = torch.Generator().manual_seed(config.seed)
    x_all = _stack_images(split.train_normal)
    train_idx, val_idx = _holdout_split(len(x_all), config.holdout_fraction, g)
    x_train, x_val = x_all[train_idx], x_all[val_idx]

    model = VaeModel(arch)
    model.reset_parameters(g)
    model.train_seed = config.seed
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate)

    best_val = float("inf")
    stale = 0
    for epoch in range(config.max_epochs):
        model.train()
        perm = torch.randperm(len(x_train), generator=g)
        total = 0.0
        for start in range(0, len(x_train), config.minibatch_size):
            xb = x_train[perm[start : start + config.minibatch_size]]
            eps = torch.randn(len(xb), model.config.latent_dim, generator=g)
            loss = vae_loss(model, xb, eps)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(xb)
        train_loss = total / len(x_train)
        model.eval()
        with torch.no_grad():
            val_loss = vae_loss(model, x_val).item()
        model.loss_history.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss})
        model.trained_epochs = epoch + 1
        if verbose:
            print(f"[vae] epoch {epoch}: train {train_loss:.3f}  val {val_loss:.3f}")
        if val_loss < best_val:
            best_val = val_loss
            stale = 0
        else:
            stale += 1
            if stale >= config.convergence_patience:
                break
    return model


def _balanced_batches(n_pos: int, n_neg: int, batch: int, generator: torch.Generator):
    """Yield (pos_idx, neg_idx) pairs, half a batch from each class; the larger
    class is seen once per epoch, the smaller recycles with reshuffles."""
    half = max(1, batch // 2)
    steps = math.ceil(max(n_pos, n_neg) / half)

    def cycler(n):
        while True:
            for i in torch.randperm(n, generator=generator):
                yield int(i)

    pos, neg = cycler(n_pos), cycler(n_neg)
    for _ in range(steps):
        yield (
            torch.tensor([next(pos) for _ in range(half)]),
            torch.tensor([next(neg) for _ in range(half)]),
        )


def train_cnn(
    split: DatasetSplit,
    config: TrainConfig | None = None,
    arch: CnnConfig | None = None,
    verbose: bool = True,
) -> CnnModel:
    """Train the normal-vs-known-anomaly classifier on class-balanced minibatches.

    Label 1 = normal class, 0 = known anomaly. Early stop follows the held-out
    loss; held-out accuracy is recorded on the model.
    """
    config = config or TrainConfig()
    if not split.train_normal:
        raise ValueError("train_cnn needs a non-empty normal training set")
    if not split.train_known_anomaly:
        raise ValueError("train_cnn needs a non-empty known-anomaly set (the method requires one)")
    torch.manual_seed(config.seed)
    g = torch.Generator().manual_seed(config.seed)
    x_pos = _stack_images(split.train_normal)
    x_neg = _stack_images(split.train_known_anomaly)
    pos_train, pos_val = _holdout_split(len(x_pos), config.holdout_fraction, g)
    neg_train, neg_val = _holdout_split(len(x_neg), config.holdout_fraction, g)
    x_val = torch.cat([x_pos[pos_val], x_neg[neg_val]])
    t_val = torch.cat([torch.ones(len(pos_val)), torch.zeros(len(neg_val))])
    x_pos, x_neg = x_pos[pos_train], x_neg[neg_train]

    model = CnnModel(arch)
    model.reset_parameters(g)
    model.train_seed = config.seed
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate)

    best_val = float("inf")
    stale = 0
    for epoch in range(config.max_epochs):
        model.train()
        total = 0.0
        count = 0
        for pos_idx, neg_idx in _balanced_batches(len(x_pos), len(x_neg), config.minibatch_size, g):
            xb = torch.cat([x_pos[pos_idx], x_neg[neg_idx]])
            tb = torch.cat([torch.ones(len(pos_idx)), torch.zeros(len(neg_idx))])
            loss = cnn_loss(model, xb, tb)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(xb)
            count += len(xb)
        train_loss = total / count
        model.eval()
        with torch.no_grad():
            val_loss = cnn_loss(model, x_val, t_val).item()
            acc = torch.mean(((model.prob_normal(x_val) > 0.5) == (t_val > 0.5)).float()).item()
        model.loss_history.append(
            {"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss, "val_accuracy": acc}
        )
        model.trained_epochs = epoch + 1
        model.holdout_accuracy = acc
        if verbose:
            print(f"[cnn] epoch {epoch}: train {train_loss:.4f}  val {val_loss:.4f}  acc {acc:.3f}")
        if val_loss < best_val:
            best_val = val_loss
            stale = 0
        else:
            stale += 1
            if stale >= config.convergence_patience:
                break
    return model


# ---------------------------------------------------------------------------
# Inference-side operations
# ---------------------------------------------------------------------------


def to_unit_image(pixels: np.ndarray) -> np.ndarray:
    """uint8 [0,255] -> float32 [0,1]; float inputs are validated and passed through."""
    if pixels.dtype == np.uint8:
        return pixels.astype(np.float32) / 255.0
    if not np.issubdtype(pixels.dtype, np.floating):
        raise ValueError(f"expected uint8 or float pixels, got {pixels.dtype}")
    if pixels.min() < 0 or pixels.max() > 1:
        raise ValueError("float images must already be scaled to [0, 1]")
    return pixels


def _to_batch(u: np.ndarray, model: nn.Module) -> torch.Tensor:
    expected = model.config.input_size
    arr = to_unit_image(np.asarray(u))
    if arr.ndim != 2 or arr.shape != (expected, expected):
        raise ValueError(f"expected a {expected}x{expected} image, got {arr.shape}")
    dtype = next(model.parameters()).dtype
    return torch.from_numpy(arr).to(dtype).view(1, 1, *arr.shape)


def reconstruct(model: VaeModel, u: np.ndarray) -> np.ndarray:
    """Deterministic reconstruction through the posterior mean (no sampling)."""
    x = _to_batch(u, model)
    model.eval()
    with torch.no_grad():
        recon, _, _ = model(x, eps=None)
    return recon[0, 0].numpy()


def forward_with_features(model: CnnModel, u: np.ndarray) -> tuple[float, np.ndarray]:
    """Pre-squashing normal-class score and the last conv layer's activation stack."""
    x = _to_batch(u, model)
    model.eval()
    with torch.no_grad():
        a = model.features(x)
        y = model.head(a)
    return float(y.item()), a[0].numpy()


# ---------------------------------------------------------------------------
# Checkpoints: metadata.json plus one .npy per named parameter.
# ---------------------------------------------------------------------------


def _canonical(meta: dict) -> str:
    return json.dumps(meta, sort_keys=True, separators=(",", ":"))


def save_checkpoint(model: VaeModel | CnnModel, path: str | Path, train_config: TrainConfig | None = None) -> Path:
    root = Path(path)
    (root / "params").mkdir(parents=True, exist_ok=True)
    params = {}
    for name, tensor in model.state_dict().items():
        rel = f"params/{name.replace('.', '__')}.npy"
        arr = tensor.detach().numpy()
        np.save(root / rel, arr)
        params[name] = {
            "file": rel,
            "shape": list(arr.shape),
            "dtype": str(arr.dtype),
            "sha256": hashlib.sha256((root / rel).read_bytes()).hexdigest(),
        }
    meta = {
        "schema_version": CHECKPOINT_SCHEMA_VERSION,
        "kind": "vae" if isinstance(model, VaeModel) else "cnn",
        "arch": asdict(model.config),
        "train_config": None if train_config is None else asdict(train_config),
        "seed": model.train_seed,
        "epoch": model.trained_epochs,
        "loss_history": model.loss_history,
        "params": params,
    }
    meta["metadata_digest"] = hashlib.sha256(_canonical(meta).encode()).hexdigest()
    (root / "metadata.json").write_text(json.dumps(meta, indent=1))
    return root


def load_checkpoint(path: str | Path) -> VaeModel | CnnModel:
    root = Path(path)
    meta_path = root / "metadata.json"
    if not meta_path.is_file():
        raise CheckpointError(f"no metadata.json under {root}")
    meta = json.loads(meta_path.read_text())
    if meta.get("schema_version") != CHECKPOINT_SCHEMA_VERSION:
        raise CheckpointError(f"unsupported checkpoint schema_version {meta.get('schema_version')!r}")
    declared = meta.pop("metadata_digest", None)
    if hashlib.sha256(_canonical(meta).encode()).hexdigest() != declared:
        raise CheckpointError("checkpoint metadata digest mismatch: metadata was modified")
    arch = dict(meta["arch"])
    if meta["kind"] == "vae":
        arch["channels"] = tuple(arch["channels"])
        model: VaeModel | CnnModel = VaeModel(VaeConfig(**arch))
    elif meta["kind"] == "cnn":
        arch["channels"] = tuple(arch["channels"])
        model = CnnModel(CnnConfig(**arch))
    else:
        raise CheckpointError(f"unknown checkpoint kind {meta['kind']!r}")
    state = {}
    for name, info in meta["params"].items():
        f = root / info["file"]
        if not f.is_file():
            raise CheckpointError(f"missing parameter file {info['file']}")
        if hashlib.sha256(f.read_bytes()).hexdigest() != info["sha256"]:
            raise CheckpointError(f"parameter file {info['file']} checksum mismatch")
        state[name] = torch.from_numpy(np.load(f))
    try:
        model.load_state_dict(state, strict=True)
    except RuntimeError as e:
        raise CheckpointError(f"parameters do not match declared architecture: {e}") from e
    model.loss_history = meta["loss_history"]
    model.trained_epochs = meta["epoch"]
    model.train_seed = meta["seed"]
    return model
