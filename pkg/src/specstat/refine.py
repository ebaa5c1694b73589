"""Residual encoder-decoder that refines statistics-derived inputs into ILM/RPE/Tool maps.

Four input configurations are supported:

* ``A``: the B-scan alone
* ``B``: the three weak label maps
* ``C``: the B-scan plus the Gamma k and theta maps
* ``D``: the Gamma k and theta maps alone

Parameter maps live on the patch grid and are brought to pixel resolution by
patch replication before stacking.
"""
from __future__ import annotations

import enum
import json
import math
import struct
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import MAP_CLASSES, BScan, ClassId, FormatError, LabelMap, ParameterMap, _atomic_write
from .fitgrid import DEFAULT_PATCH, upsample_to_pixels

MAGIC = b"SSREFNET"
SMOOTH = 1.0


class MissingSource(ValueError):
    """An input configuration needs a source that was not supplied."""


class Divergence(RuntimeError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"training diverged at epoch {epoch} (loss={loss})")
        self.epoch = epoch
        self.loss = loss


class InputConfig(str, enum.Enum):
    A = "A"
    B = "B"
    C = "C"
    D = "D"

    @classmethod
    def parse(cls, value) -> "InputConfig":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).upper())
        except ValueError:
            raise ValueError(f"unknown input config {value!r}; expected one of A, B, C, D") from None

    @property
    def channels(self) -> tuple[str, ...]:
        return CHANNEL_PLAN[self]


CHANNEL_PLAN = {
    InputConfig.A: ("scan",),
    InputConfig.B: ("weak.ilm", "weak.rpe", "weak.tool"),
    InputConfig.C: ("scan", "gamma.k", "gamma.theta"),
    InputConfig.D: ("gamma.k", "gamma.theta"),
}


# ------------------------------------------------------------------ inputs


@dataclass(frozen=True)
class Normalization:
    mean: tuple[float, ...]
    std: tuple[float, ...]

    def __post_init__(self):
        if len(self.mean) != len(self.std):
            raise ValueError("mean/std length mismatch")
        if not all(math.isfinite(v) for v in (*self.mean, *self.std)):
            raise ValueError("normalization statistics must be finite")
        if any(s <= 0 for s in self.std):
            raise ValueError("normalization std must be positive")

    @classmethod
    def fit(cls, inputs: Sequence[np.ndarray]) -> "Normalization":
        """Per-channel mean/std over every pixel of every training input."""
        c = inputs[0].shape[0]
        total = np.zeros(c)
        sq = np.zeros(c)
        count = 0
        for x in inputs:
            x = np.asarray(x, dtype=np.float64).reshape(c, -1)
            total += x.sum(axis=1)
            count += x.shape[1]
        mean = total / count
        for x in inputs:
            x = np.asarray(x, dtype=np.float64).reshape(c, -1)
            sq += ((x - mean[:, None]) ** 2).sum(axis=1)
        std = np.sqrt(sq / count)
        std = np.where(std > 0, std, 1.0)
        return cls(tuple(float(v) for v in mean), tuple(float(v) for v in std))

    def apply(self, x: np.ndarray) -> np.ndarray:
        m = np.asarray(self.mean)[:, None, None]
        s = np.asarray(self.std)[:, None, None]
        return ((np.asarray(x, dtype=np.float64) - m) / s).astype(np.float32)


def _gamma_map(param_maps, name: str) -> ParameterMap:
    for m in param_maps or ():
        if m.family == "gamma" and m.param_name == name:
            return m
    raise MissingSource(f"gamma {name} map is required")


def gamma_channel(pmap: ParameterMap) -> ParameterMap:
    """Network feature for a Gamma map: ln k, or ln θ minus its median over the scan.

    Scaling intensities by λ leaves k unchanged and adds ln λ to ln θ, which the
    per-scan median removes, so config D sees identical inputs for any λ.
    Invalid cells stay invalid (they become 0 after upsampling).
    """
    ok = pmap.valid & (pmap.values > 0)
    logv = np.where(ok, np.log(np.where(ok, pmap.values, 1.0)), np.nan)
    if pmap.param_name == "theta" and ok.any():
        logv = logv - np.median(logv[ok])
    return ParameterMap(pmap.family, pmap.param_name, logv, ok)


def assemble_input(config, scan: BScan | None = None, param_maps: Sequence[ParameterMap] | None = None,
                   weak_maps: Sequence[LabelMap] | None = None, norm: Normalization | None = None,
                   patch_size: int = DEFAULT_PATCH, shape: tuple[int, int] | None = None) -> np.ndarray:
    """Stack the channels of ``config`` as a (C, H, W) array; normalised when ``norm`` is given.

    ``shape`` is only needed for config D, which never looks at the scan; when
    omitted it is taken from the scan.
    """
    cfg = InputConfig.parse(config)
    if shape is None:
        if scan is not None:
            shape = scan.shape
        elif weak_maps:
            shape = weak_maps[0].shape
        else:
            raise MissingSource("cannot infer the image shape without a scan")
    shape = tuple(shape)
    weak = {m.class_id: m for m in weak_maps or ()}
    planes = []
    for ch in cfg.channels:
        if ch == "scan":
            if scan is None:
                raise MissingSource(f"config {cfg.value} needs the B-scan")
            if scan.shape != shape:
                raise ValueError("scan shape mismatch")
            planes.append(scan.pixels)
        elif ch.startswith("gamma."):
            pm = gamma_channel(_gamma_map(param_maps, ch.split(".", 1)[1]))
            planes.append(upsample_to_pixels(pm, shape, patch_size))
        else:
            cid = ClassId.parse(ch.split(".", 1)[1])
            if cid not in weak:
                raise MissingSource(f"config {cfg.value} needs the weak {cid.label} map")
            if weak[cid].shape != shape:
                raise ValueError("weak map shape mismatch")
            planes.append(weak[cid].mask.astype(np.float64))
    x = np.stack(planes).astype(np.float64)
    if norm is not None:
        if len(norm.mean) != x.shape[0]:
            raise ValueError("normalization does not match channel count")
        return norm.apply(x)
    return x


def target_array(maps: Sequence[LabelMap]) -> np.ndarray:
    """(3, H, W) float32 target ordered ILM, RPE, Tool."""
    by = {m.class_id: m for m in maps}
    missing = [c.label for c in MAP_CLASSES if c not in by]
    if missing:
        raise MissingSource(f"target maps missing: {', '.join(missing)}")
    return np.stack([by[c].mask for c in MAP_CLASSES]).astype(np.float32)


# ------------------------------------------------------------------- model


@dataclass(frozen=True)
class ModelSpec:
    in_channels: int
    channels: tuple[int, ...] = (16, 32, 64)
    out_channels: int = 3

    @property
    def levels(self) -> int:
        return len(self.channels)

    @property
    def multiple(self) -> int:
        return 2 ** (self.levels - 1)


@dataclass(frozen=True)
class TrainSpec:
    epochs: int = 40
    batch_size: int = 4
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    seed: int = 0
    # full-height column strips of this width (None: whole images); gives more
    # optimizer steps per epoch at the same compute, and every strip crosses
    # both layers
    strip_width: int | None = 64
    # global gradient-norm clip (None: off)
    clip_norm: float | None = 1.0
    # "cosine" decays the step size from lr to 0 over training; "constant" keeps lr
    schedule: str = "cosine"


class ResBlock(nn.Module):
    def __init__(self, c: int):
        super().__init__()
        self.conv1 = nn.Conv2d(c, c, 3, padding=1)
        self.conv2 = nn.Conv2d(c, c, 3, padding=1)

    def forward(self, x):
        return F.relu(x + self.conv2(F.relu(self.conv1(x))))


class ResUNet(nn.Module):
    def __init__(self, spec: ModelSpec):
        super().__init__()
        ch = spec.channels
        self.stem = nn.Conv2d(spec.in_channels, ch[0], 3, padding=1)
        self.enc = nn.ModuleList([ResBlock(c) for c in ch])
        self.down = nn.ModuleList(
            [nn.Conv2d(ch[i], ch[i + 1], 3, stride=2, padding=1) for i in range(len(ch) - 1)])
        self.up = nn.ModuleList(
            [nn.Conv2d(ch[i + 1] + ch[i], ch[i], 3, padding=1) for i in range(len(ch) - 1)])
        self.head = nn.Conv2d(ch[0], spec.out_channels, 1)
        self.reset_parameters()

    def reset_parameters(self) -> None:
        # He initialisation keeps activation scale through the ReLU stack; the
        # framework default shrinks it ~3x per level and stalls early training
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")
                nn.init.zeros_(m.bias)
        nn.init.xavier_normal_(self.head.weight)

    def forward(self, x):
        skips = []
        h = F.relu(self.stem(x))
        for i, block in enumerate(self.enc):
            if i:
                h = F.relu(self.down[i - 1](h))
            h = block(h)
            skips.append(h)
        for i in reversed(range(len(self.up))):
            h = F.interpolate(h, scale_factor=2, mode="nearest")
            if h.shape[-2:] != skips[i].shape[-2:]:
                raise RuntimeError("decoder/encoder size mismatch; pad inputs to a multiple of 4")
            h = F.relu(self.up[i](torch.cat([h, skips[i]], dim=1)))
        return torch.sigmoid(self.head(h))


def parameter_count(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters())


@contextmanager
def _deterministic():
    prev = torch.are_deterministic_algorithms_enabled()
    torch.use_deterministic_algorithms(True)
    try:
        yield
    finally:
        torch.use_deterministic_algorithms(prev)


@contextmanager
def _flush_denormal():
    # denormal activations can slow CPU convolutions by an order of magnitude
    torch.set_flush_denormal(True)
    try:
        yield
    finally:
        torch.set_flush_denormal(False)


def build(spec: ModelSpec, seed: int = 0) -> ResUNet:
    with _deterministic():
        torch.manual_seed(seed)
        net = ResUNet(spec)
    # shape check at build time: spatial dims preserved, three output channels
    with torch.no_grad():
        probe = net(torch.zeros(1, spec.in_channels, 2 * spec.multiple, 2 * spec.multiple))
    if probe.shape != (1, spec.out_channels, 2 * spec.multiple, 2 * spec.multiple):
        raise RuntimeError(f"network output shape {tuple(probe.shape)} is inconsistent")
    return net


@dataclass
class Model:
    config: InputConfig
    spec: ModelSpec
    norm: Normalization
    net: ResUNet
    patch_size: int = DEFAULT_PATCH
    meta: dict = field(default_factory=dict)

    @property
    def parameter_count(self) -> int:
        return parameter_count(self.net)

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.detach().cpu().numpy().astype("<f4") for k, v in self.net.state_dict().items()}


# -------------------------------------------------------------------- loss


def soft_dice_loss(pred: torch.Tensor, target: torch.Tensor, smooth: float = SMOOTH,
                   pooled: bool = False) -> torch.Tensor:
    """Sum over channels of 1 - (2 Σpt + s)/(Σp + Σt + s).

    Accepts (C, H, W) or (N, C, H, W) tensors. By default the sums run over each
    image and the result is averaged over the batch; with ``pooled`` the sums run
    over every pixel of the batch, which keeps rare classes from being swamped
    by tiles where they are absent.
    """
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    if pred.dim() == 3:
        pred, target = pred.unsqueeze(0), target.unsqueeze(0)
    if pred.dim() != 4:
        raise ValueError("expected (C, H, W) or (N, C, H, W)")
    dims = (0, 2, 3) if pooled else (2, 3)
    inter = (pred * target).sum(dim=dims, keepdim=True)
    denom = pred.sum(dim=dims, keepdim=True) + target.sum(dim=dims, keepdim=True)
    per = (1.0 - (2.0 * inter + smooth) / (denom + smooth)).flatten(2)
    return per.sum(dim=1).mean()


# ---------------------------------------------------------------- training


def tile_origins(n: int, size: int) -> list[int]:
    """Tile starts covering [0, n); the last tile is flush with the end."""
    if size >= n:
        return [0]
    starts = list(range(0, n - size + 1, size))
    if starts[-1] + size < n:
        starts.append(n - size)
    return starts


def _strips(x: np.ndarray, width: int | None, multiple: int) -> list[np.ndarray]:
    w = x.shape[-1]
    if width is None or width >= w:
        return [x]
    if width % multiple:
        raise ValueError(f"strip width must be a multiple of {multiple}")
    return [x[..., c: c + width] for c in tile_origins(w, width)]


def _pad_amount(n: int, multiple: int) -> int:
    return (-n) % multiple


def _pad(x: torch.Tensor, multiple: int) -> torch.Tensor:
    ph, pw = _pad_amount(x.shape[-2], multiple), _pad_amount(x.shape[-1], multiple)
    if ph or pw:
        x = F.pad(x, (0, pw, 0, ph), mode="replicate")
    return x


def _schedule(opt, tspec: TrainSpec, total_steps: int):
    if tspec.schedule == "constant":
        return torch.optim.lr_scheduler.LambdaLR(opt, lambda step: 1.0)
    if tspec.schedule == "cosine":
        return torch.optim.lr_scheduler.LambdaLR(
            opt, lambda step: 0.5 * (1.0 + math.cos(math.pi * min(step, total_steps) / total_steps)))
    raise ValueError(f"unknown schedule {tspec.schedule!r}")


@dataclass
class TrainResult:
    model: Model
    history: list[float]
    initial_loss: float


def _as_pairs(dataset) -> tuple[list[np.ndarray], list[np.ndarray]]:
    xs, ys = [], []
    for item in dataset:
        x, t = item
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 2:
            x = x[None]
        t = target_array(t) if not isinstance(t, np.ndarray) else np.asarray(t, dtype=np.float32)
        if x.shape[1:] != t.shape[1:]:
            raise ValueError("input and target shapes differ")
        xs.append(x)
        ys.append(t)
    return xs, ys


def train(config, tspec: TrainSpec, dataset, spec: ModelSpec | None = None,
          patch_size: int = DEFAULT_PATCH, log=None) -> TrainResult:
    """Train on (raw input (C,H,W), target LabelMaps) pairs.

    Inputs are the unnormalised output of :func:`assemble_input`; the
    normalization statistics are computed here and stored in the model.
    """
    cfg = InputConfig.parse(config)
    xs, ys = _as_pairs(dataset)
    if not xs:
        raise ValueError("empty training set")
    c = len(cfg.channels)
    shapes = {x.shape for x in xs}
    if len(shapes) != 1:
        raise ValueError(f"inconsistent input shapes: {sorted(shapes)}")
    if xs[0].shape[0] != c:
        raise ValueError(f"config {cfg.value} expects {c} channels, got {xs[0].shape[0]}")
    spec = spec or ModelSpec(in_channels=c)
    if spec.in_channels != c:
        raise ValueError("model spec channel count does not match the config")
    norm = Normalization.fit(xs)
    tiles_x = [t for x in xs for t in _strips(norm.apply(x), tspec.strip_width, spec.multiple)]
    tiles_y = [t for y in ys for t in _strips(y, tspec.strip_width, spec.multiple)]
    X = _pad(torch.from_numpy(np.ascontiguousarray(np.stack(tiles_x))), spec.multiple)
    Y = _pad(torch.from_numpy(np.ascontiguousarray(np.stack(tiles_y))), spec.multiple)
    h, w = tiles_x[0].shape[1:]

    net = build(spec, tspec.seed)
    model = Model(cfg, spec, norm, net, patch_size)
    n = X.shape[0]
    bs = max(1, tspec.batch_size)

    def batch_loss(idx):
        return soft_dice_loss(net(X[idx])[..., :h, :w], Y[idx][..., :h, :w], pooled=True)

    with _deterministic(), _flush_denormal():
        with torch.no_grad():
            initial = float(sum(batch_loss(torch.arange(i, min(n, i + bs))).item() * min(bs, n - i)
                                for i in range(0, n, bs)) / n)
        if tspec.epochs <= 0:
            return TrainResult(model, [], initial)
        opt = torch.optim.Adam(net.parameters(), lr=tspec.lr, betas=tuple(tspec.betas))
        sched = _schedule(opt, tspec, -(-n // bs) * tspec.epochs)
        gen = torch.Generator().manual_seed(tspec.seed)
        history = []
        for epoch in range(1, tspec.epochs + 1):
            order = torch.randperm(n, generator=gen)
            total = 0.0
            net.train()
            for i in range(0, n, bs):
                idx = order[i: i + bs]
                loss = batch_loss(idx)
                if not torch.isfinite(loss):
                    raise Divergence(epoch, loss.item())
                opt.zero_grad()
                loss.backward()
                if tspec.clip_norm is not None:
                    nn.utils.clip_grad_norm_(net.parameters(), tspec.clip_norm)
                opt.step()
                sched.step()
                total += loss.item() * len(idx)
            mean_loss = total / n
            if not math.isfinite(mean_loss):
                raise Divergence(epoch, mean_loss)
            history.append(mean_loss)
            if log is not None:
                log(epoch, mean_loss)
    net.eval()
    return TrainResult(model, history, initial)


# --------------------------------------------------------------- inference


def infer(model: Model, x: np.ndarray) -> np.ndarray:
    """(3, H, W) probabilities for one normalised input of shape (C, H, W)."""
    x = np.asarray(x, dtype=np.float32)
    if x.ndim != 3 or x.shape[0] != model.spec.in_channels:
        raise ValueError(f"model expects {model.spec.in_channels} input channels, got shape {x.shape}")
    h, w = x.shape[1:]
    t = _pad(torch.from_numpy(np.ascontiguousarray(x))[None], model.spec.multiple)
    model.net.eval()
    with torch.no_grad(), _flush_denormal():
        out = model.net(t)[0, :, :h, :w]
    return out.numpy().astype(np.float64)


def predict(model: Model, scan=None, param_maps=None, weak_maps=None, shape=None) -> np.ndarray:
    x = assemble_input(model.config, scan, param_maps, weak_maps, model.norm, model.patch_size, shape)
    return infer(model, x)


def binarize(probs: np.ndarray, threshold: float = 0.5) -> list[LabelMap]:
    probs = np.asarray(probs)
    if probs.ndim != 3 or probs.shape[0] != len(MAP_CLASSES):
        raise ValueError("expected a (3, H, W) probability stack")
    return [LabelMap(c, probs[i] >= threshold) for i, c in enumerate(MAP_CLASSES)]


# -------------------------------------------------------------- model file


def save_model(model: Model, path) -> None:
    arrays = model.state_arrays()
    directory, offset, chunks = [], 0, []
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name])
        directory.append({"name": name, "shape": list(a.shape), "offset": offset})
        chunks.append(a.tobytes())
        offset += a.nbytes
    header = {
        "format": 1,
        "config": model.config.value,
        "channels": list(model.config.channels),
        "spec": {"in_channels": model.spec.in_channels, "channels": list(model.spec.channels),
                 "out_channels": model.spec.out_channels},
        "parameter_count": model.parameter_count,
        "patch_size": model.patch_size,
        "normalization": {"mean": list(model.norm.mean), "std": list(model.norm.std)},
        "tensors": directory,
        "dtype": "float32-le",
        "meta": model.meta,
    }
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    _atomic_write(path, MAGIC + struct.pack("<Q", len(hb)) + hb + b"".join(chunks))


def load_model(path) -> Model:
    blob = Path(path).read_bytes()
    if not blob.startswith(MAGIC) or len(blob) < len(MAGIC) + 8:
        raise FormatError(f"{path}: not a model file")
    (hlen,) = struct.unpack_from("<Q", blob, len(MAGIC))
    start = len(MAGIC) + 8
    try:
        header = json.loads(blob[start: start + hlen])
    except ValueError as exc:
        raise FormatError(f"{path}: bad model header") from exc
    payload = memoryview(blob)[start + hlen:]
    s = header["spec"]
    spec = ModelSpec(s["in_channels"], tuple(s["channels"]), s["out_channels"])
    net = ResUNet(spec)
    state = {}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        a = np.frombuffer(payload, dtype="<f4", count=count, offset=entry["offset"])
        state[entry["name"]] = torch.from_numpy(a.reshape(entry["shape"]).copy())
    net.load_state_dict(state)
    net.eval()
    nrm = header["normalization"]
    return Model(InputConfig.parse(header["config"]), spec,
                 Normalization(tuple(nrm["mean"]), tuple(nrm["std"])), net,
                 int(header.get("patch_size", DEFAULT_PATCH)), dict(header.get("meta", {})))


__all__ = [
    "InputConfig", "CHANNEL_PLAN", "MissingSource", "Divergence", "Normalization", "assemble_input",
    "target_array", "gamma_channel", "ModelSpec", "TrainSpec", "ResUNet", "Model", "build", "parameter_count",
    "soft_dice_loss", "train", "TrainResult", "infer", "predict", "binarize", "save_model", "load_model",
]
