"""Unsupervised training: penalty loss, epoch loop, fine-tuning, checkpoints.

The loss is the inverse energy efficiency plus a QoS penalty, averaged over the
minibatch.  It is built on the autodiff tape straight through the hybrid
direction gains and the rate expressions, so no labels enter the gradient.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .beamforming import LN2
from .channel import Dataset, SystemConfig
from .model import ForwardOut, ModelConfig, ModelParams, forward_batch, init_params, param_template

CKPT_MAGIC = b"ICKP"
CKPT_VERSION = 1


class TrainingError(RuntimeError):
    pass


class CheckpointFormatError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-5
    batch_size: int = 64
    epochs: int = 500
    penalty: float = 1.0
    seed: int = 0
    val_every: int = 1
    loss_eps: float = 1e-9
    recalibrate_bn: bool = False

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.penalty < 0:
            raise ValueError(f"penalty weight must be >= 0, got {self.penalty}")
        if self.val_every < 1:
            raise ValueError(f"val_every must be >= 1, got {self.val_every}")


def rates_tensor(out: ForwardOut, system: SystemConfig) -> Tensor:
    """Per-pair rates (B,K) on the tape from gains and powers."""
    b, k = out.p.shape
    weighted = ad.mul(out.gains, ad.reshape(out.p, (b, k, 1)))  # (k,j): p_k * gain_kj
    received = ad.tsum(weighted, axis=1)  # total power landing at each receiver j
    diag = np.arange(k) * (k + 1)
    signal = ad.take(ad.reshape(weighted, (b, k * k)), diag, axis=1)
    interference = ad.sub(received, signal)
    noise = ad.constant(np.float64(system.noise_power))
    snr = ad.div(signal, ad.add(interference, noise))
    return ad.mul(ad.log1p(snr), ad.constant(np.float64(1.0 / LN2)))


def compute_loss(out: ForwardOut, system: SystemConfig, penalty: float = 1.0,
                 eps: float = 1e-9) -> Tensor:
    """Mean over the batch of inverse-EE plus the QoS shortfall penalty.

    Raises TrainingError naming the batch-local sample index if any per-sample
    loss is non-finite.
    """
    rates = rates_tensor(out, system)
    sum_rate = ad.tsum(rates, axis=1)
    used_power = ad.add(ad.tsum(out.p, axis=1), ad.constant(np.float64(system.p_circuit)))
    inv_ee = ad.div(used_power, ad.add(sum_rate, ad.constant(np.float64(eps))))
    shortfall = ad.relu(ad.sub(ad.constant(np.float64(system.r_req)), rates))
    per_sample = ad.add(inv_ee, ad.mul(ad.tsum(shortfall, axis=1), ad.constant(np.float64(penalty))))
    bad = np.flatnonzero(~np.isfinite(per_sample.data))
    if bad.size:
        raise TrainingError(f"non-finite loss for sample {int(bad[0])} in batch")
    return ad.tmean(per_sample)


def _dataset_loss(ds: Dataset, params: ModelParams, system: SystemConfig,
                  penalty: float, eps: float, chunk: int = 256) -> float:
    frozen = params.detached()
    total = 0.0
    for start in range(0, len(ds), chunk):
        h = ds.h[start : start + chunk]
        out = forward_batch(h, frozen, system, training=False)
        loss = compute_loss(out, system, penalty, eps)
        total += float(loss.data) * h.shape[0]
    return total / len(ds)


@dataclass
class TrainResult:
    params: ModelParams
    best_epoch: int
    best_val_loss: float
    history: list = field(default_factory=list)  # per-epoch dicts
    pre_val_loss: float = float("nan")  # fine-tune only
    pre_feasibility: float = float("nan")
    post_feasibility: float = float("nan")


def _feasibility(ds: Dataset, params: ModelParams, system: SystemConfig, chunk: int = 256) -> float:
    from .evalmetrics import batch_feasibility

    return batch_feasibility(ds, params, system, chunk=chunk)


def train(train_ds: Dataset, val_ds: Dataset, model_config: ModelConfig,
          config: TrainConfig, init: ModelParams | None = None,
          log=None) -> TrainResult:
    """Minibatch Adam on the penalty loss; returns the lowest-val-loss epoch.

    Deterministic given config.seed: parameter init, shuffles, and batch
    composition all derive from it.  `init` warm-starts from existing
    parameters (used by fine-tuning) without mutating them.
    """
    system = train_ds.config
    params = init.copy() if init is not None else init_params(model_config, seed=config.seed)
    opt = ad.Adam(params.flat(), lr=config.lr)
    shuffle = np.random.Generator(
        np.random.Philox(np.random.SeedSequence(config.seed, spawn_key=(0x51,)))
    )
    n = len(train_ds)
    best_val = float("inf")
    best_epoch = 0
    best_params = params.copy()
    history: list = []
    for epoch in range(1, config.epochs + 1):
        order = shuffle.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            out = forward_batch(train_ds.h[idx], params, system, training=True)
            try:
                loss = compute_loss(out, system, config.penalty, config.loss_eps)
            except TrainingError as exc:
                local = int(str(exc).split("sample ")[1].split(" ")[0])
                raise TrainingError(
                    f"non-finite loss at epoch {epoch}, dataset sample {int(idx[local])}"
                ) from None
            opt.zero_grad()
            ad.backward(loss)
            opt.step()
            epoch_loss += float(loss.data) * len(idx)
        record = {"epoch": epoch, "train_loss": epoch_loss / n}
        if epoch % config.val_every == 0 or epoch == config.epochs:
            val_loss = _dataset_loss(val_ds, params, system, config.penalty, config.loss_eps)
            record["val_loss"] = val_loss
            if val_loss < best_val:
                best_val = val_loss
                best_epoch = epoch
                best_params = params.copy()
        history.append(record)
        if log:
            log(record)
    if config.epochs == 0:
        best_val = _dataset_loss(val_ds, params, system, config.penalty, config.loss_eps)
        best_params = params
    return TrainResult(best_params, best_epoch, best_val, history)


def fine_tune(params: ModelParams, train_ds: Dataset, val_ds: Dataset,
              config: TrainConfig, log=None) -> TrainResult:
    """Warm-start training from existing parameters; records pre/post metrics."""
    _check_compatible(params, train_ds)
    system = train_ds.config
    pre_loss = _dataset_loss(val_ds, params, system, config.penalty, config.loss_eps)
    pre_fr = _feasibility(val_ds, params, system)
    start = params
    if config.recalibrate_bn:
        # Re-estimate BN buffers on the new distribution; weights untouched
        # because no backward pass runs here.
        start = params.copy()
        for st in start.bn_states.values():
            st.mean[:] = 0.0
            st.var[:] = 1.0
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(config.seed, spawn_key=(0xB,))))
        order = rng.permutation(len(train_ds))[: 8 * config.batch_size]
        for s in range(0, len(order), config.batch_size):
            idx = order[s : s + config.batch_size]
            forward_batch(train_ds.h[idx], start, system, training=True)
    result = train(train_ds, val_ds, params.config, config, init=start, log=log)
    result.pre_val_loss = pre_loss
    result.pre_feasibility = pre_fr
    result.post_feasibility = _feasibility(val_ds, result.params, system)
    return result


def _check_compatible(params: ModelParams, ds: Dataset) -> None:
    cfg = params.config.resolved()
    want = cfg.cgal[0].in_dim
    if 2 * ds.config.n_antennas != want:
        raise ValueError(
            f"checkpoint expects feature width {want} (={want // 2} antennas), "
            f"dataset has {ds.config.n_antennas}"
        )


# ------------------------------------------------------------- checkpoints


def _kv_blob(kv: dict) -> bytes:
    text = "".join(f"{k} = {v}\n" for k, v in kv.items())
    return text.encode()


def _parse_kv(blob: bytes) -> dict:
    out = {}
    for line in blob.decode().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out


def _write_tensor(fh, name: str, data: np.ndarray, is_complex: bool, im: np.ndarray | None = None):
    raw = name.encode()
    fh.write(struct.pack("<H", len(raw)))
    fh.write(raw)
    fh.write(struct.pack("<BB", 1 if is_complex else 0, data.ndim))
    fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
    fh.write(np.ascontiguousarray(data, dtype="<f4").tobytes())
    if is_complex:
        fh.write(np.ascontiguousarray(im, dtype="<f4").tobytes())


def _read_exact(fh, count: int, what: str) -> bytes:
    raw = fh.read(count)
    if len(raw) != count:
        raise CheckpointFormatError(f"truncated checkpoint while reading {what}")
    return raw


def _read_tensor(fh):
    (name_len,) = struct.unpack("<H", _read_exact(fh, 2, "tensor name length"))
    name = _read_exact(fh, name_len, "tensor name").decode()
    flag, rank = struct.unpack("<BB", _read_exact(fh, 2, f"tensor {name} header"))
    shape = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, f"tensor {name} dims"))
    count = int(np.prod(shape)) if rank else 1
    planes = []
    for _ in range(2 if flag else 1):
        raw = _read_exact(fh, 4 * count, f"tensor {name} payload")
        planes.append(np.frombuffer(raw, dtype="<f4").reshape(shape).copy())
    return name, bool(flag), planes


def write_checkpoint(path, params: ModelParams, metadata: dict | None = None) -> None:
    """Binary dump: config blob, every parameter tensor, BN buffers, metadata."""
    tensors = []
    for name, e in params.entries.items():
        if isinstance(e, ad.CTensor):
            tensors.append((name, e.re.data, True, e.im.data))
        else:
            tensors.append((name, e.data, False, None))
    for name, st in params.bn_states.items():
        tensors.append((f"buf:{name}.mean", st.mean, False, None))
        tensors.append((f"buf:{name}.var", st.var, False, None))
    config_blob = _kv_blob(params.config.to_kv())
    meta_blob = _kv_blob(metadata or {})
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<H", CKPT_VERSION))
        fh.write(struct.pack("<I", len(config_blob)))
        fh.write(config_blob)
        fh.write(struct.pack("<I", len(tensors)))
        for name, data, is_complex, im in tensors:
            _write_tensor(fh, name, data, is_complex, im)
        fh.write(struct.pack("<I", len(meta_blob)))
        fh.write(meta_blob)


def read_checkpoint(path):
    """Load (ModelParams, metadata); validates structure against the config."""
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != CKPT_MAGIC:
            raise CheckpointFormatError(f"not a checkpoint file: {path}")
        (version,) = struct.unpack("<H", _read_exact(fh, 2, "version"))
        if version != CKPT_VERSION:
            raise CheckpointFormatError(f"unsupported checkpoint version {version}")
        (blob_len,) = struct.unpack("<I", _read_exact(fh, 4, "config length"))
        config = ModelConfig.from_kv(_parse_kv(_read_exact(fh, blob_len, "config blob")))
        (count,) = struct.unpack("<I", _read_exact(fh, 4, "tensor count"))
        loaded = {}
        for _ in range(count):
            name, is_complex, planes = _read_tensor(fh)
            loaded[name] = (is_complex, planes)
        (meta_len,) = struct.unpack("<I", _read_exact(fh, 4, "metadata length"))
        metadata = _parse_kv(_read_exact(fh, meta_len, "metadata blob"))

    rows, bn = param_template(config)
    entries: dict = {}
    for spec in rows:
        if spec.name not in loaded:
            raise CheckpointFormatError(f"checkpoint missing tensor {spec.name}")
        is_complex, planes = loaded.pop(spec.name)
        if is_complex != spec.is_complex or planes[0].shape != spec.shape:
            raise CheckpointFormatError(
                f"tensor {spec.name}: stored {'complex' if is_complex else 'real'} "
                f"{planes[0].shape}, expected {'complex' if spec.is_complex else 'real'} {spec.shape}"
            )
        if spec.is_complex:
            entries[spec.name] = ad.CTensor(ad.parameter(planes[0]), ad.parameter(planes[1]))
        else:
            entries[spec.name] = ad.parameter(planes[0])
    bn_states = {}
    for name, width in bn:
        state = ad.BNState(width)
        for part in ("mean", "var"):
            key = f"buf:{name}.{part}"
            if key not in loaded:
                raise CheckpointFormatError(f"checkpoint missing buffer {key}")
            _, planes = loaded.pop(key)
            if planes[0].shape != (1, width):
                raise CheckpointFormatError(f"buffer {key}: wrong shape {planes[0].shape}")
            getattr(state, part)[:] = planes[0]
        bn_states[name] = state
    if loaded:
        raise CheckpointFormatError(f"checkpoint has unexpected tensor {next(iter(loaded))}")
    return ModelParams(config, entries, bn_states), metadata
