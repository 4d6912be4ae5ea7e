"""Class balancing, augmentation, the epoch loop and checkpoint files.

Checkpoint layout (little-endian)::

    b"PIXBIS1\\n"                 magic
    uint64                        header length H
    H bytes                       JSON header (configs, Adam scalars, epoch,
                                  RNG state, loss log, array table)
    array blob                    raw array bytes at the offsets in the table
    32 bytes                      sha256 of everything above
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .data import Manifest, ProtocolError, apply_protocol, load_frames
from .model import Model, ModelConfig, binary_bce, build_model, combined_loss, pixelwise_bce
from .optim import AdamState, adam_step

logger = logging.getLogger(__name__)

MAGIC = b"PIXBIS1\n"
FORMAT_VERSION = 1

# independent RNG streams derived from the master seed
_INIT, _BALANCE, _SHUFFLE, _AUGMENT = 0, 1, 2, 3


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-5
    batch_size: int = 32
    epochs: int = 20
    lam: float = 0.5
    flip_prob: float = 0.5
    jitter_range: float = 0.1
    seed: int = 0

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not 0 <= self.flip_prob <= 1:
            raise ValueError("flip_prob must lie in [0, 1]")
        if not 0 <= self.jitter_range < 1:
            raise ValueError("jitter_range must lie in [0, 1)")
        if not 0 <= self.lam <= 1:
            raise ValueError("lambda must lie in [0, 1]")


def stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng([seed, *key])


def balance_classes(labels, rng) -> np.ndarray:
    """Sorted indices with the majority class under-sampled to the minority count."""
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    labels = np.asarray(labels)
    pos = np.flatnonzero(labels == 1)
    neg = np.flatnonzero(labels == 0)
    if len(pos) == 0 or len(neg) == 0:
        raise ProtocolError("class balancing needs both bonafide and attack samples")
    n = min(len(pos), len(neg))
    if len(pos) > n:
        pos = rng.choice(pos, size=n, replace=False)
    if len(neg) > n:
        neg = rng.choice(neg, size=n, replace=False)
    return np.sort(np.concatenate([pos, neg]))


def augment(image: np.ndarray, rng, flip_prob: float = 0.5, jitter: float = 0.1) -> np.ndarray:
    """Random horizontal flip plus brightness/contrast/saturation jitter on a
    3 x H x W image in [0, 1]."""
    flip = rng.random() < flip_prob
    u_bright, u_contrast, u_sat = rng.uniform(1 - jitter, 1 + jitter, 3)
    out = image[:, :, ::-1] if flip else image
    if u_bright != 1:
        out = out * u_bright
    if u_contrast != 1:
        mean = np.tensordot([0.299, 0.587, 0.114], out, axes=1).mean()
        out = mean + u_contrast * (out - mean)
    if u_sat != 1:
        gray = np.tensordot([0.299, 0.587, 0.114], out, axes=1)[None]
        out = gray + u_sat * (out - gray)
    return np.clip(out, 0, 1).astype(image.dtype)


# -- checkpoints -------------------------------------------------------------------

@dataclass
class Checkpoint:
    model_config: ModelConfig
    arrays: dict
    adam: AdamState
    epoch: int
    rng: dict
    train_config: dict = field(default_factory=dict)
    loss_log: list = field(default_factory=list)
    format_version: int = FORMAT_VERSION

    def model(self) -> Model:
        model = build_model(self.model_config, 0, dtype=self.arrays["stem.conv.weight"].dtype)
        model.load_state_dict({k: v for k, v in self.arrays.items() if not k.startswith("adam.")})
        return model


def make_checkpoint(model: Model, state: AdamState, epoch: int, train_config: TrainConfig | None = None,
                    loss_log=()) -> Checkpoint:
    arrays = dict(model.state_dict())
    for name in model.params:
        if name in state.m:
            arrays["adam.m/" + name] = state.m[name]
            arrays["adam.v/" + name] = state.v[name]
    seed = train_config.seed if train_config else 0
    return Checkpoint(
        model_config=model.config,
        arrays=arrays,
        adam=state,
        epoch=epoch,
        rng={"scheme": "seedsequence[seed,stream,epoch,...]", "seed": seed, "next_epoch": epoch},
        train_config=asdict(train_config) if train_config else {},
        loss_log=[list(r) for r in loss_log],
    )


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    table = []
    blobs = []
    offset = 0
    for name, arr in ckpt.arrays.items():
        a = np.ascontiguousarray(arr)
        a = a.astype(a.dtype.newbyteorder("<"), copy=False)
        raw = a.tobytes()
        table.append({"name": name, "dtype": a.dtype.str, "shape": list(a.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "format_version": ckpt.format_version,
        "model_config": ckpt.model_config.to_dict(),
        "train_config": ckpt.train_config,
        "adam": ckpt.adam.hyper(),
        "epoch": ckpt.epoch,
        "rng": ckpt.rng,
        "loss_log": ckpt.loss_log,
        "arrays": table,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    body = MAGIC + struct.pack("<Q", len(hbytes)) + hbytes + b"".join(blobs)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        tmp.write_bytes(body + hashlib.sha256(body).digest())
        tmp.replace(path)
    except OSError as exc:
        raise CheckpointError(f"cannot write checkpoint {path}: {exc.strerror}") from exc


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc.strerror}") from exc
    if data[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: bad magic at offset 0 (not a PIXBIS1 checkpoint)")
    pos = len(MAGIC)
    if len(data) < pos + 8:
        raise CheckpointError(f"{path}: truncated at offset {len(data)}, header length expected at offset {pos}")
    (hlen,) = struct.unpack_from("<Q", data, pos)
    pos += 8
    if len(data) < pos + hlen:
        raise CheckpointError(f"{path}: truncated at offset {len(data)}, header needs bytes {pos}..{pos + hlen}")
    try:
        header = json.loads(data[pos:pos + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header at offset {pos}: {exc}") from None
    pos += hlen
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {header.get('format_version')} != {FORMAT_VERSION}")
    blob_len = sum(e["nbytes"] for e in header["arrays"])
    end = pos + blob_len
    if len(data) != end + 32:
        raise CheckpointError(f"{path}: expected {end + 32} bytes, file has {len(data)} (array data starts at offset {pos})")
    if hashlib.sha256(data[:end]).digest() != data[end:]:
        raise CheckpointError(f"{path}: checksum mismatch over bytes 0..{end}")
    arrays = {}
    for e in header["arrays"]:
        start = pos + e["offset"]
        arr = np.frombuffer(data, dtype=np.dtype(e["dtype"]), count=int(np.prod(e["shape"], dtype=np.int64)), offset=start)
        arrays[e["name"]] = arr.reshape(e["shape"]).astype(np.dtype(e["dtype"]).newbyteorder("="))
    hyper = header["adam"]
    adam = AdamState(**hyper)
    for name in list(arrays):
        if name.startswith("adam.m/"):
            adam.m[name[7:]] = arrays.pop(name)
        elif name.startswith("adam.v/"):
            adam.v[name[7:]] = arrays.pop(name)
    return Checkpoint(
        model_config=ModelConfig.from_dict(header["model_config"]),
        arrays=arrays,
        adam=adam,
        epoch=header["epoch"],
        rng=header["rng"],
        train_config=header["train_config"],
        loss_log=header["loss_log"],
        format_version=header["format_version"],
    )


def write_loss_log(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "combined", "pixel", "binary"])
        for epoch, comb, pix, bina in rows:
            w.writerow([int(epoch), f"{comb:.9g}", f"{pix:.9g}", f"{bina:.9g}"])


# -- training loop --------------------------------------------------------------------

def _train_arrays(manifest: Manifest, protocol, model: Model):
    samples = apply_protocol(manifest, protocol)["train"]
    x = load_frames(manifest, samples, model.config.input_size)
    y = np.array([s.y for s in samples], dtype=x.dtype)
    return samples, x, y


def train(
    model: Model,
    manifest: Manifest,
    config: TrainConfig,
    checkpoint_dir=None,
    protocol="grandtest",
    resume: Checkpoint | None = None,
    epochs: int | None = None,
):
    """Train ``model`` in place; return (model, loss log rows).

    Each epoch re-balances the classes, shuffles, augments and runs one Adam
    step per mini-batch. ``resume`` continues from a checkpoint's epoch
    (its parameters must already be loaded into ``model``). ``epochs``
    overrides ``config.epochs`` as the final epoch index.
    """
    model, log, _ = _fit(model, manifest, config, checkpoint_dir, protocol, resume, epochs)
    return model, log


def _fit(model, manifest, config, checkpoint_dir, protocol, resume, epochs):
    config.validate()
    samples, x_all, y_all = _train_arrays(manifest, protocol, model)
    state = AdamState(lr=config.lr, weight_decay=config.weight_decay)
    log = []
    start = 0
    if resume is not None:
        state = resume.adam
        start = resume.epoch
        log = [tuple(r) for r in resume.loss_log]
    end = config.epochs if epochs is None else epochs
    ckdir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if ckdir is not None:
        try:
            ckdir.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise TrainingError(f"cannot create checkpoint directory {ckdir}: {exc.strerror}") from exc
    model.train()
    seed = config.seed
    for epoch in range(start, end):
        idx = balance_classes(y_all, stream(seed, _BALANCE, epoch))
        order = stream(seed, _SHUFFLE, epoch).permutation(idx)
        sums = np.zeros(3)
        seen = 0
        for b0 in range(0, len(order), config.batch_size):
            batch = order[b0:b0 + config.batch_size]
            xb = np.stack([
                augment(x_all[i], stream(seed, _AUGMENT, epoch, b0 + k), config.flip_prob, config.jitter_range)
                for k, i in enumerate(batch)
            ])
            yb = y_all[batch]
            pmap, pbin = model(ad.Tensor(xb))
            lp = pixelwise_bce(pmap, yb)
            lb = binary_bce(pbin, yb)
            loss = combined_loss(lp, lb, config.lam)
            values = (float(loss.data), float(lp.data), float(lb.data))
            if not np.all(np.isfinite(values)):
                vids = sorted({samples[i].video_id for i in batch})
                raise TrainingError(
                    f"non-finite loss at epoch {epoch + 1}, batch {b0 // config.batch_size} "
                    f"(videos {', '.join(vids[:4])}{'...' if len(vids) > 4 else ''})"
                )
            ad.backward(loss)
            adam_step(model.params, state)
            sums += np.array(values) * len(batch)
            seen += len(batch)
        row = (epoch + 1, *(sums / seen))
        log.append(row)
        logger.info("epoch %d combined %.4f pixel %.4f binary %.4f", *row)
        if ckdir is not None:
            save_checkpoint(make_checkpoint(model, state, epoch + 1, config, log), ckdir / f"epoch_{epoch + 1:03d}.pixbis")
    model.eval()
    return model, log, state


def train_new(model_config: ModelConfig, manifest: Manifest, config: TrainConfig, checkpoint_dir=None,
              protocol="grandtest"):
    """Build a model from the init stream of ``config.seed`` and train it.

    Returns (model, loss log, final checkpoint).
    """
    init_seed = int(stream(config.seed, _INIT).integers(2 ** 31))
    model = build_model(model_config, init_seed)
    model, log, state = _fit(model, manifest, config, checkpoint_dir, protocol, None, None)
    return model, log, make_checkpoint(model, state, config.epochs, config, log)
