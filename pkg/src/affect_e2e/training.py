"""Optimization loops, label standardization, and checkpoint persistence.

Training follows one recipe for both tasks: per-iteration volume
randomization, forward, task loss (cross-entropy for emotion, MSE on
standardized labels for personality), exact backward, one Adam step.
The learning rate halves after epoch 25 and again after epoch 40; early
stopping watches the dev loss and restores the best-dev parameters.

Multilingual personality labels are mapped per (language, trait) onto a
shared target distribution (mean 0.5, pooled std) before training and
inverse-mapped at evaluation time.

Checkpoints are a small binary container: magic "AFE1", a format version,
a JSON header, named float32 tensors, and a trailing CRC32.
"""

from __future__ import annotations

import hashlib
import json
import struct
import sys
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import model as mdl
from . import numerics as nx
from .audio import AudioSample, PreprocessConfig, prepare_waveform, read_wav
from .corpus import EMOTIONS, TRAITS, CorpusManifest, ManifestRow

CHECKPOINT_MAGIC = b"AFE1"
CHECKPOINT_VERSION = 1

# keep training targets strictly inside the sigmoid's range
TARGET_CLIP = (0.01, 0.99)


class CheckpointError(ValueError):
    """Unreadable, corrupted, or incompatible checkpoint file."""


@dataclass(frozen=True)
class TrainConfig:
    initial_lr: float = 1e-4
    lr_halve_epochs: tuple[int, ...] = (25, 40)
    minibatch: int = 2
    max_epochs: int = 100
    early_stop_patience: int = 5
    dev_fraction: float = 0.10
    seed: int = 0
    volume_rand_a: float = 1.5
    input_scale_k: float = 5e-4
    augment_seed: int | None = None  # defaults to a stream derived from seed

    def __post_init__(self):
        if not 0.0 < self.dev_fraction < 1.0:
            raise ValueError("dev_fraction must be in (0, 1)")
        if self.minibatch < 1:
            raise ValueError("minibatch must be >= 1")
        if self.initial_lr <= 0:
            raise ValueError("initial_lr must be > 0")

    def to_dict(self) -> dict:
        return {
            "initial_lr": self.initial_lr,
            "lr_halve_epochs": list(self.lr_halve_epochs),
            "minibatch": self.minibatch,
            "max_epochs": self.max_epochs,
            "early_stop_patience": self.early_stop_patience,
            "dev_fraction": self.dev_fraction,
            "seed": self.seed,
            "volume_rand_a": self.volume_rand_a,
            "input_scale_k": self.input_scale_k,
            "augment_seed": self.augment_seed,
        }


def learning_rate_for_epoch(config: TrainConfig, epoch: int) -> float:
    """Deterministic schedule: halve at each epoch threshold crossed."""
    halvings = sum(1 for e in config.lr_halve_epochs if epoch >= e)
    return config.initial_lr / (2.0**halvings)


@dataclass
class LabelTransform:
    """Per-(language, trait) affine standardization of personality labels.

    forward maps corpus labels onto the shared target distribution;
    invert maps model outputs back.  Pure affine, so the round trip is
    exact up to float error.
    """

    source_mean: dict[str, np.ndarray]  # language -> (traits,)
    source_std: dict[str, np.ndarray]
    target_mean: np.ndarray
    target_std: np.ndarray

    def apply(self, labels: np.ndarray, language: str) -> np.ndarray:
        z = (labels - self.source_mean[language]) / self.source_std[language]
        return z * self.target_std + self.target_mean

    def invert(self, scores: np.ndarray, language: str) -> np.ndarray:
        z = (scores - self.target_mean) / self.target_std
        return z * self.source_std[language] + self.source_mean[language]

    def to_dict(self) -> dict:
        return {
            "source_mean": {k: list(v) for k, v in self.source_mean.items()},
            "source_std": {k: list(v) for k, v in self.source_std.items()},
            "target_mean": list(self.target_mean),
            "target_std": list(self.target_std),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LabelTransform":
        return cls(
            source_mean={k: np.array(v) for k, v in d["source_mean"].items()},
            source_std={k: np.array(v) for k, v in d["source_std"].items()},
            target_mean=np.array(d["target_mean"]),
            target_std=np.array(d["target_std"]),
        )


def fit_label_transform(manifest: CorpusManifest) -> LabelTransform:
    """Fit per-language trait statistics on the manifest's train rows.

    The shared target is mean 0.5 with the sample-size-weighted pooled
    std across languages.
    """
    if manifest.task != "personality":
        raise ValueError("label transform applies to personality manifests only")
    rows = [r for r in manifest.rows if r.split == "train"]
    if not rows:
        raise ValueError("no train rows to fit label transform on")
    by_lang: dict[str, list] = {}
    for r in rows:
        by_lang.setdefault(r.language, []).append(r.traits)
    source_mean, source_std, counts = {}, {}, {}
    for lang, labels in sorted(by_lang.items()):
        arr = np.asarray(labels, dtype=np.float64)
        mean = arr.mean(axis=0)
        std = arr.std(axis=0)
        for t, s in zip(TRAITS, std):
            if s < 1e-6:
                raise ValueError(
                    f"degenerate label distribution for language '{lang}', "
                    f"trait '{t}' (std {s:.2e})"
                )
        source_mean[lang], source_std[lang], counts[lang] = mean, std, len(labels)
    total = sum(counts.values())
    pooled_var = sum(counts[l] * source_std[l] ** 2 for l in counts) / total
    return LabelTransform(
        source_mean=source_mean,
        source_std=source_std,
        target_mean=np.full(len(TRAITS), 0.5),
        target_std=np.sqrt(pooled_var),
    )


def split_dev(
    rows: list[ManifestRow], fraction: float, rng: np.random.Generator
) -> tuple[list[ManifestRow], list[ManifestRow]]:
    """Stratified dev holdout: by (language, class) for emotion rows, by
    language for personality rows.  Disjoint and covering."""
    strata: dict[tuple, list[ManifestRow]] = {}
    for r in rows:
        key = (r.language, r.emotion) if r.emotion is not None else (r.language,)
        strata.setdefault(key, []).append(r)
    train, dev = [], []
    for key in sorted(strata):
        members = strata[key]
        order = rng.permutation(len(members))
        n_dev = int(round(len(members) * fraction))
        n_dev = min(n_dev, len(members) - 1)  # never empty a stratum's train side
        picked = set(order[:n_dev].tolist())
        for i, r in enumerate(members):
            (dev if i in picked else train).append(r)
    return train, dev


@dataclass
class RunRecord:
    """Reproducibility ledger for one training run; no wall-clock state."""

    seed: int
    task: str
    languages: list[str]
    model_config: dict
    train_config: dict
    train_losses: list[float] = field(default_factory=list)
    dev_losses: list[float] = field(default_factory=list)
    lr_history: list[float] = field(default_factory=list)
    initial_dev_loss: float = float("nan")
    best_epoch: int = -1
    stopped_epoch: int = -1
    n_train: int = 0
    n_dev: int = 0
    checkpoint_digest: str = ""  # filled in after the checkpoint is written

    def core_dict(self) -> dict:
        d = self.__dict__.copy()
        d.pop("checkpoint_digest")
        return d

    def digest(self) -> str:
        """sha256 over everything except the (later) checkpoint digest."""
        blob = json.dumps(self.core_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()

    def to_json(self) -> str:
        return json.dumps(self.__dict__, sort_keys=True, indent=2)


@dataclass
class _Prepared:
    """A training sample after the deterministic preprocessing stages."""

    waveform: np.ndarray  # resampled to 8 kHz and scaled by k
    target: object  # class index or transformed trait vector
    language: str
    source_id: str


def _prepare_rows(
    manifest: CorpusManifest,
    rows: list[ManifestRow],
    pre_cfg: PreprocessConfig,
    transform: LabelTransform | None,
) -> list[_Prepared]:
    prepared = []
    for row in rows:
        sample = manifest.load_sample(row)
        clean = prepare_waveform(sample, replace(pre_cfg, augment=False))
        if manifest.task == "emotion":
            target = EMOTIONS.index(row.emotion)
        else:
            labels = np.asarray(row.traits, dtype=np.float64)
            target = np.clip(transform.apply(labels, row.language), *TARGET_CLIP)
        prepared.append(
            _Prepared(clean.waveform, target, row.language, sample.source_id)
        )
    return prepared


def _model_input(config: mdl.ModelConfig, waveform: np.ndarray) -> np.ndarray:
    sample = AudioSample(waveform, 8000)
    return mdl.input_from_waveform(config, sample)


def _sample_loss_and_grads(
    params, config, waveform, target, freeze_conv=False
) -> tuple[float, dict[str, np.ndarray]]:
    x = _model_input(config, waveform)
    trace = mdl.forward(params, config, x)
    loss, g_logits = mdl.loss_and_grad_logits(trace, target, config.task)
    grads = mdl.backward(params, config, x, trace, g_logits, freeze_conv=freeze_conv)
    return loss, grads


def _dataset_loss(params, config, prepared: list[_Prepared]) -> float:
    """Mean deterministic (unaugmented) loss over a sample list."""
    total = 0.0
    for item in prepared:
        x = _model_input(config, item.waveform)
        trace = mdl.forward(params, config, x, keep_layer_outputs=False)
        loss, _ = mdl.loss_and_grad_logits(trace, item.target, config.task)
        total += loss
    return total / len(prepared)


def _quantize(tensors: dict[str, np.ndarray]) -> None:
    for arr in tensors.values():
        arr[...] = nx.round_to_float32(arr)


def _run_loop(
    params: mdl.ModelParams,
    model_config: mdl.ModelConfig,
    train_config: TrainConfig,
    train_set: list[_Prepared],
    dev_set: list[_Prepared],
    record: RunRecord,
    trainable: dict[str, np.ndarray],
    freeze_conv: bool,
    aug_rng: np.random.Generator,
    shuffle_rng: np.random.Generator,
    log=None,
) -> mdl.ModelParams:
    if not dev_set:
        raise ValueError(
            "dev split is empty; increase dev_fraction or the corpus size"
        )
    state = nx.AdamState.for_params(trainable, learning_rate=train_config.initial_lr)
    record.initial_dev_loss = _dataset_loss(params, model_config, dev_set)
    best_loss = record.initial_dev_loss
    best = params.copy()
    record.best_epoch = -1
    bad_epochs = 0
    a = train_config.volume_rand_a

    for epoch in range(train_config.max_epochs):
        state.learning_rate = learning_rate_for_epoch(train_config, epoch)
        order = shuffle_rng.permutation(len(train_set))
        epoch_loss = 0.0
        for start in range(0, len(order), train_config.minibatch):
            batch = order[start : start + train_config.minibatch]
            batch_grads: dict[str, np.ndarray] = {}
            batch_loss = 0.0
            for idx in batch:
                item = train_set[idx]
                alpha = 10.0 ** aug_rng.uniform(-a, a) if a > 0 else 1.0
                loss, grads = _sample_loss_and_grads(
                    params,
                    model_config,
                    item.waveform * alpha,
                    item.target,
                    freeze_conv=freeze_conv,
                )
                if not np.isfinite(loss):
                    raise RuntimeError(
                        f"non-finite training loss on sample '{item.source_id}' "
                        f"(epoch {epoch})"
                    )
                batch_loss += loss
                for name, g in grads.items():
                    if name in batch_grads:
                        batch_grads[name] += g
                    else:
                        batch_grads[name] = g
            scale = 1.0 / len(batch)
            for g in batch_grads.values():
                g *= scale
            nx.adam_step(trainable, batch_grads, state)
            epoch_loss += batch_loss * scale
        _quantize(trainable)
        n_batches = (len(order) + train_config.minibatch - 1) // train_config.minibatch
        record.train_losses.append(epoch_loss / n_batches)
        record.lr_history.append(state.learning_rate)

        dev_loss = _dataset_loss(params, model_config, dev_set)
        record.dev_losses.append(dev_loss)
        if log:
            log(
                f"epoch {epoch}: train {record.train_losses[-1]:.4f} "
                f"dev {dev_loss:.4f} lr {state.learning_rate:.2e}"
            )
        if dev_loss < best_loss:
            best_loss = dev_loss
            best = params.copy()
            record.best_epoch = epoch
            bad_epochs = 0
        else:
            bad_epochs += 1
        record.stopped_epoch = epoch
        if bad_epochs >= train_config.early_stop_patience:
            break
    return best


def train(
    model_config: mdl.ModelConfig,
    train_config: TrainConfig,
    manifest: CorpusManifest,
    init: mdl.ModelParams | None = None,
    log=None,
) -> tuple[mdl.ModelParams, RunRecord, LabelTransform | None]:
    """Train on the manifest's train split; returns best-dev parameters.

    Randomness is derived from train_config.seed: independent streams for
    initialization, the dev split, shuffling, and augmentation.
    """
    if manifest.task != model_config.task:
        raise ValueError(
            f"manifest task '{manifest.task}' does not match model task "
            f"'{model_config.task}'"
        )
    rows = [r for r in manifest.rows if r.split == "train"]
    if not rows:
        raise ValueError("empty training manifest")

    ss = np.random.SeedSequence(train_config.seed)
    init_seed, split_seed, shuffle_seed, aug_seed = ss.spawn(4)
    if train_config.augment_seed is not None:
        aug_seed = np.random.SeedSequence(train_config.augment_seed)

    params = init.copy() if init is not None else mdl.init_params(
        model_config, np.random.default_rng(init_seed)
    )
    transform = fit_label_transform(manifest) if manifest.task == "personality" else None
    pre_cfg = PreprocessConfig(
        input_scale_k=train_config.input_scale_k,
        volume_rand_a=train_config.volume_rand_a,
    )
    train_rows, dev_rows = split_dev(
        rows, train_config.dev_fraction, np.random.default_rng(split_seed)
    )
    train_set = _prepare_rows(manifest, train_rows, pre_cfg, transform)
    dev_set = _prepare_rows(manifest, dev_rows, pre_cfg, transform)

    record = RunRecord(
        seed=train_config.seed,
        task=model_config.task,
        languages=manifest.languages,
        model_config=model_config.to_dict(),
        train_config=train_config.to_dict(),
        n_train=len(train_set),
        n_dev=len(dev_set),
    )
    best = _run_loop(
        params,
        model_config,
        train_config,
        train_set,
        dev_set,
        record,
        trainable=params.tensors(),
        freeze_conv=False,
        aug_rng=np.random.default_rng(aug_seed),
        shuffle_rng=np.random.default_rng(shuffle_seed),
        log=log,
    )
    return best, record, transform


def finetune(
    params: mdl.ModelParams,
    model_config: mdl.ModelConfig,
    train_config: TrainConfig,
    manifest: CorpusManifest,
    transform: LabelTransform | None = None,
    log=None,
) -> tuple[mdl.ModelParams, RunRecord]:
    """Adapt the layers after average pooling (fusion, fc, head) to one
    language; conv feature extractors stay bit-identical."""
    languages = manifest.languages
    if len(languages) != 1:
        raise ValueError(
            f"fine-tuning expects a single-language manifest, got {languages}"
        )
    rows = [r for r in manifest.rows if r.split == "train"]
    if not rows:
        raise ValueError("empty fine-tuning manifest")

    ss = np.random.SeedSequence(train_config.seed)
    _, split_seed, shuffle_seed, aug_seed = ss.spawn(4)
    if train_config.augment_seed is not None:
        aug_seed = np.random.SeedSequence(train_config.augment_seed)

    tuned = params.copy()
    frozen = tuned.conv_tensor_names()
    trainable = {
        name: arr for name, arr in tuned.tensors().items() if name not in frozen
    }
    pre_cfg = PreprocessConfig(
        input_scale_k=train_config.input_scale_k,
        volume_rand_a=train_config.volume_rand_a,
    )
    train_rows, dev_rows = split_dev(
        rows, train_config.dev_fraction, np.random.default_rng(split_seed)
    )
    train_set = _prepare_rows(manifest, train_rows, pre_cfg, transform)
    dev_set = _prepare_rows(manifest, dev_rows, pre_cfg, transform)

    record = RunRecord(
        seed=train_config.seed,
        task=model_config.task,
        languages=languages,
        model_config=model_config.to_dict(),
        train_config=train_config.to_dict(),
        n_train=len(train_set),
        n_dev=len(dev_set),
    )
    best = _run_loop(
        tuned,
        model_config,
        train_config,
        train_set,
        dev_set,
        record,
        trainable=trainable,
        freeze_conv=True,
        aug_rng=np.random.default_rng(aug_seed),
        shuffle_rng=np.random.default_rng(shuffle_seed),
        log=log,
    )
    return best, record


# --- checkpoint container ---------------------------------------------------


def _pack_u32(n: int) -> bytes:
    return struct.pack("<I", n)


def checkpoint_bytes(
    params: mdl.ModelParams,
    model_config: mdl.ModelConfig,
    languages: list[str],
    label_transform: LabelTransform | None = None,
    run_record: RunRecord | None = None,
) -> bytes:
    header = {
        "config": model_config.to_dict(),
        "task": model_config.task,
        "languages": list(languages),
        "label_transform": label_transform.to_dict() if label_transform else None,
        "run_record_digest": run_record.digest() if run_record else None,
    }
    hjson = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf = bytearray()
    buf += CHECKPOINT_MAGIC
    buf += _pack_u32(CHECKPOINT_VERSION)
    buf += _pack_u32(len(hjson))
    buf += hjson
    for name, arr in params.tensors().items():
        nb = name.encode("utf-8")
        buf += _pack_u32(len(nb))
        buf += nb
        buf += _pack_u32(arr.ndim)
        for d in arr.shape:
            buf += _pack_u32(d)
        buf += arr.astype("<f4").tobytes()
    buf += _pack_u32(zlib.crc32(bytes(buf)) & 0xFFFFFFFF)
    return bytes(buf)


def save_checkpoint(
    path,
    params: mdl.ModelParams,
    model_config: mdl.ModelConfig,
    languages: list[str],
    label_transform: LabelTransform | None = None,
    run_record: RunRecord | None = None,
) -> str:
    """Write the checkpoint; returns its sha256 hex digest."""
    blob = checkpoint_bytes(params, model_config, languages, label_transform, run_record)
    Path(path).write_bytes(blob)
    digest = hashlib.sha256(blob).hexdigest()
    if run_record is not None:
        run_record.checkpoint_digest = digest
    return digest


@dataclass
class Checkpoint:
    params: mdl.ModelParams
    config: mdl.ModelConfig
    languages: list[str]
    label_transform: LabelTransform | None
    run_record_digest: str | None


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (stored_crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) & 0xFFFFFFFF != stored_crc:
        raise CheckpointError("checkpoint checksum mismatch (corrupted file)")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (hlen,) = struct.unpack_from("<I", data, 8)
    header = json.loads(data[12 : 12 + hlen].decode("utf-8"))
    pos = 12 + hlen
    end = len(data) - 4
    tensors: dict[str, np.ndarray] = {}
    while pos < end:
        (nlen,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos : pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = struct.unpack_from("<I", data, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}I", data, pos)
        pos += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=pos)
        pos += 4 * count
        tensors[name] = arr.astype(np.float64).reshape(dims)
    if pos != end:
        raise CheckpointError("trailing bytes after tensor section")
    config = mdl.ModelConfig.from_dict(header["config"])
    params = mdl.ModelParams.from_tensors(config, tensors)
    transform = (
        LabelTransform.from_dict(header["label_transform"])
        if header.get("label_transform")
        else None
    )
    return Checkpoint(
        params=params,
        config=config,
        languages=list(header.get("languages", [])),
        label_transform=transform,
        run_record_digest=header.get("run_record_digest"),
    )
