#!/usr/bin/env python3
"""
HierLoc hierarchical localization model
Stacked-autoencoder front end, shared common block, two-step recurrent
building -> floor branch with regression heads, and a position head that
reads the shared embedding plus both scores. Training runs in stages:
SAE pretraining, building/floor, then position with everything upstream frozen.
"""

import os
import sys
import json
import struct
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator
from tqdm import tqdm

from tensor_core import DTYPE, HierLocError, Matrix, SeededRng, ShapeError, shape_str
from neuralnet import (
    ACTIVATIONS,
    RNN_KINDS,
    AdamState,
    DenseBlock,
    GradientTape,
    Params,
    RnnStack,
    adam_update,
    gradient_check,
    mse_grad,
    mse_loss,
    offset_biases,
    restore,
    snapshot,
)
from dataset import DatasetMeta, SplitDataset, features_and_targets, scale_coordinates, unscale_coordinates

logger = logging.getLogger(__name__)

UPSTREAM_GROUPS = ("encoder.", "common.", "rnn.", "building_head.", "floor_head.")
POSITION_GROUPS = ("position_head.",)
MAGIC = b"HLOC"
FORMAT_VERSION = 1


class StageError(HierLocError, RuntimeError):
    pass


class ModelFileError(HierLocError):
    pass


class ModelFormatError(ModelFileError):
    pass


class ModelTruncatedError(ModelFileError):
    pass


class ModelShapeError(ModelFileError, ShapeError):
    pass


class HyperParams(BaseModel):
    """Complete architecture and training configuration (defaults = best published configuration)"""

    model_config = ConfigDict(extra="forbid", frozen=True)

    input_width: int = Field(520, ge=1)
    sae_layers: List[int] = [256, 128, 64]
    sae_epochs: int = Field(20, ge=1)
    common_layers: List[int] = [128, 128]
    common_dropout: float = Field(0.2, ge=0.0, lt=1.0)
    rnn_kind: Literal["standard", "lstm"] = "lstm"
    rnn_hidden: int = Field(128, ge=1)
    rnn_layers: int = Field(2, ge=1)
    bf_head_layers: List[int] = [32, 1]
    bf_dropout: float = Field(0.2, ge=0.0, lt=1.0)
    bf_epochs: int = Field(10, ge=1)
    position_layers: List[int] = [128, 128, 2]
    position_dropout: float = Field(0.1, ge=0.0, lt=1.0)
    position_epochs: int = Field(30, ge=1)
    batch_size: int = Field(32, ge=1)
    patience: int = Field(5, ge=1)
    min_epochs: int = Field(5, ge=1)
    val_ratio: float = Field(0.9, gt=0.0, lt=1.0)
    lr: float = Field(0.001, gt=0.0)
    beta1: float = Field(0.9, ge=0.0, lt=1.0)
    beta2: float = Field(0.999, ge=0.0, lt=1.0)
    epsilon: float = Field(1e-8, gt=0.0)
    seed: int = Field(0, ge=0, lt=2 ** 64)

    @field_validator("sae_layers", "common_layers", "bf_head_layers", "position_layers", mode="before")
    @classmethod
    def _split_widths(cls, value):
        if isinstance(value, str):
            return [int(part) for part in value.split(",") if part.strip()]
        return value

    @field_validator("sae_layers", "common_layers", "bf_head_layers", "position_layers")
    @classmethod
    def _check_widths(cls, value: List[int]) -> List[int]:
        if not value:
            raise ValueError("layer list must not be empty")
        if any(width < 1 for width in value):
            raise ValueError(f"all layer widths must be >= 1, got {value}")
        return value

    @model_validator(mode="after")
    def _check_outputs(self) -> "HyperParams":
        if self.bf_head_layers[-1] != 1:
            raise ValueError(f"bf_head_layers must end in a single output node, got {self.bf_head_layers}")
        if self.position_layers[-1] != 2:
            raise ValueError(f"position_layers must end in two output nodes, got {self.position_layers}")
        return self


@dataclass
class RawPrediction:
    """Continuous head outputs for a batch; a single prediction is a batch of one"""
    building_score: np.ndarray
    floor_score: np.ndarray
    xy_scaled: np.ndarray

    def __post_init__(self):
        self.building_score = np.atleast_1d(np.asarray(self.building_score, dtype=DTYPE)).reshape(-1)
        self.floor_score = np.atleast_1d(np.asarray(self.floor_score, dtype=DTYPE)).reshape(-1)
        self.xy_scaled = np.asarray(self.xy_scaled, dtype=DTYPE).reshape(-1, 2)

    def __len__(self) -> int:
        return self.building_score.shape[0]


@dataclass
class DecodedPrediction:
    """Class ids and unscaled coordinates (meters) for a batch"""
    building_id: np.ndarray
    floor: np.ndarray
    xy: np.ndarray

    def __post_init__(self):
        self.building_id = np.atleast_1d(np.asarray(self.building_id, dtype=np.int64)).reshape(-1)
        self.floor = np.atleast_1d(np.asarray(self.floor, dtype=np.int64)).reshape(-1)
        self.xy = np.asarray(self.xy, dtype=DTYPE).reshape(-1, 2)

    def __len__(self) -> int:
        return self.building_id.shape[0]

    @classmethod
    def from_records(cls, records) -> "DecodedPrediction":
        return cls(
            [r.building_id for r in records],
            [r.floor for r in records],
            [(r.longitude, r.latitude) for r in records],
        )

    def rows(self) -> List[Tuple[int, int, float, float]]:
        return [
            (int(b), int(f), float(x), float(y))
            for b, f, (x, y) in zip(self.building_id, self.floor, self.xy)
        ]


@dataclass
class TrainLog:
    stage: str
    train_losses: List[float] = field(default_factory=list)
    val_losses: List[float] = field(default_factory=list)
    best_epoch: int = 0
    stop_epoch: int = 0
    stopped_early: bool = False
    initial_val_loss: Optional[float] = None

    def to_dict(self) -> dict:
        return {
            "stage": self.stage,
            "train_losses": self.train_losses,
            "val_losses": self.val_losses,
            "best_epoch": self.best_epoch,
            "stop_epoch": self.stop_epoch,
            "stopped_early": self.stopped_early,
            "initial_val_loss": self.initial_val_loss,
        }


@dataclass
class Targets:
    building: np.ndarray
    floor: np.ndarray
    xy: Optional[np.ndarray] = None


@dataclass
class _Outputs:
    z: Matrix
    building: Matrix
    floor: Matrix
    xy: Optional[Matrix]


def early_stopping_should_stop(val_losses: Sequence[float], patience: int = 5, min_epochs: int = 5) -> bool:
    """True once min_epochs have run and the best loss is at least `patience` epochs old"""
    if not val_losses:
        return False
    best_epoch = int(np.argmin(np.asarray(val_losses, dtype=DTYPE)))
    elapsed = len(val_losses)
    return elapsed >= min_epochs and (elapsed - 1 - best_epoch) >= patience


class HierLocModel:
    def __init__(self, params: HyperParams, meta: DatasetMeta):
        self.params = params
        self.meta = meta
        self.stages: List[str] = []
        self.frozen: Tuple[str, ...] = ()

        rng = SeededRng(params.seed).child("init")
        hp = params
        self.encoder = DenseBlock.create(hp.input_width, hp.sae_layers, ["relu"] * len(hp.sae_layers), rng)
        self.common = DenseBlock.create(
            hp.sae_layers[-1], hp.common_layers, ["relu"] * len(hp.common_layers), rng,
            dropout_after=hp.common_dropout,
        )
        embed = hp.common_layers[-1]
        self.rnn = RnnStack.create(hp.rnn_kind, embed + 1, hp.rnn_hidden, hp.rnn_layers, rng)
        head_acts = ["relu"] * len(hp.bf_head_layers)
        self.building_head = DenseBlock.create(hp.rnn_hidden, hp.bf_head_layers, head_acts, rng, dropout_before=hp.bf_dropout)
        self.floor_head = DenseBlock.create(hp.rnn_hidden, hp.bf_head_layers, head_acts, rng, dropout_before=hp.bf_dropout)
        pos_acts = ["relu"] * (len(hp.position_layers) - 1) + ["tanh"]
        self.position_head = DenseBlock.create(
            embed + 2, hp.position_layers, pos_acts, rng,
            dropout_after=hp.position_dropout, dropout_last=False,
        )

    @property
    def embed_width(self) -> int:
        return self.common.output_width

    def parameters(self) -> Params:
        params: Params = {}
        params.update(self.encoder.parameters("encoder."))
        params.update(self.common.parameters("common."))
        params.update(self.rnn.parameters("rnn."))
        params.update(self.building_head.parameters("building_head."))
        params.update(self.floor_head.parameters("floor_head."))
        params.update(self.position_head.parameters("position_head."))
        return params

    def group(self, prefixes: Sequence[str]) -> Params:
        return {path: p for path, p in self.parameters().items() if path.startswith(tuple(prefixes))}

    def _check_features(self, x) -> Matrix:
        x = np.asarray(x, dtype=DTYPE)
        if x.ndim == 1:
            x = x.reshape(1, -1)
        if x.ndim != 2 or x.shape[1] != self.params.input_width:
            raise ShapeError(f"model expects {self.params.input_width} features per row, got shape {shape_str(x.shape)}")
        return x

    def _forward(
        self,
        x: Matrix,
        mode: str,
        rng: Optional[SeededRng] = None,
        tape: Optional[GradientTape] = None,
        with_position: bool = True,
    ) -> _Outputs:
        rows = x.shape[0]
        z = self.encoder.forward(x, mode, rng, tape, "encoder")
        z = self.common.forward(z, mode, rng, tape, "common")
        states = self.rnn.initial_states(rows)
        # no upper level exists for building, so step 1 sees a zero in the feedback slot
        top, states = self.rnn.step(np.hstack([z, np.zeros((rows, 1), dtype=DTYPE)]), states, tape, "rnn.t0")
        building = self.building_head.forward(top, mode, rng, tape, "building_head")
        top, states = self.rnn.step(np.hstack([z, building]), states, tape, "rnn.t1")
        floor = self.floor_head.forward(top, mode, rng, tape, "floor_head")
        xy = None
        if with_position:
            xy = self.position_head.forward(np.hstack([z, building, floor]), mode, rng, tape, "position_head")
        return _Outputs(z, building, floor, xy)

    def _backward(
        self,
        tape: GradientTape,
        d_building: Matrix,
        d_floor: Matrix,
        d_xy: Optional[Matrix],
        train_upstream: bool = True,
        train_position: bool = True,
    ) -> Params:
        grads: Params = {}
        rows = d_building.shape[0]
        width = self.embed_width
        d_z = np.zeros((rows, width), dtype=DTYPE)

        if d_xy is not None:
            d_in, g = self.position_head.backward(d_xy, tape, "position_head", "position_head.")
            if train_position:
                grads.update(g)
            d_z = d_z + d_in[:, :width]
            d_building = d_building + d_in[:, width:width + 1]
            d_floor = d_floor + d_in[:, width + 1:width + 2]
        if not train_upstream:
            return grads

        d_top, g = self.floor_head.backward(d_floor, tape, "floor_head", "floor_head.")
        grads.update(g)
        d_in, d_states, rnn_late = self.rnn.step_backward(
            d_top, self.rnn.zero_state_grads(rows), tape, "rnn.t1", "rnn."
        )
        d_z = d_z + d_in[:, :width]
        d_building = d_building + d_in[:, width:]

        d_top, g = self.building_head.backward(d_building, tape, "building_head", "building_head.")
        grads.update(g)
        d_in, _, rnn_early = self.rnn.step_backward(d_top, d_states, tape, "rnn.t0", "rnn.")
        d_z = d_z + d_in[:, :width]
        for path in rnn_late:
            grads[path] = rnn_late[path] + rnn_early[path]

        d_enc, g = self.common.backward(d_z, tape, "common", "common.")
        grads.update(g)
        _, g = self.encoder.backward(d_enc, tape, "encoder", "encoder.")
        grads.update(g)
        return grads

    def loss(self, inputs, target: Targets, tape: Optional[GradientTape] = None) -> float:
        """Eval-mode building + floor (+ position) MSE; frozen groups get zero gradients"""
        x = self._check_features(inputs)
        out = self._forward(x, "eval", None, tape, with_position=target.xy is not None)
        yb = np.asarray(target.building, dtype=DTYPE).reshape(-1, 1)
        yf = np.asarray(target.floor, dtype=DTYPE).reshape(-1, 1)
        value = mse_loss(out.building, yb) + mse_loss(out.floor, yf)
        yxy = None
        if target.xy is not None:
            yxy = np.asarray(target.xy, dtype=DTYPE).reshape(-1, 2)
            value += mse_loss(out.xy, yxy)

        def replay(scale: float) -> Params:
            grads = self._backward(
                tape,
                mse_grad(out.building, yb) * scale,
                mse_grad(out.floor, yf) * scale,
                None if yxy is None else mse_grad(out.xy, yxy) * scale,
                train_upstream=not any(p in self.frozen for p in UPSTREAM_GROUPS),
                train_position=not any(p in self.frozen for p in POSITION_GROUPS),
            )
            for path, param in self.parameters().items():
                if path not in grads:
                    grads[path] = np.zeros_like(param)
            return grads

        if tape is not None:
            tape.bind(replay)
        return value

    def position_inputs(self, x: Matrix) -> Matrix:
        """Eval-mode [embedding; building score; floor score] rows feeding the position head"""
        out = self._forward(self._check_features(x), "eval", with_position=False)
        return np.hstack([out.z, out.building, out.floor])


def forward(model: HierLocModel, features, mode: str = "eval", rng: Optional[SeededRng] = None) -> RawPrediction:
    x = model._check_features(features)
    out = model._forward(x, mode, rng)
    return RawPrediction(out.building[:, 0], out.floor[:, 0], out.xy)


def _round_half_away(values: np.ndarray) -> np.ndarray:
    return np.sign(values) * np.floor(np.abs(values) + 0.5)


def decode_prediction(raw: RawPrediction, meta: DatasetMeta) -> DecodedPrediction:
    building = np.clip(_round_half_away(raw.building_score), 0, meta.building_count - 1)
    floor = np.clip(_round_half_away(raw.floor_score), 0, meta.floor_count - 1)
    return DecodedPrediction(building.astype(np.int64), floor.astype(np.int64), unscale_coordinates(raw.xy_scaled, meta))


def predict(model: HierLocModel, features) -> DecodedPrediction:
    return decode_prediction(forward(model, features, "eval"), model.meta)


# ---------------------------------------------------------------- training


def _progress(iterable, desc: str):
    return tqdm(iterable, desc=desc, leave=False, disable=not sys.stderr.isatty())


def _train_loop(
    stage: str,
    trainable: Params,
    step_fn: Callable[[np.ndarray], Tuple[float, Params]],
    val_fn: Callable[[], float],
    n_train: int,
    hp: HyperParams,
    max_epochs: int,
) -> TrainLog:
    adam = AdamState(lr=hp.lr, beta1=hp.beta1, beta2=hp.beta2, epsilon=hp.epsilon)
    shuffle = SeededRng(hp.seed).child(f"{stage}-shuffle")
    log = TrainLog(stage)
    log.initial_val_loss = float(val_fn())
    best = snapshot(trainable)
    best_loss = np.inf

    for epoch in range(1, max_epochs + 1):
        order = shuffle.permutation(n_train)
        total = 0.0
        for start in _progress(range(0, n_train, hp.batch_size), f"{stage} epoch {epoch}"):
            idx = order[start:start + hp.batch_size]
            loss, grads = step_fn(idx)
            adam_update(adam, trainable, grads)
            total += loss * len(idx)
        train_loss = total / n_train
        val_loss = float(val_fn())
        log.train_losses.append(train_loss)
        log.val_losses.append(val_loss)
        log.stop_epoch = epoch
        marker = ""
        if val_loss < best_loss:
            best_loss = val_loss
            best = snapshot(trainable)
            log.best_epoch = epoch
            marker = " ⭐"
        logger.info(f"📈 {stage} epoch {epoch}/{max_epochs}: train {train_loss:.6f}, val {val_loss:.6f}{marker}")
        if early_stopping_should_stop(log.val_losses, hp.patience, hp.min_epochs):
            log.stopped_early = True
            logger.info(f"⏹️  {stage}: early stopping after epoch {epoch} (best epoch {log.best_epoch})")
            break

    restore(trainable, best)
    if log.best_epoch:
        logger.info(f"✅ {stage}: restored weights from epoch {log.best_epoch} (val {best_loss:.6f})")
    return log


def pretrain_sae(
    model: HierLocModel,
    train_features: Matrix,
    validation_features: Optional[Matrix] = None,
    params: Optional[HyperParams] = None,
    epochs: Optional[int] = None,
) -> Tuple[DenseBlock, TrainLog]:
    """Train encoder + mirrored decoder to reconstruct the inputs; the decoder is discarded"""
    hp = params or model.params
    x_train = model._check_features(train_features) if np.size(train_features) else None
    if x_train is None or x_train.shape[0] == 0:
        raise StageError("cannot pretrain the autoencoder on an empty training set")
    x_val = x_train if validation_features is None else model._check_features(validation_features)

    widths = list(reversed(hp.sae_layers[:-1])) + [hp.input_width]
    activations = ["relu"] * (len(widths) - 1) + ["linear"]
    decoder = DenseBlock.create(hp.sae_layers[-1], widths, activations, SeededRng(hp.seed).child("sae-decoder"))
    autoencoder = DenseBlock(model.encoder.steps + decoder.steps)
    trainable = autoencoder.parameters("sae.")

    def step(idx: np.ndarray) -> Tuple[float, Params]:
        tape = GradientTape()
        batch = x_train[idx]
        recon = autoencoder.forward(batch, "train", None, tape, "sae")
        _, grads = autoencoder.backward(mse_grad(recon, batch), tape, "sae", "sae.")
        return mse_loss(recon, batch), grads

    def validate() -> float:
        return mse_loss(autoencoder.forward(x_val, "eval"), x_val)

    max_epochs = hp.sae_epochs if epochs is None else epochs
    logger.info(f"🧱 Pretraining autoencoder {hp.input_width}->{'->'.join(map(str, hp.sae_layers))} for up to {max_epochs} epochs")
    log = _train_loop("sae", trainable, step, validate, x_train.shape[0], hp, max_epochs)
    if "sae" not in model.stages:
        model.stages.append("sae")
    return model.encoder, log


def train_bf_stage(model: HierLocModel, split: SplitDataset, params: Optional[HyperParams] = None) -> TrainLog:
    """Jointly train encoder, common block, recurrent branch and both heads on building + floor MSE"""
    if "sae" not in model.stages:
        raise StageError("building/floor stage needs a pretrained encoder; run pretraining first")
    hp = params or model.params
    train = features_and_targets(split.train)
    val = features_and_targets(split.validation)
    x_train = model._check_features(train.features)
    x_val = model._check_features(val.features)
    yb, yf = train.building.reshape(-1, 1), train.floor.reshape(-1, 1)
    dropout_rng = SeededRng(hp.seed).child("bf-dropout")
    model.frozen = POSITION_GROUPS
    trainable = model.group(UPSTREAM_GROUPS)

    def step(idx: np.ndarray) -> Tuple[float, Params]:
        tape = GradientTape()
        out = model._forward(x_train[idx], "train", dropout_rng, tape, with_position=False)
        loss = mse_loss(out.building, yb[idx]) + mse_loss(out.floor, yf[idx])
        grads = model._backward(
            tape, mse_grad(out.building, yb[idx]), mse_grad(out.floor, yf[idx]), None,
            train_upstream=True, train_position=False,
        )
        return loss, grads

    def validate() -> float:
        out = model._forward(x_val, "eval", with_position=False)
        return mse_loss(out.building, val.building.reshape(-1, 1)) + mse_loss(out.floor, val.floor.reshape(-1, 1))

    logger.info(f"🏢 Training building/floor branch ({hp.rnn_kind}, {hp.rnn_layers}x{hp.rnn_hidden}) for up to {hp.bf_epochs} epochs")
    log = _train_loop("bf", trainable, step, validate, x_train.shape[0], hp, hp.bf_epochs)
    model.frozen = ()
    if "bf" not in model.stages:
        model.stages.append("bf")
    return log


def train_position_stage(model: HierLocModel, split: SplitDataset, params: Optional[HyperParams] = None) -> TrainLog:
    """Train only the position head on scaled coordinates; everything upstream stays frozen"""
    if "bf" not in model.stages:
        raise StageError("position stage needs the building/floor stage to have run first")
    hp = params or model.params
    train = features_and_targets(split.train)
    val = features_and_targets(split.validation)
    # the frozen upstream runs in eval mode, so its outputs are fixed for the whole stage
    p_train = model.position_inputs(train.features)
    p_val = model.position_inputs(val.features)
    xy_train = scale_coordinates(train.xy, model.meta)
    xy_val = scale_coordinates(val.xy, model.meta)
    dropout_rng = SeededRng(hp.seed).child("position-dropout")
    model.frozen = UPSTREAM_GROUPS
    trainable = model.group(POSITION_GROUPS)
    head = model.position_head

    def step(idx: np.ndarray) -> Tuple[float, Params]:
        tape = GradientTape()
        pred = head.forward(p_train[idx], "train", dropout_rng, tape, "position_head")
        _, grads = head.backward(mse_grad(pred, xy_train[idx]), tape, "position_head", "position_head.")
        return mse_loss(pred, xy_train[idx]), grads

    def validate() -> float:
        return mse_loss(head.forward(p_val, "eval"), xy_val)

    logger.info(f"📍 Training position head for up to {hp.position_epochs} epochs (upstream frozen)")
    log = _train_loop("position", trainable, step, validate, p_train.shape[0], hp, hp.position_epochs)
    model.frozen = ()
    if "position" not in model.stages:
        model.stages.append("position")
    return log


def fit(split: SplitDataset, params: HyperParams, model: Optional[HierLocModel] = None) -> Tuple[HierLocModel, Dict[str, TrainLog]]:
    """Full pipeline: pretraining (unless the model already has an encoder), then both stages"""
    model = model or HierLocModel(params, split.meta)
    logs: Dict[str, TrainLog] = {}
    if "sae" not in model.stages:
        train = features_and_targets(split.train)
        val = features_and_targets(split.validation)
        _, logs["sae"] = pretrain_sae(model, train.features, val.features, params)
    logs["bf"] = train_bf_stage(model, split, params)
    logs["position"] = train_position_stage(model, split, params)
    return model, logs


# ---------------------------------------------------------------- weight files


def write_tensor_file(path: Union[str, Path], header: dict, tensors: Dict[str, np.ndarray]) -> Path:
    """Little-endian container: magic, version, JSON header, tensor directory, float64 payloads"""
    path = Path(path)
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION), struct.pack("<I", len(header_bytes)), header_bytes]
    parts.append(struct.pack("<I", len(tensors)))
    payload = []
    offset = 0
    for name, tensor in tensors.items():
        data = np.ascontiguousarray(tensor, dtype="<f8").tobytes(order="C")
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)) + encoded)
        parts.append(struct.pack("<B", tensor.ndim) + struct.pack(f"<{tensor.ndim}I", *tensor.shape))
        parts.append(struct.pack("<Q", offset))
        payload.append(data)
        offset += len(data)
    parts.extend(payload)

    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(parts))
    os.replace(tmp, path)
    return path


class _Reader:
    def __init__(self, data: bytes, path: Path):
        self.data = data
        self.path = path
        self.pos = 0

    def take(self, size: int, what: str) -> bytes:
        if self.pos + size > len(self.data):
            raise ModelTruncatedError(f"{self.path}: file ends inside the {what}")
        chunk = self.data[self.pos:self.pos + size]
        self.pos += size
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def read_tensor_file(path: Union[str, Path]) -> Tuple[dict, Dict[str, np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise ModelFileError(f"weight file not found: {path}")
    reader = _Reader(path.read_bytes(), path)
    magic = reader.take(4, "magic")
    if magic != MAGIC:
        raise ModelFormatError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    (version,) = reader.unpack("<I", "format version")
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"{path}: unsupported format version {version}, expected {FORMAT_VERSION}")
    (header_len,) = reader.unpack("<I", "header length")
    try:
        header = json.loads(reader.take(header_len, "header").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ModelFormatError(f"{path}: header block is not valid JSON: {e}") from e

    (count,) = reader.unpack("<I", "tensor count")
    directory = []
    expected_offset = 0
    for _ in range(count):
        (name_len,) = reader.unpack("<H", "tensor directory")
        name = reader.take(name_len, "tensor directory").decode("utf-8")
        (ndim,) = reader.unpack("<B", "tensor directory")
        shape = reader.unpack(f"<{ndim}I", "tensor directory")
        (offset,) = reader.unpack("<Q", "tensor directory")
        if offset != expected_offset:
            raise ModelShapeError(f"{path}: tensor '{name}' offset {offset} is inconsistent with the shape table")
        directory.append((name, tuple(shape), offset))
        expected_offset += int(np.prod(shape, dtype=np.int64)) * 8

    payload = reader.data[reader.pos:]
    if len(payload) < expected_offset:
        raise ModelTruncatedError(f"{path}: payload has {len(payload)} bytes, shape table needs {expected_offset}")
    if len(payload) > expected_offset:
        raise ModelShapeError(f"{path}: {len(payload) - expected_offset} bytes beyond the last tensor in the shape table")

    tensors = {}
    for name, shape, offset in directory:
        size = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(payload, dtype="<f8", count=size, offset=offset).astype(DTYPE).reshape(shape)
    return header, tensors


def _assign(target: Params, tensors: Dict[str, np.ndarray], path: Path) -> None:
    for name, param in target.items():
        if name not in tensors:
            raise ModelShapeError(f"{path}: tensor '{name}' is missing")
        if tensors[name].shape != param.shape:
            raise ModelShapeError(
                f"{path}: tensor '{name}' has shape {shape_str(tensors[name].shape)}, "
                f"this configuration expects {shape_str(param.shape)}"
            )
    extra = sorted(set(tensors) - set(target))
    if extra:
        raise ModelShapeError(f"{path}: unexpected tensor '{extra[0]}' for this configuration")
    for name, param in target.items():
        np.copyto(param, tensors[name])


def _header(kind: str, model: HierLocModel, config: Optional[dict]) -> dict:
    return {
        "kind": kind,
        "hyperparams": model.params.model_dump(mode="json"),
        "meta": model.meta.to_dict(),
        "stages": list(model.stages),
        "config": config or {},
    }


def save_model(model: HierLocModel, path: Union[str, Path], config: Optional[dict] = None) -> Path:
    path = write_tensor_file(path, _header("model", model, config), model.parameters())
    logger.info(f"💾 Saved model to {path}")
    return path


def _params_from_header(header: dict, path: Path) -> Tuple[HyperParams, DatasetMeta]:
    try:
        return HyperParams.model_validate(header["hyperparams"]), DatasetMeta(**header["meta"])
    except (KeyError, TypeError, ValidationError, HierLocError) as e:
        raise ModelFormatError(f"{path}: header does not describe a valid configuration: {e}") from e


def load_model(path: Union[str, Path], params: Optional[HyperParams] = None) -> HierLocModel:
    """Rebuild a model from a file; with `params` the file must match that configuration's shapes"""
    path = Path(path)
    header, tensors = read_tensor_file(path)
    if header.get("kind") != "model":
        raise ModelFormatError(f"{path}: holds a {header.get('kind')!r} file, not a model")
    stored, meta = _params_from_header(header, path)
    model = HierLocModel(params or stored, meta)
    _assign(model.parameters(), tensors, path)
    model.stages = list(header.get("stages", []))
    logger.info(f"📦 Loaded model from {path} (stages: {', '.join(model.stages) or 'none'})")
    return model


def save_encoder(model: HierLocModel, path: Union[str, Path], config: Optional[dict] = None) -> Path:
    path = write_tensor_file(path, _header("encoder", model, config), model.encoder.parameters("encoder."))
    logger.info(f"💾 Saved encoder to {path}")
    return path


def load_encoder(model: HierLocModel, path: Union[str, Path]) -> HierLocModel:
    path = Path(path)
    header, tensors = read_tensor_file(path)
    if header.get("kind") != "encoder":
        raise ModelFormatError(f"{path}: holds a {header.get('kind')!r} file, not an encoder")
    _assign(model.encoder.parameters("encoder."), tensors, path)
    if "sae" not in model.stages:
        model.stages.append("sae")
    logger.info(f"📦 Loaded pretrained encoder from {path}")
    return model


# ---------------------------------------------------------------- gradient checks


def toy_params(**overrides) -> HyperParams:
    """Tiny architecture for gradient checks and hand-computed forward passes"""
    values = dict(
        input_width=4, sae_layers=[3, 2], common_layers=[3, 3], rnn_hidden=3, rnn_layers=2,
        bf_head_layers=[3, 1], position_layers=[3, 3, 2],
    )
    values.update(overrides)
    return HyperParams(**values)


def standard_gradient_checks(seed: int = 0, rows: int = 3) -> Dict[str, float]:
    """Max relative gradient error for dense stacks, two-step recurrent unrolls and the toy model"""
    rng = SeededRng(seed).child("gradcheck")
    x = rng.uniform(-1.0, 1.0, (rows, 4))
    results: Dict[str, float] = {}

    for act in ACTIVATIONS:
        block = DenseBlock.create(4, [3, 2], [act, act], rng.child(f"dense-{act}"))
        offset_biases(block.parameters(), rng.child(f"dense-{act}-bias"))
        results[f"dense-{act}"] = gradient_check(block, x, rng.uniform(-1.0, 1.0, (rows, 2)))

    meta = DatasetMeta(3, 5, 0.0, 1.0, 0.0, 1.0)
    for kind in RNN_KINDS:
        stack = RnnStack.create(kind, 4, 3, 2, rng.child(f"rnn-{kind}"))
        offset_biases(stack.parameters(), rng.child(f"rnn-{kind}-bias"))
        inputs = [rng.uniform(-1.0, 1.0, (rows, 4)) for _ in range(2)]
        targets = [rng.uniform(-1.0, 1.0, (rows, 3)) for _ in range(2)]
        results[f"rnn-{kind}"] = gradient_check(stack, inputs, targets)

        model = HierLocModel(toy_params(rnn_kind=kind, seed=seed), meta)
        offset_biases(model.parameters(), rng.child(f"hierloc-{kind}-bias"))
        target = Targets(
            building=rng.random((rows,)),
            floor=rng.random((rows,)),
            xy=rng.uniform(-0.5, 0.5, (rows, 2)),
        )
        results[f"hierloc-{kind}"] = gradient_check(model, rng.random((rows, 4)), target)
    return results
