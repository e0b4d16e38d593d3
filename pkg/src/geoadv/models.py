"""Victim autoencoder, point-cloud classifier and checkpoint persistence.

The encoder is a stack of per-point affine layers with relu, followed by a
feature-wise max over points; the decoder is fully connected and emits n x 3
coordinates. Batch normalization is deliberately absent.
"""

from __future__ import annotations

import hashlib
import io
import json
import zipfile
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np

from . import autodiff as ad
from .pointcloud import CloudLike, as_points

CHECKPOINT_VERSION = 1

FULL_ENCODER_WIDTHS = (64, 128, 128, 256)
FULL_DECODER_WIDTHS = (256, 256)


class CheckpointError(ValueError):
    pass


class FrozenModelError(RuntimeError):
    pass


def _scaled(widths, factor: float) -> tuple[int, ...]:
    return tuple(max(1, int(round(w * factor))) for w in widths)


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def _init_layers(rng, sizes, prefix) -> dict[str, np.ndarray]:
    params = {}
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        params[f"{prefix}{i}.W"] = glorot_uniform(rng, a, b)
        params[f"{prefix}{i}.b"] = np.zeros(b)
    return params


def params_digest(params: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name]).tobytes())
    return h.hexdigest()


def _nodes(tape: ad.Tape, params, trainable: bool) -> dict[str, ad.Node]:
    make = tape.leaf if trainable else tape.const
    return {k: make(v) for k, v in params.items()}


@dataclass
class AEModel:
    params: dict[str, np.ndarray]
    encoder_widths: tuple[int, ...]  # per-point layer widths, last one is the latent size m
    decoder_widths: tuple[int, ...]  # hidden fully connected widths; output layer is n * 3
    n: int
    seed: int
    width_factor: float = 1.0
    frozen: bool = False

    @classmethod
    def create(cls, n: int = 256, m: int = 32, width_factor: float = 0.25, seed: int = 0) -> "AEModel":
        enc = _scaled(FULL_ENCODER_WIDTHS, width_factor) + (m,)
        dec = _scaled(FULL_DECODER_WIDTHS, width_factor)
        rng = np.random.default_rng(seed)
        params = _init_layers(rng, (3,) + enc, "enc")
        params.update(_init_layers(rng, (m,) + dec + (3 * n,), "dec"))
        return cls(params, enc, dec, n, seed, width_factor)

    @property
    def m(self) -> int:
        return self.encoder_widths[-1]

    def digest(self) -> str:
        return params_digest(self.params)

    # graph builders -------------------------------------------------------

    def encoder_graph(self, x: ad.Node, P: dict[str, ad.Node], groups: int = 1):
        h = x
        for i in range(len(self.encoder_widths)):
            h = ad.relu(ad.affine(h, P[f"enc{i}.W"], P[f"enc{i}.b"]))
        return ad.maxpool_points(h, groups)

    def decoder_graph(self, z: ad.Node, P: dict[str, ad.Node]) -> ad.Node:
        h = z
        last = len(self.decoder_widths)
        for i in range(last + 1):
            h = ad.affine(h, P[f"dec{i}.W"], P[f"dec{i}.b"])
            if i < last:
                h = ad.relu(h)
        return ad.reshape(h, (-1, 3))

    def forward_graph(self, x: ad.Node, P: Optional[dict[str, ad.Node]] = None, groups: int = 1):
        """Returns (latent node, critical ids, reconstruction node)."""
        if P is None:
            P = _nodes(x.tape, self.params, trainable=False)
        z, ids = self.encoder_graph(x, P, groups)
        return z, ids, self.decoder_graph(z, P)

    # inference ------------------------------------------------------------

    def encode(self, cloud: CloudLike):
        """Latent code and, per latent feature, the index of the point attaining the max."""
        tape = ad.Tape()
        P = _nodes(tape, self.params, trainable=False)
        z, ids = self.encoder_graph(tape.const(as_points(cloud)), P)
        return z.value, ids

    def decode(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        if z.shape != (self.m,):
            raise ad.ShapeMismatchError(f"latent must have shape ({self.m},), got {z.shape}")
        tape = ad.Tape()
        P = _nodes(tape, self.params, trainable=False)
        return self.decoder_graph(tape.const(z), P).value

    def reconstruct(self, cloud: CloudLike) -> np.ndarray:
        return self.decode(self.encode(cloud)[0])

    def critical_ids(self, cloud: CloudLike) -> np.ndarray:
        return np.unique(self.encode(cloud)[1])


@dataclass
class Classifier:
    params: dict[str, np.ndarray]
    point_widths: tuple[int, ...]
    head_widths: tuple[int, ...]
    num_classes: int
    seed: int
    frozen: bool = False

    @classmethod
    def create(cls, num_classes: int, point_widths=(32, 64, 128), head_widths=(64,), seed: int = 0) -> "Classifier":
        point_widths, head_widths = tuple(point_widths), tuple(head_widths)
        rng = np.random.default_rng(seed)
        params = _init_layers(rng, (3,) + point_widths, "pt")
        params.update(_init_layers(rng, (point_widths[-1],) + head_widths + (num_classes,), "head"))
        return cls(params, point_widths, head_widths, num_classes, seed)

    def digest(self) -> str:
        return params_digest(self.params)

    def logits_graph(self, x: ad.Node, P: Optional[dict[str, ad.Node]] = None, groups: int = 1) -> ad.Node:
        if P is None:
            P = _nodes(x.tape, self.params, trainable=False)
        h = x
        for i in range(len(self.point_widths)):
            h = ad.relu(ad.affine(h, P[f"pt{i}.W"], P[f"pt{i}.b"]))
        h, _ = ad.maxpool_points(h, groups)
        last = len(self.head_widths)
        for i in range(last + 1):
            h = ad.affine(h, P[f"head{i}.W"], P[f"head{i}.b"])
            if i < last:
                h = ad.relu(h)
        return h

    def logits(self, cloud: CloudLike) -> np.ndarray:
        tape = ad.Tape()
        return self.logits_graph(tape.const(as_points(cloud))).value.reshape(-1)

    def predict(self, cloud: CloudLike) -> int:
        # argmax returns the first maximal entry, i.e. the lower class id on ties
        return int(np.argmax(self.logits(cloud)))


# ---------------------------------------------------------------------------
# checkpoints

Model = Union[AEModel, Classifier]


def _meta(model: Model) -> dict:
    if isinstance(model, AEModel):
        return {
            "kind": "autoencoder",
            "encoder_widths": list(model.encoder_widths),
            "decoder_widths": list(model.decoder_widths),
            "m": model.m,
            "n": model.n,
            "seed": model.seed,
            "width_factor": model.width_factor,
            "frozen": model.frozen,
        }
    return {
        "kind": "classifier",
        "point_widths": list(model.point_widths),
        "head_widths": list(model.head_widths),
        "num_classes": model.num_classes,
        "seed": model.seed,
        "frozen": model.frozen,
    }


def save_checkpoint(model: Model, path: Union[str, Path]) -> None:
    meta = dict(_meta(model), format_version=CHECKPOINT_VERSION)
    meta["shapes"] = {k: list(v.shape) for k, v in model.params.items()}
    buf = io.BytesIO()
    np.savez(buf, __meta__=np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8), **model.params)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path: Union[str, Path], expect_n: Optional[int] = None) -> Model:
    try:
        with np.load(Path(path), allow_pickle=False) as data:
            arrays = {k: data[k] for k in data.files}
    except FileNotFoundError:
        raise
    except (zipfile.BadZipFile, ValueError, OSError, EOFError, KeyError) as exc:
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from exc
    if "__meta__" not in arrays:
        raise CheckpointError(f"{path}: missing metadata record")
    meta = json.loads(arrays.pop("__meta__").tobytes().decode())
    if meta.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: format version {meta.get('format_version')} != {CHECKPOINT_VERSION}")
    if set(meta["shapes"]) != set(arrays):
        raise CheckpointError(f"{path}: parameter names do not match the recorded shapes")
    for k, shape in meta["shapes"].items():
        if list(arrays[k].shape) != shape:
            raise CheckpointError(f"{path}: parameter {k} has shape {arrays[k].shape}, expected {shape}")
    if meta["kind"] == "autoencoder":
        model = AEModel(
            arrays,
            tuple(meta["encoder_widths"]),
            tuple(meta["decoder_widths"]),
            meta["n"],
            meta["seed"],
            meta["width_factor"],
            meta["frozen"],
        )
        expected = _layer_shapes((3,) + model.encoder_widths, "enc")
        expected.update(_layer_shapes((model.m,) + model.decoder_widths + (3 * model.n,), "dec"))
        if expect_n is not None and model.n != expect_n:
            raise CheckpointError(f"{path}: checkpoint has n={model.n}, experiment expects n={expect_n}")
    elif meta["kind"] == "classifier":
        model = Classifier(
            arrays, tuple(meta["point_widths"]), tuple(meta["head_widths"]), meta["num_classes"], meta["seed"], meta["frozen"]
        )
        expected = _layer_shapes((3,) + model.point_widths, "pt")
        expected.update(_layer_shapes((model.point_widths[-1],) + model.head_widths + (model.num_classes,), "head"))
    else:
        raise CheckpointError(f"{path}: unknown model kind {meta['kind']!r}")
    actual = {k: tuple(v.shape) for k, v in arrays.items()}
    if actual != expected:
        raise CheckpointError(f"{path}: parameter shapes inconsistent with the recorded architecture")
    return model


def _layer_shapes(sizes, prefix) -> dict[str, tuple]:
    out = {}
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        out[f"{prefix}{i}.W"] = (a, b)
        out[f"{prefix}{i}.b"] = (b,)
    return out
