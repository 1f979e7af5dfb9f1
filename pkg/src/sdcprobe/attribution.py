"""Attribution scores that drive importance sampling of fault sites.

Two attribution families, one per fault target:

  neuron_output  layer conductance: contribution of each element of a
                 layer's output to the predicted-class logit, integrated
                 along the straight path from a baseline input,
                 Cond[e] = sum_i (x_i - x'_i) * integral_0^1 dF/dy_e * dy_e/dx_i dalpha.
                 The integrand factors into a reverse-mode gradient
                 (dF/dy_e at x_alpha) times a forward-mode directional
                 derivative (J dx at x_alpha), so one backward pass plus one
                 JVP per integration step covers every layer at once.

  neuron_weight  signed gradient sum: score_j = |sum_i dF(x_i)/dw_j| over N
                 inputs, the sum taken before the absolute value, so inputs
                 pulling a weight in opposite directions cancel.

F is the predicted-class logit per input (configurable to the true class).
Scores are published nonnegative, finite, one flat float32 buffer per layer.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataFormatError, UsageError
from .nnet import ComputationGraph, model_checksum
from .nnet.training import predict

TARGET_KINDS = ("neuron_output", "neuron_weight")
ATTRIBUTION_MAGIC = b"ISAT"
ATTRIBUTION_VERSION = 1


@dataclass
class Baseline:
    kind: str                 # zeros | dataset_mean
    tensor: np.ndarray        # per-sample model input shape

    def __post_init__(self):
        self.tensor = np.asarray(self.tensor, dtype=np.float32)


def make_baseline(kind, model, dataset=None) -> Baseline:
    if kind == "zeros":
        return Baseline("zeros", np.zeros(model.input_shape, dtype=np.float32))
    if kind == "dataset_mean":
        if dataset is None:
            raise ConfigError("dataset_mean baseline needs a dataset")
        return Baseline("dataset_mean", dataset.images.mean(axis=0))
    raise ConfigError(f"unknown baseline kind {kind!r}")


@dataclass
class AttributionConfig:
    target_kind: str
    steps: int = 32                 # integration steps M (neuron_output)
    sample_count: int | None = None  # N inputs; None = full dataset
    baseline: str = "zeros"
    seed: int = 0
    scalarization: str = "predicted"  # or "true_class"

    def __post_init__(self):
        if self.target_kind not in TARGET_KINDS:
            raise ConfigError(f"target_kind must be one of {TARGET_KINDS}, got {self.target_kind!r}")
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if self.scalarization not in ("predicted", "true_class"):
            raise ConfigError(f"unknown scalarization {self.scalarization!r}")


@dataclass
class AttributionMap:
    target_kind: str
    scores: dict[int, np.ndarray]   # layer_id -> flat float32 scores
    model_checksum: str
    seed: int = 0
    steps: int = 0
    sample_count: int = 0
    baseline_kind: str = "zeros"

    def __post_init__(self):
        if self.target_kind not in TARGET_KINDS:
            raise ConfigError(f"bad target_kind {self.target_kind!r}")
        clean = {}
        for lid, arr in self.scores.items():
            arr = np.asarray(arr, dtype=np.float32).reshape(-1)
            if not np.isfinite(arr).all() or (arr < 0).any():
                raise UsageError(f"layer {lid} attribution scores must be finite and >= 0")
            clean[int(lid)] = arr
        self.scores = clean

    def total_elements(self):
        return sum(len(v) for v in self.scores.values())


def _scalarize_classes(model, images, labels, scalarization):
    if scalarization == "true_class":
        return np.asarray(labels, dtype=np.int64)
    preds, _ = predict(model, images)
    return preds


def conductance_components(model, images, baseline: Baseline, steps,
                           classes=None, batch_size=128):
    """Signed per-sample conductance for every layer.

    Returns dict layer_id -> float64 [N, element_count].  ``classes`` fixes
    the scalarized output per sample; default is the clean-run prediction.
    """
    images = np.asarray(images, dtype=np.float32)
    if baseline.tensor.shape != model.input_shape:
        raise ConfigError(f"baseline shape {baseline.tensor.shape} != input {model.input_shape}")
    n = images.shape[0]
    if classes is None:
        classes = predict(model, images)[0]
    shapes = model.output_shapes()
    out = {lid: np.zeros((n, int(np.prod(s))), dtype=np.float64)
           for lid, s in enumerate(shapes)}
    x_prime = baseline.tensor[None]
    for lo in range(0, n, batch_size):
        xb = images[lo:lo + batch_size]
        cb = classes[lo:lo + batch_size]
        nb = xb.shape[0]
        dx = xb - x_prime
        for m in range(steps):
            alpha = (m + 0.5) / steps
            xa = (x_prime + alpha * dx).astype(np.float32)
            g = ComputationGraph()
            logits, acts = model.forward_graph(g, xa)
            loss = g.sum(g.pick_class_logits(logits, cb))
            g.backward(loss)
            _, tans = model.jvp(xa, dx)
            for lid in range(len(model.layers)):
                grad = acts[lid].grad
                if grad is None:
                    continue
                term = grad.astype(np.float64) * tans[lid].astype(np.float64)
                out[lid][lo:lo + nb] += term.reshape(nb, -1) / steps
    for p in model.parameters():
        p.zero_grad()  # backward also touched parameter grads; leave none behind
    return out


def conductance(model, layer_id, images, baseline: Baseline, steps) -> np.ndarray:
    """Per-element scores for one layer: mean over inputs of |conductance|."""
    if not 0 <= layer_id < len(model.layers):
        raise UsageError(f"layer id {layer_id} out of range")
    comps = conductance_components(model, images, baseline, steps)
    return np.abs(comps[layer_id]).mean(axis=0).astype(np.float32)


def weight_attribution_signed(model, layer_id, images, classes=None,
                              batch_size=256) -> np.ndarray:
    """Signed gradient sum over inputs for one layer's weight, float64 flat."""
    if not 0 <= layer_id < len(model.layers):
        raise UsageError(f"layer id {layer_id} out of range")
    layer = model.layers[layer_id]
    weight = getattr(layer, "weight", None)
    if weight is None:
        raise UsageError(f"layer {layer_id} ({layer.kind}) has no weights to attribute")
    images = np.asarray(images, dtype=np.float32)
    if classes is None:
        classes = predict(model, images)[0]
    acc = np.zeros(weight.data.size, dtype=np.float64)
    for lo in range(0, images.shape[0], batch_size):
        xb = images[lo:lo + batch_size]
        cb = classes[lo:lo + batch_size]
        weight.zero_grad()
        g = ComputationGraph()
        logits, _ = model.forward_graph(g, xb)
        loss = g.sum(g.pick_class_logits(logits, cb))
        g.backward(loss)
        acc += weight.grad.astype(np.float64).reshape(-1)
    for p in model.parameters():
        p.zero_grad()
    return acc


def weight_attribution(model, layer_id, images, classes=None) -> np.ndarray:
    """score_j = |sum_i dF(x_i)/dw_j|, absolute value applied after the sum."""
    return np.abs(weight_attribution_signed(model, layer_id, images, classes)
                  ).astype(np.float32)


def eligible_layers(model, target_kind):
    if target_kind == "neuron_output":
        # reshape-only layers alias upstream values (or raw input pixels),
        # so they contribute no neuron outputs of their own
        return [lid for lid, layer in enumerate(model.layers) if layer.computes]
    if target_kind == "neuron_weight":
        return model.weight_layer_ids()
    raise ConfigError(f"bad target_kind {target_kind!r}")


def attribute_all(model, dataset, config: AttributionConfig) -> AttributionMap:
    """Attribution scores for every eligible layer; deterministic given seed."""
    n_total = len(dataset.labels)
    if n_total == 0:
        raise UsageError("cannot attribute over an empty dataset")
    if config.sample_count is None or config.sample_count >= n_total:
        idx = np.arange(n_total)
    else:
        rng = np.random.default_rng(config.seed)
        idx = rng.permutation(n_total)[:config.sample_count]
    images = dataset.images[idx]
    classes = _scalarize_classes(model, images, dataset.labels[idx], config.scalarization)

    scores: dict[int, np.ndarray] = {}
    if config.target_kind == "neuron_output":
        baseline = make_baseline(config.baseline, model, dataset)
        comps = conductance_components(model, images, baseline, config.steps,
                                       classes=classes)
        for lid in eligible_layers(model, "neuron_output"):
            scores[lid] = np.abs(comps[lid]).mean(axis=0).astype(np.float32)
    else:
        for lid in eligible_layers(model, "neuron_weight"):
            scores[lid] = np.abs(
                weight_attribution_signed(model, lid, images, classes)
            ).astype(np.float32)
    return AttributionMap(
        target_kind=config.target_kind,
        scores=scores,
        model_checksum=model_checksum(model),
        seed=config.seed,
        steps=config.steps if config.target_kind == "neuron_output" else 0,
        sample_count=len(idx),
        baseline_kind=config.baseline if config.target_kind == "neuron_output" else "",
    )


# Attribution file: magic "ISAT" | version u32 | target_kind u32 |
# checksum length u32 + ascii hex | seed i64 | steps u32 | sample count u32 |
# baseline length u32 + ascii | layer count u32 | per layer: id u32,
# element count u32, float32 scores (little-endian).

def save_attribution(amap: AttributionMap, path):
    out = [ATTRIBUTION_MAGIC, struct.pack("<I", ATTRIBUTION_VERSION)]
    out.append(struct.pack("<I", TARGET_KINDS.index(amap.target_kind)))
    ck = amap.model_checksum.encode("ascii")
    out.append(struct.pack("<I", len(ck)) + ck)
    out.append(struct.pack("<q", amap.seed))
    out.append(struct.pack("<II", amap.steps, amap.sample_count))
    bl = amap.baseline_kind.encode("ascii")
    out.append(struct.pack("<I", len(bl)) + bl)
    out.append(struct.pack("<I", len(amap.scores)))
    for lid in sorted(amap.scores):
        arr = amap.scores[lid]
        out.append(struct.pack("<II", lid, arr.size))
        out.append(arr.astype("<f4").tobytes())
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(b"".join(out))
    os.replace(tmp, path)


def load_attribution(path) -> AttributionMap:
    with open(path, "rb") as fh:
        buf = fh.read()
    offset = 0

    def take(n, what):
        nonlocal offset
        if offset + n > len(buf):
            raise DataFormatError(
                f"{path}: truncated reading {what} at offset {offset}")
        chunk = buf[offset:offset + n]
        offset += n
        return chunk

    magic = take(4, "magic")
    if magic != ATTRIBUTION_MAGIC:
        raise DataFormatError(
            f"{path}: expected magic {ATTRIBUTION_MAGIC!r} at offset 0, got {magic!r}")
    version = struct.unpack("<I", take(4, "version"))[0]
    if version != ATTRIBUTION_VERSION:
        raise DataFormatError(f"{path}: unsupported attribution version {version}")
    kind_tag = struct.unpack("<I", take(4, "target_kind"))[0]
    if kind_tag >= len(TARGET_KINDS):
        raise DataFormatError(f"{path}: unknown target_kind tag {kind_tag}")
    cklen = struct.unpack("<I", take(4, "checksum length"))[0]
    checksum = take(cklen, "checksum").decode("ascii")
    seed = struct.unpack("<q", take(8, "seed"))[0]
    steps, n_samples = struct.unpack("<II", take(8, "steps/samples"))
    bllen = struct.unpack("<I", take(4, "baseline length"))[0]
    baseline_kind = take(bllen, "baseline kind").decode("ascii")
    layer_count = struct.unpack("<I", take(4, "layer count"))[0]
    scores = {}
    for _ in range(layer_count):
        lid, count = struct.unpack("<II", take(8, "layer header"))
        raw = take(4 * count, f"layer {lid} scores")
        scores[lid] = np.frombuffer(raw, dtype="<f4").astype(np.float32)
    if offset != len(buf):
        raise DataFormatError(f"{path}: trailing bytes at offset {offset}")
    return AttributionMap(target_kind=TARGET_KINDS[kind_tag], scores=scores,
                          model_checksum=checksum, seed=seed, steps=steps,
                          sample_count=n_samples, baseline_kind=baseline_kind)
