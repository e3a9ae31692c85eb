"""End-to-end detector: encoder, graph assembly, both branches, training.

A forward pass patchifies the clip, encodes patches to d-dim embeddings,
builds the clip graph from the detached embeddings, adds the negative
differential edges, and runs two branches: spectral (eigenbasis of the
nonnegative graph, learned per-eigenvalue gains, filter, mean-pool) and
spatial (temporal concat, consistency + inconsistency GAT, fusion). The
pooled branch outputs concatenate into Z and a head maps Z to 2 logits.

Graph topology and the eigenbasis are recomputed per clip per forward
but excluded from gradients; `build_structure` / `forward_with_structure`
split exposes that boundary, which is also what the end-to-end finite
difference check exercises.
"""

from __future__ import annotations

import csv
import hashlib
import json
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import differential, gat, spectral
from .graphs import VideoGraph, patchify, unified_graph
from .rng import stream
from .synth import FrameSequence, LabeledClip
from .utils import parallel_map

CHECKPOINT_MAGIC = b"SSTG0001"
ENCODERS = ("affine", "conv")
_CONV_KERNEL = 3
_CONV_STRIDE = 2


@dataclass(frozen=True)
class TrainConfig:
    patch_size: int = 32
    tau_s: float = 0.6
    tau_t: float = 0.6
    tile: int = 2
    dim: int = 64
    filter_hidden: int = 16
    conv_channels: int = 8
    channels: int = 1
    lr: float = 1e-4
    batch_size: int = 16
    epochs: int = 30
    seed: int = 0
    eps: float = 1e-4
    leaky_slope: float = 0.2
    laplacian_scope: str = "spatial_plus_positive_temporal"
    encoder: str = "affine"
    use_spectral: bool = True
    use_differential: bool = True
    use_temporal_mlp: bool = True
    tie_gat: bool = True        # share W and a across both passes
    node_logits: bool = False

    def __post_init__(self):
        if not (0.0 <= self.tau_s <= 1.0 and 0.0 <= self.tau_t <= 1.0):
            raise ValueError("thresholds must lie in [0, 1]")
        for name in ("patch_size", "tile", "dim", "batch_size", "epochs",
                     "filter_hidden", "conv_channels", "channels"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.encoder not in ENCODERS:
            raise ValueError(f"unknown encoder {self.encoder!r}")
        if self.laplacian_scope not in spectral.LAPLACIAN_SCOPES:
            raise ValueError(f"unknown laplacian scope {self.laplacian_scope!r}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


def config_hash(config: TrainConfig) -> str:
    blob = json.dumps(config.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


# "parity" scales d toward the published model size while staying well
# under it; "toy" is the finite-difference check scale.
PRESETS = {
    "desk": {},
    "parity": {"dim": 256},
    "toy": {"patch_size": 2, "dim": 8, "filter_hidden": 4, "batch_size": 2,
            "epochs": 2},
}


def preset_config(name, **overrides) -> TrainConfig:
    base = dict(PRESETS[name])
    base.update(overrides)
    return TrainConfig(**base)


@dataclass
class ModelParams:
    """All trainable tensors, in the fixed order used by checkpoints."""

    tensors: dict

    def named(self):
        return self.tensors

    def __getitem__(self, name) -> ad.Tensor:
        return self.tensors[name]

    def count(self):
        return sum(t.data.size for t in self.tensors.values())

    def copy(self):
        return ModelParams({k: ad.parameter(v.data.copy())
                            for k, v in self.tensors.items()})

    @property
    def filter_mlp(self):
        return spectral.FilterMlp(*(self.tensors[k] for k in (
            "filter.w1", "filter.b1", "filter.w2", "filter.b2",
            "filter.w3", "filter.b3")))

    @property
    def gat(self):
        return gat.GatParams(self.tensors["gat.weight"], self.tensors["gat.attention"])

    @property
    def gat_second(self):
        """Inconsistency-pass layer: its own weights when untied."""
        if "gat2.weight" in self.tensors:
            return gat.GatParams(self.tensors["gat2.weight"],
                                 self.tensors["gat2.attention"])
        return self.gat


def _glorot(rng, shape):
    fan_in = shape[0] if len(shape) > 1 else shape[0]
    return rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=shape)


# pixel-to-pixel deltas in [0,1] clips sit near 0.05, so unit-norm
# difference kernels would respond two decades below the dense rows;
# this gain standardizes the two feature groups at init
_DIFF_GAIN = 8.0


def _difference_kernel(rng):
    kern = rng.normal(size=(2, 2))
    kern -= kern.mean()
    return _DIFF_GAIN * kern / np.linalg.norm(kern)


def _affine_encoder_init(rng, patch, channels, dim):
    """Dense random projections mixed with random local-difference rows.

    Half the features are dense Gaussians; a quarter are a random 2x2
    zero-sum kernel at one random position; a quarter tile the same kind
    of kernel across every aligned 2x2 window (a random convolutional
    feature written as one affine row). The difference rows read local
    pixel interdependence directly, which a purely dense random init
    buries under global content variance; at the fixed low training rate
    the encoder never digs it out on its own.
    """
    p = patch * patch * channels
    w = rng.normal(0.0, 1.0 / np.sqrt(p), size=(p, dim))
    if patch < 2:
        return w

    def place(col, kern, a, b, ch, scale=1.0):
        for i in range(2):
            for j in range(2):
                col[((a + i) * patch + (b + j)) * channels + ch] += \
                    scale * kern[i, j]

    local = range(dim // 2, dim - dim // 4)
    tiled = range(dim - dim // 4, dim)
    for k in local:
        col = np.zeros(p)
        place(col, _difference_kernel(rng),
              int(rng.integers(0, patch - 1)), int(rng.integers(0, patch - 1)),
              int(rng.integers(0, channels)))
        w[:, k] = col
    n_windows = (patch // 2) ** 2
    for k in tiled:
        col = np.zeros(p)
        kern = _difference_kernel(rng)
        ch = int(rng.integers(0, channels))
        for a in range(0, patch - 1, 2):
            for b in range(0, patch - 1, 2):
                place(col, kern, a, b, ch, scale=1.0 / np.sqrt(n_windows))
        w[:, k] = col
    return w


def init_params(config: TrainConfig, seed=None, random_head=False) -> ModelParams:
    """Seeded initialisation; the head starts at zero so an untrained
    model emits uniform logits (initial loss is exactly ln 2).

    ``random_head`` draws the head too, which gradient checks need:
    a zero head blocks all upstream gradients, making the comparison
    vacuous.
    """
    seed = config.seed if seed is None else seed
    d, h = config.dim, config.filter_hidden
    p = config.patch_size * config.patch_size * config.channels

    def draw(name, shape):
        return ad.parameter(_glorot(stream(seed, "init", name), shape))

    def zeros(shape):
        return ad.parameter(np.zeros(shape))

    tensors = {}
    if config.encoder == "affine":
        tensors["encoder.weight"] = ad.parameter(_affine_encoder_init(
            stream(seed, "init", "encoder.weight"), config.patch_size,
            config.channels, d))
        tensors["encoder.bias"] = zeros((d,))
    else:
        k2 = _CONV_KERNEL * _CONV_KERNEL
        c1 = config.conv_channels
        tensors["encoder.conv1.weight"] = draw("encoder.conv1.weight",
                                               (k2 * config.channels, c1))
        tensors["encoder.conv1.bias"] = zeros((c1,))
        tensors["encoder.conv2.weight"] = draw("encoder.conv2.weight", (k2 * c1, d))
        tensors["encoder.conv2.bias"] = zeros((d,))
    tensors.update({
        "temporal.weight": draw("temporal.weight", (2 * d, d)),
        "temporal.bias": zeros((d,)),
        # filter biases are drawn, not zeroed: the spectrum contains an
        # exact 0 eigenvalue, and a zero bias would pin the LeakyReLU
        # input there right on its kink
        "filter.w1": draw("filter.w1", (1, h)),
        "filter.b1": draw("filter.b1", (h,)),
        "filter.w2": draw("filter.w2", (h, h)),
        "filter.b2": draw("filter.b2", (h,)),
        "filter.w3": draw("filter.w3", (h, 1)),
        "filter.b3": ad.parameter(np.ones((1,))),  # start near all-pass
        "gat.weight": draw("gat.weight", (d, d)),
        "gat.attention": draw("gat.attention", (2 * d,)),
    })
    if not config.tie_gat:
        tensors["gat2.weight"] = draw("gat2.weight", (d, d))
        tensors["gat2.attention"] = draw("gat2.attention", (2 * d,))
    tensors.update({
        "fusion.weight": draw("fusion.weight", (2 * d, d)),
        "fusion.bias": zeros((d,)),
        "head.weight": (draw("head.weight", (2 * d, 2)) if random_head
                        else zeros((2 * d, 2))),
        "head.bias": zeros((2,)),
    })
    return ModelParams(tensors)


# ---------------------------------------------------------------------------
# encoder


def _conv_out(size):
    return (size - _CONV_KERNEL) // _CONV_STRIDE + 1


def _im2col_indices(batch, height, width, channels):
    """Flat indices gathering k x k patches (stride 2, valid) from a
    (batch, height, width, channels) array."""
    oh, ow = _conv_out(height), _conv_out(width)
    if oh < 1 or ow < 1:
        raise ValueError("spatial extent too small for the conv encoder")
    b = np.arange(batch)[:, None, None, None, None, None]
    i = np.arange(oh)[None, :, None, None, None, None] * _CONV_STRIDE
    j = np.arange(ow)[None, None, :, None, None, None] * _CONV_STRIDE
    di = np.arange(_CONV_KERNEL)[None, None, None, :, None, None]
    dj = np.arange(_CONV_KERNEL)[None, None, None, None, :, None]
    ch = np.arange(channels)[None, None, None, None, None, :]
    flat = ((b * height + i + di) * width + j + dj) * channels + ch
    return flat.reshape(batch * oh * ow, -1), oh, ow


def encode_patches(patch_vectors, params: ModelParams, config: TrainConfig):
    """Map raw patch vectors (T, N, p) to an (M, d) embedding Tensor."""
    t, n, p = patch_vectors.shape
    flat = np.asarray(patch_vectors, dtype=np.float64).reshape(t * n, p)
    if config.encoder == "affine":
        out = ad.add(ad.matmul(ad.constant(flat), params["encoder.weight"]),
                     params["encoder.bias"])
        return ad.leaky_relu(out, config.leaky_slope)

    l, c = config.patch_size, config.channels
    m = t * n
    idx1, oh1, ow1 = _im2col_indices(m, l, l, c)
    cols = flat.reshape(-1)[idx1.reshape(-1)].reshape(idx1.shape)
    h1 = ad.add(ad.matmul(ad.constant(cols), params["encoder.conv1.weight"]),
                params["encoder.conv1.bias"])
    h1 = ad.leaky_relu(h1, config.leaky_slope)

    c1 = config.conv_channels
    idx2, oh2, ow2 = _im2col_indices(m, oh1, ow1, c1)
    cols2 = ad.gather(h1, idx2, (idx2.shape[0], idx2.shape[1]))
    h2 = ad.add(ad.matmul(cols2, params["encoder.conv2.weight"]),
                params["encoder.conv2.bias"])
    h2 = ad.leaky_relu(h2, config.leaky_slope)
    per_node = ad.reshape(h2, (m, oh2 * ow2, config.dim))
    return ad.mean(per_node, axis=1)


# ---------------------------------------------------------------------------
# forward


@dataclass
class ClipStructure:
    """Everything a forward pass treats as constant: the raw patches,
    the graph (with differential edges), and the spectral basis."""

    patches: np.ndarray
    graph: VideoGraph
    negative: differential.NegativeSpatialAdjacency | None
    basis: spectral.SpectralBasis | None
    consistency: gat.SignedAdjacency
    inconsistency: gat.SignedAdjacency


def build_structure(clip: FrameSequence, params: ModelParams,
                    config: TrainConfig) -> ClipStructure:
    pt = patchify(clip.pixels, config.patch_size)
    x = encode_patches(pt.vectors, params, config)
    emb = x.data.reshape(pt.frames, pt.patches_per_frame, -1)
    graph = unified_graph(emb, pt.grid_h, pt.grid_w,
                          config.tau_s, config.tau_t, config.eps)
    neg = None
    if config.use_differential:
        neg = differential.build_spatial_negative(graph, config.tile)
        graph = differential.add_temporal_negative(graph)
    basis = None
    if config.use_spectral:
        lap = spectral.graph_laplacian(graph, config.laplacian_scope)
        basis = spectral.eigendecompose(lap)
    return ClipStructure(
        patches=pt.vectors,
        graph=graph,
        negative=neg,
        basis=basis,
        consistency=gat.consistency_adjacency(graph),
        inconsistency=gat.inconsistency_adjacency(graph, neg),
    )


def forward_with_structure(structure: ClipStructure, params: ModelParams,
                           config: TrainConfig) -> ad.Tensor:
    """Differentiable path only; the structure is a constant input."""
    slope = config.leaky_slope
    x = encode_patches(structure.patches, params, config)
    m = x.data.shape[0]

    if config.use_spectral:
        gains = spectral.filter_gains(structure.basis.eigenvalues,
                                      params.filter_mlp, slope)
        filtered = spectral.apply_filter(x, structure.basis, gains)
        z_spectral = (filtered if config.node_logits
                      else spectral.pool_spectral(filtered))
    else:
        rows = m if config.node_logits else 1
        z_spectral = ad.constant(np.zeros((rows, config.dim)))

    if config.use_temporal_mlp:
        xp = differential.temporal_concat(x, structure.graph,
                                          params["temporal.weight"],
                                          params["temporal.bias"])
    else:
        xp = x
    h_c = gat.gat_forward(xp, structure.consistency, params.gat, slope)
    h_ic = gat.gat_forward(xp, structure.inconsistency, params.gat_second, slope)
    if config.node_logits:
        z_spatial = gat.spatial_fuse_nodes(h_c, h_ic, params["fusion.weight"],
                                           params["fusion.bias"])
    else:
        z_spatial = gat.spatial_fuse(h_c, h_ic, params["fusion.weight"],
                                     params["fusion.bias"])

    z = ad.concat([z_spatial, z_spectral], axis=1)
    logits = ad.add(ad.matmul(z, params["head.weight"]), params["head.bias"])
    if config.node_logits:
        logits = ad.mean(logits, axis=0, keepdims=True)
    return logits


def forward(clip: FrameSequence, params: ModelParams, config: TrainConfig):
    """Clip -> (1, 2) logits Tensor; returns the structure for reuse."""
    structure = build_structure(clip, params, config)
    return forward_with_structure(structure, params, config), structure


def clip_embedding(clip, params, config) -> np.ndarray:
    """The pooled pre-head feature vector Z (for external analysis)."""
    structure = build_structure(clip, params, config)
    slope = config.leaky_slope
    x = encode_patches(structure.patches, params, config)
    if config.use_spectral:
        gains = spectral.filter_gains(structure.basis.eigenvalues,
                                      params.filter_mlp, slope)
        z_spec = spectral.pool_spectral(
            spectral.apply_filter(x, structure.basis, gains))
    else:
        z_spec = ad.constant(np.zeros((1, config.dim)))
    xp = (differential.temporal_concat(x, structure.graph,
                                       params["temporal.weight"],
                                       params["temporal.bias"])
          if config.use_temporal_mlp else x)
    h_c = gat.gat_forward(xp, structure.consistency, params.gat, slope)
    h_ic = gat.gat_forward(xp, structure.inconsistency, params.gat_second, slope)
    z_spat = gat.spatial_fuse(h_c, h_ic, params["fusion.weight"],
                              params["fusion.bias"])
    return ad.concat([z_spat, z_spec], axis=1).data[0].copy()


def predict(clip, params, config) -> float:
    """Probability the clip is fake (softmax of the second logit)."""
    logits, _ = forward(clip, params, config)
    return float(ad.softmax_probs(logits.data)[0, 1])


def score_clips(clips, params, config, threads=1):
    def one(item):
        clip = item.clip if isinstance(item, LabeledClip) else item
        return predict(clip, params, config)
    return np.array(parallel_map(one, clips, threads))


# ---------------------------------------------------------------------------
# training


def _clip_loss_and_grads(clip, label, params, config, name_of):
    logits, _ = forward(clip, params, config)
    loss = ad.cross_entropy(logits, [label])
    leaves = loss.backward(write_grad=False)
    grads = {name_of[id(t)]: g for t, g in leaves.items()}
    return float(loss.data), float(ad.softmax_probs(logits.data)[0, 1]), grads


def train_clips(clips, config: TrainConfig, threads=1, log=None):
    """Mini-batch Adam over labeled clips; returns (params, history).

    History rows: (epoch, split, loss, accuracy). Deterministic given
    (seed, config, corpus): shuffling comes from a named stream and
    gradient reduction keeps clip order.
    """
    labels = np.array([c.label for c in clips], dtype=np.intp)
    if len(set(labels.tolist())) < 2:
        raise ValueError("training corpus must contain both classes")
    params = init_params(config)
    name_of = {id(t): n for n, t in params.named().items()}
    state = ad.AdamState(lr=config.lr)
    history = []
    n = len(clips)
    for epoch in range(config.epochs):
        order = stream(config.seed, "train", "shuffle", epoch).permutation(n)
        losses, scores, seen = [], np.empty(n), np.empty(n, dtype=np.intp)
        pos = 0
        for start in range(0, n, config.batch_size):
            batch = order[start:start + config.batch_size]
            results = parallel_map(
                lambda k: _clip_loss_and_grads(clips[k].clip, int(labels[k]),
                                               params, config, name_of),
                batch, threads)
            grads = {}
            for loss_k, score_k, g in results:
                if not np.isfinite(loss_k):
                    raise RuntimeError(
                        f"non-finite loss at epoch {epoch}, batch start {start}")
                losses.append(loss_k)
                for name, arr in g.items():
                    if name in grads:
                        grads[name] = grads[name] + arr
                    else:
                        grads[name] = arr
            grads = {k: v / len(batch) for k, v in grads.items()}
            ad.adam_step(params.named(), grads, state)
            for k, (_, score_k, _) in zip(batch, results):
                scores[pos], seen[pos] = score_k, k
                pos += 1
        acc = float(np.mean((scores >= 0.5) == (labels[seen] == 1)))
        mean_loss = float(np.mean(losses))
        history.append((epoch, "train", mean_loss, acc))
        if log:
            log(f"epoch {epoch}: loss {mean_loss:.4f} acc {acc:.3f}")
    return params, history


def write_history(path, history):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "split", "loss", "acc"])
        for row in history:
            writer.writerow(row)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, params: ModelParams, config: TrainConfig):
    """Magic, config echo (JSON), then named float64 parameter blocks."""
    blob = json.dumps(config.to_dict(), sort_keys=True,
                      separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(params.tensors)))
        for name, tensor in params.tensors.items():
            enc = name.encode()
            fh.write(struct.pack("<H", len(enc)))
            fh.write(enc)
            fh.write(struct.pack("<B", tensor.data.ndim))
            for dim in tensor.data.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(np.ascontiguousarray(tensor.data, dtype="<f8").tobytes())


def load_checkpoint(path):
    blob = Path(path).read_bytes()
    if blob[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: bad checkpoint magic {blob[:8]!r}")
    off = 8
    (cfg_len,) = struct.unpack_from("<I", blob, off)
    off += 4
    config = TrainConfig.from_dict(json.loads(blob[off:off + cfg_len]))
    off += cfg_len
    (count,) = struct.unpack_from("<I", blob, off)
    off += 4
    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off:off + name_len].decode()
        off += name_len
        (ndim,) = struct.unpack_from("<B", blob, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", blob, off) if ndim else ()
        off += 4 * ndim
        size = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(blob, dtype="<f8", count=size, offset=off)
        off += 8 * size
        tensors[name] = ad.parameter(data.reshape(shape).copy())
    return ModelParams(tensors), config
