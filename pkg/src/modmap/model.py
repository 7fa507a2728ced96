"""View-conditioned crossmodal mapping model.

Two small modulator MLPs turn (source view, target view) one-hot codes
into per-channel scale-and-shift parameters; two mapping MLPs translate
the modulated features of one modality into the other. The modulators
start as an exact identity (scale 1, shift 0) so training begins from
the unconditioned crossmodal mapping.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensorio
from .encoders import EncoderConfig, FeatureMap
from .nn import (
    DEFAULT_DTYPE,
    DenseLayer,
    Mlp,
    build_mlp,
    init_dense,
    mlp_backward,
    mlp_forward,
    rows_cosine_distance,
)

IMAGE_TO_DEPTH = "image_to_depth"
DEPTH_TO_IMAGE = "depth_to_image"

CHECKPOINT_MAGIC = b"MMAP"
CHECKPOINT_VERSION = 1

# Reference mapper widths; desk-scale widths are these scaled by the
# configured image channel count over 768.
_REF_HIDDEN_I2D = (768, 576, 384)
_REF_HIDDEN_D2I = (1152, 576, 384)
_REF_C_IMAGE = 768


class EmptyPairError(RuntimeError):
    """All positions of a view pair are background; the pair is skipped."""


@dataclass(frozen=True)
class ViewCode:
    """One-hot view identity, optionally extended with a class identity."""

    view_index: int
    n_views: int
    class_index: int | None = None
    n_classes: int = 0

    def __post_init__(self):
        if not (0 <= self.view_index < self.n_views):
            raise ValueError(f"view_index {self.view_index} outside 0..{self.n_views - 1}")
        if self.n_classes >= 2:
            if self.class_index is None or not (0 <= self.class_index < self.n_classes):
                raise ValueError("class_index required and in range when n_classes >= 2")

    def vector(self) -> np.ndarray:
        v = np.zeros(self.n_views, dtype=np.float64)
        v[self.view_index] = 1.0
        if self.n_classes >= 2:
            c = np.zeros(self.n_classes, dtype=np.float64)
            c[self.class_index] = 1.0
            v = np.concatenate([v, c])
        return v


@dataclass
class Modulator:
    """MLP from concatenated view codes to [scale; shift] of length 2*d."""

    net: Mlp
    feature_dim: int

    def __post_init__(self):
        if self.net.out_dim != 2 * self.feature_dim:
            raise ValueError("modulator output must be twice the feature dim")


@dataclass
class MappingNetwork:
    net: Mlp
    direction: str

    def __post_init__(self):
        if self.direction not in (IMAGE_TO_DEPTH, DEPTH_TO_IMAGE):
            raise ValueError(f"unknown direction {self.direction!r}")


@dataclass
class ModMapModel:
    phi_image: Modulator
    phi_depth: Modulator
    map_i2d: MappingNetwork
    map_d2i: MappingNetwork
    encoder_config: EncoderConfig
    n_views: int
    n_classes: int = 0

    def __post_init__(self):
        if self.phi_image.feature_dim != self.encoder_config.c_image:
            raise ValueError("image modulator dim != c_image")
        if self.phi_depth.feature_dim != self.encoder_config.c_depth:
            raise ValueError("depth modulator dim != c_depth")

    def named_parameters(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for prefix, net in (
            ("phi_image", self.phi_image.net),
            ("phi_depth", self.phi_depth.net),
            ("map_i2d", self.map_i2d.net),
            ("map_d2i", self.map_d2i.net),
        ):
            for k, layer in enumerate(net.layers):
                out.append((f"{prefix}.layer{k}.weight", layer.weight))
                out.append((f"{prefix}.layer{k}.bias", layer.bias))
        return out

    def parameters(self) -> list[np.ndarray]:
        return [p for _, p in self.named_parameters()]

    def structure(self) -> dict:
        """Architecture description; hashed into the checkpoint digest."""
        return {
            "n_views": self.n_views,
            "n_classes": self.n_classes,
            "patch_size": self.encoder_config.patch_size,
            "c_image": self.encoder_config.c_image,
            "c_depth": self.encoder_config.c_depth,
            "depth_offset": self.encoder_config.depth_offset,
            "depth_gain": self.encoder_config.depth_gain,
            "layers": {
                name: list(p.shape) for name, p in self.named_parameters()
            },
        }


def scaled_mapper_hidden(c_image: int) -> tuple[list[int], list[int]]:
    """Mapper hidden widths scaled from the reference configuration."""
    s = c_image / _REF_C_IMAGE
    i2d = [max(2, round(v * s)) for v in _REF_HIDDEN_I2D]
    d2i = [max(2, round(v * s)) for v in _REF_HIDDEN_D2I]
    return i2d, d2i


def _build_modulator(
    rng: np.random.Generator,
    in_dim: int,
    hidden: int,
    feature_dim: int,
    dtype,
) -> Modulator:
    first = init_dense(rng, in_dim, hidden, dtype)
    # Identity start: zero last-layer weights, bias = [1...1, 0...0] so the
    # produced scale is exactly 1 and shift exactly 0 for every input.
    w = np.zeros((2 * feature_dim, hidden), dtype=dtype)
    b = np.concatenate(
        [np.ones(feature_dim, dtype=dtype), np.zeros(feature_dim, dtype=dtype)]
    )
    return Modulator(net=Mlp([first, DenseLayer(w, b)]), feature_dim=feature_dim)


def build_model(
    encoder_config: EncoderConfig,
    n_views: int,
    n_classes: int = 0,
    seed: int = 0,
    modulator_hidden: int = 128,
    mapper_hidden_i2d: list[int] | None = None,
    mapper_hidden_d2i: list[int] | None = None,
    dtype=DEFAULT_DTYPE,
) -> ModMapModel:
    """Freshly initialized model for N views and optional class codes.

    n_classes <= 1 builds a class-agnostic model (a single class carries
    no information, so its code is dropped).
    """
    if n_views < 1:
        raise ValueError("n_views must be >= 1")
    n_classes = n_classes if n_classes >= 2 else 0
    ci, cd = encoder_config.c_image, encoder_config.c_depth
    if mapper_hidden_i2d is None or mapper_hidden_d2i is None:
        auto_i2d, auto_d2i = scaled_mapper_hidden(ci)
        mapper_hidden_i2d = mapper_hidden_i2d or auto_i2d
        mapper_hidden_d2i = mapper_hidden_d2i or auto_d2i
    code_dim = 2 * (n_views + n_classes)
    seqs = np.random.SeedSequence(seed).spawn(4)
    rngs = [np.random.default_rng(s) for s in seqs]
    return ModMapModel(
        phi_image=_build_modulator(rngs[0], code_dim, modulator_hidden, ci, dtype),
        phi_depth=_build_modulator(rngs[1], code_dim, modulator_hidden, cd, dtype),
        map_i2d=MappingNetwork(
            net=build_mlp(rngs[2], [ci, *mapper_hidden_i2d, cd], dtype),
            direction=IMAGE_TO_DEPTH,
        ),
        map_d2i=MappingNetwork(
            net=build_mlp(rngs[3], [cd, *mapper_hidden_d2i, ci], dtype),
            direction=DEPTH_TO_IMAGE,
        ),
        encoder_config=encoder_config,
        n_views=n_views,
        n_classes=n_classes,
    )


def _code_input(code_s: ViewCode, code_t: ViewCode) -> np.ndarray:
    return np.concatenate([code_s.vector(), code_t.vector()])[None, :]


def _modulate_forward(mod: Modulator, features: np.ndarray, code_s: ViewCode, code_t: ViewCode):
    features = np.asarray(features)
    if features.ndim != 2 or features.shape[1] != mod.feature_dim:
        raise ValueError(
            f"features shape {features.shape} incompatible with dim {mod.feature_dim}"
        )
    inp = _code_input(code_s, code_t).astype(features.dtype, copy=False)
    raw, net_cache = mlp_forward(mod.net, inp)
    gamma = raw[0, : mod.feature_dim]
    beta = raw[0, mod.feature_dim :]
    out = features * gamma + beta
    return out, (net_cache, gamma, features)


def _modulate_backward(mod: Modulator, cache, d_out: np.ndarray):
    net_cache, gamma, features = cache
    d_features = d_out * gamma
    d_gamma = (d_out * features).sum(axis=0)
    d_beta = d_out.sum(axis=0)
    d_raw = np.concatenate([d_gamma, d_beta])[None, :]
    net_grads, _ = mlp_backward(mod.net, net_cache, d_raw)
    return net_grads, d_features


def modulate(mod: Modulator, features: np.ndarray, code_s: ViewCode, code_t: ViewCode) -> np.ndarray:
    """Scale-and-shift of (positions, d) features conditioned on the view pair."""
    out, _ = _modulate_forward(mod, features, code_s, code_t)
    return out


def map_features(
    model: ModMapModel,
    modality_src: str,
    features_src: np.ndarray,
    code_s: ViewCode,
    code_t: ViewCode,
) -> np.ndarray:
    """Predicted opposite-modality features for the given view pair."""
    if modality_src == "image":
        mod, mapper = model.phi_image, model.map_i2d
    elif modality_src == "depth":
        mod, mapper = model.phi_depth, model.map_d2i
    else:
        raise ValueError(f"modality_src must be 'image' or 'depth', got {modality_src!r}")
    modulated, _ = _modulate_forward(mod, features_src, code_s, code_t)
    out, _ = mlp_forward(mapper.net, modulated)
    return out


def view_codes(model: ModMapModel, s: int, t: int, class_index: int | None = None):
    kwargs = dict(n_views=model.n_views, n_classes=model.n_classes, class_index=class_index)
    return ViewCode(s, **kwargs), ViewCode(t, **kwargs)


def pair_loss(
    model: ModMapModel,
    features,
    s: int,
    t: int,
    class_index: int | None = None,
):
    """Bidirectional cosine-distance loss for source view s, target view t.

    `features` is an InstanceFeatures. The loss is the mean over counted
    positions of the two directional distances; a position counts when
    both the source and the target patch hold any valid depth and
    neither direction is degenerate there. Background-source positions
    carry no information about the target and would only distort the
    shared mapper. Returns (loss, grads, counted) with grads aligned
    with model.named_parameters().
    """
    code_s, code_t = view_codes(model, s, t, class_index)
    fi_s = features.image_vectors(s)
    fd_s = features.depth_vectors(s)
    fi_t = features.image_vectors(t)
    fd_t = features.depth_vectors(t)
    fg_t = features.foreground(t) & features.foreground(s)

    mod_i, cache_mod_i = _modulate_forward(model.phi_image, fi_s, code_s, code_t)
    pred_d, cache_i2d = mlp_forward(model.map_i2d.net, mod_i)
    dist_id, grad_id, deg_id = rows_cosine_distance(pred_d, fd_t)

    mod_d, cache_mod_d = _modulate_forward(model.phi_depth, fd_s, code_s, code_t)
    pred_i, cache_d2i = mlp_forward(model.map_d2i.net, mod_d)
    dist_di, grad_di, deg_di = rows_cosine_distance(pred_i, fi_t)

    counted = fg_t & ~deg_id & ~deg_di
    n = int(counted.sum())
    if n == 0:
        raise EmptyPairError(f"pair ({s}, {t}) has no counted positions")
    scale = counted.astype(grad_id.dtype) / n
    loss = float((dist_id[counted].sum() + dist_di[counted].sum()) / n)

    g_i2d, d_mod_i = mlp_backward(model.map_i2d.net, cache_i2d, grad_id * scale[:, None])
    g_phi_i, _ = _modulate_backward(model.phi_image, cache_mod_i, d_mod_i)
    g_d2i, d_mod_d = mlp_backward(model.map_d2i.net, cache_d2i, grad_di * scale[:, None])
    g_phi_d, _ = _modulate_backward(model.phi_depth, cache_mod_d, d_mod_d)

    grads: list[np.ndarray] = []
    for layer_grads in (g_phi_i, g_phi_d, g_i2d, g_d2i):
        for dw, db in layer_grads:
            grads.append(dw)
            grads.append(db)
    return loss, grads, n


def save_checkpoint(path: Path | str, model: ModMapModel, seed: int = 0) -> None:
    """Versioned binary checkpoint: JSON header plus float32 blobs."""
    structure = model.structure()
    named = model.named_parameters()
    header = {
        "version": CHECKPOINT_VERSION,
        "seed": seed,
        "structure": structure,
        "digest": tensorio.digest(structure),
        "blobs": [{"name": name, "shape": list(p.shape)} for name, p in named],
    }
    header_bytes = tensorio.canonical_json(header)
    parts = [CHECKPOINT_MAGIC]
    parts.append(np.array([CHECKPOINT_VERSION, len(header_bytes)], dtype="<u4").tobytes())
    parts.append(header_bytes)
    for _, p in named:
        parts.append(np.ascontiguousarray(p, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path: Path | str) -> tuple[ModMapModel, dict]:
    """Rebuild a model from a checkpoint; verifies digest and shapes."""
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"not a checkpoint file: {path}")
    version, header_len = np.frombuffer(raw[4:12], dtype="<u4")
    if version > CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    import json

    header = json.loads(raw[12 : 12 + int(header_len)].decode("utf-8"))
    structure = header["structure"]
    if tensorio.digest(structure) != header["digest"]:
        raise ValueError("checkpoint digest mismatch: header corrupted or edited")
    cfg = EncoderConfig(
        patch_size=structure["patch_size"],
        c_image=structure["c_image"],
        c_depth=structure["c_depth"],
        depth_offset=structure.get("depth_offset", 0.0),
        depth_gain=structure.get("depth_gain", 1.0),
    )
    hidden_i2d = [shape[0] for name, shape in _layer_shapes(structure, "map_i2d")[:-1]]
    hidden_d2i = [shape[0] for name, shape in _layer_shapes(structure, "map_d2i")[:-1]]
    mod_hidden = _layer_shapes(structure, "phi_image")[0][1][0]
    model = build_model(
        cfg,
        n_views=structure["n_views"],
        n_classes=structure["n_classes"],
        modulator_hidden=mod_hidden,
        mapper_hidden_i2d=hidden_i2d,
        mapper_hidden_d2i=hidden_d2i,
    )
    offset = 12 + int(header_len)
    named = dict(model.named_parameters())
    for blob in header["blobs"]:
        shape = tuple(blob["shape"])
        count = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(raw, dtype="<f4", count=count, offset=offset)
        offset += count * 4
        target = named.get(blob["name"])
        if target is None or target.shape != shape:
            raise ValueError(f"checkpoint blob {blob['name']} does not match model")
        target[...] = data.reshape(shape)
    return model, header


def _layer_shapes(structure: dict, prefix: str) -> list[tuple[str, list[int]]]:
    items = [
        (name, shape)
        for name, shape in structure["layers"].items()
        if name.startswith(prefix + ".") and name.endswith(".weight")
    ]
    return sorted(items, key=lambda kv: kv[0])
