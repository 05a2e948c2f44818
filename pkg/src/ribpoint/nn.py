"""Set-abstraction point segmentation network.

Encoder: stacked levels of farthest point sampling, fixed-radius
grouping, a shared MLP over centered local coordinates (plus carried
features), and per-group max pooling.  Decoder: inverse-distance
weighted k-nearest interpolation back up the level stack with skip
concatenation and shared MLPs.  Head: pointwise linear to class logits.

There is no batch normalization; each linear layer carries a trainable
per-channel scale instead, which keeps inference independent of batch
composition.  Input features are coordinates only.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from . import kernels, rng
from .pointcloud import PointSet

__all__ = [
    "SAConfig",
    "NetworkConfig",
    "ModelParams",
    "default_network_config",
    "init_params",
    "forward",
    "infer",
    "EPS",
]

EPS = 1e-8


@dataclass(frozen=True)
class SAConfig:
    """One set-abstraction level."""

    npoint: int
    radius: float
    nsample: int
    mlp: tuple[int, ...]

    def __post_init__(self):
        if self.npoint < 1:
            raise ValueError("npoint must be >= 1")
        if not self.radius > 0:
            raise ValueError("radius must be positive")
        if self.nsample < 1:
            raise ValueError("nsample must be >= 1")
        if not self.mlp:
            raise ValueError("mlp widths must be non-empty")
        object.__setattr__(self, "mlp", tuple(int(w) for w in self.mlp))


@dataclass(frozen=True)
class NetworkConfig:
    sa_levels: tuple[SAConfig, ...]
    fp_levels: tuple[tuple[int, ...], ...]
    num_classes: int = 2
    fp_k: int = 3
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "sa_levels", tuple(self.sa_levels))
        object.__setattr__(self, "fp_levels",
                           tuple(tuple(int(w) for w in lvl) for lvl in self.fp_levels))
        if len(self.fp_levels) != len(self.sa_levels):
            raise ValueError("fp_levels must mirror sa_levels in count")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.fp_k < 1:
            raise ValueError("fp_k must be >= 1")

    def to_json_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_json_dict(d: dict) -> "NetworkConfig":
        sa = tuple(SAConfig(npoint=s["npoint"], radius=s["radius"],
                            nsample=s["nsample"], mlp=tuple(s["mlp"]))
                   for s in d["sa_levels"])
        return NetworkConfig(sa_levels=sa,
                             fp_levels=tuple(tuple(l) for l in d["fp_levels"]),
                             num_classes=d["num_classes"],
                             fp_k=d["fp_k"],
                             seed=d["seed"])


def default_network_config(seed: int = 0) -> NetworkConfig:
    return NetworkConfig(
        sa_levels=(
            SAConfig(npoint=1024, radius=0.1, nsample=32, mlp=(64, 64, 128)),
            SAConfig(npoint=256, radius=0.2, nsample=32, mlp=(128, 128, 256)),
            SAConfig(npoint=64, radius=0.4, nsample=32, mlp=(256, 256, 512)),
        ),
        fp_levels=((128, 128), (256, 128), (256, 256)),
        num_classes=2,
        fp_k=3,
        seed=seed,
    )


@dataclass
class ModelParams:
    """Named parameter tensors plus optimizer state and framing metadata."""

    params: dict[str, ad.Tensor]
    config: NetworkConfig
    norm_convention: str = "centroid-unit-ball"
    opt_m: dict[str, np.ndarray] = field(default_factory=dict)
    opt_v: dict[str, np.ndarray] = field(default_factory=dict)
    opt_step: int = 0

    def named(self) -> list[tuple[str, ad.Tensor]]:
        return sorted(self.params.items())

    def zero_grads(self):
        for p in self.params.values():
            p.grad = None

    def param_count(self) -> int:
        return sum(p.data.size for p in self.params.values())


def _init_linear(params, name, fan_in, fan_out, seed, dtype):
    g = rng.generator(seed)
    limit = 1.0 / np.sqrt(fan_in)
    w = g.uniform(-limit, limit, size=(fan_in, fan_out))
    params[f"{name}.w"] = ad.Tensor(w.astype(dtype), requires_grad=True)
    params[f"{name}.b"] = ad.Tensor(np.zeros(fan_out, dtype=dtype), requires_grad=True)
    params[f"{name}.s"] = ad.Tensor(np.ones(fan_out, dtype=dtype), requires_grad=True)


def init_params(cfg: NetworkConfig, dtype=np.float32) -> ModelParams:
    """Fan-in-scaled uniform weights, zero biases, unit scales; seeded."""
    params: dict[str, ad.Tensor] = {}
    layer = 0
    in_ch = 0  # coordinates only: level-0 features are empty
    skip_ch = [in_ch]
    for i, sa in enumerate(cfg.sa_levels):
        ch = in_ch + 3
        for j, width in enumerate(sa.mlp):
            _init_linear(params, f"sa{i}.mlp{j}", ch, width,
                         rng.derive(cfg.seed, layer), dtype)
            ch = width
            layer += 1
        in_ch = ch
        skip_ch.append(in_ch)
    prop_ch = in_ch
    for i in reversed(range(len(cfg.sa_levels))):
        ch = prop_ch + skip_ch[i]
        for j, width in enumerate(cfg.fp_levels[i]):
            _init_linear(params, f"fp{i}.mlp{j}", ch, width,
                         rng.derive(cfg.seed, layer), dtype)
            ch = width
            layer += 1
        prop_ch = ch
    g = rng.generator(rng.derive(cfg.seed, layer))
    limit = 1.0 / np.sqrt(prop_ch)
    w = g.uniform(-limit, limit, size=(prop_ch, cfg.num_classes))
    params["head.w"] = ad.Tensor(w.astype(dtype), requires_grad=True)
    params["head.b"] = ad.Tensor(np.zeros(cfg.num_classes, dtype=dtype), requires_grad=True)
    return ModelParams(params=params, config=cfg)


def _mlp(params: dict[str, ad.Tensor], prefix: str, widths, h: ad.Tensor) -> ad.Tensor:
    for j in range(len(widths)):
        h = ad.matmul(h, params[f"{prefix}.mlp{j}.w"])
        h = ad.add(h, params[f"{prefix}.mlp{j}.b"])
        h = ad.mul(h, params[f"{prefix}.mlp{j}.s"])
        h = ad.relu(h)
    return h


def _interp_weights(query: np.ndarray, ref: np.ndarray, k: int):
    idx, d2 = kernels.three_nn(query, ref, k)
    w = 1.0 / (np.sqrt(d2) + EPS)
    w = w / w.sum(axis=1, keepdims=True)
    return idx, w


def _forward_sample(model: ModelParams, xyz: np.ndarray, fps_seed: int,
                    fps_starts=None, chunk: int | None = None) -> ad.Tensor:
    cfg = model.config
    params = model.params
    n = xyz.shape[0]
    deepest = cfg.sa_levels[-1].npoint
    if n < deepest:
        raise ValueError(f"need at least {deepest} points, got {n}")

    xyz_levels = [xyz]
    feat_levels: list[ad.Tensor | None] = [None]
    cur_xyz, cur_feat = xyz, None
    for i, sa in enumerate(cfg.sa_levels):
        if fps_starts is not None:
            start = fps_starts[i] % cur_xyz.shape[0]
            fps_idx = kernels.farthest_point_sample(cur_xyz, sa.npoint, seed=start)
        else:
            fps_idx = kernels.farthest_point_sample(
                cur_xyz, sa.npoint, seed=rng.derive(fps_seed, i))
        new_xyz = cur_xyz[fps_idx]
        groups = kernels.ball_query(new_xyz, cur_xyz, sa.radius, sa.nsample)
        rel = (cur_xyz[groups] - new_xyz[:, None, :]).astype(xyz.dtype)
        if cur_feat is None:
            h = ad.Tensor(rel)
        else:
            h = ad.concat([ad.Tensor(rel), ad.gather_rows(cur_feat, groups)], axis=-1)
        h = _mlp(params, f"sa{i}", sa.mlp, h)
        cur_feat = ad.max_reduce(h, axis=1)
        cur_xyz = new_xyz
        xyz_levels.append(cur_xyz)
        feat_levels.append(cur_feat)

    prop = feat_levels[-1]
    for i in reversed(range(len(cfg.sa_levels))):
        query, ref = xyz_levels[i], xyz_levels[i + 1]
        if chunk is not None and i == 0 and query.shape[0] > chunk:
            return _decode_head_chunked(model, query, ref, prop, chunk)
        idx, w = _interp_weights(query, ref, cfg.fp_k)
        interp = ad.sum_reduce(
            ad.mul(ad.gather_rows(prop, idx), ad.Tensor(w[..., None].astype(xyz.dtype))),
            axis=1)
        skip = feat_levels[i]
        h = interp if skip is None else ad.concat([skip, interp], axis=-1)
        prop = _mlp(params, f"fp{i}", cfg.fp_levels[i], h)

    logits = ad.add(ad.matmul(prop, params["head.w"]), params["head.b"])
    return logits


def _decode_head_chunked(model: ModelParams, query, ref, prop, chunk) -> ad.Tensor:
    """Level-0 interpolation + MLP + head in point chunks (inference path).

    Per-point computation is independent, so chunking is exact.
    """
    cfg = model.config
    pieces = []
    for s in range(0, query.shape[0], chunk):
        q = query[s:s + chunk]
        idx, w = _interp_weights(q, ref, cfg.fp_k)
        interp = ad.sum_reduce(
            ad.mul(ad.gather_rows(prop, idx), ad.Tensor(w[..., None].astype(query.dtype))),
            axis=1)
        h = _mlp(model.params, "fp0", cfg.fp_levels[0], interp)
        piece = ad.add(ad.matmul(h, model.params["head.w"]), model.params["head.b"])
        pieces.append(piece.data)
    return ad.Tensor(np.concatenate(pieces, axis=0))


def forward(model: ModelParams, coords: np.ndarray, fps_seed: int | None = None,
            fps_starts=None, chunk: int | None = None):
    """Logits for (N, 3) -> (N, C) or batched (B, N, 3) -> (B, N, C).

    Batch items are processed independently, so identical samples yield
    identical logits regardless of batch composition.
    """
    coords = np.asarray(coords)
    if fps_seed is None:
        fps_seed = model.config.seed
    if coords.ndim == 2:
        return _forward_sample(model, coords, fps_seed, fps_starts, chunk)
    if coords.ndim == 3:
        outs = [_forward_sample(model, coords[b], fps_seed, fps_starts, chunk)
                for b in range(coords.shape[0])]
        return ad.Tensor(np.stack([o.data for o in outs])) if not outs[0].requires_grad \
            else _stack_batch(outs)
    raise ValueError(f"coords must be (N, 3) or (B, N, 3), got {coords.shape}")


def _stack_batch(outs: list[ad.Tensor]) -> ad.Tensor:
    data = np.stack([o.data for o in outs])
    out = ad.Tensor(data)
    out.requires_grad = True
    out._parents = tuple(outs)

    def bwd(g):
        for b, o in enumerate(outs):
            ad._accumulate(o, g[b])
    out._bwd = bwd
    return out


def infer(model: ModelParams, points: PointSet, fps_seed: int | None = None,
          chunk: int | None = 65536) -> tuple[np.ndarray, np.ndarray]:
    """Class predictions and softmax probabilities for a normalized point set.

    Large inputs are evaluated with chunked decoding, which is exact: the
    returned labels and probabilities match the unchunked path.
    """
    coords = points.coords.astype(np.float32)
    with ad.no_grad():
        logits = forward(model, coords, fps_seed=fps_seed, chunk=chunk)
    probs = ad.softmax(logits.data.astype(np.float64))
    labels = np.argmax(logits.data, axis=-1).astype(np.uint8)
    return labels, probs


def config_snapshot_json(model: ModelParams) -> str:
    """Canonical JSON snapshot stored in checkpoints."""
    snap = {
        "network": model.config.to_json_dict(),
        "norm_convention": model.norm_convention,
    }
    return json.dumps(snap, sort_keys=True, separators=(",", ":"))
