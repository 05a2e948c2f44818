"""Parametric rib-cage phantom generator.

Phantoms are geometric idealizations, not anatomy: a soft-tissue torso,
a bumpy vertebra column, and up to twelve rib pairs rendered as tubes
around tilted elliptic arcs, each carrying exact per-structure ground
truth (instance labels, vertebra mask, analytic centerline curves,
distractor masks).  Everything is deterministic per seed.

Conventions: +x is the subject's right as stored (side "left" means
smaller x), +y is posterior, +z is superior.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import io, rng
from .postprocess import RibInstance
from .volume import BinaryMask, LabelMap, Volume

__all__ = [
    "PhantomConfig",
    "PhantomTruth",
    "generate_phantom",
    "crop_upper_half",
    "generate_dataset",
]

IMPLANT_HU = 2500
TABLE_HU = 350


@dataclass(frozen=True)
class PhantomConfig:
    dims: tuple[int, int, int] = (256, 256, 256)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    pairs: int = 12
    rib_radius_mm: float = 2.4
    cage_width_frac: float = 0.35  # rib ellipse x semi-axis / nx
    cage_depth_frac: float = 0.30  # rib ellipse y semi-axis / ny
    arc_start_frac: float = 0.11   # lateral offset of posterior rib ends / nx
    rib_tilt_scale: float = 1.0    # scales the per-pair sagittal drop
    size_jitter: float = 1.0       # scales the whole cage
    vertebra: bool = True
    vertebra_radius_mm: float = 9.0
    scapula: bool = False
    implant: bool = False
    table_bar: bool = False
    bone_hu: tuple[int, int] = (400, 1200)
    soft_hu: tuple[int, int] = (20, 80)
    noise_sigma_hu: float = 15.0
    missing_ribs: tuple[tuple[str, int], ...] = ()

    def __post_init__(self):
        if not 1 <= self.pairs <= 12:
            raise ValueError("pairs must be in [1, 12]")
        if self.rib_radius_mm <= 0 or self.vertebra_radius_mm <= 0:
            raise ValueError("radii must be positive")
        if self.bone_hu[0] > self.bone_hu[1] or self.soft_hu[0] > self.soft_hu[1]:
            raise ValueError("HU ranges must be ordered (lo, hi)")
        for side, pair in self.missing_ribs:
            if side not in ("left", "right") or not 1 <= pair <= self.pairs:
                raise ValueError(f"bad missing rib entry {(side, pair)}")

    def to_json_dict(self) -> dict:
        d = asdict(self)
        d["missing_ribs"] = [list(m) for m in self.missing_ribs]
        return d

    @staticmethod
    def from_json_dict(d: dict) -> "PhantomConfig":
        d = dict(d)
        d["dims"] = tuple(d["dims"])
        d["spacing"] = tuple(d["spacing"])
        d["bone_hu"] = tuple(d["bone_hu"])
        d["soft_hu"] = tuple(d["soft_hu"])
        d["missing_ribs"] = tuple((m[0], int(m[1])) for m in d["missing_ribs"])
        return PhantomConfig(**d)


@dataclass
class PhantomTruth:
    labels: LabelMap
    instances: list[RibInstance]
    vertebra: BinaryMask
    centerlines: dict[int, np.ndarray]  # instance id -> (M, 3) mm samples
    distractors: dict[str, BinaryMask] = field(default_factory=dict)
    rib_fraction: float = 0.0

    def pair_index_map(self) -> dict[int, int]:
        return {inst.instance_id: inst.pair_index for inst in self.instances}


def _ball_offsets(radius_mm: float, spacing) -> np.ndarray:
    """(K, 3) integer (dz, dy, dx) offsets within radius_mm of the origin."""
    sx, sy, sz = spacing
    rx = int(np.floor(radius_mm / sx))
    ry = int(np.floor(radius_mm / sy))
    rz = int(np.floor(radius_mm / sz))
    dz, dy, dx = np.meshgrid(np.arange(-rz, rz + 1), np.arange(-ry, ry + 1),
                             np.arange(-rx, rx + 1), indexing="ij")
    keep = (dx * sx) ** 2 + (dy * sy) ** 2 + (dz * sz) ** 2 <= radius_mm ** 2
    return np.stack([dz[keep], dy[keep], dx[keep]], axis=1)


def _stamp_curve(bits: np.ndarray, curve_vox: np.ndarray, offsets: np.ndarray):
    """Mark all voxels within the tube template along a voxel-space curve.

    Curve positions are corner-origin continuous coordinates, so the voxel
    containing position p is floor(p).
    """
    nz, ny, nx = bits.shape
    centers = np.unique(np.floor(curve_vox).astype(np.int64), axis=0)
    pts = centers[:, None, :] + offsets[None, :, :]  # (S, K, 3) as (z, y, x)
    pts = pts.reshape(-1, 3)
    ok = ((pts[:, 0] >= 0) & (pts[:, 0] < nz)
          & (pts[:, 1] >= 0) & (pts[:, 1] < ny)
          & (pts[:, 2] >= 0) & (pts[:, 2] < nx))
    pts = pts[ok]
    bits[pts[:, 0], pts[:, 1], pts[:, 2]] = True


def _rib_curve(cfg: PhantomConfig, pair: int, side: str) -> np.ndarray:
    """Analytic rib axis in continuous voxel coordinates, shape (M, 3) xyz."""
    nx, ny, nz = cfg.dims
    cx, cy, cz = nx / 2.0, ny / 2.0, nz / 2.0
    p = pair
    t = (p - 1) / max(cfg.pairs - 1, 1)
    width = 0.80 + 0.20 * np.sin(np.pi * (0.25 + 0.75 * t))
    a = cfg.cage_width_frac * nx * width * cfg.size_jitter
    b = cfg.cage_depth_frac * ny * width * cfg.size_jitter
    z_top = cz + 0.40 * nz
    z_p = z_top - t * 0.74 * nz
    tilt = (0.030 + 0.025 * t) * nz * cfg.rib_tilt_scale
    phi0 = np.arcsin(np.clip(cfg.arc_start_frac * nx / a, 0.0, 0.95))
    if p >= 11:
        span = np.pi * (0.30 if p == 11 else 0.24)
    else:
        span = np.pi * (0.52 + 0.10 * np.sin(np.pi * t))
    phi1 = phi0 + span
    sgn = -1.0 if side == "left" else 1.0

    arc_est = span * max(a, b) + tilt
    n_samples = max(32, int(np.ceil(arc_est / 0.35)))
    phi = np.linspace(phi0, phi1, n_samples)
    u = (phi - phi0) / (phi1 - phi0)
    curve = np.empty((n_samples, 3), dtype=np.float64)
    curve[:, 0] = cx + sgn * a * np.sin(phi)
    curve[:, 1] = cy + b * np.cos(phi)
    curve[:, 2] = z_p - tilt * u
    return curve


def _check_bounds(cfg: PhantomConfig, curve: np.ndarray, side: str, pair: int):
    nx, ny, nz = cfg.dims
    sx, sy, sz = cfg.spacing
    margin = np.array([cfg.rib_radius_mm / sx + 1.5,
                       cfg.rib_radius_mm / sy + 1.5,
                       cfg.rib_radius_mm / sz + 1.5])
    lo = curve.min(axis=0)
    hi = curve.max(axis=0)
    bounds = np.array([nx, ny, nz], dtype=np.float64)
    if np.any(lo < margin) or np.any(hi > bounds - margin):
        raise ValueError(f"rib ({side}, pair {pair}) exceeds the volume bounds")


def _vox_to_mm(curve_vox: np.ndarray, spacing) -> np.ndarray:
    # Corner-origin continuous coordinate v sits at physical v * spacing
    # (integer index i has its voxel center at (i + 0.5) * spacing).
    s = np.asarray(spacing, dtype=np.float64)
    return curve_vox * s


def generate_phantom(cfg: PhantomConfig, seed: int) -> tuple[Volume, PhantomTruth]:
    """Render one phantom volume plus its exact ground truth."""
    nx, ny, nz = cfg.dims
    sx, sy, sz = cfg.spacing
    cx, cy, cz = nx / 2.0, ny / 2.0, nz / 2.0
    g = rng.generator(seed)

    zi = np.arange(nz, dtype=np.float32) + 0.5
    yi = np.arange(ny, dtype=np.float32) + 0.5
    xi = np.arange(nx, dtype=np.float32) + 0.5

    # Torso: superellipsoid, column-like in z with rounded caps.
    ax, ay, az = 0.46 * nx, 0.42 * ny, 0.49 * nz
    fx = ((xi - cx) / ax) ** 2
    fy = ((yi - cy) / ay) ** 2
    fz = np.abs((zi - cz) / az) ** 8
    body = (fz[:, None, None] + fy[None, :, None] + fx[None, None, :]) <= 1.0

    # Vertebra: bumpy central column, posterior of center.
    vert_bits = np.zeros(body.shape, dtype=bool)
    if cfg.vertebra:
        y_sp = cy + 0.24 * ny
        z_lo = int(np.ceil(cz - 0.42 * nz))
        z_hi = int(np.floor(cz + 0.42 * nz))
        period = max(16.0, 0.09 * nz)
        dy2 = (yi - y_sp) ** 2
        dx2 = (xi - cx) ** 2
        rad2_grid = dy2[:, None] + dx2[None, :]
        for z in range(max(z_lo, 0), min(z_hi + 1, nz)):
            r_mm = cfg.vertebra_radius_mm * (1.0 + 0.22 * np.sin(2 * np.pi * z / period))
            r_vox = r_mm / sx  # column cross-section uses in-plane spacing
            vert_bits[z] = rad2_grid <= r_vox * r_vox

    # Ribs: tubes along elliptic arcs; truth labels and analytic curves.
    offsets = _ball_offsets(cfg.rib_radius_mm, cfg.spacing)
    labels = np.zeros(body.shape, dtype=np.int32)
    instances: list[RibInstance] = []
    centerlines: dict[int, np.ndarray] = {}
    missing = set((s, p) for s, p in cfg.missing_ribs)
    next_id = 1
    for pair in range(1, cfg.pairs + 1):
        for side in ("left", "right"):
            if (side, pair) in missing:
                continue
            curve = _rib_curve(cfg, pair, side)
            _check_bounds(cfg, curve, side, pair)
            rib_bits = np.zeros(body.shape, dtype=bool)
            curve_zyx = curve[:, ::-1]  # (x, y, z) -> (z, y, x)
            _stamp_curve(rib_bits, curve_zyx, offsets)
            rib_bits &= ~vert_bits  # truth instances stay disjoint
            count = int(rib_bits.sum())
            labels[rib_bits] = next_id
            instances.append(RibInstance(next_id, side, pair, count))
            centerlines[next_id] = _vox_to_mm(curve, cfg.spacing)
            next_id += 1

    # Distractors.
    distractors: dict[str, BinaryMask] = {}
    scap_bits = np.zeros(body.shape, dtype=bool)
    if cfg.scapula:
        scx, scy, scz = cx + 0.20 * nx, cy + 0.10 * ny, cz + 0.36 * nz
        sax, say, saz = 0.055 * nx, 0.024 * ny, 0.070 * nz
        gx = ((xi - scx) / sax) ** 2
        gy = ((yi - scy) / say) ** 2
        gz = ((zi - scz) / saz) ** 2
        scap_bits = (gz[:, None, None] + gy[None, :, None] + gx[None, None, :]) <= 1.0
        scap_bits &= ~(labels > 0)
        distractors["scapula"] = BinaryMask(cfg.dims, cfg.spacing, scap_bits)

    implant_bits = np.zeros(body.shape, dtype=bool)
    if cfg.implant:
        anchor_pair = min(6, cfg.pairs)
        curve = _rib_curve(cfg, anchor_pair, "right")
        mid = curve[int(0.55 * len(curve))]
        half = max(2, int(round(0.018 * nx)))
        ix, iy, iz = (int(round(mid[0])), int(round(mid[1])), int(round(mid[2])))
        implant_bits[max(iz - half, 0):iz + half,
                     max(iy - half, 0):iy + half,
                     max(ix - half, 0):ix + half] = True
        distractors["implant"] = BinaryMask(cfg.dims, cfg.spacing, implant_bits)

    table_bits = np.zeros(body.shape, dtype=bool)
    if cfg.table_bar:
        # posterior of the body with an air gap so it stays disconnected
        y_lo = int(np.ceil(cy + ay)) + 3
        y_hi = min(y_lo + 4, ny)
        if y_hi <= y_lo:
            raise ValueError("volume too small to place the table bar")
        table_bits[int(0.20 * nz):int(0.80 * nz),
                   y_lo:y_hi,
                   int(0.15 * nx):int(0.85 * nx)] = True
        distractors["table_bar"] = BinaryMask(cfg.dims, cfg.spacing, table_bits)

    # HU assembly; draw order is fixed so the stream is reproducible.
    vol = np.full(body.shape, -1000.0, dtype=np.float32)
    soft_lo, soft_hi = cfg.soft_hu
    n_body = int(body.sum())
    vol[body] = soft_lo + (soft_hi - soft_lo) * g.random(n_body, dtype=np.float32)
    bone_lo, bone_hi = cfg.bone_hu
    for struct_bits in (vert_bits, scap_bits, labels > 0):
        n_s = int(struct_bits.sum())
        if n_s:
            vol[struct_bits] = bone_lo + (bone_hi - bone_lo) * g.random(n_s, dtype=np.float32)
    if cfg.implant:
        vol[implant_bits] = IMPLANT_HU
    if cfg.table_bar:
        vol[table_bits] = TABLE_HU
    if cfg.noise_sigma_hu > 0:
        vol += g.normal(0.0, cfg.noise_sigma_hu, size=vol.shape).astype(np.float32)
    hu = np.clip(np.rint(vol), -32768, 32767).astype(np.int16)

    truth = PhantomTruth(
        labels=LabelMap(cfg.dims, cfg.spacing, labels),
        instances=instances,
        vertebra=BinaryMask(cfg.dims, cfg.spacing, vert_bits),
        centerlines=centerlines,
        distractors=distractors,
        rib_fraction=float((labels > 0).sum() / labels.size),
    )
    return Volume(cfg.dims, cfg.spacing, hu), truth


def crop_upper_half(obj):
    """Keep the superior half: slices with z >= nz/2 (dims updated)."""
    nz = obj.dims[2]
    if nz < 2:
        raise ValueError("need nz >= 2 to crop")
    start = (nz + 1) // 2
    new_dims = (obj.dims[0], obj.dims[1], nz - start)
    if isinstance(obj, Volume):
        return Volume(new_dims, obj.spacing, obj.data[start:].copy())
    if isinstance(obj, BinaryMask):
        return BinaryMask(new_dims, obj.spacing, obj.bits[start:].copy())
    if isinstance(obj, LabelMap):
        return LabelMap(new_dims, obj.spacing, obj.labels[start:].copy())
    raise TypeError(f"cannot crop {type(obj).__name__}")


def _vary_config(base: PhantomConfig, case_seed: int,
                 scapula_prob: float, implant_prob: float,
                 table_prob: float) -> PhantomConfig:
    """Per-case jitter of the phantom parameters (fixed draw order)."""
    vg = rng.generator(rng.derive(case_seed, 0xCF6))
    size = float(vg.uniform(0.92, 1.05))
    radius = float(base.rib_radius_mm * vg.uniform(0.92, 1.12))
    tilt = float(vg.uniform(0.80, 1.25))
    r_missing = float(vg.random())
    r_scap = float(vg.random())
    r_impl = float(vg.random())
    r_table = float(vg.random())
    missing: tuple[tuple[str, int], ...] = ()
    if r_missing < 0.07:
        missing = (("left", 11), ("right", 11), ("left", 12), ("right", 12))
    elif r_missing < 0.22:
        missing = (("left", 12), ("right", 12))
    return PhantomConfig(
        dims=base.dims, spacing=base.spacing, pairs=base.pairs,
        rib_radius_mm=radius, cage_width_frac=base.cage_width_frac,
        cage_depth_frac=base.cage_depth_frac, arc_start_frac=base.arc_start_frac,
        rib_tilt_scale=tilt, size_jitter=size,
        vertebra=base.vertebra, vertebra_radius_mm=base.vertebra_radius_mm,
        scapula=r_scap < scapula_prob, implant=r_impl < implant_prob,
        table_bar=r_table < table_prob,
        bone_hu=base.bone_hu, soft_hu=base.soft_hu,
        noise_sigma_hu=base.noise_sigma_hu, missing_ribs=missing)


def _truth_centerlines_json(case_id: str, truth: PhantomTruth) -> dict:
    ribs = []
    for inst in truth.instances:
        pts = truth.centerlines[inst.instance_id]
        seg = np.linalg.norm(np.diff(pts, axis=0), axis=1).sum() if len(pts) > 1 else 0.0
        ribs.append({
            "instance_id": inst.instance_id,
            "side": inst.side,
            "pair_index": inst.pair_index,
            "points_mm": [[float(c) for c in p] for p in pts],
            "arc_length_mm": float(seg),
        })
    return {"case_id": case_id, "ribs": ribs}


def generate_dataset(n_train: int, n_dev: int, n_test: int, base_seed: int,
                     out_dir, base_config: PhantomConfig | None = None,
                     scapula_prob: float = 0.5, implant_prob: float = 0.55,
                     table_prob: float = 0.35) -> dict:
    """Write a split dataset of varied phantoms plus a manifest.

    Case seeds are ``base_seed ^ case_index`` so splits stay disjoint and
    regeneration with the same arguments is byte-identical.
    """
    if min(n_train, n_dev, n_test) < 1:
        raise ValueError("each split needs at least one case")
    base = base_config or PhantomConfig()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    split_names = (["train"] * n_train + ["dev"] * n_dev + ["test"] * n_test)
    manifest = {
        "base_seed": int(base_seed),
        "base_config": base.to_json_dict(),
        "splits": {"train": [], "dev": [], "test": []},
        "cases": {},
    }
    for idx, split in enumerate(split_names):
        case_id = f"case_{idx:04d}"
        case_seed = (int(base_seed) ^ idx) & ((1 << 64) - 1)
        cfg = _vary_config(base, case_seed, scapula_prob, implant_prob, table_prob)
        volume, truth = generate_phantom(cfg, case_seed)
        case_dir = out_dir / case_id
        case_dir.mkdir(exist_ok=True)
        io.write_rvol(volume, case_dir / "volume.rvol")
        io.write_rvol(truth.labels, case_dir / "truth_labels.rvol")
        with open(case_dir / "centerlines.json", "w") as f:
            json.dump(_truth_centerlines_json(case_id, truth), f,
                      sort_keys=True, separators=(",", ":"))
        meta = {
            "case_id": case_id,
            "seed": case_seed,
            "split": split,
            "config": cfg.to_json_dict(),
            "instances": [{"id": i.instance_id, "side": i.side,
                           "pair_index": i.pair_index,
                           "voxel_count": i.voxel_count}
                          for i in truth.instances],
            "rib_fraction": truth.rib_fraction,
        }
        with open(case_dir / "meta.json", "w") as f:
            json.dump(meta, f, sort_keys=True, separators=(",", ":"))
        manifest["splits"][split].append(case_id)
        manifest["cases"][case_id] = {
            "seed": case_seed,
            "split": split,
            "instance_count": len(truth.instances),
            "rib_fraction": truth.rib_fraction,
        }
    with open(out_dir / "manifest.json", "w") as f:
        json.dump(manifest, f, sort_keys=True, separators=(",", ":"))
    return manifest
