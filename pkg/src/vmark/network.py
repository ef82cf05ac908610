"""Sparse volumetric encoder-decoder for per-point soft-label logits.

Convolutions run directly on occupied voxels: for every kernel offset a
(gather, matmul, scatter-add) pass accumulates contributions between
voxels whose integer coordinates differ by that offset. A U-shaped
coordinate pyramid (stride-2 down, parent-gather up, skip concat) gives
multi-scale context. Voxel coordinates are anchored to their minimum
corner on entry, so translating the input by any whole number of voxels
leaves every output unchanged.

Runs on CPU tensors; float64 by default so finite-difference gradient
checks are meaningful.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .voxel import SparseVoxelGrid

_KEY_BITS = 21  # coordinate key packing, supports coords < 2^21


@dataclass
class NetworkConfig:
    """Architecture and preprocessing knobs (stored in checkpoints)."""

    n_markers: int
    voxel_size: float = 0.02
    channels: tuple = (16, 32, 64)
    blocks_per_level: int = 1
    seed: int = 0
    dtype: str = "float64"

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if self.n_markers < 1 or len(self.channels) < 1:
            raise ValueError("need at least one marker and one level")

    @property
    def levels(self) -> int:
        return len(self.channels)

    def torch_dtype(self):
        return {"float64": torch.float64, "float32": torch.float32}[self.dtype]

    def to_dict(self) -> dict:
        return {
            "n_markers": self.n_markers,
            "voxel_size": self.voxel_size,
            "channels": list(self.channels),
            "blocks_per_level": self.blocks_per_level,
            "seed": self.seed,
            "dtype": self.dtype,
        }


def _encode(coords: np.ndarray) -> np.ndarray:
    c = coords.astype(np.int64)
    return ((c[:, 0] << (2 * _KEY_BITS)) | (c[:, 1] << _KEY_BITS)) | c[:, 2]


def _lookup(sorted_keys: np.ndarray, queries: np.ndarray):
    """(found mask, index into sorted_keys) for each query key."""
    pos = np.searchsorted(sorted_keys, queries)
    pos_c = np.minimum(pos, len(sorted_keys) - 1)
    found = sorted_keys[pos_c] == queries
    return found, pos_c


_OFFSETS_3 = np.array([[i, j, k] for i in (-1, 0, 1) for j in (-1, 0, 1) for k in (-1, 0, 1)])
_OFFSETS_2 = np.array([[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)])


class GridContext:
    """Coordinate pyramid and kernel maps for one input coordinate set.

    Pure geometry (no parameters); built once per forward pass and
    reusable across repeated forwards on the same coordinates.
    """

    def __init__(self, coords: np.ndarray, levels: int):
        coords = np.asarray(coords, dtype=np.int64)
        coords = coords - coords.min(axis=0)  # anchor: integer-shift invariance
        # margin so that coords + offset stays within key range
        coords = coords + 1
        self.level_coords = [coords]
        for _ in range(levels - 1):
            self.level_coords.append(np.unique(self.level_coords[-1] // 2, axis=0))
        self.level_keys = [_encode(c) for c in self.level_coords]  # sorted (unique rows are lex-sorted)

        self.conv_maps = [self._stride1_maps(l) for l in range(levels)]
        self.down_maps = [self._down_maps(l) for l in range(levels - 1)]
        self.up_maps = [self._up_map(l) for l in range(levels - 1)]

    def n_voxels(self, level: int) -> int:
        return len(self.level_coords[level])

    def _stride1_maps(self, level: int):
        coords, keys = self.level_coords[level], self.level_keys[level]
        maps = []
        for off in _OFFSETS_3:
            if (off == 0).all():
                idx = torch.arange(len(coords))
                maps.append((idx, idx))
                continue
            found, pos = _lookup(keys, _encode(coords + off))
            out_idx = np.flatnonzero(found)
            maps.append((torch.from_numpy(out_idx), torch.from_numpy(pos[found])))
        return maps

    def _down_maps(self, level: int):
        fine_keys = self.level_keys[level]
        coarse = self.level_coords[level + 1]
        maps = []
        for off in _OFFSETS_2:
            found, pos = _lookup(fine_keys, _encode(coarse * 2 + off))
            out_idx = np.flatnonzero(found)
            maps.append((torch.from_numpy(out_idx), torch.from_numpy(pos[found])))
        return maps

    def _up_map(self, level: int):
        fine = self.level_coords[level]
        found, pos = _lookup(self.level_keys[level + 1], _encode(fine // 2))
        if not found.all():
            raise RuntimeError("voxel pyramid inconsistency: missing parent")
        parity = fine - (fine // 2) * 2
        parity_id = parity[:, 0] * 4 + parity[:, 1] * 2 + parity[:, 2]
        return torch.from_numpy(pos), torch.from_numpy(parity_id)


class SparseConv(nn.Module):
    """Gather-matmul-scatter convolution over precomputed offset maps."""

    def __init__(self, cin: int, cout: int, n_offsets: int, gen, dtype):
        super().__init__()
        std = (2.0 / (cin * n_offsets)) ** 0.5
        w = torch.randn(n_offsets, cin, cout, generator=gen, dtype=dtype) * std
        self.weight = nn.Parameter(w)
        self.bias = nn.Parameter(torch.zeros(cout, dtype=dtype))

    def forward(self, feats: torch.Tensor, maps, n_out: int) -> torch.Tensor:
        out = self.bias.unsqueeze(0).expand(n_out, -1).clone()
        for k, (out_idx, in_idx) in enumerate(maps):
            if len(out_idx) == 0:
                continue
            out = out.index_add(0, out_idx, feats[in_idx] @ self.weight[k])
        return out


class SparseUpsample(nn.Module):
    """Transposed stride-2 conv: each fine voxel gathers from its parent."""

    def __init__(self, cin: int, cout: int, gen, dtype):
        super().__init__()
        std = (2.0 / cin) ** 0.5
        self.weight = nn.Parameter(torch.randn(8, cin, cout, generator=gen, dtype=dtype) * std)
        self.bias = nn.Parameter(torch.zeros(cout, dtype=dtype))

    def forward(self, coarse: torch.Tensor, up_map) -> torch.Tensor:
        parent, parity = up_map
        gathered = coarse[parent]  # (V_fine, cin)
        # (V, cin) x per-parity weight; select weight per fine voxel
        w = self.weight[parity]  # (V, cin, cout)
        return torch.einsum("vi,vio->vo", gathered, w) + self.bias


class ResBlock(nn.Module):
    def __init__(self, channels: int, gen, dtype):
        super().__init__()
        self.conv1 = SparseConv(channels, channels, 27, gen, dtype)
        self.conv2 = SparseConv(channels, channels, 27, gen, dtype)

    def forward(self, x, maps, n):
        h = torch.relu(self.conv1(x, maps, n))
        h = self.conv2(h, maps, n)
        return torch.relu(x + h)


class VirtualMarkerNet(nn.Module):
    """U-shaped sparse encoder-decoder emitting one logit per marker."""

    def __init__(self, config: NetworkConfig):
        super().__init__()
        self.config = config
        dtype = config.torch_dtype()
        gen = torch.Generator().manual_seed(config.seed)
        ch = config.channels
        L = config.levels

        self.stem = SparseConv(1, ch[0], 27, gen, dtype)
        self.enc = nn.ModuleList(
            nn.ModuleList(ResBlock(ch[l], gen, dtype) for _ in range(config.blocks_per_level))
            for l in range(L)
        )
        self.down = nn.ModuleList(SparseConv(ch[l], ch[l + 1], 8, gen, dtype) for l in range(L - 1))
        self.up = nn.ModuleList(SparseUpsample(ch[l + 1], ch[l], gen, dtype) for l in range(L - 1))
        self.fuse = nn.ModuleList(SparseConv(2 * ch[l], ch[l], 27, gen, dtype) for l in range(L - 1))
        self.dec = nn.ModuleList(
            nn.ModuleList(ResBlock(ch[l], gen, dtype) for _ in range(config.blocks_per_level))
            for l in range(L - 1)
        )
        head_w = torch.randn(ch[0], config.n_markers, generator=gen, dtype=dtype)
        self.head_weight = nn.Parameter(head_w * (1.0 / ch[0]) ** 0.5)
        self.head_bias = nn.Parameter(torch.zeros(config.n_markers, dtype=dtype))

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def extra_repr(self) -> str:
        return f"markers={self.config.n_markers}, parameters={self.parameter_count()}"

    def voxel_logits(self, grid: SparseVoxelGrid, ctx: GridContext | None = None) -> torch.Tensor:
        """(V, S) logits for each occupied voxel."""
        cfg = self.config
        if abs(grid.voxel_size - cfg.voxel_size) > 1e-12:
            raise ValueError(
                f"grid voxel size {grid.voxel_size} does not match model {cfg.voxel_size}")
        ctx = ctx or GridContext(grid.coords, cfg.levels)
        dtype = cfg.torch_dtype()
        x = torch.as_tensor(grid.features, dtype=dtype)

        x = torch.relu(self.stem(x, ctx.conv_maps[0], ctx.n_voxels(0)))
        skips = []
        for l in range(cfg.levels):
            for block in self.enc[l]:
                x = block(x, ctx.conv_maps[l], ctx.n_voxels(l))
            if l < cfg.levels - 1:
                skips.append(x)
                x = torch.relu(self.down[l](x, ctx.down_maps[l], ctx.n_voxels(l + 1)))
        for l in range(cfg.levels - 2, -1, -1):
            x = self.up[l](x, ctx.up_maps[l])
            x = torch.cat([x, skips[l]], dim=1)
            x = torch.relu(self.fuse[l](x, ctx.conv_maps[l], ctx.n_voxels(l)))
            for block in self.dec[l]:
                x = block(x, ctx.conv_maps[l], ctx.n_voxels(l))
        return x @ self.head_weight + self.head_bias


def forward(model: VirtualMarkerNet, grid: SparseVoxelGrid) -> np.ndarray:
    """Per-point logits (S, N): voxel outputs broadcast to member points."""
    with torch.no_grad():
        vox = model.voxel_logits(grid)
    return vox.numpy()[grid.point_voxel].T.copy()


# ---------------------------------------------------------------------------
# Checkpoints: versioned header + architecture config + f32 parameter blobs

_CKPT_MAGIC = b"VMCK"
_CKPT_VERSION = 1


def save_checkpoint(model: VirtualMarkerNet, path):
    """Binary checkpoint: magic, version, config JSON, named f32 blobs."""
    cfg = json.dumps(model.config.to_dict()).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<II", _CKPT_VERSION, len(cfg)))
        f.write(cfg)
        params = list(model.named_parameters())
        f.write(struct.pack("<I", len(params)))
        for name, p in params:
            data = p.detach().numpy().astype("<f4")
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", data.ndim))
            f.write(struct.pack(f"<{data.ndim}I", *data.shape))
            f.write(np.ascontiguousarray(data).tobytes())


def load_checkpoint(path) -> VirtualMarkerNet:
    """Rebuild the model from a checkpoint (parameters round-trip as f32)."""
    raw = Path(path).read_bytes()
    if raw[:4] != _CKPT_MAGIC:
        raise ValueError(f"{path} is not a vmark checkpoint")
    version, cfg_len = struct.unpack("<II", raw[4:12])
    if version != _CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    pos = 12
    cfg = json.loads(raw[pos:pos + cfg_len].decode("utf-8"))
    pos += cfg_len
    config = NetworkConfig(
        n_markers=cfg["n_markers"], voxel_size=cfg["voxel_size"],
        channels=tuple(cfg["channels"]), blocks_per_level=cfg["blocks_per_level"],
        seed=cfg["seed"], dtype=cfg["dtype"],
    )
    model = VirtualMarkerNet(config)
    (n_params,) = struct.unpack("<I", raw[pos:pos + 4])
    pos += 4
    state = {}
    for _ in range(n_params):
        (name_len,) = struct.unpack("<H", raw[pos:pos + 2]); pos += 2
        name = raw[pos:pos + name_len].decode("utf-8"); pos += name_len
        (ndim,) = struct.unpack("<B", raw[pos:pos + 1]); pos += 1
        shape = struct.unpack(f"<{ndim}I", raw[pos:pos + 4 * ndim]); pos += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(raw[pos:pos + 4 * count], dtype="<f4").reshape(shape)
        pos += 4 * count
        state[name] = torch.as_tensor(data.copy(), dtype=config.torch_dtype())
    model.load_state_dict(state)
    return model


# ---------------------------------------------------------------------------
# Finite-difference verification harness


def gradient_check(model: VirtualMarkerNet, grid: SparseVoxelGrid,
                   targets: np.ndarray, n_samples: int = 120, seed: int = 0,
                   step: float = 1e-4) -> dict:
    """Compare backprop parameter gradients against central differences.

    Samples `n_samples` parameters uniformly across all tensors and
    reports the maximum relative error |fd - grad| / max(|fd| + |grad|,
    1e-10). Intended for small grids (<= a few hundred voxels) in
    float64. The default step balances truncation against roundoff in
    the loss evaluation; much smaller steps drown small gradients in
    floating-point noise.
    """
    from .loss import soft_cross_entropy_torch

    ctx = GridContext(grid.coords, model.config.levels)
    t = torch.as_tensor(np.asarray(targets, dtype=np.float64).T,
                        dtype=model.config.torch_dtype())

    def loss_value() -> torch.Tensor:
        return soft_cross_entropy_torch(model.voxel_logits(grid, ctx), t)

    model.zero_grad()
    loss = loss_value()
    loss.backward()

    params = list(model.named_parameters())
    sizes = np.array([p.numel() for _, p in params])
    rng = np.random.default_rng(seed)
    flat_choices = rng.choice(int(sizes.sum()), size=min(n_samples, int(sizes.sum())),
                              replace=False)
    bounds = np.cumsum(sizes)

    entries = []
    with torch.no_grad():
        for flat in sorted(flat_choices):
            pi = int(np.searchsorted(bounds, flat, side="right"))
            local = int(flat - (bounds[pi - 1] if pi else 0))
            name, p = params[pi]
            orig = p.view(-1)[local].item()
            h = step * max(1.0, abs(orig))
            p.view(-1)[local] = orig + h
            up = loss_value().item()
            p.view(-1)[local] = orig - h
            down = loss_value().item()
            p.view(-1)[local] = orig
            fd = (up - down) / (2 * h)
            an = p.grad.view(-1)[local].item()
            rel = abs(fd - an) / max(abs(fd) + abs(an), 1e-10)
            entries.append({"parameter": name, "index": local, "analytic": an,
                            "finite_difference": fd, "relative_error": rel})
    return {
        "n_checked": len(entries),
        "max_relative_error": max(e["relative_error"] for e in entries),
        "entries": entries,
    }
