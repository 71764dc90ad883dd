"""Conditioning tokens for the pose denoiser.

A sequence is ``[camera] + text tokens + object tokens``. Every token's
final embedding is the sum of its content, a type embedding (text /
movable / reference / irrelevant), a learned position embedding and the
diffusion time embedding. Objects never expose their category: an object
token sees only its partial-view cloud and its pose.
"""
from __future__ import annotations

import enum
import hashlib
import json
import math
import re
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
import torch

from .errors import AlignmentError, EmptyCloud, EmptyText, FormatError, NonFinite
from .geometry import PointCloud, farthest_point_sample
from .nn import MLP, Linear, TransformerBlock, embedding_lookup
from .scene import Role, Scene


class TypeId(enum.IntEnum):
    TEXT = 0
    MOVABLE = 1
    REFERENCE = 2
    IRRELEVANT = 3


ROLE_TYPES = {Role.MOVABLE: TypeId.MOVABLE, Role.REFERENCE: TypeId.REFERENCE, Role.IRRELEVANT: TypeId.IRRELEVANT}

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class TextEncoding:
    tokens: tuple[str, ...]
    embeddings: np.ndarray

    @property
    def count(self) -> int:
        return len(self.tokens)


class TextEncoder(Protocol):
    dim: int

    def encode(self, text: str) -> TextEncoding: ...


class HashTextEncoder:
    """Frozen token table: each token's row is drawn from a stable hash of the token."""

    def __init__(self, dim: int, seed: int = 0):
        self.dim = dim
        self.seed = seed
        self._cache: dict[str, np.ndarray] = {}

    def row(self, token: str) -> np.ndarray:
        vec = self._cache.get(token)
        if vec is None:
            digest = hashlib.blake2b(f"{self.seed}:{token}".encode("utf-8"), digest_size=8).digest()
            rng = np.random.default_rng(int.from_bytes(digest, "little"))
            vec = rng.standard_normal(self.dim)
            vec.setflags(write=False)
            self._cache[token] = vec
        return vec

    def encode(self, text: str) -> TextEncoding:
        tokens = tokenize(text or "")
        if not tokens:
            raise EmptyText("instruction has no tokens")
        return TextEncoding(tuple(tokens), np.stack([self.row(t) for t in tokens]))


class SidecarTextEncoder(HashTextEncoder):
    """Precomputed token vectors from a JSON-lines file; unknown tokens use the hash table."""

    def __init__(self, path, dim: int, seed: int = 0):
        super().__init__(dim, seed)
        self.path = str(path)
        with open(path, encoding="utf-8") as fh:
            for n, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                rec = json.loads(line)
                vec = np.asarray(rec["vector"], dtype=np.float64)
                if vec.shape != (dim,):
                    raise FormatError(f"{path}:{n}: vector of length {vec.size}, expected {dim}")
                vec.setflags(write=False)
                self._cache[rec["token"].lower()] = vec


def encode_text(instruction: str, encoder: TextEncoder | None = None, dim: int = 128) -> TextEncoding:
    return (encoder or HashTextEncoder(dim)).encode(instruction)


def sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / max(half, 1))
    ang = t.to(torch.float64)[..., None] * freqs
    emb = torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros(*emb.shape[:-1], 1, dtype=emb.dtype)], dim=-1)
    return emb


def camera_vector(scene: Scene) -> np.ndarray:
    cam = scene.camera
    return np.array(cam.pose.to_list() + [cam.focal / 100.0, cam.width / 100.0, cam.height / 100.0])


@dataclass
class Conditioning:
    """Everything the denoiser sees for one scene, already in numeric form.

    ``poses`` holds the 9-D pose vector of every object; the movable row is
    replaced by the diffusion state at run time.
    """

    text: np.ndarray
    clouds: np.ndarray
    poses: np.ndarray
    types: np.ndarray
    movable: int
    camera: np.ndarray

    @property
    def n_objects(self) -> int:
        return len(self.types)


def build_conditioning(
    scene: Scene,
    clouds: Sequence[PointCloud],
    instruction: str,
    text_encoder: TextEncoder,
    n_sample: int = 256,
    seed: int = 0,
    roles: Sequence[Role] | None = None,
) -> Conditioning:
    """Numeric conditioning for a scene whose ``roles`` (default: the scene's own) are known."""
    from .diffusion import pose_to_vector

    roles = [o.role for o in scene.objects] if roles is None else [Role(r) for r in roles]
    if len(clouds) != len(scene) or len(roles) != len(scene):
        raise AlignmentError(f"{len(scene)} objects, {len(clouds)} clouds, {len(roles)} roles")
    if roles.count(Role.MOVABLE) != 1:
        raise AlignmentError("exactly one movable object is required")
    ws = scene.workspace
    pts = []
    for k, cloud in enumerate(clouds):
        if len(cloud) == 0:
            raise EmptyCloud(f"object {k} has an empty cloud")
        # keyed by model id so list order does not change the subsample
        key = zlib.crc32(str(scene.objects[k].model.id).encode("utf-8"))
        sub = farthest_point_sample(cloud, n_sample, seed=np.random.SeedSequence([seed, key]))
        pts.append((np.asarray(sub.points, dtype=np.float64) - ws.center) / ws.half_extents)
    poses = np.stack([pose_to_vector(o.pose, ws, clamp_warn=False) for o in scene.objects])
    return Conditioning(
        text=text_encoder.encode(instruction).embeddings,
        clouds=np.stack(pts),
        poses=poses,
        types=np.array([int(ROLE_TYPES[r]) for r in roles]),
        movable=roles.index(Role.MOVABLE),
        camera=camera_vector(scene),
    )


@dataclass
class Batch:
    text: torch.Tensor
    text_mask: torch.Tensor
    clouds: torch.Tensor
    obj_mask: torch.Tensor
    poses: torch.Tensor
    types: torch.Tensor
    movable: torch.Tensor
    camera: torch.Tensor

    @property
    def size(self) -> int:
        return self.text.shape[0]


def collate(conds: Sequence[Conditioning], dtype=torch.float32) -> Batch:
    """Pad a list of conditionings into batch tensors."""
    if not conds:
        raise ValueError("empty batch")
    B = len(conds)
    L = max(len(c.text) for c in conds)
    N = max(c.n_objects for c in conds)
    n_pts = conds[0].clouds.shape[1]
    D = conds[0].text.shape[1]
    text = np.zeros((B, L, D))
    text_mask = np.zeros((B, L), dtype=bool)
    clouds = np.zeros((B, N, n_pts, 3))
    obj_mask = np.zeros((B, N), dtype=bool)
    poses = np.zeros((B, N, 9))
    types = np.zeros((B, N), dtype=np.int64)
    for b, c in enumerate(conds):
        if c.clouds.shape[1] != n_pts:
            raise AlignmentError("all clouds in a batch need the same point count")
        text[b, : len(c.text)] = c.text
        text_mask[b, : len(c.text)] = True
        clouds[b, : c.n_objects] = c.clouds
        obj_mask[b, : c.n_objects] = True
        poses[b, : c.n_objects] = c.poses
        types[b, : c.n_objects] = c.types
    return Batch(
        torch.tensor(text, dtype=dtype),
        torch.tensor(text_mask),
        torch.tensor(clouds, dtype=dtype),
        torch.tensor(obj_mask),
        torch.tensor(poses, dtype=dtype),
        torch.tensor(types),
        torch.tensor([c.movable for c in conds], dtype=torch.long),
        torch.tensor(np.stack([c.camera for c in conds]), dtype=dtype),
    )


class PointCloudEncoder(torch.nn.Module):
    """Per-point MLP, self-attention over points, max-pool."""

    def __init__(self, dim: int, heads: int, blocks: int, generator, dtype=torch.float32):
        super().__init__()
        self.point_mlp = MLP(3, dim, dim, generator, dtype)
        self.blocks = torch.nn.ModuleList([TransformerBlock(dim, heads, generator, dtype) for _ in range(blocks)])

    def forward(self, points: torch.Tensor) -> torch.Tensor:
        if points.shape[-2] == 0:
            raise EmptyCloud("empty cloud")
        h = self.point_mlp(points)
        for blk in self.blocks:
            h = blk(h)
        return h.amax(dim=-2)


class PoseEncoder(torch.nn.Module):
    def __init__(self, dim: int, generator, dtype=torch.float32):
        super().__init__()
        self.mlp = MLP(9, dim, dim, generator, dtype)

    def forward(self, pose_vec: torch.Tensor) -> torch.Tensor:
        if not torch.isfinite(pose_vec).all():
            raise NonFinite("pose vector contains non-finite values")
        return self.mlp(pose_vec)


@dataclass
class Context:
    """The parts of a token sequence that do not depend on ``(x_t, t)``."""

    prefix: torch.Tensor
    prefix_mask: torch.Tensor
    cloud_emb: torch.Tensor
    obj_bias: torch.Tensor
    obj_mask: torch.Tensor
    poses: torch.Tensor
    movable: torch.Tensor


@dataclass
class TokenSequence:
    embeddings: torch.Tensor
    type_ids: list[int]
    positions: list[int]
    t: int

    def __len__(self):
        return len(self.type_ids)


class TokenAssembler(torch.nn.Module):
    """Learned tables and encoders that turn a :class:`Batch` into token embeddings."""

    def __init__(self, dim: int, heads: int, cloud_blocks: int, max_text_len: int, generator, dtype=torch.float32):
        super().__init__()
        self.dim = dim
        self.max_text_len = max_text_len
        self.text_proj = Linear(dim, dim, generator, dtype)
        self.cloud_encoder = PointCloudEncoder(dim, heads, cloud_blocks, generator, dtype)
        self.pose_encoder = PoseEncoder(dim, generator, dtype)
        self.obj_proj = Linear(2 * dim, dim, generator, dtype)
        self.camera_encoder = MLP(15, dim, dim, generator, dtype)
        self.time_mlp = MLP(dim, dim, dim, generator, dtype)
        self.type_table = torch.nn.Parameter(0.02 * torch.randn(len(TypeId), dim, generator=generator, dtype=torch.float64).to(dtype))
        # rows: camera, text positions 1..max_text_len, one shared object slot
        self.pos_table = torch.nn.Parameter(0.02 * torch.randn(max_text_len + 2, dim, generator=generator, dtype=torch.float64).to(dtype))

    @property
    def object_position(self) -> int:
        return self.max_text_len + 1

    def context(self, batch: Batch) -> Context:
        B, L, _ = batch.text.shape
        if L > self.max_text_len:
            raise AlignmentError(f"instruction has {L} tokens, limit is {self.max_text_len}")
        text_type = self.type_table[int(TypeId.TEXT)]
        cam = self.camera_encoder(batch.camera)[:, None] + text_type + self.pos_table[0]
        text = self.text_proj(batch.text) + text_type + self.pos_table[1 : L + 1]
        prefix = torch.cat([cam, text], dim=1)
        prefix_mask = torch.cat([torch.ones(B, 1, dtype=torch.bool), batch.text_mask], dim=1)
        cloud_emb = torch.zeros(*batch.obj_mask.shape, self.dim, dtype=batch.clouds.dtype)
        cloud_emb = cloud_emb.masked_scatter(batch.obj_mask[..., None], self.cloud_encoder(batch.clouds[batch.obj_mask]))
        obj_bias = embedding_lookup(self.type_table, batch.types) + self.pos_table[self.object_position]
        return Context(prefix, prefix_mask, cloud_emb, obj_bias, batch.obj_mask, batch.poses, batch.movable)

    def tokens(self, ctx: Context, x_t: torch.Tensor, t: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Full ``(B, S, D)`` token embeddings and the ``(B, S)`` validity mask."""
        onehot = torch.nn.functional.one_hot(ctx.movable, ctx.poses.shape[1]).to(torch.bool)[..., None]
        poses = torch.where(onehot, x_t[:, None, :].to(ctx.poses.dtype), ctx.poses)
        content = self.obj_proj(torch.cat([ctx.cloud_emb, self.pose_encoder(poses)], dim=-1))
        objs = content + ctx.obj_bias
        time = self.time_mlp(sinusoidal_embedding(t, self.dim).to(x_t.dtype))[:, None]
        seq = torch.cat([ctx.prefix, objs], dim=1) + time
        mask = torch.cat([ctx.prefix_mask, ctx.obj_mask], dim=1)
        return seq, mask


def assemble_tokens(assembler: TokenAssembler, cond: Conditioning, x_t, t: int) -> TokenSequence:
    """Token sequence for a single conditioning (mainly for inspection and tests)."""
    dtype = assembler.type_table.dtype
    batch = collate([cond], dtype)
    x = torch.as_tensor(np.asarray(x_t, dtype=np.float64), dtype=dtype).reshape(1, 9)
    seq, _ = assembler.tokens(assembler.context(batch), x, torch.tensor([t]))
    L = len(cond.text)
    types = [int(TypeId.TEXT)] * (1 + L) + [int(v) for v in cond.types]
    positions = list(range(1 + L)) + [assembler.object_position] * cond.n_objects
    return TokenSequence(seq[0], types, positions, int(t))


def load_text_encoder(spec: dict | None, dim: int) -> TextEncoder:
    spec = spec or {}
    if spec.get("kind") == "sidecar":
        return SidecarTextEncoder(Path(spec["path"]), dim, int(spec.get("seed", 0)))
    return HashTextEncoder(dim, int(spec.get("seed", 0)))
