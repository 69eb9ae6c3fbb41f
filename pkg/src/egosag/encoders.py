"""Clip encoders, the intention projector, and the sparse scene U-Net."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import DomainError, MissingFileError, ParameterError, VersionMismatchError
from .isa import ISALayer
from .sparse import SiteNorm, StridedConv, SubmanifoldConv, TransposedConv


@dataclass
class ClipFeatures:
    tokens: torch.Tensor  # (n_tokens, C)
    affordance_id: int = -1
    clip_id: str = ""
    pooled: torch.Tensor = field(init=False)

    def __post_init__(self):
        if self.tokens.ndim != 2 or self.tokens.shape[0] == 0:
            raise DomainError("clip features need at least one token")
        self.pooled = self.tokens.mean(dim=0)

    @property
    def width(self):
        return self.tokens.shape[1]


@dataclass
class SceneFeatures:
    per_point: torch.Tensor  # (N, C)
    per_level_decoder: list = field(default_factory=list)  # D_i after ISA, coarsest first


# --- video ------------------------------------------------------------------

def resample_frames(clip, n_frames=16):
    """Uniformly pick ``n_frames`` frame indices over the clip (repeating when T is short)."""
    t = clip.shape[0]
    if t == 0:
        raise DomainError("empty clip")
    idx = np.rint(np.linspace(0, t - 1, n_frames)).astype(np.int64)
    return clip[idx]


class ToyVideoEncoder(nn.Module):
    """Patchifying 3-D conv stack followed by the projector to width C.

    Each stage uses kernel == stride, so a spatially constant input gives
    identical tokens everywhere.
    """

    def __init__(self, width, hidden=(16, 32, 64), strides=((2, 4, 4), (2, 4, 4), (1, 2, 2)),
                 n_frames=16, linear=False):
        super().__init__()
        self.n_frames = n_frames
        self.linear = linear
        chans = (3,) + tuple(hidden)
        self.convs = nn.ModuleList(
            nn.Conv3d(chans[i], chans[i + 1], kernel_size=s, stride=s, bias=not linear)
            for i, s in enumerate(strides)
        )
        self.norms = nn.ModuleList(
            nn.LayerNorm(c) if not linear else nn.Identity() for c in hidden)
        self.projector = nn.Linear(chans[-1], width, bias=not linear)
        self.strides = strides

    def token_grid(self, t, h, w):
        for s in self.strides:
            t, h, w = t // s[0], h // s[1], w // s[2]
        return t, h, w

    def forward(self, clip):
        clip = torch.as_tensor(clip, dtype=self.projector.weight.dtype)
        if clip.ndim != 4 or clip.shape[0] == 0:
            raise DomainError("clip must be a non-empty T x H x W x 3 block")
        clip = resample_frames(clip, self.n_frames)
        x = clip.permute(3, 0, 1, 2).unsqueeze(0)  # (1, 3, T, H, W)
        for conv, norm in zip(self.convs, self.norms):
            x = conv(x)
            x = norm(x.movedim(1, -1)).movedim(-1, 1)
            if not self.linear:
                x = F.relu(x)
        tokens = x[0].flatten(1).T  # (T1*H1*W1, hidden)
        return self.projector(tokens)


def encode_clip(encoder: ToyVideoEncoder, clip, affordance_id=-1, clip_id="") -> ClipFeatures:
    return ClipFeatures(encoder(clip), affordance_id, clip_id)


class IntentionExtractor(nn.Module):
    """1x1 projection of every clip token, averaged over tokens."""

    def __init__(self, width):
        super().__init__()
        self.proj = nn.Linear(width, width)

    @torch.no_grad()
    def identity_init(self):
        self.proj.weight.copy_(torch.eye(self.proj.weight.shape[0]))
        self.proj.bias.zero_()
        return self

    def forward(self, clip: ClipFeatures):
        return self.proj(clip.tokens).mean(dim=0)


def extract_intention(extractor: IntentionExtractor, clip: ClipFeatures):
    return extractor(clip)


# --- precomputed feature files ------------------------------------------------

FEATURE_MAGIC = b"EGSF"
FEATURE_VERSION = 1


def save_clip_features(path, tokens, clip_id, affordance_id):
    """Write tokens as a C x n_tokens row-major float32 block plus a JSON sidecar."""
    path = Path(path)
    tokens = np.asarray(tokens, dtype=np.float32)  # (n_tokens, C)
    n, c = tokens.shape
    with open(path, "wb") as f:
        f.write(FEATURE_MAGIC + struct.pack("<III", FEATURE_VERSION, c, n))
        f.write(np.ascontiguousarray(tokens.T).astype("<f4").tobytes())
    path.with_suffix(".json").write_text(
        json.dumps({"clip_id": clip_id, "affordance_id": int(affordance_id)}))


def load_clip_features(path) -> ClipFeatures:
    path = Path(path)
    if not path.exists():
        raise MissingFileError(path, "clip feature file")
    data = path.read_bytes()
    if data[:4] != FEATURE_MAGIC:
        raise VersionMismatchError(f"{path}: bad magic {data[:4]!r}")
    version, c, n = struct.unpack("<III", data[4:16])
    if version != FEATURE_VERSION:
        raise VersionMismatchError(f"{path}: unsupported version {version}")
    grid = np.frombuffer(data, dtype="<f4", count=c * n, offset=16).reshape(c, n)
    meta_path = path.with_suffix(".json")
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    return ClipFeatures(torch.from_numpy(grid.T.copy()), int(meta.get("affordance_id", -1)),
                        meta.get("clip_id", path.stem))


# --- scene U-Net ------------------------------------------------------------------

class _ConvBlock(nn.Module):
    def __init__(self, cin, cout, linear=False):
        super().__init__()
        self.conv = SubmanifoldConv(cin, cout, bias=not linear)
        self.norm = SiteNorm(cout, enabled=not linear)
        self.linear = linear

    def forward(self, x, neighbors):
        x = self.norm(self.conv(x, neighbors))
        return x if self.linear else F.relu(x)


class SceneUNet(nn.Module):
    """Five-level sparse U-Net whose decoder levels are refined by ISA layers.

    ``widths`` lists encoder widths from full resolution to the coarsest
    level; the decoder mirrors them and a final linear map lifts the
    full-resolution features to ``out_dim``.
    """

    def __init__(self, in_channels=6, widths=(32, 64, 128, 256, 512), out_dim=512,
                 isa_layers: list[ISALayer] | None = None, linear=False):
        super().__init__()
        if len(widths) != 5:
            raise ParameterError("the scene U-Net has exactly five levels")
        self.widths = tuple(widths)
        self.stem = _ConvBlock(in_channels, widths[0], linear)
        self.enc = nn.ModuleList(_ConvBlock(w, w, linear) for w in widths)
        self.down = nn.ModuleList(StridedConv(widths[i], widths[i + 1], bias=not linear)
                                  for i in range(4))
        self.dec_top = _ConvBlock(widths[4], widths[4], linear)
        # up[j] lifts level j+1 to level j; dec[j] fuses it with the skip at level j
        self.up = nn.ModuleList(TransposedConv(widths[i + 1], widths[i], bias=not linear)
                                for i in range(4))
        self.dec = nn.ModuleList(_ConvBlock(2 * widths[i], widths[i], linear) for i in range(4))
        self.head = nn.Linear(widths[0], out_dim, bias=not linear)
        self.isa = nn.ModuleList(isa_layers) if isa_layers is not None else None

    def forward(self, site_features, levels, point_to_site, intent=None, isa_geometry=None,
                use_isa=True):
        """Run the U-Net on level-1 site features.

        ``levels`` is the pyramid from :func:`egosag.sparse.build_hierarchy`;
        ``isa_geometry`` optionally holds one precomputed table per decoder
        level, coarsest first.
        """
        for i, lvl in enumerate(levels):
            if lvl.n_sites == 0:
                raise DomainError(f"level {i + 1} has zero active sites")
        x = self.enc[0](self.stem(site_features, levels[0].neighbors), levels[0].neighbors)
        skips = [x]
        for i in range(1, 5):
            fine = levels[i - 1]
            x = self.down[i - 1](x, fine.parent, fine.child_offset, levels[i].n_sites)
            x = self.enc[i](x, levels[i].neighbors)
            skips.append(x)

        run_isa = use_isa and self.isa is not None
        decoded = []
        d = self.dec_top(skips[4], levels[4].neighbors)
        for step, lvl in enumerate((4, 3, 2, 1, 0)):
            if lvl < 4:
                fine = levels[lvl]
                up = self.up[lvl](d, fine.parent, fine.child_offset)
                d = self.dec[lvl](torch.cat([up, skips[lvl]], dim=1), fine.neighbors)
            if run_isa:
                geom = isa_geometry[step] if isa_geometry is not None else None
                centers = levels[lvl].centers
                d = self.isa[step](d, centers, intent, geom)
            decoded.append(d)
        idx = torch.as_tensor(point_to_site, device=d.device)
        return SceneFeatures(self.head(d)[idx], decoded)
