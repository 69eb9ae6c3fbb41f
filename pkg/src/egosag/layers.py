"""Shared neural building blocks (token-major: inputs are ``(tokens, channels)``)."""
from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ParameterError


class MLP(nn.Module):
    """Two-layer perceptron with a ReLU in between."""

    def __init__(self, cin, hidden, cout, bias=True):
        super().__init__()
        self.fc1 = nn.Linear(cin, hidden, bias=bias)
        self.fc2 = nn.Linear(hidden, cout, bias=bias)

    def forward(self, x):
        return self.fc2(F.relu(self.fc1(x)))

    @torch.no_grad()
    def identity_init(self):
        for fc in (self.fc1, self.fc2):
            fc.weight.copy_(torch.eye(*fc.weight.shape))
            if fc.bias is not None:
                fc.bias.zero_()
        return self


def scaled_dot_attention(q, k, v, heads: int):
    """softmax(q k^T / sqrt(d_head)) v per head; q (Q, d), k/v (K, d)."""
    d = q.shape[-1]
    if d % heads:
        raise ParameterError(f"{heads} heads do not divide attention dim {d}")
    if k.shape[0] == 0:
        raise ParameterError("attention over zero key/value tokens")
    dh = d // heads
    qh = q.view(q.shape[0], heads, dh).transpose(0, 1)
    kh = k.view(k.shape[0], heads, dh).transpose(0, 1)
    vh = v.view(v.shape[0], heads, dh).transpose(0, 1)
    attn = torch.softmax(qh @ kh.transpose(1, 2) / math.sqrt(dh), dim=-1)
    return (attn @ vh).transpose(0, 1).reshape(q.shape[0], d)


class MultiHeadAttention(nn.Module):
    def __init__(self, q_dim, kv_dim, dim, heads, out_dim=None):
        super().__init__()
        if dim % heads:
            raise ParameterError(f"{heads} heads do not divide attention dim {dim}")
        self.heads = heads
        self.q_proj = nn.Linear(q_dim, dim)
        self.k_proj = nn.Linear(kv_dim, dim)
        self.v_proj = nn.Linear(kv_dim, dim)
        self.out_proj = nn.Linear(dim, out_dim or q_dim)

    def forward(self, queries, kv, q=None):
        # q may be supplied when the query projection is shared between blocks
        q = self.q_proj(queries) if q is None else q
        out = scaled_dot_attention(q, self.k_proj(kv), self.v_proj(kv), self.heads)
        return self.out_proj(out)


class SelfAttentionBlock(nn.Module):
    def __init__(self, dim, heads):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, dim, dim, heads)

    def forward(self, x):
        h = self.norm(x)
        return x + self.attn(h, h)


class FeedForwardBlock(nn.Module):
    def __init__(self, dim, hidden):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.mlp = MLP(dim, hidden, dim)

    def forward(self, x):
        return x + self.mlp(self.norm(x))
