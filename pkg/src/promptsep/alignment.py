"""Cross-modality alignment: the visual feature attends to prompt tokens.

The block computes FFN(LN(f + CA(Q, K, V))) with single-query scaled
dot-product attention over the token sequence. The query comes from the
joint-space visual feature; keys and values come from the token-level text
outputs, preserving per-context-vector information (attending over a single
pooled vector would make the weights degenerate). Residual before the
normalization, normalization before the feed-forward. The attention output
passes through a zero-initialized projection so a freshly built block
reduces exactly to FFN(LN(f)).

Also houses the learnable projection that maps pooled text embeddings into
the visual feature space for the asymmetric alignment loss, and a plain
concatenation fusion used only by the ablation harness.
"""

from __future__ import annotations

import math

import torch
from torch import nn

from .backend import DTYPE


class AlignmentBlock(nn.Module):
    def __init__(self, joint_dim: int, text_width: int, seed: int, attn_dim: int | None = None):
        super().__init__()
        attn_dim = joint_dim if attn_dim is None else attn_dim
        self.attn_dim = attn_dim
        gen = torch.Generator().manual_seed(seed)

        def mat(rows, cols, fan_in):
            return nn.Parameter(torch.randn(rows, cols, generator=gen, dtype=DTYPE) * fan_in ** -0.5)

        self.w_q = mat(joint_dim, attn_dim, joint_dim)
        self.w_k = mat(text_width, attn_dim, text_width)
        self.w_v = mat(text_width, attn_dim, text_width)
        self.out_proj = nn.Linear(attn_dim, joint_dim, dtype=DTYPE)
        with torch.no_grad():
            self.out_proj.weight.zero_()
            self.out_proj.bias.zero_()
        self.norm = nn.LayerNorm(joint_dim, dtype=DTYPE)
        ff1 = nn.Linear(joint_dim, 4 * joint_dim, dtype=DTYPE)
        ff2 = nn.Linear(4 * joint_dim, joint_dim, dtype=DTYPE)
        with torch.no_grad():
            ff1.weight.copy_(torch.randn(4 * joint_dim, joint_dim, generator=gen, dtype=DTYPE) * joint_dim ** -0.5)
            ff1.bias.zero_()
            ff2.weight.copy_(torch.randn(joint_dim, 4 * joint_dim, generator=gen, dtype=DTYPE) * (4 * joint_dim) ** -0.5)
            ff2.bias.zero_()
        self.ffn = nn.Sequential(ff1, nn.ReLU(), ff2)

    def attention_weights(self, f: torch.Tensor, tokens: torch.Tensor) -> torch.Tensor:
        """Softmax weights of the single query over the token sequence (N, L)."""
        if f.shape[-1] != self.w_q.shape[0]:
            raise ValueError(f"query width {f.shape[-1]} != {self.w_q.shape[0]}")
        if tokens.shape[-1] != self.w_k.shape[0]:
            raise ValueError(f"token width {tokens.shape[-1]} != {self.w_k.shape[0]}")
        if tokens.shape[-2] < 1:
            raise ValueError("token sequence is empty")
        q = f @ self.w_q  # (N, d)
        k = tokens @ self.w_k  # (N, L, d)
        scores = torch.einsum("nd,nld->nl", q, k) / math.sqrt(self.attn_dim)
        return torch.softmax(scores, dim=-1)

    def attend(self, f: torch.Tensor, tokens: torch.Tensor) -> torch.Tensor:
        """Residual sum f + projected attention context, before LN/FFN."""
        weights = self.attention_weights(f, tokens)
        v = tokens @ self.w_v  # (N, L, d)
        ctx = torch.einsum("nl,nld->nd", weights, v)
        return f + self.out_proj(ctx)

    def forward(self, f: torch.Tensor, tokens: torch.Tensor) -> torch.Tensor:
        squeeze = f.dim() == 1
        if squeeze:
            f, tokens = f.unsqueeze(0), tokens.unsqueeze(0)
        out = self.ffn(self.norm(self.attend(f, tokens)))
        return out.squeeze(0) if squeeze else out


class SigmaProjection(nn.Module):
    """Learnable affine map from pooled-text space into visual-feature space.

    Identity-initialized: both spaces share the joint width here, so the map
    starts as a no-op and learns a correction.
    """

    def __init__(self, joint_dim: int):
        super().__init__()
        self.proj = nn.Linear(joint_dim, joint_dim, dtype=DTYPE)
        with torch.no_grad():
            self.proj.weight.copy_(torch.eye(joint_dim, dtype=DTYPE))
            self.proj.bias.zero_()

    def forward(self, pooled: torch.Tensor) -> torch.Tensor:
        if pooled.shape[-1] != self.proj.in_features:
            raise ValueError(f"expected width {self.proj.in_features}, got {pooled.shape[-1]}")
        return self.proj(pooled)


class ConcatFusion(nn.Module):
    """Ablation-harness alternative: concatenate f with pooled T, project back.

    Not a supported model path; exists so the fusion ablation can swap it in
    for the attention block.
    """

    def __init__(self, joint_dim: int, seed: int):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.proj = nn.Linear(2 * joint_dim, joint_dim, dtype=DTYPE)
        with torch.no_grad():
            self.proj.weight.copy_(
                torch.randn(joint_dim, 2 * joint_dim, generator=gen, dtype=DTYPE) * (2 * joint_dim) ** -0.5
            )
            self.proj.bias.zero_()

    def forward(self, f: torch.Tensor, pooled_text: torch.Tensor) -> torch.Tensor:
        return self.proj(torch.cat([f, pooled_text], dim=-1))
