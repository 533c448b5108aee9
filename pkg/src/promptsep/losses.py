"""The six training objectives and their warm-up-weighted combination.

Similarity is cosine everywhere: the supervised contrastive term explicitly
l2-normalizes, the disentanglement term is written as a cosine, and keeping
one definition avoids hidden scale sensitivity. Zero-norm rows raise instead
of being clamped — they signal upstream feature collapse.

Batch conventions: features are (N, d) float tensors, labels are (N,) ints
with 1 = fake. Every function is pure and differentiable with respect to its
tensor inputs.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Mapping

import torch
import torch.nn.functional as F

from .config import LossWeights, warmup_weight


class FeatureCollapseError(ValueError):
    """A cosine-based loss received a zero-norm feature row."""


def _norms(x: torch.Tensor, what: str) -> torch.Tensor:
    n = x.norm(dim=-1)
    if (n == 0).any():
        raise FeatureCollapseError(f"zero-norm row in {what}")
    return n


def _cosine(a: torch.Tensor, b: torch.Tensor, what: str) -> torch.Tensor:
    return (a * b).sum(dim=-1) / (_norms(a, what) * _norms(b, what))


def _cosine_matrix(a: torch.Tensor, b: torch.Tensor, what: str) -> torch.Tensor:
    na = _norms(a, what).unsqueeze(1)
    nb = _norms(b, what).unsqueeze(0)
    return (a @ b.T) / (na * nb)


def loss_pre(f: torch.Tensor, t_b: torch.Tensor, tau: float) -> torch.Tensor:
    """Symmetric image-text contrastive loss for first-stage pretraining.

    Mean over the batch of the image-to-text and text-to-image negative
    log-softmax terms, with cosine similarity, temperature tau, and the
    1/(2N) factor. A single-sample batch scores exactly zero.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    if f.dim() != 2 or t_b.dim() != 2 or f.shape[0] != t_b.shape[0]:
        raise ValueError("expected matching (N, d) feature and text batches")
    sim = _cosine_matrix(f, t_b, "loss_pre inputs") / tau
    i2t = torch.diagonal(F.log_softmax(sim, dim=1))
    t2i = torch.diagonal(F.log_softmax(sim, dim=0))
    n = f.shape[0]
    return -(i2t.sum() + t2i.sum()) / (2 * n)


def loss_dis(f_a: torch.Tensor, f_b: torch.Tensor) -> torch.Tensor:
    """Absolute cosine between the two aligned features, mean over the batch.

    Minimizing it drives the forgery-specific and forgery-irrelevant features
    toward orthogonality. Scale-invariant in both arguments.
    """
    if f_a.shape != f_b.shape:
        raise ValueError(f"shape mismatch {tuple(f_a.shape)} vs {tuple(f_b.shape)}")
    return _cosine(f_a, f_b, "loss_dis inputs").abs().mean()


def loss_div(t_a: torch.Tensor, t_b: torch.Tensor) -> torch.Tensor:
    """Prompt diversity: mean pairwise cosine within each stream, summed.

    Expectation over ordered pairs i != j of sim(T_i, T_j), computed per
    stream on the pooled embeddings and added. Uses pooled rather than
    token-level embeddings (the similarity is written between whole
    per-sample embeddings; token-level is the noted alternative).
    """
    out = None
    for t in (t_a, t_b):
        n = t.shape[0]
        if n < 2:
            raise ValueError("prompt diversity needs at least 2 samples")
        sim = _cosine_matrix(t, t, "loss_div inputs")
        off_diag = sim.sum() - sim.diagonal().sum()
        term = off_diag / (n * (n - 1))
        out = term if out is None else out + term
    return out


def loss_align_terms(
    f_a: torch.Tensor,
    f_b: torch.Tensor,
    t_a_proj: torch.Tensor,
    t_b_proj: torch.Tensor,
    y: torch.Tensor,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Raw (specific, irrelevant) parts of the asymmetric alignment loss.

    Irrelevant part: -mean_i sim(f_b_i, t_b_i) over every sample. Specific
    part: fake samples pull f_a toward its projected prompt embedding
    (-mean over fakes), real samples push it away (+mean over reals); an
    empty label subset contributes zero rather than dividing by zero.
    """
    if not torch.all((y == 0) | (y == 1)):
        raise ValueError("labels must be binary")
    zero = f_a.new_zeros(())
    irr = -_cosine(f_b, t_b_proj, "alignment irrelevant features").mean()
    sim_a = _cosine(f_a, t_a_proj, "alignment specific features")
    fake = y == 1
    real = y == 0
    spec = zero
    if fake.any():
        spec = spec - sim_a[fake].mean()
    if real.any():
        spec = spec + sim_a[real].mean()
    return spec, irr


def loss_align(
    f_a: torch.Tensor,
    f_b: torch.Tensor,
    t_a_proj: torch.Tensor,
    t_b_proj: torch.Tensor,
    y: torch.Tensor,
    w_spec: float,
    w_irr: float,
) -> torch.Tensor:
    """Weighted asymmetric alignment loss; projections already applied."""
    spec, irr = loss_align_terms(f_a, f_b, t_a_proj, t_b_proj, y)
    return w_spec * spec + w_irr * irr


def loss_con(f: torch.Tensor, y: torch.Tensor, tau: float) -> torch.Tensor:
    """Supervised contrastive loss over l2-normalized features.

    For each anchor, every same-label sample is a positive and all other
    samples are negatives; the per-anchor sum of -log softmax terms is
    divided by the batch size. Anchors without a same-label partner
    contribute zero (small batches legitimately contain label singletons).
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    n = f.shape[0]
    if n < 2:
        raise ValueError("supervised contrastive loss needs at least 2 samples")
    z = f / _norms(f, "loss_con features").unsqueeze(1)
    sim = (z @ z.T) / tau
    eye = torch.eye(n, dtype=torch.bool, device=f.device)
    denom = torch.logsumexp(sim.masked_fill(eye, float("-inf")), dim=1)
    pos = (y.unsqueeze(0) == y.unsqueeze(1)) & ~eye
    log_prob = sim - denom.unsqueeze(1)
    return -(log_prob * pos).sum() / n


def loss_cls(f_a: torch.Tensor, head: torch.nn.Module, y: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy of the classifier head applied to f_a."""
    return F.cross_entropy(head(f_a), y.long())


@dataclass
class LossReport:
    """Per-batch loss terms, effective warm-up weights, and the weighted total.

    The asymmetric alignment term is stored as its two raw parts so the total
    stays reproducible: total = cls + w_dis*dis + w_div*div
    + w_align_specific*align_specific + w_align_irrelevant*align_irrelevant
    + w_con*con (stage 2), or total = pre (stage 1).
    """

    stage: int
    step: int
    pre: float = 0.0
    cls: float = 0.0
    dis: float = 0.0
    div: float = 0.0
    align_specific: float = 0.0
    align_irrelevant: float = 0.0
    con: float = 0.0
    w_dis: float = 0.0
    w_div: float = 0.0
    w_align_specific: float = 0.0
    w_align_irrelevant: float = 0.0
    w_con: float = 0.0
    total: float = 0.0

    def expected_total(self) -> float:
        if self.stage == 1:
            return self.pre
        return (
            self.cls
            + self.w_dis * self.dis
            + self.w_div * self.div
            + self.w_align_specific * self.align_specific
            + self.w_align_irrelevant * self.align_irrelevant
            + self.w_con * self.con
        )

    def check(self, tol: float = 1e-9) -> None:
        if abs(self.total - self.expected_total()) > tol:
            raise ValueError(
                f"loss report total {self.total} not reproducible from parts "
                f"(expected {self.expected_total()})"
            )

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json_line(self, **extra) -> str:
        rec = self.to_dict()
        rec.update(extra)
        return json.dumps(rec, sort_keys=True)

    @classmethod
    def from_json_line(cls, line: str) -> "LossReport":
        rec = json.loads(line)
        names = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in rec.items() if k in names})


def loss_total(
    terms: Mapping[str, torch.Tensor],
    weights: LossWeights,
    step: int,
    total_steps: int,
) -> tuple[torch.Tensor, LossReport]:
    """Combine stage-2 terms under the linear warm-up schedule.

    ``terms`` maps term names ("cls" required; "dis", "div", "align_specific",
    "align_irrelevant", "con" optional — absent means ablated off) to scalar
    tensors. The classification term carries weight 1 from step 0; every
    auxiliary weight ramps linearly over the warm-up window.
    """
    if "cls" not in terms:
        raise ValueError("stage-2 objective requires the classification term")

    def w(base: float, name: str) -> float:
        if name not in terms:
            return 0.0
        return warmup_weight(base, step, total_steps, weights.warmup_ratio)

    w_dis = w(weights.lambda_dis, "dis")
    w_div = w(weights.lambda_div, "div")
    w_as = w(weights.lambda_align_specific, "align_specific")
    w_ai = w(weights.lambda_align_irrelevant, "align_irrelevant")
    w_con = w(weights.lambda_con, "con")

    zero = terms["cls"].new_zeros(())
    total = (
        terms["cls"]
        + w_dis * terms.get("dis", zero)
        + w_div * terms.get("div", zero)
        + w_as * terms.get("align_specific", zero)
        + w_ai * terms.get("align_irrelevant", zero)
        + w_con * terms.get("con", zero)
    )
    def val(name: str) -> float:
        return float(terms.get(name, zero).detach())

    report = LossReport(
        stage=2,
        step=step,
        cls=val("cls"),
        dis=val("dis"),
        div=val("div"),
        align_specific=val("align_specific"),
        align_irrelevant=val("align_irrelevant"),
        con=val("con"),
        w_dis=w_dis,
        w_div=w_div,
        w_align_specific=w_as,
        w_align_irrelevant=w_ai,
        w_con=w_con,
        total=float(total.detach()),
    )
    return total, report
