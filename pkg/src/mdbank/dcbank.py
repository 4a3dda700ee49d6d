"""Per-class domain discriminators with gradient reversal and gating.

The bank holds C+1 independent binary classifiers over region features (one
per object class plus background, no parameter sharing). Gates decide which
classifiers each region trains: G1 activates only the argmax class, G2
activates all of them weighted by p^gamma. Region features pass through a
gradient reversal layer first, so minimizing the bank's domain loss pushes
the feature extractor toward domain confusion.

Domain label convention: 1 = source, 0 = target.
"""

from __future__ import annotations

import torch
from torch import nn
from torch.nn import functional as F

LN2 = 0.6931471805599453


class _GradReverse(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, coeff):
        ctx.coeff = coeff
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad_output):
        return -ctx.coeff * grad_output, None


def grl(x: torch.Tensor, coeff: float) -> torch.Tensor:
    """Identity forward; upstream gradient scaled by -coeff on the way back."""
    if not float("-inf") < coeff < float("inf"):
        raise ValueError(f"grl coeff must be finite, got {coeff}")
    return _GradReverse.apply(x, float(coeff))


class DomainBank(nn.Module):
    """C+1 independent two-layer perceptrons with logistic outputs."""

    def __init__(self, num_classes: int, in_dim: int, hidden: int = 128):
        super().__init__()
        self.num_classes = num_classes
        self.in_dim = in_dim
        self.classifiers = nn.ModuleList(
            nn.Sequential(nn.Linear(in_dim, hidden), nn.ReLU(inplace=True), nn.Linear(hidden, 1))
            for _ in range(num_classes + 1)
        )

    def forward_logits(self, region_features: torch.Tensor) -> torch.Tensor:
        if region_features.shape[-1] != self.in_dim:
            raise ValueError(
                f"region feature width {region_features.shape[-1]} != bank in_dim {self.in_dim}"
            )
        cols = [clf(region_features) for clf in self.classifiers]
        return torch.cat(cols, dim=-1)  # N x (C+1)


def domain_scores(bank: DomainBank, region_features: torch.Tensor) -> torch.Tensor:
    """d_r in (0,1), one column per classifier; column i depends only on D_i."""
    return torch.sigmoid(bank.forward_logits(region_features))


def _check_simplex(p: torch.Tensor, atol: float = 1e-4) -> None:
    if (p < -atol).any():
        raise ValueError("simplex input has negative entries")
    if (p.sum(dim=-1) - 1.0).abs().max() > atol:
        raise ValueError("simplex input rows do not sum to 1")


def gate_g1(p: torch.Tensor) -> torch.Tensor:
    """One-hot at argmax(p); ties break toward the lowest index."""
    _check_simplex(p)
    idx = p.argmax(dim=-1)
    return F.one_hot(idx, num_classes=p.shape[-1]).to(p.dtype)


def gate_g2(p: torch.Tensor, gamma: float) -> torch.Tensor:
    """Elementwise power p^gamma; keeps the argmax, shrinks low-confidence mass."""
    if gamma <= 0:
        raise ValueError(f"gamma must be > 0, got {gamma}")
    _check_simplex(p)
    return p.clamp(min=0.0) ** gamma


def entropy_weights(d_r: torch.Tensor) -> torch.Tensor:
    """Binary entropy of each domain score, in [0, ln 2]; peak at d = 0.5."""
    d = d_r.clamp(1e-7, 1.0 - 1e-7)
    return -(d * torch.log(d) + (1.0 - d) * torch.log(1.0 - d))


def labels_to_gate(labels: torch.Tensor, num_columns: int) -> torch.Tensor:
    """Ground-truth head columns -> one-hot gates (G1 and G2 coincide here)."""
    return F.one_hot(labels, num_classes=num_columns).to(torch.float32)


def apply_gate(p: torch.Tensor, gate: str, gamma: float) -> torch.Tensor:
    if gate == "G1":
        return gate_g1(p)
    if gate == "G2":
        return gate_g2(p, gamma)
    raise ValueError(f"unknown gate {gate!r}, expected 'G1' or 'G2'")


def dcbank_loss(
    bank: DomainBank,
    src_features: torch.Tensor,
    src_labels: torch.Tensor,
    tgt_features: torch.Tensor,
    tgt_probs: torch.Tensor,
    gate: str = "G2",
    gamma: float = 2.0,
    grl_coeff: float = 1.0,
) -> tuple[torch.Tensor, dict]:
    """Gated domain-classification objective L_D over one source/target batch.

    Per region, each classifier's binary cross-entropy against the true
    domain label (1 = source, 0 = target) is weighted by that region's gate
    entry — one-hot ground-truth classes on the source side, gated teacher
    probabilities on the target side — then summed over classifiers and
    averaged over each domain's regions. Features pass through the reversal
    layer, so the returned aux scores are the bank's view of the reversed
    (identical) features.

    src_labels are 0-based head columns (C = background).
    """
    n_src = src_features.shape[0]
    n_tgt = tgt_features.shape[0]
    if n_src == 0 and n_tgt == 0:
        raise ValueError("dcbank_loss needs at least one source or target region")

    num_columns = bank.num_classes + 1
    terms = []
    aux: dict = {"gate": gate}

    if n_src > 0:
        logits = bank.forward_logits(grl(src_features, grl_coeff))
        gates = labels_to_gate(src_labels, num_columns).to(logits.dtype)
        # -log sigmoid(z): BCE against domain label 1
        per_clf = F.softplus(-logits)
        terms.append((gates * per_clf).sum(dim=-1).mean())
        aux["d_src"] = torch.sigmoid(logits).detach()
        aux["gate_src"] = gates.detach()
    if n_tgt > 0:
        logits = bank.forward_logits(grl(tgt_features, grl_coeff))
        gates = apply_gate(tgt_probs.detach(), gate, gamma).to(logits.dtype)
        # -log(1 - sigmoid(z)): BCE against domain label 0
        per_clf = F.softplus(logits)
        terms.append((gates * per_clf).sum(dim=-1).mean())
        aux["d_tgt"] = torch.sigmoid(logits).detach()
        aux["gate_tgt"] = gates.detach()

    loss = terms[0] if len(terms) == 1 else terms[0] + terms[1]
    return loss, aux


def domain_accuracy(aux: dict) -> float:
    """Fraction of gate-activated classifier outputs on the correct side of 0.5."""
    correct = 0.0
    weight = 0.0
    if "d_src" in aux:
        hits = (aux["d_src"] > 0.5).to(torch.float64)
        correct += float((aux["gate_src"].to(torch.float64) * hits).sum())
        weight += float(aux["gate_src"].sum())
    if "d_tgt" in aux:
        hits = (aux["d_tgt"] < 0.5).to(torch.float64)
        correct += float((aux["gate_tgt"].to(torch.float64) * hits).sum())
        weight += float(aux["gate_tgt"].sum())
    return correct / weight if weight > 0 else 0.0
