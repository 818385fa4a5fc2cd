"""Per-branch affine+ReLU transforms, element-wise max fusion, concat, classifier head."""

from __future__ import annotations

import math

import torch
from torch import nn
from torch.nn import functional as F

from vital.config import MODES


class BranchTransforms(nn.Module):
    """K distinct maps ``v_{s^k} = relu(W_k phi + b_k)`` with ``W_k`` stored as d x h."""

    def __init__(self, K, d, h):
        super().__init__()
        self.K, self.d, self.h = K, d, h
        bound = 1.0 / math.sqrt(d)
        self.weight = nn.Parameter(torch.empty(K, d, h).uniform_(-bound, bound))
        self.bias = nn.Parameter(torch.empty(K, h).uniform_(-bound, bound))

    def branch(self, phi, k):
        if not 0 <= k < self.K:
            raise ValueError(f"branch {k} out of range for K={self.K}")
        if phi.shape[-1] != self.d:
            raise ValueError(f"expected feature dim {self.d}, got {phi.shape[-1]}")
        return F.relu(phi @ self.weight[k] + self.bias[k])

    def forward(self, phis):
        """``phis`` is (B, K', d) with K' <= K; returns (B, K', h) using branches 0..K'-1."""
        Kp = phis.shape[1]
        if Kp > self.K:
            raise ValueError(f"{Kp} branch features for {self.K} transforms")
        if phis.shape[-1] != self.d:
            raise ValueError(f"expected feature dim {self.d}, got {phis.shape[-1]}")
        return F.relu(torch.einsum("bkd,kdh->bkh", phis, self.weight[:Kp]) + self.bias[:Kp])


def branch_transform(phi, k, params: BranchTransforms):
    return params.branch(phi, k)


def fuse_max(branch_features):
    """Coordinate-wise max over branches.

    Accepts a list of (…, h) tensors or one tensor with the branch axis at -2.
    At exact ties torch routes the gradient to the first maximal branch.
    """
    if isinstance(branch_features, (list, tuple)):
        if not branch_features:
            raise ValueError("fuse_max needs at least one branch")
        branch_features = torch.stack(list(branch_features), dim=-2)
    if branch_features.shape[-2] == 0:
        raise ValueError("fuse_max needs at least one branch")
    return branch_features.max(dim=-2).values


def combine(v_x, v_s, v_t, mode):
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    parts = {"S": [v_s], "RS": [v_x, v_s], "RST": [v_x, v_s, v_t]}[mode]
    if any(p is None for p in parts):
        raise ValueError(f"mode {mode} is missing a required feature")
    return torch.cat(parts, dim=-1)


def combined_dim(mode, d, h, t_dim):
    return {"S": h, "RS": d + h, "RST": d + h + t_dim}[mode]


class ClassifierHead(nn.Module):
    def __init__(self, in_dim, num_classes):
        super().__init__()
        self.fc = nn.Linear(in_dim, num_classes)

    def forward(self, combined):
        return self.fc(combined)


def classify(combined, head: ClassifierHead):
    return torch.softmax(head(combined), dim=-1)


def xent_loss(probs, labels):
    """Mean ``-ln p[label]`` over the batch."""
    labels = torch.as_tensor(labels)
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= probs.shape[-1]):
        raise ValueError("label out of range")
    picked = probs.gather(-1, labels.view(-1, 1)).squeeze(-1)
    return -torch.log(picked).mean()


def xent_from_logits(logits, labels):
    labels = torch.as_tensor(labels)
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= logits.shape[-1]):
        raise ValueError("label out of range")
    return F.cross_entropy(logits, labels)
