"""Prototype consistency alignment.

Per-image class prototypes are the probability-weighted means of the pixel
feature vectors; cosine similarity between prototypes and features gives a
prototypical prediction whose class softmax serves as a pseudo-labeling
target for the network's own probabilities. The consistency loss is the
per-pixel mean squared difference between that target and the probabilities,
with the target frozen (no gradient through the prototype branch).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

EPS = 1e-8


@dataclass
class PrototypeBundle:
    """Prototype matrix P (D, C), similarity map S and its class softmax SS (C, H, W)."""

    prototypes: np.ndarray
    similarity: np.ndarray
    prototypical: np.ndarray


def compute_prototypes(features: np.ndarray, probs: np.ndarray) -> np.ndarray:
    """Probability-weighted feature mean per class: (D,H,W),(C,H,W) -> (D,C).

    A class with (near) zero total probability mass yields a (near) zero
    column; EPS in the denominator keeps the division defined.
    """
    d = features.shape[0]
    c = probs.shape[0]
    f2 = features.reshape(d, -1)
    s2 = probs.reshape(c, -1)
    num = f2 @ s2.T
    mass = s2.sum(axis=1)
    return num / (mass + EPS)


def similarity_map(prototypes: np.ndarray, features: np.ndarray) -> np.ndarray:
    """Cosine similarity of every pixel feature with every prototype: (C, H, W).

    Entries where either vector is zero come out as 0.
    """
    d, h, w = features.shape
    f2 = features.reshape(d, -1)
    p_norm = np.sqrt((prototypes**2).sum(axis=0))
    f_norm = np.sqrt((f2**2).sum(axis=0))
    sim = (prototypes.T @ f2) / (p_norm[:, None] * f_norm[None, :] + EPS)
    return sim.reshape(-1, h, w)


def class_softmax(scores: np.ndarray) -> np.ndarray:
    """Numerically stable softmax over the leading (class) axis."""
    z = scores - scores.max(axis=0, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=0, keepdims=True)


def prototypical_prediction(similarity: np.ndarray) -> np.ndarray:
    """Class softmax of the similarity map."""
    return class_softmax(similarity)


def compute_bundle(features: np.ndarray, probs: np.ndarray) -> PrototypeBundle:
    p = compute_prototypes(features, probs)
    s = similarity_map(p, features)
    return PrototypeBundle(prototypes=p, similarity=s, prototypical=prototypical_prediction(s))


def consistency_loss(target: np.ndarray, probs: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared difference between the frozen prototypical target and probs.

    Normalized by the pixel count so the magnitude is resolution-independent.
    Returns (value, gradient w.r.t. the logits behind ``probs``); the target
    is a constant, so the only gradient path is the direct probability term.
    """
    if target.shape != probs.shape:
        raise ValueError("shape mismatch between target and probabilities")
    n = probs.shape[1] * probs.shape[2]
    diff = probs - target
    value = float((diff**2).sum() / n)
    g_sigma = 2.0 * diff / n
    g_logits = probs * (g_sigma - (g_sigma * probs).sum(axis=0, keepdims=True))
    return value, g_logits
