"""Shared test utilities: finite-difference gradient checking and tiny models."""

from __future__ import annotations

import numpy as np

from degenlab import autodiff as ad
from degenlab import model as M


def fd_gradcheck(build_loss, leaves, h=1e-5, rtol=1e-4, atol=1e-7):
    """Compare autodiff gradients on ``leaves`` against central differences.

    ``build_loss()`` must rebuild the scalar loss from the leaves' current
    data so the numeric probe sees every perturbation.
    """
    for leaf in leaves:
        leaf.grad = None
    loss = build_loss()
    ad.backward(loss)
    for leaf in leaves:
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        flat = leaf.data.ravel()
        numeric = np.zeros(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = build_loss().item()
            flat[i] = orig - h
            down = build_loss().item()
            flat[i] = orig
            numeric[i] = (up - down) / (2.0 * h)
        np.testing.assert_allclose(
            np.asarray(analytic).ravel(), numeric, rtol=rtol, atol=atol,
            err_msg="finite-difference mismatch",
        )


def tiny_model(arch="decoder_only", layers=1, dim=8, heads=2, ffn=12,
               vocab=6, positions=16, seed=0):
    cfg = M.ModelConfig(arch=arch, layers=layers, model_dim=dim, heads=heads,
                        ffn_dim=ffn, vocab_size=vocab, max_positions=positions,
                        dropout_rate=0.0, seed=seed)
    return M.init_parameters(cfg), cfg


def random_logprob_rows(rng, rows, vocab):
    """A normalized log-prob matrix derived from random logits."""
    logits = rng.normal(size=(rows, vocab))
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
