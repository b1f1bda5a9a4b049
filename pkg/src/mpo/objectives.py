"""Training and diagnostic objectives.

Cross-entropy, the Bradley-Terry preference probability, the direct
preference loss against a frozen reference policy, its implicit reward,
the combined (preference + cross-entropy) loss, and a Monte Carlo KL
diagnostic. Losses are returned as tape scalars so the trainer can call
backward on them; diagnostics are plain floats.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autodiff import Tensor, add, scale, softplus, tmean
from .model import PolicyCheckpoint, TokenSequence, sample, sequence_logprob

Pair = tuple[TokenSequence, TokenSequence, TokenSequence]  # (x, y_w, y_l)


@dataclass(frozen=True)
class LossBreakdown:
    """Scalar view of one combined-loss evaluation.

    `combined == lam * dpo_term + ce_term` holds to float rounding; `loss`
    is the differentiable node the trainer steps on.
    """

    dpo_term: float
    ce_term: float
    combined: float
    reward_margin: float
    loss: Tensor


def ce_loss(model: PolicyCheckpoint, x: TokenSequence, y: TokenSequence) -> Tensor:
    """Mean per-token negative log-likelihood of y under teacher forcing."""
    if len(y.ids) == 0:
        raise ValueError("ce_loss: empty response")
    total, per_token = sequence_logprob(model, x, y)
    return scale(total, -1.0 / len(per_token))


def mean_ce(model: PolicyCheckpoint, items: Sequence[tuple[TokenSequence, TokenSequence]]) -> Tensor:
    """Batch cross-entropy: mean over sequences of the per-sequence token mean."""
    if not items:
        raise ValueError("mean_ce: empty batch")
    acc = None
    for x, y in items:
        term = ce_loss(model, x, y)
        acc = term if acc is None else add(acc, term)
    return scale(acc, 1.0 / len(items))


def bt_probability(logratio_w: float, logratio_l: float, beta: float) -> float:
    """Probability that the first response is preferred, sigma(beta * margin).

    Evaluated from |margin| and complemented, so swapping the arguments
    maps p to exactly 1 - p, and the result stays inside (0, 1) even for
    extreme margins.
    """
    if beta <= 0:
        raise ValueError(f"bt_probability: beta must be > 0, got {beta}")
    m = beta * (logratio_w - logratio_l)
    if not np.isfinite(m):
        raise ValueError("bt_probability: non-finite log-ratio margin")
    hi = 1.0 / (1.0 + np.exp(-abs(m)))
    hi = min(hi, np.nextafter(1.0, 0.0))
    return float(hi) if m >= 0 else float(1.0 - hi)


def preference_terms(
    model: PolicyCheckpoint,
    ref_model: PolicyCheckpoint,
    batch: Sequence[Pair],
    beta: float,
    ce_items: Sequence[tuple[TokenSequence, TokenSequence]] | None = None,
) -> tuple[Tensor, Tensor, float]:
    """Shared core of the preference losses: (dpo, ce, mean margin).

    The preferred-response log-probs feed both the preference term and
    (by default) the cross-entropy term, so one teacher-forced pass per
    sequence suffices. Both returned tensors are tape scalars.
    """
    if beta <= 0:
        raise ValueError(f"preference loss: beta must be > 0, got {beta}")
    if not batch:
        raise ValueError("preference loss: empty batch")
    dpo_acc = None
    ce_acc = None
    margin_sum = 0.0
    for x, y_w, y_l in batch:
        lp_w, per_tok = sequence_logprob(model, x, y_w)
        lp_l, _ = sequence_logprob(model, x, y_l)
        ref_w, _ = sequence_logprob(ref_model, x, y_w)
        ref_l, _ = sequence_logprob(ref_model, x, y_l)
        const = Tensor(np.asarray(ref_l.item() - ref_w.item()))
        z = scale(add(add(lp_w, scale(lp_l, -1.0)), const), beta)
        margin_sum += z.item()
        term = softplus(scale(z, -1.0))
        dpo_acc = term if dpo_acc is None else add(dpo_acc, term)
        if ce_items is None:
            ce_term = scale(lp_w, -1.0 / len(per_tok))
            ce_acc = ce_term if ce_acc is None else add(ce_acc, ce_term)
    dpo = scale(dpo_acc, 1.0 / len(batch))
    if ce_items is None:
        ce = scale(ce_acc, 1.0 / len(batch))
    else:
        ce = mean_ce(model, ce_items)
    return dpo, ce, margin_sum / len(batch)


def dpo_loss(
    model: PolicyCheckpoint,
    ref_model: PolicyCheckpoint,
    batch: Sequence[Pair],
    beta: float,
) -> Tensor:
    """Mean -log sigma(beta * margin) over the preference pairs.

    The reference policy contributes constants only, so gradients flow
    into the trainable policy alone. -log sigma(z) is evaluated as
    softplus(-z) for stability.
    """
    dpo, _, _ = preference_terms(model, ref_model, batch, beta)
    return dpo


def implicit_reward(
    model: PolicyCheckpoint,
    ref_model: PolicyCheckpoint,
    x: TokenSequence,
    y: TokenSequence,
    beta: float,
) -> float:
    """beta * log(pi(y|x) / pi_ref(y|x)); the intractable per-prompt constant
    is omitted since it cancels in every pairwise use."""
    lp, _ = sequence_logprob(model, x, y)
    ref, _ = sequence_logprob(ref_model, x, y)
    return beta * (lp.item() - ref.item())


def mpo_loss(
    model: PolicyCheckpoint,
    ref_model: PolicyCheckpoint,
    batch: Sequence[Pair],
    beta: float,
    lam: float,
    ce_items: Sequence[tuple[TokenSequence, TokenSequence]] | None = None,
) -> LossBreakdown:
    """Combined loss lam * dpo + ce.

    The cross-entropy term anchors on the preferred responses of the
    batch unless `ce_items` supplies an explicit (x, y) stream (the
    held-out-data reading of the regularizer).
    """
    if lam < 0:
        raise ValueError(f"mpo_loss: lam must be >= 0, got {lam}")
    dpo, ce, margin = preference_terms(model, ref_model, batch, beta, ce_items)
    loss = add(scale(dpo, lam), ce)
    return LossBreakdown(
        dpo_term=dpo.item(),
        ce_term=ce.item(),
        combined=loss.item(),
        reward_margin=margin,
        loss=loss,
    )


@dataclass(frozen=True)
class KlEstimate:
    mean: float
    stderr: float
    n_samples: int


def kl_estimate(
    model: PolicyCheckpoint,
    ref_model: PolicyCheckpoint,
    prompts: Sequence[TokenSequence],
    n_samples: int,
    seed: int,
) -> KlEstimate:
    """Monte Carlo estimate of E_x E_{y~pi}[log pi(y|x) - log pi_ref(y|x)].

    Draws are exact ancestral samples from the trainable policy
    (temperature 1, untruncated support), cycling over the prompts.
    Diagnostic only; nothing here touches the tape.
    """
    if n_samples < 1:
        raise ValueError(f"kl_estimate: n_samples must be >= 1, got {n_samples}")
    if not prompts:
        raise ValueError("kl_estimate: no prompts")
    support = model.vocab.response_support
    vals = np.empty(n_samples)
    for s in range(n_samples):
        x = prompts[s % len(prompts)]
        rng = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(s,)))
        )
        y = sample(model, x, temperature=1.0, top_k=support, rng=rng)
        lp, _ = sequence_logprob(model, x, y)
        ref, _ = sequence_logprob(ref_model, x, y)
        vals[s] = lp.item() - ref.item()
    stderr = float(vals.std(ddof=1) / np.sqrt(n_samples)) if n_samples > 1 else float("inf")
    return KlEstimate(mean=float(vals.mean()), stderr=stderr, n_samples=n_samples)
