"""Layer-sensitivity scores from squared gradient norms, and their uses.

Each active sublayer gets a score: the squared L2 norm of the calibration
loss gradient restricted to that sublayer's parameters, accumulated over
minibatches and normalized.  Low score = low sensitivity = safe to prune.

Two normalization conventions exist because the minibatch-gradient norm and
the per-sample average differ by cross-sample inner products:

* ``minibatch`` (default): one backward per minibatch, scores summed over
  minibatches and divided by the minibatch count;
* ``per_sample``: one backward per sample, divided by the sample count.

Per-batch contributions combine through exactly rounded summation
(``math.fsum``), so scores are independent of batch order and of how a
parallel reduction would have grouped them.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .corpus import Batch
from .errors import ConfigError, NumericError, UsageError
from .model import Model, SublayerId, SublayerKind, forward_train, loss_on_batch, sublayer_of_param
from .pruning import PruneSet
from .tensor import backward, trace


@dataclass
class FitTable:
    """Per-sublayer sensitivity scores plus how they were measured."""

    scores: dict[SublayerId, float]
    n_batches: int
    n_samples: int
    convention: str = "minibatch"
    metadata: dict = field(default_factory=dict)

    def fingerprint(self) -> str:
        return hashlib.sha256(
            json.dumps(fit_report(self), sort_keys=True).encode()
        ).hexdigest()[:16]


def _sublayer_sq_norm(grads: T.GradientRecord, sublayer: SublayerId) -> float:
    total = 0.0
    for key, g in grads.items():
        if sublayer_of_param(key) == sublayer:
            flat = g.ravel()
            total += float(np.dot(flat, flat))
    return total


def fit_from_contributions(
    contributions: list[dict[SublayerId, float]], normalizer: int
) -> dict[SublayerId, float]:
    """Combine per-batch (or per-sample) squared norms into final scores.

    Exactly rounded summation makes the result independent of the order the
    contributions arrive in.
    """
    if not contributions:
        raise UsageError("need at least one contribution")
    keys = contributions[0].keys()
    return {
        sub: math.fsum(c[sub] for c in contributions) / normalizer for sub in keys
    }


def accumulate_fit(
    model: Model,
    batches: list[Batch],
    *,
    per_sample: bool = False,
    loss_scale: float = 1.0,
    metadata: dict | None = None,
) -> FitTable:
    """One forward-backward per minibatch (or per sample), scores per sublayer."""
    if not batches:
        raise UsageError("accumulate_fit needs at least one batch")
    sublayers = sorted(model.active_mask)
    contributions: list[dict[SublayerId, float]] = []
    n_samples = 0

    def one_pass(batch: Batch) -> dict[SublayerId, float]:
        with trace():
            loss = loss_on_batch(model, batch)
            if loss_scale != 1.0:
                loss = T.mul(loss, loss_scale)
        grads = backward(loss)
        out = {}
        for sub in sublayers:
            sq = _sublayer_sq_norm(grads, sub)
            if not math.isfinite(sq):
                raise NumericError(f"non-finite gradient in sublayer {sub}")
            out[sub] = sq
        return out

    for batch in batches:
        n_samples += batch.inputs.shape[0]
        if per_sample:
            for b in range(batch.inputs.shape[0]):
                row = Batch(batch.inputs[b : b + 1], batch.targets[b : b + 1])
                contributions.append(one_pass(row))
        else:
            contributions.append(one_pass(batch))

    normalizer = n_samples if per_sample else len(batches)
    scores = fit_from_contributions(contributions, normalizer)
    return FitTable(
        scores=scores,
        n_batches=len(batches),
        n_samples=n_samples,
        convention="per_sample" if per_sample else "minibatch",
        metadata=dict(metadata or {}),
    )


def _rank_key(item: tuple[SublayerId, float]):
    sub, score = item
    # ties: deeper layers first, FFN ahead of attention
    return (score, -sub.layer_index, 0 if sub.kind is SublayerKind.FFN else 1)


def rank_sublayers(fit: FitTable) -> list[SublayerId]:
    """Ascending by score; the front of the list is pruned first."""
    if not fit.scores:
        raise UsageError("empty sensitivity table")
    return [sub for sub, _ in sorted(fit.scores.items(), key=_rank_key)]


def select_prune_set(fit: FitTable, attn_ratio: float, ffn_ratio: float) -> PruneSet:
    """Lowest-score floor(ratio * count) sublayers, independently per kind."""
    for name, ratio in (("attn_ratio", attn_ratio), ("ffn_ratio", ffn_ratio)):
        if not (0.0 <= ratio < 1.0):
            raise ConfigError(f"{name} must be in [0, 1), got {ratio}")
    ranked = rank_sublayers(fit)
    chosen: set[SublayerId] = set()
    for kind, ratio in ((SublayerKind.ATTENTION, attn_ratio), (SublayerKind.FFN, ffn_ratio)):
        of_kind = [s for s in ranked if s.kind is kind]
        chosen.update(of_kind[: int(ratio * len(of_kind))])
    return PruneSet(
        sublayers=frozenset(chosen),
        attn_ratio=attn_ratio,
        ffn_ratio=ffn_ratio,
        fit_fingerprint=fit.fingerprint(),
    )


# ---------------------------------------------------------------------------
# report


def fit_report(fit: FitTable) -> dict:
    """JSON-ready report: scores ranked ascending, raw plus log10."""
    rows = []
    for sub in rank_sublayers(fit):
        score = fit.scores[sub]
        rows.append(
            {
                "layer": sub.layer_index,
                "kind": sub.kind.value,
                "fit": score,
                "log10_fit": math.log10(score) if score > 0 else "-inf",
            }
        )
    return {
        "n_batches": fit.n_batches,
        "n_samples": fit.n_samples,
        "convention": fit.convention,
        "metadata": fit.metadata,
        "scores": rows,
    }


def parse_report(report: dict) -> FitTable:
    scores = {
        SublayerId(r["layer"], SublayerKind(r["kind"])): float(r["fit"])
        for r in report["scores"]
    }
    return FitTable(
        scores=scores,
        n_batches=report["n_batches"],
        n_samples=report["n_samples"],
        convention=report["convention"],
        metadata=report.get("metadata", {}),
    )


def format_report_table(fit: FitTable) -> str:
    """Aligned text table, lowest-sensitivity sublayer first."""
    lines = [f"{'rank':>4}  {'sublayer':<12} {'fit':>14}  {'log10':>9}"]
    for rank, sub in enumerate(rank_sublayers(fit)):
        score = fit.scores[sub]
        log = f"{math.log10(score):9.4f}" if score > 0 else "     -inf"
        lines.append(f"{rank:>4}  {str(sub):<12} {score:>14.6e}  {log}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# curvature sanity check


@dataclass
class KlCheckResult:
    epsilon: float
    measured_kl: float
    predicted_kl: float

    @property
    def ratio(self) -> float:
        if self.predicted_kl == 0.0:
            return math.nan
        return self.measured_kl / self.predicted_kl


def _unit_direction(model: Model, rng: np.random.Generator) -> dict[str, np.ndarray]:
    direction = {
        key: rng.standard_normal(t.data.shape) for key, t in model.params.items()
    }
    norm = math.sqrt(math.fsum(float(np.dot(d.ravel(), d.ravel())) for d in direction.values()))
    return {key: d / norm for key, d in direction.items()}


def _dot_record(record: T.GradientRecord, direction: dict[str, np.ndarray]) -> float:
    return math.fsum(
        float(np.dot(record[key].ravel(), d.ravel())) for key, d in direction.items()
    )


def _kl_from_logit_shift(logits: np.ndarray, shifted: np.ndarray) -> float:
    """KL(softmax(logits) || softmax(shifted)), stable for tiny shifts.

    Uses KL = -E_p[d] + log(E_p[exp(d)]) with d the logit difference; the
    expm1/log1p forms keep precision when d is microscopic.
    """
    p = np.exp(logits - logits.max())
    p /= p.sum()
    d = shifted - logits
    return float(-np.dot(p, d) + math.log1p(float(np.dot(p, np.expm1(d)))))


def kl_quadratic_check(
    model: Model,
    epsilon: float,
    rng: np.random.Generator,
    *,
    n_contexts: int = 4,
    context_len: int = 8,
    direction: dict[str, np.ndarray] | None = None,
) -> KlCheckResult:
    """Compare measured KL under a parameter nudge against its second-order
    prediction from the exact next-token curvature.

    Draws one random unit direction ``u`` over all parameters (the same rng
    state reproduces the same contexts and direction), perturbs by
    ``epsilon * u``, and measures the true KL between next-token
    distributions at ``n_contexts`` fixed contexts.  The prediction is
    ``0.5 * epsilon^2 * u' F u`` with the curvature taken exactly: the
    per-context quadratic form is ``E_y[s_y^2] - (E_y[s_y])^2`` under the
    model's own next-token distribution, where ``s_y`` is the directional
    derivative of logit ``y``, obtained by one backward pass per vocabulary
    entry.  The ratio tends to 1 as epsilon shrinks.
    """
    if epsilon == 0.0:
        raise UsageError("epsilon must be nonzero (the ratio is 0/0 at epsilon=0)")
    cfg = model.config
    contexts = rng.integers(0, cfg.vocab_size, size=(n_contexts, context_len))
    if direction is None:
        direction = _unit_direction(model, rng)

    perturbed_params = {
        key: T.Tensor._wrap(t.data + epsilon * direction[key])
        for key, t in model.params.items()
    }
    perturbed = Model(cfg, perturbed_params, model.active_mask)

    quadforms = []
    kls = []
    for ctx in contexts:
        with trace():
            logits = forward_train(model, ctx[None, :])
            picks = [
                T.index_scalar(logits, (0, context_len - 1, y))
                for y in range(cfg.vocab_size)
            ]
        base_row = logits.data[0, -1].astype(np.float64)
        s = np.array([_dot_record(backward(pick), direction) for pick in picks])
        p = np.exp(base_row - base_row.max())
        p /= p.sum()
        quadforms.append(float(np.dot(p, s**2) - np.dot(p, s) ** 2))

        shifted_row = forward_train(perturbed, ctx[None, :]).data[0, -1].astype(np.float64)
        kls.append(_kl_from_logit_shift(base_row, shifted_row))

    predicted = 0.5 * epsilon**2 * float(np.mean(quadforms))
    measured = float(np.mean(kls))
    return KlCheckResult(epsilon=epsilon, measured_kl=measured, predicted_kl=predicted)
