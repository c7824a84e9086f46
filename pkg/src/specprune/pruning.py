"""Turn a prune set into a draft model that shares the target's weights."""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ConfigError
from .model import Model, ModelConfig, SublayerId, SublayerKind


@dataclass(frozen=True)
class PruneSet:
    """Sublayers selected for removal, plus provenance of the selection."""

    sublayers: frozenset[SublayerId]
    attn_ratio: float
    ffn_ratio: float
    fit_fingerprint: str = ""

    def to_dict(self) -> dict:
        subs = sorted(self.sublayers, key=lambda s: (s.layer_index, s.kind.value))
        return {
            "sublayers": [{"layer": s.layer_index, "kind": s.kind.value} for s in subs],
            "attn_ratio": self.attn_ratio,
            "ffn_ratio": self.ffn_ratio,
            "fit_fingerprint": self.fit_fingerprint,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PruneSet":
        subs = frozenset(
            SublayerId(e["layer"], SublayerKind(e["kind"])) for e in d["sublayers"]
        )
        return cls(subs, d["attn_ratio"], d["ffn_ratio"], d.get("fit_fingerprint", ""))


def build_draft(target: Model, prune_set: PruneSet) -> Model:
    """Draft = target weights with ``prune_set`` masked out.

    Parameter storage is shared (zero copy); the target is not modified.
    """
    valid = set(target.config.all_sublayers())
    bad = prune_set.sublayers - valid
    if bad:
        raise ConfigError(f"prune set contains sublayers outside the model: {sorted(map(str, bad))}")
    remaining = target.active_mask - prune_set.sublayers
    if not remaining:
        raise ConfigError("prune set would remove every active sublayer")
    return target.with_mask(remaining)


def _sublayer_flops(config: ModelConfig, kind: SublayerKind) -> int:
    """Per-token multiply-accumulates of one sublayer's projections."""
    if kind is SublayerKind.ATTENTION:
        return 4 * config.d_model * config.d_model  # Q, K, V, output
    return 2 * config.d_model * config.d_ff  # up and down projections


def draft_cost_model(config: ModelConfig, prune_set: PruneSet) -> float:
    """Analytic per-token cost of the draft relative to the full model.

    Counts projection multiply-accumulates of prunable sublayers only
    (embedding, head, and norms are shared overhead and identical for both
    models).  Always in (0, 1]; the empty prune set costs exactly 1.0.
    """
    config.validate()
    total = 0
    active = 0
    for sub in config.all_sublayers():
        f = _sublayer_flops(config, sub.kind)
        total += f
        if sub not in prune_set.sublayers:
            active += f
    return active / total
