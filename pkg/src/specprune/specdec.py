"""Draft-propose / target-verify decoding, plus the vanilla baseline.

Each round the draft proposes ``k`` tokens autoregressively, the target
scores the whole block in one forward call, and an accept-reject walk
commits the longest accepted prefix plus one more token: a corrected sample
on rejection, a bonus sample on full acceptance.  The committed token's law
equals the target's own distribution exactly; greedy mode degenerates to
"accept while the argmaxes agree" and reproduces vanilla greedy decoding
token for token.

Randomness contract (sample mode): a single generator drives, in order per
round, the k proposal draws, then one acceptance uniform per position until
the first rejection, then the residual or bonus draw.  Replaying a seed
replays the run.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .corpus import EOS_TOKEN
from .errors import CapacityError, UsageError
from .model import KvCache, Model, forward_logits


@dataclass(frozen=True)
class GenerationParams:
    k: int = 4
    max_len: int = 128
    mode: str = "greedy"  # "greedy" | "sample"
    temperature: float = 1.0
    seed: int = 0
    eos_token: int | None = EOS_TOKEN

    def validate(self) -> None:
        if self.k < 1:
            raise UsageError(f"k must be >= 1, got {self.k}")
        if self.max_len < 1:
            raise UsageError(f"max_len must be >= 1, got {self.max_len}")
        if self.mode not in ("greedy", "sample"):
            raise UsageError(f"mode must be 'greedy' or 'sample', got {self.mode!r}")
        if self.mode == "sample" and not self.temperature > 0:
            raise UsageError(f"temperature must be > 0 in sample mode, got {self.temperature}")


@dataclass
class SpecRound:
    """Outcome of one propose/verify round (committed is post-trim)."""

    proposed: list[int]
    accept_probs: list[float]
    accepted_count: int
    committed: list[int]


@dataclass
class GenerationResult:
    prompt: list[int]
    tokens: list[int]  # generated tokens only
    rounds: list[SpecRound] | None
    target_calls: int
    draft_calls: int
    tail_steps: int = 0  # single-token steps taken after the context filled up
    truncated: bool = False
    truncated_tokens: int = 0  # sum over rounds of (accepted+1) - len(committed)

    @property
    def text_len(self) -> int:
        return len(self.prompt) + len(self.tokens)


# ---------------------------------------------------------------------------
# distribution helpers


def token_distribution(logits_row: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    """Temperature softmax as float64; sums to 1 up to roundoff."""
    x = np.asarray(logits_row, dtype=np.float64) / temperature
    e = np.exp(x - x.max())
    return e / e.sum()


def validate_distribution(p: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or p.size < 2:
        raise UsageError(f"distribution must be a 1-D vector, got shape {p.shape}")
    if (p < 0).any() or abs(float(p.sum()) - 1.0) > 1e-9:
        raise UsageError("distribution must be non-negative and sum to 1")
    return p


def sample_from(dist: np.ndarray, rng: np.random.Generator) -> int:
    """Inverse-CDF draw; consumes exactly one uniform."""
    u = rng.random()
    idx = int(np.searchsorted(np.cumsum(dist), u, side="right"))
    return min(idx, dist.size - 1)


def acceptance_prob(p: np.ndarray, q: np.ndarray, token: int) -> float:
    """min(1, p[token]/q[token]); the proposal came from q, so q[token] > 0."""
    qt = float(q[token])
    if qt <= 0.0:
        raise UsageError(
            f"acceptance_prob called with q[{token}] = {qt}; proposals must come from q"
        )
    return min(1.0, float(p[token]) / qt)


def residual_distribution(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Normalized positive part of (p - q); sampled upon first rejection."""
    diff = np.maximum(np.asarray(p, dtype=np.float64) - np.asarray(q, dtype=np.float64), 0.0)
    total = diff.sum()
    if total <= 0.0:
        raise UsageError("residual is degenerate: p equals q, rejection impossible")
    return diff / total


def induced_one_step_distribution(p, q, residual_fn=residual_distribution) -> np.ndarray:
    """Exact law of the first committed token for one proposal step.

    accept path contributes q(y) * min(1, p(y)/q(y)) = min(p, q)(y); the
    leftover mass goes through ``residual_fn``.  With the true residual this
    equals p identically; ``residual_fn`` is injectable so tests can show a
    broken residual fails.
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    accept = np.minimum(p, q)
    reject_mass = 1.0 - accept.sum()
    if reject_mass <= 0.0 or not (p > q).any():
        # p == q (up to roundoff): rejection is impossible
        return accept.copy()
    return accept + reject_mass * np.asarray(residual_fn(p, q), dtype=np.float64)


# ---------------------------------------------------------------------------
# block verification


def verify_block(
    target_dists,
    proposals,
    draft_dists,
    mode: str,
    rng: np.random.Generator | None = None,
) -> SpecRound:
    """Walk the proposals against k+1 target distributions.

    ``target_dists`` has one entry per proposal context plus the position
    after the last proposal (used for the bonus token).
    """
    k = len(proposals)
    if len(target_dists) != k + 1 or len(draft_dists) != k:
        raise UsageError(
            f"verify_block wants k+1 target and k draft distributions, got "
            f"{len(target_dists)} and {len(draft_dists)} for k={k}"
        )
    ps = [validate_distribution(p) for p in target_dists]
    qs = [validate_distribution(q) for q in draft_dists]

    accept_probs: list[float] = []
    if mode == "greedy":
        for i, tok in enumerate(proposals):
            if int(np.argmax(ps[i])) == tok:
                accept_probs.append(1.0)
            else:
                accept_probs.append(0.0)
                committed = list(proposals[:i]) + [int(np.argmax(ps[i]))]
                return SpecRound(list(proposals), accept_probs, i, committed)
        committed = list(proposals) + [int(np.argmax(ps[k]))]
        return SpecRound(list(proposals), accept_probs, k, committed)

    if mode != "sample":
        raise UsageError(f"unknown mode {mode!r}")
    if rng is None:
        raise UsageError("sample mode needs an rng")
    for i, tok in enumerate(proposals):
        alpha = acceptance_prob(ps[i], qs[i], tok)
        accept_probs.append(alpha)
        if rng.random() >= alpha:
            corrected = sample_from(residual_distribution(ps[i], qs[i]), rng)
            committed = list(proposals[:i]) + [corrected]
            return SpecRound(list(proposals), accept_probs, i, committed)
    bonus = sample_from(ps[k], rng)
    return SpecRound(list(proposals), accept_probs, k, list(proposals) + [bonus])


# ---------------------------------------------------------------------------
# generation loops


def _check_prompt(model: Model, prompt) -> list[int]:
    prompt = [int(t) for t in prompt]
    if not prompt:
        raise UsageError("prompt must be non-empty")
    if len(prompt) > model.config.max_context:
        raise CapacityError(
            f"prompt length {len(prompt)} exceeds max_context {model.config.max_context}"
        )
    return prompt


def _pick(logits_row: np.ndarray, params: GenerationParams, rng) -> int:
    if params.mode == "greedy":
        return int(np.argmax(logits_row))
    return sample_from(token_distribution(logits_row, params.temperature), rng)


def vanilla_generate(model: Model, prompt, params: GenerationParams) -> GenerationResult:
    """One target forward per generated token (after the prompt prefill)."""
    params.validate()
    prompt = _check_prompt(model, prompt)
    rng = np.random.default_rng(params.seed)
    cache = KvCache(model)
    rows, cache = forward_logits(model, prompt, cache)
    pending = rows[-1]
    calls = 1
    tokens: list[int] = []
    truncated = False
    while len(tokens) < params.max_len:
        tok = _pick(pending, params, rng)
        tokens.append(tok)
        if tok == params.eos_token or len(tokens) >= params.max_len:
            break
        if cache.cached_len + 1 > model.config.max_context:
            truncated = True
            break
        rows, cache = forward_logits(model, [tok], cache)
        pending = rows[-1]
        calls += 1
    return GenerationResult(
        prompt=prompt,
        tokens=tokens,
        rounds=None,
        target_calls=calls,
        draft_calls=0,
        truncated=truncated,
    )


def spec_generate(target: Model, draft: Model, prompt, params: GenerationParams) -> GenerationResult:
    """Draft-propose / target-verify loop; lossless for the target's law."""
    params.validate()
    prompt = _check_prompt(target, prompt)
    if draft.config.vocab_size != target.config.vocab_size:
        raise UsageError("draft and target must share the vocabulary")
    rng = np.random.default_rng(params.seed)
    temp = params.temperature

    t_cache = KvCache(target)
    d_cache = KvCache(draft)
    t_rows, t_cache = forward_logits(target, prompt, t_cache)
    d_rows, d_cache = forward_logits(draft, prompt, d_cache)
    t_pending: np.ndarray | None = t_rows[-1]
    d_pending: np.ndarray | None = d_rows[-1]
    t_calls = d_calls = 1

    text = list(prompt)
    tokens: list[int] = []
    rounds: list[SpecRound] = []
    truncated = False
    truncated_tokens = 0
    tail_steps = 0
    finished = False
    max_context = target.config.max_context

    while len(tokens) < params.max_len:
        ctx_len = len(text)
        k_eff = min(params.k, max_context - ctx_len)
        if k_eff < 1:
            break  # context is full: fall through to the single-step tail

        # --- draft proposes k_eff tokens autoregressively
        sync_d = text[d_cache.cached_len :]
        if sync_d:
            d_rows, d_cache = forward_logits(draft, sync_d, d_cache)
            d_pending = d_rows[-1]
            d_calls += 1
        assert d_pending is not None
        proposals: list[int] = []
        draft_dists: list[np.ndarray] = []
        row = d_pending
        for i in range(k_eff):
            dist = token_distribution(row, temp if params.mode == "sample" else 1.0)
            if params.mode == "greedy":
                tok = int(np.argmax(row))
            else:
                tok = sample_from(dist, rng)
            proposals.append(tok)
            draft_dists.append(dist)
            if i < k_eff - 1:
                d_rows, d_cache = forward_logits(draft, [tok], d_cache)
                row = d_rows[-1]
                d_calls += 1
        d_pending = None

        # --- target scores the whole block in one call
        sync_t = text[t_cache.cached_len :]
        t_rows, t_cache = forward_logits(target, sync_t + proposals, t_cache)
        t_calls += 1
        if sync_t:
            block_rows = t_rows[len(sync_t) - 1 :]
        else:
            assert t_pending is not None
            block_rows = np.vstack([t_pending[None, :], t_rows])
        t_pending = None
        target_dists = [
            token_distribution(r, temp if params.mode == "sample" else 1.0)
            for r in block_rows
        ]

        rnd = verify_block(target_dists, proposals, draft_dists, params.mode, rng)

        # --- trim for EOS and the length budget, then commit
        commit = list(rnd.committed)
        if params.eos_token is not None and params.eos_token in commit:
            commit = commit[: commit.index(params.eos_token) + 1]
            finished = True
        budget = params.max_len - len(tokens)
        if len(commit) > budget:
            commit = commit[:budget]
            finished = True
        truncated_tokens += (rnd.accepted_count + 1) - len(commit)
        rnd.committed = commit
        rounds.append(rnd)
        tokens.extend(commit)
        text.extend(commit)
        if finished:
            break

        # --- roll both caches back to the accepted prefix
        t_cache.truncate(ctx_len + rnd.accepted_count)
        d_cache.truncate(min(d_cache.cached_len, ctx_len + rnd.accepted_count))

    # context wall: finish one token at a time, exactly like the baseline
    while not finished and len(tokens) < params.max_len:
        if t_pending is None:
            need = text[t_cache.cached_len :]
            if t_cache.cached_len + len(need) > max_context:
                truncated = True
                break
            t_rows, t_cache = forward_logits(target, need, t_cache)
            t_pending = t_rows[-1]
            t_calls += 1
            tail_steps += 1
        tok = _pick(t_pending, params, rng)
        t_pending = None
        tokens.append(tok)
        text.append(tok)
        if tok == params.eos_token:
            break

    return GenerationResult(
        prompt=prompt,
        tokens=tokens,
        rounds=rounds,
        target_calls=t_calls,
        draft_calls=d_calls,
        tail_steps=tail_steps,
        truncated=truncated,
        truncated_tokens=truncated_tokens,
    )
