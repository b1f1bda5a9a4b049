"""Candidate generation and multidimensional preference-set construction.

For each prompt the sampled candidates are scored on every enabled metric;
the best candidate per metric joins the preferred set and the worst joins
the dispreferred set. Cross-set overlap is resolved on the dispreferred
side by walking each metric's ranking toward better candidates, keeping
the preferred set intact. Filtering constraints (exact-score requirements
on preferred members, minimum score gaps between the contributing picks)
either pass or reject the whole item; rejections are counted, never
silently dropped.

Also provides the naive rank-sum baseline that collapses all metrics into
one ordering.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .metrics import (
    HIGHER_IS_BETTER,
    LOWER_IS_BETTER,
    METRIC_NAMES,
    METRIC_POLARITY,
    MetricScores,
    cer,
    log_f0_rmse_dtw,
    speaker_similarity,
)
from .model import PolicyCheckpoint, TokenSequence, response_seq, sample
from .synthtask import CorpusItem, SynthWorld, decode, response_content

# Seed-derivation domains: every stream is SeedSequence(base, spawn_key=(domain, ...)).
SEED_DOMAIN_CANDIDATES = 1
SEED_DOMAIN_PAIRS = 2
SEED_DOMAIN_ORDER = 3
SEED_DOMAIN_KL = 4


@dataclass(frozen=True)
class CandidateSampling:
    temperature: float = 1.2
    top_k: int = 12

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError(f"CandidateSampling: temperature must be > 0, got {self.temperature}")
        if self.top_k < 1:
            raise ValueError(f"CandidateSampling: top_k must be >= 1, got {self.top_k}")


@dataclass(frozen=True)
class CandidateRecord:
    index: int
    ids: tuple[int, ...]  # response tokens, EOS included
    scores: MetricScores
    seed: int


@dataclass(frozen=True)
class PreferenceExample:
    """Disjoint preferred / dispreferred candidate index sets with provenance."""

    w_set: tuple[int, ...]
    l_set: tuple[int, ...]
    # metric name -> {"w": candidate index, "l": candidate index or None}
    provenance: dict[str, dict]

    def __post_init__(self):
        if not self.w_set or not self.l_set:
            raise ValueError("PreferenceExample: both sets must be non-empty")
        if set(self.w_set) & set(self.l_set):
            raise ValueError("PreferenceExample: sets must be disjoint")


@dataclass(frozen=True)
class Rejection:
    reason: str


@dataclass(frozen=True)
class SetConstraints:
    """Filtering rules, keyed by metric column index.

    exact_w: every preferred-set member must score exactly this value.
    min_gap: |score(w pick) - score(l pick)| of the contributing metric
    must reach this threshold (waived if the metric's dispreferred pick
    was dropped during overlap resolution).
    """

    exact_w: dict[int, float] = field(default_factory=dict)
    min_gap: dict[int, float] = field(default_factory=dict)

    @staticmethod
    def none() -> "SetConstraints":
        return SetConstraints()


def default_constraints(metric_names: tuple[str, ...], sim_gap: float = 0.1, prosody_gap: float = 0.1) -> SetConstraints:
    """The production filter: preferred transcripts must be exact, and the
    similarity / prosody picks must differ by at least the given gaps."""
    exact_w: dict[int, float] = {}
    min_gap: dict[int, float] = {}
    for j, name in enumerate(metric_names):
        if name == "cer":
            exact_w[j] = 0.0
        elif name == "spk_sim":
            min_gap[j] = sim_gap
        elif name == "prosody_rmse":
            min_gap[j] = prosody_gap
    return SetConstraints(exact_w=exact_w, min_gap=min_gap)


def _orders(scores: np.ndarray, polarity: str) -> tuple[np.ndarray, np.ndarray]:
    """(best-to-worst, worst-to-best) candidate orderings; ties break to the
    lowest candidate index at both ends."""
    n = scores.shape[0]
    key = scores if polarity == LOWER_IS_BETTER else -scores
    best = np.lexsort((np.arange(n), key))
    worst = np.lexsort((np.arange(n), -key))
    return best, worst


def resolve_overlap(
    w_set: tuple[int, ...],
    l_picks: dict[int, int],
    worst_orders: dict[int, np.ndarray],
) -> dict[int, int | None]:
    """Move colliding dispreferred picks toward better candidates.

    For every metric whose pick sits in the preferred set, walk that
    metric's worst-to-best ordering until a candidate outside the
    preferred set is found; a metric whose ordering is exhausted drops
    its contribution (None). The preferred set is never touched.
    """
    w = set(w_set)
    resolved: dict[int, int | None] = {}
    for j, pick in l_picks.items():
        if pick not in w:
            resolved[j] = pick
            continue
        replacement: int | None = None
        for cand in worst_orders[j]:
            if int(cand) not in w:
                replacement = int(cand)
                break
        resolved[j] = replacement
    return resolved


def build_preference_set(
    score_table: np.ndarray,
    polarities: tuple[str, ...],
    constraints: SetConstraints,
    metric_names: tuple[str, ...] | None = None,
) -> PreferenceExample | Rejection:
    """Construct one preference example from a candidates-by-metrics score table.

    Returns a `Rejection` (a normal outcome, to be counted) when the
    dispreferred side empties out during overlap resolution or a
    filtering constraint fails.
    """
    table = np.asarray(score_table, dtype=np.float64)
    if table.ndim != 2 or table.shape[1] != len(polarities):
        raise ValueError(
            f"build_preference_set: score table {table.shape} does not match "
            f"{len(polarities)} polarities"
        )
    n, m = table.shape
    if n < 2:
        raise ValueError(f"build_preference_set: need at least 2 candidates, got {n}")
    if metric_names is None:
        metric_names = tuple(f"metric{j}" for j in range(m))

    worst_orders: dict[int, np.ndarray] = {}
    w_picks: dict[int, int] = {}
    l_picks: dict[int, int] = {}
    for j in range(m):
        best, worst = _orders(table[:, j], polarities[j])
        worst_orders[j] = worst
        w_picks[j] = int(best[0])
        l_picks[j] = int(worst[0])

    w_set: list[int] = []
    for j in range(m):
        if w_picks[j] not in w_set:
            w_set.append(w_picks[j])

    resolved = resolve_overlap(tuple(w_set), l_picks, worst_orders)
    l_set: list[int] = []
    for j in range(m):
        pick = resolved[j]
        if pick is not None and pick not in l_set:
            l_set.append(pick)
    if not l_set:
        return Rejection("no dispreferred candidate outside the preferred set")

    for j, required in constraints.exact_w.items():
        for c in w_set:
            if table[c, j] != required:
                return Rejection(
                    f"preferred candidate {c} violates {metric_names[j]} == {required}"
                )
    for j, gap in constraints.min_gap.items():
        lp = resolved[j]
        if lp is None:
            continue
        if abs(table[w_picks[j], j] - table[lp, j]) < gap:
            return Rejection(f"{metric_names[j]} gap below {gap}")

    provenance = {
        metric_names[j]: {"w": w_picks[j], "l": resolved[j]} for j in range(m)
    }
    return PreferenceExample(w_set=tuple(w_set), l_set=tuple(l_set), provenance=provenance)


def sample_pair(example: PreferenceExample, rng: np.random.Generator) -> tuple[int, int]:
    """One uniform independent draw from each set."""
    w = int(example.w_set[rng.integers(len(example.w_set))])
    l = int(example.l_set[rng.integers(len(example.l_set))])
    return w, l


def competition_ranks(scores: np.ndarray, polarity: str) -> np.ndarray:
    """0 = best; tied candidates share the lower rank and later ranks skip."""
    key = scores if polarity == LOWER_IS_BETTER else -scores
    return np.array([(key < k).sum() for k in key], dtype=np.int64)


def combined_rankings_baseline(
    score_table: np.ndarray, polarities: tuple[str, ...]
) -> tuple[int, int, np.ndarray]:
    """Rank-sum pair selection: per metric competition ranks are summed and
    the lowest / highest totals become the preferred / dispreferred pick.

    Ties break by candidate index: lowest wins the preferred slot,
    highest wins the dispreferred slot. Returns (w, l, totals).
    """
    table = np.asarray(score_table, dtype=np.float64)
    n, m = table.shape
    if n < 2 or m != len(polarities):
        raise ValueError(f"combined_rankings_baseline: bad table shape {table.shape}")
    totals = np.zeros(n, dtype=np.int64)
    for j in range(m):
        totals += competition_ranks(table[:, j], polarities[j])
    w = int(np.argmin(totals))
    l = int(n - 1 - np.argmax(totals[::-1]))
    return w, l, totals


# ---------------------------------------------------------------------------
# candidate generation and scoring against a corpus
# ---------------------------------------------------------------------------


def score_candidate(world: SynthWorld, item: CorpusItem, ids: tuple[int, ...]) -> MetricScores:
    """Metrics of one response against the item's reference.

    A candidate that is empty after EOS trimming is kept with worst-case
    scores (its transcript error comes from the genuinely empty
    hypothesis) so the candidate count per prompt stays fixed.
    """
    content = response_content(world, ids)
    if not content:
        return MetricScores(
            cer=cer((), item.target_transcript),
            spk_sim=-1.0,
            prosody_rmse=world.prosody_bound(),
        )
    transcript, embedding, contour = decode(world, ids)
    if np.linalg.norm(embedding) == 0.0:
        sim = -1.0
    else:
        sim = speaker_similarity(embedding, item.ref_embedding)
    return MetricScores(
        cer=cer(transcript, item.target_transcript),
        spk_sim=sim,
        prosody_rmse=log_f0_rmse_dtw(contour, item.ref_contour),
    )


def candidate_seed(base_seed: int, item_index: int, candidate_index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(
        base_seed, spawn_key=(SEED_DOMAIN_CANDIDATES, item_index, candidate_index)
    )


def _gen_for_item(
    model: PolicyCheckpoint,
    world: SynthWorld,
    item: CorpusItem,
    n_per_prompt: int,
    sampling: CandidateSampling,
    base_seed: int,
) -> list[CandidateRecord]:
    records = []
    for k in range(n_per_prompt):
        ss = candidate_seed(base_seed, item.index, k)
        rng = np.random.Generator(np.random.PCG64(ss))
        y = sample(model, item.prompt, sampling.temperature, sampling.top_k, rng)
        records.append(
            CandidateRecord(
                index=k,
                ids=y.ids,
                scores=score_candidate(world, item, y.ids),
                seed=base_seed,
            )
        )
    return records


def generate_candidates(
    model: PolicyCheckpoint,
    world: SynthWorld,
    items: list[CorpusItem],
    n_per_prompt: int,
    sampling: CandidateSampling,
    base_seed: int,
    workers: int = 1,
) -> list[list[CandidateRecord]]:
    """n_per_prompt scored samples per corpus item, deterministically seeded
    per (base seed, item index, candidate index). Worker fan-out never
    changes the result: outputs are merged in corpus order."""
    if n_per_prompt < 2:
        raise ValueError(f"generate_candidates: n_per_prompt must be >= 2, got {n_per_prompt}")
    if sampling.top_k > model.vocab.response_support:
        raise ValueError(
            f"generate_candidates: top_k {sampling.top_k} exceeds response support "
            f"{model.vocab.response_support}"
        )
    if workers <= 1:
        return [
            _gen_for_item(model, world, it, n_per_prompt, sampling, base_seed) for it in items
        ]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [
            pool.submit(_gen_for_item, model, world, it, n_per_prompt, sampling, base_seed)
            for it in items
        ]
        return [f.result() for f in futures]


# ---------------------------------------------------------------------------
# dataset records and files
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PrefsetRecord:
    item_index: int
    prompt: TokenSequence
    candidates: tuple[CandidateRecord, ...]
    example: PreferenceExample | None
    reason: str | None  # set when rejected

    @property
    def accepted(self) -> bool:
        return self.example is not None


def build_prefset_records(
    loaded: list[tuple[int, TokenSequence, list[CandidateRecord]]],
    metric_names: tuple[str, ...],
    constraints: SetConstraints,
) -> list[PrefsetRecord]:
    """Run set construction over (item index, prompt, candidates) triples."""
    polarities = tuple(METRIC_POLARITY[m] for m in metric_names)
    cols = [METRIC_NAMES.index(m) for m in metric_names]
    records = []
    for item_index, prompt, cands in loaded:
        table = np.array([c.scores.as_tuple() for c in cands])[:, cols]
        out = build_preference_set(table, polarities, constraints, metric_names)
        if isinstance(out, Rejection):
            records.append(PrefsetRecord(item_index, prompt, tuple(cands), None, out.reason))
        else:
            records.append(PrefsetRecord(item_index, prompt, tuple(cands), out, None))
    return records


def candidate_triples(
    items: list[CorpusItem], candidates: list[list[CandidateRecord]]
) -> list[tuple[int, TokenSequence, list[CandidateRecord]]]:
    if len(items) != len(candidates):
        raise ValueError("candidate_triples: items and candidate lists differ in length")
    return [(it.index, it.prompt, list(cs)) for it, cs in zip(items, candidates)]


def rejection_report(records: list[PrefsetRecord]) -> dict[str, int]:
    report: dict[str, int] = {"accepted": 0, "rejected": 0}
    for r in records:
        if r.accepted:
            report["accepted"] += 1
        else:
            report["rejected"] += 1
            key = f"rejected: {r.reason}"
            report[key] = report.get(key, 0) + 1
    return report


def _candidate_to_json(c: CandidateRecord) -> dict:
    return {
        "index": c.index,
        "ids": list(c.ids),
        "seed": c.seed,
        "cer": c.scores.cer,
        "spk_sim": c.scores.spk_sim,
        "prosody_rmse": c.scores.prosody_rmse,
    }


def _candidate_from_json(doc: dict) -> CandidateRecord:
    return CandidateRecord(
        index=int(doc["index"]),
        ids=tuple(doc["ids"]),
        scores=MetricScores(doc["cer"], doc["spk_sim"], doc["prosody_rmse"]),
        seed=int(doc["seed"]),
    )


def save_candidates(
    items: list[CorpusItem], candidates: list[list[CandidateRecord]], path
) -> None:
    with open(path, "w") as f:
        for item, cands in zip(items, candidates):
            rec = {
                "item": item.index,
                "prompt": list(item.prompt.ids),
                "candidates": [_candidate_to_json(c) for c in cands],
            }
            f.write(json.dumps(rec, sort_keys=True))
            f.write("\n")


def load_candidates(path) -> list[tuple[int, TokenSequence, list[CandidateRecord]]]:
    out = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            out.append(
                (
                    int(rec["item"]),
                    TokenSequence(tuple(rec["prompt"]), "prompt"),
                    [_candidate_from_json(c) for c in rec["candidates"]],
                )
            )
    if not out:
        raise ValueError(f"empty candidates file: {path}")
    return out


def save_prefset(records: list[PrefsetRecord], path) -> None:
    with open(path, "w") as f:
        for r in records:
            doc = {
                "item": r.item_index,
                "prompt": list(r.prompt.ids),
                "candidates": [_candidate_to_json(c) for c in r.candidates],
                "status": "accepted" if r.accepted else "rejected",
            }
            if r.accepted:
                doc["w_set"] = list(r.example.w_set)
                doc["l_set"] = list(r.example.l_set)
                doc["provenance"] = r.example.provenance
            else:
                doc["reason"] = r.reason
            f.write(json.dumps(doc, sort_keys=True))
            f.write("\n")


def load_prefset(path) -> list[PrefsetRecord]:
    records = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            doc = json.loads(line)
            prompt = TokenSequence(tuple(doc["prompt"]), "prompt")
            cands = tuple(_candidate_from_json(c) for c in doc["candidates"])
            if doc["status"] == "accepted":
                example = PreferenceExample(
                    w_set=tuple(doc["w_set"]),
                    l_set=tuple(doc["l_set"]),
                    provenance=doc["provenance"],
                )
                records.append(PrefsetRecord(int(doc["item"]), prompt, cands, example, None))
            else:
                records.append(
                    PrefsetRecord(int(doc["item"]), prompt, cands, None, doc["reason"])
                )
    if not records:
        raise ValueError(f"empty preference dataset: {path}")
    return records


def baseline_records(
    loaded: list[tuple[int, TokenSequence, list[CandidateRecord]]],
    metric_names: tuple[str, ...] = METRIC_NAMES,
) -> list[PrefsetRecord]:
    """Rank-sum baseline pairs wrapped as singleton preference examples, so the
    training loop consumes them exactly like constructed preference sets."""
    polarities = tuple(METRIC_POLARITY[m] for m in metric_names)
    cols = [METRIC_NAMES.index(m) for m in metric_names]
    records = []
    for item_index, prompt, cands in loaded:
        table = np.array([c.scores.as_tuple() for c in cands])[:, cols]
        w, l, totals = combined_rankings_baseline(table, polarities)
        example = PreferenceExample(
            w_set=(w,),
            l_set=(l,),
            provenance={"rank_sum": {"w": w, "l": l, "totals": totals.tolist()}},
        )
        records.append(PrefsetRecord(item_index, prompt, tuple(cands), example, None))
    return records
