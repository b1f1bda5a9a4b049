"""Training orchestration: supervised fine-tuning, preference optimization
(with or without the cross-entropy regularizer), evaluation, and experiment
comparison.

Every stage is a pure function of (config, inputs, seed): parameter
updates, batch order, pair draws and KL probes all derive from
`np.random.SeedSequence(seed, spawn_key=...)` streams, so rerunning a
stage reproduces its logs bit-exactly.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .autodiff import NonFiniteError, Tensor, add, grads_for, scale
from .metrics import METRIC_POLARITY, HIGHER_IS_BETTER
from .model import (
    ModelConfig,
    PolicyCheckpoint,
    TokenSequence,
    build_model,
    clone_frozen,
    clone_trainable,
    greedy_decode,
    response_seq,
)
from .objectives import kl_estimate, mean_ce, preference_terms
from .prefset import (
    SEED_DOMAIN_KL,
    SEED_DOMAIN_ORDER,
    SEED_DOMAIN_PAIRS,
    PrefsetRecord,
    sample_pair,
    score_candidate,
)
from .synthtask import CorpusItem, SynthWorld

SCHEMA_VERSION = 1

STAGES = ("sft", "dpo-only", "mpo")
CE_SOURCES = ("preferred", "sft-data")


class TrainingDiverged(RuntimeError):
    """Loss went non-finite; carries the last finite checkpoint."""

    def __init__(self, step: int, checkpoint: PolicyCheckpoint):
        super().__init__(f"training diverged at step {step}")
        self.step = step
        self.checkpoint = checkpoint


@dataclass(frozen=True)
class TrainingConfig:
    stage: str = "mpo"
    steps: int = 2000
    batch_size: int = 8
    lr: float = 1e-3
    beta: float = 0.1
    lam: float = 10.0
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    eval_interval: int = 250
    seed: int = 0
    ce_source: str = "preferred"
    kl_samples: int = 32
    # candidate sampling + preference-set thresholds (echoed for provenance)
    n_candidates: int = 10
    sample_temperature: float = 1.2
    sample_top_k: int = 12
    sim_gap: float = 0.1
    prosody_gap: float = 0.1
    require_zero_cer: bool = True
    # architecture
    n_text: int = 32
    n_speech: int = 96
    n_layers: int = 2
    d_model: int = 64
    n_heads: int = 4
    context_len: int = 128
    max_response_len: int = 64

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"TrainingConfig: stage must be one of {STAGES}, got {self.stage!r}")
        if self.ce_source not in CE_SOURCES:
            raise ValueError(
                f"TrainingConfig: ce_source must be one of {CE_SOURCES}, got {self.ce_source!r}"
            )
        for name in ("steps", "batch_size", "eval_interval", "kl_samples", "n_candidates"):
            if getattr(self, name) < 1:
                raise ValueError(f"TrainingConfig: {name} must be >= 1")
        for name in ("lr", "beta", "grad_clip", "sample_temperature"):
            if getattr(self, name) <= 0:
                raise ValueError(f"TrainingConfig: {name} must be > 0")
        for name in ("lam", "weight_decay", "sim_gap", "prosody_gap"):
            if getattr(self, name) < 0:
                raise ValueError(f"TrainingConfig: {name} must be >= 0")
        self.model_config()  # architecture validation

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            n_text=self.n_text,
            n_speech=self.n_speech,
            n_layers=self.n_layers,
            d_model=self.d_model,
            n_heads=self.n_heads,
            context_len=self.context_len,
            max_response_len=self.max_response_len,
        )

    def to_kv(self) -> str:
        lines = [f"schema_version={SCHEMA_VERSION}"]
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    @staticmethod
    def from_kv(text: str) -> "TrainingConfig":
        kv: dict[str, str] = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"config line {lineno}: expected key=value, got {line!r}")
            k, v = line.split("=", 1)
            kv[k.strip()] = v.strip()
        version = kv.pop("schema_version", None)
        if version != str(SCHEMA_VERSION):
            raise ValueError(f"config schema_version {version!r} unsupported (expected {SCHEMA_VERSION})")
        known = {f.name: f.type for f in fields(TrainingConfig)}
        out: dict = {}
        for k, v in kv.items():
            if k not in known:
                raise ValueError(f"unknown config key {k!r}")
            t = known[k]
            if t == "bool":
                if v not in ("true", "false"):
                    raise ValueError(f"config key {k}: expected true/false, got {v!r}")
                out[k] = v == "true"
            elif t == "int":
                out[k] = int(v)
            elif t == "float":
                out[k] = float(v)
            else:
                out[k] = v
        return TrainingConfig(**out)

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_kv().encode()).hexdigest()[:12]

    def with_stage(self, stage: str) -> "TrainingConfig":
        return replace(self, stage=stage)


def save_config(cfg: TrainingConfig, path) -> None:
    with open(path, "w") as f:
        f.write(cfg.to_kv())


def load_config(path) -> TrainingConfig:
    with open(path) as f:
        return TrainingConfig.from_kv(f.read())


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


class AdamW:
    """Adaptive moments with decoupled weight decay."""

    def __init__(
        self,
        params: dict[str, Tensor],
        lr: float,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros(p.shape) for k, p in params.items()}
        self.v = {k: np.zeros(p.shape) for k, p in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        bc1 = 1.0 - self.b1**self.t
        bc2 = 1.0 - self.b2**self.t
        for k, p in self.params.items():
            g = grads[k]
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            mhat = self.m[k] / bc1
            vhat = self.v[k] / bc2
            new = p.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)
            if self.weight_decay:
                new = new - self.lr * self.weight_decay * p.data
            p.data = new


def clip_grads(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale gradients to a global-norm cap; returns the pre-clip norm."""
    total = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if total > max_norm and total > 0:
        s = max_norm / total
        for k in grads:
            grads[k] = grads[k] * s
    return total


# ---------------------------------------------------------------------------
# logs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainRecord:
    stage: str
    step: int
    dpo: float
    ce: float
    combined: float
    reward_margin: float
    grad_norm: float


@dataclass(frozen=True)
class EvalRecord:
    step: int
    cer: float
    spk_sim: float
    prosody: float
    ce: float
    kl: float
    kl_stderr: float


@dataclass
class TrainingLog:
    stage: str
    config_hash: str
    records: list[TrainRecord] = field(default_factory=list)
    evals: list[EvalRecord] = field(default_factory=list)

    def train_csv(self) -> str:
        lines = [f"# config_hash={self.config_hash}", "stage,step,dpo,ce,combined,reward_margin,grad_norm"]
        for r in self.records:
            lines.append(
                f"{r.stage},{r.step},{r.dpo!r},{r.ce!r},{r.combined!r},{r.reward_margin!r},{r.grad_norm!r}"
            )
        return "\n".join(lines) + "\n"

    def eval_csv(self) -> str:
        lines = [f"# config_hash={self.config_hash}", "step,cer,spk_sim,prosody,ce,kl,kl_stderr"]
        for r in self.evals:
            lines.append(
                f"{r.step},{r.cer!r},{r.spk_sim!r},{r.prosody!r},{r.ce!r},{r.kl!r},{r.kl_stderr!r}"
            )
        return "\n".join(lines) + "\n"


def write_text(path, text: str) -> None:
    with open(path, "w") as f:
        f.write(text)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    n_items: int
    mean_cer: float
    mean_spk_sim: float
    mean_prosody: float
    mean_ce: float
    rows: list[dict]
    heldout_digest: str | None = None

    def means(self) -> dict[str, float]:
        return {
            "cer": self.mean_cer,
            "spk_sim": self.mean_spk_sim,
            "prosody_rmse": self.mean_prosody,
        }


def evaluate(
    model: PolicyCheckpoint, world: SynthWorld, items: list[CorpusItem]
) -> EvalReport:
    """Greedy-decode every held-out item and score against its reference.

    Greedy decoding keeps the comparison free of sampling variance. Also
    reports the teacher-forced cross-entropy of the references, the
    cheapest early warning of degradation.
    """
    if not items:
        raise ValueError("evaluate: empty held-out corpus")
    rows = []
    ce_total = 0.0
    for item in items:
        y = greedy_decode(model, item.prompt)
        s = score_candidate(world, item, y.ids)
        ce_total += mean_ce(model, [(item.prompt, item.reference)]).item()
        rows.append(
            {
                "index": item.index,
                "cer": s.cer,
                "spk_sim": s.spk_sim,
                "prosody_rmse": s.prosody_rmse,
                "n_tokens": len(y.ids),
            }
        )
    n = len(items)
    return EvalReport(
        n_items=n,
        mean_cer=sum(r["cer"] for r in rows) / n,
        mean_spk_sim=sum(r["spk_sim"] for r in rows) / n,
        mean_prosody=sum(r["prosody_rmse"] for r in rows) / n,
        mean_ce=ce_total / n,
        rows=rows,
    )


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------


def _epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    rng = np.random.Generator(
        np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(SEED_DOMAIN_ORDER, epoch)))
    )
    return rng.permutation(n)


def _batch_stream(n: int, batch_size: int, seed: int):
    """Yield index batches, reshuffling every pass over the data."""
    epoch = 0
    while True:
        order = _epoch_order(n, seed, epoch)
        for lo in range(0, n - batch_size + 1, batch_size):
            yield epoch, order[lo : lo + batch_size]
        epoch += 1


def run_sft(
    config: TrainingConfig, corpus: list[CorpusItem], log: TrainingLog | None = None
) -> tuple[PolicyCheckpoint, TrainingLog]:
    """Cross-entropy training from scratch on (prompt, reference) pairs."""
    if not corpus:
        raise ValueError("run_sft: empty corpus")
    model = build_model(config.model_config(), seed=config.seed)
    opt = AdamW(model.params, lr=config.lr, weight_decay=config.weight_decay)
    if log is None:
        log = TrainingLog(stage="sft", config_hash=config.config_hash())
    batch_size = min(config.batch_size, len(corpus))
    stream = _batch_stream(len(corpus), batch_size, config.seed)
    prev = {k: p.data for k, p in model.params.items()}
    for step in range(config.steps):
        _, idx = next(stream)
        batch = [(corpus[i].prompt, corpus[i].reference) for i in idx]
        try:
            loss = mean_ce(model, batch)
            val = loss.item()
        except NonFiniteError:
            val = float("nan")
        if not np.isfinite(val):
            last = PolicyCheckpoint(
                params={k: Tensor(v.copy(), requires_grad=True) for k, v in prev.items()},
                config=model.config,
                step=step,
                seed_lineage=model.seed_lineage,
            )
            raise TrainingDiverged(step, last)
        prev = {k: p.data for k, p in model.params.items()}
        grads = grads_for(loss, model.params)
        norm = clip_grads(grads, config.grad_clip)
        opt.step(grads)
        log.records.append(
            TrainRecord("sft", step, 0.0, val, val, 0.0, norm)
        )
    model.step = config.steps
    return model, log


def materialize_pairs(
    records: list[PrefsetRecord], idx: np.ndarray, epoch: int, seed: int
) -> list[tuple[TokenSequence, TokenSequence, TokenSequence]]:
    """Draw one (x, y_w, y_l) pair per selected record for this epoch."""
    batch = []
    for i in idx:
        rec = records[int(i)]
        rng = np.random.Generator(
            np.random.PCG64(
                np.random.SeedSequence(seed, spawn_key=(SEED_DOMAIN_PAIRS, epoch, rec.item_index))
            )
        )
        w, l = sample_pair(rec.example, rng)
        batch.append(
            (
                rec.prompt,
                response_seq(rec.candidates[w].ids),
                response_seq(rec.candidates[l].ids),
            )
        )
    return batch


def run_preference_stage(
    config: TrainingConfig,
    sft_checkpoint: PolicyCheckpoint,
    records: list[PrefsetRecord],
    world: SynthWorld,
    heldout: list[CorpusItem],
    sft_items: list[CorpusItem] | None = None,
) -> tuple[PolicyCheckpoint, TrainingLog]:
    """Preference optimization against a frozen clone of the SFT checkpoint.

    `config.stage` selects the objective: "dpo-only" steps on the raw
    preference loss (cross-entropy still logged each step as a
    diagnostic); "mpo" steps on lam * dpo + ce. Pairs are redrawn from
    each example's sets every epoch. Held-out metrics, cross-entropy and
    a KL probe are logged at step 0, every eval_interval, and at the end.
    """
    accepted = [r for r in records if r.accepted]
    if not accepted:
        raise ValueError("run_preference_stage: no accepted preference examples")
    if config.stage not in ("dpo-only", "mpo"):
        raise ValueError(f"run_preference_stage: bad stage {config.stage!r}")
    if config.ce_source == "sft-data" and not sft_items:
        raise ValueError("run_preference_stage: ce_source=sft-data needs sft_items")
    policy = clone_trainable(sft_checkpoint)
    ref = clone_frozen(sft_checkpoint)
    opt = AdamW(policy.params, lr=config.lr, weight_decay=config.weight_decay)
    log = TrainingLog(stage=config.stage, config_hash=config.config_hash())
    batch_size = min(config.batch_size, len(accepted))
    stream = _batch_stream(len(accepted), batch_size, config.seed)
    prompts = [it.prompt for it in heldout]

    def run_eval(step: int) -> None:
        rep = evaluate(policy, world, heldout)
        kl = kl_estimate(
            policy,
            ref,
            prompts,
            n_samples=config.kl_samples,
            seed=int(
                np.random.SeedSequence(config.seed, spawn_key=(SEED_DOMAIN_KL, step)).generate_state(1)[0]
            ),
        )
        log.evals.append(
            EvalRecord(step, rep.mean_cer, rep.mean_spk_sim, rep.mean_prosody, rep.mean_ce, kl.mean, kl.stderr)
        )

    run_eval(0)
    prev = {k: p.data for k, p in policy.params.items()}
    sft_stream = None
    if config.ce_source == "sft-data":
        sft_stream = _batch_stream(len(sft_items), batch_size, config.seed + 1)
    for step in range(config.steps):
        epoch, idx = next(stream)
        batch = materialize_pairs(accepted, idx, epoch, config.seed)
        ce_items = None
        if sft_stream is not None:
            _, sidx = next(sft_stream)
            ce_items = [(sft_items[i].prompt, sft_items[i].reference) for i in sidx]
        try:
            dpo, ce, margin = preference_terms(policy, ref, batch, config.beta, ce_items)
            if config.stage == "mpo":
                loss = add(scale(dpo, config.lam), ce)
            else:
                loss = dpo
            dpo_val, ce_val, combined = dpo.item(), ce.item(), loss.item()
        except NonFiniteError:
            dpo_val = ce_val = combined = float("nan")
        if not (np.isfinite(combined) and np.isfinite(ce_val)):
            last = PolicyCheckpoint(
                params={k: Tensor(v.copy(), requires_grad=True) for k, v in prev.items()},
                config=policy.config,
                step=step,
                seed_lineage=policy.seed_lineage,
            )
            raise TrainingDiverged(step, last)
        prev = {k: p.data for k, p in policy.params.items()}
        grads = grads_for(loss, policy.params)
        norm = clip_grads(grads, config.grad_clip)
        opt.step(grads)
        log.records.append(
            TrainRecord(config.stage, step, dpo_val, ce_val, combined, margin, norm)
        )
        done = step + 1
        if done % config.eval_interval == 0 or done == config.steps:
            run_eval(done)
    policy.step = sft_checkpoint.step + config.steps
    return policy, log


# ---------------------------------------------------------------------------
# experiment comparison
# ---------------------------------------------------------------------------

_TABLE_METRICS = ("cer", "spk_sim", "prosody_rmse")


@dataclass
class ComparisonTable:
    labels: list[str]
    values: np.ndarray  # (n_experiments, 3) in _TABLE_METRICS order
    deltas: np.ndarray  # vs the first row
    best: np.ndarray  # boolean, per column

    def to_csv(self) -> str:
        header = (
            "label,cer,spk_sim,prosody_rmse,"
            "delta_cer,delta_spk_sim,delta_prosody_rmse,"
            "best_cer,best_spk_sim,best_prosody_rmse"
        )
        lines = [header]
        for i, label in enumerate(self.labels):
            cells = [label]
            cells += [repr(float(v)) for v in self.values[i]]
            cells += [repr(float(v)) for v in self.deltas[i]]
            cells += [str(int(b)) for b in self.best[i]]
            lines.append(",".join(cells))
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        names = {"cer": "CER(v)", "spk_sim": "SPK_SIM(^)", "prosody_rmse": "PROSODY(v)"}
        width = max(12, max(len(l) for l in self.labels) + 2)
        head = "experiment".ljust(width) + "".join(
            names[m].rjust(14) for m in _TABLE_METRICS
        )
        lines = [head, "-" * len(head)]
        for i, label in enumerate(self.labels):
            row = label.ljust(width)
            for j in range(3):
                mark = "*" if self.best[i, j] else " "
                row += f"{self.values[i, j]:+13.4f}{mark}"
            lines.append(row)
        lines.append("(*) column best; deltas are vs the first row")
        return "\n".join(lines) + "\n"


def compare_experiments(entries: list[tuple[str, EvalReport]]) -> ComparisonTable:
    """One row per experiment, deltas vs the first (baseline) row, and a
    polarity-aware best marker per metric column.

    All reports must have been produced against the same held-out set;
    mismatched digests are a hard error.
    """
    if not entries:
        raise ValueError("compare_experiments: no experiments")
    digests = {rep.heldout_digest for _, rep in entries}
    if len(digests) > 1:
        raise ValueError(f"compare_experiments: reports disagree on held-out corpus: {sorted(map(str, digests))}")
    labels = [label for label, _ in entries]
    values = np.array(
        [[rep.mean_cer, rep.mean_spk_sim, rep.mean_prosody] for _, rep in entries]
    )
    deltas = values - values[0]
    best = np.zeros_like(values, dtype=bool)
    for j, metric in enumerate(_TABLE_METRICS):
        col = values[:, j]
        pick = int(np.argmax(col)) if METRIC_POLARITY[metric] == HIGHER_IS_BETTER else int(np.argmin(col))
        best[pick, j] = True
    return ComparisonTable(labels=labels, values=values, deltas=deltas, best=best)
