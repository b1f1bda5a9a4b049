"""A small decoder-only autoregressive model over a split text/output-token vocabulary.

The model scores and samples output-token responses conditioned on a text
prompt. Both halves share one embedding table with disjoint id ranges; a
SEP token marks the text/output boundary and EOS is always scored, so
sequence probabilities form a proper distribution over variable-length
responses. Response positions are masked to the legal response alphabet
(output tokens plus EOS), which guarantees every sampled candidate is
decodable downstream.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from . import FORMAT_VERSION
from .autodiff import (
    Tensor,
    add,
    exp,
    gather_rows,
    log_softmax,
    matmul,
    mul,
    rmsnorm,
    scale,
    sigmoid,
    take_along_rows,
    transpose,
    tsum,
)

MASK_NEG = -1e9

CHECKPOINT_MAGIC = b"MPOCKPT1"


@dataclass(frozen=True)
class Vocabulary:
    """Token id layout: [0, n_text) text, [n_text, n_text+n_speech) output tokens,
    then BOS, EOS, SEP."""

    n_text: int
    n_speech: int

    def __post_init__(self):
        if self.n_text < 1:
            raise ValueError(f"Vocabulary: n_text must be >= 1, got {self.n_text}")
        if self.n_speech < 8:
            raise ValueError(f"Vocabulary: n_speech must be >= 8, got {self.n_speech}")

    @property
    def speech_base(self) -> int:
        return self.n_text

    @property
    def bos(self) -> int:
        return self.n_text + self.n_speech

    @property
    def eos(self) -> int:
        return self.n_text + self.n_speech + 1

    @property
    def sep(self) -> int:
        return self.n_text + self.n_speech + 2

    @property
    def size(self) -> int:
        return self.n_text + self.n_speech + 3

    @property
    def response_support(self) -> int:
        """Number of classes a response position can take: output tokens + EOS."""
        return self.n_speech + 1

    def is_speech(self, tid: int) -> bool:
        return self.speech_base <= tid < self.speech_base + self.n_speech

    def response_mask(self) -> np.ndarray:
        """Additive logit mask: 0 on output tokens and EOS, MASK_NEG elsewhere."""
        m = np.full(self.size, MASK_NEG)
        m[self.speech_base : self.speech_base + self.n_speech] = 0.0
        m[self.eos] = 0.0
        return m


@dataclass(frozen=True)
class TokenSequence:
    ids: tuple[int, ...]
    role: str  # "prompt" | "response"

    def __post_init__(self):
        if self.role not in ("prompt", "response"):
            raise ValueError(f"TokenSequence: unknown role {self.role!r}")
        object.__setattr__(self, "ids", tuple(int(t) for t in self.ids))

    def __len__(self) -> int:
        return len(self.ids)

    def check(self, vocab: Vocabulary, max_len: int) -> None:
        if any(t < 0 or t >= vocab.size for t in self.ids):
            raise ValueError("TokenSequence: token id out of vocabulary range")
        if len(self.ids) > max_len:
            raise ValueError(f"TokenSequence: length {len(self.ids)} exceeds max {max_len}")
        if self.role == "response":
            if not self.ids or self.ids[-1] != vocab.eos:
                raise ValueError("TokenSequence: responses must end with EOS")


def prompt_seq(ids) -> TokenSequence:
    return TokenSequence(tuple(ids), "prompt")


def response_seq(ids) -> TokenSequence:
    return TokenSequence(tuple(ids), "response")


@dataclass(frozen=True)
class ModelConfig:
    n_text: int = 32
    n_speech: int = 96
    n_layers: int = 2
    d_model: int = 64
    n_heads: int = 4
    context_len: int = 128
    max_response_len: int = 64

    def __post_init__(self):
        if self.n_layers < 1:
            raise ValueError(f"ModelConfig: n_layers must be >= 1, got {self.n_layers}")
        if self.d_model < 8:
            raise ValueError(f"ModelConfig: d_model must be >= 8, got {self.d_model}")
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"ModelConfig: n_heads={self.n_heads} must divide d_model={self.d_model}"
            )
        if self.context_len < 8:
            raise ValueError(f"ModelConfig: context_len must be >= 8, got {self.context_len}")
        if self.max_response_len < 1:
            raise ValueError("ModelConfig: max_response_len must be >= 1")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @property
    def d_ff(self) -> int:
        return 4 * self.d_model

    def vocab(self) -> Vocabulary:
        return Vocabulary(self.n_text, self.n_speech)

    def param_count(self) -> int:
        v = self.vocab().size
        d, dh, dff = self.d_model, self.d_head, self.d_ff
        per_layer = (
            self.n_heads * (3 * d * dh + dh * d)  # q, k, v, o projections
            + 2 * d  # two norm gains
            + d * dff + dff + dff * d + d  # mlp weights and biases
        )
        return v * d + self.context_len * d + self.n_layers * per_layer + d + d * v


@dataclass
class PolicyCheckpoint:
    """Named parameter tensors plus the metadata needed to rebuild the run."""

    params: dict[str, Tensor]
    config: ModelConfig
    step: int = 0
    seed_lineage: tuple[int, ...] = ()
    frozen: bool = False
    _mask_cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def vocab(self) -> Vocabulary:
        return self.config.vocab()

    def param_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def response_mask(self) -> np.ndarray:
        m = self._mask_cache.get("resp")
        if m is None:
            m = self.vocab.response_mask()
            self._mask_cache["resp"] = m
        return m

    def causal_mask(self, n: int) -> np.ndarray:
        m = self._mask_cache.get(("causal", n))
        if m is None:
            m = np.triu(np.full((n, n), MASK_NEG), k=1)
            self._mask_cache[("causal", n)] = m
        return m


def _param_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    v = cfg.vocab().size
    d, dh, dff = cfg.d_model, cfg.d_head, cfg.d_ff
    shapes: list[tuple[str, tuple[int, ...]]] = [
        ("embed", (v, d)),
        ("pos", (cfg.context_len, d)),
    ]
    for i in range(cfg.n_layers):
        shapes.append((f"layer{i}.norm1.g", (d,)))
        for h in range(cfg.n_heads):
            shapes.append((f"layer{i}.h{h}.wq", (d, dh)))
            shapes.append((f"layer{i}.h{h}.wk", (d, dh)))
            shapes.append((f"layer{i}.h{h}.wv", (d, dh)))
            shapes.append((f"layer{i}.h{h}.wo", (dh, d)))
        shapes.append((f"layer{i}.norm2.g", (d,)))
        shapes.append((f"layer{i}.mlp.w1", (d, dff)))
        shapes.append((f"layer{i}.mlp.b1", (dff,)))
        shapes.append((f"layer{i}.mlp.w2", (dff, d)))
        shapes.append((f"layer{i}.mlp.b2", (d,)))
    shapes.append(("norm_f.g", (d,)))
    shapes.append(("unembed", (d, v)))
    return shapes


def build_model(cfg: ModelConfig, seed: int) -> PolicyCheckpoint:
    """Initialize a trainable checkpoint from a seeded N(0, 0.02) scheme.

    Norm gains start at 1 and biases at 0; everything else is dense noise.
    """
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    params: dict[str, Tensor] = {}
    for name, shape in _param_shapes(cfg):
        if name.endswith(".g"):
            data = np.ones(shape)
        elif ".b" in name.rsplit(".", 1)[-1]:
            data = np.zeros(shape)
        else:
            data = rng.normal(0.0, 0.02, size=shape)
        params[name] = Tensor(data, requires_grad=True)
    return PolicyCheckpoint(params=params, config=cfg, step=0, seed_lineage=(seed,))


def clone_frozen(model: PolicyCheckpoint) -> PolicyCheckpoint:
    """Deep-copy a checkpoint into a frozen reference policy.

    The clone shares nothing with the original and never receives
    gradients: its tensors are created with requires_grad=False, so no
    tape is ever built through them.
    """
    params = {k: Tensor(v.data.copy(), requires_grad=False) for k, v in model.params.items()}
    return PolicyCheckpoint(
        params=params,
        config=model.config,
        step=model.step,
        seed_lineage=model.seed_lineage,
        frozen=True,
    )


def clone_trainable(model: PolicyCheckpoint) -> PolicyCheckpoint:
    """Deep-copy a checkpoint into a fresh trainable policy."""
    params = {k: Tensor(v.data.copy(), requires_grad=True) for k, v in model.params.items()}
    return PolicyCheckpoint(
        params=params,
        config=model.config,
        step=model.step,
        seed_lineage=model.seed_lineage,
        frozen=False,
    )


def forward_logits(model: PolicyCheckpoint, ids: np.ndarray) -> Tensor:
    """Run the decoder stack over `ids` and return next-token logits per position."""
    cfg = model.config
    n = len(ids)
    if n > cfg.context_len:
        raise ValueError(f"context overflow: sequence length {n} > context {cfg.context_len}")
    p = model.params
    h = add(gather_rows(p["embed"], ids), gather_rows(p["pos"], np.arange(n)))
    causal = Tensor(model.causal_mask(n))
    inv_sqrt_dh = 1.0 / np.sqrt(cfg.d_head)
    for i in range(cfg.n_layers):
        a = rmsnorm(h, p[f"layer{i}.norm1.g"])
        attn_out = None
        for hd in range(cfg.n_heads):
            q = matmul(a, p[f"layer{i}.h{hd}.wq"])
            k = matmul(a, p[f"layer{i}.h{hd}.wk"])
            v = matmul(a, p[f"layer{i}.h{hd}.wv"])
            scores = add(scale(matmul(q, transpose(k)), inv_sqrt_dh), causal)
            weights = exp(log_softmax(scores))
            o = matmul(matmul(weights, v), p[f"layer{i}.h{hd}.wo"])
            attn_out = o if attn_out is None else add(attn_out, o)
        h = add(h, attn_out)
        m = rmsnorm(h, p[f"layer{i}.norm2.g"])
        u = add(matmul(m, p[f"layer{i}.mlp.w1"]), p[f"layer{i}.mlp.b1"])
        act = mul(u, sigmoid(u))
        h = add(h, add(matmul(act, p[f"layer{i}.mlp.w2"]), p[f"layer{i}.mlp.b2"]))
    f = rmsnorm(h, p["norm_f.g"])
    return matmul(f, p["unembed"])


def full_input_ids(vocab: Vocabulary, x: TokenSequence, y: TokenSequence) -> np.ndarray:
    return np.array([vocab.bos, *x.ids, vocab.sep, *y.ids], dtype=np.intp)


def sequence_logprob(
    model: PolicyCheckpoint, x: TokenSequence, y: TokenSequence
) -> tuple[Tensor, np.ndarray]:
    """Teacher-forced log-probability of response y given prompt x.

    Returns the scalar sum over y's tokens (EOS included) and the
    per-token log-probs as a plain array. The scalar carries the tape, so
    it is differentiable with respect to the model parameters.
    """
    vocab = model.vocab
    x.check(vocab, model.config.context_len)
    y.check(vocab, model.config.max_response_len)
    seq = full_input_ids(vocab, x, y)
    if len(seq) > model.config.context_len + 1:
        raise ValueError(
            f"context overflow: prompt+response length {len(seq) - 1} "
            f"> context {model.config.context_len}"
        )
    logits = forward_logits(model, seq[:-1])
    # Rows predicting y's tokens are the last len(y) positions.
    n_y = len(y.ids)
    rows = gather_rows(logits, np.arange(len(seq) - 1 - n_y, len(seq) - 1))
    masked = add(rows, Tensor(model.response_mask()))
    lsm = log_softmax(masked)
    picked = take_along_rows(lsm, np.asarray(y.ids, dtype=np.intp))
    return tsum(picked), picked.data.copy()


def next_token_logits(model: PolicyCheckpoint, prefix: np.ndarray) -> np.ndarray:
    """Masked logits for the next response token after `prefix` (plain array)."""
    logits = forward_logits(model, prefix)
    return logits.data[-1] + model.response_mask()


def _top_k_indices(logits: np.ndarray, k: int) -> np.ndarray:
    # Deterministic: ties resolved toward the lowest token id.
    order = np.lexsort((np.arange(logits.size), -logits))
    return order[:k]


def sample(
    model: PolicyCheckpoint,
    x: TokenSequence,
    temperature: float,
    top_k: int,
    rng: np.random.Generator,
    max_len: int | None = None,
) -> TokenSequence:
    """Ancestral sampling of a response, temperature-scaled and top-k truncated.

    Stops at EOS; if the length cap is reached first, EOS is appended so
    the result is always a well-formed response.
    """
    cfg = model.config
    vocab = model.vocab
    if temperature <= 0:
        raise ValueError(f"sample: temperature must be > 0, got {temperature}")
    if not 1 <= top_k <= vocab.response_support:
        raise ValueError(
            f"sample: top_k must be in [1, {vocab.response_support}], got {top_k}"
        )
    x.check(vocab, cfg.context_len)
    if max_len is None:
        max_len = cfg.max_response_len
    prefix = [vocab.bos, *x.ids, vocab.sep]
    out: list[int] = []
    while len(out) < max_len - 1 and len(prefix) < cfg.context_len:
        logits = next_token_logits(model, np.asarray(prefix, dtype=np.intp))
        if top_k == 1:
            tok = int(np.argmax(logits))
        else:
            cand = _top_k_indices(logits / temperature, top_k)
            z = logits[cand] / temperature
            z = z - z.max()
            probs = np.exp(z)
            probs /= probs.sum()
            tok = int(rng.choice(cand, p=probs))
        if tok == vocab.eos:
            return response_seq((*out, vocab.eos))
        out.append(tok)
        prefix.append(tok)
    return response_seq((*out, vocab.eos))


def greedy_decode(model: PolicyCheckpoint, x: TokenSequence, max_len: int | None = None) -> TokenSequence:
    rng = np.random.Generator(np.random.PCG64(0))  # unused at top_k=1
    return sample(model, x, temperature=1.0, top_k=1, rng=rng, max_len=max_len)


# ---------------------------------------------------------------------------
# checkpoint container format
# ---------------------------------------------------------------------------
# MPOCKPT1 | u32 header length | JSON header | concatenated little-endian
# float64 buffers. The header carries names, shapes, offsets, the config
# echo, step and seed lineage, so files are self-describing and the bytes
# are a pure function of the checkpoint (no timestamps).


def save_checkpoint(model: PolicyCheckpoint, path) -> None:
    arrays = []
    offset = 0
    for name, t in model.params.items():
        nbytes = t.data.size * 8
        arrays.append(
            {"name": name, "shape": list(t.shape), "offset": offset, "nbytes": nbytes}
        )
        offset += nbytes
    header = {
        "format_version": FORMAT_VERSION,
        "config": asdict(model.config),
        "step": model.step,
        "seed_lineage": list(model.seed_lineage),
        "frozen": model.frozen,
        "arrays": arrays,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(hbytes)))
        f.write(hbytes)
        for t in model.params.values():
            f.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_checkpoint(path) -> PolicyCheckpoint:
    with open(path, "rb") as f:
        magic = f.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"not a checkpoint file: {path}")
        (hlen,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(hlen))
        if header["format_version"] != FORMAT_VERSION:
            raise ValueError(
                f"checkpoint format version {header['format_version']} "
                f"unsupported (expected {FORMAT_VERSION})"
            )
        blob = f.read()
    cfg = ModelConfig(**header["config"])
    frozen = bool(header["frozen"])
    params: dict[str, Tensor] = {}
    for spec in header["arrays"]:
        raw = blob[spec["offset"] : spec["offset"] + spec["nbytes"]]
        arr = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(spec["shape"])
        params[spec["name"]] = Tensor(arr.copy(), requires_grad=not frozen)
    expected = dict(_param_shapes(cfg))
    got = {k: v.shape for k, v in params.items()}
    if {k: tuple(v) for k, v in expected.items()} != got:
        raise ValueError(f"checkpoint parameter shapes do not match its config: {path}")
    return PolicyCheckpoint(
        params=params,
        config=cfg,
        step=int(header["step"]),
        seed_lineage=tuple(header["seed_lineage"]),
        frozen=frozen,
    )
