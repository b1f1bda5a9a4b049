"""A deterministic synthetic world that makes all three metrics computable.

Stands in for the audio stack: every output token deterministically maps
to a transcript symbol (a surjective, non-injective map playing the ASR
role), a fixed unit embedding (speaker-verification role), and a positive
pitch value (F0-extraction role). The three tables are drawn
independently, so a candidate can be strong on one dimension and weak on
another - that disagreement is what makes multidimensional preference
sets non-trivial.

Token layout inside the output-token range: the first `n_speakers` ids
are speaker-colored tokens (their table embedding is the speaker
centroid, their pitch carries the speaker's pitch scale); the rest are
content tokens. Prompts end with a speaker marker drawn from the top of
the text range.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .metrics import ProsodyContour, cer
from .model import TokenSequence, Vocabulary, prompt_seq, response_seq


@dataclass(frozen=True)
class SynthWorld:
    seed: int
    vocab: Vocabulary
    n_speakers: int
    n_symbols: int
    # Tables indexed by output-token offset (global id minus vocab.speech_base).
    token_symbol: np.ndarray  # (n_speech,) int
    token_embedding: np.ndarray  # (n_speech, emb_dim) unit rows
    token_f0: np.ndarray  # (n_speech,) floats in [80, 400]
    speaker_centroid: np.ndarray  # (n_speakers, emb_dim) unit rows
    speaker_f0_scale: np.ndarray  # (n_speakers,)
    text_symbol: np.ndarray  # (n_text_content,) int, text token -> symbol

    @property
    def emb_dim(self) -> int:
        return self.token_embedding.shape[1]

    @property
    def n_text_content(self) -> int:
        return self.vocab.n_text - self.n_speakers

    def speaker_marker(self, speaker: int) -> int:
        """Global text-token id of the prompt marker for `speaker`."""
        return self.vocab.n_text - self.n_speakers + speaker

    def speaker_token(self, speaker: int) -> int:
        """Global output-token id of the speaker-colored token."""
        return self.vocab.speech_base + speaker

    def speaker_symbol(self, speaker: int) -> int:
        return self.n_symbols + speaker

    def prosody_bound(self) -> float:
        """Largest log-pitch gap the world can produce; worst-case RMSE."""
        return float(np.log(self.token_f0.max() / self.token_f0.min()))


def _unit_rows(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    v = rng.normal(size=(n, dim))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def make_world(
    seed: int,
    n_text: int = 32,
    n_speech: int = 96,
    n_speakers: int = 4,
    n_symbols: int = 20,
    emb_dim: int = 16,
) -> SynthWorld:
    """Build all world tables from one seed.

    Speaker centroids are redrawn until every pairwise cosine is below
    0.5, so the similarity dimension stays discriminative.
    """
    if n_speakers < 2:
        raise ValueError(f"make_world: need at least 2 speakers, got {n_speakers}")
    if n_speech < n_speakers + n_symbols:
        raise ValueError(
            f"make_world: n_speech={n_speech} too small for {n_speakers} speaker tokens "
            f"plus a surjective map onto {n_symbols} symbols"
        )
    if n_text < n_speakers + 2:
        raise ValueError(f"make_world: n_text={n_text} too small for speaker markers")
    vocab = Vocabulary(n_text=n_text, n_speech=n_speech)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))

    n_content = n_speech - n_speakers
    # Content-token -> symbol: plant one token per symbol, fill the rest at
    # random. Surjective by construction, non-injective as soon as
    # n_content > n_symbols.
    content_symbols = rng.integers(0, n_symbols, size=n_content)
    planted = rng.permutation(n_content)[:n_symbols]
    content_symbols[planted] = np.arange(n_symbols)
    token_symbol = np.concatenate(
        [n_symbols + np.arange(n_speakers), content_symbols]
    )

    centroids = _unit_rows(rng, n_speakers, emb_dim)
    while True:
        cos = centroids @ centroids.T
        np.fill_diagonal(cos, -1.0)
        if cos.max() < 0.5:
            break
        centroids = _unit_rows(rng, n_speakers, emb_dim)

    content_emb = _unit_rows(rng, n_content, emb_dim)
    token_embedding = np.concatenate([centroids, content_emb])

    speaker_f0_scale = rng.uniform(0.7, 1.4, size=n_speakers)
    speaker_f0 = np.clip(rng.uniform(80.0, 400.0, size=n_speakers) * speaker_f0_scale, 80.0, 400.0)
    content_f0 = rng.uniform(80.0, 400.0, size=n_content)
    token_f0 = np.concatenate([speaker_f0, content_f0])

    text_symbol = rng.integers(0, n_symbols, size=n_text - n_speakers)

    return SynthWorld(
        seed=seed,
        vocab=vocab,
        n_speakers=n_speakers,
        n_symbols=n_symbols,
        token_symbol=token_symbol,
        token_embedding=token_embedding,
        token_f0=token_f0,
        speaker_centroid=centroids,
        speaker_f0_scale=speaker_f0_scale,
        text_symbol=text_symbol,
    )


def response_content(world: SynthWorld, y: TokenSequence | tuple[int, ...]) -> tuple[int, ...]:
    """Output tokens of a response with the trailing EOS stripped."""
    ids = y.ids if isinstance(y, TokenSequence) else tuple(y)
    if ids and ids[-1] == world.vocab.eos:
        ids = ids[:-1]
    return ids


def decode(
    world: SynthWorld, y: TokenSequence | tuple[int, ...]
) -> tuple[tuple[int, ...], np.ndarray, ProsodyContour]:
    """Map a response to (transcript symbols, embedding, pitch contour).

    The embedding is the mean of the token embeddings blended 50/50 with
    the centroid carried by any speaker-colored tokens present (a zero
    contribution when none are). Fully deterministic.
    """
    ids = response_content(world, y)
    if not ids:
        raise ValueError("decode: empty output-token sequence")
    base = world.vocab.speech_base
    offsets = []
    for t in ids:
        if not world.vocab.is_speech(t):
            raise ValueError(f"decode: token {t} is not an output token")
        offsets.append(t - base)
    off = np.asarray(offsets, dtype=np.intp)
    transcript = tuple(int(s) for s in world.token_symbol[off])
    mean_emb = world.token_embedding[off].mean(axis=0)
    spk_offs = off[off < world.n_speakers]
    if spk_offs.size:
        spk_part = world.speaker_centroid[spk_offs].mean(axis=0)
    else:
        spk_part = np.zeros(world.emb_dim)
    embedding = 0.5 * mean_emb + 0.5 * spk_part
    contour = ProsodyContour(tuple(float(v) for v in world.token_f0[off]))
    return transcript, embedding, contour


@dataclass(frozen=True)
class CorpusItem:
    index: int
    prompt: TokenSequence
    speaker: int
    reference: TokenSequence
    target_transcript: tuple[int, ...]
    ref_embedding: np.ndarray
    ref_contour: ProsodyContour

    def ref_scores_against_self(self, world: SynthWorld) -> tuple[float, float, float]:
        from .metrics import log_f0_rmse_dtw, speaker_similarity

        t, e, c = decode(world, self.reference)
        return (
            cer(t, self.target_transcript),
            speaker_similarity(e, self.ref_embedding),
            log_f0_rmse_dtw(c, self.ref_contour),
        )


def make_corpus(world: SynthWorld, n_items: int, seed: int) -> list[CorpusItem]:
    """Generate (prompt, reference) items, balanced across speakers.

    Prompt text length varies over [4, 16]; the reference spells the
    prompt's target transcript: a speaker-colored token followed by one
    preimage token per text symbol, chosen at random among colliding
    tokens so distinct references can share a transcript.
    """
    if n_items < 1:
        raise ValueError(f"make_corpus: n_items must be >= 1, got {n_items}")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    base = world.vocab.speech_base
    # Preimages of each symbol among content tokens (global ids).
    preimage: dict[int, np.ndarray] = {}
    for sym in range(world.n_symbols):
        offs = np.nonzero(world.token_symbol == sym)[0]
        offs = offs[offs >= world.n_speakers]
        preimage[sym] = base + offs
    speakers = np.array([i % world.n_speakers for i in range(n_items)])
    rng.shuffle(speakers)
    items: list[CorpusItem] = []
    for idx in range(n_items):
        spk = int(speakers[idx])
        length = int(rng.integers(4, 17))
        text = rng.integers(0, world.n_text_content, size=length)
        prompt = prompt_seq((*[int(t) for t in text], world.speaker_marker(spk)))
        target = (world.speaker_symbol(spk),) + tuple(
            int(world.text_symbol[t]) for t in text
        )
        content = [world.speaker_token(spk)]
        for sym in target[1:]:
            content.append(int(rng.choice(preimage[sym])))
        reference = response_seq((*content, world.vocab.eos))
        transcript, embedding, contour = decode(world, reference)
        if transcript != target:
            raise AssertionError("corpus construction produced a mis-spelled reference")
        items.append(
            CorpusItem(
                index=idx,
                prompt=prompt,
                speaker=spk,
                reference=reference,
                target_transcript=target,
                ref_embedding=embedding,
                ref_contour=contour,
            )
        )
    return items


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def save_world(world: SynthWorld, path) -> None:
    doc = {
        "format_version": 1,
        "seed": world.seed,
        "n_text": world.vocab.n_text,
        "n_speech": world.vocab.n_speech,
        "n_speakers": world.n_speakers,
        "n_symbols": world.n_symbols,
        "token_symbol": world.token_symbol.tolist(),
        "token_embedding": world.token_embedding.tolist(),
        "token_f0": world.token_f0.tolist(),
        "speaker_centroid": world.speaker_centroid.tolist(),
        "speaker_f0_scale": world.speaker_f0_scale.tolist(),
        "text_symbol": world.text_symbol.tolist(),
    }
    with open(path, "w") as f:
        json.dump(doc, f, sort_keys=True)
        f.write("\n")


def load_world(path) -> SynthWorld:
    with open(path) as f:
        doc = json.load(f)
    return SynthWorld(
        seed=int(doc["seed"]),
        vocab=Vocabulary(n_text=int(doc["n_text"]), n_speech=int(doc["n_speech"])),
        n_speakers=int(doc["n_speakers"]),
        n_symbols=int(doc["n_symbols"]),
        token_symbol=np.asarray(doc["token_symbol"], dtype=np.int64),
        token_embedding=np.asarray(doc["token_embedding"]),
        token_f0=np.asarray(doc["token_f0"]),
        speaker_centroid=np.asarray(doc["speaker_centroid"]),
        speaker_f0_scale=np.asarray(doc["speaker_f0_scale"]),
        text_symbol=np.asarray(doc["text_symbol"], dtype=np.int64),
    )


def save_corpus(items: list[CorpusItem], path) -> None:
    """One JSON record per line: prompt ids, reference ids, speaker, target."""
    with open(path, "w") as f:
        for it in items:
            rec = {
                "index": it.index,
                "prompt": list(it.prompt.ids),
                "reference": list(it.reference.ids),
                "speaker": it.speaker,
                "transcript": list(it.target_transcript),
            }
            f.write(json.dumps(rec, sort_keys=True))
            f.write("\n")


def load_corpus(world: SynthWorld, path) -> list[CorpusItem]:
    items: list[CorpusItem] = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            reference = response_seq(rec["reference"])
            transcript, embedding, contour = decode(world, reference)
            target = tuple(rec["transcript"])
            if transcript != target:
                raise ValueError(
                    f"corpus record {rec['index']} does not decode to its stored transcript "
                    f"(wrong world file?)"
                )
            items.append(
                CorpusItem(
                    index=int(rec["index"]),
                    prompt=prompt_seq(rec["prompt"]),
                    speaker=int(rec["speaker"]),
                    reference=reference,
                    target_transcript=target,
                    ref_embedding=embedding,
                    ref_contour=contour,
                )
            )
    if not items:
        raise ValueError(f"empty corpus file: {path}")
    return items
