"""Toy corpus: whitespace vocabulary, MLM masking and a synthetic grammar.

The generator emits sentences from one of several disjoint "languages".
Each sentence is a sequence of clauses::

    DET[n] ADJ* NOUN[n] (REL VERB[m] DET[m] NOUN[m])? VERB[n] (DET ADJ* NOUN)?

joined by a conjunction, where the main verb agrees in number with its
subject even when a relative clause of the other number intervenes.  A
per-sentence topic biases which nouns and verbs appear.  The probe label is
1 when most clause subjects are plural; it is recovered from the text alone
by :func:`probe_label`.
"""

from __future__ import annotations

import csv
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np

PAD, UNK, CLS, SEP, MASK = 0, 1, 2, 3, 4
SPECIAL_TOKENS = ("[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]")


def make_rng(*parts) -> np.random.Generator:
    """Generator seeded from a (possibly nested) tuple of non-negative ints."""
    flat = []

    def walk(x):
        if isinstance(x, (tuple, list)):
            for item in x:
                walk(item)
        else:
            flat.append(int(x))

    walk(parts)
    return np.random.default_rng(flat)


class Vocab:
    """Token <-> id map with the five reserved ids first."""

    def __init__(self, tokens: Sequence[str]):
        self.itos = list(SPECIAL_TOKENS) + [t for t in tokens if t not in SPECIAL_TOKENS]
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ValueError("duplicate tokens in vocabulary")

    def __len__(self) -> int:
        return len(self.itos)

    def encode(self, text: str) -> list[int]:
        return [self.stoi.get(tok, UNK) for tok in text.split()]

    def decode(self, ids: Iterable[int]) -> str:
        return " ".join(self.itos[i] for i in ids)

    def to_bytes(self) -> bytes:
        return "\n".join(self.itos).encode("utf-8")

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Vocab":
        with open(path, encoding="utf-8") as fh:
            tokens = fh.read().split("\n")
        if tuple(tokens[:len(SPECIAL_TOKENS)]) != SPECIAL_TOKENS:
            raise ValueError("vocabulary file does not start with the reserved tokens")
        return cls(tokens[len(SPECIAL_TOKENS):])


def build_vocab(corpus: Iterable[str], max_size: int) -> Vocab:
    """Frequency-ranked whitespace tokens (ties broken lexicographically).

    ``max_size`` counts the reserved ids; tokens beyond it map to UNK.
    """
    if max_size < len(SPECIAL_TOKENS):
        raise ValueError(f"max_size must be at least {len(SPECIAL_TOKENS)}")
    counts = Counter(tok for line in corpus for tok in line.split()
                     if tok not in SPECIAL_TOKENS)
    ranked = sorted(counts, key=lambda t: (-counts[t], t))
    return Vocab(ranked[:max_size - len(SPECIAL_TOKENS)])


@dataclass
class Batch:
    tokens: np.ndarray          # (batch, len) int64
    attention_mask: np.ndarray  # (batch, len) bool, False on padding
    mlm_labels: np.ndarray      # (batch, len) int64, -1 where unsupervised
    probe_labels: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.tokens.shape


def pad_batch(sequences: Sequence[Sequence[int]], max_len: int | None = None,
              probe_labels: Sequence[int] | None = None) -> Batch:
    """Right-pad to the longest sequence, truncating at ``max_len``."""
    if not sequences:
        raise ValueError("empty batch")
    seqs = [list(s)[:max_len] if max_len else list(s) for s in sequences]
    width = max(len(s) for s in seqs)
    tokens = np.full((len(seqs), width), PAD, dtype=np.int64)
    mask = np.zeros((len(seqs), width), dtype=bool)
    for row, seq in enumerate(seqs):
        tokens[row, :len(seq)] = seq
        mask[row, :len(seq)] = True
    labels = np.full(tokens.shape, -1, dtype=np.int64)
    probe = None if probe_labels is None else np.asarray(probe_labels, dtype=np.int64)
    return Batch(tokens, mask, labels, probe)


def mask_batch(batch: Batch, mask_prob: float, seed, vocab_size: int,
               split=(0.8, 0.1, 0.1)) -> Batch:
    """BERT-style corruption of non-special positions.

    Each eligible position is selected with probability ``mask_prob``; a
    selected position becomes [MASK], a random non-special token, or stays
    unchanged according to ``split``.  ``split=None`` always uses [MASK].
    """
    rng = make_rng(seed)
    tokens = batch.tokens.copy()
    eligible = batch.attention_mask & (tokens >= len(SPECIAL_TOKENS))
    chosen = eligible & (rng.random(tokens.shape) < mask_prob)
    labels = np.where(chosen, batch.tokens, -1)
    if split is None:
        tokens[chosen] = MASK
    else:
        p_mask, p_random, _ = split
        u = rng.random(tokens.shape)
        to_mask = chosen & (u < p_mask)
        to_random = chosen & (u >= p_mask) & (u < p_mask + p_random)
        tokens[to_mask] = MASK
        random_ids = rng.integers(len(SPECIAL_TOKENS), vocab_size, size=tokens.shape)
        tokens[to_random] = random_ids[to_random]
    return Batch(tokens, batch.attention_mask.copy(), labels, batch.probe_labels)


# -- synthetic grammar -----------------------------------------------------------

@dataclass(frozen=True)
class GrammarConfig:
    num_languages: int = 2
    num_topics: int = 4
    nouns_per_topic: int = 5
    verbs_per_topic: int = 3
    num_adjectives: int = 8
    topic_affinity: float = 0.8
    relative_clause_prob: float = 0.5
    object_prob: float = 0.4
    max_adjectives: int = 2
    clause_counts: tuple[int, ...] = (1, 3)
    plural_prob: float = 0.5


@dataclass
class Lexicon:
    language: int
    det_sg: tuple[str, ...]
    det_pl: tuple[str, ...]
    adjectives: tuple[str, ...]
    nouns: dict[tuple[int, str], tuple[str, ...]]   # (topic, "sg"|"pl") -> words
    verbs: dict[tuple[int, str], tuple[str, ...]]
    rel: str
    conj: str

    def number_of_noun(self) -> dict[str, str]:
        return {w: num for (_, num), words in self.nouns.items() for w in words}


def make_lexicon(cfg: GrammarConfig, language: int) -> Lexicon:
    p = f"l{language}"
    nouns, verbs = {}, {}
    for t in range(cfg.num_topics):
        for num in ("sg", "pl"):
            nouns[(t, num)] = tuple(f"{p}_n{t}_{k}{num[0]}" for k in range(cfg.nouns_per_topic))
            verbs[(t, num)] = tuple(f"{p}_v{t}_{k}{num[0]}" for k in range(cfg.verbs_per_topic))
    return Lexicon(language, (f"{p}_the", f"{p}_a"), (f"{p}_these", f"{p}_some"),
                   tuple(f"{p}_adj{k}" for k in range(cfg.num_adjectives)), nouns, verbs,
                   f"{p}_that", f"{p}_and")


def lexicon_size(cfg: GrammarConfig) -> int:
    per_language = (4 + cfg.num_adjectives + 2
                    + 2 * cfg.num_topics * (cfg.nouns_per_topic + cfg.verbs_per_topic))
    return cfg.num_languages * per_language


class _Sampler:
    def __init__(self, lex: Lexicon, cfg: GrammarConfig, rng: np.random.Generator, topic: int):
        self.lex, self.cfg, self.rng, self.topic = lex, cfg, rng, topic

    def pick(self, options):
        return options[int(self.rng.integers(len(options)))]

    def topic_for_word(self) -> int:
        if self.rng.random() < self.cfg.topic_affinity:
            return self.topic
        return int(self.rng.integers(self.cfg.num_topics))

    def noun_phrase(self, num: str) -> list[str]:
        det = self.pick(self.lex.det_pl if num == "pl" else self.lex.det_sg)
        adjs = [self.pick(self.lex.adjectives)
                for _ in range(int(self.rng.integers(self.cfg.max_adjectives + 1)))]
        return [det, *adjs, self.pick(self.lex.nouns[(self.topic_for_word(), num)])]

    def verb(self, num: str) -> str:
        return self.pick(self.lex.verbs[(self.topic_for_word(), num)])

    def number(self) -> str:
        return "pl" if self.rng.random() < self.cfg.plural_prob else "sg"

    def clause(self) -> tuple[list[str], str]:
        num = self.number()
        words = self.noun_phrase(num)
        if self.rng.random() < self.cfg.relative_clause_prob:
            inner = "sg" if num == "pl" else "pl"
            words += [self.lex.rel, self.verb(inner), *self.noun_phrase(inner)]
        words.append(self.verb(num))
        if self.rng.random() < self.cfg.object_prob:
            words += self.noun_phrase(self.number())
        return words, num


@dataclass
class SynthCorpus:
    lines: list[str]
    labels: list[int]
    languages: list[int] = field(default_factory=list)
    grammar: GrammarConfig = field(default_factory=GrammarConfig)


def synth_corpus(num_seqs: int, seed: int, grammar: GrammarConfig | None = None) -> SynthCorpus:
    cfg = grammar or GrammarConfig()
    if not cfg.clause_counts or any(c % 2 == 0 for c in cfg.clause_counts):
        raise ValueError("clause counts must be odd so the majority label is defined")
    rng = np.random.default_rng(seed)
    lexicons = [make_lexicon(cfg, k) for k in range(cfg.num_languages)]
    lines, labels, langs = [], [], []
    for _ in range(num_seqs):
        lang = int(rng.integers(cfg.num_languages))
        sampler = _Sampler(lexicons[lang], cfg, rng, int(rng.integers(cfg.num_topics)))
        n_clauses = cfg.clause_counts[int(rng.integers(len(cfg.clause_counts)))]
        words, plural = [], 0
        for c in range(n_clauses):
            if c:
                words.append(lexicons[lang].conj)
            clause, num = sampler.clause()
            words += clause
            plural += num == "pl"
        lines.append(" ".join(words))
        labels.append(int(plural * 2 > n_clauses))
        langs.append(lang)
    return SynthCorpus(lines, labels, langs, cfg)


def probe_label(line: str, grammar: GrammarConfig | None = None) -> int:
    """Majority number of clause subjects, read back from the surface text."""
    cfg = grammar or GrammarConfig()
    numbers = {}
    for k in range(cfg.num_languages):
        lex = make_lexicon(cfg, k)
        numbers.update(lex.number_of_noun())
        numbers[lex.conj] = "conj"
    votes, clauses, seen_subject = 0, 0, False
    for tok in line.split():
        kind = numbers.get(tok)
        if kind == "conj":
            seen_subject = False
        elif kind in ("sg", "pl") and not seen_subject:
            seen_subject = True
            clauses += 1
            votes += kind == "pl"
    return int(votes * 2 > clauses)


# -- encoded corpora and batching -----------------------------------------------

@dataclass
class EncodedCorpus:
    """Id sequences (each wrapped in [CLS] ... [SEP]) plus optional labels."""

    sequences: list[list[int]]
    labels: list[int] | None
    vocab_size: int

    def __len__(self) -> int:
        return len(self.sequences)

    def subset(self, indices) -> "EncodedCorpus":
        labels = None if self.labels is None else [self.labels[i] for i in indices]
        return EncodedCorpus([self.sequences[i] for i in indices], labels, self.vocab_size)


def encode_corpus(lines: Sequence[str], vocab: Vocab, labels=None,
                  max_len: int | None = None) -> EncodedCorpus:
    seqs = []
    for line in lines:
        ids = [CLS, *vocab.encode(line), SEP]
        if max_len is not None and len(ids) > max_len:
            ids = ids[:max_len - 1] + [SEP]
        seqs.append(ids)
    return EncodedCorpus(seqs, None if labels is None else list(labels), len(vocab))


def grammar_vocab(grammar: GrammarConfig | None = None) -> Vocab:
    """Every word the grammar can emit, sorted, so ids do not depend on corpus size or seed."""
    cfg = grammar or GrammarConfig()
    words = set()
    for k in range(cfg.num_languages):
        lex = make_lexicon(cfg, k)
        words.update(lex.det_sg + lex.det_pl + lex.adjectives + (lex.rel, lex.conj))
        for table in (lex.nouns, lex.verbs):
            for group in table.values():
                words.update(group)
    return Vocab(sorted(words))


def desk_corpus(num_seqs: int, seed: int, vocab_size: int = 256, max_len: int = 64,
                grammar: GrammarConfig | None = None):
    """Synthetic corpus, its grammar-wide vocabulary and the encoding in one call."""
    synth = synth_corpus(num_seqs, seed, grammar)
    vocab = grammar_vocab(synth.grammar)
    if len(vocab) > vocab_size:
        raise ValueError("vocabulary larger than the model's vocab_size")
    return synth, vocab, encode_corpus(synth.lines, vocab, synth.labels, max_len)


def sample_batch(corpus: EncodedCorpus, batch_size: int, seed, max_len: int | None = None,
                 mask_prob: float = 0.15, vocab_size: int | None = None) -> Batch:
    """Draw a random batch and apply MLM masking; pure function of ``seed``."""
    if len(corpus) < batch_size:
        raise ValueError(f"corpus has {len(corpus)} sequences, fewer than one batch "
                         f"of {batch_size}")
    rng = make_rng(seed)
    idx = rng.choice(len(corpus), size=batch_size, replace=False)
    labels = None if corpus.labels is None else [corpus.labels[i] for i in idx]
    batch = pad_batch([corpus.sequences[i] for i in idx], max_len, labels)
    if mask_prob > 0:
        batch = mask_batch(batch, mask_prob, (seed, 1), vocab_size or corpus.vocab_size)
    return batch


def iterate_batches(corpus: EncodedCorpus, batch_size: int, steps: int, seed: int,
                    max_len: int | None = None, mask_prob: float = 0.15) -> Iterator[Batch]:
    for step in range(steps):
        yield sample_batch(corpus, batch_size, (seed, step), max_len, mask_prob)


def ordered_batches(corpus: EncodedCorpus, batch_size: int,
                    max_len: int | None = None) -> Iterator[Batch]:
    """Unmasked batches covering the corpus in order (for evaluation)."""
    for start in range(0, len(corpus), batch_size):
        idx = range(start, min(start + batch_size, len(corpus)))
        labels = None if corpus.labels is None else [corpus.labels[i] for i in idx]
        yield pad_batch([corpus.sequences[i] for i in idx], max_len, labels)


# -- file formats ----------------------------------------------------------------

def write_corpus(path, lines: Iterable[str]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for line in lines:
            if "\n" in line:
                raise ValueError("corpus lines may not contain newlines")
            fh.write(line + "\n")


def read_corpus(path) -> list[str]:
    with open(path, encoding="utf-8") as fh:
        return [line.rstrip("\n") for line in fh if line.strip()]


def write_pretokenized(path, sequences: Iterable[Sequence[int]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for seq in sequences:
            fh.write(" ".join(str(int(i)) for i in seq) + "\n")


def read_pretokenized(path) -> list[list[int]]:
    with open(path, encoding="utf-8") as fh:
        return [[int(tok) for tok in line.split()] for line in fh if line.strip()]


def write_probe_labels(path, labels: Sequence[int]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["line_index", "label"])
        writer.writerows(enumerate(int(x) for x in labels))


def read_probe_labels(path) -> list[int]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    out = [0] * len(rows)
    for row in rows:
        out[int(row["line_index"])] = int(row["label"])
    return out
